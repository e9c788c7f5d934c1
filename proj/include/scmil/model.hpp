#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "scmil/rng.hpp"
#include "scmil/tape.hpp"
#include "scmil/tensor.hpp"

namespace scmil {

struct ModelConfig {
  size_t d_in = 32;  // instance feature width
  size_t d_h = 64;   // hidden width (encoder and projection MLPs)
  size_t d_f = 64;   // bag feature width
  size_t d_a = 32;   // attention hidden width
  size_t d_z = 16;   // projection width
  size_t k = 3;      // classes

  bool operator==(const ModelConfig&) const = default;
};

// All learnable weights, in a fixed iteration order:
//   encoder   enc.w1 (d_in x d_h), enc.b1, enc.w2 (d_h x d_f), enc.b2   tanh MLP
//   attention attn.w1 (d_f x d_a), attn.b1, attn.w2 (d_a x 1), attn.b2  tanh then linear
//   classifier clf.w (d_f x k), clf.b                                    linear
//   projection proj.w1 (d_f x d_h), proj.b1, proj.w2 (d_h x d_z), proj.b2
struct ModelParams {
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  size_t count() const { return tensors.size(); }
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  size_t index_of(const std::string& name) const;
  size_t total_coords() const;
};

// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer, seeded.
ModelParams init_params(const ModelConfig& config, uint64_t seed);

// Parameter leaves registered on a tape, aligned with ModelParams order.
struct ParamNodes {
  std::vector<NodeId> ids;
  NodeId at(const ModelParams& params, const std::string& name) const {
    return ids[params.index_of(name)];
  }
};

ParamNodes register_params(Tape& tape, const ModelParams& params);

// Per-instance encoder f: (n x d_in) -> (n x d_f).
NodeId encode(Tape& tape, NodeId instances, const ModelParams& params,
              const ParamNodes& nodes);
// Attention weights over one bag's instances: (n x d_f) -> (n), sums to 1.
NodeId attend(Tape& tape, NodeId features, const ModelParams& params,
              const ParamNodes& nodes);
// b = sum_i alpha_i f(x_i): -> (d_f).
NodeId bag_embed(Tape& tape, NodeId features, NodeId alpha);
// Bag logits: (B x d_f) -> (B x K).
NodeId classify(Tape& tape, NodeId bag_features, const ModelParams& params,
                const ParamNodes& nodes);
// Unit-norm projections: (B x d_f) -> (B x d_z), rows L2-normalized.
NodeId project(Tape& tape, NodeId bag_features, const ModelParams& params,
               const ParamNodes& nodes);

// encode -> attend -> bag_embed for one bag; returns the (d_f) embedding.
NodeId embed_bag(Tape& tape, NodeId instances, const ModelParams& params,
                 const ParamNodes& nodes);

// Value-only forward of a single bag.
struct BagForward {
  Tensor features;  // n x d_f
  Tensor alpha;     // n
  Tensor embedding; // d_f
  Tensor logits;    // K
  Tensor projection;// d_z, unit norm
  size_t predicted_class = 0;  // argmax, ties -> lowest index
};

BagForward forward_bag(const Tensor& instances, const ModelParams& params);

size_t argmax_lowest(const double* v, size_t n);

// Checkpoint: JSON with config, seed and hex-encoded fp64 payloads.
// Round-trips bit-exactly.
std::string checkpoint_to_json(const ModelParams& params, uint64_t init_seed,
                               const std::string& config_echo);
ModelParams checkpoint_from_json(const std::string& text, uint64_t* init_seed = nullptr,
                                 std::string* config_echo = nullptr);
void save_checkpoint(const std::string& path, const ModelParams& params,
                     uint64_t init_seed, const std::string& config_echo);
ModelParams load_checkpoint(const std::string& path, uint64_t* init_seed = nullptr,
                            std::string* config_echo = nullptr);

}  // namespace scmil
