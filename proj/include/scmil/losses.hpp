#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "scmil/tape.hpp"
#include "scmil/tensor.hpp"

namespace scmil {

// How the per-anchor contrastive terms are combined. Sum is the plain
// double sum over anchors; MeanOverAnchors divides by the number of anchors
// that have at least one positive.
enum class SclReduction { Sum, MeanOverAnchors };

struct BatchProjections {
  Tensor z;                 // B x d_z, rows unit norm
  std::vector<int> labels;  // class index per bag
  void validate(size_t k) const;
};

enum class CurriculumKind { Linear };

struct CurriculumSpec {
  int64_t total_steps = 1;
  CurriculumKind kind = CurriculumKind::Linear;
  double beta_start = 1.0;
  double beta_end = 0.0;
  void validate() const;
};

struct ClassCounts {
  std::vector<int64_t> n;  // per-class training sample counts, all >= 1
  void validate() const;
};

// Supervised contrastive loss over bag projections: for each anchor i the
// positives are the same-label bags (excluding i) and the denominator runs
// over all other bags. Anchors without positives contribute 0.
NodeId supcon_bag_loss(Tape& tape, NodeId z, const std::vector<int>& labels,
                       double tau, SclReduction reduction = SclReduction::Sum);
double supcon_bag_loss(const BatchProjections& batch, double tau,
                       SclReduction reduction = SclReduction::Sum);

// Weighted mean of -log softmax at the true class. Per-sample losses are
// multiplied by the weight of the true class and divided by the sum of the
// applied weights.
NodeId cross_entropy(Tape& tape, NodeId logits, const std::vector<int>& labels,
                     const std::vector<double>* class_weights = nullptr);
double cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                     const std::vector<double>* class_weights = nullptr);

// Linear decay from beta_start at t=0 to beta_end at t=total_steps;
// t past the end clamps to beta_end.
double beta_schedule(int64_t t, const CurriculumSpec& spec);

// beta * SCL + (1 - beta) * CE.
struct BlendNodes {
  NodeId scl;
  NodeId ce;
  NodeId blend;
};
BlendNodes scmil_loss_nodes(Tape& tape, NodeId z, NodeId logits,
                            const std::vector<int>& labels, double beta_t, double tau,
                            SclReduction reduction = SclReduction::MeanOverAnchors,
                            const std::vector<double>* class_weights = nullptr);
NodeId scmil_loss(Tape& tape, NodeId z, NodeId logits, const std::vector<int>& labels,
                  double beta_t, double tau,
                  SclReduction reduction = SclReduction::MeanOverAnchors,
                  const std::vector<double>* class_weights = nullptr);
double scmil_loss(const BatchProjections& batch, const Tensor& logits,
                  double beta_t, double tau,
                  SclReduction reduction = SclReduction::MeanOverAnchors);

// Cross-entropy with the true-class logit reduced by C / n_j^(1/4) before
// softmax. C = 0 degenerates to plain cross-entropy.
NodeId ldam_loss(Tape& tape, NodeId logits, const std::vector<int>& labels,
                 const ClassCounts& counts, double margin_scale,
                 const std::vector<double>* class_weights = nullptr);
double ldam_loss(const Tensor& logits, const std::vector<int>& labels,
                 const ClassCounts& counts, double margin_scale,
                 const std::vector<double>* class_weights = nullptr);

// Per-class margins C / n_j^(1/4).
std::vector<double> ldam_margins(const ClassCounts& counts, double margin_scale);
// margin_scale that makes the largest margin equal max_margin.
double ldam_scale_for_max_margin(const ClassCounts& counts, double max_margin);

// Deferred reweighting: all ones before defer_epoch, then effective-number
// weights (1 - b) / (1 - b^n_j), renormalized to mean 1.
std::vector<double> drw_weights(const ClassCounts& counts, double beta_eff,
                                int64_t epoch, int64_t defer_epoch);

}  // namespace scmil
