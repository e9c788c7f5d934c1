#include "scmil/model.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace scmil {

namespace {

using nlohmann::json;

struct LayerSpec {
  std::string name;
  std::vector<size_t> shape;
  size_t fan_in;
};

std::vector<LayerSpec> layer_specs(const ModelConfig& c) {
  return {
      {"enc.w1", {c.d_in, c.d_h}, c.d_in}, {"enc.b1", {c.d_h}, c.d_in},
      {"enc.w2", {c.d_h, c.d_f}, c.d_h},   {"enc.b2", {c.d_f}, c.d_h},
      {"attn.w1", {c.d_f, c.d_a}, c.d_f},  {"attn.b1", {c.d_a}, c.d_f},
      {"attn.w2", {c.d_a, 1}, c.d_a},      {"attn.b2", {1}, c.d_a},
      {"clf.w", {c.d_f, c.k}, c.d_f},      {"clf.b", {c.k}, c.d_f},
      {"proj.w1", {c.d_f, c.d_h}, c.d_f},  {"proj.b1", {c.d_h}, c.d_f},
      {"proj.w2", {c.d_h, c.d_z}, c.d_h},  {"proj.b2", {c.d_z}, c.d_h},
  };
}

void check_config(const ModelConfig& c) {
  if (c.d_in == 0 || c.d_h == 0 || c.d_f == 0 || c.d_a == 0 || c.d_z == 0 || c.k == 0) {
    throw ShapeError("model config: all dimensions must be positive");
  }
}

std::string hex_encode(const std::vector<double>& values) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(values.size() * 16);
  for (double v : values) {
    uint64_t bits = std::bit_cast<uint64_t>(v);
    for (int shift = 60; shift >= 0; shift -= 4) {
      out.push_back(digits[(bits >> shift) & 0xF]);
    }
  }
  return out;
}

std::vector<double> hex_decode(const std::string& hex, size_t expected) {
  if (hex.size() != expected * 16) {
    throw std::runtime_error("checkpoint: bad hex payload length " +
                             std::to_string(hex.size()));
  }
  std::vector<double> out(expected);
  for (size_t i = 0; i < expected; ++i) {
    uint64_t bits = 0;
    for (size_t j = 0; j < 16; ++j) {
      char c = hex[i * 16 + j];
      uint64_t nib;
      if (c >= '0' && c <= '9') nib = static_cast<uint64_t>(c - '0');
      else if (c >= 'a' && c <= 'f') nib = static_cast<uint64_t>(c - 'a' + 10);
      else if (c >= 'A' && c <= 'F') nib = static_cast<uint64_t>(c - 'A' + 10);
      else throw std::runtime_error("checkpoint: bad hex digit");
      bits = (bits << 4) | nib;
    }
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

}  // namespace

const Tensor& ModelParams::get(const std::string& name) const {
  return tensors[index_of(name)];
}

Tensor& ModelParams::get(const std::string& name) { return tensors[index_of(name)]; }

size_t ModelParams::index_of(const std::string& name) const {
  for (size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return i;
  }
  throw std::out_of_range("model: no parameter named " + name);
}

size_t ModelParams::total_coords() const {
  size_t n = 0;
  for (const Tensor& t : tensors) n += t.numel();
  return n;
}

ModelParams init_params(const ModelConfig& config, uint64_t seed) {
  check_config(config);
  Rng rng(seed);
  ModelParams params;
  params.config = config;
  for (const LayerSpec& spec : layer_specs(config)) {
    double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
    Tensor t(spec.shape);
    for (double& v : t.values) v = rng.uniform(-bound, bound);
    params.names.push_back(spec.name);
    params.tensors.push_back(std::move(t));
  }
  return params;
}

ParamNodes register_params(Tape& tape, const ModelParams& params) {
  ParamNodes nodes;
  nodes.ids.reserve(params.count());
  for (const Tensor& t : params.tensors) nodes.ids.push_back(tape.input(t));
  return nodes;
}

NodeId encode(Tape& tape, NodeId instances, const ModelParams& params,
              const ParamNodes& nodes) {
  const Tensor& x = tape.value(instances);
  if (x.rank() != 2 || x.rows() == 0) {
    throw ShapeError("encode: empty bag or non-matrix input " + x.shape_str());
  }
  if (x.cols() != params.config.d_in) {
    throw ShapeError("encode: instance width " + x.shape_str() + " does not match d_in=" +
                     std::to_string(params.config.d_in));
  }
  NodeId h = tape.tanh(tape.add(tape.matmul(instances, nodes.at(params, "enc.w1")),
                                nodes.at(params, "enc.b1")));
  return tape.tanh(tape.add(tape.matmul(h, nodes.at(params, "enc.w2")),
                            nodes.at(params, "enc.b2")));
}

NodeId attend(Tape& tape, NodeId features, const ModelParams& params,
              const ParamNodes& nodes) {
  const Tensor& f = tape.value(features);
  if (f.rank() != 2 || f.rows() == 0) {
    throw ShapeError("attend: empty bag or non-matrix input " + f.shape_str());
  }
  NodeId h = tape.tanh(tape.add(tape.matmul(features, nodes.at(params, "attn.w1")),
                                nodes.at(params, "attn.b1")));
  NodeId scores = tape.add(tape.matmul(h, nodes.at(params, "attn.w2")),
                           nodes.at(params, "attn.b2"));
  return tape.softmax(tape.reshape(scores, {f.rows()}), 0);
}

NodeId bag_embed(Tape& tape, NodeId features, NodeId alpha) {
  const Tensor& f = tape.value(features);
  const Tensor& a = tape.value(alpha);
  if (a.rank() != 1 || f.rank() != 2 || a.numel() != f.rows()) {
    throw ShapeError("bag_embed: attention length " + a.shape_str() +
                     " does not match features " + f.shape_str());
  }
  NodeId row = tape.matmul(tape.reshape(alpha, {1, a.numel()}), features);
  return tape.reshape(row, {f.cols()});
}

NodeId classify(Tape& tape, NodeId bag_features, const ModelParams& params,
                const ParamNodes& nodes) {
  return tape.add(tape.matmul(bag_features, nodes.at(params, "clf.w")),
                  nodes.at(params, "clf.b"));
}

NodeId project(Tape& tape, NodeId bag_features, const ModelParams& params,
               const ParamNodes& nodes) {
  NodeId h = tape.tanh(tape.add(tape.matmul(bag_features, nodes.at(params, "proj.w1")),
                                nodes.at(params, "proj.b1")));
  NodeId z = tape.add(tape.matmul(h, nodes.at(params, "proj.w2")),
                      nodes.at(params, "proj.b2"));
  return tape.l2_normalize(z, 1);
}

NodeId embed_bag(Tape& tape, NodeId instances, const ModelParams& params,
                 const ParamNodes& nodes) {
  NodeId features = encode(tape, instances, params, nodes);
  NodeId alpha = attend(tape, features, params, nodes);
  return bag_embed(tape, features, alpha);
}

size_t argmax_lowest(const double* v, size_t n) {
  size_t best = 0;
  for (size_t i = 1; i < n; ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

BagForward forward_bag(const Tensor& instances, const ModelParams& params) {
  Tape tape;
  ParamNodes nodes = register_params(tape, params);
  NodeId x = tape.input(instances);
  NodeId features = encode(tape, x, params, nodes);
  NodeId alpha = attend(tape, features, params, nodes);
  NodeId b = bag_embed(tape, features, alpha);
  NodeId b_row = tape.reshape(b, {1, params.config.d_f});
  NodeId logits = classify(tape, b_row, params, nodes);
  NodeId z = project(tape, b_row, params, nodes);

  BagForward out;
  out.features = tape.value(features);
  out.alpha = tape.value(alpha);
  out.embedding = tape.value(b);
  out.logits = Tensor({params.config.k}, tape.value(logits).values);
  out.projection = Tensor({params.config.d_z}, tape.value(z).values);
  out.predicted_class = argmax_lowest(out.logits.values.data(), out.logits.numel());
  return out;
}

std::string checkpoint_to_json(const ModelParams& params, uint64_t init_seed,
                               const std::string& config_echo) {
  json doc;
  doc["format"] = "scmil-checkpoint";
  doc["version"] = 1;
  doc["config"] = {{"d_in", params.config.d_in}, {"d_h", params.config.d_h},
                   {"d_f", params.config.d_f},   {"d_a", params.config.d_a},
                   {"d_z", params.config.d_z},   {"k", params.config.k}};
  doc["init_seed"] = init_seed;
  doc["config_echo"] = config_echo;
  json plist = json::array();
  for (size_t i = 0; i < params.count(); ++i) {
    plist.push_back({{"name", params.names[i]},
                     {"shape", params.tensors[i].shape},
                     {"hex", hex_encode(params.tensors[i].values)}});
  }
  doc["params"] = std::move(plist);
  return doc.dump(2);
}

ModelParams checkpoint_from_json(const std::string& text, uint64_t* init_seed,
                                 std::string* config_echo) {
  json doc = json::parse(text);
  if (doc.value("format", "") != "scmil-checkpoint" || doc.value("version", 0) != 1) {
    throw std::runtime_error("checkpoint: unknown format or version");
  }
  ModelConfig config;
  const json& c = doc.at("config");
  config.d_in = c.at("d_in").get<size_t>();
  config.d_h = c.at("d_h").get<size_t>();
  config.d_f = c.at("d_f").get<size_t>();
  config.d_a = c.at("d_a").get<size_t>();
  config.d_z = c.at("d_z").get<size_t>();
  config.k = c.at("k").get<size_t>();

  ModelParams params;
  params.config = config;
  auto specs = layer_specs(config);
  const json& plist = doc.at("params");
  if (plist.size() != specs.size()) {
    throw std::runtime_error("checkpoint: expected " + std::to_string(specs.size()) +
                             " parameter tensors, found " + std::to_string(plist.size()));
  }
  for (size_t i = 0; i < specs.size(); ++i) {
    const json& p = plist[i];
    if (p.at("name").get<std::string>() != specs[i].name) {
      throw std::runtime_error("checkpoint: parameter order mismatch at " + specs[i].name);
    }
    std::vector<size_t> shape = p.at("shape").get<std::vector<size_t>>();
    if (shape != specs[i].shape) {
      throw std::runtime_error("checkpoint: shape mismatch for " + specs[i].name);
    }
    std::vector<double> values =
        hex_decode(p.at("hex").get<std::string>(), Tensor::numel_of(shape));
    params.names.push_back(specs[i].name);
    params.tensors.emplace_back(shape, std::move(values));
  }
  if (init_seed) *init_seed = doc.value("init_seed", uint64_t{0});
  if (config_echo) *config_echo = doc.value("config_echo", std::string{});
  return params;
}

void save_checkpoint(const std::string& path, const ModelParams& params,
                     uint64_t init_seed, const std::string& config_echo) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  out << checkpoint_to_json(params, init_seed, config_echo);
  out << "\n";
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

ModelParams load_checkpoint(const std::string& path, uint64_t* init_seed,
                            std::string* config_echo) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return checkpoint_from_json(buf.str(), init_seed, config_echo);
}

}  // namespace scmil
