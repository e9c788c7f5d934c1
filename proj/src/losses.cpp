#include "scmil/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace scmil {

namespace {

// Large enough that exp(x - max) underflows to exactly 0 for masked entries.
constexpr double kMaskValue = -1e9;

void check_labels(const std::vector<int>& labels, size_t k, const char* op) {
  for (int y : labels) {
    if (y < 0 || static_cast<size_t>(y) >= k) {
      throw ShapeError(std::string(op) + ": label " + std::to_string(y) +
                       " outside [0, " + std::to_string(k) + ")");
    }
  }
}

}  // namespace

void BatchProjections::validate(size_t k) const {
  if (z.rank() != 2 || z.rows() != labels.size()) {
    throw ShapeError("batch projections: z " + z.shape_str() + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  if (z.rows() < 2) throw ShapeError("batch projections: need at least 2 bags");
  check_labels(labels, k, "batch projections");
  for (size_t i = 0; i < z.rows(); ++i) {
    double ss = 0.0;
    for (size_t j = 0; j < z.cols(); ++j) ss += z.at(i, j) * z.at(i, j);
    if (std::abs(std::sqrt(ss) - 1.0) > 1e-9) {
      throw NumericError("batch projections: row " + std::to_string(i) +
                         " is not unit norm");
    }
  }
}

void CurriculumSpec::validate() const {
  if (total_steps < 1) throw std::invalid_argument("curriculum: total_steps must be >= 1");
  if (beta_start < 0.0 || beta_start > 1.0 || beta_end < 0.0 || beta_end > 1.0) {
    throw std::invalid_argument("curriculum: beta values must lie in [0, 1]");
  }
}

void ClassCounts::validate() const {
  if (n.empty()) throw std::invalid_argument("class counts: empty");
  for (int64_t c : n) {
    if (c < 1) throw std::invalid_argument("class counts: every count must be >= 1");
  }
}

NodeId supcon_bag_loss(Tape& tape, NodeId z, const std::vector<int>& labels,
                       double tau, SclReduction reduction) {
  const Tensor& Z = tape.value(z);
  if (Z.rank() != 2) throw ShapeError("supcon: projections must be B x d, got " + Z.shape_str());
  size_t b = Z.rows();
  if (b < 2) throw ShapeError("supcon: need at least 2 bags, got " + std::to_string(b));
  if (labels.size() != b) {
    throw ShapeError("supcon: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(b) + " bags");
  }
  if (!(tau > 0.0)) {
    throw std::invalid_argument("supcon: tau must be positive, got " + std::to_string(tau));
  }

  // Positive-pair weights and self mask are data, not learnable.
  Tensor mask({b, b});
  Tensor weights({b, b});
  size_t anchors_with_positives = 0;
  for (size_t i = 0; i < b; ++i) {
    mask.at(i, i) = kMaskValue;
    size_t positives = 0;
    for (size_t j = 0; j < b; ++j) {
      if (j != i && labels[j] == labels[i]) ++positives;
    }
    if (positives == 0) continue;
    ++anchors_with_positives;
    double w = 1.0 / static_cast<double>(positives);
    for (size_t j = 0; j < b; ++j) {
      if (j != i && labels[j] == labels[i]) weights.at(i, j) = w;
    }
  }

  NodeId sims = tape.scale(tape.matmul(z, tape.transpose(z)), 1.0 / tau);
  NodeId masked = tape.add(sims, tape.input(std::move(mask)));
  NodeId log_probs = tape.log_softmax(masked, 1);
  NodeId weighted = tape.mul(log_probs, tape.input(std::move(weights)));
  double norm = -1.0;
  if (reduction == SclReduction::MeanOverAnchors && anchors_with_positives > 0) {
    norm = -1.0 / static_cast<double>(anchors_with_positives);
  }
  return tape.scale(tape.reduce_sum(weighted), norm);
}

double supcon_bag_loss(const BatchProjections& batch, double tau, SclReduction reduction) {
  Tape tape;
  NodeId z = tape.input(batch.z);
  return tape.value(supcon_bag_loss(tape, z, batch.labels, tau, reduction)).values[0];
}

NodeId cross_entropy(Tape& tape, NodeId logits, const std::vector<int>& labels,
                     const std::vector<double>* class_weights) {
  const Tensor& L = tape.value(logits);
  if (L.rank() != 2 || L.rows() != labels.size()) {
    throw ShapeError("cross_entropy: logits " + L.shape_str() + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  size_t b = L.rows(), k = L.cols();
  check_labels(labels, k, "cross_entropy");
  if (class_weights && class_weights->size() != k) {
    throw ShapeError("cross_entropy: " + std::to_string(class_weights->size()) +
                     " class weights for " + std::to_string(k) + " classes");
  }

  std::vector<size_t> picks(b);
  for (size_t i = 0; i < b; ++i) picks[i] = static_cast<size_t>(labels[i]);

  Tensor applied({b});
  double weight_sum = 0.0;
  for (size_t i = 0; i < b; ++i) {
    double w = class_weights ? (*class_weights)[picks[i]] : 1.0;
    applied.values[i] = w;
    weight_sum += w;
  }
  if (!(weight_sum > 0.0)) {
    throw std::invalid_argument("cross_entropy: applied weights sum to zero");
  }
  for (double& w : applied.values) w /= weight_sum;

  NodeId log_probs = tape.log_softmax(logits, 1);
  NodeId picked = tape.gather(log_probs, picks);
  NodeId weighted = tape.mul(picked, tape.input(std::move(applied)));
  return tape.scale(tape.reduce_sum(weighted), -1.0);
}

double cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                     const std::vector<double>* class_weights) {
  Tape tape;
  NodeId l = tape.input(logits);
  return tape.value(cross_entropy(tape, l, labels, class_weights)).values[0];
}

double beta_schedule(int64_t t, const CurriculumSpec& spec) {
  spec.validate();
  if (t <= 0) return spec.beta_start;
  if (t >= spec.total_steps) return spec.beta_end;
  double frac = static_cast<double>(t) / static_cast<double>(spec.total_steps);
  return spec.beta_start + (spec.beta_end - spec.beta_start) * frac;
}

BlendNodes scmil_loss_nodes(Tape& tape, NodeId z, NodeId logits,
                            const std::vector<int>& labels, double beta_t, double tau,
                            SclReduction reduction,
                            const std::vector<double>* class_weights) {
  if (!(beta_t >= 0.0 && beta_t <= 1.0)) {
    throw std::invalid_argument("scmil_loss: beta must lie in [0, 1], got " +
                                std::to_string(beta_t));
  }
  BlendNodes nodes;
  nodes.scl = supcon_bag_loss(tape, z, labels, tau, reduction);
  nodes.ce = cross_entropy(tape, logits, labels, class_weights);
  nodes.blend = tape.add(tape.scale(nodes.scl, beta_t), tape.scale(nodes.ce, 1.0 - beta_t));
  return nodes;
}

NodeId scmil_loss(Tape& tape, NodeId z, NodeId logits, const std::vector<int>& labels,
                  double beta_t, double tau, SclReduction reduction,
                  const std::vector<double>* class_weights) {
  return scmil_loss_nodes(tape, z, logits, labels, beta_t, tau, reduction, class_weights)
      .blend;
}

double scmil_loss(const BatchProjections& batch, const Tensor& logits, double beta_t,
                  double tau, SclReduction reduction) {
  Tape tape;
  NodeId z = tape.input(batch.z);
  NodeId l = tape.input(logits);
  return tape.value(scmil_loss(tape, z, l, batch.labels, beta_t, tau, reduction)).values[0];
}

std::vector<double> ldam_margins(const ClassCounts& counts, double margin_scale) {
  counts.validate();
  if (margin_scale < 0.0) {
    throw std::invalid_argument("ldam: margin scale must be >= 0");
  }
  std::vector<double> margins(counts.n.size());
  for (size_t j = 0; j < counts.n.size(); ++j) {
    margins[j] = margin_scale / std::pow(static_cast<double>(counts.n[j]), 0.25);
  }
  return margins;
}

double ldam_scale_for_max_margin(const ClassCounts& counts, double max_margin) {
  counts.validate();
  int64_t n_min = counts.n[0];
  for (int64_t c : counts.n) n_min = std::min(n_min, c);
  return max_margin * std::pow(static_cast<double>(n_min), 0.25);
}

NodeId ldam_loss(Tape& tape, NodeId logits, const std::vector<int>& labels,
                 const ClassCounts& counts, double margin_scale,
                 const std::vector<double>* class_weights) {
  const Tensor& L = tape.value(logits);
  if (L.rank() != 2 || L.rows() != labels.size()) {
    throw ShapeError("ldam_loss: logits " + L.shape_str() + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  size_t k = L.cols();
  if (counts.n.size() != k) {
    throw ShapeError("ldam_loss: " + std::to_string(counts.n.size()) +
                     " class counts for " + std::to_string(k) + " classes");
  }
  check_labels(labels, k, "ldam_loss");
  std::vector<double> margins = ldam_margins(counts, margin_scale);

  NodeId adjusted = logits;
  if (margin_scale != 0.0) {
    Tensor shift({L.rows(), k});
    for (size_t i = 0; i < L.rows(); ++i) {
      shift.at(i, static_cast<size_t>(labels[i])) = -margins[static_cast<size_t>(labels[i])];
    }
    adjusted = tape.add(logits, tape.input(std::move(shift)));
  }
  return cross_entropy(tape, adjusted, labels, class_weights);
}

double ldam_loss(const Tensor& logits, const std::vector<int>& labels,
                 const ClassCounts& counts, double margin_scale,
                 const std::vector<double>* class_weights) {
  Tape tape;
  NodeId l = tape.input(logits);
  return tape.value(ldam_loss(tape, l, labels, counts, margin_scale, class_weights))
      .values[0];
}

std::vector<double> drw_weights(const ClassCounts& counts, double beta_eff,
                                int64_t epoch, int64_t defer_epoch) {
  counts.validate();
  if (!(beta_eff >= 0.0 && beta_eff < 1.0)) {
    throw std::invalid_argument("drw: beta_eff must lie in [0, 1)");
  }
  size_t k = counts.n.size();
  if (epoch < defer_epoch) return std::vector<double>(k, 1.0);

  std::vector<double> w(k);
  double sum = 0.0;
  for (size_t j = 0; j < k; ++j) {
    double effective = (1.0 - std::pow(beta_eff, static_cast<double>(counts.n[j]))) /
                       (1.0 - beta_eff);
    w[j] = 1.0 / effective;
    sum += w[j];
  }
  for (double& v : w) v *= static_cast<double>(k) / sum;
  return w;
}

}  // namespace scmil
