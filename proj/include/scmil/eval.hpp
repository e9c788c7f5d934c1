#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "scmil/data.hpp"
#include "scmil/model.hpp"

namespace scmil {

struct SlidePrediction {
  int64_t slide_id = 0;
  size_t predicted_class = 0;
  std::vector<double> mean_probs;      // per-class mean softmax across bags, sums to 1
  std::vector<size_t> bag_predictions; // per-bag argmax
};

struct MetricsReport {
  double macro_f1 = 0.0;        // percent
  double macro_auroc = 0.0;     // percent
  std::vector<double> per_class_f1;  // percent
  std::vector<std::vector<size_t>> confusion;  // [true][pred]
  std::string split;
  double rho = 0.0;
  std::string method;
};

std::vector<double> softmax_values(const std::vector<double>& logits);

// Exhaustive bagging + per-bag argmax; slide class is the vote mode, ties
// broken by summed softmax probability, then lowest class index.
SlidePrediction predict_slide(const Slide& slide, const ModelParams& params,
                              size_t bag_size, uint64_t seed);

// Unweighted mean of per-class F1; a class with no predicted and no actual
// positives scores 0. Returns percent.
double macro_f1(const std::vector<size_t>& preds, const std::vector<int>& labels,
                size_t k);

std::vector<double> per_class_f1(const std::vector<size_t>& preds,
                                 const std::vector<int>& labels, size_t k);

// Macro 1-vs-rest AUROC via the rank-statistic form with midrank ties.
// Classes absent from the labels are skipped. Returns percent.
double auroc_ovr_macro(const std::vector<std::vector<double>>& scores,
                       const std::vector<int>& labels, size_t k);

MetricsReport evaluate(const std::vector<Slide>& slides, const ModelParams& params,
                       size_t bag_size, uint64_t seed, const std::string& split,
                       double rho, const std::string& method);

std::string metrics_csv_header(size_t k);
std::string metrics_csv_row(const MetricsReport& report, uint64_t seed);

}  // namespace scmil
