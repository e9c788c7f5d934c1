#include "scmil/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "scmil/rng.hpp"
#include "scmil/text.hpp"

namespace scmil {

std::vector<double> softmax_values(const std::vector<double>& logits) {
  double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double s = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    s += out[i];
  }
  for (double& v : out) v /= s;
  return out;
}

SlidePrediction predict_slide(const Slide& slide, const ModelParams& params,
                              size_t bag_size, uint64_t seed) {
  if (slide.instances.rank() != 2 || slide.instances.rows() == 0) {
    throw ShapeError("predict_slide: empty slide " + std::to_string(slide.slide_id));
  }
  uint64_t split_seed = Rng::splitmix64(
      seed ^ (0x9E3779B97F4A7C15ULL * static_cast<uint64_t>(slide.slide_id + 1)));
  std::vector<Bag> bags = split_slide_into_bags(slide, bag_size, split_seed);

  size_t k = params.config.k;
  SlidePrediction pred;
  pred.slide_id = slide.slide_id;
  pred.mean_probs.assign(k, 0.0);
  std::vector<size_t> votes(k, 0);

  for (const Bag& bag : bags) {
    BagForward fwd = forward_bag(bag.instances, params);
    std::vector<double> probs = softmax_values(fwd.logits.values);
    for (size_t c = 0; c < k; ++c) pred.mean_probs[c] += probs[c];
    pred.bag_predictions.push_back(fwd.predicted_class);
    ++votes[fwd.predicted_class];
  }
  double inv = 1.0 / static_cast<double>(bags.size());
  for (double& p : pred.mean_probs) p *= inv;

  // Majority vote; ties by summed (equivalently mean) probability, then
  // lowest class index.
  size_t best = 0;
  for (size_t c = 1; c < k; ++c) {
    if (votes[c] > votes[best] ||
        (votes[c] == votes[best] && pred.mean_probs[c] > pred.mean_probs[best])) {
      best = c;
    }
  }
  pred.predicted_class = best;
  return pred;
}

std::vector<double> per_class_f1(const std::vector<size_t>& preds,
                                 const std::vector<int>& labels, size_t k) {
  if (k == 0) throw std::invalid_argument("macro_f1: k must be positive");
  if (preds.size() != labels.size()) {
    throw std::invalid_argument("macro_f1: predictions and labels differ in length");
  }
  std::vector<double> tp(k, 0.0), fp(k, 0.0), fn(k, 0.0);
  for (size_t i = 0; i < preds.size(); ++i) {
    auto y = static_cast<size_t>(labels[i]);
    size_t p = preds[i];
    if (p == y) {
      tp[y] += 1.0;
    } else {
      fp[p] += 1.0;
      fn[y] += 1.0;
    }
  }
  std::vector<double> f1(k, 0.0);
  for (size_t c = 0; c < k; ++c) {
    double denom = 2.0 * tp[c] + fp[c] + fn[c];
    f1[c] = denom > 0.0 ? 100.0 * 2.0 * tp[c] / denom : 0.0;
  }
  return f1;
}

double macro_f1(const std::vector<size_t>& preds, const std::vector<int>& labels,
                size_t k) {
  std::vector<double> f1 = per_class_f1(preds, labels, k);
  return std::accumulate(f1.begin(), f1.end(), 0.0) / static_cast<double>(k);
}

double auroc_ovr_macro(const std::vector<std::vector<double>>& scores,
                       const std::vector<int>& labels, size_t k) {
  if (scores.size() != labels.size() || scores.empty()) {
    throw std::invalid_argument("auroc: scores and labels must align and be non-empty");
  }
  size_t n = scores.size();
  double total = 0.0;
  size_t used = 0;
  for (size_t c = 0; c < k; ++c) {
    size_t positives = 0;
    for (int y : labels) {
      if (static_cast<size_t>(y) == c) ++positives;
    }
    if (positives == 0 || positives == n) continue;  // undefined for this class

    // Midranks over the class-c score column.
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      return scores[a][c] < scores[b][c];
    });
    std::vector<double> rank(n, 0.0);
    size_t i = 0;
    while (i < n) {
      size_t j = i;
      while (j + 1 < n && scores[order[j + 1]][c] == scores[order[i]][c]) ++j;
      double mid = 0.5 * static_cast<double>(i + j) + 1.0;  // ranks are 1-based
      for (size_t t = i; t <= j; ++t) rank[order[t]] = mid;
      i = j + 1;
    }

    double pos_rank_sum = 0.0;
    for (size_t t = 0; t < n; ++t) {
      if (static_cast<size_t>(labels[t]) == c) pos_rank_sum += rank[t];
    }
    double p = static_cast<double>(positives);
    double neg = static_cast<double>(n - positives);
    double auc = (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * neg);
    total += auc;
    ++used;
  }
  if (used == 0) {
    throw std::invalid_argument("auroc: no class has both positives and negatives");
  }
  return 100.0 * total / static_cast<double>(used);
}

MetricsReport evaluate(const std::vector<Slide>& slides, const ModelParams& params,
                       size_t bag_size, uint64_t seed, const std::string& split,
                       double rho, const std::string& method) {
  if (slides.empty()) throw std::invalid_argument("evaluate: no slides");
  size_t k = params.config.k;

  std::vector<size_t> preds;
  std::vector<int> labels;
  std::vector<std::vector<double>> scores;
  MetricsReport report;
  report.confusion.assign(k, std::vector<size_t>(k, 0));

  for (const Slide& slide : slides) {
    SlidePrediction p = predict_slide(slide, params, bag_size, seed);
    preds.push_back(p.predicted_class);
    labels.push_back(slide.label);
    scores.push_back(p.mean_probs);
    report.confusion[static_cast<size_t>(slide.label)][p.predicted_class] += 1;
  }

  report.per_class_f1 = per_class_f1(preds, labels, k);
  report.macro_f1 = std::accumulate(report.per_class_f1.begin(), report.per_class_f1.end(),
                                    0.0) / static_cast<double>(k);
  report.macro_auroc = auroc_ovr_macro(scores, labels, k);
  report.split = split;
  report.rho = rho;
  report.method = method;
  return report;
}

std::string metrics_csv_header(size_t k) {
  std::string h = "method,rho,split,f1,auc";
  for (size_t c = 0; c < k; ++c) h += ",f1_class" + std::to_string(c);
  h += ",seed";
  return h;
}

std::string metrics_csv_row(const MetricsReport& report, uint64_t seed) {
  std::string row = report.method + "," + format_double(report.rho) + "," + report.split +
                    "," + format_double(report.macro_f1) + "," +
                    format_double(report.macro_auroc);
  for (double f : report.per_class_f1) row += "," + format_double(f);
  row += "," + std::to_string(seed);
  return row;
}

}  // namespace scmil
