#include "scmil/train.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "scmil/eval.hpp"
#include "scmil/text.hpp"

namespace scmil {

namespace {

using nlohmann::json;

void check_keys(const json& obj, const std::set<std::string>& allowed,
                const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw std::invalid_argument("config: unknown key \"" + it.key() + "\" in " + where);
    }
  }
}

std::vector<double> parse_vector_or_scalar(const json& v, size_t width,
                                           const std::string& where) {
  if (v.is_number()) return std::vector<double>(width, v.get<double>());
  auto out = v.get<std::vector<double>>();
  if (out.size() != width) {
    throw std::invalid_argument("config: " + where + " must be a scalar or a length-" +
                                std::to_string(width) + " array");
  }
  return out;
}

}  // namespace

std::string method_name(Method m) {
  switch (m) {
    case Method::ErmRS: return "ERM-RS";
    case Method::ErmCB: return "ERM-CB";
    case Method::LdamDRW: return "LDAM-DRW";
    case Method::ScmilRS: return "SC-MIL-RS";
    case Method::ScmilCB: return "SC-MIL-CB";
  }
  throw std::logic_error("method_name: bad enum");
}

Method method_from_name(const std::string& name) {
  if (name == "ERM-RS") return Method::ErmRS;
  if (name == "ERM-CB") return Method::ErmCB;
  if (name == "LDAM-DRW") return Method::LdamDRW;
  if (name == "SC-MIL-RS") return Method::ScmilRS;
  if (name == "SC-MIL-CB") return Method::ScmilCB;
  throw std::invalid_argument(
      "config: unknown method \"" + name +
      "\" (expected ERM-RS, ERM-CB, LDAM-DRW, SC-MIL-RS or SC-MIL-CB)");
}

bool method_is_contrastive(Method m) {
  return m == Method::ScmilRS || m == Method::ScmilCB;
}

bool method_uses_class_balanced_sampling(Method m) {
  return m == Method::ErmCB || m == Method::ScmilCB;
}

void ExperimentConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("config: lr must be positive");
  if (!(tau > 0.0)) throw std::invalid_argument("config: tau must be positive");
  if (steps < 0) throw std::invalid_argument("config: steps must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  if (method_is_contrastive(method) && batch_size < 2) {
    throw std::invalid_argument("config: contrastive methods need batch_size >= 2");
  }
  if (bag_size < 1) throw std::invalid_argument("config: bag_size must be >= 1");
  if (bag_size > dataset.instances_per_slide) {
    throw std::invalid_argument("config: bag_size exceeds instances per slide");
  }
  if (rho < 1.0) throw std::invalid_argument("config: rho must be >= 1");
  if (majority_class >= model.k) {
    throw std::invalid_argument("config: majority_class out of range");
  }
  if (stage_mode == StageMode::TwoStage && !method_is_contrastive(method)) {
    throw std::invalid_argument("config: two-stage training requires an SC-MIL method");
  }
  if (eval_every < 1) throw std::invalid_argument("config: eval_every must be >= 1");
  if (grad_clip_norm < 0.0) throw std::invalid_argument("config: grad_clip_norm must be >= 0");
  curriculum().validate();
  dataset.validate();
  shift.validate();
}

CurriculumSpec ExperimentConfig::curriculum() const {
  CurriculumSpec spec;
  spec.total_steps = steps > 0 ? steps : 1;
  spec.kind = CurriculumKind::Linear;
  spec.beta_start = beta_start;
  spec.beta_end = beta_end;
  return spec;
}

ExperimentConfig config_from_json(const std::string& text) {
  json doc = json::parse(text);
  check_keys(doc, {"version", "method", "stage_mode", "rho", "train_total",
                   "majority_class", "bag_size", "batch_size", "steps", "lr", "adam",
                   "tau", "curriculum", "scl_reduction", "ldam", "model", "seeds",
                   "dataset", "shift", "eval_every", "grad_clip_norm"},
             "config root");
  if (doc.value("version", 0) != 1) {
    throw std::invalid_argument("config: missing or unsupported version (expected 1)");
  }

  ExperimentConfig c;
  c.method = method_from_name(doc.at("method").get<std::string>());
  std::string stage = doc.value("stage_mode", "single");
  if (stage == "single") c.stage_mode = StageMode::Single;
  else if (stage == "two") c.stage_mode = StageMode::TwoStage;
  else throw std::invalid_argument("config: stage_mode must be \"single\" or \"two\"");

  c.rho = doc.value("rho", 1.0);
  c.train_total = doc.value("train_total", size_t{288});
  c.majority_class = doc.value("majority_class", size_t{0});
  c.bag_size = doc.value("bag_size", size_t{32});
  c.batch_size = doc.value("batch_size", size_t{16});
  c.steps = doc.value("steps", int64_t{3000});
  c.lr = doc.value("lr", 1e-4);
  c.tau = doc.value("tau", 1.0);
  c.eval_every = doc.value("eval_every", int64_t{200});
  c.grad_clip_norm = doc.value("grad_clip_norm", 0.0);

  if (doc.contains("adam")) {
    const json& a = doc["adam"];
    check_keys(a, {"beta1", "beta2", "eps"}, "adam");
    c.adam.beta1 = a.value("beta1", 0.9);
    c.adam.beta2 = a.value("beta2", 0.999);
    c.adam.eps = a.value("eps", 1e-8);
  }
  if (doc.contains("curriculum")) {
    const json& cur = doc["curriculum"];
    check_keys(cur, {"kind", "beta_start", "beta_end"}, "curriculum");
    if (cur.value("kind", "linear") != "linear") {
      throw std::invalid_argument("config: curriculum kind must be \"linear\"");
    }
    c.beta_start = cur.value("beta_start", 1.0);
    c.beta_end = cur.value("beta_end", 0.0);
  }
  if (doc.contains("scl_reduction")) {
    std::string red = doc["scl_reduction"].get<std::string>();
    if (red == "mean") c.scl_reduction = SclReduction::MeanOverAnchors;
    else if (red == "sum") c.scl_reduction = SclReduction::Sum;
    else throw std::invalid_argument("config: scl_reduction must be \"mean\" or \"sum\"");
  }
  if (doc.contains("ldam")) {
    const json& l = doc["ldam"];
    check_keys(l, {"max_margin", "beta_eff", "defer_frac"}, "ldam");
    c.ldam.max_margin = l.value("max_margin", 0.5);
    c.ldam.beta_eff = l.value("beta_eff", 0.9999);
    c.ldam.defer_frac = l.value("defer_frac", 0.6);
  }
  if (doc.contains("model")) {
    const json& m = doc["model"];
    check_keys(m, {"d_in", "d_h", "d_f", "d_a", "d_z", "k"}, "model");
    c.model.d_in = m.value("d_in", size_t{32});
    c.model.d_h = m.value("d_h", size_t{64});
    c.model.d_f = m.value("d_f", size_t{64});
    c.model.d_a = m.value("d_a", size_t{32});
    c.model.d_z = m.value("d_z", size_t{16});
    c.model.k = m.value("k", size_t{3});
  }
  if (doc.contains("seeds")) {
    const json& s = doc["seeds"];
    check_keys(s, {"data", "init", "sampling"}, "seeds");
    c.seeds.data = s.value("data", uint64_t{1});
    c.seeds.init = s.value("init", uint64_t{2});
    c.seeds.sampling = s.value("sampling", uint64_t{3});
  }

  c.dataset.k = c.model.k;
  c.dataset.d_in = c.model.d_in;
  c.dataset.seed = c.seeds.data;
  c.dataset.slides_per_class.assign(c.model.k, 240);
  if (doc.contains("dataset")) {
    const json& d = doc["dataset"];
    check_keys(d, {"train_pool_per_class", "val_per_class", "test_per_class",
                   "ood_per_class", "instances_per_slide", "witness_rate",
                   "mean_separation", "sigma", "sigma_bg", "means", "background_mean"},
               "dataset");
    if (d.contains("train_pool_per_class")) {
      const json& tp = d["train_pool_per_class"];
      if (tp.is_number()) {
        c.dataset.slides_per_class.assign(c.model.k, tp.get<size_t>());
      } else {
        c.dataset.slides_per_class = tp.get<std::vector<size_t>>();
      }
    }
    c.val_per_class = d.value("val_per_class", size_t{20});
    c.test_per_class = d.value("test_per_class", size_t{40});
    c.ood_per_class = d.value("ood_per_class", size_t{40});
    c.dataset.instances_per_slide = d.value("instances_per_slide", size_t{200});
    c.dataset.witness_rate = d.value("witness_rate", 0.3);
    c.dataset.mean_separation = d.value("mean_separation", 3.0);
    c.dataset.sigma = d.value("sigma", 1.0);
    c.dataset.sigma_bg = d.value("sigma_bg", 1.0);
    if (d.contains("means")) {
      c.dataset.means = d["means"].get<std::vector<std::vector<double>>>();
    }
    if (d.contains("background_mean")) {
      c.dataset.background_mean = d["background_mean"].get<std::vector<double>>();
    }
  }

  c.shift.scale.assign(c.model.d_in, 1.0);
  c.shift.offset.assign(c.model.d_in, 0.0);
  if (doc.contains("shift")) {
    const json& s = doc["shift"];
    check_keys(s, {"scale", "offset", "noise", "seed"}, "shift");
    if (s.contains("scale")) {
      c.shift.scale = parse_vector_or_scalar(s["scale"], c.model.d_in, "shift.scale");
    }
    if (s.contains("offset")) {
      c.shift.offset = parse_vector_or_scalar(s["offset"], c.model.d_in, "shift.offset");
    }
    c.shift.noise = s.value("noise", 0.0);
    c.shift.seed = s.value("seed", uint64_t{7});
  }

  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return config_from_json(buf.str());
}

std::string config_to_json(const ExperimentConfig& c) {
  json doc;
  doc["version"] = 1;
  doc["method"] = method_name(c.method);
  doc["stage_mode"] = c.stage_mode == StageMode::TwoStage ? "two" : "single";
  doc["rho"] = c.rho;
  doc["train_total"] = c.train_total;
  doc["majority_class"] = c.majority_class;
  doc["bag_size"] = c.bag_size;
  doc["batch_size"] = c.batch_size;
  doc["steps"] = c.steps;
  doc["lr"] = c.lr;
  doc["adam"] = {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}};
  doc["tau"] = c.tau;
  doc["curriculum"] = {{"kind", "linear"},
                       {"beta_start", c.beta_start},
                       {"beta_end", c.beta_end}};
  doc["scl_reduction"] = c.scl_reduction == SclReduction::Sum ? "sum" : "mean";
  doc["ldam"] = {{"max_margin", c.ldam.max_margin},
                 {"beta_eff", c.ldam.beta_eff},
                 {"defer_frac", c.ldam.defer_frac}};
  doc["model"] = {{"d_in", c.model.d_in}, {"d_h", c.model.d_h}, {"d_f", c.model.d_f},
                  {"d_a", c.model.d_a},   {"d_z", c.model.d_z}, {"k", c.model.k}};
  doc["seeds"] = {{"data", c.seeds.data},
                  {"init", c.seeds.init},
                  {"sampling", c.seeds.sampling}};
  json d;
  d["train_pool_per_class"] = c.dataset.slides_per_class;
  d["val_per_class"] = c.val_per_class;
  d["test_per_class"] = c.test_per_class;
  d["ood_per_class"] = c.ood_per_class;
  d["instances_per_slide"] = c.dataset.instances_per_slide;
  d["witness_rate"] = c.dataset.witness_rate;
  d["mean_separation"] = c.dataset.mean_separation;
  d["sigma"] = c.dataset.sigma;
  d["sigma_bg"] = c.dataset.sigma_bg;
  if (!c.dataset.means.empty()) d["means"] = c.dataset.means;
  if (!c.dataset.background_mean.empty()) d["background_mean"] = c.dataset.background_mean;
  doc["dataset"] = std::move(d);
  doc["shift"] = {{"scale", c.shift.scale},
                  {"offset", c.shift.offset},
                  {"noise", c.shift.noise},
                  {"seed", c.shift.seed}};
  doc["eval_every"] = c.eval_every;
  doc["grad_clip_norm"] = c.grad_clip_norm;
  return doc.dump(2);
}

uint64_t config_hash(const ExperimentConfig& config) {
  std::string text = config_to_json(config);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

AdamState AdamState::init_like(const ModelParams& params) {
  AdamState state;
  state.m.reserve(params.count());
  state.v.reserve(params.count());
  for (const Tensor& t : params.tensors) {
    state.m.push_back(Tensor::zeros(t.shape));
    state.v.push_back(Tensor::zeros(t.shape));
  }
  return state;
}

void adam_step(ModelParams& params, const std::vector<Tensor>& grads, AdamState& state,
               double lr, const AdamConfig& config, const std::vector<char>* trainable) {
  if (grads.size() != params.count() || state.m.size() != params.count()) {
    throw ShapeError("adam_step: gradient/state count mismatch");
  }
  for (size_t p = 0; p < params.count(); ++p) {
    if (!params.tensors[p].same_shape(grads[p])) {
      throw ShapeError("adam_step: gradient shape " + grads[p].shape_str() +
                       " does not match parameter " + params.names[p]);
    }
  }
  state.step += 1;
  double t = static_cast<double>(state.step);
  double bc1 = 1.0 - std::pow(config.beta1, t);
  double bc2 = 1.0 - std::pow(config.beta2, t);
  for (size_t p = 0; p < params.count(); ++p) {
    if (trainable && !(*trainable)[p]) continue;
    Tensor& theta = params.tensors[p];
    Tensor& m = state.m[p];
    Tensor& v = state.v[p];
    const Tensor& g = grads[p];
    for (size_t i = 0; i < theta.numel(); ++i) {
      m.values[i] = config.beta1 * m.values[i] + (1.0 - config.beta1) * g.values[i];
      v.values[i] = config.beta2 * v.values[i] + (1.0 - config.beta2) * g.values[i] * g.values[i];
      double m_hat = m.values[i] / bc1;
      double v_hat = v.values[i] / bc2;
      theta.values[i] -= lr * m_hat / (std::sqrt(v_hat) + config.eps);
    }
  }
}

std::string TrainHistory::to_csv() const {
  std::string out = "step,loss,l_scl,l_ce,beta,val_f1,val_auc\n";
  for (const HistoryRow& r : rows) {
    out += std::to_string(r.step) + "," + format_double(r.loss) + "," +
           format_double(r.l_scl) + "," + format_double(r.l_ce) + "," +
           format_double(r.beta) + ",";
    if (r.has_val) {
      out += format_double(r.val_f1) + "," + format_double(r.val_auc);
    } else {
      out += ",";
    }
    out += "\n";
  }
  return out;
}

DatasetSplits build_splits(const ExperimentConfig& config) {
  config.validate();
  Rng base(config.seeds.data);

  auto make = [&](size_t per_class, uint64_t tag, int64_t id_offset) {
    DatasetSpec spec = config.dataset;
    spec.slides_per_class.assign(config.model.k, per_class);
    spec.seed = base.derive(tag).seed();
    std::vector<Slide> slides = generate_slides(spec);
    for (Slide& s : slides) s.slide_id += id_offset;
    return slides;
  };

  DatasetSplits splits;
  {
    DatasetSpec spec = config.dataset;
    spec.seed = base.derive(0).seed();
    splits.train_pool = generate_slides(spec);
  }
  splits.val = make(config.val_per_class, 1, 1'000'000);
  splits.test = make(config.test_per_class, 2, 2'000'000);
  std::vector<Slide> ood_clean = make(config.ood_per_class, 3, 3'000'000);
  splits.ood_test = apply_ood_shift(ood_clean, config.shift);
  return splits;
}

namespace {

struct LossBreakdown {
  NodeId node = -1;
  double l_scl = 0.0;
  double l_ce = 0.0;
  double beta = 0.0;
};

// Forward all bags to a stacked (B x d_f) embedding matrix.
NodeId batch_embeddings(Tape& tape, const std::vector<Bag>& batch,
                        const ModelParams& params, const ParamNodes& nodes) {
  std::vector<NodeId> rows;
  rows.reserve(batch.size());
  for (const Bag& bag : batch) {
    NodeId x = tape.input(bag.instances);
    rows.push_back(embed_bag(tape, x, params, nodes));
  }
  return tape.stack_rows(rows);
}

std::vector<int> batch_labels(const std::vector<Bag>& batch) {
  std::vector<int> labels;
  labels.reserve(batch.size());
  for (const Bag& bag : batch) labels.push_back(bag.label);
  return labels;
}

std::vector<Bag> draw_batch(const ExperimentConfig& config,
                            const std::vector<Slide>& train_slides, Rng& rng) {
  if (method_uses_class_balanced_sampling(config.method)) {
    return sample_batch_class_balanced(train_slides, config.bag_size, config.batch_size,
                                       config.model.k, rng);
  }
  return sample_batch_random(train_slides, config.bag_size, config.batch_size, rng);
}

void clip_gradients(std::vector<Tensor>& grads, double max_norm) {
  if (max_norm <= 0.0) return;
  double ss = 0.0;
  for (const Tensor& g : grads) {
    for (double v : g.values) ss += v * v;
  }
  double norm = std::sqrt(ss);
  if (norm <= max_norm) return;
  double scale = max_norm / norm;
  for (Tensor& g : grads) {
    for (double& v : g.values) v *= scale;
  }
}

std::vector<Tensor> collect_grads(const GradMap& grads, const ParamNodes& nodes) {
  std::vector<Tensor> out;
  out.reserve(nodes.ids.size());
  for (NodeId id : nodes.ids) out.push_back(grads.at(id));
  return out;
}

void maybe_validate(const ExperimentConfig& config, const DatasetSplits& splits,
                    const ModelParams& params, int64_t t, HistoryRow& row) {
  bool due = ((t + 1) % config.eval_every == 0) || (t + 1 == config.steps);
  if (!due || splits.val.empty()) return;
  MetricsReport report = evaluate(splits.val, params, config.bag_size, config.seeds.data,
                                  "val", config.rho, method_name(config.method));
  row.has_val = true;
  row.val_f1 = report.macro_f1;
  row.val_auc = report.macro_auroc;
}

}  // namespace

TrainResult train(const ExperimentConfig& config, const DatasetSplits& splits) {
  config.validate();

  ImbalanceSpec imb{config.rho, config.train_total, config.majority_class};
  std::vector<Slide> train_slides =
      subsample_imbalanced(splits.train_pool, imb, config.model.k, config.seeds.data);
  std::vector<size_t> counts_vec = class_histogram(train_slides, config.model.k);

  ClassCounts counts;
  for (size_t c : counts_vec) counts.n.push_back(static_cast<int64_t>(c));
  double ldam_c = ldam_scale_for_max_margin(counts, config.ldam.max_margin);

  // Epochs exist only for the DRW defer schedule.
  auto steps_per_epoch = static_cast<int64_t>(
      (train_slides.size() + config.batch_size - 1) / config.batch_size);
  int64_t total_epochs = (config.steps + steps_per_epoch - 1) / steps_per_epoch;
  auto defer_epoch = static_cast<int64_t>(config.ldam.defer_frac *
                                          static_cast<double>(total_epochs));

  ModelParams params = init_params(config.model, config.seeds.init);
  AdamState adam = AdamState::init_like(params);
  Rng sampling_rng(config.seeds.sampling);
  CurriculumSpec curriculum = config.curriculum();

  TrainResult result;
  result.train_counts = counts_vec;

  for (int64_t t = 0; t < config.steps; ++t) {
    std::vector<Bag> batch = draw_batch(config, train_slides, sampling_rng);
    std::vector<int> labels = batch_labels(batch);

    Tape tape;
    ParamNodes nodes = register_params(tape, params);
    LossBreakdown loss;
    try {
      NodeId embeddings = batch_embeddings(tape, batch, params, nodes);
      NodeId logits = classify(tape, embeddings, params, nodes);
      switch (config.method) {
        case Method::ErmRS:
        case Method::ErmCB: {
          loss.node = cross_entropy(tape, logits, labels);
          loss.l_ce = tape.value(loss.node).values[0];
          break;
        }
        case Method::LdamDRW: {
          int64_t epoch = t / steps_per_epoch;
          std::vector<double> weights =
              drw_weights(counts, config.ldam.beta_eff, epoch, defer_epoch);
          loss.node = ldam_loss(tape, logits, labels, counts, ldam_c, &weights);
          loss.l_ce = tape.value(loss.node).values[0];
          break;
        }
        case Method::ScmilRS:
        case Method::ScmilCB: {
          NodeId z = project(tape, embeddings, params, nodes);
          loss.beta = beta_schedule(t, curriculum);
          BlendNodes blend = scmil_loss_nodes(tape, z, logits, labels, loss.beta,
                                              config.tau, config.scl_reduction);
          loss.node = blend.blend;
          loss.l_scl = tape.value(blend.scl).values[0];
          loss.l_ce = tape.value(blend.ce).values[0];
          break;
        }
      }
    } catch (const NumericError& e) {
      throw NumericError("train: non-finite loss at step " + std::to_string(t) +
                         " (l_scl=" + format_double(loss.l_scl) +
                         ", l_ce=" + format_double(loss.l_ce) + "): " + e.what());
    }

    double loss_value = tape.value(loss.node).values[0];
    if (!std::isfinite(loss_value)) {
      throw NumericError("train: non-finite loss at step " + std::to_string(t));
    }

    GradMap grad_map = tape.backward(loss.node);
    std::vector<Tensor> grads = collect_grads(grad_map, nodes);
    clip_gradients(grads, config.grad_clip_norm);
    adam_step(params, grads, adam, config.lr, config.adam);

    HistoryRow row;
    row.step = t;
    row.loss = loss_value;
    row.l_scl = loss.l_scl;
    row.l_ce = loss.l_ce;
    row.beta = loss.beta;
    maybe_validate(config, splits, params, t, row);
    result.history.rows.push_back(row);
  }

  result.params = std::move(params);
  return result;
}

TrainResult train_two_stage(const ExperimentConfig& config, const DatasetSplits& splits) {
  config.validate();
  if (!method_is_contrastive(config.method)) {
    throw std::invalid_argument("train_two_stage: method must be SC-MIL-RS or SC-MIL-CB");
  }

  ImbalanceSpec imb{config.rho, config.train_total, config.majority_class};
  std::vector<Slide> train_slides =
      subsample_imbalanced(splits.train_pool, imb, config.model.k, config.seeds.data);

  ModelParams params = init_params(config.model, config.seeds.init);
  Rng sampling_rng(config.seeds.sampling);

  std::vector<char> stage1_mask(params.count(), 1);
  std::vector<char> stage2_mask(params.count(), 0);
  for (size_t p = 0; p < params.count(); ++p) {
    bool is_classifier = params.names[p].rfind("clf.", 0) == 0;
    stage1_mask[p] = is_classifier ? 0 : 1;
    stage2_mask[p] = is_classifier ? 1 : 0;
  }

  int64_t stage1_steps = config.steps / 2;
  TrainResult result;
  result.train_counts = class_histogram(train_slides, config.model.k);

  AdamState adam = AdamState::init_like(params);
  for (int64_t t = 0; t < config.steps; ++t) {
    bool stage1 = t < stage1_steps;
    if (t == stage1_steps) adam = AdamState::init_like(params);  // fresh optimizer

    std::vector<Bag> batch = draw_batch(config, train_slides, sampling_rng);
    std::vector<int> labels = batch_labels(batch);

    Tape tape;
    ParamNodes nodes = register_params(tape, params);
    NodeId embeddings = batch_embeddings(tape, batch, params, nodes);

    HistoryRow row;
    row.step = t;
    NodeId loss_node;
    if (stage1) {
      NodeId z = project(tape, embeddings, params, nodes);
      loss_node = supcon_bag_loss(tape, z, labels, config.tau, config.scl_reduction);
      row.beta = 1.0;
      row.l_scl = tape.value(loss_node).values[0];
    } else {
      NodeId logits = classify(tape, embeddings, params, nodes);
      loss_node = cross_entropy(tape, logits, labels);
      row.beta = 0.0;
      row.l_ce = tape.value(loss_node).values[0];
    }
    row.loss = tape.value(loss_node).values[0];
    if (!std::isfinite(row.loss)) {
      throw NumericError("train_two_stage: non-finite loss at step " + std::to_string(t));
    }

    GradMap grad_map = tape.backward(loss_node);
    std::vector<Tensor> grads = collect_grads(grad_map, nodes);
    clip_gradients(grads, config.grad_clip_norm);
    adam_step(params, grads, adam, config.lr, config.adam,
              stage1 ? &stage1_mask : &stage2_mask);

    maybe_validate(config, splits, params, t, row);
    result.history.rows.push_back(row);
  }

  result.params = std::move(params);
  return result;
}

TrainResult run_training(const ExperimentConfig& config, const DatasetSplits& splits) {
  if (config.stage_mode == StageMode::TwoStage) return train_two_stage(config, splits);
  return train(config, splits);
}

}  // namespace scmil
