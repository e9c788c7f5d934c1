#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "scmil/data.hpp"
#include "scmil/losses.hpp"
#include "scmil/model.hpp"

namespace scmil {

enum class Method { ErmRS, ErmCB, LdamDRW, ScmilRS, ScmilCB };
enum class StageMode { Single, TwoStage };

std::string method_name(Method m);
Method method_from_name(const std::string& name);
bool method_is_contrastive(Method m);
bool method_uses_class_balanced_sampling(Method m);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct LdamConfig {
  double max_margin = 0.5;  // margin scale is chosen so the largest margin equals this
  double beta_eff = 0.9999;
  double defer_frac = 0.6;  // fraction of epochs before reweighting kicks in
};

struct Seeds {
  uint64_t data = 1;
  uint64_t init = 2;
  uint64_t sampling = 3;
};

// Full description of one run: method, imbalance, protocol, model and data.
struct ExperimentConfig {
  Method method = Method::ErmRS;
  StageMode stage_mode = StageMode::Single;
  double rho = 1.0;
  size_t train_total = 288;
  size_t majority_class = 0;
  size_t bag_size = 32;
  size_t batch_size = 16;
  int64_t steps = 3000;
  double lr = 1e-4;
  AdamConfig adam;
  double tau = 1.0;
  double beta_start = 1.0;
  double beta_end = 0.0;
  SclReduction scl_reduction = SclReduction::MeanOverAnchors;
  LdamConfig ldam;
  ModelConfig model;
  Seeds seeds;
  DatasetSpec dataset;  // d_in/k/seed mirrored from model and seeds at parse time
  size_t val_per_class = 20;
  size_t test_per_class = 40;
  size_t ood_per_class = 40;
  ShiftSpec shift;
  int64_t eval_every = 200;
  double grad_clip_norm = 0.0;  // 0 disables clipping

  void validate() const;
  CurriculumSpec curriculum() const;
};

// Strict, versioned JSON: unknown keys are rejected.
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::string& path);
std::string config_to_json(const ExperimentConfig& config);
// FNV-1a over the canonical JSON dump.
uint64_t config_hash(const ExperimentConfig& config);

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  int64_t step = 0;
  static AdamState init_like(const ModelParams& params);
};

// Bias-corrected Adam. `trainable` (aligned with params) freezes entries
// when given; frozen parameters keep their moments untouched.
void adam_step(ModelParams& params, const std::vector<Tensor>& grads, AdamState& state,
               double lr, const AdamConfig& config,
               const std::vector<char>* trainable = nullptr);

struct HistoryRow {
  int64_t step = 0;
  double loss = 0.0;
  double l_scl = 0.0;
  double l_ce = 0.0;
  double beta = 0.0;
  bool has_val = false;
  double val_f1 = 0.0;
  double val_auc = 0.0;
};

struct TrainHistory {
  std::vector<HistoryRow> rows;
  std::string to_csv() const;  // step,loss,l_scl,l_ce,beta,val_f1,val_auc
};

struct DatasetSplits {
  std::vector<Slide> train_pool;
  std::vector<Slide> val;
  std::vector<Slide> test;
  std::vector<Slide> ood_test;
};

// Seeded splits per the config: train pool + balanced heldout sets, with a
// fresh shifted OOD test set. Heldout sets do not depend on rho.
DatasetSplits build_splits(const ExperimentConfig& config);

struct TrainResult {
  ModelParams params;
  TrainHistory history;
  std::vector<size_t> train_counts;  // per-class slide counts actually trained on
};

TrainResult train(const ExperimentConfig& config, const DatasetSplits& splits);
TrainResult train_two_stage(const ExperimentConfig& config, const DatasetSplits& splits);
// Dispatch on config.stage_mode.
TrainResult run_training(const ExperimentConfig& config, const DatasetSplits& splits);

}  // namespace scmil
