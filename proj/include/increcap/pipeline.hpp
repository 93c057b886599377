#pragma once
// Experiment orchestration: dataset generation, the stage-1 incremental
// extractor loop with feature export, stage-2 captioner training with the
// sigma curriculum, evaluation reports, and the configuration matrix.

#include <string>
#include <vector>

#include "increcap/backbone.hpp"
#include "increcap/captioner.hpp"
#include "increcap/checkpoint.hpp"
#include "increcap/cida.hpp"
#include "increcap/config.hpp"
#include "increcap/metrics.hpp"
#include "increcap/synthdata.hpp"

namespace icap::pipeline {

// Builds the synthetic dataset described by [data] and persists it under
// cfg.data_dir (images/ + annotations.tsv).
synthdata::Manifest generate_data(const config::ExperimentConfig& cfg);

struct Stage1Result {
  backbone::Backbone model;
  cida::ExemplarMemory memory;
  std::vector<cida::IncrementManifest> manifests;
  std::vector<double> lr_trace;  // per-epoch learning rate of the base step
  std::string checkpoint_prefix;
  std::string features_dir;
};

// Runs the incremental loop (base classes from source train, then the novel
// classes from the target few-shot split), checkpoints after each increment,
// and exports region features for every image. With resume = true, completed
// increments are restored from their checkpoints instead of retrained; the
// stored config hash must match.
Stage1Result run_stage1(const config::ExperimentConfig& cfg, bool resume = false);

struct Stage2Result {
  captioner::Captioner model;
  captioner::Vocab vocab;
  std::vector<double> loss_trace;   // mean training loss of the epochs run
  std::vector<double> sigma_trace;  // sigma used at each epoch (full schedule)
  std::string checkpoint_prefix;
};

// Trains the captioner on exported source-train features, then (per
// cfg.stage2_adapt) fine-tunes on the target shot split. stop_after > 0
// checkpoints and returns after that many epochs; resume continues a stopped
// run bit-exactly.
Stage2Result run_stage2(const config::ExperimentConfig& cfg, int stop_after = -1,
                        bool resume = false);

struct EvalResult {
  metrics::MetricsReport report;
  std::string report_path;
  std::string captions_path;
};

// split_tag: source_train | source_val | source_test | target_test |
// target_one_shot | target_few_shot. Loads both stage checkpoints from
// cfg.out_dir, beam-searches captions, and computes caption + calibration
// metrics on the split.
EvalResult run_eval(const config::ExperimentConfig& cfg, const std::string& split_tag);

// Trains each configuration once and evaluates it on the source-domain test
// split plus the target-domain test split under one-shot and few-shot caption
// adaptation. Returns the tab-delimited table (rows = config x domain,
// columns = metrics) followed by a directional-checks section.
std::string run_matrix(const std::vector<config::ExperimentConfig>& cfgs);

// Writes the stage-1 projection embeddings of a split as a delimited table.
void export_embeddings(const config::ExperimentConfig& cfg,
                       const std::string& split_tag, const std::string& out_path);

// Region-feature files exported by stage 1 (one per image, n x d text).
void write_feature_file(const std::string& path, const Tensor& regions);
Tensor read_feature_file(const std::string& path);

// The (domain, split) pool behind a split tag; pointers into the manifest.
std::vector<const synthdata::SceneSample*> split_pool(const synthdata::Manifest& m,
                                                      const std::string& split_tag);

}  // namespace icap::pipeline
