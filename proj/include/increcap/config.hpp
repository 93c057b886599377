#pragma once
// Flat key = value experiment configuration with [section] headers. Every
// field has a default; unknown keys or sections are hard errors so a typo
// can't silently run the wrong experiment.

#include <cstdint>
#include <string>
#include <vector>

namespace icap::config {

// Stage-1 training regime. The name selects the loss mode and whether the
// backbone's 2D curriculum blur is active.
enum class Stage1Mode { CI, CI_CBS, CI_SUPCON, CISC };

const char* to_string(Stage1Mode m);
Stage1Mode stage1_mode_from_string(const std::string& s);
bool mode_uses_supcon(Stage1Mode m);
bool mode_uses_cbs(Stage1Mode m);

struct ExperimentConfig {
  // [experiment]
  std::string name = "default";
  std::uint64_t seed = 1;
  std::string out_dir = "runs/default";
  std::string data_dir = "data/default";
  std::string arch = "desk";  // desk | full network scale

  // [data]
  int image_size = 32;
  int base_classes = 6;   // source-domain instrument classes
  int novel_classes = 3;  // target-only classes appended after the base set
  int source_train_per_class = 20;
  int source_val_per_class = 5;
  int source_test_per_class = 10;
  int target_pool_per_class = 10;
  int target_test_per_class = 10;
  int k_shot = 5;
  std::string domain_shift = "default";  // default | none

  // [stage1]
  std::string stage1_mode = "CI";
  int stage1_epochs = 50;
  int finetune_epochs = 15;
  int stage1_batch = 20;
  double stage1_lr = 0.001;
  double momentum = 0.6;
  double weight_decay = 0.0001;
  double lr_decay = 0.8;
  int lr_period = 5;
  double finetune_lr = 0.0001;
  bool stage1_ls = true;
  double label_smoothing = 0.1;
  double supcon_temperature = 0.07;
  double distill_temperature = 3.0;
  int memory_budget = 20;
  double sigma0 = 1.0;
  double sigma_decay = 0.9;
  int sigma_period = 2;

  // [stage2]
  int stage2_epochs = 50;
  int stage2_batch = 50;
  double stage2_lr = 0.001;
  bool stage2_cbs = true;
  bool stage2_ls = true;
  double stage2_label_smoothing = 0.1;
  int max_len = 20;
  int vocab_min_count = 1;
  std::string stage2_adapt = "few_shot";  // none | one_shot | few_shot
  int adapt_epochs = 20;

  // [eval]
  int beam = 5;
  int calibration_bins = 10;
  double tace_threshold = 0.001;

  void validate() const;
  Stage1Mode mode() const { return stage1_mode_from_string(stage1_mode); }
};

// Canonical serialized form (sections in a fixed order); parse(to_text(c))
// round-trips exactly.
std::string to_text(const ExperimentConfig& c);
ExperimentConfig parse_config_text(const std::string& text);

ExperimentConfig read_config(const std::string& path);
void write_config(const std::string& path, const ExperimentConfig& c);

// "section.key=value" or "key=value" when the key is unambiguous.
void apply_override(ExperimentConfig& c, const std::string& assignment);

// FNV-1a hash of the canonical text, as fixed-width hex.
std::string config_hash(const ExperimentConfig& c);

// Hash over only the fields that determine a stage's artifacts: the [data]
// section, seed and arch, the [stage1] section, and for stage 2 also the
// [stage2] section. Checkpoint compatibility checks use this so changing an
// unrelated setting (a path, an eval knob) doesn't invalidate a run.
std::string stage_hash(const ExperimentConfig& c, int stage);

}  // namespace icap::config
