#pragma once
// Class-incremental adaptation loop: increment train-set construction,
// training in either the cross-entropy+distillation or the supervised
// contrastive mode, balanced fine-tuning on an exemplar-equalized subset,
// herding-based memory update, and frozen teacher snapshots.

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "increcap/backbone.hpp"
#include "increcap/smoothing.hpp"
#include "increcap/synthdata.hpp"

namespace icap::cida {

using synthdata::SceneSample;
using SamplePool = std::vector<const SceneSample*>;

struct ExemplarMemory {
  std::map<int, std::vector<std::string>> per_class;  // class id -> sample ids
  int budget = 20;

  std::vector<int> seen_classes() const;
  void validate() const;  // budget respected, no duplicate ids per class
};

enum class Mode { CE_DISTILL, SUPCON_CIDA };

const char* to_string(Mode m);
Mode mode_from_string(const std::string& s);

struct IncrementPlan {
  int step_index = 0;
  std::set<int> new_classes;
  Mode mode = Mode::CE_DISTILL;
  int epochs_train = 50;
  int epochs_finetune = 15;

  void validate(const std::vector<int>& old_classes) const;
};

// Frozen deep copy of the model taken before an increment trains.
class TeacherSnapshot {
 public:
  explicit TeacherSnapshot(const backbone::Backbone& model);
  const backbone::Backbone& model() const { return model_; }
  int num_classes() const { return model_.num_classes(); }

 private:
  backbone::Backbone model_;
};

TeacherSnapshot snapshot_teacher(const backbone::Backbone& model);

// Memory exemplars first (by class id, stored order), then new data in the
// given order. Rejects new samples labeled with already-seen classes and id
// collisions between memory and new data.
SamplePool build_increment_trainset(const ExemplarMemory& memory, const SamplePool& pool,
                                    const SamplePool& new_data,
                                    const IncrementPlan& plan);

struct TrainOptions {
  int batch_size = 20;
  double lr = 0.001;
  double momentum = 0.6;
  double weight_decay = 1e-4;
  double lr_decay = 0.8;
  int lr_period = 5;
  double label_smoothing = 0.1;
  double supcon_temperature = 0.07;
  double distill_temperature = 3.0;
  double finetune_lr = 0.0001;
  int classifier_fit_epochs = 15;  // head fit on frozen features (SupCon mode)
  std::uint64_t seed = 1;
};

struct LossTrace {
  std::vector<double> per_epoch;
};

// Weight on the old-task term: old / (old + new) seen classes.
double lambda_old(int num_old_classes, int num_new_classes);

// SupCon augmentation of one sample: random crop (0.6-1.0 area) resized
// back, horizontal flip, color jitter (+-0.4), random grayscale p=0.2.
// Deterministic in `view_seed`.
std::vector<std::uint8_t> augment_view(const std::vector<std::uint8_t>& image,
                                       int size, std::uint64_t view_seed);

// One increment's training pass. `old_classes` lists classes seen before this
// step; a teacher is required exactly when the step index is positive. The
// sigma schedule drives the backbone's curriculum blur per epoch. Throws on a
// non-finite loss.
LossTrace train_increment(backbone::Backbone& model, const TeacherSnapshot* teacher,
                          const SamplePool& trainset, const IncrementPlan& plan,
                          const std::vector<int>& old_classes,
                          const smoothing::SigmaSchedule& schedule,
                          const TrainOptions& opts);

// Fine-tunes on a class-balanced subset: m = min(budget, smallest class
// availability) samples per seen class, 15 epochs at lr 1e-4 with the same
// decay rule. `pool` must contain the memory samples by id plus the new data.
void balanced_finetune(backbone::Backbone& model, const ExemplarMemory& memory,
                       const SamplePool& pool, const SamplePool& new_data,
                       const IncrementPlan& plan, const std::vector<int>& old_classes,
                       const TrainOptions& opts);

// Selects the balanced subset without training (exposed for tests).
SamplePool balanced_subset(const ExemplarMemory& memory, const SamplePool& pool,
                           const SamplePool& new_data);

// Herding over projection embeddings: greedily add the candidate keeping the
// running exemplar mean closest to the class mean; first-index tie-break.
// Existing classes are left untouched.
ExemplarMemory update_memory(const ExemplarMemory& memory, const SamplePool& new_data,
                             const backbone::Backbone& model, int budget);

// Plain herding on explicit feature rows; returns selected indices in pick
// order. Exposed so tests can check it against a brute-force subset oracle.
std::vector<int> herd_select(const std::vector<std::vector<double>>& features,
                             int budget);

struct IncrementEval {
  std::map<int, double> per_class;  // only classes with a non-empty test set
  std::vector<int> absent;          // seen classes with no test data
  double mean_accuracy = 0.0;
  double old_mean_accuracy = 0.0;  // over old classes only; 0 when none
  std::optional<double> forgetting;
};

// Accuracy per seen class on held-out data; forgetting = prev_old_mean minus
// the current old-class mean when a previous value is supplied.
IncrementEval evaluate_increment(const backbone::Backbone& model,
                                 const std::map<int, SamplePool>& testsets,
                                 const std::vector<int>& old_classes,
                                 const std::optional<double>& prev_old_mean);

struct IncrementManifest {
  int step_index = 0;
  std::vector<int> classes;  // all seen after the step
  Mode mode = Mode::CE_DISTILL;
  ExemplarMemory memory;
  std::map<std::string, double> metrics;
};

// One structured-text manifest per increment step; round-trips exactly.
void write_increment_manifest(const std::string& path, const IncrementManifest& m);
IncrementManifest read_increment_manifest(const std::string& path);

}  // namespace icap::cida
