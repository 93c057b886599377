#include "increcap/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>

#include "increcap/nn.hpp"
#include "increcap/smoothing.hpp"

namespace icap::pipeline {

namespace fs = std::filesystem;
using config::ExperimentConfig;
using synthdata::SceneSample;
using SamplePool = std::vector<const SceneSample*>;

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

synthdata::SceneSpec make_spec(const ExperimentConfig& cfg) {
  auto spec = synthdata::SceneSpec::desk_default(cfg.image_size, cfg.seed);
  spec.instrument_classes.resize(cfg.base_classes + cfg.novel_classes);
  spec.num_source_classes = cfg.base_classes;
  spec.validate();
  return spec;
}

synthdata::DomainShift make_shift(const ExperimentConfig& cfg) {
  return cfg.domain_shift == "none" ? synthdata::DomainShift::none()
                                    : synthdata::DomainShift::desk_default();
}

synthdata::Manifest load_dataset(const ExperimentConfig& cfg) {
  if (!fs::exists(cfg.data_dir + "/annotations.tsv"))
    throw std::runtime_error("pipeline: dataset manifest missing under " + cfg.data_dir +
                             " (run gen-data first)");
  return synthdata::read_dataset(cfg.data_dir);
}

backbone::Backbone build_backbone(const ExperimentConfig& cfg, int num_classes,
                                  std::mt19937_64& rng) {
  backbone::BackboneConfig bc;
  if (cfg.arch == "desk") {
    bc = backbone::BackboneConfig::desk_small(cfg.image_size, num_classes);
  } else {
    bc.input_size = cfg.image_size;
    bc.num_classes = num_classes;
  }
  bc.cbs_enabled = config::mode_uses_cbs(cfg.mode());
  return backbone::Backbone(bc, rng);
}

std::string stage1_prefix(const ExperimentConfig& cfg) { return cfg.out_dir + "/stage1"; }
std::string step_prefix(const ExperimentConfig& cfg, int step) {
  return cfg.out_dir + "/stage1_step" + std::to_string(step);
}
std::string increment_path(const ExperimentConfig& cfg, int step) {
  return cfg.out_dir + "/increment_" + std::to_string(step) + ".txt";
}
std::string features_dir_of(const ExperimentConfig& cfg) {
  return cfg.out_dir + "/features";
}

cida::TrainOptions make_train_options(const ExperimentConfig& cfg, int step) {
  cida::TrainOptions o;
  o.batch_size = cfg.stage1_batch;
  o.lr = cfg.stage1_lr;
  o.momentum = cfg.momentum;
  o.weight_decay = cfg.weight_decay;
  o.lr_decay = cfg.lr_decay;
  o.lr_period = cfg.lr_period;
  o.label_smoothing = cfg.stage1_ls ? cfg.label_smoothing : 0.0;
  o.supcon_temperature = cfg.supcon_temperature;
  o.distill_temperature = cfg.distill_temperature;
  o.finetune_lr = cfg.finetune_lr;
  o.classifier_fit_epochs = cfg.finetune_epochs;
  o.seed = mix(cfg.seed, 0x57a6e1ULL + static_cast<std::uint64_t>(step));
  return o;
}

void save_stage1_checkpoint(const std::string& prefix, const ExperimentConfig& cfg,
                            const backbone::Backbone& model, int completed_steps) {
  checkpoint::Checkpoint cp;
  cp.meta["config_hash"] = config::stage_hash(cfg, 1);
  cp.set_meta_int("num_classes", model.num_classes());
  cp.set_meta_int("completed_steps", completed_steps);
  cp.put_params("model.", model.params());
  checkpoint::save_checkpoint(prefix, cp);
}

backbone::Backbone restore_backbone(const ExperimentConfig& cfg,
                                    const checkpoint::Checkpoint& cp) {
  std::mt19937_64 rng(cfg.seed);
  auto model = build_backbone(cfg, cfg.base_classes, rng);
  const int nc = cp.meta_int("num_classes");
  if (nc > model.num_classes()) {
    std::mt19937_64 head_rng(mix(cfg.seed, 0x4eadULL));
    model.expand_head(nc, head_rng);
  }
  cp.restore_params("model.", model.params());
  return model;
}

void require_hash(const checkpoint::Checkpoint& cp, const std::string& expected,
                  const std::string& what) {
  if (cp.meta.at("config_hash") != expected)
    throw std::runtime_error("pipeline: " + what +
                             " checkpoint was written under a different config; "
                             "refusing to resume");
}

std::map<int, SamplePool> testsets_for(const synthdata::Manifest& m,
                                       synthdata::Domain domain, int max_class) {
  std::map<int, SamplePool> sets;
  for (const auto& s : m.samples) {
    if (s.domain != domain || s.split != synthdata::Split::TEST) continue;
    const int cls = s.object_classes.at(0);
    if (cls < max_class) sets[cls].push_back(&s);
  }
  return sets;
}

void record_increment_metrics(cida::IncrementManifest& man, const backbone::Backbone& model,
                              const synthdata::Manifest& data,
                              const std::vector<int>& old_classes,
                              const std::optional<double>& prev_sd_old) {
  const int nc = model.num_classes();
  const auto sd = cida::evaluate_increment(model, testsets_for(data, synthdata::Domain::SOURCE, nc),
                                           old_classes, prev_sd_old);
  man.metrics["sd_mean_acc"] = sd.mean_accuracy;
  man.metrics["sd_old_acc"] = sd.old_mean_accuracy;
  if (sd.forgetting) man.metrics["forgetting"] = *sd.forgetting;

  const auto td_sets = testsets_for(data, synthdata::Domain::TARGET, nc);
  if (!td_sets.empty()) {
    const auto td = cida::evaluate_increment(model, td_sets, old_classes, std::nullopt);
    man.metrics["td_mean_acc"] = td.mean_accuracy;
    man.metrics["td_old_acc"] = td.old_mean_accuracy;
  }
}

void export_features(const ExperimentConfig& cfg, const backbone::Backbone& model,
                     const synthdata::Manifest& data) {
  const std::string dir = features_dir_of(cfg);
  fs::create_directories(dir);
  const int chunk = 16;
  for (std::size_t at = 0; at < data.samples.size(); at += chunk) {
    SamplePool batch;
    for (std::size_t i = at; i < std::min(at + chunk, data.samples.size()); ++i)
      batch.push_back(&data.samples[i]);
    const auto out = model.forward_features(synthdata::to_tensor(batch), 0.0);
    const int hw = out.map_size * out.map_size;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Tensor rows = slice_rows(out.regions, static_cast<int>(i) * hw,
                               static_cast<int>(i + 1) * hw);
      write_feature_file(dir + "/" + batch[i]->id + ".feat", rows.detach());
    }
  }
}

captioner::Vocab build_pipeline_vocab(const ExperimentConfig& cfg,
                                      const synthdata::Manifest& data) {
  std::vector<std::vector<std::string>> captions;
  for (const auto& s : data.samples) {
    const bool train_visible =
        (s.domain == synthdata::Domain::SOURCE && s.split == synthdata::Split::TRAIN) ||
        (s.domain == synthdata::Domain::TARGET &&
         (s.split == synthdata::Split::ONE_SHOT || s.split == synthdata::Split::FEW_SHOT));
    if (train_visible) captions.push_back(s.caption);
  }
  return captioner::build_vocab(captions, cfg.vocab_min_count);
}

captioner::CaptionerConfig make_captioner_config(const ExperimentConfig& cfg, int d_input) {
  captioner::CaptionerConfig cc;
  if (cfg.arch == "desk") cc = captioner::CaptionerConfig::desk_small(d_input);
  else cc.d_input = d_input;
  cc.max_len = cfg.max_len;
  cc.label_smoothing = cfg.stage2_ls ? cfg.stage2_label_smoothing : 0.0;
  return cc;
}

struct FeatureStore {
  std::string dir;
  std::map<std::string, Tensor> cache;

  const Tensor& get(const std::string& id) {
    auto it = cache.find(id);
    if (it == cache.end())
      it = cache.emplace(id, read_feature_file(dir + "/" + id + ".feat")).first;
    return it->second;
  }
};

// One deterministic pass over [start_epoch, end_epoch): per-epoch derived
// shuffle and dropout seeds make interrupted and uninterrupted runs identical.
void train_caption_epochs(captioner::Captioner& model, nn::Adam& opt,
                          const SamplePool& pool, FeatureStore& feats,
                          int start_epoch, int end_epoch, int batch_size,
                          const std::vector<double>& sigma_by_epoch,
                          std::uint64_t seed, std::vector<double>* loss_trace) {
  if (pool.empty()) throw std::runtime_error("pipeline: empty caption training pool");
  const auto& vocab = model.vocab();
  std::vector<std::vector<int>> encoded(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) encoded[i] = vocab.encode(pool[i]->caption);

  for (int epoch = start_epoch; epoch < end_epoch; ++epoch) {
    const double sigma =
        epoch < static_cast<int>(sigma_by_epoch.size()) ? sigma_by_epoch[epoch] : 0.0;
    model.seed_dropout(mix(seed ^ 0xd401ULL, epoch));
    std::vector<int> order(pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::mt19937_64 shuffle_rng(mix(seed, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double sum = 0.0;
    int batches = 0;
    for (std::size_t at = 0; at < order.size(); at += batch_size) {
      std::vector<Tensor> regions;
      std::vector<std::vector<int>> caps;
      for (std::size_t i = at; i < std::min(at + batch_size, order.size()); ++i) {
        regions.push_back(feats.get(pool[order[i]]->id));
        caps.push_back(encoded[order[i]]);
      }
      opt.zero_grad();
      Tensor loss = model.train_step(regions, caps, sigma);
      if (!std::isfinite(loss.item()))
        throw std::runtime_error("pipeline: non-finite caption loss at epoch " +
                                 std::to_string(epoch));
      backward(loss);
      opt.step();
      sum += loss.item();
      ++batches;
    }
    if (loss_trace) loss_trace->push_back(sum / batches);
  }
}

void save_stage2_checkpoint(const std::string& prefix, const ExperimentConfig& cfg,
                            const captioner::Captioner& model, nn::Adam& opt,
                            int epochs_done, int d_input) {
  checkpoint::Checkpoint cp;
  cp.meta["config_hash"] = config::stage_hash(cfg, 2);
  cp.set_meta_int("epochs_done", epochs_done);
  cp.set_meta_int("d_input", d_input);
  cp.set_meta_int("adam_t", static_cast<long long>(opt.step_count()));
  cp.put_params("model.", model.params());
  auto& m = opt.m();
  auto& v = opt.v();
  for (std::size_t i = 0; i < m.size(); ++i) {
    cp.put_array("adam.m." + std::to_string(i), {static_cast<int>(m[i].size())}, m[i]);
    cp.put_array("adam.v." + std::to_string(i), {static_cast<int>(v[i].size())}, v[i]);
  }
  checkpoint::save_checkpoint(prefix, cp);
}

captioner::Captioner build_captioner(const ExperimentConfig& cfg, int d_input,
                                     const captioner::Vocab& vocab) {
  std::mt19937_64 rng(mix(cfg.seed, 0xca97ULL));
  return captioner::Captioner(make_captioner_config(cfg, d_input), vocab, rng);
}

int feature_width(const std::string& features_dir, const synthdata::Manifest& data) {
  if (data.samples.empty()) throw std::runtime_error("pipeline: empty dataset");
  const Tensor probe = read_feature_file(features_dir + "/" + data.samples[0].id + ".feat");
  return probe.cols();
}

}  // namespace

synthdata::Manifest generate_data(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto spec = make_spec(cfg);
  synthdata::SplitCounts counts;
  counts.source_train_per_class = cfg.source_train_per_class;
  counts.source_val_per_class = cfg.source_val_per_class;
  counts.source_test_per_class = cfg.source_test_per_class;
  counts.target_pool_per_class = cfg.target_pool_per_class;
  counts.target_test_per_class = cfg.target_test_per_class;
  auto manifest = synthdata::build_splits(spec, make_shift(cfg), counts, cfg.k_shot);
  fs::create_directories(cfg.data_dir);
  return synthdata::write_dataset(cfg.data_dir, std::move(manifest));
}

SamplePool split_pool(const synthdata::Manifest& m, const std::string& split_tag) {
  synthdata::Domain domain;
  synthdata::Split split;
  if (split_tag == "source_train") { domain = synthdata::Domain::SOURCE; split = synthdata::Split::TRAIN; }
  else if (split_tag == "source_val") { domain = synthdata::Domain::SOURCE; split = synthdata::Split::VAL; }
  else if (split_tag == "source_test") { domain = synthdata::Domain::SOURCE; split = synthdata::Split::TEST; }
  else if (split_tag == "target_one_shot") { domain = synthdata::Domain::TARGET; split = synthdata::Split::ONE_SHOT; }
  else if (split_tag == "target_few_shot") { domain = synthdata::Domain::TARGET; split = synthdata::Split::FEW_SHOT; }
  else if (split_tag == "target_test") { domain = synthdata::Domain::TARGET; split = synthdata::Split::TEST; }
  else throw std::invalid_argument("pipeline: unknown split tag " + split_tag);

  SamplePool pool;
  for (const auto& s : m.samples)
    if (s.domain == domain && s.split == split) pool.push_back(&s);
  return pool;
}

Stage1Result run_stage1(const ExperimentConfig& cfg, bool resume) {
  cfg.validate();
  const auto data = load_dataset(cfg);
  fs::create_directories(cfg.out_dir);

  SamplePool all_pool;
  for (const auto& s : data.samples) all_pool.push_back(&s);
  const SamplePool src_train = split_pool(data, "source_train");
  const SamplePool few_shot = split_pool(data, "target_few_shot");
  const int total_steps = cfg.novel_classes > 0 ? 2 : 1;

  std::mt19937_64 rng(cfg.seed);
  auto model = build_backbone(cfg, cfg.base_classes, rng);
  cida::ExemplarMemory memory;
  memory.budget = cfg.memory_budget;
  std::vector<cida::IncrementManifest> manifests;

  int start_step = 0;
  if (resume) {
    for (int k = total_steps - 1; k >= 0; --k) {
      if (!checkpoint::checkpoint_exists(step_prefix(cfg, k))) continue;
      const auto cp = checkpoint::load_checkpoint(step_prefix(cfg, k));
      require_hash(cp, config::stage_hash(cfg, 1), "stage1");
      model = restore_backbone(cfg, cp);
      for (int j = 0; j <= k; ++j)
        manifests.push_back(cida::read_increment_manifest(increment_path(cfg, j)));
      memory = manifests.back().memory;
      start_step = k + 1;
      break;
    }
  }

  const smoothing::SigmaSchedule schedule{cfg.sigma0, cfg.sigma_decay, cfg.sigma_period,
                                          smoothing::kSigmaFloor};
  const cida::Mode mode = config::mode_uses_supcon(cfg.mode()) ? cida::Mode::SUPCON_CIDA
                                                               : cida::Mode::CE_DISTILL;

  std::optional<double> prev_sd_old;
  if (!manifests.empty()) prev_sd_old = manifests.back().metrics.at("sd_mean_acc");

  for (int step = start_step; step < total_steps; ++step) {
    std::vector<int> old_classes;
    std::set<int> new_classes;
    SamplePool new_data;
    if (step == 0) {
      for (int c = 0; c < cfg.base_classes; ++c) new_classes.insert(c);
      new_data = src_train;
    } else {
      for (int c = 0; c < cfg.base_classes; ++c) old_classes.push_back(c);
      for (int c = cfg.base_classes; c < cfg.base_classes + cfg.novel_classes; ++c)
        new_classes.insert(c);
      for (const auto* s : few_shot)
        if (s->object_classes.at(0) >= cfg.base_classes) new_data.push_back(s);
    }

    cida::IncrementPlan plan;
    plan.step_index = step;
    plan.new_classes = new_classes;
    plan.mode = mode;
    plan.epochs_train = cfg.stage1_epochs;
    plan.epochs_finetune = cfg.finetune_epochs;
    const auto opts = make_train_options(cfg, step);

    std::unique_ptr<cida::TeacherSnapshot> teacher;
    if (step > 0) {
      teacher = std::make_unique<cida::TeacherSnapshot>(cida::snapshot_teacher(model));
      std::mt19937_64 head_rng(mix(cfg.seed, 0x4eadULL));
      model.expand_head(cfg.base_classes + cfg.novel_classes, head_rng);
    }

    const auto trainset = cida::build_increment_trainset(memory, all_pool, new_data, plan);
    cida::train_increment(model, teacher.get(), trainset, plan, old_classes, schedule, opts);
    if (!old_classes.empty())
      cida::balanced_finetune(model, memory, all_pool, new_data, plan, old_classes, opts);
    memory = cida::update_memory(memory, new_data, model, cfg.memory_budget);

    cida::IncrementManifest man;
    man.step_index = step;
    man.mode = mode;
    man.memory = memory;
    for (int c = 0; c < (step == 0 ? cfg.base_classes : cfg.base_classes + cfg.novel_classes); ++c)
      man.classes.push_back(c);
    record_increment_metrics(man, model, data, old_classes, prev_sd_old);
    prev_sd_old = man.metrics.at("sd_mean_acc");
    cida::write_increment_manifest(increment_path(cfg, step), man);
    manifests.push_back(man);
    save_stage1_checkpoint(step_prefix(cfg, step), cfg, model, step + 1);
  }

  save_stage1_checkpoint(stage1_prefix(cfg), cfg, model, total_steps);
  export_features(cfg, model, data);

  Stage1Result result;
  result.model = model;
  result.memory = memory;
  result.manifests = std::move(manifests);
  for (int e = 0; e < cfg.stage1_epochs; ++e)
    result.lr_trace.push_back(nn::step_decay_lr(cfg.stage1_lr, cfg.lr_decay, cfg.lr_period, e));
  result.checkpoint_prefix = stage1_prefix(cfg);
  result.features_dir = features_dir_of(cfg);
  return result;
}

Stage2Result run_stage2(const ExperimentConfig& cfg, int stop_after, bool resume) {
  cfg.validate();
  const auto data = load_dataset(cfg);
  const std::string features_dir = features_dir_of(cfg);
  if (!fs::exists(features_dir))
    throw std::runtime_error("pipeline: stage-1 features missing under " + features_dir +
                             " (run train-stage1 first)");

  const SamplePool src_train = split_pool(data, "source_train");
  const auto vocab = build_pipeline_vocab(cfg, data);
  captioner::write_vocab(cfg.out_dir + "/vocab.txt", vocab);

  FeatureStore feats{features_dir, {}};
  const int d_input = feature_width(features_dir, data);

  auto model = build_captioner(cfg, d_input, vocab);
  auto params = model.params();
  nn::Adam opt(params.tensors(), cfg.stage2_lr);

  const std::string main_prefix = cfg.out_dir + "/stage2_main";
  int start_epoch = 0;
  if (resume) {
    if (!checkpoint::checkpoint_exists(main_prefix))
      throw std::runtime_error("pipeline: no stage-2 checkpoint to resume from");
    const auto cp = checkpoint::load_checkpoint(main_prefix);
    require_hash(cp, config::stage_hash(cfg, 2), "stage2");
    cp.restore_params("model.", params);
    auto& m = opt.m();
    auto& v = opt.v();
    for (std::size_t i = 0; i < m.size(); ++i) {
      m[i] = cp.at("adam.m." + std::to_string(i)).data;
      v[i] = cp.at("adam.v." + std::to_string(i)).data;
    }
    opt.set_step_count(cp.meta_int("adam_t"));
    start_epoch = cp.meta_int("epochs_done");
  }

  const smoothing::SigmaSchedule schedule{cfg.sigma0, cfg.sigma_decay, cfg.sigma_period,
                                          smoothing::kSigmaFloor};
  Stage2Result result;
  for (int e = 0; e < cfg.stage2_epochs; ++e)
    result.sigma_trace.push_back(cfg.stage2_cbs ? smoothing::anneal_sigma(schedule, e) : 0.0);

  const int end_epoch =
      stop_after > 0 ? std::min(stop_after, cfg.stage2_epochs) : cfg.stage2_epochs;
  train_caption_epochs(model, opt, src_train, feats, start_epoch, end_epoch,
                       cfg.stage2_batch, result.sigma_trace, cfg.seed,
                       &result.loss_trace);
  save_stage2_checkpoint(main_prefix, cfg, model, opt, end_epoch, d_input);

  if (end_epoch < cfg.stage2_epochs) {
    result.model = model;
    result.vocab = vocab;
    result.checkpoint_prefix = main_prefix;
    return result;
  }

  if (cfg.stage2_adapt != "none") {
    const SamplePool adapt_pool = split_pool(
        data, cfg.stage2_adapt == "one_shot" ? "target_one_shot" : "target_few_shot");
    if (!adapt_pool.empty()) {
      nn::Adam adapt_opt(params.tensors(), cfg.stage2_lr);
      const std::vector<double> no_sigma(cfg.adapt_epochs, 0.0);
      train_caption_epochs(model, adapt_opt, adapt_pool, feats, 0, cfg.adapt_epochs,
                           cfg.stage2_batch, no_sigma, mix(cfg.seed, 0xada9ULL),
                           &result.loss_trace);
    }
  }

  save_stage2_checkpoint(cfg.out_dir + "/stage2", cfg, model, opt, cfg.stage2_epochs,
                         d_input);
  result.model = model;
  result.vocab = vocab;
  result.checkpoint_prefix = cfg.out_dir + "/stage2";
  return result;
}

EvalResult run_eval(const ExperimentConfig& cfg, const std::string& split_tag) {
  cfg.validate();
  const auto data = load_dataset(cfg);
  const SamplePool pool = split_pool(data, split_tag);
  if (pool.empty()) throw std::runtime_error("pipeline: split " + split_tag + " is empty");

  const auto cp1 = checkpoint::load_checkpoint(stage1_prefix(cfg));
  require_hash(cp1, config::stage_hash(cfg, 1), "stage1");
  const auto extractor = restore_backbone(cfg, cp1);

  const auto vocab = captioner::read_vocab(cfg.out_dir + "/vocab.txt");
  const auto cp2 = checkpoint::load_checkpoint(cfg.out_dir + "/stage2");
  require_hash(cp2, config::stage_hash(cfg, 2), "stage2");
  auto cap = build_captioner(cfg, cp2.meta_int("d_input"), vocab);
  cp2.restore_params("model.", cap.params());

  FeatureStore feats{features_dir_of(cfg), {}};
  std::vector<std::string> ids;
  std::vector<metrics::EvalPair> pairs;
  std::vector<captioner::ReportRecord> records_out;
  for (const auto* s : pool) {
    Tensor regions;
    if (fs::exists(feats.dir + "/" + s->id + ".feat")) {
      regions = feats.get(s->id);
    } else {
      regions = extractor.forward_features(synthdata::to_tensor({s}), 0.0).regions.detach();
    }
    const auto hyp = cap.beam_search(regions, cfg.beam, 0.0);
    metrics::EvalPair pair;
    pair.candidate = vocab.decode(hyp.ids);
    pair.references = {s->caption};
    ids.push_back(s->id);
    records_out.push_back({s->id, pair.candidate, s->caption});
    pairs.push_back(std::move(pair));
  }

  std::vector<metrics::ProbRecord> prob_records;
  const int chunk = 32;
  for (std::size_t at = 0; at < pool.size(); at += chunk) {
    SamplePool batch(pool.begin() + at,
                     pool.begin() + std::min(at + chunk, pool.size()));
    const Tensor logits =
        extractor.classify(extractor.forward_features(synthdata::to_tensor(batch), 0.0).pooled);
    const int k = logits.cols();
    for (int i = 0; i < logits.rows(); ++i) {
      const double* row = logits.data().data() + static_cast<long>(i) * k;
      const double mx = *std::max_element(row, row + k);
      metrics::ProbRecord r;
      r.probs.resize(k);
      double z = 0.0;
      for (int j = 0; j < k; ++j) z += (r.probs[j] = std::exp(row[j] - mx));
      for (double& p : r.probs) p /= z;
      r.true_class = batch[i]->object_classes.at(0);
      prob_records.push_back(std::move(r));
    }
  }

  EvalResult out;
  out.report = metrics::evaluate(ids, pairs, prob_records, cfg.calibration_bins,
                                 cfg.tace_threshold);
  out.report_path = cfg.out_dir + "/report_" + split_tag + ".txt";
  out.captions_path = cfg.out_dir + "/captions_" + split_tag + ".txt";
  metrics::write_metrics_report(out.report_path, out.report);
  captioner::write_report(out.captions_path, records_out);
  return out;
}

std::string run_matrix(const std::vector<ExperimentConfig>& cfgs) {
  if (cfgs.empty()) throw std::invalid_argument("matrix: need at least one config");
  const std::vector<std::string> keys = {"bleu1",  "bleu2",       "bleu3", "bleu4",
                                         "rouge_l", "meteor_lite", "cider", "ece",
                                         "sce",    "tace",        "brier"};
  struct Variant {
    const char* domain;
    const char* adapt;
    const char* split;
  };
  const Variant variants[] = {{"sd", "none", "source_test"},
                              {"td_one_shot", "one_shot", "target_test"},
                              {"td_few_shot", "few_shot", "target_test"}};

  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  os << "config\tdomain";
  for (const auto& k : keys) os << "\t" << k;
  os << "\n";

  std::map<std::string, std::map<std::string, double>> results;  // name/domain -> summary
  for (const auto& base_cfg : cfgs) {
    ExperimentConfig cfg = base_cfg;
    cfg.validate();
    if (!fs::exists(cfg.data_dir + "/annotations.tsv")) generate_data(cfg);
    run_stage1(cfg, /*resume=*/true);
    for (const auto& v : variants) {
      ExperimentConfig vc = cfg;
      vc.stage2_adapt = v.adapt;
      run_stage2(vc);
      const auto eval = run_eval(vc, v.split);
      results[cfg.name + "\t" + v.domain] = eval.report.summary;
      os << cfg.name << "\t" << v.domain;
      for (const auto& k : keys) os << "\t" << eval.report.summary.at(k);
      os << "\n";
    }
  }

  // Directional checks against the first configuration.
  os << "\n# checks\n";
  const std::string base_name = cfgs.front().name;
  for (std::size_t i = 1; i < cfgs.size(); ++i) {
    const auto& name = cfgs[i].name;
    const double td_b1 = results.at(name + "\ttd_few_shot").at("bleu1");
    const double base_b1 = results.at(base_name + "\ttd_few_shot").at("bleu1");
    os << "check " << name << "_td_few_shot_bleu1_ge_" << base_name << " "
       << (td_b1 >= base_b1 ? "PASS" : "FAIL") << "\n";
    const double ece = results.at(name + "\tsd").at("ece");
    const double base_ece = results.at(base_name + "\tsd").at("ece");
    os << "check " << name << "_sd_ece_le_" << base_name << " "
       << (ece <= base_ece ? "PASS" : "FAIL") << "\n";
  }
  return os.str();
}

void export_embeddings(const ExperimentConfig& cfg, const std::string& split_tag,
                       const std::string& out_path) {
  cfg.validate();
  const auto data = load_dataset(cfg);
  const SamplePool pool = split_pool(data, split_tag);
  if (pool.empty()) throw std::runtime_error("pipeline: split " + split_tag + " is empty");

  const auto cp = checkpoint::load_checkpoint(stage1_prefix(cfg));
  require_hash(cp, config::stage_hash(cfg, 1), "stage1");
  const auto model = restore_backbone(cfg, cp);

  std::vector<backbone::EmbeddingRow> rows;
  const int chunk = 32;
  for (std::size_t at = 0; at < pool.size(); at += chunk) {
    SamplePool batch(pool.begin() + at, pool.begin() + std::min(at + chunk, pool.size()));
    const Tensor proj =
        model.project(model.forward_features(synthdata::to_tensor(batch), 0.0).pooled);
    const int d = proj.cols();
    for (std::size_t i = 0; i < batch.size(); ++i) {
      backbone::EmbeddingRow row;
      row.sample_id = batch[i]->id;
      row.label = batch[i]->object_classes.at(0);
      const double* p = proj.data().data() + static_cast<long>(i) * d;
      row.embedding.assign(p, p + d);
      rows.push_back(std::move(row));
    }
  }
  backbone::write_embedding_table(out_path, rows);
}

void write_feature_file(const std::string& path, const Tensor& regions) {
  if (regions.ndim() != 2) throw std::invalid_argument("feature file: need a 2D tensor");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("feature file: cannot write " + path);
  out << "regions " << regions.rows() << " " << regions.cols() << "\n";
  char buf[32];
  const auto& d = regions.data();
  for (int r = 0; r < regions.rows(); ++r) {
    for (int c = 0; c < regions.cols(); ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", d[static_cast<long>(r) * regions.cols() + c]);
      out << (c ? " " : "") << buf;
    }
    out << "\n";
  }
  if (!out) throw std::runtime_error("feature file: write failed for " + path);
}

Tensor read_feature_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("feature file: cannot open " + path);
  std::string tag;
  int n = 0, d = 0;
  in >> tag >> n >> d;
  if (tag != "regions" || n < 1 || d < 1)
    throw std::runtime_error("feature file: malformed header in " + path);
  std::vector<double> values(static_cast<std::size_t>(n) * d);
  for (auto& v : values)
    if (!(in >> v)) throw std::runtime_error("feature file: truncated " + path);
  return Tensor::from_data({n, d}, std::move(values));
}

}  // namespace icap::pipeline
