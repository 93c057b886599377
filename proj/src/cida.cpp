#include "increcap/cida.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "increcap/losses.hpp"

namespace icap::cida {

namespace {

int label_of(const SceneSample& s) {
  if (s.object_classes.empty())
    throw std::invalid_argument("cida: sample without a class label");
  return s.object_classes[0];
}

std::unordered_map<std::string, const SceneSample*> index_pool(const SamplePool& pool) {
  std::unordered_map<std::string, const SceneSample*> by_id;
  for (const SceneSample* s : pool) by_id[s->id] = s;
  return by_id;
}

Tensor images_to_tensor(const std::vector<const std::vector<std::uint8_t>*>& images,
                        int size) {
  const int n = static_cast<int>(images.size());
  std::vector<double> data(static_cast<std::size_t>(n) * 3 * size * size);
  for (int i = 0; i < n; ++i)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        for (int c = 0; c < 3; ++c)
          data[((static_cast<std::size_t>(i) * 3 + c) * size + y) * size + x] =
              (*images[i])[(y * size + x) * 3 + c] / 255.0;
  return Tensor::from_data({n, 3, size, size}, std::move(data));
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  a ^= b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2);
  return a;
}

void check_finite(double loss, const char* where, int epoch) {
  if (!std::isfinite(loss)) {
    std::ostringstream msg;
    msg << "cida: non-finite loss (" << loss << ") in " << where << " at epoch "
        << epoch;
    throw std::runtime_error(msg.str());
  }
}

double run_ce_epochs(backbone::Backbone& model, const SamplePool& data,
                     const std::vector<int>& labels, int epochs, double initial_lr,
                     const smoothing::SigmaSchedule& schedule, const TrainOptions& opts,
                     std::uint64_t seed, std::vector<double>* trace) {
  nn::SGD sgd(model.params().tensors(), initial_lr, opts.momentum, opts.weight_decay);
  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  double last = 0.0;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    sgd.set_lr(nn::step_decay_lr(initial_lr, opts.lr_decay, opts.lr_period, epoch));
    const double sigma = smoothing::anneal_sigma(schedule, epoch);
    std::mt19937_64 rng(mix(seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      SamplePool batch;
      std::vector<int> batch_labels;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(data[order[i]]);
        batch_labels.push_back(labels[order[i]]);
      }
      Tensor x = synthdata::to_tensor(batch);
      Tensor logits = model.classify(model.forward_features(x, sigma).pooled);
      Tensor loss = losses::ce_with_ls_batch(logits, batch_labels, opts.label_smoothing);
      check_finite(loss.item(), "ce fit", epoch);
      sgd.zero_grad();
      backward(loss);
      sgd.step();
      epoch_loss += loss.item();
      ++batches;
    }
    last = epoch_loss / std::max(1, batches);
    if (trace) trace->push_back(last);
  }
  return last;
}

}  // namespace

std::vector<int> ExemplarMemory::seen_classes() const {
  std::vector<int> out;
  for (const auto& [cls, ids] : per_class) out.push_back(cls);
  return out;
}

void ExemplarMemory::validate() const {
  if (budget < 1) throw std::invalid_argument("memory: budget must be >= 1");
  for (const auto& [cls, ids] : per_class) {
    if (static_cast<int>(ids.size()) > budget)
      throw std::invalid_argument("memory: class " + std::to_string(cls) +
                                  " exceeds the budget");
    std::unordered_set<std::string> seen(ids.begin(), ids.end());
    if (seen.size() != ids.size())
      throw std::invalid_argument("memory: duplicate ids in class " + std::to_string(cls));
  }
}

const char* to_string(Mode m) { return m == Mode::CE_DISTILL ? "CE_DISTILL" : "SUPCON_CIDA"; }

Mode mode_from_string(const std::string& s) {
  if (s == "CE_DISTILL") return Mode::CE_DISTILL;
  if (s == "SUPCON_CIDA") return Mode::SUPCON_CIDA;
  throw std::invalid_argument("unknown mode tag: " + s);
}

void IncrementPlan::validate(const std::vector<int>& old_classes) const {
  if (step_index < 0) throw std::invalid_argument("plan: negative step index");
  if (new_classes.empty()) throw std::invalid_argument("plan: no new classes");
  if (epochs_train < 1 || epochs_finetune < 1)
    throw std::invalid_argument("plan: epoch counts must be positive");
  for (int c : old_classes)
    if (new_classes.count(c))
      throw std::invalid_argument("plan: class " + std::to_string(c) +
                                  " was already seen");
}

TeacherSnapshot::TeacherSnapshot(const backbone::Backbone& model)
    : model_(model.clone()) {}

TeacherSnapshot snapshot_teacher(const backbone::Backbone& model) {
  return TeacherSnapshot(model);
}

SamplePool build_increment_trainset(const ExemplarMemory& memory, const SamplePool& pool,
                                    const SamplePool& new_data,
                                    const IncrementPlan& plan) {
  memory.validate();
  plan.validate(memory.seen_classes());

  auto by_id = index_pool(pool);
  std::unordered_set<std::string> used;
  SamplePool out;
  for (const auto& [cls, ids] : memory.per_class)
    for (const std::string& id : ids) {
      auto it = by_id.find(id);
      if (it == by_id.end())
        throw std::invalid_argument("trainset: memory id '" + id +
                                    "' missing from the sample pool");
      out.push_back(it->second);
      used.insert(id);
    }
  for (const SceneSample* s : new_data) {
    if (!plan.new_classes.count(label_of(*s)))
      throw std::invalid_argument("trainset: sample '" + s->id +
                                  "' is labeled with an already-seen class");
    if (!used.insert(s->id).second)
      throw std::invalid_argument("trainset: duplicate sample id '" + s->id + "'");
    out.push_back(s);
  }
  return out;
}

double lambda_old(int num_old_classes, int num_new_classes) {
  if (num_old_classes < 0 || num_new_classes < 1)
    throw std::invalid_argument("lambda_old: bad class counts");
  return static_cast<double>(num_old_classes) /
         static_cast<double>(num_old_classes + num_new_classes);
}

std::vector<std::uint8_t> augment_view(const std::vector<std::uint8_t>& image,
                                       int size, std::uint64_t view_seed) {
  if (static_cast<int>(image.size()) != size * size * 3)
    throw std::invalid_argument("augment_view: image size mismatch");
  std::mt19937_64 rng(view_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // random crop (0.6-1.0 of the area), nearest-neighbor resize back
  const double area = 0.6 + 0.4 * unit(rng);
  const int side = std::max(1, static_cast<int>(std::lround(size * std::sqrt(area))));
  const int ox = static_cast<int>(unit(rng) * (size - side));
  const int oy = static_cast<int>(unit(rng) * (size - side));
  const bool flip = unit(rng) < 0.5;
  const double brightness = 0.6 + 0.8 * unit(rng);
  const double contrast = 0.6 + 0.8 * unit(rng);
  const double saturation = 0.6 + 0.8 * unit(rng);
  const bool grayscale = unit(rng) < 0.2;

  std::vector<double> work(static_cast<std::size_t>(size) * size * 3);
  double mean = 0.0;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const int sx0 = flip ? (size - 1 - x) : x;
      const int sx = ox + sx0 * side / size;
      const int sy = oy + y * side / size;
      for (int c = 0; c < 3; ++c) {
        const double v = image[(sy * size + sx) * 3 + c] * brightness;
        work[(y * size + x) * 3 + c] = v;
        mean += v;
      }
    }
  mean /= static_cast<double>(work.size());

  std::vector<std::uint8_t> out(image.size());
  for (std::size_t p = 0; p < work.size(); p += 3) {
    const double gray = (work[p] + work[p + 1] + work[p + 2]) / 3.0;
    for (int c = 0; c < 3; ++c) {
      double v = (work[p + c] - mean) * contrast + mean;
      v = grayscale ? gray : gray + (v - gray) * saturation;
      out[p + c] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
  }
  return out;
}

LossTrace train_increment(backbone::Backbone& model, const TeacherSnapshot* teacher,
                          const SamplePool& trainset, const IncrementPlan& plan,
                          const std::vector<int>& old_classes,
                          const smoothing::SigmaSchedule& schedule,
                          const TrainOptions& opts) {
  plan.validate(old_classes);
  if (plan.step_index > 0 && !teacher)
    throw std::invalid_argument("train_increment: step > 0 requires a teacher");
  if (trainset.empty()) throw std::invalid_argument("train_increment: empty trainset");

  const int n_old = static_cast<int>(old_classes.size());
  const double lam = lambda_old(n_old, static_cast<int>(plan.new_classes.size()));
  std::vector<int> labels;
  for (const SceneSample* s : trainset) labels.push_back(label_of(*s));

  LossTrace trace;
  std::vector<int> order(trainset.size());
  std::iota(order.begin(), order.end(), 0);

  if (plan.mode == Mode::CE_DISTILL) {
    nn::SGD sgd(model.params().tensors(), opts.lr, opts.momentum, opts.weight_decay);
    for (int epoch = 0; epoch < plan.epochs_train; ++epoch) {
      sgd.set_lr(nn::step_decay_lr(opts.lr, opts.lr_decay, opts.lr_period, epoch));
      const double sigma = smoothing::anneal_sigma(schedule, epoch);
      std::mt19937_64 rng(mix(opts.seed, static_cast<std::uint64_t>(epoch)));
      std::shuffle(order.begin(), order.end(), rng);

      double epoch_loss = 0.0;
      int batches = 0;
      for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
        const std::size_t end = std::min(order.size(), start + opts.batch_size);
        SamplePool batch;
        std::vector<int> batch_labels;
        for (std::size_t i = start; i < end; ++i) {
          batch.push_back(trainset[order[i]]);
          batch_labels.push_back(labels[order[i]]);
        }
        Tensor x = synthdata::to_tensor(batch);
        Tensor logits = model.classify(model.forward_features(x, sigma).pooled);
        Tensor ce = losses::ce_with_ls_batch(logits, batch_labels, opts.label_smoothing);

        Tensor total;
        if (teacher && lam > 0.0) {
          Tensor t_logits = teacher->model()
                                .classify(teacher->model().forward_features(x, 0.0).pooled)
                                .detach();
          Tensor s_old = slice_cols(logits, 0, n_old);
          Tensor distill =
              losses::logit_distill_loss_batch(s_old, t_logits, opts.distill_temperature);
          total = losses::ci_total_loss(ce, distill, lam);
        } else {
          total = ce;
        }
        check_finite(total.item(), "ce_distill", epoch);
        sgd.zero_grad();
        backward(total);
        sgd.step();
        epoch_loss += total.item();
        ++batches;
      }
      trace.per_epoch.push_back(epoch_loss / std::max(1, batches));
    }
    return trace;
  }

  // SUPCON_CIDA: contrastive representation epochs, then a head fit on
  // frozen features.
  nn::SGD sgd(model.representation_params().tensors(), opts.lr, opts.momentum,
              opts.weight_decay);
  for (int epoch = 0; epoch < plan.epochs_train; ++epoch) {
    sgd.set_lr(nn::step_decay_lr(opts.lr, opts.lr_decay, opts.lr_period, epoch));
    const double sigma = smoothing::anneal_sigma(schedule, epoch);
    std::mt19937_64 rng(mix(opts.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      const int bn = static_cast<int>(end - start);
      if (bn < 2) continue;  // a contrastive batch needs at least two samples

      std::vector<std::vector<std::uint8_t>> v1(bn), v2(bn);
      std::vector<const std::vector<std::uint8_t>*> p1(bn), p2(bn);
      std::vector<int> batch_labels(2 * bn);
      const int size = trainset[order[start]]->image_size;
      for (int i = 0; i < bn; ++i) {
        const SceneSample* s = trainset[order[start + i]];
        const std::uint64_t base =
            mix(mix(opts.seed, std::hash<std::string>{}(s->id)),
                static_cast<std::uint64_t>(epoch));
        v1[i] = augment_view(s->image, size, mix(base, 1));
        v2[i] = augment_view(s->image, size, mix(base, 2));
        p1[i] = &v1[i];
        p2[i] = &v2[i];
        batch_labels[i] = labels[order[start + i]];
        batch_labels[bn + i] = labels[order[start + i]];
      }
      Tensor x1 = images_to_tensor(p1, size);
      Tensor x2 = images_to_tensor(p2, size);
      Tensor z1 = model.project(model.forward_features(x1, sigma).pooled);
      Tensor z2 = model.project(model.forward_features(x2, sigma).pooled);

      losses::ContrastiveBatch cb;
      cb.embeddings = concat_rows({z1, z2});
      cb.labels = batch_labels;
      cb.temperature = opts.supcon_temperature;
      Tensor total = losses::supcon_loss(cb);

      if (teacher && lam > 0.0) {
        Tensor t1 = teacher->model().project(
            teacher->model().forward_features(x1, 0.0).pooled);
        Tensor t2 = teacher->model().project(
            teacher->model().forward_features(x2, 0.0).pooled);
        Tensor fd = losses::feature_distill_loss(z1, z2, t1, t2,
                                                 opts.supcon_temperature);
        total = add(total, scale(fd, lam));
      }
      check_finite(total.item(), "supcon_cida", epoch);
      sgd.zero_grad();
      backward(total);
      sgd.step();
      epoch_loss += total.item();
      ++batches;
    }
    trace.per_epoch.push_back(epoch_loss / std::max(1, batches));
  }

  // classifier fit on frozen features
  nn::SGD head_sgd(model.classifier_params().tensors(), opts.lr, opts.momentum,
                   opts.weight_decay);
  for (int epoch = 0; epoch < opts.classifier_fit_epochs; ++epoch) {
    head_sgd.set_lr(nn::step_decay_lr(opts.lr, opts.lr_decay, opts.lr_period, epoch));
    std::mt19937_64 shuffle_rng(
        mix(opts.seed + 0x5eadULL, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      SamplePool batch;
      std::vector<int> batch_labels;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(trainset[order[i]]);
        batch_labels.push_back(labels[order[i]]);
      }
      Tensor x = synthdata::to_tensor(batch);
      Tensor pooled = model.forward_features(x, 0.0).pooled.detach();
      Tensor loss = losses::ce_with_ls_batch(model.classify(pooled), batch_labels,
                                             opts.label_smoothing);
      check_finite(loss.item(), "classifier fit", epoch);
      head_sgd.zero_grad();
      backward(loss);
      head_sgd.step();
    }
  }
  return trace;
}

SamplePool balanced_subset(const ExemplarMemory& memory, const SamplePool& pool,
                           const SamplePool& new_data) {
  memory.validate();
  auto by_id = index_pool(pool);

  // per-class candidate lists in stable order: memory classes first
  std::map<int, SamplePool> candidates;
  for (const auto& [cls, ids] : memory.per_class) {
    candidates[cls];  // a seen class with zero samples must be detected below
    for (const std::string& id : ids) {
      auto it = by_id.find(id);
      if (it == by_id.end())
        throw std::invalid_argument("balanced_subset: memory id '" + id +
                                    "' missing from the sample pool");
      candidates[cls].push_back(it->second);
    }
  }
  for (const SceneSample* s : new_data) candidates[label_of(*s)].push_back(s);

  std::size_t min_avail = SIZE_MAX;
  for (const auto& [cls, list] : candidates) {
    if (list.empty())
      throw std::invalid_argument("balanced_subset: class " + std::to_string(cls) +
                                  " has no samples");
    min_avail = std::min(min_avail, list.size());
  }
  const std::size_t m = std::min<std::size_t>(memory.budget, min_avail);

  SamplePool subset;
  for (const auto& [cls, list] : candidates)
    for (std::size_t i = 0; i < m; ++i) subset.push_back(list[i]);
  return subset;
}

void balanced_finetune(backbone::Backbone& model, const ExemplarMemory& memory,
                       const SamplePool& pool, const SamplePool& new_data,
                       const IncrementPlan& plan, const std::vector<int>& old_classes,
                       const TrainOptions& opts) {
  plan.validate(old_classes);
  SamplePool subset = balanced_subset(memory, pool, new_data);
  std::vector<int> labels;
  for (const SceneSample* s : subset) labels.push_back(label_of(*s));
  smoothing::SigmaSchedule off;
  off.sigma0 = 0.0;  // no curriculum during fine-tuning
  run_ce_epochs(model, subset, labels, plan.epochs_finetune, opts.finetune_lr, off,
                opts, opts.seed + 0xf1e7ULL, nullptr);
}

std::vector<int> herd_select(const std::vector<std::vector<double>>& features,
                             int budget) {
  if (features.empty()) return {};
  const std::size_t d = features[0].size();
  std::vector<double> mu(d, 0.0);
  for (const auto& f : features) {
    if (f.size() != d) throw std::invalid_argument("herd_select: ragged features");
    for (std::size_t j = 0; j < d; ++j) mu[j] += f[j];
  }
  for (double& v : mu) v /= static_cast<double>(features.size());

  const int take = std::min<int>(budget, static_cast<int>(features.size()));
  std::vector<bool> used(features.size(), false);
  std::vector<double> running(d, 0.0);
  std::vector<int> picks;
  for (int k = 1; k <= take; ++k) {
    int best = -1;
    double best_dist = 0.0;
    for (std::size_t i = 0; i < features.size(); ++i) {
      if (used[i]) continue;
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double v = (running[j] + features[i][j]) / k - mu[j];
        dist += v * v;
      }
      if (best < 0 || dist < best_dist) {
        best = static_cast<int>(i);
        best_dist = dist;
      }
    }
    used[best] = true;
    picks.push_back(best);
    for (std::size_t j = 0; j < d; ++j) running[j] += features[best][j];
  }
  return picks;
}

ExemplarMemory update_memory(const ExemplarMemory& memory, const SamplePool& new_data,
                             const backbone::Backbone& model, int budget) {
  memory.validate();
  if (budget < 1) throw std::invalid_argument("update_memory: budget must be >= 1");

  ExemplarMemory out = memory;
  out.budget = budget;

  std::map<int, SamplePool> by_class;
  for (const SceneSample* s : new_data) {
    if (out.per_class.count(label_of(*s))) continue;  // existing classes untouched
    by_class[label_of(*s)].push_back(s);
  }
  for (const auto& [cls, list] : by_class) {
    Tensor z = model.project(model.forward_features(synthdata::to_tensor(list), 0.0).pooled);
    std::vector<std::vector<double>> feats(list.size());
    const int d = z.cols();
    for (std::size_t i = 0; i < list.size(); ++i)
      feats[i].assign(z.data().begin() + static_cast<long>(i) * d,
                      z.data().begin() + static_cast<long>(i + 1) * d);
    for (int idx : herd_select(feats, budget))
      out.per_class[cls].push_back(list[idx]->id);
  }
  out.validate();
  return out;
}

IncrementEval evaluate_increment(const backbone::Backbone& model,
                                 const std::map<int, SamplePool>& testsets,
                                 const std::vector<int>& old_classes,
                                 const std::optional<double>& prev_old_mean) {
  if (testsets.empty()) throw std::invalid_argument("evaluate_increment: no test sets");
  IncrementEval eval;
  const std::unordered_set<int> old_set(old_classes.begin(), old_classes.end());

  double sum = 0.0, old_sum = 0.0;
  int present = 0, old_present = 0;
  for (const auto& [cls, pool] : testsets) {
    if (pool.empty()) {
      eval.absent.push_back(cls);
      continue;
    }
    Tensor logits = model.classify(model.forward_features(synthdata::to_tensor(pool), 0.0).pooled);
    const int k = logits.cols();
    int correct = 0;
    for (int i = 0; i < logits.rows(); ++i) {
      const double* row = logits.data().data() + static_cast<long>(i) * k;
      const int pred = static_cast<int>(std::max_element(row, row + k) - row);
      if (pred == cls) ++correct;
    }
    const double acc = static_cast<double>(correct) / pool.size();
    eval.per_class[cls] = acc;
    sum += acc;
    ++present;
    if (old_set.count(cls)) {
      old_sum += acc;
      ++old_present;
    }
  }
  if (present > 0) eval.mean_accuracy = sum / present;
  if (old_present > 0) eval.old_mean_accuracy = old_sum / old_present;
  if (prev_old_mean && old_present > 0)
    eval.forgetting = *prev_old_mean - eval.old_mean_accuracy;
  return eval;
}

void write_increment_manifest(const std::string& path, const IncrementManifest& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_increment_manifest: cannot open " + path);
  out.precision(17);
  out << "step " << m.step_index << "\n";
  out << "mode " << to_string(m.mode) << "\n";
  out << "classes";
  for (int c : m.classes) out << " " << c;
  out << "\n";
  out << "budget " << m.memory.budget << "\n";
  for (const auto& [cls, ids] : m.memory.per_class) {
    out << "memory " << cls;
    for (const std::string& id : ids) out << " " << id;
    out << "\n";
  }
  for (const auto& [key, val] : m.metrics) out << "metric " << key << " " << val << "\n";
}

IncrementManifest read_increment_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_increment_manifest: cannot open " + path);
  IncrementManifest m;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "step") {
      ss >> m.step_index;
    } else if (tag == "mode") {
      std::string mode;
      ss >> mode;
      m.mode = mode_from_string(mode);
    } else if (tag == "classes") {
      int c;
      while (ss >> c) m.classes.push_back(c);
    } else if (tag == "budget") {
      ss >> m.memory.budget;
    } else if (tag == "memory") {
      int cls;
      ss >> cls;
      std::string id;
      while (ss >> id) m.memory.per_class[cls].push_back(id);
    } else if (tag == "metric") {
      std::string key;
      double val;
      ss >> key >> val;
      m.metrics[key] = val;
    } else {
      throw std::runtime_error("increment manifest: unknown tag '" + tag + "'");
    }
  }
  return m;
}

}  // namespace icap::cida
