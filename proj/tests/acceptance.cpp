// Acceptance suite: nine end-to-end criteria, one pass/fail line each.
// Exits nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "gradcheck.hpp"
#include "increcap/backbone.hpp"
#include "increcap/captioner.hpp"
#include "increcap/cida.hpp"
#include "increcap/config.hpp"
#include "increcap/losses.hpp"
#include "increcap/metrics.hpp"
#include "increcap/pipeline.hpp"
#include "increcap/smoothing.hpp"
#include "increcap/synthdata.hpp"

using namespace icap;
namespace fs = std::filesystem;
using synthdata::SceneSample;
using SamplePool = std::vector<const SceneSample*>;

namespace {

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

SamplePool pool_of(const synthdata::Manifest& m, synthdata::Domain d, synthdata::Split s) {
  SamplePool out;
  for (const auto& x : m.samples)
    if (x.domain == d && x.split == s) out.push_back(&x);
  return out;
}

// Caption trainer over fixed region features; returns the trained model.
captioner::Captioner train_captioner(const captioner::Vocab& vocab, int d_input,
                                     const std::vector<Tensor>& feats,
                                     const std::vector<std::vector<int>>& caps,
                                     int epochs, bool cbs, std::uint64_t seed,
                                     double lr = 0.003, int batch = 20) {
  std::mt19937_64 rng(mix(seed, 0xacce97ULL));
  auto cfg = captioner::CaptionerConfig::desk_small(d_input);
  cfg.max_len = 8;
  captioner::Captioner model(cfg, vocab, rng);
  auto params = model.params();
  nn::Adam opt(params.tensors(), lr);
  const smoothing::SigmaSchedule sched;
  for (int e = 0; e < epochs; ++e) {
    const double sigma = cbs ? smoothing::anneal_sigma(sched, e) : 0.0;
    model.seed_dropout(mix(seed ^ 0xd4ULL, e));
    std::vector<int> order(feats.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::mt19937_64 shuf(mix(seed, e));
    std::shuffle(order.begin(), order.end(), shuf);
    for (std::size_t at = 0; at < order.size(); at += batch) {
      std::vector<Tensor> fb;
      std::vector<std::vector<int>> cb;
      for (std::size_t i = at; i < std::min(at + batch, order.size()); ++i) {
        fb.push_back(feats[order[i]]);
        cb.push_back(caps[order[i]]);
      }
      opt.zero_grad();
      Tensor loss = model.train_step(fb, cb, sigma);
      backward(loss);
      opt.step();
    }
  }
  return model;
}

// Raw 8x8 image patches as region features (patch-embedding style). Conv
// features from a desk-size backbone wash out the small interaction glyph,
// so captioner-focused criteria read the pixels directly.
std::vector<Tensor> patch_features(const SamplePool& pool, int img) {
  std::vector<Tensor> out;
  const int p = 8, g = img / p;
  for (const auto* x : pool) {
    Tensor t = Tensor::zeros({g * g, p * p * 3});
    for (int gy = 0; gy < g; ++gy)
      for (int gx = 0; gx < g; ++gx) {
        double* row = t.data().data() + static_cast<long>(gy * g + gx) * p * p * 3;
        for (int y = 0; y < p; ++y)
          for (int xx = 0; xx < p; ++xx)
            for (int c = 0; c < 3; ++c)
              row[(y * p + xx) * 3 + c] =
                  x->image[(((gy * p + y) * img) + gx * p + xx) * 3 + c] / 255.0 - 0.5;
      }
    out.push_back(t);
  }
  return out;
}

double caption_bleu(const captioner::Captioner& model, const captioner::Vocab& vocab,
                    const std::vector<Tensor>& feats, const SamplePool& pool, int beam,
                    int order) {
  std::vector<metrics::EvalPair> pairs;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto hyp = model.beam_search(feats[i], beam, 0.0);
    pairs.push_back({vocab.decode(hyp.ids), {pool[i]->caption}});
  }
  return metrics::corpus_bleu(pairs, order);
}

// ---------------------------------------------------------------------------
// independent metric oracles (string-keyed, long double)
// ---------------------------------------------------------------------------

using Tok = std::vector<std::string>;

std::unordered_map<std::string, int> o_ngrams(const Tok& t, int n) {
  std::unordered_map<std::string, int> m;
  for (int i = 0; i + n <= static_cast<int>(t.size()); ++i) {
    std::string key;
    for (int j = 0; j < n; ++j) key += t[i + j] + "\x1f";
    ++m[key];
  }
  return m;
}

long double o_bleu(const metrics::EvalPair& p, int n) {
  if (p.candidate.empty()) return 0.0L;
  long double log_sum = 0.0L;
  for (int order = 1; order <= n; ++order) {
    auto cand = o_ngrams(p.candidate, order);
    std::unordered_map<std::string, int> best;
    for (const auto& r : p.references)
      for (const auto& [g, c] : o_ngrams(r, order)) best[g] = std::max(best[g], c);
    long over = 0, tot = 0;
    for (const auto& [g, c] : cand) {
      over += std::min(c, best.count(g) ? best[g] : 0);
      tot += c;
    }
    if (over == 0 || tot == 0) return 0.0L;
    log_sum += std::log(static_cast<long double>(over) / tot);
  }
  const long c = static_cast<long>(p.candidate.size());
  long r = static_cast<long>(p.references[0].size());
  for (const auto& ref : p.references) {
    const long rl = static_cast<long>(ref.size());
    if (std::llabs(rl - c) < std::llabs(r - c) ||
        (std::llabs(rl - c) == std::llabs(r - c) && rl < r))
      r = rl;
  }
  const long double bp = c >= r ? 1.0L : std::exp(1.0L - static_cast<long double>(r) / c);
  return bp * std::exp(log_sum / n);
}

long double o_rouge(const metrics::EvalPair& p) {
  if (p.candidate.empty()) return 0.0L;
  long double best = 0.0L;
  for (const auto& ref : p.references) {
    const int n = static_cast<int>(p.candidate.size()), m = static_cast<int>(ref.size());
    std::vector<std::vector<int>> dp(n + 1, std::vector<int>(m + 1, 0));
    for (int i = 1; i <= n; ++i)
      for (int j = 1; j <= m; ++j)
        dp[i][j] = p.candidate[i - 1] == ref[j - 1] ? dp[i - 1][j - 1] + 1
                                                    : std::max(dp[i - 1][j], dp[i][j - 1]);
    if (dp[n][m] == 0) continue;
    const long double pr = static_cast<long double>(dp[n][m]) / n;
    const long double rc = static_cast<long double>(dp[n][m]) / m;
    best = std::max(best, 2.44L * pr * rc / (rc + 1.44L * pr));
  }
  return best;
}

long double o_meteor(const metrics::EvalPair& p) {
  if (p.candidate.empty()) return 0.0L;
  long double best = 0.0L;
  for (const auto& ref : p.references) {
    std::vector<int> link(p.candidate.size(), -1);
    std::vector<char> taken(ref.size(), 0);
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t i = 0; i < p.candidate.size(); ++i) {
        if (link[i] >= 0) continue;
        for (std::size_t j = 0; j < ref.size(); ++j) {
          if (taken[j]) continue;
          const bool hit = pass == 0 ? p.candidate[i] == ref[j]
                                     : metrics::stem(p.candidate[i]) == metrics::stem(ref[j]);
          if (hit) {
            link[i] = static_cast<int>(j);
            taken[j] = 1;
            break;
          }
        }
      }
    int matches = 0, chunks = 0, prev = -2;
    for (std::size_t i = 0; i < link.size(); ++i) {
      if (link[i] < 0) {
        prev = -2;
        continue;
      }
      ++matches;
      if (link[i] != prev + 1) ++chunks;
      prev = link[i];
    }
    if (matches == 0) continue;
    const long double pr = static_cast<long double>(matches) / p.candidate.size();
    const long double rc = static_cast<long double>(matches) / ref.size();
    const long double f = 10.0L * pr * rc / (rc + 9.0L * pr);
    const long double fr = static_cast<long double>(chunks) / matches;
    best = std::max(best, f * (1.0L - 0.5L * fr * fr * fr));
  }
  return best;
}

std::vector<long double> o_cider(const std::vector<metrics::EvalPair>& corpus) {
  const long double nd = static_cast<long double>(corpus.size());
  std::vector<std::unordered_map<std::string, int>> df(4);
  for (const auto& p : corpus)
    for (int n = 1; n <= 4; ++n) {
      std::set<std::string> seen;
      for (const auto& r : p.references)
        for (const auto& [g, c] : o_ngrams(r, n)) seen.insert(g);
      for (const auto& g : seen) ++df[n - 1][g];
    }
  auto vec_of = [&](const Tok& t, int n) {
    std::unordered_map<std::string, long double> v;
    for (const auto& [g, c] : o_ngrams(t, n)) {
      const long double d = df[n - 1].count(g) ? df[n - 1][g] : 0;
      v[g] = c * std::log(nd / std::max(1.0L, d));
    }
    return v;
  };
  std::vector<long double> out;
  for (const auto& p : corpus) {
    long double score = 0.0L;
    for (int n = 1; n <= 4; ++n) {
      auto cv = vec_of(p.candidate, n);
      std::unordered_map<std::string, long double> rv;
      for (const auto& r : p.references)
        for (const auto& [g, v] : vec_of(r, n)) rv[g] += v / p.references.size();
      long double dot = 0, na = 0, nb = 0;
      for (const auto& [g, v] : cv) {
        na += v * v;
        if (rv.count(g)) dot += v * rv[g];
      }
      for (const auto& [g, v] : rv) nb += v * v;
      if (na > 0 && nb > 0) score += dot / (std::sqrt(na) * std::sqrt(nb));
    }
    out.push_back(10.0L * score / 4.0L);
  }
  return out;
}

int o_bin(long double v, int bins) {
  return std::max(0, std::min(bins - 1, static_cast<int>(std::ceil(v * bins)) - 1));
}

long double o_ece(const std::vector<metrics::ProbRecord>& rs, int bins) {
  std::vector<long double> cs(bins, 0), as(bins, 0);
  std::vector<int> cnt(bins, 0);
  for (const auto& r : rs) {
    int pred = 0;
    for (std::size_t i = 1; i < r.probs.size(); ++i)
      if (r.probs[i] > r.probs[pred]) pred = static_cast<int>(i);
    const int b = o_bin(r.probs[pred], bins);
    cs[b] += r.probs[pred];
    as[b] += pred == r.true_class;
    ++cnt[b];
  }
  long double t = 0;
  for (int b = 0; b < bins; ++b)
    if (cnt[b]) t += (static_cast<long double>(cnt[b]) / rs.size()) *
                     std::abs(as[b] / cnt[b] - cs[b] / cnt[b]);
  return t;
}

long double o_sce(const std::vector<metrics::ProbRecord>& rs, int bins) {
  const int k = static_cast<int>(rs[0].probs.size());
  long double t = 0;
  for (int cls = 0; cls < k; ++cls) {
    std::vector<long double> cs(bins, 0), as(bins, 0);
    std::vector<int> cnt(bins, 0);
    for (const auto& r : rs) {
      const int b = o_bin(r.probs[cls], bins);
      cs[b] += r.probs[cls];
      as[b] += r.true_class == cls;
      ++cnt[b];
    }
    for (int b = 0; b < bins; ++b)
      if (cnt[b]) t += (static_cast<long double>(cnt[b]) / rs.size()) *
                       std::abs(as[b] / cnt[b] - cs[b] / cnt[b]);
  }
  return t / k;
}

long double o_tace(const std::vector<metrics::ProbRecord>& rs, int bins, long double thr) {
  const int k = static_cast<int>(rs[0].probs.size());
  long double t = 0;
  for (int cls = 0; cls < k; ++cls) {
    std::vector<std::pair<long double, long double>> e;
    for (const auto& r : rs)
      if (r.probs[cls] >= thr) e.push_back({r.probs[cls], r.true_class == cls ? 1.0L : 0.0L});
    if (e.empty()) continue;
    std::stable_sort(e.begin(), e.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    const std::size_t n = e.size();
    for (int b = 0; b < bins; ++b) {
      const std::size_t lo = b * n / bins, hi = (b + 1) * n / bins;
      if (lo == hi) continue;
      long double c = 0, a = 0;
      for (std::size_t i = lo; i < hi; ++i) {
        c += e[i].first;
        a += e[i].second;
      }
      const long double sz = static_cast<long double>(hi - lo);
      t += (sz / n) * std::abs(a / sz - c / sz);
    }
  }
  return t / k;
}

long double o_brier(const std::vector<metrics::ProbRecord>& rs) {
  long double t = 0;
  for (const auto& r : rs)
    for (std::size_t c = 0; c < r.probs.size(); ++c) {
      const long double tgt = static_cast<int>(c) == r.true_class ? 1.0L : 0.0L;
      t += (r.probs[c] - tgt) * (r.probs[c] - tgt);
    }
  return t / rs.size();
}

Tok random_tokens(std::mt19937_64& rng, int lo, int hi) {
  static const std::vector<std::string> vocab = {"a",   "b",    "cat",    "dog",
                                                 "run", "runs", "jumped", "eating"};
  std::uniform_int_distribution<int> len(lo, hi);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(vocab.size()) - 1);
  Tok t(len(rng));
  for (auto& w : t) w = vocab[pick(rng)];
  return t;
}

metrics::EvalPair random_pair(std::mt19937_64& rng) {
  metrics::EvalPair p;
  p.candidate = random_tokens(rng, 1, 8);
  std::uniform_int_distribution<int> nrefs(1, 3);
  const int n = nrefs(rng);
  for (int i = 0; i < n; ++i) p.references.push_back(random_tokens(rng, 1, 8));
  return p;
}

std::vector<metrics::ProbRecord> random_records(std::mt19937_64& rng, int n, int k) {
  std::uniform_real_distribution<double> u(0.01, 1.0);
  std::uniform_int_distribution<int> cls(0, k - 1);
  std::vector<metrics::ProbRecord> rs(n);
  for (auto& r : rs) {
    r.probs.resize(k);
    double sum = 0;
    for (double& p : r.probs) sum += (p = u(rng));
    for (double& p : r.probs) p /= sum;
    r.true_class = cls(rng);
  }
  return rs;
}

// ---------------------------------------------------------------------------
// criteria
// ---------------------------------------------------------------------------

bool criterion1(std::string& note) {
  const double tol = 1e-9;
  std::mt19937_64 rng(101);
  double worst = 0.0;
  std::vector<metrics::EvalPair> batch;
  for (int i = 0; i < 120; ++i) {
    const auto p = random_pair(rng);
    for (int n = 1; n <= 4; ++n)
      worst = std::max(worst, std::abs(metrics::bleu(p, n) - static_cast<double>(o_bleu(p, n))));
    worst = std::max(worst, std::abs(metrics::rouge_l(p) - static_cast<double>(o_rouge(p))));
    worst = std::max(worst,
                     std::abs(metrics::meteor_lite(p) - static_cast<double>(o_meteor(p))));
    batch.push_back(p);
    if (batch.size() == 6) {
      const auto got = metrics::cider(batch);
      const auto want = o_cider(batch);
      for (std::size_t j = 0; j < got.size(); ++j)
        worst = std::max(worst, std::abs(got[j] - static_cast<double>(want[j])));
      batch.clear();
    }
  }
  for (int i = 0; i < 120; ++i) {
    const int k = 2 + static_cast<int>(rng() % 4);
    const auto rs = random_records(rng, 3 + static_cast<int>(rng() % 30), k);
    const int bins = 1 + static_cast<int>(rng() % 10);
    worst = std::max(worst, std::abs(metrics::ece(rs, bins) - static_cast<double>(o_ece(rs, bins))));
    worst = std::max(worst, std::abs(metrics::sce(rs, bins) - static_cast<double>(o_sce(rs, bins))));
    worst = std::max(worst, std::abs(metrics::tace(rs, bins, 1e-3) -
                                     static_cast<double>(o_tace(rs, bins, 1e-3L))));
    worst = std::max(worst, std::abs(metrics::brier(rs) - static_cast<double>(o_brier(rs))));
  }

  // identity maxima
  bool identities = true;
  metrics::EvalPair id;
  id.candidate = {"a", "cat", "ran", "far", "away"};
  id.references = {id.candidate};
  identities &= std::abs(metrics::bleu(id, 4) - 1.0) <= tol;
  identities &= std::abs(metrics::rouge_l(id) - 1.0) <= tol;
  std::vector<metrics::EvalPair> idc;
  for (int i = 0; i < 5; ++i) {
    // disjoint token sets per pair so every n-gram keeps a nonzero idf
    metrics::EvalPair p;
    for (int t = 0; t < 5; ++t)
      p.candidate.push_back("w" + std::to_string(i) + "_" + std::to_string(t));
    p.references = {p.candidate};
    idc.push_back(p);
  }
  for (double s : metrics::cider(idc)) identities &= std::abs(s - 10.0) <= 1e-6;
  const std::vector<metrics::ProbRecord> sharp = {{{1.0, 0.0}, 0}, {{0.0, 1.0}, 1}};
  identities &= metrics::ece(sharp) <= tol && metrics::sce(sharp) <= tol &&
                metrics::tace(sharp) <= tol && metrics::brier(sharp) <= tol;

  std::ostringstream os;
  os << "max |delta| " << worst << (identities ? ", identities ok" : ", identities BROKEN");
  note = os.str();
  return worst <= tol && identities;
}

bool criterion2(std::string& note) {
  std::mt19937_64 rng(202);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    // ce_with_ls
    {
      const int k = 3 + static_cast<int>(rng() % 5);
      Tensor logits = Tensor::randn({1, k}, rng, 1.0, true);
      const int target = static_cast<int>(rng() % k);
      worst = std::max(worst, gradcheck::max_rel_error(
                                  [&] { return losses::ce_with_ls(logits, target, 0.1); },
                                  {logits}, 1e-4));
    }
    // supcon_loss
    {
      const int n = 3 + static_cast<int>(rng() % 3), d = 4;
      Tensor raw = Tensor::randn({2 * n, d}, rng, 1.0, true);
      std::vector<int> labels(2 * n);
      for (int j = 0; j < 2 * n; ++j) labels[j] = static_cast<int>(rng() % 2);
      labels[1] = labels[0];  // guarantee at least one positive pair
      worst = std::max(
          worst, gradcheck::max_rel_error(
                     [&] {
                       losses::ContrastiveBatch b{l2_normalize_rows(raw), labels, 0.07};
                       return losses::supcon_loss(b);
                     },
                     {raw}, 1e-4));
    }
    // logit_distill_loss
    {
      const int k = 3 + static_cast<int>(rng() % 5);
      Tensor student = Tensor::randn({1, k}, rng, 1.0, true);
      Tensor teacher = Tensor::randn({1, k}, rng, 1.0);
      worst = std::max(worst,
                       gradcheck::max_rel_error(
                           [&] { return losses::logit_distill_loss({student, teacher, 3.0}); },
                           {student}, 1e-4));
    }
    // feature_distill_loss
    {
      const int n = 3, d = 4;
      Tensor s1 = Tensor::randn({n, d}, rng, 1.0, true);
      Tensor s2 = Tensor::randn({n, d}, rng, 1.0, true);
      Tensor t1 = l2_normalize_rows(Tensor::randn({n, d}, rng, 1.0)).detach();
      Tensor t2 = l2_normalize_rows(Tensor::randn({n, d}, rng, 1.0)).detach();
      worst = std::max(worst, gradcheck::max_rel_error(
                                  [&] {
                                    return losses::feature_distill_loss(
                                        l2_normalize_rows(s1), l2_normalize_rows(s2), t1,
                                        t2, 0.07);
                                  },
                                  {s1, s2}, 1e-4));
    }
  }
  std::ostringstream os;
  os << "max rel err " << worst;
  note = os.str();
  return worst < 1e-4;
}

bool criterion3(std::string& note) {
  const smoothing::SigmaSchedule sched;  // sigma0 1, decay 0.9 every 2 epochs
  double trace_err = 0.0;
  for (int e = 0; e < 50; ++e) {
    const double want = std::max(smoothing::kSigmaFloor, std::pow(0.9, e / 2));
    trace_err = std::max(trace_err, std::abs(smoothing::anneal_sigma(sched, e) - want));
  }

  // 2D: identical weights, CBS flag on vs off, sigma at the floor
  std::mt19937_64 rng_a(7), rng_b(7);
  auto cfg_on = backbone::BackboneConfig::desk_small(16, 3);
  cfg_on.cbs_enabled = true;
  auto cfg_off = cfg_on;
  cfg_off.cbs_enabled = false;
  backbone::Backbone on(cfg_on, rng_a), off(cfg_off, rng_b);
  std::mt19937_64 xrng(11);
  Tensor x = Tensor::uniform({2, 3, 16, 16}, xrng, 0.0, 1.0);
  const Tensor pa = on.forward_features(x, smoothing::kSigmaFloor).pooled;
  const Tensor pb = off.forward_features(x, 1.0).pooled;
  double diff2d = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i)
    diff2d = std::max(diff2d, std::abs(pa.data()[i] - pb.data()[i]));

  // 1D: the CBS front at the floor equals the plain conv + norm + relu path
  std::mt19937_64 rng1(5);
  Tensor regions = Tensor::randn({6, 12}, rng1, 1.0);
  Tensor taps = Tensor::from_data({3}, {0.2, 0.5, 0.3});
  nn::LayerNorm norm(12);
  const Tensor y_floor = smoothing::cbs1d_layer(regions, taps, smoothing::kSigmaFloor, norm);
  const Tensor y_plain = relu(norm.forward(conv1d_rows(regions, taps)));
  double diff1d = 0.0;
  for (std::size_t i = 0; i < y_floor.size(); ++i)
    diff1d = std::max(diff1d, std::abs(y_floor.data()[i] - y_plain.data()[i]));

  std::ostringstream os;
  os << "trace err " << trace_err << ", 2d floor gap " << diff2d << ", 1d floor gap "
     << diff1d;
  note = os.str();
  return trace_err <= 1e-12 && diff2d <= 1e-4 && diff1d <= 1e-4;
}

// Stage-1 style training of one increment step over explicit data.
cida::TrainOptions accept_opts(std::uint64_t seed) {
  cida::TrainOptions o;
  o.lr = 0.05;  // scaled up for the desk-size network; the default targets ResNet18 scale
  o.seed = seed;
  return o;
}

bool criterion4(std::string& note) {
  const int seeds = 5;
  int wins = 0;
  std::ostringstream detail;
  for (int s = 0; s < seeds; ++s) {
    auto spec = synthdata::SceneSpec::desk_default(16, 40 + s);
    spec.instrument_classes.resize(6);
    spec.num_source_classes = 4;  // 4 base + 2 novel, pinned
    synthdata::SplitCounts counts;
    counts.source_train_per_class = 200;  // pinned
    counts.source_val_per_class = 1;
    counts.source_test_per_class = 20;
    counts.target_pool_per_class = 12;
    counts.target_test_per_class = 5;
    const auto data = synthdata::build_splits(spec, synthdata::DomainShift::desk_default(),
                                              counts, 5);
    SamplePool all;
    for (const auto& x : data.samples) all.push_back(&x);
    const auto src_train = pool_of(data, synthdata::Domain::SOURCE, synthdata::Split::TRAIN);
    SamplePool novel;
    for (const auto* x :
         pool_of(data, synthdata::Domain::TARGET, synthdata::Split::FEW_SHOT))
      if (x->object_classes[0] >= 4) novel.push_back(x);

    std::mt19937_64 rng(1000 + s);
    backbone::Backbone base(backbone::BackboneConfig::desk_small(16, 4), rng);
    cida::IncrementPlan plan0;
    plan0.new_classes = {0, 1, 2, 3};
    plan0.epochs_train = 8;
    plan0.epochs_finetune = 1;
    auto opts = accept_opts(500 + s);
    cida::train_increment(base, nullptr, src_train, plan0, {}, {}, opts);

    // CI arm: exemplar memory + distillation + balanced fine-tune
    auto ci = base.clone();
    cida::ExemplarMemory memory;
    memory.budget = 20;  // pinned
    memory = cida::update_memory(memory, src_train, ci, 20);
    const auto teacher = cida::snapshot_teacher(ci);
    std::mt19937_64 hr(2000 + s);
    ci.expand_head(6, hr);
    cida::IncrementPlan plan1;
    plan1.step_index = 1;
    plan1.new_classes = {4, 5};
    plan1.epochs_train = 8;
    plan1.epochs_finetune = 5;
    const std::vector<int> old_classes = {0, 1, 2, 3};
    const auto trainset = cida::build_increment_trainset(memory, all, novel, plan1);
    cida::train_increment(ci, &teacher, trainset, plan1, old_classes, {}, opts);
    cida::balanced_finetune(ci, memory, all, novel, plan1, old_classes, opts);

    // control arm: same base weights, new data only, no memory / no teacher
    auto ctrl = base.clone();
    std::mt19937_64 hr2(3000 + s);
    ctrl.expand_head(6, hr2);
    cida::IncrementPlan plain;
    plain.new_classes = {4, 5};
    plain.epochs_train = 8;
    plain.epochs_finetune = 1;
    cida::train_increment(ctrl, nullptr, novel, plain, {}, {}, opts);

    std::map<int, SamplePool> old_tests;
    for (const auto& x : data.samples)
      if (x.domain == synthdata::Domain::SOURCE && x.split == synthdata::Split::TEST &&
          x.object_classes[0] < 4)
        old_tests[x.object_classes[0]].push_back(&x);
    const double acc_ci =
        cida::evaluate_increment(ci, old_tests, old_classes, std::nullopt).old_mean_accuracy;
    const double acc_ctrl =
        cida::evaluate_increment(ctrl, old_tests, old_classes, std::nullopt)
            .old_mean_accuracy;
    if (acc_ci - acc_ctrl >= 0.20) ++wins;
    detail << " s" << s << ":" << acc_ci << "/" << acc_ctrl;
  }
  note = "CI vs control old-class acc" + detail.str() + "; wins " + std::to_string(wins) +
         "/5 (need >= 4)";
  return wins >= 4;
}

// Linear probe on frozen features: identical head, optimizer, and budget for
// every feature set under comparison.
double linear_probe(const Tensor& fx, const std::vector<int>& fl, const Tensor& tx,
                    const std::vector<int>& tl, int classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  nn::Linear head(fx.cols(), classes, rng);
  nn::ParamMap pm;
  head.collect("head", pm);
  nn::Adam opt(pm.tensors(), 0.01);
  for (int e = 0; e < 60; ++e) {
    opt.zero_grad();
    Tensor loss = losses::ce_with_ls_batch(head.forward(fx), fl, 0.0);
    backward(loss);
    opt.step();
  }
  const Tensor logits = head.forward(tx);
  const int k = logits.cols();
  int hit = 0;
  for (int i = 0; i < logits.rows(); ++i) {
    const double* row = logits.data().data() + static_cast<long>(i) * k;
    hit += static_cast<int>(std::max_element(row, row + k) - row) == tl[i];
  }
  return static_cast<double>(hit) / logits.rows();
}

bool criterion5(std::string& note) {
  const int seeds = 5;
  int wins = 0;
  std::ostringstream detail;
  for (int s = 0; s < seeds; ++s) {
    auto spec = synthdata::SceneSpec::desk_default(16, 70 + s);
    spec.instrument_classes.resize(4);
    spec.num_source_classes = 4;
    synthdata::SplitCounts counts;
    counts.source_train_per_class = 30;
    counts.source_val_per_class = 1;
    counts.source_test_per_class = 5;
    counts.target_pool_per_class = 6;
    counts.target_test_per_class = 30;
    const auto data = synthdata::build_splits(spec, synthdata::DomainShift::desk_default(),
                                              counts, 3);
    const auto src_train = pool_of(data, synthdata::Domain::SOURCE, synthdata::Split::TRAIN);
    const auto td_test = pool_of(data, synthdata::Domain::TARGET, synthdata::Split::TEST);
    std::vector<int> train_labels, test_labels;
    for (const auto* x : src_train) train_labels.push_back(x->object_classes[0]);
    for (const auto* x : td_test) test_labels.push_back(x->object_classes[0]);
    auto pooled_of = [](const backbone::Backbone& bb, const SamplePool& pool) {
      return bb.forward_features(synthdata::to_tensor(pool), 0.0).pooled.detach();
    };

    // shared warm start: SupCon from a random init sits at the collapsed
    // fixed point (all ReLU features in one orthant), so both arms branch
    // from a brief CE pretrain — the desk-scale analog of the pretrained
    // backbone the full-scale recipe starts from
    std::mt19937_64 rng(4000 + s);
    backbone::Backbone base(backbone::BackboneConfig::desk_small(16, 4), rng);
    auto opts = accept_opts(600 + s);
    cida::IncrementPlan warm;
    warm.new_classes = {0, 1, 2, 3};
    warm.epochs_train = 5;
    cida::train_increment(base, nullptr, src_train, warm, {}, {}, opts);

    double acc[2];
    for (int arm = 0; arm < 2; ++arm) {
      auto model = base.clone();
      cida::IncrementPlan plan;
      plan.new_classes = {0, 1, 2, 3};
      plan.epochs_train = 30;
      auto o = opts;
      if (arm == 1) {
        plan.mode = cida::Mode::SUPCON_CIDA;
        o.lr = 0.0005;  // the contrastive loss sums over anchors
        o.classifier_fit_epochs = 1;  // the probe below replaces the head fit
      }
      cida::train_increment(model, nullptr, src_train, plan, {}, {}, o);
      acc[arm] = linear_probe(pooled_of(model, src_train), train_labels,
                              pooled_of(model, td_test), test_labels, 4, 77 + s);
    }
    if (acc[1] > acc[0]) ++wins;
    detail << " s" << s << ":" << acc[1] << ">" << acc[0] << "?";
  }
  note = "SupCon vs CE target-domain linear-probe acc" + detail.str() + "; wins " +
         std::to_string(wins) + "/5 (need >= 4)";
  return wins >= 4;
}

bool criterion6(std::string& note) {
  const int seeds = 5;
  int wins = 0;
  std::ostringstream detail;
  for (int s = 0; s < seeds; ++s) {
    auto spec = synthdata::SceneSpec::desk_default(16, 90 + s);
    spec.instrument_classes.resize(4);
    spec.num_source_classes = 4;
    synthdata::SplitCounts counts;
    counts.source_train_per_class = 30;
    counts.source_val_per_class = 1;
    counts.source_test_per_class = 1;
    counts.target_pool_per_class = 3;
    counts.target_test_per_class = 50;
    // a moderately shifted test split: accuracy drops while the unsmoothed
    // model keeps its source-domain confidence — the regime label smoothing
    // is supposed to fix
    synthdata::DomainShift shift;
    shift.hue_rotation = 45.0;
    shift.noise_level = 10.0;
    shift.geometry_jitter = 0.05;
    const auto data = synthdata::build_splits(spec, shift, counts, 1);
    const auto src_train = pool_of(data, synthdata::Domain::SOURCE, synthdata::Split::TRAIN);
    const auto src_test = pool_of(data, synthdata::Domain::TARGET, synthdata::Split::TEST);

    double eces[2];
    for (int arm = 0; arm < 2; ++arm) {
      std::mt19937_64 rng(5000 + s);
      backbone::Backbone model(backbone::BackboneConfig::desk_small(16, 4), rng);
      cida::IncrementPlan plan;
      plan.new_classes = {0, 1, 2, 3};
      plan.epochs_train = 60;
      plan.epochs_finetune = 1;
      auto opts = accept_opts(700 + s);
      opts.lr_decay = 1.0;      // let the confidences converge
      opts.weight_decay = 0.0;  // don't shrink the logits artificially
      opts.label_smoothing = arm == 0 ? 0.1 : 0.0;
      cida::train_increment(model, nullptr, src_train, plan, {}, {}, opts);

      std::vector<metrics::ProbRecord> records;
      const Tensor logits =
          model.classify(model.forward_features(synthdata::to_tensor(src_test), 0.0).pooled);
      const int k = logits.cols();
      for (int i = 0; i < logits.rows(); ++i) {
        const double* row = logits.data().data() + static_cast<long>(i) * k;
        const double mx = *std::max_element(row, row + k);
        metrics::ProbRecord r;
        r.probs.resize(k);
        double z = 0;
        for (int j = 0; j < k; ++j) z += (r.probs[j] = std::exp(row[j] - mx));
        for (double& p : r.probs) p /= z;
        r.true_class = src_test[i]->object_classes[0];
        records.push_back(std::move(r));
      }
      eces[arm] = metrics::ece(records);
    }
    if (eces[0] < eces[1]) ++wins;
    detail << " s" << s << ":" << eces[0] << "<" << eces[1] << "?";
  }
  note = "ECE with LS vs without" + detail.str() + "; wins " + std::to_string(wins) +
         "/5 (need >= 4)";
  return wins >= 4;
}

bool criterion7(std::string& note) {
  // grammar corpus: 6 instruments x 6 interactions, source domain only
  auto spec = synthdata::SceneSpec::desk_default(32, 777);
  spec.instrument_classes.resize(6);
  spec.num_source_classes = 6;
  synthdata::SplitCounts counts;
  counts.source_train_per_class = 60;
  counts.source_val_per_class = 1;
  counts.source_test_per_class = 10;
  counts.target_pool_per_class = 2;
  counts.target_test_per_class = 1;
  const auto data = synthdata::build_splits(spec, synthdata::DomainShift::none(), counts, 1);
  const auto train = pool_of(data, synthdata::Domain::SOURCE, synthdata::Split::TRAIN);
  const auto test = pool_of(data, synthdata::Domain::SOURCE, synthdata::Split::TEST);

  const auto train_feats = patch_features(train, 32);
  const auto test_feats = patch_features(test, 32);

  std::vector<std::vector<std::string>> texts;
  for (const auto* s : train) texts.push_back(s->caption);
  const auto vocab = captioner::build_vocab(texts, 1);
  std::vector<std::vector<int>> caps;
  for (const auto* s : train) caps.push_back(vocab.encode(s->caption));

  const int d_input = train_feats[0].cols();
  const auto model =
      train_captioner(vocab, d_input, train_feats, caps, 50, true, 12345);
  const double bleu4 = caption_bleu(model, vocab, test_feats, test, 3, 4);

  // beam = 1 is token-identical to greedy decoding on every test image
  int greedy_match = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto beam1 = model.beam_search(test_feats[i], 1, 0.0);
    std::vector<int> greedy = {captioner::Vocab::kBos};
    const auto enc = model.encode(test_feats[i], 0.0);
    while (static_cast<int>(greedy.size()) < model.config().max_len) {
      const Tensor logits = model.decode_logits(greedy, enc);
      const int k = logits.cols();
      const double* row = logits.data().data() + static_cast<long>(logits.rows() - 1) * k;
      const int next = static_cast<int>(std::max_element(row, row + k) - row);
      greedy.push_back(next);
      if (next == captioner::Vocab::kEos) break;
    }
    if (beam1.ids == greedy) ++greedy_match;
  }

  // beam = 5 equals exhaustive search on a <= 6-token vocabulary
  int beam_exact = 0;
  const int beam_trials = 10;
  for (int trial = 0; trial < beam_trials; ++trial) {
    captioner::Vocab tiny;
    tiny.tokens = {"x", "y"};  // 6 ids total with the 4 specials
    tiny.to_id = {{"x", 4}, {"y", 5}};
    captioner::CaptionerConfig cc;
    cc.d_input = 3;
    cc.d_model = 8;
    cc.heads = 2;
    cc.d_ff = 8;
    cc.mem_slots = 1;
    cc.layers = 2;
    cc.max_len = 4;
    cc.dropout = 0.0;
    std::mt19937_64 rng(9000 + trial);
    captioner::Captioner tiny_model(cc, tiny, rng);
    Tensor regions = Tensor::randn({3, 3}, rng, 1.0);

    const auto hyp = tiny_model.beam_search(regions, 5, 0.0);

    // exhaustive: every sequence the search space admits — complete when EOS
    // ends it, incomplete only at max_len, complete beats incomplete
    const auto enc = tiny_model.encode(regions, 0.0);
    const int v = tiny.size();
    struct Best {
      std::vector<int> ids;
      double score = -1e300;
      bool complete = false;
    } best;
    auto consider = [&](const std::vector<int>& ids, double logprob_sum, bool complete) {
      const double score = logprob_sum / (static_cast<int>(ids.size()) - 1);
      const bool wins = (complete != best.complete) ? complete : (score > best.score);
      if (wins) best = {ids, score, complete};
    };
    std::function<void(std::vector<int>&, double)> walk = [&](std::vector<int>& ids,
                                                              double sum) {
      const Tensor logp = log_softmax_rows(tiny_model.decode_logits(ids, enc));
      const double* row = logp.data().data() + static_cast<long>(logp.rows() - 1) * v;
      for (int t = 0; t < v; ++t) {
        ids.push_back(t);
        const double s = sum + row[t];
        if (t == captioner::Vocab::kEos) consider(ids, s, true);
        else if (static_cast<int>(ids.size()) == cc.max_len) consider(ids, s, false);
        else walk(ids, s);
        ids.pop_back();
      }
    };
    std::vector<int> start = {captioner::Vocab::kBos};
    walk(start, 0.0);
    if (hyp.ids == best.ids && std::abs(hyp.score - best.score) < 1e-9) ++beam_exact;
  }

  std::ostringstream os;
  os << "test BLEU-4 " << bleu4 << " (need >= 0.90), greedy match " << greedy_match << "/"
     << test.size() << ", beam-vs-exhaustive " << beam_exact << "/" << beam_trials;
  note = os.str();
  return bleu4 >= 0.90 && greedy_match == static_cast<int>(test.size()) &&
         beam_exact == beam_trials;
}

bool criterion8(std::string& note) {
  const int seeds = 5;
  int wins = 0;
  std::ostringstream detail;
  for (int s = 0; s < seeds; ++s) {
    auto spec = synthdata::SceneSpec::desk_default(32, 110 + s);
    spec.instrument_classes.resize(4);
    spec.num_source_classes = 3;
    synthdata::SplitCounts counts;
    counts.source_train_per_class = 20;
    counts.source_val_per_class = 1;
    counts.source_test_per_class = 2;
    counts.target_pool_per_class = 8;
    counts.target_test_per_class = 15;
    const auto data = synthdata::build_splits(spec, synthdata::DomainShift::desk_default(),
                                              counts, 3);
    const auto train = pool_of(data, synthdata::Domain::SOURCE, synthdata::Split::TRAIN);
    const auto adapt = pool_of(data, synthdata::Domain::TARGET, synthdata::Split::FEW_SHOT);
    const auto test = pool_of(data, synthdata::Domain::TARGET, synthdata::Split::TEST);

    const auto train_feats = patch_features(train, 32);
    const auto adapt_feats = patch_features(adapt, 32);
    const auto test_feats = patch_features(test, 32);

    std::vector<std::vector<std::string>> texts;
    for (const auto* x : train) texts.push_back(x->caption);
    for (const auto* x : adapt) texts.push_back(x->caption);
    const auto vocab = captioner::build_vocab(texts, 1);
    std::vector<std::vector<int>> train_caps, adapt_caps;
    for (const auto* x : train) train_caps.push_back(vocab.encode(x->caption));
    for (const auto* x : adapt) adapt_caps.push_back(vocab.encode(x->caption));
    const int d_input = train_feats[0].cols();

    // paired arms: identical source pretraining (deterministic retrain),
    // then few-shot target adaptation with a restarted short curriculum
    // (1D CBS) versus plain fine-tuning.
    smoothing::SigmaSchedule adapt_sched;
    adapt_sched.sigma0 = 0.3;
    adapt_sched.decay = 0.9;
    adapt_sched.period = 1;
    double b1[2];
    for (int arm = 0; arm < 2; ++arm) {
      const bool cbs = arm == 1;
      auto model = train_captioner(vocab, d_input, train_feats, train_caps, 30, false,
                                   800 + s);
      auto params = model.params();
      nn::Adam opt(params.tensors(), 0.003);
      for (int e = 0; e < 40; ++e) {
        const double sigma = cbs ? smoothing::anneal_sigma(adapt_sched, e) : 0.0;
        model.seed_dropout(mix(900 + s, e));
        opt.zero_grad();
        Tensor loss = model.train_step(adapt_feats, adapt_caps, sigma);
        backward(loss);
        opt.step();
      }
      b1[arm] = caption_bleu(model, vocab, test_feats, test, 3, 1);
    }
    if (b1[1] >= b1[0]) ++wins;
    detail << " s" << s << ":" << b1[1] << "/" << b1[0];
  }
  note = "TD few-shot BLEU-1 with/without 1D CBS" + detail.str() + "; wins " +
         std::to_string(wins) + "/5 (need >= 3)";
  return wins >= 3;
}

bool criterion9(std::string& note) {
  const std::string root = "/tmp/icap_accept";
  fs::remove_all(root);
  config::ExperimentConfig cfg;
  cfg.name = "accept";
  cfg.seed = 21;
  cfg.data_dir = root + "/data";
  cfg.out_dir = root + "/run_a";
  cfg.image_size = 16;
  cfg.base_classes = 2;
  cfg.novel_classes = 1;
  cfg.source_train_per_class = 6;
  cfg.source_val_per_class = 1;
  cfg.source_test_per_class = 3;
  cfg.target_pool_per_class = 4;
  cfg.target_test_per_class = 3;
  cfg.k_shot = 2;
  cfg.stage1_epochs = 3;
  cfg.finetune_epochs = 2;
  cfg.stage1_batch = 8;
  cfg.memory_budget = 3;
  cfg.stage2_epochs = 4;
  cfg.stage2_batch = 8;
  cfg.stage2_adapt = "none";
  cfg.max_len = 8;
  cfg.beam = 2;
  pipeline::generate_data(cfg);

  auto run_all = [&](const std::string& out_dir) {
    auto c = cfg;
    c.out_dir = out_dir;
    pipeline::run_stage1(c);
    pipeline::run_stage2(c);
    return pipeline::run_eval(c, "target_test");
  };
  const auto a = run_all(root + "/run_a");
  const auto b = run_all(root + "/run_b");
  const bool reports_equal = a.report.summary == b.report.summary;
  std::ifstream fa(a.captions_path), fb(b.captions_path);
  std::stringstream sa, sb;
  sa << fa.rdbuf();
  sb << fb.rdbuf();
  const bool captions_equal = sa.str() == sb.str();

  // stage-2 stop/resume equals the uninterrupted run bit-for-bit
  auto c_resume = cfg;
  c_resume.out_dir = root + "/run_resume";
  fs::create_directories(c_resume.out_dir);
  fs::copy(root + "/run_a/features", c_resume.out_dir + "/features",
           fs::copy_options::recursive);
  pipeline::run_stage2(c_resume, /*stop_after=*/2);
  const auto resumed = pipeline::run_stage2(c_resume, -1, /*resume=*/true);

  auto c_full = cfg;
  c_full.out_dir = root + "/run_full";
  fs::create_directories(c_full.out_dir);
  fs::copy(root + "/run_a/features", c_full.out_dir + "/features",
           fs::copy_options::recursive);
  const auto full = pipeline::run_stage2(c_full);

  bool weights_equal = true;
  const auto ra = resumed.model.params().entries();
  const auto rb = full.model.params().entries();
  for (std::size_t i = 0; i < ra.size(); ++i)
    weights_equal = weights_equal && ra[i].second.data() == rb[i].second.data();

  std::ostringstream os;
  os << "reports " << (reports_equal ? "identical" : "DIFFER") << ", captions "
     << (captions_equal ? "identical" : "DIFFER") << ", resume "
     << (weights_equal ? "bit-exact" : "DIVERGED");
  note = os.str();
  return reports_equal && captions_equal && weights_equal;
}

}  // namespace

int main(int argc, char** argv) {
  struct Item {
    const char* name;
    std::function<bool(std::string&)> fn;
  };
  const std::vector<Item> items = {
      {"metric oracles (>=100 randomized instances, |delta| <= 1e-9)", criterion1},
      {"loss gradients vs central differences (rel err < 1e-4, 20 instances each)",
       criterion2},
      {"sigma curriculum exactness and floor bypass (<= 1e-4)", criterion3},
      {"forgetting: CI beats no-memory control by >= 20 points (4/5 seeds)", criterion4},
      {"domain shift: SupCon features beat CE on target domain (4/5 seeds)", criterion5},
      {"calibration: label smoothing lowers ECE (4/5 seeds)", criterion6},
      {"captioner: BLEU-4 >= 0.90, beam1 == greedy, beam5 == exhaustive", criterion7},
      {"1D CBS: target few-shot BLEU-1 not hurt (3/5 seeds)", criterion8},
      {"determinism and bit-exact checkpoint resume", criterion9},
  };

  std::set<std::size_t> only;  // optional criterion numbers on the command line
  for (int a = 1; a < argc; ++a) only.insert(std::stoul(argv[a]));

  int failed = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = false;
    try {
      ok = items[i].fn(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    } catch (...) {
      detail = "unknown exception";
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("[%s] criterion %zu: %s — %s (%.1fs)\n", ok ? "PASS" : "FAIL", i + 1,
                items[i].name, detail.c_str(), secs);
    std::fflush(stdout);
    if (!ok) ++failed;
  }
  if (failed) std::printf("%d criteria FAILED\n", failed);
  else std::printf("all criteria passed\n");
  return failed == 0 ? 0 : 1;
}
