#include "increcap/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace icap::metrics {

namespace {

using Tokens = std::vector<std::string>;
using NgramCounts = std::map<std::vector<std::string>, int>;

NgramCounts count_ngrams(const Tokens& tokens, int n) {
  NgramCounts counts;
  if (static_cast<int>(tokens.size()) < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i)
    ++counts[std::vector<std::string>(tokens.begin() + i, tokens.begin() + i + n)];
  return counts;
}

// clipped overlap and total for one order of one pair
void clipped_counts(const EvalPair& pair, int n, long& overlap, long& total) {
  auto cand = count_ngrams(pair.candidate, n);
  NgramCounts max_ref;
  for (const auto& ref : pair.references)
    for (const auto& [gram, count] : count_ngrams(ref, n))
      max_ref[gram] = std::max(max_ref[gram], count);
  overlap = 0;
  total = 0;
  for (const auto& [gram, count] : cand) {
    auto it = max_ref.find(gram);
    overlap += std::min(count, it == max_ref.end() ? 0 : it->second);
    total += count;
  }
}

// closest reference length (ties -> shorter)
long effective_ref_length(const EvalPair& pair) {
  const long c = static_cast<long>(pair.candidate.size());
  long best = static_cast<long>(pair.references[0].size());
  for (const auto& ref : pair.references) {
    const long r = static_cast<long>(ref.size());
    if (std::llabs(r - c) < std::llabs(best - c) ||
        (std::llabs(r - c) == std::llabs(best - c) && r < best))
      best = r;
  }
  return best;
}

double brevity_penalty(long r, long c) {
  if (c == 0) return 0.0;
  return std::exp(std::min(0.0, 1.0 - static_cast<double>(r) / static_cast<double>(c)));
}

int lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<int> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

struct Alignment {
  int matches = 0;
  int chunks = 0;
};

// exact-then-stem greedy unigram alignment; chunks counted over candidate
// order as runs contiguous on both sides
Alignment align_unigrams(const Tokens& cand, const Tokens& ref) {
  std::vector<int> match(cand.size(), -1);
  std::vector<bool> ref_used(ref.size(), false);
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t i = 0; i < cand.size(); ++i) {
      if (match[i] >= 0) continue;
      for (std::size_t j = 0; j < ref.size(); ++j) {
        if (ref_used[j]) continue;
        const bool hit = pass == 0 ? cand[i] == ref[j]
                                   : stem(cand[i]) == stem(ref[j]);
        if (hit) {
          match[i] = static_cast<int>(j);
          ref_used[j] = true;
          break;
        }
      }
    }
  }
  Alignment a;
  int prev_ref = -2;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    if (match[i] < 0) {
      prev_ref = -2;
      continue;
    }
    ++a.matches;
    if (match[i] != prev_ref + 1) ++a.chunks;
    prev_ref = match[i];
  }
  return a;
}

int bin_of(double value, int bins) {
  // half-open (lo, hi] bins over (0, 1]; edge values land in the lower bin
  const int idx = static_cast<int>(std::ceil(value * bins)) - 1;
  return std::clamp(idx, 0, bins - 1);
}

void validate_records(const std::vector<ProbRecord>& records) {
  if (records.empty()) throw std::invalid_argument("calibration: empty record list");
  for (const auto& r : records) r.validate();
}

}  // namespace

void EvalPair::validate() const {
  if (references.empty()) throw std::invalid_argument("eval pair: no references");
  for (const auto& r : references)
    if (r.empty()) throw std::invalid_argument("eval pair: empty reference");
}

void ProbRecord::validate() const {
  double sum = 0.0;
  for (double p : probs) {
    if (p < 0.0) throw std::invalid_argument("prob record: negative probability");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6)
    throw std::invalid_argument("prob record: probabilities must sum to 1");
  if (true_class < 0 || true_class >= static_cast<int>(probs.size()))
    throw std::invalid_argument("prob record: class id out of range");
}

double bleu(const EvalPair& pair, int n, bool* warned) {
  if (n < 1 || n > 4) throw std::invalid_argument("bleu: order must be in 1..4");
  pair.validate();
  if (pair.candidate.empty()) {
    if (warned) *warned = true;
    return 0.0;
  }
  double log_sum = 0.0;
  for (int order = 1; order <= n; ++order) {
    long overlap, total;
    clipped_counts(pair, order, overlap, total);
    if (overlap == 0 || total == 0) return 0.0;
    log_sum += std::log(static_cast<double>(overlap) / static_cast<double>(total));
  }
  const double bp = brevity_penalty(effective_ref_length(pair),
                                    static_cast<long>(pair.candidate.size()));
  return bp * std::exp(log_sum / n);
}

double bleu_smoothed(const EvalPair& pair, int n) {
  if (n < 1 || n > 4) throw std::invalid_argument("bleu: order must be in 1..4");
  pair.validate();
  if (pair.candidate.empty()) return 0.0;
  double log_sum = 0.0;
  for (int order = 1; order <= n; ++order) {
    long overlap, total;
    clipped_counts(pair, order, overlap, total);
    double p;
    if (order == 1) {
      if (overlap == 0 || total == 0) return 0.0;
      p = static_cast<double>(overlap) / static_cast<double>(total);
    } else {
      p = (overlap + 1.0) / (total + 1.0);
    }
    log_sum += std::log(p);
  }
  const double bp = brevity_penalty(effective_ref_length(pair),
                                    static_cast<long>(pair.candidate.size()));
  return bp * std::exp(log_sum / n);
}

double corpus_bleu(const std::vector<EvalPair>& corpus, int n) {
  if (n < 1 || n > 4) throw std::invalid_argument("bleu: order must be in 1..4");
  if (corpus.empty()) throw std::invalid_argument("corpus_bleu: empty corpus");
  std::vector<long> overlaps(n, 0), totals(n, 0);
  long r = 0, c = 0;
  for (const auto& pair : corpus) {
    pair.validate();
    for (int order = 1; order <= n; ++order) {
      long o, t;
      clipped_counts(pair, order, o, t);
      overlaps[order - 1] += o;
      totals[order - 1] += t;
    }
    r += effective_ref_length(pair);
    c += static_cast<long>(pair.candidate.size());
  }
  double log_sum = 0.0;
  for (int order = 0; order < n; ++order) {
    if (overlaps[order] == 0 || totals[order] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(overlaps[order]) /
                        static_cast<double>(totals[order]));
  }
  return brevity_penalty(r, c) * std::exp(log_sum / n);
}

double rouge_l(const EvalPair& pair) {
  pair.validate();
  if (pair.candidate.empty()) return 0.0;
  constexpr double beta2 = 1.2 * 1.2;
  double best = 0.0;
  for (const auto& ref : pair.references) {
    const int lcs = lcs_length(pair.candidate, ref);
    if (lcs == 0) continue;
    const double p = static_cast<double>(lcs) / pair.candidate.size();
    const double r = static_cast<double>(lcs) / ref.size();
    best = std::max(best, (1.0 + beta2) * p * r / (r + beta2 * p));
  }
  return best;
}

std::string stem(const std::string& word) {
  static const char* suffixes[] = {"ing", "ed", "es", "s"};
  for (const char* suf : suffixes) {
    const std::size_t n = std::char_traits<char>::length(suf);
    if (word.size() >= n + 3 && word.compare(word.size() - n, n, suf) == 0)
      return word.substr(0, word.size() - n);
  }
  return word;
}

double meteor_lite(const EvalPair& pair) {
  pair.validate();
  if (pair.candidate.empty()) return 0.0;
  double best = 0.0;
  for (const auto& ref : pair.references) {
    const Alignment a = align_unigrams(pair.candidate, ref);
    if (a.matches == 0) continue;
    const double p = static_cast<double>(a.matches) / pair.candidate.size();
    const double r = static_cast<double>(a.matches) / ref.size();
    const double f = 10.0 * p * r / (r + 9.0 * p);
    const double frac = static_cast<double>(a.chunks) / a.matches;
    best = std::max(best, f * (1.0 - 0.5 * frac * frac * frac));
  }
  return best;
}

std::vector<double> cider(const std::vector<EvalPair>& corpus, double* mean) {
  if (corpus.size() < 2) throw std::invalid_argument("cider: corpus must have >= 2 pairs");
  const double n_docs = static_cast<double>(corpus.size());

  // document frequency per order: counted once per pair's reference set
  std::vector<NgramCounts> df(4);
  for (const auto& pair : corpus) {
    pair.validate();
    for (int n = 1; n <= 4; ++n) {
      NgramCounts seen;
      for (const auto& ref : pair.references)
        for (const auto& [gram, count] : count_ngrams(ref, n)) seen[gram] = 1;
      for (const auto& [gram, one] : seen) ++df[n - 1][gram];
    }
  }
  auto idf = [&](int n, const std::vector<std::string>& gram) {
    auto it = df[n - 1].find(gram);
    const double d = it == df[n - 1].end() ? 0.0 : it->second;
    return std::log(n_docs / std::max(1.0, d));
  };
  auto tfidf = [&](const Tokens& tokens, int n) {
    std::map<std::vector<std::string>, double> vec;
    for (const auto& [gram, count] : count_ngrams(tokens, n))
      vec[gram] = count * idf(n, gram);
    return vec;
  };
  auto cosine = [](const std::map<std::vector<std::string>, double>& a,
                   const std::map<std::vector<std::string>, double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (const auto& [gram, v] : a) {
      na += v * v;
      auto it = b.find(gram);
      if (it != b.end()) dot += v * it->second;
    }
    for (const auto& [gram, v] : b) nb += v * v;
    if (na <= 0.0 || nb <= 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
  };

  std::vector<double> scores;
  double total = 0.0;
  for (const auto& pair : corpus) {
    double score = 0.0;
    for (int n = 1; n <= 4; ++n) {
      auto cand_vec = tfidf(pair.candidate, n);
      std::map<std::vector<std::string>, double> ref_mean;
      for (const auto& ref : pair.references)
        for (const auto& [gram, v] : tfidf(ref, n))
          ref_mean[gram] += v / static_cast<double>(pair.references.size());
      score += cosine(cand_vec, ref_mean);
    }
    score = 10.0 * score / 4.0;
    scores.push_back(score);
    total += score;
  }
  if (mean) *mean = total / n_docs;
  return scores;
}

double ece(const std::vector<ProbRecord>& records, int bins) {
  if (bins < 1) throw std::invalid_argument("ece: bins must be >= 1");
  validate_records(records);
  std::vector<double> conf_sum(bins, 0.0), acc_sum(bins, 0.0);
  std::vector<int> count(bins, 0);
  for (const auto& r : records) {
    const int pred = static_cast<int>(
        std::max_element(r.probs.begin(), r.probs.end()) - r.probs.begin());
    const double conf = r.probs[pred];
    const int b = bin_of(conf, bins);
    conf_sum[b] += conf;
    acc_sum[b] += pred == r.true_class ? 1.0 : 0.0;
    ++count[b];
  }
  double total = 0.0;
  for (int b = 0; b < bins; ++b) {
    if (count[b] == 0) continue;
    total += (static_cast<double>(count[b]) / records.size()) *
             std::abs(acc_sum[b] / count[b] - conf_sum[b] / count[b]);
  }
  return total;
}

double sce(const std::vector<ProbRecord>& records, int bins) {
  if (bins < 1) throw std::invalid_argument("sce: bins must be >= 1");
  validate_records(records);
  const int k = static_cast<int>(records[0].probs.size());
  if (k < 2) throw std::invalid_argument("sce: needs >= 2 classes");
  for (const auto& r : records)
    if (static_cast<int>(r.probs.size()) != k)
      throw std::invalid_argument("sce: inconsistent class counts");

  double total = 0.0;
  for (int cls = 0; cls < k; ++cls) {
    std::vector<double> conf_sum(bins, 0.0), acc_sum(bins, 0.0);
    std::vector<int> count(bins, 0);
    for (const auto& r : records) {
      const double p = r.probs[cls];
      const int b = bin_of(p, bins);
      conf_sum[b] += p;
      acc_sum[b] += r.true_class == cls ? 1.0 : 0.0;
      ++count[b];
    }
    for (int b = 0; b < bins; ++b) {
      if (count[b] == 0) continue;
      total += (static_cast<double>(count[b]) / records.size()) *
               std::abs(acc_sum[b] / count[b] - conf_sum[b] / count[b]);
    }
  }
  return total / k;
}

double tace(const std::vector<ProbRecord>& records, int bins, double threshold,
            int* flagged) {
  if (bins < 1) throw std::invalid_argument("tace: bins must be >= 1");
  if (threshold < 0.0 || threshold >= 1.0)
    throw std::invalid_argument("tace: threshold must be in [0,1)");
  validate_records(records);
  const int k = static_cast<int>(records[0].probs.size());
  for (const auto& r : records)
    if (static_cast<int>(r.probs.size()) != k)
      throw std::invalid_argument("tace: inconsistent class counts");

  double total = 0.0;
  for (int cls = 0; cls < k; ++cls) {
    std::vector<std::pair<double, double>> entries;  // (prob, indicator)
    for (const auto& r : records)
      if (r.probs[cls] >= threshold)
        entries.push_back({r.probs[cls], r.true_class == cls ? 1.0 : 0.0});
    if (entries.empty()) {
      if (flagged) ++*flagged;
      continue;
    }
    std::stable_sort(entries.begin(), entries.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    const std::size_t n = entries.size();
    for (int b = 0; b < bins; ++b) {
      const std::size_t lo = b * n / bins, hi = (b + 1) * n / bins;
      if (lo == hi) continue;
      double conf = 0.0, acc = 0.0;
      for (std::size_t i = lo; i < hi; ++i) {
        conf += entries[i].first;
        acc += entries[i].second;
      }
      const double size = static_cast<double>(hi - lo);
      total += (size / n) * std::abs(acc / size - conf / size);
    }
  }
  return total / k;
}

double brier(const std::vector<ProbRecord>& records) {
  validate_records(records);
  double total = 0.0;
  for (const auto& r : records) {
    double sum = 0.0;
    for (std::size_t c = 0; c < r.probs.size(); ++c) {
      const double target = static_cast<int>(c) == r.true_class ? 1.0 : 0.0;
      sum += (r.probs[c] - target) * (r.probs[c] - target);
    }
    total += sum;
  }
  return total / records.size();
}

MetricsReport evaluate(const std::vector<std::string>& ids,
                       const std::vector<EvalPair>& pairs,
                       const std::vector<ProbRecord>& records, int bins,
                       double threshold) {
  if (ids.size() != pairs.size())
    throw std::invalid_argument("evaluate: id/pair count mismatch");
  if (pairs.empty()) throw std::invalid_argument("evaluate: no caption pairs");

  MetricsReport report;
  for (int n = 1; n <= 4; ++n)
    report.summary["bleu" + std::to_string(n)] = corpus_bleu(pairs, n);
  double rouge_sum = 0.0, meteor_sum = 0.0;
  for (const auto& pair : pairs) {
    rouge_sum += rouge_l(pair);
    meteor_sum += meteor_lite(pair);
  }
  report.summary["rouge_l"] = rouge_sum / pairs.size();
  report.summary["meteor_lite"] = meteor_sum / pairs.size();
  double cider_mean = 0.0;
  std::vector<double> cider_scores;
  if (pairs.size() >= 2) {
    cider_scores = cider(pairs, &cider_mean);
    report.summary["cider"] = cider_mean;
  }
  if (!records.empty()) {
    report.summary["ece"] = ece(records, bins);
    report.summary["sce"] = sce(records, bins);
    report.summary["tace"] = tace(records, bins, threshold);
    report.summary["brier"] = brier(records);
  }
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    MetricsReport::Row row;
    row.id = ids[i];
    row.values["bleu4"] = bleu_smoothed(pairs[i], 4);
    row.values["rouge_l"] = rouge_l(pairs[i]);
    row.values["meteor_lite"] = meteor_lite(pairs[i]);
    if (!cider_scores.empty()) row.values["cider"] = cider_scores[i];
    report.rows.push_back(std::move(row));
  }
  return report;
}

void write_metrics_report(const std::string& path, const MetricsReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_metrics_report: cannot open " + path);
  out.precision(17);
  for (const auto& [key, value] : report.summary)
    out << "metric " << key << " " << value << "\n";
  for (const auto& row : report.rows) {
    out << "image " << row.id;
    for (const auto& [key, value] : row.values) out << " " << key << " " << value;
    out << "\n";
  }
}

MetricsReport read_metrics_report(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_metrics_report: cannot open " + path);
  MetricsReport report;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "metric") {
      std::string key;
      double value;
      ss >> key >> value;
      report.summary[key] = value;
    } else if (tag == "image") {
      MetricsReport::Row row;
      ss >> row.id;
      std::string key;
      double value;
      while (ss >> key >> value) row.values[key] = value;
      report.rows.push_back(std::move(row));
    } else {
      throw std::runtime_error("metrics report: unknown tag '" + tag + "'");
    }
  }
  return report;
}

}  // namespace icap::metrics
