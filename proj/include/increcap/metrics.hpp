#pragma once
// Caption quality metrics (BLEU-1..4, ROUGE-L, METEOR-lite, CIDEr) and
// probabilistic calibration metrics (ECE, SCE, TACE, Brier). All pure
// functions over token lists / probability records.

#include <map>
#include <string>
#include <vector>

namespace icap::metrics {

struct EvalPair {
  std::vector<std::string> candidate;
  std::vector<std::vector<std::string>> references;  // at least one

  void validate() const;
};

struct ProbRecord {
  std::vector<double> probs;  // sums to 1 +- 1e-6, entries >= 0
  int true_class = 0;

  void validate() const;
};

constexpr double kTaceThreshold = 1e-3;
constexpr int kDefaultBins = 10;

// Sentence BLEU-n: geometric mean of clipped modified n-gram precisions times
// the brevity penalty exp(min(0, 1 - r/c)). Unsmoothed; an empty candidate
// (or one shorter than n) scores 0 and sets *warned.
double bleu(const EvalPair& pair, int n, bool* warned = nullptr);

// Sentence BLEU with +1 smoothing on orders above 1 (per-image diagnostics).
double bleu_smoothed(const EvalPair& pair, int n);

// Corpus BLEU-n: clipped counts and totals aggregated over pairs before the
// ratio; r sums each pair's closest reference length.
double corpus_bleu(const std::vector<EvalPair>& corpus, int n);

// LCS F-measure with beta^2 = 1.2^2, max over references.
double rouge_l(const EvalPair& pair);

// Unigram alignment (exact, then suffix-stripping stem match);
// F = 10PR/(R+9P), penalty 0.5*(chunks/matches)^3, max over references.
double meteor_lite(const EvalPair& pair);

// The suffix-stripping stemmer used by meteor_lite (exposed for tests).
std::string stem(const std::string& word);

// CIDEr: tf-idf n-gram cosine (n = 1..4) against the mean reference vector,
// idf from the reference corpus, scaled to [0, 10]. Needs >= 2 pairs.
std::vector<double> cider(const std::vector<EvalPair>& corpus, double* mean = nullptr);

// Expected calibration error over equal-width confidence bins on (0,1];
// edge values fall into the lower bin.
double ece(const std::vector<ProbRecord>& records, int bins = kDefaultBins);

// Static calibration error: the ECE-style sum per class probability,
// averaged over classes. Needs K >= 2.
double sce(const std::vector<ProbRecord>& records, int bins = kDefaultBins);

// Thresholded adaptive calibration error: per class, drop entries below the
// threshold, bin the rest into equal-mass bins, average over classes.
// Classes losing all entries contribute 0 and bump *flagged.
double tace(const std::vector<ProbRecord>& records, int bins = kDefaultBins,
            double threshold = kTaceThreshold, int* flagged = nullptr);

// Mean squared distance between the probability vector and the one-hot truth.
double brier(const std::vector<ProbRecord>& records);

struct MetricsReport {
  std::map<std::string, double> summary;
  struct Row {
    std::string id;
    std::map<std::string, double> values;
  };
  std::vector<Row> rows;
};

// Full evaluation: corpus BLEU-1..4, mean ROUGE-L / METEOR-lite, CIDEr, and
// (when records are given) the four calibration metrics; per-image rows carry
// smoothed sentence metrics. Stable key names: bleu1..bleu4, rouge_l,
// meteor_lite, cider, ece, sce, tace, brier.
MetricsReport evaluate(const std::vector<std::string>& ids,
                       const std::vector<EvalPair>& pairs,
                       const std::vector<ProbRecord>& records,
                       int bins = kDefaultBins, double threshold = kTaceThreshold);

void write_metrics_report(const std::string& path, const MetricsReport& report);
MetricsReport read_metrics_report(const std::string& path);

}  // namespace icap::metrics
