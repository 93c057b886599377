#pragma once
// Caption model: a 1D CBS front, three memory-augmented encoder layers, and
// three meshed decoder layers whose cross-attention reads every encoder
// layer's output through learned sigmoid gates. Label-smoothed word-level
// training, beam-search decoding.

#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "increcap/nn.hpp"
#include "increcap/smoothing.hpp"
#include "increcap/tensor.hpp"

namespace icap::captioner {

struct Vocab {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  std::vector<std::string> tokens;  // id = index + 4
  std::unordered_map<std::string, int> to_id;

  int size() const { return static_cast<int>(tokens.size()) + 4; }
  int id(const std::string& token) const;  // UNK for unknown tokens
  std::string token_at(int id) const;

  // BOS + ids + EOS; tokens are lowercased before lookup.
  std::vector<int> encode(const std::vector<std::string>& caption) const;
  // Strips PAD/BOS/EOS; UNK renders as "<unk>".
  std::vector<std::string> decode(const std::vector<int>& ids) const;
};

// Lowercased whitespace tokens with count >= min_count; id order is count
// descending, then lexicographic.
Vocab build_vocab(const std::vector<std::vector<std::string>>& captions, int min_count);

// One token per line; line number = id - 4.
void write_vocab(const std::string& path, const Vocab& vocab);
Vocab read_vocab(const std::string& path);

struct CaptionerConfig {
  int d_input = 128;  // region feature width from the backbone
  int d_model = 128;
  int heads = 4;
  int d_ff = 256;
  int mem_slots = 8;
  int layers = 3;
  int max_len = 20;
  int cbs_taps = 3;  // learned 1D kernel width at the encoder front
  double dropout = 0.1;
  double label_smoothing = 0.1;

  void validate() const;
  static CaptionerConfig desk_small(int d_input);
};

// Multi-head attention block with optional learned memory rows appended to
// the projected keys/values. mem_slots = 0 degrades to plain attention.
struct AttnLayer {
  nn::Linear wq, wk, wv, wo;
  Tensor mk, mv;  // {m, d_model}; undefined when m = 0
  int heads = 1;

  AttnLayer() = default;
  AttnLayer(int d_model, int heads, int mem_slots, std::mt19937_64& rng);
  void collect(const std::string& prefix, nn::ParamMap& out) const;
};

// Scaled dot-product attention of `queries` against `keys_values` through the
// layer's projections, with the layer's memory rows appended. `causal` masks
// key j > query i (memory rows, if any, stay visible).
Tensor mem_attention(const AttnLayer& layer, const Tensor& queries,
                     const Tensor& keys_values, bool causal = false);

struct Hypothesis {
  std::vector<int> ids;  // BOS ... (EOS when complete)
  double score = 0.0;    // mean log-probability per generated token
  bool complete = false;
};

class Captioner {
 public:
  Captioner() = default;
  Captioner(const CaptionerConfig& config, const Vocab& vocab, std::mt19937_64& rng);

  const CaptionerConfig& config() const { return config_; }
  const Vocab& vocab() const { return vocab_; }

  // Region rows {n, d_input} for one image -> the three encoder layer
  // outputs, each {n, d_model}. The front applies Eq. 2 (1D CBS) at `sigma`.
  std::vector<Tensor> encode(const Tensor& regions, double sigma) const;

  // Next-token logits for every prefix position: {len(prefix), vocab}.
  // Row t is the distribution over token t+1.
  Tensor decode_logits(const std::vector<int>& prefix,
                       const std::vector<Tensor>& enc_outputs) const;

  // Mean label-smoothed CE over non-PAD target positions of the batch;
  // applies dropout. Captions are BOS...EOS(+PAD) id sequences.
  Tensor train_step(const std::vector<Tensor>& region_batch,
                    const std::vector<std::vector<int>>& captions, double sigma);

  Hypothesis beam_search(const Tensor& regions, int beam, double sigma = 0.0,
                         std::vector<Hypothesis>* full_beam = nullptr) const;

  nn::ParamMap params() const;

  // Replaces the meshed sum with cross-attention on the last encoder output
  // only (still scaled 1/sqrt(layers)); used to verify the gating algebra.
  void set_single_source(bool on) { single_source_ = on; }

  // Reseeds the dropout stream; callers reseed per epoch so a resumed run
  // draws the same masks as an uninterrupted one.
  void seed_dropout(std::uint64_t s) const { dropout_rng_.seed(s); }

 private:
  struct DecoderLayer {
    AttnLayer self_attn;
    AttnLayer cross_attn;
    std::vector<nn::Linear> gates;  // one per encoder layer, [cross; query] -> d
    nn::Linear ff1, ff2;
    nn::LayerNorm norm_self, norm_cross, norm_ff;
  };
  struct EncoderLayer {
    AttnLayer self_attn;
    nn::Linear ff1, ff2;
    nn::LayerNorm norm_attn, norm_ff;
  };

  Tensor front(const Tensor& regions, double sigma) const;
  Tensor decode_hidden(const std::vector<int>& prefix,
                       const std::vector<Tensor>& enc_outputs, bool train) const;
  Tensor maybe_dropout(const Tensor& x, bool train) const;

  CaptionerConfig config_;
  Vocab vocab_;
  Tensor cbs_taps_;
  nn::LayerNorm cbs_norm_;
  nn::Linear input_proj_;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  nn::Embedding token_embed_;
  nn::Linear out_proj_;
  bool single_source_ = false;
  mutable std::mt19937_64 dropout_rng_{0x5eed};
};

struct ReportRecord {
  std::string image_id;
  std::vector<std::string> generated;
  std::vector<std::string> gold;
};

// One record per test image: id, generated caption, gold caption.
void write_report(const std::string& path, const std::vector<ReportRecord>& records);
std::vector<ReportRecord> read_report(const std::string& path);

}  // namespace icap::captioner
