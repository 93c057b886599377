#include "increcap/captioner.hpp"

#include "increcap/losses.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace icap::captioner {

namespace {

std::string lowercase(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  return transpose(concat_rows({transpose(a), transpose(b)}));
}

// standard sinusoidal table {len, d}
Tensor positional_encoding(int len, int d) {
  std::vector<double> data(static_cast<std::size_t>(len) * d);
  for (int pos = 0; pos < len; ++pos)
    for (int i = 0; i < d; ++i) {
      const double angle = pos / std::pow(10000.0, 2.0 * (i / 2) / d);
      data[static_cast<std::size_t>(pos) * d + i] =
          (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return Tensor::from_data({len, d}, std::move(data));
}

Tensor causal_mask(int n_q, int n_k) {
  // keys beyond the query index are blocked; extra (memory) keys past n_q
  // columns... masked only within the first n_q key columns
  std::vector<double> m(static_cast<std::size_t>(n_q) * n_k, 0.0);
  for (int i = 0; i < n_q; ++i)
    for (int j = i + 1; j < std::min(n_q, n_k); ++j)
      m[static_cast<std::size_t>(i) * n_k + j] = -1e30;
  return Tensor::from_data({n_q, n_k}, std::move(m));
}

}  // namespace

int Vocab::id(const std::string& token) const {
  auto it = to_id.find(lowercase(token));
  return it == to_id.end() ? kUnk : it->second;
}

std::string Vocab::token_at(int i) const {
  switch (i) {
    case kPad: return "<pad>";
    case kBos: return "<bos>";
    case kEos: return "<eos>";
    case kUnk: return "<unk>";
    default: break;
  }
  if (i < 4 || i >= size()) throw std::invalid_argument("vocab: id out of range");
  return tokens[static_cast<std::size_t>(i) - 4];
}

std::vector<int> Vocab::encode(const std::vector<std::string>& caption) const {
  std::vector<int> ids = {kBos};
  for (const auto& t : caption) ids.push_back(id(t));
  ids.push_back(kEos);
  return ids;
}

std::vector<std::string> Vocab::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  for (int i : ids) {
    if (i == kPad || i == kBos || i == kEos) continue;
    out.push_back(token_at(i));
  }
  return out;
}

Vocab build_vocab(const std::vector<std::vector<std::string>>& captions, int min_count) {
  if (captions.empty()) throw std::invalid_argument("build_vocab: empty corpus");
  std::map<std::string, int> counts;
  for (const auto& caption : captions)
    for (const auto& token : caption) ++counts[lowercase(token)];

  std::vector<std::pair<std::string, int>> kept;
  for (const auto& [token, count] : counts)
    if (count >= min_count) kept.push_back({token, count});
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocab v;
  for (const auto& [token, count] : kept) {
    v.to_id[token] = v.size();
    v.tokens.push_back(token);
  }
  return v;
}

void write_vocab(const std::string& path, const Vocab& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_vocab: cannot open " + path);
  for (const auto& t : vocab.tokens) out << t << '\n';
}

Vocab read_vocab(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_vocab: cannot open " + path);
  Vocab v;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    v.to_id[line] = v.size();
    v.tokens.push_back(line);
  }
  return v;
}

void CaptionerConfig::validate() const {
  if (d_model < 1 || d_input < 1 || d_ff < 1) throw std::invalid_argument("captioner: bad dims");
  if (heads < 1 || d_model % heads != 0)
    throw std::invalid_argument("captioner: heads must divide d_model");
  if (mem_slots < 0) throw std::invalid_argument("captioner: negative memory slots");
  if (layers < 1) throw std::invalid_argument("captioner: need >= 1 layer");
  if (max_len < 2) throw std::invalid_argument("captioner: max_len too small");
  if (cbs_taps < 1 || cbs_taps % 2 == 0)
    throw std::invalid_argument("captioner: cbs tap count must be odd");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("captioner: bad dropout");
}

CaptionerConfig CaptionerConfig::desk_small(int d_input) {
  CaptionerConfig c;
  c.d_input = d_input;
  c.d_model = 32;
  c.heads = 2;
  c.d_ff = 64;
  c.mem_slots = 4;
  c.dropout = 0.0;
  return c;
}

AttnLayer::AttnLayer(int d_model, int heads_, int mem_slots, std::mt19937_64& rng)
    : wq(d_model, d_model, rng, false),
      wk(d_model, d_model, rng, false),
      wv(d_model, d_model, rng, false),
      wo(d_model, d_model, rng, false),
      heads(heads_) {
  if (mem_slots > 0) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d_model));
    mk = Tensor::randn({mem_slots, d_model}, rng, s, true);
    mv = Tensor::randn({mem_slots, d_model}, rng, s, true);
  }
}

void AttnLayer::collect(const std::string& prefix, nn::ParamMap& out) const {
  wq.collect(prefix + ".wq", out);
  wk.collect(prefix + ".wk", out);
  wv.collect(prefix + ".wv", out);
  wo.collect(prefix + ".wo", out);
  if (mk.defined()) {
    out.add(prefix + ".mk", mk);
    out.add(prefix + ".mv", mv);
  }
}

Tensor mem_attention(const AttnLayer& layer, const Tensor& queries,
                     const Tensor& keys_values, bool causal) {
  if (queries.cols() != keys_values.cols())
    throw std::invalid_argument("mem_attention: query/key width mismatch");
  const int d = queries.cols();
  const int dh = d / layer.heads;

  Tensor q = layer.wq.forward(queries);
  Tensor k = layer.wk.forward(keys_values);
  Tensor v = layer.wv.forward(keys_values);
  if (layer.mk.defined()) {
    k = concat_rows({k, layer.mk});
    v = concat_rows({v, layer.mv});
  }

  Tensor mask;
  if (causal) mask = causal_mask(q.rows(), k.rows());

  std::vector<Tensor> head_out;
  for (int h = 0; h < layer.heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
    Tensor scores = scale(matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
    if (causal) scores = add(scores, mask);
    head_out.push_back(matmul(softmax_rows(scores), vh));
  }
  Tensor merged = head_out[0];
  for (std::size_t h = 1; h < head_out.size(); ++h)
    merged = concat_cols(merged, head_out[h]);
  return layer.wo.forward(merged);
}

Captioner::Captioner(const CaptionerConfig& config, const Vocab& vocab,
                     std::mt19937_64& rng)
    : config_(config), vocab_(vocab) {
  config.validate();
  // identity-centered learned taps so the untrained front is near-neutral
  std::vector<double> taps(config.cbs_taps, 0.0);
  taps[config.cbs_taps / 2] = 1.0;
  cbs_taps_ = Tensor::from_data({config.cbs_taps}, std::move(taps), true);
  cbs_norm_ = nn::LayerNorm(config.d_input);
  input_proj_ = nn::Linear(config.d_input, config.d_model, rng);

  for (int l = 0; l < config.layers; ++l) {
    EncoderLayer enc;
    enc.self_attn = AttnLayer(config.d_model, config.heads, config.mem_slots, rng);
    enc.ff1 = nn::Linear(config.d_model, config.d_ff, rng);
    enc.ff2 = nn::Linear(config.d_ff, config.d_model, rng);
    enc.norm_attn = nn::LayerNorm(config.d_model);
    enc.norm_ff = nn::LayerNorm(config.d_model);
    encoder_.push_back(std::move(enc));

    DecoderLayer dec;
    dec.self_attn = AttnLayer(config.d_model, config.heads, 0, rng);
    dec.cross_attn = AttnLayer(config.d_model, config.heads, 0, rng);
    for (int j = 0; j < config.layers; ++j)
      dec.gates.emplace_back(2 * config.d_model, config.d_model, rng);
    dec.ff1 = nn::Linear(config.d_model, config.d_ff, rng);
    dec.ff2 = nn::Linear(config.d_ff, config.d_model, rng);
    dec.norm_self = nn::LayerNorm(config.d_model);
    dec.norm_cross = nn::LayerNorm(config.d_model);
    dec.norm_ff = nn::LayerNorm(config.d_model);
    decoder_.push_back(std::move(dec));
  }
  token_embed_ = nn::Embedding(vocab.size(), config.d_model, rng);
  out_proj_ = nn::Linear(config.d_model, vocab.size(), rng);
}

Tensor Captioner::maybe_dropout(const Tensor& x, bool train) const {
  if (!train || config_.dropout <= 0.0) return x;
  return dropout(x, config_.dropout, dropout_rng_, true);
}

Tensor Captioner::front(const Tensor& regions, double sigma) const {
  if (regions.rows() < 1) throw std::invalid_argument("encode: empty regions");
  if (regions.cols() != config_.d_input)
    throw std::invalid_argument("encode: region width mismatch");
  // sigma <= floor means "curriculum finished"; the layer itself rejects
  // non-positive values, so clamp to the floor (same bypass either way)
  Tensor x = smoothing::cbs1d_layer(regions, cbs_taps_,
                                    std::max(sigma, smoothing::kSigmaFloor), cbs_norm_);
  return input_proj_.forward(x);
}

std::vector<Tensor> Captioner::encode(const Tensor& regions, double sigma) const {
  Tensor x = front(regions, sigma);
  std::vector<Tensor> outputs;
  for (const auto& layer : encoder_) {
    Tensor a = mem_attention(layer.self_attn, x, x);
    x = layer.norm_attn.forward(add(x, a));
    Tensor f = layer.ff2.forward(relu(layer.ff1.forward(x)));
    x = layer.norm_ff.forward(add(x, f));
    outputs.push_back(x);
  }
  return outputs;
}

Tensor Captioner::decode_hidden(const std::vector<int>& prefix,
                                const std::vector<Tensor>& enc_outputs,
                                bool train) const {
  if (prefix.empty() || prefix[0] != Vocab::kBos)
    throw std::invalid_argument("decode: prefix must start with BOS");
  if (static_cast<int>(prefix.size()) > config_.max_len)
    throw std::invalid_argument("decode: prefix exceeds max_len");
  for (int t : prefix)
    if (t < 0 || t >= vocab_.size())
      throw std::invalid_argument("decode: token id out of vocabulary");
  if (static_cast<int>(enc_outputs.size()) != config_.layers)
    throw std::invalid_argument("decode: wrong number of encoder outputs");

  const int len = static_cast<int>(prefix.size());
  Tensor x = add(token_embed_.forward(prefix),
                 positional_encoding(len, config_.d_model));
  x = maybe_dropout(x, train);
  const double mesh_scale = 1.0 / std::sqrt(static_cast<double>(config_.layers));

  for (const auto& layer : decoder_) {
    Tensor a = mem_attention(layer.self_attn, x, x, /*causal=*/true);
    x = layer.norm_self.forward(add(x, maybe_dropout(a, train)));

    Tensor meshed;
    if (single_source_) {
      meshed = scale(mem_attention(layer.cross_attn, x, enc_outputs.back()), mesh_scale);
    } else {
      for (int j = 0; j < config_.layers; ++j) {
        Tensor cross = mem_attention(layer.cross_attn, x, enc_outputs[j]);
        Tensor gate = sigmoid(layer.gates[j].forward(concat_cols(cross, x)));
        Tensor term = mul(gate, cross);
        meshed = meshed.defined() ? add(meshed, term) : term;
      }
      meshed = scale(meshed, mesh_scale);
    }
    x = layer.norm_cross.forward(add(x, maybe_dropout(meshed, train)));

    Tensor f = layer.ff2.forward(relu(layer.ff1.forward(x)));
    x = layer.norm_ff.forward(add(x, maybe_dropout(f, train)));
  }
  return x;
}

Tensor Captioner::decode_logits(const std::vector<int>& prefix,
                                const std::vector<Tensor>& enc_outputs) const {
  return out_proj_.forward(decode_hidden(prefix, enc_outputs, false));
}

Tensor Captioner::train_step(const std::vector<Tensor>& region_batch,
                             const std::vector<std::vector<int>>& captions,
                             double sigma) {
  if (region_batch.size() != captions.size() || region_batch.empty())
    throw std::invalid_argument("train_step: batch shape mismatch");

  Tensor total;
  int positions = 0;
  for (std::size_t i = 0; i < region_batch.size(); ++i) {
    const auto& caption = captions[i];
    if (caption.size() < 2 || caption[0] != Vocab::kBos)
      throw std::invalid_argument("train_step: caption must be BOS ... EOS");

    Tensor x = front(region_batch[i], sigma);
    std::vector<Tensor> enc;
    for (const auto& layer : encoder_) {
      Tensor a = mem_attention(layer.self_attn, x, x);
      x = layer.norm_attn.forward(add(x, maybe_dropout(a, true)));
      Tensor f = layer.ff2.forward(relu(layer.ff1.forward(x)));
      x = layer.norm_ff.forward(add(x, maybe_dropout(f, true)));
      enc.push_back(x);
    }

    std::vector<int> prefix(caption.begin(), caption.end() - 1);
    Tensor hidden = decode_hidden(prefix, enc, true);
    Tensor logits = out_proj_.forward(hidden);
    for (std::size_t t = 1; t < caption.size(); ++t) {
      if (caption[t] == Vocab::kPad) continue;
      Tensor row = slice_rows(logits, static_cast<int>(t - 1), static_cast<int>(t));
      Tensor ce = losses::ce_with_ls(row, caption[t], config_.label_smoothing);
      total = total.defined() ? add(total, ce) : ce;
      ++positions;
    }
  }
  if (positions == 0) throw std::invalid_argument("train_step: all-PAD batch");
  return scale(total, 1.0 / positions);
}

Hypothesis Captioner::beam_search(const Tensor& regions, int beam, double sigma,
                                  std::vector<Hypothesis>* full_beam) const {
  if (beam < 1) throw std::invalid_argument("beam_search: beam must be >= 1");
  auto enc = encode(regions, sigma);

  struct Partial {
    std::vector<int> ids;
    double logprob_sum = 0.0;
    bool complete = false;
    double score() const {
      const int generated = static_cast<int>(ids.size()) - 1;
      return generated > 0 ? logprob_sum / generated : 0.0;
    }
  };

  std::vector<Partial> alive = {{{Vocab::kBos}, 0.0, false}};
  std::vector<Partial> done;

  while (!alive.empty()) {
    std::vector<Partial> expanded;
    for (const auto& hyp : alive) {
      if (static_cast<int>(hyp.ids.size()) >= config_.max_len) {
        done.push_back(hyp);
        continue;
      }
      Tensor logits = decode_logits(hyp.ids, enc);
      Tensor logp = log_softmax_rows(logits);
      const int v = logp.cols();
      const double* row =
          logp.data().data() + static_cast<long>(logp.rows() - 1) * v;

      std::vector<int> order(v);
      std::iota(order.begin(), order.end(), 0);
      std::partial_sort(order.begin(), order.begin() + std::min(beam, v), order.end(),
                        [&](int a, int b) { return row[a] > row[b]; });
      for (int c = 0; c < std::min(beam, v); ++c) {
        Partial next = hyp;
        next.ids.push_back(order[c]);
        next.logprob_sum += row[order[c]];
        if (order[c] == Vocab::kEos) {
          next.complete = true;
          done.push_back(next);
        } else {
          expanded.push_back(next);
        }
      }
    }
    std::stable_sort(expanded.begin(), expanded.end(),
                     [](const Partial& a, const Partial& b) { return a.score() > b.score(); });
    if (static_cast<int>(expanded.size()) > beam) expanded.resize(beam);
    alive = std::move(expanded);
  }

  auto better = [](const Partial& a, const Partial& b) {
    if (a.complete != b.complete) return a.complete;
    return a.score() > b.score();
  };
  const Partial* best = nullptr;
  for (const auto& h : done)
    if (!best || better(h, *best)) best = &h;
  if (!best) throw std::runtime_error("beam_search: no hypothesis produced");

  if (full_beam) {
    full_beam->clear();
    std::vector<Partial> sorted = done;
    std::stable_sort(sorted.begin(), sorted.end(), better);
    for (const auto& h : sorted)
      full_beam->push_back({h.ids, h.score(), h.complete});
  }
  return {best->ids, best->score(), best->complete};
}

nn::ParamMap Captioner::params() const {
  nn::ParamMap p;
  p.add("cbs.taps", cbs_taps_);
  cbs_norm_.collect("cbs.norm", p);
  input_proj_.collect("input_proj", p);
  for (std::size_t l = 0; l < encoder_.size(); ++l) {
    const std::string prefix = "enc" + std::to_string(l);
    const auto& e = encoder_[l];
    e.self_attn.collect(prefix + ".attn", p);
    e.ff1.collect(prefix + ".ff1", p);
    e.ff2.collect(prefix + ".ff2", p);
    e.norm_attn.collect(prefix + ".norm_attn", p);
    e.norm_ff.collect(prefix + ".norm_ff", p);
  }
  for (std::size_t l = 0; l < decoder_.size(); ++l) {
    const std::string prefix = "dec" + std::to_string(l);
    const auto& d = decoder_[l];
    d.self_attn.collect(prefix + ".self", p);
    d.cross_attn.collect(prefix + ".cross", p);
    for (std::size_t j = 0; j < d.gates.size(); ++j)
      d.gates[j].collect(prefix + ".gate" + std::to_string(j), p);
    d.ff1.collect(prefix + ".ff1", p);
    d.ff2.collect(prefix + ".ff2", p);
    d.norm_self.collect(prefix + ".norm_self", p);
    d.norm_cross.collect(prefix + ".norm_cross", p);
    d.norm_ff.collect(prefix + ".norm_ff", p);
  }
  token_embed_.collect("embed", p);
  out_proj_.collect("out_proj", p);
  return p;
}

void write_report(const std::string& path, const std::vector<ReportRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_report: cannot open " + path);
  for (const auto& r : records) {
    out << r.image_id << '\t';
    for (std::size_t i = 0; i < r.generated.size(); ++i)
      out << (i ? " " : "") << r.generated[i];
    out << '\t';
    for (std::size_t i = 0; i < r.gold.size(); ++i) out << (i ? " " : "") << r.gold[i];
    out << '\n';
  }
}

std::vector<ReportRecord> read_report(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_report: cannot open " + path);
  std::vector<ReportRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t t1 = line.find('\t');
    const std::size_t t2 = line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos)
      throw std::runtime_error("report: malformed line");
    ReportRecord r;
    r.image_id = line.substr(0, t1);
    std::istringstream gen(line.substr(t1 + 1, t2 - t1 - 1)), gold(line.substr(t2 + 1));
    std::string tok;
    while (gen >> tok) r.generated.push_back(tok);
    while (gold >> tok) r.gold.push_back(tok);
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace icap::captioner
