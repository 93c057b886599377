#include "increcap/backbone.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace icap::backbone {

BackboneConfig BackboneConfig::desk_small(int input_size, int num_classes) {
  BackboneConfig c;
  c.stages = {{8, 1}, {16, 1}, {32, 1}};
  c.input_size = input_size;
  c.proj_dim = 32;
  c.num_classes = num_classes;
  return c;
}

Backbone::Backbone(const BackboneConfig& config, std::mt19937_64& rng)
    : config_(config) {
  if (config.stages.empty()) throw std::invalid_argument("backbone: need >= 1 stage");
  if (config.proj_dim > config.feature_dim())
    throw std::invalid_argument("backbone: proj_dim must be <= feature_dim");
  if (config.num_classes < 1) throw std::invalid_argument("backbone: need >= 1 class");

  const int c0 = config.stages[0].first;
  stem_ = nn::Conv2d(config.in_channels, c0, 3, 2, 1, rng);
  stem_norm_ = nn::LayerNorm(c0);

  int in_ch = c0;
  for (std::size_t s = 0; s < config.stages.size(); ++s) {
    const auto [out_ch, blocks] = config.stages[s];
    std::vector<Block> stage;
    for (int b = 0; b < blocks; ++b) {
      Block blk;
      const int stride = (b == 0 && s > 0) ? 2 : 1;
      const int cin = (b == 0) ? in_ch : out_ch;
      blk.conv1 = nn::Conv2d(cin, out_ch, 3, stride, 1, rng);
      blk.conv2 = nn::Conv2d(out_ch, out_ch, 3, 1, 1, rng);
      blk.norm1 = nn::LayerNorm(out_ch);
      blk.norm2 = nn::LayerNorm(out_ch);
      if (stride != 1 || cin != out_ch) {
        blk.downsample = nn::Conv2d(cin, out_ch, 1, stride, 0, rng);
        blk.has_downsample = true;
      }
      stage.push_back(std::move(blk));
    }
    stages_.push_back(std::move(stage));
    in_ch = out_ch;
  }

  const int d = config.feature_dim();
  proj1_ = nn::Linear(d, d, rng, /*bias=*/false);
  proj2_ = nn::Linear(d, config.proj_dim, rng, /*bias=*/false);
  classifier_ = nn::Linear(d, config.num_classes, rng);
}

Tensor Backbone::channel_norm(const Tensor& map, const nn::LayerNorm& norm) const {
  const int n = map.dim(0), c = map.dim(1), h = map.dim(2), w = map.dim(3);
  return rows_to_map(norm.forward(regions_from_map(map)), n, c, h, w);
}

Tensor Backbone::maybe_blur(const Tensor& map, double sigma) const {
  if (!config_.cbs_enabled || sigma <= smoothing::kSigmaFloor) return map;
  auto k = smoothing::gaussian_kernel(sigma, smoothing::default_kernel_size(sigma), 2);
  return smoothing::cbs_apply(map, k);
}

FeatureOutput Backbone::forward_features(const Tensor& images, double sigma) const {
  if (images.ndim() != 4 || images.dim(1) != config_.in_channels ||
      images.dim(2) != config_.input_size || images.dim(3) != config_.input_size)
    throw std::invalid_argument("forward_features: image shape mismatch");

  Tensor x = relu(channel_norm(stem_.forward(images), stem_norm_));
  x = maybe_blur(x, sigma);
  for (const auto& stage : stages_) {
    for (const auto& blk : stage) {
      Tensor h = relu(channel_norm(blk.conv1.forward(x), blk.norm1));
      h = channel_norm(blk.conv2.forward(h), blk.norm2);
      Tensor skip = blk.has_downsample ? blk.downsample.forward(x) : x;
      x = relu(add(skip, h));
    }
    x = maybe_blur(x, sigma);
  }

  FeatureOutput out;
  out.pooled = spatial_mean(x);
  out.regions = regions_from_map(x);
  out.map_size = x.dim(2);
  return out;
}

Tensor Backbone::project(const Tensor& pooled) const {
  Tensor h = relu(proj1_.forward(pooled));
  return l2_normalize_rows(proj2_.forward(h), 1e-12, &proj_flagged_);
}

Tensor Backbone::classify(const Tensor& pooled) const {
  if (pooled.cols() != config_.feature_dim())
    throw std::invalid_argument("classify: feature dim mismatch");
  return classifier_.forward(pooled);
}

void Backbone::expand_head(int new_total, std::mt19937_64& rng) {
  const int k1 = config_.num_classes;
  if (new_total <= k1)
    throw std::invalid_argument("expand_head: new class count must exceed the old one");
  const int d = config_.feature_dim();
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor w = Tensor::uniform({new_total, d}, rng, -bound, bound, true);
  Tensor b = Tensor::zeros({new_total}, true);
  std::copy(classifier_.w.data().begin(), classifier_.w.data().end(), w.data().begin());
  std::copy(classifier_.b.data().begin(), classifier_.b.data().end(), b.data().begin());
  classifier_.w = w;
  classifier_.b = b;
  config_.num_classes = new_total;
}

Backbone Backbone::clone() const {
  std::mt19937_64 rng(0);
  Backbone copy(config_, rng);
  auto src = params().entries();
  auto dst = copy.params().entries();
  for (std::size_t i = 0; i < src.size(); ++i)
    dst[i].second.data() = src[i].second.data();
  return copy;
}

nn::ParamMap Backbone::params() const {
  nn::ParamMap p = representation_params();
  p.merge("", classifier_params());
  return p;
}

nn::ParamMap Backbone::representation_params() const {
  nn::ParamMap p;
  stem_.collect("stem", p);
  stem_norm_.collect("stem_norm", p);
  for (std::size_t s = 0; s < stages_.size(); ++s)
    for (std::size_t b = 0; b < stages_[s].size(); ++b) {
      const auto& blk = stages_[s][b];
      const std::string prefix = "stage" + std::to_string(s) + ".block" + std::to_string(b);
      blk.conv1.collect(prefix + ".conv1", p);
      blk.norm1.collect(prefix + ".norm1", p);
      blk.conv2.collect(prefix + ".conv2", p);
      blk.norm2.collect(prefix + ".norm2", p);
      if (blk.has_downsample) blk.downsample.collect(prefix + ".down", p);
    }
  proj1_.collect("proj1", p);
  proj2_.collect("proj2", p);
  return p;
}

nn::ParamMap Backbone::classifier_params() const {
  nn::ParamMap p;
  classifier_.collect("classifier", p);
  return p;
}

void write_embedding_table(const std::string& path, const std::vector<EmbeddingRow>& rows) {
  if (rows.empty()) throw std::invalid_argument("write_embedding_table: empty dataset");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_embedding_table: cannot open " + path);
  out << "sample_id\tlabel";
  for (std::size_t j = 0; j < rows[0].embedding.size(); ++j) out << "\te" << j;
  out << "\n";
  out.precision(17);
  for (const auto& r : rows) {
    out << r.sample_id << "\t" << r.label;
    for (double v : r.embedding) out << "\t" << v;
    out << "\n";
  }
}

std::vector<EmbeddingRow> read_embedding_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_embedding_table: cannot open " + path);
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("read_embedding_table: missing header");
  std::vector<EmbeddingRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    EmbeddingRow r;
    std::string field;
    std::getline(ss, r.sample_id, '\t');
    std::getline(ss, field, '\t');
    r.label = std::stoi(field);
    while (std::getline(ss, field, '\t')) r.embedding.push_back(std::stod(field));
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace icap::backbone
