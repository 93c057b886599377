#pragma once
// Residual convolutional feature extractor with optional 2D curriculum
// smoothing after each stage, a contrastive projection head, an expandable
// linear classifier, and region-feature export for the caption model.

#include <string>
#include <vector>

#include "increcap/nn.hpp"
#include "increcap/smoothing.hpp"
#include "increcap/tensor.hpp"

namespace icap::backbone {

struct BackboneConfig {
  // (channels, blocks) per stage; the first stage follows a stride-2 stem,
  // later stages downsample by 2 at entry.
  std::vector<std::pair<int, int>> stages = {{32, 2}, {64, 2}, {128, 2}};
  int input_size = 64;
  int in_channels = 3;
  int proj_dim = 128;
  bool cbs_enabled = false;
  int num_classes = 1;

  int feature_dim() const { return stages.back().first; }
  int final_map_size() const {
    int s = input_size / 2;  // stem
    for (std::size_t i = 1; i < stages.size(); ++i) s /= 2;
    return s;
  }

  // Small configuration used by fast experiments and tests.
  static BackboneConfig desk_small(int input_size = 32, int num_classes = 2);
};

struct FeatureOutput {
  Tensor pooled;   // {N, d_feat}
  Tensor regions;  // {N * H' * W', d_feat}, raster order per sample
  int map_size = 0;
};

class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig& config, std::mt19937_64& rng);

  const BackboneConfig& config() const { return config_; }

  // Pooled features and pre-pool region features. `sigma` drives the 2D CBS
  // blur; ignored when cbs is disabled or sigma is at/below the floor.
  FeatureOutput forward_features(const Tensor& images, double sigma) const;

  // 2-layer bias-free MLP + L2 normalization -> {N, proj_dim} unit rows.
  Tensor project(const Tensor& pooled) const;
  int projection_flag_count() const { return proj_flagged_; }

  // Affine classifier over pooled features -> {N, K}.
  Tensor classify(const Tensor& pooled) const;
  int num_classes() const { return config_.num_classes; }

  // Grows the classifier head to new_total outputs. Old rows are preserved
  // exactly; new rows get zero bias and small uniform weights.
  void expand_head(int new_total, std::mt19937_64& rng);

  // Deep copy (weights included); used for teacher snapshots.
  Backbone clone() const;

  nn::ParamMap params() const;
  // Parameters excluding the classifier head (for decoupled training).
  nn::ParamMap representation_params() const;
  nn::ParamMap classifier_params() const;

 private:
  struct Block {
    nn::Conv2d conv1, conv2;
    nn::LayerNorm norm1, norm2;
    nn::Conv2d downsample;  // 1x1, only when shape changes
    bool has_downsample = false;
  };

  Tensor channel_norm(const Tensor& map, const nn::LayerNorm& norm) const;
  Tensor maybe_blur(const Tensor& map, double sigma) const;

  BackboneConfig config_;
  nn::Conv2d stem_;
  nn::LayerNorm stem_norm_;
  std::vector<std::vector<Block>> stages_;
  nn::Linear proj1_, proj2_;
  nn::Linear classifier_;
  mutable int proj_flagged_ = 0;
};

struct EmbeddingRow {
  std::string sample_id;
  int label = 0;
  std::vector<double> embedding;
};

// Delimited text with a header row; one record per sample.
void write_embedding_table(const std::string& path, const std::vector<EmbeddingRow>& rows);
std::vector<EmbeddingRow> read_embedding_table(const std::string& path);

}  // namespace icap::backbone
