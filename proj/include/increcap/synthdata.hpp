#pragma once
// Procedural generator of small "surgical scene" images with grammar
// captions: an instrument archetype rendered over a tissue texture, plus a
// glyph encoding the instrument/tissue interaction. Deterministic per
// (seed, stream id); the verification substitute for the private datasets.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "increcap/tensor.hpp"

namespace icap::synthdata {

struct Archetype {
  std::string name;
  int shape = 0;                     // polygon archetype id
  std::array<int, 3> rgb = {0, 0, 0};  // base color, jittered +-20 per channel
};

struct SceneSpec {
  std::vector<Archetype> instrument_classes;
  std::vector<std::string> interactions;
  std::vector<std::string> tissue_types;
  int image_size = 64;
  std::uint64_t seed = 7;
  int num_source_classes = 6;  // first n classes appear in the source domain

  void validate() const;
  // 6 source + 3 target-only instruments, 6 interactions, 3 tissues.
  static SceneSpec desk_default(int image_size = 64, std::uint64_t seed = 7);
};

struct DomainShift {
  double hue_rotation = 0.0;    // degrees, rotation about the gray axis
  int background_swap = 0;      // 0 = none, else 1-based texture id to blend in
  double noise_level = 0.0;     // pixel sigma in [0,255] units
  double geometry_jitter = 0.0;  // central zoom factor in [0, 0.3]

  bool is_identity() const {
    return hue_rotation == 0.0 && background_swap == 0 && noise_level == 0.0 &&
           geometry_jitter == 0.0;
  }
  static DomainShift none() { return {}; }
  static DomainShift desk_default();
};

enum class Domain { SOURCE, TARGET };
enum class Split { TRAIN, VAL, ONE_SHOT, FEW_SHOT, TEST };

const char* to_string(Domain d);
const char* to_string(Split s);
Domain domain_from_string(const std::string& s);
Split split_from_string(const std::string& s);

struct SceneSample {
  std::string id;
  std::vector<std::uint8_t> image;  // H*W*3, row-major RGB; may be empty if on disk
  int image_size = 0;
  std::vector<std::string> caption;  // "<instrument> is <interaction> <tissue>"
  std::vector<int> object_classes;
  Domain domain = Domain::SOURCE;
  Split split = Split::TRAIN;
  int interaction_id = 0;
  int tissue_id = 0;
  std::string image_path;  // relative path once persisted
};

// Renders one scene. The tissue is drawn from the per-sample stream; caption
// and pixels are fully determined by (spec.seed, stream_id).
SceneSample generate_scene(const SceneSpec& spec, int class_id, int interaction_id,
                           std::uint64_t stream_id);

// Pixel-space transform only; caption, classes and tags are untouched.
// The identity shift returns a bitwise-equal image.
SceneSample apply_domain_shift(const SceneSample& sample, const DomainShift& shift);

// True when tokens parse as "<instrument> is <interaction> <tissue>" under
// the spec's inventories; outputs the parsed ids.
bool parse_caption(const SceneSpec& spec, const std::vector<std::string>& tokens,
                   int* class_id, int* interaction_id, int* tissue_id);

struct SplitCounts {
  int source_train_per_class = 20;
  int source_val_per_class = 5;
  int source_test_per_class = 10;
  int target_pool_per_class = 10;  // pool the shot splits draw from
  int target_test_per_class = 10;
};

struct Manifest {
  std::vector<SceneSample> samples;
};

// SOURCE train/val/test over source classes; TARGET one-shot/few-shot/test
// over the full inventory (novel classes included), shifted by `shift`.
// All split ids are pairwise disjoint.
Manifest build_splits(const SceneSpec& spec, const DomainShift& shift,
                      const SplitCounts& counts, int k_shot);

// Annotation file: tab-separated; image path, caption, class ids, domain,
// split. UTF-8, LF line endings.
void write_annotations(const std::string& path, const Manifest& manifest);
Manifest read_annotations(const std::string& path);

// Persists images (binary PPM) under dir/images/ and the annotation file at
// dir/annotations.tsv; fills image_path on the returned manifest.
Manifest write_dataset(const std::string& dir, Manifest manifest);
// Loads the annotation file and all referenced images.
Manifest read_dataset(const std::string& dir);

void write_ppm(const std::string& path, const std::vector<std::uint8_t>& rgb, int w, int h);
std::vector<std::uint8_t> read_ppm(const std::string& path, int* w, int* h);

// {N,3,S,S} tensor scaled to [0,1] from a list of samples with pixels.
Tensor to_tensor(const std::vector<const SceneSample*>& samples);

}  // namespace icap::synthdata
