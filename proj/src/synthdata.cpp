#include "increcap/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace icap::synthdata {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream_id) {
  return std::mt19937_64(splitmix64(seed ^ splitmix64(stream_id)));
}

std::uint8_t clamp8(double v) {
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

// Blocky value noise: one random level per 4x4 cell, keyed by position.
double cell_noise(int x, int y, std::uint64_t key) {
  const std::uint64_t h = splitmix64(key ^ (static_cast<std::uint64_t>(x / 4) << 32) ^
                                    static_cast<std::uint64_t>(y / 4));
  return static_cast<double>(h % 1000) / 1000.0;
}

std::array<double, 3> tissue_base(int tissue_id) {
  switch (tissue_id % 3) {
    case 0: return {178, 108, 108};  // pink tissue
    case 1: return {140, 70, 60};    // dark red organ
    default: return {180, 150, 100};  // yellowish fat
  }
}

void render_background(std::vector<std::uint8_t>& img, int s, int tissue_id,
                       std::uint64_t key) {
  const auto base = tissue_base(tissue_id);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const double n = cell_noise(x, y, key) - 0.5;
      for (int c = 0; c < 3; ++c)
        img[(y * s + x) * 3 + c] = clamp8(base[c] + 50.0 * n);
    }
}

// Point-inside tests in the unit frame (|u|,|v| <= 1) per archetype shape.
bool inside_shape(int shape, double u, double v) {
  switch (shape) {
    case 0: return std::abs(u) <= 1.0 && std::abs(v) <= 0.35;              // bar
    case 1: return v >= -0.9 && std::abs(u) <= (0.9 - v) / 1.8 && v <= 0.9;  // triangle
    case 2: return u * u + v * v <= 1.0;                                   // disc
    case 3: return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) ||
                   (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);             // cross
    case 4: return std::abs(u) + std::abs(v) <= 1.0;                       // diamond
    case 5: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.35;                                      // ring
    }
    case 6: return u * u / 1.0 + v * v / 0.2 <= 1.0;                       // ellipse
    case 7: return (std::abs(u) <= 1.0 && std::abs(v - 0.55) <= 0.25) ||
                   (std::abs(u) <= 1.0 && std::abs(v + 0.55) <= 0.25);     // double bar
    default: return (u >= -1.0 && u <= -0.4 && std::abs(v) <= 1.0) ||
                    (v >= 0.4 && v <= 1.0 && std::abs(u) <= 1.0);          // L-shape
  }
}

// Interaction glyphs, drawn near-white so they survive hue shifts.
bool inside_glyph(int interaction, double u, double v) {
  switch (interaction % 6) {
    case 0: return u * u + v * v <= 0.5;                                   // dot
    case 1: return (u + 0.55) * (u + 0.55) + v * v <= 0.22 ||
                   (u - 0.55) * (u - 0.55) + v * v <= 0.22;                // two dots
    case 2: return std::abs(u) <= 0.65 && std::abs(v) <= 0.65;             // square
    case 3: return v >= -0.8 && std::abs(u) <= (0.8 - v) / 1.6 && v <= 0.8;  // triangle
    case 4: return std::abs(v) <= 0.3;                                     // bar
    default: return std::abs(std::abs(u) - std::abs(v)) <= 0.3;            // X
  }
}

void rotate_rgb(double* rgb, double degrees) {
  // rotation about the gray axis (1,1,1)/sqrt(3)
  const double th = degrees * M_PI / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const double one_c = (1.0 - c) / 3.0;
  const double a = c + one_c, b = one_c - s / std::sqrt(3.0), d = one_c + s / std::sqrt(3.0);
  const double r = rgb[0], g = rgb[1], bl = rgb[2];
  rgb[0] = a * r + b * g + d * bl;
  rgb[1] = d * r + a * g + b * bl;
  rgb[2] = b * r + d * g + a * bl;
}

}  // namespace

void SceneSpec::validate() const {
  if (instrument_classes.size() < 2)
    throw std::invalid_argument("SceneSpec: need >= 2 instrument classes");
  if (interactions.size() < 2) throw std::invalid_argument("SceneSpec: need >= 2 interactions");
  if (tissue_types.empty()) throw std::invalid_argument("SceneSpec: need >= 1 tissue type");
  if (image_size < 16) throw std::invalid_argument("SceneSpec: image size too small");
  if (num_source_classes < 1 ||
      num_source_classes > static_cast<int>(instrument_classes.size()))
    throw std::invalid_argument("SceneSpec: bad source class count");
  for (std::size_t i = 0; i < instrument_classes.size(); ++i)
    for (std::size_t j = i + 1; j < instrument_classes.size(); ++j)
      if (instrument_classes[i].name == instrument_classes[j].name)
        throw std::invalid_argument("SceneSpec: duplicate class name");
}

SceneSpec SceneSpec::desk_default(int image_size, std::uint64_t seed) {
  SceneSpec s;
  s.instrument_classes = {
      {"grasper", 0, {200, 200, 210}},  {"scissors", 3, {90, 200, 90}},
      {"forceps", 6, {80, 120, 220}},   {"hook", 8, {220, 210, 80}},
      {"clipper", 4, {200, 90, 200}},   {"suction", 2, {90, 210, 210}},
      // target-only novel instruments
      {"stapler", 7, {240, 140, 60}},   {"needle", 1, {150, 150, 255}},
      {"retractor", 5, {60, 230, 150}},
  };
  s.interactions = {"grasping", "cutting", "retracting", "suturing",
                    "cauterizing", "suctioning"};
  s.tissue_types = {"tissue", "kidney", "fat"};
  s.image_size = image_size;
  s.seed = seed;
  s.num_source_classes = 6;
  return s;
}

DomainShift DomainShift::desk_default() {
  DomainShift d;
  d.hue_rotation = 100.0;
  d.background_swap = 2;
  d.noise_level = 8.0;
  d.geometry_jitter = 0.1;
  return d;
}

const char* to_string(Domain d) { return d == Domain::SOURCE ? "SOURCE" : "TARGET"; }

const char* to_string(Split s) {
  switch (s) {
    case Split::TRAIN: return "TRAIN";
    case Split::VAL: return "VAL";
    case Split::ONE_SHOT: return "ONE_SHOT";
    case Split::FEW_SHOT: return "FEW_SHOT";
    default: return "TEST";
  }
}

Domain domain_from_string(const std::string& s) {
  if (s == "SOURCE") return Domain::SOURCE;
  if (s == "TARGET") return Domain::TARGET;
  throw std::invalid_argument("unknown domain tag: " + s);
}

Split split_from_string(const std::string& s) {
  if (s == "TRAIN") return Split::TRAIN;
  if (s == "VAL") return Split::VAL;
  if (s == "ONE_SHOT") return Split::ONE_SHOT;
  if (s == "FEW_SHOT") return Split::FEW_SHOT;
  if (s == "TEST") return Split::TEST;
  throw std::invalid_argument("unknown split tag: " + s);
}

SceneSample generate_scene(const SceneSpec& spec, int class_id, int interaction_id,
                           std::uint64_t stream_id) {
  spec.validate();
  if (class_id < 0 || class_id >= static_cast<int>(spec.instrument_classes.size()))
    throw std::invalid_argument("generate_scene: class id out of range");
  if (interaction_id < 0 || interaction_id >= static_cast<int>(spec.interactions.size()))
    throw std::invalid_argument("generate_scene: interaction id out of range");

  auto rng = stream_rng(spec.seed, stream_id);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const int s = spec.image_size;
  SceneSample sample;
  sample.image_size = s;
  sample.image.assign(static_cast<std::size_t>(s) * s * 3, 0);
  sample.object_classes = {class_id};
  sample.interaction_id = interaction_id;
  sample.tissue_id = static_cast<int>(rng() % spec.tissue_types.size());
  sample.id = "s" + std::to_string(stream_id);

  const auto& arch = spec.instrument_classes[class_id];
  sample.caption = {arch.name, "is", spec.interactions[interaction_id],
                    spec.tissue_types[sample.tissue_id]};

  render_background(sample.image, s, sample.tissue_id, splitmix64(rng()));

  // jittered pose for the instrument
  const double cx = s * (0.40 + 0.2 * unit(rng));
  const double cy = s * (0.40 + 0.2 * unit(rng));
  const double half = s * (0.16 + 0.08 * unit(rng));
  const double theta = 2.0 * M_PI * unit(rng);
  const double ct = std::cos(theta), st = std::sin(theta);
  std::array<double, 3> color;
  for (int c = 0; c < 3; ++c)
    color[c] = std::clamp(arch.rgb[c] + (unit(rng) - 0.5) * 40.0, 0.0, 255.0);

  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const double dx = (x - cx) / half, dy = (y - cy) / half;
      const double u = ct * dx + st * dy, v = -st * dx + ct * dy;
      if (inside_shape(arch.shape, u, v))
        for (int c = 0; c < 3; ++c) sample.image[(y * s + x) * 3 + c] = clamp8(color[c]);
    }

  // interaction glyph at a fixed corner, near-white
  const double gx = s * 0.82, gy = s * 0.82, ghalf = s * 0.10;
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const double u = (x - gx) / ghalf, v = (y - gy) / ghalf;
      if (std::abs(u) <= 1.0 && std::abs(v) <= 1.0 && inside_glyph(interaction_id, u, v))
        for (int c = 0; c < 3; ++c) sample.image[(y * s + x) * 3 + c] = 245;
    }

  return sample;
}

SceneSample apply_domain_shift(const SceneSample& sample, const DomainShift& shift) {
  SceneSample out = sample;
  if (shift.is_identity()) return out;
  const int s = sample.image_size;

  // geometry: central zoom resampled with nearest neighbor
  if (shift.geometry_jitter > 0.0) {
    const double zoom = 1.0 + shift.geometry_jitter;
    std::vector<std::uint8_t> zoomed(out.image.size());
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        int sx = static_cast<int>((x - s / 2.0) / zoom + s / 2.0);
        int sy = static_cast<int>((y - s / 2.0) / zoom + s / 2.0);
        sx = std::clamp(sx, 0, s - 1);
        sy = std::clamp(sy, 0, s - 1);
        for (int c = 0; c < 3; ++c)
          zoomed[(y * s + x) * 3 + c] = out.image[(sy * s + sx) * 3 + c];
      }
    out.image = std::move(zoomed);
  }

  std::uint64_t noise_key = splitmix64(std::hash<std::string>{}(sample.id) ^
                                       static_cast<std::uint64_t>(shift.noise_level * 1000) ^
                                       (static_cast<std::uint64_t>(shift.background_swap) << 40));
  auto rng = std::mt19937_64(noise_key);
  std::normal_distribution<double> noise(0.0, std::max(1e-9, shift.noise_level));

  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      double rgb[3];
      for (int c = 0; c < 3; ++c) rgb[c] = out.image[(y * s + x) * 3 + c];
      if (shift.hue_rotation != 0.0) rotate_rgb(rgb, shift.hue_rotation);
      if (shift.background_swap != 0) {
        const auto swap_base = tissue_base(shift.background_swap - 1);
        const double n = cell_noise(x, y, 0xb05eULL + shift.background_swap) - 0.5;
        for (int c = 0; c < 3; ++c)
          rgb[c] = 0.7 * rgb[c] + 0.3 * (swap_base[c] + 50.0 * n);
      }
      if (shift.noise_level > 0.0)
        for (double& c : rgb) c += noise(rng);
      for (int c = 0; c < 3; ++c) out.image[(y * s + x) * 3 + c] = clamp8(rgb[c]);
    }
  return out;
}

bool parse_caption(const SceneSpec& spec, const std::vector<std::string>& tokens,
                   int* class_id, int* interaction_id, int* tissue_id) {
  if (tokens.size() != 4 || tokens[1] != "is") return false;
  int ci = -1, ii = -1, ti = -1;
  for (std::size_t i = 0; i < spec.instrument_classes.size(); ++i)
    if (spec.instrument_classes[i].name == tokens[0]) ci = static_cast<int>(i);
  for (std::size_t i = 0; i < spec.interactions.size(); ++i)
    if (spec.interactions[i] == tokens[2]) ii = static_cast<int>(i);
  for (std::size_t i = 0; i < spec.tissue_types.size(); ++i)
    if (spec.tissue_types[i] == tokens[3]) ti = static_cast<int>(i);
  if (ci < 0 || ii < 0 || ti < 0) return false;
  if (class_id) *class_id = ci;
  if (interaction_id) *interaction_id = ii;
  if (tissue_id) *tissue_id = ti;
  return true;
}

Manifest build_splits(const SceneSpec& spec, const DomainShift& shift,
                      const SplitCounts& counts, int k_shot) {
  spec.validate();
  if (counts.source_train_per_class < 1 || counts.source_test_per_class < 1 ||
      counts.target_pool_per_class < 1 || counts.target_test_per_class < 1)
    throw std::invalid_argument("build_splits: counts must be positive");
  if (k_shot < 1) throw std::invalid_argument("build_splits: k_shot must be >= 1");
  if (k_shot > counts.target_pool_per_class)
    throw std::invalid_argument("build_splits: k_shot exceeds the generated pool");

  Manifest m;
  std::uint64_t stream = 1;
  const int n_classes = static_cast<int>(spec.instrument_classes.size());
  const int n_inter = static_cast<int>(spec.interactions.size());

  auto emit = [&](int class_id, Domain domain, Split split, int count,
                  const std::string& tag) {
    for (int i = 0; i < count; ++i) {
      const int interaction = static_cast<int>(
          splitmix64(spec.seed ^ (stream * 0x51ULL)) % n_inter);
      SceneSample s = generate_scene(spec, class_id, interaction, stream);
      if (domain == Domain::TARGET) s = apply_domain_shift(s, shift);
      s.domain = domain;
      s.split = split;
      s.id = tag + "_c" + std::to_string(class_id) + "_" + std::to_string(stream);
      m.samples.push_back(std::move(s));
      ++stream;
    }
  };

  for (int c = 0; c < spec.num_source_classes; ++c) {
    emit(c, Domain::SOURCE, Split::TRAIN, counts.source_train_per_class, "src_train");
    emit(c, Domain::SOURCE, Split::VAL, counts.source_val_per_class, "src_val");
    emit(c, Domain::SOURCE, Split::TEST, counts.source_test_per_class, "src_test");
  }
  for (int c = 0; c < n_classes; ++c) {
    emit(c, Domain::TARGET, Split::ONE_SHOT, 1, "tgt_one");
    emit(c, Domain::TARGET, Split::FEW_SHOT, k_shot, "tgt_few");
    emit(c, Domain::TARGET, Split::TEST, counts.target_test_per_class, "tgt_test");
  }
  return m;
}

namespace {

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

std::vector<std::string> split_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string t;
  while (ss >> t) out.push_back(t);
  return out;
}

}  // namespace

void write_annotations(const std::string& path, const Manifest& manifest) {
  std::ofstream out(path, std::ios::binary);  // binary: LF endings everywhere
  if (!out) throw std::runtime_error("write_annotations: cannot open " + path);
  for (const auto& s : manifest.samples) {
    out << s.image_path << '\t' << join_tokens(s.caption) << '\t';
    for (std::size_t i = 0; i < s.object_classes.size(); ++i) {
      if (i) out << ',';
      out << s.object_classes[i];
    }
    out << '\t' << to_string(s.domain) << '\t' << to_string(s.split) << '\n';
  }
}

Manifest read_annotations(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_annotations: cannot open " + path);
  Manifest m;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 5)
      throw std::runtime_error("annotations line " + std::to_string(lineno) +
                               ": expected 5 tab-separated fields, got " +
                               std::to_string(fields.size()));
    SceneSample s;
    s.image_path = fields[0];
    s.caption = split_tokens(fields[1]);
    try {
      std::istringstream cs(fields[2]);
      std::string tok;
      while (std::getline(cs, tok, ',')) s.object_classes.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      throw std::runtime_error("annotations line " + std::to_string(lineno) +
                               ": bad class id list field");
    }
    try {
      s.domain = domain_from_string(fields[3]);
    } catch (const std::exception&) {
      throw std::runtime_error("annotations line " + std::to_string(lineno) +
                               ": bad domain field '" + fields[3] + "'");
    }
    try {
      s.split = split_from_string(fields[4]);
    } catch (const std::exception&) {
      throw std::runtime_error("annotations line " + std::to_string(lineno) +
                               ": bad split field '" + fields[4] + "'");
    }
    s.id = std::filesystem::path(fields[0]).stem().string();
    m.samples.push_back(std::move(s));
  }
  return m;
}

Manifest write_dataset(const std::string& dir, Manifest manifest) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  for (auto& s : manifest.samples) {
    s.image_path = "images/" + s.id + ".ppm";
    write_ppm((fs::path(dir) / s.image_path).string(), s.image, s.image_size,
              s.image_size);
  }
  write_annotations((fs::path(dir) / "annotations.tsv").string(), manifest);
  return manifest;
}

Manifest read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  Manifest m = read_annotations((fs::path(dir) / "annotations.tsv").string());
  for (auto& s : m.samples) {
    int w = 0, h = 0;
    s.image = read_ppm((fs::path(dir) / s.image_path).string(), &w, &h);
    if (w != h) throw std::runtime_error("read_dataset: non-square image " + s.image_path);
    s.image_size = w;
  }
  return m;
}

void write_ppm(const std::string& path, const std::vector<std::uint8_t>& rgb, int w, int h) {
  if (static_cast<int>(rgb.size()) != w * h * 3)
    throw std::invalid_argument("write_ppm: buffer size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_ppm: cannot open " + path);
  out << "P6\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
}

std::vector<std::uint8_t> read_ppm(const std::string& path, int* w, int* h) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_ppm: cannot open " + path);
  std::string magic;
  int width, height, maxval;
  in >> magic >> width >> height >> maxval;
  if (magic != "P6" || maxval != 255)
    throw std::runtime_error("read_ppm: unsupported format in " + path);
  in.get();  // single whitespace after header
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(width) * height * 3);
  in.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!in) throw std::runtime_error("read_ppm: truncated file " + path);
  if (w) *w = width;
  if (h) *h = height;
  return rgb;
}

Tensor to_tensor(const std::vector<const SceneSample*>& samples) {
  if (samples.empty()) throw std::invalid_argument("to_tensor: empty batch");
  const int s = samples[0]->image_size;
  const int n = static_cast<int>(samples.size());
  std::vector<double> data(static_cast<std::size_t>(n) * 3 * s * s);
  for (int i = 0; i < n; ++i) {
    const auto& img = samples[i]->image;
    if (samples[i]->image_size != s || static_cast<int>(img.size()) != s * s * 3)
      throw std::invalid_argument("to_tensor: inconsistent image sizes");
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x)
        for (int c = 0; c < 3; ++c)
          data[((static_cast<std::size_t>(i) * 3 + c) * s + y) * s + x] =
              img[(y * s + x) * 3 + c] / 255.0;
  }
  return Tensor::from_data({n, 3, s, s}, std::move(data));
}

}  // namespace icap::synthdata
