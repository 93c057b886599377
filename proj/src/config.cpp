#include "increcap/config.hpp"

#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <variant>

namespace icap::config {

const char* to_string(Stage1Mode m) {
  switch (m) {
    case Stage1Mode::CI: return "CI";
    case Stage1Mode::CI_CBS: return "CI+CBS";
    case Stage1Mode::CI_SUPCON: return "CI+SupCon";
    case Stage1Mode::CISC: return "CISC";
  }
  throw std::logic_error("unreachable");
}

Stage1Mode stage1_mode_from_string(const std::string& s) {
  if (s == "CI") return Stage1Mode::CI;
  if (s == "CI+CBS") return Stage1Mode::CI_CBS;
  if (s == "CI+SupCon") return Stage1Mode::CI_SUPCON;
  if (s == "CISC") return Stage1Mode::CISC;
  throw std::invalid_argument("unknown stage1 mode: " + s);
}

bool mode_uses_supcon(Stage1Mode m) {
  return m == Stage1Mode::CI_SUPCON || m == Stage1Mode::CISC;
}

bool mode_uses_cbs(Stage1Mode m) {
  return m == Stage1Mode::CI_CBS || m == Stage1Mode::CISC;
}

namespace {

using FieldPtr = std::variant<int*, double*, bool*, std::string*, std::uint64_t*>;

struct Field {
  std::string section;
  std::string key;
  FieldPtr ptr;
};

// One registry drives serialization, parsing, overrides and hashing so the
// four can never drift apart.
std::vector<Field> field_table(ExperimentConfig& c) {
  return {
      {"experiment", "name", &c.name},
      {"experiment", "seed", &c.seed},
      {"experiment", "out_dir", &c.out_dir},
      {"experiment", "data_dir", &c.data_dir},
      {"experiment", "arch", &c.arch},

      {"data", "image_size", &c.image_size},
      {"data", "base_classes", &c.base_classes},
      {"data", "novel_classes", &c.novel_classes},
      {"data", "source_train_per_class", &c.source_train_per_class},
      {"data", "source_val_per_class", &c.source_val_per_class},
      {"data", "source_test_per_class", &c.source_test_per_class},
      {"data", "target_pool_per_class", &c.target_pool_per_class},
      {"data", "target_test_per_class", &c.target_test_per_class},
      {"data", "k_shot", &c.k_shot},
      {"data", "domain_shift", &c.domain_shift},

      {"stage1", "mode", &c.stage1_mode},
      {"stage1", "epochs", &c.stage1_epochs},
      {"stage1", "finetune_epochs", &c.finetune_epochs},
      {"stage1", "batch_size", &c.stage1_batch},
      {"stage1", "lr", &c.stage1_lr},
      {"stage1", "momentum", &c.momentum},
      {"stage1", "weight_decay", &c.weight_decay},
      {"stage1", "lr_decay", &c.lr_decay},
      {"stage1", "lr_period", &c.lr_period},
      {"stage1", "finetune_lr", &c.finetune_lr},
      {"stage1", "ls", &c.stage1_ls},
      {"stage1", "label_smoothing", &c.label_smoothing},
      {"stage1", "supcon_temperature", &c.supcon_temperature},
      {"stage1", "distill_temperature", &c.distill_temperature},
      {"stage1", "memory_budget", &c.memory_budget},
      {"stage1", "sigma0", &c.sigma0},
      {"stage1", "sigma_decay", &c.sigma_decay},
      {"stage1", "sigma_period", &c.sigma_period},

      {"stage2", "epochs", &c.stage2_epochs},
      {"stage2", "batch_size", &c.stage2_batch},
      {"stage2", "lr", &c.stage2_lr},
      {"stage2", "cbs", &c.stage2_cbs},
      {"stage2", "ls", &c.stage2_ls},
      {"stage2", "label_smoothing", &c.stage2_label_smoothing},
      {"stage2", "max_len", &c.max_len},
      {"stage2", "vocab_min_count", &c.vocab_min_count},
      {"stage2", "adapt", &c.stage2_adapt},
      {"stage2", "adapt_epochs", &c.adapt_epochs},

      {"eval", "beam", &c.beam},
      {"eval", "calibration_bins", &c.calibration_bins},
      {"eval", "tace_threshold", &c.tace_threshold},
  };
}

std::string format_value(const FieldPtr& p) {
  std::ostringstream os;
  os << std::setprecision(17);
  std::visit(
      [&](auto* v) {
        using T = std::remove_pointer_t<decltype(v)>;
        if constexpr (std::is_same_v<T, bool>)
          os << (*v ? "true" : "false");
        else
          os << *v;
      },
      p);
  return os.str();
}

void parse_value(const FieldPtr& p, const std::string& section_key,
                 const std::string& raw) {
  std::visit(
      [&](auto* v) {
        using T = std::remove_pointer_t<decltype(v)>;
        if constexpr (std::is_same_v<T, std::string>) {
          *v = raw;
        } else if constexpr (std::is_same_v<T, bool>) {
          if (raw == "true" || raw == "1") *v = true;
          else if (raw == "false" || raw == "0") *v = false;
          else throw std::invalid_argument("config: bad bool for " + section_key + ": " + raw);
        } else {
          std::istringstream is(raw);
          T parsed{};
          char extra;
          if (!(is >> parsed) || is >> extra)
            throw std::invalid_argument("config: bad value for " + section_key + ": " + raw);
          *v = parsed;
        }
      },
      p);
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

void ExperimentConfig::validate() const {
  mode();  // throws on an unknown mode name
  if (arch != "desk" && arch != "full")
    throw std::invalid_argument("config: arch must be desk or full");
  if (domain_shift != "default" && domain_shift != "none")
    throw std::invalid_argument("config: domain_shift must be default or none");
  if (stage2_adapt != "none" && stage2_adapt != "one_shot" && stage2_adapt != "few_shot")
    throw std::invalid_argument("config: adapt must be none, one_shot or few_shot");
  if (base_classes < 1 || novel_classes < 0 || base_classes + novel_classes > 9)
    throw std::invalid_argument("config: class counts out of range (<= 9 total)");
  if (image_size < 8) throw std::invalid_argument("config: image_size too small");
  if (k_shot < 1) throw std::invalid_argument("config: k_shot must be >= 1");
  if (stage1_epochs < 1 || stage2_epochs < 1 || finetune_epochs < 1)
    throw std::invalid_argument("config: epoch counts must be positive");
  if (stage1_batch < 1 || stage2_batch < 1)
    throw std::invalid_argument("config: batch sizes must be positive");
  if (stage1_lr <= 0 || stage2_lr <= 0 || finetune_lr <= 0)
    throw std::invalid_argument("config: learning rates must be positive");
  if (beam < 1) throw std::invalid_argument("config: beam must be >= 1");
  if (calibration_bins < 1) throw std::invalid_argument("config: bins must be >= 1");
  if (tace_threshold < 0 || tace_threshold >= 1)
    throw std::invalid_argument("config: tace_threshold must be in [0, 1)");
  if (label_smoothing < 0 || label_smoothing >= 1 || stage2_label_smoothing < 0 ||
      stage2_label_smoothing >= 1)
    throw std::invalid_argument("config: label smoothing must be in [0, 1)");
}

std::string to_text(const ExperimentConfig& c) {
  auto& mut = const_cast<ExperimentConfig&>(c);
  std::ostringstream os;
  std::string section;
  for (const auto& f : field_table(mut)) {
    if (f.section != section) {
      if (!section.empty()) os << "\n";
      os << "[" << f.section << "]\n";
      section = f.section;
    }
    os << f.key << " = " << format_value(f.ptr) << "\n";
  }
  return os.str();
}

ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig c;
  auto fields = field_table(c);
  std::map<std::string, FieldPtr> by_key;
  for (const auto& f : fields) by_key[f.section + "." + f.key] = f.ptr;

  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::invalid_argument("config: malformed section at line " +
                                    std::to_string(lineno));
      section = trim(line.substr(1, line.size() - 2));
      bool known = false;
      for (const auto& f : fields) known = known || f.section == section;
      if (!known) throw std::invalid_argument("config: unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: expected key = value at line " +
                                  std::to_string(lineno));
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (section.empty())
      throw std::invalid_argument("config: key before any section: " + key);
    const auto it = by_key.find(section + "." + key);
    if (it == by_key.end())
      throw std::invalid_argument("config: unknown key " + section + "." + key);
    parse_value(it->second, section + "." + key, value);
  }
  c.validate();
  return c;
}

ExperimentConfig read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return parse_config_text(os.str());
}

void write_config(const std::string& path, const ExperimentConfig& c) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("config: cannot write " + path);
  out << to_text(c);
}

void apply_override(ExperimentConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("override must look like section.key=value: " + assignment);
  std::string key = trim(assignment.substr(0, eq));
  const std::string value = trim(assignment.substr(eq + 1));

  auto fields = field_table(c);
  const FieldPtr* match = nullptr;
  std::string matched_key;
  for (const auto& f : fields) {
    const std::string full = f.section + "." + f.key;
    if (full == key || (key.find('.') == std::string::npos && f.key == key)) {
      if (match) throw std::invalid_argument("override key is ambiguous: " + key);
      match = &f.ptr;
      matched_key = full;
    }
  }
  if (!match) throw std::invalid_argument("unknown config key: " + key);
  parse_value(*match, matched_key, value);
}

namespace {

std::string fnv_hex(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace

std::string config_hash(const ExperimentConfig& c) { return fnv_hex(to_text(c)); }

std::string stage_hash(const ExperimentConfig& c, int stage) {
  if (stage != 1 && stage != 2) throw std::invalid_argument("stage_hash: stage must be 1 or 2");
  auto& mut = const_cast<ExperimentConfig&>(c);
  std::ostringstream os;
  for (const auto& f : field_table(mut)) {
    const bool relevant =
        f.section == "data" || f.section == "stage1" ||
        (stage == 2 && f.section == "stage2") ||
        (f.section == "experiment" && (f.key == "seed" || f.key == "arch"));
    if (relevant) os << f.section << "." << f.key << " = " << format_value(f.ptr) << "\n";
  }
  return fnv_hex(os.str());
}

}  // namespace icap::config
