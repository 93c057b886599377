#pragma once
// Checkpoints: a plain-text manifest (names, shapes, dtype, metadata) next to
// a raw float64 payload, so weights stay readable from any language. Loading
// restores parameter values bit-for-bit.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "increcap/nn.hpp"

namespace icap::checkpoint {

struct ArrayEntry {
  std::string name;
  std::vector<int> shape;
  std::vector<double> data;
};

struct Checkpoint {
  // Free-form metadata: epoch, sigma, rng states, config_hash, ... Values may
  // contain spaces but not tabs or newlines.
  std::map<std::string, std::string> meta;
  std::vector<ArrayEntry> arrays;  // payload order = this order

  void put_array(const std::string& name, std::vector<int> shape,
                 std::vector<double> data);
  const ArrayEntry& at(const std::string& name) const;
  bool has(const std::string& name) const;

  // Snapshot / restore a parameter map. Restore requires the exact same
  // names and shapes (prefix included) and overwrites values in place.
  void put_params(const std::string& prefix, const nn::ParamMap& params);
  void restore_params(const std::string& prefix, const nn::ParamMap& params) const;

  int meta_int(const std::string& key) const;
  double meta_double(const std::string& key) const;
  void set_meta_int(const std::string& key, long long v);
  void set_meta_double(const std::string& key, double v);
};

// Writes prefix + ".manifest" (text) and prefix + ".bin" (little-endian f64).
// The manifest records the config hash and payload byte count; load refuses
// truncated payloads.
void save_checkpoint(const std::string& prefix, const Checkpoint& cp);
Checkpoint load_checkpoint(const std::string& prefix);
bool checkpoint_exists(const std::string& prefix);

}  // namespace icap::checkpoint
