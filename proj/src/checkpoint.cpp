#include "increcap/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace icap::checkpoint {

void Checkpoint::put_array(const std::string& name, std::vector<int> shape,
                           std::vector<double> data) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  if (n != data.size())
    throw std::invalid_argument("checkpoint: shape/data mismatch for " + name);
  for (const auto& a : arrays)
    if (a.name == name)
      throw std::invalid_argument("checkpoint: duplicate array " + name);
  arrays.push_back({name, std::move(shape), std::move(data)});
}

const ArrayEntry& Checkpoint::at(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return a;
  throw std::out_of_range("checkpoint: no array named " + name);
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return true;
  return false;
}

void Checkpoint::put_params(const std::string& prefix, const nn::ParamMap& params) {
  for (const auto& [name, t] : params.entries())
    put_array(prefix + name, t.shape(), t.data());
}

void Checkpoint::restore_params(const std::string& prefix,
                                const nn::ParamMap& params) const {
  for (const auto& [name, t] : params.entries()) {
    const ArrayEntry& a = at(prefix + name);
    if (a.shape != t.shape())
      throw std::runtime_error("checkpoint: shape mismatch for " + prefix + name);
    Tensor mut = t;  // shares the node; writes land in the live parameter
    mut.data() = a.data;
  }
}

int Checkpoint::meta_int(const std::string& key) const {
  const auto it = meta.find(key);
  if (it == meta.end()) throw std::out_of_range("checkpoint: no meta key " + key);
  return std::stoi(it->second);
}

double Checkpoint::meta_double(const std::string& key) const {
  const auto it = meta.find(key);
  if (it == meta.end()) throw std::out_of_range("checkpoint: no meta key " + key);
  return std::stod(it->second);
}

void Checkpoint::set_meta_int(const std::string& key, long long v) {
  meta[key] = std::to_string(v);
}

void Checkpoint::set_meta_double(const std::string& key, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  meta[key] = buf;
}

void save_checkpoint(const std::string& prefix, const Checkpoint& cp) {
  std::size_t total = 0;
  for (const auto& a : cp.arrays) total += a.data.size();

  std::ofstream man(prefix + ".manifest");
  if (!man) throw std::runtime_error("checkpoint: cannot write " + prefix + ".manifest");
  man << "increcap-checkpoint 1\n";
  man << "payload_doubles " << total << "\n";
  for (const auto& [k, v] : cp.meta) {
    if (v.find('\t') != std::string::npos || v.find('\n') != std::string::npos)
      throw std::invalid_argument("checkpoint: meta value contains tab/newline: " + k);
    man << "meta " << k << "\t" << v << "\n";
  }
  for (const auto& a : cp.arrays) {
    man << "array " << a.name << " f64 " << a.shape.size();
    for (int d : a.shape) man << " " << d;
    man << "\n";
  }
  if (!man) throw std::runtime_error("checkpoint: manifest write failed");

  std::ofstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("checkpoint: cannot write " + prefix + ".bin");
  for (const auto& a : cp.arrays)
    bin.write(reinterpret_cast<const char*>(a.data.data()),
              static_cast<std::streamsize>(a.data.size() * sizeof(double)));
  if (!bin) throw std::runtime_error("checkpoint: payload write failed");
}

Checkpoint load_checkpoint(const std::string& prefix) {
  std::ifstream man(prefix + ".manifest");
  if (!man) throw std::runtime_error("checkpoint: cannot open " + prefix + ".manifest");

  Checkpoint cp;
  std::string line;
  std::size_t declared = 0;
  bool saw_header = false;
  while (std::getline(man, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "increcap-checkpoint") {
      saw_header = true;
    } else if (tag == "payload_doubles") {
      ss >> declared;
    } else if (tag == "meta") {
      std::string key;
      ss >> key;
      std::string value;
      const auto t = line.find('\t');
      if (t != std::string::npos) value = line.substr(t + 1);
      cp.meta[key] = value;
    } else if (tag == "array") {
      std::string name, dtype;
      std::size_t nd = 0;
      ss >> name >> dtype >> nd;
      if (dtype != "f64")
        throw std::runtime_error("checkpoint: unsupported dtype " + dtype);
      std::vector<int> shape(nd);
      std::size_t n = 1;
      for (auto& d : shape) {
        if (!(ss >> d) || d < 0)
          throw std::runtime_error("checkpoint: bad shape for " + name);
        n *= static_cast<std::size_t>(d);
      }
      cp.arrays.push_back({name, std::move(shape), std::vector<double>(n)});
    } else {
      throw std::runtime_error("checkpoint: unknown manifest tag " + tag);
    }
  }
  if (!saw_header) throw std::runtime_error("checkpoint: missing header in " + prefix);

  std::size_t total = 0;
  for (const auto& a : cp.arrays) total += a.data.size();
  if (total != declared)
    throw std::runtime_error("checkpoint: manifest payload count mismatch");

  std::ifstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("checkpoint: cannot open " + prefix + ".bin");
  for (auto& a : cp.arrays) {
    bin.read(reinterpret_cast<char*>(a.data.data()),
             static_cast<std::streamsize>(a.data.size() * sizeof(double)));
    if (bin.gcount() != static_cast<std::streamsize>(a.data.size() * sizeof(double)))
      throw std::runtime_error("checkpoint: truncated payload at " + a.name);
  }
  return cp;
}

bool checkpoint_exists(const std::string& prefix) {
  std::ifstream man(prefix + ".manifest");
  return static_cast<bool>(man);
}

}  // namespace icap::checkpoint
