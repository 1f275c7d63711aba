#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "fpeft/autodiff.hpp"

namespace fpeft::inline FPEFT_PRECISION_NS {

struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
};

/// Named parameters in sorted-name order. Sorting makes hashing, counting and
/// serialization independent of insertion order.
class ParameterStore {
 public:
  using Map = std::map<std::string, Parameter>;

  Parameter& add(const std::string& name, Tensor value, bool trainable = true);
  void erase(const std::string& name);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  const Tensor& value(const std::string& name) const { return at(name).value; }

  std::size_t size() const { return params_.size(); }
  Map::iterator begin() { return params_.begin(); }
  Map::iterator end() { return params_.end(); }
  Map::const_iterator begin() const { return params_.begin(); }
  Map::const_iterator end() const { return params_.end(); }

  std::int64_t total_count() const;
  std::int64_t trainable_count() const;
  void set_all_trainable(bool flag);

 private:
  Map params_;
};

using Hash256 = std::array<std::uint8_t, 32>;

Hash256 sha256(const std::uint8_t* data, std::size_t n);
// SHA-256 over (name, shape, f32 values) of every parameter in name order.
Hash256 content_hash(const ParameterStore& store);
std::string to_hex(const Hash256& h);

bool bit_equal(const ParameterStore& a, const ParameterStore& b);

/// Binds store entries onto one tape on first use. Trainable entries become
/// gradient leaves, frozen ones constants.
class Binder {
 public:
  Binder(Tape& tape, const ParameterStore& store) : tape_(tape), store_(store) {}
  Var operator()(const std::string& name);
  bool has(const std::string& name) const { return store_.contains(name); }
  Tape& tape() { return tape_; }
  const ParameterStore& store() const { return store_; }

  // Gradients of every bound trainable parameter after backward(); entries
  // that received no gradient are zero-filled.
  void collect_grads(std::map<std::string, Tensor>& out) const;

 private:
  Tape& tape_;
  const ParameterStore& store_;
  std::unordered_map<std::string, Var> bound_;
};

using GradMap = std::map<std::string, Tensor>;

// Deterministic per-parameter initialisation: the stream depends only on
// (seed, name), so adding parameters never shifts existing ones.
std::mt19937_64 param_rng(std::uint64_t seed, const std::string& name);
Tensor xavier_uniform(const Shape& shape, std::mt19937_64& rng);
Tensor normal_init(const Shape& shape, double stddev, std::mt19937_64& rng);

}  // namespace fpeft
