#include "fpeft/params.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstring>

#include "fpeft/binio.hpp"

namespace fpeft::inline FPEFT_PRECISION_NS {

Parameter& ParameterStore::add(const std::string& name, Tensor value, bool trainable) {
  auto [it, inserted] = params_.try_emplace(name, Parameter{name, std::move(value), trainable});
  if (!inserted) throw ConfigError("duplicate parameter " + name);
  return it->second;
}

void ParameterStore::erase(const std::string& name) { params_.erase(name); }

Parameter& ParameterStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter " + name);
  return it->second;
}

const Parameter& ParameterStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter " + name);
  return it->second;
}

std::int64_t ParameterStore::total_count() const {
  std::int64_t n = 0;
  for (const auto& [_, p] : params_) n += p.value.size();
  return n;
}

std::int64_t ParameterStore::trainable_count() const {
  std::int64_t n = 0;
  for (const auto& [_, p] : params_)
    if (p.trainable) n += p.value.size();
  return n;
}

void ParameterStore::set_all_trainable(bool flag) {
  for (auto& [_, p] : params_) p.trainable = flag;
}

Hash256 sha256(const std::uint8_t* data, std::size_t n) {
  Hash256 h{};
  unsigned int len = 0;
  if (EVP_Digest(data, n, h.data(), &len, EVP_sha256(), nullptr) != 1 || len != h.size())
    throw Error("SHA-256 digest failed");
  return h;
}

Hash256 content_hash(const ParameterStore& store) {
  ByteWriter w;
  for (const auto& [name, p] : store) {
    w.str(name);
    write_tensor(w, p.value);
  }
  return sha256(w.data().data(), w.size());
}

std::string to_hex(const Hash256& h) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (auto b : h) {
    s += digits[b >> 4];
    s += digits[b & 15];
  }
  return s;
}

bool bit_equal(const ParameterStore& a, const ParameterStore& b) {
  if (a.size() != b.size()) return false;
  auto ia = a.begin();
  for (auto ib = b.begin(); ib != b.end(); ++ia, ++ib) {
    if (ia->first != ib->first || !bit_equal(ia->second.value, ib->second.value)) return false;
  }
  return true;
}

Var Binder::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const Parameter& p = store_.at(name);
  Var v = tape_.leaf_ref(p.value, p.trainable);
  bound_.emplace(name, v);
  return v;
}

void Binder::collect_grads(std::map<std::string, Tensor>& out) const {
  for (const auto& [name, v] : bound_) {
    if (!v.requires_grad()) continue;
    const Tensor* g = tape_.grad(v);
    out[name] = g ? *g : Tensor(v.shape());
  }
}

std::mt19937_64 param_rng(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  return std::mt19937_64(seq);
}

Tensor xavier_uniform(const Shape& shape, std::mt19937_64& rng) {
  if (shape.empty()) throw ShapeError("xavier_uniform needs rank >= 1");
  const double fan_out = static_cast<double>(shape.back());
  const double fan_in = shape.size() >= 2 ? static_cast<double>(shape[shape.size() - 2]) : fan_out;
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor t(shape);
  for (auto& x : t.data()) x = static_cast<Real>(u(rng));
  return t;
}

Tensor normal_init(const Shape& shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  Tensor t(shape);
  for (auto& x : t.data()) x = static_cast<Real>(n(rng));
  return t;
}

}  // namespace fpeft
