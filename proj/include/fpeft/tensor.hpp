#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

// The library is compiled once with 32-bit floats (production) and once with
// 64-bit floats (gradient-check builds). The precision is part of the inline
// namespace so both builds can be linked into one binary.
#ifdef FPEFT_REAL_DOUBLE
#define FPEFT_PRECISION_NS f64
#else
#define FPEFT_PRECISION_NS f32
#endif

namespace fpeft::inline FPEFT_PRECISION_NS {

#ifdef FPEFT_REAL_DOUBLE
using Real = double;
#else
using Real = float;
#endif

using Shape = std::vector<std::int64_t>;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor extents do not line up for an operation.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid model/training configuration (CLI exit code 2).
struct ConfigError : Error {
  using Error::Error;
};

// Missing, malformed or inconsistent data (CLI exit code 3).
struct DataError : Error {
  using Error::Error;
};

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array. Rank-0 tensors hold a single scalar.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0));
  Tensor(Shape shape, std::vector<Real> data);

  static Tensor scalar(Real v) { return Tensor(Shape{}, std::vector<Real>{v}); }
  static Tensor vector(std::initializer_list<Real> values);
  static Tensor matrix(std::int64_t rows, std::int64_t cols, std::initializer_list<Real> values);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  // Negative axes count from the back.
  std::int64_t dim(int axis) const;
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  std::span<Real> data() { return data_; }
  std::span<const Real> data() const { return data_; }
  Real* ptr() { return data_.data(); }
  const Real* ptr() const { return data_.data(); }

  Real& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  Real operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  Real item() const;
  Tensor reshaped(Shape shape) const;
  void fill(Real v);

 private:
  Shape shape_;
  std::vector<Real> data_;
};

// Exact element-wise equality, including shape.
bool bit_equal(const Tensor& a, const Tensor& b);

}  // namespace fpeft
