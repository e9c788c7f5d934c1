#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace scmil {

// Shape violations (mismatched operands, bad axes, empty bags).
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf escaping a forward op, or a non-finite loss.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dense row-major fp64 tensor. Rank 0 (scalar), 1 and 2 are the only ranks
// the rest of the code produces.
struct Tensor {
  std::vector<size_t> shape;
  std::vector<double> values;

  Tensor() = default;
  explicit Tensor(std::vector<size_t> s) : shape(std::move(s)) {
    values.assign(numel_of(shape), 0.0);
  }
  Tensor(std::vector<size_t> s, std::vector<double> v)
      : shape(std::move(s)), values(std::move(v)) {
    if (values.size() != numel_of(shape)) {
      throw ShapeError("tensor: value count " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
  }

  static size_t numel_of(const std::vector<size_t>& s) {
    size_t n = 1;
    for (size_t e : s) n *= e;
    return n;
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor zeros(std::vector<size_t> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<size_t> s, double v) {
    Tensor t(std::move(s));
    for (double& x : t.values) x = v;
    return t;
  }
  static Tensor vec(std::vector<double> v) {
    size_t n = v.size();
    return Tensor({n}, std::move(v));
  }

  size_t rank() const { return shape.size(); }
  size_t numel() const { return values.size(); }
  bool is_scalar() const { return shape.empty(); }

  size_t rows() const { return shape.at(0); }
  size_t cols() const { return shape.at(1); }

  double& at(size_t i) { return values[i]; }
  double at(size_t i) const { return values[i]; }
  double& at(size_t i, size_t j) { return values[i * shape[1] + j]; }
  double at(size_t i, size_t j) const { return values[i * shape[1] + j]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : values) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  static std::string shape_str(const std::vector<size_t>& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
      if (i) out += "x";
      out += std::to_string(s[i]);
    }
    out += ")";
    return out;
  }
  std::string shape_str() const { return shape_str(shape); }
};

}  // namespace scmil
