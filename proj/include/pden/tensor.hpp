#ifndef PDEN_TENSOR_HPP
#define PDEN_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pden {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an operand lies outside an operation's mathematical domain
/// (log of a non-positive value, division by zero, degenerate norms).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major f64 array with value semantics.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(numel(shape_), fill) {
    check_dims();
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (numel(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  bool is_scalar() const { return data_.size() == 1; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double item() const {
    if (data_.size() != 1) {
      throw ShapeError("item() on non-scalar tensor " + to_string(shape_));
    }
    return data_[0];
  }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  /// Same data viewed with a new shape of equal element count.
  Tensor reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (auto d : shape_) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive");
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

/// Rows [begin, end) along the leading axis.
inline Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  if (t.rank() == 0 || begin >= end || end > t.dim(0)) {
    throw ShapeError("slice_rows out of range");
  }
  const std::size_t stride = t.size() / t.dim(0);
  Shape shape = t.shape();
  shape[0] = end - begin;
  auto first = t.values().begin() + static_cast<std::ptrdiff_t>(begin * stride);
  return Tensor(std::move(shape),
                std::vector<double>(first, first + static_cast<std::ptrdiff_t>((end - begin) * stride)));
}

/// Gathers leading-axis rows by index.
inline Tensor gather_rows(const Tensor& t, std::span<const std::size_t> idx) {
  if (idx.empty()) throw ShapeError("gather_rows with no indices");
  const std::size_t stride = t.size() / t.dim(0);
  Shape shape = t.shape();
  shape[0] = idx.size();
  std::vector<double> out;
  out.reserve(idx.size() * stride);
  for (auto i : idx) {
    if (i >= t.dim(0)) throw ShapeError("gather_rows index out of range");
    auto first = t.values().begin() + static_cast<std::ptrdiff_t>(i * stride);
    out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(stride));
  }
  return Tensor(std::move(shape), std::move(out));
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() ||
      !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    throw ShapeError("concat_rows shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<double> out(a.values());
  out.insert(out.end(), b.values().begin(), b.values().end());
  return Tensor(std::move(shape), std::move(out));
}

}  // namespace pden

#endif  // PDEN_TENSOR_HPP
