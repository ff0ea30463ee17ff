#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dsspn {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

// Stringify a sequence of streamable tokens.
template <typename... Args>
std::string str_cat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

// Extents of a (batch, channel, height, width) tensor.
struct Shape {
  std::size_t n{0};
  std::size_t c{0};
  std::size_t h{0};
  std::size_t w{0};

  constexpr std::size_t size() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  constexpr std::size_t sample() const { return c * h * w; }

  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const { return str_cat("(", n, ",", c, ",", h, ",", w, ")"); }
};

// Dense row-major 4-D array. A plain value: copying copies the data.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_{shape}, data_(shape.size(), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_{shape}, data_{std::move(data)} {
    if (data_.size() != shape_.size()) {
      throw ShapeError(str_cat("tensor data length ", data_.size(), " does not match shape ",
                               shape_.str()));
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{1, 1, 1, 1}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[offset(n, c, y, x)];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[offset(n, c, y, x)];
  }

  // Contiguous view of one sample.
  std::span<T> sample(std::size_t n) { return {data_.data() + n * shape_.sample(), shape_.sample()}; }
  std::span<const T> sample(std::size_t n) const {
    return {data_.data() + n * shape_.sample(), shape_.sample()};
  }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on a non-scalar tensor " + shape_.str());
    return data_[0];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_{};
  std::vector<T> data_;
};

// Integer label map; -1 marks ignored pixels.
struct LabelMap {
  static constexpr int kIgnore = -1;

  std::size_t height{0};
  std::size_t width{0};
  std::vector<int> values;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, int fill = kIgnore) : height{h}, width{w}, values(h * w, fill) {}

  int& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  int at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  std::size_t size() const { return values.size(); }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

}  // namespace dsspn
