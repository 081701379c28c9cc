#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace crcnn {

// Error taxonomy mirrors the CLI exit codes: DataError -> 2, DivergenceError -> 3.
// ShapeError is a DataError because mismatched tensors almost always trace back
// to malformed or misaligned inputs.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : DataError {
  using DataError::DataError;
};

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Dims4 {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  bool operator==(const Dims4&) const = default;

  std::size_t count() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

/// Dense rank-4 array in row-major (n, c, h, w) order. float for training and
/// inference, double for gradient checking.
template <class T>
struct TensorT {
  Dims4 dims;
  std::vector<T> data;

  TensorT() = default;

  TensorT(int n, int c, int h, int w)
      : dims{n, c, h, w}, data(dims.count(), T(0)) {
    if (n < 1 || c < 1 || h < 1 || w < 1)
      throw ShapeError("tensor dims must all be >= 1, got " + dims.str());
  }

  explicit TensorT(Dims4 d) : TensorT(d.n, d.c, d.h, d.w) {}

  int n() const { return dims.n; }
  int c() const { return dims.c; }
  int h() const { return dims.h; }
  int w() const { return dims.w; }
  std::size_t size() const { return data.size(); }

  T& at(int n, int c, int y, int x) {
    return data[((static_cast<std::size_t>(n) * dims.c + c) * dims.h + y) * dims.w + x];
  }
  const T& at(int n, int c, int y, int x) const {
    return data[((static_cast<std::size_t>(n) * dims.c + c) * dims.h + y) * dims.w + x];
  }

  T* plane(int n, int c) {
    return data.data() + (static_cast<std::size_t>(n) * dims.c + c) * dims.h * dims.w;
  }
  const T* plane(int n, int c) const {
    return data.data() + (static_cast<std::size_t>(n) * dims.c + c) * dims.h * dims.w;
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  static TensorT zeros_like(const TensorT& other) { return TensorT(other.dims); }

  bool operator==(const TensorT&) const = default;
};

using Tensor4 = TensorT<float>;
using Tensor4d = TensorT<double>;

template <class T>
void require_same_dims(const TensorT<T>& a, const TensorT<T>& b, const char* what) {
  if (a.dims != b.dims)
    throw ShapeError(std::string(what) + ": dims " + a.dims.str() + " vs " + b.dims.str());
}

template <class T, class U>
TensorT<T> tensor_cast(const TensorT<U>& src) {
  TensorT<T> out(src.dims);
  for (std::size_t i = 0; i < src.size(); ++i) out.data[i] = static_cast<T>(src.data[i]);
  return out;
}

}  // namespace crcnn
