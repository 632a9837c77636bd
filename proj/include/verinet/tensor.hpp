#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace verinet {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense row-major tensor of doubles, up to 4 axes (N x C x H x W for images).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(count(shape_), 0.0) {
    if (shape_.size() > 4) throw ShapeError("tensor rank > 4");
  }

  Tensor(std::vector<std::size_t> shape, std::vector<double> values)
      : shape_(std::move(shape)), data_(std::move(values)) {
    if (shape_.size() > 4) throw ShapeError("tensor rank > 4");
    if (data_.size() != count(shape_))
      throw ShapeError("value count does not match shape");
  }

  static Tensor zeros(std::vector<std::size_t> shape) {
    return Tensor(std::move(shape));
  }

  static Tensor full(std::vector<std::size_t> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor vector(std::vector<double> values) {
    std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at2(std::size_t i, std::size_t j) {
    return data_[i * shape_[1] + j];
  }
  double at2(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }
  double& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  Tensor reshaped(std::vector<std::size_t> shape) const {
    if (count(shape) != data_.size())
      throw ShapeError("reshape changes element count");
    return Tensor(std::move(shape), data_);
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void check_finite(const char* where) const {
    if (!all_finite())
      throw NumericError(std::string("non-finite value in ") + where);
  }

  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

inline std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

namespace detail {
inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename F>
Tensor map(const Tensor& a, F f, const char* op) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  out.check_finite(op);
  return out;
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, F f, const char* op) {
  // scalar broadcast: a 1-element operand combines with every element
  if (a.size() == 1 && b.size() != 1) {
    Tensor out(b.shape());
    for (std::size_t i = 0; i < b.size(); ++i) out[i] = f(a[0], b[i]);
    out.check_finite(op);
    return out;
  }
  if (b.size() == 1 && a.size() != 1) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[0]);
    out.check_finite(op);
    return out;
  }
  require_same_shape(a, b, op);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  out.check_finite(op);
  return out;
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::zip(a, b, [](double x, double y) { return x + y; }, "add");
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::zip(a, b, [](double x, double y) { return x - y; }, "sub");
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::zip(a, b, [](double x, double y) { return x * y; }, "mul");
}
inline Tensor maximum(const Tensor& a, const Tensor& b) {
  return detail::zip(a, b, [](double x, double y) { return std::max(x, y); },
                     "max");
}
inline Tensor minimum(const Tensor& a, const Tensor& b) {
  return detail::zip(a, b, [](double x, double y) { return std::min(x, y); },
                     "min");
}
inline Tensor abs(const Tensor& a) {
  return detail::map(a, [](double x) { return std::fabs(x); }, "abs");
}
inline Tensor relu(const Tensor& a) {
  return detail::map(a, [](double x) { return x > 0.0 ? x : 0.0; }, "relu");
}
inline Tensor sigmoid(const Tensor& a) {
  return detail::map(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                     "sigmoid");
}
inline Tensor tanh(const Tensor& a) {
  return detail::map(a, [](double x) { return std::tanh(x); }, "tanh");
}
inline double softplus_scalar(double x) {
  // overflow-safe: softplus(x) = max(x,0) + log1p(exp(-|x|))
  return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}
inline Tensor softplus(const Tensor& a) {
  return detail::map(a, softplus_scalar, "softplus");
}
inline Tensor exp(const Tensor& a) {
  return detail::map(a, [](double x) { return std::exp(x); }, "exp");
}
inline Tensor log(const Tensor& a) {
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] <= 0.0) throw NumericError("log of non-positive value");
  return detail::map(a, [](double x) { return std::log(x); }, "log");
}
inline Tensor scale(const Tensor& a, double s) {
  return detail::map(a, [s](double x) { return s * x; }, "scale");
}
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::map(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                     "clamp");
}

inline double sum(const Tensor& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i];
  return s;
}
inline double mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean of empty tensor");
  return sum(a) / static_cast<double>(a.size());
}
inline double max_abs(const Tensor& a) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i]));
  return m;
}
inline double linf_distance(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "linf_distance");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}
inline std::size_t argmax(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("argmax of empty tensor");
  std::size_t best = 0;
  for (std::size_t i = 1; i < a.size(); ++i)
    if (a[i] > a[best]) best = i;
  return best;
}

// Standard matrix product; dot products accumulate left-to-right in k so
// results are bitwise reproducible.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul requires 2-axis operands");
  std::size_t m = a.extent(0), k = a.extent(1);
  std::size_t k2 = b.extent(0), n = b.extent(1);
  if (k != k2)
    throw ShapeError("matmul inner extent mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  Tensor out({m, n});
  const double* ap = a.data();
  const double* bp = b.data();
  double* op = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = op + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      double av = ap[i * k + p];
      const double* brow = bp + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  out.check_finite("matmul");
  return out;
}

// a [m x k] times b^T where b is [n x k]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul_nt requires 2-axis operands");
  std::size_t m = a.extent(0), k = a.extent(1);
  std::size_t n = b.extent(0);
  if (k != b.extent(1))
    throw ShapeError("matmul_nt inner extent mismatch");
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      out[i * n + j] = s;
    }
  }
  out.check_finite("matmul_nt");
  return out;
}

// a^T [k x m]^T times b [k x n] -> [m x n]
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul_tn requires 2-axis operands");
  std::size_t k = a.extent(0), m = a.extent(1);
  std::size_t n = b.extent(1);
  if (k != b.extent(0)) throw ShapeError("matmul_tn inner extent mismatch");
  Tensor out({m, n});
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a.data() + p * m;
    const double* brow = b.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      double av = arow[i];
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  out.check_finite("matmul_tn");
  return out;
}

inline std::vector<std::size_t> conv2d_output_shape(
    const std::vector<std::size_t>& x, const std::vector<std::size_t>& w,
    std::size_t stride, std::size_t padding) {
  if (x.size() != 4 || w.size() != 4)
    throw ShapeError("conv2d requires 4-axis input and kernel");
  if (x[1] != w[1]) throw ShapeError("conv2d channel mismatch");
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  std::size_t hin = x[2] + 2 * padding, win = x[3] + 2 * padding;
  if (hin < w[2] || win < w[3]) throw ShapeError("conv2d kernel larger than input");
  std::size_t ho = (hin - w[2]) / stride + 1;
  std::size_t wo = (win - w[3]) / stride + 1;
  if (ho == 0 || wo == 0) throw ShapeError("conv2d empty output");
  return {x[0], w[0], ho, wo};
}

// Cross-correlation (no kernel flip) with zero padding; per-output-channel bias.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
                     std::size_t stride, std::size_t padding) {
  auto os = conv2d_output_shape(x.shape(), w.shape(), stride, padding);
  if (b.size() != w.extent(0))
    throw ShapeError("conv2d bias length must equal output channels");
  std::size_t nb = os[0], ko = os[1], ho = os[2], wo = os[3];
  std::size_t ci = x.extent(1), hi = x.extent(2), wi = x.extent(3);
  std::size_t kh = w.extent(2), kw = w.extent(3);
  Tensor out(os);
  long pad = static_cast<long>(padding);
  for (std::size_t n = 0; n < nb; ++n)
    for (std::size_t k = 0; k < ko; ++k)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double s = b[k];
          long y0 = static_cast<long>(oy * stride) - pad;
          long x0 = static_cast<long>(ox * stride) - pad;
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t fy = 0; fy < kh; ++fy) {
              long iy = y0 + static_cast<long>(fy);
              if (iy < 0 || iy >= static_cast<long>(hi)) continue;
              for (std::size_t fx = 0; fx < kw; ++fx) {
                long ix = x0 + static_cast<long>(fx);
                if (ix < 0 || ix >= static_cast<long>(wi)) continue;
                s += x.at4(n, c, static_cast<std::size_t>(iy),
                           static_cast<std::size_t>(ix)) *
                     w.at4(k, c, fy, fx);
              }
            }
          out.at4(n, k, oy, ox) = s;
        }
  out.check_finite("conv2d");
  return out;
}

// Seeded RNG with a fully specified sample stream (mt19937_64 is defined
// bit-exactly by the standard; double conversions below avoid
// std::uniform_real_distribution, whose output is implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  double uniform() {  // [0, 1)
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::size_t uniform_index(std::size_t n) {
    // modulo bias is irrelevant at the sizes used here
    return static_cast<std::size_t>(gen_() % n);
  }

  double normal() {
    // Box-Muller, one value per call for a reproducible stream
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double truncated_normal(double stddev, double cap_sigmas = 2.0) {
    for (;;) {
      double v = normal();
      if (std::fabs(v) <= cap_sigmas) return v * stddev;
    }
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i)
      std::swap(v[i - 1], v[uniform_index(i)]);
  }

  std::string save_state() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }

  void load_state(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
    if (!is) throw std::runtime_error("bad rng state string");
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace verinet
