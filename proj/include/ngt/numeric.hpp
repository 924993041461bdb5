// Scalar backends, dense vectors/matrices and the attention normalisers.
//
// Two scalar backends are supported: exact rationals (GMP mpq_class) and
// binary64. Everything that is templated on the scalar type is explicitly
// instantiated for exactly these two types in numeric.cpp.

#pragma once

#include <gmpxx.h>

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ngt {

using Rational = mpq_class;

enum class Backend { ExactRational, Float64 };

std::string_view backend_name(Backend backend);
Backend parse_backend(std::string_view name);

/// Thrown whenever two operands have incompatible shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <class T>
struct ScalarTraits;

template <>
struct ScalarTraits<Rational> {
  static constexpr bool kExact = true;
  static constexpr Backend kBackend = Backend::ExactRational;
};

template <>
struct ScalarTraits<double> {
  static constexpr bool kExact = false;
  static constexpr Backend kBackend = Backend::Float64;
};

// Canonical text forms: rationals as "num/den" in lowest terms, doubles as
// the shortest decimal that round-trips.
std::string format_rational(const Rational& value);
Rational parse_rational(std::string_view text);
std::string format_double(double value);
double parse_double(std::string_view text);

std::string format_scalar(const Rational& value);
std::string format_scalar(double value);

template <class T>
T parse_scalar(std::string_view text);

inline bool is_zero(const Rational& x) { return sgn(x) == 0; }
inline bool is_zero(double x) { return x == 0.0; }

/// Natural log of a positive rational, robust against huge numerators and
/// denominators that do not fit in a double.
double log_rational(const Rational& value);

double to_double(const Rational& value);
inline double to_double(double value) { return value; }

template <class T>
T from_rational(const Rational& value);

template <class T>
using Vec = std::vector<T>;

template <class T>
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols) {}
  Mat(std::size_t rows, std::size_t cols, std::vector<T> data);

  static Mat zeros(std::size_t rows, std::size_t cols) { return Mat(rows, cols); }
  static Mat identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * cols_, cols_);
  }

  /// Matrix-vector product. Zero entries of x are skipped, which matters for
  /// the mostly one-hot vectors the compiled models work with.
  Vec<T> apply(std::span<const T> x) const;

  friend bool operator==(const Mat& a, const Mat& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

/// Product a*b of two matrices.
template <class T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b);

template <class T>
Vec<T> add(std::span<const T> a, std::span<const T> b);

template <class T>
Vec<T> scale(std::span<const T> x, const T& factor);

template <class T>
T dot(std::span<const T> a, std::span<const T> b);

template <class T>
Vec<T> relu(std::span<const T> x);

template <class T>
T sum(std::span<const T> x);

/// hardmax(x)_d = 1/m on the (tolerance-widened) argmax set of size m.
/// tie_eps must be zero on the rational backend.
template <class T>
Vec<T> hardmax(std::span<const T> x, const T& tie_eps);

/// Euclidean projection onto the probability simplex (sort, then threshold).
template <class T>
Vec<T> sparsemax(std::span<const T> x);

/// Numerically stable softmax; binary64 only.
Vec<double> softmax(std::span<const double> x);

/// A log-probability carried by its linear-domain rational, so exp(log p)
/// never has to be evaluated. Probability zero represents -infinity.
class LogRational {
 public:
  LogRational() = default;

  static LogRational neg_inf() { return LogRational(); }
  static LogRational log_of(const Rational& probability);

  bool is_neg_inf() const { return is_zero(probability_); }
  const Rational& probability() const { return probability_; }
  double to_double() const;

  /// log p + log q, i.e. the product pq in the linear domain.
  friend LogRational operator+(const LogRational& a, const LogRational& b);

  /// k * log p for a non-negative integer k; 0 * (-inf) is 0.
  LogRational times(unsigned long k) const;

  friend bool operator==(const LogRational& a, const LogRational& b) {
    return a.probability_ == b.probability_;
  }

 private:
  Rational probability_{0};
};

std::string format_log(const LogRational& value);
LogRational parse_log(std::string_view text);

/// softmax(log p_1, ..., log p_k) = p_i / sum_j p_j, computed exactly.
Vec<Rational> softmax_logdomain(std::span<const LogRational> logits);

}  // namespace ngt
