#include "ngt/numeric.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>

namespace ngt {

std::string_view backend_name(Backend backend) {
  return backend == Backend::ExactRational ? "rational" : "float";
}

Backend parse_backend(std::string_view name) {
  if (name == "rational") return Backend::ExactRational;
  if (name == "float") return Backend::Float64;
  throw std::invalid_argument("unknown backend '" + std::string(name) + "' (expected rational or float)");
}

std::string format_rational(const Rational& value) {
  // mpq_class keeps values canonical as long as every producer calls
  // canonicalize(); we never construct a non-canonical one.
  return value.get_num().get_str() + "/" + value.get_den().get_str();
}

namespace {

bool is_integer_literal(std::string_view text) {
  if (!text.empty() && (text.front() == '-' || text.front() == '+')) text.remove_prefix(1);
  return !text.empty() && std::all_of(text.begin(), text.end(), [](char c) { return c >= '0' && c <= '9'; });
}

}  // namespace

Rational parse_rational(std::string_view text) {
  const auto fail = [&]() -> Rational {
    throw std::invalid_argument("malformed rational '" + std::string(text) + "'");
  };
  if (const auto slash = text.find('/'); slash != std::string_view::npos) {
    const auto num = text.substr(0, slash);
    const auto den = text.substr(slash + 1);
    if (!is_integer_literal(num) || !is_integer_literal(den) || den.front() == '-' || den.front() == '+') return fail();
    Rational out;
    out.get_num().set_str(std::string(num.front() == '+' ? num.substr(1) : num), 10);
    out.get_den().set_str(std::string(den), 10);
    if (sgn(out.get_den()) == 0) throw std::invalid_argument("rational with zero denominator '" + std::string(text) + "'");
    out.canonicalize();
    return out;
  }
  if (const auto dot_pos = text.find('.'); dot_pos != std::string_view::npos) {
    auto int_part = text.substr(0, dot_pos);
    const auto frac_part = text.substr(dot_pos + 1);
    bool negative = false;
    if (!int_part.empty() && (int_part.front() == '-' || int_part.front() == '+')) {
      negative = int_part.front() == '-';
      int_part.remove_prefix(1);
    }
    if (int_part.empty()) int_part = "0";
    if (!is_integer_literal(int_part) || (!frac_part.empty() && !is_integer_literal(frac_part)) ||
        (!frac_part.empty() && (frac_part.front() == '-' || frac_part.front() == '+')))
      return fail();
    mpz_class digits(std::string(int_part) + std::string(frac_part), 10);
    mpz_class den;
    mpz_ui_pow_ui(den.get_mpz_t(), 10, frac_part.size());
    Rational out(digits, den);
    out.canonicalize();
    return negative ? Rational(-out) : out;
  }
  if (!is_integer_literal(text)) return fail();
  Rational out;
  out.get_num().set_str(std::string(text.front() == '+' ? text.substr(1) : text), 10);
  return out;
}

std::string format_double(double value) {
  if (std::isinf(value)) return value < 0 ? "-inf" : "inf";
  char buffer[64];
  const auto [end, ec] = std::to_chars(buffer, buffer + sizeof buffer, value);
  if (ec != std::errc()) throw std::runtime_error("cannot format double");
  return std::string(buffer, end);
}

double parse_double(std::string_view text) {
  if (text == "-inf") return -std::numeric_limits<double>::infinity();
  if (text == "inf") return std::numeric_limits<double>::infinity();
  double value = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || end != text.data() + text.size())
    throw std::invalid_argument("malformed number '" + std::string(text) + "'");
  return value;
}

std::string format_scalar(const Rational& value) { return format_rational(value); }
std::string format_scalar(double value) { return format_double(value); }

template <>
Rational parse_scalar<Rational>(std::string_view text) {
  return parse_rational(text);
}

template <>
double parse_scalar<double>(std::string_view text) {
  return parse_double(text);
}

double log_rational(const Rational& value) {
  if (sgn(value) < 0) throw std::domain_error("log of a negative rational");
  if (sgn(value) == 0) return -std::numeric_limits<double>::infinity();
  long num_exp = 0;
  long den_exp = 0;
  const double num = mpz_get_d_2exp(&num_exp, value.get_num_mpz_t());
  const double den = mpz_get_d_2exp(&den_exp, value.get_den_mpz_t());
  return std::log(num) - std::log(den) + static_cast<double>(num_exp - den_exp) * std::log(2.0);
}

double to_double(const Rational& value) { return value.get_d(); }

template <>
Rational from_rational<Rational>(const Rational& value) {
  return value;
}

template <>
double from_rational<double>(const Rational& value) {
  return value.get_d();
}

template <class T>
Mat<T>::Mat(std::size_t rows, std::size_t cols, std::vector<T> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols)
    throw DimensionError("matrix data has " + std::to_string(data_.size()) + " entries, expected " +
                         std::to_string(rows) + "x" + std::to_string(cols));
}

template <class T>
Mat<T> Mat<T>::identity(std::size_t n) {
  Mat out(n, n);
  for (std::size_t i = 0; i < n; ++i) out(i, i) = T(1);
  return out;
}

template <class T>
Vec<T> Mat<T>::apply(std::span<const T> x) const {
  if (x.size() != cols_)
    throw DimensionError("matrix with " + std::to_string(cols_) + " columns applied to vector of size " +
                         std::to_string(x.size()));
  std::vector<std::size_t> support;
  support.reserve(x.size());
  for (std::size_t c = 0; c < x.size(); ++c)
    if (!is_zero(x[c])) support.push_back(c);
  Vec<T> out(rows_, T(0));
  for (std::size_t r = 0; r < rows_; ++r) {
    const T* row_data = data_.data() + r * cols_;
    T& acc = out[r];
    for (const auto c : support) {
      if (is_zero(row_data[c])) continue;
      acc += row_data[c] * x[c];
    }
  }
  return out;
}

template <class T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul of " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " by " +
                         std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  Mat<T> out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      if (is_zero(a(i, k))) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) {
        if (is_zero(b(k, j))) continue;
        out(i, j) += a(i, k) * b(k, j);
      }
    }
  }
  return out;
}

namespace {

template <class T>
void require_same_size(std::span<const T> a, std::span<const T> b, const char* what) {
  if (a.size() != b.size())
    throw DimensionError(std::string(what) + ": sizes " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()) + " differ");
}

}  // namespace

template <class T>
Vec<T> add(std::span<const T> a, std::span<const T> b) {
  require_same_size(a, b, "add");
  Vec<T> out(a.begin(), a.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

template <class T>
Vec<T> scale(std::span<const T> x, const T& factor) {
  Vec<T> out(x.begin(), x.end());
  for (auto& v : out) v *= factor;
  return out;
}

template <class T>
T dot(std::span<const T> a, std::span<const T> b) {
  require_same_size(a, b, "dot");
  T acc(0);
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!is_zero(a[i]) && !is_zero(b[i])) acc += a[i] * b[i];
  return acc;
}

template <class T>
Vec<T> relu(std::span<const T> x) {
  Vec<T> out(x.begin(), x.end());
  for (auto& v : out)
    if (v < 0) v = T(0);
  return out;
}

template <class T>
T sum(std::span<const T> x) {
  T acc(0);
  for (const auto& v : x) acc += v;
  return acc;
}

template <class T>
Vec<T> hardmax(std::span<const T> x, const T& tie_eps) {
  if (x.empty()) throw std::invalid_argument("hardmax of an empty vector");
  if (tie_eps < 0) throw std::invalid_argument("hardmax tie tolerance must be non-negative");
  if constexpr (ScalarTraits<T>::kExact) {
    if (!is_zero(tie_eps)) throw std::invalid_argument("hardmax tie tolerance must be zero on the rational backend");
  }
  const T& best = *std::max_element(x.begin(), x.end());
  Vec<T> out(x.size(), T(0));
  std::size_t ties = 0;
  for (std::size_t d = 0; d < x.size(); ++d)
    if (x[d] >= best - tie_eps) ++ties;
  const T weight = T(1) / T(static_cast<long>(ties));
  for (std::size_t d = 0; d < x.size(); ++d)
    if (x[d] >= best - tie_eps) out[d] = weight;
  return out;
}

template <class T>
Vec<T> sparsemax(std::span<const T> x) {
  if (x.empty()) throw std::invalid_argument("sparsemax of an empty vector");
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] > x[b]; });

  // k(x) = max{k : 1 + k x_(k) > sum_{j<=k} x_(j)}; k = 1 always qualifies.
  T cumulative(0);
  T support_sum(0);
  std::size_t support = 0;
  for (std::size_t k = 1; k <= order.size(); ++k) {
    const T& value = x[order[k - 1]];
    cumulative += value;
    if (T(1) + T(static_cast<long>(k)) * value > cumulative) {
      support = k;
      support_sum = cumulative;
    }
  }
  const T tau = (support_sum - T(1)) / T(static_cast<long>(support));
  Vec<T> out(x.size(), T(0));
  for (std::size_t d = 0; d < x.size(); ++d)
    if (x[d] > tau) out[d] = x[d] - tau;
  return out;
}

Vec<double> softmax(std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("softmax of an empty vector");
  const double best = *std::max_element(x.begin(), x.end());
  if (std::isinf(best) && best < 0) throw std::invalid_argument("softmax with all logits -inf");
  Vec<double> out(x.size());
  double total = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - best);
    total += out[i];
  }
  for (auto& v : out) v /= total;
  return out;
}

LogRational LogRational::log_of(const Rational& probability) {
  if (sgn(probability) < 0) throw std::domain_error("log of a negative probability");
  LogRational out;
  out.probability_ = probability;
  return out;
}

double LogRational::to_double() const { return log_rational(probability_); }

LogRational operator+(const LogRational& a, const LogRational& b) {
  return LogRational::log_of(a.probability_ * b.probability_);
}

LogRational LogRational::times(unsigned long k) const {
  if (k == 0) return LogRational::log_of(Rational(1));
  Rational out;
  mpz_pow_ui(out.get_num_mpz_t(), probability_.get_num_mpz_t(), k);
  mpz_pow_ui(out.get_den_mpz_t(), probability_.get_den_mpz_t(), k);
  return LogRational::log_of(out);
}

std::string format_log(const LogRational& value) {
  return value.is_neg_inf() ? "neg_inf" : "log:" + format_rational(value.probability());
}

LogRational parse_log(std::string_view text) {
  if (text == "neg_inf") return LogRational::neg_inf();
  if (!text.starts_with("log:")) throw std::invalid_argument("malformed log-domain entry '" + std::string(text) + "'");
  const auto p = parse_rational(text.substr(4));
  if (sgn(p) <= 0) throw std::invalid_argument("log-domain entry must carry a positive probability: '" + std::string(text) + "'");
  return LogRational::log_of(p);
}

Vec<Rational> softmax_logdomain(std::span<const LogRational> logits) {
  if (logits.empty()) throw std::invalid_argument("softmax of an empty vector");
  Rational total(0);
  for (const auto& l : logits) total += l.probability();
  if (sgn(total) == 0) throw std::invalid_argument("softmax with all logits -inf");
  Vec<Rational> out;
  out.reserve(logits.size());
  for (const auto& l : logits) out.emplace_back(l.probability() / total);
  return out;
}

#define NGT_INSTANTIATE(T)                                            \
  template class Mat<T>;                                              \
  template Mat<T> matmul<T>(const Mat<T>&, const Mat<T>&);            \
  template Vec<T> add<T>(std::span<const T>, std::span<const T>);     \
  template Vec<T> scale<T>(std::span<const T>, const T&);             \
  template T dot<T>(std::span<const T>, std::span<const T>);          \
  template Vec<T> relu<T>(std::span<const T>);                        \
  template T sum<T>(std::span<const T>);                              \
  template Vec<T> hardmax<T>(std::span<const T>, const T&);           \
  template Vec<T> sparsemax<T>(std::span<const T>);

NGT_INSTANTIATE(Rational)
NGT_INSTANTIATE(double)

#undef NGT_INSTANTIATE

template Mat<LogRational>::Mat(std::size_t, std::size_t, std::vector<LogRational>);

}  // namespace ngt
