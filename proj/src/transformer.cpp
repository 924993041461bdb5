#include "ngt/transformer.hpp"

#include <cmath>
#include <stdexcept>

namespace ngt {

namespace {

void require_dim(std::size_t actual, std::size_t expected, const char* what) {
  if (actual != expected)
    throw DimensionError(std::string(what) + ": expected dimension " + std::to_string(expected) + ", got " +
                         std::to_string(actual));
}

template <class T>
T abs_value(const T& x) {
  return x < 0 ? T(-x) : x;
}

template <class T>
T inverse_power_of_ten(std::size_t exponent) {
  if constexpr (ScalarTraits<T>::kExact) {
    mpz_class den;
    mpz_ui_pow_ui(den.get_mpz_t(), 10, exponent);
    return Rational(mpz_class(1), den);
  } else {
    return std::pow(10.0, -static_cast<double>(exponent));
  }
}

template <class T>
void check_affine(const AffineMap<T>& map, const char* what) {
  require_dim(map.bias.size(), map.out_dim(), what);
}

}  // namespace

// AffineMap / Mlp

template <class T>
AffineMap<T> AffineMap<T>::identity(std::size_t n) {
  return AffineMap{Mat<T>::identity(n), Vec<T>(n, T(0))};
}

template <class T>
AffineMap<T> AffineMap<T>::zero(std::size_t out, std::size_t in) {
  return AffineMap{Mat<T>::zeros(out, in), Vec<T>(out, T(0))};
}

template <class T>
AffineMap<T> AffineMap<T>::linear(Mat<T> matrix) {
  const auto rows = matrix.rows();
  return AffineMap{std::move(matrix), Vec<T>(rows, T(0))};
}

template <class T>
Vec<T> AffineMap<T>::apply(std::span<const T> x) const {
  auto y = matrix.apply(x);
  require_dim(bias.size(), y.size(), "affine bias");
  for (std::size_t i = 0; i < y.size(); ++i)
    if (!is_zero(bias[i])) y[i] += bias[i];
  return y;
}

template <class T>
AffineMap<T> compose(const AffineMap<T>& outer, const AffineMap<T>& inner) {
  require_dim(outer.in_dim(), inner.out_dim(), "affine composition");
  AffineMap<T> out{matmul(outer.matrix, inner.matrix), outer.matrix.apply(inner.bias)};
  for (std::size_t i = 0; i < out.bias.size(); ++i) out.bias[i] += outer.bias[i];
  return out;
}

template <class T>
Mlp<T> Mlp<T>::identity(std::size_t n) {
  return Mlp{{MlpLayer<T>{AffineMap<T>::identity(n), Activation::Identity}}};
}

template <class T>
void Mlp<T>::validate() const {
  if (layers.empty()) throw std::invalid_argument("MLP must have at least one layer");
  if (layers.back().activation != Activation::Identity)
    throw std::invalid_argument("the last MLP layer must be unactivated");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    check_affine(layers[i].affine, "MLP bias");
    if (i > 0) require_dim(layers[i].affine.in_dim(), layers[i - 1].affine.out_dim(), "MLP layer chaining");
  }
}

template <class T>
Vec<T> Mlp<T>::forward(std::span<const T> x) const {
  if (layers.empty()) throw std::invalid_argument("MLP must have at least one layer");
  Vec<T> current(x.begin(), x.end());
  for (const auto& layer : layers) {
    current = layer.affine.apply(current);
    if (layer.activation == Activation::Relu) current = relu<T>(current);
  }
  return current;
}

// Names

std::string_view scoring_name(Scoring s) {
  switch (s) {
    case Scoring::Dot: return "dot";
    case Scoring::NegAbsDot: return "neg_abs_dot";
    case Scoring::NegReluDot: return "neg_relu_dot";
  }
  return "?";
}

Scoring parse_scoring(std::string_view name) {
  for (const auto s : {Scoring::Dot, Scoring::NegAbsDot, Scoring::NegReluDot})
    if (scoring_name(s) == name) return s;
  throw std::invalid_argument("unknown scoring function '" + std::string(name) + "'");
}

std::string_view normalizer_name(Normalizer n) {
  switch (n) {
    case Normalizer::Hardmax: return "hardmax";
    case Normalizer::Sparsemax: return "sparsemax";
    case Normalizer::Softmax: return "softmax";
  }
  return "?";
}

Normalizer parse_normalizer(std::string_view name) {
  for (const auto n : {Normalizer::Hardmax, Normalizer::Sparsemax, Normalizer::Softmax})
    if (normalizer_name(n) == name) return n;
  throw std::invalid_argument("unknown normalizer '" + std::string(name) + "'");
}

std::string_view encoding_name(EncodingKind kind) {
  switch (kind) {
    case EncodingKind::SqrtMultiHead: return "sqrt_multihead";
    case EncodingKind::SqrtMultiLayer: return "sqrt_multilayer";
    case EncodingKind::DecimalScaled: return "decimal_scaled";
    case EncodingKind::LinearPosition: return "linear_position";
  }
  return "?";
}

EncodingKind parse_encoding(std::string_view name) {
  for (const auto k : {EncodingKind::SqrtMultiHead, EncodingKind::SqrtMultiLayer, EncodingKind::DecimalScaled,
                       EncodingKind::LinearPosition})
    if (encoding_name(k) == name) return k;
  throw std::invalid_argument("unknown static encoding '" + std::string(name) + "'");
}

template <class T>
T score(Scoring scoring, std::span<const T> q, std::span<const T> k) {
  const T d = dot<T>(q, k);
  switch (scoring) {
    case Scoring::Dot: return d;
    case Scoring::NegAbsDot: return T(-abs_value(d));
    case Scoring::NegReluDot: return d > 0 ? T(-d) : T(0);
  }
  throw std::logic_error("unreachable scoring");
}

// Static encodings

template <class T>
std::size_t StaticEncoding<T>::dim() const {
  const auto n = static_cast<std::size_t>(order);
  switch (kind) {
    case EncodingKind::SqrtMultiHead: return 2 * symbols + 2 * n;
    case EncodingKind::SqrtMultiLayer: return (n - 1) * symbols + 4;
    case EncodingKind::DecimalScaled: return symbols + 2;
    case EncodingKind::LinearPosition: return 2 * symbols + 2;
  }
  return 0;
}

template <class T>
Vec<T> StaticEncoding<T>::encode(std::size_t symbol, std::size_t position) const {
  if (symbol >= symbols) throw std::out_of_range("static encoding: symbol outside Sigma_bos");
  if (position < 1) throw std::out_of_range("static encoding: positions are 1-based");
  Vec<T> v(dim(), T(0));
  const auto n = static_cast<std::size_t>(order);
  const auto put_sqrt_pair = [&](std::size_t at, std::size_t t) {
    if constexpr (ScalarTraits<T>::kExact) {
      throw std::domain_error("irrational encodings (sqrt(1/t)) need the float backend");
    } else {
      const double inv = 1.0 / static_cast<double>(t);
      v[at] = std::sqrt(inv);
      v[at + 1] = std::sqrt(1.0 - inv);
    }
  };
  switch (kind) {
    case EncodingKind::SqrtMultiHead:
      v[symbol] = T(1);
      for (std::size_t k = 0; k < n; ++k) put_sqrt_pair(2 * symbols + 2 * k, position + k);
      break;
    case EncodingKind::SqrtMultiLayer:
      v[symbol] = T(1);
      put_sqrt_pair((n - 1) * symbols, position);
      put_sqrt_pair((n - 1) * symbols + 2, position + 1);
      break;
    case EncodingKind::DecimalScaled:
      v[symbol] = inverse_power_of_ten<T>(position);
      v[symbols] = T(1);
      v[symbols + 1] = T(static_cast<long>(position));
      break;
    case EncodingKind::LinearPosition:
      v[symbol] = T(1);
      v[2 * symbols] = T(1);
      v[2 * symbols + 1] = T(static_cast<long>(position));
      break;
  }
  return v;
}

// Final transform

template <class T>
Vec<T> FinalTransform<T>::apply(std::span<const T> x) const {
  if (!rescale) return mlp.forward(x);
  const auto& r = *rescale;
  if (r.offset + r.width > x.size()) throw DimensionError("L1 rescale window exceeds the representation");
  T norm(0);
  for (std::size_t i = 0; i < r.width; ++i) norm += abs_value(x[r.offset + i]);
  if (is_zero(norm)) throw std::domain_error("L1 rescale of a zero vector");
  const T factor = r.scale / norm;
  Vec<T> slice(r.width);
  for (std::size_t i = 0; i < r.width; ++i) slice[i] = x[r.offset + i] * factor;
  return mlp.forward(slice);
}

// Model

template <class T>
std::vector<std::size_t> TransformerModel<T>::layer_dims() const {
  std::vector<std::size_t> dims{encoding.dim()};
  for (const auto& layer : layers) dims.push_back(layer.combiner ? layer.combiner->out_dim() : dims.back());
  return dims;
}

template <class T>
void TransformerModel<T>::validate() const {
  if (order < 2) throw std::invalid_argument("model order must be at least 2");
  if (encoding.symbols != alphabet.bos_size()) throw DimensionError("static encoding does not cover Sigma_bos");
  if (encoding.order != order) throw std::invalid_argument("static encoding order differs from model order");
  if (tie_eps < 0) throw std::invalid_argument("tie tolerance must be non-negative");
  if constexpr (ScalarTraits<T>::kExact) {
    if (!is_zero(tie_eps)) throw std::invalid_argument("tie tolerance must be zero on the rational backend");
    if (encoding.kind == EncodingKind::SqrtMultiHead || encoding.kind == EncodingKind::SqrtMultiLayer)
      throw std::invalid_argument("irrational encodings (sqrt(1/t)) need the float backend");
  }
  std::size_t d = encoding.dim();
  for (const auto& layer : layers) {
    if (layer.heads.empty()) throw std::invalid_argument("layer without heads");
    for (const auto& head : layer.heads) {
      for (const auto* map : {&head.query, &head.key, &head.value, &head.output}) check_affine(*map, "head bias");
      require_dim(head.query.in_dim(), d, "query input");
      require_dim(head.key.in_dim(), d, "key input");
      require_dim(head.key.out_dim(), head.query.out_dim(), "key/query width");
      require_dim(head.value.in_dim(), d, "value input");
      require_dim(head.value.out_dim(), d, "value output");
      require_dim(head.output.in_dim(), d, "output-map input");
      require_dim(head.output.out_dim(), d, "output-map output");
      if constexpr (ScalarTraits<T>::kExact) {
        if (head.normalizer == Normalizer::Softmax)
          throw std::invalid_argument("softmax attention is only available on the float backend");
      }
    }
    if (layer.heads.size() > 1 && !layer.combiner) throw std::invalid_argument("multi-head layer without combiner");
    if (layer.combiner) {
      layer.combiner->validate();
      require_dim(layer.combiner->in_dim(), layer.heads.size() * d, "combiner input");
      d = layer.combiner->out_dim();
    }
  }
  final.mlp.validate();
  if (final.rescale) {
    if (final.rescale->offset + final.rescale->width > d) throw DimensionError("L1 rescale window exceeds the representation");
    require_dim(final.mlp.in_dim(), final.rescale->width, "final MLP input");
  } else {
    require_dim(final.mlp.in_dim(), d, "final MLP input");
  }
  require_dim(output.rows(), alphabet.eos_size(), "output matrix rows");
  require_dim(output.cols(), final.mlp.out_dim(), "output matrix columns");
}

// Forward pass

namespace {

template <class T>
Vec<T> normalize(Normalizer normalizer, std::span<const T> scores, const T& tie_eps) {
  switch (normalizer) {
    case Normalizer::Hardmax: return hardmax<T>(scores, tie_eps);
    case Normalizer::Sparsemax: return sparsemax<T>(scores);
    case Normalizer::Softmax:
      if constexpr (ScalarTraits<T>::kExact) {
        throw std::invalid_argument("softmax attention is only available on the float backend");
      } else {
        return softmax(scores);
      }
  }
  throw std::logic_error("unreachable normalizer");
}

// Attention at query_pos given precomputed keys and values of positions 1..query_pos.
template <class T>
Vec<T> attend_precomputed(const Head<T>& head, std::size_t query_pos, const Vec<T>& x_query,
                          const std::vector<Vec<T>>& keys, const std::vector<Vec<T>>& values, const T& tie_eps,
                          AttentionRecord<T>* record) {
  if (query_pos < 1 || query_pos > keys.size()) throw std::out_of_range("attention query position out of range");
  const auto q = head.query.apply(x_query);
  Vec<T> scores(query_pos);
  for (std::size_t j = 0; j < query_pos; ++j) scores[j] = score<T>(head.scoring, q, keys[j]);
  auto weights = normalize<T>(head.normalizer, scores, tie_eps);
  Vec<T> out(values.front().size(), T(0));
  for (std::size_t j = 0; j < query_pos; ++j) {
    if (is_zero(weights[j])) continue;
    for (std::size_t i = 0; i < out.size(); ++i)
      if (!is_zero(values[j][i])) out[i] += weights[j] * values[j][i];
  }
  if (record) {
    record->query_pos = query_pos;
    record->scores = std::move(scores);
    record->weights = std::move(weights);
  }
  return out;
}

}  // namespace

template <class T>
Vec<T> attend(const Head<T>& head, std::size_t query_pos, const std::vector<Vec<T>>& xs, const T& tie_eps,
              AttentionRecord<T>* record) {
  if (query_pos < 1 || query_pos > xs.size()) throw std::out_of_range("attention query position out of range");
  std::vector<Vec<T>> keys;
  std::vector<Vec<T>> values;
  for (std::size_t j = 0; j < query_pos; ++j) {
    keys.push_back(head.key.apply(xs[j]));
    values.push_back(head.value.apply(xs[j]));
  }
  return attend_precomputed(head, query_pos, xs[query_pos - 1], keys, values, tie_eps, record);
}

template <class T>
std::vector<Vec<T>> layer_forward(const Layer<T>& layer, const std::vector<Vec<T>>& xs, const T& tie_eps,
                                  std::vector<AttentionRecord<T>>* records, std::size_t layer_index) {
  if (xs.empty()) throw std::invalid_argument("layer applied to an empty sequence");
  if (layer.heads.size() > 1 && !layer.combiner) throw std::invalid_argument("multi-head layer without combiner");
  const auto positions = xs.size();
  std::vector<std::vector<Vec<T>>> keys(layer.heads.size());
  std::vector<std::vector<Vec<T>>> values(layer.heads.size());
  for (std::size_t h = 0; h < layer.heads.size(); ++h) {
    for (const auto& x : xs) {
      keys[h].push_back(layer.heads[h].key.apply(x));
      values[h].push_back(layer.heads[h].value.apply(x));
    }
  }
  std::vector<Vec<T>> out;
  out.reserve(positions);
  for (std::size_t p = 1; p <= positions; ++p) {
    const auto& x = xs[p - 1];
    Vec<T> concatenated;
    for (std::size_t h = 0; h < layer.heads.size(); ++h) {
      const auto& head = layer.heads[h];
      AttentionRecord<T> record;
      auto a = attend_precomputed(head, p, x, keys[h], values[h], tie_eps, records ? &record : nullptr);
      require_dim(a.size(), x.size(), "attention output");
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += x[i];
      auto z = head.output.apply(a);
      for (std::size_t i = 0; i < z.size(); ++i) z[i] += a[i];
      concatenated.insert(concatenated.end(), z.begin(), z.end());
      if (records) {
        record.layer = layer_index;
        record.head = h;
        records->push_back(std::move(record));
      }
    }
    out.push_back(layer.combiner ? layer.combiner->forward(concatenated) : std::move(concatenated));
  }
  return out;
}

template <class T>
std::vector<Vec<T>> transformer_forward(const TransformerModel<T>& model, const Word& y, ForwardTrace<T>* trace) {
  for (const auto s : y)
    if (s >= model.alphabet.size()) throw std::invalid_argument("symbol outside the model alphabet");
  const auto padded = pad(y, model.order);
  if (model.max_position != 0 && padded.size() > model.max_position)
    throw std::out_of_range("padded length " + std::to_string(padded.size()) + " exceeds the model's supported " +
                            std::to_string(model.max_position) + " positions");
  std::vector<Vec<T>> xs;
  xs.reserve(padded.size());
  for (std::size_t i = 0; i < padded.size(); ++i) xs.push_back(model.encoding.encode(padded[i], i + 1));
  if (trace) trace->layer_outputs.push_back(xs);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    xs = layer_forward(model.layers[l], xs, model.tie_eps, trace ? &trace->attention : nullptr, l + 1);
    if (trace) trace->layer_outputs.push_back(xs);
  }
  return xs;
}

template <class T>
Vec<T> output_distribution(const TransformerModel<T>& model, std::span<const T> enc) {
  const auto& e = model.output;
  require_dim(enc.size(), e.cols(), "enc vector");
  if constexpr (ScalarTraits<T>::kExact) {
    std::vector<LogRational> logits(e.rows(), LogRational::log_of(Rational(1)));
    for (std::size_t c = 0; c < enc.size(); ++c) {
      if (is_zero(enc[c])) continue;
      if (enc[c] < 0 || enc[c].get_den() != 1)
        throw std::domain_error("exact LM head needs a non-negative integer enc vector");
      const unsigned long k = enc[c].get_num().get_ui();
      for (std::size_t y = 0; y < e.rows(); ++y) logits[y] = logits[y] + e(y, c).times(k);
    }
    return softmax_logdomain(logits);
  } else {
    const double neg_inf = -std::numeric_limits<double>::infinity();
    Vec<double> logits(e.rows(), 0.0);
    for (std::size_t c = 0; c < enc.size(); ++c) {
      if (enc[c] == 0.0) continue;
      for (std::size_t y = 0; y < e.rows(); ++y) {
        if (e(y, c).is_neg_inf()) {
          if (enc[c] < 0) throw std::domain_error("negative weight on a -inf logit");
          logits[y] = neg_inf;
        } else {
          logits[y] += enc[c] * e(y, c).to_double();
        }
      }
    }
    return softmax(logits);
  }
}

namespace {

template <class T>
void audit_one_hot(std::span<const T> enc) {
  std::size_t ones = 0;
  for (const auto& v : enc) {
    if (v == T(1)) {
      ++ones;
    } else if (!is_zero(v)) {
      throw std::logic_error("enc is not one-hot (entry " + format_scalar(v) + ")");
    }
  }
  if (ones != 1) throw std::logic_error("enc is not one-hot (" + std::to_string(ones) + " ones)");
}

}  // namespace

template <class T>
std::vector<Vec<T>> lm_conditionals(const TransformerModel<T>& model, const Word& y, bool audit) {
  const auto xs = transformer_forward(model, y);
  std::vector<Vec<T>> out;
  out.reserve(y.size() + 1);
  const auto first = static_cast<std::size_t>(model.order - 2);
  for (std::size_t t = 0; t <= y.size(); ++t) {
    const auto enc = model.final.apply(xs[first + t]);
    if (audit) audit_one_hot<T>(enc);
    out.push_back(output_distribution<T>(model, enc));
  }
  return out;
}

template <class T>
Vec<T> lm_conditional(const TransformerModel<T>& model, const Word& prefix, bool audit) {
  return lm_conditionals(model, prefix, audit).back();
}

template <class T>
T lm_string_prob(const TransformerModel<T>& model, const Word& y) {
  const auto dists = lm_conditionals(model, y);
  T p(1);
  for (std::size_t t = 0; t <= y.size(); ++t) {
    p *= dists[t][t < y.size() ? y[t] : model.alphabet.eos_index()];
    if (is_zero(p)) break;
  }
  return p;
}

#define NGT_INSTANTIATE(T)                                                                                        \
  template struct AffineMap<T>;                                                                                   \
  template AffineMap<T> compose<T>(const AffineMap<T>&, const AffineMap<T>&);                                     \
  template struct Mlp<T>;                                                                                         \
  template T score<T>(Scoring, std::span<const T>, std::span<const T>);                                           \
  template struct StaticEncoding<T>;                                                                              \
  template struct FinalTransform<T>;                                                                              \
  template struct TransformerModel<T>;                                                                            \
  template Vec<T> attend<T>(const Head<T>&, std::size_t, const std::vector<Vec<T>>&, const T&, AttentionRecord<T>*); \
  template std::vector<Vec<T>> layer_forward<T>(const Layer<T>&, const std::vector<Vec<T>>&, const T&,            \
                                                std::vector<AttentionRecord<T>>*, std::size_t);                   \
  template std::vector<Vec<T>> transformer_forward<T>(const TransformerModel<T>&, const Word&, ForwardTrace<T>*); \
  template Vec<T> output_distribution<T>(const TransformerModel<T>&, std::span<const T>);                         \
  template std::vector<Vec<T>> lm_conditionals<T>(const TransformerModel<T>&, const Word&, bool);                 \
  template Vec<T> lm_conditional<T>(const TransformerModel<T>&, const Word&, bool);                               \
  template T lm_string_prob<T>(const TransformerModel<T>&, const Word&);

NGT_INSTANTIATE(Rational)
NGT_INSTANTIATE(double)

#undef NGT_INSTANTIATE

}  // namespace ngt
