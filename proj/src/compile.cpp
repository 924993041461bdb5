#include "ngt/compile.hpp"

#include <cmath>
#include <stdexcept>

namespace ngt {

std::string_view construction_name(ConstructionKind kind) {
  switch (kind) {
    case ConstructionKind::MultiHead: return "multihead";
    case ConstructionKind::MultiLayer: return "multilayer";
    case ConstructionKind::SingleHead: return "singlehead";
    case ConstructionKind::Sparse: return "sparse";
  }
  return "?";
}

ConstructionKind parse_construction(std::string_view name) {
  for (const auto k : {ConstructionKind::MultiHead, ConstructionKind::MultiLayer, ConstructionKind::SingleHead,
                       ConstructionKind::Sparse})
    if (construction_name(k) == name) return k;
  throw std::invalid_argument("unknown construction '" + std::string(name) +
                              "' (expected multihead, multilayer, singlehead or sparse)");
}

Backend default_backend(ConstructionKind kind) {
  return kind == ConstructionKind::MultiHead || kind == ConstructionKind::MultiLayer ? Backend::Float64
                                                                                      : Backend::ExactRational;
}

// HistoryIndexer

HistoryIndexer::HistoryIndexer(std::size_t symbols, std::size_t length)
    : symbols_(symbols), length_(length), size_(1) {
  if (symbols == 0) throw std::invalid_argument("history indexer over an empty alphabet");
  for (std::size_t i = 0; i < length; ++i) {
    if (size_ > std::numeric_limits<std::size_t>::max() / symbols) throw std::overflow_error("history space too large");
    size_ *= symbols;
  }
}

std::size_t HistoryIndexer::index(std::span<const std::size_t> history) const {
  if (history.size() != length_) throw DimensionError("history of the wrong length");
  std::size_t out = 0;
  for (const auto s : history) {
    if (s >= symbols_) throw std::out_of_range("history symbol outside the indexer's alphabet");
    out = out * symbols_ + s;
  }
  return out;
}

std::vector<std::size_t> HistoryIndexer::decode(std::size_t index) const {
  if (index >= size_) throw std::out_of_range("history index out of range");
  std::vector<std::size_t> out(length_);
  for (std::size_t i = length_; i-- > 0;) {
    out[i] = index % symbols_;
    index /= symbols_;
  }
  return out;
}

// MLP plumbing

template <class T>
Mlp<T> chain(const Mlp<T>& first, const Mlp<T>& second) {
  first.validate();
  second.validate();
  Mlp<T> out;
  out.layers.assign(first.layers.begin(), first.layers.end() - 1);
  out.layers.push_back(MlpLayer<T>{compose(second.layers.front().affine, first.layers.back().affine),
                                   second.layers.front().activation});
  out.layers.insert(out.layers.end(), second.layers.begin() + 1, second.layers.end());
  return out;
}

template <class T>
Mlp<T> precompose(const Mlp<T>& mlp, const AffineMap<T>& inner) {
  mlp.validate();
  Mlp<T> out = mlp;
  out.layers.front().affine = compose(mlp.layers.front().affine, inner);
  return out;
}

template <class T>
Mlp<T> parallel(const std::vector<Mlp<T>>& mlps) {
  if (mlps.empty()) throw std::invalid_argument("parallel of no MLPs");
  const auto depth = mlps.front().layers.size();
  for (const auto& m : mlps) {
    m.validate();
    if (m.layers.size() != depth) throw std::invalid_argument("parallel MLPs must have equal depth");
  }
  Mlp<T> out;
  for (std::size_t l = 0; l < depth; ++l) {
    std::size_t rows = 0;
    std::size_t cols = 0;
    for (const auto& m : mlps) {
      rows += m.layers[l].affine.out_dim();
      cols += m.layers[l].affine.in_dim();
      if (m.layers[l].activation != mlps.front().layers[l].activation)
        throw std::invalid_argument("parallel MLPs must share activations");
    }
    AffineMap<T> block = AffineMap<T>::zero(rows, cols);
    std::size_t r0 = 0;
    std::size_t c0 = 0;
    for (const auto& m : mlps) {
      const auto& a = m.layers[l].affine;
      for (std::size_t r = 0; r < a.out_dim(); ++r) {
        for (std::size_t c = 0; c < a.in_dim(); ++c) block.matrix(r0 + r, c0 + c) = a.matrix(r, c);
        block.bias[r0 + r] = a.bias[r];
      }
      r0 += a.out_dim();
      c0 += a.in_dim();
    }
    out.layers.push_back(MlpLayer<T>{std::move(block), mlps.front().layers[l].activation});
  }
  return out;
}

// Gadgets

template <class T>
Mlp<T> build_and_mlp(std::size_t m, std::size_t width) {
  if (m < 1) throw std::invalid_argument("AND gadget needs at least one block");
  const HistoryIndexer tuples(width, m);
  AffineMap<T> hidden = AffineMap<T>::zero(tuples.size(), m * width);
  for (std::size_t s = 0; s < tuples.size(); ++s) {
    const auto tuple = tuples.decode(s);
    for (std::size_t i = 0; i < m; ++i) hidden.matrix(s, i * width + tuple[i]) = T(1);
    hidden.bias[s] = T(-static_cast<long>(m - 1));
  }
  return Mlp<T>{{MlpLayer<T>{std::move(hidden), Activation::Relu},
                 MlpLayer<T>{AffineMap<T>::identity(tuples.size()), Activation::Identity}}};
}

Mat<LogRational> build_output_matrix(const NGramLM& lm) {
  const auto& alphabet = lm.alphabet();
  const HistoryIndexer indexer(alphabet.bos_size(), static_cast<std::size_t>(lm.order() - 1));
  Mat<LogRational> e(alphabet.eos_size(), indexer.size());
  const auto uniform = LogRational::log_of(Rational(1, static_cast<long>(alphabet.eos_size())));
  for (std::size_t c = 0; c < indexer.size(); ++c) {
    const History h{indexer.decode(c)};
    if (!h.reachable()) {
      for (std::size_t y = 0; y < e.rows(); ++y) e(y, c) = uniform;
      continue;
    }
    const auto& row = lm.row(h);
    for (std::size_t y = 0; y < e.rows(); ++y) e(y, c) = LogRational::log_of(row[y]);
  }
  return e;
}

namespace {

template <class T>
T power_of_ten(int exponent) {
  if constexpr (ScalarTraits<T>::kExact) {
    mpz_class p;
    mpz_ui_pow_ui(p.get_mpz_t(), 10, static_cast<unsigned long>(std::abs(exponent)));
    return exponent >= 0 ? Rational(p) : Rational(mpz_class(1), p);
  } else {
    return std::pow(10.0, exponent);
  }
}

}  // namespace

template <class T>
Mlp<T> build_step_gadget(int digits) {
  if (digits < 1) throw std::invalid_argument("step gadget needs N >= 1");
  const T eps = power_of_ten<T>(-(digits + 1));
  AffineMap<T> hidden = AffineMap<T>::zero(2, 1);
  hidden.matrix(0, 0) = T(1);
  hidden.matrix(1, 0) = T(1);
  hidden.bias[1] = T(-eps);
  AffineMap<T> out = AffineMap<T>::zero(1, 2);
  out.matrix(0, 0) = power_of_ten<T>(digits + 1);
  out.matrix(0, 1) = T(-power_of_ten<T>(digits + 1));
  return Mlp<T>{{MlpLayer<T>{std::move(hidden), Activation::Relu}, MlpLayer<T>{std::move(out), Activation::Identity}}};
}

template <class T>
Mlp<T> build_digit_mlp(int digits) {
  if (digits < 1) throw std::invalid_argument("digit decoder needs N >= 1");
  const auto n = static_cast<std::size_t>(digits);
  const T eps = power_of_ten<T>(-(digits + 1));
  const T step_scale = power_of_ten<T>(digits + 1);

  // State before step l (0-based) is (d_1..d_l, x), width l+1.
  // Hidden of step l is (d_1..d_l, x, z, z - eps) with
  // z = 10^{l+1} x - sum_j 10^{l+1-j} d_j - 1 + eps.
  const auto hidden_map = [&](std::size_t l) {
    AffineMap<T> h = AffineMap<T>::zero(l + 3, l + 1);
    for (std::size_t i = 0; i <= l; ++i) h.matrix(i, i) = T(1);
    for (std::size_t row = l + 1; row <= l + 2; ++row) {
      h.matrix(row, l) = power_of_ten<T>(static_cast<int>(l + 1));
      for (std::size_t j = 0; j < l; ++j) h.matrix(row, j) = T(-power_of_ten<T>(static_cast<int>(l - j)));
      h.bias[row] = T(-1) + eps;
    }
    h.bias[l + 2] -= eps;
    return h;
  };
  // Hidden of step l -> state (d_1..d_{l+1}, x).
  const auto post_map = [&](std::size_t l) {
    AffineMap<T> p = AffineMap<T>::zero(l + 2, l + 3);
    for (std::size_t j = 0; j < l; ++j) p.matrix(j, j) = T(1);
    p.matrix(l, l + 1) = step_scale;
    p.matrix(l, l + 2) = T(-step_scale);
    p.matrix(l + 1, l) = T(1);
    return p;
  };

  Mlp<T> mlp;
  mlp.layers.push_back(MlpLayer<T>{hidden_map(0), Activation::Relu});
  for (std::size_t l = 1; l < n; ++l)
    mlp.layers.push_back(MlpLayer<T>{compose(hidden_map(l), post_map(l - 1)), Activation::Relu});
  AffineMap<T> drop_x = AffineMap<T>::zero(n, n + 1);
  for (std::size_t j = 0; j < n; ++j) drop_x.matrix(j, j) = T(1);
  mlp.layers.push_back(MlpLayer<T>{compose(drop_x, post_map(n - 1)), Activation::Identity});
  return mlp;
}

// Float sqrt encodings

namespace {

double sqrt_score(std::size_t query, std::size_t key) {
  const double q = 1.0 / static_cast<double>(query);
  const double k = 1.0 / static_cast<double>(key);
  return std::sqrt(q) * std::sqrt(k) + std::sqrt(1.0 - q) * std::sqrt(1.0 - k);
}

}  // namespace

double sqrt_encoding_margin(std::size_t position) {
  if (position < 1) throw std::out_of_range("positions are 1-based");
  const double best = sqrt_score(position, position);
  double runner_up = sqrt_score(position, position + 1);
  if (position > 1) runner_up = std::max(runner_up, sqrt_score(position, position - 1));
  return best - runner_up;
}

std::size_t sqrt_encoding_max_position(double min_gap) {
  std::size_t p = 1;
  while (sqrt_encoding_margin(p + 1) >= min_gap) ++p;
  return p;
}

// Constructions

namespace {

std::size_t history_length(const NGramLM& lm) { return static_cast<std::size_t>(lm.order() - 1); }

// Head h fetches the symbol at p-h into slot [B, 2B) and clears slot [0, B).
template <class T>
void set_fetch_value_and_output(Head<T>& head, std::size_t b, std::size_t d) {
  head.value = AffineMap<T>::zero(d, d);
  for (std::size_t i = 0; i < b; ++i) head.value.matrix(b + i, i) = T(1);
  head.output = AffineMap<T>::zero(d, d);
  for (std::size_t i = 0; i < b; ++i) head.output.matrix(i, i) = T(-1);
}

// AND over the per-head fetched symbols; history block i is head n-2-i.
template <class T>
Mlp<T> fetch_combiner(std::size_t heads, std::size_t b, std::size_t d) {
  AffineMap<T> select = AffineMap<T>::zero(heads * b, heads * d);
  for (std::size_t i = 0; i < heads; ++i) {
    const std::size_t head = heads - 1 - i;
    for (std::size_t s = 0; s < b; ++s) select.matrix(i * b + s, head * d + b + s) = T(1);
  }
  return precompose(build_and_mlp<T>(heads, b), select);
}

template <class T>
TransformerModel<T> skeleton(const NGramLM& lm, ConstructionKind kind, EncodingKind encoding) {
  TransformerModel<T> model;
  model.construction = std::string(construction_name(kind));
  model.order = lm.order();
  model.alphabet = lm.alphabet();
  model.encoding = StaticEncoding<T>{encoding, lm.alphabet().bos_size(), lm.order()};
  model.output = build_output_matrix(lm);
  if constexpr (!ScalarTraits<T>::kExact) model.tie_eps = 1e-9;
  return model;
}

}  // namespace

TransformerModel<double> compile_multihead(const NGramLM& lm) {
  auto model = skeleton<double>(lm, ConstructionKind::MultiHead, EncodingKind::SqrtMultiHead);
  const auto b = model.alphabet.bos_size();
  const auto d = model.encoding.dim();
  const auto heads = history_length(lm);
  Layer<double> layer;
  for (std::size_t h = 0; h < heads; ++h) {
    Head<double> head;
    head.query = AffineMap<double>::zero(2, d);
    head.key = AffineMap<double>::zero(2, d);
    for (std::size_t i = 0; i < 2; ++i) {
      head.query.matrix(i, 2 * b + i) = 1.0;
      head.key.matrix(i, 2 * b + 2 * h + i) = 1.0;
    }
    set_fetch_value_and_output(head, b, d);
    head.scoring = Scoring::Dot;
    head.normalizer = Normalizer::Hardmax;
    layer.heads.push_back(std::move(head));
  }
  layer.combiner = fetch_combiner<double>(heads, b, d);
  model.layers.push_back(std::move(layer));
  model.final.mlp = Mlp<double>::identity(model.output.cols());
  model.max_position = sqrt_encoding_max_position();
  model.validate();
  return model;
}

TransformerModel<double> compile_multilayer(const NGramLM& lm) {
  auto model = skeleton<double>(lm, ConstructionKind::MultiLayer, EncodingKind::SqrtMultiLayer);
  const auto b = model.alphabet.bos_size();
  const auto d = model.encoding.dim();
  const auto blocks = history_length(lm);
  const auto pos = blocks * b;
  for (std::size_t l = 1; l <= blocks; ++l) {
    Head<double> head;
    head.query = AffineMap<double>::zero(2, d);
    head.key = AffineMap<double>::zero(2, d);
    for (std::size_t i = 0; i < 2; ++i) {
      head.query.matrix(i, pos + i) = 1.0;
      head.key.matrix(i, pos + 2 + i) = 1.0;
    }
    head.value = AffineMap<double>::zero(d, d);
    if (l < blocks)
      for (std::size_t s = 0; s < b; ++s) head.value.matrix(l * b + s, (l - 1) * b + s) = 1.0;
    head.output = AffineMap<double>::zero(d, d);
    head.scoring = Scoring::Dot;
    head.normalizer = Normalizer::Hardmax;
    model.layers.push_back(Layer<double>{{std::move(head)}, std::nullopt});
  }
  AffineMap<double> select = AffineMap<double>::zero(blocks * b, d);
  for (std::size_t i = 0; i < blocks; ++i)
    for (std::size_t s = 0; s < b; ++s) select.matrix(i * b + s, (blocks - 1 - i) * b + s) = 1.0;
  model.final.mlp = precompose(build_and_mlp<double>(blocks, b), select);
  model.max_position = sqrt_encoding_max_position();
  model.validate();
  return model;
}

TransformerModel<Rational> compile_singlehead(const NGramLM& lm) {
  auto model = skeleton<Rational>(lm, ConstructionKind::SingleHead, EncodingKind::DecimalScaled);
  const auto b = model.alphabet.bos_size();
  const auto d = model.encoding.dim();
  const auto window = history_length(lm);
  const auto n = static_cast<long>(lm.order());

  // q = (p - (n-2), -1), k = (1, j): <q, k> = (p - n + 2) - j <= 0 on the window.
  Head<Rational> head;
  head.query = AffineMap<Rational>::zero(2, d);
  head.query.matrix(0, b + 1) = 1;
  head.query.matrix(1, b) = -1;
  head.query.bias[0] = -(n - 2);
  head.key = AffineMap<Rational>::zero(2, d);
  head.key.matrix(0, b) = 1;
  head.key.matrix(1, b + 1) = 1;
  head.value = AffineMap<Rational>::zero(d, d);
  for (std::size_t s = 0; s < b; ++s) head.value.matrix(s, s) = n - 1;
  head.output = AffineMap<Rational>::identity(d);
  head.scoring = Scoring::NegReluDot;
  head.normalizer = Normalizer::Hardmax;
  model.layers.push_back(Layer<Rational>{{std::move(head)}, std::nullopt});

  // After rescaling, symbol s carries sum_i d_i(s) 10^{-i}, oldest position
  // first, with the current symbol's digit doubled by the residual.
  Rational scale = power_of_ten<Rational>(-static_cast<int>(window));
  for (std::size_t i = 1; i <= window; ++i) scale += power_of_ten<Rational>(-static_cast<int>(i));
  model.final.rescale = L1Rescale<Rational>{0, b, scale};

  const auto digits = build_digit_mlp<Rational>(static_cast<int>(window));
  const auto decoders = parallel(std::vector<Mlp<Rational>>(b, digits));
  // Decoder output (s, i) -> AND input block i, slot s.
  AffineMap<Rational> regroup = AffineMap<Rational>::zero(window * b, window * b);
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t i = 0; i < window; ++i) regroup.matrix(i * b + s, s * window + i) = 1;
  model.final.mlp = chain(decoders, precompose(build_and_mlp<Rational>(window, b), regroup));
  model.validate();
  return model;
}

template <class T>
TransformerModel<T> compile_sparse(const NGramLM& lm) {
  auto model = skeleton<T>(lm, ConstructionKind::Sparse, EncodingKind::LinearPosition);
  const auto b = model.alphabet.bos_size();
  const auto d = model.encoding.dim();
  const auto heads = history_length(lm);
  Layer<T> layer;
  for (std::size_t h = 0; h < heads; ++h) {
    // q = (1, p - h), k = (j, -1): <q, k> = j - (p - h).
    Head<T> head;
    head.query = AffineMap<T>::zero(2, d);
    head.query.matrix(0, 2 * b) = T(1);
    head.query.matrix(1, 2 * b + 1) = T(1);
    head.query.bias[1] = T(-static_cast<long>(h));
    head.key = AffineMap<T>::zero(2, d);
    head.key.matrix(0, 2 * b + 1) = T(1);
    head.key.matrix(1, 2 * b) = T(-1);
    set_fetch_value_and_output(head, b, d);
    head.scoring = Scoring::NegAbsDot;
    head.normalizer = Normalizer::Sparsemax;
    layer.heads.push_back(std::move(head));
  }
  layer.combiner = fetch_combiner<T>(heads, b, d);
  model.layers.push_back(std::move(layer));
  model.final.mlp = Mlp<T>::identity(model.output.cols());
  model.validate();
  return model;
}

AnyModel compile_model(const NGramLM& lm, ConstructionKind kind, Backend backend) {
  switch (kind) {
    case ConstructionKind::MultiHead:
    case ConstructionKind::MultiLayer:
      if (backend != Backend::Float64)
        throw std::invalid_argument(std::string(construction_name(kind)) +
                                    " uses irrational encodings (sqrt(1/t)); use --backend float");
      return kind == ConstructionKind::MultiHead ? compile_multihead(lm) : compile_multilayer(lm);
    case ConstructionKind::SingleHead:
      if (backend != Backend::ExactRational)
        throw std::invalid_argument("singlehead decodes base-10 digits and is only compiled exactly; use --backend rational");
      return compile_singlehead(lm);
    case ConstructionKind::Sparse:
      if (backend == Backend::ExactRational) return compile_sparse<Rational>(lm);
      return compile_sparse<double>(lm);
  }
  throw std::logic_error("unreachable construction");
}

#define NGT_INSTANTIATE(T)                                                 \
  template Mlp<T> chain<T>(const Mlp<T>&, const Mlp<T>&);                  \
  template Mlp<T> precompose<T>(const Mlp<T>&, const AffineMap<T>&);       \
  template Mlp<T> parallel<T>(const std::vector<Mlp<T>>&);                 \
  template Mlp<T> build_and_mlp<T>(std::size_t, std::size_t);              \
  template Mlp<T> build_step_gadget<T>(int);                               \
  template Mlp<T> build_digit_mlp<T>(int);                                 \
  template TransformerModel<T> compile_sparse<T>(const NGramLM&);

NGT_INSTANTIATE(Rational)
NGT_INSTANTIATE(double)

#undef NGT_INSTANTIATE

}  // namespace ngt
