// Executable transformer semantics: attention, residual layers, multi-head
// combination, static encodings, final transform and the LM head.
//
// Padded positions are 1-based. The query at padded position p sees keys
// 1..p and predicts the symbol at p+1; predictions start at p = n-1.

#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "ngt/ngram.hpp"
#include "ngt/numeric.hpp"

namespace ngt {

template <class T>
struct AffineMap {
  Mat<T> matrix;  // out x in
  Vec<T> bias;    // out

  static AffineMap identity(std::size_t n);
  static AffineMap zero(std::size_t out, std::size_t in);
  static AffineMap linear(Mat<T> matrix);

  std::size_t in_dim() const { return matrix.cols(); }
  std::size_t out_dim() const { return matrix.rows(); }
  Vec<T> apply(std::span<const T> x) const;

  friend bool operator==(const AffineMap&, const AffineMap&) = default;
};

/// outer(inner(x)) as a single affine map.
template <class T>
AffineMap<T> compose(const AffineMap<T>& outer, const AffineMap<T>& inner);

enum class Activation { Relu, Identity };

template <class T>
struct MlpLayer {
  AffineMap<T> affine;
  Activation activation = Activation::Identity;

  friend bool operator==(const MlpLayer&, const MlpLayer&) = default;
};

/// Alternating affine maps and activations. A valid MLP has at least one
/// layer and its last layer is unactivated.
template <class T>
struct Mlp {
  std::vector<MlpLayer<T>> layers;

  static Mlp identity(std::size_t n);

  std::size_t in_dim() const { return layers.front().affine.in_dim(); }
  std::size_t out_dim() const { return layers.back().affine.out_dim(); }
  void validate() const;
  Vec<T> forward(std::span<const T> x) const;

  friend bool operator==(const Mlp&, const Mlp&) = default;
};

enum class Scoring { Dot, NegAbsDot, NegReluDot };
enum class Normalizer { Hardmax, Sparsemax, Softmax };

std::string_view scoring_name(Scoring s);
Scoring parse_scoring(std::string_view name);
std::string_view normalizer_name(Normalizer n);
Normalizer parse_normalizer(std::string_view name);

template <class T>
T score(Scoring scoring, std::span<const T> q, std::span<const T> k);

enum class EncodingKind {
  SqrtMultiHead,   // (onehot; 0_B; (sqrt(1/(p+k)), sqrt(1-1/(p+k)))_{k<n}), dim 2B+2n
  SqrtMultiLayer,  // (onehot; 0_{(n-2)B}; sqrt(1/p), sqrt(1-1/p), sqrt(1/(p+1)), sqrt(1-1/(p+1))), dim (n-1)B+4
  DecimalScaled,   // (10^-p onehot; 1; p), dim B+2
  LinearPosition,  // (onehot; 0_B; 1; p), dim 2B+2
};

std::string_view encoding_name(EncodingKind kind);
EncodingKind parse_encoding(std::string_view name);

/// The static encoding r(y, p) over Sigma_bos (B = symbols).
template <class T>
struct StaticEncoding {
  EncodingKind kind = EncodingKind::LinearPosition;
  std::size_t symbols = 0;
  int order = 2;

  std::size_t dim() const;
  /// Throws std::domain_error for the sqrt kinds on the rational backend.
  Vec<T> encode(std::size_t symbol, std::size_t position) const;

  friend bool operator==(const StaticEncoding&, const StaticEncoding&) = default;
};

template <class T>
struct Head {
  AffineMap<T> query;
  AffineMap<T> key;
  AffineMap<T> value;
  AffineMap<T> output;
  Scoring scoring = Scoring::Dot;
  Normalizer normalizer = Normalizer::Hardmax;

  friend bool operator==(const Head&, const Head&) = default;
};

/// One head: z = O(a) + a. Several heads: the per-head z are concatenated and
/// passed through the combiner, whose output width is free.
template <class T>
struct Layer {
  std::vector<Head<T>> heads;
  std::optional<Mlp<T>> combiner;

  friend bool operator==(const Layer&, const Layer&) = default;
};

/// Takes x[offset, offset+width), divides by its L1 norm and multiplies by
/// scale; the result replaces the whole vector.
template <class T>
struct L1Rescale {
  std::size_t offset = 0;
  std::size_t width = 0;
  T scale{1};

  friend bool operator==(const L1Rescale&, const L1Rescale&) = default;
};

template <class T>
struct FinalTransform {
  std::optional<L1Rescale<T>> rescale;
  Mlp<T> mlp;

  Vec<T> apply(std::span<const T> x) const;

  friend bool operator==(const FinalTransform&, const FinalTransform&) = default;
};

template <class T>
struct TransformerModel {
  std::string construction;
  int order = 2;
  Alphabet alphabet{{"a"}};
  StaticEncoding<T> encoding;
  std::vector<Layer<T>> layers;
  FinalTransform<T> final;
  Mat<LogRational> output;  // rows Sigma_bar, cols enc dim
  T tie_eps{0};
  std::size_t max_position = 0;  // 0: unbounded

  static constexpr Backend backend() { return ScalarTraits<T>::kBackend; }

  /// Residual-stream width of each layer input, then the final layer output.
  std::vector<std::size_t> layer_dims() const;
  std::size_t enc_dim() const { return final.mlp.out_dim(); }

  /// Checks every shape and backend constraint; throws DimensionError or
  /// std::invalid_argument.
  void validate() const;

  friend bool operator==(const TransformerModel&, const TransformerModel&) = default;
};

template <class T>
struct AttentionRecord {
  std::size_t layer = 0;  // 1-based
  std::size_t head = 0;
  std::size_t query_pos = 0;  // 1-based
  Vec<T> scores;
  Vec<T> weights;
};

/// Side channel of an instrumented forward pass; never alters the values.
template <class T>
struct ForwardTrace {
  std::vector<std::vector<Vec<T>>> layer_outputs;  // [0] = static encodings
  std::vector<AttentionRecord<T>> attention;
};

/// Attention of one head at query_pos over xs[0..query_pos).
template <class T>
Vec<T> attend(const Head<T>& head, std::size_t query_pos, const std::vector<Vec<T>>& xs, const T& tie_eps,
              AttentionRecord<T>* record = nullptr);

template <class T>
std::vector<Vec<T>> layer_forward(const Layer<T>& layer, const std::vector<Vec<T>>& xs, const T& tie_eps,
                                  std::vector<AttentionRecord<T>>* records = nullptr, std::size_t layer_index = 0);

/// Contextual vectors for every padded position of BOS^{n-1} y.
template <class T>
std::vector<Vec<T>> transformer_forward(const TransformerModel<T>& model, const Word& y,
                                        ForwardTrace<T>* trace = nullptr);

/// softmax(E enc) for a given enc vector. On the rational backend enc must be
/// a non-negative integer vector; on float 0 * (-inf) is taken as 0.
template <class T>
Vec<T> output_distribution(const TransformerModel<T>& model, std::span<const T> enc);

/// Next-symbol distribution after prefix. With audit_one_hot, throws
/// std::logic_error unless enc is an exact one-hot vector.
template <class T>
Vec<T> lm_conditional(const TransformerModel<T>& model, const Word& prefix, bool audit_one_hot = false);

/// The conditionals at every prediction point of y, from one forward pass:
/// entry t is the distribution after y_1..y_t, t = 0..|y|.
template <class T>
std::vector<Vec<T>> lm_conditionals(const TransformerModel<T>& model, const Word& y, bool audit_one_hot = false);

template <class T>
T lm_string_prob(const TransformerModel<T>& model, const Word& y);

using AnyModel = std::variant<TransformerModel<Rational>, TransformerModel<double>>;

template <class T>
std::string serialize_model(const TransformerModel<T>& model);
AnyModel deserialize_model(std::string_view text);

}  // namespace ngt
