// n-gram -> transformer weight compilers and the MLP gadgets they share.

#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "ngt/ngram.hpp"
#include "ngt/transformer.hpp"

namespace ngt {

enum class ConstructionKind { MultiHead, MultiLayer, SingleHead, Sparse };

std::string_view construction_name(ConstructionKind kind);
ConstructionKind parse_construction(std::string_view name);
Backend default_backend(ConstructionKind kind);

/// Mixed radix over Sigma_bos, first (oldest) symbol most significant.
class HistoryIndexer {
 public:
  HistoryIndexer(std::size_t symbols, std::size_t length);

  std::size_t symbols() const { return symbols_; }
  std::size_t length() const { return length_; }
  std::size_t size() const { return size_; }

  std::size_t index(std::span<const std::size_t> history) const;
  std::vector<std::size_t> decode(std::size_t index) const;

 private:
  std::size_t symbols_;
  std::size_t length_;
  std::size_t size_;
};

/// m one-hot blocks of the given width -> one-hot of the tuple (width^m wide).
/// One hidden layer ReLU(v^T x - (m-1)), then the identity.
template <class T>
Mlp<T> build_and_mlp(std::size_t m, std::size_t width);

/// E[y][s(h)] = log p(y | h); unreachable histories get uniform columns.
Mat<LogRational> build_output_matrix(const NGramLM& lm);

/// 1 -> 1: 10^{N+1} (ReLU(z) - ReLU(z - 10^{-(N+1)})).
template <class T>
Mlp<T> build_step_gadget(int digits);

/// 1 -> N: decimal digits d_1..d_N of x = sum d_i 10^{-i}, d_i in {0,1}.
/// Digits in the last place may also be 2 (decoded as 1).
template <class T>
Mlp<T> build_digit_mlp(int digits);

/// Block-diagonal stacking of MLPs of equal depth.
template <class T>
Mlp<T> parallel(const std::vector<Mlp<T>>& mlps);

/// second(first(x)), fusing first's final affine into second's first affine.
template <class T>
Mlp<T> chain(const Mlp<T>& first, const Mlp<T>& second);

/// mlp(inner(x)), folding inner into the first affine.
template <class T>
Mlp<T> precompose(const Mlp<T>& mlp, const AffineMap<T>& inner);

/// Largest padded position at which every sqrt-encoding score gap (argmax
/// versus neighbours) is at least min_gap in binary64.
std::size_t sqrt_encoding_max_position(double min_gap = 1e-6);
/// Gap between the argmax score and the runner-up for a query at p.
double sqrt_encoding_margin(std::size_t position);

TransformerModel<double> compile_multihead(const NGramLM& lm);
TransformerModel<double> compile_multilayer(const NGramLM& lm);
TransformerModel<Rational> compile_singlehead(const NGramLM& lm);
template <class T>
TransformerModel<T> compile_sparse(const NGramLM& lm);

/// Dispatch; rejects construction/backend pairs that cannot be realised.
AnyModel compile_model(const NGramLM& lm, ConstructionKind kind, Backend backend);

}  // namespace ngt
