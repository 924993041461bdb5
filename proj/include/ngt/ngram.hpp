// n-gram language models over a fixed alphabet, with exact rational tables.
//
// Index conventions used throughout the project:
//   Sigma      symbols 0..|Sigma|-1 in alphabet order
//   Sigma_bos  0 = BOS, symbol i -> i+1
//   Sigma_bar  symbol i -> i, EOS -> |Sigma|

#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ngt/numeric.hpp"

namespace ngt {

/// A string over Sigma, as symbol indices.
using Word = std::vector<std::size_t>;

inline constexpr std::size_t kBos = 0;

class Alphabet {
 public:
  explicit Alphabet(std::vector<std::string> symbols, std::string bos = "<bos>", std::string eos = "<eos>");

  std::size_t size() const { return symbols_.size(); }
  std::size_t bos_size() const { return symbols_.size() + 1; }
  std::size_t eos_size() const { return symbols_.size() + 1; }
  std::size_t eos_index() const { return symbols_.size(); }

  const std::vector<std::string>& symbols() const { return symbols_; }
  const std::string& symbol(std::size_t i) const { return symbols_.at(i); }
  const std::string& bos() const { return bos_; }
  const std::string& eos() const { return eos_; }

  std::optional<std::size_t> find(std::string_view symbol) const;

  /// Name of a Sigma_bos index.
  const std::string& bos_symbol(std::size_t i) const { return i == kBos ? bos_ : symbols_.at(i - 1); }
  /// Name of a Sigma_bar index.
  const std::string& eos_symbol(std::size_t i) const { return i == eos_index() ? eos_ : symbols_.at(i); }

  /// Parses user text into a word. Tokens are separated by whitespace or
  /// commas; text without separators is split per character when every
  /// symbol is a single character.
  Word parse(std::string_view text) const;
  std::string format(const Word& word) const;

  friend bool operator==(const Alphabet&, const Alphabet&) = default;

 private:
  std::vector<std::string> symbols_;
  std::string bos_;
  std::string eos_;
};

/// n-1 symbols of Sigma_bos conditioning the next symbol.
struct History {
  std::vector<std::size_t> symbols;

  /// BOS may only appear as a contiguous prefix.
  bool reachable() const;

  friend auto operator<=>(const History&, const History&) = default;
};

/// All reachable histories of length order-1, in lexicographic index order.
std::vector<History> reachable_histories(int order, std::size_t alphabet_size);

/// BOS^{n-1} y over Sigma_bos. Padded position p (1-based) is element p-1.
std::vector<std::size_t> pad(const Word& y, int order);

/// History preceding the prediction of y_{t+1} (0-based t; t == |y| is the
/// EOS prediction).
History history_before(const Word& y, std::size_t t, int order);

class NGramLM {
 public:
  using Row = std::vector<Rational>;

  /// Validates: order >= 2, each row has |Sigma_bar| entries in [0,1]
  /// summing to exactly 1, every reachable history present, no other rows.
  NGramLM(int order, Alphabet alphabet, std::map<History, Row> rows);

  int order() const { return order_; }
  const Alphabet& alphabet() const { return alphabet_; }
  const std::map<History, Row>& rows() const { return rows_; }

  const Row& row(const History& history) const;
  const Rational& conditional(std::size_t outcome, const History& history) const;

  friend bool operator==(const NGramLM&, const NGramLM&) = default;

 private:
  int order_;
  Alphabet alphabet_;
  std::map<History, Row> rows_;
};

/// p(y) = p(EOS | last history) * prod_t p(y_t | history_t), exact.
Rational string_prob(const NGramLM& lm, const Word& y);

/// Deterministic in seed. Each outcome gets a weight in [1, max_denominator],
/// or 0 with probability zero_percent/100 (every row keeps at least one
/// positive weight); rows are normalised exactly.
NGramLM random_lm(int order, const Alphabet& alphabet, std::uint64_t seed, std::uint64_t max_denominator,
                  unsigned zero_percent = 0);

/// Add-lambda maximum likelihood estimate; histories never observed (and
/// lambda = 0) fall back to the uniform row.
NGramLM estimate_mle(const std::vector<Word>& corpus, int order, const Alphabet& alphabet, const Rational& lambda);
NGramLM estimate_mle(const std::vector<std::vector<std::string>>& corpus, int order, const Alphabet& alphabet,
                     const Rational& lambda);

/// Canonical JSON text (histories sorted, rationals in lowest terms).
std::string serialize_lm(const NGramLM& lm);
NGramLM deserialize_lm(std::string_view text);

/// 64-bit FNV-1a of the canonical serialisation, as 16 hex digits.
std::string fingerprint(const NGramLM& lm);

/// Calls visit on all strings of length <= max_len, length-then-lex order.
void for_each_string(std::size_t alphabet_size, std::size_t max_len, const std::function<void(const Word&)>& visit);
std::vector<Word> enumerate_strings(std::size_t alphabet_size, std::size_t max_len);

}  // namespace ngt
