// Brute-force weak-equivalence checking and structural audits of compiled
// models. Every string up to max_len is scored by both sides; a finite
// max_len is a proxy for Sigma*, the exactness of the construction is the
// actual guarantee.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ngt/ngram.hpp"
#include "ngt/transformer.hpp"

namespace ngt {

struct StringFailure {
  std::string text;
  std::size_t length = 0;
  std::string lm_probability;
  std::string model_probability;
  std::string reason;
};

struct LengthSummary {
  std::size_t length = 0;
  std::size_t strings = 0;
  std::size_t zero_probability = 0;
  std::size_t failures = 0;
  double max_deviation = 0;  // tolerance mode only
};

struct AuditResult {
  explicit AuditResult(std::string audit_name = {}) : name(std::move(audit_name)) {}

  std::string name;
  bool applicable = true;
  std::size_t checks = 0;
  std::vector<std::string> violations;  // first few only
  std::size_t violation_count = 0;

  bool passed() const { return violation_count == 0; }
  void fail(std::string message);
};

struct EquivalenceReport {
  std::string construction;
  Backend backend = Backend::ExactRational;
  std::string fingerprint;
  std::size_t max_len = 0;
  bool exact = true;
  double tolerance = 0;  // tolerance mode only
  std::vector<LengthSummary> lengths;
  std::vector<StringFailure> failures;  // first failure per length
  std::size_t strings_checked = 0;
  std::size_t strings_failed = 0;
  std::vector<AuditResult> audits;

  bool equivalent() const { return strings_failed == 0; }
  bool passed() const;
};

struct VerifyOptions {
  std::size_t max_len = 6;
  double tolerance = 1e-9;  // float models only
  unsigned jobs = 1;
};

/// Exact mode for rational models; |log p_tf - log p_ng| <= tolerance with
/// zeros compared exactly for float models. Also checks that every prefix
/// conditional sums to 1 and that enc is the one-hot of the true history.
template <class T>
EquivalenceReport check_weak_equivalence(const NGramLM& lm, const TransformerModel<T>& model,
                                         const VerifyOptions& options);

/// Strings whose padded length is at most max_padded: all of them while the
/// count stays under cap, plus seeded samples at the longest length.
std::vector<Word> audit_strings(std::size_t alphabet_size, int order, std::size_t max_padded, std::size_t cap = 2000,
                                std::uint64_t seed = 1);

/// Per query position p >= n-1 and head: one-hot at p-h (multihead, sparse),
/// one-hot at p-1 (multilayer), 1/(n-1) on [p-n+2, p] (singlehead). Float
/// hardmax heads also need the runner-up at least 1e-6 below the maximum.
template <class T>
AuditResult check_attention_pattern(const TransformerModel<T>& model, const std::vector<Word>& strings);

/// Multilayer only: after layer l, block b <= min(l, n-2) at padded position
/// p is onehot(y_{p-b}) (BOS when p-b < 1).
template <class T>
AuditResult check_layer_stack(const TransformerModel<T>& model, const std::vector<Word>& strings);

struct DimensionFigures {
  std::size_t contextual = 0;
  std::size_t enc = 0;
};

/// Expected residual width and enc width of a construction.
std::optional<DimensionFigures> expected_dims(std::string_view construction, int order, std::size_t bos_size);

template <class T>
AuditResult check_dims(const TransformerModel<T>& model);

/// Gap >= 1 between the maximum and the next distinct
/// value forces sparsemax = hardmax; gap < 1 samples only get a simplex check.
AuditResult check_sparsemax_gap(std::size_t trials, std::uint64_t seed);

/// Equivalence check plus every applicable audit.
template <class T>
EquivalenceReport verify_model(const NGramLM& lm, const TransformerModel<T>& model, const VerifyOptions& options);

std::string report_to_json(const EquivalenceReport& report);
std::string report_summary(const EquivalenceReport& report);

}  // namespace ngt
