#include "ngt/verify.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <thread>

#include <fmt/format.h>
#include <json.hpp>

#include "ngt/compile.hpp"

namespace ngt {

namespace {

constexpr std::size_t kMaxViolationMessages = 10;
constexpr double kFloatSumTolerance = 1e-12;
constexpr double kFloatScoreMargin = 1e-6;

std::string word_text(const Alphabet& alphabet, const Word& y) {
  return y.empty() ? std::string("\"\"") : alphabet.format(y);
}

template <class T>
bool sums_to_one(const Vec<T>& dist) {
  const T total = sum<T>(dist);
  if constexpr (ScalarTraits<T>::kExact) {
    return total == 1;
  } else {
    return std::abs(total - 1.0) <= kFloatSumTolerance;
  }
}

template <class T>
bool is_one_hot_at(const Vec<T>& v, std::size_t index) {
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i] != (i == index ? T(1) : T(0))) return false;
  return true;
}

struct Shard {
  std::vector<LengthSummary> lengths;
  std::vector<std::optional<std::pair<std::size_t, StringFailure>>> first_failure;
  AuditResult recovery{"history_recovery"};
  AuditResult sums{"conditional_sums"};
};

}  // namespace

void AuditResult::fail(std::string message) {
  ++violation_count;
  if (violations.size() < kMaxViolationMessages) violations.push_back(std::move(message));
}

bool EquivalenceReport::passed() const {
  if (!equivalent()) return false;
  return std::all_of(audits.begin(), audits.end(), [](const AuditResult& a) { return !a.applicable || a.passed(); });
}

template <class T>
EquivalenceReport check_weak_equivalence(const NGramLM& lm, const TransformerModel<T>& model,
                                         const VerifyOptions& options) {
  if (!(lm.alphabet() == model.alphabet)) throw std::invalid_argument("alphabet mismatch between LM and model");
  if (lm.order() != model.order) throw std::invalid_argument("order mismatch between LM and model");
  constexpr bool exact = ScalarTraits<T>::kExact;

  EquivalenceReport report;
  report.construction = model.construction;
  report.backend = model.backend();
  report.fingerprint = fingerprint(lm);
  report.max_len = options.max_len;
  report.exact = exact;
  report.tolerance = exact ? 0.0 : options.tolerance;

  const auto n = model.order;
  const auto& alphabet = model.alphabet;
  const HistoryIndexer indexer(alphabet.bos_size(), static_cast<std::size_t>(n - 1));
  const bool recovery_applicable = model.enc_dim() == indexer.size();
  const auto strings = enumerate_strings(alphabet.size(), options.max_len);

  const auto run_shard = [&](std::size_t begin, std::size_t end, Shard& shard) {
    shard.lengths.resize(options.max_len + 1);
    shard.first_failure.resize(options.max_len + 1);
    shard.recovery.applicable = recovery_applicable;
    for (std::size_t i = begin; i < end; ++i) {
      const Word& y = strings[i];
      auto& summary = shard.lengths[y.size()];
      ++summary.strings;
      const Rational p_lm = string_prob(lm, y);
      if (is_zero(p_lm)) ++summary.zero_probability;

      std::string reason;
      T p_model(1);
      try {
        const auto xs = transformer_forward(model, y);
        for (std::size_t t = 0; t <= y.size(); ++t) {
          const auto enc = model.final.apply(xs[static_cast<std::size_t>(n - 2) + t]);
          if (recovery_applicable) {
            ++shard.recovery.checks;
            const auto h = history_before(y, t, n);
            if (!is_one_hot_at(enc, indexer.index(h.symbols)))
              shard.recovery.fail(fmt::format("enc is not the history one-hot after prefix {} (t={})",
                                              word_text(alphabet, y), t));
          }
          const auto dist = output_distribution<T>(model, enc);
          ++shard.sums.checks;
          if (!sums_to_one(dist))
            shard.sums.fail(fmt::format("conditional after {} (t={}) sums to {}", word_text(alphabet, y), t,
                                        format_scalar(sum<T>(dist))));
          p_model *= dist[t < y.size() ? y[t] : alphabet.eos_index()];
        }
      } catch (const std::exception& e) {
        reason = std::string("evaluation error: ") + e.what();
      }

      if (reason.empty()) {
        if constexpr (exact) {
          if (p_model != p_lm) reason = "probabilities differ";
        } else {
          if (is_zero(p_lm) || is_zero(p_model)) {
            if (!(is_zero(p_lm) && is_zero(p_model))) reason = "zero-probability mismatch";
          } else {
            const double deviation = std::abs(std::log(p_model) - log_rational(p_lm));
            summary.max_deviation = std::max(summary.max_deviation, deviation);
            if (!(deviation <= options.tolerance)) reason = fmt::format("|dlog p| = {:.3e} exceeds tolerance", deviation);
          }
        }
      }
      if (!reason.empty()) {
        ++summary.failures;
        auto& slot = shard.first_failure[y.size()];
        if (!slot)
          slot.emplace(i, StringFailure{word_text(alphabet, y), y.size(), format_rational(p_lm),
                                        reason.starts_with("evaluation error") ? std::string("n/a") : format_scalar(p_model),
                                        reason});
      }
    }
  };

  const std::size_t jobs = std::max<std::size_t>(1, std::min<std::size_t>(options.jobs, strings.size()));
  std::vector<Shard> shards(jobs);
  if (jobs == 1) {
    run_shard(0, strings.size(), shards[0]);
  } else {
    std::vector<std::thread> workers;
    const std::size_t chunk = (strings.size() + jobs - 1) / jobs;
    for (std::size_t w = 0; w < jobs; ++w) {
      const auto begin = std::min(strings.size(), w * chunk);
      const auto end = std::min(strings.size(), begin + chunk);
      workers.emplace_back(run_shard, begin, end, std::ref(shards[w]));
    }
    for (auto& worker : workers) worker.join();
  }

  // Shards are contiguous in enumeration order, so merging in shard order is deterministic.
  report.lengths.resize(options.max_len + 1);
  AuditResult recovery{"history_recovery"};
  recovery.applicable = recovery_applicable;
  AuditResult sums{"conditional_sums"};
  std::vector<std::optional<std::pair<std::size_t, StringFailure>>> first(options.max_len + 1);
  for (const auto& shard : shards) {
    if (shard.lengths.empty()) continue;
    for (std::size_t len = 0; len <= options.max_len; ++len) {
      auto& dst = report.lengths[len];
      const auto& src = shard.lengths[len];
      dst.length = len;
      dst.strings += src.strings;
      dst.zero_probability += src.zero_probability;
      dst.failures += src.failures;
      dst.max_deviation = std::max(dst.max_deviation, src.max_deviation);
      if (shard.first_failure[len] && (!first[len] || shard.first_failure[len]->first < first[len]->first))
        first[len] = shard.first_failure[len];
    }
    for (auto [dst, src] : {std::pair{&recovery, &shard.recovery}, std::pair{&sums, &shard.sums}}) {
      dst->checks += src->checks;
      dst->violation_count += src->violation_count;
      for (const auto& v : src->violations)
        if (dst->violations.size() < kMaxViolationMessages) dst->violations.push_back(v);
    }
  }
  for (std::size_t len = 0; len <= options.max_len; ++len) {
    report.lengths[len].length = len;
    report.strings_checked += report.lengths[len].strings;
    report.strings_failed += report.lengths[len].failures;
    if (first[len]) report.failures.push_back(first[len]->second);
  }

  AuditResult mass{"ngram_mass"};
  Rational total(0);
  for (std::size_t len = 0; len <= options.max_len; ++len) {
    for_each_string(alphabet.size(), len, [&](const Word& y) {
      if (y.size() == len) total += string_prob(lm, y);
    });
    ++mass.checks;
    if (total > 1) mass.fail(fmt::format("mass of strings up to length {} is {} > 1", len, format_rational(total)));
  }
  report.audits.push_back(std::move(recovery));
  report.audits.push_back(std::move(sums));
  report.audits.push_back(std::move(mass));
  return report;
}

std::vector<Word> audit_strings(std::size_t alphabet_size, int order, std::size_t max_padded, std::size_t cap,
                                std::uint64_t seed) {
  const auto bos = static_cast<std::size_t>(order - 1);
  if (max_padded < bos) return {};
  const std::size_t max_len = max_padded - bos;
  std::vector<Word> out;
  std::size_t full = 0;
  std::size_t layer_count = 1;
  std::size_t total = 1;
  while (full < max_len) {
    layer_count *= alphabet_size;
    if (total + layer_count > cap) break;
    total += layer_count;
    ++full;
  }
  for_each_string(alphabet_size, full, [&](const Word& w) { out.push_back(w); });
  std::mt19937_64 rng(seed);
  for (std::size_t len = full + 1; len <= max_len; ++len) {
    for (int sample = 0; sample < 25; ++sample) {
      Word w(len);
      for (auto& s : w) s = static_cast<std::size_t>(rng() % alphabet_size);
      out.push_back(std::move(w));
    }
  }
  return out;
}

template <class T>
AuditResult check_attention_pattern(const TransformerModel<T>& model, const std::vector<Word>& strings) {
  AuditResult audit{"attention_pattern"};
  const auto& kind = model.construction;
  if (kind != "multihead" && kind != "sparse" && kind != "multilayer" && kind != "singlehead") {
    audit.applicable = false;
    return audit;
  }
  const auto n = static_cast<std::size_t>(model.order);
  for (const auto& y : strings) {
    ForwardTrace<T> trace;
    try {
      transformer_forward(model, y, &trace);
    } catch (const std::exception& e) {
      audit.fail(fmt::format("forward pass on {} failed: {}", word_text(model.alphabet, y), e.what()));
      continue;
    }
    for (const auto& rec : trace.attention) {
      const auto p = rec.query_pos;
      if (p < n - 1) continue;
      ++audit.checks;
      Vec<T> expected(p, T(0));
      if (kind == "singlehead") {
        for (std::size_t j = p + 2 - n; j <= p; ++j) expected[j - 1] = T(1) / T(static_cast<long>(n - 1));
      } else {
        const std::size_t target = kind == "multilayer" ? std::max<std::size_t>(p - 1, 1) : p - rec.head;
        expected[target - 1] = T(1);
      }
      const auto where = fmt::format("layer {} head {} query {} on {}", rec.layer, rec.head, p, word_text(model.alphabet, y));
      if (rec.weights != expected) {
        audit.fail("unexpected attention weights at " + where);
        continue;
      }
      if constexpr (!ScalarTraits<T>::kExact) {
        const auto& head = model.layers[rec.layer - 1].heads[rec.head];
        if (head.normalizer == Normalizer::Hardmax && p > 1) {
          const auto best = std::max_element(rec.scores.begin(), rec.scores.end());
          double runner_up = -std::numeric_limits<double>::infinity();
          for (auto it = rec.scores.begin(); it != rec.scores.end(); ++it)
            if (it != best) runner_up = std::max(runner_up, *it);
          if (*best - runner_up < kFloatScoreMargin)
            audit.fail(fmt::format("score margin {:.3e} below {:.0e} at {}", *best - runner_up, kFloatScoreMargin, where));
        }
      }
    }
  }
  return audit;
}

template <class T>
AuditResult check_layer_stack(const TransformerModel<T>& model, const std::vector<Word>& strings) {
  AuditResult audit{"layer_stack"};
  if (model.construction != "multilayer") {
    audit.applicable = false;
    return audit;
  }
  const auto b = model.alphabet.bos_size();
  const auto top_block = static_cast<std::size_t>(model.order - 2);
  for (const auto& y : strings) {
    ForwardTrace<T> trace;
    transformer_forward(model, y, &trace);
    const auto padded = pad(y, model.order);
    for (std::size_t l = 0; l < trace.layer_outputs.size(); ++l) {
      bool ok = true;
      for (std::size_t p = 1; p <= padded.size() && ok; ++p) {
        const auto& x = trace.layer_outputs[l][p - 1];
        for (std::size_t blk = 0; blk <= std::min(l, top_block) && ok; ++blk) {
          ++audit.checks;
          const std::size_t symbol = p > blk ? padded[p - 1 - blk] : kBos;
          for (std::size_t s = 0; s < b; ++s) {
            if (x[blk * b + s] != (s == symbol ? T(1) : T(0))) {
              audit.fail(fmt::format("after layer {}, block {} at position {} of {} is not onehot({})", l, blk, p,
                                     word_text(model.alphabet, y), model.alphabet.bos_symbol(symbol)));
              ok = false;
              break;
            }
          }
        }
      }
    }
  }
  return audit;
}

std::optional<DimensionFigures> expected_dims(std::string_view construction, int order, std::size_t bos_size) {
  const auto n = static_cast<std::size_t>(order);
  const HistoryIndexer indexer(bos_size, n - 1);
  DimensionFigures dims{0, indexer.size()};
  if (construction == "multihead") {
    dims.contextual = 2 * bos_size + 2 * n;
  } else if (construction == "multilayer") {
    dims.contextual = (n - 1) * bos_size + 4;
  } else if (construction == "singlehead") {
    dims.contextual = bos_size + 2;
  } else if (construction == "sparse") {
    dims.contextual = 2 * bos_size + 2;
  } else {
    return std::nullopt;
  }
  return dims;
}

template <class T>
AuditResult check_dims(const TransformerModel<T>& model) {
  AuditResult audit{"dimensions"};
  const auto expected = expected_dims(model.construction, model.order, model.alphabet.bos_size());
  if (!expected) {
    audit.applicable = false;
    return audit;
  }
  const auto b = model.alphabet.bos_size();
  const auto n = static_cast<std::size_t>(model.order);
  constexpr std::size_t c1 = 4;
  ++audit.checks;
  if (model.encoding.dim() != expected->contextual)
    audit.fail(fmt::format("static encoding dim {} != {}", model.encoding.dim(), expected->contextual));
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    for (std::size_t h = 0; h < model.layers[l].heads.size(); ++h) {
      ++audit.checks;
      const auto width = model.layers[l].heads[h].value.out_dim();
      if (width != expected->contextual)
        audit.fail(fmt::format("layer {} head {} residual width {} != {}", l + 1, h, width, expected->contextual));
    }
  }
  ++audit.checks;
  if (expected->contextual > c1 * n * b)
    audit.fail(fmt::format("contextual dim {} exceeds {}*n*|Sigma_bos| = {}", expected->contextual, c1, c1 * n * b));
  ++audit.checks;
  if (model.enc_dim() != expected->enc)
    audit.fail(fmt::format("enc dim {} != |Sigma_bos|^(n-1) = {}", model.enc_dim(), expected->enc));
  return audit;
}

AuditResult check_sparsemax_gap(std::size_t trials, std::uint64_t seed) {
  AuditResult audit{"sparsemax_gap"};
  std::mt19937_64 rng(seed);
  const auto uniform = [&rng](long lo, long hi) {
    return lo + static_cast<long>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
  };
  const auto random_rational = [&](long lo, long hi) {
    Rational r(uniform(lo, hi), uniform(1, 12));
    r.canonicalize();
    return r;
  };
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const auto dim = static_cast<std::size_t>(uniform(2, 8));
    Vec<Rational> x(dim);
    for (auto& v : x) v = random_rational(-60, 60);
    // Lift the maximum (and an occasional tie) to at least the runner-up + 1.
    const std::size_t top = static_cast<std::size_t>(uniform(0, static_cast<long>(dim) - 1));
    Rational runner_up = -1000;
    for (std::size_t i = 0; i < dim; ++i)
      if (i != top) runner_up = std::max(runner_up, x[i]);
    x[top] = runner_up + 1 + random_rational(0, 20);
    if (dim > 2 && uniform(0, 3) == 0) {
      const std::size_t twin = (top + 1) % dim;
      x[twin] = x[top];
    }
    ++audit.checks;
    if (sparsemax<Rational>(x) != hardmax<Rational>(x, Rational(0))) {
      std::string text;
      for (const auto& v : x) text += format_rational(v) + " ";
      audit.fail("sparsemax != hardmax for gap >= 1 input [ " + text + "]");
    }
    // gap < 1: only simplex membership.
    Vec<Rational> close(dim);
    for (auto& v : close) v = random_rational(-3, 3);
    const auto p = sparsemax<Rational>(close);
    ++audit.checks;
    if (sum<Rational>(p) != 1 || std::any_of(p.begin(), p.end(), [](const Rational& v) { return v < 0; }))
      audit.fail("sparsemax left the simplex");
  }
  return audit;
}

template <class T>
EquivalenceReport verify_model(const NGramLM& lm, const TransformerModel<T>& model, const VerifyOptions& options) {
  auto report = check_weak_equivalence(lm, model, options);
  const auto strings = audit_strings(model.alphabet.size(), model.order, 10);
  report.audits.push_back(check_attention_pattern(model, strings));
  report.audits.push_back(check_layer_stack(model, strings));
  report.audits.push_back(check_dims(model));
  bool uses_sparsemax = false;
  for (const auto& layer : model.layers)
    for (const auto& head : layer.heads) uses_sparsemax |= head.normalizer == Normalizer::Sparsemax;
  if (uses_sparsemax) report.audits.push_back(check_sparsemax_gap(1000, 1));
  return report;
}

std::string report_to_json(const EquivalenceReport& report) {
  using nlohmann::ordered_json;
  ordered_json lengths = ordered_json::array();
  for (const auto& l : report.lengths) {
    ordered_json entry{{"length", l.length},
                       {"strings", l.strings},
                       {"zero_probability", l.zero_probability},
                       {"failures", l.failures}};
    if (report.exact) {
      entry["exact_equal"] = l.failures == 0;
    } else {
      entry["max_abs_log_deviation"] = l.max_deviation;
    }
    lengths.push_back(std::move(entry));
  }
  ordered_json failures = ordered_json::array();
  for (const auto& f : report.failures)
    failures.push_back({{"string", f.text},
                        {"length", f.length},
                        {"lm_probability", f.lm_probability},
                        {"model_probability", f.model_probability},
                        {"reason", f.reason}});
  // Audit failures are listed too, so the list is empty exactly when the verdict is pass.
  for (const auto& a : report.audits)
    if (a.applicable && !a.passed())
      failures.push_back({{"audit", a.name},
                          {"violations", a.violation_count},
                          {"first", a.violations.empty() ? std::string() : a.violations.front()}});
  ordered_json audits = ordered_json::array();
  for (const auto& a : report.audits)
    audits.push_back({{"name", a.name},
                      {"applicable", a.applicable},
                      {"passed", !a.applicable || a.passed()},
                      {"checks", a.checks},
                      {"violations", a.violation_count},
                      {"examples", a.violations}});
  ordered_json doc{{"construction", report.construction},
                   {"backend", backend_name(report.backend)},
                   {"lm_fingerprint", report.fingerprint},
                   {"max_len", report.max_len},
                   {"mode", report.exact ? "exact" : "tolerance"}};
  if (!report.exact) doc["tolerance"] = report.tolerance;
  doc["strings_checked"] = report.strings_checked;
  doc["strings_failed"] = report.strings_failed;
  doc["lengths"] = std::move(lengths);
  doc["failures"] = std::move(failures);
  doc["audits"] = std::move(audits);
  doc["verdict"] = report.passed() ? "pass" : "fail";
  doc["note"] = "strings up to max_len are a finite proxy for Sigma*";
  return doc.dump(2) + "\n";
}

std::string report_summary(const EquivalenceReport& report) {
  std::string out;
  out += fmt::format("construction {} ({}), lm {}\n", report.construction, backend_name(report.backend), report.fingerprint);
  out += fmt::format("{:>6}  {:>8}  {:>6}  {:>8}  {}\n", "length", "strings", "zero", "failures",
                     report.exact ? "equal" : "max|dlog p|");
  for (const auto& l : report.lengths)
    out += fmt::format("{:>6}  {:>8}  {:>6}  {:>8}  {}\n", l.length, l.strings, l.zero_probability, l.failures,
                       report.exact ? (l.failures == 0 ? "yes" : "no") : fmt::format("{:.3e}", l.max_deviation));
  const auto ok = report.strings_checked - report.strings_failed;
  if (report.exact) {
    out += fmt::format("exact: {}/{}\n", ok, report.strings_checked);
  } else {
    out += fmt::format("tolerance {:.0e}: {}/{}\n", report.tolerance, ok, report.strings_checked);
  }
  for (const auto& f : report.failures)
    out += fmt::format("  FAIL {} : lm {} vs model {} ({})\n", f.text, f.lm_probability, f.model_probability, f.reason);
  for (const auto& a : report.audits) {
    if (!a.applicable) {
      out += fmt::format("audit {:<18} n/a\n", a.name);
      continue;
    }
    out += fmt::format("audit {:<18} {} ({} checks)\n", a.name, a.passed() ? "pass" : "FAIL", a.checks);
    for (const auto& v : a.violations) out += "  " + v + "\n";
  }
  out += fmt::format("verdict: {}\n", report.passed() ? "PASS" : "FAIL");
  return out;
}

#define NGT_INSTANTIATE(T)                                                                                          \
  template EquivalenceReport check_weak_equivalence<T>(const NGramLM&, const TransformerModel<T>&,                  \
                                                       const VerifyOptions&);                                        \
  template AuditResult check_attention_pattern<T>(const TransformerModel<T>&, const std::vector<Word>&);            \
  template AuditResult check_layer_stack<T>(const TransformerModel<T>&, const std::vector<Word>&);                  \
  template AuditResult check_dims<T>(const TransformerModel<T>&);                                                   \
  template EquivalenceReport verify_model<T>(const NGramLM&, const TransformerModel<T>&, const VerifyOptions&);

NGT_INSTANTIATE(Rational)
NGT_INSTANTIATE(double)

#undef NGT_INSTANTIATE

}  // namespace ngt
