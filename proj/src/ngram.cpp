#include "ngt/ngram.hpp"

#include <algorithm>
#include <cctype>
#include <random>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

namespace ngt {

using nlohmann::json;

Alphabet::Alphabet(std::vector<std::string> symbols, std::string bos, std::string eos)
    : symbols_(std::move(symbols)), bos_(std::move(bos)), eos_(std::move(eos)) {
  if (symbols_.empty()) throw std::invalid_argument("alphabet must contain at least one symbol");
  if (bos_ == eos_) throw std::invalid_argument("BOS and EOS markers must differ");
  std::set<std::string> seen;
  for (const auto& s : symbols_) {
    if (s.empty()) throw std::invalid_argument("alphabet symbols must be non-empty");
    if (std::any_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c) || c == ','; }))
      throw std::invalid_argument("alphabet symbol '" + s + "' contains whitespace or a comma");
    if (s == bos_ || s == eos_) throw std::invalid_argument("alphabet symbol '" + s + "' collides with BOS/EOS");
    if (!seen.insert(s).second) throw std::invalid_argument("duplicate alphabet symbol '" + s + "'");
  }
}

std::optional<std::size_t> Alphabet::find(std::string_view symbol) const {
  const auto it = std::find(symbols_.begin(), symbols_.end(), symbol);
  if (it == symbols_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - symbols_.begin());
}

Word Alphabet::parse(std::string_view text) const {
  std::vector<std::string> tokens;
  const bool separated = std::any_of(text.begin(), text.end(),
                                     [](unsigned char c) { return std::isspace(c) || c == ','; });
  const bool single_chars =
      std::all_of(symbols_.begin(), symbols_.end(), [](const std::string& s) { return s.size() == 1; });
  if (separated || !single_chars) {
    std::string current;
    for (const char c : text) {
      if (std::isspace(static_cast<unsigned char>(c)) || c == ',') {
        if (!current.empty()) tokens.push_back(std::move(current));
        current.clear();
      } else {
        current.push_back(c);
      }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
  } else {
    for (const char c : text) tokens.emplace_back(1, c);
  }
  Word out;
  out.reserve(tokens.size());
  for (const auto& token : tokens) {
    const auto index = find(token);
    if (!index) throw std::invalid_argument("symbol '" + token + "' is not in the alphabet");
    out.push_back(*index);
  }
  return out;
}

std::string Alphabet::format(const Word& word) const {
  const bool single_chars =
      std::all_of(symbols_.begin(), symbols_.end(), [](const std::string& s) { return s.size() == 1; });
  std::string out;
  for (std::size_t i = 0; i < word.size(); ++i) {
    if (i > 0 && !single_chars) out += ' ';
    out += symbol(word[i]);
  }
  return out;
}

bool History::reachable() const {
  bool seen_symbol = false;
  for (const auto s : symbols) {
    if (s == kBos && seen_symbol) return false;
    if (s != kBos) seen_symbol = true;
  }
  return true;
}

std::vector<History> reachable_histories(int order, std::size_t alphabet_size) {
  if (order < 2) throw std::invalid_argument("n-gram order must be at least 2");
  const auto length = static_cast<std::size_t>(order - 1);
  std::vector<History> out;
  // BOS^{length-k} followed by any k real symbols.
  for (std::size_t k = length + 1; k-- > 0;) {
    std::vector<std::size_t> digits(k, 0);
    while (true) {
      History h;
      h.symbols.assign(length - k, kBos);
      for (const auto d : digits) h.symbols.push_back(d + 1);
      out.push_back(std::move(h));
      std::size_t i = k;
      while (i > 0 && ++digits[i - 1] == alphabet_size) digits[--i] = 0;
      if (i == 0) break;
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> pad(const Word& y, int order) {
  if (order < 1) throw std::invalid_argument("order must be positive");
  std::vector<std::size_t> out(static_cast<std::size_t>(order - 1), kBos);
  for (const auto s : y) out.push_back(s + 1);
  return out;
}

History history_before(const Word& y, std::size_t t, int order) {
  if (t > y.size()) throw std::out_of_range("history position past the end of the string");
  const auto padded = pad(y, order);
  History h;
  h.symbols.assign(padded.begin() + static_cast<std::ptrdiff_t>(t),
                   padded.begin() + static_cast<std::ptrdiff_t>(t + order - 1));
  return h;
}

NGramLM::NGramLM(int order, Alphabet alphabet, std::map<History, Row> rows)
    : order_(order), alphabet_(std::move(alphabet)), rows_(std::move(rows)) {
  if (order_ < 2) throw std::invalid_argument("n-gram order must be at least 2");
  const auto expected = reachable_histories(order_, alphabet_.size());
  for (const auto& [history, row] : rows_) {
    if (history.symbols.size() != static_cast<std::size_t>(order_ - 1))
      throw std::invalid_argument("history of wrong length in n-gram table");
    for (const auto s : history.symbols)
      if (s >= alphabet_.bos_size()) throw std::invalid_argument("history symbol outside the alphabet");
    if (!history.reachable()) throw std::invalid_argument("n-gram table contains an unreachable history");
    if (row.size() != alphabet_.eos_size()) throw std::invalid_argument("n-gram row has the wrong number of entries");
    Rational total(0);
    for (const auto& p : row) {
      if (p < 0 || p > 1) throw std::invalid_argument("n-gram probability outside [0, 1]");
      total += p;
    }
    if (total != 1) throw std::invalid_argument("row not normalized (sums to " + format_rational(total) + ")");
  }
  for (const auto& h : expected)
    if (!rows_.contains(h)) throw std::invalid_argument("n-gram table is missing a reachable history");
}

const NGramLM::Row& NGramLM::row(const History& history) const {
  if (!history.reachable()) throw std::invalid_argument("unreachable history");
  const auto it = rows_.find(history);
  if (it == rows_.end()) throw std::invalid_argument("history not in the n-gram table");
  return it->second;
}

const Rational& NGramLM::conditional(std::size_t outcome, const History& history) const {
  const auto& r = row(history);
  if (outcome >= r.size()) throw std::out_of_range("outcome outside Sigma_bar");
  return r[outcome];
}

Rational string_prob(const NGramLM& lm, const Word& y) {
  for (const auto s : y)
    if (s >= lm.alphabet().size()) throw std::invalid_argument("unknown symbol in string");
  Rational p(1);
  for (std::size_t t = 0; t <= y.size(); ++t) {
    const auto outcome = t < y.size() ? y[t] : lm.alphabet().eos_index();
    p *= lm.conditional(outcome, history_before(y, t, lm.order()));
    if (sgn(p) == 0) break;
  }
  return p;
}

namespace {

// Uniform integer in [0, bound) via rejection; the standard distributions are
// implementation-defined, this is not.
std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t bound) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
  while (true) {
    const std::uint64_t draw = rng();
    if (draw < limit) return draw % bound;
  }
}

}  // namespace

NGramLM random_lm(int order, const Alphabet& alphabet, std::uint64_t seed, std::uint64_t max_denominator,
                  unsigned zero_percent) {
  if (order < 2) throw std::invalid_argument("n-gram order must be at least 2");
  if (max_denominator < alphabet.eos_size()) throw std::invalid_argument("max_denominator must be at least |Sigma_bar|");
  if (zero_percent >= 100) throw std::invalid_argument("zero_percent must be below 100");
  std::mt19937_64 rng(seed);
  std::map<History, NGramLM::Row> rows;
  for (auto& history : reachable_histories(order, alphabet.size())) {
    std::vector<std::uint64_t> weights(alphabet.eos_size());
    for (auto& w : weights) {
      const bool zero = zero_percent > 0 && uniform_below(rng, 100) < zero_percent;
      const std::uint64_t draw = 1 + uniform_below(rng, max_denominator);
      w = zero ? 0 : draw;
    }
    if (std::all_of(weights.begin(), weights.end(), [](std::uint64_t w) { return w == 0; }))
      weights[uniform_below(rng, weights.size())] = 1 + uniform_below(rng, max_denominator);
    mpz_class total(0);
    for (const auto w : weights) total += mpz_class(std::to_string(w));
    NGramLM::Row row;
    for (const auto w : weights) {
      Rational p(mpz_class(std::to_string(w)), total);
      p.canonicalize();
      row.push_back(p);
    }
    rows.emplace(std::move(history), std::move(row));
  }
  return NGramLM(order, alphabet, std::move(rows));
}

NGramLM estimate_mle(const std::vector<Word>& corpus, int order, const Alphabet& alphabet, const Rational& lambda) {
  if (lambda < 0) throw std::invalid_argument("smoothing constant must be non-negative");
  if (order < 2) throw std::invalid_argument("n-gram order must be at least 2");
  std::map<History, std::vector<mpz_class>> counts;
  for (const auto& y : corpus) {
    for (const auto s : y)
      if (s >= alphabet.size()) throw std::invalid_argument("corpus symbol outside the alphabet");
    for (std::size_t t = 0; t <= y.size(); ++t) {
      auto& row = counts[history_before(y, t, order)];
      row.resize(alphabet.eos_size());
      row[t < y.size() ? y[t] : alphabet.eos_index()] += 1;
    }
  }
  const Rational outcomes(static_cast<long>(alphabet.eos_size()));
  std::map<History, NGramLM::Row> rows;
  for (auto& history : reachable_histories(order, alphabet.size())) {
    const auto it = counts.find(history);
    mpz_class total(0);
    if (it != counts.end())
      for (const auto& c : it->second) total += c;
    const Rational denominator = Rational(total) + lambda * outcomes;
    NGramLM::Row row;
    for (std::size_t y = 0; y < alphabet.eos_size(); ++y) {
      if (sgn(denominator) == 0) {
        row.emplace_back(Rational(1) / outcomes);
        continue;
      }
      const mpz_class c = it == counts.end() ? mpz_class(0) : it->second[y];
      Rational p = (Rational(c) + lambda) / denominator;
      p.canonicalize();
      row.push_back(p);
    }
    rows.emplace(std::move(history), std::move(row));
  }
  return NGramLM(order, alphabet, std::move(rows));
}

NGramLM estimate_mle(const std::vector<std::vector<std::string>>& corpus, int order, const Alphabet& alphabet,
                     const Rational& lambda) {
  std::vector<Word> words;
  for (const auto& tokens : corpus) {
    Word w;
    for (const auto& token : tokens) {
      const auto index = alphabet.find(token);
      if (!index) throw std::invalid_argument("corpus symbol '" + token + "' is not in the alphabet");
      w.push_back(*index);
    }
    words.push_back(std::move(w));
  }
  return estimate_mle(words, order, alphabet, lambda);
}

namespace {

std::string history_key(const Alphabet& alphabet, const History& h) {
  std::string out;
  for (std::size_t i = 0; i < h.symbols.size(); ++i) {
    if (i > 0) out += ' ';
    out += alphabet.bos_symbol(h.symbols[i]);
  }
  return out;
}

// Parses JSON and rejects duplicate object keys at any depth.
json parse_strict(std::string_view text) {
  std::vector<std::set<std::string>> keys;
  json::parser_callback_t callback = [&keys](int /*depth*/, json::parse_event_t event, json& parsed) {
    switch (event) {
      case json::parse_event_t::object_start:
        keys.emplace_back();
        break;
      case json::parse_event_t::object_end:
        keys.pop_back();
        break;
      case json::parse_event_t::key:
        if (!keys.back().insert(parsed.get<std::string>()).second)
          throw std::invalid_argument("duplicate key '" + parsed.get<std::string>() + "'");
        break;
      default:
        break;
    }
    return true;
  };
  try {
    return json::parse(text.begin(), text.end(), callback);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed file: ") + e.what());
  }
}

}  // namespace

std::string serialize_lm(const NGramLM& lm) {
  const auto& alphabet = lm.alphabet();
  json rows = json::object();
  for (const auto& [history, row] : lm.rows()) {
    json entries = json::object();
    for (std::size_t y = 0; y < row.size(); ++y) entries[alphabet.eos_symbol(y)] = format_rational(row[y]);
    rows[history_key(alphabet, history)] = std::move(entries);
  }
  json doc = {{"order", lm.order()},
              {"alphabet", alphabet.symbols()},
              {"bos", alphabet.bos()},
              {"eos", alphabet.eos()},
              {"rows", std::move(rows)}};
  return doc.dump(2) + "\n";
}

NGramLM deserialize_lm(std::string_view text) {
  const json doc = parse_strict(text);
  try {
    if (!doc.is_object()) throw std::invalid_argument("LM file must be a JSON object");
    const int order = doc.at("order").get<int>();
    Alphabet alphabet(doc.at("alphabet").get<std::vector<std::string>>(), doc.value("bos", std::string("<bos>")),
                      doc.value("eos", std::string("<eos>")));
    std::map<History, NGramLM::Row> rows;
    for (const auto& [key, entries] : doc.at("rows").items()) {
      History history;
      std::istringstream in(key);
      std::string name;
      while (in >> name) {
        if (name == alphabet.bos()) {
          history.symbols.push_back(kBos);
        } else if (const auto index = alphabet.find(name)) {
          history.symbols.push_back(*index + 1);
        } else {
          throw std::invalid_argument("unknown symbol '" + name + "' in history '" + key + "'");
        }
      }
      if (history.symbols.size() != static_cast<std::size_t>(order - 1))
        throw std::invalid_argument("history '" + key + "' does not have order-1 symbols");
      NGramLM::Row row(alphabet.eos_size(), Rational(0));
      for (const auto& [symbol, value] : entries.items()) {
        std::size_t outcome = 0;
        if (symbol == alphabet.eos()) {
          outcome = alphabet.eos_index();
        } else if (const auto index = alphabet.find(symbol)) {
          outcome = *index;
        } else {
          throw std::invalid_argument("unknown outcome '" + symbol + "' in row '" + key + "'");
        }
        row[outcome] = parse_rational(value.get<std::string>());
      }
      if (!rows.emplace(std::move(history), std::move(row)).second)
        throw std::invalid_argument("duplicate history '" + key + "'");
    }
    return NGramLM(order, std::move(alphabet), std::move(rows));
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed LM file: ") + e.what());
  }
}

std::string fingerprint(const NGramLM& lm) {
  std::uint64_t hash = 14695981039346656037ULL;
  for (const unsigned char c : serialize_lm(lm)) {
    hash ^= c;
    hash *= 1099511628211ULL;
  }
  return fmt::format("{:016x}", hash);
}

void for_each_string(std::size_t alphabet_size, std::size_t max_len, const std::function<void(const Word&)>& visit) {
  for (std::size_t len = 0; len <= max_len; ++len) {
    Word w(len, 0);
    while (true) {
      visit(w);
      std::size_t i = len;
      while (i > 0 && ++w[i - 1] == alphabet_size) w[--i] = 0;
      if (i == 0) break;
    }
  }
}

std::vector<Word> enumerate_strings(std::size_t alphabet_size, std::size_t max_len) {
  std::vector<Word> out;
  for_each_string(alphabet_size, max_len, [&out](const Word& w) { out.push_back(w); });
  return out;
}

}  // namespace ngt
