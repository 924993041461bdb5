// ngt: generate or estimate n-gram LMs, compile them into transformer
// weights, verify weak equivalence, and inspect attention.
//
// Exit codes: 0 success / verification passed, 1 verification failed or
// runtime error, 2 usage error.

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "ngt/compile.hpp"
#include "ngt/verify.hpp"

namespace {

using namespace ngt;

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_output(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path);
}

Alphabet parse_alphabet(const std::string& spec) {
  std::vector<std::string> symbols;
  std::stringstream stream(spec);
  std::string symbol;
  while (std::getline(stream, symbol, ',')) symbols.push_back(symbol);
  return Alphabet(symbols);
}

struct Config {
  int order = 2;
  std::string alphabet = "a,b";
  std::uint64_t seed = 1;
  std::uint64_t max_den = 1000;
  unsigned zero_percent = 0;
  std::string lambda = "0";
  std::string construction = "sparse";
  std::string backend;
  std::size_t max_len = 6;
  double tol = 1e-9;
  unsigned jobs = 1;
  std::string out;
  std::string report;
  std::string input;
  std::string model;
  std::string text;
};

int cmd_gen(const Config& c) {
  const auto lm = random_lm(c.order, parse_alphabet(c.alphabet), c.seed, c.max_den, c.zero_percent);
  write_output(c.out, serialize_lm(lm));
  if (!c.out.empty() && c.out != "-") fmt::print("fingerprint {}\n", fingerprint(lm));
  return 0;
}

int cmd_estimate(const Config& c) {
  const auto alphabet = parse_alphabet(c.alphabet);
  std::vector<Word> corpus;
  std::istringstream lines(read_file(c.input));
  std::string line;
  while (std::getline(lines, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    corpus.push_back(alphabet.parse(line));
  }
  const auto lm = estimate_mle(corpus, c.order, alphabet, parse_rational(c.lambda));
  write_output(c.out, serialize_lm(lm));
  if (!c.out.empty() && c.out != "-") fmt::print("fingerprint {} ({} strings)\n", fingerprint(lm), corpus.size());
  return 0;
}

template <class T>
void print_compile_summary(const TransformerModel<T>& model) {
  fmt::print("construction {} ({}), n={}, |Sigma|={}\n", model.construction, backend_name(model.backend()),
             model.order, model.alphabet.size());
  const auto dims = check_dims(model);
  const auto expected = expected_dims(model.construction, model.order, model.alphabet.bos_size());
  fmt::print("contextual dim {}, enc dim {}, layers {}\n", model.encoding.dim(), model.enc_dim(), model.layers.size());
  if (expected)
    fmt::print("dimension audit: {} (expected contextual {}, enc {})\n", dims.passed() ? "pass" : "FAIL",
               expected->contextual, expected->enc);
  if (model.encoding.kind == EncodingKind::SqrtMultiHead || model.encoding.kind == EncodingKind::SqrtMultiLayer)
    fmt::print("margin check: positions up to {} keep score margin {:.3e} >= 1e-6\n", model.max_position,
               sqrt_encoding_margin(model.max_position));
}

int cmd_compile(const Config& c) {
  const auto lm = deserialize_lm(read_file(c.input));
  const auto kind = parse_construction(c.construction);
  const auto backend = c.backend.empty() ? default_backend(kind) : parse_backend(c.backend);
  const auto model = compile_model(lm, kind, backend);
  std::visit(
      [&](const auto& m) {
        write_output(c.out, serialize_model(m));
        if (!c.out.empty() && c.out != "-") print_compile_summary(m);
      },
      model);
  return 0;
}

int cmd_verify(const Config& c) {
  const auto lm = deserialize_lm(read_file(c.input));
  const auto model = deserialize_model(read_file(c.model));
  VerifyOptions options;
  options.max_len = c.max_len;
  options.tolerance = c.tol;
  options.jobs = c.jobs;
  const auto report = std::visit([&](const auto& m) { return verify_model(lm, m, options); }, model);
  fmt::print("{}", report_summary(report));
  if (!c.report.empty()) write_output(c.report, report_to_json(report));
  return report.passed() ? 0 : kExitFailure;
}

template <class T>
void print_inspection(const TransformerModel<T>& model, const Word& y) {
  const auto& alphabet = model.alphabet;
  const auto padded = pad(y, model.order);
  fmt::print("model {} ({}), n={}\n", model.construction, backend_name(model.backend()), model.order);
  std::string padded_text;
  for (const auto s : padded) padded_text += (padded_text.empty() ? "" : " ") + alphabet.bos_symbol(s);
  fmt::print("padded input: {}\n", padded_text);

  ForwardTrace<T> trace;
  const auto xs = transformer_forward(model, y, &trace);

  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    for (std::size_t h = 0; h < model.layers[l].heads.size(); ++h) {
      const auto& head = model.layers[l].heads[h];
      fmt::print("\nlayer {} head {} ({}, {})\n", l + 1, h, scoring_name(head.scoring), normalizer_name(head.normalizer));
      std::string header = fmt::format("{:>6}", "query");
      for (std::size_t j = 1; j <= padded.size(); ++j) header += fmt::format(" {:>10}", j);
      fmt::print("{}\n", header);
      for (const auto& rec : trace.attention) {
        if (rec.layer != l + 1 || rec.head != h) continue;
        std::string row = fmt::format("{:>6}", rec.query_pos);
        for (const auto& w : rec.weights) row += fmt::format(" {:>10}", is_zero(w) ? std::string("0") : format_scalar(w));
        fmt::print("{}\n", row);
      }
    }
  }

  if (model.construction == "multilayer") {
    const auto b = alphabet.bos_size();
    const auto blocks = static_cast<std::size_t>(model.order - 1);
    fmt::print("\nstacked blocks (block 0 = current symbol)\n");
    for (std::size_t l = 0; l < trace.layer_outputs.size(); ++l) {
      fmt::print("after layer {}:\n", l);
      for (std::size_t p = 1; p <= padded.size(); ++p) {
        std::string row = fmt::format("  p={:<3}", p);
        for (std::size_t blk = 0; blk < blocks; ++blk) {
          std::string cell = ".";
          for (std::size_t s = 0; s < b; ++s)
            if (trace.layer_outputs[l][p - 1][blk * b + s] == T(1)) cell = alphabet.bos_symbol(s);
          row += fmt::format(" {:>6}", cell);
        }
        fmt::print("{}\n", row);
      }
    }
  }

  const HistoryIndexer indexer(alphabet.bos_size(), static_cast<std::size_t>(model.order - 1));
  fmt::print("\nprediction points\n");
  for (std::size_t t = 0; t <= y.size(); ++t) {
    const std::size_t p = static_cast<std::size_t>(model.order - 1) + t;
    const auto enc = model.final.apply(xs[p - 1]);
    const auto history = history_before(y, t, model.order);
    std::string names;
    for (const auto s : history.symbols) names += (names.empty() ? "" : " ") + alphabet.bos_symbol(s);
    std::string decoded = "not one-hot";
    std::size_t ones = 0;
    std::size_t at = 0;
    bool binary = true;
    for (std::size_t i = 0; i < enc.size(); ++i) {
      if (enc[i] == T(1)) {
        ++ones;
        at = i;
      } else if (enc[i] != T(0)) {
        binary = false;
      }
    }
    if (binary && ones == 1) decoded = std::to_string(at);
    const auto dist = output_distribution<T>(model, enc);
    std::string next;
    for (std::size_t s = 0; s < dist.size(); ++s)
      next += fmt::format("{}{}={}", next.empty() ? "" : " ", alphabet.eos_symbol(s), format_scalar(dist[s]));
    fmt::print("  p={:<3} history [{}] index {} enc {}  next: {}\n", p, names,
               indexer.index(history.symbols), decoded, next);
  }
}

int cmd_inspect(const Config& c) {
  const auto model = deserialize_model(read_file(c.model));
  std::visit([&](const auto& m) { print_inspection(m, m.alphabet.parse(c.text)); }, model);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compile n-gram language models into transformer weights and verify them"};
  app.require_subcommand(1);
  Config c;

  const auto add_order = [&](CLI::App* sub) {
    sub->add_option("-n,--order", c.order, "n-gram order (>= 2)")->check(CLI::Range(2, 16));
  };
  const auto add_alphabet = [&](CLI::App* sub) {
    sub->add_option("-a,--alphabet", c.alphabet, "comma-separated symbols");
  };
  const auto add_out = [&](CLI::App* sub) { sub->add_option("-o,--out", c.out, "output file (stdout if omitted)"); };

  auto* gen = app.add_subcommand("gen", "random n-gram LM with rational probabilities");
  add_order(gen);
  add_alphabet(gen);
  gen->add_option("--seed", c.seed, "random seed");
  gen->add_option("--max-den", c.max_den, "upper bound on raw weights before normalisation")->check(CLI::PositiveNumber);
  gen->add_option("--zero-percent", c.zero_percent, "chance (percent) of a zero transition")->check(CLI::Range(0, 100));
  add_out(gen);

  auto* estimate = app.add_subcommand("estimate", "add-lambda MLE from a corpus, one string per line");
  estimate->add_option("corpus", c.input, "corpus file")->required();
  add_order(estimate);
  add_alphabet(estimate);
  estimate->add_option("--lambda", c.lambda, "additive smoothing, a non-negative rational");
  add_out(estimate);

  auto* compile = app.add_subcommand("compile", "compile an LM into a transformer");
  compile->add_option("lm", c.input, "LM file")->required();
  compile->add_option("-c,--construction", c.construction, "construction")
      ->check(CLI::IsMember({"multihead", "multilayer", "singlehead", "sparse"}));
  compile->add_option("--backend", c.backend, "rational or float (default per construction)")
      ->check(CLI::IsMember({"rational", "float"}));
  add_out(compile);

  auto* verify = app.add_subcommand("verify", "check weak equivalence on all strings up to --max-len");
  verify->add_option("lm", c.input, "LM file")->required();
  verify->add_option("model", c.model, "model file")->required();
  verify->add_option("--max-len", c.max_len, "longest string checked");
  verify->add_option("--tol", c.tol, "log-probability tolerance for float models")->check(CLI::NonNegativeNumber);
  verify->add_option("--report", c.report, "write a JSON report here");
  verify->add_option("--jobs", c.jobs, "worker threads")->check(CLI::Range(1u, 256u));

  auto* inspect = app.add_subcommand("inspect", "dump attention weights and decoded histories for one input");
  inspect->add_option("model", c.model, "model file")->required();
  inspect->add_option("string", c.text, "input string (empty if omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen(c);
    if (*estimate) return cmd_estimate(c);
    if (*compile) return cmd_compile(c);
    if (*verify) return cmd_verify(c);
    if (*inspect) return cmd_inspect(c);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}
