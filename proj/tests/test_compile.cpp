#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "ngt/compile.hpp"

namespace ngt {
namespace {

using R = Rational;

NGramLM bigram_fixture() {
  std::map<History, NGramLM::Row> rows;
  rows[History{{0}}] = {R(1, 2), R(1, 4), R(1, 4)};
  rows[History{{1}}] = {R(1, 3), R(1, 3), R(1, 3)};
  rows[History{{2}}] = {R(0), R(1, 2), R(1, 2)};
  return NGramLM(2, Alphabet({"a", "b"}), rows);
}

Vec<R> one_hot(std::size_t n, std::size_t i) {
  Vec<R> v(n, R(0));
  v[i] = 1;
  return v;
}

TEST(HistoryIndexer, Bijection) {
  const HistoryIndexer indexer(3, 3);
  EXPECT_EQ(indexer.size(), 27u);
  for (std::size_t i = 0; i < indexer.size(); ++i) EXPECT_EQ(indexer.index(indexer.decode(i)), i);
  EXPECT_EQ(indexer.index(std::vector<std::size_t>{1, 0, 2}), 11u);
  EXPECT_THROW(indexer.index(std::vector<std::size_t>{3, 0, 0}), std::out_of_range);
  EXPECT_THROW(indexer.index(std::vector<std::size_t>{0, 0}), DimensionError);
}

TEST(AndGadget, Examples) {
  const auto mlp = build_and_mlp<R>(2, 2);
  const HistoryIndexer s(2, 2);
  EXPECT_EQ(mlp.forward(Vec<R>{1, 0, 0, 1}), one_hot(4, s.index(std::vector<std::size_t>{0, 1})));
  EXPECT_EQ(mlp.forward(Vec<R>{1, 0, 0, 0}), Vec<R>(4, R(0)));
}

TEST(AndGadget, ExhaustiveThreeByThree) {
  const auto mlp = build_and_mlp<R>(3, 3);
  const HistoryIndexer s(3, 3);
  std::set<std::size_t> hits;
  for (std::size_t t = 0; t < 27; ++t) {
    const auto tuple = s.decode(t);
    Vec<R> x(9, R(0));
    for (std::size_t i = 0; i < 3; ++i) x[i * 3 + tuple[i]] = 1;
    const auto out = mlp.forward(x);
    EXPECT_EQ(out, one_hot(27, t));
    hits.insert(t);
  }
  EXPECT_EQ(hits.size(), 27u);
}

TEST(OutputMatrix, FixtureColumns) {
  const auto lm = bigram_fixture();
  const auto e = build_output_matrix(lm);
  ASSERT_EQ(e.rows(), 3u);
  ASSERT_EQ(e.cols(), 3u);
  EXPECT_TRUE(e(0, 2).is_neg_inf());
  EXPECT_EQ(e(1, 2), LogRational::log_of(R(1, 2)));
  EXPECT_EQ(e(2, 2), LogRational::log_of(R(1, 2)));
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<LogRational> column;
    for (std::size_t y = 0; y < 3; ++y) column.push_back(e(y, c));
    EXPECT_EQ(softmax_logdomain(column), lm.row(History{{c}}));
  }
}

TEST(OutputMatrix, UniformAndUnreachableColumns) {
  const auto lm = estimate_mle(std::vector<Word>{}, 3, Alphabet({"a", "b"}), 1);
  const auto e = build_output_matrix(lm);
  EXPECT_EQ(e.cols(), 9u);
  for (std::size_t c = 0; c < e.cols(); ++c)
    for (std::size_t y = 0; y < e.rows(); ++y) EXPECT_EQ(e(y, c), LogRational::log_of(R(1, 3)));
  // Column of the unreachable history (a, BOS) is uniform even for a skewed LM.
  const auto skewed = random_lm(3, Alphabet({"a", "b"}), 3, 50);
  const auto es = build_output_matrix(skewed);
  const auto col = HistoryIndexer(3, 2).index(std::vector<std::size_t>{1, 0});
  for (std::size_t y = 0; y < 3; ++y) EXPECT_EQ(es(y, col), LogRational::log_of(R(1, 3)));
}

TEST(StepGadget, Values) {
  for (int n = 1; n <= 6; ++n) {
    const auto step = build_step_gadget<R>(n);
    mpz_class p;
    mpz_ui_pow_ui(p.get_mpz_t(), 10, static_cast<unsigned long>(n + 1));
    const R eps(mpz_class(1), p);
    EXPECT_EQ(step.forward(Vec<R>{R(0)}), Vec<R>{R(0)});
    EXPECT_EQ(step.forward(Vec<R>{eps}), Vec<R>{R(1)});
    EXPECT_EQ(step.forward(Vec<R>{R(-5)}), Vec<R>{R(0)});
    EXPECT_EQ(step.forward(Vec<R>{R(7, 3)}), Vec<R>{R(1)});
    EXPECT_EQ(step.forward(Vec<R>{eps / 2}), Vec<R>{R(1, 2)});  // ramp
  }
}

TEST(DigitMlp, Examples) {
  EXPECT_EQ(build_digit_mlp<R>(3).forward(Vec<R>{R(101, 1000)}), (Vec<R>{1, 0, 1}));
  EXPECT_EQ(build_digit_mlp<R>(4).forward(Vec<R>{R(1011, 10000)}), (Vec<R>{1, 0, 1, 1}));
  // Last digit doubled decodes the same.
  EXPECT_EQ(build_digit_mlp<R>(4).forward(Vec<R>{R(1012, 10000)}), (Vec<R>{1, 0, 1, 1}));
  EXPECT_EQ(build_digit_mlp<R>(1).forward(Vec<R>{R(2, 10)}), (Vec<R>{1}));
}

TEST(DigitMlp, ExhaustiveFourDigits) {
  const auto mlp = build_digit_mlp<R>(4);
  for (unsigned bits = 0; bits < 16; ++bits) {
    Vec<R> digits(4);
    R x = 0;
    R place(1, 10);
    for (std::size_t i = 0; i < 4; ++i) {
      digits[i] = (bits >> (3 - i)) & 1u;
      x += digits[i] * place;
      place /= 10;
    }
    EXPECT_EQ(mlp.forward(Vec<R>{x}), digits) << bits;
  }
}

TEST(Dimensions, PerConstruction) {
  const auto lm2 = random_lm(2, Alphabet({"a", "b"}), 1, 20);
  const auto mh = compile_multihead(lm2);
  EXPECT_EQ(mh.layers.size(), 1u);
  EXPECT_EQ(mh.layers[0].heads.size(), 1u);
  EXPECT_EQ(mh.encoding.dim(), 10u);

  const auto lm3 = random_lm(3, Alphabet({"a", "b"}), 1, 20);
  EXPECT_EQ(compile_multihead(lm3).encoding.dim(), 12u);
  EXPECT_EQ(compile_multihead(lm3).enc_dim(), 9u);
  const auto ml = compile_multilayer(lm3);
  EXPECT_EQ(ml.encoding.dim(), 10u);
  EXPECT_EQ(ml.layers.size(), 2u);
  for (const auto& layer : ml.layers) EXPECT_EQ(layer.heads.size(), 1u);
  EXPECT_EQ(compile_singlehead(lm3).encoding.dim(), 5u);
  EXPECT_EQ(compile_sparse<R>(lm3).encoding.dim(), 8u);
  EXPECT_EQ(compile_singlehead(lm3).enc_dim(), 9u);
}

TEST(Multihead, HeadArgmaxAtPMinusH) {
  const auto lm = random_lm(4, Alphabet({"a", "b"}), 2, 20);
  const auto model = compile_multihead(lm);
  ForwardTrace<double> trace;
  transformer_forward(model, Word{0, 1, 1, 0, 1, 0, 0}, &trace);
  for (const auto& rec : trace.attention) {
    if (rec.query_pos < 3) continue;
    const auto target = rec.query_pos - rec.head;
    for (std::size_t j = 1; j <= rec.query_pos; ++j) {
      EXPECT_EQ(rec.weights[j - 1], j == target ? 1.0 : 0.0);
      if (j != target) EXPECT_GE(rec.scores[target - 1] - rec.scores[j - 1], 1e-6);
    }
  }
}

TEST(Multilayer, StacksShiftedOneHots) {
  const auto lm = random_lm(4, Alphabet({"a", "b", "c"}), 2, 20);
  const auto model = compile_multilayer(lm);
  const auto b = model.alphabet.bos_size();
  const Word y{2, 0, 1, 1, 0};
  const auto padded = pad(y, 4);
  ForwardTrace<double> trace;
  transformer_forward(model, y, &trace);
  for (std::size_t l = 0; l < trace.layer_outputs.size(); ++l) {
    for (std::size_t p = 1; p <= padded.size(); ++p) {
      const auto& x = trace.layer_outputs[l][p - 1];
      for (std::size_t blk = 0; blk <= std::min<std::size_t>(l, 2); ++blk) {
        const std::size_t symbol = p > blk ? padded[p - 1 - blk] : kBos;
        for (std::size_t s = 0; s < b; ++s) EXPECT_EQ(x[blk * b + s], s == symbol ? 1.0 : 0.0);
      }
    }
  }
}

TEST(Singlehead, DigitExample) {
  // History a b a a with n = 5; query at the last padded position.
  const auto lm = random_lm(5, Alphabet({"a", "b"}), 1, 20);
  const auto model = compile_singlehead(lm);
  const Word y{0, 1, 0, 0};
  ForwardTrace<R> trace;
  transformer_forward(model, y, &trace);
  const std::size_t p = pad(y, 5).size();
  const auto& rec = trace.attention[p - 1];
  ASSERT_EQ(rec.query_pos, p);
  for (std::size_t j = 1; j <= p; ++j) EXPECT_EQ(rec.weights[j - 1], j + 4 > p ? R(1, 4) : R(0));

  // The attention output alone, L1-normalised over symbols and rescaled by
  // sum_{i=1}^{n-1} 10^{-i}: a -> 0.1011, b -> 0.0100.
  const auto& x = trace.layer_outputs[0];
  const auto att = attend(model.layers[0].heads[0], p, x, R(0));
  R norm = 0;
  for (std::size_t s = 0; s < 3; ++s) norm += att[s];
  const R scale(1111, 10000);
  EXPECT_EQ(att[1] / norm * scale, parse_rational("0.1011"));
  EXPECT_EQ(att[2] / norm * scale, parse_rational("0.0100"));
  EXPECT_EQ(att[0], 0);

  // With the residual, the rescaled F input doubles the newest digit.
  const auto& z = trace.layer_outputs[1][p - 1];
  R z_norm = 0;
  for (std::size_t s = 0; s < 3; ++s) z_norm += z[s];
  const auto& r = *model.final.rescale;
  EXPECT_EQ(z[1] / z_norm * r.scale, parse_rational("0.1012"));
  EXPECT_EQ(z[2] / z_norm * r.scale, parse_rational("0.0100"));
}

TEST(Compile, HistoryRecovery) {
  const Alphabet abc({"a", "b", "c"});
  for (int n = 2; n <= 4; ++n) {
    const auto lm = random_lm(n, abc, 6, 30, 30);
    const HistoryIndexer indexer(abc.bos_size(), static_cast<std::size_t>(n - 1));
    const auto check = [&](const auto& model) {
      for_each_string(3, 4, [&](const Word& y) {
        const auto xs = transformer_forward(model, y);
        const auto enc = model.final.apply(xs.back());
        const auto h = history_before(y, y.size(), n);
        using T = std::decay_t<decltype(enc[0])>;
        Vec<T> expected(indexer.size(), T(0));
        expected[indexer.index(h.symbols)] = T(1);
        EXPECT_EQ(enc, expected);
      });
    };
    check(compile_multihead(lm));
    check(compile_multilayer(lm));
    check(compile_singlehead(lm));
    check(compile_sparse<R>(lm));
  }
}

TEST(Compile, CrossAgreement) {
  const Alphabet ab({"a", "b"});
  for (int n = 2; n <= 4; ++n) {
    const auto lm = random_lm(n, ab, 11, 60, 30);
    const auto mh = compile_multihead(lm);
    const auto ml = compile_multilayer(lm);
    const auto sh = compile_singlehead(lm);
    const auto sp = compile_sparse<R>(lm);
    const auto spf = compile_sparse<double>(lm);
    for_each_string(2, 5, [&](const Word& y) {
      const R exact = string_prob(lm, y);
      EXPECT_EQ(lm_string_prob(sh, y), exact);
      EXPECT_EQ(lm_string_prob(sp, y), exact);
      for (const double p : {lm_string_prob(mh, y), lm_string_prob(ml, y), lm_string_prob(spf, y)}) {
        if (exact == 0) {
          EXPECT_EQ(p, 0.0);
        } else {
          EXPECT_NEAR(std::log(p), log_rational(exact), 1e-9);
        }
      }
    });
  }
}

TEST(Compile, SparseScoresAndOneHot) {
  const auto lm = random_lm(3, Alphabet({"a", "b"}), 4, 20);
  const auto model = compile_sparse<R>(lm);
  ForwardTrace<R> trace;
  transformer_forward(model, Word{1, 1, 0, 1}, &trace);
  for (const auto& rec : trace.attention) {
    const long target = static_cast<long>(rec.query_pos) - static_cast<long>(rec.head);
    for (std::size_t j = 1; j <= rec.query_pos; ++j) {
      const long dist = std::abs(static_cast<long>(j) - target);
      EXPECT_EQ(rec.scores[j - 1], R(-dist));
      if (target >= 1) EXPECT_EQ(rec.weights[j - 1], R(dist == 0 ? 1 : 0));
    }
  }
}

TEST(Compile, BackendGuards) {
  const auto lm = bigram_fixture();
  try {
    compile_model(lm, ConstructionKind::MultiHead, Backend::ExactRational);
    FAIL() << "expected an error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("irrational encodings"), std::string::npos);
  }
  EXPECT_THROW(compile_model(lm, ConstructionKind::MultiLayer, Backend::ExactRational), std::invalid_argument);
  EXPECT_THROW(compile_model(lm, ConstructionKind::SingleHead, Backend::Float64), std::invalid_argument);
  EXPECT_TRUE(std::holds_alternative<TransformerModel<double>>(compile_model(lm, ConstructionKind::Sparse, Backend::Float64)));
  EXPECT_EQ(parse_construction("sparse"), ConstructionKind::Sparse);
  EXPECT_THROW(parse_construction("dense"), std::invalid_argument);
}

TEST(Compile, FloatPositionLimit) {
  const auto p_max = sqrt_encoding_max_position();
  EXPECT_GE(p_max, 10u);
  for (std::size_t p = 1; p <= p_max; ++p) EXPECT_GE(sqrt_encoding_margin(p), 1e-6);
  EXPECT_LT(sqrt_encoding_margin(p_max + 1), 1e-6);
  EXPECT_EQ(compile_multihead(bigram_fixture()).max_position, p_max);
  EXPECT_EQ(compile_multilayer(bigram_fixture()).max_position, p_max);
}

}  // namespace
}  // namespace ngt
