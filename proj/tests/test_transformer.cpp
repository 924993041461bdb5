#include <gtest/gtest.h>

#include "ngt/compile.hpp"
#include "ngt/transformer.hpp"

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

Vec<R> unit(std::size_t n, std::size_t i) {
  Vec<R> v(n, R(0));
  v[i] = 1;
  return v;
}

Head<R> identity_head(std::size_t d, Scoring scoring, Normalizer normalizer) {
  return Head<R>{AffineMap<R>::identity(d), AffineMap<R>::identity(d), AffineMap<R>::identity(d),
                 AffineMap<R>::zero(d, d), scoring, normalizer};
}

TEST(Attend, SinglePositionReturnsValue) {
  for (const auto normalizer : {Normalizer::Hardmax, Normalizer::Sparsemax}) {
    auto head = identity_head(3, Scoring::Dot, normalizer);
    head.value.matrix(0, 1) = 2;
    const std::vector<Vec<R>> xs{Vec<R>{R(1), R(5), R(-1)}};
    EXPECT_EQ(attend(head, 1, xs, R(0)), head.value.apply(xs[0]));
  }
}

TEST(Attend, DotHardmaxFindsMatchingUnitVector) {
  auto head = identity_head(3, Scoring::Dot, Normalizer::Hardmax);
  head.query = AffineMap<R>::zero(3, 3);
  head.query.bias = unit(3, 1);  // query fixed to e_1
  head.value = AffineMap<R>::identity(3);
  const std::vector<Vec<R>> xs{unit(3, 0), unit(3, 1), unit(3, 2)};
  AttentionRecord<R> record;
  EXPECT_EQ(attend(head, 3, xs, R(0), &record), unit(3, 1));
  EXPECT_EQ(record.weights, (Vec<R>{0, 1, 0}));
}

TEST(Attend, NegAbsSparsemaxIsOneHot) {
  Head<R> head = identity_head(2, Scoring::NegAbsDot, Normalizer::Sparsemax);
  // q = (1, 3), k_j = (j, -1): score -|j - 3|.
  head.query = AffineMap<R>::zero(2, 2);
  head.query.bias = {R(1), R(3)};
  head.key = AffineMap<R>::zero(2, 2);
  head.key.matrix(0, 1) = 1;
  head.key.bias = {R(0), R(-1)};
  std::vector<Vec<R>> xs;
  for (long j = 1; j <= 5; ++j) xs.push_back(Vec<R>{R(0), R(j)});
  AttentionRecord<R> record;
  const auto out = attend(head, 5, xs, R(0), &record);
  EXPECT_EQ(record.scores, (Vec<R>{-2, -1, 0, -1, -2}));
  EXPECT_EQ(record.weights, (Vec<R>{0, 0, 1, 0, 0}));
  EXPECT_EQ(out, xs[2]);
}

TEST(Attend, WeightsFormDistribution) {
  auto head = identity_head(2, Scoring::Dot, Normalizer::Softmax);
  const std::vector<Vec<double>> xs{{0.5, 1.0}, {-1.0, 2.0}, {0.0, 0.0}};
  Head<double> fh{AffineMap<double>::identity(2), AffineMap<double>::identity(2), AffineMap<double>::identity(2),
                  AffineMap<double>::zero(2, 2), Scoring::Dot, Normalizer::Softmax};
  for (const auto normalizer : {Normalizer::Hardmax, Normalizer::Sparsemax, Normalizer::Softmax}) {
    fh.normalizer = normalizer;
    AttentionRecord<double> record;
    attend(fh, 3, xs, 0.0, &record);
    double total = 0;
    for (const auto w : record.weights) {
      EXPECT_GE(w, 0.0);
      total += w;
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
  const std::vector<Vec<R>> rxs{{R(1), R(0)}};
  EXPECT_THROW(attend(head, 1, rxs, R(0)), std::invalid_argument);
}

TEST(Layer, ZeroValueAndOutputPassThrough) {
  Layer<R> layer{{Head<R>{AffineMap<R>::identity(2), AffineMap<R>::identity(2), AffineMap<R>::zero(2, 2),
                          AffineMap<R>::zero(2, 2), Scoring::Dot, Normalizer::Hardmax}},
                 std::nullopt};
  const std::vector<Vec<R>> xs{{R(1), R(2)}, {R(-3), R(1, 7)}};
  EXPECT_EQ(layer_forward(layer, xs, R(0)), xs);
}

TEST(Layer, SinglePositionUnrolled) {
  Head<R> head{AffineMap<R>::identity(2), AffineMap<R>::identity(2), AffineMap<R>::identity(2),
               AffineMap<R>::identity(2), Scoring::Dot, Normalizer::Hardmax};
  head.value.matrix(0, 1) = 3;
  head.output.matrix(1, 0) = -1;
  head.output.bias = {R(1, 2), R(0)};
  const Vec<R> x{R(1), R(2)};
  const auto v = head.value.apply(x);
  const Vec<R> a{v[0] + x[0], v[1] + x[1]};
  const auto o = head.output.apply(a);
  const Vec<R> expected{o[0] + a[0], o[1] + a[1]};
  EXPECT_EQ(layer_forward(Layer<R>{{head}, std::nullopt}, {x}, R(0)).front(), expected);
}

TEST(Layer, DimensionMismatch) {
  Layer<R> layer{{identity_head(3, Scoring::Dot, Normalizer::Hardmax)}, std::nullopt};
  EXPECT_THROW(layer_forward(layer, {Vec<R>{R(1), R(2)}}, R(0)), DimensionError);
  Layer<R> two{{identity_head(2, Scoring::Dot, Normalizer::Hardmax), identity_head(2, Scoring::Dot, Normalizer::Hardmax)},
               std::nullopt};
  EXPECT_THROW(layer_forward(two, {Vec<R>{R(1), R(2)}}, R(0)), std::invalid_argument);
}

TransformerModel<R> bare_model(const NGramLM& lm) {
  TransformerModel<R> model;
  model.construction = "bare";
  model.order = lm.order();
  model.alphabet = lm.alphabet();
  model.encoding = StaticEncoding<R>{EncodingKind::LinearPosition, lm.alphabet().bos_size(), lm.order()};
  model.final.mlp = Mlp<R>::identity(model.encoding.dim());
  model.output = Mat<LogRational>(lm.alphabet().eos_size(), model.encoding.dim());
  for (std::size_t r = 0; r < model.output.rows(); ++r)
    for (std::size_t c = 0; c < model.output.cols(); ++c) model.output(r, c) = LogRational::log_of(R(1));
  return model;
}

TEST(Forward, NoLayersReturnsStaticEncodings) {
  const auto model = bare_model(bigram_fixture());
  model.validate();
  const auto xs = transformer_forward(model, {1, 0});
  ASSERT_EQ(xs.size(), 3u);
  EXPECT_EQ(xs[0], model.encoding.encode(0, 1));
  EXPECT_EQ(xs[2], model.encoding.encode(1, 3));
}

TEST(Forward, ResidualIdentityWithZeroMaps) {
  auto model = bare_model(bigram_fixture());
  const auto d = model.encoding.dim();
  for (int l = 0; l < 3; ++l)
    model.layers.push_back(Layer<R>{{Head<R>{AffineMap<R>::identity(d), AffineMap<R>::identity(d), AffineMap<R>::zero(d, d),
                                             AffineMap<R>::zero(d, d), Scoring::Dot, Normalizer::Hardmax}},
                                    std::nullopt});
  model.validate();
  auto plain = bare_model(bigram_fixture());
  EXPECT_EQ(transformer_forward(model, {0, 1, 1}), transformer_forward(plain, {0, 1, 1}));
}

TEST(Forward, CompiledShapes) {
  const auto lm = bigram_fixture();
  const auto sparse = compile_sparse<R>(lm);
  for (const auto& x : transformer_forward(sparse, {0, 1})) EXPECT_EQ(x.size(), sparse.layer_dims().back());
  const auto multihead = compile_multihead(lm);
  for (const auto& x : transformer_forward(multihead, {0, 1})) EXPECT_EQ(x.size(), multihead.layer_dims().back());
}

TEST(Forward, MultiheadLayerFetchesIntoSlotTwo) {
  const auto lm = random_lm(3, Alphabet({"a", "b"}), 4, 30);
  const auto model = compile_multihead(lm);
  const auto b = model.alphabet.bos_size();
  const auto d = model.encoding.dim();
  const Word y{1, 0, 1};
  const auto padded = pad(y, 3);
  ForwardTrace<double> trace;
  transformer_forward(model, y, &trace);
  // Recompute the per-head z vectors of the only layer from the static encodings.
  const auto& xs = trace.layer_outputs[0];
  for (std::size_t h = 0; h < 2; ++h) {
    const auto& head = model.layers[0].heads[h];
    for (std::size_t p = 2; p <= padded.size(); ++p) {
      auto a = attend(head, p, xs, model.tie_eps);
      for (std::size_t i = 0; i < d; ++i) a[i] += xs[p - 1][i];
      auto z = head.output.apply(a);
      for (std::size_t i = 0; i < d; ++i) z[i] += a[i];
      for (std::size_t s = 0; s < b; ++s) {
        EXPECT_EQ(z[s], 0.0);
        EXPECT_EQ(z[b + s], s == padded[p - 1 - h] ? 1.0 : 0.0);
      }
    }
  }
}

TEST(Forward, InstrumentationDoesNotChangeValues) {
  const auto lm = random_lm(3, Alphabet({"a", "b", "c"}), 2, 40, 30);
  const auto model = compile_singlehead(lm);
  ForwardTrace<R> trace;
  const Word y{2, 0, 1, 1};
  EXPECT_EQ(transformer_forward(model, y, &trace), transformer_forward(model, y));
  EXPECT_EQ(trace.layer_outputs.size(), 2u);
  EXPECT_EQ(trace.attention.size(), pad(y, 3).size());
  const auto fmodel = compile_multilayer(lm);
  ForwardTrace<double> ftrace;
  const auto a = transformer_forward(fmodel, y, &ftrace);
  const auto b = transformer_forward(fmodel, y);
  EXPECT_EQ(a, b);  // bitwise
}

TEST(Forward, RejectsPositionsPastTheSupportedRange) {
  const auto model = compile_multihead(bigram_fixture());
  ASSERT_GT(model.max_position, 10u);
  EXPECT_NO_THROW(transformer_forward(model, Word(model.max_position - 1, 0)));
  EXPECT_THROW(transformer_forward(model, Word(model.max_position, 0)), std::out_of_range);
}

TEST(LmHead, CompiledFixtureConditionals) {
  const auto model = compile_sparse<R>(bigram_fixture());
  EXPECT_EQ(lm_conditional(model, {}, true), (Vec<R>{R(1, 2), R(1, 4), R(1, 4)}));
  EXPECT_EQ(lm_conditional(model, {1}, true), (Vec<R>{R(0), R(1, 2), R(1, 2)}));
  for (const auto& w : enumerate_strings(2, 4)) EXPECT_EQ(sum<R>(lm_conditional(model, w)), 1);
}

TEST(LmHead, CompiledFixtureStringProb) {
  const auto model = compile_sparse<R>(bigram_fixture());
  EXPECT_EQ(lm_string_prob(model, {0, 1}), R(1, 12));
  EXPECT_EQ(lm_string_prob(model, {1, 0}), 0);
  EXPECT_EQ(lm_string_prob(model, {}), R(1, 4));
  EXPECT_THROW(lm_string_prob(model, {5}), std::invalid_argument);
}

TEST(LmHead, Causality) {
  const auto lm = random_lm(4, Alphabet({"a", "b"}), 8, 50, 30);
  const auto model = compile_singlehead(lm);
  const Word y{0, 1, 1, 0, 1};
  const auto along = lm_conditionals(model, y);
  for (std::size_t t = 0; t <= y.size(); ++t)
    EXPECT_EQ(along[t], lm_conditional(model, Word(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(t))));
}

TEST(LmHead, OneHotAudit) {
  auto model = bare_model(bigram_fixture());
  EXPECT_THROW(lm_conditional(model, {0}, true), std::logic_error);
  EXPECT_EQ(lm_conditional(model, {0}), (Vec<R>{R(1, 3), R(1, 3), R(1, 3)}));
  model.encoding.kind = EncodingKind::DecimalScaled;
  model.final.mlp = Mlp<R>::identity(model.encoding.dim());
  model.output = Mat<LogRational>(3, model.encoding.dim());
  EXPECT_THROW(lm_conditional(model, {0}), std::domain_error);  // 10^-p entries are not integers
}

TEST(Mlp, Examples) {
  const auto id = Mlp<R>::identity(3);
  const Vec<R> x{R(1), R(-2), R(1, 3)};
  EXPECT_EQ(id.forward(x), x);
  EXPECT_EQ(build_and_mlp<R>(2, 1).forward(Vec<R>{R(1), R(1)}), Vec<R>{R(1)});
  const auto step = build_step_gadget<R>(3);
  EXPECT_EQ(step.forward(Vec<R>{R(0)}), Vec<R>{R(0)});
  EXPECT_EQ(step.forward(Vec<R>{R(1, 10000)}), Vec<R>{R(1)});
  EXPECT_EQ(step.forward(Vec<R>{R(-5)}), Vec<R>{R(0)});
  EXPECT_THROW(id.forward(Vec<R>{R(1)}), DimensionError);
}

TEST(Mlp, AndGadgetIsConjunctionOnAllBinaryInputs) {
  // Selected coordinates {0, 2, ...}: one block per coordinate, width 1.
  for (std::size_t m = 1; m <= 12; ++m) {
    const auto mlp = build_and_mlp<R>(m, 1);
    for (std::size_t bits = 0; bits < (std::size_t{1} << m); ++bits) {
      Vec<R> x(m);
      for (std::size_t i = 0; i < m; ++i) x[i] = (bits >> i) & 1;
      EXPECT_EQ(mlp.forward(x), Vec<R>{R(bits == (std::size_t{1} << m) - 1 ? 1 : 0)});
    }
  }
}

TEST(Validate, CatchesShapeErrors) {
  auto model = compile_sparse<R>(bigram_fixture());
  model.validate();
  auto broken = model;
  broken.layers[0].heads[0].value = AffineMap<R>::zero(3, broken.encoding.dim());
  EXPECT_THROW(broken.validate(), DimensionError);
  broken = model;
  broken.output = Mat<LogRational>(2, model.output.cols());
  EXPECT_THROW(broken.validate(), DimensionError);
  broken = model;
  broken.layers[0].heads[0].normalizer = Normalizer::Softmax;
  EXPECT_THROW(broken.validate(), std::invalid_argument);
  broken = model;
  broken.final.mlp.layers.back().activation = Activation::Relu;
  EXPECT_THROW(broken.validate(), std::invalid_argument);
}

TEST(ModelIo, RoundTripEveryConstruction) {
  const auto lm = random_lm(3, Alphabet({"a", "b"}), 5, 30, 30);
  const auto check = [&](const auto& model) {
    const auto text = serialize_model(model);
    const auto back = deserialize_model(text);
    using M = std::decay_t<decltype(model)>;
    ASSERT_TRUE(std::holds_alternative<M>(back));
    EXPECT_EQ(std::get<M>(back), model);
    EXPECT_EQ(serialize_model(std::get<M>(back)), text);
  };
  check(compile_multihead(lm));
  check(compile_multilayer(lm));
  check(compile_singlehead(lm));
  check(compile_sparse<R>(lm));
  check(compile_sparse<double>(lm));
}

TEST(ModelIo, Errors) {
  EXPECT_THROW(deserialize_model("[1, 2"), std::invalid_argument);
  auto text = serialize_model(compile_sparse<R>(bigram_fixture()));
  const auto at = text.find("\"backend\": \"rational\"");
  ASSERT_NE(at, std::string::npos);
  text.replace(at, 21, "\"backend\": \"quantum\"");
  EXPECT_THROW(deserialize_model(text), std::invalid_argument);
  auto multihead = serialize_model(compile_multihead(bigram_fixture()));
  const auto at2 = multihead.find("\"backend\": \"float\"");
  multihead.replace(at2, 18, "\"backend\": \"rational\"");
  EXPECT_THROW(deserialize_model(multihead), std::invalid_argument);
}

}  // namespace
}  // namespace ngt
