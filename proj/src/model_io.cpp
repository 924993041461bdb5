#include <json.hpp>

#include "ngt/transformer.hpp"

namespace ngt {

using nlohmann::json;

namespace {

template <class T>
json matrix_to_json(const Mat<T>& m) {
  json data = json::array();
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) data.push_back(format_scalar(m(r, c)));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

template <class T>
Mat<T> matrix_from_json(const json& j) {
  const auto rows = j.at("rows").get<std::size_t>();
  const auto cols = j.at("cols").get<std::size_t>();
  const auto& data = j.at("data");
  if (data.size() != rows * cols) throw DimensionError("matrix data does not match its declared shape");
  std::vector<T> values;
  values.reserve(data.size());
  for (const auto& v : data) values.push_back(parse_scalar<T>(v.get<std::string>()));
  return Mat<T>(rows, cols, std::move(values));
}

template <class T>
json affine_to_json(const AffineMap<T>& map) {
  json bias = json::array();
  for (const auto& b : map.bias) bias.push_back(format_scalar(b));
  return {{"matrix", matrix_to_json(map.matrix)}, {"bias", std::move(bias)}};
}

template <class T>
AffineMap<T> affine_from_json(const json& j) {
  AffineMap<T> map{matrix_from_json<T>(j.at("matrix")), {}};
  for (const auto& b : j.at("bias")) map.bias.push_back(parse_scalar<T>(b.get<std::string>()));
  return map;
}

template <class T>
json mlp_to_json(const Mlp<T>& mlp) {
  json layers = json::array();
  for (const auto& layer : mlp.layers)
    layers.push_back({{"activation", layer.activation == Activation::Relu ? "relu" : "identity"},
                      {"affine", affine_to_json(layer.affine)}});
  return layers;
}

template <class T>
Mlp<T> mlp_from_json(const json& j) {
  Mlp<T> mlp;
  for (const auto& layer : j) {
    const auto activation = layer.at("activation").get<std::string>();
    if (activation != "relu" && activation != "identity")
      throw std::invalid_argument("unknown activation '" + activation + "'");
    mlp.layers.push_back(MlpLayer<T>{affine_from_json<T>(layer.at("affine")),
                                     activation == "relu" ? Activation::Relu : Activation::Identity});
  }
  return mlp;
}

template <class T>
TransformerModel<T> model_from_json(const json& doc) {
  TransformerModel<T> model;
  model.construction = doc.at("construction").get<std::string>();
  model.order = doc.at("order").get<int>();
  model.alphabet = Alphabet(doc.at("alphabet").get<std::vector<std::string>>(), doc.value("bos", std::string("<bos>")),
                            doc.value("eos", std::string("<eos>")));
  const auto& enc = doc.at("static_encoding");
  model.encoding.kind = parse_encoding(enc.at("kind").get<std::string>());
  model.encoding.symbols = enc.at("symbols").get<std::size_t>();
  model.encoding.order = enc.at("order").get<int>();
  for (const auto& lj : doc.at("layers")) {
    Layer<T> layer;
    for (const auto& hj : lj.at("heads")) {
      layer.heads.push_back(Head<T>{affine_from_json<T>(hj.at("query")), affine_from_json<T>(hj.at("key")),
                                    affine_from_json<T>(hj.at("value")), affine_from_json<T>(hj.at("output")),
                                    parse_scoring(hj.at("scoring").get<std::string>()),
                                    parse_normalizer(hj.at("normalizer").get<std::string>())});
    }
    if (lj.contains("combiner") && !lj.at("combiner").is_null()) layer.combiner = mlp_from_json<T>(lj.at("combiner"));
    model.layers.push_back(std::move(layer));
  }
  const auto& fj = doc.at("final");
  if (fj.contains("l1_rescale") && !fj.at("l1_rescale").is_null()) {
    const auto& rj = fj.at("l1_rescale");
    model.final.rescale = L1Rescale<T>{rj.at("offset").get<std::size_t>(), rj.at("width").get<std::size_t>(),
                                       parse_scalar<T>(rj.at("scale").get<std::string>())};
  }
  model.final.mlp = mlp_from_json<T>(fj.at("mlp"));
  const auto& oj = doc.at("output");
  const auto rows = oj.at("rows").get<std::size_t>();
  const auto cols = oj.at("cols").get<std::size_t>();
  if (oj.at("data").size() != rows * cols) throw DimensionError("output matrix data does not match its shape");
  std::vector<LogRational> entries;
  for (const auto& v : oj.at("data")) entries.push_back(parse_log(v.get<std::string>()));
  model.output = Mat<LogRational>(rows, cols, std::move(entries));
  model.tie_eps = parse_scalar<T>(doc.at("tie_eps").get<std::string>());
  model.max_position = doc.value("max_position", std::size_t{0});
  model.validate();
  return model;
}

}  // namespace

template <class T>
std::string serialize_model(const TransformerModel<T>& model) {
  json layers = json::array();
  for (const auto& layer : model.layers) {
    json heads = json::array();
    for (const auto& head : layer.heads)
      heads.push_back({{"scoring", scoring_name(head.scoring)},
                       {"normalizer", normalizer_name(head.normalizer)},
                       {"query", affine_to_json(head.query)},
                       {"key", affine_to_json(head.key)},
                       {"value", affine_to_json(head.value)},
                       {"output", affine_to_json(head.output)}});
    layers.push_back({{"heads", std::move(heads)},
                      {"combiner", layer.combiner ? mlp_to_json(*layer.combiner) : json(nullptr)}});
  }
  json rescale = nullptr;
  if (model.final.rescale)
    rescale = {{"offset", model.final.rescale->offset},
               {"width", model.final.rescale->width},
               {"scale", format_scalar(model.final.rescale->scale)}};
  json output_data = json::array();
  for (std::size_t r = 0; r < model.output.rows(); ++r)
    for (std::size_t c = 0; c < model.output.cols(); ++c) output_data.push_back(format_log(model.output(r, c)));
  const json doc = {
      {"construction", model.construction},
      {"backend", backend_name(model.backend())},
      {"order", model.order},
      {"alphabet", model.alphabet.symbols()},
      {"bos", model.alphabet.bos()},
      {"eos", model.alphabet.eos()},
      {"static_encoding",
       {{"kind", encoding_name(model.encoding.kind)},
        {"symbols", model.encoding.symbols},
        {"order", model.encoding.order}}},
      {"layers", std::move(layers)},
      {"final", {{"l1_rescale", std::move(rescale)}, {"mlp", mlp_to_json(model.final.mlp)}}},
      {"output", {{"rows", model.output.rows()}, {"cols", model.output.cols()}, {"data", std::move(output_data)}}},
      {"tie_eps", format_scalar(model.tie_eps)},
      {"max_position", model.max_position},
  };
  return doc.dump(1) + "\n";
}

AnyModel deserialize_model(std::string_view text) {
  try {
    const json doc = json::parse(text.begin(), text.end());
    if (!doc.is_object()) throw std::invalid_argument("model file must be a JSON object");
    switch (parse_backend(doc.at("backend").get<std::string>())) {
      case Backend::ExactRational: return model_from_json<Rational>(doc);
      case Backend::Float64: return model_from_json<double>(doc);
    }
    throw std::logic_error("unreachable backend");
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed model file: ") + e.what());
  }
}

template std::string serialize_model<Rational>(const TransformerModel<Rational>&);
template std::string serialize_model<double>(const TransformerModel<double>&);

}  // namespace ngt
