#include "invarnet/models.hpp"

#include <algorithm>

namespace invarnet::model {

std::size_t MlpSpec::parameter_count() const {
  std::size_t total = 0;
  int in = input;
  for (const LayerSpec& l : layers) {
    total += static_cast<std::size_t>(in) * l.width + l.width;
    if (l.batch_norm) total += 2 * static_cast<std::size_t>(l.width);
    in = l.width;
  }
  return total;
}

void MlpSpec::validate(const std::string& what) const {
  if (input <= 0) throw ConfigError(what + ": input width must be positive");
  if (layers.empty()) throw ConfigError(what + ": needs at least one layer");
  for (const LayerSpec& l : layers) {
    if (l.width <= 0) throw ConfigError(what + ": layer widths must be positive");
  }
}

Mlp::Mlp(MlpSpec spec, Rng& rng) : spec_(std::move(spec)) {
  spec_.validate("mlp");
  int in = spec_.input;
  for (const LayerSpec& ls : spec_.layers) {
    Layer layer;
    const double bound = std::sqrt(6.0 / static_cast<double>(in + ls.width));
    layer.weight.resize(in, ls.width);
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i) {
      layer.weight.data()[i] = rng.uniform(-bound, bound);
    }
    layer.bias = Matrix::Zero(1, ls.width);
    if (ls.batch_norm) {
      layer.gamma = Matrix::Ones(1, ls.width);
      layer.beta = Matrix::Zero(1, ls.width);
      layer.bn = ad::BatchNormState::for_features(ls.width);
    }
    layers_.push_back(std::move(layer));
    in = ls.width;
  }
}

std::vector<Matrix*> Mlp::parameters() {
  std::vector<Matrix*> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    out.push_back(&layers_[i].weight);
    out.push_back(&layers_[i].bias);
    if (spec_.layers[i].batch_norm) {
      out.push_back(&layers_[i].gamma);
      out.push_back(&layers_[i].beta);
    }
  }
  return out;
}

std::vector<const Matrix*> Mlp::parameters() const {
  auto mut = const_cast<Mlp*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

ad::Var Mlp::forward(ad::Var x, std::span<const ad::Var> params, Mode mode) {
  std::size_t p = 0;
  ad::Var cur = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& ls = spec_.layers[i];
    cur = ad::affine(cur, params[p], params[p + 1]);
    p += 2;
    if (ls.batch_norm) {
      Layer& layer = layers_[i];
      layer.bn.mode = mode == Mode::train ? ad::BatchNormState::Mode::train
                                          : ad::BatchNormState::Mode::eval;
      cur = ad::batch_norm(cur, params[p], params[p + 1], layer.bn);
      p += 2;
    }
    switch (ls.activation) {
      case Activation::relu:
        cur = ad::relu(cur);
        break;
      case Activation::tanh:
        cur = ad::tanh_act(cur);
        break;
      case Activation::none:
        break;
    }
  }
  if (p != params.size()) throw ShapeError("mlp forward: parameter count mismatch");
  return cur;
}

void Architecture::validate() const {
  if (d_x <= 0 || n_s <= 0 || n_y <= 0 || d_emb < 0) {
    throw ConfigError("architecture: d_x, n_s, n_y must be positive and d_emb non-negative");
  }
  encoder.validate("encoder");
  predictor.validate("predictor");
  discriminator.validate("discriminator");
  if (encoder.input != d_x + d_emb) {
    throw ConfigError("architecture: encoder input must be d_x + d_emb");
  }
  if (predictor.input != d_h() || discriminator.input != d_h()) {
    throw ConfigError("architecture: predictor and discriminator must read d_h features");
  }
  if (predictor.output() != n_y) throw ConfigError("architecture: predictor must output n_y");
  if (discriminator.output() != n_s) {
    throw ConfigError("architecture: discriminator must output n_s");
  }
}

namespace {

Architecture make_preset(std::string name, int d_x, int n_s, int n_y, int d_emb, int hidden,
                         int disc_hidden_layers) {
  Architecture a;
  a.preset = std::move(name);
  a.d_x = d_x;
  a.n_s = n_s;
  a.n_y = n_y;
  a.d_emb = d_emb;
  a.encoder = MlpSpec{d_x + d_emb, {{hidden, Activation::relu, false}}};
  a.predictor = MlpSpec{hidden, {{n_y, Activation::none, false}}};
  a.discriminator.input = hidden;
  for (int i = 0; i < disc_hidden_layers; ++i) {
    a.discriminator.layers.push_back({hidden, Activation::relu, true});
  }
  a.discriminator.layers.push_back({n_s, Activation::none, false});
  a.validate();
  return a;
}

}  // namespace

Architecture fair_preset(int d_x, int n_s, int n_y, int d_emb) {
  return make_preset("fair", d_x, n_s, n_y, d_emb, 64, 2);
}

Architecture image_preset(int d_x, int n_s, int n_y, int d_emb) {
  return make_preset("image", d_x, n_s, n_y, d_emb, 100, 1);
}

Architecture preset_by_name(const std::string& name, int d_x, int n_s, int n_y, int d_emb) {
  if (name == "fair") return fair_preset(d_x, n_s, n_y, d_emb);
  if (name == "image") return image_preset(d_x, n_s, n_y, d_emb);
  throw ConfigError("unknown architecture preset '" + name + "' (expected fair or image)");
}

std::vector<Matrix*> GameModel::parameters() {
  std::vector<Matrix*> out{&s_embedding};
  for (Mlp* m : {&encoder, &predictor, &discriminator}) {
    auto p = m->parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

std::vector<const Matrix*> GameModel::parameters() const {
  auto mut = const_cast<GameModel*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::vector<Player> GameModel::parameter_owners() const {
  std::vector<Player> out{Player::encoder};
  out.insert(out.end(), encoder.parameters().size(), Player::encoder);
  out.insert(out.end(), predictor.parameters().size(), Player::predictor);
  out.insert(out.end(), discriminator.parameters().size(), Player::discriminator);
  return out;
}

std::size_t GameModel::parameter_count() const {
  std::size_t n = 0;
  for (const Matrix* p : parameters()) n += static_cast<std::size_t>(p->size());
  return n;
}

GameModel init_model(const Architecture& arch, const InitConfig& init) {
  arch.validate();
  Rng rng(init.seed);
  GameModel m;
  m.arch = arch;
  m.s_embedding.resize(arch.n_s, arch.d_emb);
  for (Eigen::Index i = 0; i < m.s_embedding.size(); ++i) {
    m.s_embedding.data()[i] = rng.normal(0.0, init.embedding_stddev);
  }
  m.encoder = Mlp(arch.encoder, rng);
  m.predictor = Mlp(arch.predictor, rng);
  m.discriminator = Mlp(arch.discriminator, rng);
  return m;
}

std::span<const ad::Var> BoundModel::encoder() const {
  return std::span(params).subspan(encoder_begin, predictor_begin - encoder_begin);
}
std::span<const ad::Var> BoundModel::predictor() const {
  return std::span(params).subspan(predictor_begin, discriminator_begin - predictor_begin);
}
std::span<const ad::Var> BoundModel::discriminator() const {
  return std::span(params).subspan(discriminator_begin);
}

BoundModel bind(ad::Tape& tape, const GameModel& model) {
  BoundModel b;
  for (const Matrix* p : model.parameters()) b.params.push_back(tape.leaf(*p));
  b.encoder_begin = 1;
  b.predictor_begin = b.encoder_begin + model.encoder.parameters().size();
  b.discriminator_begin = b.predictor_begin + model.predictor.parameters().size();
  return b;
}

ad::Var encode(GameModel& model, const BoundModel& bound, ad::Var x, LabelSpan s, Mode mode) {
  if (x.cols() != model.arch.d_x) {
    throw ShapeError("encode: expected " + std::to_string(model.arch.d_x) + " features, got " +
                     std::to_string(x.cols()));
  }
  if (static_cast<Eigen::Index>(s.size()) != x.rows()) {
    throw ShapeError("encode: s has " + std::to_string(s.size()) + " labels for " +
                     std::to_string(x.rows()) + " rows");
  }
  ad::Var emb = ad::embedding_lookup(bound.embedding(), s);
  return model.encoder.forward(ad::concat_features(x, emb), bound.encoder(), mode);
}

ad::Var predict_logits(GameModel& model, const BoundModel& bound, ad::Var h, Mode mode) {
  if (h.cols() != model.arch.d_h()) throw ShapeError("predict_logits: h width mismatch");
  return model.predictor.forward(h, bound.predictor(), mode);
}

ad::Var discriminate_logits(GameModel& model, const BoundModel& bound, ad::Var h, Mode mode) {
  if (h.cols() != model.arch.d_h()) throw ShapeError("discriminate_logits: h width mismatch");
  return model.discriminator.forward(h, bound.discriminator(), mode);
}

Matrix encode(GameModel& model, const Matrix& x, LabelSpan s) {
  ad::Tape tape;
  BoundModel b = bind(tape, model);
  return encode(model, b, tape.constant(x), s, Mode::eval).value();
}

Matrix predict_logits(GameModel& model, const Matrix& h) {
  ad::Tape tape;
  BoundModel b = bind(tape, model);
  return predict_logits(model, b, tape.constant(h), Mode::eval).value();
}

Matrix discriminate_logits(GameModel& model, const Matrix& h) {
  ad::Tape tape;
  BoundModel b = bind(tape, model);
  return discriminate_logits(model, b, tape.constant(h), Mode::eval).value();
}

Labels argmax_rows(const Matrix& scores) {
  Labels out(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < scores.cols(); ++c) {
      if (scores(r, c) > scores(r, best)) best = c;
    }
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

Labels predict_labels(GameModel& model, const Matrix& x, LabelSpan s) {
  return argmax_rows(predict_logits(model, encode(model, x, s)));
}

}  // namespace invarnet::model
