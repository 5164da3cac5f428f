#include "invarnet/models.hpp"

#include <bit>
#include <cstdio>
#include <fstream>

namespace invarnet::model {

using nlohmann::json;

namespace {

constexpr const char* kFormat = "invarnet-checkpoint";
constexpr int kVersion = 1;

std::string hex_bits(double v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(std::bit_cast<std::uint64_t>(v)));
  return buf;
}

double from_hex_bits(const std::string& s) {
  if (s.size() != 16) throw DataError("checkpoint: malformed f64 '" + s + "'");
  return std::bit_cast<double>(static_cast<std::uint64_t>(std::stoull(s, nullptr, 16)));
}

json matrix_to_json(const Matrix& m) {
  json data = json::array();
  for (Eigen::Index i = 0; i < m.size(); ++i) data.push_back(hex_bits(m.data()[i]));
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

Matrix matrix_from_json(const json& j) {
  Matrix m(j.at("rows").get<Eigen::Index>(), j.at("cols").get<Eigen::Index>());
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != m.size()) {
    throw DataError("checkpoint: matrix data length does not match its shape");
  }
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = from_hex_bits(data[static_cast<std::size_t>(i)].get<std::string>());
  }
  return m;
}

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::relu:
      return "relu";
    case Activation::tanh:
      return "tanh";
    case Activation::none:
      break;
  }
  return "none";
}

Activation activation_from(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "none") return Activation::none;
  throw DataError("checkpoint: unknown activation '" + s + "'");
}

json spec_to_json(const MlpSpec& spec) {
  json layers = json::array();
  for (const LayerSpec& l : spec.layers) {
    layers.push_back(
        {{"width", l.width}, {"activation", activation_name(l.activation)}, {"batch_norm", l.batch_norm}});
  }
  return json{{"input", spec.input}, {"layers", std::move(layers)}};
}

MlpSpec spec_from_json(const json& j) {
  MlpSpec spec;
  spec.input = j.at("input").get<int>();
  for (const json& l : j.at("layers")) {
    spec.layers.push_back({l.at("width").get<int>(),
                           activation_from(l.at("activation").get<std::string>()),
                           l.at("batch_norm").get<bool>()});
  }
  return spec;
}

json mlp_state(const Mlp& mlp) {
  json layers = json::array();
  for (const Layer& l : mlp.layers()) {
    json e{{"weight", matrix_to_json(l.weight)}, {"bias", matrix_to_json(l.bias)}};
    if (l.gamma.size() > 0) {
      e["gamma"] = matrix_to_json(l.gamma);
      e["beta"] = matrix_to_json(l.beta);
      e["running_mean"] = matrix_to_json(l.bn.running_mean);
      e["running_var"] = matrix_to_json(l.bn.running_var);
      e["momentum"] = hex_bits(l.bn.momentum);
      e["epsilon"] = hex_bits(l.bn.epsilon);
    }
    layers.push_back(std::move(e));
  }
  return layers;
}

void load_mlp_state(Mlp& mlp, const json& layers) {
  auto& ls = mlp.layers();
  if (layers.size() != ls.size()) throw DataError("checkpoint: layer count mismatch");
  for (std::size_t i = 0; i < ls.size(); ++i) {
    const json& e = layers[i];
    Layer& l = ls[i];
    auto assign = [](Matrix& dst, const json& src, const char* what) {
      Matrix m = matrix_from_json(src);
      if (m.rows() != dst.rows() || m.cols() != dst.cols()) {
        throw DataError(std::string("checkpoint: shape mismatch for ") + what);
      }
      dst = std::move(m);
    };
    assign(l.weight, e.at("weight"), "weight");
    assign(l.bias, e.at("bias"), "bias");
    if (l.gamma.size() > 0) {
      assign(l.gamma, e.at("gamma"), "gamma");
      assign(l.beta, e.at("beta"), "beta");
      l.bn.running_mean = matrix_from_json(e.at("running_mean")).row(0);
      l.bn.running_var = matrix_from_json(e.at("running_var")).row(0);
      l.bn.momentum = from_hex_bits(e.at("momentum").get<std::string>());
      l.bn.epsilon = from_hex_bits(e.at("epsilon").get<std::string>());
    }
  }
}

}  // namespace

json architecture_to_json(const Architecture& arch) {
  return json{{"preset", arch.preset},
              {"d_x", arch.d_x},
              {"n_s", arch.n_s},
              {"n_y", arch.n_y},
              {"d_emb", arch.d_emb},
              {"encoder", spec_to_json(arch.encoder)},
              {"predictor", spec_to_json(arch.predictor)},
              {"discriminator", spec_to_json(arch.discriminator)}};
}

Architecture architecture_from_json(const json& j) {
  Architecture a;
  a.preset = j.at("preset").get<std::string>();
  a.d_x = j.at("d_x").get<int>();
  a.n_s = j.at("n_s").get<int>();
  a.n_y = j.at("n_y").get<int>();
  a.d_emb = j.at("d_emb").get<int>();
  a.encoder = spec_from_json(j.at("encoder"));
  a.predictor = spec_from_json(j.at("predictor"));
  a.discriminator = spec_from_json(j.at("discriminator"));
  a.validate();
  return a;
}

json to_json(const GameModel& model) {
  return json{{"format", kFormat},
              {"version", kVersion},
              {"architecture", architecture_to_json(model.arch)},
              {"s_embedding", matrix_to_json(model.s_embedding)},
              {"encoder", mlp_state(model.encoder)},
              {"predictor", mlp_state(model.predictor)},
              {"discriminator", mlp_state(model.discriminator)}};
}

GameModel model_from_json(const json& j) {
  try {
    if (j.at("format").get<std::string>() != kFormat) throw DataError("checkpoint: wrong format tag");
    if (j.at("version").get<int>() != kVersion) {
      throw DataError("checkpoint: unsupported version " + j.at("version").dump());
    }
    // Build the skeleton deterministically, then overwrite every parameter.
    GameModel m = init_model(architecture_from_json(j.at("architecture")), InitConfig{});
    Matrix emb = matrix_from_json(j.at("s_embedding"));
    if (emb.rows() != m.s_embedding.rows() || emb.cols() != m.s_embedding.cols()) {
      throw DataError("checkpoint: embedding shape mismatch");
    }
    m.s_embedding = std::move(emb);
    load_mlp_state(m.encoder, j.at("encoder"));
    load_mlp_state(m.predictor, j.at("predictor"));
    load_mlp_state(m.discriminator, j.at("discriminator"));
    return m;
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const GameModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out << to_json(model).dump(1) << '\n';
}

GameModel load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read checkpoint " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("checkpoint " + path + ": " + e.what());
  }
  return model_from_json(j);
}

}  // namespace invarnet::model
