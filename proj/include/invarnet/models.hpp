#pragma once

#include "invarnet/autodiff.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>

namespace invarnet::model {

enum class Activation { none, relu, tanh };

struct LayerSpec {
  int width = 0;
  Activation activation = Activation::none;
  bool batch_norm = false;
};

// Feedforward stack: each layer is affine, then optional batch norm, then the
// activation.
struct MlpSpec {
  int input = 0;
  std::vector<LayerSpec> layers;

  int output() const { return layers.empty() ? input : layers.back().width; }
  // Weights, biases and batch-norm scale/shift.
  std::size_t parameter_count() const;
  void validate(const std::string& what) const;
};

// Whether batch-norm layers use batch statistics (and update running
// estimates) or the running estimates.
enum class Mode { train, eval };

struct Layer {
  Matrix weight;  // in x out
  Matrix bias;    // 1 x out
  Matrix gamma;   // 1 x out, empty without batch norm
  Matrix beta;
  ad::BatchNormState bn;
};

class Mlp {
 public:
  Mlp() = default;
  Mlp(MlpSpec spec, Rng& rng);

  const MlpSpec& spec() const { return spec_; }
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }

  // Parameter matrices in a fixed order: per layer weight, bias[, gamma, beta].
  std::vector<Matrix*> parameters();
  std::vector<const Matrix*> parameters() const;

  // `params` are tape leaves aligned with parameters().
  ad::Var forward(ad::Var x, std::span<const ad::Var> params, Mode mode);

 private:
  MlpSpec spec_;
  std::vector<Layer> layers_;
};

struct Architecture {
  std::string preset = "custom";
  int d_x = 0;
  int n_s = 0;
  int n_y = 0;
  int d_emb = 8;
  MlpSpec encoder;
  MlpSpec predictor;
  MlpSpec discriminator;

  int d_h() const { return encoder.output(); }
  void validate() const;
};

// Tabular setting: single-layer encoder and predictor, three-layer
// discriminator with batch norm on its hidden layers, hidden width 64.
Architecture fair_preset(int d_x, int n_s, int n_y, int d_emb = 8);
// Image setting: single-layer encoder and predictor, two-layer discriminator
// with batch norm, hidden width 100.
Architecture image_preset(int d_x, int n_s, int n_y, int d_emb = 8);
Architecture preset_by_name(const std::string& name, int d_x, int n_s, int n_y, int d_emb = 8);

struct InitConfig {
  std::uint64_t seed = 0;
  double embedding_stddev = 0.01;
};

enum class Player { encoder, predictor, discriminator };

struct GameModel {
  Architecture arch;
  Matrix s_embedding;  // n_s x d_emb, part of the encoder
  Mlp encoder;
  Mlp predictor;
  Mlp discriminator;

  // s_embedding, encoder, predictor, discriminator parameters, in that order.
  std::vector<Matrix*> parameters();
  std::vector<const Matrix*> parameters() const;
  // Owning player of each entry of parameters().
  std::vector<Player> parameter_owners() const;
  std::size_t parameter_count() const;
};

// Weights scaled-uniform with bound sqrt(6 / (fan_in + fan_out)), biases 0,
// batch-norm gamma 1 / beta 0, embedding N(0, embedding_stddev^2).
GameModel init_model(const Architecture& arch, const InitConfig& init);

// Parameters of a GameModel registered as leaves on one tape.
struct BoundModel {
  std::vector<ad::Var> params;  // aligned with GameModel::parameters()
  std::size_t encoder_begin = 1;
  std::size_t predictor_begin = 0;
  std::size_t discriminator_begin = 0;

  ad::Var embedding() const { return params[0]; }
  std::span<const ad::Var> encoder() const;
  std::span<const ad::Var> predictor() const;
  std::span<const ad::Var> discriminator() const;
};

BoundModel bind(ad::Tape& tape, const GameModel& model);

// h = E(x, s): the encoder MLP applied to [x, embedding(s)].
ad::Var encode(GameModel& model, const BoundModel& bound, ad::Var x, LabelSpan s, Mode mode);
ad::Var predict_logits(GameModel& model, const BoundModel& bound, ad::Var h, Mode mode);
// Callers pass the gradient-reversed representation when training.
ad::Var discriminate_logits(GameModel& model, const BoundModel& bound, ad::Var h, Mode mode);

// Eval-mode conveniences that do not keep a tape around.
Matrix encode(GameModel& model, const Matrix& x, LabelSpan s);
Matrix predict_logits(GameModel& model, const Matrix& h);
Matrix discriminate_logits(GameModel& model, const Matrix& h);
// Argmax of the predictor; ties go to the smallest class index.
Labels predict_labels(GameModel& model, const Matrix& x, LabelSpan s);
Labels argmax_rows(const Matrix& scores);

// Checkpoints are JSON; every f64 is stored as the hex of its bit pattern so a
// save/load round trip is exact.
nlohmann::json to_json(const GameModel& model);
GameModel model_from_json(const nlohmann::json& j);
void save_checkpoint(const GameModel& model, const std::string& path);
GameModel load_checkpoint(const std::string& path);

nlohmann::json architecture_to_json(const Architecture& arch);
Architecture architecture_from_json(const nlohmann::json& j);

}  // namespace invarnet::model
