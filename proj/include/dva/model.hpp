#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dva/kernels.hpp"
#include "json.hpp"

namespace dva {

struct StackConfig {
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
};

struct ModelConfig {
  std::size_t vocab_size = 0;
  int max_seq_len = 128;
  StackConfig backbone;
  StackConfig phrase_encoder;
  double init_std = 0.02;

  void validate() const;  // throws std::invalid_argument
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

enum class ParamGroup { kBackbone, kPhraseEncoder, kProjector, kAdapter };

std::string_view to_string(ParamGroup g);

struct Parameter {
  std::string name;
  ParamGroup group = ParamGroup::kBackbone;
  Matrix value;
  Matrix grad;
};

using ParamId = std::size_t;

struct LoraAdapter {
  ParamId down;  // d x r
  ParamId up;    // r x d, zero-initialized
};

struct LayerParams {
  ParamId ln1_gain, ln1_bias;
  ParamId wq, bq, wk, bk, wv, bv, wo, bo;
  ParamId ln2_gain, ln2_bias;
  ParamId w_fc, b_fc, w_proj, b_proj;
  std::optional<LoraAdapter> lora_q, lora_v;
};

/// Token/position embeddings, blocks and final norm of one causal stack.
struct StackParams {
  int n_heads = 1;
  ParamId tok_emb;
  ParamId pos_emb;
  std::vector<LayerParams> layers;
  ParamId lnf_gain, lnf_bias;
};

struct ProjectorParams {
  ParamId w1, b1, w2, b2;
};

/// Backbone LM, phrase encoder and projector. Weights are plain values so
/// a model can be copied; all tensors live in parameters().
class DvaModel {
 public:
  DvaModel() = default;
  DvaModel(const ModelConfig& config, std::uint64_t vocab_fingerprint, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::uint64_t vocab_fingerprint() const { return vocab_fingerprint_; }

  // Rank-r adapters on the backbone query/value projections.
  void add_lora(int rank, double alpha, std::uint64_t seed);
  bool has_lora() const { return lora_rank_ > 0; }
  double lora_scale() const { return lora_rank_ > 0 ? lora_alpha_ / lora_rank_ : 0.0; }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Parameter& param(ParamId id) { return params_[id]; }
  const Parameter& param(ParamId id) const { return params_[id]; }
  const Matrix& value(ParamId id) const { return params_[id].value; }
  const Parameter& find(std::string_view name) const;
  Parameter& find(std::string_view name);

  const StackParams& backbone() const { return backbone_; }
  const StackParams& phrase_encoder() const { return encoder_; }
  const ProjectorParams& projector() const { return projector_; }

  // Input/output token embeddings of the backbone.
  const Matrix& input_embeddings() const { return value(backbone_.tok_emb); }
  const Matrix& output_embeddings() const { return value(out_emb_); }
  ParamId output_embedding_id() const { return out_emb_; }

  void zero_grad();
  std::size_t num_parameters() const;

  // FNV-1a over config and parameter bytes.
  std::uint64_t fingerprint() const;

  // Container `dva-ckpt v1`: header lines, then per tensor a
  // "<name> <rows> <cols>" line followed by little-endian float32 data.
  void save(const std::filesystem::path& path) const;
  static DvaModel load(const std::filesystem::path& path, std::optional<std::uint64_t> expected_vocab = std::nullopt);

 private:
  ParamId add_param(std::string name, ParamGroup group, Matrix value);
  StackParams make_stack(const std::string& prefix, ParamGroup group, const StackConfig& cfg, std::uint64_t& rng_state);

  ModelConfig config_;
  std::uint64_t vocab_fingerprint_ = 0;
  std::vector<Parameter> params_;
  StackParams backbone_;
  StackParams encoder_;
  ProjectorParams projector_{};
  ParamId out_emb_ = 0;
  int lora_rank_ = 0;
  double lora_alpha_ = 0.0;
};

}  // namespace dva
