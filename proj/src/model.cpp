#include "dva/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <utility>
#include <stdexcept>

#include <fmt/format.h>

#include "dva/text_base.hpp"

namespace dva {
namespace {

StackConfig stack_from_json(const nlohmann::json& j, const StackConfig& defaults) {
  StackConfig c = defaults;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() == "d_model") c.d_model = it.value().get<int>();
    else if (it.key() == "n_layers") c.n_layers = it.value().get<int>();
    else if (it.key() == "n_heads") c.n_heads = it.value().get<int>();
    else throw std::invalid_argument(fmt::format("unknown model stack key '{}'", it.key()));
  }
  return c;
}

nlohmann::json stack_to_json(const StackConfig& c) {
  return {{"d_model", c.d_model}, {"n_layers", c.n_layers}, {"n_heads", c.n_heads}};
}

void validate_stack(const StackConfig& c, std::string_view what) {
  if (c.d_model < 1 || c.n_layers < 0 || c.n_heads < 1) {
    throw std::invalid_argument(fmt::format("{}: d_model, n_heads must be positive and n_layers >= 0", what));
  }
  if (c.d_model % c.n_heads != 0) {
    throw std::invalid_argument(fmt::format("{}: d_model {} is not divisible by n_heads {}", what, c.d_model, c.n_heads));
  }
}

Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 4) throw std::invalid_argument("model.vocab_size must cover the reserved ids");
  if (max_seq_len < 2) throw std::invalid_argument("model.max_seq_len must be >= 2");
  validate_stack(backbone, "backbone");
  validate_stack(phrase_encoder, "phrase_encoder");
  if (!(init_std > 0.0)) throw std::invalid_argument("model.init_std must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"vocab_size", vocab_size},
          {"max_seq_len", max_seq_len},
          {"backbone", stack_to_json(backbone)},
          {"phrase_encoder", stack_to_json(phrase_encoder)},
          {"init_std", init_std}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    if (k == "vocab_size") c.vocab_size = it.value().get<std::size_t>();
    else if (k == "max_seq_len") c.max_seq_len = it.value().get<int>();
    else if (k == "backbone") c.backbone = stack_from_json(it.value(), c.backbone);
    else if (k == "phrase_encoder") c.phrase_encoder = stack_from_json(it.value(), c.phrase_encoder);
    else if (k == "init_std") c.init_std = it.value().get<double>();
    else throw std::invalid_argument(fmt::format("unknown model key '{}'", k));
  }
  return c;
}

std::string_view to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::kBackbone: return "backbone";
    case ParamGroup::kPhraseEncoder: return "phrase_encoder";
    case ParamGroup::kProjector: return "projector";
    case ParamGroup::kAdapter: return "adapter";
  }
  return "?";
}

ParamId DvaModel::add_param(std::string name, ParamGroup group, Matrix value) {
  Parameter p;
  p.name = std::move(name);
  p.group = group;
  p.grad = Matrix::Zero(value.rows(), value.cols());
  p.value = std::move(value);
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

StackParams DvaModel::make_stack(const std::string& prefix, ParamGroup group, const StackConfig& cfg,
                                 std::uint64_t& rng_state) {
  std::mt19937_64 rng(rng_state);
  const double sd = config_.init_std;
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  const auto v = static_cast<Eigen::Index>(config_.vocab_size);
  auto zeros = [](Eigen::Index c) { return Matrix::Zero(1, c); };
  auto ones = [](Eigen::Index c) { return Matrix::Ones(1, c); };

  StackParams s;
  s.n_heads = cfg.n_heads;
  s.tok_emb = add_param(prefix + ".tok_emb", group, normal_matrix(v, d, sd, rng));
  s.pos_emb = add_param(prefix + ".pos_emb", group, normal_matrix(config_.max_seq_len, d, sd, rng));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = fmt::format("{}.layers.{}.", prefix, l);
    LayerParams L{};
    L.ln1_gain = add_param(p + "ln1.gain", group, ones(d));
    L.ln1_bias = add_param(p + "ln1.bias", group, zeros(d));
    L.wq = add_param(p + "attn.wq", group, normal_matrix(d, d, sd, rng));
    L.bq = add_param(p + "attn.bq", group, zeros(d));
    L.wk = add_param(p + "attn.wk", group, normal_matrix(d, d, sd, rng));
    L.bk = add_param(p + "attn.bk", group, zeros(d));
    L.wv = add_param(p + "attn.wv", group, normal_matrix(d, d, sd, rng));
    L.bv = add_param(p + "attn.bv", group, zeros(d));
    L.wo = add_param(p + "attn.wo", group, normal_matrix(d, d, sd, rng));
    L.bo = add_param(p + "attn.bo", group, zeros(d));
    L.ln2_gain = add_param(p + "ln2.gain", group, ones(d));
    L.ln2_bias = add_param(p + "ln2.bias", group, zeros(d));
    L.w_fc = add_param(p + "mlp.w_fc", group, normal_matrix(d, 4 * d, sd, rng));
    L.b_fc = add_param(p + "mlp.b_fc", group, zeros(4 * d));
    L.w_proj = add_param(p + "mlp.w_proj", group, normal_matrix(4 * d, d, sd, rng));
    L.b_proj = add_param(p + "mlp.b_proj", group, zeros(d));
    s.layers.push_back(L);
  }
  s.lnf_gain = add_param(prefix + ".lnf.gain", group, ones(d));
  s.lnf_bias = add_param(prefix + ".lnf.bias", group, zeros(d));
  rng_state = rng();
  return s;
}

DvaModel::DvaModel(const ModelConfig& config, std::uint64_t vocab_fingerprint, std::uint64_t seed)
    : config_(config), vocab_fingerprint_(vocab_fingerprint) {
  config_.validate();
  std::uint64_t state = seed;
  backbone_ = make_stack("backbone", ParamGroup::kBackbone, config_.backbone, state);
  {
    std::mt19937_64 rng(state);
    out_emb_ = add_param("backbone.out_emb", ParamGroup::kBackbone,
                         normal_matrix(static_cast<Eigen::Index>(config_.vocab_size), config_.backbone.d_model,
                                       config_.init_std, rng));
    state = rng();
  }
  encoder_ = make_stack("phrase_encoder", ParamGroup::kPhraseEncoder, config_.phrase_encoder, state);
  std::mt19937_64 rng(state);
  const auto de = static_cast<Eigen::Index>(config_.phrase_encoder.d_model);
  const auto d = static_cast<Eigen::Index>(config_.backbone.d_model);
  projector_.w1 = add_param("projector.w1", ParamGroup::kProjector, normal_matrix(de, d, config_.init_std, rng));
  projector_.b1 = add_param("projector.b1", ParamGroup::kProjector, Matrix::Zero(1, d));
  projector_.w2 = add_param("projector.w2", ParamGroup::kProjector, normal_matrix(d, d, config_.init_std, rng));
  projector_.b2 = add_param("projector.b2", ParamGroup::kProjector, Matrix::Zero(1, d));
}

void DvaModel::add_lora(int rank, double alpha, std::uint64_t seed) {
  if (rank < 1) throw std::invalid_argument("lora rank must be >= 1");
  if (has_lora()) throw std::logic_error("model already has LoRA adapters");
  lora_rank_ = rank;
  lora_alpha_ = alpha;
  std::mt19937_64 rng(seed);
  const auto d = static_cast<Eigen::Index>(config_.backbone.d_model);
  for (std::size_t l = 0; l < backbone_.layers.size(); ++l) {
    auto& L = backbone_.layers[l];
    const std::string p = fmt::format("backbone.layers.{}.lora.", l);
    L.lora_q = LoraAdapter{add_param(p + "q.down", ParamGroup::kAdapter, normal_matrix(d, rank, config_.init_std, rng)),
                           add_param(p + "q.up", ParamGroup::kAdapter, Matrix::Zero(rank, d))};
    L.lora_v = LoraAdapter{add_param(p + "v.down", ParamGroup::kAdapter, normal_matrix(d, rank, config_.init_std, rng)),
                           add_param(p + "v.up", ParamGroup::kAdapter, Matrix::Zero(rank, d))};
  }
}

const Parameter& DvaModel::find(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p;
  }
  throw std::out_of_range(fmt::format("no parameter named '{}'", name));
}

Parameter& DvaModel::find(std::string_view name) {
  return const_cast<Parameter&>(std::as_const(*this).find(name));
}

void DvaModel::zero_grad() {
  for (auto& p : params_) p.grad.setZero(p.value.rows(), p.value.cols());
}

std::size_t DvaModel::num_parameters() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

std::uint64_t DvaModel::fingerprint() const {
  std::uint64_t h = fnv1a(config_.to_json().dump());
  for (const auto& p : params_) {
    h = fnv1a(p.name, h);
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(p.value.data()),
                               static_cast<std::size_t>(p.value.size()) * sizeof(double)),
              h);
  }
  return h;
}

void DvaModel::save(const std::filesystem::path& path) const {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError(fmt::format("cannot write checkpoint {}", path.string()));
  out << "dva-ckpt v1\n";
  out << "config " << config_.to_json().dump() << '\n';
  out << fmt::format("vocab {:016x}\n", vocab_fingerprint_);
  out << fmt::format("lora {} {}\n", lora_rank_, lora_alpha_);
  out << "tensors " << params_.size() << '\n';
  std::vector<float> buf;
  for (const auto& p : params_) {
    out << p.name << ' ' << p.value.rows() << ' ' << p.value.cols() << '\n';
    buf.resize(static_cast<std::size_t>(p.value.size()));
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(p.value.data()[i]);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    out << '\n';
  }
  if (!out) throw InputError(fmt::format("failed writing checkpoint {}", path.string()));
}

DvaModel DvaModel::load(const std::filesystem::path& path, std::optional<std::uint64_t> expected_vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError(fmt::format("cannot read checkpoint {}", path.string()));
  auto bad = [&](std::string_view why) {
    return InputError(fmt::format("{}: bad checkpoint ({})", path.string(), why));
  };
  std::string line;
  if (!std::getline(in, line) || line != "dva-ckpt v1") throw bad("missing dva-ckpt v1 header");
  if (!std::getline(in, line) || line.rfind("config ", 0) != 0) throw bad("missing config line");
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_json(nlohmann::json::parse(line.substr(7)));
  } catch (const std::exception& e) {
    throw bad(e.what());
  }
  if (!std::getline(in, line) || line.rfind("vocab ", 0) != 0) throw bad("missing vocab fingerprint");
  const std::uint64_t vocab_fp = std::stoull(line.substr(6), nullptr, 16);
  if (expected_vocab && *expected_vocab != vocab_fp) {
    throw InputError(fmt::format("{}: checkpoint was trained with vocab {:016x}, loaded vocab is {:016x}",
                                 path.string(), vocab_fp, *expected_vocab));
  }
  int rank = 0;
  double alpha = 0.0;
  std::size_t count = 0;
  {
    if (!std::getline(in, line)) throw bad("missing lora line");
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag >> rank >> alpha) || tag != "lora") throw bad("malformed lora line");
    if (!std::getline(in, line)) throw bad("missing tensor count");
    std::istringstream ts(line);
    if (!(ts >> tag >> count) || tag != "tensors") throw bad("malformed tensor count");
  }

  DvaModel model(cfg, vocab_fp, 0);
  if (rank > 0) model.add_lora(rank, alpha, 0);
  if (count != model.params_.size()) throw bad("tensor count does not match config");
  std::vector<float> buf;
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw bad("truncated tensor table");
    std::istringstream hs(line);
    std::string name;
    Eigen::Index rows = 0, cols = 0;
    if (!(hs >> name >> rows >> cols)) throw bad("malformed tensor header");
    Parameter& p = model.find(name);
    if (p.value.rows() != rows || p.value.cols() != cols) throw bad(fmt::format("shape mismatch for {}", name));
    buf.resize(static_cast<std::size_t>(rows * cols));
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in || in.get() != '\n') throw bad(fmt::format("truncated data for {}", name));
    for (std::size_t k = 0; k < buf.size(); ++k) p.value.data()[k] = static_cast<double>(buf[k]);
  }
  return model;
}

}  // namespace dva
