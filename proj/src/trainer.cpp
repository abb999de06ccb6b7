#include "dva/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

#include <fmt/format.h>

#include "dva/autograd.hpp"

namespace dva {
namespace {

/// Tape handles for every model parameter; frozen ones are constants.
struct Bound {
  std::vector<ag::Var> vars;
  ag::Var operator[](ParamId id) const { return vars[id]; }
};

Bound bind(ag::Tape& tape, DvaModel& model, const std::vector<char>& trainable) {
  Bound b;
  auto& params = model.parameters();
  b.vars.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    b.vars.push_back(trainable[i] ? tape.leaf(params[i].value, &params[i].grad) : tape.constant(params[i].value));
  }
  return b;
}

ag::Var linear(ag::Var x, ag::Var w, ag::Var b) { return ag::add_row(ag::matmul(x, w), b); }

// Right-padded batch through one stack; returns final-norm hidden states.
ag::Var stack_forward(const Bound& p, const StackParams& s, ag::Var token_table, const IdBatch& ids,
                      double lora_scale, int pad_row) {
  std::vector<int> rows(ids.ids.size());
  std::vector<int> positions(ids.ids.size());
  std::vector<char> valid(ids.ids.size());
  for (int b = 0; b < ids.batch; ++b) {
    for (int t = 0; t < ids.time; ++t) {
      const auto i = static_cast<std::size_t>(b * ids.time + t);
      const int id = ids.ids[i];
      valid[i] = id != kPadSlot;
      rows[i] = id == kPadSlot ? pad_row : id;
      positions[i] = t;
    }
  }
  ag::Var x = ag::add(ag::gather_rows(token_table, std::move(rows)), ag::gather_rows(p[s.pos_emb], std::move(positions)));
  for (const auto& L : s.layers) {
    ag::Var h = ag::layer_norm(x, p[L.ln1_gain], p[L.ln1_bias]);
    ag::Var q = linear(h, p[L.wq], p[L.bq]);
    ag::Var k = linear(h, p[L.wk], p[L.bk]);
    ag::Var v = linear(h, p[L.wv], p[L.bv]);
    if (L.lora_q) q = ag::add(q, ag::scale(ag::matmul(ag::matmul(h, p[L.lora_q->down]), p[L.lora_q->up]), lora_scale));
    if (L.lora_v) v = ag::add(v, ag::scale(ag::matmul(ag::matmul(h, p[L.lora_v->down]), p[L.lora_v->up]), lora_scale));
    ag::Var a = ag::causal_attention(q, k, v, {ids.batch, ids.time, s.n_heads, valid});
    x = ag::add(x, linear(a, p[L.wo], p[L.bo]));
    ag::Var h2 = ag::layer_norm(x, p[L.ln2_gain], p[L.ln2_bias]);
    x = ag::add(x, linear(ag::gelu(linear(h2, p[L.w_fc], p[L.b_fc])), p[L.w_proj], p[L.b_proj]));
  }
  return ag::layer_norm(x, p[s.lnf_gain], p[s.lnf_bias]);
}

ag::Var loss_graph(ag::Tape& tape, DvaModel& model, const TrainBatch& batch, const std::vector<char>& trainable) {
  const Bound p = bind(tape, model, trainable);
  const auto& bb = model.backbone();
  ag::Var e_in = p[bb.tok_emb];
  ag::Var e_out = p[model.output_embedding_id()];
  const int pad_row = 0;
  if (!batch.table.empty()) {
    std::vector<std::vector<int>> rows;
    for (const auto& ph : batch.table.phrases()) rows.emplace_back(ph.subword_ids.begin(), ph.subword_ids.end());
    const IdBatch pb = IdBatch::right_padded(rows);
    const auto& enc = model.phrase_encoder();
    ag::Var hidden = stack_forward(p, enc, p[enc.tok_emb], pb, 0.0, pad_row);
    std::vector<int> last;
    for (std::size_t j = 0; j < rows.size(); ++j) last.push_back(static_cast<int>(j) * pb.time + static_cast<int>(rows[j].size()) - 1);
    ag::Var h = ag::select_rows(hidden, std::move(last));
    const auto& pr = model.projector();
    ag::Var ep = linear(ag::gelu(linear(h, p[pr.w1], p[pr.b1])), p[pr.w2], p[pr.b2]);
    e_in = ag::concat_rows(e_in, ep);
    e_out = ag::concat_rows(e_out, ep);
  }
  ag::Var hidden = stack_forward(p, bb, e_in, batch.inputs, model.lora_scale(), pad_row);
  return ag::cross_entropy(ag::matmul_bt(hidden, e_out), batch.targets);
}

std::vector<char> trainable_mask(const DvaModel& model, const Trainer& trainer) {
  std::vector<char> mask;
  for (const auto& p : model.parameters()) mask.push_back(trainer.trains(p));
  return mask;
}

}  // namespace

TrainMode parse_train_mode(std::string_view name) {
  if (name == "full") return TrainMode::kFull;
  if (name == "frozen_backbone") return TrainMode::kFrozenBackbone;
  if (name == "lora") return TrainMode::kLora;
  throw std::invalid_argument(fmt::format("unknown training mode '{}' (expected full, frozen_backbone or lora)", name));
}

std::string_view to_string(TrainMode m) {
  switch (m) {
    case TrainMode::kFull: return "full";
    case TrainMode::kFrozenBackbone: return "frozen_backbone";
    case TrainMode::kLora: return "lora";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("train.batch_size must be >= 1");
  if (mode == TrainMode::kLora && lora_rank < 1) throw std::invalid_argument("train.lora_rank must be >= 1 in lora mode");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("train.learning_rate must be positive");
  if (steps < 0) throw std::invalid_argument("train.steps must be >= 0");
  if (!(grad_clip > 0.0)) throw std::invalid_argument("train.grad_clip must be positive");
  sampler.validate();
}

std::size_t TrainBatch::supervised_positions() const {
  return static_cast<std::size_t>(std::count_if(targets.begin(), targets.end(), [](int t) { return t >= 0; }));
}

TrainBatch assemble_batch_with_table(std::span<const std::string> samples, PhraseTable table,
                                     const StaticVocab& vocab) {
  if (samples.empty()) throw std::invalid_argument("assemble_batch needs at least one sample");
  TrainBatch batch;
  batch.table = std::move(table);
  std::vector<std::vector<int>> inputs;
  std::vector<std::vector<int>> targets;
  for (const auto& text : samples) {
    MixedSequence seq = encode(normalize_whitespace(text), batch.table, vocab);
    std::vector<int> in{vocab.bos_id()};
    in.insert(in.end(), seq.ids.begin(), seq.ids.end());
    std::vector<int> out(seq.ids.begin(), seq.ids.end());
    out.push_back(vocab.eos_id());
    inputs.push_back(std::move(in));
    targets.push_back(std::move(out));
    batch.sequences.push_back(std::move(seq));
  }
  batch.inputs = IdBatch::right_padded(inputs);
  batch.targets = IdBatch::right_padded(targets).ids;
  return batch;
}

TrainBatch assemble_batch(std::span<const std::string> samples, const SamplerConfig& sampler,
                          const StaticVocab& vocab, std::uint64_t seed) {
  SamplerConfig cfg = sampler;
  cfg.seed = seed;
  cfg.validate();
  const auto impl = SamplerRegistry::global().create(to_string(cfg.strategy), vocab);
  const auto surfaces = impl->sample(samples, cfg);
  return assemble_batch_with_table(samples, PhraseTable::build_lenient(surfaces, vocab, cfg.min_phrase_tokens), vocab);
}

double compute_loss(const Logits& logits, const TrainBatch& batch) {
  if (logits.batch != batch.inputs.batch || logits.time != batch.inputs.time ||
      static_cast<std::size_t>(logits.values.rows()) != batch.targets.size()) {
    throw std::invalid_argument(fmt::format("logits shape {}x{} does not match batch {}x{}", logits.batch, logits.time,
                                            batch.inputs.batch, batch.inputs.time));
  }
  double total = 0.0;
  std::size_t count = 0;
  for (Eigen::Index r = 0; r < logits.values.rows(); ++r) {
    const int y = batch.targets[static_cast<std::size_t>(r)];
    if (y < 0) continue;
    if (y >= logits.values.cols()) throw std::out_of_range(fmt::format("target id {} outside logits width", y));
    const auto z = logits.values.row(r);
    const double m = z.maxCoeff();
    total += m + std::log((z.array() - m).exp().sum()) - z(y);
    ++count;
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

double evaluate_loss(const DvaModel& model, const TrainBatch& batch) {
  const auto emb = expand_embeddings(base_embeddings(model), encode_phrases(batch.table, model));
  return compute_loss(forward(model, emb, batch.inputs), batch);
}

double backprop_loss(DvaModel& model, const TrainBatch& batch, const std::vector<char>& trainable) {
  model.zero_grad();
  ag::Tape tape;
  ag::Var loss = loss_graph(tape, model, batch, trainable);
  tape.backward(loss);
  return loss.value()(0, 0);
}

Trainer::Trainer(DvaModel& model, TrainConfig config) : model_(&model), config_(std::move(config)) {
  config_.validate();
  if (config_.mode == TrainMode::kLora && !model.has_lora()) {
    model.add_lora(config_.lora_rank, config_.lora_alpha, mix_seed(config_.seed, 0x10ca));
  }
  for (const auto& p : model.parameters()) {
    m_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    v_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  }
}

bool Trainer::trains(const Parameter& p) const {
  switch (config_.mode) {
    case TrainMode::kFull: return true;
    case TrainMode::kFrozenBackbone: return p.group != ParamGroup::kBackbone && p.group != ParamGroup::kAdapter;
    case TrainMode::kLora: return p.group != ParamGroup::kBackbone;
  }
  return false;
}

double Trainer::accumulate_gradients(const TrainBatch& batch) {
  return backprop_loss(*model_, batch, trainable_mask(*model_, *this));
}

StepResult Trainer::step(const TrainBatch& batch) {
  auto& params = model_->parameters();
  const auto mask = trainable_mask(*model_, *this);
  const double loss = backprop_loss(*model_, batch, mask);
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (mask[i]) sq += params[i].grad.squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(loss) || !std::isfinite(norm)) {
    double max_abs = 0.0;
    std::string worst;
    for (const auto& p : params) {
      const double a = p.value.cwiseAbs().maxCoeff();
      if (!std::isfinite(a) || a > max_abs) {
        max_abs = a;
        worst = p.name;
      }
    }
    throw TrainingError(fmt::format(
        "non-finite training step {}: loss={} grad_norm={} phrases={} supervised={} largest |weight|={} in {}",
        t_ + 1, loss, norm, batch.table.size(), batch.supervised_positions(), max_abs, worst));
  }
  const double clip = norm > config_.grad_clip ? config_.grad_clip / norm : 1.0;
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, t_), c2 = 1.0 - std::pow(b2, t_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!mask[i]) continue;
    const Matrix g = params[i].grad * clip;
    m_[i] = b1 * m_[i] + (1.0 - b1) * g;
    v_[i] = b2 * v_[i] + (1.0 - b2) * g.cwiseProduct(g);
    params[i].value.array() -=
        config_.learning_rate * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.adam_eps);
  }
  return {t_, loss, norm, batch.table.size()};
}

std::vector<StepResult> train(DvaModel& model, const DocumentSet& corpus, const StaticVocab& vocab,
                              const TrainConfig& config, std::ostream* log) {
  if (corpus.empty()) throw std::invalid_argument("training corpus is empty");
  Trainer trainer(model, config);
  std::vector<StepResult> results;
  const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), corpus.size());
  for (int s = 0; s < config.steps; ++s) {
    const auto picks = draw_without_replacement(corpus.size(), take, mix_seed(config.seed, static_cast<std::uint64_t>(s)));
    std::vector<std::string> texts;
    for (auto i : picks) texts.push_back(corpus.documents[i].text);
    const TrainBatch batch =
        assemble_batch(texts, config.sampler, vocab, mix_seed(config.sampler.seed, static_cast<std::uint64_t>(s)));
    const StepResult r = trainer.step(batch);
    if (log) {
      *log << nlohmann::json{{"step", r.step}, {"loss", r.loss}, {"lr", config.learning_rate},
                             {"mode", std::string(to_string(config.mode))}, {"phrases", r.phrases}}
                  .dump()
           << '\n';
    }
    results.push_back(r);
  }
  return results;
}

GradCheckResult gradient_check(DvaModel& model, const TrainBatch& batch, double epsilon, double floor) {
  const std::vector<char> all(model.parameters().size(), 1);
  backprop_loss(model, batch, all);
  GradCheckResult result;
  for (auto& p : model.parameters()) {
    const Matrix analytic = p.grad;
    Matrix numeric(analytic.rows(), analytic.cols());
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      double& w = p.value.data()[i];
      const double saved = w;
      w = saved + epsilon;
      const double up = evaluate_loss(model, batch);
      w = saved - epsilon;
      const double down = evaluate_loss(model, batch);
      w = saved;
      numeric.data()[i] = (up - down) / (2.0 * epsilon);
    }
    const Matrix diff = analytic - numeric;
    const double rel = diff.norm() / std::max(analytic.norm() + numeric.norm(), floor);
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_parameter = p.name;
    }
    result.max_abs_error = std::max(result.max_abs_error, diff.cwiseAbs().maxCoeff());
    result.entries_checked += static_cast<std::size_t>(p.value.size());
  }
  return result;
}

}  // namespace dva
