#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dva/dva_model.hpp"
#include "dva/phrase_sampler.hpp"
#include "json.hpp"

namespace dva {

enum class TrainMode { kFull, kFrozenBackbone, kLora };

TrainMode parse_train_mode(std::string_view name);
std::string_view to_string(TrainMode m);

struct TrainConfig {
  int batch_size = 8;
  TrainMode mode = TrainMode::kFull;
  int lora_rank = 8;
  double lora_alpha = 16.0;
  double learning_rate = 3e-4;
  int steps = 200;
  std::uint64_t seed = 0;
  double grad_clip = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  SamplerConfig sampler;

  void validate() const;  // throws std::invalid_argument
};

/// One training batch over a shared phrase table. Inputs are <bos> + ids and
/// targets are ids + <eos>, right-padded; padded targets are -1.
struct TrainBatch {
  PhraseTable table;
  std::vector<MixedSequence> sequences;
  IdBatch inputs;
  std::vector<int> targets;  // batch * time

  std::size_t supervised_positions() const;
};

// Samples phrases from the batch's own texts, merges them into one table and
// encodes each sample against it.
TrainBatch assemble_batch(std::span<const std::string> samples, const SamplerConfig& sampler,
                          const StaticVocab& vocab, std::uint64_t seed);

// Same, with an explicit phrase list instead of sampling.
TrainBatch assemble_batch_with_table(std::span<const std::string> samples, PhraseTable table,
                                     const StaticVocab& vocab);

// Mean cross-entropy over non-pad targets.
double compute_loss(const Logits& logits, const TrainBatch& batch);

// Loss of `model` on `batch` through the inference forward path.
double evaluate_loss(const DvaModel& model, const TrainBatch& batch);

/// Raised when a step produces a non-finite loss or gradient.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepResult {
  int step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  std::size_t phrases = 0;
};

/// Adam with global-norm clipping over the parameters the mode trains.
class Trainer {
 public:
  // Adds LoRA adapters to `model` when the mode needs them and it has none.
  Trainer(DvaModel& model, TrainConfig config);

  bool trains(const Parameter& p) const;

  // Forward, backward and one update. Leaves gradients in the model.
  StepResult step(const TrainBatch& batch);

  // Forward and backward only; returns the loss.
  double accumulate_gradients(const TrainBatch& batch);

  const TrainConfig& config() const { return config_; }
  int steps_taken() const { return t_; }

 private:
  DvaModel* model_;
  TrainConfig config_;
  std::vector<Matrix> m_, v_;
  int t_ = 0;
};

// Gradients of the batch loss for every parameter the predicate selects,
// written into Parameter::grad (zeroed first). Returns the loss.
double backprop_loss(DvaModel& model, const TrainBatch& batch, const std::vector<char>& trainable);

// Trains on `corpus` for config.steps steps. Each step draws batch_size
// documents without replacement and writes one json line to `log` if given.
std::vector<StepResult> train(DvaModel& model, const DocumentSet& corpus, const StaticVocab& vocab,
                              const TrainConfig& config, std::ostream* log = nullptr);

struct GradCheckResult {
  double max_rel_error = 0.0;  // worst tensor
  double max_abs_error = 0.0;  // worst entry
  std::string worst_parameter;
  std::size_t entries_checked = 0;
};

// Compares tape gradients of every parameter entry with central finite
// differences of evaluate_loss. The relative error of a tensor is
// ||a - n|| / max(||a|| + ||n||, floor); the result keeps the worst tensor.
GradCheckResult gradient_check(DvaModel& model, const TrainBatch& batch, double epsilon,
                               double floor = 1e-8);

}  // namespace dva
