#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "textsettr/corpus.hpp"
#include "textsettr/corruption.hpp"
#include "textsettr/model.hpp"

namespace textsettr {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reconstruction tasks: Noise, Back-Translation, Noisy Back-Translation.
enum class Task { N = 0, BT = 1, NBT = 2 };

std::string task_name(Task t);
Task parse_task(std::string_view name);

struct ExamplePair {
  TokenSeq context;
  TokenSeq target;
};

struct TrainConfig {
  std::vector<Task> tasks{Task::N, Task::NBT};
  NoiseSubtypes noise_subtypes;
  NoiseBounds noise_bounds;
  int steps = 2000;
  int tokens_per_batch = 4096;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1;
  ModelConfig model;  // vocab_size acts as the vocabulary cap
  double bt_temperature = 1.0;
  /// Random add/delete ranges (instead of zeros) in the back-translation pass.
  bool bt_random_ranges = false;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Global gradient-norm clip; 0 disables.
  double clip_grad_norm = 1.0;
  int log_every = 50;

  /// Throws TrainingError.
  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j);
};

TrainConfig load_train_config(const std::filesystem::path& path);

/// Builds the vocabulary from every context and target string (serial pass).
Vocabulary build_vocabulary(const std::vector<CorpusRecord>& records, std::size_t max_size);

/// Tokenizes records; pairs with an empty side or longer than max_seq_len
/// are dropped and counted in `dropped`.
std::vector<ExamplePair> tokenize_pairs(const std::vector<CorpusRecord>& records, const Vocabulary& vocab,
                                        int max_seq_len, std::size_t* dropped = nullptr);

/// Adam with a fixed learning rate.
class Adam {
 public:
  Adam(const Model<float>& model, double lr, double beta1, double beta2, double eps);

  /// Applies one update from the gradients on `tape`; returns the gradient
  /// norm before clipping.
  double step(Model<float>& model, const Tape<float>& tape, double clip_norm);

  long steps() const { return t_; }
  nlohmann::json describe() const;

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

/// Corrupted inputs and ranges for one task over a batch.
struct TaskInputs {
  std::vector<TokenSeq> inputs;
  std::vector<TuningRanges> ranges;
  std::vector<RateStats> rates;
};

/// Randomness for example e of task t at step s is Rng(seed).split(s).split(t).split(e),
/// so a task's corruption does not depend on which other tasks are enabled.
TaskInputs corrupt_for_task(const Model<float>& model, const std::vector<ExamplePair>& corpus,
                            std::span<const std::size_t> batch, Task task, const TrainConfig& config,
                            std::uint64_t step);

struct StepGraph {
  std::map<Task, Tape<float>::Var> task_loss;
  Tape<float>::Var total;
};

/// Records the summed training loss for one batch on `tape`. Context styles
/// are extracted once and shared by every task.
StepGraph build_step_graph(Tape<float>& tape, const Model<float>& model, const std::vector<ExamplePair>& corpus,
                           std::span<const std::size_t> batch, std::span<const Task> tasks, const TrainConfig& config,
                           std::uint64_t step);

struct StepMetrics {
  long step = 0;
  std::map<Task, double> task_loss;
  double total_loss = 0.0;
  double grad_norm = 0.0;
  int examples = 0;
  int tokens = 0;
  double elapsed_s = 0.0;

  nlohmann::json to_json() const;
};

class Trainer {
 public:
  Trainer(TrainConfig config, std::vector<ExamplePair> corpus, Model<float> init);

  /// Indices of the next batch (epoch-shuffled, filled up to the token budget).
  std::vector<std::size_t> next_batch();

  /// One optimizer step. Throws TrainingError on a non-finite loss.
  StepMetrics step();

  const Model<float>& model() const { return model_; }
  long steps_done() const { return step_; }
  nlohmann::json metadata() const;

 private:
  TrainConfig config_;
  std::vector<ExamplePair> corpus_;
  Model<float> model_;
  Adam adam_;
  long step_ = 0;
  std::uint64_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
  double elapsed_ = 0.0;
};

/// Runs config.steps steps from a fresh initialization; `on_metrics` receives
/// every log_every-th step and the last one.
Model<float> train(const TrainConfig& config, const std::vector<ExamplePair>& corpus,
                   const std::function<void(const StepMetrics&)>& on_metrics = {}, nlohmann::json* metadata = nullptr);

struct HeldoutReport {
  double loss = 0.0;  // mean token cross-entropy
  long tokens = 0;
  long pairs = 0;
  double uniform_baseline = 0.0;  // ln(vocab_size)

  nlohmann::json to_json() const;
};

/// Teacher-forced N-task loss with noise drawn from `noise_seed`.
HeldoutReport evaluate_heldout(const Model<float>& model, const std::vector<ExamplePair>& heldout,
                               const TrainConfig& config, std::uint64_t noise_seed);

}  // namespace textsettr
