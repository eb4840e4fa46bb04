#include "textsettr/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace textsettr {

std::string task_name(Task t) {
  switch (t) {
    case Task::N: return "N";
    case Task::BT: return "BT";
    case Task::NBT: return "NBT";
  }
  return "?";
}

Task parse_task(std::string_view name) {
  if (name == "N") return Task::N;
  if (name == "BT") return Task::BT;
  if (name == "NBT") return Task::NBT;
  throw TrainingError("unknown task '" + std::string(name) + "' (expected N, BT or NBT)");
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (tasks.empty()) throw TrainingError("train config: tasks must not be empty");
  for (std::size_t i = 0; i < tasks.size(); ++i)
    for (std::size_t j = i + 1; j < tasks.size(); ++j)
      if (tasks[i] == tasks[j]) throw TrainingError("train config: duplicate task " + task_name(tasks[i]));
  if (steps < 0) throw TrainingError("train config: steps must be non-negative");
  if (tokens_per_batch <= 0) throw TrainingError("train config: tokens_per_batch must be positive");
  if (!(learning_rate > 0.0)) throw TrainingError("train config: learning_rate must be positive");
  if (!(noise_bounds.low >= 0.0 && noise_bounds.low <= noise_bounds.high && noise_bounds.high <= 1.0))
    throw TrainingError("train config: noise bounds must satisfy 0 <= low <= high <= 1");
  if (!(bt_temperature > 0.0)) throw TrainingError("train config: bt_temperature must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 && adam_eps > 0.0))
    throw TrainingError("train config: invalid Adam hyperparameters");
  if (clip_grad_norm < 0.0) throw TrainingError("train config: clip_grad_norm must be non-negative");
  if (log_every <= 0) throw TrainingError("train config: log_every must be positive");
  try {
    model.validate();
  } catch (const ModelError& e) {
    throw TrainingError(e.what());
  }
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json t = nlohmann::json::array();
  for (Task task : tasks) t.push_back(task_name(task));
  nlohmann::json sub = nlohmann::json::array();
  if (noise_subtypes.drop) sub.push_back("drop");
  if (noise_subtypes.replace) sub.push_back("replace");
  if (noise_subtypes.shuffle) sub.push_back("shuffle");
  return {{"tasks", t},
          {"noise_subtypes", sub},
          {"noise_bounds", {noise_bounds.low, noise_bounds.high}},
          {"steps", steps},
          {"tokens_per_batch", tokens_per_batch},
          {"learning_rate", learning_rate},
          {"seed", seed},
          {"model", model.to_json()},
          {"bt_temperature", bt_temperature},
          {"bt_random_ranges", bt_random_ranges},
          {"adam_beta1", adam_beta1},
          {"adam_beta2", adam_beta2},
          {"adam_eps", adam_eps},
          {"clip_grad_norm", clip_grad_norm},
          {"log_every", log_every}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw TrainingError("train config must be a JSON object");
  TrainConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "tasks") {
        c.tasks.clear();
        for (const auto& t : v) c.tasks.push_back(parse_task(t.get<std::string>()));
      } else if (key == "noise_subtypes") {
        c.noise_subtypes = {false, false, false};
        for (const auto& s : v) {
          const auto name = s.get<std::string>();
          if (name == "drop") c.noise_subtypes.drop = true;
          else if (name == "replace") c.noise_subtypes.replace = true;
          else if (name == "shuffle") c.noise_subtypes.shuffle = true;
          else throw TrainingError("train config: unknown noise subtype '" + name + "'");
        }
      } else if (key == "noise_bounds") {
        if (!v.is_array() || v.size() != 2) throw TrainingError("train config: noise_bounds must be [low, high]");
        c.noise_bounds = {v[0].get<double>(), v[1].get<double>()};
      } else if (key == "steps") c.steps = v.get<int>();
      else if (key == "tokens_per_batch") c.tokens_per_batch = v.get<int>();
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "model") {
        try {
          c.model = ModelConfig::from_json(v);
        } catch (const ModelError& e) {
          throw TrainingError(e.what());
        }
      } else if (key == "bt_temperature") c.bt_temperature = v.get<double>();
      else if (key == "bt_random_ranges") c.bt_random_ranges = v.get<bool>();
      else if (key == "adam_beta1") c.adam_beta1 = v.get<double>();
      else if (key == "adam_beta2") c.adam_beta2 = v.get<double>();
      else if (key == "adam_eps") c.adam_eps = v.get<double>();
      else if (key == "clip_grad_norm") c.clip_grad_norm = v.get<double>();
      else if (key == "log_every") c.log_every = v.get<int>();
      else throw TrainingError("train config: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw TrainingError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw TrainingError("cannot open train config: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw TrainingError("train config is not valid JSON: " + std::string(e.what()));
  }
  return TrainConfig::from_json(j);
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

Vocabulary build_vocabulary(const std::vector<CorpusRecord>& records, std::size_t max_size) {
  std::vector<std::string> texts;
  texts.reserve(records.size() * 2);
  for (const CorpusRecord& r : records) {
    texts.push_back(r.context);
    texts.push_back(r.target);
  }
  return Vocabulary::build(texts, max_size);
}

std::vector<ExamplePair> tokenize_pairs(const std::vector<CorpusRecord>& records, const Vocabulary& vocab,
                                        int max_seq_len, std::size_t* dropped) {
  std::vector<ExamplePair> out;
  out.reserve(records.size());
  std::size_t skipped = 0;
  for (const CorpusRecord& r : records) {
    ExamplePair p{vocab.encode(r.context), vocab.encode(r.target)};
    const auto limit = static_cast<std::size_t>(max_seq_len);
    if (p.context.empty() || p.target.empty() || p.context.size() > limit || p.target.size() > limit) {
      ++skipped;
      continue;
    }
    out.push_back(std::move(p));
  }
  if (dropped) *dropped = skipped;
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

Adam::Adam(const Model<float>& model, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  model.visit([&](const Parameter<float>& p) {
    m_.emplace_back(p.size(), 0.0f);
    v_.emplace_back(p.size(), 0.0f);
  });
}

double Adam::step(Model<float>& model, const Tape<float>& tape, double clip_norm) {
  double sq = 0.0;
  model.visit([&](const Parameter<float>& p) {
    if (const auto* g = tape.grad(p))
      for (float x : *g) sq += static_cast<double>(x) * x;
  });
  const double norm = std::sqrt(sq);
  const double scale = (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const auto step_size = static_cast<float>(lr_ * std::sqrt(bc2) / bc1);
  const auto b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
  const auto eps = static_cast<float>(eps_ * std::sqrt(bc2));
  std::size_t idx = 0;
  model.visit([&](Parameter<float>& p) {
    std::vector<float>& m = m_[idx];
    std::vector<float>& v = v_[idx];
    ++idx;
    const auto* g = tape.grad(p);
    if (!g) return;
    const auto s = static_cast<float>(scale);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const float gi = (*g)[i] * s;
      m[i] = b1 * m[i] + (1.0f - b1) * gi;
      v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
      p.value[i] -= step_size * m[i] / (std::sqrt(v[i]) + eps);
    }
  });
  return norm;
}

nlohmann::json Adam::describe() const {
  return {{"name", "adam"}, {"learning_rate", lr_}, {"beta1", beta1_},  {"beta2", beta2_},
          {"eps", eps_},    {"schedule", "constant"}, {"steps", t_}};
}

// ---------------------------------------------------------------------------
// Corruption per task
// ---------------------------------------------------------------------------

namespace {

std::size_t other_index(std::size_t self, std::size_t n, Rng& rng) {
  if (n < 2) return self;
  std::size_t j = rng.below(n - 1);
  return j >= self ? j + 1 : j;
}

}  // namespace

TaskInputs corrupt_for_task(const Model<float>& model, const std::vector<ExamplePair>& corpus,
                            std::span<const std::size_t> batch, Task task, const TrainConfig& config,
                            std::uint64_t step) {
  const Rng task_root = Rng(config.seed).split(step).split(static_cast<std::uint64_t>(task));
  const std::size_t n = corpus.size();
  TaskInputs out;
  std::vector<Rng> rngs;
  std::vector<TokenSeq> bt_inputs, bt_contexts;
  for (std::size_t e = 0; e < batch.size(); ++e) {
    Rng rng = task_root.split(e);
    const std::size_t idx = batch[e];
    const TokenSeq& target = corpus[idx].target;
    if (task == Task::N || task == Task::NBT) {
      const NoiseSpec spec = sample_noise_probs(rng, config.noise_subtypes, config.noise_bounds);
      const TokenSeq& other = corpus[other_index(idx, n, rng)].target;
      TokenSeq noised = apply_noise(target, spec, other, rng);
      if (task == Task::N)
        out.inputs.push_back(std::move(noised));
      else
        bt_inputs.push_back(std::move(noised));
    } else {
      bt_inputs.push_back(target);
    }
    if (task != Task::N) bt_contexts.push_back(corpus[rng.below(n)].target);
    rngs.push_back(rng);
  }
  if (task != Task::N) {
    std::vector<TuningRanges> bt_ranges;
    if (config.bt_random_ranges) {
      for (Rng& rng : rngs) {
        const RateStats random_rates{rng.uniform(), rng.uniform()};
        bt_ranges.push_back(sample_tuning_ranges(random_rates, rng));
      }
    }
    out.inputs = back_translate(model, bt_inputs, bt_contexts, rngs, config.bt_temperature, bt_ranges);
  }
  for (std::size_t e = 0; e < batch.size(); ++e) {
    const RateStats rates = compute_rates(out.inputs[e], corpus[batch[e]].target);
    out.rates.push_back(rates);
    out.ranges.push_back(sample_tuning_ranges(rates, rngs[e]));
  }
  return out;
}

StepGraph build_step_graph(Tape<float>& tape, const Model<float>& model, const std::vector<ExamplePair>& corpus,
                           std::span<const std::size_t> batch, std::span<const Task> tasks, const TrainConfig& config,
                           std::uint64_t step) {
  std::vector<TokenSeq> contexts, targets;
  for (std::size_t idx : batch) {
    contexts.push_back(corpus[idx].context);
    targets.push_back(corpus[idx].target);
  }
  StepGraph g;
  const auto styles = style_vectors(tape, model, contexts);
  std::vector<Tape<float>::Var> parts;
  for (Task task : tasks) {
    const TaskInputs ti = corrupt_for_task(model, corpus, batch, task, config, step);
    const auto loss = reconstruction_loss(tape, model, ti.inputs, styles, ti.ranges, targets);
    g.task_loss[task] = loss;
    parts.push_back(loss);
  }
  g.total = tape.sum(parts);
  return g;
}

nlohmann::json StepMetrics::to_json() const {
  nlohmann::json losses = nlohmann::json::object();
  for (const auto& [task, loss] : task_loss) losses[task_name(task)] = loss;
  return {{"step", step},         {"loss", losses},    {"total_loss", total_loss}, {"grad_norm", grad_norm},
          {"examples", examples}, {"tokens", tokens}, {"elapsed_s", elapsed_s}};
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

namespace {
constexpr std::uint64_t kOrderKey = 0x6f72646572ULL;

// Tape buffers are allocated and freed every step; keeping them on the heap
// instead of fresh mmaps avoids repeated page faults.
void keep_step_buffers_mapped() {
#if defined(__GLIBC__)
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 256 << 20);
    return true;
  }();
  (void)once;
#endif
}
}

Trainer::Trainer(TrainConfig config, std::vector<ExamplePair> corpus, Model<float> init)
    : config_(std::move(config)),
      corpus_(std::move(corpus)),
      model_(std::move(init)),
      adam_(model_, config_.learning_rate, config_.adam_beta1, config_.adam_beta2, config_.adam_eps) {
  config_.validate();
  if (corpus_.empty()) throw TrainingError("training corpus is empty");
  keep_step_buffers_mapped();
}

std::vector<std::size_t> Trainer::next_batch() {
  std::vector<std::size_t> batch;
  int tokens = 0;
  while (tokens < config_.tokens_per_batch) {
    if (cursor_ >= order_.size()) {
      order_.resize(corpus_.size());
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      Rng rng = Rng(config_.seed).split(kOrderKey).split(epoch_++);
      for (std::size_t i = order_.size() - 1; i > 0; --i) std::swap(order_[i], order_[rng.below(i + 1)]);
      cursor_ = 0;
    }
    const std::size_t idx = order_[cursor_++];
    batch.push_back(idx);
    tokens += static_cast<int>(corpus_[idx].target.size()) + 1;
  }
  return batch;
}

StepMetrics Trainer::step() {
  const auto start = std::chrono::steady_clock::now();
  const std::vector<std::size_t> batch = next_batch();
  Tape<float> tape;
  const StepGraph g = build_step_graph(tape, model_, corpus_, batch, config_.tasks, config_,
                                       static_cast<std::uint64_t>(step_));
  StepMetrics m;
  m.step = step_;
  m.total_loss = tape.scalar(g.total);
  for (const auto& [task, v] : g.task_loss) m.task_loss[task] = tape.scalar(v);
  if (!std::isfinite(m.total_loss))
    throw TrainingError("loss diverged (non-finite) at step " + std::to_string(step_));
  tape.backward(g.total);
  m.grad_norm = adam_.step(model_, tape, config_.clip_grad_norm);
  if (!std::isfinite(m.grad_norm))
    throw TrainingError("gradient diverged (non-finite) at step " + std::to_string(step_));
  m.examples = static_cast<int>(batch.size());
  for (std::size_t idx : batch) m.tokens += static_cast<int>(corpus_[idx].target.size()) + 1;
  ++step_;
  elapsed_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  m.elapsed_s = elapsed_;
  return m;
}

nlohmann::json Trainer::metadata() const {
  return {{"optimizer", adam_.describe()},
          {"clip_grad_norm", config_.clip_grad_norm},
          {"train_config", config_.to_json()},
          {"steps_done", step_},
          {"train_pairs", corpus_.size()}};
}

Model<float> train(const TrainConfig& config, const std::vector<ExamplePair>& corpus,
                   const std::function<void(const StepMetrics&)>& on_metrics, nlohmann::json* metadata) {
  config.validate();
  Trainer trainer(config, corpus, Model<float>::initialized(config.model, config.seed));
  for (int s = 0; s < config.steps; ++s) {
    const StepMetrics m = trainer.step();
    if (on_metrics && (s % config.log_every == 0 || s + 1 == config.steps)) on_metrics(m);
  }
  if (metadata) *metadata = trainer.metadata();
  return trainer.model();
}

// ---------------------------------------------------------------------------
// Held-out evaluation
// ---------------------------------------------------------------------------

nlohmann::json HeldoutReport::to_json() const {
  return {{"loss", loss}, {"tokens", tokens}, {"pairs", pairs}, {"uniform_baseline", uniform_baseline}};
}

HeldoutReport evaluate_heldout(const Model<float>& model, const std::vector<ExamplePair>& heldout,
                               const TrainConfig& config, std::uint64_t noise_seed) {
  constexpr std::size_t kChunk = 64;
  HeldoutReport r;
  r.uniform_baseline = std::log(static_cast<double>(model.config().vocab_size));
  double total = 0.0;
  const Rng root(noise_seed);
  for (std::size_t begin = 0; begin < heldout.size(); begin += kChunk) {
    const std::size_t end = std::min(heldout.size(), begin + kChunk);
    std::vector<TokenSeq> contexts, inputs, targets;
    std::vector<TuningRanges> ranges;
    long tokens = 0;
    for (std::size_t i = begin; i < end; ++i) {
      Rng rng = root.split(i);
      const ExamplePair& p = heldout[i];
      const NoiseSpec spec = sample_noise_probs(rng, config.noise_subtypes, config.noise_bounds);
      const TokenSeq& other = heldout[heldout.size() < 2 ? i : (i + 1 + rng.below(heldout.size() - 1)) % heldout.size()].target;
      TokenSeq noised = apply_noise(p.target, spec, other, rng);
      ranges.push_back(sample_tuning_ranges(compute_rates(noised, p.target), rng));
      contexts.push_back(p.context);
      inputs.push_back(std::move(noised));
      targets.push_back(p.target);
      tokens += static_cast<long>(p.target.size()) + 1;
    }
    Tape<float> tape(false);
    const auto styles = style_vectors(tape, model, contexts);
    const auto loss = reconstruction_loss(tape, model, inputs, styles, ranges, targets);
    total += static_cast<double>(tape.scalar(loss)) * static_cast<double>(tokens);
    r.tokens += tokens;
    r.pairs += static_cast<long>(end - begin);
  }
  r.loss = r.tokens > 0 ? total / static_cast<double>(r.tokens) : 0.0;
  return r;
}

}  // namespace textsettr
