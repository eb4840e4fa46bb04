#include <doctest.h>

#include <cmath>

#include "test_support.hpp"
#include "textsettr/training.hpp"

using namespace textsettr;
using textsettr::testing::config_path;
using textsettr::testing::tiny_config;

namespace {

std::vector<ExamplePair> toy_corpus(int n, std::uint64_t seed) {
  Rng rng(seed);
  auto sentence = [&] {
    TokenSeq s;
    for (std::size_t k = 0, len = 3 + rng.below(6); k < len; ++k) s.push_back(static_cast<TokenId>(3 + rng.below(17)));
    return s;
  };
  std::vector<ExamplePair> out;
  for (int i = 0; i < n; ++i) out.push_back({sentence(), sentence()});
  return out;
}

TrainConfig toy_config(std::vector<Task> tasks = {Task::N, Task::NBT}) {
  TrainConfig c;
  c.model = tiny_config();
  c.tasks = std::move(tasks);
  c.tokens_per_batch = 96;
  c.steps = 3;
  c.seed = 4;
  return c;
}

std::vector<double> loss_curve(const TrainConfig& cfg, const std::vector<ExamplePair>& corpus) {
  Trainer t(cfg, corpus, Model<float>::initialized(cfg.model, cfg.seed));
  std::vector<double> out;
  for (int s = 0; s < cfg.steps; ++s) out.push_back(t.step().total_loss);
  return out;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("identical config and seed give bit-identical loss curves") {
    const auto corpus = toy_corpus(60, 1);
    const TrainConfig cfg = toy_config();
    const auto a = loss_curve(cfg, corpus);
    const auto b = loss_curve(cfg, corpus);
    CHECK(a == b);
    TrainConfig other = cfg;
    other.seed = 5;
    CHECK(loss_curve(other, corpus) != a);
  }

  TEST_CASE("total loss is the equally weighted sum of task losses") {
    const TrainConfig cfg = toy_config({Task::N, Task::BT, Task::NBT});
    Trainer t(cfg, toy_corpus(40, 2), Model<float>::initialized(cfg.model, 1));
    const StepMetrics m = t.step();
    REQUIRE(m.task_loss.size() == 3);
    double sum = 0.0;
    for (const auto& [task, loss] : m.task_loss) sum += loss;
    CHECK(m.total_loss == doctest::Approx(sum).epsilon(1e-6));
    CHECK(m.tokens <= cfg.tokens_per_batch + 2 * cfg.model.max_seq_len);
  }

  TEST_CASE("zero steps returns the initialization") {
    TrainConfig cfg = toy_config();
    cfg.steps = 0;
    const auto m = train(cfg, toy_corpus(10, 3));
    CHECK(model_digest(m) == model_digest(Model<float>::initialized(cfg.model, cfg.seed)));
  }

  TEST_CASE("ablation task sets run") {
    const auto corpus = toy_corpus(30, 4);
    for (auto tasks : {std::vector<Task>{Task::N, Task::BT}, std::vector<Task>{Task::NBT}, std::vector<Task>{Task::BT}}) {
      TrainConfig cfg = toy_config(tasks);
      cfg.steps = 2;
      CHECK_NOTHROW(train(cfg, corpus));
    }
  }

  TEST_CASE("ranges fed to the model contain the rates of corrupted input vs target") {
    const auto corpus = toy_corpus(50, 5);
    const TrainConfig cfg = toy_config({Task::N, Task::NBT});
    const auto model = Model<float>::initialized(cfg.model, 2);
    std::vector<std::size_t> batch(corpus.size());
    for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = i;
    for (Task task : {Task::N, Task::NBT}) {
      const TaskInputs in = corrupt_for_task(model, corpus, batch, task, cfg, 7);
      REQUIRE(in.inputs.size() == batch.size());
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const RateStats r = compute_rates(in.inputs[i], corpus[batch[i]].target);
        CHECK(r.add_rate == in.rates[i].add_rate);
        CHECK(r.delete_rate == in.rates[i].delete_rate);
        CHECK(in.ranges[i].add_low <= r.add_rate);
        CHECK(r.add_rate <= in.ranges[i].add_high);
        CHECK(in.ranges[i].del_low <= r.delete_rate);
        CHECK(r.delete_rate <= in.ranges[i].del_high);
      }
      // A task's corruption depends only on (seed, step, task, example).
      const std::vector<std::size_t> tail(batch.begin() + 10, batch.end());
      const TaskInputs part = corrupt_for_task(model, corpus, tail, task, cfg, 7);
      if (task == Task::N) CHECK(part.inputs[0] != in.inputs[10]);
    }
  }

  TEST_CASE("untrained held-out loss is near ln V and training lowers it") {
    const auto corpus = toy_corpus(2000, 6);
    const auto heldout = toy_corpus(60, 7);
    TrainConfig cfg = toy_config({Task::N});
    cfg.steps = 300;
    cfg.learning_rate = 3e-3;
    const auto init = Model<float>::initialized(cfg.model, cfg.seed);
    const HeldoutReport before = evaluate_heldout(init, heldout, cfg, 9);
    CHECK(before.loss == doctest::Approx(std::log(20.0)).epsilon(0.10));
    CHECK(evaluate_heldout(init, heldout, cfg, 9).loss == before.loss);
    const auto trained = train(cfg, corpus);
    const HeldoutReport after = evaluate_heldout(trained, heldout, cfg, 9);
    CHECK(after.loss < before.loss - 0.3);
  }

  TEST_CASE("config json") {
    const TrainConfig desk = load_train_config(config_path("train_desk.json"));
    CHECK(desk.tasks == std::vector<Task>{Task::N, Task::NBT});
    CHECK(desk.steps == 2000);
    CHECK(TrainConfig::from_json(desk.to_json()).to_json() == desk.to_json());
    CHECK_THROWS_AS(TrainConfig::from_json({{"stpes", 3}}), TrainingError);
    CHECK_THROWS_AS(TrainConfig::from_json({{"tasks", nlohmann::json::array()}}), TrainingError);
    CHECK_THROWS_AS(TrainConfig::from_json({{"tasks", {"N", "N"}}}), TrainingError);
    CHECK_THROWS_AS(TrainConfig::from_json({{"tasks", {"X"}}}), TrainingError);
    CHECK_THROWS_AS(TrainConfig::from_json({{"noise_bounds", {0.7, 0.2}}}), TrainingError);
    CHECK(parse_task("NBT") == Task::NBT);
    CHECK(task_name(Task::BT) == "BT");
  }

  TEST_CASE("tokenize_pairs drops empty and overlength pairs") {
    std::vector<CorpusRecord> recs{{"a b", "b c", {}}, {"a b c d e", "a", {}}, {"zz", "a", {}}};
    const Vocabulary v = build_vocabulary(recs, 100);
    std::size_t dropped = 0;
    const auto pairs = tokenize_pairs(recs, v, 4, &dropped);
    CHECK(pairs.size() == 2);
    CHECK(dropped == 1);
  }
}
