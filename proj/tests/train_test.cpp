#include "lcap/train.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace lcap;

namespace {

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.d_model = 16;
  cfg.heads = 2;
  cfg.d_ff = 32;
  cfg.vocab_size = 12;
  cfg.max_len = 12;
  return cfg;
}

TrainOptions short_run(std::int64_t steps) {
  TrainOptions opts;
  opts.task = Task::kCopy;
  opts.steps = steps;
  opts.seed = 3;
  opts.batch_size = 8;
  opts.eval_every = 50;
  opts.min_len = 3;
  opts.max_len = 6;
  opts.eval_batches = 2;
  opts.eval_batch_size = 16;
  return opts;
}

}  // namespace

TEST(Train, SameSeedGivesBitIdenticalLossCurves) {
  Seq2SeqModel a(small_model(), 7);
  Seq2SeqModel b(small_model(), 7);
  auto ra = train_model(a, short_run(25));
  auto rb = train_model(b, short_run(25));
  ASSERT_EQ(ra.history.size(), rb.history.size());
  for (std::size_t i = 0; i < ra.history.size(); ++i) {
    EXPECT_EQ(ra.history[i].loss, rb.history[i].loss) << "step " << ra.history[i].step;
  }
  EXPECT_EQ(ra.final_loss, rb.final_loss);
  EXPECT_EQ(ra.final_accuracy, rb.final_accuracy);
}

TEST(Train, ZeroStepsReportsInitialMetricsOnly) {
  Seq2SeqModel model(small_model(), 9);
  auto res = train_model(model, short_run(0));
  ASSERT_EQ(res.history.size(), 1u);
  EXPECT_EQ(res.history[0].step, 0);
  ASSERT_TRUE(res.history[0].token_accuracy.has_value());
  EXPECT_EQ(res.final_loss, res.history[0].loss);
}

TEST(Train, LossDecreasesOnCopyTask) {
  Seq2SeqModel model(small_model(), 11);
  auto res = train_model(model, short_run(300));
  EXPECT_LT(res.final_loss, res.history[0].loss * 0.5);
  EXPECT_GT(res.final_accuracy, *res.history[0].token_accuracy);
}

TEST(Train, DivergenceRaisesTrainingErrorWithStep) {
  Seq2SeqModel model(small_model(), 13);
  TrainOptions opts = short_run(10);
  opts.optimizer.lr_scale = 1e200;  // first update overflows the squares in layer norm
  try {
    train_model(model, opts);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_GT(e.step(), 0);
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(Train, WarmupScheduleRisesThenDecays) {
  ParameterStore store;
  store.add("x", Tensor::zeros({1}));
  OptimizerConfig cfg;
  cfg.warmup_steps = 100;
  AdamOptimizer opt(store, cfg, 64);
  EXPECT_LT(opt.learning_rate(1), opt.learning_rate(50));
  EXPECT_LT(opt.learning_rate(50), opt.learning_rate(100));
  EXPECT_GT(opt.learning_rate(100), opt.learning_rate(400));
  EXPECT_NEAR(opt.learning_rate(100), 1.0 / std::sqrt(64.0) / std::sqrt(100.0), 1e-12);
}

TEST(Train, AdamStepMovesAgainstGradient) {
  ParameterStore store;
  Tensor w = store.add("w", Tensor::from_data({2}, {1.0, -1.0}));
  OptimizerConfig cfg;
  cfg.warmup_steps = 1;
  AdamOptimizer opt(store, cfg, 1);
  w.grad()[0] = 2.5;  // positive gradient -> parameter must decrease
  w.grad()[1] = -0.5;
  opt.step();
  EXPECT_LT(w.data()[0], 1.0);
  EXPECT_GT(w.data()[1], -1.0);
}

TEST(Train, MetricsCsvFormat) {
  const std::string path =
      (std::filesystem::temp_directory_path() / "lcap_metrics_test.csv").string();
  std::vector<MetricsRow> history;
  MetricsRow r0{0, 2.5, 0.125, 1.0};
  MetricsRow r1{1, 2.25, std::nullopt, 2.0};
  history.push_back(r0);
  history.push_back(r1);
  write_metrics_csv(history, path);

  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "step,loss,token_accuracy,wall_ms");
  std::getline(is, line);
  EXPECT_EQ(line.rfind("0,2.5,0.125000,", 0), 0u) << line;
  std::getline(is, line);
  EXPECT_EQ(line.rfind("1,2.25,,", 0), 0u) << line;
  std::remove(path.c_str());
}
