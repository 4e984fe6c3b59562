#include "mos/checkpoint.hpp"
#include "mos/config.hpp"
#include "mos/errors.hpp"
#include "mos/trainer.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <numbers>
#include <sstream>

namespace mos {
namespace {

namespace fs = std::filesystem;

TrainConfig tiny_config() {
  TrainConfig c;
  c.data.synthetic.n_object_classes = 4;
  c.data.synthetic.n_scene_classes = 2;
  c.data.synthetic.image_height = 16;
  c.data.synthetic.image_width = 16;
  c.data.synthetic.glyph_size = 8;
  c.data.synthetic.samples_per_class = 16;
  c.model.backbone.channels = {4, 8};
  c.model.backbone.norm_groups = 2;
  c.model.backbone.feature_dim = 8;
  c.batch_size = 16;
  c.epochs = 2;
  c.lr = 0.01;
  return c;
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- augmentation -------------------------------------------------------------------

TEST(Augment, SameSeedSameViewsAndShape) {
  std::mt19937_64 rng(1);
  const Image img = test::random_image(rng, 12, 10);
  std::mt19937_64 a(5), b(5);
  const auto va = augment(img, a);
  const auto vb = augment(img, b);
  EXPECT_EQ(va.first, vb.first);
  EXPECT_EQ(va.second, vb.second);
  EXPECT_EQ(va.first.height, 12);
  EXPECT_EQ(va.first.width, 10);
  const Image resized = apply_augment(img, sample_augment(a, 12, 10), 6, 5);
  EXPECT_EQ(resized.height, 6);
  EXPECT_EQ(resized.width, 5);
}

TEST(Augment, ConstantImageStaysUniform) {
  const Image flat(3, 9, 9, 0.35);
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Image out = apply_augment(flat, sample_augment(rng, 9, 9), 9, 9);
    for (int ch = 0; ch < 3; ++ch) {
      for (int y = 0; y < 9; ++y) {
        for (int x = 0; x < 9; ++x) EXPECT_NEAR(out.at(ch, y, x), out.at(ch, 0, 0), 1e-12);
      }
    }
  }
}

TEST(Augment, SharedParamsKeepPairsAligned) {
  std::mt19937_64 rng(3);
  const Image x = test::random_image(rng, 10, 10);
  const Image o = extract_object(x, SaliencyMask::filled(10, 10, 1, MaskSource::kOracle), mean_fill(x));
  for (int trial = 0; trial < 10; ++trial) {
    const AugmentParams p = sample_augment(rng, 10, 10);
    EXPECT_EQ(apply_augment(x, p, 10, 10), apply_augment(o, p, 10, 10));
  }
}

TEST(Augment, IdentityParamsReturnImage) {
  std::mt19937_64 rng(4);
  const Image x = test::random_image(rng, 7, 8);
  AugmentParams p;
  p.height = 7;
  p.width = 8;
  const Image out = apply_augment(x, p, 7, 8);
  for (std::size_t i = 0; i < x.pixels.size(); ++i) EXPECT_NEAR(out.pixels[i], x.pixels[i], 1e-12);
  p.flip = true;
  const Image flipped = apply_augment(x, p, 7, 8);
  EXPECT_NEAR(flipped.at(1, 2, 0), x.at(1, 2, 7), 1e-12);
}

TEST(Augment, CropStaysInsideImage) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const AugmentParams p = sample_augment(rng, 20, 30);
    EXPECT_GE(p.top, 0.0);
    EXPECT_GE(p.left, 0.0);
    EXPECT_LE(p.top + p.height, 20.0 + 1e-9);
    EXPECT_LE(p.left + p.width, 30.0 + 1e-9);
  }
}

// ---- schedules and optimizer --------------------------------------------------------------

TEST(Schedule, CosineBoundaries) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 0.1), 0.1);
  EXPECT_NEAR(cosine_lr(100, 100, 0.1), 0.0, 1e-18);
  EXPECT_NEAR(cosine_lr(50, 100, 0.1), 0.05, 1e-15);
  EXPECT_NEAR(cosine_lr(25, 100, 0.1), 0.05 * (1.0 + std::cos(std::numbers::pi / 4.0)), 1e-15);
}

TEST(Schedule, TeacherTemperatureWarmup) {
  const TauWarmup w;
  EXPECT_DOUBLE_EQ(tau_t_schedule(0, w), 0.04);
  EXPECT_NEAR(tau_t_schedule(10, w), 0.055, 1e-15);
  EXPECT_DOUBLE_EQ(tau_t_schedule(20, w), 0.07);
  EXPECT_DOUBLE_EQ(tau_t_schedule(45, w), 0.07);
  EXPECT_DOUBLE_EQ(tau_t_schedule(0, TauWarmup{0.04, 0.07, 0}), 0.07);
}

TEST(Sgd, MomentumAndWeightDecayUpdate) {
  Parameter p("w", Mat::Constant(1, 2, 1.0));
  p.grad = Mat::Constant(1, 2, 0.5);
  Sgd sgd(0.9, 0.1);
  sgd.step({&p}, 0.1);
  // buf = 0.5 + 0.1 * 1 = 0.6; w = 1 - 0.06
  EXPECT_NEAR(p.value(0, 0), 0.94, 1e-15);
  sgd.step({&p}, 0.1);
  // buf = 0.9 * 0.6 + 0.5 + 0.094 = 1.134
  EXPECT_NEAR(p.value(0, 1), 0.94 - 0.1134, 1e-15);
}

// ---- training ------------------------------------------------------------------------

TEST(Trainer, ResolvesClassCountAndInputSize) {
  TrainConfig c = tiny_config();
  c.model.num_classes = 99;
  TrainData d = prepare_data(c);
  EXPECT_EQ(d.num_classes, 4);
  Trainer t(c, std::move(d));
  EXPECT_EQ(t.config().model.num_classes, 4);
  EXPECT_EQ(t.config().model.backbone.input_height, 16);
  EXPECT_EQ(t.steps_per_epoch(), 4);
}

TEST(Trainer, ZeroBranchWeightsLeaveParametersUntouched) {
  TrainConfig c = tiny_config();
  c.hp.lambda_origin = 0.0;
  c.hp.lambda_object = 0.0;
  Trainer t(c, prepare_data(c));
  std::vector<Mat> before;
  for (Parameter* p : t.model().parameters()) before.push_back(p->value);
  const StepLosses l = t.train_step({0, 1, 2, 3}, 0.1, 0.07);
  EXPECT_TRUE(l.skipped);
  EXPECT_EQ(l.total, 0.0);
  const auto params = t.model().parameters();
  for (std::size_t i = 0; i < params.size(); ++i) EXPECT_EQ(params[i]->value, before[i]);
}

TEST(Trainer, BreakdownRecombinesToTotal) {
  TrainConfig c = tiny_config();
  c.hp.lambda_origin = 0.7;
  c.hp.lambda_object = 1.3;
  Trainer t(c, prepare_data(c));
  for (int s = 0; s < 3; ++s) {
    const StepLosses l = t.train_step({0, 5, 17, 33, 40, 63}, 0.01, 0.05);
    ASSERT_TRUE(l.origin && l.object);
    EXPECT_NEAR(branch_loss(*l.origin, c.hp.lambda), l.origin_total, 1e-9);
    EXPECT_NEAR(branch_loss(*l.object, c.hp.lambda), l.object_total, 1e-9);
    EXPECT_NEAR(total_loss(l.origin_total, l.object_total, 0.7, 1.3), l.total, 1e-6);
  }
}

TEST(Trainer, SingleBranchRunsComputeOnlyThatBranch) {
  TrainConfig c = tiny_config();
  apply_variant(c, "object_only");
  Trainer t(c, prepare_data(c));
  const StepLosses l = t.train_step({0, 1, 2, 3}, 0.01, 0.05);
  EXPECT_FALSE(l.origin.has_value());
  ASSERT_TRUE(l.object.has_value());
  EXPECT_TRUE(t.model().scene_module_parameters().empty());
}

TEST(Trainer, SameSeedSameLossTrajectory) {
  const TrainConfig c = tiny_config();
  Trainer a(c, prepare_data(c));
  Trainer b(c, prepare_data(c));
  for (int s = 0; s < 20; ++s) {
    const std::vector<int> batch = {s % 64, (s * 7 + 3) % 64, (s * 13 + 5) % 64, (s * 29 + 11) % 64};
    EXPECT_EQ(a.train_step(batch, 0.01, 0.05).total, b.train_step(batch, 0.01, 0.05).total) << "step " << s;
  }
}

TEST(Trainer, ObjectEqualsOriginalGivesEqualBranchLosses) {
  TrainConfig c = tiny_config();
  TrainData d = prepare_data(c);
  for (std::size_t i = 0; i < d.samples.size(); ++i) d.objects[i] = d.samples[i].image;
  Trainer t(c, std::move(d));
  for (int s = 0; s < 5; ++s) {
    const StepLosses l = t.train_step({s, s + 10, s + 20, s + 30}, 0.01, 0.05);
    EXPECT_NEAR(l.origin_total, l.object_total, 1e-9);
  }
}

TEST(Trainer, RunWritesArtifacts) {
  TrainConfig c = tiny_config();
  c.epochs = 1;
  c.output_dir = test::temp_dir("run_smoke").string();
  Trainer t(c, prepare_data(c));
  t.run();
  const fs::path dir = c.output_dir;
  for (const char* f : {"config.json", "metrics.csv", "deviation.csv", "eval_epoch_001.json", "last.ckpt", "final.ckpt",
                        "embeddings.csv", "run_manifest.json"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  EXPECT_EQ(read_lines(dir / "metrics.csv").size(), 2u);
  EXPECT_EQ(read_lines(dir / "deviation.csv").size(), 3u);
  EXPECT_EQ(read_lines(dir / "embeddings.csv").size(), 65u);
  EXPECT_EQ(config_from_echo(slurp(dir / "config.json")).epochs, 1);

  // An existing run is not overwritten.
  Trainer again(c, prepare_data(c));
  EXPECT_THROW(again.run(), ConfigError);
}

TEST(Trainer, MetricsRowsFollowEvalCadence) {
  TrainConfig c = tiny_config();
  c.epochs = 4;
  c.eval_every = 2;
  c.data.synthetic.samples_per_class = 8;
  c.batch_size = 8;
  c.output_dir = test::temp_dir("run_cadence").string();
  Trainer t(c, prepare_data(c));
  t.run();
  EXPECT_EQ(read_lines(fs::path(c.output_dir) / "metrics.csv").size(), 1u + 2u);
  EXPECT_TRUE(fs::exists(fs::path(c.output_dir) / "eval_epoch_004.json"));
  EXPECT_FALSE(fs::exists(fs::path(c.output_dir) / "eval_epoch_001.json"));
}

TEST(Trainer, ResumeContinuesCounters) {
  TrainConfig c = tiny_config();
  c.epochs = 1;
  c.output_dir = test::temp_dir("run_resume").string();
  {
    Trainer t(c, prepare_data(c));
    t.run();
  }
  const Checkpoint ck = read_checkpoint(fs::path(c.output_dir) / "last.ckpt");
  EXPECT_EQ(ck.epoch, 1);
  EXPECT_EQ(ck.step, 4);

  c.epochs = 3;
  Trainer resumed(c, prepare_data(c));
  resumed.resume_from(fs::path(c.output_dir) / "last.ckpt");
  EXPECT_EQ(resumed.epoch(), 1);
  EXPECT_EQ(resumed.step(), 4);
  resumed.run();
  EXPECT_EQ(resumed.epoch(), 3);
  EXPECT_EQ(resumed.step(), 12);
  EXPECT_EQ(read_lines(fs::path(c.output_dir) / "metrics.csv").size(), 4u);
  EXPECT_EQ(slurp(fs::path(c.output_dir) / "config.json"), config_echo(resumed.config()));

  TrainConfig other = c;
  other.model.backbone.feature_dim = 16;
  Trainer mismatch(other, prepare_data(other));
  EXPECT_THROW(mismatch.resume_from(fs::path(c.output_dir) / "last.ckpt"), ConfigError);
}

TEST(Trainer, CheckpointRestoresExactState) {
  TrainConfig c = tiny_config();
  c.output_dir = test::temp_dir("run_restore").string();
  Trainer full(c, prepare_data(c));
  full.run();
  Trainer again(c, prepare_data(c));
  again.resume_from(fs::path(c.output_dir) / "last.ckpt");
  EXPECT_EQ(again.epoch(), full.epoch());
  EXPECT_EQ(again.step(), full.step());
  const auto a = again.model().parameters();
  const auto b = full.model().parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->value, b[i]->value) << a[i]->name;
  EXPECT_EQ(again.rng()(), full.rng()());
  // Identical state gives an identical next step.
  const std::vector<int> batch = {1, 2, 3, 4};
  EXPECT_EQ(again.train_step(batch, 0.01, 0.07).total, full.train_step(batch, 0.01, 0.07).total);
}

}  // namespace
}  // namespace mos
