#pragma once

// Dual-branch training: paired augmentation of original and object images,
// cosine learning rate, teacher temperature warm-up, SGD with momentum,
// periodic evaluation, deviation logging, checkpoints and resume.

#include "mos/core_data.hpp"
#include "mos/decouple.hpp"
#include "mos/eval.hpp"
#include "mos/losses.hpp"
#include "mos/model.hpp"

#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace mos {

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentConfig {
  double scale_min = 0.3;
  double scale_max = 1.0;
  double ratio_min = 3.0 / 4.0;
  double ratio_max = 4.0 / 3.0;
  double flip_prob = 0.5;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
};

/// One draw of the stochastic pipeline; applying the same draw to X and O
/// keeps the pair pixel-aligned.
struct AugmentParams {
  double top = 0.0;  // crop window in source pixels
  double left = 0.0;
  double height = 0.0;
  double width = 0.0;
  bool flip = false;
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
};

AugmentParams sample_augment(std::mt19937_64& rng, int height, int width, const AugmentConfig& config = {});

/// Crop, bilinear resize to (out_height, out_width), optional flip, then
/// brightness, contrast and saturation jitter; clipped to [0,1].
Image apply_augment(const Image& image, const AugmentParams& params, int out_height, int out_width);

/// Two independent views at the input resolution.
std::pair<Image, Image> augment(const Image& image, std::mt19937_64& rng, const AugmentConfig& config = {});

// ---------------------------------------------------------------------------
// Schedules and optimizer
// ---------------------------------------------------------------------------

/// lr0 * 0.5 * (1 + cos(pi * step / total_steps)).
double cosine_lr(long step, long total_steps, double lr0);

/// Linear ramp start -> end over `warmup.epochs`, then constant.
double tau_t_schedule(int epoch, const TauWarmup& warmup);

class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  /// buf = m * buf + (grad + wd * w); w -= lr * buf.
  void step(const std::vector<Parameter*>& params, double lr);

  std::vector<Mat>& buffers() { return buffers_; }
  [[nodiscard]] const std::vector<Mat>& buffers() const { return buffers_; }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Mat> buffers_;  // aligned with the parameter list
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct DataConfig {
  std::string manifest;           // empty: generate the synthetic benchmark in memory
  std::string scene_annotations;  // optional `<id>,<scene>` file
  SyntheticConfig synthetic;
};

struct TrainConfig {
  std::string variant = "mos";  // mos | object_only | origin_only | custom
  Hyperparams hp;
  ModelConfig model;
  DataConfig data;
  AugmentConfig augment;
  int epochs = 30;
  int batch_size = 32;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  MaskSource mask_source = MaskSource::kOracle;
  FillMode fill = FillMode::kPerChannel;
  HeuristicMaskConfig heuristic;
  int eval_every = 1;
  Branch eval_branch = Branch::kObject;
  std::string output_dir = "run";

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Presets: mos (both branches, scene module, shorter projector),
/// object_only (object branch alone, baseline header) and origin_only
/// (original images alone, evaluated on the original branch).
void apply_variant(TrainConfig& config, const std::string& variant);

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

struct TrainData {
  std::vector<Sample> samples;    // D_l followed by D_u
  std::vector<Image> objects;     // aligned with samples
  GcdSplit split;                 // holds the images once more; used for bookkeeping
  std::vector<int> eval_indices;  // rows of `samples` forming D_u
  int num_classes = 0;
};

/// Loads or generates the dataset, attaches scene annotations, derives
/// masks from the configured source and precomputes every object image.
TrainData prepare_data(const TrainConfig& config);

/// Object images for `samples` under the given mask source.
std::vector<Image> object_images(const std::vector<Sample>& samples, MaskSource source, FillMode fill,
                                 const HeuristicMaskConfig& heuristic,
                                 const std::vector<std::filesystem::path>& image_paths = {});

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct StepLosses {
  std::optional<BranchParts> origin;
  std::optional<BranchParts> object;
  double origin_total = 0.0;
  double object_total = 0.0;
  double total = 0.0;
  bool skipped = false;  // both branch weights were zero
};

struct EvalResult {
  EvalReport report;
  DeviationStats deviation;
  Prediction prediction;
};

class Trainer {
 public:
  Trainer(TrainConfig config, TrainData data);

  /// One optimizer update on the given sample rows at learning rate `lr`.
  StepLosses train_step(const std::vector<int>& batch, double lr, double tau_t);

  /// Accuracy on D_u and deviation statistics on the same images.
  EvalResult evaluate();

  /// Runs the remaining epochs writing every artifact under output_dir.
  void run();

  /// Restores model, optimizer, counters and RNG from a checkpoint.
  void resume_from(const std::filesystem::path& checkpoint);

  MosModel& model() { return model_; }
  [[nodiscard]] const TrainConfig& config() const { return config_; }
  [[nodiscard]] const TrainData& data() const { return data_; }
  [[nodiscard]] int epoch() const { return epoch_; }
  [[nodiscard]] long step() const { return step_; }
  [[nodiscard]] long steps_per_epoch() const;
  std::mt19937_64& rng() { return rng_; }

  void save_checkpoint(const std::filesystem::path& path) const;

 private:
  TrainConfig config_;
  TrainData data_;
  MosModel model_;
  Sgd sgd_;
  std::mt19937_64 rng_;
  int epoch_ = 0;  // completed epochs
  long step_ = 0;
  bool resumed_ = false;
};

/// Fields of one metrics CSV row, in column order.
std::vector<std::string> metrics_header();

}  // namespace mos
