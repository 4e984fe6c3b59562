// mos: dataset generation, training, evaluation, deviation analysis and
// embedding export. Exit status: 0 ok, 1 config/user error, 2 numerical
// abort, 3 I/O error.

#include "mos/checkpoint.hpp"
#include "mos/config.hpp"
#include "mos/core_data.hpp"
#include "mos/errors.hpp"
#include "mos/eval.hpp"
#include "mos/trainer.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using namespace mos;

namespace {

constexpr int kOk = 0;
constexpr int kUserError = 1;
constexpr int kNumerical = 2;
constexpr int kIo = 3;

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<double> lambda1;
  std::optional<double> lambda2;
  std::optional<std::string> mask_source;
  std::optional<int> eval_every;
  std::optional<std::string> variant;
  std::optional<std::string> out;
  std::optional<std::string> manifest;
  std::optional<std::string> annotations;
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--seed", o.seed, "Random seed");
  cmd->add_option("--epochs", o.epochs, "Number of training epochs");
  cmd->add_option("--lambda1", o.lambda1, "Weight of the original-image branch");
  cmd->add_option("--lambda2", o.lambda2, "Weight of the object-image branch");
  cmd->add_option("--mask-source", o.mask_source, "oracle, file or heuristic")
      ->check(CLI::IsMember({"oracle", "file", "heuristic"}));
  cmd->add_option("--eval-every", o.eval_every, "Evaluate every N epochs");
  cmd->add_option("--variant", o.variant, "mos, object_only, origin_only or custom");
  cmd->add_option("--out", o.out, "Run directory");
  cmd->add_option("--manifest", o.manifest, "Dataset manifest (default: in-memory synthetic data)");
  cmd->add_option("--annotations", o.annotations, "Scene annotation file");
}

// flags > file > defaults; a --variant flag is applied before the others.
void apply_overrides(TrainConfig& c, const Overrides& o) {
  if (o.variant) apply_variant(c, *o.variant);
  if (o.seed) c.seed = *o.seed;
  if (o.epochs) c.epochs = *o.epochs;
  if (o.lambda1) c.hp.lambda_origin = *o.lambda1;
  if (o.lambda2) c.hp.lambda_object = *o.lambda2;
  if (o.mask_source) c.mask_source = mask_source_from_string(*o.mask_source);
  if (o.eval_every) c.eval_every = *o.eval_every;
  if (o.out) c.output_dir = *o.out;
  if (o.manifest) c.data.manifest = *o.manifest;
  if (o.annotations) c.data.scene_annotations = *o.annotations;
  if (o.lambda1 || o.lambda2) {
    if (c.hp.lambda_origin == 0.0 && c.hp.lambda_object > 0.0) c.eval_branch = Branch::kObject;
    if (c.hp.lambda_object == 0.0 && c.hp.lambda_origin > 0.0) c.eval_branch = Branch::kOrigin;
  }
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir, std::optional<std::uint64_t> seed) {
  SyntheticConfig cfg = config_path.empty() ? SyntheticConfig{} : synthetic_config_from_file(config_path);
  if (seed) cfg.seed = *seed;
  const SyntheticDataset ds = gen_synthetic(cfg);

  const fs::path out = out_dir;
  std::error_code ec;
  fs::create_directories(out / "images", ec);
  if (ec) throw IoError("cannot create " + (out / "images").string() + ": " + ec.message());

  std::vector<ManifestRow> rows;
  int labeled = 0;
  for (const Sample& s : ds.samples) {
    const fs::path image = fs::path("images") / (s.id + ".png");
    save_image(out / image, s.image);
    ManifestRow r;
    r.id = s.id;
    r.image = image.generic_string();
    r.label = s.object_label;
    if (s.scene_label) r.scene = ds.scene_names.at(static_cast<std::size_t>(*s.scene_label));
    r.labeled = s.is_labeled;
    if (s.oracle_mask) {
      const fs::path mask = mask_path_for(image);
      save_mask(out / mask, *s.oracle_mask);
      r.mask = mask.generic_string();
    }
    labeled += s.is_labeled ? 1 : 0;
    rows.push_back(std::move(r));
  }
  write_manifest(out / "manifest.csv", rows);
  write_scene_annotations(out / "scenes.txt", ds.samples, ds.scene_names);
  {
    std::ofstream f(out / "dataset_config.json", std::ios::binary);
    if (!f) throw IoError("cannot write dataset_config.json");
    f << to_json(cfg).dump(2) << '\n';
  }
  std::printf("wrote %zu samples (%d labeled, %zu unlabeled), %zu base / %zu classes, %d scenes -> %s\n",
              ds.samples.size(), labeled, ds.samples.size() - static_cast<std::size_t>(labeled),
              ds.split.base_classes.size(), ds.split.all_classes.size(), cfg.n_scene_classes, out.string().c_str());
  return kOk;
}

int cmd_train(const std::string& config_path, const Overrides& o, const std::string& resume) {
  TrainConfig cfg = config_path.empty() ? TrainConfig{} : train_config_from_file(config_path);
  apply_overrides(cfg, o);
  cfg.validate();
  Trainer trainer(cfg, prepare_data(cfg));
  if (!resume.empty()) {
    trainer.resume_from(resume);
    std::printf("resuming at epoch %d (step %ld)\n", trainer.epoch(), trainer.step());
  }
  trainer.run();
  const auto rows = read_deviation_log(fs::path(trainer.config().output_dir) / "deviation.csv");
  std::printf("run %s finished: %d epochs, %ld steps\n", run_id(config_echo(trainer.config())).c_str(),
              trainer.epoch(), trainer.step());
  const EvalResult r = trainer.evaluate();
  std::printf("%s", format_eval_report(r.report).c_str());
  std::printf("%s\n", format_deviation_summary(summarize_deviation(rows)).c_str());
  return kOk;
}

// Rebuilds the trained model from a checkpoint for a (possibly new) dataset.
Trainer restore(const std::string& checkpoint, const std::string& manifest, const std::string& annotations,
                const std::optional<std::string>& mask_source) {
  const Checkpoint ckpt = read_checkpoint(checkpoint);
  TrainConfig cfg = config_from_echo(ckpt.config_echo);
  if (!manifest.empty()) cfg.data.manifest = manifest;
  cfg.data.scene_annotations = annotations;
  if (mask_source) cfg.mask_source = mask_source_from_string(*mask_source);
  TrainData data = prepare_data(cfg);
  if (data.num_classes != cfg.model.num_classes) {
    throw ConfigError("checkpoint was trained for " + std::to_string(cfg.model.num_classes) +
                      " classes but the dataset has " + std::to_string(data.num_classes));
  }
  Trainer t(cfg, std::move(data));
  try {
    load_parameters(ckpt, t.model().parameters());
  } catch (const DataError& e) {
    throw ConfigError(std::string("checkpoint does not match the configuration: ") + e.what());
  }
  return t;
}

int cmd_eval(const std::string& checkpoint, const std::string& manifest, const std::string& annotations,
             const std::optional<std::string>& mask_source, std::string out) {
  Trainer t = restore(checkpoint, manifest, annotations, mask_source);
  const EvalResult r = t.evaluate();
  std::printf("%s", format_eval_report(r.report).c_str());
  if (r.report.quadrant_acc.empty()) std::printf("(no scene annotations: quadrant table omitted)\n");
  if (out.empty()) out = (fs::path(checkpoint).parent_path() / ("eval_" + fs::path(checkpoint).stem().string() + ".json")).string();
  write_eval_report(out, r.report);
  std::printf("report written to %s\n", out.c_str());
  return kOk;
}

int cmd_analyze(const std::string& run_dir) {
  const fs::path dir = run_dir;
  const auto rows = read_deviation_log(dir / "deviation.csv");
  write_deviation_log(dir / "deviation_curve.csv", rows);
  const DeviationSummary s = summarize_deviation(rows);
  const std::string line = format_deviation_summary(s);
  std::ofstream f(dir / "deviation_summary.txt", std::ios::binary);
  if (!f) throw IoError("cannot write deviation_summary.txt");
  f << line << '\n';
  std::printf("%s\n", line.c_str());
  return kOk;
}

int cmd_export(const std::string& checkpoint, const std::string& manifest, const std::optional<std::string>& mask_source,
               const std::string& out) {
  Trainer t = restore(checkpoint, manifest, "", mask_source);
  const TrainData& d = t.data();
  const int h = t.config().model.backbone.input_height;
  const int w = t.config().model.backbone.input_width;
  const Eigen::Index cols = 3 * h * w;
  const auto n = static_cast<Eigen::Index>(d.samples.size());
  Mat x(n, cols), o(n, cols);
  std::vector<std::string> ids;
  std::vector<int> labels;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    x.row(i) = Eigen::Map<const RowVec>(d.samples[k].image.pixels.data(), cols);
    o.row(i) = Eigen::Map<const RowVec>(d.objects[k].pixels.data(), cols);
    ids.push_back(d.samples[k].id);
    labels.push_back(d.samples[k].object_label);
  }
  const Prediction p = predict(t.model(), x, o, Branch::kObject);
  write_embeddings_csv(out, ids, labels, p.z);
  std::printf("wrote %lld embeddings of dimension %lld to %s\n", static_cast<long long>(n),
              static_cast<long long>(p.z.cols()), out.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Object-scene association training for generalized category discovery"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint, manifest, annotations, run_dir, resume, out_file;
  std::optional<std::uint64_t> gen_seed;
  std::optional<std::string> mask_source;
  Overrides overrides;

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic object-on-scene benchmark to disk");
  gen->add_option("--config", config_path, "Synthetic dataset config (JSON)");
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--seed", gen_seed, "Override the generator seed");

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", config_path, "Training config (JSON)");
  train->add_option("--resume", resume, "Continue from a checkpoint");
  add_overrides(train, overrides);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the unlabeled part of a dataset");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--manifest", manifest, "Dataset manifest (default: the training data)");
  eval->add_option("--annotations", annotations, "Scene annotation file");
  eval->add_option("--mask-source", mask_source, "oracle, file or heuristic")
      ->check(CLI::IsMember({"oracle", "file", "heuristic"}));
  eval->add_option("--out", out_file, "Report path (JSON)");

  auto* analyze = app.add_subcommand("analyze", "Summarize the feature deviation log of a run");
  analyze->add_option("--run", run_dir, "Run directory")->required();

  auto* exp = app.add_subcommand("export-embeddings", "Write object-branch projections as CSV");
  exp->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  exp->add_option("--manifest", manifest, "Dataset manifest (default: the training data)");
  exp->add_option("--mask-source", mask_source, "oracle, file or heuristic")
      ->check(CLI::IsMember({"oracle", "file", "heuristic"}));
  exp->add_option("--out", out_file, "Output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUserError;
  }

  try {
    if (*gen) return cmd_gen_data(config_path, out_dir, gen_seed);
    if (*train) return cmd_train(config_path, overrides, resume);
    if (*eval) return cmd_eval(checkpoint, manifest, annotations, mask_source, out_file);
    if (*analyze) return cmd_analyze(run_dir);
    if (*exp) return cmd_export(checkpoint, manifest, mask_source, out_file);
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return kNumerical;
  } catch (const IoError& e) {
    std::fprintf(stderr, "I/O error: %s\n", e.what());
    return kIo;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kUserError;
  } catch (const UnannotatedError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUserError;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kUserError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUserError;
  }
  return kOk;
}
