#include "mos/trainer.hpp"

#include "mos/checkpoint.hpp"
#include "mos/config.hpp"
#include "mos/errors.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

namespace mos {

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

AugmentParams sample_augment(std::mt19937_64& rng, int height, int width, const AugmentConfig& config) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  AugmentParams p;
  p.height = height;
  p.width = width;
  const double area = static_cast<double>(height) * width;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * uniform(config.scale_min, config.scale_max);
    const double ratio = std::exp(uniform(std::log(config.ratio_min), std::log(config.ratio_max)));
    const double cw = std::sqrt(target * ratio);
    const double ch = std::sqrt(target / ratio);
    if (cw <= width && ch <= height) {
      p.height = ch;
      p.width = cw;
      p.top = uniform(0.0, height - ch);
      p.left = uniform(0.0, width - cw);
      break;
    }
  }
  p.flip = unit(rng) < config.flip_prob;
  p.brightness = uniform(1.0 - config.brightness, 1.0 + config.brightness);
  p.contrast = uniform(1.0 - config.contrast, 1.0 + config.contrast);
  p.saturation = uniform(1.0 - config.saturation, 1.0 + config.saturation);
  return p;
}

Image apply_augment(const Image& image, const AugmentParams& params, int out_height, int out_width) {
  const int h = image.height;
  const int w = image.width;
  Image out(image.channels, out_height, out_width);
  const double sy = params.height / out_height;
  const double sx = params.width / out_width;
  for (int y = 0; y < out_height; ++y) {
    const double fy = std::clamp(params.top + (y + 0.5) * sy - 0.5, 0.0, h - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, h - 1);
    const double ay = fy - y0;
    for (int x = 0; x < out_width; ++x) {
      const int xs = params.flip ? out_width - 1 - x : x;
      const double fx = std::clamp(params.left + (xs + 0.5) * sx - 0.5, 0.0, w - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, w - 1);
      const double ax = fx - x0;
      for (int c = 0; c < image.channels; ++c) {
        const double top = (1.0 - ax) * image.at(c, y0, x0) + ax * image.at(c, y0, x1);
        const double bottom = (1.0 - ax) * image.at(c, y1, x0) + ax * image.at(c, y1, x1);
        out.at(c, y, x) = (1.0 - ay) * top + ay * bottom;
      }
    }
  }

  auto clip = [](double v) { return std::clamp(v, 0.0, 1.0); };
  for (double& v : out.pixels) v = clip(v * params.brightness);
  if (out.channels != 3) {
    return out;
  }
  const std::size_t plane = static_cast<std::size_t>(out_height) * out_width;
  double* r = out.pixels.data();
  double* g = r + plane;
  double* b = g + plane;
  auto luma = [&](std::size_t i) { return 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]; };
  double mean = 0.0;
  for (std::size_t i = 0; i < plane; ++i) mean += luma(i);
  mean /= static_cast<double>(plane);
  for (double& v : out.pixels) v = clip((v - mean) * params.contrast + mean);
  for (std::size_t i = 0; i < plane; ++i) {
    const double grey = luma(i);
    r[i] = clip((r[i] - grey) * params.saturation + grey);
    g[i] = clip((g[i] - grey) * params.saturation + grey);
    b[i] = clip((b[i] - grey) * params.saturation + grey);
  }
  return out;
}

std::pair<Image, Image> augment(const Image& image, std::mt19937_64& rng, const AugmentConfig& config) {
  const AugmentParams a = sample_augment(rng, image.height, image.width, config);
  const AugmentParams b = sample_augment(rng, image.height, image.width, config);
  return {apply_augment(image, a, image.height, image.width), apply_augment(image, b, image.height, image.width)};
}

// ---------------------------------------------------------------------------
// Schedules and optimizer
// ---------------------------------------------------------------------------

double cosine_lr(long step, long total_steps, double lr0) {
  if (total_steps <= 0) return lr0;
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

double tau_t_schedule(int epoch, const TauWarmup& warmup) {
  if (warmup.epochs <= 0 || epoch >= warmup.epochs) return warmup.end;
  const double t = static_cast<double>(std::max(epoch, 0)) / warmup.epochs;
  return warmup.start + (warmup.end - warmup.start) * t;
}

void Sgd::step(const std::vector<Parameter*>& params, double lr) {
  if (buffers_.size() != params.size()) {
    buffers_.clear();
    for (const Parameter* p : params) buffers_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    buffers_[i] = momentum_ * buffers_[i] + p.grad + weight_decay_ * p.value;
    p.value -= lr * buffers_[i];
  }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  hp.validate();
  model.validate();
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0,1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (!(augment.scale_min > 0.0 && augment.scale_min <= augment.scale_max && augment.scale_max <= 1.0)) {
    throw ConfigError("augment.scale_min/scale_max must satisfy 0 < min <= max <= 1");
  }
  if (!(augment.ratio_min > 0.0 && augment.ratio_min <= augment.ratio_max)) {
    throw ConfigError("augment.ratio_min/ratio_max must satisfy 0 < min <= max");
  }
  if (eval_branch == Branch::kOrigin && hp.lambda_origin == 0.0) {
    throw ConfigError("eval_branch: the origin branch is not trained when lambda_origin is 0");
  }
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

void apply_variant(TrainConfig& config, const std::string& variant) {
  if (variant == "mos") {
    config.hp.lambda_origin = 1.0;
    config.hp.lambda_object = 1.0;
    config.model.scene_module = true;
    config.model.projector_depth = 2;
    config.eval_branch = Branch::kObject;
  } else if (variant == "object_only") {
    config.hp.lambda_origin = 0.0;
    config.hp.lambda_object = 1.0;
    config.model.scene_module = false;
    config.model.projector_depth = 3;
    config.eval_branch = Branch::kObject;
  } else if (variant == "origin_only") {
    config.hp.lambda_origin = 1.0;
    config.hp.lambda_object = 0.0;
    config.model.scene_module = false;
    config.model.projector_depth = 3;
    config.eval_branch = Branch::kOrigin;
  } else if (variant != "custom") {
    throw ConfigError("variant must be one of mos, object_only, origin_only, custom (got '" + variant + "')");
  }
  config.variant = variant;
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

std::vector<Image> object_images(const std::vector<Sample>& samples, MaskSource source, FillMode fill,
                                 const HeuristicMaskConfig& heuristic,
                                 const std::vector<std::filesystem::path>& image_paths) {
  if (source == MaskSource::kFile && image_paths.size() != samples.size()) {
    throw ConfigError("mask_source file needs image paths (use a manifest dataset)");
  }
  std::vector<Image> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    SaliencyMask mask;
    switch (source) {
      case MaskSource::kOracle:
        if (!s.oracle_mask) throw DataError("sample " + s.id + " has no oracle mask");
        mask = *s.oracle_mask;
        break;
      case MaskSource::kFile:
        mask = load_mask(mask_path_for(image_paths[i]), s.image.height, s.image.width);
        break;
      case MaskSource::kHeuristic:
        mask = heuristic_mask(s.image, heuristic);
        break;
    }
    out.push_back(extract_object(s.image, mask, mean_fill(s.image, fill)));
  }
  return out;
}

TrainData prepare_data(const TrainConfig& config) {
  TrainData data;
  std::vector<std::filesystem::path> paths;
  if (config.data.manifest.empty()) {
    SyntheticDataset ds = gen_synthetic(config.data.synthetic);
    data.split = std::move(ds.split);
  } else {
    LoadedDataset ld = load_dataset(config.data.manifest);
    std::map<std::string, std::filesystem::path> path_of;
    for (std::size_t i = 0; i < ld.samples.size(); ++i) path_of[ld.samples[i].id] = ld.image_paths[i];
    data.split = split_from_flags(ld.samples);
    data.split.scene_names = ld.scene_names;
    if (!config.data.scene_annotations.empty()) {
      attach_scene_annotations(data.split, load_scene_annotations(config.data.scene_annotations));
    }
    bool any_scene = false;
    for (const Sample& s : data.split.labeled) any_scene = any_scene || s.scene_label.has_value();
    if (any_scene) data.split.base_scenes = derive_base_scenes(data.split, config.data.synthetic.novel_scene_min_count);
    for (const auto* part : {&data.split.labeled, &data.split.unlabeled}) {
      for (const Sample& s : *part) paths.push_back(path_of.at(s.id));
    }
  }
  if (data.split.labeled.empty() || data.split.unlabeled.empty()) {
    throw DataError("training needs both labeled and unlabeled samples");
  }
  for (const auto* part : {&data.split.labeled, &data.split.unlabeled}) {
    for (const Sample& s : *part) data.samples.push_back(s);
  }
  for (std::size_t i = data.split.labeled.size(); i < data.samples.size(); ++i) {
    data.eval_indices.push_back(static_cast<int>(i));
  }
  data.num_classes = data.split.num_classes();
  data.objects = object_images(data.samples, config.mask_source, config.fill, config.heuristic, paths);
  return data;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

namespace {

TrainConfig resolve(TrainConfig config, const TrainData& data) {
  if (data.samples.empty()) throw DataError("empty dataset");
  config.model.num_classes = data.num_classes;
  config.model.backbone.input_height = data.samples.front().image.height;
  config.model.backbone.input_width = data.samples.front().image.width;
  config.validate();
  for (const Sample& s : data.samples) {
    if (s.image.height != config.model.backbone.input_height || s.image.width != config.model.backbone.input_width ||
        s.image.channels != 3) {
      throw DataError("sample " + s.id + " differs in size from the first image");
    }
  }
  if (data.objects.size() != data.samples.size()) throw DataError("object images are not aligned with samples");
  return config;
}

constexpr std::uint64_t kTrainStream = 0x5851F42D4C957F2DULL;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string breakdown(const StepLosses& s) {
  std::ostringstream os;
  auto part = [&os](const char* name, const std::optional<BranchParts>& p) {
    if (!p) return;
    os << ' ' << name << "{un_nce=" << p->un_nce << " un_cls=" << p->un_cls << " sup_nce=" << p->sup_nce
       << " sup_cls=" << p->sup_cls << '}';
  };
  part("origin", s.origin);
  part("object", s.object);
  os << " total=" << s.total;
  return os.str();
}

bool finite_parts(const std::optional<BranchParts>& p) {
  return !p || (std::isfinite(p->un_nce) && std::isfinite(p->un_cls) && std::isfinite(p->sup_nce) &&
                std::isfinite(p->sup_cls));
}

std::string timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Keeps the header and rows whose first field (epoch) is <= max_epoch.
void truncate_csv(const std::filesystem::path& path, int max_epoch) {
  std::ifstream in(path);
  if (!in) return;
  std::vector<std::string> keep;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      keep.push_back(line);
      header = false;
      continue;
    }
    if (line.empty()) continue;
    const int epoch = std::stoi(line.substr(0, line.find(',')));
    if (epoch <= max_epoch) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  for (const std::string& l : keep) out << l << '\n';
}

void append_line(const std::filesystem::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw IoError("cannot append to " + path.string());
  out << line << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::string join(const std::vector<std::string>& fields) {
  std::string s;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) s += ',';
    s += fields[i];
  }
  return s;
}

struct EpochMeans {
  std::map<std::string, double> sum;
  std::map<std::string, int> count;

  void add(const std::string& key, double v) {
    sum[key] += v;
    ++count[key];
  }
  [[nodiscard]] std::string get(const std::string& key) const {
    auto it = count.find(key);
    if (it == count.end() || it->second == 0) return "";
    return fmt(sum.at(key) / it->second);
  }
};

}  // namespace

std::vector<std::string> metrics_header() {
  std::vector<std::string> h = {"epoch", "step", "lr", "tau_t"};
  for (const char* branch : {"origin", "object"}) {
    for (const char* term : {"un_nce", "un_cls", "sup_nce", "sup_cls", "total"}) {
      h.push_back(std::string(branch) + "_" + term);
    }
  }
  for (const char* c : {"total", "acc_all", "acc_base", "acc_novel", "acc_bobs", "acc_nobs", "acc_bons", "acc_nons",
                        "mean_dev", "l1_dev"}) {
    h.emplace_back(c);
  }
  return h;
}

Trainer::Trainer(TrainConfig config, TrainData data)
    : config_(resolve(std::move(config), data)),
      data_(std::move(data)),
      model_(config_.model, config_.seed),
      sgd_(config_.momentum, config_.weight_decay),
      rng_(config_.seed ^ kTrainStream) {}

long Trainer::steps_per_epoch() const {
  const long n = static_cast<long>(data_.samples.size());
  const long b = config_.batch_size;
  return n / b + ((n % b) >= 2 ? 1 : 0);
}

StepLosses Trainer::train_step(const std::vector<int>& batch, double lr, double tau_t) {
  StepLosses out;
  const double w_origin = config_.hp.lambda_origin;
  const double w_object = config_.hp.lambda_object;
  if (w_origin == 0.0 && w_object == 0.0) {
    out.skipped = true;
    return out;
  }
  const auto b = static_cast<Eigen::Index>(batch.size());
  if (b < 2) throw std::invalid_argument("train_step: batch needs at least two images");
  const int h = config_.model.backbone.input_height;
  const int w = config_.model.backbone.input_width;
  const Eigen::Index cols = 3 * h * w;

  Mat x(2 * b, cols);
  Mat o(2 * b, cols);
  std::vector<int> labels(batch.size());
  std::vector<char> labeled(batch.size());
  for (Eigen::Index i = 0; i < b; ++i) {
    const int idx = batch[static_cast<std::size_t>(i)];
    const Sample& s = data_.samples.at(static_cast<std::size_t>(idx));
    labels[static_cast<std::size_t>(i)] = s.object_label;
    labeled[static_cast<std::size_t>(i)] = s.is_labeled ? 1 : 0;
    for (int view = 0; view < 2; ++view) {
      const AugmentParams p = sample_augment(rng_, h, w, config_.augment);
      const Image xi = apply_augment(s.image, p, h, w);
      const Image oi = apply_augment(data_.objects[static_cast<std::size_t>(idx)], p, h, w);
      x.row(view * b + i) = Eigen::Map<const RowVec>(xi.pixels.data(), cols);
      o.row(view * b + i) = Eigen::Map<const RowVec>(oi.pixels.data(), cols);
    }
  }

  ad::Tape tape;
  ForwardOptions opts;
  opts.origin = w_origin > 0.0;
  opts.object = w_object > 0.0;
  DualForward f = model_.forward_dual(tape, x, o, opts);

  std::vector<std::pair<double, ad::Var>> total_terms;
  if (opts.origin) {
    const ad::BranchTerms t = ad::branch_terms(f.origin.head.z, f.origin.head.cosine, labels, labeled, config_.hp, tau_t);
    const ad::Var l = ad::branch_loss(t, config_.hp.lambda);
    out.origin = t.values();
    out.origin_total = l.scalar();
    total_terms.emplace_back(w_origin, l);
  }
  if (opts.object) {
    const ad::BranchTerms t = ad::branch_terms(f.object.head.z, f.object.head.cosine, labels, labeled, config_.hp, tau_t);
    const ad::Var l = ad::branch_loss(t, config_.hp.lambda);
    out.object = t.values();
    out.object_total = l.scalar();
    total_terms.emplace_back(w_object, l);
  }
  const ad::Var total = ad::weighted_sum(total_terms);
  out.total = total.scalar();
  if (!std::isfinite(out.total) || !finite_parts(out.origin) || !finite_parts(out.object)) {
    throw NumericalError("non-finite loss at step " + std::to_string(step_) + ":" + breakdown(out));
  }

  model_.zero_grad();
  tape.backward(total);
  sgd_.step(model_.parameters(), lr);
  ++step_;
  return out;
}

EvalResult Trainer::evaluate() {
  const int h = config_.model.backbone.input_height;
  const int w = config_.model.backbone.input_width;
  const Eigen::Index cols = 3 * h * w;
  const auto n = static_cast<Eigen::Index>(data_.eval_indices.size());
  Mat x(n, cols);
  Mat o(n, cols);
  std::vector<int> truth(static_cast<std::size_t>(n));
  std::vector<std::optional<Quadrant>> quads(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto idx = static_cast<std::size_t>(data_.eval_indices[static_cast<std::size_t>(i)]);
    const Sample& s = data_.samples[idx];
    x.row(i) = Eigen::Map<const RowVec>(s.image.pixels.data(), cols);
    o.row(i) = Eigen::Map<const RowVec>(data_.objects[idx].pixels.data(), cols);
    truth[static_cast<std::size_t>(i)] = s.object_label;
    if (s.scene_label && data_.split.base_scenes) quads[static_cast<std::size_t>(i)] = quadrant_of(s, data_.split);
  }

  EvalResult r;
  r.prediction = predict(model_, x, o, config_.eval_branch);
  r.report = cluster_acc(truth, r.prediction.labels, data_.split.base_classes, data_.num_classes);
  r.report.epoch = epoch_;
  if (std::any_of(quads.begin(), quads.end(), [](const auto& q) { return q.has_value(); })) {
    r.report.quadrant_acc = quadrant_report(truth, r.prediction.labels, quads, r.report.matching);
  }
  r.deviation = feature_deviation(r.prediction.v_x, r.prediction.v_o);
  r.deviation.step = step_;
  r.deviation.epoch = epoch_;
  return r;
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  Checkpoint ckpt;
  ckpt.config_echo = config_echo(config_);
  ckpt.epoch = epoch_;
  ckpt.step = step_;
  std::ostringstream rng;
  rng << rng_;
  ckpt.rng_state = rng.str();
  auto& model = const_cast<MosModel&>(model_);
  for (const Parameter* p : model.parameters()) ckpt.parameters.push_back({p->name, p->value});
  if (sgd_.buffers().size() == ckpt.parameters.size()) ckpt.momentum = sgd_.buffers();
  write_checkpoint(path, ckpt);
}

void Trainer::resume_from(const std::filesystem::path& checkpoint) {
  const Checkpoint ckpt = read_checkpoint(checkpoint);
  const TrainConfig stored = config_from_echo(ckpt.config_echo);
  if (to_json(stored)["model"] != to_json(config_)["model"]) {
    throw ConfigError("checkpoint model configuration does not match the current configuration");
  }
  const std::vector<Parameter*> params = model_.parameters();
  load_parameters(ckpt, params);
  // Momentum buffers follow the stored table order; remap by name.
  sgd_.buffers().clear();
  if (!ckpt.momentum.empty()) {
    std::map<std::string, const Mat*> by_name;
    for (std::size_t i = 0; i < ckpt.parameters.size(); ++i) by_name[ckpt.parameters[i].name] = &ckpt.momentum[i];
    for (const Parameter* p : params) sgd_.buffers().push_back(*by_name.at(p->name));
  }
  std::istringstream rng(ckpt.rng_state);
  rng >> rng_;
  if (!rng) throw FormatError("checkpoint RNG state is unreadable");
  epoch_ = ckpt.epoch;
  step_ = ckpt.step;
  resumed_ = true;
}

void Trainer::run() {
  namespace fs = std::filesystem;
  const fs::path dir = config_.output_dir;
  const fs::path metrics = dir / "metrics.csv";
  const fs::path deviation = dir / "deviation.csv";
  const fs::path last = dir / "last.ckpt";
  const fs::path manifest = dir / "run_manifest.json";
  const std::string started = timestamp();

  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  if (!resumed_ && (fs::exists(metrics) || fs::exists(last) || fs::exists(manifest))) {
    throw ConfigError("output directory " + dir.string() + " already holds a run; pass --resume to continue it");
  }

  const std::string echo = config_echo(config_);
  {
    std::ofstream out(dir / "config.json", std::ios::binary);
    if (!out) throw IoError("cannot write config echo");
    out << echo;
  }

  if (resumed_) {
    truncate_csv(metrics, epoch_);
    truncate_csv(deviation, epoch_);
  } else {
    std::ofstream(metrics, std::ios::binary | std::ios::trunc) << join(metrics_header()) << '\n';
    std::ofstream(deviation, std::ios::binary | std::ios::trunc) << "epoch,step,mean_dev,l1_dev\n";
    const DeviationStats d0 = evaluate().deviation;
    append_line(deviation, join({std::to_string(d0.epoch), std::to_string(d0.step), fmt(d0.mean_dev), fmt(d0.l1_dev)}));
  }

  const long per_epoch = steps_per_epoch();
  const long total_steps = per_epoch * config_.epochs;
  const auto n = static_cast<int>(data_.samples.size());
  std::vector<std::string> eval_files;
  for (int e = 1; e <= epoch_; ++e) {
    if (e % config_.eval_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "eval_epoch_%03d.json", e);
      if (fs::exists(dir / name)) eval_files.push_back(name);
    }
  }

  while (epoch_ < config_.epochs) {
    const double tau_t = tau_t_schedule(epoch_, config_.hp.warmup);
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::shuffle(order.begin(), order.end(), rng_);

    EpochMeans means;
    double lr = config_.lr;
    for (long s = 0; s < per_epoch; ++s) {
      const auto begin = static_cast<std::size_t>(s * config_.batch_size);
      const auto end = std::min(order.size(), begin + static_cast<std::size_t>(config_.batch_size));
      const std::vector<int> batch(order.begin() + static_cast<long>(begin), order.begin() + static_cast<long>(end));
      lr = cosine_lr(step_, total_steps, config_.lr);
      const StepLosses l = train_step(batch, lr, tau_t);
      if (l.skipped) ++step_;
      for (const auto& [name, parts, total] :
           {std::tuple{"origin", l.origin, l.origin_total}, std::tuple{"object", l.object, l.object_total}}) {
        if (!parts) continue;
        const std::string p = name;
        means.add(p + "_un_nce", parts->un_nce);
        means.add(p + "_un_cls", parts->un_cls);
        means.add(p + "_sup_nce", parts->sup_nce);
        means.add(p + "_sup_cls", parts->sup_cls);
        means.add(p + "_total", total);
      }
      means.add("total", l.total);
    }
    ++epoch_;

    const EvalResult r = evaluate();
    append_line(deviation, join({std::to_string(epoch_), std::to_string(step_), fmt(r.deviation.mean_dev),
                                 fmt(r.deviation.l1_dev)}));
    if (epoch_ % config_.eval_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "eval_epoch_%03d.json", epoch_);
      write_eval_report(dir / name, r.report);
      eval_files.push_back(name);

      std::vector<std::string> row = {std::to_string(epoch_), std::to_string(step_), fmt(lr), fmt(tau_t)};
      for (const char* branch : {"origin", "object"}) {
        for (const char* term : {"un_nce", "un_cls", "sup_nce", "sup_cls", "total"}) {
          row.push_back(means.get(std::string(branch) + "_" + term));
        }
      }
      row.push_back(means.get("total"));
      row.push_back(fmt(r.report.acc_all));
      row.push_back(r.report.n_base > 0 ? fmt(r.report.acc_base) : "");
      row.push_back(r.report.n_novel > 0 ? fmt(r.report.acc_novel) : "");
      for (Quadrant q : kAllQuadrants) {
        auto it = r.report.quadrant_acc.find(q);
        row.push_back(it == r.report.quadrant_acc.end() ? "" : fmt(it->second.acc));
      }
      row.push_back(fmt(r.deviation.mean_dev));
      row.push_back(fmt(r.deviation.l1_dev));
      append_line(metrics, join(row));
    }
    save_checkpoint(last);
  }

  const fs::path final_ckpt = dir / "final.ckpt";
  save_checkpoint(final_ckpt);

  // Object-branch projections of every sample.
  {
    const int h = config_.model.backbone.input_height;
    const int w = config_.model.backbone.input_width;
    const Eigen::Index cols = 3 * h * w;
    Mat x(static_cast<Eigen::Index>(n), cols);
    Mat o(static_cast<Eigen::Index>(n), cols);
    std::vector<std::string> ids;
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) {
      const Sample& s = data_.samples[static_cast<std::size_t>(i)];
      x.row(i) = Eigen::Map<const RowVec>(s.image.pixels.data(), cols);
      o.row(i) = Eigen::Map<const RowVec>(data_.objects[static_cast<std::size_t>(i)].pixels.data(), cols);
      ids.push_back(s.id);
      labels.push_back(s.object_label);
    }
    const Prediction p = predict(model_, x, o, Branch::kObject);
    write_embeddings_csv(dir / "embeddings.csv", ids, labels, p.z);
  }

  Json m;
  m["run_id"] = run_id(echo);
  m["config"] = Json::parse(echo);
  m["artifacts"] = {{"config", "config.json"},
                    {"metrics_csv", "metrics.csv"},
                    {"deviation_csv", "deviation.csv"},
                    {"checkpoints", {"last.ckpt", "final.ckpt"}},
                    {"eval_reports", eval_files},
                    {"embeddings", {"embeddings.csv"}}};
  m["epochs_completed"] = epoch_;
  m["steps"] = step_;
  m["started_at"] = started;
  m["finished_at"] = timestamp();
  std::ofstream out(manifest, std::ios::binary);
  if (!out) throw IoError("cannot write " + manifest.string());
  out << m.dump(2) << '\n';
}

}  // namespace mos
