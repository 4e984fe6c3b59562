#include "mos/model.hpp"

#include "mos/errors.hpp"
#include "mos/image.hpp"

#include <cmath>

namespace mos {

const char* to_string(EncoderKind k) { return k == EncoderKind::kConv ? "conv" : "transformer"; }

EncoderKind encoder_kind_from_string(const std::string& s) {
  if (s == "conv") return EncoderKind::kConv;
  if (s == "transformer") return EncoderKind::kTransformer;
  throw ConfigError("encoder kind must be conv or transformer (got '" + s + "')");
}

void BackboneConfig::validate() const {
  if (feature_dim <= 0) throw ConfigError("backbone.feature_dim must be > 0");
  if (input_height <= 0 || input_width <= 0) throw ConfigError("backbone input size must be positive");
  if (kind == EncoderKind::kTransformer) {
    if (patch_size <= 0 || input_height % patch_size != 0 || input_width % patch_size != 0) {
      throw ConfigError("backbone input size must be divisible by patch_size");
    }
    if (depth < 1) throw ConfigError("backbone.depth must be >= 1");
    if (heads < 1 || feature_dim % heads != 0) throw ConfigError("backbone.heads must divide feature_dim");
  } else {
    if (channels.empty()) throw ConfigError("backbone.channels must not be empty");
    if (norm_groups < 0) throw ConfigError("backbone.norm_groups must be >= 0");
    for (int c : channels) {
      if (c <= 0) throw ConfigError("backbone.channels entries must be positive");
      if (norm_groups > 0 && c % norm_groups != 0) throw ConfigError("backbone.norm_groups must divide every channel count");
    }
  }
}

void ModelConfig::validate() const {
  backbone.validate();
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (projector_depth < 1) throw ConfigError("projector_depth must be >= 1");
  if (scene_hidden < 0 || projector_hidden < 0 || projection_dim < 0) throw ConfigError("layer widths must be >= 0");
  if (!(logit_temperature > 0.0)) throw ConfigError("logit_temperature must be > 0");
}

namespace {

Mat uniform_matrix(int rows, int cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

Mat normal_matrix(int rows, int cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

double he_bound(int fan_in) { return std::sqrt(6.0 / fan_in); }
double plain_bound(int fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

// ---------------------------------------------------------------------------

class ConvEncoder final : public Backbone {
 public:
  ConvEncoder(const BackboneConfig& config, const std::string& prefix, std::mt19937_64& rng) : config_(config) {
    int in_c = 3;
    int h = config.input_height;
    int w = config.input_width;
    for (std::size_t i = 0; i < config.channels.size(); ++i) {
      ad::ConvGeometry g;
      g.in_channels = in_c;
      g.height = h;
      g.width = w;
      g.out_channels = config.channels[i];
      g.kernel = 3;
      g.stride = 2;
      g.padding = 1;
      const int fan_in = in_c * 9;
      const std::string name = prefix + ".conv" + std::to_string(i);
      weights_.emplace_back(name + ".weight", uniform_matrix(g.out_channels, fan_in, he_bound(fan_in), rng));
      biases_.emplace_back(name + ".bias", Mat::Zero(1, g.out_channels));
      if (config.norm_groups > 0) {
        gammas_.emplace_back(name + ".norm.gamma", Mat::Ones(1, g.out_channels));
        betas_.emplace_back(name + ".norm.beta", Mat::Zero(1, g.out_channels));
      }
      geoms_.push_back(g);
      in_c = g.out_channels;
      h = g.out_height();
      w = g.out_width();
    }
    out_ = Linear(prefix + ".out", in_c, config.feature_dim, plain_bound(in_c), rng);
  }

  ad::Var forward(ad::Tape& tape, const Mat& images) override {
    if (images.cols() != 3 * config_.input_height * config_.input_width) {
      throw DataError("backbone input does not match the configured image size");
    }
    ad::Var x = tape.constant(images);
    for (std::size_t i = 0; i < geoms_.size(); ++i) {
      x = ad::conv2d(x, tape.parameter(weights_[i]), tape.parameter(biases_[i]), geoms_[i]);
      if (!gammas_.empty()) {
        x = ad::group_norm(x, tape.parameter(gammas_[i]), tape.parameter(betas_[i]), geoms_[i].out_channels,
                           config_.norm_groups);
      }
      x = ad::relu(x);
    }
    x = ad::channel_mean(x, geoms_.back().out_channels);
    return out_.forward(tape, x);
  }

  void collect(std::vector<Parameter*>& out) override {
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      out.push_back(&weights_[i]);
      out.push_back(&biases_[i]);
      if (!gammas_.empty()) {
        out.push_back(&gammas_[i]);
        out.push_back(&betas_[i]);
      }
    }
    out.push_back(&out_.weight);
    out.push_back(&out_.bias);
  }

  [[nodiscard]] std::unique_ptr<Backbone> clone() const override { return std::make_unique<ConvEncoder>(*this); }

 private:
  BackboneConfig config_;
  std::vector<Parameter> weights_;
  std::vector<Parameter> biases_;
  std::vector<Parameter> gammas_;
  std::vector<Parameter> betas_;
  std::vector<ad::ConvGeometry> geoms_;
  Linear out_;
};

// ---------------------------------------------------------------------------

struct TransformerBlock {
  Parameter ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  Linear qkv, proj, fc1, fc2;
};

class PatchTransformer final : public Backbone {
 public:
  PatchTransformer(const BackboneConfig& config, const std::string& prefix, std::mt19937_64& rng) : config_(config) {
    const int d = config.feature_dim;
    const int p = config.patch_size;
    tokens_ = (config.input_height / p) * (config.input_width / p);
    const int patch_dim = 3 * p * p;
    embed_ = Linear(prefix + ".embed", patch_dim, d, plain_bound(patch_dim), rng);
    pos_ = Parameter(prefix + ".pos", normal_matrix(tokens_, d, 0.02, rng));
    for (int i = 0; i < config.depth; ++i) {
      const std::string n = prefix + ".block" + std::to_string(i);
      TransformerBlock b;
      b.ln1_gamma = Parameter(n + ".ln1.gamma", Mat::Ones(1, d));
      b.ln1_beta = Parameter(n + ".ln1.beta", Mat::Zero(1, d));
      b.ln2_gamma = Parameter(n + ".ln2.gamma", Mat::Ones(1, d));
      b.ln2_beta = Parameter(n + ".ln2.beta", Mat::Zero(1, d));
      b.qkv = Linear(n + ".qkv", d, 3 * d, plain_bound(d), rng);
      b.proj = Linear(n + ".proj", d, d, plain_bound(d), rng);
      b.fc1 = Linear(n + ".fc1", d, 2 * d, plain_bound(d), rng);
      b.fc2 = Linear(n + ".fc2", 2 * d, d, plain_bound(2 * d), rng);
      blocks_.push_back(std::move(b));
    }
    norm_gamma_ = Parameter(prefix + ".norm.gamma", Mat::Ones(1, d));
    norm_beta_ = Parameter(prefix + ".norm.beta", Mat::Zero(1, d));
  }

  ad::Var forward(ad::Tape& tape, const Mat& images) override {
    const int h = config_.input_height;
    const int w = config_.input_width;
    const int p = config_.patch_size;
    if (images.cols() != 3 * h * w) throw DataError("backbone input does not match the configured image size");
    const int gw = w / p;
    Mat patches(images.rows() * tokens_, 3 * p * p);
    for (Eigen::Index b = 0; b < images.rows(); ++b) {
      const double* src = images.row(b).data();
      for (int t = 0; t < tokens_; ++t) {
        const int py = (t / gw) * p;
        const int px = (t % gw) * p;
        double* dst = patches.row(b * tokens_ + t).data();
        int k = 0;
        for (int c = 0; c < 3; ++c) {
          for (int i = 0; i < p; ++i) {
            for (int j = 0; j < p; ++j) dst[k++] = src[(c * h + py + i) * w + px + j];
          }
        }
      }
    }
    ad::Var x = ad::add_tiled(embed_.forward(tape, tape.constant(std::move(patches))), tape.parameter(pos_));
    for (TransformerBlock& b : blocks_) {
      ad::Var y = ad::layer_norm(x, tape.parameter(b.ln1_gamma), tape.parameter(b.ln1_beta));
      y = b.proj.forward(tape, ad::self_attention(b.qkv.forward(tape, y), tokens_, config_.heads));
      x = ad::add(x, y);
      y = ad::layer_norm(x, tape.parameter(b.ln2_gamma), tape.parameter(b.ln2_beta));
      y = b.fc2.forward(tape, ad::gelu(b.fc1.forward(tape, y)));
      x = ad::add(x, y);
    }
    x = ad::layer_norm(x, tape.parameter(norm_gamma_), tape.parameter(norm_beta_));
    return ad::token_mean(x, tokens_);
  }

  void collect(std::vector<Parameter*>& out) override {
    out.push_back(&embed_.weight);
    out.push_back(&embed_.bias);
    out.push_back(&pos_);
    for (TransformerBlock& b : blocks_) {
      for (Parameter* p : {&b.ln1_gamma, &b.ln1_beta, &b.qkv.weight, &b.qkv.bias, &b.proj.weight, &b.proj.bias,
                           &b.ln2_gamma, &b.ln2_beta, &b.fc1.weight, &b.fc1.bias, &b.fc2.weight, &b.fc2.bias}) {
        out.push_back(p);
      }
    }
    out.push_back(&norm_gamma_);
    out.push_back(&norm_beta_);
  }

  [[nodiscard]] std::unique_ptr<Backbone> clone() const override { return std::make_unique<PatchTransformer>(*this); }

 private:
  BackboneConfig config_;
  int tokens_ = 0;
  Linear embed_;
  Parameter pos_;
  std::vector<TransformerBlock> blocks_;
  Parameter norm_gamma_, norm_beta_;
};

}  // namespace

Linear::Linear(const std::string& name, int in, int out, double bound, std::mt19937_64& rng)
    : weight(name + ".weight", uniform_matrix(in, out, bound, rng)), bias(name + ".bias", Mat::Zero(1, out)) {}

ad::Var Linear::forward(ad::Tape& tape, ad::Var x) {
  return ad::add_row(ad::matmul(x, tape.parameter(weight)), tape.parameter(bias));
}

Mlp::Mlp(const std::string& name, const std::vector<int>& dims, std::mt19937_64& rng) {
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const bool last = i + 2 == dims.size();
    const double bound = last ? plain_bound(dims[i]) : he_bound(dims[i]);
    layers.emplace_back(name + ".fc" + std::to_string(i), dims[i], dims[i + 1], bound, rng);
  }
}

ad::Var Mlp::forward(ad::Tape& tape, ad::Var x) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    x = layers[i].forward(tape, x);
    if (i + 1 < layers.size()) x = ad::relu(x);
  }
  return x;
}

void Mlp::collect(std::vector<Parameter*>& out) {
  for (Linear& l : layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
}

std::unique_ptr<Backbone> make_backbone(const BackboneConfig& config, const std::string& prefix, std::mt19937_64& rng) {
  config.validate();
  if (config.kind == EncoderKind::kConv) return std::make_unique<ConvEncoder>(config, prefix, rng);
  return std::make_unique<PatchTransformer>(config, prefix, rng);
}

// ---------------------------------------------------------------------------

SceneAwarenessModule::SceneAwarenessModule(int feature_dim, int hidden, double eps, std::mt19937_64& rng)
    : mlp_("scene", {2 * feature_dim, hidden, feature_dim}, rng), eps_(eps) {}

ad::Var SceneAwarenessModule::joint_input(ad::Tape& /*tape*/, ad::Var v_i, ad::Var v_s) const {
  if (v_i.rows() != v_s.rows() || v_i.cols() != v_s.cols()) {
    throw DataError("interaction inputs must share batch size and dimension");
  }
  ad::Var cat = ad::concat_cols(v_i, v_s);
  const Eigen::VectorXd norms = cat.value().rowwise().norm();
  for (Eigen::Index r = 0; r < norms.size(); ++r) {
    if (!(norms(r) >= eps_)) throw NumericalError("interaction: concatenated feature has (near-)zero norm");
  }
  return ad::normalize_rows(cat, eps_);
}

ad::Var SceneAwarenessModule::forward(ad::Tape& tape, ad::Var v_i, ad::Var v_s) {
  return mlp_.forward(tape, joint_input(tape, v_i, v_s));
}

Header::Header(int feature_dim, int hidden, int projection_dim, int depth, int num_classes, double temperature,
               std::mt19937_64& rng)
    : temperature_(temperature) {
  std::vector<int> dims = {feature_dim};
  for (int i = 0; i + 1 < depth; ++i) dims.push_back(hidden);
  dims.push_back(projection_dim);
  projector_ = Mlp("head.proj", dims, rng);
  prototypes_ = Parameter("head.prototypes", normal_matrix(num_classes, feature_dim, 1.0, rng));
}

HeadVars Header::forward(ad::Tape& tape, ad::Var h) {
  HeadVars out;
  out.z = ad::normalize_rows(projector_.forward(tape, h));
  ad::Var feat = ad::normalize_rows(h);
  ad::Var protos = ad::normalize_rows(tape.parameter(prototypes_));
  out.cosine = ad::matmul_nt(feat, protos);
  out.logits = ad::scale(out.cosine, 1.0 / temperature_);
  return out;
}

void Header::collect(std::vector<Parameter*>& out) {
  projector_.collect(out);
  out.push_back(&prototypes_);
}

// ---------------------------------------------------------------------------

MosModel::MosModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const int d = config_.feature_dim();
  backbone_ = make_backbone(config_.backbone, "backbone", rng);
  if (!config_.shared_backbone) object_backbone_ = make_backbone(config_.backbone, "object_backbone", rng);
  if (config_.scene_module) {
    scene_ = SceneAwarenessModule(d, config_.scene_hidden > 0 ? config_.scene_hidden : 2 * d, config_.interaction_eps, rng);
  }
  header_ = Header(d, config_.projector_hidden > 0 ? config_.projector_hidden : 2 * d,
                   config_.projection_dim > 0 ? config_.projection_dim : d, config_.projector_depth, config_.num_classes,
                   config_.logit_temperature, rng);
}

MosModel::MosModel(const MosModel& other)
    : config_(other.config_),
      backbone_(other.backbone_->clone()),
      object_backbone_(other.object_backbone_ ? other.object_backbone_->clone() : nullptr),
      scene_(other.scene_),
      header_(other.header_) {}

MosModel& MosModel::operator=(const MosModel& other) {
  if (this != &other) {
    MosModel copy(other);
    *this = std::move(copy);
  }
  return *this;
}

ad::Var MosModel::interaction(ad::Tape& tape, ad::Var v_i, ad::Var v_s) {
  if (!config_.scene_module) throw std::logic_error("model was built without a scene-awareness module");
  return scene_.forward(tape, v_i, v_s);
}

DualForward MosModel::forward_dual(ad::Tape& tape, const Mat& x, const Mat& o, const ForwardOptions& options) {
  if (options.object && (x.rows() != o.rows() || x.cols() != o.cols())) {
    throw DataError("forward_dual: original and object batches are misaligned");
  }
  DualForward out;
  const bool need_x = options.origin || (options.object && config_.scene_module);
  if (need_x) out.v_x = backbone_->forward(tape, x);
  if (options.object) out.v_o = (object_backbone_ ? object_backbone_ : backbone_)->forward(tape, o);
  if (need_x) out.v_s = options.detach_scene ? tape.detach(out.v_x) : out.v_x;

  const ad::Var vx_in = need_x && options.block_feature_paths ? tape.detach(out.v_x) : out.v_x;
  const ad::Var vo_in = options.object && options.block_feature_paths ? tape.detach(out.v_o) : out.v_o;

  if (options.origin) {
    out.origin.h = config_.scene_module ? scene_.forward(tape, vx_in, out.v_s) : vx_in;
    out.origin.head = header_.forward(tape, out.origin.h);
  }
  if (options.object) {
    out.object.h = config_.scene_module ? scene_.forward(tape, vo_in, out.v_s) : vo_in;
    out.object.head = header_.forward(tape, out.object.h);
  }
  return out;
}

std::vector<Parameter*> MosModel::backbone_parameters() {
  std::vector<Parameter*> out;
  backbone_->collect(out);
  if (object_backbone_) object_backbone_->collect(out);
  return out;
}

std::vector<Parameter*> MosModel::scene_module_parameters() {
  std::vector<Parameter*> out;
  if (config_.scene_module) scene_.collect(out);
  return out;
}

std::vector<Parameter*> MosModel::header_parameters() {
  std::vector<Parameter*> out;
  header_.collect(out);
  return out;
}

std::vector<Parameter*> MosModel::parameters() {
  std::vector<Parameter*> out = backbone_parameters();
  for (Parameter* p : scene_module_parameters()) out.push_back(p);
  for (Parameter* p : header_parameters()) out.push_back(p);
  return out;
}

void MosModel::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

// ---------------------------------------------------------------------------

Mat images_to_rows(std::span<const Image* const> images) {
  if (images.empty()) return Mat(0, 0);
  const auto cols = static_cast<Eigen::Index>(images.front()->pixels.size());
  Mat out(static_cast<Eigen::Index>(images.size()), cols);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (static_cast<Eigen::Index>(images[i]->pixels.size()) != cols) throw DataError("images differ in size");
    out.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const RowVec>(images[i]->pixels.data(), cols);
  }
  return out;
}

int argmax_lowest(const Eigen::Ref<const RowVec>& row) {
  int best = 0;
  for (Eigen::Index k = 1; k < row.size(); ++k) {
    if (row(k) > row(best)) best = static_cast<int>(k);
  }
  return best;
}

Prediction predict(MosModel& model, const Mat& x, const Mat& o, Branch branch, int chunk) {
  if (chunk < 1) chunk = 1;
  Prediction out;
  const Eigen::Index n = x.rows();
  out.labels.resize(static_cast<std::size_t>(n));
  for (Eigen::Index begin = 0; begin < n; begin += chunk) {
    const Eigen::Index count = std::min<Eigen::Index>(chunk, n - begin);
    ad::Tape tape(false);
    ForwardOptions opts;
    // Both branches run so v_x and v_o are always available for analysis.
    opts.origin = true;
    opts.object = true;
    const Mat xb = x.middleRows(begin, count);
    const Mat ob = o.middleRows(begin, count);
    DualForward f = model.forward_dual(tape, xb, ob, opts);
    const BranchVars& bv = branch == Branch::kOrigin ? f.origin : f.object;
    const Mat& logits = bv.head.logits.value();
    if (out.z.size() == 0) {
      out.z.resize(n, bv.head.z.cols());
      out.v_o.resize(n, f.v_o.cols());
      if (f.v_x.valid()) out.v_x.resize(n, f.v_x.cols());
    }
    for (Eigen::Index r = 0; r < count; ++r) out.labels[static_cast<std::size_t>(begin + r)] = argmax_lowest(logits.row(r));
    out.z.middleRows(begin, count) = bv.head.z.value();
    out.v_o.middleRows(begin, count) = f.v_o.value();
    if (f.v_x.valid()) out.v_x.middleRows(begin, count) = f.v_x.value();
  }
  return out;
}

}  // namespace mos
