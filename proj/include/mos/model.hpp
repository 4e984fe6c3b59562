#pragma once

// Dual-branch model: shared backbone f, scene-awareness module theta
// (normalised concatenation followed by an MLP) and a DINO-style header
// (projector for contrastive embeddings, cosine prototypes for logits).

#include "mos/autodiff.hpp"

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace mos {

enum class EncoderKind { kConv, kTransformer };

const char* to_string(EncoderKind k);
EncoderKind encoder_kind_from_string(const std::string& s);

struct BackboneConfig {
  EncoderKind kind = EncoderKind::kConv;
  int feature_dim = 64;
  int input_height = 64;
  int input_width = 64;
  // transformer
  int patch_size = 8;
  int depth = 4;
  int heads = 4;
  // convolutional: one stride-2 3x3 layer per entry
  std::vector<int> channels = {16, 32, 48, 64};
  int norm_groups = 4;  // group norm after each conv; 0 disables

  void validate() const;
};

struct ModelConfig {
  BackboneConfig backbone;
  int num_classes = 8;
  bool scene_module = true;   // false: the header reads backbone features directly
  int scene_hidden = 0;       // 0 -> 2 * feature_dim
  int projector_depth = 2;    // Linear layers in the projector
  int projector_hidden = 0;   // 0 -> 2 * feature_dim
  int projection_dim = 0;     // 0 -> feature_dim
  double logit_temperature = 0.1;
  bool shared_backbone = true;  // false: the object branch owns a second encoder
  double interaction_eps = 1e-12;

  void validate() const;
  [[nodiscard]] int feature_dim() const { return backbone.feature_dim; }
};

/// y = x W + b, W stored (in x out).
struct Linear {
  Parameter weight;
  Parameter bias;

  Linear() = default;
  Linear(const std::string& name, int in, int out, double bound, std::mt19937_64& rng);
  ad::Var forward(ad::Tape& tape, ad::Var x);
};

/// Linear layers with ReLU between them (none after the last).
struct Mlp {
  std::vector<Linear> layers;

  Mlp() = default;
  Mlp(const std::string& name, const std::vector<int>& dims, std::mt19937_64& rng);
  ad::Var forward(ad::Tape& tape, ad::Var x);
  void collect(std::vector<Parameter*>& out);
};

class Backbone {
 public:
  virtual ~Backbone() = default;
  /// images: B x (3*H*W), CHW rows. Returns B x feature_dim.
  virtual ad::Var forward(ad::Tape& tape, const Mat& images) = 0;
  virtual void collect(std::vector<Parameter*>& out) = 0;
  [[nodiscard]] virtual std::unique_ptr<Backbone> clone() const = 0;
};

std::unique_ptr<Backbone> make_backbone(const BackboneConfig& config, const std::string& prefix, std::mt19937_64& rng);

/// Interaction: MLP((v_i ++ v_s) / ||v_i ++ v_s||).
class SceneAwarenessModule {
 public:
  SceneAwarenessModule() = default;
  SceneAwarenessModule(int feature_dim, int hidden, double eps, std::mt19937_64& rng);

  /// Throws NumericalError when a concatenated row has norm below eps.
  ad::Var forward(ad::Tape& tape, ad::Var v_i, ad::Var v_s);
  /// The normalised concatenation fed to the MLP (exposed for checks).
  ad::Var joint_input(ad::Tape& tape, ad::Var v_i, ad::Var v_s) const;
  void collect(std::vector<Parameter*>& out) { mlp_.collect(out); }

 private:
  Mlp mlp_;
  double eps_ = 1e-12;
};

struct HeadVars {
  ad::Var z;       // unit-norm projection
  ad::Var cosine;  // normalised feature . normalised prototype
  ad::Var logits;  // cosine / logit_temperature
};

class Header {
 public:
  Header() = default;
  Header(int feature_dim, int hidden, int projection_dim, int depth, int num_classes, double temperature,
         std::mt19937_64& rng);

  HeadVars forward(ad::Tape& tape, ad::Var h);
  void collect(std::vector<Parameter*>& out);
  Parameter& prototypes() { return prototypes_; }

 private:
  Mlp projector_;
  Parameter prototypes_;  // K x d
  double temperature_ = 0.1;
};

struct ForwardOptions {
  bool origin = true;
  bool object = true;
  bool detach_scene = true;         // v_s = detach(v_x)
  bool block_feature_paths = false; // detach the direct v_x / v_o inputs (gradient probes)
};

struct BranchVars {
  ad::Var h;  // interaction output (or raw feature without the SA module)
  HeadVars head;
};

struct DualForward {
  ad::Var v_x;
  ad::Var v_o;
  ad::Var v_s;
  BranchVars origin;
  BranchVars object;
};

enum class Branch { kOrigin, kObject };

class MosModel {
 public:
  MosModel(const ModelConfig& config, std::uint64_t seed);
  MosModel(const MosModel& other);
  MosModel& operator=(const MosModel& other);
  MosModel(MosModel&&) noexcept = default;
  MosModel& operator=(MosModel&&) noexcept = default;

  /// x and o hold index-aligned batches of original and object images.
  DualForward forward_dual(ad::Tape& tape, const Mat& x, const Mat& o, const ForwardOptions& options = {});

  ad::Var backbone_forward(ad::Tape& tape, const Mat& images) { return backbone_->forward(tape, images); }
  ad::Var interaction(ad::Tape& tape, ad::Var v_i, ad::Var v_s);
  HeadVars head_forward(ad::Tape& tape, ad::Var h) { return header_.forward(tape, h); }

  /// Stable order, unique names.
  std::vector<Parameter*> parameters();
  std::vector<Parameter*> backbone_parameters();
  std::vector<Parameter*> scene_module_parameters();
  std::vector<Parameter*> header_parameters();
  void zero_grad();

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  SceneAwarenessModule* scene_module() { return config_.scene_module ? &scene_ : nullptr; }
  Header& header() { return header_; }

 private:
  ModelConfig config_;
  std::unique_ptr<Backbone> backbone_;
  std::unique_ptr<Backbone> object_backbone_;  // only when not shared
  SceneAwarenessModule scene_;
  Header header_;
};

/// Stacks images (CHW) as rows.
Mat images_to_rows(std::span<const class Image* const> images);

/// Argmax with ties broken towards the lowest index.
int argmax_lowest(const Eigen::Ref<const RowVec>& row);

struct Prediction {
  std::vector<int> labels;
  Mat z;  // projections of the chosen branch
  Mat v_x;
  Mat v_o;
};

/// Inference in chunks of `chunk` images; no gradient bookkeeping.
Prediction predict(MosModel& model, const Mat& x, const Mat& o, Branch branch = Branch::kObject, int chunk = 64);

}  // namespace mos
