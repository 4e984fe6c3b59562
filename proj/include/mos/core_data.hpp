#pragma once

// GCD data model: samples, labeled/unlabeled splits, scene annotations,
// ambiguity quadrants and a procedural object-on-scene generator.

#include "mos/decouple.hpp"
#include "mos/image.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace mos {

struct Sample {
  std::string id;
  Image image;
  int object_label = 0;
  std::optional<int> scene_label;
  bool is_labeled = false;
  std::optional<SaliencyMask> oracle_mask;
};

struct GcdSplit {
  std::vector<Sample> labeled;
  std::vector<Sample> unlabeled;
  std::set<int> base_classes;
  std::set<int> all_classes;
  std::optional<std::set<int>> base_scenes;
  std::vector<std::string> scene_names;  // index = scene id, when known

  /// Number of prototypes / clusters: max class id + 1.
  [[nodiscard]] int num_classes() const;
  [[nodiscard]] bool is_base(int object_label) const { return base_classes.contains(object_label); }

  /// Throws DataError on a violated split invariant.
  void validate(bool require_strict_subset = false) const;
};

enum class Quadrant { kBaseObjBaseScene = 0, kNovelObjBaseScene = 1, kBaseObjNovelScene = 2, kNovelObjNovelScene = 3 };
inline constexpr std::array<Quadrant, 4> kAllQuadrants = {Quadrant::kBaseObjBaseScene, Quadrant::kNovelObjBaseScene,
                                                          Quadrant::kBaseObjNovelScene, Quadrant::kNovelObjNovelScene};
const char* to_string(Quadrant q);

/// Raised when a quadrant is requested for a sample without a scene label.
class UnannotatedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Seeded shuffle of class ids picks the base classes; within each base
/// class a seeded shuffle picks floor(labeled_fraction * n) labeled samples.
GcdSplit make_gcd_split(const std::vector<Sample>& samples, double base_class_fraction, double labeled_fraction,
                        std::uint64_t seed);

/// Rebuilds a split from per-sample `is_labeled` flags (manifest round trip).
GcdSplit split_from_flags(const std::vector<Sample>& samples);

Quadrant quadrant_of(const Sample& sample, const GcdSplit& split);

/// Scenes seen at least `min_labeled_count` times among labeled samples.
std::set<int> derive_base_scenes(const GcdSplit& split, int min_labeled_count = 1);

// ---------------------------------------------------------------------------
// Synthetic benchmark
// ---------------------------------------------------------------------------

struct SyntheticConfig {
  int n_object_classes = 8;
  int n_scene_classes = 4;
  int image_height = 64;
  int image_width = 64;
  int samples_per_class = 40;
  double correlation = 0.9;  // probability of drawing the object's home scene
  std::uint64_t seed = 0;
  double base_class_fraction = 0.5;
  double labeled_fraction = 0.5;

  // Rendering knobs.
  int glyph_size = 20;
  double twin_tint = 0.12;       // colour offset separating glyph twins
  double scene_contrast = 0.6;   // stripe amplitude
  double scene_noise = 0.06;     // per-pixel colour noise
  int clutter_count = 0;         // random discs per image, independent of the class
  double clutter_radius = 5.0;   // mean disc radius in pixels
  int novel_scene_min_count = 1; // derive_base_scenes threshold

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

struct SyntheticDataset {
  std::vector<Sample> samples;
  GcdSplit split;
  std::vector<std::string> scene_names;
};

/// Object class k has home scene k mod n_scene_classes. Classes 2j and 2j+1
/// share a glyph shape and differ only by a small colour tint.
SyntheticDataset gen_synthetic(const SyntheticConfig& config);

[[nodiscard]] inline int home_scene(int object_class, int n_scene_classes) { return object_class % n_scene_classes; }

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

struct SceneAnnotations {
  std::map<std::string, int> scene_of;  // sample id -> scene id
  std::vector<std::string> names;       // scene id -> name, first-appearance order
};

/// `<sample_id>,<scene_name>` per line; blank lines are ignored.
SceneAnnotations load_scene_annotations(const std::filesystem::path& path);
SceneAnnotations parse_scene_annotations(const std::string& text);
void write_scene_annotations(const std::filesystem::path& path, const std::vector<Sample>& samples,
                             const std::vector<std::string>& scene_names);

/// Sets scene labels on every sample of the split; ids absent from the split
/// are rejected, samples absent from the file keep no label.
void attach_scene_annotations(GcdSplit& split, const SceneAnnotations& annotations);

struct ManifestRow {
  std::string id;
  std::string image;  // relative to the manifest directory
  int label = 0;
  std::optional<std::string> scene;
  bool labeled = false;
  std::optional<std::string> mask;
};

/// CSV with header `id,image,label,scene,labeled,mask`.
std::vector<ManifestRow> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows);

struct LoadedDataset {
  std::vector<Sample> samples;
  std::vector<std::string> scene_names;
  std::vector<std::filesystem::path> image_paths;  // aligned with samples
};

/// Reads the manifest and every referenced image (and mask, when listed).
LoadedDataset load_dataset(const std::filesystem::path& manifest_path);

}  // namespace mos
