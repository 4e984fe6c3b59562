#pragma once

// Object/scene decoupling: saliency masks from several sources and the
// object-extraction rule O = X*M + mu*(1-M) with mean-pixel fill.

#include "mos/image.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mos {

enum class MaskSource { kOracle, kFile, kHeuristic };

const char* to_string(MaskSource s);
MaskSource mask_source_from_string(const std::string& s);

/// Binary foreground map; 1 marks object pixels, 0 marks scene.
class SaliencyMask {
 public:
  SaliencyMask() = default;
  /// Throws DataError unless every value is 0 or 1.
  SaliencyMask(int height, int width, std::vector<std::uint8_t> data, MaskSource source);

  static SaliencyMask filled(int height, int width, std::uint8_t value, MaskSource source);

  [[nodiscard]] int height() const { return height_; }
  [[nodiscard]] int width() const { return width_; }
  [[nodiscard]] MaskSource source() const { return source_; }
  [[nodiscard]] std::uint8_t at(int y, int x) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  [[nodiscard]] const std::vector<std::uint8_t>& data() const { return data_; }
  [[nodiscard]] std::size_t count() const;
  [[nodiscard]] bool empty() const { return data_.empty(); }
  [[nodiscard]] bool matches(const Image& image) const { return image.height == height_ && image.width == width_; }

  friend bool operator==(const SaliencyMask& a, const SaliencyMask& b) {
    return a.height_ == b.height_ && a.width_ == b.width_ && a.data_ == b.data_;
  }

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> data_;
  MaskSource source_ = MaskSource::kOracle;
};

enum class FillMode { kPerChannel, kScalar };

/// Per-channel mean over the whole image. In scalar mode all three entries
/// hold the mean over every channel and pixel.
std::array<double, 3> mean_fill(const Image& image, FillMode mode = FillMode::kPerChannel);

/// Keeps image pixels where the mask is 1 and writes `fill` elsewhere.
Image extract_object(const Image& image, const SaliencyMask& mask, const std::array<double, 3>& fill);

/// Reads an 8-bit single-channel PNG; values >= 128 become foreground.
SaliencyMask load_mask(const std::filesystem::path& path, int expected_height, int expected_width);
void save_mask(const std::filesystem::path& path, const SaliencyMask& mask);

/// `<stem><suffix>.png` next to the image, e.g. img_001.png -> img_001_mask.png.
std::filesystem::path mask_path_for(const std::filesystem::path& image_path, const std::string& suffix = "_mask");

struct HeuristicMaskConfig {
  double quantile = 0.8;       // contrast threshold quantile of |X - mu|
  double ellipse_area = 0.5;   // fraction of the image covered by the centre ellipse
};

/// Centre prior intersected with an intensity-contrast threshold. Pixels
/// whose distance to the mean colour strictly exceeds the configured
/// quantile survive. When no pixel survives, the ellipse alone is returned.
SaliencyMask heuristic_mask(const Image& image, const HeuristicMaskConfig& config = {});

/// Intersection over union of the foreground sets (1.0 when both are empty).
double mask_iou(const SaliencyMask& a, const SaliencyMask& b);

}  // namespace mos
