#include "mos/decouple.hpp"

#include "mos/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace mos {

const char* to_string(MaskSource s) {
  switch (s) {
    case MaskSource::kOracle:
      return "oracle";
    case MaskSource::kFile:
      return "file";
    case MaskSource::kHeuristic:
      return "heuristic";
  }
  return "?";
}

MaskSource mask_source_from_string(const std::string& s) {
  if (s == "oracle") return MaskSource::kOracle;
  if (s == "file") return MaskSource::kFile;
  if (s == "heuristic") return MaskSource::kHeuristic;
  throw ConfigError("mask source must be one of oracle, file, heuristic (got '" + s + "')");
}

SaliencyMask::SaliencyMask(int height, int width, std::vector<std::uint8_t> data, MaskSource source)
    : height_(height), width_(width), data_(std::move(data)), source_(source) {
  if (height <= 0 || width <= 0) throw DataError("mask dimensions must be positive");
  if (data_.size() != static_cast<std::size_t>(height) * width) throw DataError("mask buffer size mismatch");
  for (std::uint8_t v : data_) {
    if (v > 1) throw DataError("mask values must be exactly 0 or 1");
  }
}

SaliencyMask SaliencyMask::filled(int height, int width, std::uint8_t value, MaskSource source) {
  return SaliencyMask(height, width, std::vector<std::uint8_t>(static_cast<std::size_t>(height) * width, value), source);
}

std::size_t SaliencyMask::count() const {
  return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
}

std::array<double, 3> mean_fill(const Image& image, FillMode mode) {
  if (image.empty() || image.channels != 3) throw DataError("mean_fill needs a non-empty 3-channel image");
  std::array<double, 3> mu{};
  const std::size_t plane = image.plane();
  for (int c = 0; c < 3; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += image.pixels[c * plane + i];
    mu[c] = s / static_cast<double>(plane);
  }
  if (mode == FillMode::kScalar) {
    const double m = (mu[0] + mu[1] + mu[2]) / 3.0;
    mu = {m, m, m};
  }
  return mu;
}

Image extract_object(const Image& image, const SaliencyMask& mask, const std::array<double, 3>& fill) {
  if (!mask.matches(image)) throw DataError("mask and image dimensions differ");
  if (image.channels != 3) throw DataError("extract_object expects 3 channels");
  Image out = image;
  const std::size_t plane = image.plane();
  const auto& m = mask.data();
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      if (m[i] == 0) out.pixels[c * plane + i] = fill[c];
    }
  }
  return out;
}

SaliencyMask load_mask(const std::filesystem::path& path, int expected_height, int expected_width) {
  if (!std::filesystem::exists(path)) throw IoError("mask file not found: " + path.string());
  const Raster8 r = read_png(path);
  if (r.channels != 1) throw FormatError("mask must be single-channel: " + path.string());
  if (r.height != expected_height || r.width != expected_width) {
    throw DataError("mask shape mismatch for " + path.string());
  }
  std::vector<std::uint8_t> bits(r.data.size());
  std::transform(r.data.begin(), r.data.end(), bits.begin(), [](std::uint8_t v) { return v >= 128 ? 1 : 0; });
  return SaliencyMask(r.height, r.width, std::move(bits), MaskSource::kFile);
}

void save_mask(const std::filesystem::path& path, const SaliencyMask& mask) {
  Raster8 r;
  r.channels = 1;
  r.height = mask.height();
  r.width = mask.width();
  r.data.resize(mask.data().size());
  std::transform(mask.data().begin(), mask.data().end(), r.data.begin(), [](std::uint8_t v) { return v ? 255 : 0; });
  write_png(path, r);
}

std::filesystem::path mask_path_for(const std::filesystem::path& image_path, const std::string& suffix) {
  auto p = image_path;
  p.replace_filename(image_path.stem().string() + suffix + ".png");
  return p;
}

SaliencyMask heuristic_mask(const Image& image, const HeuristicMaskConfig& config) {
  const auto mu = mean_fill(image);
  const int h = image.height;
  const int w = image.width;
  const std::size_t plane = image.plane();

  std::vector<double> dev(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    double s = 0.0;
    for (int c = 0; c < 3; ++c) {
      const double d = image.pixels[c * plane + i] - mu[c];
      s += d * d;
    }
    dev[i] = std::sqrt(s);
  }
  std::vector<double> sorted = dev;
  const auto k = static_cast<std::size_t>(std::clamp(config.quantile, 0.0, 1.0) * static_cast<double>(plane - 1));
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end());
  const double threshold = sorted[k];

  // Ellipse with the image's aspect ratio covering `ellipse_area` of it.
  const double scale = std::sqrt(4.0 * config.ellipse_area / std::numbers::pi);
  const double rx = 0.5 * w * scale;
  const double ry = 0.5 * h * scale;
  const double cx = 0.5 * (w - 1);
  const double cy = 0.5 * (h - 1);

  std::vector<std::uint8_t> ellipse(plane, 0);
  std::vector<std::uint8_t> both(plane, 0);
  bool any = false;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double ex = (x - cx) / rx;
      const double ey = (y - cy) / ry;
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (ex * ex + ey * ey <= 1.0) {
        ellipse[i] = 1;
        if (dev[i] > threshold) {
          both[i] = 1;
          any = true;
        }
      }
    }
  }
  return SaliencyMask(h, w, any ? std::move(both) : std::move(ellipse), MaskSource::kHeuristic);
}

double mask_iou(const SaliencyMask& a, const SaliencyMask& b) {
  if (a.height() != b.height() || a.width() != b.width()) throw DataError("mask_iou: shape mismatch");
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    inter += (a.data()[i] & b.data()[i]);
    uni += (a.data()[i] | b.data()[i]);
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace mos
