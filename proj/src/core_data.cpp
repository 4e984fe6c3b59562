#include "mos/core_data.hpp"

#include "mos/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

namespace mos {

int GcdSplit::num_classes() const { return all_classes.empty() ? 0 : *all_classes.rbegin() + 1; }

void GcdSplit::validate(bool require_strict_subset) const {
  if (!std::includes(all_classes.begin(), all_classes.end(), base_classes.begin(), base_classes.end())) {
    throw DataError("base classes must be a subset of all classes");
  }
  if (require_strict_subset && base_classes.size() == all_classes.size()) {
    throw DataError("base classes must be a strict subset of all classes");
  }
  std::set<std::string> ids;
  for (const Sample& s : labeled) {
    if (!s.is_labeled) throw DataError("sample " + s.id + " is in the labeled set but not flagged labeled");
    if (!base_classes.contains(s.object_label)) throw DataError("labeled sample " + s.id + " has a novel class");
    ids.insert(s.id);
  }
  for (const Sample& s : unlabeled) {
    if (!ids.insert(s.id).second) throw DataError("sample id " + s.id + " appears in both partitions");
  }
}

const char* to_string(Quadrant q) {
  switch (q) {
    case Quadrant::kBaseObjBaseScene:
      return "BaseObj-BaseScene";
    case Quadrant::kNovelObjBaseScene:
      return "NovelObj-BaseScene";
    case Quadrant::kBaseObjNovelScene:
      return "BaseObj-NovelScene";
    case Quadrant::kNovelObjNovelScene:
      return "NovelObj-NovelScene";
  }
  return "?";
}

GcdSplit make_gcd_split(const std::vector<Sample>& samples, double base_class_fraction, double labeled_fraction,
                        std::uint64_t seed) {
  if (samples.empty()) throw ConfigError("make_gcd_split: no samples");
  if (!(base_class_fraction > 0.0 && base_class_fraction <= 1.0)) {
    throw ConfigError("base_class_fraction must lie in (0,1]");
  }
  if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0)) throw ConfigError("labeled_fraction must lie in (0,1]");

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].object_label < 0) throw DataError("negative class id on sample " + samples[i].id);
    by_class[samples[i].object_label].push_back(i);
  }
  for (const auto& [cls, idx] : by_class) {
    if (idx.size() < 2) throw DataError("class " + std::to_string(cls) + " has fewer than 2 samples");
  }

  std::mt19937_64 rng(seed);
  std::vector<int> classes;
  for (const auto& [cls, idx] : by_class) classes.push_back(cls);
  std::shuffle(classes.begin(), classes.end(), rng);
  const auto n_base =
      static_cast<std::size_t>(std::ceil(base_class_fraction * static_cast<double>(classes.size()) - 1e-9));

  GcdSplit split;
  for (const auto& [cls, idx] : by_class) split.all_classes.insert(cls);
  split.base_classes.insert(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(n_base));

  std::vector<char> is_labeled(samples.size(), 0);
  for (int cls : split.base_classes) {
    std::vector<std::size_t> idx = by_class[cls];
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_lab = static_cast<std::size_t>(std::floor(labeled_fraction * static_cast<double>(idx.size()) + 1e-9));
    if (n_lab == 0) throw DataError("base class " + std::to_string(cls) + " receives no labeled samples");
    for (std::size_t j = 0; j < n_lab; ++j) is_labeled[idx[j]] = 1;
  }

  for (std::size_t i = 0; i < samples.size(); ++i) {
    Sample s = samples[i];
    s.is_labeled = is_labeled[i] != 0;
    (s.is_labeled ? split.labeled : split.unlabeled).push_back(std::move(s));
  }
  return split;
}

GcdSplit split_from_flags(const std::vector<Sample>& samples) {
  GcdSplit split;
  for (const Sample& s : samples) {
    split.all_classes.insert(s.object_label);
    if (s.is_labeled) {
      split.base_classes.insert(s.object_label);
      split.labeled.push_back(s);
    } else {
      split.unlabeled.push_back(s);
    }
  }
  split.validate();
  return split;
}

Quadrant quadrant_of(const Sample& sample, const GcdSplit& split) {
  if (!sample.scene_label) throw UnannotatedError("sample " + sample.id + " has no scene annotation");
  if (!split.base_scenes) throw UnannotatedError("split has no base scenes defined");
  const bool base_obj = split.base_classes.contains(sample.object_label);
  const bool base_scene = split.base_scenes->contains(*sample.scene_label);
  if (base_obj) return base_scene ? Quadrant::kBaseObjBaseScene : Quadrant::kBaseObjNovelScene;
  return base_scene ? Quadrant::kNovelObjBaseScene : Quadrant::kNovelObjNovelScene;
}

std::set<int> derive_base_scenes(const GcdSplit& split, int min_labeled_count) {
  std::map<int, int> counts;
  bool any = false;
  for (const Sample& s : split.labeled) {
    if (s.scene_label) {
      any = true;
      ++counts[*s.scene_label];
    }
  }
  if (!any) throw UnannotatedError("no labeled sample carries a scene label");
  std::set<int> base;
  for (const auto& [scene, n] : counts) {
    if (n >= min_labeled_count) base.insert(scene);
  }
  return base;
}

// ---------------------------------------------------------------------------

void SyntheticConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) { throw ConfigError(field + ": " + why); };
  if (n_object_classes < 2) fail("n_object_classes", "must be >= 2");
  if (n_scene_classes < 2) fail("n_scene_classes", "must be >= 2");
  if (image_height <= 0 || image_width <= 0) fail("image_size", "must be positive");
  if (samples_per_class < 2) fail("samples_per_class", "must be >= 2");
  if (!(correlation >= 0.0 && correlation <= 1.0)) fail("correlation", "must lie in [0,1]");
  if (!(base_class_fraction > 0.0 && base_class_fraction <= 1.0)) fail("base_class_fraction", "must lie in (0,1]");
  if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0)) fail("labeled_fraction", "must lie in (0,1]");
  if (glyph_size <= 0) fail("glyph_size", "must be positive");
  if (glyph_size > image_height || glyph_size > image_width) fail("glyph_size", "glyph larger than image");
  if (twin_tint < 0.0 || scene_contrast < 0.0 || scene_noise < 0.0) fail("rendering", "must be non-negative");
  if (clutter_count < 0) fail("clutter_count", "must be >= 0");
  if (!(clutter_radius > 0.0)) fail("clutter_radius", "must be positive");
  if (novel_scene_min_count < 1) fail("novel_scene_min_count", "must be >= 1");
}

namespace {

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double i = std::floor(h * 6.0);
  const double f = h * 6.0 - i;
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - f * s);
  const double t = v * (1.0 - (1.0 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0:
      return {v, t, p};
    case 1:
      return {q, v, p};
    case 2:
      return {p, v, t};
    case 3:
      return {p, q, v};
    case 4:
      return {t, p, v};
    default:
      return {v, p, q};
  }
}

// Glyph coverage test in unit box coordinates.
bool glyph_covers(int shape, double u, double v) {
  const double du = u - 0.5;
  const double dv = v - 0.5;
  const double r = std::sqrt(du * du + dv * dv);
  switch (shape % 8) {
    case 0:
      return u > 0.1 && u < 0.9 && v > 0.1 && v < 0.9;
    case 1:
      return r < 0.45;
    case 2:
      return (std::abs(du) < 0.15 && std::abs(dv) < 0.45) || (std::abs(dv) < 0.15 && std::abs(du) < 0.45);
    case 3:
      return v > 0.1 && v < 0.9 && std::abs(du) < (v - 0.1) * 0.55;
    case 4:
      return r > 0.25 && r < 0.47;
    case 5:
      return u > 0.05 && u < 0.95 && v > 0.05 && v < 0.95 &&
             (std::abs(u - v) < 0.13 || std::abs(u + v - 1.0) < 0.13);
    case 6:
      return u > 0.1 && u < 0.9 && ((v > 0.12 && v < 0.4) || (v > 0.6 && v < 0.88));
    default:
      return std::abs(du) + std::abs(dv) < 0.47;
  }
}

double quantize8(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace

SyntheticDataset gen_synthetic(const SyntheticConfig& config) {
  config.validate();
  const int h = config.image_height;
  const int w = config.image_width;
  const int g = config.glyph_size;
  const int n_scenes = config.n_scene_classes;

  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  SyntheticDataset out;
  for (int s = 0; s < n_scenes; ++s) {
    std::ostringstream name;
    name << "scene_" << std::setw(2) << std::setfill('0') << s;
    out.scene_names.push_back(name.str());
  }

  int counter = 0;
  for (int k = 0; k < config.n_object_classes; ++k) {
    const int family = k / 2;
    const int shape = family % 8;
    const double tint = (k % 2 == 0 ? 1.0 : -1.0) * config.twin_tint;
    auto glyph_color = hsv_to_rgb(std::fmod(0.13 + family * 0.618034, 1.0), 0.75, 0.95);
    glyph_color[0] += tint;
    glyph_color[2] -= tint;

    for (int i = 0; i < config.samples_per_class; ++i) {
      int scene = home_scene(k, n_scenes);
      if (unit(rng) >= config.correlation) {
        std::uniform_int_distribution<int> other(0, n_scenes - 2);
        const int o = other(rng);
        scene = o >= scene ? o + 1 : o;
      }
      std::uniform_int_distribution<int> py(0, h - g);
      std::uniform_int_distribution<int> px(0, w - g);
      const int top = py(rng);
      const int left = px(rng);
      const double phase = unit(rng) * 2.0 * std::numbers::pi;
      const double freq = 4.0 + (scene % 3) + 0.5 * unit(rng);  // cycles across the image

      const double angle = std::numbers::pi * scene / n_scenes;
      const double hue = static_cast<double>(scene) / n_scenes + 0.05;
      const double ca = std::cos(angle);
      const double sa = std::sin(angle);

      // Class-independent clutter discs, painted under the glyph.
      struct Disc {
        double cy, cx, r;
        std::array<double, 3> rgb;
      };
      std::vector<Disc> discs;
      for (int k2 = 0; k2 < config.clutter_count; ++k2) {
        Disc d;
        d.cy = unit(rng) * h;
        d.cx = unit(rng) * w;
        d.r = config.clutter_radius * (0.6 + 0.8 * unit(rng));
        d.rgb = hsv_to_rgb(unit(rng), 0.4 + 0.6 * unit(rng), 0.3 + 0.7 * unit(rng));
        discs.push_back(d);
      }

      Image img(3, h, w);
      std::vector<std::uint8_t> mask(static_cast<std::size_t>(h) * w, 0);
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double t = (x * ca + y * sa) / std::max(h, w);
          const double value = 0.5 + 0.5 * config.scene_contrast * std::sin(2.0 * std::numbers::pi * freq * t + phase);
          std::array<double, 3> px_rgb = hsv_to_rgb(hue, 0.6, value);
          for (const Disc& d : discs) {
            const double dy = y + 0.5 - d.cy;
            const double dx = x + 0.5 - d.cx;
            if (dy * dy + dx * dx < d.r * d.r) px_rgb = d.rgb;
          }
          const int gy = y - top;
          const int gx = x - left;
          if (gy >= 0 && gy < g && gx >= 0 && gx < g && glyph_covers(shape, (gx + 0.5) / g, (gy + 0.5) / g)) {
            px_rgb = glyph_color;
            mask[static_cast<std::size_t>(y) * w + x] = 1;
          }
          for (int c = 0; c < 3; ++c) img.at(c, y, x) = px_rgb[c] + config.scene_noise * gauss(rng);
        }
      }
      for (double& v : img.pixels) v = quantize8(v);

      Sample s;
      std::ostringstream id;
      id << "syn_" << std::setw(5) << std::setfill('0') << counter++;
      s.id = id.str();
      s.image = std::move(img);
      s.object_label = k;
      s.scene_label = scene;
      s.oracle_mask = SaliencyMask(h, w, std::move(mask), MaskSource::kOracle);
      out.samples.push_back(std::move(s));
    }
  }

  out.split = make_gcd_split(out.samples, config.base_class_fraction, config.labeled_fraction, config.seed ^ 0x9E3779B97F4A7C15ULL);
  out.split.scene_names = out.scene_names;
  out.split.base_scenes = derive_base_scenes(out.split, config.novel_scene_min_count);
  std::set<std::string> labeled_ids;
  for (const Sample& l : out.split.labeled) labeled_ids.insert(l.id);
  for (Sample& s : out.samples) s.is_labeled = labeled_ids.contains(s.id);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(trim(cur));
  return out;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

SceneAnnotations parse_scene_annotations(const std::string& text) {
  SceneAnnotations ann;
  std::map<std::string, int> name_ids;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto fields = split_csv(line);
    if (fields.size() != 2 || fields[0].empty() || fields[1].empty()) {
      throw ParseError("expected '<sample_id>,<scene_name>'", lineno);
    }
    auto [it, inserted] = name_ids.try_emplace(fields[1], static_cast<int>(ann.names.size()));
    if (inserted) ann.names.push_back(fields[1]);
    if (!ann.scene_of.emplace(fields[0], it->second).second) {
      throw ParseError("duplicate sample id '" + fields[0] + "'", lineno);
    }
  }
  return ann;
}

SceneAnnotations load_scene_annotations(const std::filesystem::path& path) {
  return parse_scene_annotations(read_text(path));
}

void write_scene_annotations(const std::filesystem::path& path, const std::vector<Sample>& samples,
                             const std::vector<std::string>& scene_names) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const Sample& s : samples) {
    if (!s.scene_label) continue;
    out << s.id << ',' << scene_names.at(*s.scene_label) << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

void attach_scene_annotations(GcdSplit& split, const SceneAnnotations& annotations) {
  std::map<std::string, Sample*> by_id;
  for (auto* part : {&split.labeled, &split.unlabeled}) {
    for (Sample& s : *part) by_id[s.id] = &s;
  }
  for (const auto& [id, scene] : annotations.scene_of) {
    if (!by_id.contains(id)) throw DataError("scene annotation for unknown sample id '" + id + "'");
  }
  for (auto& [id, sample] : by_id) {
    const auto it = annotations.scene_of.find(id);
    if (it == annotations.scene_of.end()) {
      sample->scene_label.reset();
    } else {
      sample->scene_label = it->second;
    }
  }
  split.scene_names = annotations.names;
}

std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  std::vector<ManifestRow> rows;
  std::set<std::string> ids;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto f = split_csv(line);
    if (lineno == 1) {
      if (f.size() != 6 || f[0] != "id" || f[1] != "image" || f[2] != "label") {
        throw ParseError("manifest header must be 'id,image,label,scene,labeled,mask'", lineno);
      }
      continue;
    }
    if (f.size() != 6) throw ParseError("manifest row needs 6 fields", lineno);
    ManifestRow r;
    r.id = f[0];
    r.image = f[1];
    if (r.id.empty() || r.image.empty()) throw ParseError("empty id or image path", lineno);
    try {
      std::size_t used = 0;
      r.label = std::stoi(f[2], &used);
      if (used != f[2].size() || r.label < 0) throw std::invalid_argument("label");
    } catch (const std::exception&) {
      throw ParseError("invalid label '" + f[2] + "'", lineno);
    }
    if (!f[3].empty()) r.scene = f[3];
    if (f[4] == "1" || f[4] == "true") {
      r.labeled = true;
    } else if (f[4] == "0" || f[4] == "false") {
      r.labeled = false;
    } else {
      throw ParseError("labeled flag must be 0/1", lineno);
    }
    if (!f[5].empty()) r.mask = f[5];
    if (!ids.insert(r.id).second) throw ParseError("duplicate sample id '" + r.id + "'", lineno);
    rows.push_back(std::move(r));
  }
  if (lineno == 0) throw ParseError("empty manifest", 1);
  return rows;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "id,image,label,scene,labeled,mask\n";
  for (const ManifestRow& r : rows) {
    out << r.id << ',' << r.image << ',' << r.label << ',' << r.scene.value_or("") << ',' << (r.labeled ? 1 : 0)
        << ',' << r.mask.value_or("") << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

LoadedDataset load_dataset(const std::filesystem::path& manifest_path) {
  const auto rows = read_manifest(manifest_path);
  const auto dir = manifest_path.parent_path();
  LoadedDataset ds;
  std::map<std::string, int> scene_ids;
  for (const ManifestRow& r : rows) {
    Sample s;
    s.id = r.id;
    s.image = load_image(dir / r.image);
    s.object_label = r.label;
    s.is_labeled = r.labeled;
    if (r.scene) {
      auto [it, inserted] = scene_ids.try_emplace(*r.scene, static_cast<int>(ds.scene_names.size()));
      if (inserted) ds.scene_names.push_back(*r.scene);
      s.scene_label = it->second;
    }
    if (r.mask) {
      SaliencyMask m = load_mask(dir / *r.mask, s.image.height, s.image.width);
      s.oracle_mask = SaliencyMask(m.height(), m.width(), m.data(), MaskSource::kOracle);
    }
    ds.samples.push_back(std::move(s));
    ds.image_paths.push_back(dir / r.image);
  }
  return ds;
}

}  // namespace mos
