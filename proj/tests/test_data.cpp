#include "mos/core_data.hpp"
#include "mos/decouple.hpp"
#include "mos/errors.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <map>

namespace mos {
namespace {

std::vector<Sample> make_samples(int classes, int per_class, std::optional<int> scenes = std::nullopt) {
  std::vector<Sample> out;
  for (int k = 0; k < classes; ++k) {
    for (int i = 0; i < per_class; ++i) {
      Sample s;
      s.id = "s" + std::to_string(k) + "_" + std::to_string(i);
      s.image = Image(3, 2, 2);
      s.object_label = k;
      if (scenes) s.scene_label = (k + i) % *scenes;
      out.push_back(std::move(s));
    }
  }
  return out;
}

// ---- mean fill and extraction ---------------------------------------------

TEST(Decouple, MeanFillConstantAndHalfImages) {
  Image c(3, 4, 4, 0.5);
  for (double m : mean_fill(c)) EXPECT_DOUBLE_EQ(m, 0.5);
  Image half(3, 2, 2);
  for (int ch = 0; ch < 3; ++ch) {
    half.at(ch, 0, 0) = 1.0;
    half.at(ch, 1, 1) = 1.0;
  }
  for (double m : mean_fill(half)) EXPECT_DOUBLE_EQ(m, 0.5);
}

TEST(Decouple, MeanFillMatchesDirectSum) {
  std::mt19937_64 rng(11);
  const Image img = test::random_image(rng, 4, 4);
  const auto mu = mean_fill(img);
  double all = 0.0;
  for (int ch = 0; ch < 3; ++ch) {
    double s = 0.0;
    for (int y = 0; y < 4; ++y) {
      for (int x = 0; x < 4; ++x) s += img.at(ch, y, x);
    }
    all += s;
    EXPECT_NEAR(mu[ch], s / 16.0, 1e-15);
  }
  for (double m : mean_fill(img, FillMode::kScalar)) EXPECT_NEAR(m, all / 48.0, 1e-15);
}

TEST(Decouple, ExtractObjectBoundaryMasks) {
  std::mt19937_64 rng(12);
  const Image img = test::random_image(rng, 5, 6);
  const auto mu = mean_fill(img);
  EXPECT_EQ(extract_object(img, SaliencyMask::filled(5, 6, 1, MaskSource::kOracle), mu), img);
  const Image o = extract_object(img, SaliencyMask::filled(5, 6, 0, MaskSource::kOracle), mu);
  for (int ch = 0; ch < 3; ++ch) {
    for (int y = 0; y < 5; ++y) {
      for (int x = 0; x < 6; ++x) EXPECT_EQ(o.at(ch, y, x), mu[ch]);
    }
  }
}

TEST(Decouple, ExtractObjectTwoByTwoByHand) {
  Image img(3, 2, 2);
  const double a = 0.1, b = 0.7, c = 0.3, d = 0.9;
  for (int ch = 0; ch < 3; ++ch) {
    img.at(ch, 0, 0) = a;
    img.at(ch, 0, 1) = b;
    img.at(ch, 1, 0) = c;
    img.at(ch, 1, 1) = d;
  }
  const SaliencyMask m(2, 2, {1, 0, 0, 1}, MaskSource::kOracle);
  const auto mu = mean_fill(img);
  const Image o = extract_object(img, m, mu);
  for (int ch = 0; ch < 3; ++ch) {
    EXPECT_EQ(o.at(ch, 0, 0), a);
    EXPECT_EQ(o.at(ch, 0, 1), mu[ch]);
    EXPECT_EQ(o.at(ch, 1, 0), mu[ch]);
    EXPECT_EQ(o.at(ch, 1, 1), d);
  }
}

TEST(Decouple, ExtractObjectIsIdempotentUnderItsOwnFill) {
  std::mt19937_64 rng(13);
  const Image img = test::random_image(rng, 6, 6);
  std::vector<std::uint8_t> bits(36);
  for (auto& v : bits) v = rng() % 2;
  const SaliencyMask m(6, 6, bits, MaskSource::kOracle);
  const auto mu = mean_fill(img);
  const Image o = extract_object(img, m, mu);
  EXPECT_EQ(extract_object(o, m, mu), o);
  const Image again = extract_object(o, m, mean_fill(o));
  for (int ch = 0; ch < 3; ++ch) {
    for (int y = 0; y < 6; ++y) {
      for (int x = 0; x < 6; ++x) {
        if (m.at(y, x)) {
          EXPECT_EQ(again.at(ch, y, x), o.at(ch, y, x));
        }
      }
    }
  }
}

TEST(Decouple, MaskRejectsNonBinaryValuesAndShapeMismatch) {
  EXPECT_THROW(SaliencyMask(1, 2, {0, 2}, MaskSource::kOracle), DataError);
  Image img(3, 3, 3);
  EXPECT_THROW(extract_object(img, SaliencyMask::filled(2, 2, 1, MaskSource::kOracle), mean_fill(img)), DataError);
}

TEST(Decouple, MaskFilesThresholdAt128) {
  const auto dir = test::temp_dir("mask_files");
  auto write_grey = [&](const std::string& name, std::vector<std::uint8_t> px) {
    Raster8 r{1, 2, 2, std::move(px)};
    write_png(dir / name, r);
    return dir / name;
  };
  EXPECT_EQ(load_mask(write_grey("ones.png", {255, 255, 255, 255}), 2, 2).count(), 4u);
  EXPECT_EQ(load_mask(write_grey("zeros.png", {0, 0, 0, 0}), 2, 2).count(), 0u);
  const SaliencyMask checker = load_mask(write_grey("checker.png", {128, 127, 127, 128}), 2, 2);
  EXPECT_EQ(checker, SaliencyMask(2, 2, {1, 0, 0, 1}, MaskSource::kFile));
  EXPECT_THROW(load_mask(dir / "ones.png", 3, 3), DataError);

  const SaliencyMask m(2, 2, {0, 1, 1, 1}, MaskSource::kOracle);
  save_mask(dir / "round.png", m);
  EXPECT_EQ(load_mask(dir / "round.png", 2, 2), m);
  EXPECT_EQ(mask_path_for("a/img_001.png"), std::filesystem::path("a/img_001_mask.png"));
}

TEST(Decouple, HeuristicMaskFallsBackToEllipseOnConstantImage) {
  const Image flat(3, 16, 16, 0.4);
  const SaliencyMask m = heuristic_mask(flat);
  EXPECT_GT(m.count(), 0u);
  EXPECT_EQ(m.at(8, 8), 1);
  EXPECT_EQ(m.at(0, 0), 0);
  EXPECT_EQ(heuristic_mask(flat), m);
}

TEST(Decouple, HeuristicMaskCoversBrightCentredGlyph) {
  Image img(3, 32, 32, 0.05);
  std::vector<std::uint8_t> glyph(32 * 32, 0);
  for (int y = 12; y < 20; ++y) {
    for (int x = 12; x < 20; ++x) {
      for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) = 0.95;
      glyph[y * 32 + x] = 1;
    }
  }
  HeuristicMaskConfig cfg;
  cfg.quantile = 0.5;
  const SaliencyMask m = heuristic_mask(img, cfg);
  for (int y = 12; y < 20; ++y) {
    for (int x = 12; x < 20; ++x) EXPECT_EQ(m.at(y, x), 1);
  }
  EXPECT_GT(mask_iou(m, SaliencyMask(32, 32, glyph, MaskSource::kOracle)), 0.5);
}

TEST(Decouple, MaskIou) {
  const SaliencyMask a(1, 4, {1, 1, 0, 0}, MaskSource::kOracle);
  const SaliencyMask b(1, 4, {0, 1, 1, 0}, MaskSource::kOracle);
  EXPECT_DOUBLE_EQ(mask_iou(a, b), 1.0 / 3.0);
  const SaliencyMask e = SaliencyMask::filled(1, 4, 0, MaskSource::kOracle);
  EXPECT_DOUBLE_EQ(mask_iou(e, e), 1.0);
}

// ---- splits ------------------------------------------------------------------

TEST(Split, CountsOverManySeeds) {
  const auto samples = make_samples(4, 10);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const GcdSplit s = make_gcd_split(samples, 0.5, 0.5, seed);
    EXPECT_EQ(s.base_classes.size(), 2u);
    EXPECT_EQ(s.labeled.size(), 10u);
    EXPECT_EQ(s.unlabeled.size(), 30u);
    EXPECT_EQ(s.num_classes(), 4);
    // every sample in exactly one side; labeled samples only from base classes
    std::map<std::string, int> seen;
    for (const Sample& x : s.labeled) {
      ++seen[x.id];
      EXPECT_TRUE(s.is_base(x.object_label));
    }
    for (const Sample& x : s.unlabeled) ++seen[x.id];
    EXPECT_EQ(seen.size(), samples.size());
    for (const auto& [id, n] : seen) EXPECT_EQ(n, 1) << id;
    std::map<int, int> per_class;
    for (const Sample& x : s.labeled) ++per_class[x.object_label];
    for (const auto& [k, n] : per_class) EXPECT_EQ(n, 5);
    EXPECT_NO_THROW(s.validate(true));
  }
}

TEST(Split, CubShapedCounts) {
  const auto samples = make_samples(200, 30);
  const GcdSplit s = make_gcd_split(samples, 0.5, 0.5, 3);
  EXPECT_EQ(s.base_classes.size(), 100u);
  EXPECT_EQ(s.labeled.size(), 1500u);
  EXPECT_EQ(s.unlabeled.size(), 4500u);
}

TEST(Split, FullFractionsLeaveNothingUnlabeled) {
  const GcdSplit s = make_gcd_split(make_samples(3, 4), 1.0, 1.0, 0);
  EXPECT_TRUE(s.unlabeled.empty());
  EXPECT_EQ(s.base_classes, s.all_classes);
}

TEST(Split, SameSeedSameSplitAndFlagRoundTrip) {
  const auto samples = make_samples(6, 7);
  const GcdSplit a = make_gcd_split(samples, 0.5, 0.5, 9);
  const GcdSplit b = make_gcd_split(samples, 0.5, 0.5, 9);
  ASSERT_EQ(a.labeled.size(), b.labeled.size());
  for (std::size_t i = 0; i < a.labeled.size(); ++i) EXPECT_EQ(a.labeled[i].id, b.labeled[i].id);

  std::vector<Sample> flagged = samples;
  std::set<std::string> labeled;
  for (const Sample& s : a.labeled) labeled.insert(s.id);
  for (Sample& s : flagged) s.is_labeled = labeled.contains(s.id);
  const GcdSplit c = split_from_flags(flagged);
  EXPECT_EQ(c.base_classes, a.base_classes);
  EXPECT_EQ(c.labeled.size(), a.labeled.size());
  EXPECT_EQ(c.unlabeled.size(), a.unlabeled.size());
}

TEST(Split, RejectsInvalidFractions) {
  const auto samples = make_samples(2, 2);
  EXPECT_THROW(make_gcd_split(samples, 0.0, 0.5, 0), ConfigError);
  EXPECT_THROW(make_gcd_split(samples, 0.5, 1.5, 0), ConfigError);
}

// ---- scenes and quadrants --------------------------------------------------------

TEST(Quadrant, DefinitionTable) {
  GcdSplit split;
  split.base_classes = {0};
  split.all_classes = {0, 1};
  split.base_scenes = std::set<int>{0};
  Sample s;
  s.object_label = 0;
  s.scene_label = 0;
  EXPECT_EQ(quadrant_of(s, split), Quadrant::kBaseObjBaseScene);
  s.object_label = 1;
  EXPECT_EQ(quadrant_of(s, split), Quadrant::kNovelObjBaseScene);
  s.scene_label = 1;
  EXPECT_EQ(quadrant_of(s, split), Quadrant::kNovelObjNovelScene);
  s.object_label = 0;
  EXPECT_EQ(quadrant_of(s, split), Quadrant::kBaseObjNovelScene);
  s.scene_label.reset();
  EXPECT_THROW(quadrant_of(s, split), UnannotatedError);
}

TEST(Quadrant, CountsSumToAnnotatedUnlabeled) {
  auto samples = make_samples(6, 9, 4);
  samples[3].scene_label.reset();
  samples[20].scene_label.reset();
  GcdSplit split = make_gcd_split(samples, 0.5, 0.5, 4);
  split.base_scenes = derive_base_scenes(split, 2);
  std::map<Quadrant, int> counts;
  int annotated = 0;
  for (const Sample& s : split.unlabeled) {
    if (!s.scene_label) continue;
    ++annotated;
    ++counts[quadrant_of(s, split)];
  }
  int total = 0;
  for (const auto& [q, n] : counts) total += n;
  EXPECT_EQ(total, annotated);
  EXPECT_LT(annotated, static_cast<int>(split.unlabeled.size()) + 1);
}

TEST(Quadrant, BaseScenesByLabeledCount) {
  GcdSplit split;
  auto add = [&](int scene, int n) {
    for (int i = 0; i < n; ++i) {
      Sample s;
      s.scene_label = scene;
      s.is_labeled = true;
      split.labeled.push_back(s);
    }
  };
  add(0, 5);  // A
  add(1, 1);  // B
  Sample c;
  c.scene_label = 2;  // C only unlabeled
  split.unlabeled.push_back(c);
  EXPECT_EQ(derive_base_scenes(split, 2), (std::set<int>{0}));
  EXPECT_EQ(derive_base_scenes(split, 1), (std::set<int>{0, 1}));
}

TEST(SceneAnnotations, ParseSmokeAndEmpty) {
  const SceneAnnotations a = parse_scene_annotations("img_001,forest\nimg_002,ocean\n");
  EXPECT_EQ(a.scene_of.size(), 2u);
  EXPECT_EQ(a.names, (std::vector<std::string>{"forest", "ocean"}));
  EXPECT_TRUE(parse_scene_annotations("").scene_of.empty());
  EXPECT_THROW(parse_scene_annotations("no_comma_here\n"), ParseError);
}

TEST(SceneAnnotations, TwentyFourCategories) {
  std::string text;
  for (int i = 0; i < 96; ++i) text += "img_" + std::to_string(i) + ",scene" + std::to_string(i % 24) + "\n";
  const SceneAnnotations a = parse_scene_annotations(text);
  std::set<int> distinct;
  for (const auto& [id, s] : a.scene_of) distinct.insert(s);
  EXPECT_EQ(distinct.size(), 24u);
}

TEST(SceneAnnotations, AttachRejectsUnknownIds) {
  GcdSplit split = make_gcd_split(make_samples(2, 2), 1.0, 0.5, 0);
  EXPECT_THROW(attach_scene_annotations(split, parse_scene_annotations("ghost,forest\n")), DataError);
  attach_scene_annotations(split, parse_scene_annotations("s0_0,forest\n"));
  int labeled = 0;
  for (const Sample& s : split.labeled) labeled += s.scene_label.has_value();
  for (const Sample& s : split.unlabeled) labeled += s.scene_label.has_value();
  EXPECT_EQ(labeled, 1);
}

// ---- synthetic generator -------------------------------------------------------------

SyntheticConfig small_synthetic() {
  SyntheticConfig c;
  c.image_height = 24;
  c.image_width = 24;
  c.glyph_size = 10;
  c.samples_per_class = 12;
  return c;
}

TEST(Synthetic, FullCorrelationUsesHomeScene) {
  SyntheticConfig c = small_synthetic();
  c.correlation = 1.0;
  const SyntheticDataset d = gen_synthetic(c);
  EXPECT_EQ(d.samples.size(), 8u * 12u);
  for (const Sample& s : d.samples) EXPECT_EQ(*s.scene_label, home_scene(s.object_label, 4));
}

TEST(Synthetic, ZeroCorrelationAvoidsHomeScene) {
  SyntheticConfig c = small_synthetic();
  c.correlation = 0.0;
  for (const Sample& s : gen_synthetic(c).samples) EXPECT_NE(*s.scene_label, home_scene(s.object_label, 4));
}

TEST(Synthetic, HomeRateWithinBinomialBand) {
  SyntheticConfig c = small_synthetic();
  c.samples_per_class = 60;
  c.correlation = 0.7;
  const SyntheticDataset d = gen_synthetic(c);
  double home = 0.0;
  for (const Sample& s : d.samples) home += *s.scene_label == home_scene(s.object_label, 4);
  const double n = static_cast<double>(d.samples.size());
  EXPECT_LT(std::abs(home / n - 0.7), 4.0 * std::sqrt(0.7 * 0.3 / n));
}

TEST(Synthetic, DeterministicPerSeed) {
  const SyntheticConfig c = small_synthetic();
  const SyntheticDataset a = gen_synthetic(c);
  const SyntheticDataset b = gen_synthetic(c);
  ASSERT_EQ(a.samples.size(), b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    EXPECT_EQ(a.samples[i].image, b.samples[i].image);
    EXPECT_EQ(a.samples[i].is_labeled, b.samples[i].is_labeled);
  }
  SyntheticConfig other = c;
  other.seed = 1;
  EXPECT_NE(gen_synthetic(other).samples[0].image, a.samples[0].image);
}

TEST(Synthetic, OracleMaskKeepsGlyphPixels) {
  const SyntheticDataset d = gen_synthetic(small_synthetic());
  for (int i = 0; i < 5; ++i) {
    const Sample& s = d.samples[i * 7];
    ASSERT_TRUE(s.oracle_mask.has_value());
    EXPECT_GT(s.oracle_mask->count(), 0u);
    const Image o = extract_object(s.image, *s.oracle_mask, mean_fill(s.image));
    for (int ch = 0; ch < 3; ++ch) {
      for (int y = 0; y < s.image.height; ++y) {
        for (int x = 0; x < s.image.width; ++x) {
          if (s.oracle_mask->at(y, x)) {
            EXPECT_EQ(o.at(ch, y, x), s.image.at(ch, y, x));
          }
        }
      }
    }
  }
}

TEST(Synthetic, ValidateNamesField) {
  SyntheticConfig c = small_synthetic();
  c.correlation = 1.5;
  try {
    gen_synthetic(c);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("correlation"), std::string::npos);
  }
}

// ---- manifest --------------------------------------------------------------------------

TEST(Manifest, RoundTrip) {
  const auto dir = test::temp_dir("manifest");
  std::vector<ManifestRow> rows(2);
  rows[0] = {"a", "images/a.png", 3, std::string("forest"), true, std::string("images/a_mask.png")};
  rows[1] = {"b", "images/b.png", 0, std::nullopt, false, std::nullopt};
  write_manifest(dir / "manifest.csv", rows);
  const auto back = read_manifest(dir / "manifest.csv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].id, "a");
  EXPECT_EQ(back[0].label, 3);
  EXPECT_EQ(back[0].scene, std::optional<std::string>("forest"));
  EXPECT_TRUE(back[0].labeled);
  EXPECT_EQ(back[0].mask, std::optional<std::string>("images/a_mask.png"));
  EXPECT_FALSE(back[1].scene.has_value());
  EXPECT_FALSE(back[1].labeled);
}

TEST(Manifest, BadRowsAreParseErrors) {
  const auto dir = test::temp_dir("manifest_bad");
  {
    std::ofstream f(dir / "m.csv");
    f << "id,image,label,scene,labeled,mask\n" << "a,x.png,notanint,,0,\n";
  }
  EXPECT_THROW(read_manifest(dir / "m.csv"), ParseError);
  {
    std::ofstream f(dir / "h.csv");
    f << "wrong,header\n";
  }
  EXPECT_THROW(read_manifest(dir / "h.csv"), ParseError);
}

TEST(Manifest, LoadDatasetReadsImagesAndMasks) {
  const auto dir = test::temp_dir("dataset");
  std::filesystem::create_directories(dir / "images");
  std::mt19937_64 rng(5);
  const Image img = test::random_image(rng, 4, 4);
  save_image(dir / "images" / "a.png", img);
  save_mask(dir / "images" / "a_mask.png", SaliencyMask::filled(4, 4, 1, MaskSource::kOracle));
  write_manifest(dir / "manifest.csv", {{"a", "images/a.png", 1, std::string("s0"), true, std::string("images/a_mask.png")}});
  const LoadedDataset d = load_dataset(dir / "manifest.csv");
  ASSERT_EQ(d.samples.size(), 1u);
  EXPECT_EQ(d.samples[0].object_label, 1);
  EXPECT_TRUE(d.samples[0].is_labeled);
  EXPECT_EQ(d.samples[0].scene_label, std::optional<int>(0));
  ASSERT_TRUE(d.samples[0].oracle_mask.has_value());
  EXPECT_EQ(d.samples[0].oracle_mask->count(), 16u);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_NEAR(d.samples[0].image.pixels[i], img.pixels[i], 0.5 / 255.0 + 1e-12);
}

}  // namespace
}  // namespace mos
