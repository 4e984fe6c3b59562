#include "mos/errors.hpp"
#include "mos/losses.hpp"
#include "mos/model.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

namespace mos {
namespace {

using test::random_mat;

ModelConfig small_config(EncoderKind kind = EncoderKind::kConv) {
  ModelConfig c;
  c.backbone.kind = kind;
  c.backbone.input_height = 16;
  c.backbone.input_width = 16;
  c.backbone.feature_dim = 8;
  c.backbone.channels = {4, 8};
  c.backbone.norm_groups = 2;
  c.backbone.patch_size = 4;
  c.backbone.depth = 1;
  c.backbone.heads = 2;
  c.num_classes = 3;
  return c;
}

Mat random_images(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Mat m(n, 3 * 16 * 16);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

TEST(Model, ConfigValidation) {
  ModelConfig c = small_config();
  EXPECT_NO_THROW(c.validate());
  c.backbone.norm_groups = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.num_classes = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.projector_depth = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Model, ParameterNamesAreUnique) {
  MosModel m(small_config(), 1);
  std::set<std::string> names;
  for (Parameter* p : m.parameters()) EXPECT_TRUE(names.insert(p->name).second) << p->name;
  EXPECT_TRUE(names.contains("head.prototypes"));
  ModelConfig separate = small_config();
  separate.shared_backbone = false;
  MosModel two(separate, 1);
  EXPECT_GT(two.backbone_parameters().size(), m.backbone_parameters().size());
}

class BackboneTest : public ::testing::TestWithParam<EncoderKind> {};

TEST_P(BackboneTest, ShapeDuplicateAndPermutation) {
  MosModel m(small_config(GetParam()), 2);
  std::mt19937_64 rng(3);
  for (int b : {1, 3}) {
    ad::Tape tape(false);
    EXPECT_EQ(m.backbone_forward(tape, random_images(rng, b)).value().rows(), b);
  }
  const Mat one = random_images(rng, 1);
  Mat two(2, one.cols());
  two << one, one;
  ad::Tape tape(false);
  const Mat out = m.backbone_forward(tape, two).value();
  EXPECT_EQ(out.cols(), 8);
  EXPECT_EQ(out.row(0), out.row(1));

  const Mat x = random_images(rng, 4);
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(4);
  perm.indices() << 2, 0, 3, 1;
  const Mat a = m.backbone_forward(tape, x).value();
  const Mat b = m.backbone_forward(tape, perm * x).value();
  EXPECT_LT(((perm * a) - b).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(m.backbone_forward(tape, Mat::Zero(1, 10)), DataError);
}

INSTANTIATE_TEST_SUITE_P(Kinds, BackboneTest, ::testing::Values(EncoderKind::kConv, EncoderKind::kTransformer));

TEST(SceneModule, JointInputIsUnitNormAndScaleInvariant) {
  MosModel m(small_config(), 4);
  std::mt19937_64 rng(5);
  ad::Tape tape(false);
  const Mat vi = random_mat(rng, 5, 8);
  const Mat vs = random_mat(rng, 5, 8);
  const Mat joint = m.scene_module()->joint_input(tape, tape.constant(vi), tape.constant(vs)).value();
  for (Eigen::Index r = 0; r < joint.rows(); ++r) EXPECT_NEAR(joint.row(r).norm(), 1.0, 1e-12);
  const Mat base = m.interaction(tape, tape.constant(vi), tape.constant(vs)).value();
  for (double c : {0.1, 10.0}) {
    const Mat scaled = m.interaction(tape, tape.constant(c * vi), tape.constant(c * vs)).value();
    EXPECT_LT(test::max_rel_error(scaled, base), 1e-12);
  }
  EXPECT_THROW(m.interaction(tape, tape.constant(Mat::Zero(1, 8)), tape.constant(Mat::Zero(1, 8))), NumericalError);
}

TEST(Header, UnitProjectionsAndBoundedLogits) {
  MosModel m(small_config(), 6);
  std::mt19937_64 rng(7);
  ad::Tape tape(false);
  const HeadVars h = m.head_forward(tape, tape.constant(random_mat(rng, 6, 8, 5.0)));
  for (Eigen::Index r = 0; r < 6; ++r) EXPECT_NEAR(h.z.value().row(r).norm(), 1.0, 1e-12);
  EXPECT_LE(h.logits.value().cwiseAbs().maxCoeff(), 1.0 / 0.1 + 1e-12);
  EXPECT_LT((h.logits.value() - h.cosine.value() / 0.1).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Header, PrototypeAlignedWithFeatureWins) {
  MosModel m(small_config(), 8);
  RowVec f = RowVec::Zero(8);
  f(0) = 2.0;
  Mat protos = Mat::Zero(3, 8);
  protos(0, 0) = 1.0;  // the feature direction
  protos(1, 1) = 1.0;  // orthogonal complements
  protos(2, 2) = 1.0;
  m.header().prototypes().value = protos;
  ad::Tape tape(false);
  const HeadVars h = m.head_forward(tape, tape.constant(f));
  EXPECT_EQ(argmax_lowest(h.logits.value().row(0)), 0);
  EXPECT_NEAR(h.logits.value()(0, 0), 10.0, 1e-12);
}

TEST(Prediction, ArgmaxTiesGoToLowestIndex) {
  RowVec r(4);
  r << 0.0, 3.0, 1.0, 3.0;
  EXPECT_EQ(argmax_lowest(r), 1);
  r << 9.0, 1.0, 2.0, 3.0;
  EXPECT_EQ(argmax_lowest(r), 0);
}

TEST(DualForward, SceneFeatureEqualsOriginalFeature) {
  MosModel m(small_config(), 9);
  std::mt19937_64 rng(10);
  const Mat x = random_images(rng, 3);
  const Mat o = random_images(rng, 3);
  ad::Tape tape;
  const DualForward f = m.forward_dual(tape, x, o);
  EXPECT_EQ(f.v_s.value(), f.v_x.value());
  EXPECT_FALSE(f.v_s.requires_grad());
  EXPECT_THROW(m.forward_dual(tape, x, random_images(rng, 2)), DataError);
}

TEST(DualForward, IdenticalInputsGiveIdenticalBranches) {
  MosModel m(small_config(), 11);
  std::mt19937_64 rng(12);
  const Mat x = random_images(rng, 4);
  ad::Tape tape(false);
  const DualForward f = m.forward_dual(tape, x, x);
  EXPECT_EQ(f.origin.head.logits.value(), f.object.head.logits.value());
  EXPECT_EQ(f.origin.head.z.value(), f.object.head.z.value());
}

TEST(DualForward, SwappingSamplesSwapsEveryOutput) {
  MosModel m(small_config(), 13);
  std::mt19937_64 rng(14);
  Mat x = random_images(rng, 3);
  Mat o = random_images(rng, 3);
  ad::Tape tape(false);
  const DualForward a = m.forward_dual(tape, x, o);
  x.row(0).swap(x.row(2));
  o.row(0).swap(o.row(2));
  const DualForward b = m.forward_dual(tape, x, o);
  for (const auto& [va, vb] : {std::pair{a.v_x, b.v_x}, std::pair{a.v_o, b.v_o}, std::pair{a.origin.head.logits, b.origin.head.logits},
                               std::pair{a.object.head.z, b.object.head.z}}) {
    EXPECT_LT((va.value().row(0) - vb.value().row(2)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((va.value().row(1) - vb.value().row(1)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

// Gradient reaching the backbone only through v_s must vanish: with the direct
// v_x / v_o inputs detached, the sole remaining route is the detached v_s.
TEST(DualForward, DetachedScenePathCarriesNoGradient) {
  MosModel m(small_config(), 15);
  std::mt19937_64 rng(16);
  const Mat x = random_images(rng, 4);
  const Mat o = random_images(rng, 4);
  ForwardOptions opts;
  opts.block_feature_paths = true;
  m.zero_grad();
  {
    ad::Tape tape;
    const DualForward f = m.forward_dual(tape, x, o, opts);
    ad::Var loss = ad::add(ad::sup_cls(f.origin.head.logits, std::vector<int>{0, 1, 2, 0}),
                           ad::sup_cls(f.object.head.logits, std::vector<int>{0, 1, 2, 0}));
    tape.backward(loss);
  }
  for (Parameter* p : m.backbone_parameters()) EXPECT_TRUE(p->grad.isZero(0.0)) << p->name;
  double scene_grad = 0.0;
  for (Parameter* p : m.scene_module_parameters()) scene_grad += p->grad.cwiseAbs().sum();
  EXPECT_GT(scene_grad, 0.0);

  // Without the block the backbone does receive gradient, and without the
  // detach it would also receive it through v_s.
  m.zero_grad();
  {
    ad::Tape tape;
    const DualForward f = m.forward_dual(tape, x, o);
    tape.backward(ad::sup_cls(f.object.head.logits, std::vector<int>{0, 1, 2, 0}));
  }
  double backbone_grad = 0.0;
  for (Parameter* p : m.backbone_parameters()) backbone_grad += p->grad.cwiseAbs().sum();
  EXPECT_GT(backbone_grad, 0.0);

  opts.detach_scene = false;
  m.zero_grad();
  {
    ad::Tape tape;
    const DualForward f = m.forward_dual(tape, x, o, opts);
    tape.backward(ad::sup_cls(f.object.head.logits, std::vector<int>{0, 1, 2, 0}));
  }
  backbone_grad = 0.0;
  for (Parameter* p : m.backbone_parameters()) backbone_grad += p->grad.cwiseAbs().sum();
  EXPECT_GT(backbone_grad, 0.0);
}

TEST(DualForward, BackbonePerturbationMovesSceneFeature) {
  MosModel m(small_config(), 17);
  std::mt19937_64 rng(18);
  const Mat x = random_images(rng, 2);
  ad::Tape t1(false);
  const Mat before = m.forward_dual(t1, x, x).v_s.value();
  m.backbone_parameters().front()->value.array() += 0.05;
  ad::Tape t2(false);
  const Mat after = m.forward_dual(t2, x, x).v_s.value();
  EXPECT_GT((after - before).cwiseAbs().maxCoeff(), 0.0);
}

TEST(DualForward, ObjectBranchUpdateMovesOriginOutput) {
  MosModel m(small_config(), 19);
  std::mt19937_64 rng(20);
  const Mat x = random_images(rng, 3);
  const Mat o = random_images(rng, 3);
  ad::Tape t0(false);
  const Mat origin_before = m.forward_dual(t0, x, o).origin.head.logits.value();
  m.zero_grad();
  {
    ad::Tape tape;
    ForwardOptions opts;
    opts.origin = false;
    const DualForward f = m.forward_dual(tape, x, o, opts);
    tape.backward(ad::sup_cls(f.object.head.logits, std::vector<int>{0, 1, 2}));
  }
  for (Parameter* p : m.parameters()) p->value -= 0.5 * p->grad;
  ad::Tape t1(false);
  const Mat origin_after = m.forward_dual(t1, x, o).origin.head.logits.value();
  EXPECT_GT((origin_after - origin_before).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Predict, IndependentOfInferenceBatchSize) {
  MosModel m(small_config(), 21);
  std::mt19937_64 rng(22);
  const Mat x = random_images(rng, 7);
  const Mat o = random_images(rng, 7);
  const Prediction all = predict(m, x, o, Branch::kObject, 64);
  const Prediction single = predict(m, x, o, Branch::kObject, 1);
  const Prediction three = predict(m, x, o, Branch::kObject, 3);
  EXPECT_EQ(all.labels, single.labels);
  EXPECT_EQ(all.labels, three.labels);
  EXPECT_LT((all.z - single.z).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((all.v_x - three.v_x).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(all.v_o.rows(), 7);
}

TEST(Predict, CopiedModelIsIndependent) {
  MosModel m(small_config(), 23);
  MosModel copy(m);
  std::mt19937_64 rng(24);
  const Mat x = random_images(rng, 2);
  EXPECT_EQ(predict(m, x, x).z, predict(copy, x, x).z);
  copy.parameters().front()->value.array() += 0.3;
  EXPECT_NE(predict(m, x, x).z, predict(copy, x, x).z);
}

// Full per-branch objective against central differences, for every
// scene-module and header parameter.
TEST(Gradients, BranchLossMatchesFiniteDifferences) {
  for (std::uint64_t seed : {31u, 32u}) {
    MosModel m(small_config(), seed);
    std::mt19937_64 rng(seed);
    const Mat vi = random_mat(rng, 6, 8);  // two views of three images
    const Mat vs = random_mat(rng, 6, 8);
    const std::vector<int> labels = {0, 2, 0};
    const std::vector<char> labeled = {1, 0, 1};
    const Hyperparams hp;
    const Mat teacher_fixed = [&] {
      ad::Tape tape(false);
      return m.head_forward(tape, m.interaction(tape, tape.constant(vi), tape.constant(vs))).cosine.value();
    }();
    // The teacher is a stop-gradient target, so it is held at its current
    // value while parameters are perturbed.
    auto loss = [&](ad::Tape& tape) {
      const ad::Var h = m.interaction(tape, tape.constant(vi), tape.constant(vs));
      const HeadVars head = m.head_forward(tape, h);
      return ad::branch_loss(ad::branch_terms(head.z, head.cosine, labels, labeled, hp, 0.05, &teacher_fixed),
                             hp.lambda);
    };
    m.zero_grad();
    {
      ad::Tape tape;
      tape.backward(loss(tape));
    }
    std::vector<Parameter*> params = m.scene_module_parameters();
    for (Parameter* p : m.header_parameters()) params.push_back(p);
    for (Parameter* p : params) {
      const Mat analytic = p->grad;
      const Mat numeric = test::numeric_grad(
          [&] {
            ad::Tape tape(false);
            return loss(tape).scalar();
          },
          p->value);
      EXPECT_LT(test::max_rel_error(analytic, numeric), 1e-4) << p->name;
    }
  }
}

}  // namespace
}  // namespace mos
