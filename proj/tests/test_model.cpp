#include <gtest/gtest.h>

#include <Eigen/SVD>
#include <cmath>
#include <filesystem>
#include <random>

#include "cksp/checkpoint.hpp"
#include "cksp/grad_check.hpp"
#include "cksp/model.hpp"

using namespace cksp;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

ModelConfig small_config(std::uint64_t seed = 7) {
  ModelConfig c;
  c.classes_per_species = {5, 3, 5};
  c.stem_channels = 4;
  c.block_channels = {6, 8, 8};
  c.fc_units = 6;
  c.rank = 2;
  c.seed = seed;
  return c;
}

void randomize_branches(CkspModel& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.3);
  m.visit_parameters([&](const std::string&, Tensor& t, ParamKind k) {
    if (k == ParamKind::LowRankFactor || k == ParamKind::FullRankBranch || k == ParamKind::BnAffine) {
      for (double& v : t.values()) v += n(rng);
    }
  });
}

std::vector<Segment> three_species(std::size_t per) {
  return {{0, 0, per}, {1, per, 2 * per}, {2, 2 * per, 3 * per}};
}

Var probe_loss(Tape& tape, const std::vector<Var>& outputs) {
  Var total = tape.constant(Tensor({1}, 0.0));
  for (std::size_t s = 0; s < outputs.size(); ++s) {
    Tensor w(outputs[s].shape());
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = std::sin(0.37 * static_cast<double>(i) + 1.3 * s);
    total = ops::add(total, ops::sum(ops::mul(outputs[s], tape.constant(w))));
  }
  return total;
}

}  // namespace

TEST(LowRankConv, FreshBranchOutputsZero) {
  std::mt19937_64 rng(1);
  auto p = LowRankConvParams::create(4, 5, 3, 0.02, rng);
  Tape tape;
  Var y = lrconv_forward(tape, tape.constant(random_tensor({4, 1, 9}, 2)), p);
  for (double v : y.value().data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(y.shape(), (Shape{5, 1, 9}));
}

TEST(LowRankConv, HandComputedKernelAndOutput) {
  std::mt19937_64 rng(1);
  auto p = LowRankConvParams::create(1, 1, 1, 0.02, rng);
  p.B = Tensor({3, 1}, {1.0, 0.0, 0.0});
  p.A = Tensor({1, 1}, {2.0});
  EXPECT_EQ(p.kernel().values(), (std::vector<double>{2.0, 0.0, 0.0}));
  Tape tape;
  Var y = lrconv_forward(tape, tape.constant(Tensor({1, 1, 3}, {3.0, 4.0, 5.0})), p, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.value()[0], 6.0);
}

TEST(LowRankConv, ParameterCountAgainstFullRank) {
  std::mt19937_64 rng(1);
  auto p = LowRankConvParams::create(64, 64, 12, 0.02, rng);
  EXPECT_EQ(p.num_params(), 3072u);
  EXPECT_LT(p.num_params(), 3u * 64u * 64u);
}

TEST(LowRankConv, RankBoundIsEnforced) {
  std::mt19937_64 rng(1);
  EXPECT_THROW(LowRankConvParams::create(4, 8, 5, 0.02, rng), std::invalid_argument);
  EXPECT_THROW(LowRankConvParams::create(4, 8, 0, 0.02, rng), std::invalid_argument);
  EXPECT_THROW(LowRankConvParams::create(4, 8, 2, 0.0, rng), std::invalid_argument);
  EXPECT_NO_THROW(LowRankConvParams::create(4, 8, 4, 0.02, rng));
}

TEST(LowRankConv, GradientsReachBothFactors) {
  std::mt19937_64 rng(3);
  auto p = LowRankConvParams::create(3, 2, 2, 0.5, rng);
  p.B = random_tensor({6, 2}, 4);
  const Tensor x = random_tensor({2, 3, 1, 7}, 5);
  auto report = grad_check_params(
      [&](Tape& tape) { return probe_loss(tape, {lrconv_forward(tape, tape.constant(x), p)}); },
      {{"B", &p.B}, {"A", &p.A}});
  EXPECT_TRUE(report.passed()) << report.max_rel_error;
}

TEST(LowRankConv, MaterializedKernelHasRankAtMostR) {
  for (auto [c_in, c_out, r] : std::vector<std::tuple<std::size_t, std::size_t, std::size_t>>{
           {16, 32, 2}, {32, 64, 8}, {64, 64, 12}, {64, 32, 16}}) {
    std::mt19937_64 rng(c_in * 31 + r);
    auto p = LowRankConvParams::create(c_in, c_out, r, 0.5, rng);
    p.B = random_tensor({3 * c_out, r}, r + 11);
    const Tensor k = p.kernel();
    Eigen::MatrixXd m(3 * c_out, c_in);
    for (std::size_t i = 0; i < 3 * c_out; ++i)
      for (std::size_t j = 0; j < c_in; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = k[i * c_in + j];
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    const auto& sv = svd.singularValues();
    EXPECT_GT(sv(static_cast<Eigen::Index>(r - 1)), 1e-6);
    for (Eigen::Index i = static_cast<Eigen::Index>(r); i < sv.size(); ++i) EXPECT_LT(sv(i), 1e-10);
  }
}

TEST(Spconv, FreshLayerEqualsSharedConvForEverySpecies) {
  std::mt19937_64 a(1), b(2);
  SpconvLayer layer(4, 6, 3, true, BranchKind::LowRank, 2, 0.02, a, b);
  const Tensor x = random_tensor({4, 1, 10}, 9);
  Tape tape;
  Var shared = layer.shared_forward(tape, tape.constant(x));
  for (std::size_t s = 0; s < 3; ++s) {
    Var y = spconv_forward(tape, tape.constant(x), s, layer);
    EXPECT_EQ(max_abs_diff(y.value(), shared.value()), 0.0);
  }
  EXPECT_THROW(spconv_forward(tape, tape.constant(x), 3, layer), std::out_of_range);
}

TEST(Spconv, PerturbingOneBranchLeavesOthersUnchanged) {
  std::mt19937_64 a(1), b(2);
  SpconvLayer layer(4, 6, 3, true, BranchKind::LowRank, 2, 0.02, a, b);
  const Tensor x = random_tensor({4, 1, 10}, 9);
  Tape tape;
  const Tensor before = spconv_forward(tape, tape.constant(x), 1, layer).value();
  layer.lowrank[0].B = random_tensor({18, 2}, 3);
  const Tensor after1 = spconv_forward(tape, tape.constant(x), 1, layer).value();
  const Tensor after0 = spconv_forward(tape, tape.constant(x), 0, layer).value();
  EXPECT_EQ(max_abs_diff(before, after1), 0.0);
  EXPECT_GT(max_abs_diff(before, after0), 1e-6);
}

TEST(Spconv, ZeroInputGivesBiasBroadcast) {
  std::mt19937_64 a(1), b(2);
  SpconvLayer layer(3, 4, 2, true, BranchKind::LowRank, 2, 0.02, a, b);
  layer.bias = Tensor({4}, {0.5, -1.0, 2.0, 0.0});
  layer.lowrank[1].B = random_tensor({12, 2}, 5);
  Tape tape;
  Var y = spconv_forward(tape, tape.constant(Tensor({3, 1, 5})), 1, layer);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t t = 0; t < 5; ++t) EXPECT_EQ(y.value()[c * 5 + t], layer.bias[c]);
}

TEST(Spconv, BranchContributionIsLinear) {
  std::mt19937_64 a(1), b(2);
  SpconvLayer layer(3, 4, 2, true, BranchKind::LowRank, 3, 0.3, a, b);
  layer.lowrank[0].B = random_tensor({12, 3}, 5);
  const Tensor x = random_tensor({3, 1, 8}, 6);
  Tensor x2 = x;
  for (double& v : x2.values()) v *= 2.5;
  Tape tape;
  auto diff = [&](const Tensor& in) {
    Tensor y = spconv_forward(tape, tape.constant(in), 0, layer).value();
    const Tensor f = layer.shared_forward(tape, tape.constant(in)).value();
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] -= f[i];
    return y;
  };
  const Tensor d1 = diff(x), d2 = diff(x2);
  for (std::size_t i = 0; i < d1.numel(); ++i) EXPECT_NEAR(d2[i], 2.5 * d1[i], 1e-12);
}

TEST(Spconv, FullRankBranchStartsAtZero) {
  std::mt19937_64 a(1), b(2);
  SpconvLayer layer(3, 4, 2, true, BranchKind::FullRank, 2, 0.02, a, b);
  ASSERT_EQ(layer.fullrank.size(), 2u);
  for (double v : layer.fullrank[1].data()) EXPECT_EQ(v, 0.0);
}

TEST(Sbn, ConstantBatchNormalizesToZero) {
  SbnLayer bn(3, 2, true, 1e-5, 0.1);
  Tape tape;
  Var y = sbn_forward(tape, tape.constant(Tensor({4, 3, 1, 5}, 2.5)), 0, bn, Mode::Training);
  for (double v : y.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Sbn, AffineAppliedAfterNormalization) {
  SbnLayer bn(1, 1, true, 1e-5, 0.1);
  bn.states[0].gamma = Tensor({1}, 2.0);
  bn.states[0].beta = Tensor({1}, 1.0);
  const Tensor x({4, 1, 1, 1}, {-1.0, 1.0, -1.0, 1.0});  // mean 0, population variance 1
  Tape tape;
  Var y = sbn_forward(tape, tape.constant(x), 0, bn, Mode::Training);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.value()[i], 2.0 * x[i] / std::sqrt(1.0 + 1e-5) + 1.0, 1e-15);
}

TEST(Sbn, BatchStatisticsOfNormalizedOutput) {
  SbnLayer bn(5, 3, true, 1e-5, 0.1);
  for (std::size_t b : {8u, 13u, 32u}) {
    const Tensor x = random_tensor({b, 5, 1, 6}, b, -3.0, 7.0);
    Tape tape;
    Var y = sbn_forward(tape, tape.constant(x), 2, bn, Mode::Training);
    const std::size_t w = 6;
    for (std::size_t c = 0; c < 5; ++c) {
      double mean = 0.0, var = 0.0, in_mean = 0.0, in_var = 0.0;
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t t = 0; t < w; ++t) {
          mean += y.value()[(i * 5 + c) * w + t];
          in_mean += x[(i * 5 + c) * w + t];
        }
      mean /= static_cast<double>(b * w);
      in_mean /= static_cast<double>(b * w);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t t = 0; t < w; ++t) {
          var += std::pow(y.value()[(i * 5 + c) * w + t] - mean, 2);
          in_var += std::pow(x[(i * 5 + c) * w + t] - in_mean, 2);
        }
      var /= static_cast<double>(b * w);
      in_var /= static_cast<double>(b * w);
      EXPECT_LE(std::abs(mean), 1e-9);
      EXPECT_NEAR(var, in_var / (in_var + 1e-5), 1e-9);
    }
  }
}

TEST(Sbn, RunningStatisticsAreIsolatedPerSpecies) {
  SbnLayer bn(3, 3, true, 1e-5, 0.1);
  for (int step = 0; step < 100; ++step) {
    Tape tape;
    sbn_forward(tape, tape.constant(random_tensor({8, 3, 1, 4}, step, 1.0, 4.0)), 0, bn, Mode::Training);
  }
  for (std::size_t s : {1u, 2u}) {
    for (double v : bn.states[s].running_mean.data()) EXPECT_EQ(v, 0.0);
    for (double v : bn.states[s].running_var.data()) EXPECT_EQ(v, 1.0);
  }
  EXPECT_GT(bn.states[0].running_mean[0], 1.0);
}

TEST(Sbn, RunningUpdateUsesMomentumAndUnbiasedVariance) {
  SbnLayer bn(1, 1, true, 1e-5, 0.1);
  Tape tape;
  sbn_forward(tape, tape.constant(Tensor({2, 1, 1, 1}, {1.0, 3.0})), 0, bn, Mode::Training);
  EXPECT_DOUBLE_EQ(bn.states[0].running_mean[0], 0.2);
  EXPECT_DOUBLE_EQ(bn.states[0].running_var[0], 0.9 * 1.0 + 0.1 * 2.0);
}

TEST(Sbn, InferenceUsesRunningStatistics) {
  SbnLayer bn(1, 2, true, 1e-5, 0.1);
  bn.states[1].running_mean = Tensor({1}, 2.0);
  bn.states[1].running_var = Tensor({1}, 4.0);
  Tape tape;
  Var y = sbn_forward(tape, tape.constant(Tensor({1, 1, 1, 1}, {6.0})), 1, bn, Mode::Inference);
  EXPECT_NEAR(y.value()[0], 4.0 / std::sqrt(4.0 + 1e-5), 1e-15);
}

TEST(Sbn, ErrorsOnSmallBatchAndUnknownSpecies) {
  SbnLayer bn(2, 2, true, 1e-5, 0.1);
  Tape tape;
  EXPECT_THROW(sbn_forward(tape, tape.constant(Tensor({1, 2, 1, 3}, 1.0)), 0, bn, Mode::Training), std::exception);
  EXPECT_THROW(sbn_forward(tape, tape.constant(Tensor({4, 2, 1, 3}, 1.0)), 2, bn, Mode::Training), std::out_of_range);
  EXPECT_THROW(SbnLayer(2, 2, true, 1e-5, 1.0), std::invalid_argument);
}

TEST(Model, HeadSizesFollowSpeciesClassCounts) {
  CkspModel model(small_config());
  for (auto [species, k] : std::vector<std::pair<std::size_t, std::size_t>>{{0, 5}, {1, 3}, {2, 5}}) {
    SampleWindow w;
    w.data = random_tensor({1, 3, 50}, species);
    w.species_id = species;
    Tape tape;
    auto logits = forward_windows(tape, model, {&w}, Mode::Inference);
    ASSERT_EQ(logits.size(), 1u);
    EXPECT_EQ(logits.at(species).shape(), (Shape{1, k}));
  }
}

TEST(Model, HeadInitScaleMultipliesHeadWeights) {
  ModelConfig a = small_config(3), b = small_config(3);
  a.head_init_scale = 1.0;
  b.head_init_scale = 0.25;
  CkspModel ma(a), mb(b);
  for (std::size_t s = 0; s < 3; ++s) {
    const auto wa = ma.head(s).weight.values(), wb = mb.head(s).weight.values();
    ASSERT_EQ(wa.size(), wb.size());
    for (std::size_t i = 0; i < wa.size(); ++i) EXPECT_NEAR(wb[i], 0.25 * wa[i], 1e-15);
  }
  EXPECT_EQ(ma.blocks()[0].conv.weight.values(), mb.blocks()[0].conv.weight.values());
  b.head_init_scale = 0.0;
  EXPECT_THROW(CkspModel{b}, std::invalid_argument);
}

TEST(Model, DefaultArchitectureShapes) {
  ModelConfig c;
  c.classes_per_species = {5, 3, 5};
  CkspModel model(c);
  EXPECT_EQ(model.blocks().size(), 3u);
  EXPECT_EQ(model.blocks()[2].conv.c_out(), 128u);
  EXPECT_FALSE(model.stem_bn().per_species());
  EXPECT_FALSE(model.stem_conv().has_branches());
  for (const auto& b : model.blocks()) {
    EXPECT_TRUE(b.conv.has_branches());
    EXPECT_TRUE(b.bn.per_species());
    EXPECT_EQ(b.conv.num_branches(), 3u);
  }
  EXPECT_TRUE(model.fc_bn().per_species());
}

TEST(Model, FreshTrunkIsSpeciesIndependentAndMatchesSharedTrunk) {
  const ModelConfig cfg = small_config(11);
  CkspModel full(cfg);
  CkspModel shared(ablation_variant(cfg, false, false));
  const Tensor x = random_tensor({4, 3, 1, 50}, 5);
  // inference first: each training call below moves the shared stem statistics
  for (Mode mode : {Mode::Inference, Mode::Training}) {
    Tape tape;
    const Tensor ref = shared.trunk(tape, tape.constant(x), {{0, 0, 4}}, mode).value();
    for (std::size_t s = 0; s < 3; ++s) {
      const Tensor f = full.trunk(tape, tape.constant(x), {{s, 0, 4}}, mode).value();
      EXPECT_LE(max_abs_diff(f, ref), 1e-12);
    }
  }
}

TEST(Model, SameInputUnderTwoSpeciesDiffersOnlyThroughHeads) {
  CkspModel model(small_config(3));
  Tensor x({4, 3, 1, 50});
  const Tensor one = random_tensor({2, 3, 1, 50}, 8);
  for (std::size_t i = 0; i < one.numel(); ++i) x[i] = x[i + one.numel()] = one[i];
  Tape tape;
  ForwardOutput out = model.forward(tape, tape.constant(x), {{0, 0, 2}, {2, 2, 4}}, Mode::Training);
  const auto& f = out.features.value();
  const std::size_t half = f.numel() / 2;
  for (std::size_t i = 0; i < half; ++i) EXPECT_NEAR(f[i], f[i + half], 1e-12);
  EXPECT_GT(max_abs_diff(out.logits[0].value(), out.logits[1].value()), 1e-6);
}

TEST(Model, FullRankVariantAlsoStartsShared) {
  const ModelConfig cfg = small_config(4);
  CkspModel fr(ablation_variant(cfg, true, true, BranchKind::FullRank));
  CkspModel shared(ablation_variant(cfg, false, true));
  const Tensor x = random_tensor({3, 3, 1, 50}, 2);
  Tape tape;
  const Tensor a = fr.trunk(tape, tape.constant(x), {{1, 0, 3}}, Mode::Training).value();
  const Tensor b = shared.trunk(tape, tape.constant(x), {{1, 0, 3}}, Mode::Training).value();
  EXPECT_LE(max_abs_diff(a, b), 1e-12);
}

TEST(Model, AblationVariantsHaveExpectedStructure) {
  const ModelConfig cfg = small_config();
  CkspModel none(ablation_variant(cfg, false, false));
  CkspModel sbn_only(ablation_variant(cfg, false, true));
  CkspModel spconv_only(ablation_variant(cfg, true, false));
  for (const auto& b : none.blocks()) {
    EXPECT_FALSE(b.conv.has_branches());
    EXPECT_FALSE(b.bn.per_species());
  }
  for (const auto& b : sbn_only.blocks()) {
    EXPECT_FALSE(b.conv.has_branches());
    EXPECT_TRUE(b.bn.per_species());
  }
  for (const auto& b : spconv_only.blocks()) {
    EXPECT_TRUE(b.conv.has_branches());
    EXPECT_FALSE(b.bn.per_species());
  }
}

TEST(Model, TrainingForwardRejectsTinyOrMalformedSegments) {
  CkspModel model(small_config());
  Tape tape;
  const Var x = tape.constant(random_tensor({3, 3, 1, 50}, 1));
  EXPECT_THROW(model.forward(tape, x, {{0, 0, 2}, {1, 2, 3}}, Mode::Training), std::invalid_argument);
  EXPECT_THROW(model.forward(tape, x, {{0, 0, 2}}, Mode::Training), std::invalid_argument);
  EXPECT_THROW(model.forward(tape, x, {{5, 0, 3}}, Mode::Training), std::out_of_range);
  EXPECT_NO_THROW(model.forward(tape, x, {{0, 0, 2}, {1, 2, 3}}, Mode::Inference));
  EXPECT_THROW(model.forward(tape, tape.constant(Tensor({3, 3, 1, 40})), {{0, 0, 3}}, Mode::Inference), ShapeError);
}

TEST(Model, ForwardWindowsRequiresGrouping) {
  CkspModel model(small_config());
  std::vector<SampleWindow> ws(3);
  for (std::size_t i = 0; i < 3; ++i) {
    ws[i].data = random_tensor({1, 3, 50}, i);
    ws[i].species_id = i == 1 ? 1 : 0;
  }
  Tape tape;
  EXPECT_THROW(forward_windows(tape, model, {&ws[0], &ws[1], &ws[2]}, Mode::Inference), std::invalid_argument);
}

TEST(Model, SpeciesIsolationOfGradients) {
  CkspModel model(small_config(5));
  randomize_branches(model, 9);
  Tape tape;
  ForwardOutput out = model.forward(tape, tape.constant(random_tensor({4, 3, 1, 50}, 3)), {{1, 0, 4}}, Mode::Training);
  tape.backward(probe_loss(tape, out.logits));
  std::size_t checked = 0, nonzero_own = 0;
  model.visit_parameters([&](const std::string& path, Tensor& t, ParamKind) {
    const bool other = path.find(".species0.") != std::string::npos || path.find(".species2.") != std::string::npos;
    const bool own = path.find(".species1.") != std::string::npos;
    for (double g : t.grad()) {
      if (other) {
        EXPECT_EQ(g, 0.0) << path;
        ++checked;
      }
      if (own && g != 0.0) ++nonzero_own;
    }
  });
  EXPECT_GT(checked, 0u);
  EXPECT_GT(nonzero_own, 0u);
}

TEST(Model, RunningStatsOfUnseenSpeciesStayBitIdentical) {
  CkspModel model(small_config(5));
  std::vector<std::pair<std::string, std::vector<double>>> before;
  model.visit_buffers([&](const std::string& p, Tensor& t) { before.emplace_back(p, t.values()); });
  for (int step = 0; step < 20; ++step) {
    Tape tape;
    model.forward(tape, tape.constant(random_tensor({4, 3, 1, 50}, step)), {{0, 0, 4}}, Mode::Training);
  }
  std::size_t i = 0;
  model.visit_buffers([&](const std::string& p, Tensor& t) {
    const bool untouched = p.find(".species1.") != std::string::npos || p.find(".species2.") != std::string::npos;
    if (untouched) EXPECT_EQ(t.values(), before[i].second) << p;
    if (p.find(".shared.") != std::string::npos || p.find(".species0.") != std::string::npos)
      EXPECT_NE(t.values(), before[i].second) << p;
    ++i;
  });
}

TEST(Model, EndToEndGradientOnMixedBatch) {
  ModelConfig cfg = small_config(21);
  cfg.stem_channels = 3;
  cfg.block_channels = {4, 4, 4};
  cfg.fc_units = 4;
  CkspModel model(cfg);
  randomize_branches(model, 2);
  const Tensor x = random_tensor({6, 3, 1, 50}, 4);
  std::vector<NamedParam> params;
  model.visit_parameters([&](const std::string& p, Tensor& t, ParamKind) { params.push_back({p, &t}); });
  auto report = grad_check_params(
      [&](Tape& tape) {
        return probe_loss(tape, model.forward(tape, tape.constant(x), three_species(2), Mode::Training).logits);
      },
      params);
  EXPECT_TRUE(report.passed()) << "max rel error " << report.max_rel_error;
  EXPECT_GT(report.checked, 500u);
}

TEST(ParamReport, LowRankBranchesSmallerThanFullRankAcrossRanks) {
  for (std::size_t r : {2u, 4u, 8u, 12u, 16u}) {
    ModelConfig c;
    c.classes_per_species = {5, 3, 5};
    c.rank = r;
    CkspModel model(c);
    const ParamReport rep = model.param_report();
    EXPECT_TRUE(rep.lowrank_smaller_than_fullrank()) << "r=" << r;
    std::size_t expect = 0;
    for (std::size_t i = 0; i < 3; ++i) {
      const std::size_t ci = i == 0 ? 16 : c.block_channels[i - 1], co = c.block_channels[i];
      expect += 3 * co * r + r * ci;
    }
    EXPECT_EQ(rep.branch[0], expect);
    EXPECT_EQ(rep.total, model.num_parameters());
  }
}

TEST(ParamReport, RankAtBoundCostsAtLeastFullRank) {
  std::mt19937_64 rng(1);
  auto p = LowRankConvParams::create(16, 32, 16, 0.02, rng);
  EXPECT_GE(p.num_params(), 3u * 32u * 16u);
  EXPECT_THROW(LowRankConvParams::create(16, 32, 17, 0.02, rng), std::invalid_argument);
}

TEST(ParamReport, DoublingSpeciesDoublesSpeciesSpecificCounts) {
  ModelConfig c3;
  c3.classes_per_species = {5, 3, 5};
  ModelConfig c6 = c3;
  c6.classes_per_species = {5, 3, 5, 5, 3, 5};
  const ParamReport a = CkspModel(c3).param_report(), b = CkspModel(c6).param_report();
  EXPECT_EQ(a.shared_trunk, b.shared_trunk);
  std::size_t sa = 0, sb = 0;
  for (std::size_t s = 0; s < 3; ++s) sa += a.branch[s] + a.sbn_affine[s] + a.head[s];
  for (std::size_t s = 0; s < 6; ++s) sb += b.branch[s] + b.sbn_affine[s] + b.head[s];
  EXPECT_EQ(sb, 2 * sa);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  CkspModel model(small_config(13));
  randomize_branches(model, 4);
  {
    Tape tape;
    model.forward(tape, tape.constant(random_tensor({6, 3, 1, 50}, 1)), three_species(2), Mode::Training);
  }
  const auto path = std::filesystem::temp_directory_path() / "cksp_model_roundtrip.json";
  save_checkpoint(model, path, {{"note", "x"}});
  CkspModel loaded = load_checkpoint(path);
  std::map<std::string, std::vector<double>> a, b;
  model.visit_parameters([&](const std::string& p, Tensor& t, ParamKind) { a[p] = t.values(); });
  model.visit_buffers([&](const std::string& p, Tensor& t) { a[p] = t.values(); });
  loaded.visit_parameters([&](const std::string& p, Tensor& t, ParamKind) { b[p] = t.values(); });
  loaded.visit_buffers([&](const std::string& p, Tensor& t) { b[p] = t.values(); });
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [p, v] : a) {
    ASSERT_EQ(v.size(), b.at(p).size());
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(v[i]), std::bit_cast<std::uint64_t>(b.at(p)[i])) << p;
  }
  EXPECT_TRUE(a.contains("block2.spconv.species1.B"));
  EXPECT_TRUE(a.contains("block3.bn.species2.running_var"));
  EXPECT_EQ(read_checkpoint_json(path).at("extra").at("note"), "x");
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsMismatchedArchitecture) {
  CkspModel model(small_config());
  nlohmann::json doc = checkpoint_to_json(model);
  doc["config"]["fc_units"] = 7;
  EXPECT_THROW(model_from_checkpoint(doc), CheckpointError);
  doc = checkpoint_to_json(model);
  doc["parameters"].erase("fc.bias");
  EXPECT_THROW(model_from_checkpoint(doc), CheckpointError);
  doc = checkpoint_to_json(model);
  doc["format"] = "other";
  EXPECT_THROW(model_from_checkpoint(doc), CheckpointError);
}
