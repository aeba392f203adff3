#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "cksp/batching.hpp"
#include "cksp/grad_check.hpp"
#include "cksp/loss.hpp"
#include "cksp/model.hpp"
#include "cksp/ops.hpp"

namespace cksp {

struct GradCheckEntry {
  std::string name;
  GradCheckReport report;
};

struct GradCheckSuiteResult {
  std::vector<GradCheckEntry> entries;

  bool passed() const {
    for (const auto& e : entries)
      if (!e.report.passed()) return false;
    return !entries.empty();
  }
  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.report.max_rel_error);
    return m;
  }
};

namespace detail {

inline Tensor suite_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

// Fixed non-uniform weights so each output element gets its own gradient.
inline Var suite_probe(Tape& tape, const Var& y) {
  Tensor w(y.shape());
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = std::sin(0.7 * static_cast<double>(i) + 0.3);
  return ops::sum(ops::mul(y, tape.constant(w)));
}

}  // namespace detail

/// A tiny CKSP model on a 6-window batch (two windows for each of three
/// species) with randomized species branches and BN affines, so that every
/// parameter receives a non-trivial gradient.
inline GradCheckReport end_to_end_grad_check(double step = 1e-5, double tol = 1e-4, std::uint64_t seed = 1) {
  ModelConfig cfg;
  cfg.classes_per_species = {5, 3, 5};
  cfg.stem_channels = 3;
  cfg.block_channels = {4, 4, 4};
  cfg.fc_units = 4;
  cfg.rank = 2;
  cfg.head_init_scale = 1.0;
  cfg.seed = seed;
  CkspModel model(cfg);
  std::mt19937_64 rng(mix_seed(seed, 1));
  std::normal_distribution<double> n(0.0, 0.3);
  model.visit_parameters([&](const std::string&, Tensor& t, ParamKind k) {
    if (k == ParamKind::LowRankFactor || k == ParamKind::FullRankBranch || k == ParamKind::BnAffine) {
      for (double& v : t.values()) v += n(rng);
    }
  });
  const Tensor x = detail::suite_tensor({6, 3, 1, cfg.input_length}, mix_seed(seed, 2));
  const std::vector<Segment> segments{{0, 0, 2}, {1, 2, 4}, {2, 4, 6}};
  const std::vector<std::vector<std::size_t>> labels{{0, 3}, {2, 1}, {4, 0}};
  std::vector<std::vector<double>> weights;
  for (std::size_t k : cfg.classes_per_species) {
    std::vector<std::size_t> counts(k);
    for (std::size_t c = 0; c < k; ++c) counts[c] = 10 + 7 * c;
    weights.push_back(class_balanced_weights(counts, 0.999, true));
  }
  std::vector<NamedParam> params;
  model.visit_parameters([&](const std::string& p, Tensor& t, ParamKind) { params.push_back({p, &t}); });
  return grad_check_params(
      [&](Tape& tape) {
        ForwardOutput out = model.forward(tape, tape.constant(x), segments, Mode::Training);
        std::map<std::size_t, Var> losses;
        for (std::size_t s = 0; s < segments.size(); ++s) {
          losses.emplace(s, cb_focal_loss(out.logits[s], labels[s], weights[s], 2.0));
        }
        return total_loss(losses, segments.size());
      },
      params, step, tol);
}

/// Central-difference check of every differentiable operator, the layer
/// building blocks, and the full model plus species-averaged loss.
inline GradCheckSuiteResult run_gradcheck_suite(double step = 1e-5, double tol = 1e-4) {
  using detail::suite_probe;
  using detail::suite_tensor;
  GradCheckSuiteResult result;
  auto check = [&](const std::string& name, const ScalarFunction& f, const Tensor& at) {
    result.entries.push_back({name, grad_check(f, at, step, tol)});
  };
  auto merge = [&](const std::string& name, std::vector<std::pair<ScalarFunction, Tensor>> cases) {
    GradCheckReport total;
    for (auto& [f, at] : cases) {
      GradCheckReport r = grad_check(f, at, step, tol);
      total.checked += r.checked;
      total.max_rel_error = std::max(total.max_rel_error, r.max_rel_error);
      total.max_abs_error = std::max(total.max_abs_error, r.max_abs_error);
      total.failures.insert(total.failures.end(), r.failures.begin(), r.failures.end());
    }
    result.entries.push_back({name, std::move(total)});
  };

  const Tensor a = suite_tensor({4, 3}, 1), b = suite_tensor({4, 3}, 2);
  merge("add", {{[&](Tape& t, const Var& v) { return suite_probe(t, ops::add(v, t.constant(b))); }, a},
                {[&](Tape& t, const Var& v) { return suite_probe(t, ops::add(t.constant(a), v)); }, b}});
  merge("mul", {{[&](Tape& t, const Var& v) { return suite_probe(t, ops::mul(v, t.constant(b))); }, a},
                {[&](Tape& t, const Var& v) { return suite_probe(t, ops::mul(t.constant(a), v)); }, b}});
  check("affine", [](Tape& t, const Var& v) { return suite_probe(t, ops::affine(v, -1.7, 0.4)); }, a);
  check("exp", [](Tape& t, const Var& v) { return suite_probe(t, ops::exp(v)); }, a);
  check("pow", [](Tape& t, const Var& v) { return suite_probe(t, ops::pow(ops::affine(v, 1.0, 2.0), 2.5)); }, a);
  check("relu", [](Tape& t, const Var& v) { return suite_probe(t, ops::relu(v)); }, a);
  check("sum", [](Tape&, const Var& v) { return ops::sum(ops::mul(v, v)); }, a);
  check("mean", [](Tape&, const Var& v) { return ops::mean(ops::mul(v, v)); }, a);

  const Tensor r4 = suite_tensor({4, 2, 1, 3}, 3);
  check("reshape", [](Tape& t, const Var& v) { return suite_probe(t, ops::reshape(v, {8, 3})); }, r4);
  check("slice_rows", [](Tape& t, const Var& v) { return suite_probe(t, ops::slice_rows(v, 1, 3)); }, r4);
  check("concat_rows",
        [](Tape& t, const Var& v) {
          return suite_probe(t, ops::concat_rows({ops::slice_rows(v, 2, 4), ops::slice_rows(v, 0, 2)}));
        },
        r4);

  const Tensor ma = suite_tensor({3, 4}, 4), mb = suite_tensor({4, 2}, 5);
  merge("matmul", {{[&](Tape& t, const Var& v) { return suite_probe(t, ops::matmul(v, t.constant(mb))); }, ma},
                   {[&](Tape& t, const Var& v) { return suite_probe(t, ops::matmul(t.constant(ma), v)); }, mb}});

  const Tensor fx = suite_tensor({3, 5}, 6), fw = suite_tensor({4, 5}, 7), fb = suite_tensor({4}, 8);
  merge("fully_connected",
        {{[&](Tape& t, const Var& v) { return suite_probe(t, ops::fully_connected(v, t.constant(fw), t.constant(fb))); }, fx},
         {[&](Tape& t, const Var& v) { return suite_probe(t, ops::fully_connected(t.constant(fx), v, t.constant(fb))); }, fw},
         {[&](Tape& t, const Var& v) { return suite_probe(t, ops::fully_connected(t.constant(fx), t.constant(fw), v)); }, fb}});

  const Tensor cx = suite_tensor({2, 2, 1, 9}, 9), cw = suite_tensor({3, 3, 1, 2}, 10), cb = suite_tensor({3}, 11);
  merge("conv1x3",
        {{[&](Tape& t, const Var& v) { return suite_probe(t, ops::conv1x3(v, t.constant(cw), t.constant(cb), 1, 1)); }, cx},
         {[&](Tape& t, const Var& v) { return suite_probe(t, ops::conv1x3(v, t.constant(cw), t.constant(cb), 2, 0)); }, cx},
         {[&](Tape& t, const Var& v) { return suite_probe(t, ops::conv1x3(t.constant(cx), v, t.constant(cb), 1, 1)); }, cw},
         {[&](Tape& t, const Var& v) { return suite_probe(t, ops::conv1x3(t.constant(cx), t.constant(cw), v, 1, 1)); }, cb}});

  const Tensor px = suite_tensor({2, 3, 1, 10}, 12);
  check("maxpool1d", [](Tape& t, const Var& v) { return suite_probe(t, ops::maxpool1d(v, 2, 2)); }, px);
  check("global_avg_pool", [](Tape& t, const Var& v) { return suite_probe(t, ops::global_avg_pool(v)); }, px);

  const Tensor lx = suite_tensor({4, 3}, 13);
  check("log_softmax", [](Tape& t, const Var& v) { return suite_probe(t, ops::log_softmax(v)); }, lx);
  check("gather_rows", [](Tape& t, const Var& v) { return suite_probe(t, ops::gather_rows(v, {2, 0, 1, 1})); }, lx);

  const Tensor bx = suite_tensor({8, 3, 1, 5}, 14), bg = suite_tensor({3}, 15), bb = suite_tensor({3}, 16);
  merge("batch_norm_train",
        {{[&](Tape& t, const Var& v) { return suite_probe(t, ops::batch_norm_train(v, t.constant(bg), t.constant(bb), 1e-5).output); }, bx},
         {[&](Tape& t, const Var& v) { return suite_probe(t, ops::batch_norm_train(t.constant(bx), v, t.constant(bb), 1e-5).output); }, bg},
         {[&](Tape& t, const Var& v) { return suite_probe(t, ops::batch_norm_train(t.constant(bx), t.constant(bg), v, 1e-5).output); }, bb}});
  const std::vector<double> mu{0.1, -0.2}, var{0.5, 1.5};
  const Tensor ex = suite_tensor({3, 2, 1, 4}, 17), eg = suite_tensor({2}, 18);
  merge("batch_norm_eval",
        {{[&](Tape& t, const Var& v) { return suite_probe(t, ops::batch_norm_eval(v, t.constant(eg), t.constant(Tensor({2})), mu, var, 1e-5)); }, ex},
         {[&](Tape& t, const Var& v) { return suite_probe(t, ops::batch_norm_eval(t.constant(ex), v, t.constant(Tensor({2})), mu, var, 1e-5)); }, eg}});

  const std::vector<std::size_t> labels{2, 0, 1, 1};
  const std::vector<double> weights{0.7, 1.4, 0.9};
  check("cb_focal_loss", [&](Tape&, const Var& v) { return cb_focal_loss(v, labels, weights, 2.0); }, lx);

  {
    std::mt19937_64 rng(19);
    LowRankConvParams p = LowRankConvParams::create(3, 2, 2, 0.5, rng);
    p.B = suite_tensor({6, 2}, 20);
    const Tensor x = suite_tensor({2, 3, 1, 7}, 21);
    result.entries.push_back({"lrconv",
                              grad_check_params([&](Tape& t) { return suite_probe(t, lrconv_forward(t, t.constant(x), p)); },
                                                {{"B", &p.B}, {"A", &p.A}}, step, tol)});
  }
  result.entries.push_back({"cksp_end_to_end", end_to_end_grad_check(step, tol)});
  return result;
}

}  // namespace cksp
