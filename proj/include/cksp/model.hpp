#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cksp/ops.hpp"
#include "cksp/preprocessing.hpp"
#include "cksp/tape.hpp"
#include "cksp/tensor.hpp"

namespace cksp {

enum class Mode { Training, Inference };
enum class BranchKind { LowRank, FullRank };
enum class Activation { Relu, LeakyRelu };

/// Architecture and initialization settings. Every species gets its own
/// classifier head with `classes_per_species[s]` outputs.
struct ModelConfig {
  std::vector<std::size_t> classes_per_species;
  std::size_t in_channels = 3;
  std::size_t input_length = 50;
  std::size_t stem_channels = 16;
  std::vector<std::size_t> block_channels{32, 64, 128};
  std::size_t fc_units = 64;
  std::size_t rank = 12;
  double lowrank_sigma = 0.02;
  double head_init_scale = 0.1;  // multiplies the sqrt(1/fc_units) head std
  bool use_spconv = true;
  bool use_sbn = true;
  BranchKind branch = BranchKind::LowRank;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
  Activation activation = Activation::Relu;
  std::size_t pool_window = 2;
  std::size_t pool_stride = 2;
  std::uint64_t seed = 0;

  std::size_t num_species() const { return classes_per_species.size(); }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"classes_per_species", c.classes_per_species},
                     {"in_channels", c.in_channels},
                     {"input_length", c.input_length},
                     {"stem_channels", c.stem_channels},
                     {"block_channels", c.block_channels},
                     {"fc_units", c.fc_units},
                     {"rank", c.rank},
                     {"lowrank_sigma", c.lowrank_sigma},
                     {"head_init_scale", c.head_init_scale},
                     {"use_spconv", c.use_spconv},
                     {"use_sbn", c.use_sbn},
                     {"branch", c.branch == BranchKind::LowRank ? "lowrank" : "fullrank"},
                     {"bn_eps", c.bn_eps},
                     {"bn_momentum", c.bn_momentum},
                     {"activation", c.activation == Activation::Relu ? "relu" : "leaky_relu"},
                     {"pool_window", c.pool_window},
                     {"pool_stride", c.pool_stride},
                     {"seed", c.seed}};
}

/// Missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  auto get = [&](const char* key, auto& dst) {
    if (j.contains(key)) j.at(key).get_to(dst);
  };
  get("classes_per_species", c.classes_per_species);
  get("in_channels", c.in_channels);
  get("input_length", c.input_length);
  get("stem_channels", c.stem_channels);
  get("block_channels", c.block_channels);
  get("fc_units", c.fc_units);
  get("rank", c.rank);
  get("lowrank_sigma", c.lowrank_sigma);
  get("head_init_scale", c.head_init_scale);
  get("use_spconv", c.use_spconv);
  get("use_sbn", c.use_sbn);
  get("bn_eps", c.bn_eps);
  get("bn_momentum", c.bn_momentum);
  get("pool_window", c.pool_window);
  get("pool_stride", c.pool_stride);
  get("seed", c.seed);
  if (j.contains("branch")) {
    const auto b = j.at("branch").get<std::string>();
    if (b == "lowrank") c.branch = BranchKind::LowRank;
    else if (b == "fullrank") c.branch = BranchKind::FullRank;
    else throw std::invalid_argument("unknown branch kind '" + b + "' (expected lowrank|fullrank)");
  }
  if (j.contains("activation")) {
    const auto a = j.at("activation").get<std::string>();
    if (a == "relu") c.activation = Activation::Relu;
    else if (a == "leaky_relu") c.activation = Activation::LeakyRelu;
    else throw std::invalid_argument("unknown activation '" + a + "' (expected relu|leaky_relu)");
  }
}

/// Contiguous rows [begin, end) of a batch belonging to one species.
struct Segment {
  std::size_t species = 0;
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
};

enum class ParamKind { ConvWeight, LowRankFactor, FullRankBranch, FcWeight, Bias, BnAffine };

/// Weight decay applies to convolution and fully connected weights only.
inline bool decays(ParamKind k) {
  return k == ParamKind::ConvWeight || k == ParamKind::LowRankFactor || k == ParamKind::FullRankBranch ||
         k == ParamKind::FcWeight;
}

namespace detail {

inline Tensor gaussian(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = dist(rng);
  return t;
}

inline Tensor trainable(Tensor t) {
  t.set_requires_grad(true);
  return t;
}

inline Var activate(const Var& x, Activation a) {
  if (a == Activation::Relu) return ops::relu(x);
  // leaky ReLU as relu(x) + 0.01 * (x - relu(x))
  Var r = ops::relu(x);
  return ops::add(ops::scale(r, 0.99), ops::scale(x, 0.01));
}

inline void check_segments(const std::vector<Segment>& segments, std::size_t batch, std::size_t num_species) {
  if (segments.empty()) throw std::invalid_argument("forward: no species segments");
  std::size_t pos = 0;
  for (const Segment& s : segments) {
    if (s.species >= num_species) {
      throw std::out_of_range("unknown species id " + std::to_string(s.species));
    }
    if (s.begin != pos || s.end <= s.begin) {
      throw std::invalid_argument("forward: segments must be non-empty, contiguous and ordered");
    }
    pos = s.end;
  }
  if (pos != batch) throw std::invalid_argument("forward: segments do not cover the batch");
}

}  // namespace detail

/// Low-rank species branch: kernel = reshape(B A) with B [(3 c_out), r]
/// initialised to zero and A [r, c_in] drawn from N(0, sigma^2).
struct LowRankConvParams {
  Tensor B;
  Tensor A;
  std::size_t rank = 0;
  double sigma = 0.0;

  static LowRankConvParams create(std::size_t c_in, std::size_t c_out, std::size_t rank, double sigma,
                                  std::mt19937_64& rng) {
    const std::size_t bound = std::min(3 * c_out, c_in);
    if (rank == 0 || rank > bound) {
      throw std::invalid_argument("low-rank branch rank " + std::to_string(rank) + " must be in [1, min(3*" +
                                  std::to_string(c_out) + ", " + std::to_string(c_in) + ")] = [1, " +
                                  std::to_string(bound) + "]");
    }
    if (!(sigma > 0.0)) throw std::invalid_argument("low-rank sigma must be positive");
    LowRankConvParams p;
    p.B = detail::trainable(Tensor({3 * c_out, rank}));
    p.A = detail::trainable(detail::gaussian({rank, c_in}, sigma, rng));
    p.rank = rank;
    p.sigma = sigma;
    return p;
  }

  std::size_t c_out() const { return B.dim(0) / 3; }
  std::size_t c_in() const { return A.dim(1); }
  std::size_t num_params() const { return B.numel() + A.numel(); }

  /// The materialized kernel [c_out,3,1,c_in] (no tape).
  Tensor kernel() const {
    Tape tape;
    Var k = ops::matmul(tape.constant(B), tape.constant(A));
    return k.value().reshaped({c_out(), 3, 1, c_in()});
  }
};

/// conv1x3 with kernel reshape(B A) and no bias.
inline Var lrconv_forward(Tape& tape, const Var& x, LowRankConvParams& p, std::size_t stride = 1,
                          std::size_t padding = 1) {
  Var ba = ops::matmul(tape.leaf(p.B), tape.leaf(p.A));
  Var kernel = ops::reshape(ba, {p.c_out(), 3, 1, p.c_in()});
  return ops::conv1x3(x, kernel, std::nullopt, stride, padding);
}

/// Shared full-rank 1x3 convolution plus optional per-species branches whose
/// outputs are added to the shared output.
class SpconvLayer {
 public:
  SpconvLayer() = default;
  SpconvLayer(std::size_t c_in, std::size_t c_out, std::size_t num_species, bool with_branches, BranchKind kind,
              std::size_t rank, double sigma, std::mt19937_64& shared_rng, std::mt19937_64& branch_rng)
      : c_in_(c_in), c_out_(c_out), kind_(kind) {
    weight = detail::trainable(detail::gaussian({c_out, 3, 1, c_in}, std::sqrt(2.0 / (3.0 * static_cast<double>(c_in))), shared_rng));
    bias = detail::trainable(Tensor({c_out}));
    if (!with_branches) return;
    for (std::size_t s = 0; s < num_species; ++s) {
      if (kind == BranchKind::LowRank) {
        lowrank.push_back(LowRankConvParams::create(c_in, c_out, rank, sigma, branch_rng));
      } else {
        fullrank.push_back(detail::trainable(Tensor({c_out, 3, 1, c_in})));
      }
    }
  }

  bool has_branches() const { return !lowrank.empty() || !fullrank.empty(); }
  std::size_t num_branches() const { return kind_ == BranchKind::LowRank ? lowrank.size() : fullrank.size(); }
  BranchKind kind() const { return kind_; }
  std::size_t c_in() const { return c_in_; }
  std::size_t c_out() const { return c_out_; }

  Var shared_forward(Tape& tape, const Var& x) {
    return ops::conv1x3(x, tape.leaf(weight), tape.leaf(bias), 1, 1);
  }

  Var branch_forward(Tape& tape, const Var& x, std::size_t species) {
    if (species >= num_branches()) throw std::out_of_range("unknown species id " + std::to_string(species));
    if (kind_ == BranchKind::LowRank) return lrconv_forward(tape, x, lowrank[species], 1, 1);
    return ops::conv1x3(x, tape.leaf(fullrank[species]), std::nullopt, 1, 1);
  }

  Var forward(Tape& tape, const Var& x, const std::vector<Segment>& segments) {
    Var shared = shared_forward(tape, x);
    if (!has_branches()) return shared;
    std::vector<Var> parts;
    for (const Segment& seg : segments) {
      Var xs = segments.size() == 1 ? x : ops::slice_rows(x, seg.begin, seg.end);
      parts.push_back(branch_forward(tape, xs, seg.species));
    }
    Var branch = parts.size() == 1 ? parts.front() : ops::concat_rows(parts);
    return ops::add(shared, branch);
  }

  /// The species-specific kernel added to the shared one.
  Tensor branch_kernel(std::size_t species) const {
    if (kind_ == BranchKind::LowRank) return lowrank.at(species).kernel();
    return fullrank.at(species);
  }

  Tensor weight;
  Tensor bias;
  std::vector<LowRankConvParams> lowrank;
  std::vector<Tensor> fullrank;

 private:
  std::size_t c_in_ = 0;
  std::size_t c_out_ = 0;
  BranchKind kind_ = BranchKind::LowRank;
};

struct BnState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;

  explicit BnState(std::size_t channels = 1)
      : gamma(detail::trainable(Tensor({channels}, 1.0))),
        beta(detail::trainable(Tensor({channels}, 0.0))),
        running_mean({channels}, 0.0),
        running_var({channels}, 1.0) {}
};

/// Batch normalization with either one shared state or one state per
/// species. Species states only ever see their own species' rows.
class SbnLayer {
 public:
  SbnLayer() = default;
  SbnLayer(std::size_t channels, std::size_t num_species, bool per_species, double eps, double momentum)
      : eps_(eps), momentum_(momentum), per_species_(per_species), num_species_(num_species) {
    if (!(momentum > 0.0 && momentum < 1.0)) throw std::invalid_argument("BN momentum must be in (0,1)");
    if (!(eps > 0.0)) throw std::invalid_argument("BN epsilon must be positive");
    states.assign(per_species ? num_species : 1, BnState(channels));
  }

  bool per_species() const { return per_species_; }
  double eps() const { return eps_; }
  double momentum() const { return momentum_; }

  BnState& state_for(std::size_t species) {
    if (species >= num_species_) throw std::out_of_range("unknown species id " + std::to_string(species));
    return states[per_species_ ? species : 0];
  }

  /// Normalize rows of one state; in training mode also folds the batch
  /// statistics into that state's running averages.
  Var normalize(Tape& tape, const Var& x, BnState& st, Mode mode) {
    if (mode == Mode::Inference) {
      return ops::batch_norm_eval(x, tape.leaf(st.gamma), tape.leaf(st.beta), st.running_mean.data(),
                                  st.running_var.data(), eps_);
    }
    auto r = ops::batch_norm_train(x, tape.leaf(st.gamma), tape.leaf(st.beta), eps_);
    const double n = static_cast<double>(r.stats.count);
    for (std::size_t c = 0; c < st.running_mean.numel(); ++c) {
      const double unbiased = n > 1.0 ? r.stats.variance[c] * n / (n - 1.0) : r.stats.variance[c];
      st.running_mean[c] = (1.0 - momentum_) * st.running_mean[c] + momentum_ * r.stats.mean[c];
      st.running_var[c] = (1.0 - momentum_) * st.running_var[c] + momentum_ * unbiased;
    }
    return r.output;
  }

  Var forward(Tape& tape, const Var& x, const std::vector<Segment>& segments, Mode mode) {
    if (!per_species_) {
      for (const Segment& seg : segments) state_for(seg.species);
      return normalize(tape, x, states[0], mode);
    }
    std::vector<Var> parts;
    for (const Segment& seg : segments) {
      Var xs = segments.size() == 1 ? x : ops::slice_rows(x, seg.begin, seg.end);
      parts.push_back(normalize(tape, xs, state_for(seg.species), mode));
    }
    return parts.size() == 1 ? parts.front() : ops::concat_rows(parts);
  }

  std::vector<BnState> states;

 private:
  double eps_ = 1e-5;
  double momentum_ = 0.1;
  bool per_species_ = false;
  std::size_t num_species_ = 0;
};

struct ParamReport {
  std::size_t shared_trunk = 0;             // stem, shared convs, FC, shared BN affines
  std::vector<std::size_t> branch;          // per species, SPConv branch params
  std::vector<std::size_t> sbn_affine;      // per species, species-specific BN affines
  std::vector<std::size_t> head;            // per species, classifier head
  std::size_t branch_total = 0;             // all species
  std::size_t fullrank_branch_total = 0;    // what full-rank branches would cost, all species
  std::size_t total = 0;

  bool lowrank_smaller_than_fullrank() const { return branch_total < fullrank_branch_total; }
};

struct ForwardOutput {
  std::vector<Var> logits;  // one [b_s, k_s] tensor per segment
  Var features;             // [B, fc_units] trunk output
};

/// Shared stem (plain conv + shared BN), stacked SPConv+SBN blocks with max
/// pooling, global average pooling, FC + SBN, and one linear head per species.
class CkspModel {
 public:
  struct Block {
    SpconvLayer conv;
    SbnLayer bn;
  };

  struct Head {
    Tensor weight;
    Tensor bias;
  };

  explicit CkspModel(ModelConfig config) : config_(std::move(config)) {
    const std::size_t S = config_.num_species();
    if (S == 0) throw std::invalid_argument("model needs at least one species");
    for (std::size_t k : config_.classes_per_species) {
      if (k < 2) throw std::invalid_argument("every species needs at least two classes");
    }
    if (config_.block_channels.empty()) throw std::invalid_argument("model needs at least one SPConv block");
    if (!(config_.head_init_scale > 0.0)) throw std::invalid_argument("head_init_scale must be positive");
    std::size_t width = config_.input_length;
    for (std::size_t i = 0; i <= config_.block_channels.size(); ++i) {
      if (width < config_.pool_window) {
        throw std::invalid_argument("input length " + std::to_string(config_.input_length) +
                                    " is too short for the configured pooling depth");
      }
      width = (width - config_.pool_window) / config_.pool_stride + 1;
    }
    std::mt19937_64 shared_rng(config_.seed);
    std::mt19937_64 branch_rng(config_.seed ^ 0x9E3779B97F4A7C15ULL);

    stem_conv_ = SpconvLayer(config_.in_channels, config_.stem_channels, S, false, config_.branch, config_.rank,
                             config_.lowrank_sigma, shared_rng, branch_rng);
    stem_bn_ = SbnLayer(config_.stem_channels, S, false, config_.bn_eps, config_.bn_momentum);
    std::size_t c_in = config_.stem_channels;
    for (std::size_t c_out : config_.block_channels) {
      Block b;
      b.conv = SpconvLayer(c_in, c_out, S, config_.use_spconv, config_.branch, config_.rank, config_.lowrank_sigma,
                           shared_rng, branch_rng);
      b.bn = SbnLayer(c_out, S, config_.use_sbn, config_.bn_eps, config_.bn_momentum);
      blocks_.push_back(std::move(b));
      c_in = c_out;
    }
    fc_weight_ = detail::trainable(
        detail::gaussian({config_.fc_units, c_in}, std::sqrt(2.0 / static_cast<double>(c_in)), shared_rng));
    fc_bias_ = detail::trainable(Tensor({config_.fc_units}));
    fc_bn_ = SbnLayer(config_.fc_units, S, config_.use_sbn, config_.bn_eps, config_.bn_momentum);
    for (std::size_t s = 0; s < S; ++s) {
      Head h;
      h.weight = detail::trainable(detail::gaussian({config_.classes_per_species[s], config_.fc_units},
                                                    config_.head_init_scale * std::sqrt(1.0 / static_cast<double>(config_.fc_units)),
                                                    branch_rng));
      h.bias = detail::trainable(Tensor({config_.classes_per_species[s]}));
      heads_.push_back(std::move(h));
    }
  }

  const ModelConfig& config() const { return config_; }
  std::size_t num_species() const { return config_.num_species(); }

  /// Trunk features [B, fc_units] for a batch [B,3,1,L] split into species segments.
  Var trunk(Tape& tape, const Var& input, const std::vector<Segment>& segments, Mode mode) {
    const Shape& s = input.shape();
    if (s.size() != 4 || s[1] != config_.in_channels || s[2] != 1 || s[3] != config_.input_length) {
      throw ShapeError("model input must be [b," + std::to_string(config_.in_channels) + ",1," +
                       std::to_string(config_.input_length) + "], got " + shape_str(s));
    }
    detail::check_segments(segments, s[0], num_species());
    if (mode == Mode::Training) {
      for (const Segment& seg : segments) {
        if (seg.size() < 2) {
          throw std::invalid_argument("training-mode forward needs at least 2 samples for species " +
                                      std::to_string(seg.species));
        }
      }
    }
    const Activation act = config_.activation;
    Var h = stem_conv_.forward(tape, input, segments);
    h = stem_bn_.forward(tape, h, segments, mode);
    h = ops::maxpool1d(detail::activate(h, act), config_.pool_window, config_.pool_stride);
    for (Block& b : blocks_) {
      h = b.conv.forward(tape, h, segments);
      h = b.bn.forward(tape, h, segments, mode);
      h = ops::maxpool1d(detail::activate(h, act), config_.pool_window, config_.pool_stride);
    }
    h = ops::global_avg_pool(h);
    h = ops::fully_connected(h, tape.leaf(fc_weight_), tape.leaf(fc_bias_));
    h = fc_bn_.forward(tape, h, segments, mode);
    return detail::activate(h, act);
  }

  ForwardOutput forward(Tape& tape, const Var& input, const std::vector<Segment>& segments, Mode mode) {
    ForwardOutput out;
    out.features = trunk(tape, input, segments, mode);
    for (const Segment& seg : segments) {
      Var f = segments.size() == 1 ? out.features : ops::slice_rows(out.features, seg.begin, seg.end);
      Head& head = heads_[seg.species];
      out.logits.push_back(ops::fully_connected(f, tape.leaf(head.weight), tape.leaf(head.bias)));
    }
    return out;
  }

  void visit_parameters(const std::function<void(const std::string&, Tensor&, ParamKind)>& fn) {
    fn("block0.conv.weight", stem_conv_.weight, ParamKind::ConvWeight);
    fn("block0.conv.bias", stem_conv_.bias, ParamKind::Bias);
    visit_bn("block0.bn", stem_bn_, fn);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string p = "block" + std::to_string(i + 1);
      Block& b = blocks_[i];
      fn(p + ".spconv.shared.weight", b.conv.weight, ParamKind::ConvWeight);
      fn(p + ".spconv.shared.bias", b.conv.bias, ParamKind::Bias);
      for (std::size_t s = 0; s < b.conv.lowrank.size(); ++s) {
        fn(p + ".spconv.species" + std::to_string(s) + ".B", b.conv.lowrank[s].B, ParamKind::LowRankFactor);
        fn(p + ".spconv.species" + std::to_string(s) + ".A", b.conv.lowrank[s].A, ParamKind::LowRankFactor);
      }
      for (std::size_t s = 0; s < b.conv.fullrank.size(); ++s) {
        fn(p + ".spconv.species" + std::to_string(s) + ".weight", b.conv.fullrank[s], ParamKind::FullRankBranch);
      }
      visit_bn(p + ".bn", b.bn, fn);
    }
    fn("fc.weight", fc_weight_, ParamKind::FcWeight);
    fn("fc.bias", fc_bias_, ParamKind::Bias);
    visit_bn("fc.bn", fc_bn_, fn);
    for (std::size_t s = 0; s < heads_.size(); ++s) {
      fn("head.species" + std::to_string(s) + ".weight", heads_[s].weight, ParamKind::FcWeight);
      fn("head.species" + std::to_string(s) + ".bias", heads_[s].bias, ParamKind::Bias);
    }
  }

  /// Running statistics (not trained by gradient).
  void visit_buffers(const std::function<void(const std::string&, Tensor&)>& fn) {
    for_each_norm([&](const std::string& prefix, SbnLayer& layer) {
      for (std::size_t i = 0; i < layer.states.size(); ++i) {
        const std::string p = prefix + state_name(layer, i);
        fn(p + ".running_mean", layer.states[i].running_mean);
        fn(p + ".running_var", layer.states[i].running_var);
      }
    });
  }

  /// Normalization layers in depth order: block0 (stem), block1.., fc.
  void for_each_norm(const std::function<void(const std::string&, SbnLayer&)>& fn) {
    fn("block0.bn", stem_bn_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) fn("block" + std::to_string(i + 1) + ".bn", blocks_[i].bn);
    fn("fc.bn", fc_bn_);
  }

  void zero_grad() {
    visit_parameters([](const std::string&, Tensor& t, ParamKind) { t.zero_grad(); });
  }

  std::size_t num_parameters() {
    std::size_t n = 0;
    visit_parameters([&](const std::string&, Tensor& t, ParamKind) { n += t.numel(); });
    return n;
  }

  ParamReport param_report() const {
    const std::size_t S = num_species();
    ParamReport r;
    r.branch.assign(S, 0);
    r.sbn_affine.assign(S, 0);
    r.head.assign(S, 0);
    r.shared_trunk += stem_conv_.weight.numel() + stem_conv_.bias.numel();
    auto count_bn = [&](const SbnLayer& bn) {
      const std::size_t per_state = bn.states.front().gamma.numel() * 2;
      if (bn.per_species()) {
        for (std::size_t s = 0; s < S; ++s) r.sbn_affine[s] += per_state;
      } else {
        r.shared_trunk += per_state;
      }
    };
    count_bn(stem_bn_);
    for (const Block& b : blocks_) {
      r.shared_trunk += b.conv.weight.numel() + b.conv.bias.numel();
      for (std::size_t s = 0; s < b.conv.lowrank.size(); ++s) r.branch[s] += b.conv.lowrank[s].num_params();
      for (std::size_t s = 0; s < b.conv.fullrank.size(); ++s) r.branch[s] += b.conv.fullrank[s].numel();
      if (b.conv.has_branches()) r.fullrank_branch_total += S * 3 * b.conv.c_in() * b.conv.c_out();
      count_bn(b.bn);
    }
    r.shared_trunk += fc_weight_.numel() + fc_bias_.numel();
    count_bn(fc_bn_);
    for (std::size_t s = 0; s < S; ++s) r.head[s] = heads_[s].weight.numel() + heads_[s].bias.numel();
    r.total = r.shared_trunk;
    for (std::size_t s = 0; s < S; ++s) {
      r.branch_total += r.branch[s];
      r.total += r.branch[s] + r.sbn_affine[s] + r.head[s];
    }
    return r;
  }

  SpconvLayer& stem_conv() { return stem_conv_; }
  SbnLayer& stem_bn() { return stem_bn_; }
  std::vector<Block>& blocks() { return blocks_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  SbnLayer& fc_bn() { return fc_bn_; }
  Head& head(std::size_t s) { return heads_.at(s); }

 private:
  static std::string state_name(const SbnLayer& layer, std::size_t i) {
    return layer.per_species() ? ".species" + std::to_string(i) : ".shared";
  }

  void visit_bn(const std::string& prefix, SbnLayer& layer,
                const std::function<void(const std::string&, Tensor&, ParamKind)>& fn) {
    for (std::size_t i = 0; i < layer.states.size(); ++i) {
      const std::string p = prefix + state_name(layer, i);
      fn(p + ".gamma", layer.states[i].gamma, ParamKind::BnAffine);
      fn(p + ".beta", layer.states[i].beta, ParamKind::BnAffine);
    }
  }

  ModelConfig config_;
  SpconvLayer stem_conv_;
  SbnLayer stem_bn_;
  std::vector<Block> blocks_;
  Tensor fc_weight_;
  Tensor fc_bias_;
  SbnLayer fc_bn_;
  std::vector<Head> heads_;
};

/// Segments for a batch whose rows are already grouped by species.
inline std::vector<Segment> segments_from_species(const std::vector<std::size_t>& row_species) {
  std::vector<Segment> out;
  for (std::size_t i = 0; i < row_species.size(); ++i) {
    if (!out.empty() && out.back().species == row_species[i]) {
      out.back().end = i + 1;
    } else {
      out.push_back({row_species[i], i, i + 1});
    }
  }
  return out;
}

inline Var spconv_forward(Tape& tape, const Var& x, std::size_t species, SpconvLayer& layer) {
  Var shared = layer.shared_forward(tape, x);
  if (!layer.has_branches()) return shared;
  return ops::add(shared, layer.branch_forward(tape, x, species));
}

inline Var sbn_forward(Tape& tape, const Var& x, std::size_t species, SbnLayer& layer, Mode mode) {
  return layer.normalize(tape, x, layer.state_for(species), mode);
}

/// Stack windows (already grouped by species) into a [B,3,1,L] tensor.
inline Tensor stack_windows(const std::vector<const SampleWindow*>& windows) {
  if (windows.empty()) throw std::invalid_argument("cannot stack an empty batch");
  const Shape& s = windows.front()->data.shape();
  if (s.size() != 3 || s[0] != 1) throw ShapeError("window must be [1,c,L], got " + shape_str(s));
  const std::size_t per = s[1] * s[2];
  std::vector<double> values;
  values.reserve(per * windows.size());
  for (const SampleWindow* w : windows) {
    if (w->data.shape() != s) throw ShapeError("windows in a batch differ in shape");
    values.insert(values.end(), w->data.data().begin(), w->data.data().end());
  }
  return Tensor({windows.size(), s[1], 1, s[2]}, std::move(values));
}

/// Windows must be grouped by species; returns logits keyed by species id.
inline std::map<std::size_t, Var> forward_windows(Tape& tape, CkspModel& model,
                                                  const std::vector<const SampleWindow*>& windows, Mode mode) {
  std::vector<std::size_t> ids;
  for (const SampleWindow* w : windows) ids.push_back(w->species_id);
  const auto segments = segments_from_species(ids);
  for (std::size_t i = 0; i < segments.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (segments[j].species == segments[i].species) {
        throw std::invalid_argument("batch windows are not grouped by species");
      }
    }
  }
  ForwardOutput out = model.forward(tape, tape.constant(stack_windows(windows)), segments, mode);
  std::map<std::size_t, Var> result;
  for (std::size_t i = 0; i < segments.size(); ++i) result.emplace(segments[i].species, out.logits[i]);
  return result;
}

/// Copy of `base` with the species-specific components switched on or off.
inline ModelConfig ablation_variant(ModelConfig base, bool use_spconv, bool use_sbn,
                                    BranchKind branch = BranchKind::LowRank) {
  base.use_spconv = use_spconv;
  base.use_sbn = use_sbn;
  base.branch = branch;
  return base;
}

}  // namespace cksp
