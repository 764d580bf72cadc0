#pragma once

// Multi-chain MCMC for the hierarchical model. Gaussian and variance blocks
// are Gibbs draws every iteration; the dependence parameters move by
// Metropolis-Hastings under a three-regime schedule:
//   1. one-at-a-time random-walk MH, proposal scales adapted periodically;
//   2. a joint multivariate-normal proposal for a configured block (the rest
//      stay scalar), covariance and scales adapted periodically;
//   3. the regime-2 kernels with adaptation frozen. Only regime 3 is recorded.
// tau2 moves by a random walk on log tau2 in every regime.

#include <algorithm>
#include <cstdlib>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "mvmrf/hier_model.hpp"

namespace mvmrf {

enum class JointBlock { Cross, All };

inline JointBlock parse_joint_block(const std::string& s) {
  if (s == "cross") return JointBlock::Cross;
  if (s == "all") return JointBlock::All;
  throw std::invalid_argument("joint block must be 'cross' or 'all'");
}

inline std::string to_string(JointBlock b) { return b == JointBlock::Cross ? "cross" : "all"; }

struct SamplerConfig {
  Index n_chains = 10;
  Index regime1_iters = 2500;
  Index regime2_iters = 10000;
  Index regime3_iters = 10000;
  double target_acceptance = 0.20;
  Index adapt_interval = 100;
  double adapt_gain = 1.0;
  Index thin = 10;
  JointBlock joint_block = JointBlock::Cross;
  std::uint64_t seed = 1;
  Index start_max_tries = 100000;
  double initial_dep_scale = 0.02;
  double initial_log_tau_scale = 0.1;
  double initial_log_sigma2_scale = 0.1;
  Index covariance_window = 2000;
  Index monitored_h_components = 5;
  double psrf_threshold = 1.1;
  Index threads = 0;  // 0: one per hardware thread

  void validate() const {
    if (n_chains < 1) throw std::invalid_argument("n_chains must be at least 1");
    if (regime1_iters < 0 || regime2_iters < 0 || regime3_iters < 0)
      throw std::invalid_argument("iteration counts must be non-negative");
    if (!(target_acceptance > 0.0 && target_acceptance < 1.0))
      throw std::invalid_argument("target acceptance must lie in (0, 1)");
    if (adapt_interval < 1 || thin < 1) throw std::invalid_argument("adapt_interval and thin must be positive");
    if (!(initial_dep_scale > 0.0) || !(initial_log_tau_scale > 0.0) || !(initial_log_sigma2_scale > 0.0) ||
        !(adapt_gain >= 0.0))
      throw std::invalid_argument("proposal scales must be positive");
    if (start_max_tries < 1 || covariance_window < 2) throw std::invalid_argument("invalid sampler limits");
  }
};

// ---- proposal adaptation -------------------------------------------------

/// scale * exp(gain * (observed - target)).
inline double adapt_scale(double scale, double observed, double target, double gain = 1.0) {
  return scale * std::exp(gain * (observed - target));
}

/// Scales are kept within [1e-6, 1e2] times their initial value.
inline double clamp_scale(double scale, double initial) {
  return std::clamp(scale, 1e-6 * initial, 1e2 * initial);
}

/// Empirical covariance of a window of states (rows), or nullopt when it is
/// not positive definite.
inline std::optional<Eigen::MatrixXd> empirical_covariance(const std::vector<Eigen::VectorXd>& states) {
  if (states.size() < 2) return std::nullopt;
  const Index d = states.front().size();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  for (const auto& s : states) mean += s;
  mean /= static_cast<double>(states.size());
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  for (const auto& s : states) cov += (s - mean) * (s - mean).transpose();
  cov /= static_cast<double>(states.size() - 1);
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success || llt.matrixL().toDenseMatrix().diagonal().minCoeff() <= 1e-12)
    return std::nullopt;
  return cov;
}

// ---- diagnostics -----------------------------------------------------------

/// Potential scale reduction factor sqrt(((L-1)/L W + B/L) / W). Returns
/// nullopt when the within-chain variance is zero.
inline std::optional<double> gelman_rubin(const std::vector<Eigen::VectorXd>& chains) {
  if (chains.size() < 2) throw std::invalid_argument("gelman_rubin needs at least two chains");
  const Index len = chains.front().size();
  if (len < 10) throw std::invalid_argument("gelman_rubin needs chains of length >= 10");
  for (const auto& c : chains)
    if (c.size() != len) throw std::invalid_argument("gelman_rubin needs equal-length chains");
  const auto m = static_cast<double>(chains.size());
  const auto l = static_cast<double>(len);
  Eigen::VectorXd means(chains.size());
  double w = 0.0;
  for (std::size_t c = 0; c < chains.size(); ++c) {
    means[static_cast<Index>(c)] = chains[c].mean();
    w += (chains[c].array() - means[static_cast<Index>(c)]).square().sum() / (l - 1.0);
  }
  w /= m;
  const double b = l * (means.array() - means.mean()).square().sum() / (m - 1.0);
  if (!(w > 0.0)) return std::nullopt;
  return std::sqrt(((l - 1.0) / l * w + b / l) / w);
}

// ---- chain outputs ---------------------------------------------------------

/// Named sample matrices, one row per recorded draw.
struct SampleSet {
  std::vector<std::string> names;
  std::vector<Eigen::MatrixXd> blocks;

  const Eigen::MatrixXd& get(const std::string& name) const {
    for (std::size_t k = 0; k < names.size(); ++k)
      if (names[k] == name) return blocks[k];
    throw std::invalid_argument("no sample block named '" + name + "'");
  }
  Index rows() const { return blocks.empty() ? 0 : blocks.front().rows(); }
};

struct RegimeAcceptance {
  int regime = 0;
  std::vector<std::string> blocks;
  std::vector<double> rates;
};

struct ProposalSnapshot {
  Index iteration = 0;
  int regime = 0;
  std::vector<double> scalar_scales;  // dependence, log tau2, then log sigma2 scalar blocks
  double joint_scale = 0.0;
  Eigen::MatrixXd joint_covariance;

  friend bool operator==(const ProposalSnapshot& a, const ProposalSnapshot& b) {
    return a.scalar_scales == b.scalar_scales && a.joint_scale == b.joint_scale &&
           a.joint_covariance == b.joint_covariance;
  }
};

struct ChainOutput {
  Index chain_id = 0;
  SampleSet samples;
  std::vector<RegimeAcceptance> acceptance_log;
  std::vector<ProposalSnapshot> proposal_history;
};

/// Column names of the recorded blocks, in storage order.
inline std::vector<std::string> sample_block_names() {
  return {"dependence", "tau2", "sigma2", "sigma2_b", "alpha", "beta_bar", "h_bar", "field", "log_post_dep"};
}

// ---- the MH machinery for dependence parameters ---------------------------

/// Owns the proposal state of one chain and performs the MH moves for
/// (rho, phi), tau2 and sigma2. Gaussian blocks are delegated to hier_model.
/// The joint block always carries log tau2 and log sigma2 besides the
/// configured dependence parameters.
class DependenceSampler {
public:
  DependenceSampler(const GmrfEngine& engine, const PriorSpec& prior, const SamplerConfig& config)
      : engine_(engine), prior_(prior), config_(config), p_(engine.assembler().lattice().p()) {
    const Index nd = dependence_count(p_);
    scales_.assign(static_cast<std::size_t>(nd + 2 * p_), 0.0);
    for (Index k = 0; k < nd; ++k) scales_[static_cast<std::size_t>(k)] = config.initial_dep_scale;
    for (Index j = 0; j < p_; ++j) {
      scales_[static_cast<std::size_t>(nd + j)] = config.initial_log_tau_scale;
      scales_[static_cast<std::size_t>(nd + p_ + j)] = config.initial_log_sigma2_scale;
    }
    initial_ = scales_;
    window_.assign(scales_.size() + 1, {});
    total_.assign(scales_.size() + 1, {});

    const auto names = dependence_names(p_);
    for (Index k = 0; k < nd; ++k) {
      const bool is_rho = k < p_ * (p_ - 1) / 2;
      bool member = config.joint_block == JointBlock::All || is_rho;
      if (!is_rho && config.joint_block == JointBlock::Cross) {
        const Index t = k - p_ * (p_ - 1) / 2;
        member = (t / p_) != (t % p_);
      }
      if (member) joint_members_.push_back(k);
    }
    for (Index k = nd; k < nd + 2 * p_; ++k) joint_members_.push_back(k);
    in_joint_.assign(scales_.size(), false);
    for (Index k : joint_members_) in_joint_[static_cast<std::size_t>(k)] = true;
  }

  /// Names of every MH block (dependence scalars, log tau2, log sigma2, joint).
  std::vector<std::string> block_names() const {
    auto names = dependence_names(p_);
    for (Index j = 0; j < p_; ++j) names.push_back("tau2_" + std::to_string(j + 1));
    for (Index j = 0; j < p_; ++j) names.push_back("sigma2_" + std::to_string(j + 1));
    names.push_back("joint");
    return names;
  }

  bool has_joint() const { return !joint_members_.empty(); }
  bool joint_mode() const { return joint_mode_; }
  const std::vector<Index>& joint_members() const { return joint_members_; }

  /// Switch to joint moves; the initial covariance comes from the recorded
  /// history when it is usable, otherwise from the scalar scales.
  void enter_joint_mode() {
    joint_mode_ = true;
    if (!has_joint()) return;
    const auto d = static_cast<Index>(joint_members_.size());
    joint_initial_ = 2.38 / std::sqrt(static_cast<double>(d));
    joint_scale_ = joint_initial_;
    if (auto cov = history_covariance()) {
      joint_cov_ = *cov;
    } else {
      joint_cov_ = Eigen::MatrixXd::Zero(d, d);
      const Index nd = dependence_count(p_);
      for (Index t = 0; t < d; ++t) {
        const Index k = joint_members_[static_cast<std::size_t>(t)];
        // log-scale steps become relative steps on the natural scale
        const double mag = k >= nd && !history_.empty() ? history_.back()[k] : 1.0;
        const double s = scales_[static_cast<std::size_t>(k)] * mag;
        joint_cov_(t, t) = s * s / (joint_initial_ * joint_initial_);
      }
    }
    joint_chol_ = joint_cov_.llt().matrixL();
  }

  /// One sweep of MH moves over (rho, phi), log tau2 and log sigma2. The
  /// target has every h_r integrated out, so the caller must redraw h_r
  /// afterwards for the sweep to be a valid block move.
  template <class Urbg>
  void step(const EnsembleDataset& data, ModelState& s, Urbg& rng) {
    std::normal_distribution<double> z;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const Index nd = dependence_count(p_);
    auto target = [&](const DependenceParams& dep, const Eigen::VectorXd& sigma2) {
      if (!prior_.dep_box.contains(dependence_vector(dep))) return -std::numeric_limits<double>::infinity();
      return log_marginal_variances(data, s, dep, sigma2, engine_, prior_);
    };
    double current = target(s.dep, s.sigma2);

    auto try_move = [&](const DependenceParams& dep, const Eigen::VectorXd& sigma2, double log_jacobian,
                        std::size_t block) {
      const double proposed = target(dep, sigma2);
      ++window_[block].tries;
      ++total_[block].tries;
      if (proposed > -std::numeric_limits<double>::infinity() && std::log(u(rng)) < proposed - current + log_jacobian) {
        s.dep = dep;
        s.sigma2 = sigma2;
        current = proposed;
        ++window_[block].accepts;
        ++total_[block].accepts;
      }
    };

    if (joint_mode_ && has_joint()) {
      const auto d = static_cast<Index>(joint_members_.size());
      Eigen::VectorXd zz(d);
      for (Index t = 0; t < d; ++t) zz[t] = z(rng);
      const Eigen::VectorXd step = joint_scale_ * (joint_chol_ * zz);
      Eigen::VectorXd v = state_vector(s);
      for (Index t = 0; t < d; ++t) v[joint_members_[static_cast<std::size_t>(t)]] += step[t];
      DependenceParams cand = s.dep;
      Eigen::VectorXd cand_sigma2(p_);
      from_state_vector(v, cand, cand_sigma2);
      try_move(cand, cand_sigma2, 0.0, scales_.size());
    }
    for (Index k = 0; k < nd; ++k) {
      if (joint_mode_ && in_joint_[static_cast<std::size_t>(k)]) continue;
      Eigen::VectorXd v = dependence_vector(s.dep);
      v[k] += scales_[static_cast<std::size_t>(k)] * z(rng);
      DependenceParams cand = s.dep;
      set_dependence_vector(cand, v);
      try_move(cand, s.sigma2, 0.0, static_cast<std::size_t>(k));
    }
    // random walks on the log scale carry the Jacobian x'/x
    for (Index j = 0; j < p_; ++j) {
      const auto block = static_cast<std::size_t>(nd + j);
      if (joint_mode_ && in_joint_[block]) continue;
      DependenceParams cand = s.dep;
      const double step = scales_[block] * z(rng);
      cand.tau2[j] *= std::exp(step);
      try_move(cand, s.sigma2, step, block);
    }
    for (Index j = 0; j < p_; ++j) {
      const auto block = static_cast<std::size_t>(nd + p_ + j);
      if (joint_mode_ && in_joint_[block]) continue;
      Eigen::VectorXd cand = s.sigma2;
      const double step = scales_[block] * z(rng);
      cand[j] *= std::exp(step);
      try_move(s.dep, cand, step, block);
    }
    if (record_history_) {
      history_.push_back(state_vector(s));
      if (static_cast<Index>(history_.size()) > config_.covariance_window) history_.erase(history_.begin());
    }
    last_log_target_ = current;
  }

  /// Periodic adaptation from the acceptance counts since the last call.
  void adapt() {
    for (std::size_t b = 0; b < scales_.size(); ++b) {
      if (joint_mode_ && in_joint_[b]) continue;
      if (window_[b].tries == 0) continue;
      scales_[b] = clamp_scale(adapt_scale(scales_[b], window_[b].rate(), config_.target_acceptance, config_.adapt_gain),
                               initial_[b]);
    }
    const std::size_t jb = scales_.size();
    if (joint_mode_ && has_joint() && window_[jb].tries > 0) {
      joint_scale_ = clamp_scale(
          adapt_scale(joint_scale_, window_[jb].rate(), config_.target_acceptance, config_.adapt_gain), joint_initial_);
      if (auto cov = history_covariance()) {
        joint_cov_ = *cov;
        joint_chol_ = joint_cov_.llt().matrixL();
      }
    }
    reset_window();
  }

  void reset_window() {
    for (auto& w : window_) w = {};
  }

  /// Acceptance rates accumulated since the last reset_totals().
  RegimeAcceptance totals(int regime) const {
    RegimeAcceptance out;
    out.regime = regime;
    const auto names = block_names();
    for (std::size_t b = 0; b < total_.size(); ++b) {
      if (total_[b].tries == 0) continue;
      out.blocks.push_back(names[b]);
      out.rates.push_back(total_[b].rate());
    }
    return out;
  }

  void reset_totals() {
    for (auto& t : total_) t = {};
  }

  void set_record_history(bool on) { record_history_ = on; }

  ProposalSnapshot snapshot(Index iteration, int regime) const {
    return {iteration, regime, scales_, joint_scale_, joint_cov_};
  }

  double last_log_target() const { return last_log_target_; }

private:
  struct Counter {
    Index accepts = 0;
    Index tries = 0;
    double rate() const { return tries == 0 ? 0.0 : static_cast<double>(accepts) / static_cast<double>(tries); }
  };

  // (rho, phi, tau2, sigma2); the joint block walks on the natural scale
  Eigen::VectorXd state_vector(const ModelState& s) const {
    const Index nd = dependence_count(p_);
    Eigen::VectorXd v(nd + 2 * p_);
    v << dependence_vector(s.dep), s.dep.tau2, s.sigma2;
    return v;
  }

  void from_state_vector(const Eigen::VectorXd& v, DependenceParams& dep, Eigen::VectorXd& sigma2) const {
    const Index nd = dependence_count(p_);
    set_dependence_vector(dep, v.head(nd));
    dep.tau2 = v.segment(nd, p_);
    sigma2 = v.tail(p_);
  }

  std::optional<Eigen::MatrixXd> history_covariance() const {
    const auto d = joint_members_.size();
    if (history_.size() < 2 * d + 2) return std::nullopt;
    std::vector<Eigen::VectorXd> sub;
    sub.reserve(history_.size());
    for (const auto& h : history_) {
      Eigen::VectorXd x(static_cast<Index>(d));
      for (std::size_t t = 0; t < d; ++t) x[static_cast<Index>(t)] = h[joint_members_[t]];
      sub.push_back(std::move(x));
    }
    return empirical_covariance(sub);
  }

  const GmrfEngine& engine_;
  const PriorSpec& prior_;
  const SamplerConfig& config_;
  Index p_;
  std::vector<double> scales_, initial_;
  std::vector<Counter> window_, total_;
  std::vector<Index> joint_members_;
  std::vector<bool> in_joint_;
  bool joint_mode_ = false;
  bool record_history_ = true;
  double joint_scale_ = 0.0, joint_initial_ = 1.0;
  Eigen::MatrixXd joint_cov_, joint_chol_;
  std::vector<Eigen::VectorXd> history_;
  double last_log_target_ = 0.0;
};

/// One sweep: regression blocks, the collapsed MH moves, then h_r drawn
/// exactly, hbar, the level shift and the conjugate variance draws.
template <class Urbg>
void gibbs_sweep(const EnsembleDataset& data, ModelState& s, const PriorSpec& prior, const GmrfEngine& engine,
                 DependenceSampler& dep_sampler, Urbg& rng) {
  update_alpha(data, s, prior, rng);
  update_beta_r(data, s, rng);
  update_beta_bar(s, prior, rng);
  dep_sampler.step(data, s, rng);
  const auto q = engine.assemble(s.dep);
  update_h_r(data, s, engine, q, rng);
  update_h_bar(s, prior, engine, q, rng);
  update_level_shift(data, s, prior, rng);
  update_sigma2(data, s, prior, rng);
}

/// Random starting state: dependence parameters uniform on the PD region of
/// the prior box, variances scattered around the data scale.
template <class Urbg>
ModelState starting_state(const EnsembleDataset& data, const PriorSpec& prior, const GmrfEngine& engine,
                          const SamplerConfig& config, Urbg& rng) {
  ModelState s = ModelState::initial(data);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Index p = data.p();
  Eigen::VectorXd tau2(p);
  for (Index j = 0; j < p; ++j) {
    double mean = 0.0, sq = 0.0;
    for (Index r = 0; r < data.m(); ++r) {
      const Eigen::VectorXd v = data.slice(r, j);
      mean += v.sum();
      sq += v.squaredNorm();
    }
    const double cnt = static_cast<double>(data.m() * data.n());
    mean /= cnt;
    const double var = std::max(sq / cnt - mean * mean, 1e-8);
    s.sigma2[j] = var * (0.1 + 0.9 * u(rng));
    tau2[j] = var * (0.1 + 0.9 * u(rng));
  }
  s.dep = sample_valid_params_uniform(engine.assembler(), engine.symbolic(), prior.dep_box, tau2, rng,
                                      config.start_max_tries);
  return s;
}

namespace detail {

inline Eigen::VectorXd flatten(const Eigen::MatrixXd& m) {
  return Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
}

}  // namespace detail

/// Runs one chain through the three regimes; seeded with seed + chain_id.
inline ChainOutput run_chain(const SamplerConfig& config, const EnsembleDataset& data, const PriorSpec& prior,
                             Index chain_id, const GmrfEngine& engine, std::ostream* progress = nullptr) {
  config.validate();
  prior.validate(data.p());
  std::mt19937_64 rng(config.seed + static_cast<std::uint64_t>(chain_id));
  ModelState s = starting_state(data, prior, engine, config, rng);
  DependenceSampler dep(engine, prior, config);

  ChainOutput out;
  out.chain_id = chain_id;
  const Index kept = config.regime3_iters / config.thin;
  const Index p = data.p();
  const Index dim = data.lattice().dim();
  out.samples.names = sample_block_names();
  out.samples.blocks = {Eigen::MatrixXd(kept, dependence_count(p)), Eigen::MatrixXd(kept, p),
                        Eigen::MatrixXd(kept, p),                    Eigen::MatrixXd(kept, 1),
                        Eigen::MatrixXd(kept, data.q1() * p),        Eigen::MatrixXd(kept, data.q2() * p),
                        Eigen::MatrixXd(kept, dim),                  Eigen::MatrixXd(kept, dim),
                        Eigen::MatrixXd(kept, 1)};

  const Index lengths[3] = {config.regime1_iters, config.regime2_iters, config.regime3_iters};
  Index iteration = 0;
  Index row = 0;
  for (int regime = 1; regime <= 3; ++regime) {
    if (regime == 2) dep.enter_joint_mode();
    if (regime == 3) {
      if (!dep.joint_mode()) dep.enter_joint_mode();
      dep.set_record_history(false);
      out.proposal_history.push_back(dep.snapshot(iteration, 3));
    }
    dep.reset_totals();
    dep.reset_window();
    for (Index t = 0; t < lengths[regime - 1]; ++t, ++iteration) {
      gibbs_sweep(data, s, prior, engine, dep, rng);
      const bool boundary = (t + 1) % config.adapt_interval == 0;
      if (boundary && progress) {
        std::ostringstream line;
        line << "chain " << chain_id << " iter " << iteration + 1 << " regime " << regime;
        const auto acc = dep.totals(regime);
        for (std::size_t b = 0; b < acc.blocks.size(); ++b) line << ' ' << acc.blocks[b] << '=' << acc.rates[b];
        line << " log_post_dep " << dep.last_log_target() << " log_lik " << log_likelihood(data, s) << '\n';
        *progress << line.str();
      }
      if (regime < 3 && boundary) {
        dep.adapt();
        out.proposal_history.push_back(dep.snapshot(iteration + 1, regime));
      }
      if (regime == 3 && (t + 1) % config.thin == 0 && row < kept) {
        auto& b = out.samples.blocks;
        b[0].row(row) = dependence_vector(s.dep);
        b[1].row(row) = s.dep.tau2;
        b[2].row(row) = s.sigma2;
        b[3](row, 0) = s.sigma2_b;
        b[4].row(row) = detail::flatten(s.alpha);
        b[5].row(row) = detail::flatten(s.beta_bar);
        b[6].row(row) = s.h_bar;
        b[7].row(row) = mean_field(data, s);
        b[8](row, 0) = dep.last_log_target();
        ++row;
      }
    }
    if (lengths[regime - 1] > 0) out.acceptance_log.push_back(dep.totals(regime));
  }
  out.proposal_history.push_back(dep.snapshot(iteration, 3));
  return out;
}

// ---- multi-chain orchestration ---------------------------------------------

struct PsrfRow {
  std::string name;
  std::optional<double> psrf;  // nullopt: degenerate (zero within-chain variance)
};

struct ArchiveDims {
  Index nx = 0, ny = 0, p = 0, m = 0, q1 = 0, q2 = 0;
  friend bool operator==(const ArchiveDims&, const ArchiveDims&) = default;
};

/// Pooled regime-3 draws of every chain (chain-major rows) plus diagnostics.
struct PosteriorArchive {
  ArchiveDims dims;
  Index n_chains = 0;
  Index samples_per_chain = 0;
  std::uint64_t seed = 0;
  SampleSet samples;
  std::vector<std::vector<RegimeAcceptance>> acceptance;  // per chain
  std::vector<PsrfRow> psrf;
  bool convergence_warning = false;
  std::string config_json;  // effective configuration, canonical text

  Index total_samples() const { return samples.rows(); }

  /// Per-chain trajectories of one column of a block.
  std::vector<Eigen::VectorXd> chain_trajectories(const std::string& block, Index col) const {
    const auto& b = samples.get(block);
    std::vector<Eigen::VectorXd> out;
    for (Index c = 0; c < n_chains; ++c) out.push_back(b.block(c * samples_per_chain, col, samples_per_chain, 1));
    return out;
  }
};

/// Scalars checked for convergence: (rho, phi), sigma2, and a seeded subset
/// of hbar components. Pairs of (block, column, label).
struct MonitoredScalar {
  std::string block;
  Index column;
  std::string label;
};

inline std::vector<MonitoredScalar> monitored_scalars(Index p, Index dim, Index h_count, std::uint64_t seed) {
  std::vector<MonitoredScalar> out;
  const auto names = dependence_names(p);
  for (Index k = 0; k < dependence_count(p); ++k) out.push_back({"dependence", k, names[static_cast<std::size_t>(k)]});
  for (Index j = 0; j < p; ++j) out.push_back({"sigma2", j, "sigma2_" + std::to_string(j + 1)});
  std::vector<Index> idx(static_cast<std::size_t>(dim));
  for (Index a = 0; a < dim; ++a) idx[static_cast<std::size_t>(a)] = a;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const Index take = std::min(h_count, dim);
  std::vector<Index> chosen(idx.begin(), idx.begin() + take);
  std::sort(chosen.begin(), chosen.end());
  for (Index a : chosen) out.push_back({"h_bar", a, "h_bar_" + std::to_string(a)});
  return out;
}

inline std::vector<PsrfRow> compute_psrf(const PosteriorArchive& archive, Index h_count) {
  std::vector<PsrfRow> rows;
  if (archive.n_chains < 2 || archive.samples_per_chain < 10) return rows;
  const Index dim = archive.dims.nx * archive.dims.ny * archive.dims.p;
  for (const auto& m : monitored_scalars(archive.dims.p, dim, h_count, archive.seed))
    rows.push_back({m.label, gelman_rubin(archive.chain_trajectories(m.block, m.column))});
  return rows;
}

inline Index resolve_thread_count(Index requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("MVMRF_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<Index>(v);
    } catch (const std::exception&) {
    }
  }
  return std::max<Index>(1, static_cast<Index>(std::thread::hardware_concurrency()));
}

/// Runs all chains (concurrently), pools their regime-3 draws and checks
/// PSRF < threshold for the monitored scalars.
inline PosteriorArchive run_ensemble_analysis(const SamplerConfig& config, const EnsembleDataset& data,
                                              const PriorSpec& prior, std::ostream* progress = nullptr) {
  config.validate();
  prior.validate(data.p());
  const GmrfEngine engine(data.lattice());
  std::vector<ChainOutput> chains(static_cast<std::size_t>(config.n_chains));
  std::vector<std::exception_ptr> errors(chains.size());
  std::atomic<Index> next{0};
  std::mutex progress_mutex;
  std::ostringstream sink;

  auto worker = [&] {
    for (Index c = next++; c < config.n_chains; c = next++) {
      try {
        std::ostringstream local;
        chains[static_cast<std::size_t>(c)] = run_chain(config, data, prior, c, engine, progress ? &local : nullptr);
        if (progress) {
          std::lock_guard lock(progress_mutex);
          *progress << local.str();
        }
      } catch (...) {
        errors[static_cast<std::size_t>(c)] = std::current_exception();
      }
    }
  };
  const Index threads = std::min(resolve_thread_count(config.threads), config.n_chains);
  std::vector<std::thread> pool;
  for (Index t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  PosteriorArchive archive;
  const auto& g = data.lattice().grid();
  archive.dims = {g.nx(), g.ny(), data.p(), data.m(), data.q1(), data.q2()};
  archive.n_chains = config.n_chains;
  archive.samples_per_chain = config.regime3_iters / config.thin;
  archive.seed = config.seed;
  archive.samples.names = sample_block_names();
  for (std::size_t b = 0; b < archive.samples.names.size(); ++b) {
    const Index cols = chains.front().samples.blocks[b].cols();
    Eigen::MatrixXd pooled(archive.n_chains * archive.samples_per_chain, cols);
    for (Index c = 0; c < archive.n_chains; ++c)
      pooled.middleRows(c * archive.samples_per_chain, archive.samples_per_chain) =
          chains[static_cast<std::size_t>(c)].samples.blocks[b];
    archive.samples.blocks.push_back(std::move(pooled));
  }
  for (const auto& c : chains) archive.acceptance.push_back(c.acceptance_log);
  archive.psrf = compute_psrf(archive, config.monitored_h_components);
  for (const auto& row : archive.psrf)
    if (row.psrf && !(*row.psrf < config.psrf_threshold)) archive.convergence_warning = true;
  return archive;
}

}  // namespace mvmrf
