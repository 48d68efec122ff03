#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "distrl/approx.hpp"
#include "distrl/core.hpp"

namespace distrl {

struct LossReport {
  double loss = 0.0;
  std::vector<double> grad;
  std::map<std::string, double> aux;
};

/// Per-step rewards used by the learner.
///
/// The stored reward of step t is its environment penalty, plus the evaluator
/// verdict R on the final step H. With Monte-Carlo propagation every earlier
/// step also receives the discounted terminal signal gamma^(H-t) * R.
inline std::vector<double> augment_rewards(const Trajectory& traj, double gamma, bool mc_propagation) {
  const std::size_t n = traj.size();
  std::vector<double> out(n, 0.0);
  if (n == 0) return out;
  const std::size_t last = n - 1;
  const double R = traj.terminal_reward;
  double discount = gamma;  // gamma^(H-t) for t = H-1, walking backwards
  for (std::size_t k = n; k-- > 0;) {
    const double penalty = traj.transitions[k].reward - (k == last ? R : 0.0);
    double r = penalty;
    if (k == last) {
      r += R;
    } else if (mc_propagation) {
      r += discount * R;
      discount *= gamma;
    }
    out[k] = r;
  }
  return out;
}

namespace detail {

/// Binary cross-entropy on a logit, -(y log s(o) + (1-y) log(1-s(o))), stable form.
inline double bce_with_logit(double logit, double y) noexcept {
  const double softplus = std::max(logit, 0.0) + std::log1p(std::exp(-std::abs(logit)));
  return softplus - y * logit;
}

}  // namespace detail

struct VtrajSample {
  std::span<const double> terminal_features;
  ActionId terminal_action = 0;
  double r = 0.0;  // terminal verdict in {0,1}
};

/// Mean BCE of V_traj(s_H, a_H) against the terminal verdict.
inline LossReport vtraj_loss(const TrajValueParams& p, std::span<const VtrajSample> batch) {
  if (batch.empty()) throw std::invalid_argument("vtraj_loss: empty batch");
  LossReport rep;
  rep.grad.assign(p.theta.size(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  double mean_pred = 0.0;
  for (const auto& s : batch) {
    if (s.r != 0.0 && s.r != 1.0) throw std::invalid_argument("vtraj_loss: r must be 0 or 1");
    if (s.terminal_features.size() != static_cast<std::size_t>(p.d))
      throw std::invalid_argument("vtraj_loss: feature dimension mismatch");
    const auto in = vtraj_input(s.terminal_features, s.terminal_action, p.m);
    const MlpForward f = mlp_forward(p, in);
    rep.loss += inv_n * detail::bce_with_logit(f.logit, s.r);
    mlp_backward(p, in, f, inv_n * (f.out - s.r), rep.grad);
    mean_pred += inv_n * f.out;
  }
  rep.aux["mean_prediction"] = mean_pred;
  return rep;
}

struct ValueSample {
  std::span<const double> features;
  double G = 0.0;  // Monte-Carlo return; label is [G > 0]
};

/// Mean BCE of V(s_t) against the label [G_t > 0] (G_t == 0 labels 0).
inline LossReport value_loss(const ValueParams& p, std::span<const ValueSample> batch) {
  if (batch.empty()) throw std::invalid_argument("value_loss: empty batch");
  LossReport rep;
  rep.grad.assign(p.theta.size(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  double positive = 0.0;
  for (const auto& s : batch) {
    const double y = s.G > 0.0 ? 1.0 : 0.0;
    const MlpForward f = mlp_forward(p, s.features);
    rep.loss += inv_n * detail::bce_with_logit(f.logit, y);
    mlp_backward(p, s.features, f, inv_n * (f.out - y), rep.grad);
    positive += inv_n * y;
  }
  rep.aux["positive_rate"] = positive;
  return rep;
}

struct ValueTargetSample {
  std::span<const double> features;
  double target = 0.0;  // corrected value, clamped to [0, 1] before use
};

/// weight * mean (V(s) - clamp(target, 0, 1))^2
inline LossReport value_regression_loss(const ValueParams& p, std::span<const ValueTargetSample> batch,
                                        double weight) {
  LossReport rep;
  rep.grad.assign(p.theta.size(), 0.0);
  if (batch.empty() || weight == 0.0) return rep;
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const auto& s : batch) {
    const double y = std::clamp(s.target, 0.0, 1.0);
    const MlpForward f = mlp_forward(p, s.features);
    const double err = f.out - y;
    rep.loss += weight * inv_n * err * err;
    mlp_backward(p, s.features, f, weight * inv_n * 2.0 * err * f.out * (1.0 - f.out), rep.grad);
  }
  return rep;
}

/// A = r + gamma V(s_{t+1}) - V(s_t)
constexpr double one_step_advantage(double reward, double gamma, double v_next, double v_t) noexcept {
  return reward + gamma * v_next - v_t;
}

/// rho = min(pi / mu, rho_max)
inline double importance_ratio(double pi_prob, double mu_prob, double rho_max) {
  if (!(mu_prob > 0.0)) throw std::invalid_argument("importance_ratio: mu_prob must be > 0");
  if (!(pi_prob >= 0.0)) throw std::invalid_argument("importance_ratio: pi_prob must be >= 0");
  return std::min(pi_prob / mu_prob, rho_max);
}

/// -log pi(a_t | s_t)
inline double sampled_entropy(double pi_prob) {
  if (!(pi_prob > 0.0)) throw std::invalid_argument("sampled_entropy: probability must be > 0");
  return -std::log(pi_prob);
}

struct PolicySample {
  std::span<const double> features;
  ActionId action = 0;
  double advantage = 0.0;  // treated as a constant
  double mu_prob = 1.0;
  bool invalid = false;    // P_invalid(a_t): the action was outside the valid mask
};

inline bool p_invalid(const std::vector<bool>& mask, ActionId a) { return !mask.at(static_cast<std::size_t>(a)); }

/// L = -mean[rho A log pi(a|s)] - beta mean[H(pi(.|s))] + lambda_pen mean[P_invalid]
///
/// rho and A enter as constants. H is the full categorical entropy. The
/// invalid-action term does not depend on the parameters; it is reported
/// but contributes no gradient.
inline LossReport policy_loss(const PolicyParams& p, std::span<const PolicySample> batch, double beta, double lambda_pen,
                              double rho_max) {
  if (batch.empty()) throw std::invalid_argument("policy_loss: empty batch");
  LossReport rep;
  rep.grad.assign(p.theta.size(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const std::size_t m = static_cast<std::size_t>(p.m);
  std::vector<double> gz(m), logp(m), pi(m);
  double mean_entropy = 0.0, mean_rho = 0.0, penalty_rate = 0.0, pg_term = 0.0;

  for (const auto& s : batch) {
    if (s.action < 0 || s.action >= p.m) throw std::invalid_argument("policy_loss: action out of range");
    const auto z = policy_logits(p, s.features);
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t a = 0; a < m; ++a) sum += std::exp(z[a] - mx);
    const double lse = mx + std::log(sum);
    double H = 0.0;
    for (std::size_t a = 0; a < m; ++a) {
      logp[a] = z[a] - lse;
      pi[a] = std::exp(logp[a]);
      if (pi[a] > 0.0) H -= pi[a] * logp[a];
    }
    const std::size_t act = static_cast<std::size_t>(s.action);
    const double rho = importance_ratio(pi[act], s.mu_prob, rho_max);
    const double w = rho * s.advantage;

    pg_term += inv_n * (-w * logp[act]);
    mean_entropy += inv_n * H;
    mean_rho += inv_n * rho;
    penalty_rate += inv_n * (s.invalid ? 1.0 : 0.0);

    for (std::size_t a = 0; a < m; ++a) {
      const double onehot = a == act ? 1.0 : 0.0;
      const double plogp = pi[a] > 0.0 ? pi[a] * logp[a] : 0.0;
      // d(-w log pi_a)/dz = -w (e_a - pi); d(-beta H)/dz_j = beta (pi_j log pi_j + pi_j H)
      gz[a] = inv_n * (-w * (onehot - pi[a]) + beta * (plogp + pi[a] * H));
    }
    for (std::size_t a = 0; a < m; ++a) {
      double* row = rep.grad.data() + a * static_cast<std::size_t>(p.d);
      for (int i = 0; i < p.d; ++i) row[i] += gz[a] * s.features[i];
      rep.grad[m * static_cast<std::size_t>(p.d) + a] += gz[a];
    }
  }
  rep.loss = pg_term - beta * mean_entropy + lambda_pen * penalty_rate;
  rep.aux["pg_term"] = pg_term;
  rep.aux["mean_entropy"] = mean_entropy;
  rep.aux["mean_rho"] = mean_rho;
  rep.aux["penalty_rate"] = penalty_rate;
  return rep;
}

}  // namespace distrl
