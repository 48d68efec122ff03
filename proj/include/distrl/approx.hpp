#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "distrl/core.hpp"
#include "distrl/errors.hpp"
#include "distrl/rng.hpp"

namespace distrl {

enum class ParamKind { policy, value, vtraj };

inline const char* to_string(ParamKind k) noexcept {
  switch (k) {
    case ParamKind::policy: return "policy";
    case ParamKind::value: return "value";
    case ParamKind::vtraj: return "vtraj";
  }
  return "?";
}

/// `d=<int>,m=<int>,h=<int>,kind=<policy|value|vtraj>`
struct ShapeTag {
  int d = 0;
  int m = 0;
  int h = 0;
  ParamKind kind = ParamKind::policy;

  std::size_t input_dim() const noexcept {
    return kind == ParamKind::vtraj ? static_cast<std::size_t>(d + m) : static_cast<std::size_t>(d);
  }

  /// Flat parameter count implied by the tag.
  std::size_t length() const noexcept {
    if (kind == ParamKind::policy) return static_cast<std::size_t>(m) * d + m;
    const std::size_t in = input_dim();
    return static_cast<std::size_t>(h) * in + 2 * static_cast<std::size_t>(h) + 1;
  }

  std::string str() const {
    return "d=" + std::to_string(d) + ",m=" + std::to_string(m) + ",h=" + std::to_string(h) + ",kind=" + to_string(kind);
  }

  static ShapeTag parse(const std::string& text) {
    ShapeTag tag;
    bool seen_d = false, seen_m = false, seen_h = false, seen_kind = false;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw DecodeError("shape_tag: malformed item '" + item + "'");
      const std::string key = item.substr(0, eq), val = item.substr(eq + 1);
      auto as_int = [&](const std::string& v) {
        std::size_t used = 0;
        int out = 0;
        try {
          out = std::stoi(v, &used);
        } catch (const std::exception&) {
          throw DecodeError("shape_tag: bad integer '" + v + "'");
        }
        if (used != v.size() || out < 0) throw DecodeError("shape_tag: bad integer '" + v + "'");
        return out;
      };
      if (key == "d") tag.d = as_int(val), seen_d = true;
      else if (key == "m") tag.m = as_int(val), seen_m = true;
      else if (key == "h") tag.h = as_int(val), seen_h = true;
      else if (key == "kind") {
        if (val == "policy") tag.kind = ParamKind::policy;
        else if (val == "value") tag.kind = ParamKind::value;
        else if (val == "vtraj") tag.kind = ParamKind::vtraj;
        else throw DecodeError("shape_tag: unknown kind '" + val + "'");
        seen_kind = true;
      } else {
        throw DecodeError("shape_tag: unknown key '" + key + "'");
      }
    }
    if (!(seen_d && seen_m && seen_h && seen_kind)) throw DecodeError("shape_tag: missing field in '" + text + "'");
    return tag;
  }

  bool operator==(const ShapeTag&) const = default;
};

/// Linear softmax policy. theta = W (m x d, row-major) followed by b (m).
struct PolicyParams {
  int d = 0;
  int m = 0;
  int h = 0;  // carried in the shape tag only
  std::vector<double> theta;

  static PolicyParams zeros(int d, int m, int h = 0) {
    if (d <= 0 || m <= 0) throw std::invalid_argument("PolicyParams: dimensions must be positive");
    return PolicyParams{d, m, h, std::vector<double>(static_cast<std::size_t>(m) * d + m, 0.0)};
  }

  double W(int a, int i) const { return theta[static_cast<std::size_t>(a) * d + i]; }
  double& W(int a, int i) { return theta[static_cast<std::size_t>(a) * d + i]; }
  double b(int a) const { return theta[static_cast<std::size_t>(m) * d + a]; }
  double& b(int a) { return theta[static_cast<std::size_t>(m) * d + a]; }

  ShapeTag shape() const { return ShapeTag{d, m, h, ParamKind::policy}; }
  bool operator==(const PolicyParams&) const = default;
};

/// One-hidden-layer sigmoid classifier: v = sigmoid(w2 . tanh(W1 x + b1) + b2).
/// theta = W1 (h x in, row-major), b1 (h), w2 (h), b2.
struct MlpParams {
  int d = 0;  // state feature dim
  int m = 0;  // action count (input for vtraj only)
  int h = 0;
  ParamKind kind = ParamKind::value;
  std::vector<double> theta;

  std::size_t in() const noexcept { return shape().input_dim(); }
  ShapeTag shape() const { return ShapeTag{d, m, h, kind}; }

  double W1(int j, std::size_t i) const { return theta[static_cast<std::size_t>(j) * in() + i]; }
  std::size_t b1_offset() const noexcept { return static_cast<std::size_t>(h) * in(); }
  std::size_t w2_offset() const noexcept { return b1_offset() + h; }
  std::size_t b2_offset() const noexcept { return w2_offset() + h; }
  double b1(int j) const { return theta[b1_offset() + j]; }
  double w2(int j) const { return theta[w2_offset() + j]; }
  double b2() const { return theta[b2_offset()]; }
  double& b2() { return theta[b2_offset()]; }

  bool operator==(const MlpParams&) const = default;
};

/// V(s): probability that the return from s is positive.
struct ValueParams : MlpParams {};
/// V_traj(s_H, a_H): probability that the trajectory succeeded.
struct TrajValueParams : MlpParams {};

namespace detail {

inline MlpParams mlp_init(int d, int m, int h, ParamKind kind, Rng* rng) {
  if (d <= 0 || h <= 0 || (kind == ParamKind::vtraj && m <= 0)) throw std::invalid_argument("MlpParams: bad dimensions");
  MlpParams p{d, m, h, kind, {}};
  p.theta.assign(p.shape().length(), 0.0);
  if (rng) {
    const double s1 = 1.0 / std::sqrt(static_cast<double>(p.in()));
    for (std::size_t i = 0; i < p.b1_offset(); ++i) p.theta[i] = s1 * rng->normal();
    const double s2 = 0.1 / std::sqrt(static_cast<double>(h));
    for (int j = 0; j < h; ++j) p.theta[p.w2_offset() + j] = s2 * rng->normal();
  }
  return p;
}

inline double sigmoid(double x) noexcept {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline ValueParams make_value_params(int d, int h, Rng* rng = nullptr) {
  return ValueParams{detail::mlp_init(d, 0, h, ParamKind::value, rng)};
}

inline TrajValueParams make_vtraj_params(int d, int m, int h, Rng* rng = nullptr) {
  return TrajValueParams{detail::mlp_init(d, m, h, ParamKind::vtraj, rng)};
}

inline std::vector<double> policy_logits(const PolicyParams& p, std::span<const double> x) {
  if (x.size() != static_cast<std::size_t>(p.d)) throw std::invalid_argument("policy: feature dimension mismatch");
  std::vector<double> z(static_cast<std::size_t>(p.m));
  for (int a = 0; a < p.m; ++a) {
    double acc = p.b(a);
    const double* row = p.theta.data() + static_cast<std::size_t>(a) * p.d;
    for (int i = 0; i < p.d; ++i) acc += row[i] * x[i];
    z[a] = acc;
  }
  return z;
}

inline std::vector<double> softmax(std::span<const double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) sum += (p[i] = std::exp(z[i] - mx));
  for (double& v : p) v /= sum;
  return p;
}

inline std::vector<double> policy_probs(const PolicyParams& p, std::span<const double> x) {
  const auto z = policy_logits(p, x);
  return softmax(z);
}

inline std::vector<double> policy_probs(const PolicyParams& p, const StateFeatures& f) { return policy_probs(p, f.values); }

struct SampledAction {
  ActionId action = 0;
  double mu_prob = 1.0;
};

/// Samples from the softmax, restricted to and renormalised over `mask` when given.
inline SampledAction sample_action(const PolicyParams& p, std::span<const double> x, const std::vector<bool>* mask, Rng& rng) {
  auto probs = policy_probs(p, x);
  if (mask) {
    if (mask->size() != probs.size()) throw std::invalid_argument("sample_action: mask length != m");
    double total = 0.0;
    for (std::size_t a = 0; a < probs.size(); ++a) {
      if (!(*mask)[a]) probs[a] = 0.0;
      total += probs[a];
    }
    if (std::none_of(mask->begin(), mask->end(), [](bool b) { return b; }))
      throw std::invalid_argument("sample_action: mask has no valid action");
    if (total <= 0.0) {
      // All valid logits underflowed; fall back to uniform over the mask.
      for (std::size_t a = 0; a < probs.size(); ++a) probs[a] = (*mask)[a] ? 1.0 : 0.0;
      total = static_cast<double>(std::count(mask->begin(), mask->end(), true));
    }
    for (double& v : probs) v /= total;
  }
  const double u = rng.uniform();
  double cum = 0.0;
  ActionId last_positive = -1;
  for (std::size_t a = 0; a < probs.size(); ++a) {
    if (probs[a] <= 0.0) continue;
    last_positive = static_cast<ActionId>(a);
    cum += probs[a];
    if (u < cum) return {static_cast<ActionId>(a), probs[a]};
  }
  return {last_positive, probs[static_cast<std::size_t>(last_positive)]};
}

inline ActionId greedy_action(const PolicyParams& p, std::span<const double> x) {
  const auto z = policy_logits(p, x);
  return static_cast<ActionId>(std::max_element(z.begin(), z.end()) - z.begin());
}

inline SampledAction sample_action(const PolicyParams& p, const StateFeatures& f, const std::vector<bool>* mask, Rng& rng) {
  return sample_action(p, std::span<const double>(f.values), mask, rng);
}

inline ActionId greedy_action(const PolicyParams& p, const StateFeatures& f) { return greedy_action(p, f.values); }

/// Intermediate values kept for the closed-form backward pass.
struct MlpForward {
  std::vector<double> hidden;  // tanh activations
  double logit = 0.0;
  double out = 0.5;
};

inline MlpForward mlp_forward(const MlpParams& p, std::span<const double> input) {
  if (input.size() != p.in()) throw std::invalid_argument("mlp: input dimension mismatch");
  MlpForward f;
  f.hidden.resize(static_cast<std::size_t>(p.h));
  const std::size_t in = p.in();
  double o = p.b2();
  for (int j = 0; j < p.h; ++j) {
    const double* row = p.theta.data() + static_cast<std::size_t>(j) * in;
    double u = p.b1(j);
    for (std::size_t i = 0; i < in; ++i) u += row[i] * input[i];
    f.hidden[j] = std::tanh(u);
    o += p.w2(j) * f.hidden[j];
  }
  f.logit = o;
  f.out = detail::sigmoid(o);
  return f;
}

/// Accumulates scale * d(logit)/d(theta) into grad.
inline void mlp_backward(const MlpParams& p, std::span<const double> input, const MlpForward& f, double dlogit,
                         std::span<double> grad) {
  const std::size_t in = p.in();
  for (int j = 0; j < p.h; ++j) {
    const double hj = f.hidden[j];
    grad[p.w2_offset() + j] += dlogit * hj;
    const double du = dlogit * p.w2(j) * (1.0 - hj * hj);
    grad[p.b1_offset() + j] += du;
    double* row = grad.data() + static_cast<std::size_t>(j) * in;
    for (std::size_t i = 0; i < in; ++i) row[i] += du * input[i];
  }
  grad[p.b2_offset()] += dlogit;
}

inline double value_forward(const ValueParams& p, std::span<const double> x) {
  if (p.kind != ParamKind::value) throw std::invalid_argument("value_forward: wrong parameter kind");
  return mlp_forward(p, x).out;
}

inline double value_forward(const ValueParams& p, const StateFeatures& f) { return value_forward(p, f.values); }

/// phi(s_H) || one-hot(a_H)
inline std::vector<double> vtraj_input(std::span<const double> x, ActionId a, int m) {
  if (a < 0 || a >= m) throw std::invalid_argument("vtraj: action out of range");
  std::vector<double> in(x.begin(), x.end());
  in.resize(x.size() + static_cast<std::size_t>(m), 0.0);
  in[x.size() + static_cast<std::size_t>(a)] = 1.0;
  return in;
}

inline double vtraj_forward(const TrajValueParams& p, std::span<const double> x, ActionId a) {
  if (p.kind != ParamKind::vtraj) throw std::invalid_argument("vtraj_forward: wrong parameter kind");
  if (x.size() != static_cast<std::size_t>(p.d)) throw std::invalid_argument("vtraj: feature dimension mismatch");
  const auto in = vtraj_input(x, a, p.m);
  return mlp_forward(p, in).out;
}

inline double vtraj_forward(const TrajValueParams& p, const StateFeatures& f, ActionId a) {
  return vtraj_forward(p, f.values, a);
}

struct FlatParams {
  std::vector<double> values;
  std::string shape_tag;
};

inline FlatParams serialize_params(const PolicyParams& p) { return {p.theta, p.shape().str()}; }
inline FlatParams serialize_params(const MlpParams& p) { return {p.theta, p.shape().str()}; }

using AnyParams = std::variant<PolicyParams, ValueParams, TrajValueParams>;

inline AnyParams deserialize_params(std::span<const double> values, const std::string& shape_tag) {
  const ShapeTag tag = ShapeTag::parse(shape_tag);
  if (values.size() != tag.length())
    throw DecodeError("params length " + std::to_string(values.size()) + " does not match shape_tag " + shape_tag +
                      " (expects " + std::to_string(tag.length()) + ")");
  std::vector<double> theta(values.begin(), values.end());
  switch (tag.kind) {
    case ParamKind::policy:
      if (tag.d <= 0 || tag.m <= 0) throw DecodeError("policy shape has zero dimension");
      return PolicyParams{tag.d, tag.m, tag.h, std::move(theta)};
    case ParamKind::value:
      return ValueParams{MlpParams{tag.d, tag.m, tag.h, ParamKind::value, std::move(theta)}};
    case ParamKind::vtraj:
      return TrajValueParams{MlpParams{tag.d, tag.m, tag.h, ParamKind::vtraj, std::move(theta)}};
  }
  throw DecodeError("unknown parameter kind");
}

template <class P>
P deserialize_as(std::span<const double> values, const std::string& shape_tag) {
  auto any = deserialize_params(values, shape_tag);
  if (auto* p = std::get_if<P>(&any)) return std::move(*p);
  throw DecodeError("shape_tag kind does not match requested parameter type: " + shape_tag);
}

inline PolicySnapshot make_snapshot(std::int64_t version, const PolicyParams& p) {
  PolicySnapshot s;
  s.version = version;
  s.params = p.theta;
  s.shape_tag = p.shape().str();
  s.checksum = params_checksum(s.params);
  return s;
}

/// Copy with every parameter rounded through binary32, as a worker receives it.
inline PolicySnapshot quantize_f32(PolicySnapshot s) {
  for (double& v : s.params) v = static_cast<double>(static_cast<float>(v));
  s.checksum = params_checksum(s.params);
  return s;
}

inline PolicyParams snapshot_policy(const PolicySnapshot& s) { return deserialize_as<PolicyParams>(s.params, s.shape_tag); }

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
  bool operator==(const AdamState&) const = default;
};

/// One bias-corrected Adam step in place.
inline void adam_update(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
                        const AdamConfig& cfg = {}) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_update: params/grads length mismatch");
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw std::invalid_argument("adam_update: moment length mismatch");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

}  // namespace distrl
