#pragma once

#include <algorithm>
#include <span>
#include <stdexcept>
#include <vector>

namespace distrl {

struct RetraceResult {
  std::vector<double> delta;        // correction per step
  std::vector<double> corrected_v;  // V(s_t) + delta_t
  std::vector<double> traces;       // c_i = lambda * min(1, rho_i)
};

/// c = lambda * min(1, rho)
inline double trace_coefficient(double rho, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("trace_coefficient: lambda must be in [0,1]");
  if (!(rho >= 0.0)) throw std::invalid_argument("trace_coefficient: rho must be >= 0");
  return lambda * std::min(1.0, rho);
}

/// delta_t = sum_{k=t}^{H} gamma^{k-t} (prod_{i=t+1}^{k} c_i) [r_k + gamma V(s_{k+1}) - V(s_k)]
///
/// Evaluated by the backward recursion delta_t = tde_t + gamma c_{t+1} delta_{t+1}.
/// V(s_{H+1}) is `v_terminal_next` (0 for episodes that ended). Ratios are the
/// raw pi/mu; truncation happens only inside min(1, .).
inline RetraceResult retrace_deltas(std::span<const double> rewards, std::span<const double> values,
                                    std::span<const double> pi_probs, std::span<const double> mu_probs, double gamma,
                                    double lambda, double v_terminal_next = 0.0) {
  const std::size_t n = rewards.size();
  if (values.size() != n || pi_probs.size() != n || mu_probs.size() != n)
    throw std::invalid_argument("retrace_deltas: sequence length mismatch");
  RetraceResult r;
  r.delta.assign(n, 0.0);
  r.corrected_v.assign(n, 0.0);
  r.traces.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(mu_probs[i] > 0.0)) throw std::invalid_argument("retrace_deltas: mu_prob must be > 0");
    r.traces[i] = trace_coefficient(pi_probs[i] / mu_probs[i], lambda);
  }
  double next_delta = 0.0;
  for (std::size_t k = n; k-- > 0;) {
    const double v_next = k + 1 < n ? values[k + 1] : v_terminal_next;
    const double tde = rewards[k] + gamma * v_next - values[k];
    const double carry = k + 1 < n ? gamma * r.traces[k + 1] * next_delta : 0.0;
    r.delta[k] = tde + carry;
    next_delta = r.delta[k];
  }
  for (std::size_t k = 0; k < n; ++k) r.corrected_v[k] = values[k] + r.delta[k];
  return r;
}

inline const std::vector<double>& corrected_values(const RetraceResult& r) noexcept { return r.corrected_v; }

/// Corrected value at step k; 0 past the final step.
inline double corrected_value_at(const RetraceResult& r, std::size_t k) noexcept {
  return k < r.corrected_v.size() ? r.corrected_v[k] : 0.0;
}

}  // namespace distrl
