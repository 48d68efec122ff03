#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <string>
#include <vector>

#include "distrl/core.hpp"
#include "distrl/errors.hpp"
#include "distrl/replay.hpp"

namespace distrl {

struct BufferSummary {
  std::size_t count = 0;
  std::size_t successes = 0;
  std::size_t with_breakdown = 0;
  std::size_t priority_mismatches = 0;  // stored p differs from w . normalized components
  double max_priority_error = 0.0;
  double p_min = 0.0, p_max = 0.0;
  std::vector<std::size_t> priority_hist;       // equal-width bins over [p_min, p_max]
  std::map<std::int64_t, std::size_t> staleness;  // newest version in dump minus trajectory version
  std::int64_t newest_version = 0;

  double success_fraction() const noexcept { return count ? static_cast<double>(successes) / count : 0.0; }
};

/// Reads a buffer dump (JSON lines, optional "breakdown" per line).
inline BufferSummary summarize_dump(std::istream& in, std::size_t bins = 10, double tol = 1e-9) {
  BufferSummary s;
  std::vector<double> ps;
  std::vector<std::int64_t> versions;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    Trajectory t;
    try {
      j = json::parse(line);
      t = j.get<Trajectory>();
    } catch (const std::exception& e) {
      throw FormatError(std::string("buffer dump: ") + e.what(), line_no);
    }
    ++s.count;
    if (t.terminal_reward > 0.0) ++s.successes;
    versions.push_back(t.policy_version);
    if (j.contains("breakdown")) {
      PriorityBreakdown b;
      try {
        b = j.at("breakdown").get<PriorityBreakdown>();
      } catch (const std::exception& e) {
        throw FormatError(std::string("buffer dump breakdown: ") + e.what(), line_no);
      }
      ++s.with_breakdown;
      ps.push_back(b.p);
      const double recomputed = b.weights.w1 * b.n_td + b.weights.w2 * b.n_rho + b.weights.w3 * b.n_entropy;
      const double err = std::abs(recomputed - b.p);
      s.max_priority_error = std::max(s.max_priority_error, err);
      if (err > tol * std::max(1.0, std::abs(b.p))) ++s.priority_mismatches;
    }
  }
  if (!versions.empty()) {
    s.newest_version = *std::max_element(versions.begin(), versions.end());
    for (auto v : versions) ++s.staleness[s.newest_version - v];
  }
  s.priority_hist.assign(ps.empty() ? 0 : bins, 0);
  if (!ps.empty()) {
    s.p_min = *std::min_element(ps.begin(), ps.end());
    s.p_max = *std::max_element(ps.begin(), ps.end());
    const double width = (s.p_max - s.p_min) / static_cast<double>(bins);
    for (double p : ps) {
      std::size_t k = width > 0.0 ? static_cast<std::size_t>((p - s.p_min) / width) : 0;
      ++s.priority_hist[std::min(k, bins - 1)];
    }
  }
  return s;
}

}  // namespace distrl
