#pragma once

// Closed-form bulk-service queueing approximations: request-level service rate
// of a wave server, hit-rate service gaps, admission wait, and the service-knee
// crossover. All rates are requests/s; wave rates only appear as mu / M_bar.

#include <algorithm>
#include <cmath>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "prefixsim/errors.hpp"

namespace prefixsim::analytics {

struct PolicyParams {
  double L = 0.0;         // mean prompt tokens
  double L_reuse = 0.0;   // mean reusable tokens
  double M_bar = 1.0;     // mean wave size
  double R_pf_eff = 0.0;  // effective prefill tokens/s per request
  double h = 0.0;         // full-prompt token hit rate

  void validate() const {
    if (!(L > 0.0)) throw DomainError("policy params: L must be positive");
    if (L_reuse < 0.0 || L_reuse > L) throw DomainError("policy params: need 0 <= L_reuse <= L");
    if (!(M_bar >= 1.0)) throw DomainError("policy params: M_bar must be at least 1");
    if (!(R_pf_eff > 0.0)) throw DomainError("policy params: R_pf_eff must be positive");
    if (!(h >= 0.0)) throw DomainError("policy params: h must be nonnegative");
    if (!(h < 1.0)) throw DomainError("policy params: h must be below 1");
  }
};

struct QueueParams {
  double lambda = 0.0;      // offered requests/s
  double c_s2 = 1.0;        // squared coefficient of variation of service time
  double window = 0.0;      // scheduling window, seconds
  double wait_floor = 0.0;  // extra low-load overhead on top of window / 2, seconds
};

struct ServiceRate {
  double wave_time = 0.0;  // E[S_wave], seconds
  double mu = 0.0;         // requests/s
  double M_bar = 1.0;

  double waves_per_second() const { return mu / M_bar; }
};

inline ServiceRate mean_service(const PolicyParams& p) {
  p.validate();
  const double wave_time = p.L * (1.0 - p.h) / p.R_pf_eff;
  return {wave_time, p.M_bar / wave_time, p.M_bar};
}

/// mu(p1) / mu(p0), factored into batching, throughput, length, and reuse terms.
inline double service_ratio(const PolicyParams& p1, const PolicyParams& p0) {
  p1.validate();
  p0.validate();
  return (p1.M_bar / p0.M_bar) * (p1.R_pf_eff / p0.R_pf_eff) * (p0.L / p1.L) * ((1.0 - p0.h) / (1.0 - p1.h));
}

namespace detail {
inline void check_gap_domain(double h_lru, double delta_h) {
  if (!(delta_h >= 0.0)) throw DomainError("hit-rate gap must be nonnegative");
  if (!(h_lru >= 0.0)) throw DomainError("baseline hit rate must be nonnegative");
  if (!(h_lru + delta_h < 1.0)) throw DomainError("h_lru + delta_h must stay below 1");
}
}  // namespace detail

/// Service-rate gain over a baseline at fixed (L, M_bar, R_pf): mu_lru * dh / (1 - h_lru - dh).
inline double service_gap(double mu_lru, double h_lru, double delta_h) {
  detail::check_gap_domain(h_lru, delta_h);
  return mu_lru * delta_h / (1.0 - h_lru - delta_h);
}

inline double stability_expansion(double M_bar, double R_pf, double L, double h_lru, double delta_h) {
  detail::check_gap_domain(h_lru, delta_h);
  if (!(L > 0.0)) throw DomainError("stability_expansion: L must be positive");
  return (M_bar * R_pf / L) * delta_h / ((1.0 - h_lru - delta_h) * (1.0 - h_lru));
}

/// Converts a reusable-region hit-rate gap into a full-prompt token gap.
inline double reuse_gap_to_full(double delta_h_reuse, double L_reuse, double L) {
  if (delta_h_reuse < 0.0 || delta_h_reuse > 1.0) throw DomainError("reuse gap must lie in [0, 1]");
  if (!(L > 0.0) || L_reuse < 0.0 || L_reuse > L) throw DomainError("need 0 <= L_reuse <= L, L > 0");
  return delta_h_reuse * L_reuse / L;
}

/// window/2 + floor + (rho/(1-rho)) ((1+c_s2)/2) (1/mu).
inline double admission_wait(double mu, const QueueParams& q) {
  if (!(mu > 0.0)) throw DomainError("admission_wait: mu must be positive");
  if (!(q.lambda >= 0.0) || !(q.c_s2 >= 0.0)) throw DomainError("admission_wait: need lambda >= 0, c_s2 >= 0");
  const double rho = q.lambda / mu;
  if (rho >= 1.0) throw InstabilityError("admission_wait: utilization " + std::to_string(rho) + " >= 1");
  return 0.5 * q.window + q.wait_floor + (rho / (1.0 - rho)) * ((1.0 + q.c_s2) / 2.0) * (1.0 / mu);
}

struct Crossover {
  double rho_star = 0.0;
  double lambda_star = 0.0;
};

/// Load where queueing wait equals the wave prefill time: rho* = 2M/(1 + c_s2 + 2M).
inline Crossover crossover(double mu, double M_bar, double c_s2) {
  if (!(M_bar >= 1.0)) throw DomainError("crossover: M_bar must be at least 1");
  if (!(c_s2 >= 0.0)) throw DomainError("crossover: c_s2 must be nonnegative");
  const double rho = 2.0 * M_bar / (1.0 + c_s2 + 2.0 * M_bar);
  return {rho, rho * mu};
}

/// Effective per-request prefill rate implied by an observed service rate.
inline double calibrate_prefill_rate(double mu, double M_bar, double L, double h) {
  if (!(mu > 0.0) || !(M_bar >= 1.0) || !(L > 0.0) || !(h >= 0.0 && h < 1.0))
    throw DomainError("calibrate_prefill_rate: invalid arguments");
  return mu * L * (1.0 - h) / M_bar;
}

// ---------------------------------------------------------------------------
// Service-knee report over a load sweep of one policy.

struct KneePoint {
  double offered = 0.0;
  double throughput = 0.0;
  double p99 = 0.0;
  double hit_rate = 0.0;
  double mean_wave_size = 1.0;
  double mean_prompt_tokens = 0.0;
  double prefill_rate_eff = 0.0;  // aggregate tokens/s across a wave
  double extend_per_wave = 0.0;

  /// Per-request rate: the aggregate wave throughput split across M_bar members.
  double per_request_prefill_rate() const { return prefill_rate_eff / mean_wave_size; }

  double analytic_mu() const {
    return mean_service({mean_prompt_tokens, 0.0, mean_wave_size, per_request_prefill_rate(), hit_rate}).mu;
  }
};

struct KneeReport {
  std::vector<KneePoint> points;          // ascending offered load
  std::optional<std::size_t> knee_index;  // first point with throughput < 0.95 offered
  double analytic_mu = 0.0;               // mean over plateau points (or the last point)
  double plateau_throughput = 0.0;
  double relative_error = 0.0;            // |analytic_mu - plateau| / analytic_mu
  double mean_wave_size = 1.0;
  std::vector<std::pair<double, Crossover>> crossovers;  // by c_s2
};

inline constexpr double kKneeFraction = 0.95;

inline KneeReport knee_report(std::vector<KneePoint> points, double c_s2 = 1.0) {
  if (points.size() < 3) throw DomainError("knee_report: need at least 3 load points");
  std::sort(points.begin(), points.end(),
            [](const KneePoint& a, const KneePoint& b) { return a.offered < b.offered; });
  KneeReport r;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (points[i].throughput < kKneeFraction * points[i].offered) {
      r.knee_index = i;
      break;
    }
  }
  const std::size_t first = r.knee_index.value_or(points.size() - 1);
  double mu = 0, tput = 0, mbar = 0;
  for (std::size_t i = first; i < points.size(); ++i) {
    mu += points[i].analytic_mu();
    tput += points[i].throughput;
    mbar += points[i].mean_wave_size;
  }
  const auto count = static_cast<double>(points.size() - first);
  r.analytic_mu = mu / count;
  r.plateau_throughput = tput / count;
  r.mean_wave_size = mbar / count;
  r.relative_error = std::abs(r.analytic_mu - r.plateau_throughput) / r.analytic_mu;
  std::vector<double> variations{0.5, c_s2, 4.0};
  std::sort(variations.begin(), variations.end());
  variations.erase(std::unique(variations.begin(), variations.end()), variations.end());
  for (double c : variations) r.crossovers.emplace_back(c, crossover(r.analytic_mu, r.mean_wave_size, c));
  r.points = std::move(points);
  return r;
}

inline void write_knee_csv(const KneeReport& r, std::ostream& out) {
  out << "offered_qps,throughput,p99_ttft,hit_rate,mean_wave_size,extend_per_wave,analytic_mu,knee\n";
  for (std::size_t i = 0; i < r.points.size(); ++i) {
    const KneePoint& p = r.points[i];
    fmt::print(out, "{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{:.3f},{:.6f},{}\n", p.offered, p.throughput, p.p99,
               p.hit_rate, p.mean_wave_size, p.extend_per_wave, p.analytic_mu(),
               r.knee_index && *r.knee_index == i ? 1 : 0);
  }
}

inline void write_knee_text(const KneeReport& r, std::ostream& out) {
  fmt::print(out, "{:>10} {:>11} {:>9} {:>8} {:>7} {:>12} {:>11}\n", "Target QPS", "Throughput", "P99 TTFT",
             "Hit (%)", "M_bar", "Extend/wave", "Analytic mu");
  for (std::size_t i = 0; i < r.points.size(); ++i) {
    const KneePoint& p = r.points[i];
    fmt::print(out, "{:>10.2f} {:>11.2f} {:>9.3f} {:>8.2f} {:>7.2f} {:>12.0f} {:>11.2f}{}\n", p.offered,
               p.throughput, p.p99, 100.0 * p.hit_rate, p.mean_wave_size, p.extend_per_wave, p.analytic_mu(),
               r.knee_index && *r.knee_index == i ? "  <- knee" : "");
  }
  if (r.knee_index)
    fmt::print(out, "knee at offered {:.2f} QPS\n", r.points[*r.knee_index].offered);
  else
    fmt::print(out, "no knee in sweep\n");
  fmt::print(out, "analytic mu {:.3f} req/s, plateau throughput {:.3f} req/s, relative error {:.4f}\n",
             r.analytic_mu, r.plateau_throughput, r.relative_error);
  for (const auto& [c, x] : r.crossovers)
    fmt::print(out, "crossover c_s2={:.2f}: rho*={:.4f} lambda*={:.3f} QPS\n", c, x.rho_star, x.lambda_star);
}

}  // namespace prefixsim::analytics
