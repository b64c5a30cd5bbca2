#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dwstrack/common.hpp"
#include "dwstrack/config.hpp"
#include "dwstrack/data.hpp"

namespace dwstrack {

/// Timestamped 2D position sequence; origin fixed at the ground-truth start.
struct Trajectory {
  std::vector<double> times;
  std::vector<Vec2> positions;

  int64_t size() const { return static_cast<int64_t>(times.size()); }

  void validate() const {
    if (times.empty() || times.size() != positions.size())
      throw DimensionError("trajectory: needs matching, non-empty time/position arrays");
    for (size_t i = 1; i < times.size(); ++i)
      if (!(times[i] > times[i - 1]))
        throw DimensionError("trajectory: times must be strictly increasing");
  }
};

struct TimedVelocity {
  double t = 0;   // window start time
  double dt = 0;  // window duration
  Vec2 v{0, 0};   // window-mean velocity
};

/// Rectangle-rule integration of window-mean velocities:
/// p_0 = origin, p_{k+1} = p_k + v_k * dt_k. Exact for window means.
inline Trajectory integrate(const std::vector<TimedVelocity>& velocities, Vec2 origin) {
  if (velocities.empty()) throw DimensionError("integrate: empty velocity sequence");
  Trajectory traj;
  traj.times.push_back(velocities.front().t);
  traj.positions.push_back(origin);
  Vec2 p = origin;
  for (const auto& w : velocities) {
    if (w.dt <= 0) throw DimensionError("integrate: window durations must be positive");
    p[0] += w.v[0] * w.dt;
    p[1] += w.v[1] * w.dt;
    traj.times.push_back(w.t + w.dt);
    traj.positions.push_back(p);
  }
  traj.validate();
  return traj;
}

/// Linear interpolation of a trajectory at the given timestamps, clamped to
/// the trajectory's end points outside its span.
inline std::vector<Vec2> resample(const Trajectory& traj, const std::vector<double>& times) {
  traj.validate();
  std::vector<Vec2> out;
  out.reserve(times.size());
  for (double t : times) {
    if (t <= traj.times.front()) {
      out.push_back(traj.positions.front());
      continue;
    }
    if (t >= traj.times.back()) {
      out.push_back(traj.positions.back());
      continue;
    }
    auto it = std::upper_bound(traj.times.begin(), traj.times.end(), t);
    size_t hi = static_cast<size_t>(it - traj.times.begin());
    size_t lo = hi - 1;
    double u = (t - traj.times[lo]) / (traj.times[hi] - traj.times[lo]);
    out.push_back({traj.positions[lo][0] + u * (traj.positions[hi][0] - traj.positions[lo][0]),
                   traj.positions[lo][1] + u * (traj.positions[hi][1] - traj.positions[lo][1])});
  }
  return out;
}

inline double path_length(const std::vector<Vec2>& pts) {
  double len = 0;
  for (size_t i = 1; i < pts.size(); ++i)
    len += std::hypot(pts[i][0] - pts[i - 1][0], pts[i][1] - pts[i - 1][1]);
  return len;
}

/// Absolute trajectory error: RMSE over time-aligned positions. Both
/// trajectories share origin and frame, so no spatial re-alignment is done;
/// ground truth is interpolated to the estimate's timestamps.
inline double ate(const Trajectory& est, const Trajectory& gt) {
  est.validate();
  gt.validate();
  if (est.size() < 2 || gt.size() < 2)
    throw DimensionError("ate: need at least 2 common timestamps");
  auto gtp = resample(gt, est.times);
  double sq = 0;
  for (size_t i = 0; i < gtp.size(); ++i) {
    double dx = est.positions[i][0] - gtp[i][0];
    double dy = est.positions[i][1] - gtp[i][1];
    sq += dx * dx + dy * dy;
  }
  return std::sqrt(sq / static_cast<double>(gtp.size()));
}

/// Relative trajectory error: the estimate is re-anchored onto ground truth
/// at the start of each consecutive `interval_s` window and the RMSE over
/// the window is averaged across windows. Sequences shorter than one
/// interval fall back to the span-scaled drift and set *scaled.
inline double rte(const Trajectory& est, const Trajectory& gt, double interval_s = 60.0,
                  bool* scaled = nullptr) {
  est.validate();
  gt.validate();
  if (est.size() < 2 || gt.size() < 2)
    throw DimensionError("rte: need at least 2 common timestamps");
  if (interval_s <= 0) throw ConfigError("rte: interval must be positive");
  if (scaled) *scaled = false;
  auto gtp = resample(gt, est.times);

  auto interval_rmse = [&](size_t first, size_t last) {  // inclusive range, anchored at first
    double ax = est.positions[first][0] - gtp[first][0];
    double ay = est.positions[first][1] - gtp[first][1];
    double sq = 0;
    for (size_t i = first; i <= last; ++i) {
      double dx = est.positions[i][0] - ax - gtp[i][0];
      double dy = est.positions[i][1] - ay - gtp[i][1];
      sq += dx * dx + dy * dy;
    }
    return std::sqrt(sq / static_cast<double>(last - first + 1));
  };

  double t0 = est.times.front();
  double span = est.times.back() - t0;
  if (span < interval_s) {
    if (scaled) *scaled = true;
    return interval_rmse(0, static_cast<size_t>(est.size() - 1)) * (interval_s / span);
  }
  double total = 0;
  int64_t count = 0;
  for (double start = t0; start + interval_s <= est.times.back() + 1e-9; start += interval_s) {
    size_t first = static_cast<size_t>(
        std::lower_bound(est.times.begin(), est.times.end(), start - 1e-9) - est.times.begin());
    size_t last = static_cast<size_t>(
        std::upper_bound(est.times.begin(), est.times.end(), start + interval_s + 1e-9) -
        est.times.begin());
    if (last == 0) continue;
    --last;
    if (last <= first) continue;
    total += interval_rmse(first, last);
    ++count;
  }
  if (count == 0) {
    if (scaled) *scaled = true;
    return interval_rmse(0, static_cast<size_t>(est.size() - 1)) * (interval_s / span);
  }
  return total / static_cast<double>(count);
}

/// Position drift error: final-position drift over the ground-truth path
/// length, both taken over the time-aligned trajectories.
inline double pde(const Trajectory& est, const Trajectory& gt) {
  est.validate();
  gt.validate();
  auto gtp = resample(gt, est.times);
  double len = path_length(gtp);
  if (len <= 0) throw NumericError("pde: ground-truth path length is zero");
  double dx = est.positions.back()[0] - gtp.back()[0];
  double dy = est.positions.back()[1] - gtp.back()[1];
  return std::hypot(dx, dy) / len;
}

struct SequenceEval {
  std::string sequence_id;
  double ate_m = 0, rte_m = 0, pde = 0, length_m = 0;
  double vel_mse = 0;       // mean squared window-velocity error
  bool rte_scaled = false;  // rte came from a span-scaled short sequence
};

struct EvalReport {
  std::vector<SequenceEval> sequences;
  double rte_interval_s = 60.0;

  double mean(double SequenceEval::* field) const {
    double s = 0;
    for (const auto& e : sequences) s += e.*field;
    return sequences.empty() ? 0 : s / static_cast<double>(sequences.size());
  }
};

namespace detail {

inline void write_cdf(const std::string& path, std::vector<double> values) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write CDF file: " + path);
  std::sort(values.begin(), values.end());
  out << "value,cumulative_fraction\n";
  for (size_t i = 0; i < values.size(); ++i)
    out << format_double(values[i]) << ","
        << format_double(static_cast<double>(i + 1) / static_cast<double>(values.size())) << "\n";
}

}  // namespace detail

/// Writes the per-sequence metric table, ATE/MSE CDF samples and per-sequence
/// est/gt coordinate files for external plotting. The table header states
/// the metric definitions so the report is self-describing.
inline void export_report(const EvalReport& report, const std::string& out_dir,
                          const std::vector<std::pair<Trajectory, Trajectory>>& aligned = {}) {
  if (report.sequences.empty()) throw StateError("export_report: no evaluated sequences");
  std::filesystem::create_directories(out_dir);

  std::ofstream table(out_dir + "/metrics.csv");
  if (!table) throw IoError("cannot write metric table: " + out_dir + "/metrics.csv");
  table << "# ate_m: RMSE (m) of position error over time-aligned trajectories sharing origin and "
           "frame; no spatial re-alignment\n";
  table << "# rte_m: mean RMSE (m) over consecutive " << format_double(report.rte_interval_s)
        << " s intervals, estimate re-anchored to ground truth at each interval start; sequences "
           "shorter than one interval use span-scaled drift\n";
  table << "# pde: final-position drift divided by ground-truth path length (dimensionless)\n";
  table << "# ground truth is linearly interpolated to estimate timestamps\n";
  table << "sequence,ate_m,rte_m,pde,length_m\n";
  for (const auto& e : report.sequences)
    table << e.sequence_id << "," << format_double(e.ate_m) << "," << format_double(e.rte_m) << ","
          << format_double(e.pde) << "," << format_double(e.length_m) << "\n";
  table << "# aggregate mean_ate_m=" << format_double(report.mean(&SequenceEval::ate_m))
        << " mean_rte_m=" << format_double(report.mean(&SequenceEval::rte_m))
        << " mean_pde=" << format_double(report.mean(&SequenceEval::pde))
        << " mean_vel_mse=" << format_double(report.mean(&SequenceEval::vel_mse)) << "\n";
  table.close();

  std::vector<double> ates, mses;
  for (const auto& e : report.sequences) {
    ates.push_back(e.ate_m);
    mses.push_back(e.vel_mse);
  }
  detail::write_cdf(out_dir + "/ate_cdf.csv", ates);
  detail::write_cdf(out_dir + "/mse_cdf.csv", mses);

  for (size_t i = 0; i < aligned.size() && i < report.sequences.size(); ++i) {
    const auto& [est, gt] = aligned[i];
    auto gtp = resample(gt, est.times);
    std::string path = out_dir + "/" + report.sequences[i].sequence_id + "_trajectory.csv";
    std::ofstream tf(path);
    if (!tf) throw IoError("cannot write trajectory file: " + path);
    tf << "t,est_x,est_y,gt_x,gt_y\n";
    for (size_t k = 0; k < est.times.size(); ++k)
      tf << format_double(est.times[k]) << "," << format_double(est.positions[k][0]) << ","
         << format_double(est.positions[k][1]) << "," << format_double(gtp[k][0]) << ","
         << format_double(gtp[k][1]) << "\n";
  }
}

/// Re-parses a metric table written by export_report (comment lines ignored).
inline std::vector<SequenceEval> parse_metric_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metric table: " + path);
  std::vector<SequenceEval> rows;
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    std::string trimmed = KeyValue::trim(line);
    if (trimmed.empty() || trimmed[0] == '#') continue;
    if (!header_seen) {
      if (trimmed != "sequence,ate_m,rte_m,pde,length_m")
        throw ParseError(path + ": unexpected metric table header: " + trimmed);
      header_seen = true;
      continue;
    }
    std::replace(trimmed.begin(), trimmed.end(), ',', ' ');
    std::istringstream is(trimmed);
    SequenceEval e;
    if (!(is >> e.sequence_id >> e.ate_m >> e.rte_m >> e.pde >> e.length_m))
      throw ParseError(path + ": malformed metric row: " + line);
    rows.push_back(e);
  }
  return rows;
}

}  // namespace dwstrack
