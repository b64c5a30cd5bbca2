#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dwstrack/common.hpp"
#include "dwstrack/data.hpp"
#include "dwstrack/eval.hpp"
#include "dwstrack/model.hpp"
#include "dwstrack/train.hpp"

namespace dwstrack {

/// Prediction over one sequence: non-overlapping windows (stride = window
/// length) run through the model in eval mode, velocities integrated from the
/// ground-truth start.
struct SequencePrediction {
  std::vector<TimedVelocity> velocities;  // one per evaluation window
  Trajectory estimate;
  Trajectory ground_truth;  // empty unless the sequence carries ground truth
  double vel_mse = 0;       // mean squared velocity error (when ground truth present)
  bool has_ground_truth = false;
};

inline Trajectory ground_truth_trajectory(const ImuSequence& seq) {
  if (!seq.has_ground_truth())
    throw StateError("sequence " + seq.sequence_id + " carries no ground truth");
  Trajectory t;
  double dt = 1.0 / seq.sample_rate_hz;
  for (int64_t k = 0; k < seq.length(); ++k) {
    t.times.push_back(static_cast<double>(k) * dt);
    t.positions.push_back(seq.gt_position[static_cast<size_t>(k)]);
  }
  t.validate();
  return t;
}

inline SequencePrediction predict_sequence(DwsformerModel& model, const ImuSequence& seq,
                                           const NormStats& norm, int64_t batch_size = 64) {
  const auto& cfg = model.config();
  int64_t window_len = cfg.window_len;
  if (seq.length() < window_len)
    throw DimensionError("sequence " + seq.sequence_id + " has " + std::to_string(seq.length()) +
                         " samples; the model requires at least window_len=" +
                         std::to_string(window_len));
  double dt = 1.0 / seq.sample_rate_hz;
  double window_dur = static_cast<double>(window_len) * dt;

  std::vector<ImuWindow> windows;
  for (int64_t start = 0; start + window_len <= seq.length(); start += window_len) {
    ImuWindow w;
    w.window_len = window_len;
    w.sequence_id = seq.sequence_id;
    w.start = start;
    w.features = extract_window_features(seq, start, window_len);
    if (seq.has_ground_truth()) {
      double vx = 0, vy = 0;
      for (int64_t l = 0; l < window_len; ++l) {
        auto idx = static_cast<size_t>(start + l);
        vx += seq.gt_velocity[idx][0];
        vy += seq.gt_velocity[idx][1];
      }
      w.target_velocity = {vx / static_cast<double>(window_len),
                           vy / static_cast<double>(window_len)};
    }
    windows.push_back(std::move(w));
  }

  SequencePrediction out;
  out.has_ground_truth = seq.has_ground_truth();
  int64_t d = cfg.output_dim;
  double mse_sum = 0;
  for (size_t at = 0; at < windows.size(); at += static_cast<size_t>(batch_size)) {
    std::vector<size_t> idx;
    for (size_t i = at; i < std::min(windows.size(), at + static_cast<size_t>(batch_size)); ++i)
      idx.push_back(i);
    auto [x, targ] = make_batch(windows, idx, norm, d);
    auto pred = model.forward(x, Mode::kEval);
    for (size_t i = 0; i < idx.size(); ++i) {
      const ImuWindow& w = windows[idx[i]];
      TimedVelocity tv;
      tv.t = static_cast<double>(w.start) * dt;
      tv.dt = window_dur;
      tv.v = {static_cast<double>(pred.values()[i * static_cast<size_t>(d)]),
              d >= 2 ? static_cast<double>(pred.values()[i * static_cast<size_t>(d) + 1]) : 0.0};
      out.velocities.push_back(tv);
      if (out.has_ground_truth) {
        for (int64_t k = 0; k < d; ++k) {
          double target = k < 2 ? w.target_velocity[static_cast<size_t>(k)] : 0.0;
          double diff = static_cast<double>(pred.values()[i * static_cast<size_t>(d) +
                                                          static_cast<size_t>(k)]) -
                        target;
          mse_sum += diff * diff;
        }
      }
    }
  }
  Vec2 origin{0, 0};
  if (out.has_ground_truth) {
    origin = seq.gt_position[0];
    out.ground_truth = ground_truth_trajectory(seq);
    out.vel_mse = mse_sum / static_cast<double>(out.velocities.size() * static_cast<size_t>(d));
  }
  out.estimate = integrate(out.velocities, origin);
  return out;
}

/// Full per-sequence evaluation: prediction, trajectory reconstruction and
/// the three trajectory metrics.
inline SequenceEval evaluate_sequence(DwsformerModel& model, const ImuSequence& seq,
                                      const NormStats& norm, double rte_interval_s = 60.0,
                                      std::pair<Trajectory, Trajectory>* aligned = nullptr,
                                      int64_t batch_size = 64) {
  auto pred = predict_sequence(model, seq, norm, batch_size);
  if (!pred.has_ground_truth)
    throw StateError("evaluate_sequence: sequence " + seq.sequence_id + " carries no ground truth");
  SequenceEval e;
  e.sequence_id = seq.sequence_id;
  e.ate_m = ate(pred.estimate, pred.ground_truth);
  e.rte_m = rte(pred.estimate, pred.ground_truth, rte_interval_s, &e.rte_scaled);
  e.pde = pde(pred.estimate, pred.ground_truth);
  e.length_m = path_length(resample(pred.ground_truth, pred.estimate.times));
  e.vel_mse = pred.vel_mse;
  if (aligned) *aligned = {pred.estimate, pred.ground_truth};
  return e;
}

}  // namespace dwstrack
