#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "dwstrack/checkpoint.hpp"
#include "dwstrack/common.hpp"
#include "dwstrack/config.hpp"
#include "dwstrack/data.hpp"
#include "dwstrack/model.hpp"
#include "dwstrack/ops.hpp"
#include "dwstrack/tensor.hpp"

namespace dwstrack {

/// Mean over all elements of the squared prediction error.
template <typename T>
TensorT<T> mse_loss(const TensorT<T>& pred, const TensorT<T>& target) {
  if (pred.shape() != target.shape())
    throw DimensionError("mse_loss: shape mismatch, prediction " + shape_to_string(pred.shape()) +
                         " vs target " + shape_to_string(target.shape()));
  auto d = sub(pred, target);
  return mean_all(elementwise_mul(d, d));
}

struct TrainConfig {
  double lr = 1e-3;
  int64_t patience = 10;        // epochs without val improvement before a decay
  double decay_factor = 0.1;
  double termination_lr = 1e-6;
  int64_t batch_size = 128;
  int64_t max_epochs = 200;
  uint64_t seed = 42;
  double clip_norm = 10.0;      // global gradient-norm clip; <= 0 disables
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void validate() const {
    if (!(decay_factor > 0 && decay_factor < 1))
      throw ConfigError("train: decay_factor must be in (0,1)");
    if (!(termination_lr < lr)) throw ConfigError("train: termination_lr must be below the initial lr");
    if (batch_size < 1 || max_epochs < 1 || patience < 1)
      throw ConfigError("train: batch_size, max_epochs and patience must be >= 1");
  }

  void to_kv(KeyValue& kv, const std::string& prefix = "train.") const {
    kv.set(prefix + "lr", format_double(lr));
    kv.set(prefix + "patience", std::to_string(patience));
    kv.set(prefix + "decay_factor", format_double(decay_factor));
    kv.set(prefix + "termination_lr", format_double(termination_lr));
    kv.set(prefix + "batch_size", std::to_string(batch_size));
    kv.set(prefix + "max_epochs", std::to_string(max_epochs));
    kv.set(prefix + "seed", std::to_string(seed));
    kv.set(prefix + "clip_norm", format_double(clip_norm));
  }

  static TrainConfig from_kv(const KeyValue& kv, const std::string& prefix = "train.") {
    TrainConfig c;
    c.lr = kv.get_double_or(prefix + "lr", c.lr);
    c.patience = kv.get_int_or(prefix + "patience", c.patience);
    c.decay_factor = kv.get_double_or(prefix + "decay_factor", c.decay_factor);
    c.termination_lr = kv.get_double_or(prefix + "termination_lr", c.termination_lr);
    c.batch_size = kv.get_int_or(prefix + "batch_size", c.batch_size);
    c.max_epochs = kv.get_int_or(prefix + "max_epochs", c.max_epochs);
    c.seed = static_cast<uint64_t>(kv.get_int_or(prefix + "seed", static_cast<int64_t>(c.seed)));
    c.clip_norm = kv.get_double_or(prefix + "clip_norm", c.clip_norm);
    c.validate();
    return c;
  }
};

/// Bias-corrected Adam. Parameters are visited in name order so the update
/// sequence is fixed regardless of registration order.
template <typename T>
class AdamT {
 public:
  AdamT(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamRegistryT<T>& reg) {
    ++t_;
    std::vector<size_t> order(reg.params.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return reg.params[a].first < reg.params[b].first; });
    double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (size_t idx : order) {
      auto& [name, p] = reg.params[idx];
      if (!p.has_grad())
        throw StateError("adam: missing gradient for parameter '" + name + "'");
      const auto& g = p.grad();
      auto& m = m_[name];
      auto& v = v_[name];
      if (m.empty()) m.assign(g.size(), T(0));
      if (v.empty()) v.assign(g.size(), T(0));
      auto& w = p.mutable_values();
      for (size_t i = 0; i < g.size(); ++i) {
        m[i] = static_cast<T>(b1_) * m[i] + static_cast<T>(1.0 - b1_) * g[i];
        v[i] = static_cast<T>(b2_) * v[i] + static_cast<T>(1.0 - b2_) * g[i] * g[i];
        T mhat = m[i] / static_cast<T>(c1);
        T vhat = v[i] / static_cast<T>(c2);
        w[i] -= static_cast<T>(lr_) * mhat / (std::sqrt(vhat) + static_cast<T>(eps_));
      }
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }
  std::map<std::string, std::vector<T>>& first_moments() { return m_; }
  std::map<std::string, std::vector<T>>& second_moments() { return v_; }

 private:
  double lr_, b1_, b2_, eps_;
  int64_t t_ = 0;
  std::map<std::string, std::vector<T>> m_, v_;
};

/// Reduce-on-plateau schedule: when the validation loss has not improved for
/// `patience` consecutive epochs the rate is multiplied by `factor`; training
/// terminates once the rate drops strictly below `termination_lr`.
class PlateauSchedule {
 public:
  PlateauSchedule(double initial_lr, int64_t patience, double factor, double termination_lr)
      : lr_(initial_lr), patience_(patience), factor_(factor), term_(termination_lr) {}

  struct Decision {
    double lr;
    bool decayed = false;
    bool terminate = false;
  };

  Decision update(double val_loss) {
    Decision d{lr_};
    if (!seen_ || val_loss < best_) {
      best_ = val_loss;
      seen_ = true;
      wait_ = 0;
    } else {
      ++wait_;
      if (wait_ >= patience_) {
        lr_ *= factor_;
        wait_ = 0;
        d.decayed = true;
      }
    }
    d.lr = lr_;
    d.terminate = lr_ < term_;
    return d;
  }

  double lr() const { return lr_; }
  double best() const { return best_; }
  int64_t wait() const { return wait_; }
  bool seen() const { return seen_; }
  void restore(double lr, double best, int64_t wait, bool seen) {
    lr_ = lr;
    best_ = best;
    wait_ = wait;
    seen_ = seen;
  }

 private:
  double lr_;
  int64_t patience_;
  double factor_, term_;
  double best_ = std::numeric_limits<double>::infinity();
  int64_t wait_ = 0;
  bool seen_ = false;
};

/// Scales all gradients so their global L2 norm does not exceed max_norm.
/// Returns the pre-clip norm.
template <typename T>
double clip_gradients(ParamRegistryT<T>& reg, double max_norm) {
  double sq = 0;
  for (auto& p : reg.params) {
    if (!p.second.has_grad()) continue;
    for (T g : p.second.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    T s = static_cast<T>(max_norm / norm);
    for (auto& p : reg.params) {
      if (!p.second.has_grad()) continue;
      for (auto& g : p.second.grad_buffer()) g *= s;
    }
  }
  return norm;
}

/// Assembles a [B, 6, L] feature tensor and [B, D] target tensor from
/// normalized windows.
inline std::pair<Tensor, Tensor> make_batch(const std::vector<ImuWindow>& windows,
                                            const std::vector<size_t>& indices, const NormStats& norm,
                                            int64_t output_dim) {
  if (indices.empty()) throw DimensionError("make_batch: empty index set");
  int64_t len = windows[indices[0]].window_len;
  auto b = static_cast<int64_t>(indices.size());
  std::vector<float> feats(static_cast<size_t>(b * 6 * len));
  std::vector<float> targets(static_cast<size_t>(b * output_dim), 0.0f);
  for (int64_t i = 0; i < b; ++i) {
    const ImuWindow& w = windows[indices[static_cast<size_t>(i)]];
    if (w.window_len != len) throw DimensionError("make_batch: windows of mixed length in one batch");
    float* dst = feats.data() + i * 6 * len;
    for (int ch = 0; ch < 6; ++ch) {
      auto c = static_cast<size_t>(ch);
      const float* src = w.features.data() + ch * len;
      for (int64_t l = 0; l < len; ++l)
        dst[ch * len + l] = static_cast<float>((src[l] - norm.mean[c]) / norm.std[c]);
    }
    for (int64_t d = 0; d < std::min<int64_t>(output_dim, 2); ++d)
      targets[static_cast<size_t>(i * output_dim + d)] =
          static_cast<float>(w.target_velocity[static_cast<size_t>(d)]);
  }
  return {Tensor::from_values({b, 6, len}, std::move(feats)),
          Tensor::from_values({b, output_dim}, std::move(targets))};
}

/// Mean squared velocity error over a window set, in eval mode, no recording.
inline double eval_mse(DwsformerModel& model, const std::vector<ImuWindow>& windows,
                       const NormStats& norm, int64_t batch_size) {
  if (windows.empty()) throw StateError("eval_mse: empty window set");
  int64_t d = model.config().output_dim;
  double total = 0;
  int64_t count = 0;
  for (size_t at = 0; at < windows.size(); at += static_cast<size_t>(batch_size)) {
    std::vector<size_t> idx;
    for (size_t i = at; i < std::min(windows.size(), at + static_cast<size_t>(batch_size)); ++i)
      idx.push_back(i);
    auto [x, t] = make_batch(windows, idx, norm, d);
    auto pred = model.forward(x, Mode::kEval);
    double loss = static_cast<double>(mse_loss(pred, t).item());
    total += loss * static_cast<double>(idx.size());
    count += static_cast<int64_t>(idx.size());
  }
  return total / static_cast<double>(count);
}

struct EpochRow {
  int64_t epoch;
  double train_loss, val_loss, lr;
};

struct TrainResult {
  std::vector<EpochRow> log;
  double best_val = std::numeric_limits<double>::infinity();
  int64_t best_epoch = -1;
  std::string best_checkpoint, last_checkpoint, log_path;
  bool terminated_by_lr = false;
};

inline void write_epoch_log(const std::vector<EpochRow>& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write epoch log: " + path);
  out << "epoch,train_loss,val_loss,lr\n";
  for (const auto& row : log)
    out << row.epoch << "," << format_double(row.train_loss) << "," << format_double(row.val_loss)
        << "," << format_double(row.lr) << "\n";
}

inline std::vector<EpochRow> read_epoch_log(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open epoch log: " + path);
  std::string line;
  std::getline(in, line);
  std::vector<EpochRow> rows;
  while (std::getline(in, line)) {
    if (KeyValue::trim(line).empty()) continue;
    EpochRow r{};
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream is(line);
    if (!(is >> r.epoch >> r.train_loss >> r.val_loss >> r.lr))
      throw ParseError(path + ": malformed epoch log row: " + line);
    rows.push_back(r);
  }
  return rows;
}

namespace detail {

inline Checkpoint make_train_checkpoint(DwsformerModel& model, AdamT<float>& adam,
                                        PlateauSchedule& sched, const NormStats& norm,
                                        const TrainConfig& tc, int64_t epoch, double best_val,
                                        int64_t best_epoch) {
  Checkpoint ck = snapshot_model(model);
  for (auto& [name, m] : adam.first_moments())
    ck.opt.push_back({"m." + name, {static_cast<int64_t>(m.size())}, m});
  for (auto& [name, v] : adam.second_moments())
    ck.opt.push_back({"v." + name, {static_cast<int64_t>(v.size())}, v});
  ck.meta.set("epoch", std::to_string(epoch));
  ck.meta.set("adam_t", std::to_string(adam.step_count()));
  ck.meta.set("lr", format_double(sched.lr()));
  ck.meta.set("sched_best", format_double(sched.best()));
  ck.meta.set("sched_wait", std::to_string(sched.wait()));
  ck.meta.set("sched_seen", sched.seen() ? "1" : "0");
  ck.meta.set("best_val", format_double(best_val));
  ck.meta.set("best_epoch", std::to_string(best_epoch));
  ck.meta.set("seed", std::to_string(tc.seed));
  std::string mean_s, std_s;
  for (int i = 0; i < 6; ++i) {
    mean_s += (i ? " " : "") + format_double(norm.mean[static_cast<size_t>(i)]);
    std_s += (i ? " " : "") + format_double(norm.std[static_cast<size_t>(i)]);
  }
  ck.meta.set("norm.mean", mean_s);
  ck.meta.set("norm.std", std_s);
  tc.to_kv(ck.meta);
  return ck;
}

}  // namespace detail

inline NormStats norm_from_checkpoint(const Checkpoint& ck) {
  NormStats norm;
  auto mean = KeyValue::parse_double_list(ck.meta.get("norm.mean"), "norm.mean");
  auto stdv = KeyValue::parse_double_list(ck.meta.get("norm.std"), "norm.std");
  if (mean.size() != 6 || stdv.size() != 6)
    throw ParseError("checkpoint: norm stats must have 6 channels");
  for (size_t i = 0; i < 6; ++i) {
    norm.mean[i] = mean[i];
    norm.std[i] = stdv[i];
  }
  return norm;
}

/// MSE training loop with Adam and the plateau schedule. Keeps the best-
/// validation checkpoint plus the latest state for resuming; a non-finite
/// loss aborts with the last good checkpoint left on disk. Fully reproducible
/// from the seed: epoch e draws its batch order from derive_seed(seed, e).
inline TrainResult train_model(DwsformerModel& model, const std::vector<ImuWindow>& train_windows,
                               const std::vector<ImuWindow>& val_windows, const NormStats& norm,
                               const TrainConfig& tc, const std::string& out_dir,
                               const Checkpoint* resume = nullptr) {
  tc.validate();
  if (train_windows.empty() || val_windows.empty())
    throw ConfigError("train: both the train and val splits must be non-empty");
  std::filesystem::create_directories(out_dir);

  AdamT<float> adam(tc.lr, tc.beta1, tc.beta2, tc.eps);
  PlateauSchedule sched(tc.lr, tc.patience, tc.decay_factor, tc.termination_lr);
  TrainResult res;
  res.best_checkpoint = out_dir + "/best.ckpt";
  res.last_checkpoint = out_dir + "/last.ckpt";
  res.log_path = out_dir + "/epoch_log.csv";
  int64_t start_epoch = 1;

  if (resume) {
    load_into_model(*resume, model);
    adam.set_step_count(resume->meta.get_int("adam_t"));
    for (const auto& blob : resume->opt) {
      if (blob.name.rfind("m.", 0) == 0)
        adam.first_moments()[blob.name.substr(2)] = blob.data;
      else if (blob.name.rfind("v.", 0) == 0)
        adam.second_moments()[blob.name.substr(2)] = blob.data;
    }
    sched.restore(resume->meta.get_double("lr"), resume->meta.get_double("sched_best"),
                  resume->meta.get_int("sched_wait"), resume->meta.get_or("sched_seen", "0") == "1");
    adam.set_lr(sched.lr());
    res.best_val = resume->meta.get_double("best_val");
    res.best_epoch = resume->meta.get_int("best_epoch");
    start_epoch = resume->meta.get_int("epoch") + 1;
  }

  int64_t d = model.config().output_dim;
  auto n_train = train_windows.size();

  for (int64_t epoch = start_epoch; epoch <= tc.max_epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(tc.seed, static_cast<uint64_t>(epoch)));
    std::vector<size_t> perm(n_train);
    for (size_t i = 0; i < n_train; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);

    double train_sum = 0;
    for (size_t at = 0; at < n_train; at += static_cast<size_t>(tc.batch_size)) {
      std::vector<size_t> idx(perm.begin() + static_cast<std::ptrdiff_t>(at),
                              perm.begin() + static_cast<std::ptrdiff_t>(
                                                 std::min(n_train, at + static_cast<size_t>(tc.batch_size))));
      auto [x, t] = make_batch(train_windows, idx, norm, d);
      Tape tape;
      double lval;
      {
        TapeScope<float> scope(tape);
        auto pred = model.forward(x, Mode::kTrain);
        auto loss = mse_loss(pred, t);
        lval = static_cast<double>(loss.item());
        if (!std::isfinite(lval))
          throw NumericError("training diverged at epoch " + std::to_string(epoch) +
                             " (non-finite loss); last good checkpoint: " + res.last_checkpoint);
        tape.backward(loss);
      }
      if (tc.clip_norm > 0) clip_gradients(model.params(), tc.clip_norm);
      adam.step(model.params());
      model.zero_grads();
      train_sum += lval * static_cast<double>(idx.size());
    }
    double train_loss = train_sum / static_cast<double>(n_train);
    double val_loss = eval_mse(model, val_windows, norm, tc.batch_size);
    if (!std::isfinite(val_loss))
      throw NumericError("training diverged at epoch " + std::to_string(epoch) +
                         " (non-finite validation loss); last good checkpoint: " + res.last_checkpoint);

    res.log.push_back({epoch, train_loss, val_loss, sched.lr()});

    bool improved = val_loss < res.best_val;
    if (improved) {
      res.best_val = val_loss;
      res.best_epoch = epoch;
    }
    auto decision = sched.update(val_loss);
    if (decision.decayed) adam.set_lr(decision.lr);

    Checkpoint ck = detail::make_train_checkpoint(model, adam, sched, norm, tc, epoch, res.best_val,
                                                  res.best_epoch);
    write_checkpoint(ck, res.last_checkpoint);
    if (improved) write_checkpoint(ck, res.best_checkpoint);

    if (decision.terminate) {
      res.terminated_by_lr = true;
      break;
    }
  }
  write_epoch_log(res.log, res.log_path);
  return res;
}

}  // namespace dwstrack
