#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dwstrack/common.hpp"
#include "dwstrack/config.hpp"

namespace dwstrack {

using Vec2 = std::array<double, 2>;

/// One recorded IMU sequence. Rows are implicit at k / sample_rate_hz.
/// Ground-truth position/velocity are optional (present together or not).
struct ImuSequence {
  std::string sequence_id;
  double sample_rate_hz = 0;
  std::vector<std::array<double, 3>> gyro;   // rad/s
  std::vector<std::array<double, 3>> accel;  // m/s^2
  std::vector<Vec2> gt_position;             // m
  std::vector<Vec2> gt_velocity;             // m/s

  int64_t length() const { return static_cast<int64_t>(gyro.size()); }
  bool has_ground_truth() const { return !gt_position.empty(); }

  void validate() const {
    if (sample_rate_hz <= 0) throw ConfigError("sequence " + sequence_id + ": sample rate must be > 0");
    if (accel.size() != gyro.size())
      throw ParseError("sequence " + sequence_id + ": gyro/accel length mismatch");
    if (has_ground_truth() &&
        (gt_position.size() != gyro.size() || gt_velocity.size() != gyro.size()))
      throw ParseError("sequence " + sequence_id + ": ground-truth length mismatch");
  }
};

inline constexpr const char* kImuFormatTag = "dwstrack-imu v1";
inline constexpr const char* kImuColsBase = "gyro_x,gyro_y,gyro_z,accel_x,accel_y,accel_z";
inline constexpr const char* kImuColsGt =
    "gyro_x,gyro_y,gyro_z,accel_x,accel_y,accel_z,gt_px,gt_py,gt_vx,gt_vy";

/// Parses the v1 columnar sequence format:
///   dwstrack-imu v1 rate=<hz> cols=<names>
/// followed by one whitespace-separated row per sample.
inline ImuSequence load_sequence(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open sequence file: " + path);
  std::string header;
  if (!std::getline(in, header)) throw ParseError(path + ":1: empty file");

  std::istringstream hs(header);
  std::string magic, ver, rate_field, cols_field;
  hs >> magic >> ver >> rate_field >> cols_field;
  if (magic != "dwstrack-imu" || ver != "v1")
    throw ParseError(path + ":1: not a '" + std::string(kImuFormatTag) + "' file");
  if (rate_field.rfind("rate=", 0) != 0 || cols_field.rfind("cols=", 0) != 0)
    throw ParseError(path + ":1: header must carry rate=<hz> cols=<names>");

  ImuSequence seq;
  seq.sequence_id = path;
  auto slash = path.find_last_of('/');
  if (slash != std::string::npos) seq.sequence_id = path.substr(slash + 1);
  auto dot = seq.sequence_id.rfind('.');
  if (dot != std::string::npos) seq.sequence_id = seq.sequence_id.substr(0, dot);
  seq.sample_rate_hz = KeyValue::parse_double(rate_field.substr(5), "rate");
  if (seq.sample_rate_hz <= 0) throw ParseError(path + ":1: rate must be positive");

  std::string cols = cols_field.substr(5);
  bool with_gt;
  if (cols == kImuColsBase) {
    with_gt = false;
  } else if (cols == kImuColsGt) {
    with_gt = true;
  } else {
    // Identify the first column that deviates from the expected layout.
    std::vector<std::string> expect, got;
    auto split = [](const std::string& s, std::vector<std::string>& out) {
      std::istringstream is(s);
      std::string tok;
      while (std::getline(is, tok, ',')) out.push_back(tok);
    };
    split(kImuColsGt, expect);
    split(cols, got);
    for (size_t i = 0; i < expect.size(); ++i) {
      if (i >= got.size() || got[i] != expect[i])
        throw ParseError(path + ":1: column " + std::to_string(i + 1) + " expected '" + expect[i] +
                         "'" + (i < got.size() ? " but found '" + got[i] + "'" : " but it is missing"));
    }
    throw ParseError(path + ":1: unsupported column layout '" + cols + "'");
  }

  int ncols = with_gt ? 10 : 6;
  std::string line;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    std::string trimmed = KeyValue::trim(line);
    if (trimmed.empty()) continue;
    std::istringstream ls(trimmed);
    std::array<double, 10> v{};
    int n = 0;
    double x;
    while (n < 10 && ls >> x) v[static_cast<size_t>(n++)] = x;
    std::string leftover;
    if (ls >> leftover)
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(ncols) +
                       " columns, found more");
    if (n != ncols)
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(ncols) +
                       " columns, found " + std::to_string(n));
    for (int i = 0; i < n; ++i)
      if (!std::isfinite(v[static_cast<size_t>(i)]))
        throw ParseError(path + ":" + std::to_string(lineno) + ": non-finite value in column " +
                         std::to_string(i + 1));
    seq.gyro.push_back({v[0], v[1], v[2]});
    seq.accel.push_back({v[3], v[4], v[5]});
    if (with_gt) {
      seq.gt_position.push_back({v[6], v[7]});
      seq.gt_velocity.push_back({v[8], v[9]});
    }
  }
  seq.validate();
  return seq;
}

/// Writes the v1 format. Doubles are printed with enough digits to
/// round-trip bit-exactly.
inline void save_sequence(const ImuSequence& seq, const std::string& path) {
  seq.validate();
  std::ofstream out(path);
  if (!out) throw IoError("cannot write sequence file: " + path);
  out << kImuFormatTag << " rate=" << format_double(seq.sample_rate_hz) << " cols="
      << (seq.has_ground_truth() ? kImuColsGt : kImuColsBase) << "\n";
  for (int64_t k = 0; k < seq.length(); ++k) {
    auto idx = static_cast<size_t>(k);
    out << format_double(seq.gyro[idx][0]) << ' ' << format_double(seq.gyro[idx][1]) << ' '
        << format_double(seq.gyro[idx][2]) << ' ' << format_double(seq.accel[idx][0]) << ' '
        << format_double(seq.accel[idx][1]) << ' ' << format_double(seq.accel[idx][2]);
    if (seq.has_ground_truth()) {
      out << ' ' << format_double(seq.gt_position[idx][0]) << ' ' << format_double(seq.gt_position[idx][1])
          << ' ' << format_double(seq.gt_velocity[idx][0]) << ' ' << format_double(seq.gt_velocity[idx][1]);
    }
    out << "\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

/// One training sample: a 6 x L feature block (gyro xyz rows then accel xyz
/// rows) and the mean ground-truth velocity over the window.
struct ImuWindow {
  std::vector<float> features;  // row-major 6 x L
  int64_t window_len = 0;
  std::array<double, 2> target_velocity{};
  std::string sequence_id;
  int64_t start = 0;
};

struct WindowingResult {
  std::vector<ImuWindow> windows;
  std::string notice;  // non-empty when the sequence was too short
};

/// 6 x L feature block for one window: gyro xyz rows then accel xyz rows.
inline std::vector<float> extract_window_features(const ImuSequence& seq, int64_t start,
                                                  int64_t window_len) {
  if (start < 0 || start + window_len > seq.length())
    throw DimensionError("extract_window_features: window [" + std::to_string(start) + "," +
                         std::to_string(start + window_len) + ") outside sequence of length " +
                         std::to_string(seq.length()));
  std::vector<float> f(static_cast<size_t>(6 * window_len));
  for (int64_t l = 0; l < window_len; ++l) {
    auto idx = static_cast<size_t>(start + l);
    for (int axis = 0; axis < 3; ++axis) {
      f[static_cast<size_t>(axis * window_len + l)] =
          static_cast<float>(seq.gyro[idx][static_cast<size_t>(axis)]);
      f[static_cast<size_t>((3 + axis) * window_len + l)] =
          static_cast<float>(seq.accel[idx][static_cast<size_t>(axis)]);
    }
  }
  return f;
}

/// Cuts windows at starts 0, stride, 2*stride, ... while start + L <= T.
/// Targets are the arithmetic mean of gt_velocity over the window's frames.
inline WindowingResult make_windows(const ImuSequence& seq, int64_t window_len, int64_t stride) {
  if (window_len < 1 || stride < 1) throw ConfigError("make_windows: window_len and stride must be >= 1");
  if (!seq.has_ground_truth())
    throw StateError("make_windows: sequence " + seq.sequence_id + " has no ground-truth velocity");
  WindowingResult res;
  int64_t total = seq.length();
  if (total < window_len) {
    res.notice = "sequence " + seq.sequence_id + " has " + std::to_string(total) +
                 " samples, shorter than window length " + std::to_string(window_len) +
                 "; no windows produced";
    return res;
  }
  for (int64_t start = 0; start + window_len <= total; start += stride) {
    ImuWindow w;
    w.window_len = window_len;
    w.sequence_id = seq.sequence_id;
    w.start = start;
    w.features = extract_window_features(seq, start, window_len);
    double vx = 0, vy = 0;
    for (int64_t l = 0; l < window_len; ++l) {
      auto idx = static_cast<size_t>(start + l);
      vx += seq.gt_velocity[idx][0];
      vy += seq.gt_velocity[idx][1];
    }
    w.target_velocity = {vx / static_cast<double>(window_len), vy / static_cast<double>(window_len)};
    res.windows.push_back(std::move(w));
  }
  return res;
}

/// Per-channel standardization statistics, computed from the training split
/// only and persisted into checkpoints.
struct NormStats {
  std::array<double, 6> mean{};
  std::array<double, 6> std{1, 1, 1, 1, 1, 1};
  std::string notice;  // non-empty when a zero-variance channel was clamped
};

inline NormStats normalize_stats(const std::vector<ImuWindow>& train_windows) {
  if (train_windows.empty()) throw StateError("normalize_stats: empty training window set");
  NormStats s;
  std::array<double, 6> sum{}, sumsq{};
  int64_t count = 0;
  for (const auto& w : train_windows) {
    int64_t l = w.window_len;
    for (int ch = 0; ch < 6; ++ch) {
      const float* row = w.features.data() + ch * l;
      for (int64_t i = 0; i < l; ++i) {
        double v = row[i];
        sum[static_cast<size_t>(ch)] += v;
        sumsq[static_cast<size_t>(ch)] += v * v;
      }
    }
    count += l;
  }
  for (int ch = 0; ch < 6; ++ch) {
    auto c = static_cast<size_t>(ch);
    s.mean[c] = sum[c] / static_cast<double>(count);
    double var = sumsq[c] / static_cast<double>(count) - s.mean[c] * s.mean[c];
    double sd = std::sqrt(std::max(var, 0.0));
    if (sd <= 1e-12) {
      s.std[c] = 1.0;
      if (!s.notice.empty()) s.notice += "; ";
      s.notice += "channel " + std::to_string(ch) + " has zero variance, std clamped to 1";
    } else {
      s.std[c] = sd;
    }
  }
  return s;
}

inline ImuWindow apply_normalization(const ImuWindow& w, const NormStats& stats) {
  ImuWindow out = w;
  int64_t l = w.window_len;
  for (int ch = 0; ch < 6; ++ch) {
    auto c = static_cast<size_t>(ch);
    float* row = out.features.data() + ch * l;
    for (int64_t i = 0; i < l; ++i)
      row[i] = static_cast<float>((row[i] - stats.mean[c]) / stats.std[c]);
  }
  return out;
}

/// Disjoint per-sequence train/val/test split.
struct SplitSpec {
  std::vector<std::string> train, val, test;
  uint64_t seed = 0;

  void validate() const {
    std::vector<std::string> all;
    all.insert(all.end(), train.begin(), train.end());
    all.insert(all.end(), val.begin(), val.end());
    all.insert(all.end(), test.begin(), test.end());
    auto sorted = all;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw ConfigError("split: sequence ids are not disjoint across train/val/test");
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write split file: " + path);
    out << "dwstrack-split v1 seed=" << seed << "\n";
    for (const auto& id : train) out << "train " << id << "\n";
    for (const auto& id : val) out << "val " << id << "\n";
    for (const auto& id : test) out << "test " << id << "\n";
  }

  static SplitSpec load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open split file: " + path);
    std::string header;
    if (!std::getline(in, header)) throw ParseError(path + ":1: empty split file");
    std::istringstream hs(header);
    std::string magic, ver, seed_field;
    hs >> magic >> ver >> seed_field;
    if (magic != "dwstrack-split" || ver != "v1")
      throw ParseError(path + ":1: not a dwstrack-split v1 file");
    SplitSpec s;
    if (seed_field.rfind("seed=", 0) == 0)
      s.seed = static_cast<uint64_t>(KeyValue::parse_int(seed_field.substr(5), "seed"));
    std::string line;
    int lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      std::string trimmed = KeyValue::trim(line);
      if (trimmed.empty() || trimmed[0] == '#') continue;
      std::istringstream ls(trimmed);
      std::string part, id;
      ls >> part >> id;
      if (id.empty())
        throw ParseError(path + ":" + std::to_string(lineno) + ": expected '<split> <sequence-id>'");
      if (part == "train")
        s.train.push_back(id);
      else if (part == "val")
        s.val.push_back(id);
      else if (part == "test")
        s.test.push_back(id);
      else
        throw ParseError(path + ":" + std::to_string(lineno) + ": unknown split '" + part + "'");
    }
    s.validate();
    return s;
  }
};

/// Seeded 8:1:1 split by sequence count. Degenerate corpora put everything
/// in train and report it through the notice.
inline SplitSpec make_split(std::vector<std::string> ids, uint64_t seed, std::string* notice = nullptr) {
  SplitSpec s;
  s.seed = seed;
  std::mt19937_64 rng(derive_seed(seed, 17));
  std::shuffle(ids.begin(), ids.end(), rng);
  auto n = static_cast<int64_t>(ids.size());
  int64_t n_val = n / 10;
  int64_t n_test = n / 10;
  int64_t n_train = n - n_val - n_test;
  if ((n_val == 0 || n_test == 0) && notice)
    *notice = "corpus of " + std::to_string(n) + " sequences is too small for an 8:1:1 split; val/test " +
              "may be empty";
  for (int64_t i = 0; i < n; ++i) {
    const auto& id = ids[static_cast<size_t>(i)];
    if (i < n_train)
      s.train.push_back(id);
    else if (i < n_train + n_val)
      s.val.push_back(id);
    else
      s.test.push_back(id);
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic trajectory / IMU generation
// ---------------------------------------------------------------------------

/// Piecewise-constant motion segment: the carrier holds `speed` and turns at
/// `turn_rate` for `duration` seconds.
struct MotionSegment {
  double duration_s = 0;
  double speed_mps = 0;
  double turn_rate_radps = 0;
};

/// Synthesis profile. Fixed segments describe one trajectory; when
/// random_segments > 0 each synthesized sequence draws its own segments from
/// the given ranges instead.
struct MotionProfile {
  double sample_rate_hz = 200;
  double initial_heading_rad = 0;
  std::vector<MotionSegment> segments;

  double gyro_noise_std = 0.0;   // rad/s
  double accel_noise_std = 0.0;  // m/s^2
  double gyro_bias_mag = 0.0;    // per-axis bias drawn in [-mag, mag]
  double accel_bias_mag = 0.0;
  Vec2 gravity_planar{0, 0};     // in-plane constant added to world acceleration
                                 // before rotation into the body frame; {0,0}
                                 // models gravity as already subtracted

  int64_t random_segments = 0;
  Vec2 speed_range{0.8, 1.6};
  Vec2 turn_rate_range{-0.6, 0.6};
  Vec2 segment_duration_range{2.0, 6.0};
  double straight_prob = 0.5;

  void validate() const {
    if (sample_rate_hz <= 0) throw ConfigError("profile: sample_rate_hz must be > 0");
    if (random_segments < 0) throw ConfigError("profile: random_segments must be >= 0");
    if (random_segments == 0 && segments.empty())
      throw ConfigError("profile: needs fixed segments or random_segments > 0");
    for (const auto& seg : segments) {
      if (seg.duration_s <= 0) throw ConfigError("profile: segment duration must be > 0");
      if (seg.speed_mps < 0) throw ConfigError("profile: segment speed must be >= 0");
    }
    if (gyro_noise_std < 0 || accel_noise_std < 0 || gyro_bias_mag < 0 || accel_bias_mag < 0)
      throw ConfigError("profile: noise/bias magnitudes must be >= 0");
    if (random_segments > 0) {
      if (speed_range[0] < 0 || speed_range[1] < speed_range[0])
        throw ConfigError("profile: speed_range must satisfy 0 <= lo <= hi");
      if (segment_duration_range[0] <= 0 || segment_duration_range[1] < segment_duration_range[0])
        throw ConfigError("profile: segment_duration_range must satisfy 0 < lo <= hi");
      if (turn_rate_range[1] < turn_rate_range[0])
        throw ConfigError("profile: turn_rate_range must satisfy lo <= hi");
      if (straight_prob < 0 || straight_prob > 1)
        throw ConfigError("profile: straight_prob must be in [0,1]");
    }
  }

  static MotionProfile load(const std::string& path) {
    KeyValue kv = KeyValue::load(path);
    return from_kv(kv);
  }

  static MotionProfile from_kv(const KeyValue& kv) {
    MotionProfile p;
    p.sample_rate_hz = kv.get_double_or("sample_rate_hz", p.sample_rate_hz);
    p.initial_heading_rad = kv.get_double_or("initial_heading_rad", p.initial_heading_rad);
    p.gyro_noise_std = kv.get_double_or("gyro_noise_std", p.gyro_noise_std);
    p.accel_noise_std = kv.get_double_or("accel_noise_std", p.accel_noise_std);
    p.gyro_bias_mag = kv.get_double_or("gyro_bias_mag", p.gyro_bias_mag);
    p.accel_bias_mag = kv.get_double_or("accel_bias_mag", p.accel_bias_mag);
    p.gravity_planar[0] = kv.get_double_or("gravity_x", 0);
    p.gravity_planar[1] = kv.get_double_or("gravity_y", 0);
    for (const auto& seg : kv.get_all("segment")) {
      auto nums = KeyValue::parse_double_list(seg, "segment");
      if (nums.size() != 3)
        throw ParseError("profile: segment must be '<duration_s> <speed_mps> <turn_rate_radps>', got '" +
                         seg + "'");
      p.segments.push_back({nums[0], nums[1], nums[2]});
    }
    p.random_segments = kv.get_int_or("random_segments", 0);
    auto range = [&kv](const char* key, Vec2 fallback) {
      if (!kv.has(key)) return fallback;
      auto nums = KeyValue::parse_double_list(kv.get(key), key);
      if (nums.size() != 2) throw ParseError(std::string("profile: ") + key + " must be '<lo> <hi>'");
      return Vec2{nums[0], nums[1]};
    };
    p.speed_range = range("speed_range", p.speed_range);
    p.turn_rate_range = range("turn_rate_range", p.turn_rate_range);
    p.segment_duration_range = range("segment_duration_range", p.segment_duration_range);
    p.straight_prob = kv.get_double_or("straight_prob", p.straight_prob);
    p.validate();
    return p;
  }
};

namespace detail {

struct SegmentState {
  double t0 = 0;       // segment start time
  double theta0 = 0;   // heading at t0
  Vec2 p0{0, 0};       // position at t0
};

// Exact in-segment kinematics for constant speed and turn rate.
inline void segment_pose(const SegmentState& st, const MotionSegment& seg, double tau, double* theta,
                         Vec2* pos, Vec2* vel) {
  double w = seg.turn_rate_radps;
  double v = seg.speed_mps;
  double th = st.theta0 + w * tau;
  if (theta) *theta = th;
  if (vel) *vel = {v * std::cos(th), v * std::sin(th)};
  if (pos) {
    if (std::abs(w) < 1e-12) {
      (*pos)[0] = st.p0[0] + v * tau * std::cos(st.theta0);
      (*pos)[1] = st.p0[1] + v * tau * std::sin(st.theta0);
    } else {
      (*pos)[0] = st.p0[0] + v / w * (std::sin(th) - std::sin(st.theta0));
      (*pos)[1] = st.p0[1] - v / w * (std::cos(th) - std::cos(st.theta0));
    }
  }
}

}  // namespace detail

/// Generates a sequence from a profile. Kinematics are integrated exactly
/// per segment; gyro_z carries the turn rate and body-frame acceleration is
/// R(-theta) * (a_world + gravity_planar) plus bias and white noise. Ground
/// truth is recorded noise-free; gt_velocity row k holds the mean velocity
/// over [t_k, t_{k+1}), so a left cumulative sum of gt_velocity * dt
/// telescopes exactly onto gt_position.
inline ImuSequence synthesize(const MotionProfile& profile, uint64_t seed) {
  profile.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  // Segment durations are snapped to whole samples so that segment switches
  // land exactly on sample boundaries.
  double dt = 1.0 / profile.sample_rate_hz;
  std::vector<MotionSegment> segments;
  if (profile.random_segments > 0) {
    for (int64_t i = 0; i < profile.random_segments; ++i) {
      MotionSegment seg;
      seg.duration_s = profile.segment_duration_range[0] +
                       unit(rng) * (profile.segment_duration_range[1] - profile.segment_duration_range[0]);
      seg.speed_mps =
          profile.speed_range[0] + unit(rng) * (profile.speed_range[1] - profile.speed_range[0]);
      bool straight = unit(rng) < profile.straight_prob;
      seg.turn_rate_radps =
          straight ? 0.0
                   : profile.turn_rate_range[0] +
                         unit(rng) * (profile.turn_rate_range[1] - profile.turn_rate_range[0]);
      segments.push_back(seg);
    }
  } else {
    segments = profile.segments;
  }
  std::array<double, 3> gyro_bias{}, accel_bias{};
  for (int i = 0; i < 3; ++i) {
    gyro_bias[static_cast<size_t>(i)] = (2 * unit(rng) - 1) * profile.gyro_bias_mag;
    accel_bias[static_cast<size_t>(i)] = (2 * unit(rng) - 1) * profile.accel_bias_mag;
  }

  std::vector<int64_t> seg_samples;
  int64_t total = 0;
  for (auto& seg : segments) {
    auto n = static_cast<int64_t>(std::llround(seg.duration_s * profile.sample_rate_hz));
    if (n < 1) n = 1;
    seg_samples.push_back(n);
    seg.duration_s = static_cast<double>(n) * dt;
    total += n;
  }

  ImuSequence seq;
  seq.sample_rate_hz = profile.sample_rate_hz;
  seq.gyro.reserve(static_cast<size_t>(total));
  seq.accel.reserve(static_cast<size_t>(total));
  seq.gt_position.reserve(static_cast<size_t>(total));
  seq.gt_velocity.reserve(static_cast<size_t>(total));

  detail::SegmentState st;
  st.theta0 = profile.initial_heading_rad;
  for (size_t si = 0; si < segments.size(); ++si) {
    const auto& seg = segments[si];
    int64_t n = seg_samples[si];
    for (int64_t k = 0; k < n; ++k) {
      double tau = static_cast<double>(k) * dt;
      double theta;
      Vec2 pos, vel;
      detail::segment_pose(st, seg, tau, &theta, &pos, &vel);
      // Mean velocity over the next sample interval, from exact positions.
      Vec2 pos_next;
      detail::segment_pose(st, seg, tau + dt, nullptr, &pos_next, nullptr);
      Vec2 vmean{(pos_next[0] - pos[0]) / dt, (pos_next[1] - pos[1]) / dt};
      seq.gt_position.push_back(pos);
      seq.gt_velocity.push_back(vmean);

      // Instantaneous world acceleration: centripetal only (speed constant
      // within a segment).
      Vec2 a_world{-seg.speed_mps * seg.turn_rate_radps * std::sin(theta),
                   seg.speed_mps * seg.turn_rate_radps * std::cos(theta)};
      double ax = a_world[0] + profile.gravity_planar[0];
      double ay = a_world[1] + profile.gravity_planar[1];
      double c = std::cos(-theta), s = std::sin(-theta);
      std::array<double, 3> accel{c * ax - s * ay, s * ax + c * ay, 0.0};
      std::array<double, 3> gyro{0.0, 0.0, seg.turn_rate_radps};
      for (int i = 0; i < 3; ++i) {
        auto idx = static_cast<size_t>(i);
        gyro[idx] += gyro_bias[idx] + profile.gyro_noise_std * gauss(rng);
        accel[idx] += accel_bias[idx] + profile.accel_noise_std * gauss(rng);
      }
      seq.gyro.push_back(gyro);
      seq.accel.push_back(accel);
    }
    // Advance the segment state with the exact end-of-segment pose.
    detail::SegmentState next;
    next.t0 = st.t0 + seg.duration_s;
    detail::segment_pose(st, seg, seg.duration_s, &next.theta0, &next.p0, nullptr);
    st = next;
  }
  seq.validate();
  return seq;
}

}  // namespace dwstrack
