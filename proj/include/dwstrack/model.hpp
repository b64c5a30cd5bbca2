#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dwstrack/common.hpp"
#include "dwstrack/config.hpp"
#include "dwstrack/ops.hpp"
#include "dwstrack/tensor.hpp"

namespace dwstrack {

/// Architectural hyperparameters. Defaults define the reference network:
/// four stages of two blocks each, widths calibrated so the full model and
/// its no-gated-conv ablation land on the intended parameter/FLOP budget.
struct ModelConfig {
  int64_t in_channels = 6;
  int64_t window_len = 200;
  std::vector<int64_t> stage_widths = {24, 48, 96, 432};
  std::vector<int64_t> stage_depths = {2, 2, 2, 2};
  double star_expansion = 2.0;       // M = star_expansion * C inside a block
  int64_t dw_kernel = 3;
  int64_t wing_kernel = 3;
  double gate_hidden_ratio = 0.25;   // hidden width of the gating MLP, as a fraction of C
  int64_t output_dim = 2;
  bool enable_msgcu = true;
  bool star_batch_norm = true;       // batch norm after the depthwise conv inside the star block

  int64_t num_stages() const { return static_cast<int64_t>(stage_widths.size()); }

  /// Smallest window length for which every stage keeps at least one sample
  /// after the stride-3 downsampling chain.
  int64_t min_window_len() const {
    int64_t m = 1;
    for (int64_t i = 1; i < num_stages(); ++i) m *= 3;
    return m;
  }

  int64_t expanded_width(int64_t c) const {
    double m = star_expansion * static_cast<double>(c);
    auto mi = static_cast<int64_t>(std::llround(m));
    if (std::abs(m - static_cast<double>(mi)) > 1e-9 || mi < 1)
      throw ConfigError("star_expansion * C must be a positive integer, got " + std::to_string(m) +
                        " for C=" + std::to_string(c));
    return mi;
  }

  int64_t gate_hidden_width(int64_t c) const {
    auto h = static_cast<int64_t>(std::floor(gate_hidden_ratio * static_cast<double>(c)));
    if (h < 1)
      throw ConfigError("gating branch hidden width < 1 for C=" + std::to_string(c) +
                        " at gate_hidden_ratio=" + std::to_string(gate_hidden_ratio));
    return h;
  }

  void validate() const {
    if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
    if (stage_widths.empty() || stage_widths.size() != stage_depths.size())
      throw ConfigError("stage_widths and stage_depths must be non-empty and equal length");
    for (size_t i = 0; i < stage_widths.size(); ++i) {
      if (stage_widths[i] < 1) throw ConfigError("stage widths must be positive");
      if (i > 0 && stage_widths[i] < stage_widths[i - 1])
        throw ConfigError("stage_widths must be non-decreasing");
      if (stage_depths[i] < 1) throw ConfigError("stage_depths must be >= 1");
      (void)expanded_width(stage_widths[i]);
      if (enable_msgcu) (void)gate_hidden_width(stage_widths[i]);
    }
    if (dw_kernel < 1 || dw_kernel % 2 == 0) throw ConfigError("dw_kernel must be odd");
    if (wing_kernel < 1 || wing_kernel % 2 == 0) throw ConfigError("wing_kernel must be odd");
    if (output_dim != 2 && output_dim != 3) throw ConfigError("output_dim must be 2 or 3");
    if (window_len < min_window_len())
      throw ConfigError("window_len " + std::to_string(window_len) + " below minimum " +
                        std::to_string(min_window_len()) + " for " + std::to_string(num_stages()) +
                        " stages");
  }

  /// Sequence length seen by each stage: the stem preserves L, each
  /// inter-stage downsample applies a k=3, stride=3, pad=1 convolution.
  std::vector<int64_t> stage_lengths(int64_t window) const {
    std::vector<int64_t> out;
    int64_t l = window;
    out.push_back(l);
    for (int64_t i = 1; i < num_stages(); ++i) {
      l = conv1d_out_len(l, 3, 3, 1);
      out.push_back(l);
    }
    return out;
  }

  void to_kv(KeyValue& kv, const std::string& prefix = "model.") const {
    auto join = [](const std::vector<int64_t>& v) {
      std::string s;
      for (size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
      return s;
    };
    kv.set(prefix + "in_channels", std::to_string(in_channels));
    kv.set(prefix + "window_len", std::to_string(window_len));
    kv.set(prefix + "stage_widths", join(stage_widths));
    kv.set(prefix + "stage_depths", join(stage_depths));
    kv.set(prefix + "star_expansion", format_double(star_expansion));
    kv.set(prefix + "dw_kernel", std::to_string(dw_kernel));
    kv.set(prefix + "wing_kernel", std::to_string(wing_kernel));
    kv.set(prefix + "gate_hidden_ratio", format_double(gate_hidden_ratio));
    kv.set(prefix + "output_dim", std::to_string(output_dim));
    kv.set(prefix + "enable_msgcu", enable_msgcu ? "true" : "false");
    kv.set(prefix + "star_batch_norm", star_batch_norm ? "true" : "false");
  }

  static ModelConfig from_kv(const KeyValue& kv, const std::string& prefix = "model.") {
    ModelConfig c;
    c.in_channels = kv.get_int_or(prefix + "in_channels", c.in_channels);
    c.window_len = kv.get_int_or(prefix + "window_len", c.window_len);
    if (kv.has(prefix + "stage_widths"))
      c.stage_widths = KeyValue::parse_int_list(kv.get(prefix + "stage_widths"), prefix + "stage_widths");
    if (kv.has(prefix + "stage_depths"))
      c.stage_depths = KeyValue::parse_int_list(kv.get(prefix + "stage_depths"), prefix + "stage_depths");
    c.star_expansion = kv.get_double_or(prefix + "star_expansion", c.star_expansion);
    c.dw_kernel = kv.get_int_or(prefix + "dw_kernel", c.dw_kernel);
    c.wing_kernel = kv.get_int_or(prefix + "wing_kernel", c.wing_kernel);
    c.gate_hidden_ratio = kv.get_double_or(prefix + "gate_hidden_ratio", c.gate_hidden_ratio);
    c.output_dim = kv.get_int_or(prefix + "output_dim", c.output_dim);
    c.enable_msgcu = kv.get_bool_or(prefix + "enable_msgcu", c.enable_msgcu);
    c.star_batch_norm = kv.get_bool_or(prefix + "star_batch_norm", c.star_batch_norm);
    return c;
  }
};

template <typename T>
struct BufferRef {
  std::string name;
  std::vector<T>* data = nullptr;
  bool* loaded_flag = nullptr;  // set when a checkpoint fills the buffer
};

/// Maps stable names to parameter tensors and state buffers. Tensor entries
/// alias the layer tensors (shared storage), so optimizer updates through the
/// registry are visible to the model.
template <typename T>
struct ParamRegistryT {
  std::vector<std::pair<std::string, TensorT<T>>> params;
  std::vector<BufferRef<T>> buffers;

  void add_param(const std::string& name, const TensorT<T>& t) {
    for (const auto& p : params)
      if (p.first == name) throw StateError("duplicate parameter name: " + name);
    params.emplace_back(name, t);
  }

  void add_buffer(const std::string& name, std::vector<T>* data, bool* loaded_flag = nullptr) {
    buffers.push_back(BufferRef<T>{name, data, loaded_flag});
  }

  const TensorT<T>& param(const std::string& name) const {
    for (const auto& p : params)
      if (p.first == name) return p.second;
    throw StateError("unknown parameter: " + name);
  }

  bool has_param(const std::string& name) const {
    for (const auto& p : params)
      if (p.first == name) return true;
    return false;
  }

  int64_t total_parameters() const {
    int64_t n = 0;
    for (const auto& p : params) n += p.second.numel();
    return n;
  }

  void zero_grads() {
    for (auto& p : params) p.second.zero_grad();
  }
};

namespace nn {

template <typename T>
TensorT<T> init_uniform(std::mt19937_64& rng, Shape shape, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  int64_t n = shape_numel(shape);
  std::vector<T> v(static_cast<size_t>(n));
  for (auto& e : v) e = static_cast<T>(dist(rng));
  auto t = TensorT<T>::from_values(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
struct Conv1dLayerT {
  TensorT<T> w, b;
  int64_t stride = 1, padding = 0, groups = 1;

  TensorT<T> operator()(const TensorT<T>& x) const { return conv1d(x, w, b, stride, padding, groups); }

  int64_t kernel() const { return w.dim(2); }
  int64_t out_channels() const { return w.dim(0); }

  static Conv1dLayerT make(std::mt19937_64& rng, int64_t cin, int64_t cout, int64_t k, int64_t stride,
                           int64_t padding, int64_t groups) {
    double bound = 1.0 / std::sqrt(static_cast<double>((cin / groups) * k));
    Conv1dLayerT l;
    l.w = init_uniform<T>(rng, {cout, cin / groups, k}, bound);
    l.b = init_uniform<T>(rng, {cout}, bound);
    l.stride = stride;
    l.padding = padding;
    l.groups = groups;
    return l;
  }

  void register_params(ParamRegistryT<T>& reg, const std::string& prefix) {
    reg.add_param(prefix + ".w", w);
    reg.add_param(prefix + ".b", b);
  }
};

template <typename T>
struct AffineLayerT {
  TensorT<T> w, b;

  TensorT<T> operator()(const TensorT<T>& x) const { return affine(x, w, b); }

  static AffineLayerT make(std::mt19937_64& rng, int64_t cin, int64_t cout) {
    double bound = 1.0 / std::sqrt(static_cast<double>(cin));
    AffineLayerT l;
    l.w = init_uniform<T>(rng, {cout, cin}, bound);
    l.b = init_uniform<T>(rng, {cout}, bound);
    return l;
  }

  void register_params(ParamRegistryT<T>& reg, const std::string& prefix) {
    reg.add_param(prefix + ".w", w);
    reg.add_param(prefix + ".b", b);
  }
};

template <typename T>
struct BatchNorm1dLayerT {
  TensorT<T> gamma, beta;
  BnStatsT<T> stats;

  TensorT<T> operator()(const TensorT<T>& x, Mode mode) {
    return batch_norm1d(x, gamma, beta, stats, mode);
  }

  static BatchNorm1dLayerT make(int64_t channels) {
    BatchNorm1dLayerT l;
    l.gamma = TensorT<T>::full({channels}, T(1));
    l.gamma.set_requires_grad(true);
    l.beta = TensorT<T>::zeros({channels});
    l.beta.set_requires_grad(true);
    l.stats = BnStatsT<T>(channels);
    return l;
  }

  void register_params(ParamRegistryT<T>& reg, const std::string& prefix) {
    reg.add_param(prefix + ".gamma", gamma);
    reg.add_param(prefix + ".beta", beta);
    reg.add_buffer(prefix + ".running_mean", &stats.running_mean, &stats.initialized);
    reg.add_buffer(prefix + ".running_var", &stats.running_var, &stats.initialized);
  }
};

/// Elementwise product of two pointwise projections of the same input — the
/// star product. Each output channel is a full quadratic form over the
/// bias-augmented input channels.
template <typename T>
TensorT<T> star_product(const TensorT<T>& x, const Conv1dLayerT<T>& lhs, const Conv1dLayerT<T>& rhs) {
  return elementwise_mul(lhs(x), rhs(x));
}

/// Star operation block: depthwise conv -> (batch norm) -> two pointwise
/// branches C->M multiplied elementwise -> pointwise back-projection M->C.
/// Output shape equals input shape so the residual add is well-formed.
template <typename T>
struct StarOperationT {
  Conv1dLayerT<T> dw;
  BatchNorm1dLayerT<T> bn;
  bool use_bn = true;
  Conv1dLayerT<T> lhs, rhs;  // C -> M
  Conv1dLayerT<T> proj;      // M -> C

  TensorT<T> product_stage(const TensorT<T>& h) const { return star_product(h, lhs, rhs); }

  TensorT<T> forward(const TensorT<T>& x, Mode mode) {
    auto h = dw(x);
    if (use_bn) h = bn(h, mode);
    return proj(product_stage(h));
  }

  static StarOperationT make(std::mt19937_64& rng, int64_t c, int64_t m, int64_t dw_kernel, bool with_bn) {
    StarOperationT s;
    s.dw = Conv1dLayerT<T>::make(rng, c, c, dw_kernel, 1, dw_kernel / 2, c);
    s.bn = BatchNorm1dLayerT<T>::make(c);
    s.use_bn = with_bn;
    s.lhs = Conv1dLayerT<T>::make(rng, c, m, 1, 1, 0, 1);
    s.rhs = Conv1dLayerT<T>::make(rng, c, m, 1, 1, 0, 1);
    s.proj = Conv1dLayerT<T>::make(rng, m, c, 1, 1, 0, 1);
    return s;
  }

  void register_params(ParamRegistryT<T>& reg, const std::string& prefix) {
    dw.register_params(reg, prefix + ".dw");
    if (use_bn) bn.register_params(reg, prefix + ".bn");
    lhs.register_params(reg, prefix + ".lhs");
    rhs.register_params(reg, prefix + ".rhs");
    proj.register_params(reg, prefix + ".proj");
  }
};

/// One attention wing: pooled statistics along the last axis combined with
/// learnable weights (mu for the mean, xi for the deviation), a small conv
/// across the remaining axis, then a sigmoid gate in (0,1).
template <typename T>
struct WingT {
  TensorT<T> mu, xi;      // stored as [1,1]; reshaped to the input rank when applied
  Conv1dLayerT<T> conv;   // 1 -> 1 channels along the pooled axis

  /// [M,L] -> [M,1] or [B,M,L] -> [B,M,1].
  TensorT<T> gate(const TensorT<T>& x) const {
    TensorT<T> mu_r = mu, xi_r = xi;
    if (x.rank() == 3) {
      mu_r = reshape(mu, {1, 1, 1});
      xi_r = reshape(xi, {1, 1, 1});
    }
    auto stat = add(elementwise_mul(mu_r, adaptive_avg_pool(x)),
                    elementwise_mul(xi_r, adaptive_std_pool(x)));
    auto t = transpose(stat);  // [.., 1, M]
    t = conv(t);
    t = transpose(t);          // [.., M, 1]
    return sigmoid(t);
  }

  static WingT make(std::mt19937_64& rng, int64_t kernel) {
    WingT w;
    w.mu = TensorT<T>::full({1, 1}, T(1));
    w.mu.set_requires_grad(true);
    w.xi = TensorT<T>::zeros({1, 1});
    w.xi.set_requires_grad(true);
    w.conv = Conv1dLayerT<T>::make(rng, 1, 1, kernel, 1, kernel / 2, 1);
    return w;
  }

  void register_params(ParamRegistryT<T>& reg, const std::string& prefix) {
    reg.add_param(prefix + ".mu", mu);
    reg.add_param(prefix + ".xi", xi);
    conv.register_params(reg, prefix + ".conv");
  }
};

/// Combines per-channel and per-time gates by broadcast multiplication:
/// out = Wc .* x + Wt .* x.
template <typename T>
TensorT<T> dual_wing_combine(const TensorT<T>& x, const TensorT<T>& channel_gate,
                             const TensorT<T>& temporal_gate) {
  return add(elementwise_mul(channel_gate, x), elementwise_mul(temporal_gate, x));
}

template <typename T>
struct DualWingAttentionT {
  WingT<T> channel_wing;
  WingT<T> temporal_wing;

  TensorT<T> channel_gate(const TensorT<T>& x) const { return channel_wing.gate(x); }

  /// The temporal gate reuses the channel-wing code path on the transposed
  /// features, then is re-oriented to [.., 1, L].
  TensorT<T> temporal_gate(const TensorT<T>& x) const {
    return transpose(temporal_wing.gate(transpose(x)));
  }

  TensorT<T> forward(const TensorT<T>& x) const {
    return dual_wing_combine(x, channel_gate(x), temporal_gate(x));
  }

  static DualWingAttentionT make(std::mt19937_64& rng, int64_t kernel) {
    DualWingAttentionT a;
    a.channel_wing = WingT<T>::make(rng, kernel);
    a.temporal_wing = WingT<T>::make(rng, kernel);
    return a;
  }

  void register_params(ParamRegistryT<T>& reg, const std::string& prefix) {
    channel_wing.register_params(reg, prefix + ".wing_c");
    temporal_wing.register_params(reg, prefix + ".wing_t");
  }
};

/// Multi-scale gated convolution unit: a depthwise-conv value branch
/// modulated by a channel gate from globally pooled features. The softmax
/// gate is rescaled by C so a uniform gate leaves the value branch unchanged.
template <typename T>
struct MsgcuT {
  Conv1dLayerT<T> dw;
  AffineLayerT<T> fc1, fc2;
  int64_t channels = 0;

  /// Scaled gate; dividing by C gives a probability vector over channels.
  TensorT<T> gate(const TensorT<T>& x) const {
    auto pooled = global_avg_pool_time(x);
    auto h = sigmoid(fc1(pooled));
    return scaled_softmax(fc2(h), -1, static_cast<T>(channels));
  }

  TensorT<T> forward(const TensorT<T>& x) const {
    auto value = dw(x);
    auto g = gate(x);
    Shape gshape = g.shape();
    gshape.push_back(1);
    return elementwise_mul(reshape(g, gshape), value);
  }

  static MsgcuT make(std::mt19937_64& rng, int64_t c, int64_t hidden) {
    MsgcuT m;
    m.dw = Conv1dLayerT<T>::make(rng, c, c, 3, 1, 1, c);
    m.fc1 = AffineLayerT<T>::make(rng, c, hidden);
    m.fc2 = AffineLayerT<T>::make(rng, hidden, c);
    m.channels = c;
    return m;
  }

  void register_params(ParamRegistryT<T>& reg, const std::string& prefix) {
    dw.register_params(reg, prefix + ".dw");
    fc1.register_params(reg, prefix + ".fc1");
    fc2.register_params(reg, prefix + ".fc2");
  }
};

/// The composite block: x' = x + attention(star(x)); out = x' + msgcu(x').
/// With the gated conv unit disabled the second residual branch is absent.
template <typename T>
struct DwstbT {
  StarOperationT<T> star;
  DualWingAttentionT<T> attention;
  std::optional<MsgcuT<T>> msgcu;

  TensorT<T> forward(const TensorT<T>& x, Mode mode) {
    auto x1 = add(x, attention.forward(star.forward(x, mode)));
    if (msgcu) return add(x1, msgcu->forward(x1));
    return x1;
  }

  static DwstbT make(std::mt19937_64& rng, const ModelConfig& cfg, int64_t c) {
    DwstbT b;
    b.star = StarOperationT<T>::make(rng, c, cfg.expanded_width(c), cfg.dw_kernel, cfg.star_batch_norm);
    b.attention = DualWingAttentionT<T>::make(rng, cfg.wing_kernel);
    if (cfg.enable_msgcu) b.msgcu = MsgcuT<T>::make(rng, c, cfg.gate_hidden_width(c));
    return b;
  }

  void register_params(ParamRegistryT<T>& reg, const std::string& prefix) {
    star.register_params(reg, prefix + ".star");
    attention.register_params(reg, prefix);
    if (msgcu) msgcu->register_params(reg, prefix + ".msgcu");
  }
};

}  // namespace nn

struct FlopItem {
  std::string name;
  int64_t macs = 0;
};

struct FlopReport {
  std::vector<FlopItem> items;
  int64_t total = 0;

  void add(const std::string& name, int64_t macs) {
    items.push_back({name, macs});
    total += macs;
  }
};

/// The velocity-regression network: stem conv, stages of residual star/
/// attention/gated-conv blocks with stride-3 downsampling between stages,
/// global time pooling and an affine head.
template <typename T>
class DwsformerModelT {
 public:
  DwsformerModelT(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    int64_t stages = cfg_.num_stages();
    stem_ = nn::Conv1dLayerT<T>::make(rng, cfg_.in_channels, cfg_.stage_widths[0], 3, 1, 1, 1);
    stages_.resize(static_cast<size_t>(stages));
    for (int64_t s = 0; s < stages; ++s) {
      int64_t c = cfg_.stage_widths[static_cast<size_t>(s)];
      for (int64_t b = 0; b < cfg_.stage_depths[static_cast<size_t>(s)]; ++b)
        stages_[static_cast<size_t>(s)].push_back(nn::DwstbT<T>::make(rng, cfg_, c));
      if (s + 1 < stages) {
        int64_t cn = cfg_.stage_widths[static_cast<size_t>(s + 1)];
        down_.push_back(nn::Conv1dLayerT<T>::make(rng, c, cn, 3, 3, 1, 1));
        down_bn_.push_back(nn::BatchNorm1dLayerT<T>::make(cn));
      }
    }
    head_ = nn::AffineLayerT<T>::make(rng, cfg_.stage_widths.back(), cfg_.output_dim);

    stem_.register_params(reg_, "stem");
    for (size_t s = 0; s < stages_.size(); ++s) {
      for (size_t b = 0; b < stages_[s].size(); ++b)
        stages_[s][b].register_params(reg_, "s" + std::to_string(s) + ".b" + std::to_string(b));
      if (s + 1 < stages_.size()) {
        down_[s].register_params(reg_, "down" + std::to_string(s) + ".conv");
        down_bn_[s].register_params(reg_, "down" + std::to_string(s) + ".bn");
      }
    }
    head_.register_params(reg_, "head");
  }

  DwsformerModelT(const DwsformerModelT&) = delete;
  DwsformerModelT& operator=(const DwsformerModelT&) = delete;

  /// window: [B, in_channels, L] -> [B, output_dim] mean velocity in m/s.
  TensorT<T> forward(const TensorT<T>& window, Mode mode) {
    if (window.rank() != 3 || window.dim(1) != cfg_.in_channels)
      throw DimensionError("forward: expected input [B," + std::to_string(cfg_.in_channels) +
                           ",L], got " + shape_to_string(window.shape()));
    if (window.dim(2) < cfg_.min_window_len())
      throw DimensionError("forward: window length " + std::to_string(window.dim(2)) +
                           " is shorter than the minimum " + std::to_string(cfg_.min_window_len()) +
                           " required by " + std::to_string(cfg_.num_stages()) + " stages");
    last_mode_ = mode;
    auto x = stem_(window);
    for (size_t s = 0; s < stages_.size(); ++s) {
      for (auto& block : stages_[s]) x = block.forward(x, mode);
      if (s + 1 < stages_.size()) x = down_bn_[s](down_[s](x), mode);
    }
    return head_(global_avg_pool_time(x));
  }

  const ModelConfig& config() const { return cfg_; }
  ParamRegistryT<T>& params() { return reg_; }
  const ParamRegistryT<T>& params() const { return reg_; }
  void zero_grads() { reg_.zero_grads(); }
  Mode last_forward_mode() const { return last_mode_; }

  int64_t count_parameters() const { return reg_.total_parameters(); }

  /// Multiply-accumulate count for one forward pass of a single window of
  /// the given length. Convention: a conv/affine costs Cout*Lout*(Cin/g)*k
  /// MACs; batch norm, pooling, sigmoid and elementwise ops cost one per
  /// element (two for the deviation pool, three per element for softmax).
  FlopReport count_flops(int64_t window_len) const {
    FlopReport r;
    auto lengths = cfg_.stage_lengths(window_len);
    r.add("stem", cfg_.stage_widths[0] * window_len * cfg_.in_channels * 3);
    for (size_t s = 0; s < stages_.size(); ++s) {
      int64_t c = cfg_.stage_widths[s];
      int64_t l = lengths[s];
      int64_t m = cfg_.expanded_width(c);
      for (size_t b = 0; b < stages_[s].size(); ++b) {
        std::string name = "s" + std::to_string(s) + ".b" + std::to_string(b);
        int64_t macs = 0;
        macs += c * l * cfg_.dw_kernel;              // star depthwise
        if (cfg_.star_batch_norm) macs += c * l;     // star batch norm
        macs += 2 * (m * l * c);                     // star pointwise branches
        macs += m * l;                               // star product
        macs += c * l * m;                           // star back-projection
        // two wings: pools over both orientations, conv, sigmoid, gating
        macs += (m * l + 2 * m * l) + 3 * m + (m * cfg_.wing_kernel + m);  // channel wing
        macs += (l * m + 2 * l * m) + 3 * l + (l * cfg_.wing_kernel + l);  // temporal wing
        macs += 2 * m * l + m * l;                   // gate multiplies + combine add
        macs += c * l;                               // residual add
        if (cfg_.enable_msgcu) {
          int64_t h = cfg_.gate_hidden_width(c);
          macs += c * l * 3;                         // value depthwise
          macs += c * l;                             // global average pool
          macs += h * c + h;                         // fc1 + sigmoid
          macs += c * h;                             // fc2
          macs += 3 * c;                             // softmax
          macs += c * l;                             // gate multiply
          macs += c * l;                             // residual add
        }
        r.add(name, macs);
      }
      if (s + 1 < stages_.size()) {
        int64_t cn = cfg_.stage_widths[s + 1];
        int64_t ln = lengths[s + 1];
        r.add("down" + std::to_string(s), cn * ln * c * 3 + cn * ln);
      }
    }
    r.add("head", cfg_.stage_widths.back() * lengths.back() +
                      cfg_.output_dim * cfg_.stage_widths.back());
    return r;
  }

  // Exposed structure for composition tests and introspection.
  nn::Conv1dLayerT<T>& stem() { return stem_; }
  std::vector<std::vector<nn::DwstbT<T>>>& stages() { return stages_; }
  std::vector<nn::Conv1dLayerT<T>>& downsample() { return down_; }
  std::vector<nn::BatchNorm1dLayerT<T>>& downsample_bn() { return down_bn_; }
  nn::AffineLayerT<T>& head() { return head_; }

 private:
  ModelConfig cfg_;
  nn::Conv1dLayerT<T> stem_;
  std::vector<std::vector<nn::DwstbT<T>>> stages_;
  std::vector<nn::Conv1dLayerT<T>> down_;
  std::vector<nn::BatchNorm1dLayerT<T>> down_bn_;
  nn::AffineLayerT<T> head_;
  ParamRegistryT<T> reg_;
  Mode last_mode_ = Mode::kTrain;
};

using DwsformerModel = DwsformerModelT<float>;

}  // namespace dwstrack
