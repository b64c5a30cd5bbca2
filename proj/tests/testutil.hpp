#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dwstrack/tensor.hpp"

namespace dwstrack::testutil {

template <typename T>
TensorT<T> rand_tensor(std::mt19937_64& rng, Shape shape, double lo = -2.0, double hi = 2.0,
                       bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(lo, hi);
  int64_t n = shape_numel(shape);
  std::vector<T> v(static_cast<size_t>(n));
  for (auto& e : v) e = static_cast<T>(dist(rng));
  auto t = TensorT<T>::from_values(std::move(shape), std::move(v));
  t.set_requires_grad(requires_grad);
  return t;
}

inline double rel_err(double a, double b) {
  double denom = std::max({std::abs(a), std::abs(b), 1e-4});
  return std::abs(a - b) / denom;
}

/// Central finite differences against the tape gradients, in the precision of
/// T (double for the gradient suites). `make_loss` must be a pure function of
/// the current values of `inputs`. Checks every coordinate unless
/// `max_coords_per_input` limits it to a random sample.
template <typename T>
double max_gradient_mismatch(const std::function<TensorT<T>()>& make_loss,
                             std::vector<TensorT<T>> inputs, double h = 1e-3,
                             int64_t max_coords_per_input = -1, uint64_t sample_seed = 1234) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  TapeT<T> tape;
  {
    TapeScope<T> scope(tape);
    auto loss = make_loss();
    tape.backward(loss);
  }
  std::vector<std::vector<T>> analytic;
  for (auto& t : inputs)
    analytic.push_back(t.has_grad() ? t.grad() : std::vector<T>(t.values().size(), T(0)));

  std::mt19937_64 rng(sample_seed);
  double worst = 0;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = inputs[ti];
    std::vector<int64_t> coords;
    int64_t n = t.numel();
    if (max_coords_per_input > 0 && n > max_coords_per_input) {
      std::uniform_int_distribution<int64_t> pick(0, n - 1);
      for (int64_t k = 0; k < max_coords_per_input; ++k) coords.push_back(pick(rng));
    } else {
      for (int64_t i = 0; i < n; ++i) coords.push_back(i);
    }
    for (int64_t c : coords) {
      auto idx = static_cast<size_t>(c);
      T saved = t.mutable_values()[idx];
      t.mutable_values()[idx] = saved + static_cast<T>(h);
      double fp = static_cast<double>(make_loss().item());
      t.mutable_values()[idx] = saved - static_cast<T>(h);
      double fm = static_cast<double>(make_loss().item());
      t.mutable_values()[idx] = saved;
      double fd = (fp - fm) / (2 * h);
      worst = std::max(worst, rel_err(static_cast<double>(analytic[ti][idx]), fd));
    }
  }
  return worst;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    auto base = std::filesystem::temp_directory_path() / ("dwstrack_" + tag + "_" +
                                                          std::to_string(counter_++));
    std::filesystem::remove_all(base);
    std::filesystem::create_directories(base);
    path_ = base.string();
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  static inline int counter_ = 0;
};

}  // namespace dwstrack::testutil
