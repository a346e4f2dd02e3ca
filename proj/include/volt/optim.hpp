#pragma once

#include <cstddef>
#include <vector>

#include "volt/params.hpp"
#include "volt/rng.hpp"

namespace volt {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// AdamW with decoupled weight decay applied before the moment update.
// Only ParamKind::weight tensors decay; biases, norm parameters and QKNorm
// gains are exempt.
template <typename T>
class AdamW {
public:
  AdamW(const ParamStore<T>& store, AdamWConfig cfg);

  void step(ParamStore<T>& store, double lr);
  std::size_t steps() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }

private:
  AdamWConfig cfg_;
  std::vector<Matrix<T>> m_;
  std::vector<Matrix<T>> v_;
  std::size_t step_ = 0;
};

// 1-cycle schedule: cosine warmup from max_lr / div_factor to max_lr over
// pct_start * total_steps, then cosine anneal to max_lr / final_div_factor.
struct OneCycleSchedule {
  double max_lr = 1e-3;
  std::size_t total_steps = 1000;
  double pct_start = 0.1;
  double div_factor = 25.0;
  double final_div_factor = 1000.0;

  double initial_lr() const { return max_lr / div_factor; }
  double final_lr() const { return max_lr / final_div_factor; }
  double peak_step() const { return pct_start * static_cast<double>(total_steps); }

  // Throws InvalidInput outside [0, total_steps].
  double lr(std::size_t step) const;
};

// Exponential moving average of parameters: shadow <- d * shadow + (1 - d) * value.
template <typename T>
class Ema {
public:
  Ema(const ParamStore<T>& store, double decay);

  void update(const ParamStore<T>& store);
  double decay() const { return decay_; }
  const std::vector<Matrix<T>>& shadow() const { return shadow_; }
  std::vector<Matrix<T>>& shadow() { return shadow_; }
  // Writes the shadow values into a store with the same layout.
  void copy_to(ParamStore<T>& store) const;

private:
  double decay_;
  std::vector<Matrix<T>> shadow_;
};

// Truncated-normal(0, 0.02, +-2 sigma) weights, zero biases, unit norm
// scales, zero norm shifts and `qk_gain` for QKNorm gains. Parameters are
// filled in registration order from one generator seeded with `seed`.
template <typename T>
void init_params(ParamStore<T>& store, std::uint64_t seed, double qk_gain, double sigma = 0.02);

} // namespace volt
