#include "volt/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "volt/error.hpp"

namespace volt {

template <typename T>
AdamW<T>::AdamW(const ParamStore<T>& store, AdamWConfig cfg) : cfg_(cfg) {
  for (const auto& p : store) {
    m_.emplace_back(p.value.rows, p.value.cols);
    v_.emplace_back(p.value.rows, p.value.cols);
  }
}

template <typename T>
void AdamW<T>::step(ParamStore<T>& store, double lr) {
  if (store.size() != m_.size()) throw StateError("AdamW: parameter layout changed");
  ++step_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  std::size_t idx = 0;
  for (auto& p : store) {
    auto& m = m_[idx].data;
    auto& v = v_[idx].data;
    ++idx;
    const double decay = p.decays() ? lr * cfg_.weight_decay : 0.0;
    for (std::size_t i = 0; i < p.value.data.size(); ++i) {
      double theta = static_cast<double>(p.value.data[i]);
      const double g = static_cast<double>(p.grad.data[i]);
      theta -= decay * theta;
      const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * g;
      const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      theta -= lr * (mi / c1) / (std::sqrt(vi / c2) + cfg_.eps);
      p.value.data[i] = static_cast<T>(theta);
    }
  }
}

double OneCycleSchedule::lr(std::size_t step) const {
  if (step > total_steps) {
    throw InvalidInput("schedule step " + std::to_string(step) + " beyond total " + std::to_string(total_steps));
  }
  const double peak = peak_step();
  const double s = static_cast<double>(step);
  auto cosine = [](double from, double to, double frac) {
    return to + (from - to) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
  };
  if (step == 0) return initial_lr();
  if (s == peak) return max_lr;
  if (step == total_steps) return final_lr();
  if (s < peak) return cosine(initial_lr(), max_lr, s / peak);
  return cosine(max_lr, final_lr(), (s - peak) / (static_cast<double>(total_steps) - peak));
}

template <typename T>
Ema<T>::Ema(const ParamStore<T>& store, double decay) : decay_(decay) {
  if (decay < 0.0 || decay > 1.0) throw InvalidInput("EMA decay must be in [0, 1]");
  for (const auto& p : store) shadow_.push_back(p.value);
}

template <typename T>
void Ema<T>::update(const ParamStore<T>& store) {
  if (store.size() != shadow_.size()) throw StateError("EMA: parameter layout changed");
  const T d = static_cast<T>(decay_);
  const T rest = static_cast<T>(1.0 - decay_);
  std::size_t idx = 0;
  for (const auto& p : store) {
    auto& s = shadow_[idx++].data;
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = d * s[i] + rest * p.value.data[i];
  }
}

template <typename T>
void Ema<T>::copy_to(ParamStore<T>& store) const {
  if (store.size() != shadow_.size()) throw StateError("EMA: parameter layout changed");
  std::size_t idx = 0;
  for (auto& p : store) p.value = shadow_[idx++];
}

template <typename T>
void init_params(ParamStore<T>& store, std::uint64_t seed, double qk_gain, double sigma) {
  Rng rng(seed);
  for (auto& p : store) {
    switch (p.kind) {
      case ParamKind::weight:
        for (auto& v : p.value.data) v = static_cast<T>(truncated_normal(rng, sigma));
        break;
      case ParamKind::bias:
      case ParamKind::norm_bias:
        p.value.zero();
        break;
      case ParamKind::norm_scale:
        std::fill(p.value.data.begin(), p.value.data.end(), T(1));
        break;
      case ParamKind::qk_gain:
        std::fill(p.value.data.begin(), p.value.data.end(), static_cast<T>(qk_gain));
        break;
    }
  }
}

template class AdamW<float>;
template class AdamW<double>;
template class Ema<float>;
template class Ema<double>;
template void init_params<float>(ParamStore<float>&, std::uint64_t, double, double);
template void init_params<double>(ParamStore<double>&, std::uint64_t, double, double);

} // namespace volt
