// AdamW with decoupled weight decay, global-norm clipping and the step
// learning-rate schedule.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdetr/nn.hpp"

namespace sdetr {

struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& name)
      : std::runtime_error("non-finite gradient in parameter " + name), name_(name) {}
  const std::string& parameter() const { return name_; }

 private:
  std::string name_;
};

/// Optimizer over a chosen subset of a ParamStore. Parameters outside the
/// subset are never touched.
class AdamW {
 public:
  AdamW(ParamStore<float>& params, std::vector<std::string> trainable, AdamWConfig cfg = {})
      : params_(&params), names_(std::move(trainable)), cfg_(cfg), lr_(cfg.lr) {
    for (const auto& n : names_) {
      const auto size = params.get(n).numel();
      m_[n].assign(size, 0.0f);
      v_[n].assign(size, 0.0f);
    }
  }

  const std::vector<std::string>& trainable() const { return names_; }
  const AdamWConfig& config() const { return cfg_; }
  std::uint64_t step_count() const { return step_; }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

  std::vector<float>& first_moment(const std::string& n) { return m_.at(n); }
  std::vector<float>& second_moment(const std::string& n) { return v_.at(n); }
  const std::vector<float>& first_moment(const std::string& n) const { return m_.at(n); }
  const std::vector<float>& second_moment(const std::string& n) const { return v_.at(n); }
  void set_step_count(std::uint64_t s) { step_ = s; }

  /// L2 norm over all trainable gradients (missing gradients count as 0).
  double grad_norm() const {
    double sq = 0.0;
    for (const auto& n : names_) {
      for (float g : params_->get(n).grad()) sq += static_cast<double>(g) * g;
    }
    return std::sqrt(sq);
  }

  /// Scales gradients so their global norm is at most max_norm; returns the
  /// norm before clipping.
  double clip_grad_norm(double max_norm) {
    const double norm = grad_norm();
    if (max_norm > 0 && norm > max_norm) {
      const auto factor = static_cast<float>(max_norm / (norm + 1e-6));
      for (const auto& n : names_) {
        auto& t = params_->get(n);
        if (!t.has_grad()) continue;
        for (float& g : t.mutable_grad()) g *= factor;
      }
    }
    return norm;
  }

  /// Checks every gradient, then applies one update. Throws
  /// NonFiniteGradient before modifying anything.
  void step() {
    for (const auto& n : names_) {
      for (float g : params_->get(n).grad()) {
        if (!std::isfinite(g)) throw NonFiniteGradient(n);
      }
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    const auto b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    const auto decay = static_cast<float>(1.0 - lr_ * cfg_.weight_decay);
    const auto step_size = static_cast<float>(lr_ / bc1);
    const auto inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
    const auto eps = static_cast<float>(cfg_.eps);
    for (const auto& n : names_) {
      auto& t = params_->get(n);
      auto w = t.mutable_data();
      auto g = t.grad();
      auto& m = m_[n];
      auto& v = v_[n];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const float gi = g.empty() ? 0.0f : g[i];
        m[i] = b1 * m[i] + (1.0f - b1) * gi;
        v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
        w[i] *= decay;
        w[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
      }
    }
  }

 private:
  ParamStore<float>* params_;
  std::vector<std::string> names_;
  AdamWConfig cfg_;
  double lr_;
  std::uint64_t step_ = 0;
  std::map<std::string, std::vector<float>> m_, v_;
};

/// Step schedule: base lr until decay_epoch, then base·factor.
struct StepSchedule {
  std::size_t epochs = 20;
  std::size_t decay_epoch = 14;
  double factor = 0.1;

  void validate() const {
    if (epochs == 0) throw std::invalid_argument("schedule: need at least one epoch");
    if (decay_epoch >= epochs) throw std::invalid_argument("schedule: decay epoch must be before the last epoch");
  }

  double lr_at(double base, std::size_t epoch) const { return epoch < decay_epoch ? base : base * factor; }
};

}  // namespace sdetr
