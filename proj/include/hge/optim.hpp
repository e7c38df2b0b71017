#pragma once

#include <cmath>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "hge/autodiff.hpp"

namespace hge {

// Adam with the usual defaults; the learning rate is the only knob exposed in
// run configs.
class Adam {
public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<ad::Parameter*>& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (ad::Parameter* p : params) {
      State& st = state_[p];
      if (st.m.size() != p->value.size()) {
        st.m = Tensor(p->value.shape);
        st.v = Tensor(p->value.shape);
      }
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double g = p->grad.data[i];
        st.m.data[i] = beta1_ * st.m.data[i] + (1.0 - beta1_) * g;
        st.v.data[i] = beta2_ * st.v.data[i] + (1.0 - beta2_) * g * g;
        const double mhat = st.m.data[i] / bc1;
        const double vhat = st.v.data[i] / bc2;
        p->value.data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
      if (!p->value.all_finite())
        throw std::runtime_error("adam: non-finite parameter " + p->name);
    }
  }

  double learning_rate() const { return lr_; }

private:
  struct State {
    Tensor m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::unordered_map<ad::Parameter*, State> state_;
};

class Sgd {
public:
  explicit Sgd(double lr) : lr_(lr) {}

  void step(const std::vector<ad::Parameter*>& params) {
    for (ad::Parameter* p : params)
      for (std::size_t i = 0; i < p->value.size(); ++i)
        p->value.data[i] -= lr_ * p->grad.data[i];
  }

  double learning_rate() const { return lr_; }

private:
  double lr_;
};

inline void zero_grads(const std::vector<ad::Parameter*>& params) {
  for (ad::Parameter* p : params) p->zero_grad();
}

}  // namespace hge
