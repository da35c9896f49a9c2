#pragma once

#include <Eigen/Core>
#include <cmath>
#include <limits>

namespace hyvi {

/// Adam with bias correction (beta1 = 0.9, beta2 = 0.999, eps = 1e-8 by default).
class Adam {
 public:
  explicit Adam(Eigen::Index size, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : m_(Eigen::VectorXd::Zero(size)), v_(Eigen::VectorXd::Zero(size)), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::Ref<const Eigen::VectorXd>& grad, double lr) {
    ++t_;
    m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
    v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    params.array() -= lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
  }

  long steps() const { return t_; }

 private:
  Eigen::VectorXd m_, v_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
};

/// Heavy-ball SGD: v <- mu v + g; params <- params - lr v.
class SgdMomentum {
 public:
  explicit SgdMomentum(Eigen::Index size, double momentum = 0.9)
      : v_(Eigen::VectorXd::Zero(size)), momentum_(momentum) {}

  void step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::Ref<const Eigen::VectorXd>& grad, double lr) {
    v_ = momentum_ * v_ + grad;
    params -= lr * v_;
  }

 private:
  Eigen::VectorXd v_;
  double momentum_;
};

/// Multiplies the learning rate by `factor` once the monitored value has not improved
/// (relative threshold) for more than `patience` consecutive updates.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor, int patience, double threshold = 1e-4)
      : lr_(lr), factor_(factor), patience_(patience), threshold_(threshold) {}

  /// Returns true when the learning rate was reduced.
  bool update(double value) {
    if (value < best_ - threshold_ * std::abs(best_) || best_ == std::numeric_limits<double>::infinity()) {
      best_ = value;
      bad_ = 0;
      return false;
    }
    if (++bad_ > patience_) {
      lr_ *= factor_;
      bad_ = 0;
      return true;
    }
    return false;
  }

  double lr() const { return lr_; }

 private:
  double lr_;
  double factor_;
  int patience_;
  double threshold_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_ = 0;
};

}  // namespace hyvi
