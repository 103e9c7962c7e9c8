#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "nids_xray/common.hpp"

namespace nids_xray {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Single-hidden-layer autoencoder with tied weights: encode with W, decode
// with W transposed, sigmoid on both layers. Trained online on the squared
// reconstruction error 0.5 * |x - z|^2.
class Autoencoder {
 public:
  struct Gradients {
    std::vector<double> weights;  // hidden x visible, row-major
    std::vector<double> hidden_bias;
    std::vector<double> visible_bias;
  };

  Autoencoder() = default;

  Autoencoder(std::size_t visible, std::size_t hidden, Rng& rng)
      : visible_(visible), hidden_(hidden), weights_(visible * hidden), hidden_bias_(hidden, 0.0),
        visible_bias_(visible, 0.0) {
    const double a = 1.0 / static_cast<double>(visible);
    for (double& w : weights_) w = rng.uniform(-a, a);
  }

  static std::size_t hidden_size_for(std::size_t visible, double ratio) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(visible))));
  }

  std::size_t visible() const { return visible_; }
  std::size_t hidden() const { return hidden_; }

  void encode(std::span<const double> x, std::span<double> y) const {
    for (std::size_t k = 0; k < hidden_; ++k) {
      double acc = hidden_bias_[k];
      const double* wk = &weights_[k * visible_];
      for (std::size_t i = 0; i < visible_; ++i) acc += wk[i] * x[i];
      y[k] = sigmoid(acc);
    }
  }

  void decode(std::span<const double> y, std::span<double> z) const {
    for (std::size_t i = 0; i < visible_; ++i) z[i] = visible_bias_[i];
    for (std::size_t k = 0; k < hidden_; ++k) {
      const double* wk = &weights_[k * visible_];
      for (std::size_t i = 0; i < visible_; ++i) z[i] += wk[i] * y[k];
    }
    for (std::size_t i = 0; i < visible_; ++i) z[i] = sigmoid(z[i]);
  }

  void reconstruct(std::span<const double> x, std::span<double> z) const {
    std::vector<double> y(hidden_);
    encode(x, y);
    decode(y, z);
  }

  double rmse(std::span<const double> x) const {
    std::vector<double> z(visible_);
    reconstruct(x, z);
    return rmse_of(x, z);
  }

  double loss(std::span<const double> x) const {
    std::vector<double> z(visible_);
    reconstruct(x, z);
    double acc = 0.0;
    for (std::size_t i = 0; i < visible_; ++i) acc += (x[i] - z[i]) * (x[i] - z[i]);
    return 0.5 * acc;
  }

  // Backpropagated gradient of loss(x) with respect to every parameter.
  Gradients gradients(std::span<const double> x) const {
    std::vector<double> y(hidden_), z(visible_);
    encode(x, y);
    decode(y, z);
    Gradients g{std::vector<double>(weights_.size()), std::vector<double>(hidden_), std::vector<double>(visible_)};
    std::vector<double> dz(visible_);
    for (std::size_t i = 0; i < visible_; ++i) dz[i] = (z[i] - x[i]) * z[i] * (1.0 - z[i]);
    for (std::size_t k = 0; k < hidden_; ++k) {
      const double* wk = &weights_[k * visible_];
      double back = 0.0;
      for (std::size_t i = 0; i < visible_; ++i) back += wk[i] * dz[i];
      const double dy = back * y[k] * (1.0 - y[k]);
      g.hidden_bias[k] = dy;
      double* gk = &g.weights[k * visible_];
      // Encoder and decoder both touch W[k][i].
      for (std::size_t i = 0; i < visible_; ++i) gk[i] = dy * x[i] + dz[i] * y[k];
    }
    g.visible_bias = dz;
    return g;
  }

  // One SGD step; returns the RMSE measured before the update.
  double train_step(std::span<const double> x, double learning_rate) {
    std::vector<double> z(visible_);
    reconstruct(x, z);
    const double err = rmse_of(x, z);
    const Gradients g = gradients(x);
    for (std::size_t p = 0; p < weights_.size(); ++p) weights_[p] -= learning_rate * g.weights[p];
    for (std::size_t k = 0; k < hidden_; ++k) hidden_bias_[k] -= learning_rate * g.hidden_bias[k];
    for (std::size_t i = 0; i < visible_; ++i) visible_bias_[i] -= learning_rate * g.visible_bias[i];
    return err;
  }

  std::vector<double>& weights() { return weights_; }
  std::vector<double>& hidden_bias() { return hidden_bias_; }
  std::vector<double>& visible_bias() { return visible_bias_; }
  const std::vector<double>& weights() const { return weights_; }
  const std::vector<double>& hidden_bias() const { return hidden_bias_; }
  const std::vector<double>& visible_bias() const { return visible_bias_; }

  friend bool operator==(const Autoencoder&, const Autoencoder&) = default;

 private:
  static double rmse_of(std::span<const double> x, std::span<const double> z) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += (x[i] - z[i]) * (x[i] - z[i]);
    return std::sqrt(acc / static_cast<double>(x.size()));
  }

  std::size_t visible_ = 0;
  std::size_t hidden_ = 0;
  std::vector<double> weights_;
  std::vector<double> hidden_bias_;
  std::vector<double> visible_bias_;
};

}  // namespace nids_xray
