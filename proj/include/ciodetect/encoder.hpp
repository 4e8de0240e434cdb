#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>

namespace ciod {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Three sigmoid trunk layers with batch norm (dropout after the first linear
// layer) and two linear heads producing the mean and log-sd of l_j.
struct EncoderSpec {
  Eigen::Index d_in = 0;
  std::array<Eigen::Index, 3> hidden{5, 5, 5};
  Eigen::Index k = 2;
  double dropout = 0.3;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  // h1 = mf + msel + mf*msel, then h_t = max(ceil(h_{t-1} / 1.75), 5).
  static EncoderSpec for_dims(Eigen::Index mf, Eigen::Index msel, Eigen::Index k);
  Eigen::Index num_params() const;
};

struct BatchNormStats {
  std::array<Eigen::VectorXd, 3> mean;
  std::array<Eigen::VectorXd, 3> var;
};

// Per-batch intermediates kept for the backward pass.
struct EncoderCache {
  Eigen::MatrixXd x;
  Eigen::MatrixXd mask;  // dropout keep mask scaled by 1/(1-p); empty when off
  std::array<Eigen::MatrixXd, 3> xhat, h;
  std::array<Eigen::RowVectorXd, 3> invstd, batch_mean, batch_var;
  bool training = false;
  Eigen::MatrixXd mu, logsd;  // B x k
};

class Encoder {
 public:
  explicit Encoder(const EncoderSpec& spec) : spec_(spec) {}
  const EncoderSpec& spec() const { return spec_; }

  // Fills params (length num_params) with the initial weights; head biases
  // start at the given mean / log-sd.
  template <typename Rng>
  void init(double* params, Rng& rng, const Eigen::VectorXd& mu_bias, const Eigen::VectorXd& logsd_bias) const;

  // Training mode uses batch statistics (and the mask when non-empty);
  // evaluation mode uses `running`.
  void forward(const double* params, const Eigen::MatrixXd& x, bool training, const Eigen::MatrixXd& mask,
               const BatchNormStats* running, EncoderCache& cache) const;

  // Accumulates d(objective)/d(params) into grad given the head gradients.
  void backward(const double* params, const EncoderCache& cache, const Eigen::MatrixXd& d_mu,
                const Eigen::MatrixXd& d_logsd, double* grad) const;

  // running <- (1 - momentum) running + momentum * batch (unbiased variance).
  void update_running(const EncoderCache& cache, BatchNormStats& running) const;
  BatchNormStats initial_running() const;

 private:
  struct Offsets {
    std::array<Eigen::Index, 3> W, b, g, beta;
    Eigen::Index Wmu, bmu, Wsd, bsd;
  };
  Offsets offsets() const;
  EncoderSpec spec_;
};

template <typename Rng>
void Encoder::init(double* params, Rng& rng, const Eigen::VectorXd& mu_bias,
                   const Eigen::VectorXd& logsd_bias) const {
  const Offsets o = offsets();
  Eigen::Index fan_in = spec_.d_in;
  for (int t = 0; t < 3; ++t) {
    const Eigen::Index rows = spec_.hidden[t];
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<Eigen::Index>(fan_in, 1)));
    for (Eigen::Index i = 0; i < rows * fan_in; ++i) params[o.W[t] + i] = bound * (2.0 * rng.uniform() - 1.0);
    for (Eigen::Index i = 0; i < rows; ++i) {
      params[o.b[t] + i] = bound * (2.0 * rng.uniform() - 1.0);
      params[o.g[t] + i] = 1.0;
      params[o.beta[t] + i] = 0.0;
    }
    fan_in = rows;
  }
  const double bound = 0.1 / std::sqrt(static_cast<double>(fan_in));
  for (Eigen::Index i = 0; i < spec_.k * fan_in; ++i) {
    params[o.Wmu + i] = bound * (2.0 * rng.uniform() - 1.0);
    params[o.Wsd + i] = bound * (2.0 * rng.uniform() - 1.0);
  }
  for (Eigen::Index i = 0; i < spec_.k; ++i) {
    params[o.bmu + i] = mu_bias(i);
    params[o.bsd + i] = logsd_bias(i);
  }
}

}  // namespace ciod
