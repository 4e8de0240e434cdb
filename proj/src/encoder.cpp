#include "ciodetect/encoder.hpp"

#include <cmath>

#include "ciodetect/error.hpp"

namespace ciod {

EncoderSpec EncoderSpec::for_dims(Eigen::Index mf, Eigen::Index msel, Eigen::Index k) {
  if (k < 2) throw ConfigError("encoder needs k >= 2");
  EncoderSpec s;
  s.k = k;
  s.d_in = mf + (msel > 0 ? msel + 1 : 0);
  s.hidden[0] = std::max<Eigen::Index>(mf + msel + mf * msel, 5);
  for (int t = 1; t < 3; ++t) {
    s.hidden[t] = std::max<Eigen::Index>(static_cast<Eigen::Index>(std::ceil(s.hidden[t - 1] / 1.75)), 5);
  }
  return s;
}

Eigen::Index EncoderSpec::num_params() const {
  Eigen::Index n = 0, fan_in = d_in;
  for (Eigen::Index h : hidden) {
    n += h * fan_in + 3 * h;
    fan_in = h;
  }
  return n + 2 * (k * fan_in + k);
}

Encoder::Offsets Encoder::offsets() const {
  Offsets o{};
  Eigen::Index at = 0, fan_in = spec_.d_in;
  for (int t = 0; t < 3; ++t) {
    const Eigen::Index h = spec_.hidden[t];
    o.W[t] = at;
    at += h * fan_in;
    o.b[t] = at;
    at += h;
    o.g[t] = at;
    at += h;
    o.beta[t] = at;
    at += h;
    fan_in = h;
  }
  o.Wmu = at;
  at += spec_.k * fan_in;
  o.bmu = at;
  at += spec_.k;
  o.Wsd = at;
  at += spec_.k * fan_in;
  o.bsd = at;
  return o;
}

BatchNormStats Encoder::initial_running() const {
  BatchNormStats s;
  for (int t = 0; t < 3; ++t) {
    s.mean[t] = Eigen::VectorXd::Zero(spec_.hidden[t]);
    s.var[t] = Eigen::VectorXd::Ones(spec_.hidden[t]);
  }
  return s;
}

namespace {
using CMap = Eigen::Map<const Eigen::MatrixXd>;
using CVec = Eigen::Map<const Eigen::RowVectorXd>;
using Map = Eigen::Map<Eigen::MatrixXd>;
using Vec = Eigen::Map<Eigen::RowVectorXd>;
}  // namespace

void Encoder::forward(const double* params, const Eigen::MatrixXd& x, bool training, const Eigen::MatrixXd& mask,
                      const BatchNormStats* running, EncoderCache& cache) const {
  const Offsets o = offsets();
  const Eigen::Index B = x.rows();
  if (x.cols() != spec_.d_in) throw ConfigError("encoder input has wrong width");
  if (!training && running == nullptr) throw ConfigError("evaluation mode needs running statistics");
  cache.x = x;
  cache.mask = mask;
  cache.training = training;
  const Eigen::MatrixXd* in = &cache.x;
  Eigen::Index fan_in = spec_.d_in;
  for (int t = 0; t < 3; ++t) {
    const Eigen::Index h = spec_.hidden[t];
    CMap W(params + o.W[t], h, fan_in);
    CVec b(params + o.b[t], h), g(params + o.g[t], h), beta(params + o.beta[t], h);
    Eigen::MatrixXd a = (*in) * W.transpose();
    a.rowwise() += b;
    if (t == 0 && training && mask.size() > 0) a.array() *= mask.array();
    if (training) {
      cache.batch_mean[t] = a.colwise().mean();
      a.rowwise() -= cache.batch_mean[t];
      cache.batch_var[t] = a.array().square().colwise().sum() / static_cast<double>(B);
      cache.invstd[t] = (cache.batch_var[t].array() + spec_.bn_eps).rsqrt();
    } else {
      a.rowwise() -= running->mean[t].transpose();
      cache.invstd[t] = (running->var[t].array() + spec_.bn_eps).rsqrt().matrix().transpose();
    }
    a.array().rowwise() *= cache.invstd[t].array();
    cache.xhat[t] = a;
    Eigen::MatrixXd n = a.array().rowwise() * g.array();
    n.rowwise() += beta;
    cache.h[t] = n.unaryExpr([](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); });
    in = &cache.h[t];
    fan_in = h;
  }
  CMap Wmu(params + o.Wmu, spec_.k, fan_in), Wsd(params + o.Wsd, spec_.k, fan_in);
  CVec bmu(params + o.bmu, spec_.k), bsd(params + o.bsd, spec_.k);
  cache.mu = cache.h[2] * Wmu.transpose();
  cache.mu.rowwise() += bmu;
  cache.logsd = cache.h[2] * Wsd.transpose();
  cache.logsd.rowwise() += bsd;
}

void Encoder::backward(const double* params, const EncoderCache& cache, const Eigen::MatrixXd& d_mu,
                       const Eigen::MatrixXd& d_logsd, double* grad) const {
  const Offsets o = offsets();
  const Eigen::Index h3 = spec_.hidden[2];
  CMap Wmu(params + o.Wmu, spec_.k, h3), Wsd(params + o.Wsd, spec_.k, h3);
  Map(grad + o.Wmu, spec_.k, h3) += d_mu.transpose() * cache.h[2];
  Vec(grad + o.bmu, spec_.k) += d_mu.colwise().sum();
  Map(grad + o.Wsd, spec_.k, h3) += d_logsd.transpose() * cache.h[2];
  Vec(grad + o.bsd, spec_.k) += d_logsd.colwise().sum();
  Eigen::MatrixXd dh = d_mu * Wmu + d_logsd * Wsd;

  for (int t = 2; t >= 0; --t) {
    const Eigen::Index h = spec_.hidden[t];
    const Eigen::Index fan_in = t == 0 ? spec_.d_in : spec_.hidden[t - 1];
    const Eigen::MatrixXd& in = t == 0 ? cache.x : cache.h[t - 1];
    CMap W(params + o.W[t], h, fan_in);
    CVec g(params + o.g[t], h);
    const Eigen::MatrixXd dn = dh.array() * cache.h[t].array() * (1.0 - cache.h[t].array());
    Vec(grad + o.g[t], h) += (dn.array() * cache.xhat[t].array()).matrix().colwise().sum();
    Vec(grad + o.beta[t], h) += dn.colwise().sum();
    Eigen::MatrixXd dxhat = dn.array().rowwise() * g.array();
    Eigen::MatrixXd da;
    if (cache.training) {
      const Eigen::RowVectorXd m1 = dxhat.colwise().mean();
      const Eigen::RowVectorXd m2 = (dxhat.array() * cache.xhat[t].array()).matrix().colwise().mean();
      da = dxhat;
      da.rowwise() -= m1;
      da.array() -= cache.xhat[t].array().rowwise() * m2.array();
      da.array().rowwise() *= cache.invstd[t].array();
    } else {
      da = dxhat.array().rowwise() * cache.invstd[t].array();
    }
    if (t == 0 && cache.training && cache.mask.size() > 0) da.array() *= cache.mask.array();
    Map(grad + o.W[t], h, fan_in) += da.transpose() * in;
    Vec(grad + o.b[t], h) += da.colwise().sum();
    if (t > 0) dh = da * W;
  }
}

void Encoder::update_running(const EncoderCache& cache, BatchNormStats& running) const {
  const double B = static_cast<double>(cache.x.rows());
  const double m = spec_.bn_momentum;
  for (int t = 0; t < 3; ++t) {
    const double unbias = B > 1 ? B / (B - 1.0) : 1.0;
    running.mean[t] = (1.0 - m) * running.mean[t] + m * cache.batch_mean[t].transpose();
    running.var[t] = (1.0 - m) * running.var[t] + m * unbias * cache.batch_var[t].transpose();
  }
}

}  // namespace ciod
