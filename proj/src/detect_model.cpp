#include "ciodetect/detect_model.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <unordered_map>

#include "ciodetect/adam.hpp"
#include "ciodetect/csv.hpp"
#include "ciodetect/error.hpp"
#include "ciodetect/manifest.hpp"
#include "ciodetect/numeric.hpp"
#include "ciodetect/parallel.hpp"
#include "ciodetect/random.hpp"
#include "json.hpp"

namespace ciod {

std::string to_string(FeatureMode mode) {
  switch (mode) {
    case FeatureMode::kFlagsOnly: return "flags_only";
    case FeatureMode::kNarrativesOnly: return "narratives_only";
    default: return "both";
  }
}

FeatureMode parse_feature_mode(const std::string& text) {
  if (text == "both") return FeatureMode::kBoth;
  if (text == "flags_only" || text == "flags-only") return FeatureMode::kFlagsOnly;
  if (text == "narratives_only" || text == "narratives-only") return FeatureMode::kNarrativesOnly;
  throw ConfigError("unknown feature mode '" + text + "'");
}

ModelData assemble_model_data(const FeatureTable& table, const std::vector<int>* labels) {
  const auto N = static_cast<Eigen::Index>(table.accounts.size());
  const auto mf = static_cast<Eigen::Index>(table.num_flags());
  const auto msel = static_cast<Eigen::Index>(table.num_narratives());
  if (labels && labels->size() != table.accounts.size()) throw ConfigError("labels and accounts differ in length");
  ModelData d;
  d.flags = Eigen::MatrixXd::Zero(N, mf);
  d.counts = Eigen::MatrixXd::Zero(N, msel);
  d.messages.resize(N);
  d.entropy.resize(N);
  d.log_binom = Eigen::VectorXd::Zero(N);
  d.account_ids.reserve(table.accounts.size());
  for (Eigen::Index j = 0; j < N; ++j) {
    const auto& a = table.accounts[static_cast<std::size_t>(j)];
    if (a.message_count == 0) throw ConfigError("account " + a.account_id + " has no messages");
    if (static_cast<Eigen::Index>(a.flags.size()) != mf) throw ConfigError("flag vector length mismatch");
    d.account_ids.push_back(a.account_id);
    for (Eigen::Index f = 0; f < mf; ++f) d.flags(j, f) = a.flags[static_cast<std::size_t>(f)];
    const double M = a.message_count;
    for (const auto& [c, n] : a.narrative_counts) {
      if (n > a.message_count) throw ConfigError("narrative count exceeds message count for " + a.account_id);
      d.counts(j, c) = n;
      d.log_binom(j) += log_binom(M, n);
    }
    d.messages(j) = M;
    d.entropy(j) = a.narrative_entropy;
  }
  if (labels) d.labels = *labels;
  return d;
}

void ModelPriors::validate(Eigen::Index mf, Eigen::Index msel) const {
  const Eigen::Index K = k();
  if (K < 2) throw ConfigError("k must be at least 2");
  if (sigma_clust.size() != K) throw ConfigError("sigma_clust must have k entries");
  if (mu_f.rows() != K || mu_f.cols() != mf || sigma_f.rows() != K || sigma_f.cols() != mf) {
    throw ConfigError("flag prior has the wrong shape");
  }
  if (mu_n.rows() != K || mu_n.cols() != msel || sigma_n.rows() != K || sigma_n.cols() != msel) {
    throw ConfigError("narrative prior has the wrong shape");
  }
  if (!(sigma_clust.array() > 0).all() || !(sigma_f.array() > 0).all() || !(sigma_n.array() > 0).all()) {
    throw ConfigError("prior scales must be positive");
  }
  if (!mu_clust.allFinite() || !mu_f.allFinite() || !mu_n.allFinite()) throw ConfigError("prior means must be finite");
}

std::vector<double> default_cluster_shares(Eigen::Index k) {
  if (k < 2) throw ConfigError("k must be at least 2");
  std::vector<double> raw{10000.0, 10.0, 5.0, 1.0};
  while (static_cast<Eigen::Index>(raw.size()) < k) raw.push_back(raw.back() * 0.2);
  raw.resize(static_cast<std::size_t>(k));
  const double total = std::accumulate(raw.begin(), raw.end(), 0.0);
  for (double& r : raw) r /= total;
  return raw;
}

ModelPriors default_priors(const ModelData& data, Eigen::Index k) {
  const auto shares = default_cluster_shares(k);
  const Eigen::Index N = data.size();
  if (N < 1) throw ConfigError("no accounts");
  const Eigen::Index mf = data.num_flags(), msel = data.num_narratives();
  ModelPriors p;
  p.mu_clust.resize(k);
  p.sigma_clust.resize(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    p.mu_clust(i) = std::log(shares[static_cast<std::size_t>(i)]);
    p.sigma_clust(i) = i == 0 ? 0.5 : 1.8;
  }
  const double floor = 1.0 / (2.0 * static_cast<double>(N));
  p.mu_f = Eigen::MatrixXd::Zero(k, mf);
  p.sigma_f = Eigen::MatrixXd::Constant(k, mf, 3.0);
  for (Eigen::Index f = 0; f < mf; ++f) {
    p.mu_f(0, f) = std::log(std::max(data.flags.col(f).mean(), floor));
    p.sigma_f(0, f) = 0.3;
  }
  p.mu_n = Eigen::MatrixXd::Zero(k, msel);
  p.sigma_n = Eigen::MatrixXd::Constant(k, msel, 3.0);
  const double total_messages = data.messages.sum();
  for (Eigen::Index c = 0; c < msel; ++c) {
    p.mu_n(0, c) = std::log(std::max(data.counts.col(c).sum() / total_messages, floor));
    p.sigma_n(0, c) = 0.3;
  }
  return p;
}

void FitConfig::validate() const {
  if (steps < 1) throw ConfigError("steps must be at least 1");
  if (batch < 1) throw ConfigError("batch must be at least 1");
  if (!(lr > 0)) throw ConfigError("learning rate must be positive");
  if (mc_train < 1 || mc_score < 1) throw ConfigError("Monte Carlo sample counts must be positive");
}

ParamLayout ParamLayout::make(Eigen::Index k, Eigen::Index mf, Eigen::Index msel, Eigen::Index encoder_params) {
  ParamLayout L;
  L.k = k;
  L.mf = mf;
  L.msel = msel;
  L.beta_mean = 0;
  L.beta_logsd = k * mf;
  L.gamma_mean = 2 * k * mf;
  L.gamma_logsd = L.gamma_mean + k * msel;
  L.encoder = L.gamma_logsd + k * msel;
  L.total = L.encoder + encoder_params;
  return L;
}

namespace {

using CMap = Eigen::Map<const Eigen::MatrixXd>;
using Map = Eigen::Map<Eigen::MatrixXd>;

EncoderSpec spec_for(const ModelData& data, FeatureMode mode, Eigen::Index k) {
  return EncoderSpec::for_dims(uses_flags(mode) ? data.num_flags() : 0,
                               uses_narratives(mode) ? data.num_narratives() : 0, k);
}

double clamp_logit(double x) { return std::clamp(x, -kLogitClamp, kLogitClamp); }

// Local terms of the log joint for a batch. Fills the per-row LSE terms and,
// when requested, the responsibilities used by the gradient.
struct LocalPass {
  Eigen::MatrixXd ll;    // B x k data log-likelihood per cluster
  Eigen::MatrixXd resp;  // B x k softmax of (log softmax(l) + ll), or one-hot
  Eigen::VectorXd term;  // B
};

LocalPass local_pass(const Eigen::MatrixXd& beta, const Eigen::MatrixXd& gamma, const Eigen::MatrixXd& logits,
                     const ModelData& data, std::span<const Eigen::Index> rows, FeatureMode mode, bool supervised) {
  const Eigen::Index B = static_cast<Eigen::Index>(rows.size());
  const Eigen::Index K = logits.cols();
  LocalPass out;
  out.ll = Eigen::MatrixXd::Zero(B, K);
  if (uses_flags(mode) && data.num_flags() > 0) {
    const Eigen::MatrixXd bc = beta.unaryExpr(&clamp_logit);
    const Eigen::MatrixXd lp = bc.unaryExpr([](double x) { return log_sigmoid(x); });
    const Eigen::MatrixXd lq = bc.unaryExpr([](double x) { return log_sigmoid(-x); });
    Eigen::MatrixXd F(B, data.num_flags());
    for (Eigen::Index b = 0; b < B; ++b) F.row(b) = data.flags.row(rows[b]);
    out.ll += F * lp.transpose() + (1.0 - F.array()).matrix() * lq.transpose();
  }
  if (uses_narratives(mode) && data.num_narratives() > 0) {
    const Eigen::MatrixXd gc = gamma.unaryExpr(&clamp_logit);
    const Eigen::MatrixXd lp = gc.unaryExpr([](double x) { return log_sigmoid(x); });
    const Eigen::MatrixXd lq = gc.unaryExpr([](double x) { return log_sigmoid(-x); });
    Eigen::MatrixXd C(B, data.num_narratives()), R(B, data.num_narratives());
    for (Eigen::Index b = 0; b < B; ++b) {
      C.row(b) = data.counts.row(rows[b]);
      R.row(b) = (data.messages(rows[b]) - C.row(b).array()).matrix();
      out.ll.row(b).array() += data.log_binom(rows[b]);
    }
    out.ll += C * lp.transpose() + R * lq.transpose();
  }
  out.resp.resize(B, K);
  out.term.resize(B);
  for (Eigen::Index b = 0; b < B; ++b) {
    const double lmax = logits.row(b).maxCoeff();
    const double lse_l = lmax + std::log((logits.row(b).array() - lmax).exp().sum());
    Eigen::RowVectorXd z = logits.row(b).array() - lse_l + out.ll.row(b).array();
    if (supervised) {
      const int y = data.labels[static_cast<std::size_t>(rows[b])];
      out.term(b) = z(y);
      out.resp.row(b).setZero();
      out.resp(b, y) = 1.0;
    } else {
      const double m = z.maxCoeff();
      const Eigen::RowVectorXd e = (z.array() - m).exp();
      const double s = e.sum();
      out.term(b) = m + std::log(s);
      out.resp.row(b) = e / s;
    }
  }
  return out;
}

double prior_logpdf(const Eigen::MatrixXd& x, const Eigen::MatrixXd& mu, const Eigen::MatrixXd& sd) {
  const Eigen::ArrayXXd z = (x - mu).array() / sd.array();
  return (-0.5 * z.square() - sd.array().log() - 0.5 * kLogTwoPi).sum();
}

void check_supervised(const ModelData& data, Eigen::Index K) {
  if (data.labels.size() != static_cast<std::size_t>(data.size())) {
    throw ConfigError("supervised mode needs a label for every account");
  }
  for (int y : data.labels) {
    if (y < 0 || y >= K) throw ConfigError("label outside 0..k-1");
  }
}

}  // namespace

Eigen::MatrixXd VariationalState::beta_mean() const {
  return CMap(theta.data() + layout.beta_mean, layout.k, layout.mf);
}
Eigen::MatrixXd VariationalState::beta_logsd() const {
  return CMap(theta.data() + layout.beta_logsd, layout.k, layout.mf);
}
Eigen::MatrixXd VariationalState::gamma_mean() const {
  return CMap(theta.data() + layout.gamma_mean, layout.k, layout.msel);
}
Eigen::MatrixXd VariationalState::gamma_logsd() const {
  return CMap(theta.data() + layout.gamma_logsd, layout.k, layout.msel);
}

Eigen::MatrixXd encoder_inputs(const ModelData& data, FeatureMode mode, std::span<const Eigen::Index> rows) {
  const bool fl = uses_flags(mode), nr = uses_narratives(mode) && data.num_narratives() > 0;
  const Eigen::Index mf = fl ? data.num_flags() : 0;
  const Eigen::Index nc = nr ? data.num_narratives() : 0;
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), mf + (nr ? nc + 1 : 0));
  for (Eigen::Index b = 0; b < x.rows(); ++b) {
    const Eigen::Index j = rows[static_cast<std::size_t>(b)];
    if (fl) x.row(b).head(mf) = data.flags.row(j);
    if (nr) {
      x.row(b).segment(mf, nc) = data.counts.row(j);
      x(b, mf + nc) = data.entropy(j);
    }
  }
  return x;
}

VariationalState init_state(const ModelData& data, const ModelPriors& priors, const FitConfig& cfg) {
  cfg.validate();
  const Eigen::Index K = priors.k();
  const Eigen::Index mf = data.num_flags(), msel = data.num_narratives();
  priors.validate(mf, msel);
  VariationalState st;
  st.mode = cfg.mode;
  st.supervised = cfg.supervised;
  st.priors = priors;
  st.encoder = spec_for(data, cfg.mode, K);
  const Encoder enc(st.encoder);
  st.layout = ParamLayout::make(K, mf, msel, st.encoder.num_params());
  st.theta = Eigen::VectorXd::Zero(st.layout.total);
  st.running = enc.initial_running();

  Rng rng(derive_seed(cfg.seed, 1));
  const double floor = 1.0 / (2.0 * static_cast<double>(data.size()));
  Map bm(st.theta.data() + st.layout.beta_mean, K, mf), bs(st.theta.data() + st.layout.beta_logsd, K, mf);
  Map gm(st.theta.data() + st.layout.gamma_mean, K, msel), gs(st.theta.data() + st.layout.gamma_logsd, K, msel);
  for (Eigen::Index f = 0; f < mf; ++f) {
    const double r = std::clamp(data.flags.col(f).mean(), floor, 1.0 - floor);
    for (Eigen::Index i = 0; i < K; ++i) bm(i, f) = logit(r) + (i == 0 ? 0.0 : cfg.init_jitter * rng.normal());
  }
  const double total_messages = data.messages.sum();
  for (Eigen::Index c = 0; c < msel; ++c) {
    const double r = std::clamp(data.counts.col(c).sum() / total_messages, floor, 1.0 - floor);
    for (Eigen::Index i = 0; i < K; ++i) gm(i, c) = logit(r) + (i == 0 ? 0.0 : cfg.init_jitter * rng.normal());
  }
  bs.setConstant(cfg.init_logsd);
  gs.setConstant(cfg.init_logsd);
  enc.init(st.theta.data() + st.layout.encoder, rng, priors.mu_clust, priors.sigma_clust.array().log().matrix());
  return st;
}

double log_joint(const Eigen::MatrixXd& beta, const Eigen::MatrixXd& gamma, const Eigen::MatrixXd& logits,
                 const ModelData& data, std::span<const Eigen::Index> rows, const ModelPriors& priors,
                 FeatureMode mode, bool supervised) {
  if (!beta.allFinite() || !gamma.allFinite() || !logits.allFinite()) throw NonFiniteError("log_joint input");
  if (rows.empty()) throw ConfigError("empty batch");
  if (supervised) check_supervised(data, priors.k());
  double total = 0.0;
  if (uses_flags(mode)) total += prior_logpdf(beta, priors.mu_f, priors.sigma_f);
  if (uses_narratives(mode)) total += prior_logpdf(gamma, priors.mu_n, priors.sigma_n);
  const LocalPass lp = local_pass(beta, gamma, logits, data, rows, mode, supervised);
  double local = lp.term.sum();
  for (Eigen::Index b = 0; b < logits.rows(); ++b) {
    for (Eigen::Index i = 0; i < logits.cols(); ++i) local += normal_logpdf(logits(b, i), priors.mu_clust(i), priors.sigma_clust(i));
  }
  return total + static_cast<double>(data.size()) / static_cast<double>(rows.size()) * local;
}

ElboParts elbo_estimate(const VariationalState& state, const ModelData& data, std::span<const Eigen::Index> rows,
                        const ElboNoise& noise, Eigen::VectorXd* grad, EncoderCache* cache_out) {
  const ParamLayout& L = state.layout;
  const ModelPriors& P = state.priors;
  const FeatureMode mode = state.mode;
  const Eigen::Index B = static_cast<Eigen::Index>(rows.size());
  const Eigen::Index K = L.k;
  if (B < 1) throw ConfigError("empty batch");
  if (noise.draws.empty()) throw ConfigError("no noise draws");
  if (state.supervised) check_supervised(data, K);
  const double scale = static_cast<double>(data.size()) / static_cast<double>(B);
  const double S = static_cast<double>(noise.draws.size());
  const double* th = state.theta.data();

  const Encoder enc(state.encoder);
  EncoderCache local_cache;
  EncoderCache& cache = cache_out ? *cache_out : local_cache;
  Eigen::MatrixXd mask;
  if (noise.dropout.size() > 0) mask = noise.dropout / (1.0 - state.encoder.dropout);
  enc.forward(th + L.encoder, encoder_inputs(data, mode, rows), true, mask, nullptr, cache);
  const Eigen::MatrixXd sd_l = cache.logsd.array().exp();

  const CMap bm(th + L.beta_mean, K, L.mf), bs(th + L.beta_logsd, K, L.mf);
  const CMap gm(th + L.gamma_mean, K, L.msel), gs(th + L.gamma_logsd, K, L.msel);
  const Eigen::MatrixXd b_sd = bs.array().exp(), g_sd = gs.array().exp();

  ElboParts parts;
  const double c = 0.5 * (1.0 + kLogTwoPi);
  if (uses_flags(mode)) parts.entropy += (bs.array() + c).sum();
  if (uses_narratives(mode)) parts.entropy += (gs.array() + c).sum();
  parts.entropy += scale * (cache.logsd.array() + c).sum();

  Eigen::MatrixXd d_mu = Eigen::MatrixXd::Zero(B, K), d_logsd = Eigen::MatrixXd::Zero(B, K);
  if (grad) {
    grad->setZero(L.total);
  }
  for (const NoiseDraw& nd : noise.draws) {
    const Eigen::MatrixXd beta = bm + (b_sd.array() * nd.beta.array()).matrix();
    const Eigen::MatrixXd gamma = gm + (g_sd.array() * nd.gamma.array()).matrix();
    const Eigen::MatrixXd l = cache.mu + (sd_l.array() * nd.l.array()).matrix();

    double value = 0.0;
    if (uses_flags(mode)) value += prior_logpdf(beta, P.mu_f, P.sigma_f);
    if (uses_narratives(mode)) value += prior_logpdf(gamma, P.mu_n, P.sigma_n);
    const LocalPass lp = local_pass(beta, gamma, l, data, rows, mode, state.supervised);
    double local = lp.term.sum();
    Eigen::MatrixXd zc(B, K);
    for (Eigen::Index i = 0; i < K; ++i) {
      zc.col(i) = (l.col(i).array() - P.mu_clust(i)) / P.sigma_clust(i);
      local += (-0.5 * zc.col(i).array().square() - std::log(P.sigma_clust(i)) - 0.5 * kLogTwoPi).sum();
    }
    value += scale * local;
    parts.expected_log_joint += value / S;
    if (!grad) continue;

    // d/dl: prior + responsibilities - softmax(l).
    Eigen::MatrixXd dl(B, K);
    for (Eigen::Index b = 0; b < B; ++b) {
      const double m = l.row(b).maxCoeff();
      Eigen::RowVectorXd sm = (l.row(b).array() - m).exp();
      sm /= sm.sum();
      for (Eigen::Index i = 0; i < K; ++i) {
        dl(b, i) = scale * (-zc(b, i) / P.sigma_clust(i) + lp.resp(b, i) - sm(i));
      }
    }
    d_mu += dl / S;
    d_logsd += (dl.array() * sd_l.array() * nd.l.array()).matrix() / S;

    const Eigen::MatrixXd dll = scale * lp.resp;  // B x k
    const Eigen::VectorXd wsum = dll.colwise().sum().transpose();
    Map gbm(grad->data() + L.beta_mean, K, L.mf), gbs(grad->data() + L.beta_logsd, K, L.mf);
    Map ggm(grad->data() + L.gamma_mean, K, L.msel), ggs(grad->data() + L.gamma_logsd, K, L.msel);
    if (uses_flags(mode) && L.mf > 0) {
      Eigen::MatrixXd F(B, L.mf);
      for (Eigen::Index b = 0; b < B; ++b) F.row(b) = data.flags.row(rows[b]);
      Eigen::MatrixXd db = dll.transpose() * F;
      for (Eigen::Index i = 0; i < K; ++i) {
        for (Eigen::Index f = 0; f < L.mf; ++f) {
          const double x = beta(i, f);
          db(i, f) = std::abs(x) > kLogitClamp ? 0.0 : db(i, f) - wsum(i) * sigmoid(x);
        }
      }
      db -= ((beta - P.mu_f).array() / P.sigma_f.array().square()).matrix();
      gbm += db / S;
      gbs += (db.array() * b_sd.array() * nd.beta.array()).matrix() / S;
    }
    if (uses_narratives(mode) && L.msel > 0) {
      Eigen::MatrixXd C(B, L.msel);
      Eigen::VectorXd Mb(B);
      for (Eigen::Index b = 0; b < B; ++b) {
        C.row(b) = data.counts.row(rows[b]);
        Mb(b) = data.messages(rows[b]);
      }
      Eigen::MatrixXd dg = dll.transpose() * C;
      const Eigen::VectorXd wm = dll.transpose() * Mb;
      for (Eigen::Index i = 0; i < K; ++i) {
        for (Eigen::Index cc = 0; cc < L.msel; ++cc) {
          const double x = gamma(i, cc);
          dg(i, cc) = std::abs(x) > kLogitClamp ? 0.0 : dg(i, cc) - wm(i) * sigmoid(x);
        }
      }
      dg -= ((gamma - P.mu_n).array() / P.sigma_n.array().square()).matrix();
      ggm += dg / S;
      ggs += (dg.array() * g_sd.array() * nd.gamma.array()).matrix() / S;
    }
  }
  parts.elbo = parts.expected_log_joint + parts.entropy;
  if (!std::isfinite(parts.elbo)) throw NonFiniteError("ELBO");
  if (grad) {
    if (uses_flags(mode)) grad->segment(L.beta_logsd, K * L.mf).array() += 1.0;
    if (uses_narratives(mode)) grad->segment(L.gamma_logsd, K * L.msel).array() += 1.0;
    d_logsd.array() += scale;
    enc.backward(th + L.encoder, cache, d_mu, d_logsd, grad->data() + L.encoder);
  }
  return parts;
}

FitResult fit(const ModelData& data, const ModelPriors& priors, const FitConfig& cfg) {
  cfg.validate();
  const Eigen::Index N = data.size();
  if (N < 1) throw ConfigError("no accounts to fit");
  if (cfg.supervised) check_supervised(data, priors.k());
  FitResult out;
  out.state = init_state(data, priors, cfg);
  VariationalState& st = out.state;
  const Encoder enc(st.encoder);
  Adam adam(st.layout.total, AdamConfig{cfg.lr});
  Rng noise_rng(derive_seed(cfg.seed, 2));
  Rng perm_rng(derive_seed(cfg.seed, 3));

  const Eigen::Index B = std::min<Eigen::Index>(static_cast<Eigen::Index>(cfg.batch), N);
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(N));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  std::size_t cursor = perm.size();
  Eigen::VectorXd grad;
  EncoderCache cache;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (cursor + static_cast<std::size_t>(B) > perm.size()) {
      for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[perm_rng.below(i)]);
      cursor = 0;
    }
    const std::span<const Eigen::Index> rows(perm.data() + cursor, static_cast<std::size_t>(B));
    cursor += static_cast<std::size_t>(B);
    const ElboNoise noise = draw_noise(st, B, cfg.mc_train, true, noise_rng);
    ElboParts parts;
    try {
      parts = elbo_estimate(st, data, rows, noise, &grad, &cache);
    } catch (const NonFiniteError&) {
      throw NonFiniteError("ELBO", static_cast<long>(step));
    }
    if (!grad.allFinite()) throw NonFiniteError("ELBO gradient", static_cast<long>(step));
    enc.update_running(cache, st.running);
    if (step % 50 == 0 || step + 1 == cfg.steps) out.trace.emplace_back(step, parts.elbo);
    adam.ascend(st.theta, grad);
  }
  st.adam_steps = adam.steps();
  st.adam_m = adam.first_moment();
  st.adam_v = adam.second_moment();
  return out;
}

ScoreTable responsibilities(const VariationalState& state, const ModelData& data, std::size_t samples,
                            std::uint64_t seed, unsigned jobs) {
  if (samples < 1) throw ConfigError("need at least one responsibility sample");
  const ParamLayout& L = state.layout;
  const Eigen::Index N = data.size(), K = L.k;
  if (data.num_flags() != L.mf || data.num_narratives() != L.msel) throw ConfigError("data shape does not match the model");
  const Encoder enc(state.encoder);
  const Eigen::MatrixXd bm = state.beta_mean(), bsd = state.beta_logsd().array().exp();
  const Eigen::MatrixXd gm = state.gamma_mean(), gsd = state.gamma_logsd().array().exp();

  Rng grng(derive_seed(seed, 0));
  std::vector<Eigen::MatrixXd> betas(samples), gammas(samples);
  for (std::size_t s = 0; s < samples; ++s) {
    betas[s] = bm;
    gammas[s] = gm;
    for (Eigen::Index i = 0; i < betas[s].size(); ++i) betas[s].data()[i] += bsd.data()[i] * grng.normal();
    for (Eigen::Index i = 0; i < gammas[s].size(); ++i) gammas[s].data()[i] += gsd.data()[i] * grng.normal();
  }

  ScoreTable out;
  out.account_ids = data.account_ids;
  out.labels = data.labels;
  out.resp = Eigen::MatrixXd::Zero(N, K);
  constexpr Eigen::Index kChunk = 2048;
  const std::size_t chunks = static_cast<std::size_t>((N + kChunk - 1) / kChunk);
  parallel_for(chunks, jobs, [&](std::size_t ch) {
    const Eigen::Index lo = static_cast<Eigen::Index>(ch) * kChunk;
    const Eigen::Index hi = std::min(N, lo + kChunk);
    std::vector<Eigen::Index> rows(static_cast<std::size_t>(hi - lo));
    std::iota(rows.begin(), rows.end(), lo);
    EncoderCache cache;
    enc.forward(state.theta.data() + L.encoder, encoder_inputs(data, state.mode, rows), false, {}, &state.running, cache);
    const Eigen::MatrixXd sd = cache.logsd.array().exp();
    Rng rng(derive_seed(seed, ch + 1));
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(hi - lo, K);
    Eigen::MatrixXd l(hi - lo, K);
    for (std::size_t s = 0; s < samples; ++s) {
      for (Eigen::Index b = 0; b < l.rows(); ++b) {
        for (Eigen::Index i = 0; i < K; ++i) l(b, i) = cache.mu(b, i) + sd(b, i) * rng.normal();
      }
      const LocalPass lp = local_pass(betas[s], gammas[s], l, data, rows, state.mode, false);
      acc += lp.resp;
    }
    acc /= static_cast<double>(samples);
    if (!acc.allFinite()) throw NonFiniteError("responsibilities");
    out.resp.middleRows(lo, hi - lo) = acc;
  });
  out.minority.resize(static_cast<std::size_t>(N));
  for (Eigen::Index j = 0; j < N; ++j) out.minority[static_cast<std::size_t>(j)] = 1.0 - out.resp(j, 0);
  return out;
}

EnsembleResult fit_ensemble(const ModelData& data, const ModelPriors& priors, const FitConfig& cfg,
                            std::size_t runs, unsigned jobs) {
  if (runs < 1) throw ConfigError("ensemble needs at least one run");
  EnsembleResult out;
  out.runs.resize(runs);
  out.fits.resize(runs);
  parallel_for(runs, jobs, [&](std::size_t r) {
    FitConfig c = cfg;
    c.seed = cfg.seed + r;
    try {
      out.fits[r] = fit(data, priors, c);
      out.runs[r] = responsibilities(out.fits[r].state, data, cfg.mc_score, derive_seed(c.seed, 4), 1);
    } catch (const Error& e) {
      throw Error(e.kind(), "run " + std::to_string(r) + ": " + e.what(), e.category());
    }
  });
  out.mean.account_ids = data.account_ids;
  out.mean.labels = data.labels;
  out.mean.resp = Eigen::MatrixXd::Zero(data.size(), priors.k());
  out.mean.minority.assign(static_cast<std::size_t>(data.size()), 0.0);
  for (const ScoreTable& t : out.runs) {
    out.mean.resp += t.resp;
    for (std::size_t j = 0; j < t.minority.size(); ++j) out.mean.minority[j] += t.minority[j];
  }
  out.mean.resp /= static_cast<double>(runs);
  for (double& m : out.mean.minority) m /= static_cast<double>(runs);
  return out;
}

void write_scores_csv(const ScoreTable& scores, std::ostream& out) {
  const Eigen::Index K = scores.resp.cols();
  const bool labelled = !scores.labels.empty();
  std::string text = "account_id,minority_prob";
  for (Eigen::Index i = 0; i < K; ++i) text += ",r_" + std::to_string(i);
  if (labelled) text += ",label";
  text += '\n';
  for (std::size_t j = 0; j < scores.account_ids.size(); ++j) {
    text += csv::escape(scores.account_ids[j]);
    text += ',';
    csv::append_double(text, scores.minority[j]);
    for (Eigen::Index i = 0; i < K; ++i) {
      text += ',';
      csv::append_double(text, scores.resp(static_cast<Eigen::Index>(j), i));
    }
    if (labelled) {
      text += ',';
      csv::append_int(text, scores.labels[j]);
    }
    text += '\n';
  }
  out << text;
}

ScoreTable read_scores_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw SchemaError(1, "scores CSV is empty");
  const auto header = csv::split_line(line);
  if (header.size() < 3 || header[0] != "account_id" || header[1] != "minority_prob") {
    throw SchemaError(1, "scores CSV header must start with account_id,minority_prob");
  }
  const bool labelled = header.back() == "label";
  const std::size_t K = header.size() - 2 - (labelled ? 1 : 0);
  for (std::size_t i = 0; i < K; ++i) {
    if (header[2 + i] != "r_" + std::to_string(i)) throw SchemaError(1, "unexpected column " + header[2 + i]);
  }
  ScoreTable t;
  std::vector<double> resp;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line == "\r") continue;
    const auto f = csv::split_line(line);
    if (f.size() != header.size()) throw SchemaError(n, "expected " + std::to_string(header.size()) + " fields");
    t.account_ids.push_back(f[0]);
    t.minority.push_back(csv::parse_double(f[1], n));
    for (std::size_t i = 0; i < K; ++i) resp.push_back(csv::parse_double(f[2 + i], n));
    if (labelled) t.labels.push_back(static_cast<int>(csv::parse_int(f.back(), n)));
  }
  t.resp = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      resp.data(), static_cast<Eigen::Index>(t.account_ids.size()), static_cast<Eigen::Index>(K));
  return t;
}

void write_trace_csv(const std::vector<std::pair<std::size_t, double>>& trace, std::ostream& out) {
  std::string text = "step,elbo\n";
  for (const auto& [s, e] : trace) {
    csv::append_int(text, s);
    text += ',';
    csv::append_double(text, e);
    text += '\n';
  }
  out << text;
}

namespace {

using json = nlohmann::ordered_json;

json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }
json mat_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    rows.push_back(std::vector<double>(m.row(i).begin(), m.row(i).end()));
  }
  return rows;
}
Eigen::VectorXd json_vec(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}
Eigen::MatrixXd json_mat(const json& j, Eigen::Index cols) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(j.size()), cols);
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto row = j[i].get<std::vector<double>>();
    if (static_cast<Eigen::Index>(row.size()) != cols) throw SchemaError(1, "ragged matrix in model file");
    for (Eigen::Index c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(i), c) = row[static_cast<std::size_t>(c)];
  }
  return m;
}

}  // namespace

std::string state_to_json(const VariationalState& st, const std::string& config_json) {
  json j;
  j["format"] = "ciodetect-model";
  j["version"] = 1;
  j["mode"] = to_string(st.mode);
  j["supervised"] = st.supervised;
  j["k"] = st.layout.k;
  j["num_flags"] = st.layout.mf;
  j["num_narratives"] = st.layout.msel;
  j["priors"] = {{"mu_clust", vec_json(st.priors.mu_clust)}, {"sigma_clust", vec_json(st.priors.sigma_clust)},
                 {"mu_f", mat_json(st.priors.mu_f)},         {"sigma_f", mat_json(st.priors.sigma_f)},
                 {"mu_n", mat_json(st.priors.mu_n)},         {"sigma_n", mat_json(st.priors.sigma_n)}};
  j["encoder"] = {{"d_in", st.encoder.d_in},
                  {"hidden", st.encoder.hidden},
                  {"dropout", st.encoder.dropout},
                  {"bn_eps", st.encoder.bn_eps},
                  {"bn_momentum", st.encoder.bn_momentum}};
  j["theta"] = vec_json(st.theta);
  json rm = json::array(), rv = json::array();
  for (int t = 0; t < 3; ++t) {
    rm.push_back(vec_json(st.running.mean[t]));
    rv.push_back(vec_json(st.running.var[t]));
  }
  j["running_mean"] = rm;
  j["running_var"] = rv;
  j["adam"] = {{"steps", st.adam_steps}, {"m", vec_json(st.adam_m)}, {"v", vec_json(st.adam_v)}};
  const json cfg = config_json.empty() ? json::object() : json::parse(config_json);
  j["config"] = cfg;
  j["config_sha256"] = sha256_hex(cfg.dump());
  return j.dump() + "\n";
}

VariationalState state_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw SchemaError(1, std::string("model file is not JSON: ") + e.what());
  }
  try {
    if (j.at("format") != "ciodetect-model") throw SchemaError(1, "not a model file");
    if (j.at("version") != 1) throw SchemaError(1, "unsupported model version");
    VariationalState st;
    st.mode = parse_feature_mode(j.at("mode").get<std::string>());
    st.supervised = j.at("supervised").get<bool>();
    const Eigen::Index K = j.at("k").get<Eigen::Index>();
    const Eigen::Index mf = j.at("num_flags").get<Eigen::Index>();
    const Eigen::Index msel = j.at("num_narratives").get<Eigen::Index>();
    const json& p = j.at("priors");
    st.priors.mu_clust = json_vec(p.at("mu_clust"));
    st.priors.sigma_clust = json_vec(p.at("sigma_clust"));
    st.priors.mu_f = json_mat(p.at("mu_f"), mf);
    st.priors.sigma_f = json_mat(p.at("sigma_f"), mf);
    st.priors.mu_n = json_mat(p.at("mu_n"), msel);
    st.priors.sigma_n = json_mat(p.at("sigma_n"), msel);
    st.priors.validate(mf, msel);
    const json& e = j.at("encoder");
    st.encoder.k = K;
    st.encoder.d_in = e.at("d_in").get<Eigen::Index>();
    st.encoder.hidden = e.at("hidden").get<std::array<Eigen::Index, 3>>();
    st.encoder.dropout = e.at("dropout").get<double>();
    st.encoder.bn_eps = e.at("bn_eps").get<double>();
    st.encoder.bn_momentum = e.at("bn_momentum").get<double>();
    st.layout = ParamLayout::make(K, mf, msel, st.encoder.num_params());
    st.theta = json_vec(j.at("theta"));
    if (st.theta.size() != st.layout.total) throw SchemaError(1, "parameter vector has the wrong length");
    for (int t = 0; t < 3; ++t) {
      st.running.mean[t] = json_vec(j.at("running_mean").at(static_cast<std::size_t>(t)));
      st.running.var[t] = json_vec(j.at("running_var").at(static_cast<std::size_t>(t)));
      if (st.running.mean[t].size() != st.encoder.hidden[t] || st.running.var[t].size() != st.encoder.hidden[t]) {
        throw SchemaError(1, "running statistics have the wrong length");
      }
    }
    st.adam_steps = j.at("adam").at("steps").get<long>();
    st.adam_m = json_vec(j.at("adam").at("m"));
    st.adam_v = json_vec(j.at("adam").at("v"));
    return st;
  } catch (const json::exception& e) {
    throw SchemaError(1, std::string("malformed model file: ") + e.what());
  }
}

}  // namespace ciod
