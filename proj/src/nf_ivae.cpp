#include "exo/nf_ivae.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>

#include "exo/stats_util.hpp"

namespace exo::nfivae {

namespace {

constexpr double kLogVarMin = -8.0;
constexpr double kLogVarMax = 8.0;
constexpr double kLog2Pi = 1.8378770664093453;

Eigen::MatrixXd clamp_logvar(const Eigen::MatrixXd& raw) {
  return raw.array().min(kLogVarMax).max(kLogVarMin);
}

Eigen::MatrixXd clamp_mask(const Eigen::MatrixXd& raw) {
  return ((raw.array() > kLogVarMin) && (raw.array() < kLogVarMax)).cast<double>();
}

struct Encoded {
  Eigen::MatrixXd enc_in;
  Mlp::Trace trace;
  Eigen::MatrixXd mu;
  Eigen::MatrixXd logvar;
  Eigen::MatrixXd logvar_mask;
  Eigen::MatrixXd sigma;
  Eigen::MatrixXd s;
};

Encoded encode(const Batch& batch, const NfIvaeModel& m, const Eigen::MatrixXd& noise) {
  const int rows = static_cast<int>(batch.z.rows());
  const int latent = m.cfg.latent_dim;
  Encoded e;
  e.enc_in = Eigen::MatrixXd::Zero(rows, m.obs_dim + m.n_subjects);
  e.enc_in.leftCols(m.obs_dim) = batch.z;
  for (int r = 0; r < rows; ++r) {
    const int j = batch.subject[static_cast<std::size_t>(r)];
    if (j < 0 || j >= m.n_subjects) throw DimensionMismatch("encode: subject index out of range");
    e.enc_in(r, m.obs_dim + j) = 1.0;
  }
  const Eigen::MatrixXd out = m.encoder.forward(e.enc_in, &e.trace);
  e.mu = out.leftCols(latent);
  const Eigen::MatrixXd raw = out.rightCols(latent);
  e.logvar = clamp_logvar(raw);
  e.logvar_mask = clamp_mask(raw);
  e.sigma = (0.5 * e.logvar).array().exp();
  e.s = e.mu + e.sigma.cwiseProduct(noise);
  return e;
}

}  // namespace

Mlp Mlp::create(int in_dim, const std::vector<int>& hidden, int out_dim, Activation act,
                Rng& rng) {
  Mlp mlp;
  mlp.activation = act;
  std::vector<int> dims;
  dims.push_back(in_dim);
  for (int h : hidden) {
    if (h < 1) throw ConfigError("Mlp::create: width < 1");
    dims.push_back(h);
  }
  dims.push_back(out_dim);
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    const int in = dims[k];
    const int out = dims[k + 1];
    Eigen::MatrixXd w(out, in);
    const double scale = std::sqrt(6.0 / static_cast<double>(in + out));
    for (int r = 0; r < out; ++r) {
      for (int c = 0; c < in; ++c) {
        w(r, c) = rng.uniform(-scale, scale);
      }
    }
    mlp.weights.push_back(std::move(w));
    mlp.biases.push_back(Eigen::VectorXd::Zero(out));
  }
  return mlp;
}

Mlp Mlp::zeros_like(const Mlp& other) {
  Mlp g;
  g.activation = other.activation;
  for (const auto& w : other.weights) g.weights.push_back(Eigen::MatrixXd::Zero(w.rows(), w.cols()));
  for (const auto& b : other.biases) g.biases.push_back(Eigen::VectorXd::Zero(b.size()));
  return g;
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& input, Trace* trace) const {
  if (trace != nullptr) {
    trace->input = input;
    trace->pre.clear();
    trace->post.clear();
  }
  Eigen::MatrixXd h = input;
  const std::size_t n_layers = weights.size();
  for (std::size_t k = 0; k + 1 < n_layers; ++k) {
    Eigen::MatrixXd pre = h * weights[k].transpose();
    pre.rowwise() += biases[k].transpose();
    Eigen::MatrixXd post;
    if (activation == Activation::kTanh) {
      post = pre.array().tanh();
    } else {
      post = pre.cwiseMax(0.0);
    }
    if (trace != nullptr) {
      trace->pre.push_back(pre);
      trace->post.push_back(post);
    }
    h = std::move(post);
  }
  Eigen::MatrixXd out = h * weights.back().transpose();
  out.rowwise() += biases.back().transpose();
  if (trace != nullptr) trace->pre.push_back(out);
  return out;
}

Eigen::MatrixXd Mlp::backward(const Trace& trace, const Eigen::MatrixXd& grad_out, Mlp* grads,
                              bool want_input_grad) const {
  const std::size_t n_layers = weights.size();
  Eigen::MatrixXd g = grad_out;
  for (std::size_t k = n_layers; k-- > 0;) {
    const Eigen::MatrixXd& layer_in = k == 0 ? trace.input : trace.post[k - 1];
    if (grads != nullptr) {
      grads->weights[k].noalias() += g.transpose() * layer_in;
      grads->biases[k] += g.colwise().sum().transpose();
    }
    if (k == 0 && !want_input_grad) return Eigen::MatrixXd();
    Eigen::MatrixXd gin = g * weights[k];
    if (k > 0) {
      if (activation == Activation::kTanh) {
        gin.array() *= 1.0 - trace.post[k - 1].array().square();
      } else {
        gin.array() *= (trace.pre[k - 1].array() > 0.0).cast<double>();
      }
    }
    g = std::move(gin);
  }
  return g;
}

Eigen::MatrixXd Mlp::jacobian_row(const Trace& trace, int row) const {
  if (activation != Activation::kRelu) {
    throw ConfigError("jacobian_row: only defined for ReLU nets");
  }
  Eigen::MatrixXd j = weights[0];
  for (std::size_t k = 1; k < weights.size(); ++k) {
    // Mask rows by the activation pattern of the previous layer.
    for (Eigen::Index r = 0; r < j.rows(); ++r) {
      if (trace.pre[k - 1](row, r) <= 0.0) j.row(r).setZero();
    }
    j = weights[k] * j;
  }
  return j;
}

void Mlp::accumulate_jacobian_form(const Trace& trace, int row, const Eigen::VectorXd& a,
                                   const Eigen::VectorXd& b, Mlp* grads) const {
  if (activation != Activation::kRelu) {
    throw ConfigError("accumulate_jacobian_form: only defined for ReLU nets");
  }
  const std::size_t n_layers = weights.size();
  // right[k] = input of weight layer k in the masked linear chain.
  std::vector<Eigen::VectorXd> right(n_layers);
  right[0] = b;
  for (std::size_t k = 1; k < n_layers; ++k) {
    Eigen::VectorXd v = weights[k - 1] * right[k - 1];
    for (Eigen::Index r = 0; r < v.size(); ++r) {
      if (trace.pre[k - 1](row, r) <= 0.0) v[r] = 0.0;
    }
    right[k] = std::move(v);
  }
  // left[k] = downstream row vector hitting weight layer k's output.
  Eigen::VectorXd left = a;
  for (std::size_t k = n_layers; k-- > 0;) {
    grads->weights[k].noalias() += left * right[k].transpose();
    if (k == 0) break;
    Eigen::VectorXd v = weights[k].transpose() * left;
    for (Eigen::Index r = 0; r < v.size(); ++r) {
      if (trace.pre[k - 1](row, r) <= 0.0) v[r] = 0.0;
    }
    left = std::move(v);
  }
}

NfIvaeModel NfIvaeModel::initialize(int obs_dim, int n_subjects, const NfIvaeConfig& cfg) {
  if (cfg.latent_dim < 1) throw ConfigError("latent_dim < 1");
  if (cfg.tnn_dim < 1) throw ConfigError("tnn_dim < 1");
  if (obs_dim < 1 || n_subjects < 1) throw ConfigError("invalid model dimensions");
  NfIvaeModel m;
  m.cfg = cfg;
  m.obs_dim = obs_dim;
  m.n_subjects = n_subjects;
  Rng rng(mix_seed(cfg.seed, 0x696e6974ULL));
  m.encoder = Mlp::create(obs_dim + n_subjects, cfg.encoder_widths, 2 * cfg.latent_dim,
                          Activation::kTanh, rng);
  m.decoder =
      Mlp::create(cfg.latent_dim, cfg.decoder_widths, 2 * obs_dim, Activation::kTanh, rng);
  m.tnn = Mlp::create(cfg.latent_dim, cfg.tnn_widths, cfg.tnn_dim, Activation::kRelu, rng);
  // lambda starts at zero: the prior begins as the standard-normal base measure.
  m.lambda_table = Eigen::MatrixXd::Zero(n_subjects, m.stat_dim());
  m.input_mean = Eigen::VectorXd::Zero(obs_dim);
  m.input_std = Eigen::VectorXd::Ones(obs_dim);
  return m;
}

ModelGrads ModelGrads::zeros_like(const NfIvaeModel& m) {
  ModelGrads g;
  g.encoder = Mlp::zeros_like(m.encoder);
  g.decoder = Mlp::zeros_like(m.decoder);
  g.tnn = Mlp::zeros_like(m.tnn);
  g.lambda_table = Eigen::MatrixXd::Zero(m.lambda_table.rows(), m.lambda_table.cols());
  return g;
}

void ModelGrads::scale(double factor) {
  for (auto& w : encoder.weights) w *= factor;
  for (auto& b : encoder.biases) b *= factor;
  for (auto& w : decoder.weights) w *= factor;
  for (auto& b : decoder.biases) b *= factor;
  for (auto& w : tnn.weights) w *= factor;
  for (auto& b : tnn.biases) b *= factor;
  lambda_table *= factor;
}

Eigen::VectorXd sufficient_statistics(const Eigen::VectorXd& s, const NfIvaeModel& m) {
  Eigen::VectorXd t(m.stat_dim());
  for (int d = 0; d < m.cfg.latent_dim; ++d) {
    t[2 * d] = s[d];
    t[2 * d + 1] = s[d] * s[d];
  }
  t.tail(m.cfg.tnn_dim) = m.tnn.forward(s.transpose()).row(0);
  return t;
}

double prior_log_density_unnormalized(const Eigen::VectorXd& s, int j, const NfIvaeModel& m) {
  if (s.size() != m.cfg.latent_dim) throw DimensionMismatch("prior: latent size mismatch");
  if (j < 0 || j >= m.n_subjects) throw DimensionMismatch("prior: subject out of range");
  if (!s.allFinite()) throw NonFiniteLoss("prior: non-finite latent");
  const double log_q =
      -0.5 * s.squaredNorm() - 0.5 * static_cast<double>(m.cfg.latent_dim) * kLog2Pi;
  return log_q + sufficient_statistics(s, m).dot(m.lambda_table.row(j));
}

Eigen::VectorXd prior_score(const Eigen::VectorXd& s, int j, const NfIvaeModel& m) {
  const Eigen::VectorXd lambda = m.lambda_table.row(j);
  Eigen::VectorXd score = -s;
  for (int d = 0; d < m.cfg.latent_dim; ++d) {
    score[d] += lambda[2 * d] + 2.0 * lambda[2 * d + 1] * s[d];
  }
  Mlp::Trace trace;
  m.tnn.forward(s.transpose(), &trace);
  const Eigen::MatrixXd j_nn = m.tnn.jacobian_row(trace, 0);
  score += j_nn.transpose() * lambda.tail(m.cfg.tnn_dim);
  return score;
}

Eigen::MatrixXd draw_noise(int rows, int cols, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x6e6f6973ULL));
  Eigen::MatrixXd noise(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      noise(r, c) = rng.normal();
    }
  }
  return noise;
}

double elbo_with_noise(const Batch& batch, const NfIvaeModel& m, const Eigen::MatrixXd& noise) {
  return elbo_backward(batch, m, noise, nullptr);
}

double elbo(const Batch& batch, const NfIvaeModel& m, std::uint64_t noise_seed) {
  return elbo_with_noise(
      batch, m, draw_noise(static_cast<int>(batch.z.rows()), m.cfg.latent_dim, noise_seed));
}

double elbo_backward(const Batch& batch, const NfIvaeModel& m, const Eigen::MatrixXd& noise,
                     ModelGrads* grads) {
  if (batch.z.rows() == 0) throw ConfigError("elbo: empty batch");
  if (batch.z.cols() != m.obs_dim) throw DimensionMismatch("elbo: observation size mismatch");
  const int rows = static_cast<int>(batch.z.rows());
  const int latent = m.cfg.latent_dim;
  const double inv_rows = 1.0 / static_cast<double>(rows);

  const Encoded enc = encode(batch, m, noise);

  Mlp::Trace dec_trace;
  const Eigen::MatrixXd dec_out = m.decoder.forward(enc.s, &dec_trace);
  const Eigen::MatrixXd mu_p = dec_out.leftCols(m.obs_dim);
  const Eigen::MatrixXd lv_raw = dec_out.rightCols(m.obs_dim);
  const Eigen::MatrixXd lv_p = clamp_logvar(lv_raw);
  const Eigen::MatrixXd lv_mask = clamp_mask(lv_raw);

  const Eigen::ArrayXXd resid = (batch.z - mu_p).array();
  const Eigen::ArrayXXd inv_var = (-lv_p).array().exp();
  const double recon =
      (-0.5 * (kLog2Pi + lv_p.array()) - 0.5 * resid.square() * inv_var).sum() * inv_rows;

  // Unnormalized prior term with (T, lambda) held constant.
  Mlp::Trace tnn_trace;
  const Eigen::MatrixXd t_nn = m.tnn.forward(enc.s, &tnn_trace);
  Eigen::MatrixXd lambda_rows(rows, m.stat_dim());
  for (int r = 0; r < rows; ++r) {
    lambda_rows.row(r) = m.lambda_table.row(batch.subject[static_cast<std::size_t>(r)]);
  }
  double prior = 0.0;
  for (int r = 0; r < rows; ++r) {
    double dot = 0.0;
    for (int d = 0; d < latent; ++d) {
      dot += lambda_rows(r, 2 * d) * enc.s(r, d) +
             lambda_rows(r, 2 * d + 1) * enc.s(r, d) * enc.s(r, d);
    }
    dot += lambda_rows.row(r).tail(m.cfg.tnn_dim).dot(t_nn.row(r));
    prior += -0.5 * enc.s.row(r).squaredNorm() - 0.5 * latent * kLog2Pi + dot;
  }
  prior *= inv_rows;

  // log q evaluated at the reparameterized sample.
  const double log_q =
      (-0.5 * (kLog2Pi + enc.logvar.array()) - 0.5 * noise.array().square()).sum() * inv_rows;

  const double value = recon + prior - log_q;
  if (!std::isfinite(value)) throw NonFiniteLoss("elbo is not finite");
  if (grads == nullptr) return value;

  // Reconstruction gradients through the decoder.
  Eigen::MatrixXd dec_grad(rows, 2 * m.obs_dim);
  dec_grad.leftCols(m.obs_dim) = (resid * inv_var).matrix() * inv_rows;
  dec_grad.rightCols(m.obs_dim) =
      ((-0.5 + 0.5 * resid.square() * inv_var).matrix().cwiseProduct(lv_mask)) * inv_rows;
  Eigen::MatrixXd g_s = m.decoder.backward(dec_trace, dec_grad, &grads->decoder, true);

  // Prior gradients with respect to the sample.
  for (int r = 0; r < rows; ++r) {
    for (int d = 0; d < latent; ++d) {
      g_s(r, d) += (-enc.s(r, d) + lambda_rows(r, 2 * d) +
                    2.0 * lambda_rows(r, 2 * d + 1) * enc.s(r, d)) *
                   inv_rows;
    }
  }
  const Eigen::MatrixXd tnn_out_grad = lambda_rows.rightCols(m.cfg.tnn_dim) * inv_rows;
  g_s += m.tnn.backward(tnn_trace, tnn_out_grad, nullptr, true);

  // Through the reparameterization into the encoder heads.
  Eigen::MatrixXd enc_grad(rows, 2 * latent);
  enc_grad.leftCols(latent) = g_s;
  enc_grad.rightCols(latent) =
      (g_s.cwiseProduct(enc.sigma.cwiseProduct(noise)) * 0.5 +
       Eigen::MatrixXd::Constant(rows, latent, 0.5 * inv_rows))
          .cwiseProduct(enc.logvar_mask);
  m.encoder.backward(enc.trace, enc_grad, &grads->encoder, false);
  return value;
}

double score_matching_with_noise(const Batch& batch, const NfIvaeModel& m,
                                 const Eigen::MatrixXd& noise) {
  return score_matching_backward(batch, m, noise, nullptr);
}

double score_matching_loss(const Batch& batch, const NfIvaeModel& m, std::uint64_t noise_seed) {
  return score_matching_with_noise(
      batch, m, draw_noise(static_cast<int>(batch.z.rows()), m.cfg.latent_dim, noise_seed));
}

double score_matching_backward(const Batch& batch, const NfIvaeModel& m,
                               const Eigen::MatrixXd& noise, ModelGrads* grads) {
  if (batch.z.rows() == 0) throw ConfigError("score matching: empty batch");
  const int rows = static_cast<int>(batch.z.rows());
  const int latent = m.cfg.latent_dim;
  const double inv_rows = 1.0 / static_cast<double>(rows);

  // Samples from q with gradients blocked from the encoder.
  const Encoded enc = encode(batch, m, noise);
  Mlp::Trace tnn_trace;
  m.tnn.forward(enc.s, &tnn_trace);

  double loss = 0.0;
  for (int r = 0; r < rows; ++r) {
    const int j = batch.subject[static_cast<std::size_t>(r)];
    const Eigen::VectorXd lambda = m.lambda_table.row(j);
    const Eigen::VectorXd lambda_nn = lambda.tail(m.cfg.tnn_dim);
    const Eigen::MatrixXd j_nn = m.tnn.jacobian_row(tnn_trace, r);
    Eigen::VectorXd score(latent);
    double laplacian = 0.0;
    for (int d = 0; d < latent; ++d) {
      score[d] = -enc.s(r, d) + lambda[2 * d] + 2.0 * lambda[2 * d + 1] * enc.s(r, d);
      laplacian += -1.0 + 2.0 * lambda[2 * d + 1];
    }
    score += j_nn.transpose() * lambda_nn;
    loss += laplacian + 0.5 * score.squaredNorm();
    if (grads != nullptr) {
      auto lrow = grads->lambda_table.row(j);
      for (int d = 0; d < latent; ++d) {
        lrow[2 * d] += score[d] * inv_rows;
        lrow[2 * d + 1] += (2.0 + 2.0 * score[d] * enc.s(r, d)) * inv_rows;
      }
      lrow.tail(m.cfg.tnn_dim) += (j_nn * score).transpose() * inv_rows;
      // d/dW of lambda_nn^T J(s) score, with the score treated as the
      // fixed coefficient vector of the quadratic term.
      m.tnn.accumulate_jacobian_form(tnn_trace, r, lambda_nn * inv_rows, score, &grads->tnn);
    }
  }
  loss *= inv_rows;
  if (!std::isfinite(loss)) throw NonFiniteLoss("score matching loss is not finite");
  return loss;
}

namespace {

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  int t = 0;
};

void adam_step(Eigen::VectorXd& params, const Eigen::VectorXd& grad, AdamState& state,
               double lr) {
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;
  if (state.m.size() == 0) {
    state.m = Eigen::VectorXd::Zero(params.size());
    state.v = Eigen::VectorXd::Zero(params.size());
  }
  ++state.t;
  state.m = kBeta1 * state.m + (1.0 - kBeta1) * grad;
  state.v = kBeta2 * state.v + (1.0 - kBeta2) * grad.cwiseProduct(grad);
  const double bc1 = 1.0 - std::pow(kBeta1, state.t);
  const double bc2 = 1.0 - std::pow(kBeta2, state.t);
  params.array() -=
      lr * (state.m.array() / bc1) / ((state.v.array() / bc2).sqrt() + kEps);
}

void append_flat(const Mlp& mlp, std::vector<double>* out) {
  for (const auto& w : mlp.weights) {
    out->insert(out->end(), w.data(), w.data() + w.size());
  }
  for (const auto& b : mlp.biases) {
    out->insert(out->end(), b.data(), b.data() + b.size());
  }
}

std::size_t read_flat(Mlp& mlp, const Eigen::VectorXd& flat, std::size_t pos) {
  for (auto& w : mlp.weights) {
    std::copy(flat.data() + pos, flat.data() + pos + w.size(), w.data());
    pos += w.size();
  }
  for (auto& b : mlp.biases) {
    std::copy(flat.data() + pos, flat.data() + pos + b.size(), b.data());
    pos += b.size();
  }
  return pos;
}

}  // namespace

Eigen::VectorXd flatten_parameters(const NfIvaeModel& m) {
  std::vector<double> buf;
  append_flat(m.encoder, &buf);
  append_flat(m.decoder, &buf);
  append_flat(m.tnn, &buf);
  buf.insert(buf.end(), m.lambda_table.data(), m.lambda_table.data() + m.lambda_table.size());
  return Eigen::Map<Eigen::VectorXd>(buf.data(), static_cast<Eigen::Index>(buf.size()));
}

void unflatten_parameters(const Eigen::VectorXd& flat, NfIvaeModel* m) {
  std::size_t pos = 0;
  pos = read_flat(m->encoder, flat, pos);
  pos = read_flat(m->decoder, flat, pos);
  pos = read_flat(m->tnn, flat, pos);
  std::copy(flat.data() + pos, flat.data() + pos + m->lambda_table.size(),
            m->lambda_table.data());
  pos += m->lambda_table.size();
  if (pos != static_cast<std::size_t>(flat.size())) {
    throw DimensionMismatch("unflatten_parameters: size mismatch");
  }
}

Eigen::VectorXd flatten_grads(const ModelGrads& g) {
  std::vector<double> buf;
  append_flat(g.encoder, &buf);
  append_flat(g.decoder, &buf);
  append_flat(g.tnn, &buf);
  buf.insert(buf.end(), g.lambda_table.data(), g.lambda_table.data() + g.lambda_table.size());
  return Eigen::Map<Eigen::VectorXd>(buf.data(), static_cast<Eigen::Index>(buf.size()));
}

TrainResult train_nfivae(const Eigen::MatrixXd& z_raw, const std::vector<int>& subject,
                         const NfIvaeConfig& cfg) {
  if (z_raw.rows() < 1) throw ConfigError("train: empty dataset");
  if (static_cast<std::size_t>(z_raw.rows()) != subject.size()) {
    throw DimensionMismatch("train: subject index count mismatch");
  }
  int n_subjects = 0;
  for (int j : subject) {
    if (j < 0) throw ConfigError("train: negative subject index");
    n_subjects = std::max(n_subjects, j + 1);
  }
  const int obs_dim = static_cast<int>(z_raw.cols());

  TrainResult result;
  result.model = NfIvaeModel::initialize(obs_dim, n_subjects, cfg);
  NfIvaeModel& model = result.model;

  // Pooled per-node standardization, recorded for inference.
  for (int c = 0; c < obs_dim; ++c) {
    const double mean = z_raw.col(c).mean();
    const double sd = std::sqrt((z_raw.col(c).array() - mean).square().sum() /
                                static_cast<double>(z_raw.rows()));
    model.input_mean[c] = mean;
    model.input_std[c] = sd > 1e-12 ? sd : 1.0;
  }
  Eigen::MatrixXd z(z_raw.rows(), obs_dim);
  for (int c = 0; c < obs_dim; ++c) {
    z.col(c) = (z_raw.col(c).array() - model.input_mean[c]) / model.input_std[c];
  }

  if (cfg.latent_dim > obs_dim) {
    result.diagnostics.push_back("latent_dim " + std::to_string(cfg.latent_dim) +
                                 " exceeds observed dimension " + std::to_string(obs_dim));
  }
  const int k = model.stat_dim();
  if (n_subjects < k + 1) {
    result.diagnostics.push_back(
        "subjects J=" + std::to_string(n_subjects) + " below dim(T)+1=" + std::to_string(k + 1) +
        "; the k+1 distinct natural-parameter points cannot exist");
  }
  if (cfg.epochs == 0) return result;

  const std::size_t rows = static_cast<std::size_t>(z.rows());
  const int batch_size = std::max(1, cfg.batch_size);
  std::vector<std::size_t> order(rows);
  for (std::size_t i = 0; i < rows; ++i) order[i] = i;

  // Fixed-noise evaluation slice; the progress guard compares identical
  // functions of the parameters across epochs.
  Batch eval_batch;
  const Eigen::Index eval_rows = std::min<Eigen::Index>(z.rows(), 2048);
  eval_batch.z = z.topRows(eval_rows);
  eval_batch.subject.assign(subject.begin(), subject.begin() + eval_rows);
  const Eigen::MatrixXd eval_noise_elbo =
      draw_noise(static_cast<int>(eval_rows), cfg.latent_dim, mix_seed(cfg.seed, 0x6576616cULL, 1));
  const Eigen::MatrixXd eval_noise_sm =
      draw_noise(static_cast<int>(eval_rows), cfg.latent_dim, mix_seed(cfg.seed, 0x6576616cULL, 2));
  const auto eval_total = [&](const NfIvaeModel& m) {
    return -elbo_with_noise(eval_batch, m, eval_noise_elbo) +
           cfg.score_match_weight * score_matching_with_noise(eval_batch, m, eval_noise_sm);
  };
  const double initial_eval = eval_total(model);
  double best_eval = std::numeric_limits<double>::infinity();

  AdamState adam;
  Eigen::VectorXd params = flatten_parameters(model);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(cfg.seed, 0x65706f63ULL, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    double epoch_elbo = 0.0;
    double epoch_sm = 0.0;
    int n_batches = 0;
    for (std::size_t start = 0; start < rows; start += batch_size) {
      const std::size_t len = std::min<std::size_t>(batch_size, rows - start);
      Batch batch;
      batch.z.resize(static_cast<Eigen::Index>(len), obs_dim);
      batch.subject.resize(len);
      for (std::size_t i = 0; i < len; ++i) {
        batch.z.row(static_cast<Eigen::Index>(i)) = z.row(static_cast<Eigen::Index>(order[start + i]));
        batch.subject[i] = subject[order[start + i]];
      }
      const std::uint64_t tag = mix_seed(cfg.seed, 0x62617463ULL,
                                         static_cast<std::uint64_t>(epoch),
                                         static_cast<std::uint64_t>(start));
      const Eigen::MatrixXd noise_elbo =
          draw_noise(static_cast<int>(len), cfg.latent_dim, mix_seed(tag, 1));
      const Eigen::MatrixXd noise_sm =
          draw_noise(static_cast<int>(len), cfg.latent_dim, mix_seed(tag, 2));
      ModelGrads grads = ModelGrads::zeros_like(model);
      double batch_elbo = 0.0;
      double batch_sm = 0.0;
      try {
        batch_elbo = elbo_backward(batch, model, noise_elbo, &grads);
        // ELBO is maximized: flip its parameter gradients for the descent
        // direction, then add the weighted score-matching gradients.
        for (auto& w : grads.encoder.weights) w *= -1.0;
        for (auto& b : grads.encoder.biases) b *= -1.0;
        for (auto& w : grads.decoder.weights) w *= -1.0;
        for (auto& b : grads.decoder.biases) b *= -1.0;
        ModelGrads sm_grads = ModelGrads::zeros_like(model);
        batch_sm = score_matching_backward(batch, model, noise_sm, &sm_grads);
        grads.tnn = sm_grads.tnn;
        grads.lambda_table = sm_grads.lambda_table;
        for (auto& w : grads.tnn.weights) w *= cfg.score_match_weight;
        for (auto& b : grads.tnn.biases) b *= cfg.score_match_weight;
        grads.lambda_table *= cfg.score_match_weight;
      } catch (const NonFiniteLoss& e) {
        throw NonFiniteLoss(std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                            ", batch " + std::to_string(n_batches));
      }
      const Eigen::VectorXd flat_grads = flatten_grads(grads);
      adam_step(params, flat_grads, adam, cfg.learning_rate);
      unflatten_parameters(params, &model);
      epoch_elbo += batch_elbo;
      epoch_sm += batch_sm;
      ++n_batches;
    }
    TrainLogEntry entry;
    entry.epoch = epoch;
    entry.elbo = epoch_elbo / n_batches;
    entry.score_matching = epoch_sm / n_batches;
    entry.total = -entry.elbo + cfg.score_match_weight * entry.score_matching;
    result.log.push_back(entry);
    best_eval = std::min(best_eval, eval_total(model));
  }

  if (cfg.epochs >= 5 && best_eval >= initial_eval) {
    throw NoProgress("training loss failed to improve on the initial parameters");
  }

  // Identifiability diagnostic: rank of the natural-parameter differences.
  if (n_subjects > 1) {
    Eigen::MatrixXd diffs(n_subjects - 1, model.stat_dim());
    for (int j = 1; j < n_subjects; ++j) {
      diffs.row(j - 1) = model.lambda_table.row(j) - model.lambda_table.row(0);
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(diffs);
    const double tol = 1e-8 * svd.singularValues()[0];
    int rank = 0;
    for (Eigen::Index i = 0; i < svd.singularValues().size(); ++i) {
      if (svd.singularValues()[i] > tol) ++rank;
    }
    if (rank < model.stat_dim()) {
      result.diagnostics.push_back("natural-parameter variation has rank " +
                                   std::to_string(rank) + " < dim(T)=" +
                                   std::to_string(model.stat_dim()));
    }
  }
  return result;
}

LatentEstimate infer_latents(const NfIvaeModel& m, const Eigen::MatrixXd& z_raw,
                             const std::vector<int>& subject) {
  if (z_raw.cols() != m.obs_dim) throw DimensionMismatch("infer_latents: observation mismatch");
  if (static_cast<std::size_t>(z_raw.rows()) != subject.size()) {
    throw DimensionMismatch("infer_latents: subject count mismatch");
  }
  Batch batch;
  batch.z.resize(z_raw.rows(), m.obs_dim);
  for (int c = 0; c < m.obs_dim; ++c) {
    batch.z.col(c) = (z_raw.col(c).array() - m.input_mean[c]) / m.input_std[c];
  }
  batch.subject = subject;
  const Eigen::MatrixXd noise = Eigen::MatrixXd::Zero(z_raw.rows(), m.cfg.latent_dim);
  const Encoded enc = encode(batch, m, noise);
  LatentEstimate est;
  est.latents = enc.mu;
  est.subject = subject;
  if (!est.latents.allFinite()) throw NonFiniteLoss("infer_latents: non-finite posterior mean");
  return est;
}

namespace {

nlohmann::json mlp_to_json(const Mlp& mlp) {
  nlohmann::json j;
  j["activation"] = mlp.activation == Activation::kTanh ? "tanh" : "relu";
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t k = 0; k < mlp.weights.size(); ++k) {
    nlohmann::json layer;
    layer["rows"] = mlp.weights[k].rows();
    layer["cols"] = mlp.weights[k].cols();
    layer["w"] = std::vector<double>(mlp.weights[k].data(),
                                     mlp.weights[k].data() + mlp.weights[k].size());
    layer["b"] = std::vector<double>(mlp.biases[k].data(),
                                     mlp.biases[k].data() + mlp.biases[k].size());
    layers.push_back(layer);
  }
  j["layers"] = layers;
  return j;
}

Mlp mlp_from_json(const nlohmann::json& j) {
  Mlp mlp;
  mlp.activation = j.at("activation") == "tanh" ? Activation::kTanh : Activation::kRelu;
  for (const auto& layer : j.at("layers")) {
    const Eigen::Index rows = layer.at("rows");
    const Eigen::Index cols = layer.at("cols");
    const std::vector<double> w = layer.at("w");
    const std::vector<double> b = layer.at("b");
    if (static_cast<Eigen::Index>(w.size()) != rows * cols ||
        static_cast<Eigen::Index>(b.size()) != rows) {
      throw DataError("checkpoint: layer size mismatch");
    }
    mlp.weights.push_back(Eigen::Map<const Eigen::MatrixXd>(w.data(), rows, cols));
    mlp.biases.push_back(Eigen::Map<const Eigen::VectorXd>(b.data(), rows));
  }
  return mlp;
}

}  // namespace

void save_checkpoint(const NfIvaeModel& m, const std::string& path) {
  nlohmann::json j;
  j["format"] = "nf-ivae-checkpoint";
  j["version"] = 1;
  j["obs_dim"] = m.obs_dim;
  j["n_subjects"] = m.n_subjects;
  nlohmann::json cfg;
  cfg["latent_dim"] = m.cfg.latent_dim;
  cfg["encoder_widths"] = m.cfg.encoder_widths;
  cfg["decoder_widths"] = m.cfg.decoder_widths;
  cfg["tnn_widths"] = m.cfg.tnn_widths;
  cfg["tnn_dim"] = m.cfg.tnn_dim;
  cfg["learning_rate"] = m.cfg.learning_rate;
  cfg["epochs"] = m.cfg.epochs;
  cfg["batch_size"] = m.cfg.batch_size;
  cfg["seed"] = m.cfg.seed;
  cfg["score_match_weight"] = m.cfg.score_match_weight;
  j["config"] = cfg;
  j["input_mean"] = std::vector<double>(m.input_mean.data(), m.input_mean.data() + m.input_mean.size());
  j["input_std"] = std::vector<double>(m.input_std.data(), m.input_std.data() + m.input_std.size());
  j["encoder"] = mlp_to_json(m.encoder);
  j["decoder"] = mlp_to_json(m.decoder);
  j["tnn"] = mlp_to_json(m.tnn);
  j["lambda_rows"] = m.lambda_table.rows();
  j["lambda_cols"] = m.lambda_table.cols();
  j["lambda"] = std::vector<double>(m.lambda_table.data(),
                                    m.lambda_table.data() + m.lambda_table.size());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out << j.dump(1) << "\n";
}

NfIvaeModel load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read checkpoint: " + path);
  nlohmann::json j;
  in >> j;
  if (j.value("format", "") != "nf-ivae-checkpoint" || j.value("version", 0) != 1) {
    throw DataError("unrecognized checkpoint format: " + path);
  }
  NfIvaeModel m;
  const auto& cfg = j.at("config");
  m.cfg.latent_dim = cfg.at("latent_dim");
  m.cfg.encoder_widths = cfg.at("encoder_widths").get<std::vector<int>>();
  m.cfg.decoder_widths = cfg.at("decoder_widths").get<std::vector<int>>();
  m.cfg.tnn_widths = cfg.at("tnn_widths").get<std::vector<int>>();
  m.cfg.tnn_dim = cfg.at("tnn_dim");
  m.cfg.learning_rate = cfg.at("learning_rate");
  m.cfg.epochs = cfg.at("epochs");
  m.cfg.batch_size = cfg.at("batch_size");
  m.cfg.seed = cfg.at("seed");
  m.cfg.score_match_weight = cfg.at("score_match_weight");
  m.obs_dim = j.at("obs_dim");
  m.n_subjects = j.at("n_subjects");
  const std::vector<double> mean = j.at("input_mean");
  const std::vector<double> sd = j.at("input_std");
  m.input_mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  m.input_std = Eigen::Map<const Eigen::VectorXd>(sd.data(), static_cast<Eigen::Index>(sd.size()));
  m.encoder = mlp_from_json(j.at("encoder"));
  m.decoder = mlp_from_json(j.at("decoder"));
  m.tnn = mlp_from_json(j.at("tnn"));
  const Eigen::Index lr = j.at("lambda_rows");
  const Eigen::Index lc = j.at("lambda_cols");
  const std::vector<double> lambda = j.at("lambda");
  if (static_cast<Eigen::Index>(lambda.size()) != lr * lc) {
    throw DataError("checkpoint: lambda size mismatch");
  }
  m.lambda_table = Eigen::Map<const Eigen::MatrixXd>(lambda.data(), lr, lc);
  return m;
}

void write_training_log_csv(const std::vector<TrainLogEntry>& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write training log: " + path);
  out << "epoch,elbo,score_matching,total\n";
  char buf[120];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g", e.epoch, e.elbo, e.score_matching,
                  e.total);
    out << buf << "\n";
  }
}

}  // namespace exo::nfivae
