#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "exo/errors.hpp"
#include "exo/rng.hpp"

namespace exo::nfivae {

enum class Activation { kTanh, kRelu };

// Dense net with affine output layer; backward pass fills a same-shaped
// gradient structure.
struct Mlp {
  std::vector<Eigen::MatrixXd> weights;  // layer k: out x in
  std::vector<Eigen::VectorXd> biases;
  Activation activation = Activation::kTanh;

  struct Trace {
    Eigen::MatrixXd input;                 // batch x in
    std::vector<Eigen::MatrixXd> pre;      // per hidden layer + output, batch x width
    std::vector<Eigen::MatrixXd> post;     // per hidden layer, batch x width
  };

  static Mlp create(int in_dim, const std::vector<int>& hidden, int out_dim, Activation act,
                    Rng& rng);
  static Mlp zeros_like(const Mlp& other);

  int input_dim() const { return static_cast<int>(weights.front().cols()); }
  int output_dim() const { return static_cast<int>(weights.back().rows()); }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& input, Trace* trace = nullptr) const;

  // Backprop of grad_out (batch x out). Accumulates parameter gradients into
  // `grads` when non-null; returns input gradients when requested.
  Eigen::MatrixXd backward(const Trace& trace, const Eigen::MatrixXd& grad_out, Mlp* grads,
                           bool want_input_grad) const;

  // Input Jacobian (out x in) at one traced row; ReLU nets only, where the
  // activation pattern is locally constant.
  Eigen::MatrixXd jacobian_row(const Trace& trace, int row) const;

  // Accumulates d/dparams of a^T J(s) b at a traced row into `grads`
  // (ReLU only; bias gradients vanish almost everywhere).
  void accumulate_jacobian_form(const Trace& trace, int row, const Eigen::VectorXd& a,
                                const Eigen::VectorXd& b, Mlp* grads) const;
};

struct NfIvaeConfig {
  int latent_dim = 2;
  std::vector<int> encoder_widths{32};
  std::vector<int> decoder_widths{16};
  std::vector<int> tnn_widths{8};
  int tnn_dim = 4;  // output dimension of the neural sufficient statistic
  double learning_rate = 7e-3;
  int epochs = 50;
  int batch_size = 256;
  std::uint64_t seed = 0;
  double score_match_weight = 1.0;
};

// Encoder q(S|Z,J), decoder p(Z|S), and the conditional prior
// p(S|J) ~ Q(S) exp(T(S)^T lambda(J)) with T = [per-dim (s, s^2); T_NN(S)]
// and one natural-parameter row per subject. T_NN uses ReLU activations.
struct NfIvaeModel {
  NfIvaeConfig cfg;
  int obs_dim = 0;
  int n_subjects = 0;
  Mlp encoder;  // (obs + one-hot subject) -> (mu, logvar) of q
  Mlp decoder;  // latent -> (mu, logvar) of p(Z|S)
  Mlp tnn;      // latent -> tnn_dim, ReLU
  Eigen::MatrixXd lambda_table;  // n_subjects x stat_dim
  Eigen::VectorXd input_mean;    // recorded standardization of observed dims
  Eigen::VectorXd input_std;

  int stat_dim() const { return 2 * cfg.latent_dim + cfg.tnn_dim; }
  static NfIvaeModel initialize(int obs_dim, int n_subjects, const NfIvaeConfig& cfg);
};

struct Batch {
  Eigen::MatrixXd z;         // rows x obs_dim, already standardized
  std::vector<int> subject;  // one subject index per row
};

// Gradient accumulator mirroring the parameter groups.
struct ModelGrads {
  Mlp encoder;
  Mlp decoder;
  Mlp tnn;
  Eigen::MatrixXd lambda_table;
  static ModelGrads zeros_like(const NfIvaeModel& m);
  void scale(double factor);
};

// log Q(s) + T(s)^T lambda(j); the log normalizer is omitted.
double prior_log_density_unnormalized(const Eigen::VectorXd& s, int j, const NfIvaeModel& m);

// d/ds of the unnormalized prior log density.
Eigen::VectorXd prior_score(const Eigen::VectorXd& s, int j, const NfIvaeModel& m);

// Sufficient statistics T(s) = [s_1, s_1^2, ..., s_L, s_L^2, T_NN(s)].
Eigen::VectorXd sufficient_statistics(const Eigen::VectorXd& s, const NfIvaeModel& m);

// Mean single-sample reparameterized ELBO over the batch. The prior term
// treats (T, lambda) as constants; their fitting is the score-matching
// objective's job.
double elbo(const Batch& batch, const NfIvaeModel& m, std::uint64_t noise_seed);
double elbo_with_noise(const Batch& batch, const NfIvaeModel& m, const Eigen::MatrixXd& noise);
double elbo_backward(const Batch& batch, const NfIvaeModel& m, const Eigen::MatrixXd& noise,
                     ModelGrads* grads);

// Mean Hyvarinen score-matching loss of the unnormalized prior on latent
// samples drawn from the current q; gradients flow to (lambda, T_NN) only.
double score_matching_loss(const Batch& batch, const NfIvaeModel& m, std::uint64_t noise_seed);
double score_matching_with_noise(const Batch& batch, const NfIvaeModel& m,
                                 const Eigen::MatrixXd& noise);
double score_matching_backward(const Batch& batch, const NfIvaeModel& m,
                               const Eigen::MatrixXd& noise, ModelGrads* grads);

Eigen::MatrixXd draw_noise(int rows, int cols, std::uint64_t seed);

struct TrainLogEntry {
  int epoch = 0;
  double elbo = 0.0;
  double score_matching = 0.0;
  double total = 0.0;
};

struct TrainResult {
  NfIvaeModel model;
  std::vector<TrainLogEntry> log;
  std::vector<std::string> diagnostics;
};

// Joint minimization of -elbo + w * score_matching by Adam with the
// stop-gradient split described above; deterministic given cfg.seed.
TrainResult train_nfivae(const Eigen::MatrixXd& z_raw, const std::vector<int>& subject,
                         const NfIvaeConfig& cfg);

struct LatentEstimate {
  Eigen::MatrixXd latents;  // rows x latent_dim, posterior means
  std::vector<int> subject;
};

LatentEstimate infer_latents(const NfIvaeModel& m, const Eigen::MatrixXd& z_raw,
                             const std::vector<int>& subject);

void save_checkpoint(const NfIvaeModel& m, const std::string& path);
NfIvaeModel load_checkpoint(const std::string& path);

void write_training_log_csv(const std::vector<TrainLogEntry>& log, const std::string& path);

// Flat parameter access used by the optimizer and the gradient checks.
// Order: encoder, decoder, tnn, lambda.
Eigen::VectorXd flatten_parameters(const NfIvaeModel& m);
void unflatten_parameters(const Eigen::VectorXd& flat, NfIvaeModel* m);
Eigen::VectorXd flatten_grads(const ModelGrads& g);

}  // namespace exo::nfivae
