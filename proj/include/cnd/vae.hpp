#pragma once

#include "cnd/model.hpp"

namespace cnd {

struct VaeConfig {
  int input_dim = 16;
  int hidden_dim = 32;
  int latent_dim = 8;
  /// Encode features of the classifier instead of raw inputs.
  bool on_features = false;
  /// Observation variance of the decoder; the reconstruction term is
  /// ||v - v_hat||^2 / (2 sigma2).
  double sigma2 = 1.0;
  double lr = 0.01;
  int epochs = 40;
  int batch_size = 32;
};

/// Gaussian-latent autoencoder: one ReLU hidden layer on each side, diagonal
/// posterior parameterized by (mu, log variance). Trained stage by stage on
/// whatever data the stage provides, with nothing protecting earlier stages;
/// its forgetting is part of what the benchmark measures.
struct VaeModel {
  VaeConfig config;
  DenseLayer enc_hidden;  // input -> hidden, relu
  DenseLayer enc_mu;      // hidden -> latent
  DenseLayer enc_logvar;  // hidden -> latent
  DenseLayer dec_hidden;  // latent -> hidden, relu
  DenseLayer dec_out;     // hidden -> input
};

VaeModel make_vae(const VaeConfig& cfg, uint64_t seed);

std::vector<Tensor*> vae_params(VaeModel& v);

/// One stage of SGD on rows of `inputs`, objective per batch
///   mean_rows [ ||v - v_hat||^2 / (2 sigma2) + KL(q(z|v) || N(0, I)) ]
/// with one reparameterized latent draw per row per step. Randomness
/// (shuffling, latent noise) comes from derive_seed(seed, kSeedVae, stage).
/// Returns the mean per-batch objective of the last epoch.
double train_vae_stage(VaeModel& vae, const Mat& inputs, int stage, uint64_t seed);

struct VaeScore {
  double recon_mse = 0.0;  // reconstruction MSE averaged over latent draws
  double kl = 0.0;         // analytic KL of the posterior
  double elbo = 0.0;       // -recon_mse / (2 sigma2) - kl
};

/// Monte-Carlo evidence bound of one input row, `samples` latent draws from
/// `rng`. Callers that need call-order-independent determinism pass a fresh
/// seeded Rng per call.
VaeScore vae_elbo(const VaeModel& vae, const Vec& v, int samples, Rng& rng);

}  // namespace cnd
