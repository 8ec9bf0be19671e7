#include "cnd/vae.hpp"

#include <cmath>

namespace cnd {

namespace {

void init_uniform(Mat& m, int fan_in, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) m(i, j) = rng.uniform(-bound, bound);
}

DenseLayer make_layer(int in, int out, bool relu_after, Rng& rng) {
  DenseLayer l;
  l.weight = Tensor(Mat(in, out), true);
  l.bias = Tensor(Mat(1, out), true);
  l.relu_after = relu_after;
  init_uniform(l.weight.value, in, rng);
  init_uniform(l.bias.value, in, rng);
  return l;
}

Mat eval_layer(const DenseLayer& l, const Mat& x) {
  Mat z = (x * l.weight.value).rowwise() + Eigen::RowVectorXd(l.bias.value.row(0));
  if (l.relu_after) z = z.cwiseMax(0.0);
  return z;
}

VarId layer_train(Tape& t, DenseLayer& l, VarId x) {
  VarId h = add_rowwise(t, matmul(t, x, t.watch(l.weight)), t.watch(l.bias));
  if (l.relu_after) h = relu(t, h);
  return h;
}

void validate(const VaeConfig& cfg) {
  if (cfg.input_dim < 1 || cfg.hidden_dim < 1 || cfg.latent_dim < 1)
    throw ConfigError("vae: input_dim, hidden_dim, and latent_dim must be positive");
  if (!(cfg.sigma2 > 0.0)) throw ConfigError("vae: sigma2 must be positive");
  if (!(cfg.lr > 0.0)) throw ConfigError("vae: lr must be positive");
  if (cfg.epochs < 0) throw ConfigError("vae: epochs must be nonnegative");
  if (cfg.batch_size < 1) throw ConfigError("vae: batch_size must be positive");
}

}  // namespace

VaeModel make_vae(const VaeConfig& cfg, uint64_t seed) {
  validate(cfg);
  Rng rng(seed);
  VaeModel v;
  v.config = cfg;
  v.enc_hidden = make_layer(cfg.input_dim, cfg.hidden_dim, true, rng);
  v.enc_mu = make_layer(cfg.hidden_dim, cfg.latent_dim, false, rng);
  v.enc_logvar = make_layer(cfg.hidden_dim, cfg.latent_dim, false, rng);
  v.dec_hidden = make_layer(cfg.latent_dim, cfg.hidden_dim, true, rng);
  v.dec_out = make_layer(cfg.hidden_dim, cfg.input_dim, false, rng);
  return v;
}

std::vector<Tensor*> vae_params(VaeModel& v) {
  std::vector<Tensor*> out;
  for (DenseLayer* l : {&v.enc_hidden, &v.enc_mu, &v.enc_logvar, &v.dec_hidden, &v.dec_out}) {
    out.push_back(&l->weight);
    out.push_back(&l->bias);
  }
  return out;
}

double train_vae_stage(VaeModel& vae, const Mat& inputs, int stage, uint64_t seed) {
  validate(vae.config);
  if (stage < 0) throw IndexError("vae: stage must be nonnegative");
  if (inputs.rows() < 1) throw ConfigError("vae: no training inputs");
  if (inputs.cols() != vae.config.input_dim)
    throw DimensionError("vae: inputs have " + std::to_string(inputs.cols()) +
                         " columns, expected " + std::to_string(vae.config.input_dim));
  if (vae.config.epochs == 0) return 0.0;

  Rng rng(derive_seed(seed, kSeedVae, static_cast<uint64_t>(stage)));
  const int n = static_cast<int>(inputs.rows());
  const int latent = vae.config.latent_dim;
  const double inv_2s2 = 1.0 / (2.0 * vae.config.sigma2);
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  const std::vector<Tensor*> params = vae_params(vae);

  double epoch_mean = 0.0;
  for (int epoch = 0; epoch < vae.config.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    int batches = 0;
    for (int start = 0; start < n; start += vae.config.batch_size) {
      const int b = std::min(vae.config.batch_size, n - start);
      Mat x(b, inputs.cols());
      for (int i = 0; i < b; ++i) x.row(i) = inputs.row(order[static_cast<size_t>(start + i)]);
      Mat eps(b, latent);
      for (int i = 0; i < b; ++i)
        for (int j = 0; j < latent; ++j) eps(i, j) = rng.normal();

      Tape t;
      const VarId xc = t.constant(x);
      const VarId h = layer_train(t, vae.enc_hidden, xc);
      const VarId mu = layer_train(t, vae.enc_mu, h);
      const VarId lv = layer_train(t, vae.enc_logvar, h);
      const VarId z = add(t, mu, cmul(t, exp_elem(t, scale(t, lv, 0.5)), eps));
      const VarId xhat = layer_train(t, vae.dec_out, layer_train(t, vae.dec_hidden, z));

      const VarId recon = scale(t, sum_squares(t, sub(t, xhat, xc)), inv_2s2);
      // KL(q || N(0, I)) summed over rows: 0.5 (mu^2 + e^lv - lv - 1)
      const VarId kl = scale(
          t,
          add(t, add(t, sum_squares(t, mu), sum_all(t, exp_elem(t, lv))),
              add(t, scale(t, sum_all(t, lv), -1.0),
                  t.constant(Mat::Constant(1, 1, -static_cast<double>(latent) * b)))),
          0.5);
      const VarId obj = scale(t, add(t, recon, kl), 1.0 / static_cast<double>(b));
      loss_sum += t.value(obj)(0, 0);
      t.backward(obj);
      sgd_step(params, vae.config.lr, 0.0);
      ++batches;
    }
    epoch_mean = loss_sum / static_cast<double>(batches);
  }
  return epoch_mean;
}

VaeScore vae_elbo(const VaeModel& vae, const Vec& v, int samples, Rng& rng) {
  if (samples < 1) throw ConfigError("vae: need at least one latent sample");
  if (v.size() != vae.config.input_dim)
    throw DimensionError("vae: input has " + std::to_string(v.size()) + " entries, expected " +
                         std::to_string(vae.config.input_dim));
  const Mat row = v.transpose();
  const Mat h = eval_layer(vae.enc_hidden, row);
  const Mat mu = eval_layer(vae.enc_mu, h);
  const Mat lv = eval_layer(vae.enc_logvar, h);
  const Mat sd = (lv.array() * 0.5).exp();

  VaeScore out;
  out.kl = 0.5 * (mu.array().square() + lv.array().exp() - lv.array() - 1.0).sum();
  double mse_sum = 0.0;
  for (int s = 0; s < samples; ++s) {
    Mat z(1, vae.config.latent_dim);
    for (int j = 0; j < vae.config.latent_dim; ++j) z(0, j) = mu(0, j) + sd(0, j) * rng.normal();
    const Mat xhat = eval_layer(vae.dec_out, eval_layer(vae.dec_hidden, z));
    mse_sum += (xhat - row).squaredNorm();
  }
  out.recon_mse = mse_sum / static_cast<double>(samples);
  out.elbo = -out.recon_mse / (2.0 * vae.config.sigma2) - out.kl;
  return out;
}

}  // namespace cnd
