#ifndef MBRPL_APPROXIMATORS_HPP
#define MBRPL_APPROXIMATORS_HPP

#include <algorithm>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mbrpl/common.hpp"

namespace mbrpl::nn {

/// Fully connected network, ReLU hidden layers, identity output. All weights
/// and biases live in one flat vector so optimisers, target tracking and
/// finite-difference checks can treat the network as a single parameter array.
///
/// Layout of `params()`: for each layer, W (out x in, column-major) followed by b.
/// Inputs and outputs are column-major batches (one sample per column).
class Mlp {
 public:
  struct Cache {
    std::vector<Mat> inputs;  // input to each layer
    std::vector<Mat> pre;     // pre-activation of each layer
    bool valid() const { return !inputs.empty(); }
  };

  Mlp() = default;

  explicit Mlp(std::vector<int> layer_sizes) : sizes_(std::move(layer_sizes)) {
    if (sizes_.size() < 2) throw ConfigError("Mlp: need at least input and output sizes");
    for (int s : sizes_)
      if (s <= 0) throw ConfigError("Mlp: layer sizes must be positive");
    Eigen::Index total = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      offsets_.push_back(total);
      total += static_cast<Eigen::Index>(sizes_[l + 1]) * sizes_[l] + sizes_[l + 1];
    }
    params_ = Vec::Zero(total);
  }

  Mlp(std::vector<int> layer_sizes, Rng& rng) : Mlp(std::move(layer_sizes)) {
    // uniform fan-in scaling, weights and biases alike
    for (int l = 0; l < n_layers(); ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(sizes_[l]));
      auto W = weight(l);
      auto b = bias(l);
      for (Eigen::Index j = 0; j < W.cols(); ++j)
        for (Eigen::Index i = 0; i < W.rows(); ++i) W(i, j) = uniform(rng, -bound, bound);
      for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = uniform(rng, -bound, bound);
    }
  }

  int n_layers() const { return static_cast<int>(sizes_.size()) - 1; }
  const std::vector<int>& layer_sizes() const { return sizes_; }
  int input_dim() const { return sizes_.front(); }
  int output_dim() const { return sizes_.back(); }

  Vec& params() { return params_; }
  const Vec& params() const { return params_; }
  Eigen::Index n_params() const { return params_.size(); }

  Eigen::Map<Mat> weight(int l) {
    return {params_.data() + offsets_[l], sizes_[l + 1], sizes_[l]};
  }
  Eigen::Map<const Mat> weight(int l) const {
    return {params_.data() + offsets_[l], sizes_[l + 1], sizes_[l]};
  }
  Eigen::Map<Vec> bias(int l) {
    return {params_.data() + offsets_[l] + static_cast<Eigen::Index>(sizes_[l + 1]) * sizes_[l],
            sizes_[l + 1]};
  }
  Eigen::Map<const Vec> bias(int l) const {
    return {params_.data() + offsets_[l] + static_cast<Eigen::Index>(sizes_[l + 1]) * sizes_[l],
            sizes_[l + 1]};
  }

  Mat forward(const Mat& x, Cache* cache = nullptr) const {
    if (x.rows() != input_dim())
      throw ConfigError("Mlp::forward: input dimension " + std::to_string(x.rows()) +
                        " != " + std::to_string(input_dim()));
    if (cache) {
      cache->inputs.clear();
      cache->pre.clear();
    }
    Mat h = x;
    for (int l = 0; l < n_layers(); ++l) {
      Mat z = weight(l) * h;
      z.colwise() += bias(l);
      if (cache) {
        cache->inputs.push_back(std::move(h));
        cache->pre.push_back(z);
      }
      h = (l + 1 < n_layers()) ? Mat(z.cwiseMax(0.0)) : std::move(z);
    }
    return h;
  }

  Vec forward(const Vec& x) const { return forward(Mat(x)).col(0); }

  /// Reverse pass through a cached forward. Adds parameter gradients into
  /// `grad` (same layout as params()) and returns the input gradient.
  Mat backward(const Cache& cache, const Mat& grad_out, Vec& grad) const {
    if (!cache.valid() || static_cast<int>(cache.inputs.size()) != n_layers())
      throw ConfigError("Mlp::backward: missing forward cache");
    if (grad.size() != params_.size()) grad = Vec::Zero(params_.size());
    Mat g = grad_out;
    for (int l = n_layers() - 1; l >= 0; --l) {
      if (l + 1 < n_layers()) g = g.cwiseProduct((cache.pre[l].array() > 0.0).cast<double>().matrix());
      const auto& in = cache.inputs[l];
      Eigen::Map<Mat> dW(grad.data() + offsets_[l], sizes_[l + 1], sizes_[l]);
      Eigen::Map<Vec> db(grad.data() + offsets_[l] + static_cast<Eigen::Index>(sizes_[l + 1]) * sizes_[l],
                         sizes_[l + 1]);
      dW.noalias() += g * in.transpose();
      db += g.rowwise().sum();
      g = weight(l).transpose() * g;
    }
    return g;
  }

  /// Polyak averaging: this <- tau * src + (1 - tau) * this.
  void soft_update_from(const Mlp& src, double tau) {
    if (src.params_.size() != params_.size()) throw ConfigError("Mlp::soft_update_from: shape mismatch");
    params_ = tau * src.params_ + (1.0 - tau) * params_;
  }

  // --- Checkpoints -----------------------------------------------------------
  //
  // Text format:
  //   line 1: "mbrpl-mlp 1"
  //   line 2: "layers <count> <size_0> ... <size_L>"
  //   then per layer: one line of out*in weights in row-major order, one line
  //   of out biases. Values are written with 17 significant digits.

  void save(std::ostream& os) const {
    os << "mbrpl-mlp 1\nlayers " << sizes_.size();
    for (int s : sizes_) os << ' ' << s;
    os << '\n' << std::setprecision(17);
    for (int l = 0; l < n_layers(); ++l) {
      const auto W = weight(l);
      for (Eigen::Index i = 0; i < W.rows(); ++i)
        for (Eigen::Index j = 0; j < W.cols(); ++j) os << (i || j ? " " : "") << W(i, j);
      os << '\n';
      const auto b = bias(l);
      for (Eigen::Index i = 0; i < b.size(); ++i) os << (i ? " " : "") << b(i);
      os << '\n';
    }
  }

  static Mlp load(std::istream& is) {
    std::string magic;
    int version = 0;
    is >> magic >> version;
    if (magic != "mbrpl-mlp" || version != 1) throw std::runtime_error("Mlp::load: bad header");
    std::string tag;
    std::size_t count = 0;
    is >> tag >> count;
    if (tag != "layers" || count < 2) throw std::runtime_error("Mlp::load: bad layer line");
    std::vector<int> sizes(count);
    for (auto& s : sizes) is >> s;
    Mlp net(sizes);
    for (int l = 0; l < net.n_layers(); ++l) {
      auto W = net.weight(l);
      for (Eigen::Index i = 0; i < W.rows(); ++i)
        for (Eigen::Index j = 0; j < W.cols(); ++j) is >> W(i, j);
      auto b = net.bias(l);
      for (Eigen::Index i = 0; i < b.size(); ++i) is >> b(i);
    }
    if (!is) throw std::runtime_error("Mlp::load: truncated checkpoint");
    return net;
  }

  void save_file(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    save(out);
  }

  static Mlp load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    return load(in);
  }

 private:
  std::vector<int> sizes_;
  std::vector<Eigen::Index> offsets_;
  Vec params_;
};

/// Adam with bias correction.
class Adam {
 public:
  Adam() = default;
  Adam(Eigen::Index n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : m_(Vec::Zero(n)), v_(Vec::Zero(n)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  long steps() const { return t_; }

  void step(Vec& params, const Vec& grad, const std::string& name = "params") {
    if (grad.size() != params.size() || m_.size() != params.size())
      throw ConfigError("Adam::step: shape mismatch for " + name);
    for (Eigen::Index i = 0; i < grad.size(); ++i)
      if (!std::isfinite(grad(i)))
        throw NumericalError("Adam::step: non-finite gradient in " + name + "[" +
                             std::to_string(i) + "]");
    ++t_;
    m_ = b1_ * m_ + (1.0 - b1_) * grad;
    v_ = b2_ * v_ + (1.0 - b2_) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
  }

 private:
  Vec m_, v_;
  long t_ = 0;
  double lr_ = 1e-3, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
};

// --- Tanh-squashed Gaussian head ----------------------------------------------

inline constexpr double kLogStdMin = -20.0;
inline constexpr double kLogStdMax = 2.0;
inline constexpr double kSquashEps = 1e-6;
inline const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

/// Mean and clamped log-std split from a network output of 2k rows.
struct GaussianHead {
  Mat mean;
  Mat log_std;
  Mat clamp_mask;  // 1 where log_std was inside the bounds
};

inline GaussianHead split_gaussian_head(const Mat& out, double lo = kLogStdMin,
                                        double hi = kLogStdMax) {
  if (out.rows() % 2 != 0) throw ConfigError("split_gaussian_head: odd output size");
  const auto k = out.rows() / 2;
  GaussianHead h;
  h.mean = out.topRows(k);
  const Mat raw = out.bottomRows(k);
  h.log_std = raw.cwiseMax(lo).cwiseMin(hi);
  h.clamp_mask = ((raw.array() >= lo) && (raw.array() <= hi)).cast<double>().matrix();
  return h;
}

/// Reparameterised sample a = tanh(u), u = mean + shift + sigma_tot * eps with
/// sigma_tot^2 = exp(2 log_std) + base_var.
struct SquashedSample {
  Mat eps;
  Mat sigma;      // exp(log_std)
  Mat sigma_tot;  // sqrt(sigma^2 + base_var)
  Mat u;
  Mat action;
  Mat one_minus_a2;  // sech^2(u), free of the cancellation in 1 - tanh^2
  Eigen::RowVectorXd log_prob;
};

inline SquashedSample squashed_sample(const Mat& mean, const Mat& log_std, const Mat& eps,
                                      const Mat* base_var = nullptr, const Mat* shift = nullptr) {
  SquashedSample s;
  s.eps = eps;
  s.sigma = log_std.array().exp().matrix();
  s.sigma_tot = base_var ? Mat((s.sigma.array().square() + base_var->array()).sqrt()) : s.sigma;
  s.u = mean + s.sigma_tot.cwiseProduct(eps);
  if (shift) s.u += *shift;
  s.action = s.u.array().tanh().matrix();
  s.one_minus_a2 = (1.0 / s.u.array().cosh().square()).matrix();
  const auto k = static_cast<double>(mean.rows());
  s.log_prob = (-0.5 * eps.array().square() - s.sigma_tot.array().log() -
                (s.one_minus_a2.array() + kSquashEps).log())
                   .matrix()
                   .colwise()
                   .sum();
  s.log_prob.array() -= k * kHalfLog2Pi;
  return s;
}

inline SquashedSample squashed_sample(const Mat& mean, const Mat& log_std, Rng& rng) {
  return squashed_sample(mean, log_std, standard_normal(rng, mean.rows(), mean.cols()));
}

/// Gradients of a downstream loss with respect to the head's mean and log-std,
/// given dL/daction (k x n) and dL/dlog_prob (1 x n).
inline void squashed_backward(const SquashedSample& s, const Mat& d_action,
                              const Eigen::RowVectorXd& d_logp, Mat& d_mean, Mat& d_log_std) {
  const Eigen::ArrayXXd a = s.action.array();
  const Eigen::ArrayXXd one_m_a2 = s.one_minus_a2.array();
  Eigen::ArrayXXd d_u = d_action.array() * one_m_a2;
  const Eigen::ArrayXXd dlogp_du = 2.0 * a * one_m_a2 / (one_m_a2 + kSquashEps);
  d_u += dlogp_du.rowwise() * d_logp.array();
  d_mean = d_u.matrix();
  const Eigen::ArrayXXd var_ratio = s.sigma.array().square() / s.sigma_tot.array().square();
  // du/dlog_std = eps * sigma^2 / sigma_tot ; d(-log sigma_tot)/dlog_std = -sigma^2/sigma_tot^2
  Eigen::ArrayXXd dl = d_u * s.eps.array() * s.sigma_tot.array() * var_ratio;
  dl -= var_ratio.rowwise() * d_logp.array();
  d_log_std = dl.matrix();
}

// --- Finite-difference gradient verification -----------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  int coords_checked = 0;
};

/// Central differences on a random subset of coordinates (all when fewer than
/// `n_coords`). `params` is perturbed in place and restored.
inline GradCheckResult gradient_check(Vec& params, const std::function<double()>& loss,
                                      const Vec& analytic, Rng& rng, int n_coords = 200,
                                      double h = 1e-5) {
  if (analytic.size() != params.size()) throw ConfigError("gradient_check: shape mismatch");
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(params.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  if (static_cast<Eigen::Index>(n_coords) < params.size()) idx.resize(static_cast<std::size_t>(n_coords));
  GradCheckResult r;
  for (auto i : idx) {
    const double orig = params(i);
    params(i) = orig + h;
    const double fp = loss();
    params(i) = orig - h;
    const double fm = loss();
    params(i) = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic(i);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
    r.max_rel_error = std::max(r.max_rel_error, std::abs(a - numeric) / denom);
    ++r.coords_checked;
  }
  return r;
}

}  // namespace mbrpl::nn

#endif  // MBRPL_APPROXIMATORS_HPP
