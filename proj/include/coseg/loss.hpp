#pragma once

#include "coseg/image.hpp"
#include "coseg/spatial.hpp"

namespace coseg {

// ---------------------------------------------------------------------------
// Stage-1 photometric loss: lambda * L1 + (1 - lambda) * (1 - SSIM)/2 with an
// 11x11 Gaussian window, sigma 1.5, zero-padded. Returns the analytic gradient
// w.r.t. the rendered image.
// ---------------------------------------------------------------------------

namespace loss_detail {

inline std::vector<double> gaussian_window(int size = 11, double sigma = 1.5) {
  std::vector<double> w(size);
  double total = 0.0;
  for (int i = 0; i < size; ++i) {
    const double d = i - (size - 1) / 2.0;
    w[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += w[i];
  }
  for (auto& v : w) v /= total;
  return w;
}

// Separable same-size convolution with zero padding. The kernel is symmetric,
// so this operator is its own adjoint.
inline ImageXd conv_window(const ImageXd& img, const std::vector<double>& w) {
  const int r = static_cast<int>(w.size()) / 2;
  ImageXd tmp(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        double acc = 0.0;
        for (int k = -r; k <= r; ++k) {
          const int xx = x + k;
          if (xx < 0 || xx >= img.width) continue;
          acc += w[k + r] * img.at(y, xx, c);
        }
        tmp.at(y, x, c) = acc;
      }
  ImageXd out(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        double acc = 0.0;
        for (int k = -r; k <= r; ++k) {
          const int yy = y + k;
          if (yy < 0 || yy >= img.height) continue;
          acc += w[k + r] * tmp.at(yy, x, c);
        }
        out.at(y, x, c) = acc;
      }
  return out;
}

inline ImageXd hadamard(const ImageXd& a, const ImageXd& b) {
  ImageXd out = a;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
  return out;
}

}  // namespace loss_detail

struct PhotometricResult {
  double loss = 0.0;
  double l1 = 0.0;
  double dssim = 0.0;
  ImageXd grad;  // d loss / d rendered
};

inline PhotometricResult photometric_loss(const ImageXd& rendered, const ImageXd& target,
                                          double lambda_l1 = 0.8) {
  require(rendered.same_shape(target), "photometric_loss: image shapes differ");
  const double count = static_cast<double>(rendered.data.size());
  PhotometricResult out;
  out.grad = ImageXd(rendered.height, rendered.width, rendered.channels);

  for (std::size_t i = 0; i < rendered.data.size(); ++i) {
    const double diff = rendered.data[i] - target.data[i];
    out.l1 += std::abs(diff) / count;
    out.grad.data[i] = lambda_l1 * (diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0)) / count;
  }

  // SSIM statistics via the Gaussian window.
  static const std::vector<double> window = loss_detail::gaussian_window();
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  using loss_detail::conv_window;
  using loss_detail::hadamard;
  const ImageXd mu_x = conv_window(rendered, window);
  const ImageXd mu_y = conv_window(target, window);
  const ImageXd sxx = conv_window(hadamard(rendered, rendered), window);
  const ImageXd syy = conv_window(hadamard(target, target), window);
  const ImageXd sxy = conv_window(hadamard(rendered, target), window);

  ImageXd d_mu(rendered.height, rendered.width, rendered.channels);
  ImageXd d_sxx(rendered.height, rendered.width, rendered.channels);
  ImageXd d_sxy(rendered.height, rendered.width, rendered.channels);
  double ssim_sum = 0.0;
  for (std::size_t i = 0; i < rendered.data.size(); ++i) {
    const double ux = mu_x.data[i], uy = mu_y.data[i];
    const double a1 = 2.0 * ux * uy + c1;
    const double a2 = 2.0 * (sxy.data[i] - ux * uy) + c2;
    const double b1 = ux * ux + uy * uy + c1;
    const double b2 = (sxx.data[i] - ux * ux) + (syy.data[i] - uy * uy) + c2;
    const double s = (a1 * a2) / (b1 * b2);
    ssim_sum += s;
    // dS/dmu_x, dS/dSxx, dS/dSxy at this site
    d_mu.data[i] = 2.0 * uy * (a2 - a1) / (b1 * b2) + 2.0 * ux * s * (1.0 / b2 - 1.0 / b1);
    d_sxx.data[i] = -s / b2;
    d_sxy.data[i] = 2.0 * a1 / (b1 * b2);
  }
  out.dssim = (1.0 - ssim_sum / count) / 2.0;
  out.loss = lambda_l1 * out.l1 + (1.0 - lambda_l1) * out.dssim;

  // Upstream scale of dL/dS per site; the window is its own adjoint.
  const double g = (1.0 - lambda_l1) * (-0.5) / count;
  for (auto& v : d_mu.data) v *= g;
  for (auto& v : d_sxx.data) v *= g;
  for (auto& v : d_sxy.data) v *= g;
  const ImageXd t_mu = conv_window(d_mu, window);
  const ImageXd t_sxx = conv_window(d_sxx, window);
  const ImageXd t_sxy = conv_window(d_sxy, window);
  for (std::size_t i = 0; i < rendered.data.size(); ++i)
    out.grad.data[i] +=
        t_mu.data[i] + 2.0 * rendered.data[i] * t_sxx.data[i] + target.data[i] * t_sxy.data[i];
  return out;
}

// ---------------------------------------------------------------------------
// Segmentation-stage losses.
// ---------------------------------------------------------------------------

struct CoSegConfig {
  double pi_rl = 0.5;          // raw-label weight
  double pi_p = 0.5;           // prediction weight; pi_rl + pi_p = 1
  double lambda_pix = 0.8;
  double lambda_reg = 0.2;
  std::vector<int> reg_scales = {3, 4};
  int reg_samples = 1024;      // M
  int reg_neighbors = 8;       // K

  // Scaling constant, recomputed from pi_rl whenever queried.
  double z() const { return -(1.0 - pi_rl) * std::log(1.0 - pi_rl); }

  void validate() const {
    require(pi_rl > 0.0 && pi_p > 0.0, "CoSegConfig: pi weights must be positive");
    require(std::abs(pi_rl + pi_p - 1.0) <= 1e-9, "CoSegConfig: pi_rl + pi_p must equal 1");
  }
};

namespace loss_detail {

inline constexpr double kLogFloor = 1e-12;

// pi_a * KL(a || m) + pi_b * KL(b || m) with m the pi-weighted mixture.
inline double weighted_js(const Eigen::Ref<const VecXd>& a, const Eigen::Ref<const VecXd>& b,
                          double pi_a, double pi_b) {
  double total = 0.0;
  for (int c = 0; c < a.size(); ++c) {
    const double m = pi_a * a[c] + pi_b * b[c];
    if (a[c] > 0.0) total += pi_a * a[c] * std::log(a[c] / m);
    if (b[c] > 0.0) total += pi_b * b[c] * std::log(b[c] / m);
  }
  return total;
}

}  // namespace loss_detail

struct PixelLossResult {
  double loss = 0.0;
  ImageXd grad;  // d loss / d S, same shape as S
};

// Pixel-wise JS loss against one-hot raw labels; gradient flows only through
// the prediction. Logs are floored so the gradient stays finite even for
// one-hot predictions.
inline PixelLossResult pixel_js_loss(const ImageXd& s, const LabelMap& labels,
                                     const CoSegConfig& cfg) {
  cfg.validate();
  require(s.height == labels.height && s.width == labels.width,
          "pixel_js_loss: prediction and label shapes differ");
  const int num_classes = s.channels;
  const double z = cfg.z();
  const double pixel_count = static_cast<double>(s.pixel_count());

  PixelLossResult out;
  out.grad = ImageXd(s.height, s.width, num_classes);
  const double scale = 1.0 / (pixel_count * z);
  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      const auto sp = s.pixel(y, x);
      const int label = labels.at(y, x);
      require(label >= 0 && label < num_classes,
              "pixel_js_loss: label " + std::to_string(label) + " outside [0, " +
                  std::to_string(num_classes) + ")");
      const double mass = sp.sum();
      require(std::abs(mass - 1.0) <= 1e-6,
              "pixel_js_loss: prediction at (" + std::to_string(y) + "," + std::to_string(x) +
                  ") is not normalized (sum " + std::to_string(mass) + ")");

      double term = 0.0;
      for (int c = 0; c < num_classes; ++c) {
        const double kappa = c == label ? 1.0 : 0.0;
        const double m = cfg.pi_rl * kappa + cfg.pi_p * sp[c];
        if (kappa > 0.0) term += cfg.pi_rl * std::log(1.0 / m);
        if (sp[c] > 0.0) term += cfg.pi_p * sp[c] * std::log(sp[c] / m);

        const double m_safe = std::max(m, loss_detail::kLogFloor);
        const double s_safe = std::max(sp[c], loss_detail::kLogFloor);
        double dsc = cfg.pi_p * (std::log(s_safe / m_safe) + 1.0 - cfg.pi_p * sp[c] / m_safe);
        if (kappa > 0.0) dsc += -cfg.pi_rl * cfg.pi_p / m_safe;
        out.grad.at(y, x, c) = dsc * scale;
      }
      out.loss += term;
    }
  }
  out.loss *= scale;
  return out;
}

// Cross-entropy baseline (the ablation comparison): mean -log S_y.
inline PixelLossResult pixel_ce_loss(const ImageXd& s, const LabelMap& labels) {
  require(s.height == labels.height && s.width == labels.width,
          "pixel_ce_loss: prediction and label shapes differ");
  PixelLossResult out;
  out.grad = ImageXd(s.height, s.width, s.channels);
  const double pixel_count = static_cast<double>(s.pixel_count());
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x) {
      const int label = labels.at(y, x);
      require(label >= 0 && label < s.channels, "pixel_ce_loss: label outside range");
      const double p = std::max(s.at(y, x, label), loss_detail::kLogFloor);
      out.loss += -std::log(p) / pixel_count;
      out.grad.at(y, x, label) = -1.0 / (p * pixel_count);
    }
  return out;
}

// ---------------------------------------------------------------------------
// 3D regularization: KL closeness of softmaxed fused features between each
// sampled Gaussian and its spatial nearest neighbors, per requested scale.
// ---------------------------------------------------------------------------

struct RegLossResult {
  double loss = 0.0;
  std::array<RowMat, 4> grad;  // d loss / d fused features, per scale (empty if unused)
  bool clamped = false;        // M exceeded the population somewhere
};

namespace loss_detail {

inline VecXd softmax(const Eigen::Ref<const Eigen::RowVectorXd>& f) {
  VecXd p = f.transpose();
  const double mx = p.maxCoeff();
  p = (p.array() - mx).exp();
  p /= p.sum();
  return p;
}

}  // namespace loss_detail

inline RegLossResult reg_loss(const SampleHierarchy& hierarchy,
                              const std::array<RowMat, 4>& fused, const CoSegConfig& cfg,
                              std::uint64_t seed) {
  RegLossResult out;
  for (const int scale : cfg.reg_scales) {
    require(scale >= 1 && scale <= 4, "reg_loss: scale must be in 1..4");
    const RowMat& f = fused[scale - 1];
    require(f.size() > 0, "reg_loss: fused features missing at scale " + std::to_string(scale));
    const auto& positions = hierarchy.positions[scale - 1];
    require(static_cast<std::size_t>(f.rows()) == positions.size(),
            "reg_loss: fused rows disagree with hierarchy level " + std::to_string(scale));
    out.grad[scale - 1].setZero(f.rows(), f.cols());
    if (positions.size() < 2) continue;

    int m_count = cfg.reg_samples;
    if (m_count > static_cast<int>(positions.size())) {
      m_count = static_cast<int>(positions.size());
      out.clamped = true;
    }
    const int k_count = std::min<int>(cfg.reg_neighbors, static_cast<int>(positions.size()) - 1);

    Rng rng(derive_seed(seed, /*tag=*/0x7265u, static_cast<std::uint64_t>(scale)));
    const auto sampled = rng.sample_without_replacement(positions.size(), m_count);
    const PointGrid grid(positions);

    const double norm = 1.0 / (static_cast<double>(m_count) * k_count);
    double scale_loss = 0.0;
    for (const std::size_t j : sampled) {
      const VecXd p = loss_detail::softmax(f.row(static_cast<Eigen::Index>(j)));
      const auto nbrs = grid.nearest(positions[j], k_count, static_cast<int>(j));
      for (const int k : nbrs) {
        const VecXd q = loss_detail::softmax(f.row(k));
        double kl = 0.0;
        VecXd log_ratio(p.size());
        for (int c = 0; c < p.size(); ++c) {
          log_ratio[c] = std::log(p[c]) - std::log(q[c]);
          kl += p[c] * log_ratio[c];
        }
        scale_loss += kl * norm;
        // d KL / d f_j = p .* (log_ratio - KL); d KL / d f_k = q - p
        for (int c = 0; c < p.size(); ++c) {
          out.grad[scale - 1](static_cast<Eigen::Index>(j), c) +=
              norm * p[c] * (log_ratio[c] - kl);
          out.grad[scale - 1](k, c) += norm * (q[c] - p[c]);
        }
      }
    }
    out.loss += scale_loss;
  }
  if (out.clamped)
    std::fprintf(stderr, "reg_loss: sample count clamped to the scale population\n");
  return out;
}

// ---------------------------------------------------------------------------
// CoSeg loss: lambda_pix * pixel JS + lambda_reg * 3D regularization.
// ---------------------------------------------------------------------------

struct CoSegLossResult {
  double total = 0.0;
  double pix = 0.0;
  double reg = 0.0;
  ImageXd dS;
  std::array<RowMat, 4> dfused;
};

inline CoSegLossResult coseg_loss(const ImageXd& s, const LabelMap& labels,
                                  const SampleHierarchy& hierarchy,
                                  const std::array<RowMat, 4>& fused, const CoSegConfig& cfg,
                                  std::uint64_t seed) {
  CoSegLossResult out;
  auto pix = pixel_js_loss(s, labels, cfg);
  out.pix = pix.loss;
  out.dS = std::move(pix.grad);
  for (auto& v : out.dS.data) v *= cfg.lambda_pix;

  if (cfg.lambda_reg != 0.0) {
    auto reg = reg_loss(hierarchy, fused, cfg, seed);
    out.reg = reg.loss;
    for (int n = 0; n < 4; ++n) {
      out.dfused[n] = std::move(reg.grad[n]);
      if (out.dfused[n].size() > 0) out.dfused[n] *= cfg.lambda_reg;
    }
  }
  out.total = cfg.lambda_pix * out.pix + cfg.lambda_reg * out.reg;
  return out;
}

// ---------------------------------------------------------------------------
// Per-pixel softmax over rendered logits and its adjoint.
// ---------------------------------------------------------------------------

inline ImageXd softmax_image(const ImageXd& logits) {
  ImageXd out = logits;
  for (int y = 0; y < logits.height; ++y)
    for (int x = 0; x < logits.width; ++x) {
      auto px = out.pixel(y, x);
      const double mx = px.maxCoeff();
      for (int c = 0; c < logits.channels; ++c) px[c] = std::exp(px[c] - mx);
      px /= px.sum();
    }
  return out;
}

inline ImageXd softmax_backward_image(const ImageXd& s, const ImageXd& ds) {
  require(s.same_shape(ds), "softmax_backward_image: shape mismatch");
  ImageXd out(s.height, s.width, s.channels);
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x) {
      const auto sp = s.pixel(y, x);
      const auto gp = ds.pixel(y, x);
      const double dot = sp.dot(gp);
      for (int c = 0; c < s.channels; ++c) out.at(y, x, c) = sp[c] * (gp[c] - dot);
    }
  return out;
}

}  // namespace coseg
