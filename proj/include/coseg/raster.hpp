#pragma once

#include "coseg/core.hpp"
#include "coseg/image.hpp"

#include <algorithm>

namespace coseg {

// A Gaussian projected to the image plane. Pixel sample locations are
// (x + 0.5, y + 0.5); pixel (x, y) is covered iff its sample location lies in
// the axis-aligned radius box around mean2d.
struct Splat2D {
  int gaussian_index = -1;
  Vec2 mean2d = Vec2::Zero();   // pixels
  Mat2 cov2d = Mat2::Zero();    // pixels^2, after low-pass
  double depth = 0.0;           // camera-frame z
  double radius = 0.0;          // ceil(3 * sqrt(lambda_max(cov2d)))
};

struct PixelBounds {
  int x0 = 0, x1 = -1, y0 = 0, y1 = -1;  // inclusive; empty when x1 < x0
  bool empty() const { return x1 < x0 || y1 < y0; }
  bool covers(int x, int y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
};

// Integer pixel range whose sample locations fall inside the radius box,
// clipped to the image. Every coverage decision in the toolkit goes through
// this single definition.
inline PixelBounds splat_pixel_bounds(const Splat2D& s, int width, int height) {
  PixelBounds b;
  b.x0 = std::max(0, static_cast<int>(std::ceil(s.mean2d.x() - s.radius - 0.5)));
  b.x1 = std::min(width - 1, static_cast<int>(std::floor(s.mean2d.x() + s.radius - 0.5)));
  b.y0 = std::max(0, static_cast<int>(std::ceil(s.mean2d.y() - s.radius - 0.5)));
  b.y1 = std::min(height - 1, static_cast<int>(std::floor(s.mean2d.y() + s.radius - 0.5)));
  return b;
}

struct RenderConfig {
  double near_plane = 0.01;
  double lowpass = 0.3;            // px^2 added to the projected covariance diagonal
  double alpha_clamp = 0.99;
  double alpha_skip = 1.0 / 255.0; // contributions below this are dropped
  double early_stop_T = 1e-4;      // stop the pixel walk once transmittance falls below
  int tile_size = 16;
  unsigned num_threads = 0;        // 0 = hardware concurrency
  Vec3 background = Vec3::Zero();  // color payload only

  // Oracle-comparison settings: every covered splat contributes, walk runs to the end.
  RenderConfig exact() const {
    RenderConfig c = *this;
    c.alpha_skip = 0.0;
    c.early_stop_T = 0.0;
    return c;
  }
};

struct PayloadSpec {
  enum Kind { kColor, kSegmentation, kFeature };
  Kind kind = kColor;
  int scale = 1;  // feature scale n in 1..4

  static PayloadSpec color() { return {kColor, 0}; }
  static PayloadSpec segmentation() { return {kSegmentation, 0}; }
  static PayloadSpec feature(int n) { return {kFeature, n}; }
};

struct Contributor {
  int gaussian_index;
  double alpha;          // alpha'_i(p)
  double transmittance;  // T_i(p), product over the splats in front
};

struct RenderOutput {
  ImageXd image;                  // H x W x K
  std::vector<double> alpha_acc;  // H x W, sum of alpha'_i * T_i
  std::vector<Splat2D> splats;    // depth-ascending visible splats
  bool has_contributors = false;
  std::vector<std::vector<Contributor>> contributors;  // per pixel, front-to-back

  double residual_T(int y, int x) const { return 1.0 - alpha_acc[static_cast<std::size_t>(y) * image.width + x]; }
};

namespace raster_detail {

// Perspective Jacobian of (fx tx/tz + cx, fy ty/tz + cy) at camera-frame t.
inline Eigen::Matrix<double, 2, 3> perspective_jacobian(const Camera& cam, const Vec3& t) {
  Eigen::Matrix<double, 2, 3> J;
  const double iz = 1.0 / t.z();
  const double iz2 = iz * iz;
  J << cam.fx * iz, 0.0, -cam.fx * t.x() * iz2,
       0.0, cam.fy * iz, -cam.fy * t.y() * iz2;
  return J;
}

inline double lambda_max_2x2(const Mat2& m) {
  const double mid = 0.5 * (m(0, 0) + m(1, 1));
  const double det = m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
  return mid + std::sqrt(std::max(0.0, mid * mid - det));
}

}  // namespace raster_detail

// Projects Gaussians to depth-sorted visible splats. Excluded: depth <= near
// plane, zero radius, and splats whose radius box misses the image.
inline std::vector<Splat2D> project(const Camera& cam, const GaussianSet& set,
                                    const RenderConfig& cfg = {}) {
  std::vector<Splat2D> splats;
  splats.reserve(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    const Vec3 t = world_to_camera(cam, set.position[i]);
    if (t.z() <= cfg.near_plane) continue;
    const Mat3 cov_world = build_covariance(set.rotation[i], set.log_scale[i]);
    const Mat3 cov_cam = cam.R_wc * cov_world * cam.R_wc.transpose();
    const auto J = raster_detail::perspective_jacobian(cam, t);
    Splat2D s;
    s.gaussian_index = static_cast<int>(i);
    s.cov2d = J * cov_cam * J.transpose() + cfg.lowpass * Mat2::Identity();
    s.mean2d = Vec2(cam.fx * t.x() / t.z() + cam.cx, cam.fy * t.y() / t.z() + cam.cy);
    s.depth = t.z();
    s.radius = std::ceil(3.0 * std::sqrt(raster_detail::lambda_max_2x2(s.cov2d)));
    if (s.radius <= 0.0) continue;
    if (splat_pixel_bounds(s, cam.width, cam.height).empty()) continue;
    splats.push_back(s);
  }
  std::stable_sort(splats.begin(), splats.end(),
                   [](const Splat2D& a, const Splat2D& b) { return a.depth < b.depth; });
  return splats;
}

// alpha'_i(p) = alpha_i * exp(-1/2 (p-mu)^T Sigma'^-1 (p-mu)), clamped.
inline double opacity_2d(const Splat2D& splat, double alpha, const Vec2& p,
                         double alpha_clamp = 0.99) {
  const Vec2 d = p - splat.mean2d;
  const double q = d.dot(splat.cov2d.inverse() * d);
  return std::min(alpha_clamp, alpha * std::exp(-0.5 * std::max(0.0, q)));
}

namespace raster_detail {

// Per-view payload rows and the constant payload composited under residual
// transmittance. Segmentation appends a void channel: rows carry 0 there and
// the background carries 1, so the rendered void value equals 1 - alpha_acc.
struct PayloadData {
  RowMat rows;  // N x K
  VecXd background;
};

inline PayloadData make_payload(const Camera& cam, const GaussianSet& set, const PayloadSpec& spec,
                                const RenderConfig& cfg) {
  PayloadData p;
  const std::size_t n = set.size();
  switch (spec.kind) {
    case PayloadSpec::kColor: {
      p.rows.resize(n, 3);
      if (set.sh_degree == 1) {
        const Vec3 cam_center = -cam.R_wc.transpose() * cam.t_wc;
        for (std::size_t i = 0; i < n; ++i) {
          const Vec3 dir = (set.position[i] - cam_center).normalized();
          p.rows.row(i) = eval_sh_color(set.sh.row(i), dir).transpose();
        }
      } else {
        for (std::size_t i = 0; i < n; ++i) p.rows.row(i) = set.color[i].transpose();
      }
      p.background = cfg.background;
      break;
    }
    case PayloadSpec::kSegmentation: {
      require(set.seg_logits.size() > 0, "render: segmentation payload missing on the set");
      const int num_classes = set.num_classes();
      p.rows.setZero(n, num_classes + 1);
      p.rows.leftCols(num_classes) = set.seg_logits;
      p.background = VecXd::Zero(num_classes + 1);
      p.background[num_classes] = 1.0;  // void class
      break;
    }
    case PayloadSpec::kFeature: {
      require(spec.scale >= 1 && spec.scale <= 4, "render: feature scale must be in 1..4");
      const RowMat& f = set.features[spec.scale - 1];
      require(f.size() > 0, "render: feature payload missing on the set");
      p.rows = f;
      p.background = VecXd::Zero(f.cols());
      break;
    }
  }
  return p;
}

}  // namespace raster_detail

// Front-to-back alpha blending over 16x16 tiles. `payload == nullptr` renders
// no image and only records contributors (the unprojection path).
inline RenderOutput render_with_payload(const Camera& cam, const GaussianSet& set,
                                        const raster_detail::PayloadData* payload,
                                        const RenderConfig& cfg, bool record_contributors) {
  const int W = cam.width, H = cam.height;
  const int K = payload ? static_cast<int>(payload->rows.cols()) : 0;
  RenderOutput out;
  out.splats = project(cam, set, cfg);
  out.image = ImageXd(H, W, K);
  out.alpha_acc.assign(static_cast<std::size_t>(H) * W, 0.0);
  out.has_contributors = record_contributors;
  if (record_contributors) out.contributors.resize(static_cast<std::size_t>(H) * W);

  // Bin splats to tiles; per-tile lists inherit the global depth order.
  const int tile = std::max(1, cfg.tile_size);
  const int tiles_x = (W + tile - 1) / tile;
  const int tiles_y = (H + tile - 1) / tile;
  std::vector<std::vector<int>> bins(static_cast<std::size_t>(tiles_x) * tiles_y);
  for (std::size_t si = 0; si < out.splats.size(); ++si) {
    const PixelBounds b = splat_pixel_bounds(out.splats[si], W, H);
    if (b.empty()) continue;
    for (int ty = b.y0 / tile; ty <= b.y1 / tile; ++ty)
      for (int tx = b.x0 / tile; tx <= b.x1 / tile; ++tx)
        bins[static_cast<std::size_t>(ty) * tiles_x + tx].push_back(static_cast<int>(si));
  }

  std::vector<Mat2> conics(out.splats.size());
  std::vector<PixelBounds> bounds(out.splats.size());
  std::vector<double> alphas(out.splats.size());
  for (std::size_t si = 0; si < out.splats.size(); ++si) {
    conics[si] = out.splats[si].cov2d.inverse();
    bounds[si] = splat_pixel_bounds(out.splats[si], W, H);
    alphas[si] = set.alpha(static_cast<std::size_t>(out.splats[si].gaussian_index));
  }

  parallel_for(
      bins.size(),
      [&](std::size_t t0, std::size_t t1) {
        for (std::size_t ti = t0; ti < t1; ++ti) {
          const auto& bin = bins[ti];
          const int tx = static_cast<int>(ti % tiles_x), ty = static_cast<int>(ti / tiles_x);
          const int y_end = std::min(H, (ty + 1) * tile), x_end = std::min(W, (tx + 1) * tile);
          for (int y = ty * tile; y < y_end; ++y) {
            for (int x = tx * tile; x < x_end; ++x) {
              const std::size_t pix = static_cast<std::size_t>(y) * W + x;
              const Vec2 p(x + 0.5, y + 0.5);
              double T = 1.0;
              double acc = 0.0;
              double* img = K > 0 ? &out.image.data[pix * K] : nullptr;
              for (const int si : bin) {
                if (!bounds[si].covers(x, y)) continue;
                const Vec2 d = p - out.splats[si].mean2d;
                const double q = d.dot(conics[si] * d);
                const double a =
                    std::min(cfg.alpha_clamp, alphas[si] * std::exp(-0.5 * std::max(0.0, q)));
                if (a < cfg.alpha_skip) continue;
                const double w = a * T;
                if (img) {
                  const auto row = payload->rows.row(out.splats[si].gaussian_index);
                  for (int c = 0; c < K; ++c) img[c] += w * row[c];
                }
                acc += w;
                if (record_contributors)
                  out.contributors[pix].push_back({out.splats[si].gaussian_index, a, T});
                T *= (1.0 - a);
                if (T < cfg.early_stop_T) break;
              }
              if (img)
                for (int c = 0; c < K; ++c) img[c] += T * payload->background[c];
              out.alpha_acc[pix] = acc;
            }
          }
        }
      },
      cfg.num_threads);
  return out;
}

inline RenderOutput render(const Camera& cam, const GaussianSet& set, const PayloadSpec& spec,
                           const RenderConfig& cfg = {}, bool record_contributors = false) {
  const auto payload = raster_detail::make_payload(cam, set, spec, cfg);
  return render_with_payload(cam, set, &payload, cfg, record_contributors);
}

// Contributor lists only, with the full (non-early-stopped, non-skipping)
// walk; this is the alpha'/T evaluation unprojection consumes.
inline RenderOutput render_contributors(const Camera& cam, const GaussianSet& set,
                                        const RenderConfig& cfg = {}) {
  return render_with_payload(cam, set, nullptr, cfg.exact(), true);
}

// Argmax label map of a segmentation rendering (last channel = void).
inline LabelMap argmax_labels(const ImageXd& seg_image) {
  LabelMap labels(seg_image.height, seg_image.width);
  for (int y = 0; y < seg_image.height; ++y) {
    for (int x = 0; x < seg_image.width; ++x) {
      const auto px = seg_image.pixel(y, x);
      int best = 0;
      for (int c = 1; c < seg_image.channels; ++c)
        if (px[c] > px[best]) best = c;
      labels.at(y, x) = best;
    }
  }
  return labels;
}

}  // namespace coseg
