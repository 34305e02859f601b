#pragma once

#include "coseg/raster.hpp"

namespace coseg {

// Gradients of a rendering w.r.t. scene parameters. `dpayload` is in payload
// space: color rows (sh_degree 0), blended seg logits plus the constant void
// column, or feature rows. For sh_degree 1 color payloads the SH chain fills
// `dsh` and `dpayload` holds the per-view evaluated-color gradient.
struct RasterGrads {
  RowMat dpayload;
  std::vector<double> dopacity_raw;
  std::vector<Vec3> dposition;
  std::vector<Vec4> drotation;
  std::vector<Vec3> dlog_scale;
  RowMat dsh;

  void init(std::size_t n, int payload_channels, bool with_sh) {
    dpayload.setZero(n, payload_channels);
    dopacity_raw.assign(n, 0.0);
    dposition.assign(n, Vec3::Zero());
    drotation.assign(n, Vec4::Zero());
    dlog_scale.assign(n, Vec3::Zero());
    if (with_sh) dsh.setZero(n, 12);
  }
};

namespace raster_detail {

// dR/dq for a unit quaternion (w,x,y,z), entry-wise derivative of
// quat_to_rotation's matrix.
inline std::array<Mat3, 4> rotation_quat_jacobian(const Vec4& n) {
  const double w = n[0], x = n[1], y = n[2], z = n[3];
  std::array<Mat3, 4> dR;
  dR[0] << 0, -z, y, z, 0, -x, -y, x, 0;
  dR[1] << 0, y, z, y, -2 * x, -w, z, w, -2 * x;
  dR[2] << -2 * y, x, w, x, 0, z, -w, z, -2 * y;
  dR[3] << -2 * z, -w, x, w, -2 * z, y, x, y, 0;
  for (auto& m : dR) m *= 2.0;
  return dR;
}

}  // namespace raster_detail

// Reverse-mode pass over a recorded forward rendering. Requires contributors.
inline RasterGrads render_backward(const Camera& cam, const GaussianSet& set,
                                   const PayloadSpec& spec, const RenderConfig& cfg,
                                   const RenderOutput& out, const ImageXd& dL_dimage,
                                   bool want_geometry = true) {
  require(out.has_contributors, "render_backward: contributors were not recorded during forward");
  require(dL_dimage.same_shape(out.image), "render_backward: gradient image shape mismatch");

  const auto payload = raster_detail::make_payload(cam, set, spec, cfg);
  const std::size_t n = set.size();
  const int K = static_cast<int>(payload.rows.cols());
  const bool sh_color = (spec.kind == PayloadSpec::kColor && set.sh_degree == 1);

  RasterGrads grads;
  grads.init(n, K, sh_color);

  // Per-Gaussian accumulators for the per-pixel alpha gradients.
  std::vector<double> dalpha(n, 0.0);
  std::vector<Vec2> dmean2d(n, Vec2::Zero());
  std::vector<Mat2> dconic(n, Mat2::Zero());

  std::vector<Mat2> conics(out.splats.size());
  std::vector<double> alphas(out.splats.size());
  std::vector<int> splat_of(n, -1);
  for (std::size_t si = 0; si < out.splats.size(); ++si) {
    conics[si] = out.splats[si].cov2d.inverse();
    alphas[si] = set.alpha(static_cast<std::size_t>(out.splats[si].gaussian_index));
    splat_of[out.splats[si].gaussian_index] = static_cast<int>(si);
  }

  const int W = out.image.width, H = out.image.height;
  VecXd suffix(K);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const std::size_t pix = static_cast<std::size_t>(y) * W + x;
      const auto& list = out.contributors[pix];
      const auto g = dL_dimage.pixel(y, x);
      const Vec2 p(x + 0.5, y + 0.5);

      double t_end = 1.0;
      if (!list.empty()) t_end = list.back().transmittance * (1.0 - list.back().alpha);
      suffix = t_end * payload.background;

      for (std::size_t k = list.size(); k-- > 0;) {
        const Contributor& c = list[k];
        const auto row = payload.rows.row(c.gaussian_index);
        const double w = c.alpha * c.transmittance;
        grads.dpayload.row(c.gaussian_index) += w * g.transpose();

        // d image / d alpha'_k = T_k * P_k - suffix / (1 - alpha'_k)
        double da = 0.0;
        for (int ch = 0; ch < K; ++ch)
          da += g[ch] * (c.transmittance * row[ch] - suffix[ch] / (1.0 - c.alpha));
        for (int ch = 0; ch < K; ++ch) suffix[ch] += w * row[ch];

        if (!want_geometry) continue;
        if (c.alpha >= cfg.alpha_clamp) continue;  // clamp active: no upstream flow
        const int si = splat_of[c.gaussian_index];
        const Vec2 d = p - out.splats[si].mean2d;
        const Vec2 ad = conics[si] * d;
        dalpha[c.gaussian_index] += da * (c.alpha / alphas[si]);
        dmean2d[c.gaussian_index] += da * c.alpha * ad;
        dconic[c.gaussian_index] += da * c.alpha * (-0.5) * (d * d.transpose());
      }
    }
  }

  // Payload-space gradient back to SH coefficients and the view-direction path.
  if (sh_color) {
    const Vec3 cam_center = -cam.R_wc.transpose() * cam.t_wc;
    for (std::size_t i = 0; i < n; ++i) {
      if (grads.dpayload.row(i).isZero(0.0)) continue;
      const Vec3 delta = set.position[i] - cam_center;
      const double dist = delta.norm();
      const Vec3 dir = delta / dist;
      Vec3 ddir = Vec3::Zero();
      for (int ch = 0; ch < 3; ++ch) {
        const double raw = 0.5 + kSH0 * set.sh(i, ch) +
                           kSH1 * (-dir.y() * set.sh(i, 3 + ch) + dir.z() * set.sh(i, 6 + ch) -
                                   dir.x() * set.sh(i, 9 + ch));
        if (raw <= 0.0) continue;  // clamped channel
        const double gc = grads.dpayload(i, ch);
        grads.dsh(i, ch) += kSH0 * gc;
        grads.dsh(i, 3 + ch) += -kSH1 * dir.y() * gc;
        grads.dsh(i, 6 + ch) += kSH1 * dir.z() * gc;
        grads.dsh(i, 9 + ch) += -kSH1 * dir.x() * gc;
        ddir += gc * kSH1 *
                Vec3(-set.sh(i, 9 + ch), -set.sh(i, 3 + ch), set.sh(i, 6 + ch));
      }
      grads.dposition[i] += (Mat3::Identity() - dir * dir.transpose()) / dist * ddir;
    }
  }

  if (!want_geometry) return grads;

  // Chain the 2D gradients through projection, covariance and quaternion.
  for (std::size_t si = 0; si < out.splats.size(); ++si) {
    const int gi = out.splats[si].gaussian_index;
    const bool touched = dalpha[gi] != 0.0 || !dmean2d[gi].isZero(0.0) || !dconic[gi].isZero(0.0);
    if (!touched) continue;

    grads.dopacity_raw[gi] += dalpha[gi] * alphas[si] * (1.0 - alphas[si]);

    const Vec3 t = world_to_camera(cam, set.position[gi]);
    const auto J = raster_detail::perspective_jacobian(cam, t);
    const Mat3 R = quat_to_rotation(set.rotation[gi]);
    const Vec3 s = set.log_scale[gi].array().exp();
    const Mat3 M = R * s.asDiagonal();
    const Mat3 cov_cam = cam.R_wc * (M * M.transpose()) * cam.R_wc.transpose();

    // conic = cov2d^-1: dL/dcov2d = -conic * dL/dconic * conic
    const Mat2 dcov2d = -conics[si] * dconic[gi] * conics[si];
    const Eigen::Matrix<double, 2, 3> dJ = 2.0 * dcov2d * J * cov_cam;
    const Mat3 dcov_cam = J.transpose() * dcov2d * J;

    Vec3 dt = J.transpose() * dmean2d[gi];
    const double iz2 = 1.0 / (t.z() * t.z());
    const double iz3 = iz2 / t.z();
    dt.x() += dJ(0, 2) * (-cam.fx * iz2);
    dt.y() += dJ(1, 2) * (-cam.fy * iz2);
    dt.z() += dJ(0, 0) * (-cam.fx * iz2) + dJ(1, 1) * (-cam.fy * iz2) +
              dJ(0, 2) * (2.0 * cam.fx * t.x() * iz3) + dJ(1, 2) * (2.0 * cam.fy * t.y() * iz3);
    grads.dposition[gi] += cam.R_wc.transpose() * dt;

    const Mat3 dcov_world = cam.R_wc.transpose() * dcov_cam * cam.R_wc;
    const Mat3 dM = 2.0 * dcov_world * M;
    for (int k = 0; k < 3; ++k)
      grads.dlog_scale[gi][k] += dM.col(k).dot(R.col(k)) * s[k];

    const Mat3 dR = dM * s.asDiagonal();
    const Vec4 q = set.rotation[gi];
    const double qnorm = q.norm();
    const Vec4 qn = q / qnorm;
    const auto dRdq = raster_detail::rotation_quat_jacobian(qn);
    Vec4 dqn;
    for (int k = 0; k < 4; ++k) dqn[k] = (dR.array() * dRdq[k].array()).sum();
    grads.drotation[gi] += (dqn - dqn.dot(qn) * qn) / qnorm;
  }
  return grads;
}

}  // namespace coseg
