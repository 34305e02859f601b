#pragma once

#include "coseg/common.hpp"

#include <array>
#include <optional>

namespace coseg {

// Pinhole camera with a rigid world-to-camera transform. Camera frame is
// +z forward, +x right, +y down; a world point maps to R_wc * x + t_wc.
struct Camera {
  double fx = 0.0, fy = 0.0;
  double cx = 0.0, cy = 0.0;
  int width = 0, height = 0;
  Mat3 R_wc = Mat3::Identity();
  Vec3 t_wc = Vec3::Zero();

  void validate() const {
    require(fx > 0.0 && fy > 0.0, "Camera: fx and fy must be positive");
    require(width > 0 && height > 0, "Camera: image size must be positive");
    const double dev = (R_wc.transpose() * R_wc - Mat3::Identity()).cwiseAbs().maxCoeff();
    require(dev <= 1e-6, "Camera: R_wc is not orthonormal (deviation " + std::to_string(dev) + ")");
  }

  // Intrinsics rescaled to a feature-map resolution.
  Camera scaled_to(int new_width, int new_height) const {
    Camera c = *this;
    const double sx = static_cast<double>(new_width) / width;
    const double sy = static_cast<double>(new_height) / height;
    c.fx = fx * sx;
    c.fy = fy * sy;
    c.cx = cx * sx;
    c.cy = cy * sy;
    c.width = new_width;
    c.height = new_height;
    return c;
  }
};

inline Vec3 world_to_camera(const Camera& cam, const Vec3& x) { return cam.R_wc * x + cam.t_wc; }

// Camera at `eye` looking at `target`. Rows of R_wc are the camera axes in
// world coordinates (+x right, +y down, +z forward).
inline Camera make_lookat_camera(const Vec3& eye, const Vec3& target, double fx, double fy,
                                 int width, int height, const Vec3& up = Vec3(0, 0, 1)) {
  Camera cam;
  cam.fx = fx;
  cam.fy = fy;
  cam.cx = width * 0.5;
  cam.cy = height * 0.5;
  cam.width = width;
  cam.height = height;
  const Vec3 forward = (target - eye).normalized();
  Vec3 right = forward.cross(up);
  if (right.norm() < 1e-9) right = forward.cross(Vec3(0, 1, 0));
  right.normalize();
  const Vec3 down = forward.cross(right).normalized();
  cam.R_wc.row(0) = right.transpose();
  cam.R_wc.row(1) = down.transpose();
  cam.R_wc.row(2) = forward.transpose();
  cam.t_wc = -cam.R_wc * eye;
  return cam;
}

// Rotation matrix of a quaternion (w, x, y, z); q is normalized internally.
inline Mat3 quat_to_rotation(const Vec4& q) {
  const Vec4 n = q / q.norm();
  const double w = n[0], x = n[1], y = n[2], z = n[3];
  Mat3 R;
  R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return R;
}

// Sigma = R * S * S^T * R^T with S = diag(exp(s_log)); symmetric PSD by
// construction, eigenvalues exp(2 s_log) up to rotation.
inline Mat3 build_covariance(const Vec4& q, const Vec3& s_log) {
  const Mat3 R = quat_to_rotation(q);
  const Vec3 s = s_log.array().exp();
  const Mat3 M = R * s.asDiagonal();
  return M * M.transpose();
}

// Scene container, structure-of-arrays. All arrays share length N; the
// optional blocks (seg_logits, sh, features) are either empty or N rows.
struct GaussianSet {
  std::vector<Vec3> position;        // world units
  std::vector<Vec4> rotation;        // unit quaternion (w,x,y,z)
  std::vector<Vec3> log_scale;       // log-meters
  std::vector<double> opacity_raw;   // logit; alpha = sigmoid(opacity_raw)
  std::vector<Vec3> color;           // RGB in [0,1] (used when sh_degree == 0)

  int sh_degree = 0;                 // 0 = plain RGB, 1 = degree-1 SH
  RowMat sh;                         // N x 12 when sh_degree == 1

  RowMat seg_logits;                 // N x C, C = number of classes

  // Per-scale unprojected features f_d[n], n = 1..4 stored at [n-1]; N x D.
  std::array<RowMat, 4> features;

  std::size_t size() const { return position.size(); }

  double alpha(std::size_t i) const { return sigmoid(opacity_raw[i]); }

  int num_classes() const { return static_cast<int>(seg_logits.cols()); }

  void resize(std::size_t n) {
    position.resize(n, Vec3::Zero());
    rotation.resize(n, Vec4(1, 0, 0, 0));
    log_scale.resize(n, Vec3::Zero());
    opacity_raw.resize(n, 0.0);
    color.resize(n, Vec3::Zero());
  }

  void renormalize_rotations() {
    for (auto& q : rotation) q /= q.norm();
  }

  void check_consistent() const {
    const std::size_t n = size();
    require(rotation.size() == n && log_scale.size() == n && opacity_raw.size() == n &&
                color.size() == n,
            "GaussianSet: parallel arrays disagree on length");
    if (sh_degree == 1) require(static_cast<std::size_t>(sh.rows()) == n, "GaussianSet: sh rows != N");
    if (seg_logits.size() > 0)
      require(static_cast<std::size_t>(seg_logits.rows()) == n, "GaussianSet: seg_logits rows != N");
    for (const auto& f : features)
      if (f.size() > 0) require(static_cast<std::size_t>(f.rows()) == n, "GaussianSet: feature rows != N");
  }

  // Keeps rows where mask is true; applied to every parallel array.
  void filter(const std::vector<bool>& mask) {
    require(mask.size() == size(), "GaussianSet::filter: mask length mismatch");
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) keep.push_back(i);
    gather_in_place(keep);
  }

  void gather_in_place(const std::vector<std::size_t>& idx) {
    GaussianSet out;
    out.sh_degree = sh_degree;
    out.resize(idx.size());
    if (sh_degree == 1) out.sh.resize(idx.size(), sh.cols());
    if (seg_logits.size() > 0) out.seg_logits.resize(idx.size(), seg_logits.cols());
    for (int s = 0; s < 4; ++s)
      if (features[s].size() > 0) out.features[s].resize(idx.size(), features[s].cols());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const std::size_t i = idx[k];
      out.position[k] = position[i];
      out.rotation[k] = rotation[i];
      out.log_scale[k] = log_scale[i];
      out.opacity_raw[k] = opacity_raw[i];
      out.color[k] = color[i];
      if (sh_degree == 1) out.sh.row(k) = sh.row(i);
      if (seg_logits.size() > 0) out.seg_logits.row(k) = seg_logits.row(i);
      for (int s = 0; s < 4; ++s)
        if (features[s].size() > 0) out.features[s].row(k) = features[s].row(i);
    }
    *this = std::move(out);
  }
};

// Degree-1 SH basis constants (3DGS convention).
inline constexpr double kSH0 = 0.28209479177387814;
inline constexpr double kSH1 = 0.4886025119029199;

// View-dependent color for sh_degree == 1: 0.5 + SH0*dc + SH1*(-y*c1 + z*c2 - x*c3),
// clamped below at 0. `dir` is the unit vector from camera center to the Gaussian.
inline Vec3 eval_sh_color(const Eigen::Ref<const Eigen::RowVectorXd>& coeffs, const Vec3& dir) {
  Vec3 c;
  for (int ch = 0; ch < 3; ++ch) {
    const double v = 0.5 + kSH0 * coeffs[ch] +
                     kSH1 * (-dir.y() * coeffs[3 + ch] + dir.z() * coeffs[6 + ch] -
                             dir.x() * coeffs[9 + ch]);
    c[ch] = std::max(0.0, v);
  }
  return c;
}

}  // namespace coseg
