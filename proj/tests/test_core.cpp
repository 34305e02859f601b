#include "coseg/core.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace coseg;

namespace {

// Hamilton product, used to compose test rotations.
Vec4 quat_mul(const Vec4& a, const Vec4& b) {
  const double w = a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3];
  const double x = a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2];
  const double y = a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1];
  const double z = a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0];
  return Vec4(w, x, y, z);
}

}  // namespace

TEST_CASE("build_covariance identity") {
  const Mat3 cov = build_covariance(Vec4(1, 0, 0, 0), Vec3(0, 0, 0));
  CHECK((cov - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("build_covariance axis-aligned scaling") {
  const Mat3 cov = build_covariance(Vec4(1, 0, 0, 0), Vec3(std::log(2.0), 0, 0));
  Mat3 expect = Mat3::Identity();
  expect(0, 0) = 4.0;
  CHECK((cov - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("build_covariance 90 degrees about z") {
  // R S S^T R^T computed by hand: scaling 2 along x rotated onto y.
  const double s = std::sin(M_PI / 4.0);
  const Vec4 q(std::cos(M_PI / 4.0), 0, 0, s);
  const Mat3 cov = build_covariance(q, Vec3(std::log(2.0), 0, 0));
  Mat3 expect = Mat3::Identity();
  expect(1, 1) = 4.0;
  CHECK((cov - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("build_covariance is PSD for random inputs") {
  Rng rng(7);
  double min_eig = 1e300;
  for (int trial = 0; trial < 1000; ++trial) {
    Vec4 q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    const Vec3 s_log(rng.uniform(-4, 2), rng.uniform(-4, 2), rng.uniform(-4, 2));
    const Mat3 cov = build_covariance(q, s_log);
    CHECK((cov - cov.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    min_eig = std::min(min_eig, eig.eigenvalues().minCoeff());
  }
  CHECK(min_eig >= -1e-12);
}

TEST_CASE("build_covariance rotation equivariance") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Vec4 q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    q.normalize();
    Vec4 q0(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    q0.normalize();
    const Vec3 s_log(rng.uniform(-3, 1), rng.uniform(-3, 1), rng.uniform(-3, 1));
    const Mat3 lhs = build_covariance(quat_mul(q0, q), s_log);
    const Mat3 R0 = quat_to_rotation(q0);
    const Mat3 rhs = R0 * build_covariance(q, s_log) * R0.transpose();
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("world_to_camera identity and translation") {
  Camera cam;
  cam.fx = cam.fy = 10;
  cam.width = cam.height = 8;
  CHECK((world_to_camera(cam, Vec3(1, 2, 3)) - Vec3(1, 2, 3)).norm() == 0.0);
  cam.t_wc = Vec3(0, 0, 5);
  CHECK((world_to_camera(cam, Vec3(0, 0, 0)) - Vec3(0, 0, 5)).norm() == 0.0);
}

TEST_CASE("world_to_camera rotated pose") {
  Camera cam;
  cam.fx = cam.fy = 10;
  cam.width = cam.height = 8;
  cam.R_wc << -1, 0, 0, 0, 1, 0, 0, 0, -1;  // 180 degrees about y
  cam.t_wc = Vec3(0, 0, 4);
  CHECK((world_to_camera(cam, Vec3(1, 0, 0)) - Vec3(-1, 0, 4)).norm() < 1e-15);
}

TEST_CASE("camera validation") {
  Camera cam;
  cam.fx = 0.0;
  cam.fy = 10.0;
  cam.width = cam.height = 4;
  CHECK_THROWS_AS(cam.validate(), CosegError);
  cam.fx = 10.0;
  cam.R_wc(0, 0) = 2.0;
  CHECK_THROWS_AS(cam.validate(), CosegError);
}

TEST_CASE("camera intrinsics rescaling") {
  Camera cam;
  cam.fx = 64;
  cam.fy = 48;
  cam.cx = 32;
  cam.cy = 24;
  cam.width = 64;
  cam.height = 48;
  const Camera half = cam.scaled_to(32, 24);
  CHECK(half.fx == Catch::Approx(32.0));
  CHECK(half.fy == Catch::Approx(24.0));
  CHECK(half.cx == Catch::Approx(16.0));
  CHECK(half.cy == Catch::Approx(12.0));
}

TEST_CASE("gaussian set filter keeps parallel arrays aligned") {
  GaussianSet set;
  set.resize(4);
  set.seg_logits.setZero(4, 2);
  for (int i = 0; i < 4; ++i) {
    set.position[i] = Vec3(i, 0, 0);
    set.seg_logits(i, 0) = i;
  }
  set.filter({true, false, true, false});
  REQUIRE(set.size() == 2);
  CHECK(set.position[1].x() == 2.0);
  CHECK(set.seg_logits(1, 0) == 2.0);
  set.check_consistent();
}
