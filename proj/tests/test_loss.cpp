#include "coseg/loss.hpp"

#include "test_util.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace coseg;

namespace {

ImageXd random_image(int h, int w, int k, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  ImageXd img(h, w, k);
  Rng rng(seed);
  for (auto& v : img.data) v = rng.uniform(lo, hi);
  return img;
}

ImageXd random_distribution_image(int h, int w, int k, std::uint64_t seed) {
  ImageXd img(h, w, k);
  Rng rng(seed);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      auto px = img.pixel(y, x);
      double total = 0.0;
      for (int c = 0; c < k; ++c) {
        px[c] = rng.uniform(0.05, 1.0);
        total += px[c];
      }
      px /= total;
    }
  return img;
}

}  // namespace

TEST_CASE("photometric loss vanishes on identical images") {
  const ImageXd img = random_image(12, 12, 3, 1);
  const auto r = photometric_loss(img, img, 0.8);
  CHECK(r.loss == Catch::Approx(0.0).margin(1e-12));
  CHECK(r.l1 == 0.0);
  CHECK(r.dssim == Catch::Approx(0.0).margin(1e-12));
  double max_grad = 0.0;
  for (const double g : r.grad.data) max_grad = std::max(max_grad, std::abs(g));
  CHECK(max_grad < 1e-12);
}

TEST_CASE("photometric l1 term on constant offset images") {
  ImageXd a(8, 8, 3, 0.4), b(8, 8, 3, 0.4 + 0.05);
  const auto r = photometric_loss(a, b, 0.8);
  CHECK(r.l1 == Catch::Approx(0.05).epsilon(1e-10));
}

TEST_CASE("photometric gradient matches finite differences") {
  ImageXd rendered = random_image(8, 8, 3, 2);
  const ImageXd target = random_image(8, 8, 3, 3);
  const auto r = photometric_loss(rendered, target, 0.8);
  Rng pick(5);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t i = pick.index(rendered.data.size());
    const double saved = rendered.data[i];
    const double h = 1e-5;
    rendered.data[i] = saved + h;
    const double up = photometric_loss(rendered, target, 0.8).loss;
    rendered.data[i] = saved - h;
    const double down = photometric_loss(rendered, target, 0.8).loss;
    rendered.data[i] = saved;
    const double numeric = (up - down) / (2 * h);
    INFO("entry " << i);
    CHECK(testutil::rel_err(r.grad.data[i], numeric) < 1e-4);
  }
}

TEST_CASE("js loss is zero when prediction equals the one-hot label") {
  const int C = 4;
  ImageXd s(3, 3, C);
  LabelMap labels(3, 3);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) {
      labels.at(y, x) = (y + x) % C;
      s.at(y, x, labels.at(y, x)) = 1.0;
    }
  const auto r = pixel_js_loss(s, labels, {});
  CHECK(r.loss == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("maximally wrong binary prediction scores exactly 2") {
  // kappa = (1,0), S = (0,1), pi = 0.5: JS = log2, Z = 0.5 log2.
  ImageXd s(1, 1, 2);
  s.at(0, 0, 1) = 1.0;
  LabelMap labels(1, 1, 0);
  const auto r = pixel_js_loss(s, labels, {});
  CHECK(r.loss == Catch::Approx(2.0).margin(1e-9));
  for (const double g : r.grad.data) CHECK(std::isfinite(g));
}

TEST_CASE("js loss obeys the divergence bound") {
  CoSegConfig cfg;
  cfg.pi_rl = 0.3;
  cfg.pi_p = 0.7;
  const double bound =
      (cfg.pi_rl * std::log(1.0 / cfg.pi_rl) + cfg.pi_p * std::log(1.0 / cfg.pi_p)) / cfg.z();
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    const ImageXd s = random_distribution_image(4, 4, 5, 100 + trial);
    LabelMap labels(4, 4);
    for (auto& l : labels.data) l = static_cast<int>(rng.index(5));
    const auto r = pixel_js_loss(s, labels, cfg);
    CHECK(r.loss >= 0.0);
    CHECK(r.loss <= bound + 1e-12);
  }
}

TEST_CASE("weighted js is symmetric under equal weights") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    VecXd a(4), b(4);
    for (int c = 0; c < 4; ++c) {
      a[c] = rng.uniform(0.01, 1.0);
      b[c] = rng.uniform(0.01, 1.0);
    }
    a /= a.sum();
    b /= b.sum();
    const double lhs = loss_detail::weighted_js(a, b, 0.5, 0.5);
    const double rhs = loss_detail::weighted_js(b, a, 0.5, 0.5);
    CHECK(lhs == Catch::Approx(rhs).margin(1e-12));
  }
}

TEST_CASE("js gradient stays finite for one-hot predictions") {
  const int C = 3;
  ImageXd s(2, 2, C);
  LabelMap labels(2, 2);
  // one-hot predictions, some agreeing, some not
  s.at(0, 0, 0) = 1.0;
  labels.at(0, 0) = 0;
  s.at(0, 1, 1) = 1.0;
  labels.at(0, 1) = 2;
  s.at(1, 0, 2) = 1.0;
  labels.at(1, 0) = 2;
  s.at(1, 1, 0) = 1.0;
  labels.at(1, 1) = 1;
  const auto r = pixel_js_loss(s, labels, {});
  for (const double g : r.grad.data) CHECK(std::isfinite(g));
  CHECK(r.loss > 0.0);
}

TEST_CASE("js gradient matches finite differences in the interior") {
  ImageXd s = random_distribution_image(4, 4, 3, 11);
  LabelMap labels(4, 4);
  Rng rng(13);
  for (auto& l : labels.data) l = static_cast<int>(rng.index(3));
  CoSegConfig cfg;
  cfg.pi_rl = 0.4;
  cfg.pi_p = 0.6;
  const auto r = pixel_js_loss(s, labels, cfg);
  Rng pick(15);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t i = pick.index(s.data.size());
    const double saved = s.data[i];
    const double h = 4e-7;  // stays inside the normalization tolerance
    s.data[i] = saved + h;
    const double up = pixel_js_loss(s, labels, cfg).loss;
    s.data[i] = saved - h;
    const double down = pixel_js_loss(s, labels, cfg).loss;
    s.data[i] = saved;
    const double numeric = (up - down) / (2 * h);
    INFO("entry " << i << " analytic=" << r.grad.data[i] << " numeric=" << numeric);
    CHECK(testutil::rel_err(r.grad.data[i], numeric, 1e-5) < 1e-4);
  }
}

TEST_CASE("non-normalized predictions are rejected") {
  ImageXd s(1, 1, 2);
  s.at(0, 0, 0) = 0.7;
  s.at(0, 0, 1) = 0.4;
  LabelMap labels(1, 1, 0);
  CHECK_THROWS_AS(pixel_js_loss(s, labels, {}), CosegError);
}

TEST_CASE("z constant recomputes from pi_rl") {
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    CoSegConfig cfg;
    cfg.pi_rl = rng.uniform(0.05, 0.95);
    cfg.pi_p = 1.0 - cfg.pi_rl;
    CHECK(cfg.z() == Catch::Approx(-(1.0 - cfg.pi_rl) * std::log(1.0 - cfg.pi_rl)).margin(1e-15));
  }
}

TEST_CASE("reg loss vanishes on identical features") {
  const auto pts = [] {
    Rng rng(19);
    std::vector<Vec3> p(80);
    for (auto& v : p) v = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    return p;
  }();
  const auto h = build_hierarchy(pts, 3);
  std::array<RowMat, 4> fused;
  for (int n = 0; n < 4; ++n) {
    fused[n].resize(h.level_size(n + 1), 3);
    for (int i = 0; i < fused[n].rows(); ++i) fused[n].row(i) = Eigen::RowVector3d(0.2, -1.0, 0.5);
  }
  CoSegConfig cfg;
  cfg.reg_samples = 16;
  cfg.reg_neighbors = 4;
  const auto r = reg_loss(h, fused, cfg, 7);
  CHECK(r.loss == Catch::Approx(0.0).margin(1e-12));
  for (const int n : cfg.reg_scales) CHECK(r.grad[n - 1].cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("single-pair reg loss equals the hand-computed KL sum") {
  // Population of two points at scale 3; M clamps to 2, K = 1, so the loss is
  // [KL(p||q) + KL(q||p)] / 2 regardless of sampling order.
  SampleHierarchy h;
  h.positions[2] = {Vec3(0, 0, 0), Vec3(1, 0, 0)};
  std::array<RowMat, 4> fused;
  fused[2].resize(2, 3);
  fused[2] << 0.3, -0.7, 1.1, -0.2, 0.4, 0.9;
  CoSegConfig cfg;
  cfg.reg_scales = {3};
  cfg.reg_samples = 2;
  cfg.reg_neighbors = 1;
  const auto r = reg_loss(h, fused, cfg, 21);

  const VecXd p = loss_detail::softmax(fused[2].row(0));
  const VecXd q = loss_detail::softmax(fused[2].row(1));
  double expect = 0.0;
  for (int c = 0; c < 3; ++c) expect += p[c] * std::log(p[c] / q[c]);
  for (int c = 0; c < 3; ++c) expect += q[c] * std::log(q[c] / p[c]);
  expect /= 2.0;
  CHECK(r.loss == Catch::Approx(expect).margin(1e-12));
}

TEST_CASE("reg gradient matches finite differences") {
  Rng prng(23);
  std::vector<Vec3> pts(80);
  for (auto& v : pts) v = Vec3(prng.uniform(-1, 1), prng.uniform(-1, 1), prng.uniform(-1, 1));
  const auto h = build_hierarchy(pts, 5);
  std::array<RowMat, 4> fused;
  Rng frng(29);
  for (int n = 2; n < 4; ++n) {
    fused[n].resize(h.level_size(n + 1), 3);
    for (int i = 0; i < fused[n].size(); ++i) fused[n].data()[i] = frng.normal();
  }
  CoSegConfig cfg;
  cfg.reg_samples = 4;
  cfg.reg_neighbors = 2;
  const auto r = reg_loss(h, fused, cfg, 31);

  Rng pick(37);
  for (const int scale : cfg.reg_scales) {
    RowMat& f = fused[scale - 1];
    for (int trial = 0; trial < 12; ++trial) {
      const Eigen::Index i = static_cast<Eigen::Index>(pick.index(f.size()));
      const double saved = f.data()[i];
      const double hstep = 1e-5;
      f.data()[i] = saved + hstep;
      const double up = reg_loss(h, fused, cfg, 31).loss;
      f.data()[i] = saved - hstep;
      const double down = reg_loss(h, fused, cfg, 31).loss;
      f.data()[i] = saved;
      const double numeric = (up - down) / (2 * hstep);
      const double analytic = r.grad[scale - 1].data()[i];
      if (std::abs(analytic) < 1e-8 && std::abs(numeric) < 1e-8) continue;
      INFO("scale " << scale << " entry " << i);
      CHECK(testutil::rel_err(analytic, numeric) < 1e-4);
    }
  }
}

TEST_CASE("coseg loss combines its parts linearly") {
  Rng prng(41);
  std::vector<Vec3> pts(80);
  for (auto& v : pts) v = Vec3(prng.uniform(-1, 1), prng.uniform(-1, 1), prng.uniform(-1, 1));
  const auto h = build_hierarchy(pts, 7);
  std::array<RowMat, 4> fused;
  Rng frng(43);
  for (int n = 0; n < 4; ++n) {
    fused[n].resize(h.level_size(n + 1), 4);
    for (int i = 0; i < fused[n].size(); ++i) fused[n].data()[i] = frng.normal();
  }
  const ImageXd s = random_distribution_image(5, 5, 4, 47);
  LabelMap labels(5, 5);
  for (auto& l : labels.data) l = static_cast<int>(frng.index(4));

  CoSegConfig cfg;  // paper defaults: lambda_pix 0.8, lambda_reg 0.2
  CHECK(cfg.lambda_pix == 0.8);
  CHECK(cfg.lambda_reg == 0.2);
  cfg.reg_samples = 8;
  cfg.reg_neighbors = 3;

  const auto full = coseg_loss(s, labels, h, fused, cfg, 51);
  CHECK(full.total == Catch::Approx(0.8 * full.pix + 0.2 * full.reg).margin(1e-12));

  CoSegConfig pix_only = cfg;
  pix_only.lambda_reg = 0.0;
  pix_only.lambda_pix = 1.0;
  const auto pix = coseg_loss(s, labels, h, fused, pix_only, 51);
  CHECK(pix.total == Catch::Approx(pixel_js_loss(s, labels, cfg).loss).margin(1e-12));

  // degenerate case: both components zero
  ImageXd exact(2, 2, 2);
  LabelMap match(2, 2, 1);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) exact.at(y, x, 1) = 1.0;
  std::array<RowMat, 4> flat;
  SampleHierarchy h2;
  h2.positions[2] = {Vec3(0, 0, 0), Vec3(1, 0, 0)};
  h2.positions[3] = {Vec3(0, 0, 0), Vec3(1, 0, 0)};
  for (int n = 2; n < 4; ++n) flat[n] = RowMat::Zero(2, 2);
  const auto zero = coseg_loss(exact, match, h2, flat, cfg, 53);
  CHECK(zero.total == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("cross entropy baseline behaves") {
  ImageXd s(1, 2, 3);
  s.at(0, 0, 0) = 0.7;
  s.at(0, 0, 1) = 0.2;
  s.at(0, 0, 2) = 0.1;
  s.at(0, 1, 0) = 0.1;
  s.at(0, 1, 1) = 0.8;
  s.at(0, 1, 2) = 0.1;
  LabelMap labels(1, 2);
  labels.at(0, 0) = 0;
  labels.at(0, 1) = 1;
  const auto r = pixel_ce_loss(s, labels);
  CHECK(r.loss == Catch::Approx(-(std::log(0.7) + std::log(0.8)) / 2.0).margin(1e-12));
  CHECK(r.grad.at(0, 0, 0) == Catch::Approx(-1.0 / (0.7 * 2.0)).margin(1e-12));
  CHECK(r.grad.at(0, 0, 1) == 0.0);
}

TEST_CASE("softmax image and its adjoint") {
  const ImageXd logits = random_image(4, 4, 5, 61, -2.0, 2.0);
  const ImageXd s = softmax_image(logits);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) CHECK(s.pixel(y, x).sum() == Catch::Approx(1.0).margin(1e-12));

  const ImageXd up = random_image(4, 4, 5, 67, -1.0, 1.0);
  const ImageXd dlogits = softmax_backward_image(s, up);
  ImageXd probe = logits;
  Rng pick(71);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t i = pick.index(probe.data.size());
    const double saved = probe.data[i];
    const double h = 1e-6;
    auto loss = [&](const ImageXd& lg) {
      const ImageXd sm = softmax_image(lg);
      double total = 0.0;
      for (std::size_t k = 0; k < sm.data.size(); ++k) total += sm.data[k] * up.data[k];
      return total;
    };
    probe.data[i] = saved + h;
    const double upv = loss(probe);
    probe.data[i] = saved - h;
    const double downv = loss(probe);
    probe.data[i] = saved;
    const double numeric = (upv - downv) / (2 * h);
    if (std::abs(dlogits.data[i]) < 1e-8 && std::abs(numeric) < 1e-8) continue;
    CHECK(testutil::rel_err(dlogits.data[i], numeric, 1e-6) < 1e-3);
  }
}
