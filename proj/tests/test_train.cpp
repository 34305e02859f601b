#include "coseg/train.hpp"

#include "coseg/eval.hpp"
#include "coseg/synth.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <sstream>

using namespace coseg;

namespace {

bool bitwise_equal(const GaussianSet& a, const GaussianSet& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::memcmp(a.position[i].data(), b.position[i].data(), 3 * sizeof(double)) != 0)
      return false;
    if (std::memcmp(a.rotation[i].data(), b.rotation[i].data(), 4 * sizeof(double)) != 0)
      return false;
    if (std::memcmp(a.log_scale[i].data(), b.log_scale[i].data(), 3 * sizeof(double)) != 0)
      return false;
    if (a.opacity_raw[i] != b.opacity_raw[i]) return false;
    if (std::memcmp(a.color[i].data(), b.color[i].data(), 3 * sizeof(double)) != 0) return false;
  }
  for (int n = 0; n < 4; ++n)
    if (a.features[n].size() != b.features[n].size() ||
        (a.features[n].size() > 0 && a.features[n] != b.features[n]))
      return false;
  return true;
}

bool decoder_equal(const DecoderState& a, const DecoderState& b) {
  for (int n = 0; n < 4; ++n) {
    if (a.mlp[n].w.value != b.mlp[n].w.value) return false;
    if (a.mlp[n].b.value != b.mlp[n].b.value) return false;
  }
  return a.fc.w.value == b.fc.w.value && a.fc.b.value == b.fc.b.value;
}

SynthConfig mini_config(std::uint64_t seed = 5) {
  SynthConfig cfg;
  cfg.n_objects = 4;
  cfg.gaussians_per_object = 30;
  cfg.views = 8;
  cfg.image_size = 32;
  cfg.feature_size = 16;
  cfg.feature_dim = 8;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("adam matches a scalar reference implementation") {
  // reference: textbook Adam on theta' = theta - lr * m_hat / (sqrt(v_hat) + eps)
  double theta_ref = 1.3, m_ref = 0.0, v_ref = 0.0;
  double theta = 1.3, m = 0.0, v = 0.0;
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int t = 1; t <= 100; ++t) {
    const double grad_ref = 2.0 * theta_ref + std::sin(t * 0.1);
    m_ref = b1 * m_ref + (1 - b1) * grad_ref;
    v_ref = b2 * v_ref + (1 - b2) * grad_ref * grad_ref;
    const double mh = m_ref / (1 - std::pow(b1, t));
    const double vh = v_ref / (1 - std::pow(b2, t));
    theta_ref -= lr * mh / (std::sqrt(vh) + eps);

    const double grad = 2.0 * theta + std::sin(t * 0.1);
    theta -= adam_update(grad, m, v, lr, t);
    CHECK(std::abs(theta - theta_ref) <= 1e-12);
  }
}

TEST_CASE("zero-gradient adam step leaves the parameter unchanged") {
  double m = 0.0, v = 0.0;
  CHECK(adam_update(0.0, m, v, 0.01, 1) == 0.0);
}

TEST_CASE("label noise: rate zero leaves labels unchanged") {
  const auto scene = generate_scene(mini_config());
  const auto noisy = inject_label_noise(scene.clean_labels, scene.num_classes, 0.0, 7);
  for (std::size_t v = 0; v < noisy.size(); ++v)
    CHECK(noisy[v].data == scene.clean_labels[v].data);

  CHECK_THROWS_AS(inject_label_noise(scene.clean_labels, scene.num_classes, 1.0, 7), CosegError);
}

TEST_CASE("label noise is cross-view inconsistent") {
  const auto scene = generate_scene(mini_config());
  NoiseManifest manifest;
  const auto noisy =
      inject_label_noise(scene.clean_labels, scene.num_classes, 0.3, 11, &manifest);
  REQUIRE(manifest.remaps.size() == noisy.size());

  // void pixels never change
  for (std::size_t v = 0; v < noisy.size(); ++v)
    for (std::size_t i = 0; i < noisy[v].data.size(); ++i)
      if (scene.clean_labels[v].data[i] == scene.num_classes)
        CHECK(noisy[v].data[i] == scene.num_classes);

  // at least one object carries different labels on two views
  bool disagreement = false;
  for (int c = 0; c < scene.num_classes && !disagreement; ++c) {
    int first_target = -1;
    for (std::size_t v = 0; v < manifest.remaps.size(); ++v) {
      const auto it = manifest.remaps[v].find(c);
      const int target = it == manifest.remaps[v].end() ? c : it->second;
      if (first_target < 0) first_target = target;
      else if (target != first_target) disagreement = true;
    }
  }
  CHECK(disagreement);
}

TEST_CASE("stage1 with zero iterations returns the initialization") {
  const auto scene = generate_scene(mini_config());
  Stage1Config cfg;
  cfg.iterations = 0;
  std::vector<ImageXd> images;
  std::vector<Camera> cams;
  for (const auto v : scene.train_views()) {
    images.push_back(scene.images[v]);
    cams.push_back(scene.cameras[v]);
  }
  const auto out = stage1_build(images, cams, scene.init_points, cfg, 3);
  CHECK(bitwise_equal(out, scene.init_points));
}

TEST_CASE("stage1 is deterministic given the seed") {
  const auto scene = generate_scene(mini_config());
  Stage1Config cfg;
  cfg.iterations = 25;
  std::vector<ImageXd> images;
  std::vector<Camera> cams;
  for (const auto v : scene.train_views()) {
    images.push_back(scene.images[v]);
    cams.push_back(scene.cameras[v]);
  }
  const auto a = stage1_build(images, cams, scene.init_points, cfg, 17);
  const auto b = stage1_build(images, cams, scene.init_points, cfg, 17);
  CHECK(bitwise_equal(a, b));
  const auto c = stage1_build(images, cams, scene.init_points, cfg, 18);
  CHECK(!bitwise_equal(a, c));
}

TEST_CASE("stage1 requires at least two views") {
  const auto scene = generate_scene(mini_config());
  Stage1Config cfg;
  CHECK_THROWS_AS(stage1_build({scene.images[0]}, {scene.cameras[0]}, scene.init_points, cfg, 1),
                  CosegError);
}

TEST_CASE("stage2 freezes geometry and encoder, trains only the decoder") {
  const auto scene = generate_scene(mini_config());
  std::vector<Camera> cams;
  std::vector<FeatureStack> stacks;
  std::vector<LabelMap> labels;
  for (const auto v : scene.train_views()) {
    cams.push_back(scene.cameras[v]);
    stacks.push_back(scene.stacks[v]);
    labels.push_back(scene.clean_labels[v]);
  }

  GaussianSet checkpoint = scene.gt;
  checkpoint.seg_logits.resize(0, 0);
  for (int n = 0; n < 4; ++n) checkpoint.features[n].resize(0, 0);

  Stage2Config cfg;
  cfg.iterations = 10;
  cfg.num_classes = scene.num_classes;
  cfg.coseg.reg_samples = 16;
  cfg.coseg.reg_neighbors = 4;

  const EncoderWeights enc = EncoderWeights::seeded_random(9);
  const EncoderWeights enc_copy = enc;

  const auto result = stage2_segment(checkpoint, cams, stacks, labels, enc, cfg, 21);

  // geometry bit-identical to the (unprojected, pruned) working set
  GaussianSet expected = checkpoint;
  unproject_all_scales(expected, cams, stacks, cfg.unproject);
  REQUIRE(result.baked.size() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    CHECK(result.baked.position[i] == expected.position[i]);
    CHECK(result.baked.opacity_raw[i] == expected.opacity_raw[i]);
    CHECK(result.baked.color[i] == expected.color[i]);
  }
  for (int n = 0; n < 4; ++n)
    CHECK((result.baked.features[n] - expected.features[n]).cwiseAbs().maxCoeff() == 0.0);

  // encoder weights untouched
  for (int n = 0; n < 4; ++n)
    CHECK(enc.layers[n].w_lse == enc_copy.layers[n].w_lse);

  // decoder did move, identities are baked
  const DecoderState fresh = DecoderState::init(result.decoder.config, derive_seed(21, 0x6463u));
  CHECK(!decoder_equal(result.decoder, fresh));
  CHECK(result.baked.num_classes() == scene.num_classes);
}

TEST_CASE("zero loss weights leave the decoder parameters unchanged") {
  const auto scene = generate_scene(mini_config());
  std::vector<Camera> cams;
  std::vector<FeatureStack> stacks;
  std::vector<LabelMap> labels;
  for (const auto v : scene.train_views()) {
    cams.push_back(scene.cameras[v]);
    stacks.push_back(scene.stacks[v]);
    labels.push_back(scene.clean_labels[v]);
  }
  GaussianSet checkpoint = scene.gt;
  checkpoint.seg_logits.resize(0, 0);

  Stage2Config cfg;
  cfg.iterations = 5;
  cfg.num_classes = scene.num_classes;
  cfg.coseg.lambda_pix = 0.0;
  cfg.coseg.lambda_reg = 0.0;

  const EncoderWeights enc = EncoderWeights::seeded_random(9);
  const auto result = stage2_segment(checkpoint, cams, stacks, labels, enc, cfg, 33);
  const DecoderState fresh = DecoderState::init(result.decoder.config, derive_seed(33, 0x6463u));
  CHECK(decoder_equal(result.decoder, fresh));
}

TEST_CASE("stage2 is deterministic and learns the clean scene") {
  const auto scene = generate_scene(mini_config(7));
  std::vector<Camera> cams;
  std::vector<FeatureStack> stacks;
  std::vector<LabelMap> labels;
  for (const auto v : scene.train_views()) {
    cams.push_back(scene.cameras[v]);
    stacks.push_back(scene.stacks[v]);
    labels.push_back(scene.clean_labels[v]);
  }
  GaussianSet checkpoint = scene.gt;
  checkpoint.seg_logits.resize(0, 0);

  Stage2Config cfg;
  cfg.iterations = 250;
  cfg.num_classes = scene.num_classes;
  cfg.coseg.reg_samples = 32;
  cfg.coseg.reg_neighbors = 4;

  const EncoderWeights enc = EncoderWeights::seeded_random(9);
  const auto a = stage2_segment(checkpoint, cams, stacks, labels, enc, cfg, 55);
  const auto b = stage2_segment(checkpoint, cams, stacks, labels, enc, cfg, 55);
  CHECK(decoder_equal(a.decoder, b.decoder));
  CHECK((a.baked.seg_logits - b.baked.seg_logits).cwiseAbs().maxCoeff() == 0.0);

  // held-out views reach high quality on the noiseless scene
  std::vector<LabelMap> pred, gt;
  for (const auto v : scene.test_views()) {
    const auto rendered = render(scene.cameras[v], a.baked, PayloadSpec::segmentation());
    pred.push_back(argmax_labels(rendered.image));
    gt.push_back(scene.clean_labels[v]);
  }
  const auto metrics = miou_accuracy(pred, gt, scene.num_classes + 1, scene.num_classes);
  INFO("held-out mIoU " << metrics.miou);
  CHECK(metrics.miou > 0.9);
}

TEST_CASE("stage2 logs line-delimited json") {
  const auto scene = generate_scene(mini_config());
  std::vector<Camera> cams;
  std::vector<FeatureStack> stacks;
  std::vector<LabelMap> labels;
  for (const auto v : scene.train_views()) {
    cams.push_back(scene.cameras[v]);
    stacks.push_back(scene.stacks[v]);
    labels.push_back(scene.clean_labels[v]);
  }
  GaussianSet checkpoint = scene.gt;
  checkpoint.seg_logits.resize(0, 0);

  Stage2Config cfg;
  cfg.iterations = 4;
  cfg.num_classes = scene.num_classes;
  cfg.log_every = 2;

  std::ostringstream log;
  stage2_segment(checkpoint, cams, stacks, labels, EncoderWeights::seeded_random(9), cfg, 3, &log);
  std::istringstream lines(log.str());
  std::string line;
  int parsed = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("iter"));
    CHECK(j.contains("loss"));
    ++parsed;
  }
  CHECK(parsed >= 2);
}
