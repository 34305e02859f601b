#include "coseg/synth.hpp"

#include "coseg/eval.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

using namespace coseg;

namespace {

SynthConfig small_config() {
  SynthConfig cfg;
  cfg.n_objects = 4;
  cfg.gaussians_per_object = 25;
  cfg.views = 8;
  cfg.image_size = 32;
  cfg.feature_size = 16;
  cfg.feature_dim = 8;
  cfg.seed = 5;
  return cfg;
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("generation is deterministic and byte-identical on disk") {
  const auto cfg = small_config();
  namespace fs = std::filesystem;
  const auto base = fs::temp_directory_path() / "coseg_synth_det";
  fs::remove_all(base);
  write_scene((base / "a").string(), generate_scene(cfg), cfg);
  write_scene((base / "b").string(), generate_scene(cfg), cfg);

  for (const std::string rel :
       {"scene.json", "cameras.json", "gt.ply", "init.ply", "images/view_000.fmap",
        "images/view_003.png", "features/scale_2/view_001.fmap", "labels/clean/view_002.png"}) {
    INFO(rel);
    CHECK(slurp((base / "a" / rel).string()) == slurp((base / "b" / rel).string()));
  }
  fs::remove_all(base);
}

TEST_CASE("every camera sees at least 90 percent of the gaussians") {
  const auto scene = generate_scene(small_config());
  for (const auto& cam : scene.cameras) {
    const auto visible = visible_subset(scene.gt, cam);
    CHECK(visible.size() * 10 >= scene.gt.size() * 9);
  }
  // attendance pruning at the default threshold removes nothing
  GaussianSet work = scene.gt;
  UnprojectConfig ucfg;
  std::vector<Camera> cams = scene.cameras;
  unproject_all_scales(work, cams, scene.stacks, ucfg);
  CHECK(work.size() == scene.gt.size());
}

TEST_CASE("clean labels score miou 1 against themselves") {
  const auto scene = generate_scene(small_config());
  const auto r = miou_accuracy(scene.clean_labels, scene.clean_labels, scene.num_classes + 1,
                               scene.num_classes);
  CHECK(r.miou == 1.0);
  CHECK(r.accuracy == 1.0);
}

TEST_CASE("feature maps are normalized renderings of the prototypes") {
  auto cfg = small_config();
  cfg.sigma_f = 0.0;
  const auto scene = generate_scene(cfg);
  for (std::size_t v = 0; v < scene.cameras.size(); ++v) {
    const Camera fcam = scene.cameras[v].scaled_to(cfg.feature_size, cfg.feature_size);
    const ImageXd raw = render(fcam, scene.gt, PayloadSpec::feature(1)).image;
    const ImageXd& emitted = scene.stacks[v].scales[0];
    for (int y = 0; y < raw.height; ++y)
      for (int x = 0; x < raw.width; ++x) {
        auto px = raw.pixel(y, x);
        const double norm = px.norm();
        for (int d = 0; d < raw.channels; ++d) {
          const double expect = norm > 1e-12 ? px[d] / norm : 0.0;
          CHECK(std::abs(emitted.at(y, x, d) - expect) < 1e-12);
        }
      }
  }
}

TEST_CASE("prototypes are orthogonal one-hot rows") {
  const auto scene = generate_scene(small_config());
  const RowMat gram = scene.prototypes * scene.prototypes.transpose();
  CHECK((gram - RowMat::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("noisy labels and manifest are emitted when requested") {
  auto cfg = small_config();
  cfg.noise_rate = 0.35;
  const auto scene = generate_scene(cfg);
  REQUIRE(scene.noisy_labels.size() == scene.clean_labels.size());
  bool any_changed = false;
  for (std::size_t v = 0; v < scene.noisy_labels.size(); ++v)
    if (scene.noisy_labels[v].data != scene.clean_labels[v].data) any_changed = true;
  CHECK(any_changed);
  CHECK(scene.manifest.rate == 0.35);

  // scene loader round trip
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "coseg_synth_loader";
  fs::remove_all(dir);
  write_scene(dir.string(), scene, cfg);
  const auto meta = read_scene_meta(dir.string());
  CHECK(meta.num_classes == cfg.n_objects);
  CHECK(meta.feature_dim == cfg.feature_dim);
  const auto labels = read_labels(dir.string(), cfg.views, "noisy");
  for (std::size_t v = 0; v < labels.size(); ++v)
    CHECK(labels[v].data == scene.noisy_labels[v].data);
  const auto stacks = read_feature_stacks(dir.string(), cfg.views);
  CHECK(stacks[0].scales[0].channels == cfg.feature_dim);
  fs::remove_all(dir);
}

TEST_CASE("config validation") {
  SynthConfig bad = small_config();
  bad.n_objects = 1;
  CHECK_THROWS_AS(generate_scene(bad), CosegError);
  bad = small_config();
  bad.feature_dim = 2;  // fewer than classes
  CHECK_THROWS_AS(generate_scene(bad), CosegError);
}
