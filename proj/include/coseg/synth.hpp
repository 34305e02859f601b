#pragma once

#include "coseg/io.hpp"
#include "coseg/png.hpp"
#include "coseg/raster.hpp"
#include "coseg/spatial.hpp"
#include "coseg/train.hpp"

#include <filesystem>

namespace coseg {

struct SynthConfig {
  int n_objects = 5;
  int gaussians_per_object = 40;
  int views = 12;
  int image_size = 64;
  int feature_size = 32;   // feature-map resolution, all scales
  int feature_dim = 16;
  double sigma_f = 0.0;    // feature-map noise before normalization
  double noise_rate = 0.0; // emitted noisy-label corruption
  int test_every = 4;      // every k-th view held out
  double camera_radius = 4.0;
  double camera_height = 2.2;
  double focal = 64.0;
  std::uint64_t seed = 1;

  void validate() const {
    require(n_objects >= 2, "synth: at least 2 objects required");
    require(feature_dim >= n_objects, "synth: feature_dim must be >= n_objects");
    require(views >= 3, "synth: at least 3 views required");
    require(noise_rate >= 0.0 && noise_rate < 1.0, "synth: noise rate must be in [0, 1)");
  }
};

struct SyntheticScene {
  GaussianSet gt;                     // true identities, prototype features attached
  std::vector<int> gt_class;         // per Gaussian
  RowMat prototypes;                 // C x D, orthogonal one-hot rows
  std::vector<Camera> cameras;
  std::vector<int> split;            // 0 = train, 1 = test
  std::vector<ImageXd> images;       // float RGB per view
  std::vector<FeatureStack> stacks;  // per view, 4 scales
  std::vector<LabelMap> clean_labels;
  std::vector<LabelMap> noisy_labels;  // empty when noise_rate == 0
  NoiseManifest manifest;
  GaussianSet init_points;           // jittered initialization for stage 1
  std::vector<std::array<unsigned char, 3>> palette;  // C+1 entries, last = void

  int num_classes = 0;  // real classes; void uses index num_classes

  std::vector<std::size_t> train_views() const {
    std::vector<std::size_t> v;
    for (std::size_t i = 0; i < split.size(); ++i)
      if (split[i] == 0) v.push_back(i);
    return v;
  }
  std::vector<std::size_t> test_views() const {
    std::vector<std::size_t> v;
    for (std::size_t i = 0; i < split.size(); ++i)
      if (split[i] == 1) v.push_back(i);
    return v;
  }
};

namespace synth_detail {

inline Vec3 hsv_color(double h, double s, double v) {
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  Vec3 rgb;
  if (hp < 1) rgb = Vec3(c, x, 0);
  else if (hp < 2) rgb = Vec3(x, c, 0);
  else if (hp < 3) rgb = Vec3(0, c, x);
  else if (hp < 4) rgb = Vec3(0, x, c);
  else if (hp < 5) rgb = Vec3(x, 0, c);
  else rgb = Vec3(c, 0, x);
  return rgb + Vec3::Constant(v - c);
}

}  // namespace synth_detail

// Deterministic synthetic scene: blobs of Gaussians per object with distinct
// classes, class-correlated colors, one-hot prototype features, and a camera
// ring placed so every view sees at least 90% of the Gaussians.
inline SyntheticScene generate_scene(const SynthConfig& cfg) {
  cfg.validate();
  SyntheticScene scene;
  scene.num_classes = cfg.n_objects;
  Rng rng(derive_seed(cfg.seed, /*tag=*/0x7379u));

  const int total = cfg.n_objects * cfg.gaussians_per_object;
  scene.gt.resize(total);
  scene.gt_class.resize(total);
  scene.gt.seg_logits.setZero(total, cfg.n_objects);
  scene.prototypes.setZero(cfg.n_objects, cfg.feature_dim);
  for (int c = 0; c < cfg.n_objects; ++c) scene.prototypes(c, c) = 1.0;

  for (int obj = 0; obj < cfg.n_objects; ++obj) {
    const double angle = 2.0 * M_PI * obj / cfg.n_objects;
    const Vec3 center(1.2 * std::cos(angle), 1.2 * std::sin(angle), rng.uniform(-0.3, 0.3));
    const Vec3 base_color = synth_detail::hsv_color(static_cast<double>(obj) / cfg.n_objects,
                                                    0.75, 0.9);
    for (int g = 0; g < cfg.gaussians_per_object; ++g) {
      const int i = obj * cfg.gaussians_per_object + g;
      scene.gt_class[i] = obj;
      scene.gt.position[i] =
          center + Vec3(rng.normal() * 0.25, rng.normal() * 0.25, rng.normal() * 0.25);
      Vec4 q(1.0 + rng.normal() * 0.1, rng.normal() * 0.1, rng.normal() * 0.1,
             rng.normal() * 0.1);
      scene.gt.rotation[i] = q / q.norm();
      scene.gt.log_scale[i] = Vec3::Constant(std::log(rng.uniform(0.06, 0.12)));
      scene.gt.opacity_raw[i] = logit(rng.uniform(0.6, 0.95));
      for (int d = 0; d < 3; ++d)
        scene.gt.color[i][d] = std::clamp(base_color[d] + rng.uniform(-0.08, 0.08), 0.0, 1.0);
      scene.gt.seg_logits(i, obj) = 10.0;
    }
  }
  for (int n = 0; n < 4; ++n) {
    scene.gt.features[n].resize(total, cfg.feature_dim);
    for (int i = 0; i < total; ++i)
      scene.gt.features[n].row(i) = scene.prototypes.row(scene.gt_class[i]);
  }

  // palette: class hues plus a gray void entry
  for (int c = 0; c < cfg.n_objects; ++c) {
    const Vec3 col = synth_detail::hsv_color(static_cast<double>(c) / cfg.n_objects, 0.75, 0.9);
    scene.palette.push_back({static_cast<unsigned char>(std::lround(col[0] * 255)),
                             static_cast<unsigned char>(std::lround(col[1] * 255)),
                             static_cast<unsigned char>(std::lround(col[2] * 255))});
  }
  scene.palette.push_back({64, 64, 64});

  for (int v = 0; v < cfg.views; ++v) {
    const double angle = 2.0 * M_PI * v / cfg.views;
    const Vec3 eye(cfg.camera_radius * std::cos(angle), cfg.camera_radius * std::sin(angle),
                   cfg.camera_height);
    scene.cameras.push_back(make_lookat_camera(eye, Vec3(0, 0, 0), cfg.focal, cfg.focal,
                                               cfg.image_size, cfg.image_size));
    scene.split.push_back((v % cfg.test_every) == cfg.test_every - 1 ? 1 : 0);
  }
  require(!scene.train_views().empty() && !scene.test_views().empty(),
          "synth: split produced an empty train or test set");

  // placement constraint: every camera sees at least 90% of the Gaussians
  for (const auto& cam : scene.cameras) {
    const auto visible = visible_subset(scene.gt, cam);
    require(visible.size() * 10 >= scene.gt.size() * 9,
            "synth: a camera sees fewer than 90% of the Gaussians");
  }

  Rng noise_rng(derive_seed(cfg.seed, /*tag=*/0x666eu));
  for (int v = 0; v < cfg.views; ++v) {
    const Camera& cam = scene.cameras[v];
    scene.images.push_back(render(cam, scene.gt, PayloadSpec::color()).image);

    FeatureStack stack;
    const Camera fcam = cam.scaled_to(cfg.feature_size, cfg.feature_size);
    for (int n = 0; n < 4; ++n) {
      ImageXd fmap = render(fcam, scene.gt, PayloadSpec::feature(n + 1)).image;
      if (cfg.sigma_f > 0.0)
        for (auto& x : fmap.data) x += noise_rng.normal() * cfg.sigma_f;
      for (int y = 0; y < fmap.height; ++y)
        for (int x = 0; x < fmap.width; ++x) {
          auto px = fmap.pixel(y, x);
          const double norm = px.norm();
          if (norm > 1e-12) px /= norm;
        }
      stack.scales[n] = std::move(fmap);
    }
    scene.stacks.push_back(std::move(stack));

    scene.clean_labels.push_back(
        argmax_labels(render(cam, scene.gt, PayloadSpec::segmentation()).image));
  }

  if (cfg.noise_rate > 0.0)
    scene.noisy_labels = inject_label_noise(scene.clean_labels, cfg.n_objects, cfg.noise_rate,
                                            derive_seed(cfg.seed, /*tag=*/0x6e7au),
                                            &scene.manifest);

  // stage-1 initialization: jittered positions, flat appearance
  scene.init_points = scene.gt;
  scene.init_points.seg_logits.resize(0, 0);
  for (int n = 0; n < 4; ++n) scene.init_points.features[n].resize(0, 0);
  Rng init_rng(derive_seed(cfg.seed, /*tag=*/0x696eu));
  for (std::size_t i = 0; i < scene.init_points.size(); ++i) {
    scene.init_points.position[i] += Vec3(init_rng.normal(), init_rng.normal(),
                                          init_rng.normal()) * 0.03;
    scene.init_points.rotation[i] = Vec4(1, 0, 0, 0);
    scene.init_points.log_scale[i] = Vec3::Constant(std::log(0.08));
    scene.init_points.opacity_raw[i] = logit(0.7);
    for (int d = 0; d < 3; ++d)
      scene.init_points.color[i][d] =
          std::clamp(scene.init_points.color[i][d] + init_rng.uniform(-0.1, 0.1), 0.0, 1.0);
  }
  return scene;
}

// ---------------------------------------------------------------------------
// On-disk layout consumed by the CLI:
//   scene.json, cameras.json, gt.ply (+ feature sidecar), init.ply,
//   images/view_%03d.{fmap,png}, features/scale_%d/view_%03d.fmap,
//   labels/clean/view_%03d.png, labels/noisy/view_%03d.png, noise_manifest.json
// ---------------------------------------------------------------------------

namespace synth_detail {

inline std::string view_name(std::size_t v) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "view_%03zu", v);
  return buf;
}

}  // namespace synth_detail

inline void write_scene(const std::string& dir, const SyntheticScene& scene,
                        const SynthConfig& cfg) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  for (int n = 1; n <= 4; ++n)
    fs::create_directories(fs::path(dir) / "features" / ("scale_" + std::to_string(n)));
  fs::create_directories(fs::path(dir) / "labels" / "clean");
  if (!scene.noisy_labels.empty()) fs::create_directories(fs::path(dir) / "labels" / "noisy");

  nlohmann::json meta;
  meta["n_objects"] = cfg.n_objects;
  meta["num_classes"] = scene.num_classes;
  meta["void_index"] = scene.num_classes;
  meta["feature_dim"] = cfg.feature_dim;
  meta["views"] = cfg.views;
  meta["image_size"] = cfg.image_size;
  meta["feature_size"] = cfg.feature_size;
  meta["sigma_f"] = cfg.sigma_f;
  meta["noise_rate"] = cfg.noise_rate;
  meta["seed"] = cfg.seed;
  meta["split"] = scene.split;
  nlohmann::json pal = nlohmann::json::array();
  for (const auto& p : scene.palette) pal.push_back({p[0], p[1], p[2]});
  meta["palette"] = pal;
  std::ofstream((fs::path(dir) / "scene.json").string()) << meta.dump(2) << "\n";

  write_cameras((fs::path(dir) / "cameras.json").string(), scene.cameras);
  write_ply((fs::path(dir) / "gt.ply").string(), scene.gt);
  write_feature_sidecar((fs::path(dir) / "gt.ply").string(), scene.gt);
  write_ply((fs::path(dir) / "init.ply").string(), scene.init_points);

  for (std::size_t v = 0; v < scene.cameras.size(); ++v) {
    const std::string name = synth_detail::view_name(v);
    write_fmap((fs::path(dir) / "images" / (name + ".fmap")).string(), scene.images[v]);
    write_png_rgb8((fs::path(dir) / "images" / (name + ".png")).string(), scene.images[v]);
    for (int n = 0; n < 4; ++n)
      write_fmap((fs::path(dir) / "features" / ("scale_" + std::to_string(n + 1)) /
                  (name + ".fmap"))
                     .string(),
                 scene.stacks[v].scales[n]);
    write_png_indexed8((fs::path(dir) / "labels" / "clean" / (name + ".png")).string(),
                       scene.clean_labels[v], scene.palette);
    if (!scene.noisy_labels.empty())
      write_png_indexed8((fs::path(dir) / "labels" / "noisy" / (name + ".png")).string(),
                         scene.noisy_labels[v], scene.palette);
  }
  if (!scene.noisy_labels.empty())
    std::ofstream((fs::path(dir) / "noise_manifest.json").string())
        << scene.manifest.to_json().dump(2) << "\n";
}

// Loaders for the CLI side.

struct SceneMeta {
  int num_classes = 0;
  int feature_dim = 0;
  int views = 0;
  int image_size = 0;
  int feature_size = 0;
  std::vector<int> split;
  std::vector<std::array<unsigned char, 3>> palette;
};

inline SceneMeta read_scene_meta(const std::string& dir) {
  std::ifstream in((std::filesystem::path(dir) / "scene.json").string());
  require(in.good(), "read_scene_meta: missing scene.json in " + dir);
  const nlohmann::json j = nlohmann::json::parse(in);
  SceneMeta m;
  m.num_classes = j.at("num_classes");
  m.feature_dim = j.at("feature_dim");
  m.views = j.at("views");
  m.image_size = j.at("image_size");
  m.feature_size = j.at("feature_size");
  m.split = j.at("split").get<std::vector<int>>();
  for (const auto& p : j.at("palette"))
    m.palette.push_back({static_cast<unsigned char>(p[0].get<int>()),
                         static_cast<unsigned char>(p[1].get<int>()),
                         static_cast<unsigned char>(p[2].get<int>())});
  return m;
}

inline std::vector<ImageXd> read_view_images(const std::string& dir, int views) {
  std::vector<ImageXd> images;
  for (int v = 0; v < views; ++v)
    images.push_back(read_fmap((std::filesystem::path(dir) / "images" /
                                (synth_detail::view_name(v) + ".fmap"))
                                   .string()));
  return images;
}

inline std::vector<FeatureStack> read_feature_stacks(const std::string& dir, int views) {
  std::vector<FeatureStack> stacks(views);
  for (int v = 0; v < views; ++v)
    for (int n = 0; n < 4; ++n)
      stacks[v].scales[n] =
          read_fmap((std::filesystem::path(dir) / "features" / ("scale_" + std::to_string(n + 1)) /
                     (synth_detail::view_name(v) + ".fmap"))
                        .string());
  return stacks;
}

inline std::vector<LabelMap> read_labels(const std::string& dir, int views,
                                         const std::string& kind) {
  std::vector<LabelMap> labels;
  for (int v = 0; v < views; ++v)
    labels.push_back(read_label_png((std::filesystem::path(dir) / "labels" / kind /
                                     (synth_detail::view_name(v) + ".png"))
                                        .string()));
  return labels;
}

}  // namespace coseg
