#pragma once

#include "coseg/decoder.hpp"
#include "coseg/loss.hpp"
#include "coseg/raster_backward.hpp"
#include "coseg/unproject.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <ostream>

namespace coseg {

// ---------------------------------------------------------------------------
// Adam with bias correction, beta = (0.9, 0.999), eps = 1e-8.
// ---------------------------------------------------------------------------

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline double adam_update(double grad, double& m, double& v, double lr, std::int64_t step,
                          const AdamParams& ap = {}) {
  m = ap.beta1 * m + (1.0 - ap.beta1) * grad;
  v = ap.beta2 * v + (1.0 - ap.beta2) * grad * grad;
  const double m_hat = m / (1.0 - std::pow(ap.beta1, static_cast<double>(step)));
  const double v_hat = v / (1.0 - std::pow(ap.beta2, static_cast<double>(step)));
  return lr * m_hat / (std::sqrt(v_hat) + ap.eps);
}

// Flat first/second moment buffers for one parameter class.
struct AdamBuffer {
  std::vector<double> m, v;
  void init(std::size_t n) {
    m.assign(n, 0.0);
    v.assign(n, 0.0);
  }
};

// ---------------------------------------------------------------------------
// Stage 1: Gaussian building under the photometric loss.
// ---------------------------------------------------------------------------

struct Stage1Config {
  int iterations = 2000;
  double lambda_l1 = 0.8;
  // Learning rates mirror the 3DGS defaults; position is scaled by scene
  // extent and decays exponentially to 1% of its start.
  double lr_position = 1.6e-4;
  bool lr_position_by_extent = true;
  bool lr_position_decay = true;
  double lr_rotation = 1e-3;
  double lr_scale = 5e-3;
  double lr_opacity = 5e-2;
  double lr_color = 2.5e-3;

  bool densify = false;
  int densify_start = 500;
  int densify_end = 1500;
  int densify_interval = 100;
  double densify_grad_threshold = 2e-4;
  double densify_percent_dense = 0.01;
  double prune_opacity = 0.005;

  RenderConfig render;
  int log_every = 50;
};

namespace train_detail {

inline double scene_extent(const GaussianSet& set) {
  Vec3 lo = Vec3::Constant(1e300), hi = Vec3::Constant(-1e300);
  for (const auto& p : set.position) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  return set.size() == 0 ? 1.0 : std::max(1e-6, (hi - lo).norm() * 0.5);
}

inline void log_line(std::ostream* log, const nlohmann::json& j) {
  if (log) (*log) << j.dump() << "\n";
}

struct Stage1Optimizer {
  AdamBuffer position, rotation, scale, opacity, color;
  std::int64_t step = 0;

  void init(const GaussianSet& set) {
    position.init(set.size() * 3);
    rotation.init(set.size() * 4);
    scale.init(set.size() * 3);
    opacity.init(set.size());
    color.init(set.size() * (set.sh_degree == 1 ? 12 : 3));
  }
};

// Clone small high-gradient Gaussians, split oversized ones, prune low-alpha
// ones. Moments are re-initialized afterwards.
inline void densify_and_prune(GaussianSet& set, std::vector<double>& grad_accum,
                              std::vector<int>& grad_count, Stage1Optimizer& opt,
                              const Stage1Config& cfg, double extent, Rng& rng) {
  const std::size_t n = set.size();
  std::vector<bool> keep(n, true);
  GaussianSet additions;
  additions.sh_degree = set.sh_degree;
  if (set.sh_degree == 1) additions.sh.resize(0, 12);

  std::vector<std::size_t> clone_idx, split_idx;
  for (std::size_t i = 0; i < n; ++i) {
    if (set.alpha(i) < cfg.prune_opacity) {
      keep[i] = false;
      continue;
    }
    const double avg_grad = grad_count[i] > 0 ? grad_accum[i] / grad_count[i] : 0.0;
    if (avg_grad <= cfg.densify_grad_threshold) continue;
    const double max_scale = set.log_scale[i].array().exp().maxCoeff();
    if (max_scale <= cfg.densify_percent_dense * extent)
      clone_idx.push_back(i);
    else
      split_idx.push_back(i);
  }

  auto append_from = [&](std::size_t i) {
    const std::size_t j = additions.size();
    additions.resize(j + 1);
    additions.position[j] = set.position[i];
    additions.rotation[j] = set.rotation[i];
    additions.log_scale[j] = set.log_scale[i];
    additions.opacity_raw[j] = set.opacity_raw[i];
    additions.color[j] = set.color[i];
    if (set.sh_degree == 1) {
      additions.sh.conservativeResize(j + 1, 12);
      additions.sh.row(j) = set.sh.row(i);
    }
    return j;
  };

  for (const std::size_t i : clone_idx) append_from(i);
  for (const std::size_t i : split_idx) {
    // two samples drawn from the Gaussian, scales shrunk by 1.6
    const Mat3 R = quat_to_rotation(set.rotation[i]);
    const Vec3 s = set.log_scale[i].array().exp();
    for (int half = 0; half < 2; ++half) {
      const std::size_t j = append_from(i);
      const Vec3 sample(rng.normal() * s[0], rng.normal() * s[1], rng.normal() * s[2]);
      additions.position[j] = set.position[i] + R * sample;
      additions.log_scale[j] = (s / 1.6).array().log();
    }
    keep[i] = false;
  }

  set.filter(keep);
  const std::size_t base = set.size();
  set.resize(base + additions.size());
  if (set.sh_degree == 1) set.sh.conservativeResize(base + additions.size(), 12);
  for (std::size_t j = 0; j < additions.size(); ++j) {
    set.position[base + j] = additions.position[j];
    set.rotation[base + j] = additions.rotation[j];
    set.log_scale[base + j] = additions.log_scale[j];
    set.opacity_raw[base + j] = additions.opacity_raw[j];
    set.color[base + j] = additions.color[j];
    if (set.sh_degree == 1) set.sh.row(base + j) = additions.sh.row(j);
  }

  opt.init(set);  // moment buffers restart after topology changes
  grad_accum.assign(set.size(), 0.0);
  grad_count.assign(set.size(), 0);
}

}  // namespace train_detail

// Optimizes geometry and appearance against posed images. Deterministic in
// (seed, config, inputs); aborts if the loss turns non-finite.
inline GaussianSet stage1_build(const std::vector<ImageXd>& images, const std::vector<Camera>& cams,
                                const GaussianSet& init, const Stage1Config& cfg,
                                std::uint64_t seed, std::ostream* log = nullptr) {
  require(images.size() == cams.size(), "stage1_build: image/camera count mismatch");
  require(cams.size() >= 2, "stage1_build: at least 2 views required");
  GaussianSet set = init;
  set.renormalize_rotations();

  const double extent = train_detail::scene_extent(set);
  const double lr_pos0 = cfg.lr_position * (cfg.lr_position_by_extent ? extent : 1.0);

  train_detail::Stage1Optimizer opt;
  opt.init(set);
  std::vector<double> grad_accum(set.size(), 0.0);
  std::vector<int> grad_count(set.size(), 0);

  Rng order_rng(derive_seed(seed, /*tag=*/0x7331u));
  Rng densify_rng(derive_seed(seed, /*tag=*/0x6466u));
  std::vector<std::size_t> epoch(cams.size());
  for (std::size_t i = 0; i < epoch.size(); ++i) epoch[i] = i;
  std::size_t epoch_pos = epoch.size();

  const auto t0 = std::chrono::steady_clock::now();
  for (int iter = 1; iter <= cfg.iterations; ++iter) {
    if (epoch_pos >= epoch.size()) {
      order_rng.shuffle(epoch);
      epoch_pos = 0;
    }
    const std::size_t view = epoch[epoch_pos++];

    const auto out = render(cams[view], set, PayloadSpec::color(), cfg.render, /*record=*/true);
    const auto photo = photometric_loss(out.image, images[view], cfg.lambda_l1);
    require(std::isfinite(photo.loss), "stage1_build: loss diverged at iteration " +
                                           std::to_string(iter));
    const auto grads =
        render_backward(cams[view], set, PayloadSpec::color(), cfg.render, out, photo.grad);

    const double lr_pos =
        cfg.lr_position_decay
            ? lr_pos0 * std::pow(0.01, static_cast<double>(iter) / cfg.iterations)
            : lr_pos0;

    opt.step += 1;
    for (std::size_t i = 0; i < set.size(); ++i) {
      for (int d = 0; d < 3; ++d) {
        set.position[i][d] -= adam_update(grads.dposition[i][d], opt.position.m[i * 3 + d],
                                          opt.position.v[i * 3 + d], lr_pos, opt.step);
        set.log_scale[i][d] -= adam_update(grads.dlog_scale[i][d], opt.scale.m[i * 3 + d],
                                           opt.scale.v[i * 3 + d], cfg.lr_scale, opt.step);
      }
      for (int d = 0; d < 4; ++d)
        set.rotation[i][d] -= adam_update(grads.drotation[i][d], opt.rotation.m[i * 4 + d],
                                          opt.rotation.v[i * 4 + d], cfg.lr_rotation, opt.step);
      set.opacity_raw[i] -= adam_update(grads.dopacity_raw[i], opt.opacity.m[i], opt.opacity.v[i],
                                        cfg.lr_opacity, opt.step);
      if (set.sh_degree == 1) {
        for (int d = 0; d < 12; ++d)
          set.sh(i, d) -= adam_update(grads.dsh(i, d), opt.color.m[i * 12 + d],
                                      opt.color.v[i * 12 + d], cfg.lr_color, opt.step);
      } else {
        for (int d = 0; d < 3; ++d)
          set.color[i][d] -= adam_update(grads.dpayload(i, d), opt.color.m[i * 3 + d],
                                         opt.color.v[i * 3 + d], cfg.lr_color, opt.step);
      }
    }
    set.renormalize_rotations();

    if (cfg.densify) {
      for (std::size_t i = 0; i < set.size(); ++i) {
        // mean 2D position-gradient norm drives clone/split decisions
        const Vec2 g2(grads.dposition[i].x(), grads.dposition[i].y());
        grad_accum[i] += grads.dposition[i].norm();
        grad_count[i] += 1;
        (void)g2;
      }
      if (iter >= cfg.densify_start && iter <= cfg.densify_end &&
          iter % cfg.densify_interval == 0) {
        train_detail::densify_and_prune(set, grad_accum, grad_count, opt, cfg, extent,
                                        densify_rng);
      }
    }

    if (log && (iter % cfg.log_every == 0 || iter == cfg.iterations)) {
      const double ms = std::chrono::duration<double, std::milli>(
                            std::chrono::steady_clock::now() - t0)
                            .count();
      train_detail::log_line(log, {{"stage", 1},
                                   {"iter", iter},
                                   {"loss", photo.loss},
                                   {"l1", photo.l1},
                                   {"dssim", photo.dssim},
                                   {"gaussians", set.size()},
                                   {"ms", ms}});
    }
  }
  return set;
}

// ---------------------------------------------------------------------------
// Label-noise injection: per view, a seeded random subset of object classes
// is re-mapped to a different class, independently per view.
// ---------------------------------------------------------------------------

struct NoiseManifest {
  double rate = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::map<int, int>> remaps;  // per view: original class -> new class

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["rate"] = rate;
    j["seed"] = seed;
    j["views"] = nlohmann::json::array();
    for (std::size_t v = 0; v < remaps.size(); ++v) {
      nlohmann::json entry;
      entry["view"] = v;
      nlohmann::json m = nlohmann::json::object();
      for (const auto& [from, to] : remaps[v]) m[std::to_string(from)] = to;
      entry["remap"] = m;
      j["views"].push_back(entry);
    }
    return j;
  }
};

inline std::vector<LabelMap> inject_label_noise(const std::vector<LabelMap>& labels,
                                                int num_real_classes, double rate,
                                                std::uint64_t seed,
                                                NoiseManifest* manifest = nullptr) {
  require(rate >= 0.0 && rate < 1.0, "inject_label_noise: rate must be in [0, 1)");
  std::vector<LabelMap> out = labels;
  if (manifest) {
    manifest->rate = rate;
    manifest->seed = seed;
    manifest->remaps.assign(labels.size(), {});
  }
  if (rate == 0.0 || num_real_classes < 2) return out;
  for (std::size_t v = 0; v < out.size(); ++v) {
    Rng rng(derive_seed(seed, /*tag=*/0x6e6fu, v));
    std::map<int, int> remap;
    for (int c = 0; c < num_real_classes; ++c) {
      if (rng.uniform() >= rate) continue;
      int target = static_cast<int>(rng.index(num_real_classes - 1));
      if (target >= c) ++target;  // uniform over classes != c
      remap[c] = target;
    }
    if (remap.empty()) continue;
    for (auto& l : out[v].data) {
      auto it = remap.find(l);
      if (it != remap.end()) l = it->second;
    }
    if (manifest) manifest->remaps[v] = remap;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stage 2: segmentation learning. Geometry stays frozen; only the decoder
// receives gradients.
// ---------------------------------------------------------------------------

struct Stage2Config {
  int iterations = 6000;
  double lr = 1e-3;
  int num_classes = 0;  // real object classes; labels additionally use index C for void
  CoSegConfig coseg;
  bool use_cross_entropy = false;  // ablation baseline instead of the CoSeg loss
  int hierarchy_k = 16;
  std::array<int, 4> decoder_hidden = {32, 64, 128, 256};
  RenderConfig render;
  UnprojectConfig unproject;
  int log_every = 50;
};

struct Stage2Result {
  DecoderState decoder;
  GaussianSet baked;
  int skipped_views = 0;
};

namespace train_detail {

struct ViewForward {
  GaussianSet subset;
  std::vector<std::size_t> visible;
  SampleHierarchy hierarchy;
  SpatialFeatures spatial;
  DecoderInputs inputs;
  DecoderCache cache;
  RowMat logits;
};

// Shared by the training loop and the final bake: subset -> hierarchy ->
// spatial encoding -> gathered unprojected features -> decoder logits.
inline bool run_decoder_on_subset(const GaussianSet& set, const std::vector<std::size_t>& visible,
                                  const EncoderWeights& enc, const DecoderState& decoder,
                                  std::uint64_t hierarchy_seed, int hierarchy_k, ViewForward& vf) {
  if (visible.size() < kMinHierarchyPoints) return false;
  vf.visible = visible;
  vf.subset = set;
  vf.subset.gather_in_place(visible);
  vf.hierarchy = build_hierarchy(vf.subset.position, hierarchy_seed, hierarchy_k);
  vf.spatial = encode(vf.subset.position, vf.hierarchy, enc);
  for (int level = 1; level <= 4; ++level) {
    vf.inputs.f_d[level - 1] =
        gather_rows(vf.subset.features[level - 1], vf.hierarchy.level_points[level - 1]);
    vf.inputs.f_s[level - 1] = vf.spatial.f_s[level - 1];
  }
  vf.inputs.f_e = vf.spatial.f_e;
  vf.inputs.hierarchy = &vf.hierarchy;
  vf.logits = decode_forward(vf.inputs, decoder, &vf.cache);
  return true;
}

}  // namespace train_detail

inline Stage2Result stage2_segment(const GaussianSet& checkpoint,
                                   const std::vector<Camera>& cams,
                                   const std::vector<FeatureStack>& stacks,
                                   const std::vector<LabelMap>& raw_labels,
                                   const EncoderWeights& encoder, const Stage2Config& cfg,
                                   std::uint64_t seed, std::ostream* log = nullptr) {
  require(cams.size() == raw_labels.size(), "stage2_segment: camera/label count mismatch");
  require(cfg.num_classes >= 2, "stage2_segment: num_classes must be at least 2");

  GaussianSet set = checkpoint;
  bool have_features = true;
  for (const int scale : cfg.unproject.scales)
    if (set.features[scale - 1].size() == 0) have_features = false;
  if (!have_features) {
    require(!stacks.empty(), "stage2_segment: no unprojected features and no feature stacks");
    unproject_all_scales(set, cams, stacks, cfg.unproject);
  }
  const int feature_dim = static_cast<int>(set.features[cfg.unproject.scales.front() - 1].cols());

  DecoderConfig dc;
  dc.feature_dim = feature_dim;
  dc.num_classes = cfg.num_classes;
  dc.hidden = cfg.decoder_hidden;
  DecoderState decoder = DecoderState::init(dc, derive_seed(seed, /*tag=*/0x6463u));

  Rng order_rng(derive_seed(seed, /*tag=*/0x7332u));
  std::vector<std::size_t> epoch(cams.size());
  for (std::size_t i = 0; i < epoch.size(); ++i) epoch[i] = i;
  std::size_t epoch_pos = epoch.size();

  Stage2Result result;
  const auto t0 = std::chrono::steady_clock::now();
  for (int iter = 1; iter <= cfg.iterations; ++iter) {
    if (epoch_pos >= epoch.size()) {
      order_rng.shuffle(epoch);
      epoch_pos = 0;
    }
    const std::size_t view = epoch[epoch_pos++];
    const Camera& cam = cams[view];
    require(raw_labels[view].height == cam.height && raw_labels[view].width == cam.width,
            "stage2_segment: label resolution differs from the camera");

    train_detail::ViewForward vf;
    const auto visible = visible_subset(set, cam, cfg.render);
    if (!train_detail::run_decoder_on_subset(set, visible, encoder, decoder,
                                             derive_seed(seed, /*tag=*/0x6869u, iter),
                                             cfg.hierarchy_k, vf)) {
      result.skipped_views += 1;
      train_detail::log_line(log, {{"stage", 2},
                                   {"iter", iter},
                                   {"skipped_view", view},
                                   {"visible", visible.size()}});
      continue;
    }

    vf.subset.seg_logits = vf.logits;
    const auto rendered =
        render(cam, vf.subset, PayloadSpec::segmentation(), cfg.render, /*record=*/true);
    const ImageXd s = softmax_image(rendered.image);

    double loss_total = 0.0, loss_pix = 0.0, loss_reg = 0.0;
    ImageXd dS;
    std::array<RowMat, 4> dfused{};
    if (cfg.use_cross_entropy) {
      auto ce = pixel_ce_loss(s, raw_labels[view]);
      loss_total = loss_pix = ce.loss;
      dS = std::move(ce.grad);
    } else {
      auto cs = coseg_loss(s, raw_labels[view], vf.hierarchy, vf.cache.fused, cfg.coseg,
                           derive_seed(seed, /*tag=*/0x7267u, iter));
      loss_total = cs.total;
      loss_pix = cs.pix;
      loss_reg = cs.reg;
      dS = std::move(cs.dS);
      dfused = std::move(cs.dfused);
    }
    require(std::isfinite(loss_total),
            "stage2_segment: loss diverged at iteration " + std::to_string(iter));

    const ImageXd dlogits_img = softmax_backward_image(s, dS);
    const auto rgrads = render_backward(cam, vf.subset, PayloadSpec::segmentation(), cfg.render,
                                        rendered, dlogits_img, /*want_geometry=*/false);
    // blended-logit gradient, void column dropped (it carries no decoder path)
    const RowMat dlogits = rgrads.dpayload.leftCols(cfg.num_classes);

    const auto dgrads = decode_backward(vf.inputs, decoder, vf.cache, dlogits, dfused);

    decoder.adam_step += 1;
    auto apply = [&](DecoderState::Tensor& t, const RowMat& g) {
      for (Eigen::Index i = 0; i < t.value.size(); ++i)
        t.value.data()[i] -= adam_update(g.data()[i], t.adam_m.data()[i], t.adam_v.data()[i],
                                         cfg.lr, decoder.adam_step);
    };
    for (int n = 0; n < 4; ++n) {
      apply(decoder.mlp[n].w, dgrads.mlp_w[n]);
      apply(decoder.mlp[n].b, dgrads.mlp_b[n]);
    }
    apply(decoder.fc.w, dgrads.fc_w);
    apply(decoder.fc.b, dgrads.fc_b);

    if (log && (iter % cfg.log_every == 0 || iter == cfg.iterations)) {
      const double ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      train_detail::log_line(log, {{"stage", 2},
                                   {"iter", iter},
                                   {"loss", loss_total},
                                   {"pix", loss_pix},
                                   {"reg", loss_reg},
                                   {"ms", ms}});
    }
  }

  // Bake identities for the whole scene with a canonical hierarchy.
  train_detail::ViewForward bake;
  std::vector<std::size_t> all(set.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  require(train_detail::run_decoder_on_subset(set, all, encoder, decoder,
                                              derive_seed(seed, /*tag=*/0x626bu),
                                              cfg.hierarchy_k, bake),
          "stage2_segment: scene too small to bake");
  bake_identities(set, bake.logits);
  result.decoder = std::move(decoder);
  result.baked = std::move(set);
  return result;
}

}  // namespace coseg
