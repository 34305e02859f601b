#pragma once

#include "coseg/raster.hpp"

namespace coseg {

// Accumulator for unprojection-based feature field reconstruction: a pixel-hit
// counter and an alpha'T-weighted feature buffer per Gaussian. Buffer sums are
// Kahan-compensated so view order only perturbs results far below 1e-10.
struct UnprojectAccumulator {
  std::vector<std::int64_t> counter;
  RowMat buffer;
  RowMat comp;  // compensation terms, same shape as buffer
  double eps = 1e-8;
  int views = 0;
  std::int64_t pixels_per_view = -1;

  void init(std::size_t n, int feature_dim, double stabilizer = 1e-8) {
    counter.assign(n, 0);
    buffer.setZero(n, feature_dim);
    comp.setZero(n, feature_dim);
    eps = stabilizer;
    views = 0;
    pixels_per_view = -1;
  }

  void add(std::size_t i, int d, double x) {
    const double y = x - comp(i, d);
    const double t = buffer(i, d) + y;
    comp(i, d) = (t - buffer(i, d)) - y;
    buffer(i, d) = t;
  }
};

// One view of Algorithm 1's inner loops: for every feature-map pixel covered
// by a splat's radius box, bump its counter and add alpha' * T * F(p). The
// alpha'/T evaluation is the renderer's own contributor pass (full walk).
inline void accumulate_view(const GaussianSet& set, const Camera& feature_cam, const ImageXd& fmap,
                            UnprojectAccumulator& acc, const RenderConfig& render_cfg = {}) {
  require(static_cast<std::size_t>(acc.buffer.rows()) == set.size(),
          "accumulate_view: accumulator size disagrees with Gaussian count");
  require(acc.buffer.cols() == fmap.channels,
          "accumulate_view: feature dimension mismatch (accumulator " +
              std::to_string(acc.buffer.cols()) + ", map " + std::to_string(fmap.channels) + ")");
  require(fmap.height == feature_cam.height && fmap.width == feature_cam.width,
          "accumulate_view: camera not scaled to the feature-map resolution");
  const std::int64_t pixels = static_cast<std::int64_t>(fmap.height) * fmap.width;
  require(acc.pixels_per_view < 0 || acc.pixels_per_view == pixels,
          "accumulate_view: feature-map resolution changed between views");
  acc.pixels_per_view = pixels;

  const RenderOutput pass = render_contributors(feature_cam, set, render_cfg);
  for (int y = 0; y < fmap.height; ++y) {
    for (int x = 0; x < fmap.width; ++x) {
      const std::size_t pix = static_cast<std::size_t>(y) * fmap.width + x;
      for (const Contributor& c : pass.contributors[pix]) {
        acc.counter[c.gaussian_index] += 1;
        const double w = c.alpha * c.transmittance;
        for (int d = 0; d < fmap.channels; ++d)
          acc.add(static_cast<std::size_t>(c.gaussian_index), d, w * fmap.at(y, x, d));
      }
    }
  }
  acc.views += 1;
}

// f_i = buffer_i / (counter_i + eps), then L2-normalized (zero rows stay zero).
inline RowMat finalize_features(const UnprojectAccumulator& acc) {
  RowMat f(acc.buffer.rows(), acc.buffer.cols());
  for (int i = 0; i < f.rows(); ++i) {
    f.row(i) = acc.buffer.row(i) / (static_cast<double>(acc.counter[i]) + acc.eps);
    const double norm = f.row(i).norm();
    if (norm > 0.0) f.row(i) /= norm;
  }
  return f;
}

// Keep mask for "Counter[i] < T * V * H * W" pruning.
inline std::vector<bool> attendance_keep_mask(const UnprojectAccumulator& acc, double threshold,
                                              int views, int height, int width) {
  const double bound = threshold * static_cast<double>(views) * height * width;
  std::vector<bool> keep(acc.counter.size());
  for (std::size_t i = 0; i < keep.size(); ++i)
    keep[i] = static_cast<double>(acc.counter[i]) >= bound;
  return keep;
}

// Single-scale finalize: attach features at `scale` and prune by attendance.
inline GaussianSet finalize(const UnprojectAccumulator& acc, const GaussianSet& set, int views,
                            int height, int width, int scale = 1, double threshold = 1e-7) {
  require(scale >= 1 && scale <= 4, "finalize: scale must be in 1..4");
  GaussianSet out = set;
  out.features[scale - 1] = finalize_features(acc);
  out.filter(attendance_keep_mask(acc, threshold, views, height, width));
  return out;
}

// A posed multi-scale feature stack for one view; scale n lives at [n-1] and
// may use its own resolution (intrinsics are rescaled per scale).
struct FeatureStack {
  std::array<ImageXd, 4> scales;
};

struct UnprojectConfig {
  double attendance_threshold = 1e-7;
  double eps = 1e-8;
  std::vector<int> scales = {1, 2, 3, 4};
  RenderConfig render;
};

// Runs Algorithm 1 once per scale. The prune decision comes from the finest
// requested scale's counters alone and is applied to every parallel array, so
// a single consistent point set feeds the decoder.
inline void unproject_all_scales(GaussianSet& set, const std::vector<Camera>& cams,
                                 const std::vector<FeatureStack>& stacks,
                                 const UnprojectConfig& cfg = {}) {
  require(cams.size() == stacks.size(),
          "unproject_all_scales: camera count (" + std::to_string(cams.size()) +
              ") != feature stack count (" + std::to_string(stacks.size()) + ")");
  require(!cams.empty(), "unproject_all_scales: no views");
  require(!cfg.scales.empty(), "unproject_all_scales: no scales requested");

  std::vector<bool> keep;
  for (std::size_t si = 0; si < cfg.scales.size(); ++si) {
    const int scale = cfg.scales[si];
    require(scale >= 1 && scale <= 4, "unproject_all_scales: scale must be in 1..4");
    const ImageXd& first = stacks[0].scales[scale - 1];
    require(first.channels > 0, "unproject_all_scales: scale " + std::to_string(scale) +
                                    " missing from the first view's stack");
    UnprojectAccumulator acc;
    acc.init(set.size(), first.channels, cfg.eps);
    for (std::size_t v = 0; v < cams.size(); ++v) {
      const ImageXd& fmap = stacks[v].scales[scale - 1];
      require(fmap.channels == first.channels,
              "unproject_all_scales: feature dimension differs across views");
      accumulate_view(set, cams[v].scaled_to(fmap.width, fmap.height), fmap, acc, cfg.render);
    }
    set.features[scale - 1] = finalize_features(acc);
    if (si == 0)
      keep = attendance_keep_mask(acc, cfg.attendance_threshold, acc.views, first.height,
                                  first.width);
  }
  set.filter(keep);
}

}  // namespace coseg
