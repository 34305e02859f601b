#pragma once

#include "coseg/raster.hpp"

#include <fstream>

namespace coseg {

// Uniform-grid accelerator for exact k-nearest-neighbor queries. Candidates
// are ranked by (squared distance, index), so results are deterministic.
class PointGrid {
public:
  explicit PointGrid(const std::vector<Vec3>& points) : points_(points) {
    lo_ = Vec3::Constant(1e300);
    hi_ = Vec3::Constant(-1e300);
    for (const auto& p : points_) {
      lo_ = lo_.cwiseMin(p);
      hi_ = hi_.cwiseMax(p);
    }
    if (points_.empty()) {
      lo_ = hi_ = Vec3::Zero();
    }
    // Cell size bounds every grid dimension by ~cbrt(n), which keeps ring
    // scans cheap even for flat or collinear clouds.
    const Vec3 span = (hi_ - lo_).cwiseMax(1e-12);
    const double per_axis =
        std::ceil(std::cbrt(static_cast<double>(std::max<std::size_t>(1, points_.size()))));
    cell_ = std::max(1e-9, span.maxCoeff() / per_axis);
    for (int d = 0; d < 3; ++d)
      dims_[d] = std::max(1, static_cast<int>(std::floor(span[d] / cell_)) + 1);
    cells_.assign(static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2], {});
    for (std::size_t i = 0; i < points_.size(); ++i)
      cells_[cell_index(coords(points_[i]))].push_back(static_cast<int>(i));
  }

  // k nearest points to q, ascending by distance; `exclude` drops that index.
  std::vector<int> nearest(const Vec3& q, int k, int exclude = -1) const {
    std::vector<std::pair<double, int>> found;
    const std::array<int, 3> c = coords(q);
    const int max_ring = std::max({dims_[0], dims_[1], dims_[2]});
    for (int ring = 0; ring <= max_ring; ++ring) {
      if (ring > 0 && found.size() >= static_cast<std::size_t>(k)) {
        // rings >= r hold nothing closer than (r-1)*cell
        std::nth_element(found.begin(), found.begin() + (k - 1), found.end());
        const double bound = static_cast<double>(ring - 1) * cell_;
        if (found[k - 1].first < bound * bound) break;
      }
      if (!visit_ring(c, ring, q, exclude, found)) break;
    }
    const std::size_t keep = std::min<std::size_t>(k, found.size());
    std::partial_sort(found.begin(), found.begin() + keep, found.end());
    std::vector<int> out(keep);
    for (std::size_t i = 0; i < keep; ++i) out[i] = found[i].second;
    return out;
  }

  const std::vector<Vec3>& points() const { return points_; }

private:
  std::array<int, 3> coords(const Vec3& p) const {
    std::array<int, 3> c;
    for (int d = 0; d < 3; ++d)
      c[d] = std::clamp(static_cast<int>(std::floor((p[d] - lo_[d]) / cell_)), 0, dims_[d] - 1);
    return c;
  }

  std::size_t cell_index(const std::array<int, 3>& c) const {
    return (static_cast<std::size_t>(c[2]) * dims_[1] + c[1]) * dims_[0] + c[0];
  }

  // Scans cells at Chebyshev distance `ring`; false once the ring leaves the grid.
  bool visit_ring(const std::array<int, 3>& c, int ring, const Vec3& q, int exclude,
                  std::vector<std::pair<double, int>>& found) const {
    bool any_cell = false;
    for (int dz = -ring; dz <= ring; ++dz) {
      const int z = c[2] + dz;
      if (z < 0 || z >= dims_[2]) continue;
      for (int dy = -ring; dy <= ring; ++dy) {
        const int y = c[1] + dy;
        if (y < 0 || y >= dims_[1]) continue;
        const bool face = std::abs(dz) == ring || std::abs(dy) == ring;
        const int step = face ? 1 : std::max(1, 2 * ring);
        for (int dx = -ring; dx <= ring; dx += step) {
          const int x = c[0] + dx;
          if (x < 0 || x >= dims_[0]) continue;
          any_cell = true;
          for (const int idx : cells_[cell_index({x, y, z})]) {
            if (idx == exclude) continue;
            const double d2 = (points_[idx] - q).squaredNorm();
            found.emplace_back(d2, idx);
          }
        }
      }
    }
    return any_cell || ring == 0;
  }

  std::vector<Vec3> points_;
  Vec3 lo_, hi_;
  double cell_ = 1.0;
  std::array<int, 3> dims_ = {1, 1, 1};
  std::vector<std::vector<int>> cells_;
};

// Neighbor lists (self excluded) for every point of a cloud.
inline std::vector<std::vector<int>> knn_lists(const std::vector<Vec3>& points, int k) {
  const PointGrid grid(points);
  std::vector<std::vector<int>> lists(points.size());
  parallel_for(points.size(), [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i)
      lists[i] = grid.nearest(points[i], k, static_cast<int>(i));
  });
  return lists;
}

inline constexpr int kHierarchyLevels = 4;
inline constexpr int kMinHierarchyPoints = 64;

// Random-decimation hierarchy: level 1 holds every point, each deeper level
// keeps a seeded random quarter of the previous one, with k-NN lists per level.
struct SampleHierarchy {
  int k = 16;
  std::uint64_t seed = 0;
  // All arrays indexed by level-1 (0..3).
  std::array<std::vector<std::size_t>, 4> level_points;       // absolute indices into the cloud
  std::array<std::vector<std::size_t>, 4> parent_selection;   // index array into level n-1
  std::array<std::vector<Vec3>, 4> positions;                 // per-level coordinates
  std::array<std::vector<std::vector<int>>, 4> neighbors;     // within-level

  std::size_t level_size(int level) const { return level_points[level - 1].size(); }
};

inline SampleHierarchy build_hierarchy(const std::vector<Vec3>& positions, std::uint64_t seed,
                                       int k = 16, int decimation = 4) {
  require(positions.size() >= kMinHierarchyPoints,
          "build_hierarchy: at least " + std::to_string(kMinHierarchyPoints) +
              " points required, got " + std::to_string(positions.size()));
  SampleHierarchy h;
  h.k = k;
  h.seed = seed;

  h.level_points[0].resize(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) h.level_points[0][i] = i;
  h.parent_selection[0] = h.level_points[0];  // identity
  h.positions[0] = positions;

  Rng rng(derive_seed(seed, /*tag=*/0x5348u));
  for (int level = 1; level < kHierarchyLevels; ++level) {
    const std::size_t prev = h.level_points[level - 1].size();
    const std::size_t target = prev / static_cast<std::size_t>(decimation);
    auto sel = rng.sample_without_replacement(prev, target);
    std::sort(sel.begin(), sel.end());
    h.parent_selection[level] = sel;
    h.level_points[level].resize(sel.size());
    h.positions[level].resize(sel.size());
    for (std::size_t i = 0; i < sel.size(); ++i) {
      h.level_points[level][i] = h.level_points[level - 1][sel[i]];
      h.positions[level][i] = h.positions[level - 1][sel[i]];
    }
  }
  for (int level = 0; level < kHierarchyLevels; ++level)
    h.neighbors[level] = knn_lists(h.positions[level], k);
  return h;
}

// ---------------------------------------------------------------------------
// Frozen local-feature-aggregation encoder. Each level applies one LFA block
// (local spatial encoding + attentive pooling) and hands a random quarter of
// its output to the next level.
// ---------------------------------------------------------------------------

inline constexpr std::array<int, 4> kEncoderWidths = {16, 64, 128, 256};
inline constexpr int kBottleneckWidth = 256;
inline constexpr double kLeakySlope = 0.01;

inline double leaky_relu(double x) { return x > 0.0 ? x : kLeakySlope * x; }
inline double leaky_relu_grad(double x) { return x > 0.0 ? 1.0 : kLeakySlope; }

struct EncoderLayer {
  RowMat w_lse;  // d x 10, local spatial encoding of [p_i; p_k; p_i-p_k; |p_i-p_k|]
  VecXd b_lse;
  RowMat w_mix;  // d x (d + c_in), fuses the encoding with neighbor features
  VecXd b_mix;
  RowMat w_att;  // d x d, attentive-pooling scores (softmax over neighbors)
  VecXd b_att;
};

struct EncoderWeights {
  std::array<EncoderLayer, 4> layers;
  RowMat w_e;  // bottleneck on the coarsest level's output
  VecXd b_e;

  static EncoderWeights seeded_random(std::uint64_t seed,
                                      const std::array<int, 4>& widths = kEncoderWidths,
                                      int bottleneck = kBottleneckWidth) {
    EncoderWeights w;
    Rng rng(derive_seed(seed, /*tag=*/0x454eu));
    auto init = [&rng](RowMat& m, int rows, int cols) {
      m.resize(rows, cols);
      const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = rng.normal() * scale;
    };
    int c_in = 0;
    for (int n = 0; n < 4; ++n) {
      const int d = widths[n];
      init(w.layers[n].w_lse, d, 10);
      w.layers[n].b_lse = VecXd::Zero(d);
      init(w.layers[n].w_mix, d, d + c_in);
      w.layers[n].b_mix = VecXd::Zero(d);
      init(w.layers[n].w_att, d, d);
      w.layers[n].b_att = VecXd::Zero(d);
      c_in = d;
    }
    init(w.w_e, bottleneck, widths[3]);
    w.b_e = VecXd::Zero(bottleneck);
    return w;
  }

  int width(int level) const { return static_cast<int>(layers[level - 1].w_lse.rows()); }
  int bottleneck_width() const { return static_cast<int>(w_e.rows()); }
};

namespace spatial_detail {

inline void write_mat(std::ofstream& out, const RowMat& m) {
  std::vector<float> buf(static_cast<std::size_t>(m.rows()) * m.cols());
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) buf[static_cast<std::size_t>(r) * m.cols() + c] =
        static_cast<float>(m(r, c));
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
}

inline void read_mat(std::ifstream& in, RowMat& m, int rows, int cols) {
  m.resize(rows, cols);
  std::vector<float> buf(static_cast<std::size_t>(rows) * cols);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
  require(in.good(), "encoder weights: truncated matrix");
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = buf[static_cast<std::size_t>(r) * cols + c];
}

inline void write_vec(std::ofstream& out, const VecXd& v) {
  RowMat m(1, v.size());
  m.row(0) = v.transpose();
  write_mat(out, m);
}

inline void read_vec(std::ifstream& in, VecXd& v, int size) {
  RowMat m;
  read_mat(in, m, 1, size);
  v = m.row(0).transpose();
}

}  // namespace spatial_detail

// "RLAW" weights file: magic, u32 layer count, per-layer u32 {d, c_in},
// u32 bottleneck width, then row-major float32 matrices in declaration order.
inline void save_encoder_weights(const std::string& path, const EncoderWeights& w) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "save_encoder_weights: cannot open " + path);
  out.write("RLAW", 4);
  const std::uint32_t n_layers = 4;
  out.write(reinterpret_cast<const char*>(&n_layers), 4);
  for (int n = 0; n < 4; ++n) {
    const std::uint32_t d = static_cast<std::uint32_t>(w.layers[n].w_lse.rows());
    const std::uint32_t c_in = static_cast<std::uint32_t>(w.layers[n].w_mix.cols()) - d;
    out.write(reinterpret_cast<const char*>(&d), 4);
    out.write(reinterpret_cast<const char*>(&c_in), 4);
  }
  const std::uint32_t bottleneck = static_cast<std::uint32_t>(w.w_e.rows());
  out.write(reinterpret_cast<const char*>(&bottleneck), 4);
  for (int n = 0; n < 4; ++n) {
    spatial_detail::write_mat(out, w.layers[n].w_lse);
    spatial_detail::write_vec(out, w.layers[n].b_lse);
    spatial_detail::write_mat(out, w.layers[n].w_mix);
    spatial_detail::write_vec(out, w.layers[n].b_mix);
    spatial_detail::write_mat(out, w.layers[n].w_att);
    spatial_detail::write_vec(out, w.layers[n].b_att);
  }
  spatial_detail::write_mat(out, w.w_e);
  spatial_detail::write_vec(out, w.b_e);
  require(out.good(), "save_encoder_weights: write failed");
}

inline EncoderWeights load_encoder_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "load_encoder_weights: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  require(in.good() && std::string(magic, 4) == "RLAW", "load_encoder_weights: bad magic");
  std::uint32_t n_layers = 0;
  in.read(reinterpret_cast<char*>(&n_layers), 4);
  require(n_layers == 4, "load_encoder_weights: expected 4 layers");
  std::array<std::pair<int, int>, 4> dims;
  for (auto& [d, c_in] : dims) {
    std::uint32_t du = 0, cu = 0;
    in.read(reinterpret_cast<char*>(&du), 4);
    in.read(reinterpret_cast<char*>(&cu), 4);
    d = static_cast<int>(du);
    c_in = static_cast<int>(cu);
  }
  std::uint32_t bottleneck = 0;
  in.read(reinterpret_cast<char*>(&bottleneck), 4);
  EncoderWeights w;
  for (int n = 0; n < 4; ++n) {
    const auto [d, c_in] = dims[n];
    spatial_detail::read_mat(in, w.layers[n].w_lse, d, 10);
    spatial_detail::read_vec(in, w.layers[n].b_lse, d);
    spatial_detail::read_mat(in, w.layers[n].w_mix, d, d + c_in);
    spatial_detail::read_vec(in, w.layers[n].b_mix, d);
    spatial_detail::read_mat(in, w.layers[n].w_att, d, d);
    spatial_detail::read_vec(in, w.layers[n].b_att, d);
  }
  spatial_detail::read_mat(in, w.w_e, static_cast<int>(bottleneck), dims[3].first);
  spatial_detail::read_vec(in, w.b_e, static_cast<int>(bottleneck));
  return w;
}

struct SpatialFeatures {
  std::array<RowMat, 4> f_s;  // f_s[n] at level n's resolution
  RowMat f_e;                 // bottleneck output, level-4 resolution
};

namespace spatial_detail {

// One LFA block: relative-position encoding per neighbor, fusion with the
// neighbor's incoming feature, channel-wise softmax attention, weighted sum.
inline RowMat lfa_block(const std::vector<Vec3>& pos, const std::vector<std::vector<int>>& knn,
                        const RowMat& in_features, const EncoderLayer& layer) {
  const int d = static_cast<int>(layer.w_lse.rows());
  const int c_in = static_cast<int>(layer.w_mix.cols()) - d;
  require(c_in == 0 || in_features.cols() == c_in, "lfa_block: input feature width mismatch");
  RowMat out = RowMat::Zero(pos.size(), d);

  parallel_for(pos.size(), [&](std::size_t lo, std::size_t hi) {
    VecXd r(10), u(layer.w_mix.cols());
    for (std::size_t i = lo; i < hi; ++i) {
      const auto& nbrs = knn[i];
      if (nbrs.empty()) continue;
      RowMat m(nbrs.size(), d);
      RowMat score(nbrs.size(), d);
      for (std::size_t k = 0; k < nbrs.size(); ++k) {
        const Vec3& pi = pos[i];
        const Vec3& pk = pos[nbrs[k]];
        const Vec3 rel = pi - pk;
        r << pi, pk, rel, rel.norm();
        VecXd e = layer.w_lse * r + layer.b_lse;
        for (int c = 0; c < d; ++c) e[c] = leaky_relu(e[c]);
        u.head(d) = e;
        if (c_in > 0) u.tail(c_in) = in_features.row(nbrs[k]).transpose();
        VecXd mk = layer.w_mix * u + layer.b_mix;
        for (int c = 0; c < d; ++c) mk[c] = leaky_relu(mk[c]);
        m.row(k) = mk.transpose();
        score.row(k) = (layer.w_att * mk + layer.b_att).transpose();
      }
      // per-channel softmax over neighbors
      for (int c = 0; c < d; ++c) {
        double mx = score(0, c);
        for (int k = 1; k < score.rows(); ++k) mx = std::max(mx, score(k, c));
        double denom = 0.0;
        for (int k = 0; k < score.rows(); ++k) denom += std::exp(score(k, c) - mx);
        double pooled = 0.0;
        for (int k = 0; k < score.rows(); ++k)
          pooled += std::exp(score(k, c) - mx) / denom * m(k, c);
        out(static_cast<Eigen::Index>(i), c) = pooled;
      }
    }
  });
  return out;
}

}  // namespace spatial_detail

// Multi-scale spatial features on a hierarchy. Pure function of its inputs;
// the weights stay frozen through all training.
inline SpatialFeatures encode(const std::vector<Vec3>& positions, const SampleHierarchy& h,
                              const EncoderWeights& w) {
  require(h.positions[0].size() == positions.size() &&
              (positions.empty() || (h.positions[0][0] - positions[0]).norm() == 0.0),
          "encode: hierarchy was built from different positions");
  SpatialFeatures out;
  RowMat carry;  // features entering the current level
  for (int level = 0; level < kHierarchyLevels; ++level) {
    if (level > 0) {
      const auto& sel = h.parent_selection[level];
      RowMat gathered(sel.size(), out.f_s[level - 1].cols());
      for (std::size_t i = 0; i < sel.size(); ++i)
        gathered.row(i) = out.f_s[level - 1].row(static_cast<Eigen::Index>(sel[i]));
      carry = std::move(gathered);
    }
    out.f_s[level] =
        spatial_detail::lfa_block(h.positions[level], h.neighbors[level], carry, w.layers[level]);
  }
  const RowMat& top = out.f_s[3];
  out.f_e.resize(top.rows(), w.w_e.rows());
  for (int i = 0; i < top.rows(); ++i) {
    VecXd v = w.w_e * top.row(i).transpose() + w.b_e;
    for (int c = 0; c < v.size(); ++c) v[c] = leaky_relu(v[c]);
    out.f_e.row(i) = v.transpose();
  }
  return out;
}

// Indices of Gaussians the rasterizer would keep for this view; identical to
// project()'s visibility set by construction.
inline std::vector<std::size_t> visible_subset(const GaussianSet& set, const Camera& cam,
                                               const RenderConfig& cfg = {}) {
  const auto splats = project(cam, set, cfg);
  std::vector<std::size_t> idx(splats.size());
  for (std::size_t i = 0; i < splats.size(); ++i)
    idx[i] = static_cast<std::size_t>(splats[i].gaussian_index);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace coseg
