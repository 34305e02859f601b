#pragma once

#include "coseg/spatial.hpp"

#include <nlohmann/json.hpp>

namespace coseg {

// Inverse-distance KNN interpolation from one point set onto another.
// Weights 1/(d + 1e-8), normalized per target point.
struct Interpolation {
  std::vector<std::array<int, 3>> indices;    // padded with -1 when fewer sources
  std::vector<std::array<double, 3>> weights; // zero where index is -1
  int from_size = 0;
};

inline constexpr double kInterpEps = 1e-8;

inline Interpolation build_interpolation(const std::vector<Vec3>& from,
                                         const std::vector<Vec3>& to, int k = 3) {
  require(!from.empty(), "build_interpolation: empty source level");
  Interpolation interp;
  interp.from_size = static_cast<int>(from.size());
  interp.indices.assign(to.size(), {-1, -1, -1});
  interp.weights.assign(to.size(), {0.0, 0.0, 0.0});
  const PointGrid grid(from);
  for (std::size_t i = 0; i < to.size(); ++i) {
    const auto nbrs = grid.nearest(to[i], k);
    double total = 0.0;
    for (std::size_t j = 0; j < nbrs.size(); ++j) {
      const double d = (from[nbrs[j]] - to[i]).norm();
      interp.indices[i][j] = nbrs[j];
      interp.weights[i][j] = 1.0 / (d + kInterpEps);
      total += interp.weights[i][j];
    }
    for (auto& w : interp.weights[i]) w /= total;
  }
  return interp;
}

inline RowMat interpolate(const Interpolation& interp, const RowMat& values) {
  require(values.rows() == interp.from_size, "interpolate: source row count mismatch");
  RowMat out = RowMat::Zero(interp.indices.size(), values.cols());
  for (std::size_t i = 0; i < interp.indices.size(); ++i)
    for (int j = 0; j < 3; ++j)
      if (interp.indices[i][j] >= 0)
        out.row(i).noalias() += interp.weights[i][j] * values.row(interp.indices[i][j]);
  return out;
}

// Adjoint of interpolate: scatters weighted gradients back onto the sources.
inline RowMat interpolate_backward(const Interpolation& interp, const RowMat& dout) {
  RowMat din = RowMat::Zero(interp.from_size, dout.cols());
  for (std::size_t i = 0; i < interp.indices.size(); ++i)
    for (int j = 0; j < 3; ++j)
      if (interp.indices[i][j] >= 0)
        din.row(interp.indices[i][j]).noalias() += interp.weights[i][j] * dout.row(i);
  return din;
}

inline RowMat gather_rows(const RowMat& src, const std::vector<std::size_t>& idx) {
  RowMat out(idx.size(), src.cols());
  for (std::size_t i = 0; i < idx.size(); ++i)
    out.row(i) = src.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Global-to-local fusion decoder: per level a shared linear + leaky-ReLU on
// [f_d ; f_s ; upsampled previous], then an FC head to class logits. The only
// trainable tensors in the segmentation stage.
// ---------------------------------------------------------------------------

struct DecoderConfig {
  int feature_dim = 16;   // D of the unprojected features
  int num_classes = 5;    // logits width C
  std::array<int, 4> spatial_widths = kEncoderWidths;
  int bottleneck = kBottleneckWidth;
  std::array<int, 4> hidden = {32, 64, 128, 256};  // MLP output width at level n
  int us_k = 3;

  int mlp_input_width(int level) const {
    const int carried = level == 4 ? bottleneck : hidden[level];  // hidden[level] = level+1's output
    return feature_dim + spatial_widths[level - 1] + carried;
  }

  std::uint64_t hash() const {
    std::uint64_t h = hash_u64(static_cast<std::uint64_t>(feature_dim) * 131 + num_classes);
    for (int n = 0; n < 4; ++n) h = hash_u64(h ^ (static_cast<std::uint64_t>(spatial_widths[n]) << 8) ^ hidden[n]);
    return hash_u64(h ^ bottleneck ^ (static_cast<std::uint64_t>(us_k) << 32));
  }
};

struct DecoderState {
  struct Tensor {
    RowMat value;
    RowMat adam_m, adam_v;
    void init(int rows, int cols) {
      value.setZero(rows, cols);
      adam_m.setZero(rows, cols);
      adam_v.setZero(rows, cols);
    }
  };
  struct Layer {
    Tensor w, b;  // b stored 1 x out
  };

  DecoderConfig config;
  std::array<Layer, 4> mlp;  // mlp[n-1] serves level n
  Layer fc;
  std::int64_t adam_step = 0;

  static DecoderState init(const DecoderConfig& cfg, std::uint64_t seed) {
    DecoderState s;
    s.config = cfg;
    Rng rng(derive_seed(seed, /*tag=*/0x4443u));
    auto fill = [&rng](Tensor& t, int rows, int cols) {
      t.init(rows, cols);
      const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) t.value(r, c) = rng.normal() * scale;
    };
    for (int level = 1; level <= 4; ++level) {
      fill(s.mlp[level - 1].w, cfg.hidden[level - 1], cfg.mlp_input_width(level));
      s.mlp[level - 1].b.init(1, cfg.hidden[level - 1]);
    }
    fill(s.fc.w, cfg.num_classes, cfg.hidden[0]);
    s.fc.b.init(1, cfg.num_classes);
    return s;
  }

  std::size_t parameter_count() const {
    std::size_t n = fc.w.value.size() + fc.b.value.size();
    for (const auto& layer : mlp) n += layer.w.value.size() + layer.b.value.size();
    return n;
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    for (auto& layer : mlp) {
      fn(layer.w);
      fn(layer.b);
    }
    fn(fc.w);
    fn(fc.b);
  }
};

struct DecoderInputs {
  std::array<RowMat, 4> f_d;  // unprojected features gathered to each level
  std::array<RowMat, 4> f_s;  // spatial features per level
  RowMat f_e;                 // bottleneck features at level 4
  const SampleHierarchy* hierarchy = nullptr;
};

struct DecoderCache {
  std::array<RowMat, 4> input;   // concatenated X per level
  std::array<RowMat, 4> pre;     // X W^T + b
  std::array<RowMat, 4> fused;   // leaky-ReLU(pre); reg loss reads scales here
  std::array<Interpolation, 4> us;  // us[3]: f_e 4->4; us[n-1]: level n+1 -> n
  RowMat fc_pre;                 // logits
};

struct DecoderGrads {
  std::array<RowMat, 4> mlp_w, mlp_b;
  RowMat fc_w, fc_b;

  void init(const DecoderState& s) {
    for (int n = 0; n < 4; ++n) {
      mlp_w[n].setZero(s.mlp[n].w.value.rows(), s.mlp[n].w.value.cols());
      mlp_b[n].setZero(1, s.mlp[n].b.value.cols());
    }
    fc_w.setZero(s.fc.w.value.rows(), s.fc.w.value.cols());
    fc_b.setZero(1, s.fc.b.value.cols());
  }
};

namespace decoder_detail {

inline void check_width(const RowMat& m, int cols, const std::string& name) {
  require(m.cols() == cols, "decode_forward: " + name + " has width " + std::to_string(m.cols()) +
                                ", expected " + std::to_string(cols));
}

}  // namespace decoder_detail

// Eq.-7-style pass, level 4 down to level 1; returns logits for every level-1
// point and fills `cache` for the backward pass.
inline RowMat decode_forward(const DecoderInputs& in, const DecoderState& state,
                             DecoderCache* cache = nullptr) {
  require(in.hierarchy != nullptr, "decode_forward: hierarchy missing");
  const auto& cfg = state.config;
  const auto& h = *in.hierarchy;
  for (int level = 1; level <= 4; ++level) {
    decoder_detail::check_width(in.f_d[level - 1], cfg.feature_dim,
                                "f_d[" + std::to_string(level) + "]");
    decoder_detail::check_width(in.f_s[level - 1], cfg.spatial_widths[level - 1],
                                "f_s[" + std::to_string(level) + "]");
    require(in.f_d[level - 1].rows() == static_cast<Eigen::Index>(h.level_size(level)),
            "decode_forward: f_d rows disagree with hierarchy level " + std::to_string(level));
  }
  decoder_detail::check_width(in.f_e, cfg.bottleneck, "f_e");

  DecoderCache local;
  DecoderCache& c = cache ? *cache : local;

  RowMat carried;  // upsampled previous output entering the current level
  for (int level = 4; level >= 1; --level) {
    const auto& to_pos = h.positions[level - 1];
    if (level == 4) {
      c.us[3] = build_interpolation(h.positions[3], to_pos, cfg.us_k);
      carried = interpolate(c.us[3], in.f_e);
    } else {
      c.us[level - 1] = build_interpolation(h.positions[level], to_pos, cfg.us_k);
      carried = interpolate(c.us[level - 1], c.fused[level]);
    }
    const Eigen::Index rows = static_cast<Eigen::Index>(h.level_size(level));
    RowMat x(rows, cfg.mlp_input_width(level));
    x.leftCols(cfg.feature_dim) = in.f_d[level - 1];
    x.middleCols(cfg.feature_dim, cfg.spatial_widths[level - 1]) = in.f_s[level - 1];
    x.rightCols(carried.cols()) = carried;
    c.input[level - 1] = x;

    const auto& layer = state.mlp[level - 1];
    RowMat pre = x * layer.w.value.transpose();
    pre.rowwise() += layer.b.value.row(0);
    c.pre[level - 1] = pre;
    c.fused[level - 1] = pre.unaryExpr([](double v) { return leaky_relu(v); });
  }

  RowMat logits = c.fused[0] * state.fc.w.value.transpose();
  logits.rowwise() += state.fc.b.value.row(0);
  c.fc_pre = logits;
  return logits;
}

// Exact reverse-mode gradients for the decoder parameters. `dL_dfused[n-1]`
// optionally injects gradients on the level-n fused features (the 3D
// regularizer's path); pass empty matrices otherwise.
inline DecoderGrads decode_backward(const DecoderInputs& in, const DecoderState& state,
                                    const DecoderCache& cache, const RowMat& dL_dlogits,
                                    const std::array<RowMat, 4>& dL_dfused = {}) {
  require(cache.fc_pre.rows() == dL_dlogits.rows() && cache.fc_pre.cols() == dL_dlogits.cols(),
          "decode_backward: upstream gradient shape mismatch (stale cache?)");
  DecoderGrads g;
  g.init(state);

  g.fc_w = dL_dlogits.transpose() * cache.fused[0];
  g.fc_b = dL_dlogits.colwise().sum();
  RowMat dfused = dL_dlogits * state.fc.w.value;  // gradient on fused[0]

  for (int level = 1; level <= 4; ++level) {
    if (dL_dfused[level - 1].size() > 0) {
      require(dL_dfused[level - 1].rows() == cache.fused[level - 1].rows(),
              "decode_backward: injected gradient rows mismatch at level " + std::to_string(level));
      dfused += dL_dfused[level - 1];
    }
    RowMat dpre =
        dfused.array() * cache.pre[level - 1].unaryExpr([](double v) { return leaky_relu_grad(v); }).array();
    g.mlp_w[level - 1] = dpre.transpose() * cache.input[level - 1];
    g.mlp_b[level - 1] = dpre.colwise().sum();
    if (level == 4) break;

    const RowMat dx = dpre * state.mlp[level - 1].w.value;
    const int carried_cols = static_cast<int>(dx.cols()) - state.config.feature_dim -
                             state.config.spatial_widths[level - 1];
    dfused = interpolate_backward(cache.us[level - 1], dx.rightCols(carried_cols));
  }
  return g;
}

// Writes decoder logits into the set; rendering and inference thereafter need
// no decoder.
inline void bake_identities(GaussianSet& set, const RowMat& logits) {
  require(static_cast<std::size_t>(logits.rows()) == set.size(),
          "bake_identities: logits rows (" + std::to_string(logits.rows()) +
              ") != surviving Gaussian count (" + std::to_string(set.size()) + ")");
  set.seg_logits = logits;
}

// ---------------------------------------------------------------------------
// Checkpoint: "CSGD" magic, dims, float32 tensors, plus a JSON sidecar with
// the config hash.
// ---------------------------------------------------------------------------

inline void save_decoder(const std::string& path, const DecoderState& s) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "save_decoder: cannot open " + path);
  out.write("CSGD", 4);
  auto put_u32 = [&out](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  put_u32(static_cast<std::uint32_t>(s.config.feature_dim));
  put_u32(static_cast<std::uint32_t>(s.config.num_classes));
  for (int n = 0; n < 4; ++n) put_u32(static_cast<std::uint32_t>(s.config.spatial_widths[n]));
  for (int n = 0; n < 4; ++n) put_u32(static_cast<std::uint32_t>(s.config.hidden[n]));
  put_u32(static_cast<std::uint32_t>(s.config.bottleneck));
  put_u32(static_cast<std::uint32_t>(s.config.us_k));
  for (const auto& layer : s.mlp) {
    spatial_detail::write_mat(out, layer.w.value);
    spatial_detail::write_mat(out, layer.b.value);
  }
  spatial_detail::write_mat(out, s.fc.w.value);
  spatial_detail::write_mat(out, s.fc.b.value);
  require(out.good(), "save_decoder: write failed");

  nlohmann::json side;
  side["config_hash"] = s.config.hash();
  side["feature_dim"] = s.config.feature_dim;
  side["num_classes"] = s.config.num_classes;
  side["parameters"] = DecoderState::init(s.config, 0).parameter_count();
  std::ofstream js(path + ".json");
  js << side.dump(2) << "\n";
}

inline DecoderState load_decoder(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "load_decoder: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  require(in.good() && std::string(magic, 4) == "CSGD", "load_decoder: bad magic");
  auto get_u32 = [&in]() {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  DecoderConfig cfg;
  cfg.feature_dim = static_cast<int>(get_u32());
  cfg.num_classes = static_cast<int>(get_u32());
  for (int n = 0; n < 4; ++n) cfg.spatial_widths[n] = static_cast<int>(get_u32());
  for (int n = 0; n < 4; ++n) cfg.hidden[n] = static_cast<int>(get_u32());
  cfg.bottleneck = static_cast<int>(get_u32());
  cfg.us_k = static_cast<int>(get_u32());
  DecoderState s;
  s.config = cfg;
  for (int level = 1; level <= 4; ++level) {
    auto& layer = s.mlp[level - 1];
    layer.w.init(cfg.hidden[level - 1], cfg.mlp_input_width(level));
    layer.b.init(1, cfg.hidden[level - 1]);
    spatial_detail::read_mat(in, layer.w.value, cfg.hidden[level - 1], cfg.mlp_input_width(level));
    spatial_detail::read_mat(in, layer.b.value, 1, cfg.hidden[level - 1]);
  }
  s.fc.w.init(cfg.num_classes, cfg.hidden[0]);
  s.fc.b.init(1, cfg.num_classes);
  spatial_detail::read_mat(in, s.fc.w.value, cfg.num_classes, cfg.hidden[0]);
  spatial_detail::read_mat(in, s.fc.b.value, 1, cfg.num_classes);
  return s;
}

}  // namespace coseg
