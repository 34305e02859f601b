#pragma once

#include "coseg/core.hpp"
#include "coseg/image.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <map>
#include <sstream>

namespace coseg {

// ---------------------------------------------------------------------------
// PLY, binary little-endian. Properties per vertex: x,y,z, rot_0..3,
// scale_0..2, opacity, then c_0..2 (sh_degree 0) or sh_0..11 (degree 1),
// then seg_0..seg_{C-1} when identities are baked. All float32.
// ---------------------------------------------------------------------------

inline void write_ply(const std::string& path, const GaussianSet& set) {
  set.check_consistent();
  std::vector<std::string> props = {"x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3",
                                    "scale_0", "scale_1", "scale_2", "opacity"};
  if (set.sh_degree == 1)
    for (int i = 0; i < 12; ++i) props.push_back("sh_" + std::to_string(i));
  else
    for (int i = 0; i < 3; ++i) props.push_back("c_" + std::to_string(i));
  const int num_seg = set.num_classes();
  for (int i = 0; i < num_seg; ++i) props.push_back("seg_" + std::to_string(i));

  std::ofstream out(path, std::ios::binary);
  require(out.good(), "write_ply: cannot open " + path);
  out << "ply\nformat binary_little_endian 1.0\n";
  out << "element vertex " << set.size() << "\n";
  for (const auto& p : props) out << "property float " << p << "\n";
  out << "end_header\n";

  std::vector<float> row(props.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    std::size_t k = 0;
    for (int d = 0; d < 3; ++d) row[k++] = static_cast<float>(set.position[i][d]);
    for (int d = 0; d < 4; ++d) row[k++] = static_cast<float>(set.rotation[i][d]);
    for (int d = 0; d < 3; ++d) row[k++] = static_cast<float>(set.log_scale[i][d]);
    row[k++] = static_cast<float>(set.opacity_raw[i]);
    if (set.sh_degree == 1)
      for (int d = 0; d < 12; ++d) row[k++] = static_cast<float>(set.sh(i, d));
    else
      for (int d = 0; d < 3; ++d) row[k++] = static_cast<float>(set.color[i][d]);
    for (int d = 0; d < num_seg; ++d) row[k++] = static_cast<float>(set.seg_logits(i, d));
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size() * 4));
  }
  require(out.good(), "write_ply: write failed for " + path);
}

inline GaussianSet read_ply(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "read_ply: cannot open " + path);

  std::string line;
  std::getline(in, line);
  require(line == "ply", "read_ply: missing ply magic in " + path);
  std::size_t count = 0;
  std::vector<std::string> props;
  bool binary_le = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "format") {
      std::string fmt;
      ls >> fmt;
      binary_le = (fmt == "binary_little_endian");
    } else if (tok == "element") {
      std::string name;
      ls >> name >> count;
      require(name == "vertex", "read_ply: unexpected element " + name);
    } else if (tok == "property") {
      std::string type, name;
      ls >> type >> name;
      require(type == "float", "read_ply: only float properties supported");
      props.push_back(name);
    } else if (tok == "end_header") {
      break;
    }
  }
  require(binary_le, "read_ply: only binary_little_endian supported");

  std::map<std::string, int> col;
  for (std::size_t i = 0; i < props.size(); ++i) col[props[i]] = static_cast<int>(i);
  auto need = [&](const std::string& name) {
    auto it = col.find(name);
    require(it != col.end(), "read_ply: missing property " + name);
    return it->second;
  };

  GaussianSet set;
  set.resize(count);
  set.sh_degree = col.count("sh_0") ? 1 : 0;
  if (set.sh_degree == 1) set.sh.resize(count, 12);
  int num_seg = 0;
  while (col.count("seg_" + std::to_string(num_seg))) ++num_seg;
  if (num_seg > 0) set.seg_logits.resize(count, num_seg);

  std::vector<float> row(props.size());
  for (std::size_t i = 0; i < count; ++i) {
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * 4));
    require(in.good(), "read_ply: truncated payload in " + path);
    set.position[i] = Vec3(row[need("x")], row[need("y")], row[need("z")]);
    for (int d = 0; d < 4; ++d) set.rotation[i][d] = row[need("rot_" + std::to_string(d))];
    for (int d = 0; d < 3; ++d) set.log_scale[i][d] = row[need("scale_" + std::to_string(d))];
    set.opacity_raw[i] = row[need("opacity")];
    if (set.sh_degree == 1)
      for (int d = 0; d < 12; ++d) set.sh(i, d) = row[need("sh_" + std::to_string(d))];
    else
      for (int d = 0; d < 3; ++d) set.color[i][d] = row[need("c_" + std::to_string(d))];
    for (int d = 0; d < num_seg; ++d) set.seg_logits(i, d) = row[need("seg_" + std::to_string(d))];
  }
  return set;
}

// ---------------------------------------------------------------------------
// Camera list: JSON array of {fx,fy,cx,cy,width,height,R(9 row-major),t(3)}.
// ---------------------------------------------------------------------------

inline nlohmann::json camera_to_json(const Camera& cam) {
  nlohmann::json j;
  j["fx"] = cam.fx;
  j["fy"] = cam.fy;
  j["cx"] = cam.cx;
  j["cy"] = cam.cy;
  j["width"] = cam.width;
  j["height"] = cam.height;
  std::vector<double> R(9), t(3);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) R[r * 3 + c] = cam.R_wc(r, c);
  for (int d = 0; d < 3; ++d) t[d] = cam.t_wc[d];
  j["R"] = R;
  j["t"] = t;
  return j;
}

inline Camera camera_from_json(const nlohmann::json& j) {
  Camera cam;
  cam.fx = j.at("fx");
  cam.fy = j.at("fy");
  cam.cx = j.at("cx");
  cam.cy = j.at("cy");
  cam.width = j.at("width");
  cam.height = j.at("height");
  const auto R = j.at("R").get<std::vector<double>>();
  const auto t = j.at("t").get<std::vector<double>>();
  require(R.size() == 9 && t.size() == 3, "camera_from_json: R must be 9 floats, t must be 3");
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) cam.R_wc(r, c) = R[r * 3 + c];
  for (int d = 0; d < 3; ++d) cam.t_wc[d] = t[d];
  cam.validate();
  return cam;
}

inline void write_cameras(const std::string& path, const std::vector<Camera>& cams) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : cams) arr.push_back(camera_to_json(c));
  std::ofstream out(path);
  require(out.good(), "write_cameras: cannot open " + path);
  out << arr.dump(2) << "\n";
}

inline std::vector<Camera> read_cameras(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "read_cameras: cannot open " + path);
  nlohmann::json arr = nlohmann::json::parse(in);
  std::vector<Camera> cams;
  for (const auto& j : arr) cams.push_back(camera_from_json(j));
  return cams;
}

// ---------------------------------------------------------------------------
// Per-scale unprojected features travel next to the PLY as FMAP files with
// H = N, W = 1, K = D (the PLY property list has no feature columns).
// ---------------------------------------------------------------------------

inline void write_feature_sidecar(const std::string& prefix, const GaussianSet& set) {
  for (int n = 0; n < 4; ++n) {
    if (set.features[n].size() == 0) continue;
    ImageXd img(static_cast<int>(set.features[n].rows()), 1,
                static_cast<int>(set.features[n].cols()));
    for (int i = 0; i < set.features[n].rows(); ++i)
      for (int d = 0; d < set.features[n].cols(); ++d)
        img.at(i, 0, d) = set.features[n](i, d);
    write_fmap(prefix + ".f" + std::to_string(n + 1) + ".fmap", img);
  }
}

inline void read_feature_sidecar(const std::string& prefix, GaussianSet& set) {
  for (int n = 0; n < 4; ++n) {
    const std::string path = prefix + ".f" + std::to_string(n + 1) + ".fmap";
    std::ifstream probe(path, std::ios::binary);
    if (!probe.good()) continue;
    probe.close();
    const ImageXd img = read_fmap(path);
    require(static_cast<std::size_t>(img.height) == set.size(),
            "read_feature_sidecar: feature rows disagree with Gaussian count");
    set.features[n].resize(img.height, img.channels);
    for (int i = 0; i < img.height; ++i)
      for (int d = 0; d < img.channels; ++d) set.features[n](i, d) = img.at(i, 0, d);
  }
}

}  // namespace coseg
