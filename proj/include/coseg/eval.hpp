#pragma once

#include "coseg/image.hpp"

#include <map>

namespace coseg {

// Rows are ground truth, columns are predictions.
struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<std::int64_t> counts;

  explicit ConfusionMatrix(int classes = 0)
      : num_classes(classes),
        counts(static_cast<std::size_t>(classes) * classes, 0) {}

  std::int64_t& at(int gt, int pred) {
    return counts[static_cast<std::size_t>(gt) * num_classes + pred];
  }
  std::int64_t at(int gt, int pred) const {
    return counts[static_cast<std::size_t>(gt) * num_classes + pred];
  }

  std::int64_t total() const {
    std::int64_t t = 0;
    for (const auto c : counts) t += c;
    return t;
  }
};

struct SegMetrics {
  double miou = 0.0;
  double accuracy = 0.0;
  std::vector<double> per_class_iou;    // NaN for classes absent from pred and gt
  ConfusionMatrix confusion;
};

// IoU_c = TP / (TP + FP + FN); classes absent from both prediction and ground
// truth are excluded from the mean. Pixels whose ground truth equals
// `ignore_index` do not enter the tally at all.
inline SegMetrics miou_accuracy(const std::vector<LabelMap>& pred,
                                const std::vector<LabelMap>& gt, int num_classes,
                                int ignore_index = -1) {
  require(!pred.empty() && pred.size() == gt.size(), "miou_accuracy: empty or mismatched inputs");
  SegMetrics out;
  out.confusion = ConfusionMatrix(num_classes);
  for (std::size_t v = 0; v < pred.size(); ++v) {
    require(pred[v].height == gt[v].height && pred[v].width == gt[v].width,
            "miou_accuracy: map shapes differ at view " + std::to_string(v));
    for (std::size_t i = 0; i < pred[v].data.size(); ++i) {
      const int g = gt[v].data[i];
      const int p = pred[v].data[i];
      if (g == ignore_index) continue;
      require(g >= 0 && g < num_classes && p >= 0 && p < num_classes,
              "miou_accuracy: label outside [0, " + std::to_string(num_classes) + ")");
      out.confusion.at(g, p) += 1;
    }
  }
  const std::int64_t total = out.confusion.total();
  require(total > 0, "miou_accuracy: no pixels to evaluate");

  std::int64_t trace = 0;
  out.per_class_iou.assign(num_classes, std::numeric_limits<double>::quiet_NaN());
  double iou_sum = 0.0;
  int iou_count = 0;
  for (int c = 0; c < num_classes; ++c) {
    std::int64_t tp = out.confusion.at(c, c);
    std::int64_t fp = 0, fn = 0;
    for (int o = 0; o < num_classes; ++o) {
      if (o == c) continue;
      fp += out.confusion.at(o, c);
      fn += out.confusion.at(c, o);
    }
    trace += tp;
    if (c == ignore_index) continue;
    if (tp + fp + fn == 0) continue;  // absent everywhere
    out.per_class_iou[c] = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
    iou_sum += out.per_class_iou[c];
    iou_count += 1;
  }
  out.miou = iou_count > 0 ? iou_sum / iou_count : 0.0;
  out.accuracy = static_cast<double>(trace) / static_cast<double>(total);
  return out;
}

struct ClusterIndices {
  double calinski_harabasz = 0.0;
  double davies_bouldin = 0.0;
  int clusters = 0;
};

// Calinski-Harabasz and Davies-Bouldin over pixel features grouped by label.
// Labels equal to `ignore_index` are skipped. Requires >= 2 non-empty
// clusters and distinct centroids.
inline ClusterIndices cluster_indices(const ImageXd& features, const LabelMap& labels,
                                      int ignore_index = -1) {
  require(features.height == labels.height && features.width == labels.width,
          "cluster_indices: feature/label shapes differ");
  const int dim = features.channels;

  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < labels.data.size(); ++i) {
    if (labels.data[i] == ignore_index) continue;
    groups[labels.data[i]].push_back(i);
  }
  const int k = static_cast<int>(groups.size());
  require(k >= 2, "cluster_indices: at least 2 non-empty clusters required, got " +
                      std::to_string(k));

  std::vector<VecXd> centroids;
  std::vector<double> sizes;
  VecXd global = VecXd::Zero(dim);
  double n_total = 0.0;
  for (const auto& [label, idx] : groups) {
    VecXd c = VecXd::Zero(dim);
    for (const std::size_t i : idx)
      for (int d = 0; d < dim; ++d) c[d] += features.data[i * dim + d];
    global += c;
    c /= static_cast<double>(idx.size());
    centroids.push_back(c);
    sizes.push_back(static_cast<double>(idx.size()));
    n_total += static_cast<double>(idx.size());
  }
  global /= n_total;

  double between = 0.0, within = 0.0;
  std::vector<double> sigma(k, 0.0);  // mean distance to centroid
  int ci = 0;
  for (const auto& [label, idx] : groups) {
    between += sizes[ci] * (centroids[ci] - global).squaredNorm();
    for (const std::size_t i : idx) {
      VecXd x(dim);
      for (int d = 0; d < dim; ++d) x[d] = features.data[i * dim + d];
      within += (x - centroids[ci]).squaredNorm();
      sigma[ci] += (x - centroids[ci]).norm();
    }
    sigma[ci] /= sizes[ci];
    ++ci;
  }

  ClusterIndices out;
  out.clusters = k;
  require(within > 0.0 || between > 0.0, "cluster_indices: degenerate features");
  out.calinski_harabasz =
      (between / (k - 1)) / (within / std::max(1.0, n_total - k));

  double db = 0.0;
  for (int i = 0; i < k; ++i) {
    double worst = 0.0;
    for (int j = 0; j < k; ++j) {
      if (i == j) continue;
      const double dist = (centroids[i] - centroids[j]).norm();
      require(dist > 0.0, "cluster_indices: identical cluster centroids, DB undefined");
      worst = std::max(worst, (sigma[i] + sigma[j]) / dist);
    }
    db += worst;
  }
  out.davies_bouldin = db / k;
  return out;
}

// 10 log10(1 / MSE) on [0,1] images; identical images report +infinity.
inline double psnr(const ImageXd& img, const ImageXd& ref) {
  require(img.same_shape(ref), "psnr: image shapes differ");
  double mse = 0.0;
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const double d = img.data[i] - ref.data[i];
    mse += d * d;
  }
  mse /= static_cast<double>(img.data.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

}  // namespace coseg
