#include "moelab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

namespace moelab {

double maxvio(std::span<const double> loads) {
  if (loads.empty()) throw std::invalid_argument("maxvio: no loads");
  const double mean =
      std::accumulate(loads.begin(), loads.end(), 0.0) / static_cast<double>(loads.size());
  if (!(mean > 0.0)) throw std::invalid_argument("maxvio: mean load must be positive");
  return (*std::max_element(loads.begin(), loads.end()) - mean) / mean;
}

double accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("accuracy: length mismatch");
  if (truth.empty()) throw std::invalid_argument("accuracy: empty input");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) correct += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(truth.size());
}

namespace {

double euclidean(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
  return std::sqrt(s);
}

}  // namespace

double silhouette(const Matrix& points, std::span<const int> labels) {
  const std::size_t N = points.rows();
  if (labels.size() != N) throw std::invalid_argument("silhouette: label count mismatch");

  // Dense cluster ids in label order.
  std::map<int, std::size_t> ids;
  for (int l : labels) ids.emplace(l, 0);
  if (ids.size() < 2) throw std::invalid_argument("silhouette: need at least two clusters");
  std::size_t next = 0;
  for (auto& [label, id] : ids) id = next++;
  std::vector<std::size_t> cluster(N);
  std::vector<std::size_t> cluster_size(ids.size(), 0);
  for (std::size_t i = 0; i < N; ++i) {
    cluster[i] = ids[labels[i]];
    ++cluster_size[cluster[i]];
  }

  double total = 0.0;
  std::vector<double> dist_sum(ids.size());
  for (std::size_t i = 0; i < N; ++i) {
    if (cluster_size[cluster[i]] == 1) continue;
    std::fill(dist_sum.begin(), dist_sum.end(), 0.0);
    for (std::size_t p = 0; p < N; ++p)
      if (p != i) dist_sum[cluster[p]] += euclidean(points.row(i), points.row(p));
    const double a = dist_sum[cluster[i]] / static_cast<double>(cluster_size[cluster[i]] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < ids.size(); ++c)
      if (c != cluster[i]) b = std::min(b, dist_sum[c] / static_cast<double>(cluster_size[c]));
    const double den = std::max(a, b);
    total += den > 0.0 ? (b - a) / den : 0.0;
  }
  return total / static_cast<double>(N);
}

double expert_overlap(const Matrix& embeddings, std::span<const int> labels,
                      std::size_t k_param) {
  const std::size_t N = embeddings.rows();
  if (N < 2) throw std::invalid_argument("expert_overlap: need at least two points");
  if (k_param < 1) throw std::invalid_argument("expert_overlap: k must be >= 1");
  if (labels.size() != N) throw std::invalid_argument("expert_overlap: label count mismatch");
  const std::size_t k = std::min(k_param, N - 1);

  std::vector<std::pair<double, std::size_t>> cand;
  cand.reserve(N - 1);
  double total = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    cand.clear();
    auto xi = embeddings.row(i);
    for (std::size_t p = 0; p < N; ++p) {
      if (p == i) continue;
      auto xp = embeddings.row(p);
      double s = 0.0;
      for (std::size_t c = 0; c < xi.size(); ++c) s += (xi[c] - xp[c]) * (xi[c] - xp[c]);
      cand.emplace_back(s, p);
    }
    // pair ordering breaks distance ties by index
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
    std::size_t differ = 0;
    for (std::size_t r = 0; r < k; ++r) differ += labels[cand[r].second] != labels[i] ? 1 : 0;
    total += static_cast<double>(differ) / static_cast<double>(k);
  }
  return total / static_cast<double>(N);
}

double routing_variance(const Matrix& gates) {
  if (gates.empty()) throw std::invalid_argument("routing_variance: empty input");
  const double E = static_cast<double>(gates.cols());
  double total = 0.0;
  for (std::size_t j = 0; j < gates.cols(); ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < gates.rows(); ++i) mean += gates(i, j);
    mean /= static_cast<double>(gates.rows());
    total += (mean - 1.0 / E) * (mean - 1.0 / E);
  }
  return total / E;
}

double rmse(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("rmse: length mismatch");
  if (a.empty()) throw std::invalid_argument("rmse: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s / static_cast<double>(a.size()));
}

double score_variance(const RoutingState& state) {
  const std::size_t N = state.num_tokens();
  const std::size_t n = state.num_experts();
  if (N == 0 || n == 0) return 0.0;
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < N; ++i) mean += state.scores(i, j);
    mean /= static_cast<double>(N);
    for (std::size_t i = 0; i < N; ++i)
      total += (state.scores(i, j) - mean) * (state.scores(i, j) - mean);
  }
  return total / static_cast<double>(n);
}

}  // namespace moelab
