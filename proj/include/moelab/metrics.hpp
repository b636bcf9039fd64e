#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "moelab/moe_layer.hpp"

namespace moelab {

/// One training step's diagnostics.
struct MetricsRecord {
  std::size_t step = 0;
  double loss_h = 0.0;
  double loss_aux = 0.0;
  double loss_o = 0.0;
  double loss_v = 0.0;
  double total = 0.0;
  double maxvio = 0.0;
  double expert_overlap = 0.0;
  double routing_variance = 0.0;
  double score_variance = 0.0;
  double silhouette = 0.0;

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

inline constexpr std::size_t kDefaultOverlapNeighbors = 10;

/// (max load - mean load) / mean load.
double maxvio(std::span<const double> loads);

double accuracy(std::span<const int> predicted, std::span<const int> truth);

/// Mean silhouette coefficient under Euclidean distance. Points in singleton
/// clusters score 0. Requires at least two distinct labels.
double silhouette(const Matrix& points, std::span<const int> labels);

/// Mean fraction of each point's k nearest neighbours (self excluded, ties to
/// the lower index) whose label differs. k is clamped to N - 1.
double expert_overlap(const Matrix& embeddings, std::span<const int> labels,
                      std::size_t k_param = kDefaultOverlapNeighbors);

/// (1/E) * sum_j (mean_i g_ij - 1/E)^2 over a matrix of gate probabilities.
double routing_variance(const Matrix& gates);

double rmse(std::span<const double> a, std::span<const double> b);

/// Column variance of the score matrix; equals -variance_loss(state).
double score_variance(const RoutingState& state);

}  // namespace moelab
