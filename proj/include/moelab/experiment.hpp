#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "moelab/losses.hpp"
#include "moelab/metrics.hpp"
#include "moelab/moe_layer.hpp"

namespace moelab {

enum class Ablation { WithoutAll, OnlyAux, WithoutLv, WithoutLo, Ours };

inline constexpr Ablation kAllAblations[] = {Ablation::WithoutAll, Ablation::OnlyAux,
                                             Ablation::WithoutLv, Ablation::WithoutLo,
                                             Ablation::Ours};

/// snake_case name used in file names and config files ("only_aux", ...).
std::string_view ablation_name(Ablation a);
/// Accepts the snake_case name or the CamelCase enumerator name.
std::optional<Ablation> parse_ablation(std::string_view name);

/// Zeroes the weights an ablation switches off; the rest keep their base value.
LossWeights ablation_weights(Ablation a, const LossWeights& base);

struct ExperimentConfig {
  std::size_t d = 16;
  std::size_t d_out = 8;
  std::size_t n = 8;
  std::size_t k = 2;
  std::size_t N_batch = 256;
  std::size_t steps = 500;
  double lr = 1e-2;
  std::size_t n_domains = 8;
  double domain_spread = 6.0;
  double noise_std = 0.05;
  std::vector<std::uint64_t> seeds{7, 8, 9};
  LossWeights weights;
  Ablation ablation = Ablation::Ours;
  /// Reuse the first batch every step instead of drawing a fresh one.
  bool fixed_batch = false;
  std::size_t overlap_neighbors = kDefaultOverlapNeighbors;

  void validate() const;
};

/// Per-seed synthetic task: Gaussian domain clusters with one linear target map each.
struct DomainModel {
  std::vector<std::vector<double>> means;  // n_domains x d
  std::vector<Matrix> maps;                // n_domains of d x d_out
  std::vector<double> cumulative;          // sampling CDF, p(c) proportional to 1/(c+1)
};

DomainModel make_domain_model(const ExperimentConfig& config, Rng& rng);

struct Batch {
  Matrix tokens;   // N x d
  Matrix targets;  // N x d_out
  std::vector<int> domains;
};

Batch generate_batch(const ExperimentConfig& config, const DomainModel& model, Rng& rng);

/// Convenience overload: builds the seed's domain model from the config seed stream.
Batch generate_batch(const ExperimentConfig& config, std::uint64_t seed, std::size_t step);

/// Router and experts drawn from N(0, 1/sqrt(d)).
MoeParams init_params(const ExperimentConfig& config, Rng& rng);

struct TrainLog {
  std::vector<MetricsRecord> records;
  MoeParams final_params;
  ExperimentConfig config;
  std::uint64_t seed = 0;
};

class TrainingDiverged : public NonFiniteError {
 public:
  TrainingDiverged(std::size_t step, TrainLog partial);
  std::size_t step() const noexcept { return step_; }
  const TrainLog& partial() const noexcept { return partial_; }

 private:
  std::size_t step_;
  TrainLog partial_;
};

/// Diagnostics for one step. Embeddings for overlap and silhouette are all
/// selected expert outputs, labelled by expert index.
MetricsRecord compute_metrics(std::size_t step, const LossBreakdown& losses,
                              const RoutingState& state, const ExpertOutputs& outputs,
                              std::size_t overlap_neighbors);

/// Plain SGD on the configured ablation. Uses config.seeds.front() unless a
/// seed is given.
TrainLog train(const ExperimentConfig& config, std::optional<std::uint64_t> seed = std::nullopt);

struct AblationSummary {
  /// Seed-averaged mean over the trailing window of each run.
  MetricsRecord final_means;
  /// Seed-averaged RMSE between this method's maxvio curve and OnlyAux's.
  double rmse_maxvio_vs_onlyaux = 0.0;
};

struct AblationSuite {
  std::map<Ablation, std::vector<TrainLog>> logs;
  std::map<Ablation, AblationSummary> summary;
};

inline constexpr std::size_t kFinalWindow = 50;

/// Mean of the last `window` records (all of them if fewer).
MetricsRecord trailing_mean(const std::vector<MetricsRecord>& records,
                            std::size_t window = kFinalWindow);

std::vector<double> maxvio_curve(const TrainLog& log);

/// All five presets on every seed with identical batches. `workers` > 1 runs
/// independent trainings on separate threads; results do not depend on it.
AblationSuite run_ablation_suite(const ExperimentConfig& base, unsigned workers = 1);

}  // namespace moelab
