#include "moelab/experiment.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <mutex>
#include <set>
#include <stdexcept>
#include <thread>

#include "moelab/gradients.hpp"

namespace moelab {

namespace {

constexpr std::uint64_t kDomainStream = 1;
constexpr std::uint64_t kBatchStream = 2;
constexpr std::uint64_t kInitStream = 3;

}  // namespace

std::string_view ablation_name(Ablation a) {
  switch (a) {
    case Ablation::WithoutAll: return "without_all";
    case Ablation::OnlyAux: return "only_aux";
    case Ablation::WithoutLv: return "without_lv";
    case Ablation::WithoutLo: return "without_lo";
    case Ablation::Ours: return "ours";
  }
  return "unknown";
}

std::optional<Ablation> parse_ablation(std::string_view name) {
  static constexpr std::pair<std::string_view, Ablation> kAliases[] = {
      {"WithoutAll", Ablation::WithoutAll}, {"OnlyAux", Ablation::OnlyAux},
      {"WithoutLv", Ablation::WithoutLv},   {"WithoutLo", Ablation::WithoutLo},
      {"Ours", Ablation::Ours}};
  for (Ablation a : kAllAblations)
    if (ablation_name(a) == name) return a;
  for (const auto& [alias, a] : kAliases)
    if (alias == name) return a;
  return std::nullopt;
}

LossWeights ablation_weights(Ablation a, const LossWeights& base) {
  LossWeights w = base;
  switch (a) {
    case Ablation::WithoutAll: w.alpha = w.beta = w.gamma = 0.0; break;
    case Ablation::OnlyAux: w.beta = w.gamma = 0.0; break;
    case Ablation::WithoutLv: w.gamma = 0.0; break;
    case Ablation::WithoutLo: w.beta = 0.0; break;
    case Ablation::Ours: break;
  }
  return w;
}

void ExperimentConfig::validate() const {
  if (d == 0 || d_out == 0 || n == 0) throw std::invalid_argument("config: d, d_out, n must be >= 1");
  if (k < 1 || k > n) throw std::invalid_argument("config: need 1 <= k <= n");
  if (N_batch < 2) throw std::invalid_argument("config: N_batch must be >= 2");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("config: lr must be >= 0");
  if (n_domains < 1) throw std::invalid_argument("config: n_domains must be >= 1");
  if (!(domain_spread >= 0.0)) throw std::invalid_argument("config: domain_spread must be >= 0");
  if (!(noise_std >= 0.0)) throw std::invalid_argument("config: noise_std must be >= 0");
  if (seeds.empty()) throw std::invalid_argument("config: at least one seed required");
  if (overlap_neighbors < 1) throw std::invalid_argument("config: overlap_neighbors must be >= 1");
  weights.validate();
  if (ablation == Ablation::Ours &&
      (weights.alpha == 0.0 || weights.beta == 0.0 || weights.gamma == 0.0))
    throw std::invalid_argument("config: the ours preset needs alpha, beta, gamma all nonzero");
}

DomainModel make_domain_model(const ExperimentConfig& config, Rng& rng) {
  const std::size_t d = config.d;
  DomainModel m;
  // Orthonormal directions while they fit in d dimensions, random unit vectors after.
  std::vector<std::vector<double>> basis;
  for (std::size_t c = 0; c < config.n_domains; ++c) {
    std::vector<double> v(d);
    double nrm = 0.0;
    do {
      for (double& x : v) x = rng.normal();
      if (basis.size() < d)
        for (const auto& b : basis) {
          const double proj = dot(v, b);
          for (std::size_t p = 0; p < d; ++p) v[p] -= proj * b[p];
        }
      nrm = std::sqrt(squared_norm(v));
    } while (nrm < 1e-8);
    for (double& x : v) x /= nrm;
    basis.push_back(v);
    // Orthonormal u_a, u_b at radius spread/sqrt(2) sit exactly spread apart.
    for (double& x : v) x *= config.domain_spread / std::sqrt(2.0);
    m.means.push_back(std::move(v));
  }
  const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t c = 0; c < config.n_domains; ++c)
    m.maps.push_back(gaussian_sample(rng, d, config.d_out, 0.0, w_std));
  double z = 0.0;
  for (std::size_t c = 0; c < config.n_domains; ++c) z += 1.0 / static_cast<double>(c + 1);
  double acc = 0.0;
  for (std::size_t c = 0; c < config.n_domains; ++c) {
    acc += 1.0 / static_cast<double>(c + 1) / z;
    m.cumulative.push_back(acc);
  }
  m.cumulative.back() = 1.0;
  return m;
}

Batch generate_batch(const ExperimentConfig& config, const DomainModel& model, Rng& rng) {
  const std::size_t N = config.N_batch;
  Batch b{Matrix(N, config.d), Matrix(N, config.d_out), std::vector<int>(N)};
  for (std::size_t i = 0; i < N; ++i) {
    const double u = rng.uniform();
    std::size_t c = 0;
    while (c + 1 < model.cumulative.size() && u >= model.cumulative[c]) ++c;
    b.domains[i] = static_cast<int>(c);
    auto x = b.tokens.row(i);
    for (std::size_t p = 0; p < config.d; ++p) x[p] = model.means[c][p] + rng.normal();
    auto t = b.targets.row(i);
    const Matrix& w = model.maps[c];
    for (std::size_t p = 0; p < config.d; ++p)
      for (std::size_t q = 0; q < config.d_out; ++q) t[q] += x[p] * w(p, q);
    if (config.noise_std > 0.0)
      for (double& v : t) v += config.noise_std * rng.normal();
  }
  return b;
}

Batch generate_batch(const ExperimentConfig& config, std::uint64_t seed, std::size_t step) {
  Rng model_rng(derive_seed(seed, kDomainStream));
  const DomainModel model = make_domain_model(config, model_rng);
  Rng batch_rng(derive_seed(derive_seed(seed, kBatchStream), step));
  return generate_batch(config, model, batch_rng);
}

MoeParams init_params(const ExperimentConfig& config, Rng& rng) {
  const double std = 1.0 / std::sqrt(static_cast<double>(config.d));
  MoeParams p;
  p.router = gaussian_sample(rng, config.d, config.n, 0.0, std);
  for (std::size_t j = 0; j < config.n; ++j)
    p.experts.push_back(gaussian_sample(rng, config.d, config.d_out, 0.0, std));
  p.k = config.k;
  return p;
}

TrainingDiverged::TrainingDiverged(std::size_t step, TrainLog partial)
    : NonFiniteError("training diverged at step " + std::to_string(step)),
      step_(step),
      partial_(std::move(partial)) {}

MetricsRecord compute_metrics(std::size_t step, const LossBreakdown& losses,
                              const RoutingState& state, const ExpertOutputs& outputs,
                              std::size_t overlap_neighbors) {
  MetricsRecord r;
  r.step = step;
  r.loss_h = losses.l_h;
  r.loss_aux = losses.l_aux;
  r.loss_o = losses.l_o;
  r.loss_v = losses.l_v;
  r.total = losses.total;

  std::vector<double> counts(state.num_experts());
  for (std::size_t j = 0; j < counts.size(); ++j)
    counts[j] = state.loads_f[j] * static_cast<double>(state.num_tokens());
  r.maxvio = maxvio(counts);
  r.routing_variance = routing_variance(state.probs);
  r.score_variance = score_variance(state);

  std::size_t points = 0;
  for (const auto& tok : outputs.per_token) points += tok.size();
  const std::size_t d_out = outputs.combined.cols();
  Matrix emb(points, d_out);
  std::vector<int> labels;
  labels.reserve(points);
  std::size_t row = 0;
  for (const auto& tok : outputs.per_token)
    for (const auto& so : tok) {
      std::copy(so.value.begin(), so.value.end(), emb.row(row++).begin());
      labels.push_back(static_cast<int>(so.expert));
    }
  if (points >= 2) r.expert_overlap = expert_overlap(emb, labels, overlap_neighbors);
  const std::set<int> distinct(labels.begin(), labels.end());
  // All outputs from one expert: no clustering to score.
  r.silhouette = distinct.size() >= 2 ? silhouette(emb, labels) : 0.0;
  return r;
}

TrainLog train(const ExperimentConfig& config, std::optional<std::uint64_t> seed) {
  config.validate();
  TrainLog log;
  log.config = config;
  log.seed = seed.value_or(config.seeds.front());

  Rng init_rng(derive_seed(log.seed, kInitStream));
  MoeParams params = init_params(config, init_rng);
  Rng model_rng(derive_seed(log.seed, kDomainStream));
  const DomainModel model = make_domain_model(config, model_rng);
  const std::uint64_t batch_base = derive_seed(log.seed, kBatchStream);
  const LossWeights weights = ablation_weights(config.ablation, config.weights);

  std::optional<Batch> fixed;
  std::optional<ScalePair> scales;
  log.records.reserve(config.steps);
  for (std::size_t step = 0; step < config.steps; ++step) {
    Batch fresh;
    if (!config.fixed_batch || !fixed) {
      Rng batch_rng(derive_seed(batch_base, step));
      fresh = generate_batch(config, model, batch_rng);
      if (config.fixed_batch) fixed = std::move(fresh);
    }
    const Batch& batch = config.fixed_batch ? *fixed : fresh;

    ForwardBackwardResult fb;
    try {
      fb = forward_backward(params, batch.tokens, batch.targets, weights, scales);
      if (!std::isfinite(fb.losses.total)) throw NonFiniteError("non-finite total loss");
    } catch (const NonFiniteError&) {
      log.final_params = params;
      throw TrainingDiverged(step, std::move(log));
    }
    scales = fb.losses.scales();
    log.records.push_back(
        compute_metrics(step, fb.losses, fb.state, fb.outputs, config.overlap_neighbors));

    if (config.lr != 0.0) {
      axpy(-config.lr, fb.grads.d_router, params.router);
      for (std::size_t j = 0; j < params.experts.size(); ++j)
        axpy(-config.lr, fb.grads.d_experts[j], params.experts[j]);
    }
  }
  log.final_params = std::move(params);
  return log;
}

MetricsRecord trailing_mean(const std::vector<MetricsRecord>& records, std::size_t window) {
  MetricsRecord m;
  if (records.empty()) return m;
  const std::size_t count = std::min(window, records.size());
  const std::size_t first = records.size() - count;
  for (std::size_t i = first; i < records.size(); ++i) {
    const auto& r = records[i];
    m.loss_h += r.loss_h;
    m.loss_aux += r.loss_aux;
    m.loss_o += r.loss_o;
    m.loss_v += r.loss_v;
    m.total += r.total;
    m.maxvio += r.maxvio;
    m.expert_overlap += r.expert_overlap;
    m.routing_variance += r.routing_variance;
    m.score_variance += r.score_variance;
    m.silhouette += r.silhouette;
  }
  const double c = static_cast<double>(count);
  for (double* f : {&m.loss_h, &m.loss_aux, &m.loss_o, &m.loss_v, &m.total, &m.maxvio,
                    &m.expert_overlap, &m.routing_variance, &m.score_variance, &m.silhouette})
    *f /= c;
  m.step = records.back().step;
  return m;
}

std::vector<double> maxvio_curve(const TrainLog& log) {
  std::vector<double> curve;
  curve.reserve(log.records.size());
  for (const auto& r : log.records) curve.push_back(r.maxvio);
  return curve;
}

namespace {

MetricsRecord average(const std::vector<MetricsRecord>& rs) {
  MetricsRecord m;
  for (const auto& r : rs) {
    m.loss_h += r.loss_h;
    m.loss_aux += r.loss_aux;
    m.loss_o += r.loss_o;
    m.loss_v += r.loss_v;
    m.total += r.total;
    m.maxvio += r.maxvio;
    m.expert_overlap += r.expert_overlap;
    m.routing_variance += r.routing_variance;
    m.score_variance += r.score_variance;
    m.silhouette += r.silhouette;
    m.step = r.step;
  }
  const double c = static_cast<double>(rs.size());
  for (double* f : {&m.loss_h, &m.loss_aux, &m.loss_o, &m.loss_v, &m.total, &m.maxvio,
                    &m.expert_overlap, &m.routing_variance, &m.score_variance, &m.silhouette})
    *f /= c;
  return m;
}

void run_tasks(std::vector<std::function<void()>>& tasks, unsigned workers) {
  if (workers <= 1) {
    for (auto& t : tasks) t();
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < tasks.size(); i = next++) {
        try {
          tasks[i]();
        } catch (...) {
          std::lock_guard lock(failure_mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace

AblationSuite run_ablation_suite(const ExperimentConfig& base, unsigned workers) {
  if (base.seeds.size() < 3) throw std::invalid_argument("ablation suite needs >= 3 seeds");
  AblationSuite suite;
  std::vector<std::function<void()>> tasks;
  for (Ablation a : kAllAblations) {
    auto& slot = suite.logs[a];
    slot.resize(base.seeds.size());
    for (std::size_t s = 0; s < base.seeds.size(); ++s) {
      tasks.emplace_back([&base, &slot, a, s] {
        ExperimentConfig cfg = base;
        cfg.ablation = a;
        slot[s] = train(cfg, base.seeds[s]);
      });
    }
  }
  run_tasks(tasks, workers);

  const auto& reference = suite.logs.at(Ablation::OnlyAux);
  for (Ablation a : kAllAblations) {
    const auto& logs = suite.logs.at(a);
    std::vector<MetricsRecord> finals;
    double rmse_sum = 0.0;
    for (std::size_t s = 0; s < logs.size(); ++s) {
      finals.push_back(trailing_mean(logs[s].records));
      const auto curve = maxvio_curve(logs[s]);
      const auto ref = maxvio_curve(reference[s]);
      rmse_sum += curve.empty() ? 0.0 : rmse(curve, ref);
    }
    suite.summary[a] = {average(finals), rmse_sum / static_cast<double>(logs.size())};
  }
  return suite;
}

}  // namespace moelab
