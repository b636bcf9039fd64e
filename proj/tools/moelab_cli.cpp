#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"

#include "moelab/experiment.hpp"
#include "moelab/gradients.hpp"
#include "moelab/io.hpp"
#include "moelab/lemma_lab.hpp"

namespace fs = std::filesystem;
using moelab::io::format_real;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct CommonFlags {
  std::string config_path;
  std::string outdir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::size_t log_every = 1;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "key=value config file")->check(CLI::ExistingFile);
  cmd->add_option("--outdir", f.outdir, "output directory (default: $MOELAB_OUTDIR or .)");
  cmd->add_option("--seed", f.seed, "random seed");
  cmd->add_option("--steps", f.steps, "training steps");
  cmd->add_option("--log-every", f.log_every, "keep every n-th step in CSV logs")
      ->check(CLI::PositiveNumber);
}

fs::path resolve_outdir(const CommonFlags& f) {
  if (!f.outdir.empty()) return f.outdir;
  if (const char* env = std::getenv("MOELAB_OUTDIR"); env && *env) return env;
  return ".";
}

moelab::ExperimentConfig load_config(const CommonFlags& f) {
  moelab::ExperimentConfig config;
  if (!f.config_path.empty())
    moelab::io::apply_config(moelab::io::read_key_value_file(f.config_path), config);
  if (f.steps) config.steps = *f.steps;
  return config;
}

nlohmann::json config_json(const moelab::ExperimentConfig& config) {
  std::istringstream text(moelab::io::format_config(config));
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [k, v] : moelab::io::parse_key_values(text)) out[k] = v;
  return out;
}

class Manifest {
 public:
  Manifest(std::string command, fs::path outdir)
      : command_(std::move(command)), outdir_(std::move(outdir)),
        start_(std::chrono::steady_clock::now()) {}

  nlohmann::json& data() { return extra_; }

  void write() const {
    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start_;
    nlohmann::json j = extra_;
    j["command"] = command_;
    j["version"] = MOELAB_VERSION;
    j["outdir"] = fs::absolute(outdir_).string();
    j["duration_seconds"] = elapsed.count();
    fs::create_directories(outdir_);
    std::ofstream out(outdir_ / "manifest.json", std::ios::binary);
    out << j.dump(2) << '\n';
  }

 private:
  std::string command_;
  fs::path outdir_;
  std::chrono::steady_clock::time_point start_;
  nlohmann::json extra_ = nlohmann::json::object();
};

void write_csv(const fs::path& path, const std::vector<moelab::MetricsRecord>& records,
               std::size_t log_every) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  moelab::io::write_log_csv(out, records, log_every);
}

int run_gradcheck(const CommonFlags& f, double h) {
  const std::uint64_t seed = f.seed.value_or(7);
  Manifest manifest("gradcheck", resolve_outdir(f));
  const auto report = moelab::run_gradcheck_suite(seed, h);
  for (std::size_t i = 0; i < report.instances.size(); ++i) {
    const auto& inst = report.instances[i];
    std::cout << "instance " << i << " seed=" << inst.seed << " N=" << inst.N << " n=" << inst.n
              << " k=" << inst.k << " d=" << inst.d << " d_out=" << inst.d_out
              << " alpha=" << format_real(inst.weights.alpha)
              << " beta=" << format_real(inst.weights.beta)
              << " gamma=" << format_real(inst.weights.gamma)
              << " aux="
              << (inst.weights.aux_normalization == moelab::AuxNormalization::Paper ? "paper"
                                                                                   : "switch")
              << " dynamic=" << (inst.weights.dynamic_scaling ? 1 : 0)
              << " prev_scales=" << (inst.prev_scales ? 1 : 0)
              << " max_rel_err=" << format_real(inst.max_rel_err) << '\n';
  }
  const bool ok = report.passed(moelab::kGradcheckTolerance);
  std::cout << "max_rel_err " << format_real(report.max_rel_err) << " (tolerance "
            << format_real(moelab::kGradcheckTolerance) << ", h=" << format_real(h) << ")\n";
  manifest.data()["seed"] = seed;
  manifest.data()["h"] = h;
  manifest.data()["max_rel_err"] = report.max_rel_err;
  manifest.data()["passed"] = ok;
  manifest.write();
  if (!ok) {
    std::cout << "FAIL worst instance seed " << report.worst_seed << '\n';
    return kExitFailure;
  }
  std::cout << "PASS\n";
  return kExitOk;
}

int run_lemma(const CommonFlags& f, std::size_t N, std::size_t n, std::size_t k, double delta) {
  if (k < 2) {
    std::cerr << "lemma: k must be at least 2; with k=1 every selected score is 1 and no "
                 "perturbation keeps the rows summing to one\n";
    return kExitUsage;
  }
  Manifest manifest("lemma", resolve_outdir(f));
  manifest.data()["N"] = N;
  manifest.data()["n"] = n;
  manifest.data()["k"] = k;
  manifest.data()["delta"] = delta;
  std::cout << "support N=" << N << " n=" << n << " k=" << k << " delta=" << format_real(delta)
            << '\n';
  const auto inst = moelab::lemma::make_instance(N, n, k, delta);
  if (!inst) {
    std::cout << "no cycle: the balanced support is a forest\n";
    manifest.data()["cycle"] = nullptr;
    manifest.write();
    return kExitOk;
  }
  const auto cert = moelab::lemma::certify_lemma1(inst->base, inst->perturbed, inst->cycle,
                                                  inst->delta, inst->k);
  std::cout << "cycle " << inst->cycle.to_string() << " (length " << inst->cycle.length()
            << ")\n";
  for (const auto* clause : cert.clauses())
    std::cout << clause->name << ' ' << (clause->passed ? "pass" : "FAIL")
              << " max_deviation=" << format_real(clause->max_deviation) << '\n';
  std::cout << "expected_variance " << format_real(cert.expected_variance) << '\n';
  std::cout << "cycle_row_variances";
  for (double v : cert.cycle_row_variances) std::cout << ' ' << format_real(v);
  std::cout << '\n' << (cert.passed() ? "PASS" : "FAIL") << '\n';
  manifest.data()["cycle"] = inst->cycle.to_string();
  manifest.data()["passed"] = cert.passed();
  manifest.write();
  return cert.passed() ? kExitOk : kExitFailure;
}

int run_train(const CommonFlags& f, const std::string& ablation) {
  auto config = load_config(f);
  if (!ablation.empty()) {
    const auto a = moelab::parse_ablation(ablation);
    if (!a) throw moelab::io::ConfigError("unknown ablation '" + ablation + "'");
    config.ablation = *a;
  }
  config.validate();
  const std::uint64_t seed = f.seed.value_or(config.seeds.front());
  const fs::path outdir = resolve_outdir(f);
  fs::create_directories(outdir);
  const fs::path csv = outdir / moelab::io::log_file_name(config.ablation, seed);
  Manifest manifest("train", outdir);
  manifest.data()["config"] = config_json(config);
  manifest.data()["seed"] = seed;
  manifest.data()["log"] = csv.filename().string();

  try {
    const auto log = moelab::train(config, seed);
    write_csv(csv, log.records, f.log_every);
    manifest.write();
    std::cout << "wrote " << csv.string() << " (" << log.records.size() << " steps)\n";
    if (!log.records.empty()) {
      const auto& last = log.records.back();
      std::cout << "final loss_h=" << format_real(last.loss_h)
                << " maxvio=" << format_real(last.maxvio)
                << " expert_overlap=" << format_real(last.expert_overlap)
                << " score_variance=" << format_real(last.score_variance) << '\n';
    }
    return kExitOk;
  } catch (const moelab::TrainingDiverged& e) {
    write_csv(csv, e.partial().records, f.log_every);
    manifest.data()["diverged_at_step"] = e.step();
    manifest.write();
    std::cerr << "train: " << e.what() << "; partial log in " << csv.string() << '\n';
    return kExitFailure;
  }
}

int run_ablate(const CommonFlags& f, unsigned workers) {
  auto config = load_config(f);
  if (f.seed) config.seeds = {*f.seed, *f.seed + 1, *f.seed + 2};
  config.validate();
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  const fs::path outdir = resolve_outdir(f);
  fs::create_directories(outdir);
  Manifest manifest("ablate", outdir);
  manifest.data()["config"] = config_json(config);
  manifest.data()["workers"] = workers;

  const auto suite = moelab::run_ablation_suite(config, workers);
  nlohmann::json logs = nlohmann::json::array();
  for (const auto& [ablation, runs] : suite.logs)
    for (const auto& log : runs) {
      const auto name = moelab::io::log_file_name(ablation, log.seed);
      write_csv(outdir / name, log.records, f.log_every);
      logs.push_back(name);
    }
  {
    std::ofstream out(outdir / "summary.csv", std::ios::binary);
    moelab::io::write_summary_csv(out, suite);
  }
  manifest.data()["logs"] = logs;
  manifest.write();

  std::cout << "wrote " << logs.size() << " logs and summary.csv to " << outdir.string() << '\n';
  for (moelab::Ablation a : moelab::kAllAblations) {
    const auto& s = suite.summary.at(a);
    std::cout << moelab::ablation_name(a) << " maxvio=" << format_real(s.final_means.maxvio)
              << " expert_overlap=" << format_real(s.final_means.expert_overlap)
              << " score_variance=" << format_real(s.final_means.score_variance)
              << " loss_h=" << format_real(s.final_means.loss_h)
              << " rmse_maxvio_vs_onlyaux=" << format_real(s.rmse_maxvio_vs_onlyaux) << '\n';
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moelab: MoE load balancing and specialization lab"};
  app.set_help_flag("--help", "print this help and exit");
  app.set_version_flag("--version", MOELAB_VERSION);
  app.require_subcommand(1);

  CommonFlags common;

  auto* gradcheck = app.add_subcommand("gradcheck", "compare analytic gradients with finite differences");
  add_common(gradcheck, common);
  double h = moelab::kGradcheckStep;
  gradcheck->add_option("--h", h, "central difference step")->check(CLI::PositiveNumber);

  auto* lemma = app.add_subcommand("lemma", "certify the cycle perturbation construction");
  add_common(lemma, common);
  std::size_t N = 2, n = 2, k = 2;
  double delta = 0.25;
  lemma->add_option("--N", N, "tokens")->check(CLI::PositiveNumber);
  lemma->add_option("--n", n, "experts")->check(CLI::PositiveNumber);
  lemma->add_option("--k", k, "experts per token");
  lemma->add_option("--delta", delta, "perturbation size");

  auto* train = app.add_subcommand("train", "train one ablation on one seed");
  add_common(train, common);
  std::string ablation;
  train->add_option("--ablation", ablation, "ablation preset (overrides config)");

  auto* ablate = app.add_subcommand("ablate", "run all five ablations on every seed");
  add_common(ablate, common);
  unsigned workers = 0;
  ablate->add_option("--workers", workers, "parallel trainings (0: one per core)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gradcheck) return run_gradcheck(common, h);
    if (*lemma) return run_lemma(common, N, n, k, delta);
    if (*train) return run_train(common, ablation);
    if (*ablate) return run_ablate(common, workers);
  } catch (const moelab::io::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}
