#include "moelab/io.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string_view>

namespace moelab::io {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

double to_real(const std::string& key, std::string_view text) {
  double v = 0.0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc{} || ptr != end || text.empty())
    throw ConfigError("config: '" + key + "' expects a real number, got '" + std::string(text) + "'");
  return v;
}

std::uint64_t to_u64(const std::string& key, std::string_view text) {
  std::uint64_t v = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc{} || ptr != end || text.empty())
    throw ConfigError("config: '" + key + "' expects a non-negative integer, got '" +
                      std::string(text) + "'");
  return v;
}

bool to_bool(const std::string& key, std::string_view text) {
  if (text == "true" || text == "1" || text == "on" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "off" || text == "no") return false;
  throw ConfigError("config: '" + key + "' expects a boolean, got '" + std::string(text) + "'");
}

}  // namespace

std::map<std::string, std::string> parse_key_values(std::istream& in) {
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view view = line;
    if (auto hash = view.find('#'); hash != std::string_view::npos) view = view.substr(0, hash);
    view = trim(view);
    if (view.empty()) continue;
    const auto eq = view.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    const auto key = trim(view.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    out[std::string(key)] = std::string(trim(view.substr(eq + 1)));
  }
  return out;
}

std::map<std::string, std::string> read_key_value_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse_key_values(in);
}

void apply_config(const std::map<std::string, std::string>& values, ExperimentConfig& c) {
  for (const auto& [key, value] : values) {
    if (key == "d") c.d = to_u64(key, value);
    else if (key == "d_out") c.d_out = to_u64(key, value);
    else if (key == "n") c.n = to_u64(key, value);
    else if (key == "k") c.k = to_u64(key, value);
    else if (key == "N_batch") c.N_batch = to_u64(key, value);
    else if (key == "steps") c.steps = to_u64(key, value);
    else if (key == "lr") c.lr = to_real(key, value);
    else if (key == "n_domains") c.n_domains = to_u64(key, value);
    else if (key == "domain_spread") c.domain_spread = to_real(key, value);
    else if (key == "noise_std") c.noise_std = to_real(key, value);
    else if (key == "alpha") c.weights.alpha = to_real(key, value);
    else if (key == "beta") c.weights.beta = to_real(key, value);
    else if (key == "gamma") c.weights.gamma = to_real(key, value);
    else if (key == "eps_norm") c.weights.eps_norm = to_real(key, value);
    else if (key == "tau_gate") c.weights.tau_gate = to_real(key, value);
    else if (key == "dynamic_scaling") c.weights.dynamic_scaling = to_bool(key, value);
    else if (key == "fixed_batch") c.fixed_batch = to_bool(key, value);
    else if (key == "overlap_neighbors") c.overlap_neighbors = to_u64(key, value);
    else if (key == "aux_normalization") {
      if (value == "paper") c.weights.aux_normalization = AuxNormalization::Paper;
      else if (value == "switch") c.weights.aux_normalization = AuxNormalization::Switch;
      else throw ConfigError("config: aux_normalization must be 'paper' or 'switch'");
    } else if (key == "ablation") {
      auto a = parse_ablation(value);
      if (!a) throw ConfigError("config: unknown ablation '" + value + "'");
      c.ablation = *a;
    } else if (key == "seeds") {
      std::vector<std::uint64_t> seeds;
      std::string_view rest = value;
      while (!rest.empty()) {
        const auto comma = rest.find(',');
        seeds.push_back(to_u64(key, trim(rest.substr(0, comma))));
        if (comma == std::string_view::npos) break;
        rest = rest.substr(comma + 1);
      }
      if (seeds.empty()) throw ConfigError("config: seeds must list at least one seed");
      c.seeds = std::move(seeds);
    } else {
      throw ConfigError("config: unknown key '" + key + "'");
    }
  }
}

std::string format_real(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 9);
  return std::string(buf, ptr);
}

std::string format_config(const ExperimentConfig& c) {
  std::ostringstream out;
  std::string seeds;
  for (std::size_t i = 0; i < c.seeds.size(); ++i) seeds += (i ? "," : "") + std::to_string(c.seeds[i]);
  out << "d=" << c.d << '\n'
      << "d_out=" << c.d_out << '\n'
      << "n=" << c.n << '\n'
      << "k=" << c.k << '\n'
      << "N_batch=" << c.N_batch << '\n'
      << "steps=" << c.steps << '\n'
      << "lr=" << format_real(c.lr) << '\n'
      << "n_domains=" << c.n_domains << '\n'
      << "domain_spread=" << format_real(c.domain_spread) << '\n'
      << "noise_std=" << format_real(c.noise_std) << '\n'
      << "seeds=" << seeds << '\n'
      << "alpha=" << format_real(c.weights.alpha) << '\n'
      << "beta=" << format_real(c.weights.beta) << '\n'
      << "gamma=" << format_real(c.weights.gamma) << '\n'
      << "eps_norm=" << format_real(c.weights.eps_norm) << '\n'
      << "tau_gate=" << format_real(c.weights.tau_gate) << '\n'
      << "aux_normalization="
      << (c.weights.aux_normalization == AuxNormalization::Paper ? "paper" : "switch") << '\n'
      << "dynamic_scaling=" << (c.weights.dynamic_scaling ? "true" : "false") << '\n'
      << "ablation=" << ablation_name(c.ablation) << '\n'
      << "fixed_batch=" << (c.fixed_batch ? "true" : "false") << '\n'
      << "overlap_neighbors=" << c.overlap_neighbors << '\n';
  return out.str();
}

void write_log_csv(std::ostream& out, const std::vector<MetricsRecord>& records,
                   std::size_t log_every) {
  if (log_every == 0) log_every = 1;
  out << kCsvHeader << '\n';
  for (const auto& r : records) {
    if (r.step % log_every != 0) continue;
    out << r.step;
    for (double v : {r.loss_h, r.loss_aux, r.loss_o, r.loss_v, r.total, r.maxvio,
                     r.expert_overlap, r.routing_variance, r.score_variance, r.silhouette})
      out << ',' << format_real(v);
    out << '\n';
  }
}

std::vector<MetricsRecord> read_log_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader)
    throw ConfigError("log csv: missing or unexpected header");
  std::vector<MetricsRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string_view> cells;
    std::string_view rest = line;
    while (true) {
      const auto comma = rest.find(',');
      cells.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest = rest.substr(comma + 1);
    }
    if (cells.size() != 11) throw ConfigError("log csv: expected 11 columns");
    MetricsRecord r;
    r.step = to_u64("step", cells[0]);
    double* fields[] = {&r.loss_h, &r.loss_aux, &r.loss_o, &r.loss_v, &r.total, &r.maxvio,
                        &r.expert_overlap, &r.routing_variance, &r.score_variance, &r.silhouette};
    for (std::size_t i = 0; i < 10; ++i) *fields[i] = to_real("value", cells[i + 1]);
    out.push_back(r);
  }
  return out;
}

std::string log_file_name(Ablation ablation, std::uint64_t seed) {
  return "log_" + std::string(ablation_name(ablation)) + "_" + std::to_string(seed) + ".csv";
}

void write_summary_csv(std::ostream& out, const AblationSuite& suite) {
  out << "ablation,loss_h,loss_aux,loss_o,loss_v,total,maxvio,expert_overlap,routing_variance,"
         "score_variance,silhouette,rmse_maxvio_vs_onlyaux\n";
  for (Ablation a : kAllAblations) {
    const auto it = suite.summary.find(a);
    if (it == suite.summary.end()) continue;
    const auto& m = it->second.final_means;
    out << ablation_name(a);
    for (double v : {m.loss_h, m.loss_aux, m.loss_o, m.loss_v, m.total, m.maxvio,
                     m.expert_overlap, m.routing_variance, m.score_variance, m.silhouette,
                     it->second.rmse_maxvio_vs_onlyaux})
      out << ',' << format_real(v);
    out << '\n';
  }
}

}  // namespace moelab::io
