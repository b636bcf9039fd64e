#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "moelab/experiment.hpp"

namespace moelab::io {

class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Flat `key = value` pairs, one per line, `#` starts a comment.
std::map<std::string, std::string> parse_key_values(std::istream& in);
std::map<std::string, std::string> read_key_value_file(const std::filesystem::path& path);

/// Applies recognised keys (ExperimentConfig and LossWeights field names) to
/// config. Unknown keys and malformed values throw ConfigError.
void apply_config(const std::map<std::string, std::string>& values, ExperimentConfig& config);

/// key=value rendering of every config field, parseable by apply_config.
std::string format_config(const ExperimentConfig& config);

inline constexpr const char* kCsvHeader =
    "step,loss_h,loss_aux,loss_o,loss_v,total,maxvio,expert_overlap,routing_variance,"
    "score_variance,silhouette";

/// Nine significant digits, '.' decimal separator, independent of locale.
std::string format_real(double v);

/// Header plus one row per record whose step is a multiple of log_every.
void write_log_csv(std::ostream& out, const std::vector<MetricsRecord>& records,
                   std::size_t log_every = 1);
std::vector<MetricsRecord> read_log_csv(std::istream& in);

std::string log_file_name(Ablation ablation, std::uint64_t seed);

void write_summary_csv(std::ostream& out, const AblationSuite& suite);

}  // namespace moelab::io
