#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "privlab/bounds.hpp"
#include "privlab/federation.hpp"

namespace privlab {

/// Flat `section.key` settings. Only keys present in defaults() are accepted, so a typo
/// fails loudly instead of being ignored.
class Settings {
 public:
  static Settings defaults();

  bool has(std::string_view key) const;
  /// Throws ConfigError naming the key when it is unknown.
  void set(std::string_view key, std::string value);
  const std::string& get(std::string_view key) const;

  double number(std::string_view key) const;
  std::size_t count(std::string_view key) const;
  std::uint64_t u64(std::string_view key) const;
  bool flag(std::string_view key) const;
  /// Comma-separated list with surrounding blanks trimmed; empty string gives an empty list.
  std::vector<std::string> list(std::string_view key) const;

  const std::map<std::string, std::string, std::less<>>& entries() const noexcept { return values_; }

  /// TOML subset: one [section] per prefix, `key = value` lines, strings quoted.
  void write_toml(std::ostream& out) const;
  /// Applies every `key = value` of a file written by write_toml (or by hand).
  void read_toml(std::istream& in);

 private:
  std::map<std::string, std::string, std::less<>> values_;
};

/// "key=value" from the command line.
void apply_assignment(Settings& s, std::string_view assignment);

const std::vector<std::string>& preset_names();
/// Defaults with the preset's overrides; ConfigError for an unknown name.
Settings preset_settings(std::string_view name);

// Builders from settings, shared by the runner and the tests.
ModelSpec model_from(const Settings& s, std::uint64_t seed);
FedConfig fed_from(const Settings& s, std::uint64_t seed);
DefensePlan defense_from(const Settings& s);
AttackSchedule attack_from(const Settings& s, std::uint64_t seed);
FederationData data_from(const Settings& s, std::uint64_t seed);
/// Seed of run `index` under the root seed run.seed.
std::uint64_t run_seed(const Settings& s, std::size_t index);

struct ResultRow {
  std::string preset;
  std::string variable;
  std::string value;
  std::size_t seed = 0;
  std::string metric;
  double metric_value = 0.0;
};

/// Runs every (value, seed) of the preset described by `s`, writing results.csv,
/// config.resolved.toml and per-run logs under `out`. Seeds run on up to `jobs` threads;
/// rows come back in (seed, value, metric) order whatever the thread count.
std::vector<ResultRow> run_preset(const Settings& s, const std::filesystem::path& out, std::size_t jobs = 1);

/// Long format: preset,variable,value,seed,metric,metric_value. Doubles use 17 significant digits.
void write_results_csv(std::ostream& out, const std::vector<ResultRow>& rows);
/// FormatError carrying the 1-based line number on malformed input.
std::vector<ResultRow> read_results_csv(std::istream& in);

/// Spearman rank correlation with average ranks for ties. A constant side gives 0 and sets
/// `degenerate`.
double spearman(const std::vector<double>& x, const std::vector<double>& y, bool* degenerate = nullptr);

struct Trend {
  std::string preset, variable, metric;
  std::size_t points = 0;   ///< distinct swept values with at least one finite metric
  double rho = 0.0;         ///< between the value and the median over seeds
  bool degenerate = false;
  bool numeric = true;      ///< false when the swept values are labels; rho is then 0
};
std::vector<Trend> summarize(const std::vector<ResultRow>& rows);
void write_trends(std::ostream& out, const std::vector<Trend>& trends);

/// JSON object with exactly the fields p, B, d_star, delta, single_bound_bits, multi_bound_bits.
std::string bounds_json(const BoundInputs& in);

/// Dense MLP whose layout matches `layout`, reading layer widths off the slot sizes.
ModelSpec infer_mlp(const std::vector<LayerSlot>& layout, std::size_t input_dim);

}  // namespace privlab
