#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "icl/circuits.hpp"

namespace icl {

inline constexpr const char* kResultsSchema = "icl-results/1";

struct RunRecord {
  std::string run_id;
  uint64_t seed = 0;
  std::string status;  // converged | step_cap | diverged | failed
  std::string stage;
  std::string mode;  // unimodal | multimodal
  std::string pe;
  int n_layers = 0;
  int n_heads = 0;
  int d_model = 0;
  bool encoder = false;
  int N = 0, B = 0, L1 = 0, L2 = 0;
  int K1 = 0, D1 = 0, K2 = 0, D2 = 0;
  double eps1 = 0, alpha1 = 0, eps2 = 0, alpha2 = 0;
  double lr = 0, weight_decay = 0;
  int batch_size = 0;
  int64_t max_steps = 0;
  int64_t steps = 0;
  int64_t converged_step = -1;
  double final_loss = 0;
  double iwl = 0, icl_novel = 0, icl_swap = 0, icl = 0, cla = 0;
  // Layer aggregates of the first two layers, max and mean over heads.
  // Absent layers hold NaN and are written as empty cells.
  circuits::LayerAggregate layer1, layer2;
  double encoder_accuracy = -1;  // -1 when no encoder was pretrained
  double wall_seconds = 0;
  std::string config;    // compact JSON echo of the full experiment config
  std::string circuits;  // compact JSON of every per-head metric

  bool ok() const { return status == "converged" || status == "step_cap"; }
  void set_circuits(const circuits::CircuitMetrics& m);
  // Numeric column by name (e.g. "icl", "ph1_1", "ind_2_mean"). Empty when the
  // column is missing, non-numeric or blank.
  std::optional<double> metric(const std::string& column) const;
  // Every column except wall_seconds.
  bool same_result(const RunRecord& other) const;
};

const std::vector<std::string>& results_columns();
bool is_numeric_column(const std::string& name);
std::vector<std::string> to_row(const RunRecord& r);
RunRecord from_row(const std::vector<std::string>& row);

// RFC 4180 quoting.
std::string csv_escape(const std::string& field);
std::string csv_line(const std::vector<std::string>& fields);
// Parses a whole CSV document into rows of fields.
std::vector<std::vector<std::string>> parse_csv(const std::string& text);

// Round-trip exact decimal rendering of a double.
std::string format_double(double v);

class ResultsLedger {
 public:
  explicit ResultsLedger(std::string path);
  const std::string& path() const { return path_; }
  // Rows currently on disk. Throws ConfigError on a schema mismatch.
  std::vector<RunRecord> load() const;
  bool contains(const std::string& run_id) const;
  // Appends one row, creating the file with its header if needed.
  void append(const RunRecord& r) const;

 private:
  std::string path_;
};

}  // namespace icl
