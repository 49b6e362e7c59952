#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "icl/analysis.hpp"
#include "icl/config.hpp"
#include "icl/record.hpp"
#include "icl/trainer.hpp"

namespace icl::runner {

struct CellResult {
  RunRecord record;
  net::ParamSet<float> params;
  std::vector<trainer::HistoryPoint> history;
};

// Layout under an output directory:
//   runs/<run_id>/model.iclb (+ .json echo), history.json, record.json
//   store/decoder-<key>.iclb, store/encoder-<key>.iclb  (write-once, shared)
std::string run_dir(const std::string& out_dir, const std::string& id);
std::string checkpoint_path(const std::string& out_dir, const std::string& id);

// data generation -> (pretrained decoder / encoder, reused when present) ->
// train -> evaluation suite -> circuit probe. Writes the run's artifacts when
// out_dir is nonempty. Numeric failures are reported in the record status.
CellResult run_cell(const ExperimentConfig& cfg, const std::string& out_dir, std::ostream* log = nullptr);

// Config echo stored next to checkpoints (resolved config without the sweep).
json config_echo(const ExperimentConfig& cfg);

struct LoadedRun {
  ExperimentConfig cfg;
  net::ParamSet<float> params;
};
// Checkpoint plus the experiment config echoed beside it.
LoadedRun load_run(const std::string& checkpoint);

struct SweepSummary {
  int cells = 0;
  int skipped = 0;  // already in the ledger
  int added = 0;
  int failed = 0;
  int diverged = 0;
};

// Cartesian product of axes x seeds; cells whose run id is already in the
// ledger are skipped. Each cell runs in its own forked process, at most
// `workers` at a time; only this process appends to the ledger.
SweepSummary run_sweep(const ExperimentConfig& cfg, const std::string& out_dir, const std::string& ledger_path,
                       int workers, std::ostream* log = nullptr);

// Long-format grouped statistics: group columns..., metric, mean, std, n.
std::string export_plot_data(const std::vector<RunRecord>& records, const std::vector<std::string>& group_by,
                             const std::vector<std::string>& metrics);

// Circuit aggregates plus CLA: the default predictors of ICL across runs.
const std::vector<std::string>& default_features();

// One row per record whose requested columns are all finite; keys are run ids.
void design_matrix(const std::vector<RunRecord>& records, const std::vector<std::string>& features,
                   const std::string& target, analysis::Design& x, std::vector<double>& y,
                   std::vector<std::string>& keys);

json history_json(const std::vector<trainer::HistoryPoint>& history);
json record_json(const RunRecord& r);

}  // namespace icl::runner
