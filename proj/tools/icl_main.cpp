#include <CLI11.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "icl/analysis.hpp"
#include "icl/checkpoint.hpp"
#include "icl/circuits.hpp"
#include "icl/config.hpp"
#include "icl/errors.hpp"
#include "icl/evalsuite.hpp"
#include "icl/gradients.hpp"
#include "icl/record.hpp"
#include "icl/runner.hpp"
#include "icl/studies.hpp"

using namespace icl;
using runner::json;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config;
  std::vector<std::string> sets;
  std::optional<uint64_t> seed;
  std::string out = "out";
  int workers = 0;  // 0: take sweep.workers from the config
  std::string ledger;
  std::string report;
};

std::string ledger_path(const Globals& g) {
  return g.ledger.empty() ? (fs::path(g.out) / "results.csv").string() : g.ledger;
}

runner::ExperimentConfig load(const Globals& g) {
  auto sets = g.sets;
  if (g.seed) sets.push_back("seed=" + std::to_string(*g.seed));
  if (g.config.empty()) return runner::parse_config_text("", sets);
  return runner::load_config(g.config, sets);
}

void emit(const Globals& g, const json& report) {
  const std::string text = report.dump(2) + "\n";
  std::cout << text;
  if (!g.report.empty()) net::write_file_atomic(g.report, text);
}

json head_json(const circuits::HeadId& h) {
  return {{"layer", h.layer + 1}, {"head", h.head + 1}, {"kind", circuits::to_string(h.kind)}};
}

json metrics_json(const circuits::CircuitMetrics& m) {
  json layers = json::array();
  for (int l = 0; l < m.n_layers; ++l) {
    const auto& a = m.layers[l];
    auto hm = [](const circuits::HeadMetrics& x) {
      return json{{"ph1", x.ph1}, {"ph2", x.ph2}, {"ind", x.ind}, {"tla", x.tla}};
    };
    json heads = json::array();
    for (int h = 0; h < m.n_heads; ++h) heads.push_back(hm(m.at(l, h)));
    layers.push_back({{"layer", l + 1}, {"max", hm(a.max)}, {"mean", hm(a.mean)}, {"heads", heads}});
  }
  return {{"n_episodes", m.n_episodes}, {"n_ind_defined", m.n_ind_defined}, {"layers", layers}};
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ','))
    if (!part.empty()) out.push_back(part);
  return out;
}

std::vector<RunRecord> usable(const std::vector<RunRecord>& all, int& excluded) {
  std::vector<RunRecord> out;
  excluded = 0;
  for (const auto& r : all)
    if (r.ok())
      out.push_back(r);
    else
      ++excluded;
  return out;
}

int cmd_train(const Globals& g) {
  const auto cfg = load(g);
  auto res = runner::run_cell(cfg, g.out, &std::cerr);
  ResultsLedger ledger(ledger_path(g));
  if (!ledger.contains(res.record.run_id)) ledger.append(res.record);
  json rep = runner::record_json(res.record);
  rep["checkpoint"] = runner::checkpoint_path(g.out, res.record.run_id);
  emit(g, rep);
  return res.record.status == "diverged" ? 3 : 0;
}

int cmd_eval(const Globals& g, const std::string& ckpt, int episodes) {
  auto run = runner::load_run(ckpt);
  datagen::Task task(run.cfg.data, run.cfg.seed);
  const int n = episodes > 0 ? episodes : run.cfg.eval.n_episodes;
  const auto s = evalsuite::evaluate_suite(run.params, run.cfg.model, task, n, run.cfg.eval.seed);
  auto rep = [](const evalsuite::EvalReport& r) {
    return json{{"mode", datagen::to_string(r.mode)}, {"n_episodes", r.n_episodes}, {"accuracy", r.accuracy},
                {"cla", r.cla}};
  };
  emit(g, {{"checkpoint", ckpt},
           {"iwl", rep(s.iwl)},
           {"icl_novel", rep(s.novel)},
           {"icl_swap", rep(s.swap)},
           {"icl", s.icl},
           {"cla", s.cla}});
  return 0;
}

int cmd_probe(const Globals& g, const std::string& ckpt) {
  auto run = runner::load_run(ckpt);
  datagen::Task task(run.cfg.data, run.cfg.seed);
  const auto m = circuits::probe(run.params, run.cfg.model, task, run.cfg.eval.probe_episodes, run.cfg.eval.probe_seed);
  json rep{{"checkpoint", ckpt}, {"metrics", metrics_json(m)}};
  if (m.n_layers >= 2) {
    const auto [pt, ind] = circuits::identify_heads(m);
    rep["previous_token_head"] = head_json(pt);
    rep["induction_head"] = head_json(ind);
  }
  emit(g, rep);
  return 0;
}

int cmd_knockout(const Globals& g, const std::string& ckpt, int episodes) {
  auto run = runner::load_run(ckpt);
  datagen::Task task(run.cfg.data, run.cfg.seed);
  const int n = episodes > 0 ? episodes : run.cfg.eval.n_episodes;
  const auto r = studies::knockout_study(run.params, run.cfg.model, task, n, run.cfg.eval.seed,
                                         run.cfg.eval.probe_episodes, run.cfg.eval.probe_seed);
  emit(g, {{"checkpoint", ckpt},
           {"previous_token_head", head_json(r.prev_token)},
           {"induction_head", head_json(r.induction)},
           {"icl_baseline", r.baseline},
           {"icl_induction_knockout", r.induction_knocked},
           {"icl_previous_token_knockout", r.prev_token_knocked},
           {"icl_both_knockout", r.both_knocked}});
  return 0;
}

int cmd_zero(const Globals& g, const std::string& ckpt, int episodes) {
  auto run = runner::load_run(ckpt);
  datagen::Task task(run.cfg.data, run.cfg.seed);
  const int n = episodes > 0 ? episodes : run.cfg.eval.n_episodes;
  const auto r = studies::zeroing_study(run.params, run.cfg.model, task, n, run.cfg.eval.seed);
  emit(g, {{"checkpoint", ckpt}, {"icl_full", r.full}, {"icl_zero_m1", r.zero_m1}, {"icl_zero_m2", r.zero_m2},
           {"chance", r.chance}});
  return 0;
}

int cmd_sweep(const Globals& g) {
  auto cfg = load(g);
  if (g.seed) cfg.sweep.seeds = {*g.seed};
  const int workers = g.workers > 0 ? g.workers : cfg.sweep.workers;
  const auto s = runner::run_sweep(cfg, g.out, ledger_path(g), workers, &std::cerr);
  emit(g, {{"ledger", ledger_path(g)},
           {"cells", s.cells},
           {"skipped", s.skipped},
           {"added", s.added},
           {"failed", s.failed},
           {"diverged", s.diverged}});
  return s.diverged > 0 ? 3 : 0;
}

void write_analysis_csv(const Globals& g, const std::string& name, const std::string& csv) {
  const auto path = (fs::path(g.out) / "analysis" / (name + ".csv")).string();
  net::write_file_atomic(path, csv);
}

int cmd_pearson(const Globals& g, const std::string& features, const std::string& target) {
  int excluded = 0;
  const auto recs = usable(ResultsLedger(ledger_path(g)).load(), excluded);
  const auto feats = features.empty() ? runner::default_features() : split_list(features);
  json rows = json::array();
  std::string csv = csv_line({"metric", "target", "pearson_rho", "n"});
  for (const auto& f : feats) {
    analysis::Design x;
    std::vector<double> y;
    std::vector<std::string> keys;
    runner::design_matrix(recs, {f}, target, x, y, keys);
    std::vector<double> xs(x.data(), x.data() + x.size());
    json row{{"metric", f}, {"n", xs.size()}};
    try {
      const double rho = analysis::pearson(xs, y);
      row["pearson_rho"] = rho;
      csv += csv_line({f, target, format_double(rho), std::to_string(xs.size())});
    } catch (const UndefinedMetric& e) {
      row["pearson_rho"] = nullptr;
      row["note"] = e.what();
      csv += csv_line({f, target, "", std::to_string(xs.size())});
    }
    rows.push_back(row);
  }
  write_analysis_csv(g, "pearson", csv);
  emit(g, {{"ledger", ledger_path(g)}, {"target", target}, {"excluded_runs", excluded}, {"correlations", rows}});
  return 0;
}

int cmd_forest(const Globals& g, const std::string& features, const std::string& target,
               const analysis::ForestConfig& fc, int splits) {
  int excluded = 0;
  const auto recs = usable(ResultsLedger(ledger_path(g)).load(), excluded);
  const auto feats = features.empty() ? runner::default_features() : split_list(features);
  analysis::Design x;
  std::vector<double> y;
  std::vector<std::string> keys;
  runner::design_matrix(recs, feats, target, x, y, keys);
  const auto s = analysis::forest_split_r2(x, y, keys, fc, splits);
  analysis::RandomForest full;
  full.fit(x, y, fc);
  const auto imp = full.importance();
  json importance = json::object();
  for (size_t i = 0; i < feats.size(); ++i) importance[feats[i]] = imp[i];
  std::string joined;
  for (const auto& f : feats) joined += (joined.empty() ? "" : "+") + f;
  write_analysis_csv(g, "forest",
                     csv_line({"features", "r2_mean", "r2_std"}) +
                         csv_line({joined, format_double(s.r2_mean), format_double(s.r2_std)}));
  emit(g, {{"ledger", ledger_path(g)},
           {"features", feats},
           {"target", target},
           {"n_runs", y.size()},
           {"excluded_runs", excluded},
           {"r2_mean", s.r2_mean},
           {"r2_std", s.r2_std},
           {"r2_splits", s.r2},
           {"importance", importance}});
  return 0;
}

int cmd_alignment(const Globals& g, const std::string& ckpt, int episodes, bool prototype) {
  auto run = runner::load_run(ckpt);
  datagen::Task task(run.cfg.data, run.cfg.seed);
  const auto r = studies::alignment_study(run.params, run.cfg.model, task, episodes, run.cfg.eval.seed, prototype);
  emit(g, {{"checkpoint", ckpt},
           {"pairs", r.n_pairs},
           {"pairing", r.prototype ? "prototype" : "sample"},
           {"cka", r.cka},
           {"paired_l2", r.paired_l2}});
  return 0;
}

int cmd_threshold(const Globals& g, std::string kcol, double threshold, int min_seeds) {
  int excluded = 0;
  const auto recs = usable(ResultsLedger(ledger_path(g)).load(), excluded);
  if (recs.empty()) throw ConfigError("no usable runs in " + ledger_path(g));
  if (kcol.empty()) kcol = recs.front().mode == "multimodal" ? "K2" : "K1";
  if (kcol != "K1" && kcol != "K2") throw ConfigError("--k must be K1 or K2");
  std::map<std::pair<double, double>, std::vector<double>> cells;
  for (const auto& r : recs) cells[std::make_pair(*r.metric(kcol), static_cast<double>(r.B))].push_back(r.icl);
  std::vector<analysis::ComplexityCell> grid;
  json rows = json::array();
  for (const auto& [key, v] : cells) {
    double mean = 0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    rows.push_back({{kcol, key.first}, {"B", key.second}, {"icl_mean", mean}, {"n_seeds", v.size()},
                    {"complexity", analysis::complexity(key.first, key.second)}});
    if (static_cast<int>(v.size()) >= min_seeds)
      grid.push_back({key.first, key.second, mean, static_cast<int>(v.size())});
  }
  json rep{{"ledger", ledger_path(g)}, {"k_column", kcol}, {"threshold", threshold}, {"cells", rows}};
  if (grid.empty()) {
    rep["complexity_threshold"] = "none";
    rep["note"] = "no cell has the required number of seeds";
  } else {
    const auto t = analysis::complexity_threshold(grid, threshold);
    rep["complexity_threshold"] = t ? json(*t) : json("none");
  }
  emit(g, rep);
  return 0;
}

int cmd_grad_check(const Globals& g, double tol, int samples, int batch) {
  auto cfg = load(g);
  datagen::Task task(cfg.data, cfg.seed);
  auto params = net::init_params(cfg.model, cfg.seed).cast<double>();
  // Random classifier and APE so every tensor carries a gradient.
  Rng rng(cfg.seed, streams::kGradCheck);
  for (auto& t : params.tensors())
    if (t.name == net::kClassifier || t.name == net::kApe)
      for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = 0.3 * rng.normal();
  const auto eps = datagen::build_batch(task, datagen::EvalMode::Train, batch, cfg.seed, streams::kGradCheck, 0);
  const auto mask = trainer::trainable_mask(params, cfg.train.stage);
  const auto rep = trainer::grad_check(params, cfg.model, eps, mask, tol, samples, 1e-5, cfg.seed);
  json tensors = json::array();
  for (const auto& t : rep.tensors)
    tensors.push_back({{"name", t.name}, {"sampled", t.sampled}, {"frozen", t.frozen},
                       {"max_abs_error", t.max_abs_error}, {"relative_error", t.relative_error}});
  emit(g, {{"passed", rep.passed()},
           {"tolerance", rep.tolerance},
           {"max_relative_error", rep.max_relative_error},
           {"failing", rep.failing},
           {"tensors", tensors}});
  return rep.passed() ? 0 : 3;
}

int cmd_export(const Globals& g, const std::string& group, const std::string& metrics, const std::string& output) {
  const auto recs = ResultsLedger(ledger_path(g)).load();
  const std::string csv = runner::export_plot_data(recs, split_list(group), split_list(metrics));
  if (output.empty() || output == "-")
    std::cout << csv;
  else
    net::write_file_atomic(output, csv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"In-context learning laboratory: data generation, training, circuit probes and analysis"};
  app.require_subcommand(1);
  Globals g;
  auto global = [&](CLI::App* sub) {
    sub->add_option("--config", g.config, "Experiment config (JSON)");
    sub->add_option("--set", g.sets, "Override key=value (dotted keys, JSON values)");
    sub->add_option("--seed", g.seed, "Run seed (replaces sweep.seeds for sweep)");
    sub->add_option("--out", g.out, "Output directory")->capture_default_str();
    sub->add_option("--workers", g.workers, "Parallel sweep workers");
    sub->add_option("--ledger", g.ledger, "Results CSV (default <out>/results.csv)");
    sub->add_option("--report", g.report, "Also write the JSON report to this file");
  };
  std::string ckpt, features, target = "icl", group = "K1,B", metrics = "icl,iwl", output, kcol;
  int episodes = 0, splits = 5, samples = 200, batch = 4, min_seeds = 3;
  double tol = 1e-6, threshold = 0.95;
  bool prototype = false;
  analysis::ForestConfig fc;

  auto* train = app.add_subcommand("train", "Train one run and append its record");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint under IWL / ICL-Novel / ICL-Swap");
  auto* probe = app.add_subcommand("probe", "Circuit metrics of a checkpoint on the probe set");
  auto* ablate = app.add_subcommand("ablate", "Causal ablations");
  ablate->require_subcommand(1);
  auto* knockout = ablate->add_subcommand("knockout", "Knock out the previous-token and induction heads");
  auto* zero = ablate->add_subcommand("zero-modality", "Zero one modality's tokens");
  auto* sweep = app.add_subcommand("sweep", "Run a parameter grid into the results ledger");
  auto* analyze = app.add_subcommand("analyze", "Cross-run statistics");
  analyze->require_subcommand(1);
  auto* pearson = analyze->add_subcommand("pearson", "Pearson correlation of metrics with a target");
  auto* forest = analyze->add_subcommand("forest", "Random-forest R^2 on held-out runs");
  auto* alignment = analyze->add_subcommand("alignment", "CKA and paired L2 of projected M2 features");
  auto* thresh = analyze->add_subcommand("threshold", "Minimal K*sqrt(B) reaching an ICL threshold");
  auto* grad = app.add_subcommand("grad-check", "Finite-difference gradient check in double precision");
  auto* exp = app.add_subcommand("export", "Grouped mean/std over seeds as long-format CSV");

  for (auto* s : {train, eval, probe, knockout, zero, sweep, pearson, forest, alignment, thresh, grad, exp}) global(s);
  for (auto* s : {eval, probe, knockout, zero, alignment})
    s->add_option("--checkpoint", ckpt, "Checkpoint (.iclb) with its .json echo")->required();
  for (auto* s : {eval, knockout, zero}) s->add_option("--episodes", episodes, "Episodes per mode");
  alignment->add_option("--episodes", episodes, "Episodes")->default_val(256);
  alignment->add_flag("--prototype", prototype, "Pair with M1 class prototypes instead of samples");
  for (auto* s : {pearson, forest}) {
    s->add_option("--features", features, "Comma-separated metric columns");
    s->add_option("--target", target, "Target column")->capture_default_str();
  }
  forest->add_option("--trees", fc.n_trees)->capture_default_str();
  forest->add_option("--max-depth", fc.max_depth, "-1 for unbounded")->capture_default_str();
  forest->add_option("--min-leaf", fc.min_samples_leaf)->capture_default_str();
  forest->add_option("--feature-fraction", fc.feature_subsample)->capture_default_str();
  forest->add_option("--splits", splits)->capture_default_str();
  forest->add_option("--forest-seed", fc.seed)->capture_default_str();
  thresh->add_option("--k", kcol, "K1 or K2 (default by mode)");
  thresh->add_option("--threshold", threshold)->capture_default_str();
  thresh->add_option("--min-seeds", min_seeds)->capture_default_str();
  grad->add_option("--tolerance", tol)->capture_default_str();
  grad->add_option("--samples", samples)->capture_default_str();
  grad->add_option("--batch", batch)->capture_default_str();
  exp->add_option("--group", group, "Comma-separated grouping columns")->capture_default_str();
  exp->add_option("--metrics", metrics, "Comma-separated metric columns")->capture_default_str();
  exp->add_option("--output", output, "CSV path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(g);
    if (*eval) return cmd_eval(g, ckpt, episodes);
    if (*probe) return cmd_probe(g, ckpt);
    if (*knockout) return cmd_knockout(g, ckpt, episodes);
    if (*zero) return cmd_zero(g, ckpt, episodes);
    if (*sweep) return cmd_sweep(g);
    if (*pearson) return cmd_pearson(g, features, target);
    if (*forest) return cmd_forest(g, features, target, fc, splits);
    if (*alignment) return cmd_alignment(g, ckpt, episodes, prototype);
    if (*thresh) return cmd_threshold(g, kcol, threshold, min_seeds);
    if (*grad) return cmd_grad_check(g, tol, samples, batch);
    if (*exp) return cmd_export(g, group, metrics, output);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const UndefinedMetric& e) {
    std::cerr << "undefined metric: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
