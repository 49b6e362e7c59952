#include "icl/runner.hpp"

#include <omp.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <map>
#include <ostream>
#include <set>

#include "icl/checkpoint.hpp"
#include "icl/errors.hpp"
#include "icl/evalsuite.hpp"

namespace icl::runner {

namespace fs = std::filesystem;

std::string run_dir(const std::string& out_dir, const std::string& id) {
  return (fs::path(out_dir) / "runs" / id).string();
}

std::string checkpoint_path(const std::string& out_dir, const std::string& id) {
  return (fs::path(run_dir(out_dir, id)) / "model.iclb").string();
}

json config_echo(const ExperimentConfig& cfg) {
  json j = cfg.raw;
  j.erase("sweep");
  j["seed"] = cfg.seed;
  return j;
}

LoadedRun load_run(const std::string& checkpoint) {
  const std::string echo_path = net::config_echo_path(checkpoint);
  if (!fs::exists(echo_path)) throw ConfigError("missing config echo " + echo_path);
  json echo = json::parse(net::read_file(echo_path), nullptr, false);
  if (echo.is_discarded() || !echo.is_object()) throw ConfigError("config echo " + echo_path + " is not JSON");
  echo.erase("run_id");
  LoadedRun out{from_json(resolve(echo)), net::load_checkpoint(checkpoint)};
  const auto expected = net::init_params(out.cfg.model, 0);
  for (const auto& t : expected.tensors()) {
    if (!out.params.contains(t.name)) throw ConfigError("checkpoint lacks tensor '" + t.name + "'");
    const auto& v = out.params[t.name];
    if (v.rows() != t.value.rows() || v.cols() != t.value.cols())
      throw ConfigError("checkpoint tensor '" + t.name + "' does not match the configured shape");
  }
  return out;
}

namespace {

RunRecord describe(const ExperimentConfig& cfg) {
  RunRecord r;
  r.run_id = run_id(cfg);
  r.seed = cfg.seed;
  r.status = "failed";
  r.stage = trainer::to_string(cfg.train.stage);
  r.mode = cfg.multimodal() ? "multimodal" : "unimodal";
  r.pe = net::to_string(cfg.model.pe);
  r.n_layers = cfg.model.n_layers;
  r.n_heads = cfg.model.n_heads;
  r.d_model = cfg.model.d_model;
  r.encoder = cfg.model.encoder;
  r.N = cfg.data.seq.N;
  r.B = cfg.data.seq.B;
  r.L1 = cfg.data.L1;
  r.L2 = cfg.data.L2;
  r.K1 = cfg.data.m1.K;
  r.D1 = cfg.data.m1.D;
  r.eps1 = cfg.data.m1.epsilon;
  r.alpha1 = cfg.data.m1.alpha;
  r.K2 = cfg.multimodal() ? cfg.data.m2.K : 0;
  r.D2 = cfg.multimodal() ? cfg.data.m2.D : 0;
  r.eps2 = cfg.multimodal() ? cfg.data.m2.epsilon : 0.0;
  r.alpha2 = cfg.multimodal() ? cfg.data.m2.alpha : 0.0;
  r.lr = cfg.train.lr;
  r.weight_decay = cfg.train.weight_decay;
  r.batch_size = cfg.train.batch_size;
  r.max_steps = cfg.train.max_steps;
  const double nan = std::nan("");
  r.final_loss = r.iwl = r.icl_novel = r.icl_swap = r.icl = r.cla = nan;
  const circuits::HeadMetrics blank{nan, nan, nan, nan};
  r.layer1 = r.layer2 = {blank, blank};
  r.config = config_echo(cfg).dump();
  r.circuits = "{}";
  return r;
}

int copy_tensors(const net::ParamSet<float>& from, net::ParamSet<float>& to, bool (*pred)(const std::string&)) {
  int n = 0;
  for (auto& t : to.tensors()) {
    if (!pred(t.name) || !from.contains(t.name)) continue;
    const auto& src = from[t.name];
    if (src.rows() != t.value.rows() || src.cols() != t.value.cols())
      throw ConfigError("stored tensor '" + t.name + "' has an incompatible shape");
    t.value = src;
    ++n;
  }
  return n;
}

bool decoder_or_buffer(const std::string& name) { return net::is_decoder_tensor(name) || net::is_buffer_tensor(name); }
bool encoder_only(const std::string& name) { return net::is_encoder_tensor(name); }

trainer::ProgressFn logger(std::ostream* log, const std::string& tag) {
  if (!log) return {};
  return [log, tag](const trainer::HistoryPoint& h) {
    *log << tag << " step " << h.step << " loss " << h.train_loss << " iwl " << h.iwl << " icl " << h.icl << " ph1_1 "
         << h.ph1_1 << " ind_2 " << h.ind_2 << std::endl;
    return true;
  };
}

struct Stored {
  bool ok = false;
  net::ParamSet<float> params;
  std::string message;
};

Stored obtain_decoder(const ExperimentConfig& cfg, const std::string& out_dir, std::ostream* log) {
  const std::string path =
      out_dir.empty() ? "" : (fs::path(out_dir) / "store" / ("decoder-" + pretrain_key(cfg) + ".iclb")).string();
  if (!path.empty() && fs::exists(path)) {
    if (log) *log << "reusing pretrained decoder " << path << std::endl;
    return {true, net::load_checkpoint(path), ""};
  }
  const auto data = pretrain_data(cfg);
  const auto model = pretrain_model(cfg);
  datagen::Task task(data, cfg.seed);
  trainer::TrainState st;
  st.params = net::init_params(model, cfg.seed);
  auto out = trainer::train(st, cfg.pretrain, model, task, cfg.seed, logger(log, "pretrain"));
  if (out.status == trainer::RunStatus::Diverged) return {false, {}, "decoder pretraining diverged: " + out.message};
  if (!path.empty()) {
    json echo{{"kind", "decoder_pretrain"}, {"key", pretrain_key(cfg)}, {"steps", out.steps},
              {"status", trainer::to_string(out.status)}, {"config", config_echo(cfg)}};
    net::save_checkpoint(path, st.params, echo.dump(2));
  }
  return {true, std::move(st.params), ""};
}

Stored obtain_encoder(const ExperimentConfig& cfg, const std::string& out_dir, std::ostream* log, double& accuracy) {
  const auto model = encoder_model(cfg);
  datagen::Task task(cfg.data, cfg.seed);
  const std::string path =
      out_dir.empty() ? "" : (fs::path(out_dir) / "store" / ("encoder-" + encoder_key(cfg) + ".iclb")).string();
  if (!path.empty() && fs::exists(path)) {
    if (log) *log << "reusing pretrained encoder " << path << std::endl;
    Stored s{true, net::load_checkpoint(path), ""};
    accuracy = trainer::encoder_accuracy(s.params, model, task, 2048, cfg.seed);
    return s;
  }
  trainer::TrainState st;
  st.params = net::init_params(model, derive_seed(cfg.seed, streams::kEncoderData));
  auto out = trainer::pretrain_encoder(st, cfg.encoder_pretrain, model, task, cfg.seed, logger(log, "encoder"));
  if (out.run.status == trainer::RunStatus::Diverged)
    return {false, {}, "encoder pretraining diverged: " + out.run.message};
  accuracy = out.train_accuracy;
  if (!path.empty()) {
    json echo{{"kind", "encoder_pretrain"}, {"key", encoder_key(cfg)}, {"steps", out.run.steps},
              {"accuracy", accuracy}, {"config", config_echo(cfg)}};
    net::save_checkpoint(path, st.params, echo.dump(2));
  }
  return {true, std::move(st.params), ""};
}

}  // namespace

const std::vector<std::string>& default_features() {
  static const std::vector<std::string> f{"ph1_1", "ph2_1", "ind_1", "tla_1", "ph1_2", "ph2_2", "ind_2", "tla_2", "cla"};
  return f;
}

void design_matrix(const std::vector<RunRecord>& records, const std::vector<std::string>& features,
                   const std::string& target, analysis::Design& x, std::vector<double>& y,
                   std::vector<std::string>& keys) {
  for (const auto& f : features)
    if (!is_numeric_column(f)) throw ConfigError("unknown numeric feature '" + f + "'");
  if (!is_numeric_column(target)) throw ConfigError("unknown numeric target '" + target + "'");
  std::vector<std::vector<double>> rows;
  y.clear();
  keys.clear();
  for (const auto& r : records) {
    std::vector<double> row;
    bool ok = true;
    for (const auto& f : features) {
      const auto v = r.metric(f);
      if (!v || !std::isfinite(*v)) ok = false;
      row.push_back(v.value_or(0.0));
    }
    const auto t = r.metric(target);
    if (!ok || !t || !std::isfinite(*t)) continue;
    rows.push_back(std::move(row));
    y.push_back(*t);
    keys.push_back(r.run_id);
  }
  x.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(features.size()));
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < features.size(); ++j) x(i, j) = rows[i][j];
}

json history_json(const std::vector<trainer::HistoryPoint>& history) {
  json a = json::array();
  for (const auto& h : history)
    a.push_back({{"step", h.step}, {"train_loss", h.train_loss}, {"iwl", h.iwl}, {"icl", h.icl}, {"cla", h.cla},
                 {"ph1_1", h.ph1_1}, {"ind_2", h.ind_2}});
  return a;
}

json record_json(const RunRecord& r) {
  json j = json::object();
  const auto row = to_row(r);
  const auto& cols = results_columns();
  for (size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] == "config" || cols[i] == "circuits") {
      j[cols[i]] = json::parse(row[i], nullptr, false);
      continue;
    }
    const auto v = r.metric(cols[i]);
    static const std::set<std::string> integral{"seed", "n_layers", "n_heads", "d_model", "N", "B", "L1", "L2",
                                                "K1", "D1", "K2", "D2", "batch_size", "max_steps", "steps",
                                                "converged_step"};
    if (v && integral.count(cols[i]) && std::isfinite(*v))
      j[cols[i]] = static_cast<long long>(*v);
    else if (v)
      j[cols[i]] = *v;
    else if (row[i].empty())
      j[cols[i]] = nullptr;
    else
      j[cols[i]] = row[i];
  }
  j["run_id"] = r.run_id;
  return j;
}

CellResult run_cell(const ExperimentConfig& cfg, const std::string& out_dir, std::ostream* log) {
  const auto t0 = std::chrono::steady_clock::now();
  CellResult res;
  RunRecord& rec = res.record;
  rec = describe(cfg);
  auto finish = [&]() -> CellResult& {
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!out_dir.empty()) {
      const std::string dir = run_dir(out_dir, rec.run_id);
      json echo = config_echo(cfg);
      echo["run_id"] = rec.run_id;
      if (res.params.size() > 0) net::save_checkpoint(checkpoint_path(out_dir, rec.run_id), res.params, echo.dump(2));
      net::write_file_atomic((fs::path(dir) / "history.json").string(), history_json(res.history).dump(2) + "\n");
      net::write_file_atomic((fs::path(dir) / "record.json").string(), record_json(rec).dump(2) + "\n");
    }
    return res;
  };

  datagen::Task task(cfg.data, cfg.seed);
  trainer::TrainState state;
  state.params = net::init_params(cfg.model, cfg.seed);

  if (cfg.needs_encoder_pretrain()) {
    double acc = -1;
    auto enc = obtain_encoder(cfg, out_dir, log, acc);
    if (!enc.ok) {
      rec.status = "diverged";
      if (log) *log << enc.message << std::endl;
      return finish();
    }
    copy_tensors(enc.params, state.params, encoder_only);
    rec.encoder_accuracy = acc;
  }
  if (cfg.needs_pretrain()) {
    auto dec = obtain_decoder(cfg, out_dir, log);
    if (!dec.ok) {
      rec.status = "diverged";
      if (log) *log << dec.message << std::endl;
      return finish();
    }
    copy_tensors(dec.params, state.params, decoder_or_buffer);
  }

  const auto out = trainer::train(state, cfg.train, cfg.model, task, cfg.seed, logger(log, "train"));
  res.history = state.history;
  res.params = state.params;
  rec.steps = out.steps;
  rec.converged_step = out.converged_step;
  rec.final_loss = out.final_loss;
  rec.status = trainer::to_string(out.status);
  if (out.status == trainer::RunStatus::Diverged) {
    if (log) *log << "diverged: " << out.message << std::endl;
    return finish();
  }
  const auto suite = evalsuite::evaluate_suite(state.params, cfg.model, task, cfg.eval.n_episodes, cfg.eval.seed);
  rec.iwl = suite.iwl.accuracy;
  rec.icl_novel = suite.novel.accuracy;
  rec.icl_swap = suite.swap.accuracy;
  rec.icl = suite.icl;
  rec.cla = suite.cla;
  rec.set_circuits(circuits::probe(state.params, cfg.model, task, cfg.eval.probe_episodes, cfg.eval.probe_seed));
  if (log)
    *log << "done " << rec.run_id << " status " << rec.status << " steps " << rec.steps << " iwl " << rec.iwl
         << " icl " << rec.icl << std::endl;
  return finish();
}

namespace {

struct Child {
  pid_t pid;
  size_t cell;
};

}  // namespace

SweepSummary run_sweep(const ExperimentConfig& cfg, const std::string& out_dir, const std::string& ledger_path,
                       int workers, std::ostream* log) {
  if (workers < 1) throw ConfigError("workers must be >= 1");
  const auto cells = expand_sweep(cfg);
  ResultsLedger ledger(ledger_path);
  std::set<std::string> done;
  for (const auto& r : ledger.load()) done.insert(r.run_id);

  SweepSummary sum;
  sum.cells = static_cast<int>(cells.size());
  std::vector<size_t> pending;
  for (size_t i = 0; i < cells.size(); ++i) {
    const std::string id = run_id(cells[i]);
    if (done.count(id)) {
      ++sum.skipped;
      continue;
    }
    done.insert(id);  // duplicate cells within one sweep run once
    pending.push_back(i);
  }

  auto record = [&](const RunRecord& r) {
    ledger.append(r);
    ++sum.added;
    if (r.status == "diverged") ++sum.diverged;
    if (r.status == "failed") ++sum.failed;
    if (log) *log << "cell " << r.run_id << " " << r.status << " icl " << format_double(r.icl) << std::endl;
  };

  if (workers == 1) {
    // In-process: keeps the OpenMP runtime of the caller usable and avoids
    // forking a process that may already own worker threads.
    for (size_t i : pending) {
      try {
        record(run_cell(cells[i], out_dir, log).record);
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        if (log) *log << "cell failed: " << e.what() << std::endl;
        record(describe(cells[i]));
      }
    }
    return sum;
  }

  const fs::path tmp = fs::path(out_dir.empty() ? "." : out_dir) / "tmp";
  fs::create_directories(tmp);
  const int threads = std::max(1, omp_get_num_procs() / workers);
  std::vector<Child> running;
  size_t next = 0;
  while (next < pending.size() || !running.empty()) {
    while (next < pending.size() && static_cast<int>(running.size()) < workers) {
      const size_t cell = pending[next++];
      const std::string id = run_id(cells[cell]);
      const pid_t pid = ::fork();
      if (pid < 0) throw ConfigError("fork failed");
      if (pid == 0) {
        int code = 0;
        try {
          omp_set_num_threads(threads);
          auto res = run_cell(cells[cell], out_dir, nullptr);
          net::write_file_atomic((tmp / (id + ".row")).string(), csv_line(to_row(res.record)));
          code = res.record.status == "diverged" ? 3 : 0;
        } catch (const ConfigError&) {
          code = 2;
        } catch (...) {
          code = 1;
        }
        std::fflush(nullptr);
        ::_exit(code);
      }
      running.push_back({pid, cell});
    }
    int status = 0;
    const pid_t pid = ::waitpid(-1, &status, 0);
    if (pid < 0) throw ConfigError("waitpid failed");
    auto it = std::find_if(running.begin(), running.end(), [&](const Child& c) { return c.pid == pid; });
    if (it == running.end()) continue;
    const size_t cell = it->cell;
    running.erase(it);
    const fs::path row = tmp / (run_id(cells[cell]) + ".row");
    if (fs::exists(row)) {
      const auto rows = parse_csv(net::read_file(row.string()));
      fs::remove(row);
      if (rows.size() == 1) {
        record(from_row(rows[0]));
        continue;
      }
    }
    if (log) *log << "worker for cell " << run_id(cells[cell]) << " exited without a result" << std::endl;
    record(describe(cells[cell]));
  }
  return sum;
}

std::string export_plot_data(const std::vector<RunRecord>& records, const std::vector<std::string>& group_by,
                             const std::vector<std::string>& metrics) {
  const auto& cols = results_columns();
  auto column_index = [&](const std::string& name) {
    auto it = std::find(cols.begin(), cols.end(), name);
    if (it == cols.end()) throw ConfigError("unknown results column '" + name + "'");
    return static_cast<size_t>(it - cols.begin());
  };
  std::vector<size_t> gidx;
  for (const auto& g : group_by) gidx.push_back(column_index(g));
  for (const auto& m : metrics) {
    column_index(m);
    if (!is_numeric_column(m)) throw ConfigError("metric '" + m + "' is not numeric");
  }
  if (records.empty()) throw ConfigError("the results ledger is empty");

  std::map<std::vector<std::string>, std::map<std::string, std::vector<double>>> groups;
  for (const auto& r : records) {
    if (!r.ok()) continue;
    const auto row = to_row(r);
    std::vector<std::string> key;
    for (size_t i : gidx) key.push_back(row[i]);
    auto& g = groups[key];
    for (const auto& m : metrics) {
      const auto v = r.metric(m);
      if (v && std::isfinite(*v)) g[m].push_back(*v);
    }
  }
  std::vector<std::string> header(group_by);
  for (const char* h : {"metric", "mean", "std", "n"}) header.push_back(h);
  std::string out = csv_line(header);
  for (const auto& [key, ms] : groups)
    for (const auto& m : metrics) {
      auto it = ms.find(m);
      if (it == ms.end() || it->second.empty()) continue;
      const auto& v = it->second;
      double mean = 0;
      for (double x : v) mean += x;
      mean /= static_cast<double>(v.size());
      double var = 0;
      for (double x : v) var += (x - mean) * (x - mean);
      const double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
      std::vector<std::string> line(key);
      line.push_back(m);
      line.push_back(format_double(mean));
      line.push_back(format_double(sd));
      line.push_back(std::to_string(v.size()));
      out += csv_line(line);
    }
  return out;
}

}  // namespace icl::runner
