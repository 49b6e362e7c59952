#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "icl/checkpoint.hpp"
#include "icl/errors.hpp"
#include "icl/runner.hpp"
#include "icl/studies.hpp"

using namespace icl;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"({
  "data": {"N": 4, "B": 2, "L1": 8, "L2": 4, "m1": {"K": 32, "D": 16}, "m2": {"K": 8, "D": 8}},
  "model": {"d_mlp": 32},
  "train": {"lr": 0.1, "batch_size": 16, "max_steps": 20, "eval_every": 10, "history_episodes": 16},
  "pretrain": {"lr": 0.1, "batch_size": 16, "max_steps": 20, "eval_every": 10, "history_episodes": 16},
  "encoder_pretrain": {"batch_size": 16, "max_steps": 20, "eval_every": 10},
  "eval": {"n_episodes": 32, "probe_episodes": 16}
})";

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) { fs::remove_all(path); }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("run_cell writes artifacts and is deterministic up to wall-clock") {
  TempDir dir("icl_runner_cell");
  const auto cfg = runner::parse_config_text(kTiny, {"seed=3"});
  const auto a = runner::run_cell(cfg, dir.str());
  const auto b = runner::run_cell(cfg, "");
  CHECK(a.record.ok());
  CHECK(a.record.same_result(b.record));
  CHECK(a.params.bitwise_equal(b.params));
  CHECK(a.record.run_id == runner::run_id(cfg));
  CHECK(a.record.steps == 20);
  CHECK(a.history.size() == 2);
  const auto ckpt = runner::checkpoint_path(dir.str(), a.record.run_id);
  CHECK(fs::exists(ckpt));
  CHECK(fs::exists(fs::path(runner::run_dir(dir.str(), a.record.run_id)) / "record.json"));
  const auto loaded = runner::load_run(ckpt);
  CHECK(loaded.params.bitwise_equal(a.params));
  CHECK(runner::run_id(loaded.cfg) == a.record.run_id);
}

TEST_CASE("multimodal runs reuse the stored decoder bitwise") {
  TempDir dir("icl_runner_mm");
  const auto cfg = runner::parse_config_text(kTiny, {"mode=multimodal", "seed=1"});
  const auto first = runner::run_cell(cfg, dir.str());
  size_t stored = 0;
  for (const auto& e : fs::directory_iterator(dir.path / "store")) stored += e.path().extension() == ".iclb";
  CHECK(stored == 1);
  const auto second = runner::run_cell(cfg, dir.str());
  CHECK(first.params.bitwise_equal(second.params));
  CHECK(first.record.same_result(second.record));
  // A second K2 reuses the same pretrained decoder.
  const auto other = runner::parse_config_text(kTiny, {"mode=multimodal", "seed=1", "K2=4"});
  runner::run_cell(other, dir.str());
  stored = 0;
  for (const auto& e : fs::directory_iterator(dir.path / "store")) stored += e.path().extension() == ".iclb";
  CHECK(stored == 1);
}

TEST_CASE("encoder runs pretrain and store the encoder") {
  TempDir dir("icl_runner_enc");
  const auto cfg = runner::parse_config_text(kTiny, {"mode=multimodal", "encoder=true", "model.encoder_width=16",
                                                     "model.encoder_layers=2"});
  const auto r = runner::run_cell(cfg, dir.str());
  CHECK(r.record.ok());
  CHECK(r.record.encoder);
  CHECK(r.record.encoder_accuracy >= 0.0);
  size_t stored = 0;
  for (const auto& e : fs::directory_iterator(dir.path / "store")) stored += e.path().extension() == ".iclb";
  CHECK(stored == 2);
}

TEST_CASE("sweep re-entry adds no rows") {
  TempDir dir("icl_runner_sweep");
  auto text = runner::json::parse(kTiny);
  text["sweep"] = {{"axes", {{"B", {1, 2}}}}, {"seeds", {0, 1}}};
  const auto cfg = runner::parse_config_text(text.dump());
  const std::string ledger = (dir.path / "results.csv").string();
  const auto s1 = runner::run_sweep(cfg, dir.str(), ledger, 1);
  CHECK(s1.cells == 4);
  CHECK(s1.added == 4);
  const auto s2 = runner::run_sweep(cfg, dir.str(), ledger, 1);
  CHECK(s2.added == 0);
  CHECK(s2.skipped == 4);
  CHECK(ResultsLedger(ledger).load().size() == 4);
}

TEST_CASE("export groups by columns and summarizes over seeds") {
  std::vector<RunRecord> recs(3);
  for (int i = 0; i < 3; ++i) {
    recs[i].status = "converged";
    recs[i].K1 = i < 2 ? 128 : 512;
    recs[i].B = 4;
    recs[i].icl = 0.5 + 0.1 * i;
  }
  recs.push_back(recs[0]);
  recs.back().status = "diverged";
  const auto csv = runner::export_plot_data(recs, {"K1"}, {"icl"});
  const auto rows = parse_csv(csv);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == std::vector<std::string>{"K1", "metric", "mean", "std", "n"});
  CHECK(rows[1][0] == "128");
  CHECK(std::stod(rows[1][2]) == doctest::Approx(0.55));
  CHECK(rows[1][4] == "2");
  CHECK(rows[2][0] == "512");
  CHECK(std::stod(rows[2][3]) == 0.0);
  CHECK(rows[2][4] == "1");
  CHECK_THROWS_AS(runner::export_plot_data(recs, {"K1"}, {"pe"}), ConfigError);
}

TEST_CASE("studies on a small trained model") {
  const auto cfg = runner::parse_config_text(kTiny, {"mode=multimodal"});
  const auto r = runner::run_cell(cfg, "");
  datagen::Task task(cfg.data, cfg.seed);
  const auto z = studies::zeroing_study(r.params, cfg.model, task, 64, 0);
  CHECK(z.chance == doctest::Approx(1.0 / cfg.data.L2));
  for (double v : {z.full, z.zero_m1, z.zero_m2}) CHECK((v >= 0.0 && v <= 1.0));
  const auto k = studies::knockout_study(r.params, cfg.model, task, 64, 0, 16, 0);
  CHECK(k.prev_token.layer == 0);
  CHECK(k.induction.layer == 1);
  CHECK(k.baseline == doctest::Approx(z.full));
  const auto a = studies::alignment_study(r.params, cfg.model, task, 8, 0, false);
  const auto p = studies::alignment_study(r.params, cfg.model, task, 8, 0, true);
  CHECK(a.n_pairs == 8 * (cfg.data.seq.N + 1));
  CHECK(p.n_pairs == a.n_pairs);
  CHECK(a.paired_l2 > 0.0);
  CHECK((a.cka >= -1e-12 && a.cka <= 1.0 + 1e-12));
  const auto uni = runner::parse_config_text(kTiny);
  datagen::Task t1(uni.data, 0);
  auto p1 = net::init_params(uni.model, 0);
  CHECK_THROWS_AS(studies::zeroing_study(p1, uni.model, t1, 8, 0), ConfigError);
}
