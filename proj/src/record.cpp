#include "icl/record.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <nlohmann/json.hpp>
#include <sstream>

#include "icl/errors.hpp"

namespace icl {

std::string format_double(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace {

double parse_double(const std::string& s) {
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ConfigError("bad numeric cell '" + s + "'");
  return v;
}

int64_t parse_int(const std::string& s) {
  int64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ConfigError("bad integer cell '" + s + "'");
  return v;
}

struct Column {
  std::string name;
  bool numeric;
  std::function<std::string(const RunRecord&)> get;
  std::function<void(RunRecord&, const std::string&)> set;
};

Column text(std::string name, std::string RunRecord::*m) {
  return {std::move(name), false, [m](const RunRecord& r) { return r.*m; },
          [m](RunRecord& r, const std::string& s) { r.*m = s; }};
}

template <typename I>
Column integer(std::string name, I RunRecord::*m) {
  return {std::move(name), true, [m](const RunRecord& r) { return std::to_string(r.*m); },
          [m](RunRecord& r, const std::string& s) { r.*m = static_cast<I>(parse_int(s)); }};
}

Column real(std::string name, double RunRecord::*m) {
  return {std::move(name), true, [m](const RunRecord& r) { return format_double(r.*m); },
          [m](RunRecord& r, const std::string& s) { r.*m = parse_double(s); }};
}

Column head_metric(std::string name, circuits::LayerAggregate RunRecord::*layer, bool mean,
                   double circuits::HeadMetrics::*field) {
  return {std::move(name), true,
          [=](const RunRecord& r) { return format_double((r.*layer).*(mean ? &circuits::LayerAggregate::mean
                                                                               : &circuits::LayerAggregate::max).*field); },
          [=](RunRecord& r, const std::string& s) {
            ((r.*layer).*(mean ? &circuits::LayerAggregate::mean : &circuits::LayerAggregate::max)).*field =
                parse_double(s);
          }};
}

const std::vector<Column>& table() {
  static const std::vector<Column> cols = [] {
    std::vector<Column> c;
    c.push_back({"schema", false, [](const RunRecord&) { return std::string(kResultsSchema); },
                 [](RunRecord&, const std::string& s) {
                   if (s != kResultsSchema) throw ConfigError("results row has schema '" + s + "'");
                 }});
    c.push_back(text("run_id", &RunRecord::run_id));
    c.push_back(integer("seed", &RunRecord::seed));
    c.push_back(text("status", &RunRecord::status));
    c.push_back(text("stage", &RunRecord::stage));
    c.push_back(text("mode", &RunRecord::mode));
    c.push_back(text("pe", &RunRecord::pe));
    c.push_back(integer("n_layers", &RunRecord::n_layers));
    c.push_back(integer("n_heads", &RunRecord::n_heads));
    c.push_back(integer("d_model", &RunRecord::d_model));
    c.push_back({"encoder", true, [](const RunRecord& r) { return std::string(r.encoder ? "1" : "0"); },
                 [](RunRecord& r, const std::string& s) { r.encoder = parse_int(s) != 0; }});
    c.push_back(integer("N", &RunRecord::N));
    c.push_back(integer("B", &RunRecord::B));
    c.push_back(integer("L1", &RunRecord::L1));
    c.push_back(integer("L2", &RunRecord::L2));
    c.push_back(integer("K1", &RunRecord::K1));
    c.push_back(integer("D1", &RunRecord::D1));
    c.push_back(real("eps1", &RunRecord::eps1));
    c.push_back(real("alpha1", &RunRecord::alpha1));
    c.push_back(integer("K2", &RunRecord::K2));
    c.push_back(integer("D2", &RunRecord::D2));
    c.push_back(real("eps2", &RunRecord::eps2));
    c.push_back(real("alpha2", &RunRecord::alpha2));
    c.push_back(real("lr", &RunRecord::lr));
    c.push_back(real("weight_decay", &RunRecord::weight_decay));
    c.push_back(integer("batch_size", &RunRecord::batch_size));
    c.push_back(integer("max_steps", &RunRecord::max_steps));
    c.push_back(integer("steps", &RunRecord::steps));
    c.push_back(integer("converged_step", &RunRecord::converged_step));
    c.push_back(real("final_loss", &RunRecord::final_loss));
    c.push_back(real("iwl", &RunRecord::iwl));
    c.push_back(real("icl_novel", &RunRecord::icl_novel));
    c.push_back(real("icl_swap", &RunRecord::icl_swap));
    c.push_back(real("icl", &RunRecord::icl));
    c.push_back(real("cla", &RunRecord::cla));
    using HM = circuits::HeadMetrics;
    const std::pair<const char*, double HM::*> fields[] = {{"ph1", &HM::ph1}, {"ph2", &HM::ph2}, {"ind", &HM::ind},
                                                           {"tla", &HM::tla}};
    for (int l = 1; l <= 2; ++l) {
      auto layer = l == 1 ? &RunRecord::layer1 : &RunRecord::layer2;
      for (const auto& [n, f] : fields) c.push_back(head_metric(std::string(n) + "_" + std::to_string(l), layer, false, f));
      for (const auto& [n, f] : fields)
        c.push_back(head_metric(std::string(n) + "_" + std::to_string(l) + "_mean", layer, true, f));
    }
    c.push_back(real("encoder_accuracy", &RunRecord::encoder_accuracy));
    c.push_back(real("wall_seconds", &RunRecord::wall_seconds));
    c.push_back(text("circuits", &RunRecord::circuits));
    c.push_back(text("config", &RunRecord::config));
    return c;
  }();
  return cols;
}

}  // namespace

void RunRecord::set_circuits(const circuits::CircuitMetrics& m) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const circuits::HeadMetrics blank{nan, nan, nan, nan};
  layer1 = m.n_layers > 0 ? m.layers[0] : circuits::LayerAggregate{blank, blank};
  layer2 = m.n_layers > 1 ? m.layers[1] : circuits::LayerAggregate{blank, blank};
  nlohmann::ordered_json j;
  j["n_layers"] = m.n_layers;
  j["n_heads"] = m.n_heads;
  j["n_episodes"] = m.n_episodes;
  j["n_ind_defined"] = m.n_ind_defined;
  auto heads = nlohmann::ordered_json::array();
  for (int l = 0; l < m.n_layers; ++l)
    for (int h = 0; h < m.n_heads; ++h) {
      const auto& x = m.at(l, h);
      heads.push_back({{"layer", l + 1}, {"head", h + 1}, {"ph1", x.ph1}, {"ph2", x.ph2}, {"ind", x.ind}, {"tla", x.tla}});
    }
  j["heads"] = heads;
  circuits = j.dump();
}

std::optional<double> RunRecord::metric(const std::string& column) const {
  for (const auto& c : table())
    if (c.name == column) {
      if (!c.numeric) return std::nullopt;
      const std::string s = c.get(*this);
      if (s.empty()) return std::nullopt;
      return parse_double(s);
    }
  return std::nullopt;
}

bool RunRecord::same_result(const RunRecord& other) const {
  for (const auto& c : table())
    if (c.name != "wall_seconds" && c.get(*this) != c.get(other)) return false;
  return true;
}

const std::vector<std::string>& results_columns() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& c : table()) n.push_back(c.name);
    return n;
  }();
  return names;
}

bool is_numeric_column(const std::string& name) {
  for (const auto& c : table())
    if (c.name == name) return c.numeric;
  return false;
}

std::vector<std::string> to_row(const RunRecord& r) {
  std::vector<std::string> row;
  for (const auto& c : table()) row.push_back(c.get(r));
  return row;
}

RunRecord from_row(const std::vector<std::string>& row) {
  const auto& cols = table();
  if (row.size() != cols.size())
    throw ConfigError("results row has " + std::to_string(row.size()) + " cells, expected " +
                      std::to_string(cols.size()));
  RunRecord r;
  for (size_t i = 0; i < cols.size(); ++i) cols[i].set(r, row[i]);
  return r;
}

std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\n\r") == std::string::npos) return field;
  std::string out = "\"";
  for (char ch : field) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

std::string csv_line(const std::vector<std::string>& fields) {
  std::string line;
  for (size_t i = 0; i < fields.size(); ++i) {
    if (i) line += ',';
    line += csv_escape(fields[i]);
  }
  return line + "\n";
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += ch;
      }
      continue;
    }
    if (ch == '"') {
      quoted = true;
      any = true;
    } else if (ch == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (ch == '\n' || ch == '\r') {
      if (ch == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
      }
      row.clear();
      field.clear();
      any = false;
    } else {
      field += ch;
      any = true;
    }
  }
  if (quoted) throw ConfigError("unterminated quoted CSV field");
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

ResultsLedger::ResultsLedger(std::string path) : path_(std::move(path)) {}

std::vector<RunRecord> ResultsLedger::load() const {
  std::vector<RunRecord> out;
  std::ifstream in(path_, std::ios::binary);
  if (!in) return out;
  std::stringstream ss;
  ss << in.rdbuf();
  const auto rows = parse_csv(ss.str());
  if (rows.empty()) return out;
  if (rows.front() != results_columns()) throw ConfigError("results ledger " + path_ + " has an unexpected header");
  for (size_t i = 1; i < rows.size(); ++i) out.push_back(from_row(rows[i]));
  return out;
}

bool ResultsLedger::contains(const std::string& run_id) const {
  for (const auto& r : load())
    if (r.run_id == run_id) return true;
  return false;
}

void ResultsLedger::append(const RunRecord& r) const {
  const std::filesystem::path p(path_);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  const int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (fd < 0) throw ConfigError("cannot open results ledger " + path_);
  ::flock(fd, LOCK_EX);
  std::string payload;
  if (::lseek(fd, 0, SEEK_END) == 0) payload = csv_line(results_columns());
  payload += csv_line(to_row(r));
  size_t done = 0;
  while (done < payload.size()) {
    const ssize_t n = ::write(fd, payload.data() + done, payload.size() - done);
    if (n <= 0) {
      ::flock(fd, LOCK_UN);
      ::close(fd);
      throw ConfigError("short write to results ledger " + path_);
    }
    done += static_cast<size_t>(n);
  }
  ::fsync(fd);
  ::flock(fd, LOCK_UN);
  ::close(fd);
}

}  // namespace icl
