#include "icl/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "icl/errors.hpp"
#include "icl/rng.hpp"

namespace icl::runner {

namespace {

json train_defaults(double lr, int batch, int64_t max_steps) {
  return json{{"lr", lr},
              {"weight_decay", 1e-6},
              {"batch_size", batch},
              {"max_steps", max_steps},
              {"eval_every", 1000},
              {"converge_window", 10},
              {"converge_delta", 1e-4},
              {"f64_mode", false},
              {"history_episodes", 512},
              {"history_circuits", true}};
}

std::string join(const std::string& prefix, const std::string& key) { return prefix.empty() ? key : prefix + "." + key; }

const char* type_name(const json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number_integer()) return "integer";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

bool compatible(const json& def, const json& val) {
  if (def.is_number_integer()) return val.is_number_integer();
  if (def.is_number()) return val.is_number();
  if (def.is_boolean()) return val.is_boolean();
  if (def.is_string()) return val.is_string();
  if (def.is_array()) return val.is_array();
  if (def.is_object()) return val.is_object();
  return false;
}

void merge(json& base, const json& user, const std::string& prefix) {
  if (!user.is_object()) throw ConfigError("'" + (prefix.empty() ? std::string("<root>") : prefix) + "' must be an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = join(prefix, it.key());
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& slot = base[it.key()];
    if (key == "sweep.axes") {
      if (!it->is_object()) throw ConfigError("'sweep.axes' must map keys to value lists");
      slot = *it;
      continue;
    }
    if (!compatible(slot, *it))
      throw ConfigError("config key '" + key + "' expects " + type_name(slot) + ", got " + type_name(*it));
    if (slot.is_object())
      merge(slot, *it, key);
    else
      slot = *it;
  }
}

trainer::TrainConfig train_from(const json& j, trainer::Stage stage) {
  trainer::TrainConfig t;
  t.lr = j.at("lr").get<double>();
  t.weight_decay = j.at("weight_decay").get<double>();
  t.batch_size = j.at("batch_size").get<int>();
  t.max_steps = j.at("max_steps").get<int64_t>();
  t.eval_every = j.at("eval_every").get<int>();
  t.converge_window = j.at("converge_window").get<int>();
  t.converge_delta = j.at("converge_delta").get<double>();
  t.f64_mode = j.at("f64_mode").get<bool>();
  t.history_episodes = j.at("history_episodes").get<int>();
  t.history_circuits = j.at("history_circuits").get<bool>();
  t.stage = stage;
  trainer::validate(t);
  return t;
}

datagen::ModalitySpec modality_from(const json& j) {
  datagen::ModalitySpec m;
  m.K = j.at("K").get<int>();
  m.D = j.at("D").get<int>();
  m.epsilon = j.at("epsilon").get<double>();
  m.alpha = j.at("alpha").get<double>();
  return m;
}

const json* find_dotted(const json& j, const std::string& dotted) {
  const json* cur = &j;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!cur->is_object() || !cur->contains(part)) return nullptr;
    cur = &(*cur)[part];
  }
  return cur;
}

}  // namespace

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json default_config() {
  json j;
  j["schema"] = kConfigSchema;
  j["seed"] = 0;
  j["data"] = {{"mode", "unimodal"},
               {"N", 8},
               {"B", 4},
               {"L1", 32},
               {"L2", 16},
               {"m1", {{"K", 8192}, {"D", 64}, {"epsilon", 0.1}, {"alpha", 0.0}}},
               {"m2", {{"K", 256}, {"D", 32}, {"epsilon", 0.1}, {"alpha", 0.0}}}};
  j["model"] = {{"n_layers", 2},       {"n_heads", 1},          {"d_mlp", 0},
                {"pe", "ape"},         {"ape", "sinusoidal"},   {"rope_base", 10000.0},
                {"encoder", false},    {"encoder_layers", 3},   {"encoder_width", 256}};
  j["train"] = train_defaults(1e-3, 128, 200000);
  j["train"]["stage"] = "auto";
  j["pretrain"] = train_defaults(1e-3, 128, 200000);
  j["pretrain"]["B"] = 0;
  j["encoder_pretrain"] = train_defaults(0.1, 128, 20000);
  j["eval"] = {{"n_episodes", 2048}, {"probe_episodes", 512}, {"probe_seed", 0}, {"seed", 0}};
  j["sweep"] = {{"axes", json::object()}, {"seeds", json::array({0})}, {"workers", 1}};
  return j;
}

std::string expand_key(const std::string& key) {
  static const std::map<std::string, std::string> aliases{
      {"K", "data.m1.K"},       {"K1", "data.m1.K"},       {"K2", "data.m2.K"},      {"D1", "data.m1.D"},
      {"D2", "data.m2.D"},      {"eps1", "data.m1.epsilon"}, {"eps2", "data.m2.epsilon"},
      {"alpha1", "data.m1.alpha"}, {"alpha2", "data.m2.alpha"}, {"B", "data.B"},     {"N", "data.N"},
      {"L1", "data.L1"},        {"L2", "data.L2"},         {"mode", "data.mode"},    {"pe", "model.pe"},
      {"n_layers", "model.n_layers"}, {"n_heads", "model.n_heads"}, {"encoder", "model.encoder"},
      {"lr", "train.lr"},       {"stage", "train.stage"},  {"max_steps", "train.max_steps"}};
  auto it = aliases.find(key);
  return it == aliases.end() ? key : it->second;
}

void set_dotted(json& j, const std::string& dotted, const json& value) {
  json* cur = &j;
  std::stringstream ss(dotted);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw ConfigError("empty config key");
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!cur->is_object()) throw ConfigError("config key '" + dotted + "' crosses a non-object");
    cur = &(*cur)[parts[i]];
    if (cur->is_null()) *cur = json::object();
  }
  if (!cur->is_object()) throw ConfigError("config key '" + dotted + "' crosses a non-object");
  (*cur)[parts.back()] = value;
}

void apply_override(json& user, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = expand_key(assignment.substr(0, eq));
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  set_dotted(user, key, value);
}

json resolve(const json& user) {
  json base = default_config();
  merge(base, user, "");
  if (base["schema"] != kConfigSchema) throw ConfigError("config schema must be '" + std::string(kConfigSchema) + "'");
  return base;
}

ExperimentConfig from_json(const json& r) {
  ExperimentConfig c;
  c.raw = r;
  c.seed = r.at("seed").get<uint64_t>();
  const json& d = r.at("data");
  const std::string mode = d.at("mode").get<std::string>();
  if (mode != "unimodal" && mode != "multimodal") throw ConfigError("data.mode must be unimodal|multimodal");
  c.data.seq.N = d.at("N").get<int>();
  c.data.seq.B = d.at("B").get<int>();
  c.data.seq.mode = mode == "multimodal" ? datagen::Modality::Multimodal : datagen::Modality::Unimodal;
  c.data.L1 = d.at("L1").get<int>();
  c.data.L2 = d.at("L2").get<int>();
  c.data.m1 = modality_from(d.at("m1"));
  c.data.m2 = modality_from(d.at("m2"));
  datagen::validate(c.data);

  const json& m = r.at("model");
  c.model.n_layers = m.at("n_layers").get<int>();
  c.model.n_heads = m.at("n_heads").get<int>();
  c.model.d_model = c.data.m1.D;
  const int d_mlp = m.at("d_mlp").get<int>();
  c.model.d_mlp = d_mlp > 0 ? d_mlp : 4 * c.model.d_model;
  c.model.pe = net::pos_encoding_from_string(m.at("pe").get<std::string>());
  c.model.ape = net::ape_kind_from_string(m.at("ape").get<std::string>());
  c.model.rope_base = m.at("rope_base").get<double>();
  c.model.n_labels = c.data.L1;
  c.model.max_T = c.data.sequence_length();
  c.model.m2_dim = c.multimodal() ? c.data.m2.D : 0;
  c.model.encoder = m.at("encoder").get<bool>();
  c.model.encoder_layers = m.at("encoder_layers").get<int>();
  c.model.encoder_width = m.at("encoder_width").get<int>();
  if (c.model.encoder && !c.multimodal()) throw ConfigError("model.encoder requires data.mode=multimodal");
  net::validate(c.model);

  const std::string stage = r.at("train").at("stage").get<std::string>();
  trainer::Stage st;
  if (stage == "auto")
    st = c.multimodal() ? trainer::Stage::MultimodalProjectorDecoder : trainer::Stage::UnimodalPretrain;
  else
    st = trainer::stage_from_string(stage);
  if (st == trainer::Stage::EncoderPretrain)
    throw ConfigError("train.stage=encoder_pretrain is implicit; set model.encoder=true instead");
  if (trainer::is_multimodal(st) != c.multimodal())
    throw ConfigError("train.stage=" + trainer::to_string(st) + " does not match data.mode=" + mode);
  c.train = train_from(r.at("train"), st);
  c.pretrain = train_from(r.at("pretrain"), trainer::Stage::UnimodalPretrain);
  const int pb = r.at("pretrain").at("B").get<int>();
  c.pretrain_B = pb > 0 ? pb : c.data.seq.B;
  if (c.data.seq.N % c.pretrain_B != 0) throw ConfigError("pretrain.B must divide data.N");
  c.encoder_pretrain = train_from(r.at("encoder_pretrain"), trainer::Stage::EncoderPretrain);

  const json& e = r.at("eval");
  c.eval.n_episodes = e.at("n_episodes").get<int>();
  c.eval.probe_episodes = e.at("probe_episodes").get<int>();
  c.eval.probe_seed = e.at("probe_seed").get<uint64_t>();
  c.eval.seed = e.at("seed").get<uint64_t>();
  if (c.eval.n_episodes < 1 || c.eval.probe_episodes < 1) throw ConfigError("eval episode counts must be >= 1");

  const json& s = r.at("sweep");
  const json defaults = default_config();
  for (auto it = s.at("axes").begin(); it != s.at("axes").end(); ++it) {
    const std::string key = expand_key(it.key());
    if (key.rfind("sweep.", 0) == 0 || key == "schema") throw ConfigError("cannot sweep over '" + key + "'");
    const json* def = find_dotted(defaults, key);
    if (!def || def->is_object()) throw ConfigError("sweep axis '" + it.key() + "' is not a config key");
    if (!it->is_array() || it->empty()) throw ConfigError("sweep axis '" + it.key() + "' needs a nonempty list");
    std::vector<json> values;
    for (const auto& v : *it) {
      if (!compatible(*def, v)) throw ConfigError("sweep axis '" + it.key() + "' has a value of the wrong type");
      values.push_back(v);
    }
    c.sweep.axes.emplace_back(key, std::move(values));
  }
  c.sweep.seeds.clear();
  for (const auto& v : s.at("seeds")) {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<int64_t>() >= 0))
      throw ConfigError("sweep.seeds must be non-negative integers");
    c.sweep.seeds.push_back(v.get<uint64_t>());
  }
  if (c.sweep.seeds.empty()) throw ConfigError("sweep.seeds must be nonempty");
  c.sweep.workers = s.at("workers").get<int>();
  if (c.sweep.workers < 1) throw ConfigError("sweep.workers must be >= 1");
  return c;
}

ExperimentConfig parse_config_text(const std::string& text, const std::vector<std::string>& overrides) {
  json user = text.empty() ? json::object() : json::parse(text, nullptr, false);
  if (user.is_discarded()) throw ConfigError("config is not valid JSON");
  if (!user.is_object()) throw ConfigError("config root must be an object");
  for (const auto& o : overrides) apply_override(user, o);
  return from_json(resolve(user));
}

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), overrides);
}

json run_identity(const ExperimentConfig& cfg) {
  json j = cfg.raw;
  j.erase("sweep");
  j["seed"] = cfg.seed;
  // Sections that cannot influence this run are dropped so that unrelated
  // edits leave the id unchanged.
  if (!cfg.needs_pretrain()) j.erase("pretrain");
  if (!cfg.needs_encoder_pretrain()) j.erase("encoder_pretrain");
  return j;
}

std::string run_id(const ExperimentConfig& cfg) { return hex64(fnv1a(run_identity(cfg).dump())); }

datagen::DataConfig pretrain_data(const ExperimentConfig& cfg) {
  datagen::DataConfig d = cfg.data;
  d.seq.mode = datagen::Modality::Unimodal;
  d.seq.B = cfg.pretrain_B;
  return d;
}

net::ModelConfig pretrain_model(const ExperimentConfig& cfg) {
  net::ModelConfig m = cfg.model;
  m.m2_dim = 0;
  m.encoder = false;
  m.encoder_classes = 0;
  // Position tables span the longer multimodal sequence so they transfer unchanged.
  m.max_T = std::max(pretrain_data(cfg).sequence_length(), cfg.model.max_T);
  return m;
}

net::ModelConfig encoder_model(const ExperimentConfig& cfg) {
  net::ModelConfig m = cfg.model;
  m.encoder_classes = cfg.data.m2.K;
  return m;
}

std::string pretrain_key(const ExperimentConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["data"] = cfg.raw.at("data");
  j["data"].erase("m2");
  j["data"].erase("L2");
  j["data"]["mode"] = "unimodal";
  j["data"]["B"] = cfg.pretrain_B;
  j["model"] = cfg.raw.at("model");
  for (const char* k : {"encoder", "encoder_layers", "encoder_width"}) j["model"].erase(k);
  j["model"]["max_T"] = pretrain_model(cfg).max_T;
  j["pretrain"] = cfg.raw.at("pretrain");
  j["pretrain"].erase("B");
  j["pretrain"].erase("history_episodes");
  j["pretrain"].erase("history_circuits");
  return hex64(fnv1a(j.dump()));
}

std::string encoder_key(const ExperimentConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["data"] = cfg.raw.at("data");
  j["model"] = cfg.raw.at("model");
  j["encoder_pretrain"] = cfg.raw.at("encoder_pretrain");
  j["encoder_pretrain"].erase("history_episodes");
  j["encoder_pretrain"].erase("history_circuits");
  return hex64(fnv1a(j.dump()));
}

std::vector<ExperimentConfig> expand_sweep(const ExperimentConfig& cfg) {
  std::vector<json> cells{cfg.raw};
  cells.front()["sweep"] = default_config()["sweep"];
  for (const auto& [key, values] : cfg.sweep.axes) {
    std::vector<json> next;
    for (const auto& base : cells)
      for (const auto& v : values) {
        json c = base;
        set_dotted(c, key, v);
        next.push_back(std::move(c));
      }
    cells = std::move(next);
  }
  std::vector<ExperimentConfig> out;
  for (const auto& c : cells)
    for (uint64_t s : cfg.sweep.seeds) {
      json r = c;
      r["seed"] = s;
      out.push_back(from_json(r));
    }
  return out;
}

}  // namespace icl::runner
