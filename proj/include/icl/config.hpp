#pragma once

#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "icl/datagen.hpp"
#include "icl/net.hpp"
#include "icl/trainer.hpp"

namespace icl::runner {

using json = nlohmann::json;

inline constexpr const char* kConfigSchema = "icl-config/1";

struct EvalSpec {
  int n_episodes = 2048;
  int probe_episodes = 512;
  uint64_t probe_seed = 0;
  uint64_t seed = 0;  // evaluation episode stream seed
};

struct SweepSpec {
  std::vector<std::pair<std::string, std::vector<json>>> axes;  // dotted key -> values, sorted by key
  std::vector<uint64_t> seeds{0};
  int workers = 1;
};

struct ExperimentConfig {
  uint64_t seed = 0;
  datagen::DataConfig data;
  net::ModelConfig model;  // derived fields (n_labels, max_T, m2_dim, d_mlp) already resolved
  trainer::TrainConfig train;
  int pretrain_B = 4;  // burstiness of the unimodal decoder pretraining stage
  trainer::TrainConfig pretrain;
  trainer::TrainConfig encoder_pretrain;
  EvalSpec eval;
  SweepSpec sweep;
  json raw;  // fully resolved JSON form, defaults included

  bool multimodal() const { return data.seq.mode == datagen::Modality::Multimodal; }
  // Stage-2 runs start from a pretrained decoder; early fusion starts from scratch.
  bool needs_pretrain() const {
    return multimodal() && train.stage != trainer::Stage::EarlyFusion;
  }
  bool needs_encoder_pretrain() const { return multimodal() && model.encoder; }
};

// Every key with its default value.
json default_config();

// Strict merge of `user` over the defaults: unknown keys and type mismatches
// throw ConfigError naming the dotted key.
json resolve(const json& user);
ExperimentConfig from_json(const json& resolved);

ExperimentConfig parse_config_text(const std::string& text, const std::vector<std::string>& overrides = {});
ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});

// Short names accepted for sweep axes and overrides (K2 -> data.m2.K, ...).
std::string expand_key(const std::string& key);
// Applies "key=value" (value parsed as JSON, else taken as a string).
void apply_override(json& user, const std::string& assignment);
void set_dotted(json& j, const std::string& dotted, const json& value);

// JSON of everything that affects a run's results (sweep section removed).
json run_identity(const ExperimentConfig& cfg);
std::string run_id(const ExperimentConfig& cfg);
// Content address of the unimodal decoder pretraining this config needs.
std::string pretrain_key(const ExperimentConfig& cfg);
std::string encoder_key(const ExperimentConfig& cfg);

// Unimodal pretraining view of a multimodal config.
datagen::DataConfig pretrain_data(const ExperimentConfig& cfg);
net::ModelConfig pretrain_model(const ExperimentConfig& cfg);
net::ModelConfig encoder_model(const ExperimentConfig& cfg);

// One config per sweep cell (axes x seeds), sweep section cleared.
std::vector<ExperimentConfig> expand_sweep(const ExperimentConfig& cfg);

std::string hex64(uint64_t v);

}  // namespace icl::runner
