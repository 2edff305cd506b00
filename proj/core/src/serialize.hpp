#pragma once

// Internal JSON (de)serialization helpers shared by checkpoint and experiment
// code. Not installed.

#include <nlohmann/json.hpp>

#include "cplm/attention_bias.hpp"
#include "cplm/model.hpp"

namespace cplm::detail {

inline nlohmann::json model_config_to_json(const ModelConfig& config) {
    return nlohmann::json{{"n_layers", config.n_layers},
                          {"n_heads", config.n_heads},
                          {"d_model", config.d_model},
                          {"d_ff", config.d_ff},
                          {"vocab_size", config.vocab_size},
                          {"max_seq_len", config.max_seq_len},
                          {"dropout", config.dropout},
                          {"positional", to_string(config.positional)},
                          {"tied_embeddings", config.tied_embeddings},
                          {"pooling", to_string(config.pooling)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& doc) {
    ModelConfig config;
    config.n_layers = doc.at("n_layers").get<int>();
    config.n_heads = doc.at("n_heads").get<int>();
    config.d_model = doc.at("d_model").get<int>();
    config.d_ff = doc.at("d_ff").get<int>();
    config.vocab_size = doc.at("vocab_size").get<int>();
    config.max_seq_len = doc.at("max_seq_len").get<int>();
    config.dropout = doc.at("dropout").get<double>();
    config.positional = positional_from_string(doc.at("positional").get<std::string>());
    config.tied_embeddings = doc.at("tied_embeddings").get<bool>();
    config.pooling = pool_from_string(doc.at("pooling").get<std::string>());
    return config;
}

inline nlohmann::json schedule_spec_to_json(const ScheduleSpec& spec) {
    return nlohmann::json{{"kind", to_string(spec.kind)},
                          {"m0", spec.m0},
                          {"r", spec.r},
                          {"horizon_epochs", spec.horizon_epochs},
                          {"snap_final_to_zero", spec.snap_final_to_zero},
                          {"uniform_slope", spec.uniform_slope}};
}

}  // namespace cplm::detail
