#pragma once

#include "offrl/nn/tensor.hpp"

#include <json.hpp>

namespace offrl::nn {

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);

/// {"step": n, "params": {name: {"trainable", "value", "adam_m"?, "adam_v"?}}}
nlohmann::json store_to_json(const ParamStore& store, bool with_optimizer = true);
/// Overwrites values (and optimizer state when present) of an existing store.
/// Names and shapes must match exactly.
void store_from_json(ParamStore& store, const nlohmann::json& j);

}  // namespace offrl::nn
