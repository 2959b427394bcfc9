#include "offrl/nn/serialize.hpp"

#include <stdexcept>

namespace offrl::nn {

nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json j;
  j["rows"] = m.rows();
  j["cols"] = m.cols();
  j["data"] = std::vector<double>(m.data(), m.data() + m.size());
  return j;
}

Matrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Index>();
  const auto cols = j.at("cols").get<Index>();
  const auto& data = j.at("data");
  if (static_cast<Index>(data.size()) != rows * cols) {
    throw std::runtime_error("matrix payload has " + std::to_string(data.size()) + " values for " +
                             std::to_string(rows) + "x" + std::to_string(cols));
  }
  Matrix m(rows, cols);
  for (Index k = 0; k < m.size(); ++k) m.data()[k] = data[static_cast<std::size_t>(k)].get<double>();
  return m;
}

nlohmann::json store_to_json(const ParamStore& store, bool with_optimizer) {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, p] : store) {
    nlohmann::json e;
    e["trainable"] = p.trainable;
    e["value"] = matrix_to_json(p.value);
    if (with_optimizer && p.adam_m.size() != 0) {
      e["adam_m"] = matrix_to_json(p.adam_m);
      e["adam_v"] = matrix_to_json(p.adam_v);
    }
    params[name] = std::move(e);
  }
  nlohmann::json j;
  j["step"] = with_optimizer ? store.step : 0;
  j["params"] = std::move(params);
  return j;
}

void store_from_json(ParamStore& store, const nlohmann::json& j) {
  const auto& params = j.at("params");
  if (params.size() != store.size()) {
    throw std::runtime_error("checkpoint has " + std::to_string(params.size()) + " parameters, model expects " +
                             std::to_string(store.size()));
  }
  for (auto& [name, p] : store) {
    if (!params.contains(name)) throw std::runtime_error("checkpoint is missing parameter " + name);
    const auto& e = params.at(name);
    Matrix v = matrix_from_json(e.at("value"));
    if (v.rows() != p.value.rows() || v.cols() != p.value.cols()) {
      throw std::runtime_error("parameter " + name + " has shape " + shape_string(v) + ", expected " +
                               shape_string(p.value));
    }
    p.value = std::move(v);
    p.trainable = e.value("trainable", true);
    if (e.contains("adam_m")) {
      p.adam_m = matrix_from_json(e.at("adam_m"));
      p.adam_v = matrix_from_json(e.at("adam_v"));
    } else {
      p.adam_m.resize(0, 0);
      p.adam_v.resize(0, 0);
    }
    p.grad.setZero(p.value.rows(), p.value.cols());
    p.has_grad = false;
  }
  store.step = j.value("step", 0LL);
}

}  // namespace offrl::nn
