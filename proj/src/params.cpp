#include "va3/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include <json.hpp>

#include "va3/random.hpp"
#include "va3/text.hpp"

namespace va3 {

ad::Var ParamStore::add(const std::string& name, Tensor value) {
  if (params_.contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
  auto [it, _] = params_.emplace(name, ad::Var::parameter(std::move(value)));
  return it->second;
}

ad::Var ParamStore::weight(const std::string& name, std::size_t in, std::size_t out) {
  Rng rng(seed_, fnv1a(name));
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Tensor value(Shape{in, out});
  for (double& v : value.data()) v = rng.uniform(-bound, bound);
  return add(name, std::move(value));
}

ad::Var ParamStore::zeros(const std::string& name, Shape shape) {
  return add(name, Tensor(std::move(shape), 0.0));
}

ad::Var ParamStore::ones(const std::string& name, Shape shape) {
  return add(name, Tensor(std::move(shape), 1.0));
}

const ad::Var& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw IndexError("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, p] : params_) p.zero_grad();
}

std::map<std::string, Tensor> ParamStore::snapshot() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, p] : params_) out.emplace(name, p.value());
  return out;
}

void ParamStore::load(const std::map<std::string, Tensor>& values) {
  for (auto& [name, p] : params_) {
    auto it = values.find(name);
    if (it == values.end()) throw ShapeError("checkpoint lacks parameter '" + name + "'");
    if (it->second.shape() != p.shape()) {
      throw ShapeError("parameter '" + name + "' has shape " +
                       shape_to_string(p.shape()) + " but checkpoint holds " +
                       shape_to_string(it->second.shape()));
    }
    p.mutable_value() = it->second;
  }
}

void Adam::step(ParamStore& params) {
  std::map<std::string, Tensor> grads;
  for (const auto& [name, p] : params.params()) grads.emplace(name, p.grad());
  step(params, grads);
}

void Adam::step(ParamStore& params, const std::map<std::string, Tensor>& grads) {
  for (const auto& [name, g] : grads) {
    const auto& p = params.get(name);
    if (g.shape() != p.shape()) {
      throw ShapeError("gradient for '" + name + "' has shape " +
                       shape_to_string(g.shape()) + ", parameter is " +
                       shape_to_string(p.shape()));
    }
  }
  ++iteration_;
  const double t = static_cast<double>(iteration_);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (const auto& [name, g] : grads) {
    ad::Var var = params.get(name);
    auto [it, inserted] = moments_.try_emplace(name);
    auto& [m, v] = it->second;
    if (inserted) {
      m = Tensor(g.shape(), 0.0);
      v = Tensor(g.shape(), 0.0);
    }
    Tensor& w = var.mutable_value();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      w[i] -= config_.learning_rate * m_hat / (std::sqrt(v_hat) + config_.epsilon);
    }
  }
}

namespace {

void append_le(std::string& out, double value) {
  std::uint64_t bits;
  std::memcpy(&bits, &value, sizeof bits);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
}

double read_le(const char* p) {
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b) {
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[b])) << (8 * b);
  }
  double value;
  std::memcpy(&value, &bits, sizeof value);
  return value;
}

}  // namespace

void save_tensors(const std::string& prefix, const std::map<std::string, Tensor>& tensors,
                  std::uint64_t seed) {
  std::string payload;
  nlohmann::ordered_json manifest;
  manifest["format"] = "f64-le";
  manifest["seed"] = seed;
  manifest["tensors"] = nlohmann::ordered_json::array();
  for (const auto& [name, t] : tensors) {
    nlohmann::ordered_json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["offset"] = payload.size();
    manifest["tensors"].push_back(std::move(entry));
    for (double v : t.data()) append_le(payload, v);
  }
  write_file(prefix + ".bin", payload);
  write_file(prefix + ".json", manifest.dump(2) + "\n");
}

std::map<std::string, Tensor> load_tensors(const std::string& prefix) {
  const std::string payload = read_file(prefix + ".bin");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(prefix + ".json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError("malformed tensor manifest '" + prefix + ".json': " + e.what());
  }
  std::map<std::string, Tensor> out;
  try {
    for (const auto& entry : manifest.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      Shape shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const std::size_t n = numel(shape);
      if (offset + 8 * n > payload.size()) {
        throw SchemaError("tensor '" + name + "' extends past end of payload");
      }
      std::vector<double> data(n);
      for (std::size_t i = 0; i < n; ++i) data[i] = read_le(payload.data() + offset + 8 * i);
      out.emplace(name, Tensor(std::move(shape), std::move(data)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("malformed tensor manifest '" + prefix + ".json': " + e.what());
  }
  return out;
}

}  // namespace va3
