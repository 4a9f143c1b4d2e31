#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dualtta/errors.hpp"
#include "dualtta/model.hpp"

namespace dualtta::model {

namespace {

constexpr int kFormatVersion = 1;

// 17 significant decimal digits round-trip any finite double exactly, and the
// formatting is byte-stable, so save -> load -> save is byte-identical.
std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_tensor(std::ostream& os, const Tensor& t) {
  os << "{\"shape\":[";
  for (std::size_t i = 0; i < t.rank(); ++i) {
    if (i) os << ',';
    os << t.dim(i);
  }
  os << "],\"values\":[";
  for (std::size_t i = 0; i < t.numel(); ++i) {
    if (i) os << ',';
    os << fmt_double(t[i]);
  }
  os << "]}";
}

void write_tensor_map(std::ostream& os, const std::map<std::string, Tensor>& m) {
  os << '{';
  bool first = true;
  for (const auto& [name, t] : m) {
    if (!first) os << ',';
    first = false;
    os << '"' << name << "\":";
    write_tensor(os, t);
  }
  os << '}';
}

Tensor read_tensor(const nlohmann::json& j, const std::string& what) {
  if (!j.is_object() || !j.contains("shape") || !j.contains("values")) {
    throw IoError("checkpoint: malformed tensor entry for " + what);
  }
  Shape shape;
  for (const auto& d : j.at("shape")) shape.push_back(d.get<std::size_t>());
  std::vector<double> values;
  values.reserve(j.at("values").size());
  for (const auto& v : j.at("values")) values.push_back(v.get<double>());
  try {
    return Tensor(std::move(shape), std::move(values));
  } catch (const ShapeError& e) {
    throw IoError("checkpoint: " + what + ": " + e.what());
  }
}

}  // namespace

void save_checkpoint(const ModelState& m, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "{\n";
  os << "\"format_version\":" << kFormatVersion << ",\n";
  os << "\"architecture\":{"
     << "\"in_channels\":" << m.arch.in_channels << ",\"num_classes\":" << m.arch.num_classes
     << ",\"conv1_out\":" << m.arch.conv1_out << ",\"conv2_out\":" << m.arch.conv2_out
     << ",\"kernel\":" << m.arch.kernel << "},\n";
  os << "\"norm_mode\":\"" << norm_mode_name(m.norm_mode) << "\",\n";
  os << "\"style_layer_index\":" << m.style_layer_index << ",\n";
  os << "\"params\":";
  write_tensor_map(os, m.params);
  os << ",\n\"buffers\":";
  write_tensor_map(os, m.buffers);
  os << "\n}\n";

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open checkpoint for writing: " + path.string());
  f << os.str();
  if (!f) throw IoError("failed writing checkpoint: " + path.string());
}

ModelState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint file " + path.string() + ": " + e.what());
  }

  if (!j.contains("format_version") || !j.at("format_version").is_number_integer()) {
    throw IoError("malformed checkpoint file " + path.string() + ": missing format_version");
  }
  if (j.at("format_version").get<int>() != kFormatVersion) {
    throw IoError("checkpoint format_version mismatch: expected " +
                  std::to_string(kFormatVersion) + ", got " +
                  j.at("format_version").dump());
  }

  ModelState m;
  try {
    const auto& a = j.at("architecture");
    m.arch.in_channels = a.at("in_channels").get<std::size_t>();
    m.arch.num_classes = a.at("num_classes").get<std::size_t>();
    m.arch.conv1_out = a.at("conv1_out").get<std::size_t>();
    m.arch.conv2_out = a.at("conv2_out").get<std::size_t>();
    m.arch.kernel = a.at("kernel").get<std::size_t>();
    m.norm_mode = norm_mode_from_string(j.at("norm_mode").get<std::string>());
    m.style_layer_index = j.at("style_layer_index").get<std::size_t>();
    for (const auto& [name, jt] : j.at("params").items()) {
      m.params.emplace(name, read_tensor(jt, "param " + name));
    }
    for (const auto& [name, jt] : j.at("buffers").items()) {
      m.buffers.emplace(name, read_tensor(jt, "buffer " + name));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint file " + path.string() + ": " + e.what());
  }

  // shape validation against the architecture descriptor
  const auto expected = m.arch.param_shapes();
  if (m.params.size() != expected.size()) {
    throw IoError("checkpoint parameter set does not match architecture descriptor");
  }
  for (const auto& [name, shape] : expected) {
    auto it = m.params.find(name);
    if (it == m.params.end()) throw IoError("checkpoint missing parameter '" + name + "'");
    if (it->second.shape() != shape) {
      throw IoError("checkpoint shape mismatch for '" + name + "': expected " +
                    ndgrad::shape_str(shape) + ", got " + ndgrad::shape_str(it->second.shape()));
    }
  }
  for (const auto& [name, shape] : m.arch.buffer_shapes()) {
    auto it = m.buffers.find(name);
    if (it == m.buffers.end()) throw IoError("checkpoint missing buffer '" + name + "'");
    if (it->second.shape() != shape) {
      throw IoError("checkpoint shape mismatch for buffer '" + name + "'");
    }
  }
  for (const auto& [name, t] : m.params) {
    if (!t.all_finite()) throw IoError("checkpoint parameter '" + name + "' has non-finite values");
  }
  return m;
}

}  // namespace dualtta::model
