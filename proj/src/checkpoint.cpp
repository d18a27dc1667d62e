#include "ntseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace ntseg {

namespace {

constexpr char kMagic[9] = "NTCKPT01";

using nlohmann::json;

json config_json(const UNetConfig& cfg) {
  return {{"in_channels", cfg.in_channels},
          {"num_classes", cfg.num_classes},
          {"base_channels", cfg.base_channels},
          {"depth", cfg.depth},
          {"seed", cfg.seed}};
}

UNetConfig config_from(const json& j) {
  UNetConfig cfg;
  cfg.in_channels = j.at("in_channels").get<size_t>();
  cfg.num_classes = j.at("num_classes").get<size_t>();
  cfg.base_channels = j.at("base_channels").get<size_t>();
  cfg.depth = j.at("depth").get<size_t>();
  cfg.seed = j.at("seed").get<uint64_t>();
  return cfg;
}

void append_tensor_list(json& names, const std::string& prefix,
                        const std::vector<NamedTensor<float>>& list) {
  for (const auto& e : list)
    names.push_back({{"name", prefix + e.name}, {"shape", e.value.shape()}});
}

}  // namespace

void save_checkpoint(const UNetParams<float>& model,
                     const AdamState<float>* adam, const std::string& path,
                     const std::map<std::string, std::string>& extra) {
  json header;
  header["config"] = config_json(model.config());
  json names = json::array();
  append_tensor_list(names, "", model.entries());
  if (adam) {
    append_tensor_list(names, "adam.m.", adam->m);
    append_tensor_list(names, "adam.v.", adam->v);
    header["adam_t"] = adam->t;
  }
  header["tensors"] = names;
  for (const auto& [k, v] : extra) header[k] = v;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out.write(kMagic, 8);
  const std::string line = header.dump();
  out.write(line.data(), static_cast<std::streamsize>(line.size()));
  out.put('\n');

  auto write_list = [&](const std::vector<NamedTensor<float>>& list) {
    for (const auto& e : list)
      out.write(reinterpret_cast<const char*>(e.value.data()),
                static_cast<std::streamsize>(e.value.size() * sizeof(float)));
  };
  write_list(model.entries());
  if (adam) {
    write_list(adam->m);
    write_list(adam->v);
  }
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  char magic[8];
  if (!in.read(magic, 8))
    throw std::runtime_error(path + ": truncated file, no magic");
  if (std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error(path + ": bad magic, not a checkpoint");
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error(path + ": missing header line");

  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": header is not valid JSON: " + e.what());
  }

  Checkpoint ckpt;
  ckpt.model.set_config(config_from(header.at("config")));
  const bool has_adam = header.contains("adam_t");
  if (has_adam) {
    ckpt.adam.emplace();
    ckpt.adam->t = header["adam_t"].get<size_t>();
  }
  for (auto& [key, value] : header.items()) {
    if (key == "config" || key == "tensors" || key == "adam_t") continue;
    if (value.is_string()) ckpt.extra[key] = value.get<std::string>();
  }

  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::vector<size_t> shape =
        entry.at("shape").get<std::vector<size_t>>();
    Tensor<float> t(shape);
    if (!in.read(reinterpret_cast<char*>(t.data()),
                 static_cast<std::streamsize>(t.size() * sizeof(float))))
      throw std::runtime_error(path + ": truncated payload at tensor '" +
                               name + "'");
    if (name.rfind("adam.m.", 0) == 0) {
      if (!ckpt.adam)
        throw std::runtime_error(path + ": adam tensors without adam_t");
      ckpt.adam->m.push_back({name.substr(7), std::move(t)});
    } else if (name.rfind("adam.v.", 0) == 0) {
      if (!ckpt.adam)
        throw std::runtime_error(path + ": adam tensors without adam_t");
      ckpt.adam->v.push_back({name.substr(7), std::move(t)});
    } else {
      ckpt.model.add(name, std::move(t));
    }
  }
  in.peek();
  if (!in.eof())
    throw std::runtime_error(path + ": payload larger than header declares");
  return ckpt;
}

UNetParams<float> load_checkpoint_for(const UNetConfig& cfg,
                                      const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);

  std::set<std::string> want, have;
  for (const auto& e : unet_layer_plan(cfg)) want.insert(e.name);
  for (const auto& e : ckpt.model.entries()) have.insert(e.name);
  if (want != have) {
    std::string msg = path + ": checkpoint does not fit the model.";
    std::string missing, extra;
    for (const auto& n : want)
      if (!have.count(n)) missing += " " + n;
    for (const auto& n : have)
      if (!want.count(n)) extra += " " + n;
    if (!missing.empty()) msg += " missing:" + missing;
    if (!extra.empty()) msg += " extra:" + extra;
    throw std::runtime_error(msg);
  }
  for (const auto& e : unet_layer_plan(cfg)) {
    const auto& t = ckpt.model.at(e.name);
    if (t.shape() != e.shape)
      throw std::runtime_error(path + ": tensor '" + e.name + "' has shape " +
                               t.shape_string() + ", model wants " +
                               shape_string(e.shape));
  }
  ckpt.model.set_config(cfg);
  return std::move(ckpt.model);
}

}  // namespace ntseg
