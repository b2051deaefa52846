#include "effowt/checkpoint.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace effowt {

namespace {
using Json = nlohmann::ordered_json;
}

void save_checkpoint(const ParamRegistry& reg, const std::string& base) {
  std::string bin_tmp = base + ".bin.tmp";
  std::string json_tmp = base + ".json.tmp";
  Json manifest;
  manifest["format"] = "effowt-checkpoint";
  manifest["version"] = 1;
  manifest["dtype"] = "f64le";
  Json tensors = Json::object();
  {
    std::ofstream bin(bin_tmp, std::ios::binary | std::ios::trunc);
    if (!bin) throw Error("checkpoint: cannot write " + bin_tmp);
    int64_t offset = 0;
    for (const auto& [name, p] : reg.params()) {
      const auto& data = p.tensor.data();
      bin.write(reinterpret_cast<const char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(double)));
      Json entry;
      entry["shape"] = p.tensor.shape();
      entry["offset"] = offset;
      entry["numel"] = p.tensor.numel();
      tensors[name] = entry;
      offset += static_cast<int64_t>(data.size() * sizeof(double));
    }
    if (!bin) throw Error("checkpoint: write failed for " + bin_tmp);
  }
  manifest["tensors"] = std::move(tensors);
  {
    std::ofstream js(json_tmp, std::ios::trunc);
    if (!js) throw Error("checkpoint: cannot write " + json_tmp);
    js << manifest.dump(2) << "\n";
  }
  std::filesystem::rename(bin_tmp, base + ".bin");
  std::filesystem::rename(json_tmp, base + ".json");
}

void load_checkpoint(ParamRegistry& reg, const std::string& base) {
  std::ifstream js(base + ".json");
  if (!js) throw Error("checkpoint: cannot open " + base + ".json");
  Json manifest = Json::parse(js);
  if (manifest.value("format", "") != "effowt-checkpoint") {
    throw Error("checkpoint: unrecognized manifest format in " + base + ".json");
  }
  const Json& tensors = manifest.at("tensors");
  std::ifstream bin(base + ".bin", std::ios::binary);
  if (!bin) throw Error("checkpoint: cannot open " + base + ".bin");

  for (auto& [name, p] : reg.params()) {
    if (!tensors.contains(name)) {
      throw Error("checkpoint: missing parameter '" + name + "' in " + base);
    }
    const Json& entry = tensors.at(name);
    Shape shape = entry.at("shape").get<Shape>();
    if (shape != p.tensor.shape()) {
      throw Error("checkpoint: shape mismatch for '" + name + "': file " + shape_str(shape) +
                  " vs model " + shape_str(p.tensor.shape()));
    }
    int64_t offset = entry.at("offset").get<int64_t>();
    auto& data = p.tensor.mutable_data();
    bin.seekg(offset);
    bin.read(reinterpret_cast<char*>(data.data()),
             static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!bin) throw Error("checkpoint: short read for '" + name + "'");
  }
  for (auto it = tensors.begin(); it != tensors.end(); ++it) {
    if (reg.find(it.key()) == nullptr) {
      throw Error("checkpoint: file parameter '" + it.key() + "' absent from the model");
    }
  }
}

}  // namespace effowt
