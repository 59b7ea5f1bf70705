#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "groundseg/train.hpp"

namespace groundseg {

static_assert(std::endian::native == std::endian::little, "arrays.bin is written in host order");

namespace {

constexpr const char* kFormat = "groundseg-checkpoint-1";

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out || !(out << text)) throw DataError("cannot write " + path.string());
}

}  // namespace

void save_checkpoint(const CheckpointBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json arrays = nlohmann::json::array();
  std::ofstream bin(dir / "arrays.bin", std::ios::binary);
  if (!bin) throw DataError("cannot write " + (dir / "arrays.bin").string());
  std::size_t offset = 0;
  for (const auto* p : bundle.model.parameters()) {
    const std::size_t bytes = p->value.size() * sizeof(float);
    arrays.push_back({{"name", p->name}, {"shape", p->value.shape}, {"dtype", "float32"}, {"offset", offset},
                      {"bytes", bytes}});
    bin.write(reinterpret_cast<const char*>(p->value.data.data()), static_cast<std::streamsize>(bytes));
    offset += bytes;
  }
  if (!bin.flush()) throw DataError("short write to " + (dir / "arrays.bin").string());

  nlohmann::json manifest{{"format", kFormat},
                          {"step", bundle.step},
                          {"config", bundle.config.to_json()},
                          {"vocabulary", "vocab.json"},
                          {"arrays", arrays}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  write_text(dir / "vocab.json", bundle.vocab.to_json().dump() + "\n");
}

CheckpointBundle load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest = read_json(dir / "manifest.json");
  try {
    if (manifest.at("format").get<std::string>() != kFormat)
      throw DataError("unsupported checkpoint format " + manifest.at("format").dump());
    CheckpointBundle bundle(RunConfig::from_json(manifest.at("config")));
    bundle.step = manifest.at("step").get<int>();
    bundle.vocab = Vocabulary::from_json(read_json(dir / manifest.at("vocabulary").get<std::string>()));

    std::ifstream bin(dir / "arrays.bin", std::ios::binary);
    if (!bin) throw DataError("cannot open " + (dir / "arrays.bin").string());
    std::vector<char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

    std::map<std::string, const nlohmann::json*> entries;
    for (const auto& a : manifest.at("arrays")) entries[a.at("name").get<std::string>()] = &a;
    auto params = bundle.model.parameters();
    if (entries.size() != params.size())
      throw DataError("checkpoint lists " + std::to_string(entries.size()) + " arrays, model has " +
                      std::to_string(params.size()));
    for (auto* p : params) {
      auto it = entries.find(p->name);
      if (it == entries.end()) throw DataError("checkpoint is missing array " + p->name);
      const auto& a = *it->second;
      const auto shape = a.at("shape").get<std::vector<int>>();
      if (shape != p->value.shape)
        throw DataError("array " + p->name + ": manifest shape " + shape_string(shape) + " but model expects " +
                        shape_string(p->value.shape));
      if (a.at("dtype").get<std::string>() != "float32") throw DataError("array " + p->name + ": dtype must be float32");
      const auto offset = a.at("offset").get<std::size_t>();
      const std::size_t bytes = p->value.size() * sizeof(float);
      if (offset + bytes > blob.size())
        throw DataError("array " + p->name + ": expected " + std::to_string(bytes) + " bytes at offset " +
                        std::to_string(offset) + ", arrays.bin has " + std::to_string(blob.size()));
      std::memcpy(p->value.data.data(), blob.data() + offset, bytes);
    }
    return bundle;
  } catch (const nlohmann::json::exception& e) {
    throw DataError((dir / "manifest.json").string() + ": " + e.what());
  }
}

}  // namespace groundseg
