#include "dsmil/snapshot.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dsmil/errors.hpp"

namespace dsmil {

using nlohmann::json;

std::string serialize_snapshot(const MilModel& model, std::uint64_t seed) {
  const ExtractorConfig& ext = model.extractor().config();
  json header = {{"format", "dsmil-snapshot"},
                 {"version", kSnapshotVersion},
                 {"model", model.kind_name()},
                 {"extractor", std::string(to_string(ext.kind))},
                 {"input_dim", ext.input_dim},
                 {"hidden_dim", ext.hidden_dim},
                 {"L", ext.output_dim},
                 {"seed", seed}};
  if (model.is_dsmil()) {
    header["lambda"] = model.dsmil().lambda();
  } else {
    header["attention_dim"] = model.baseline().attention_dim();
  }
  std::ostringstream out;
  out << header.dump() << '\n';
  for (const Parameter* p : model.parameters()) {
    json entry = {{"name", p->name}, {"shape", p->value.shape()}, {"values", p->value.values()}};
    out << entry.dump() << '\n';
  }
  return out.str();
}

MilModel parse_snapshot(const std::string& text, SnapshotHeader* header_out) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("snapshot: empty document");

  SnapshotHeader h;
  try {
    const json j = json::parse(line);
    if (j.at("format").get<std::string>() != "dsmil-snapshot") throw FormatError("snapshot: unknown format tag");
    h.version = j.at("version").get<int>();
    if (h.version != kSnapshotVersion) throw FormatError("snapshot: unsupported version " + std::to_string(h.version));
    h.model = j.at("model").get<std::string>();
    h.extractor.kind = parse_extractor_kind(j.at("extractor").get<std::string>());
    h.extractor.input_dim = j.at("input_dim").get<std::size_t>();
    h.extractor.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    h.extractor.output_dim = j.at("L").get<std::size_t>();
    h.seed = j.at("seed").get<std::uint64_t>();
    if (h.model == "dsmil") h.lambda = j.at("lambda").get<double>();
    else h.attention_dim = j.at("attention_dim").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("snapshot header: ") + e.what());
  } catch (const DomainError& e) {
    throw FormatError(std::string("snapshot header: ") + e.what());
  }

  MilModel model = h.model == "dsmil"
                       ? MilModel(DsmilModel(DsmilConfig{h.extractor, h.lambda}, h.seed))
                       : MilModel(BaselineModel(BaselineConfig{parse_baseline_kind(h.model), h.extractor, h.attention_dim}, h.seed));

  std::map<std::string, Parameter*> by_name;
  for (Parameter* p : model.parameters()) by_name[p->name] = p;
  std::size_t line_number = 1, loaded = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      const auto name = j.at("name").get<std::string>();
      auto it = by_name.find(name);
      if (it == by_name.end()) throw FormatError("snapshot line " + std::to_string(line_number) + ": unknown parameter '" + name + "'");
      Tensor t(j.at("shape").get<Shape>(), j.at("values").get<std::vector<double>>());
      if (t.shape() != it->second->value.shape()) {
        throw FormatError("snapshot line " + std::to_string(line_number) + ": parameter '" + name + "' has shape " +
                          t.shape_string() + ", expected " + it->second->value.shape_string());
      }
      it->second->value = std::move(t);
      it->second->zero_grad();
      by_name.erase(it);
      ++loaded;
    } catch (const json::exception& e) {
      throw FormatError("snapshot line " + std::to_string(line_number) + ": " + e.what());
    } catch (const DimensionError& e) {
      throw FormatError("snapshot line " + std::to_string(line_number) + ": " + e.what());
    }
  }
  if (!by_name.empty()) throw FormatError("snapshot: missing parameter '" + by_name.begin()->first + "'");
  if (header_out != nullptr) *header_out = h;
  return model;
}

void save_snapshot(const MilModel& model, std::uint64_t seed, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << serialize_snapshot(model, seed);
}

MilModel load_snapshot(const std::filesystem::path& path, SnapshotHeader* header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open snapshot " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_snapshot(buf.str(), header);
}

}  // namespace dsmil
