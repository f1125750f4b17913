#include "dsmil/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "dsmil/errors.hpp"

namespace dsmil {

using nlohmann::json;

std::size_t Dataset::positive_count() const {
  return static_cast<std::size_t>(std::count_if(bags.begin(), bags.end(), [](const Bag& b) { return b.label == 1; }));
}

std::size_t Dataset::instance_count() const {
  std::size_t n = 0;
  for (const auto& b : bags) n += b.size();
  return n;
}

void Dataset::validate() const {
  for (const Bag& bag : bags) {
    if (bag.instances.empty()) throw DataError("bag '" + bag.bag_id + "' has no instances");
    if (bag.label != 0 && bag.label != 1) {
      throw DataError("bag '" + bag.bag_id + "' has non-binary label " + std::to_string(bag.label));
    }
    for (const Instance& x : bag.instances) {
      if (x.size() != feature_dim) {
        throw DataError("bag '" + bag.bag_id + "' has an instance of dimension " + std::to_string(x.size()) +
                        ", dataset dimension is " + std::to_string(feature_dim));
      }
    }
    if (bag.instance_labels) {
      if (bag.instance_labels->size() != bag.instances.size()) {
        throw DataError("bag '" + bag.bag_id + "' has " + std::to_string(bag.instance_labels->size()) +
                        " instance labels for " + std::to_string(bag.instances.size()) + " instances");
      }
      if (bag_label_from_instances(*bag.instance_labels) != bag.label) {
        throw DataError("bag '" + bag.bag_id + "' label disagrees with its instance labels");
      }
    }
  }
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.name = name;
  out.feature_dim = feature_dim;
  out.notes = notes;
  out.bags.reserve(indices.size());
  for (std::size_t i : indices) out.bags.push_back(bags.at(i));
  return out;
}

bool same_bags(const Dataset& a, const Dataset& b) { return a.feature_dim == b.feature_dim && a.bags == b.bags; }

int bag_label_from_instances(std::span<const int> instance_labels) {
  if (instance_labels.empty()) throw DomainError("bag_label_from_instances: empty label list");
  int prod = 1;
  for (int y : instance_labels) {
    if (y != 0 && y != 1) throw DomainError("bag_label_from_instances: non-binary label " + std::to_string(y));
    prod *= 1 - y;
  }
  return 1 - prod;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, delim)) out.push_back(trim(cell));
  if (!line.empty() && line.back() == delim) out.emplace_back();
  return out;
}

std::optional<double> parse_number(const std::string& s) {
  std::string_view v = s;
  if (!v.empty() && v.front() == '+') v.remove_prefix(1);
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) return std::nullopt;
  return out;
}

std::optional<int> map_label(const std::map<std::string, int>& label_map, const std::string& token) {
  if (auto it = label_map.find(token); it != label_map.end()) return it->second;
  const auto value = parse_number(token);
  if (!value) return std::nullopt;
  for (const auto& [key, mapped] : label_map) {
    if (auto k = parse_number(key); k && *k == *value) return mapped;
  }
  return std::nullopt;
}

std::size_t parse_index(const std::string& key, const std::string& value) {
  const auto n = parse_number(value);
  if (!n || *n < 0 || std::floor(*n) != *n) throw DataError("schema: '" + key + "' needs a column index, got '" + value + "'");
  return static_cast<std::size_t>(*n);
}

}  // namespace

void CsvSchema::validate() const {
  if (bag_id_column == label_column) throw DataError("schema: bag id and label share column " + std::to_string(label_column));
  const auto in_features = [&](std::size_t c) { return c >= feature_first && (!feature_last || c <= *feature_last); };
  if (in_features(bag_id_column)) throw DataError("schema: bag id column overlaps the feature columns");
  if (in_features(label_column)) throw DataError("schema: label column overlaps the feature columns");
  if (feature_last && *feature_last < feature_first) throw DataError("schema: empty feature column range");
  for (const auto& [key, mapped] : label_map) {
    if (mapped != 0 && mapped != 1) throw DataError("schema: label '" + key + "' maps to non-binary value");
  }
}

CsvSchema load_csv_schema(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open schema file " + path.string());
  CsvSchema schema;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw DataError("schema line " + std::to_string(line_number) + ": expected key=value");
    const std::string key = trim(t.substr(0, eq));
    // The delimiter value is taken verbatim so that "," and "\t" survive.
    const std::string raw = line.substr(line.find('=') + 1);
    const std::string value = trim(raw);
    if (key == "delimiter") {
      if (value == "\\t" || value == "tab") schema.delimiter = '\t';
      else if (value == "space") schema.delimiter = ' ';
      else if (value.size() == 1) schema.delimiter = value[0];
      else throw DataError("schema: delimiter must be a single character, got '" + value + "'");
    } else if (key == "bag_id_column") {
      schema.bag_id_column = parse_index(key, value);
    } else if (key == "label_column") {
      schema.label_column = parse_index(key, value);
    } else if (key == "features") {
      const auto dash = value.find('-');
      if (dash == std::string::npos) {
        schema.feature_first = parse_index(key, value);
        schema.feature_last = schema.feature_first;
      } else {
        schema.feature_first = parse_index(key, value.substr(0, dash));
        const std::string last = trim(value.substr(dash + 1));
        schema.feature_last = last.empty() ? std::nullopt : std::optional<std::size_t>(parse_index(key, last));
      }
    } else if (key == "label_map") {
      schema.label_map.clear();
      for (const std::string& pair : split(value, ',')) {
        const auto colon = pair.rfind(':');
        if (colon == std::string::npos) throw DataError("schema: label_map entries look like raw:mapped, got '" + pair + "'");
        const auto mapped = parse_number(trim(pair.substr(colon + 1)));
        if (!mapped || (*mapped != 0.0 && *mapped != 1.0)) throw DataError("schema: label_map target must be 0 or 1 in '" + pair + "'");
        schema.label_map[trim(pair.substr(0, colon))] = static_cast<int>(*mapped);
      }
    } else if (key == "header") {
      if (value == "true" || value == "1" || value == "yes") schema.header = true;
      else if (value == "false" || value == "0" || value == "no") schema.header = false;
      else throw DataError("schema: header must be true or false, got '" + value + "'");
    } else {
      throw DataError("schema: unknown key '" + key + "'");
    }
  }
  schema.validate();
  return schema;
}

Dataset parse_grouped_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  schema.validate();
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());

  Dataset ds;
  ds.name = path.stem().string();
  ds.notes.push_back("grouped csv: " + path.filename().string());
  std::unordered_map<std::string, std::size_t> index_of;
  bool have_dim = false;

  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line_number == 1 && schema.header) continue;
    if (trim(line).empty()) continue;
    const auto cells = split(line, schema.delimiter);
    const std::size_t need = std::max({schema.bag_id_column, schema.label_column, schema.feature_first}) + 1;
    if (cells.size() < need) {
      throw DataError(path.filename().string() + " line " + std::to_string(line_number) + ": expected at least " +
                      std::to_string(need) + " columns, got " + std::to_string(cells.size()));
    }
    const std::size_t last = schema.feature_last.value_or(cells.size() - 1);
    if (last >= cells.size()) {
      throw DataError(path.filename().string() + " line " + std::to_string(line_number) + ": feature column " +
                      std::to_string(last) + " missing");
    }
    Instance x;
    x.reserve(last - schema.feature_first + 1);
    for (std::size_t c = schema.feature_first; c <= last; ++c) {
      if (c == schema.bag_id_column || c == schema.label_column) continue;
      const auto v = parse_number(cells[c]);
      if (!v || !std::isfinite(*v)) {
        throw DataError(path.filename().string() + " line " + std::to_string(line_number) + ": non-numeric feature '" +
                        cells[c] + "' in column " + std::to_string(c));
      }
      x.push_back(*v);
    }
    if (!have_dim) {
      ds.feature_dim = x.size();
      have_dim = true;
    } else if (x.size() != ds.feature_dim) {
      throw DataError(path.filename().string() + " line " + std::to_string(line_number) + ": ragged row with " +
                      std::to_string(x.size()) + " features, expected " + std::to_string(ds.feature_dim));
    }

    const std::string& id = cells[schema.bag_id_column];
    const auto label = map_label(schema.label_map, cells[schema.label_column]);
    if (!label) {
      throw DataError(path.filename().string() + " line " + std::to_string(line_number) + ": unmappable label '" +
                      cells[schema.label_column] + "'");
    }
    auto [it, inserted] = index_of.try_emplace(id, ds.bags.size());
    if (inserted) {
      ds.bags.push_back(Bag{id, *label, {}, std::nullopt});
    } else if (ds.bags[it->second].label != *label) {
      throw DataError("bag '" + id + "' has inconsistent labels (line " + std::to_string(line_number) + ")");
    }
    ds.bags[it->second].instances.push_back(std::move(x));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

std::size_t IdxArray::item_size() const {
  std::size_t n = 1;
  for (std::size_t i = 1; i < dims.size(); ++i) n *= dims[i];
  return n;
}

IdxArray parse_idx_bytes(std::span<const std::uint8_t> bytes) {
  const auto read_u32 = [&](std::size_t offset) {
    return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
           (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
  };
  if (bytes.size() < 4) throw FormatError("idx: file shorter than its magic number");
  const std::uint32_t magic = read_u32(0);
  IdxArray out;
  std::size_t ndims = 0;
  if (magic == 0x00000801) {
    out.kind = IdxKind::labels;
    ndims = 1;
  } else if (magic == 0x00000803) {
    out.kind = IdxKind::images;
    ndims = 3;
  } else {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08X", magic);
    throw FormatError(std::string("idx: bad magic ") + buf);
  }
  const std::size_t header = 4 + 4 * ndims;
  if (bytes.size() < header) throw FormatError("idx: truncated dimension header");
  std::size_t count = 1;
  for (std::size_t d = 0; d < ndims; ++d) {
    out.dims.push_back(read_u32(4 + 4 * d));
    count *= out.dims.back();
  }
  if (bytes.size() - header < count) {
    throw FormatError("idx: truncated payload, expected " + std::to_string(count) + " bytes, got " +
                      std::to_string(bytes.size() - header));
  }
  out.values.resize(count);
  const double scale = out.kind == IdxKind::images ? 1.0 / 255.0 : 1.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double v = bytes[header + i];
    out.values[i] = out.kind == IdxKind::images ? v * scale : v;
  }
  return out;
}

IdxArray parse_idx(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open idx file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_idx_bytes(bytes);
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

namespace {

std::size_t draw_bag_size(std::mt19937_64& rng, double mean, double stddev) {
  double draw = mean;
  if (stddev > 0.0) draw = std::normal_distribution<double>(mean, stddev)(rng);
  const double rounded = std::round(draw);
  return rounded < 1.0 ? 1 : static_cast<std::size_t>(rounded);
}

}  // namespace

Dataset build_mnist_bags(const IdxArray& images, const IdxArray& labels, const MnistBagOptions& options) {
  if (images.kind != IdxKind::images || labels.kind != IdxKind::labels) {
    throw DomainError("build_mnist_bags: expected an image array and a label array");
  }
  if (images.count() == 0 || labels.count() == 0) throw DomainError("build_mnist_bags: empty image pool");
  if (images.count() != labels.count()) {
    throw DomainError("build_mnist_bags: " + std::to_string(images.count()) + " images but " +
                      std::to_string(labels.count()) + " labels");
  }
  if (options.mean_size < 1.0) throw DomainError("build_mnist_bags: mean bag size must be >= 1");
  if (options.std_size < 0.0) throw DomainError("build_mnist_bags: negative bag size deviation");

  const auto& frac = options.positive_fraction;
  if (frac && !(*frac >= 0.0 && *frac <= 1.0)) {
    throw DomainError("build_mnist_bags: positive fraction outside [0,1]");
  }

  const std::size_t pool = images.count();
  const std::size_t pixels = images.item_size();
  const auto is_target = [&](std::size_t idx) {
    return static_cast<int>(labels.values[idx]) == options.positive_digit;
  };
  std::vector<std::size_t> negatives;
  for (std::size_t i = 0; i < pool; ++i)
    if (!is_target(i)) negatives.push_back(i);
  if (frac && *frac > 0.0 && negatives.size() == pool) {
    throw DomainError("build_mnist_bags: no digit " + std::to_string(options.positive_digit) + " in the pool");
  }
  if (frac && *frac < 1.0 && negatives.empty()) {
    throw DomainError("build_mnist_bags: pool holds only the positive digit");
  }

  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<std::size_t> pick(0, pool - 1);
  std::uniform_int_distribution<std::size_t> pick_negative(0, negatives.empty() ? 0 : negatives.size() - 1);
  std::bernoulli_distribution coin(frac.value_or(0.0));

  Dataset ds;
  ds.name = "mnist-bags";
  ds.feature_dim = pixels;
  ds.notes.push_back("positive digit " + std::to_string(options.positive_digit));
  ds.bags.reserve(options.num_bags);
  for (std::size_t b = 0; b < options.num_bags; ++b) {
    const std::optional<bool> want_positive = frac ? std::optional<bool>(coin(rng)) : std::nullopt;
    const std::size_t n = draw_bag_size(rng, options.mean_size, options.std_size);
    std::vector<std::size_t> picks(n);
    if (want_positive == false) {
      for (auto& idx : picks) idx = negatives[pick_negative(rng)];
    } else {
      do {
        for (auto& idx : picks) idx = pick(rng);
      } while (want_positive == true && std::none_of(picks.begin(), picks.end(), is_target));
    }

    Bag bag;
    bag.bag_id = options.id_prefix + std::to_string(b);
    bag.instance_labels.emplace();
    bag.instances.reserve(n);
    for (const std::size_t idx : picks) {
      const auto first = images.values.begin() + static_cast<std::ptrdiff_t>(idx * pixels);
      bag.instances.emplace_back(first, first + static_cast<std::ptrdiff_t>(pixels));
      bag.instance_labels->push_back(is_target(idx) ? 1 : 0);
    }
    bag.label = bag_label_from_instances(*bag.instance_labels);
    ds.bags.push_back(std::move(bag));
  }
  return ds;
}

Dataset gen_synthetic_bags(const SyntheticOptions& options) {
  if (options.dim < 2) throw DomainError("gen_synthetic_bags: dim must be >= 2");
  if (options.pos_instance_rate < 0.0 || options.pos_instance_rate > 1.0) {
    throw DomainError("gen_synthetic_bags: positive instance rate outside [0,1]");
  }
  if (options.mean_size < 1.0) throw DomainError("gen_synthetic_bags: mean bag size must be >= 1");
  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::bernoulli_distribution positive(options.pos_instance_rate);

  Dataset ds;
  ds.name = "synthetic";
  ds.feature_dim = options.dim;
  ds.notes.push_back("planted mean (2,0,...,0), seed " + std::to_string(options.seed));
  ds.bags.reserve(options.num_bags);
  for (std::size_t b = 0; b < options.num_bags; ++b) {
    const std::size_t n = draw_bag_size(rng, options.mean_size, options.mean_size / 5.0);
    Bag bag;
    bag.bag_id = "syn" + std::to_string(b);
    bag.instance_labels.emplace();
    for (std::size_t i = 0; i < n; ++i) {
      const int y = positive(rng) ? 1 : 0;
      Instance x(options.dim);
      for (double& v : x) v = noise(rng);
      if (y == 1) x[0] += 2.0;
      bag.instances.push_back(std::move(x));
      bag.instance_labels->push_back(y);
    }
    bag.label = bag_label_from_instances(*bag.instance_labels);
    ds.bags.push_back(std::move(bag));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Canonical bag file
// ---------------------------------------------------------------------------

std::string serialize_bag(const Bag& bag) {
  json j;
  j["bag_id"] = bag.bag_id;
  j["label"] = bag.label;
  j["instances"] = bag.instances;
  if (bag.instance_labels) j["instance_labels"] = *bag.instance_labels;
  return j.dump();
}

Bag parse_bag_line(const std::string& line, std::size_t line_number) {
  const auto fail = [&](const std::string& what) {
    return FormatError("bag file line " + std::to_string(line_number) + ": " + what);
  };
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw fail(std::string("invalid JSON (") + e.what() + ")");
  }
  if (!j.is_object()) throw fail("expected an object");
  Bag bag;
  try {
    if (!j.contains("bag_id") || !j["bag_id"].is_string()) throw fail("missing string field bag_id");
    bag.bag_id = j["bag_id"].get<std::string>();
    if (!j.contains("label") || !j["label"].is_number_integer()) throw fail("missing integer field label");
    bag.label = j["label"].get<int>();
    if (bag.label != 0 && bag.label != 1) throw fail("label must be 0 or 1");
    if (!j.contains("instances") || !j["instances"].is_array() || j["instances"].empty()) {
      throw fail("instances must be a non-empty array");
    }
    for (const auto& row : j["instances"]) {
      if (!row.is_array()) throw fail("each instance must be an array of numbers");
      Instance x;
      x.reserve(row.size());
      for (const auto& v : row) {
        if (!v.is_number()) throw fail("non-numeric instance value");
        x.push_back(v.get<double>());
      }
      bag.instances.push_back(std::move(x));
    }
    if (j.contains("instance_labels")) {
      const auto& yl = j["instance_labels"];
      if (!yl.is_array() || yl.size() != bag.instances.size()) {
        throw fail("instance_labels must be an array with one entry per instance");
      }
      std::vector<int> ys;
      for (const auto& y : yl) {
        if (!y.is_number_integer() || (y.get<int>() != 0 && y.get<int>() != 1)) throw fail("instance labels must be 0 or 1");
        ys.push_back(y.get<int>());
      }
      bag.instance_labels = std::move(ys);
    }
  } catch (const json::exception& e) {
    throw fail(e.what());
  }
  return bag;
}

void write_bags(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (const Bag& bag : dataset.bags) out << serialize_bag(bag) << '\n';
  if (!out) throw DataError("write failed for " + path.string());
}

Dataset read_bags(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  Dataset ds;
  ds.name = path.stem().string();
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    Bag bag = parse_bag_line(line, line_number);
    if (ds.bags.empty()) {
      ds.feature_dim = bag.instances.front().size();
    }
    for (const Instance& x : bag.instances) {
      if (x.size() != ds.feature_dim) {
        throw FormatError("bag file line " + std::to_string(line_number) + ": instance dimension " +
                          std::to_string(x.size()) + ", expected " + std::to_string(ds.feature_dim));
      }
    }
    ds.bags.push_back(std::move(bag));
  }
  return ds;
}

}  // namespace dsmil
