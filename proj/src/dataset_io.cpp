#include "ctsl/dataset_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "ctsl/rng.hpp"

namespace ctsl {
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr char kViewMagic[4] = {'C', 'T', 'S', 'L'};
constexpr int kManifestSchema = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* b) {
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw std::runtime_error("csv: cannot parse number '" + s + "'");
  return v;
}

std::string ehr_header(std::size_t d_m) {
  std::string h = "study_id,time,event";
  for (std::size_t k = 0; k < d_m; ++k) h += ",f" + std::to_string(k);
  return h;
}

std::string ehr_row(const StudyRecord& r) {
  std::string row = r.study_id + "," + fmt_double(r.time) + "," + std::to_string(r.event);
  for (double v : r.ehr) row += "," + fmt_double(v);
  return row;
}

std::string view_rel_path(const std::string& id, View v) {
  return "views/" + id + "_" + std::string(view_name(v)) + ".bin";
}

json manifest_entry_json(const ManifestEntry& e) {
  json views = json::object();
  for (const auto& [name, path] : e.view_paths) views[name] = path;
  return json{{"study_id", e.study_id}, {"views", views}, {"split", std::string(split_name(e.split))}};
}

ManifestEntry write_views(const StudyRecord& record, const fs::path& dir, Split split) {
  record.validate();
  fs::create_directories(dir / "views");
  ManifestEntry entry;
  entry.study_id = record.study_id;
  entry.split = split;
  for (View v : kAllViews) {
    const std::string rel = view_rel_path(record.study_id, v);
    write_view(dir / rel, record.view(v));
    entry.view_paths[std::string(view_name(v))] = rel;
  }
  return entry;
}

void append_line(const fs::path& path, const std::string& header, const std::string& line) {
  const bool exists = fs::exists(path);
  if (exists) {
    std::ifstream is(path);
    std::string first;
    std::getline(is, first);
    if (first != header) throw std::runtime_error(path.string() + ": header does not match '" + header + "'");
  }
  std::ofstream os(path, std::ios::app);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  if (!exists) os << header << '\n';
  os << line << '\n';
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(path.string() + ": empty file");
  t.header = split_csv(line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto cells = split_csv(line);
    if (cells.size() != t.header.size()) throw std::runtime_error(path.string() + ": ragged row");
    t.rows.push_back(std::move(cells));
  }
  return t;
}

void fill_from_ehr_row(StudyRecord& r, const std::vector<std::string>& cells) {
  r.time = parse_double(cells.at(1));
  r.event = static_cast<int>(parse_double(cells.at(2)));
  r.ehr.clear();
  for (std::size_t k = 3; k < cells.size(); ++k) r.ehr.push_back(parse_double(cells[k]));
}

}  // namespace

std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + std::string(name) + "'");
}

void write_view(const fs::path& path, const VoxelVideo& video) {
  video.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write view " + path.string());
  char header[16] = {};
  std::memcpy(header, kViewMagic, 4);
  header[4] = 4;
  os.write(header, 16);
  put_u32(os, std::uint32_t(video.height));
  put_u32(os, std::uint32_t(video.width));
  put_u32(os, std::uint32_t(video.frames));
  put_u32(os, std::uint32_t(video.depth));
  static_assert(sizeof(float) == 4);
  for (float v : video.data) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
  }
  if (!os) throw std::runtime_error("write failed for view " + path.string());
}

VoxelVideo read_view(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("missing view file " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 32) throw std::runtime_error("view " + path.string() + ": truncated header");
  if (std::memcmp(bytes.data(), kViewMagic, 4) != 0) throw std::runtime_error("view " + path.string() + ": bad magic");
  if (bytes[4] != 4) throw std::runtime_error("view " + path.string() + ": unsupported rank");
  VoxelVideo v;
  v.height = get_u32(bytes.data() + 16);
  v.width = get_u32(bytes.data() + 20);
  v.frames = get_u32(bytes.data() + 24);
  v.depth = get_u32(bytes.data() + 28);
  const std::size_t count = v.height * v.width * v.frames * v.depth;
  if (bytes.size() - 32 != count * 4) {
    throw std::runtime_error("view " + path.string() + ": payload length " + std::to_string(bytes.size() - 32) +
                             " does not match dims (expected " + std::to_string(count * 4) + ")");
  }
  v.data.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t bits = get_u32(bytes.data() + 32 + 4 * i);
    std::memcpy(&v.data[i], &bits, 4);
  }
  v.validate();
  return v;
}

std::vector<ManifestEntry> read_manifest(const fs::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("missing manifest in " + dir.string());
  const json j = json::parse(is);
  std::vector<ManifestEntry> out;
  for (const auto& s : j.at("studies")) {
    ManifestEntry e;
    e.study_id = s.at("study_id").get<std::string>();
    e.split = parse_split(s.at("split").get<std::string>());
    for (const auto& [name, path] : s.at("views").items()) e.view_paths[name] = path.get<std::string>();
    out.push_back(std::move(e));
  }
  return out;
}

namespace {

void write_manifest(const fs::path& dir, const std::vector<ManifestEntry>& entries) {
  json studies = json::array();
  for (const auto& e : entries) studies.push_back(manifest_entry_json(e));
  json j{{"schema_version", kManifestSchema}, {"studies", studies}};
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  os << j.dump(2) << '\n';
}

}  // namespace

ManifestEntry save_study(const StudyRecord& record, const fs::path& dir, Split split) {
  ManifestEntry entry = write_views(record, dir, split);
  append_line(dir / "ehr.csv", ehr_header(record.ehr.size()), ehr_row(record));
  append_line(dir / "truth.csv", "study_id,latent_risk", record.study_id + "," + fmt_double(record.latent_risk));
  std::vector<ManifestEntry> entries;
  if (fs::exists(dir / "manifest.json")) entries = read_manifest(dir);
  entries.erase(std::remove_if(entries.begin(), entries.end(),
                               [&](const ManifestEntry& e) { return e.study_id == record.study_id; }),
                entries.end());
  entries.push_back(entry);
  write_manifest(dir, entries);
  return entry;
}

StudyRecord load_study(const fs::path& dir, const std::string& study_id) {
  const auto entries = read_manifest(dir);
  auto it = std::find_if(entries.begin(), entries.end(), [&](const ManifestEntry& e) { return e.study_id == study_id; });
  if (it == entries.end()) throw std::runtime_error("study " + study_id + " not in manifest");
  StudyRecord r;
  r.study_id = study_id;
  for (View v : kAllViews) {
    auto p = it->view_paths.find(std::string(view_name(v)));
    if (p == it->view_paths.end()) throw std::runtime_error("study " + study_id + ": missing view " + std::string(view_name(v)));
    r.view(v) = read_view(dir / p->second);
  }
  const CsvTable ehr = read_csv(dir / "ehr.csv");
  bool found = false;
  for (const auto& row : ehr.rows) {
    if (row[0] == study_id) {
      fill_from_ehr_row(r, row);
      found = true;
    }
  }
  if (!found) throw std::runtime_error("study " + study_id + " missing from ehr.csv");
  if (fs::exists(dir / "truth.csv")) {
    for (const auto& row : read_csv(dir / "truth.csv").rows) {
      if (row[0] == study_id) r.latent_risk = parse_double(row[1]);
    }
  }
  r.validate();
  return r;
}

void save_dataset(const Dataset& dataset, const fs::path& dir) {
  if (dataset.studies.size() != dataset.splits.size()) throw std::invalid_argument("save_dataset: splits size mismatch");
  fs::create_directories(dir);
  for (const char* f : {"ehr.csv", "truth.csv", "manifest.json"}) fs::remove(dir / f);
  std::vector<ManifestEntry> entries;
  std::ofstream ehr(dir / "ehr.csv"), truth(dir / "truth.csv");
  const std::size_t d_m = dataset.studies.empty() ? 0 : dataset.studies.front().ehr.size();
  ehr << ehr_header(d_m) << '\n';
  truth << "study_id,latent_risk\n";
  for (std::size_t i = 0; i < dataset.studies.size(); ++i) {
    const StudyRecord& r = dataset.studies[i];
    if (r.ehr.size() != d_m) throw std::invalid_argument("save_dataset: studies disagree on EHR width");
    entries.push_back(write_views(r, dir, dataset.splits[i]));
    ehr << ehr_row(r) << '\n';
    truth << r.study_id << ',' << fmt_double(r.latent_risk) << '\n';
  }
  write_manifest(dir, entries);
}

Dataset load_dataset(const fs::path& dir) {
  const auto entries = read_manifest(dir);
  const CsvTable ehr = read_csv(dir / "ehr.csv");
  std::map<std::string, const std::vector<std::string>*> ehr_rows;
  for (const auto& row : ehr.rows) ehr_rows[row[0]] = &row;
  std::map<std::string, double> truth;
  if (fs::exists(dir / "truth.csv")) {
    for (const auto& row : read_csv(dir / "truth.csv").rows) truth[row[0]] = parse_double(row[1]);
  }
  Dataset ds;
  for (const auto& e : entries) {
    StudyRecord r;
    r.study_id = e.study_id;
    for (View v : kAllViews) {
      auto p = e.view_paths.find(std::string(view_name(v)));
      if (p == e.view_paths.end()) throw std::runtime_error("study " + e.study_id + ": missing view " + std::string(view_name(v)));
      r.view(v) = read_view(dir / p->second);
    }
    auto row = ehr_rows.find(e.study_id);
    if (row == ehr_rows.end()) throw std::runtime_error("study " + e.study_id + " missing from ehr.csv");
    fill_from_ehr_row(r, *row->second);
    if (auto t = truth.find(e.study_id); t != truth.end()) r.latent_risk = t->second;
    r.validate();
    ds.studies.push_back(std::move(r));
    ds.splits.push_back(e.split);
  }
  return ds;
}

std::vector<Split> assign_splits(std::size_t n, double train_fraction, double val_fraction, std::uint64_t seed) {
  if (train_fraction < 0 || val_fraction < 0 || train_fraction + val_fraction > 1.0) {
    throw std::invalid_argument("assign_splits: fractions must be non-negative and sum to <= 1");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng.engine());
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * double(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * double(n)));
  std::vector<Split> out(n, Split::test);
  for (std::size_t i = 0; i < n; ++i) {
    if (i < n_train) out[order[i]] = Split::train;
    else if (i < n_train + n_val) out[order[i]] = Split::val;
  }
  return out;
}

}  // namespace ctsl
