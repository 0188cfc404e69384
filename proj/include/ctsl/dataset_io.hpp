#pragma once

// On-disk dataset layout:
//
//   <dir>/views/<study_id>_<VIEW>.bin   one cine volume per view
//   <dir>/ehr.csv                        study_id,time,event,f0..f{d_m-1}
//   <dir>/truth.csv                      study_id,latent_risk (synthesis sidecar)
//   <dir>/manifest.json                  study ids, view paths, split
//
// View files: 16-byte header (magic "CTSL", u8 rank = 4, 11 reserved zero
// bytes), four little-endian u32 dims (H, W, T, D), row-major float32 payload.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ctsl/synthcine.hpp"

namespace ctsl {

enum class Split { train, val, test };

std::string_view split_name(Split s);
Split parse_split(std::string_view name);

struct ManifestEntry {
  std::string study_id;
  std::map<std::string, std::string> view_paths;  // view name -> path relative to the dataset dir
  Split split = Split::train;
};

void write_view(const std::filesystem::path& path, const VoxelVideo& video);
VoxelVideo read_view(const std::filesystem::path& path);

// Appends one study to the dataset in `dir` (created if needed).
ManifestEntry save_study(const StudyRecord& record, const std::filesystem::path& dir, Split split = Split::train);
// latent_risk is restored from truth.csv when present, otherwise left at 0.
StudyRecord load_study(const std::filesystem::path& dir, const std::string& study_id);

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir);

struct Dataset {
  std::vector<StudyRecord> studies;
  std::vector<Split> splits;  // parallel to studies
};

// Writes a whole dataset at once, replacing any existing dataset files in dir.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// Deterministic split: the first fraction of ids in a seeded shuffle is train,
// the next val, the rest test.
std::vector<Split> assign_splits(std::size_t n, double train_fraction, double val_fraction, std::uint64_t seed);

}  // namespace ctsl
