#pragma once

#include <filesystem>

#include "ctsl/autograd.hpp"

namespace ctsl {

// Binary parameter bundle: magic "CTSLCKPT", u32 count, then per parameter
// (u32 name length, name, u32 rank, u64 dims, float64 payload), little endian.
void save_parameters(const std::filesystem::path& path, const ParameterList& params);
// Loads values into `params` by name; throws on any missing name or shape mismatch.
void load_parameters(const std::filesystem::path& path, const ParameterList& params);

}  // namespace ctsl
