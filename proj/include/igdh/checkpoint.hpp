#pragma once

#include <cstdint>
#include <string>

#include "igdh/network.hpp"

// Binary weight files. Layout: the magic bytes "IGDH1", then one record per
// parameter in store order — u32 name length, name bytes, four u32 dims
// (N,C,H,W), then N*C*H*W little-endian f32 values — and a trailing FNV-1a
// 64-bit checksum over every preceding byte.

namespace igdh {

void save_checkpoint(const std::string& path, const ParamStore<float>& params);

// `into` defines the expected layout; unknown names, missing names and shape
// mismatches are rejected. On success the stored values are copied in.
void load_checkpoint(const std::string& path, ParamStore<float>& into);

uint64_t fnv1a64(const uint8_t* data, size_t n);

}  // namespace igdh
