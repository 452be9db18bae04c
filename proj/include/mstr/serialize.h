#pragma once
// Binary tensor-table container shared by checkpoints and datasets.
//
// Layout (all integers little-endian):
//   magic (4 bytes)            -- "MSTR" checkpoints, "MSDS" datasets
//   u32 format version
//   u64 step counter           -- training step; 0 for datasets
//   u32 tensor count
//   per-tensor records:
//     u32 name length, name bytes
//     u8 dtype code (0 = f64, 1 = f32)
//     u32 rank, then rank * i64 extents
//     u64 absolute payload offset
//   u64 text length, text bytes -- config snapshot / index block
//   contiguous tensor payloads (raw element bytes)
//
// Files are written to a temp path and renamed into place, so readers never
// observe a partially written file.  Reads validate magic, version, offsets
// and payload sizes and throw IoError with the failing detail.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mstr/tensor.h"

namespace mstr {

inline constexpr uint32_t kTensorTableVersion = 1;

struct TensorTable {
    uint32_t version = kTensorTableVersion;
    uint64_t step = 0;
    std::string text;  // key=value snapshot or dataset index block
    std::vector<std::pair<std::string, Tensor>> items;

    const Tensor* find(const std::string& name) const;
};

void write_tensor_table(const std::string& path, const char magic[4], const TensorTable& table);

TensorTable read_tensor_table(const std::string& path, const char magic[4]);

inline constexpr char kCheckpointMagic[4] = {'M', 'S', 'T', 'R'};
inline constexpr char kDatasetMagic[4] = {'M', 'S', 'D', 'S'};

}  // namespace mstr
