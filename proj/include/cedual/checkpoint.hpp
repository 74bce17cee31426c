#pragma once

#include <cstdint>
#include <string>

#include "cedual/config.hpp"
#include "cedual/data.hpp"
#include "cedual/model.hpp"

namespace cedual {

// Self-describing binary container for a trained model. Byte layout (v1,
// everything little-endian; see README for the authoritative description):
//   magic    8 bytes  "CEDUALv1"
//   version  u32      currently 1
//   seed     u64      the run seed
//   step     u64      optimizer step counter at save time
//   config   u32 length + that many UTF-8 bytes of RunConfig JSON
//   vocab    u32 count, then per token: u32 length + bytes (id order)
//   labels   u32 count, then per name: u32 length + bytes (index order)
//   params   u32 count, then per parameter in lexicographic name order:
//            u32 name length + bytes, u32 rank, u64 dims[rank],
//            f64 values[product(dims)] as IEEE-754 bit patterns
// Writing the same state twice yields byte-identical files.
void save_checkpoint(const std::string& path, const CedualModel& model,
                     const Vocabulary& vocab, const LabelSet& labels, const RunConfig& config,
                     std::uint64_t step);

struct LoadedCheckpoint {
    RunConfig config;
    Vocabulary vocab;
    LabelSet labels;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    CedualModel model;  // rebuilt from config, parameters overwritten from the file
};

// FormatError on bad magic/version/truncation or on any parameter whose
// name/shape does not match the model the config describes.
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace cedual
