#pragma once

// Checkpoint container, little-endian throughout:
//
//   magic   "DOCNMTCK"                       8 bytes
//   version u32                              currently 1
//   config  u64 length + ModelConfig text (key=value lines)
//   vocab   u64 length + source tokens, one per line (ids from 4)
//   vocab   u64 length + target tokens
//   count   u32 number of entries
//   entry   u32 name length, name bytes, u8 partition (0 sentence, 1 document),
//           u8 value width (4 or 8), u32 rank, u64 extents, raw values

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "docnmt/config.hpp"
#include "docnmt/corpus.hpp"
#include "docnmt/doc_nmt_model.hpp"

namespace docnmt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Partition partition = Partition::sentence;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  ModelConfig config;
  Vocabulary source_vocab;
  Vocabulary target_vocab;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const;
  std::set<Partition> partitions() const;
};

// Captures the parameters of `model` in the given partitions (all when empty).
template <typename T>
Checkpoint make_checkpoint(const DocTransformer<T>& model, const Vocabulary& source_vocab,
                           const Vocabulary& target_vocab, std::set<Partition> partitions = {});

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint,
                      std::uint8_t value_width = 4);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Copies every checkpoint entry of the requested partitions into `model`.
// A model parameter of those partitions that is missing from the checkpoint,
// or whose shape differs, is a ConfigError listing all offending names.
template <typename T>
void load_parameters(DocTransformer<T>& model, const Checkpoint& checkpoint,
                     std::set<Partition> partitions);

}  // namespace docnmt
