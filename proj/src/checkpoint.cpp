#include "docnmt/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "docnmt/errors.hpp"

namespace docnmt {

namespace {

constexpr char kMagic[8] = {'D', 'O', 'C', 'N', 'M', 'T', 'C', 'K'};

template <typename U>
void put(std::ostream& out, U value) {
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U take(std::istream& in, const std::string& what) {
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) {
    throw DataError("checkpoint: truncated while reading " + what);
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  U value;
  std::memcpy(&value, bytes, sizeof(U));
  return value;
}

void put_blob(std::ostream& out, const std::string& blob) {
  put<std::uint64_t>(out, blob.size());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

std::string take_blob(std::istream& in, const std::string& what) {
  const auto size = take<std::uint64_t>(in, what);
  if (size > (1ULL << 32)) throw DataError("checkpoint: implausible " + what + " size");
  std::string blob(size, '\0');
  if (!in.read(blob.data(), static_cast<std::streamsize>(size))) {
    throw DataError("checkpoint: truncated while reading " + what);
  }
  return blob;
}

std::string vocab_text(const Vocabulary& v) {
  std::string out;
  for (std::size_t i = kReservedTokens; i < v.size(); ++i) {
    out += v.token(static_cast<TokenId>(i));
    out += '\n';
  }
  return out;
}

Vocabulary vocab_from_text(const std::string& text) {
  std::vector<std::string> tokens;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  return Vocabulary::from_tokens(tokens);
}

}  // namespace

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

std::set<Partition> Checkpoint::partitions() const {
  std::set<Partition> out;
  for (const auto& e : entries) out.insert(e.partition);
  return out;
}

template <typename T>
Checkpoint make_checkpoint(const DocTransformer<T>& model, const Vocabulary& source_vocab,
                           const Vocabulary& target_vocab, std::set<Partition> partitions) {
  Checkpoint ck{model.config(), source_vocab, target_vocab, {}};
  for (const auto& p : model.parameters().all()) {
    if (!partitions.empty() && !partitions.contains(p.partition)) continue;
    ck.entries.push_back({p.name, p.partition, p.value.shape(),
                          std::vector<double>(p.value.data().begin(), p.value.data().end())});
  }
  return ck;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint,
                      std::uint8_t value_width) {
  if (value_width != 4 && value_width != 8) throw ContractError("checkpoint: width must be 4 or 8");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot write '" + path.string() + "'");
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put_blob(out, checkpoint.config.to_text());
  put_blob(out, vocab_text(checkpoint.source_vocab));
  put_blob(out, vocab_text(checkpoint.target_vocab));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(checkpoint.entries.size()));
  for (const auto& e : checkpoint.entries) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.partition));
    put<std::uint8_t>(out, value_width);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto extent : e.shape) put<std::uint64_t>(out, extent);
    for (double v : e.values) {
      if (value_width == 4) put<float>(out, static_cast<float>(v));
      else put<double>(out, v);
    }
  }
  if (!out) throw DataError("checkpoint: write to '" + path.string() + "' failed");
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("checkpoint: cannot open '" + path.string() + "'");
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw DataError("checkpoint: '" + path.string() + "' is not a checkpoint file");
  }
  const auto version = take<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.config = ModelConfig::from_text(take_blob(in, "config"));
  ck.source_vocab = vocab_from_text(take_blob(in, "source vocabulary"));
  ck.target_vocab = vocab_from_text(take_blob(in, "target vocabulary"));
  const auto count = take<std::uint32_t>(in, "entry count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto name_len = take<std::uint32_t>(in, "entry name");
    e.name.resize(name_len);
    if (!in.read(e.name.data(), name_len)) throw DataError("checkpoint: truncated entry name");
    const auto tag = take<std::uint8_t>(in, e.name);
    if (tag > 1) throw DataError("checkpoint: bad partition tag for " + e.name);
    e.partition = static_cast<Partition>(tag);
    const auto width = take<std::uint8_t>(in, e.name);
    if (width != 4 && width != 8) throw DataError("checkpoint: bad value width for " + e.name);
    const auto rank = take<std::uint32_t>(in, e.name);
    for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(take<std::uint64_t>(in, e.name));
    e.values.resize(shape_size(e.shape));
    for (auto& v : e.values) v = width == 4 ? take<float>(in, e.name) : take<double>(in, e.name);
    ck.entries.push_back(std::move(e));
  }
  return ck;
}

template <typename T>
void load_parameters(DocTransformer<T>& model, const Checkpoint& checkpoint,
                     std::set<Partition> partitions) {
  std::vector<std::string> missing, mismatched;
  for (const auto& p : model.parameters().all()) {
    if (!partitions.contains(p.partition)) continue;
    const CheckpointEntry* e = checkpoint.find(p.name);
    if (!e) missing.push_back(p.name);
    else if (e->shape != p.value.shape())
      mismatched.push_back(p.name + " " + shape_string(e->shape) + " vs " + shape_string(p.value.shape()));
  }
  if (!missing.empty() || !mismatched.empty()) {
    std::string msg = "checkpoint does not fit the model configuration;";
    if (!mismatched.empty()) {
      msg += " shape mismatch:";
      for (const auto& m : mismatched) msg += " " + m + ";";
    }
    if (!missing.empty()) {
      msg += " missing:";
      for (const auto& m : missing) msg += " " + m + ";";
    }
    throw ConfigError(msg);
  }
  for (auto& p : model.parameters().all()) {
    if (!partitions.contains(p.partition)) continue;
    const CheckpointEntry* e = checkpoint.find(p.name);
    auto data = p.value.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<T>(e->values[i]);
  }
}

template Checkpoint make_checkpoint(const DocTransformer<float>&, const Vocabulary&,
                                    const Vocabulary&, std::set<Partition>);
template Checkpoint make_checkpoint(const DocTransformer<double>&, const Vocabulary&,
                                    const Vocabulary&, std::set<Partition>);
template void load_parameters(DocTransformer<float>&, const Checkpoint&, std::set<Partition>);
template void load_parameters(DocTransformer<double>&, const Checkpoint&, std::set<Partition>);

}  // namespace docnmt
