#include "docnmt/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "docnmt/errors.hpp"

namespace docnmt {

namespace {

const std::vector<std::string> kReservedSurface = {"<pad>", "<s>", "</s>", "<unk>"};

struct ParsedDocuments {
  std::vector<std::vector<Sentence>> docs;
  std::vector<std::size_t> first_line;  // 1-based line of each document's first sentence
};

ParsedDocuments parse_with_lines(std::string_view text) {
  ParsedDocuments out;
  std::vector<Sentence> current;
  std::size_t line_no = 0, start = 0, doc_line = 0;
  auto flush = [&] {
    if (!current.empty()) {
      out.docs.push_back(std::move(current));
      out.first_line.push_back(doc_line);
      current.clear();
    }
  };
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    Sentence words = tokenize(text.substr(start, end - start));
    if (words.empty()) {
      flush();
    } else {
      if (current.empty()) doc_line = line_no;
      current.push_back(std::move(words));
    }
    start = end + 1;
  }
  flush();
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

Vocabulary::Vocabulary() {
  for (const auto& t : kReservedSurface) {
    index_.emplace(t, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(t);
  }
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens) {
  Vocabulary v;
  for (const auto& t : tokens) {
    if (v.index_.contains(t)) throw DataError("vocabulary: duplicate token '" + t + "'");
    v.index_.emplace(t, static_cast<TokenId>(v.tokens_.size()));
    v.tokens_.push_back(t);
  }
  return v;
}

TokenId Vocabulary::id(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ContractError("vocabulary: id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(std::string_view token) const { return index_.contains(std::string(token)); }

TokenIds Vocabulary::encode(const Sentence& words) const {
  TokenIds ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(id(w));
  return ids;
}

Sentence Vocabulary::decode(std::span<const TokenId> ids) const {
  Sentence words;
  for (TokenId id : ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    words.push_back(token(id));
  }
  return words;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  for (std::size_t i = kReservedTokens; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  std::vector<std::string> tokens;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) throw DataError("vocabulary '" + path.string() + "': empty line");
    tokens.push_back(line);
  }
  return from_tokens(tokens);
}

Sentence tokenize(std::string_view line) {
  Sentence words;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) words.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return words;
}

std::string join(const Sentence& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

std::vector<std::vector<Sentence>> parse_documents(std::string_view text) {
  return parse_with_lines(text).docs;
}

std::vector<std::vector<Sentence>> load_documents(const std::filesystem::path& path) {
  return parse_documents(read_file(path));
}

void write_documents(const std::filesystem::path& path,
                     const std::vector<std::vector<Sentence>>& docs) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  for (std::size_t d = 0; d < docs.size(); ++d) {
    if (d) out << '\n';
    for (const auto& s : docs[d]) out << join(s) << '\n';
  }
}

std::vector<TextDocument> load_document_corpus(const std::filesystem::path& source_path,
                                               const std::filesystem::path& target_path) {
  const ParsedDocuments src = parse_with_lines(read_file(source_path));
  const ParsedDocuments tgt = parse_with_lines(read_file(target_path));
  if (src.docs.size() != tgt.docs.size()) {
    throw DataError("corpus: " + source_path.string() + " has " + std::to_string(src.docs.size()) +
                    " documents but " + target_path.string() + " has " +
                    std::to_string(tgt.docs.size()));
  }
  std::vector<TextDocument> out;
  out.reserve(src.docs.size());
  for (std::size_t d = 0; d < src.docs.size(); ++d) {
    if (src.docs[d].size() != tgt.docs[d].size()) {
      throw DataError("corpus: document " + std::to_string(d) + " has " +
                      std::to_string(src.docs[d].size()) + " source sentences (from line " +
                      std::to_string(src.first_line[d]) + ") but " +
                      std::to_string(tgt.docs[d].size()) + " target sentences (from line " +
                      std::to_string(tgt.first_line[d]) + ")");
    }
    out.push_back({d, src.docs[d], tgt.docs[d]});
  }
  return out;
}

namespace {

Vocabulary vocabulary_from_counts(const std::map<std::string, std::size_t>& counts,
                                  std::size_t max_size) {
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  // map iteration is lexicographic, so a stable sort on count keeps that tie order
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> kept;
  for (const auto& [token, count] : ranked) {
    if (kept.size() >= max_size) break;
    if (std::find(kReservedSurface.begin(), kReservedSurface.end(), token) != kReservedSurface.end())
      continue;
    kept.push_back(token);
  }
  return Vocabulary::from_tokens(kept);
}

}  // namespace

Vocabulary build_vocabulary(const std::vector<TextDocument>& corpus, CorpusSide side,
                            std::size_t max_size) {
  std::map<std::string, std::size_t> counts;
  for (const auto& doc : corpus)
    for (const auto& s : side == CorpusSide::source ? doc.source : doc.target)
      for (const auto& w : s) ++counts[w];
  return vocabulary_from_counts(counts, max_size);
}

Vocabulary build_vocabulary(const std::vector<std::vector<Sentence>>& documents,
                            std::size_t max_size) {
  std::map<std::string, std::size_t> counts;
  for (const auto& doc : documents)
    for (const auto& s : doc)
      for (const auto& w : s) ++counts[w];
  return vocabulary_from_counts(counts, max_size);
}

std::vector<ParallelDocument> encode_corpus(const std::vector<TextDocument>& corpus,
                                            const Vocabulary& source_vocab,
                                            const Vocabulary& target_vocab) {
  std::vector<ParallelDocument> out;
  out.reserve(corpus.size());
  for (const auto& doc : corpus) {
    if (doc.source.size() != doc.target.size() || doc.source.empty()) {
      throw DataError("corpus: document " + std::to_string(doc.id) + " is empty or misaligned");
    }
    ParallelDocument p{doc.id, {}, {}};
    for (const auto& s : doc.source) p.source.push_back(source_vocab.encode(s));
    for (const auto& s : doc.target) p.target.push_back(target_vocab.encode(s));
    out.push_back(std::move(p));
  }
  return out;
}

TokenIds extract_context(std::span<const TokenIds> source_sentences, std::size_t k,
                         std::size_t window) {
  if (k < 1 || k > source_sentences.size()) {
    throw ContractError("extract_context: sentence index " + std::to_string(k) +
                        " outside document of " + std::to_string(source_sentences.size()));
  }
  const std::size_t first = k > window ? k - window : 1;
  TokenIds context;
  for (std::size_t s = first; s < k; ++s) {
    const auto& sentence = source_sentences[s - 1];
    context.insert(context.end(), sentence.begin(), sentence.end());
  }
  if (context.empty()) context.push_back(kBos);
  return context;
}

TokenIds extract_context(const ParallelDocument& doc, std::size_t k, std::size_t window) {
  return extract_context(std::span<const TokenIds>(doc.source), k, window);
}

TrainingExample make_example(TokenIds context, const TokenIds& source, const TokenIds& target) {
  TrainingExample ex;
  ex.context = context.empty() ? TokenIds{kBos} : std::move(context);
  ex.source = source;
  ex.source.push_back(kEos);
  ex.target.reserve(target.size() + 2);
  ex.target.push_back(kBos);
  ex.target.insert(ex.target.end(), target.begin(), target.end());
  ex.target.push_back(kEos);
  return ex;
}

std::vector<TrainingExample> document_examples(const std::vector<ParallelDocument>& docs,
                                               std::size_t window) {
  std::vector<TrainingExample> out;
  for (const auto& doc : docs)
    for (std::size_t k = 1; k <= doc.size(); ++k)
      out.push_back(make_example(extract_context(doc, k, window), doc.source[k - 1], doc.target[k - 1]));
  return out;
}

std::vector<TrainingExample> sentence_examples(const std::vector<ParallelDocument>& docs) {
  std::vector<TrainingExample> out;
  for (const auto& doc : docs)
    for (std::size_t k = 0; k < doc.size(); ++k)
      out.push_back(make_example({kBos}, doc.source[k], doc.target[k]));
  return out;
}

std::size_t Batch::target_tokens() const {
  return std::accumulate(target_lengths.begin(), target_lengths.end(), std::size_t{0});
}

std::size_t Batch::padded_size() const { return size * std::max(source_len, target_len); }

AttentionMask Batch::source_self_mask() const {
  return AttentionMask::padding(source_len, source_len, source_lengths);
}

AttentionMask Batch::source_memory_mask(std::size_t query_len) const {
  return AttentionMask::padding(query_len, source_len, source_lengths);
}

AttentionMask Batch::target_self_mask() const {
  return AttentionMask::padding_causal(target_len, target_lengths);
}

Batch make_batch(std::span<const TrainingExample> examples) {
  if (examples.empty()) throw ContractError("make_batch: no examples");
  Batch b;
  b.size = examples.size();
  for (const auto& ex : examples) {
    if (ex.context.empty()) throw ContractError("make_batch: empty context");
    if (ex.source.empty()) throw ContractError("make_batch: empty source");
    if (ex.target.size() < 2) throw ContractError("make_batch: target needs BOS and EOS");
    b.source_len = std::max(b.source_len, ex.source.size());
    b.context_len = std::max(b.context_len, ex.context.size());
    b.target_len = std::max(b.target_len, ex.target.size() - 1);
  }
  b.source.assign(b.size * b.source_len, kPad);
  b.context.assign(b.size * b.context_len, kPad);
  b.target_in.assign(b.size * b.target_len, kPad);
  b.target_out.assign(b.size * b.target_len, kPad);
  for (std::size_t i = 0; i < b.size; ++i) {
    const auto& ex = examples[i];
    std::copy(ex.source.begin(), ex.source.end(), b.source.begin() + static_cast<std::ptrdiff_t>(i * b.source_len));
    std::copy(ex.context.begin(), ex.context.end(), b.context.begin() + static_cast<std::ptrdiff_t>(i * b.context_len));
    const std::size_t steps = ex.target.size() - 1;
    std::copy(ex.target.begin(), ex.target.end() - 1, b.target_in.begin() + static_cast<std::ptrdiff_t>(i * b.target_len));
    std::copy(ex.target.begin() + 1, ex.target.end(), b.target_out.begin() + static_cast<std::ptrdiff_t>(i * b.target_len));
    b.source_lengths.push_back(ex.source.size());
    b.context_lengths.push_back(ex.context.size());
    b.target_lengths.push_back(steps);
  }
  return b;
}

std::vector<Batch> make_batches(const std::vector<TrainingExample>& examples,
                                std::size_t token_budget, std::uint64_t seed) {
  auto footprint = [](const TrainingExample& ex) {
    return std::max(ex.source.size(), ex.target.size() - 1);
  };
  for (const auto& ex : examples) {
    if (footprint(ex) > token_budget) {
      throw ContractError("make_batches: example of " + std::to_string(footprint(ex)) +
                          " tokens exceeds budget " + std::to_string(token_budget));
    }
  }
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = examples[a];
    const auto& y = examples[b];
    if (x.target.size() != y.target.size()) return x.target.size() < y.target.size();
    if (x.source.size() != y.source.size()) return x.source.size() < y.source.size();
    return x.context.size() < y.context.size();
  });

  std::vector<Batch> batches;
  std::vector<TrainingExample> pending;
  std::size_t widest = 0;
  for (std::size_t idx : order) {
    const auto& ex = examples[idx];
    const std::size_t w = std::max(widest, footprint(ex));
    if (!pending.empty() && w * (pending.size() + 1) > token_budget) {
      batches.push_back(make_batch(pending));
      pending.clear();
      widest = 0;
    }
    pending.push_back(ex);
    widest = std::max(widest, footprint(ex));
  }
  if (!pending.empty()) batches.push_back(make_batch(pending));

  std::mt19937_64 rng(seed);
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

}  // namespace docnmt
