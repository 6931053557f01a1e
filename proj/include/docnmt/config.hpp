#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>

namespace docnmt {

// Dimensions and switches of the document-context Transformer.
struct ModelConfig {
  std::size_t hidden = 64;          // D
  std::size_t filter = 256;         // F
  std::size_t heads = 4;
  std::size_t encoder_layers = 2;   // N_s
  std::size_t decoder_layers = 2;   // N_t
  std::size_t context_layers = 1;   // N_c
  std::size_t context_window = 2;   // preceding source sentences
  bool integrate_encoder = true;
  bool integrate_decoder = true;
  bool gating = true;
  double dropout = 0.1;
  std::size_t source_vocab = 0;
  std::size_t target_vocab = 0;

  // D=64, F=256, h=4, N_s=N_t=2, N_c=1, window=2.
  static ModelConfig desk();
  // D=512, F=2048, h=8, N_s=N_t=6, N_c=1, window=2.
  static ModelConfig paper();
  static ModelConfig profile(std::string_view name);

  bool uses_context() const { return integrate_encoder || integrate_decoder; }

  // Throws ConfigError on inconsistent values.
  void validate() const;

  // Accepts the keys written by to_text(). Unknown keys throw ConfigError.
  void set(std::string_view key, std::string_view value);
  static bool is_key(std::string_view key);

  // One key=value per line.
  std::string to_text() const;
  static ModelConfig from_text(std::string_view text);

  bool operator==(const ModelConfig&) const = default;
};

// Parses "key=value" lines; '#' starts a comment, blank lines are skipped.
std::map<std::string, std::string> parse_key_values(std::string_view text);

bool parse_bool(std::string_view value);

}  // namespace docnmt
