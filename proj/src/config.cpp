#include "docnmt/config.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <sstream>

#include "docnmt/errors.hpp"

namespace docnmt {

namespace {

constexpr std::array<std::string_view, 13> kKeys = {
    "hidden",         "filter",          "heads",          "encoder_layers", "decoder_layers",
    "context_layers", "context_window",  "integrate_encoder", "integrate_decoder", "gating",
    "dropout",        "source_vocab",    "target_vocab"};

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::size_t parse_count(std::string_view key, std::string_view value) {
  std::size_t out = 0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError("config: '" + std::string(key) + "' expects a count, got '" +
                      std::string(value) + "'");
  }
  return out;
}

double parse_real(std::string_view key, std::string_view value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(std::string(value), &used);
    if (used != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: '" + std::string(key) + "' expects a number, got '" +
                      std::string(value) + "'");
  }
}

}  // namespace

bool parse_bool(std::string_view value) {
  if (value == "1" || value == "true" || value == "on" || value == "yes") return true;
  if (value == "0" || value == "false" || value == "off" || value == "no") return false;
  throw ConfigError("config: expected a boolean, got '" + std::string(value) + "'");
}

std::map<std::string, std::string> parse_key_values(std::string_view text) {
  std::map<std::string, std::string> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    std::string_view line = text.substr(start, end - start);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (!line.empty()) {
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) {
        throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
      }
      out[std::string(trim(line.substr(0, eq)))] = std::string(trim(line.substr(eq + 1)));
    }
    start = end + 1;
  }
  return out;
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.hidden = 512;
  c.filter = 2048;
  c.heads = 8;
  c.encoder_layers = 6;
  c.decoder_layers = 6;
  c.context_layers = 1;
  c.context_window = 2;
  return c;
}

ModelConfig ModelConfig::profile(std::string_view name) {
  if (name == "desk") return desk();
  if (name == "paper") return paper();
  throw ConfigError("unknown profile '" + std::string(name) + "' (expected desk or paper)");
}

void ModelConfig::validate() const {
  if (hidden == 0 || hidden % 2 != 0) throw ConfigError("config: hidden must be even and positive");
  if (heads == 0 || hidden % heads != 0) throw ConfigError("config: heads must divide hidden");
  if (filter == 0) throw ConfigError("config: filter must be positive");
  if (encoder_layers == 0 || decoder_layers == 0) throw ConfigError("config: need at least one encoder and decoder layer");
  if (uses_context() && context_layers == 0) throw ConfigError("config: context_layers must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("config: dropout must lie in [0, 1)");
  if (source_vocab < 4 || target_vocab < 4) throw ConfigError("config: vocabularies must include the 4 reserved ids");
}

bool ModelConfig::is_key(std::string_view key) {
  return std::find(kKeys.begin(), kKeys.end(), key) != kKeys.end();
}

void ModelConfig::set(std::string_view key, std::string_view value) {
  if (key == "hidden") hidden = parse_count(key, value);
  else if (key == "filter") filter = parse_count(key, value);
  else if (key == "heads") heads = parse_count(key, value);
  else if (key == "encoder_layers") encoder_layers = parse_count(key, value);
  else if (key == "decoder_layers") decoder_layers = parse_count(key, value);
  else if (key == "context_layers") context_layers = parse_count(key, value);
  else if (key == "context_window") context_window = parse_count(key, value);
  else if (key == "integrate_encoder") integrate_encoder = parse_bool(value);
  else if (key == "integrate_decoder") integrate_decoder = parse_bool(value);
  else if (key == "gating") gating = parse_bool(value);
  else if (key == "dropout") dropout = parse_real(key, value);
  else if (key == "source_vocab") source_vocab = parse_count(key, value);
  else if (key == "target_vocab") target_vocab = parse_count(key, value);
  else throw ConfigError("config: unknown key '" + std::string(key) + "'");
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "hidden=" << hidden << '\n'
     << "filter=" << filter << '\n'
     << "heads=" << heads << '\n'
     << "encoder_layers=" << encoder_layers << '\n'
     << "decoder_layers=" << decoder_layers << '\n'
     << "context_layers=" << context_layers << '\n'
     << "context_window=" << context_window << '\n'
     << "integrate_encoder=" << (integrate_encoder ? "true" : "false") << '\n'
     << "integrate_decoder=" << (integrate_decoder ? "true" : "false") << '\n'
     << "gating=" << (gating ? "true" : "false") << '\n'
     << "dropout=" << dropout << '\n'
     << "source_vocab=" << source_vocab << '\n'
     << "target_vocab=" << target_vocab << '\n';
  return os.str();
}

ModelConfig ModelConfig::from_text(std::string_view text) {
  ModelConfig c;
  for (const auto& [k, v] : parse_key_values(text)) c.set(k, v);
  return c;
}

}  // namespace docnmt
