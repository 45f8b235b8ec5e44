#include "scm/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "scm/errors.hpp"

namespace scm {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

IniConfig IniConfig::parse(const std::string& text, const std::string& source) {
  IniConfig cfg;
  cfg.source_ = source;
  std::istringstream in(text);
  std::string raw;
  std::string section;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(source + ":" + std::to_string(line_no) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      cfg.section_lines_.emplace(section, line_no);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": expected key = value, got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(line_no) + ": empty key");
    auto& slot = cfg.sections_[section];
    if (slot.count(key)) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    slot[key] = Entry{trim(line.substr(eq + 1)), line_no};
  }
  return cfg;
}

IniConfig IniConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), path);
}

const IniConfig::Entry* IniConfig::find(const std::string& section, const std::string& key) const {
  const auto s = sections_.find(section);
  if (s == sections_.end()) return nullptr;
  const auto k = s->second.find(key);
  return k == s->second.end() ? nullptr : &k->second;
}

bool IniConfig::has(const std::string& section, const std::string& key) const { return find(section, key) != nullptr; }

void IniConfig::bad_value(const std::string& section, const std::string& key, const char* expected) const {
  const Entry* e = find(section, key);
  const std::string name = section.empty() ? key : section + "." + key;
  throw ConfigError(source_ + ":" + std::to_string(e ? e->line : 0) + ": key '" + name + "' expects " + expected +
                    ", got '" + (e ? e->value : "") + "'");
}

std::string IniConfig::get_string(const std::string& section, const std::string& key,
                                  const std::string& fallback) const {
  const Entry* e = find(section, key);
  return e ? e->value : fallback;
}

long IniConfig::get_int(const std::string& section, const std::string& key, long fallback) const {
  const Entry* e = find(section, key);
  if (!e) return fallback;
  try {
    std::size_t used = 0;
    const long v = std::stol(e->value, &used);
    if (used != e->value.size()) bad_value(section, key, "an integer");
    return v;
  } catch (const std::logic_error&) {
    bad_value(section, key, "an integer");
  }
}

double IniConfig::get_double(const std::string& section, const std::string& key, double fallback) const {
  const Entry* e = find(section, key);
  if (!e) return fallback;
  try {
    std::size_t used = 0;
    const double v = std::stod(e->value, &used);
    if (used != e->value.size()) bad_value(section, key, "a number");
    return v;
  } catch (const std::logic_error&) {
    bad_value(section, key, "a number");
  }
}

bool IniConfig::get_bool(const std::string& section, const std::string& key, bool fallback) const {
  const Entry* e = find(section, key);
  if (!e) return fallback;
  if (e->value == "true" || e->value == "1") return true;
  if (e->value == "false" || e->value == "0") return false;
  bad_value(section, key, "true/false");
}

void IniConfig::require_known(const std::map<std::string, std::vector<std::string>>& schema) const {
  for (const auto& [section, keys] : sections_) {
    const auto allowed = schema.find(section);
    if (allowed == schema.end()) {
      const auto line = section_lines_.count(section) ? section_lines_.at(section) : 0;
      throw ConfigError(source_ + ":" + std::to_string(line) + ": unknown section '[" + section + "]'");
    }
    for (const auto& [key, entry] : keys) {
      if (std::find(allowed->second.begin(), allowed->second.end(), key) == allowed->second.end()) {
        throw ConfigError(source_ + ":" + std::to_string(entry.line) + ": unknown key '" +
                          (section.empty() ? key : section + "." + key) + "'");
      }
    }
  }
}

RunConfig run_config_from(const IniConfig& ini) {
  ini.require_known({
      {"", {"seed"}},
      {"model", {"d_model", "n_layers", "n_heads", "max_seq_len", "tie_embeddings", "init_seed"}},
      {"data", {"tier", "pretrain_count", "heldout_count"}},
      {"pretrain", {"epochs", "lr", "batch_size", "format_threshold"}},
      {"rl",
       {"mode", "group_size", "clip_eps", "lr", "prompts_per_batch", "inner_epochs", "steps", "eps_std", "ratio",
        "format_rule", "threads"}},
      {"decode", {"temperature", "top_k", "top_p", "max_new_tokens"}},
  });
  RunConfig rc;
  rc.seed = static_cast<std::uint64_t>(ini.get_int("", "seed", 0));

  rc.model.vocab_size = Vocab::standard().size();
  rc.model.d_model = static_cast<int>(ini.get_int("model", "d_model", rc.model.d_model));
  rc.model.n_layers = static_cast<int>(ini.get_int("model", "n_layers", rc.model.n_layers));
  rc.model.n_heads = static_cast<int>(ini.get_int("model", "n_heads", rc.model.n_heads));
  rc.model.max_seq_len = static_cast<int>(ini.get_int("model", "max_seq_len", rc.model.max_seq_len));
  rc.model.tie_embeddings = ini.get_bool("model", "tie_embeddings", rc.model.tie_embeddings);
  rc.init_seed = static_cast<std::uint64_t>(ini.get_int("model", "init_seed", static_cast<long>(rc.seed)));
  try {
    rc.model.validate();
  } catch (const ContractError& e) {
    throw ConfigError(std::string("[model]: ") + e.what());
  }

  rc.tier = parse_tier(ini.get_string("data", "tier", "1-digit"));
  rc.pretrain_count = static_cast<int>(ini.get_int("data", "pretrain_count", rc.pretrain_count));
  rc.heldout_count = static_cast<int>(ini.get_int("data", "heldout_count", rc.heldout_count));

  rc.pretrain.epochs = static_cast<int>(ini.get_int("pretrain", "epochs", rc.pretrain.epochs));
  rc.pretrain.lr = ini.get_double("pretrain", "lr", rc.pretrain.lr);
  rc.pretrain.batch_size = static_cast<int>(ini.get_int("pretrain", "batch_size", rc.pretrain.batch_size));
  rc.pretrain.format_threshold = ini.get_double("pretrain", "format_threshold", rc.pretrain.format_threshold);
  rc.pretrain.seed = rc.seed;

  rc.decode.temperature = ini.get_double("decode", "temperature", rc.decode.temperature);
  rc.decode.top_k = static_cast<int>(ini.get_int("decode", "top_k", rc.decode.top_k));
  rc.decode.top_p = ini.get_double("decode", "top_p", rc.decode.top_p);
  rc.decode.max_new_tokens = static_cast<int>(ini.get_int("decode", "max_new_tokens", rc.decode.max_new_tokens));
  rc.decode.seed = rc.seed;
  if (!(rc.decode.temperature > 0.0)) throw ConfigError("[decode]: temperature must be positive");
  if (!(rc.decode.top_p > 0.0 && rc.decode.top_p <= 1.0)) throw ConfigError("[decode]: top_p must lie in (0, 1]");

  auto& t = rc.train;
  t.mode = parse_mixing_mode(ini.get_string("rl", "mode", "scm"));
  t.group_size = static_cast<int>(ini.get_int("rl", "group_size", t.group_size));
  t.clip_eps = ini.get_double("rl", "clip_eps", t.clip_eps);
  t.lr = ini.get_double("rl", "lr", t.lr);
  t.prompts_per_batch = static_cast<int>(ini.get_int("rl", "prompts_per_batch", t.prompts_per_batch));
  t.inner_epochs = static_cast<int>(ini.get_int("rl", "inner_epochs", t.inner_epochs));
  t.total_steps = static_cast<int>(ini.get_int("rl", "steps", t.total_steps));
  t.eps_std = ini.get_double("rl", "eps_std", t.eps_std);
  t.threads = static_cast<unsigned>(ini.get_int("rl", "threads", t.threads));
  const auto ratio = ini.get_string("rl", "ratio", "token");
  if (ratio == "token") {
    t.ratio = RatioLevel::Token;
  } else if (ratio == "sequence") {
    t.ratio = RatioLevel::Sequence;
  } else {
    throw ConfigError("[rl]: ratio must be 'token' or 'sequence', got '" + ratio + "'");
  }
  const auto rule = ini.get_string("rl", "format_rule", "lax");
  if (rule == "lax") {
    t.format_rule = FormatRule::Lax;
  } else if (rule == "strict") {
    t.format_rule = FormatRule::Strict;
  } else {
    throw ConfigError("[rl]: format_rule must be 'lax' or 'strict', got '" + rule + "'");
  }
  t.seed = rc.seed;
  t.controls = rc.decode;
  try {
    t.validate();
  } catch (const ContractError& e) {
    throw ConfigError(std::string("[rl]: ") + e.what());
  }
  return rc;
}

std::string default_config_text() {
  return R"(# scm run configuration
seed = 0

[model]
d_model = 64
n_layers = 2
n_heads = 4
max_seq_len = 64
tie_embeddings = true

[data]
tier = 1-digit
pretrain_count = 2000
heldout_count = 100

[pretrain]
epochs = 3
lr = 0.001
batch_size = 16
format_threshold = 0.9

[rl]
mode = scm
group_size = 8
clip_eps = 0.2
lr = 0.0001
prompts_per_batch = 8
inner_epochs = 1
steps = 200
eps_std = 1e-8
ratio = token
format_rule = lax

[decode]
temperature = 0.6
top_k = 30
top_p = 0.95
max_new_tokens = 48
)";
}

}  // namespace scm
