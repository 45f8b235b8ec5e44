#pragma once

// Run configuration: sectioned key=value text.
//
//   seed = 7
//   [model]
//   d_model = 64
//   [rl]
//   mode = scm
//
// Unknown sections or keys are rejected with the offending key and line.

#include <cstdint>
#include <map>
#include <string>

#include "scm/grpo.hpp"
#include "scm/model.hpp"
#include "scm/rollout.hpp"
#include "scm/tasks.hpp"

namespace scm {

class IniConfig {
 public:
  static IniConfig parse(const std::string& text, const std::string& source = "<config>");
  static IniConfig load(const std::string& path);

  bool has(const std::string& section, const std::string& key) const;
  std::string get_string(const std::string& section, const std::string& key, const std::string& fallback) const;
  long get_int(const std::string& section, const std::string& key, long fallback) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;

  // section -> allowed keys; "" is the top level.
  void require_known(const std::map<std::string, std::vector<std::string>>& schema) const;

 private:
  struct Entry {
    std::string value;
    int line = 0;
  };
  const Entry* find(const std::string& section, const std::string& key) const;
  [[noreturn]] void bad_value(const std::string& section, const std::string& key, const char* expected) const;

  std::map<std::string, std::map<std::string, Entry>> sections_;
  std::map<std::string, int> section_lines_;
  std::string source_;
};

struct RunConfig {
  std::uint64_t seed = 0;
  TransformerConfig model;
  std::uint64_t init_seed = 0;
  PretrainConfig pretrain;
  TrainConfig train;
  DecodeControls decode;
  Tier tier = Tier::OneDigit;
  int pretrain_count = 2000;
  int heldout_count = 100;
};

// Defaults overridden by whatever the file sets; also checks the schema.
RunConfig run_config_from(const IniConfig& ini);
std::string default_config_text();

}  // namespace scm
