#pragma once

// Synthetic arithmetic tasks, the token vocabulary and dataset files.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace scm {

class Vocab {
 public:
  // Digits, operators, space, the structural tags and the special markers.
  Vocab();

  static const Vocab& standard();

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const { return tokens_.at(id); }
  int id(std::string_view token) const;  // throws TokenizeError if absent

  int bos() const { return bos_; }
  int eos() const { return eos_; }
  int pad() const { return pad_; }

  // Longest-match tokenization; throws TokenizeError naming the position.
  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::size_t longest_ = 1;
  int bos_ = 0, eos_ = 0, pad_ = 0;
};

enum class Tier { OneDigit, TwoDigit, MixedOp };

std::string_view to_string(Tier tier);
Tier parse_tier(std::string_view text);  // "1-digit", "2-digit", "mixed-op"

struct TaskInstance {
  std::string prompt;  // e.g. "17+25="
  long gold = 0;
  Tier tier = Tier::OneDigit;

  bool operator==(const TaskInstance&) const = default;
};

TaskInstance gen_task(std::uint64_t seed, Tier tier);

// Exact integer evaluation of "a op b [op c]=" with * binding tighter than + and -.
long evaluate_prompt(std::string_view prompt);

// Text fed to the model before generation starts: "<bos>" + prompt.
std::string prompt_text(const TaskInstance& task);
// Worked completion: <think>trace</think><answer>\boxed{gold}</answer><eos>.
std::string render_completion(const TaskInstance& task);
std::string render_exemplar(const TaskInstance& task);

struct DatasetSplits {
  std::vector<TaskInstance> train;
  std::vector<TaskInstance> eval;
};

// Train item i uses seed path (seed, 0, i); eval item i uses (seed, 1, i).
DatasetSplits make_splits(Tier tier, std::size_t train_count, std::size_t eval_count, std::uint64_t seed);

// One instance per line: prompt TAB gold.
void write_dataset(const std::string& path, std::span<const TaskInstance> tasks);
std::vector<TaskInstance> read_dataset(const std::string& path);

}  // namespace scm
