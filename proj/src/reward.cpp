#include "scm/reward.hpp"

#include <array>
#include <charconv>
#include <string>

#include "scm/rollout.hpp"
#include "scm/tasks.hpp"

namespace scm {

namespace {

constexpr std::array<std::string_view, 4> kTags = {"<think>", "</think>", "<answer>", "</answer>"};
constexpr std::string_view kBoxed = "\\boxed{";

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

}  // namespace

std::optional<long> extract_answer(std::string_view text) {
  const auto open = text.rfind(kBoxed);
  if (open == std::string_view::npos) return std::nullopt;
  const auto start = open + kBoxed.size();
  const auto close = text.find('}', start);
  if (close == std::string_view::npos) return std::nullopt;
  const auto body = trim(text.substr(start, close - start));
  if (body.empty()) return std::nullopt;
  long value = 0;
  const char* first = body.data();
  const char* last = body.data() + body.size();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) return std::nullopt;
  return value;
}

double format_reward(std::string_view text, FormatRule rule) {
  double reward = 0.0;
  std::size_t cursor = 0;
  for (const auto tag : kTags) {
    if (rule == FormatRule::Lax) {
      if (text.find(tag) != std::string_view::npos) reward += 0.25;
      continue;
    }
    const auto at = text.find(tag, cursor);
    if (at == std::string_view::npos) continue;
    reward += 0.25;
    cursor = at + tag.size();
  }
  return reward;
}

RewardBreakdown score_text(std::string_view text, long gold, FormatRule rule) {
  RewardBreakdown r;
  const auto answer = extract_answer(text);
  r.accuracy = (answer && *answer == gold) ? 1.0 : 0.0;
  r.format = format_reward(text, rule);
  r.total = r.accuracy + r.format;
  return r;
}

RewardBreakdown score(const RolloutRecord& record, const Vocab& vocab, long gold, FormatRule rule) {
  return score_text(completion_text(record, vocab), gold, rule);
}

}  // namespace scm
