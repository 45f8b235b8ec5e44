#pragma once

#include <optional>
#include <string_view>

namespace scm {

struct RolloutRecord;
class Vocab;

struct RewardBreakdown {
  double accuracy = 0.0;  // 1 for a correct boxed answer
  double format = 0.0;    // 0.25 per structural tag present
  double total = 0.0;     // accuracy + format
};

enum class FormatRule {
  Lax,     // each tag anywhere, at least once
  Strict,  // tags only count in order <think>, </think>, <answer>, </answer>
};

// Content of the last \boxed{...}, trimmed, as an integer; nullopt when
// absent or not an integer.
std::optional<long> extract_answer(std::string_view text);

double format_reward(std::string_view text, FormatRule rule = FormatRule::Lax);

RewardBreakdown score_text(std::string_view text, long gold, FormatRule rule = FormatRule::Lax);
RewardBreakdown score(const RolloutRecord& record, const Vocab& vocab, long gold,
                      FormatRule rule = FormatRule::Lax);

}  // namespace scm
