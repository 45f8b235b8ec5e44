#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "scm/errors.hpp"
#include "scm/reward.hpp"
#include "scm/tasks.hpp"

using namespace scm;

TEST(Vocab, StructuralTagsAreSingleTokens) {
  const Vocab& v = Vocab::standard();
  EXPECT_EQ(v.encode("<think>").size(), 1u);
  EXPECT_EQ(v.encode("\\boxed{").size(), 1u);
  EXPECT_EQ(v.encode("12"), (std::vector<int>{v.id("1"), v.id("2")}));
  EXPECT_EQ(v.encode("<bos>").front(), v.bos());
  EXPECT_EQ(v.encode("<eos>").front(), v.eos());
  EXPECT_EQ(v.encode("<pad>").front(), v.pad());
}

TEST(Vocab, Bijective) {
  const Vocab& v = Vocab::standard();
  std::set<std::string> seen;
  for (int i = 0; i < v.size(); ++i) {
    EXPECT_EQ(v.id(v.token(i)), i);
    EXPECT_TRUE(seen.insert(v.token(i)).second);
    EXPECT_EQ(v.encode(v.token(i)), (std::vector<int>{i}));
  }
  EXPECT_GE(v.size(), 8);
}

TEST(Vocab, CharacterTokensArePrefixFree) {
  const Vocab& v = Vocab::standard();
  for (int i = 0; i < v.size(); ++i) {
    for (int j = 0; j < v.size(); ++j) {
      const auto& a = v.token(i);
      const auto& b = v.token(j);
      if (i == j || b.size() <= a.size() || b.compare(0, a.size(), a) != 0) continue;
      EXPECT_TRUE(b[0] == '<' || b[0] == '\\') << a << " prefixes " << b;
      EXPECT_TRUE(a[0] == '<' || a[0] == '\\') << a << " prefixes " << b;
    }
  }
}

TEST(Vocab, UnknownCharacterNamesThePosition) {
  try {
    Vocab::standard().encode("12+a=");
    FAIL() << "expected TokenizeError";
  } catch (const TokenizeError& e) {
    EXPECT_NE(std::string(e.what()).find("position 3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(Vocab::standard().encode("<thin>"), TokenizeError);
  EXPECT_THROW(Vocab::standard().id("?"), TokenizeError);
  EXPECT_THROW(Vocab::standard().decode(std::vector<int>{99}), TokenizeError);
}

TEST(Vocab, RoundTrips) {
  const Vocab& v = Vocab::standard();
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    for (Tier tier : {Tier::OneDigit, Tier::TwoDigit, Tier::MixedOp}) {
      const auto text = render_exemplar(gen_task(seed, tier));
      const auto ids = v.encode(text);
      EXPECT_EQ(v.decode(ids), text);
      EXPECT_EQ(v.encode(v.decode(ids)), ids);
    }
  }
}

TEST(EvaluatePrompt, Examples) {
  EXPECT_EQ(evaluate_prompt("7*8="), 56);
  EXPECT_EQ(evaluate_prompt("17+25="), 42);
  EXPECT_EQ(evaluate_prompt("3-9="), -6);
  EXPECT_EQ(evaluate_prompt("2+3*4="), 14);
  EXPECT_EQ(evaluate_prompt("2*3-4="), 2);
  EXPECT_EQ(evaluate_prompt("20-3-4="), 13);
  EXPECT_THROW(evaluate_prompt("2+3"), ContractError);
  EXPECT_THROW(evaluate_prompt("+3="), ContractError);
  EXPECT_THROW(evaluate_prompt("2/3="), ContractError);
}

TEST(GenTask, RangesAndDeterminism) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto one = gen_task(seed, Tier::OneDigit);
    EXPECT_GE(one.gold, -9);
    EXPECT_LE(one.gold, 18);
    EXPECT_EQ(one.prompt.size(), 4u);
    const auto two = gen_task(seed, Tier::TwoDigit);
    EXPECT_EQ(two.prompt.size(), 6u);
    EXPECT_GE(two.gold, 10 - 99);
    EXPECT_LE(two.gold, 198);
    const auto mixed = gen_task(seed, Tier::MixedOp);
    EXPECT_GE(mixed.gold, -400);
    EXPECT_LE(mixed.gold, 8000);
    for (const auto& t : {one, two, mixed}) EXPECT_EQ(evaluate_prompt(t.prompt), t.gold) << t.prompt;
    EXPECT_EQ(gen_task(seed, Tier::MixedOp), mixed);
  }
}

TEST(GenTask, CoversOperatorsAndOperands) {
  std::set<char> ops;
  std::set<char> first_digits;
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    const auto t = gen_task(seed, Tier::OneDigit);
    first_digits.insert(t.prompt[0]);
    ops.insert(t.prompt[1]);
  }
  EXPECT_EQ(ops, (std::set<char>{'+', '-'}));
  EXPECT_EQ(first_digits.size(), 10u);
}

TEST(Render, ScoresTwoAcrossASweep) {
  const Vocab& v = Vocab::standard();
  for (Tier tier : {Tier::OneDigit, Tier::TwoDigit, Tier::MixedOp}) {
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      const auto task = gen_task(seed, tier);
      const std::string completion = render_completion(task);
      ASSERT_EQ(completion.substr(completion.size() - 5), "<eos>");
      EXPECT_EQ(score_text(completion.substr(0, completion.size() - 5), task.gold).total, 2.0) << task.prompt;
      EXPECT_EQ(score_text(completion, task.gold, FormatRule::Strict).total, 2.0);
      EXPECT_EQ(render_exemplar(task), render_exemplar(task));
      EXPECT_LE(v.encode(render_exemplar(task)).size(), 64u);
    }
  }
}

TEST(Render, Examples) {
  const TaskInstance t{"2+3=", 5, Tier::OneDigit};
  EXPECT_EQ(prompt_text(t), "<bos>2+3=");
  EXPECT_EQ(render_completion(t), "<think>2+3=5</think><answer>\\boxed{5}</answer><eos>");
  EXPECT_EQ(score_text("<think>2+3=5</think><answer>\\boxed{5}</answer>", 5).total, 2.0);
  const TaskInstance m{"2+3*4=", 14, Tier::MixedOp};
  EXPECT_EQ(render_completion(m), "<think>3*4=12 2+12=14</think><answer>\\boxed{14}</answer><eos>");
}

TEST(Tier, ParseAndPrint) {
  for (Tier t : {Tier::OneDigit, Tier::TwoDigit, Tier::MixedOp}) EXPECT_EQ(parse_tier(to_string(t)), t);
  EXPECT_THROW(parse_tier("3-digit"), ConfigError);
}

TEST(Splits, SeedDisjointAndDeterministic) {
  const auto a = make_splits(Tier::TwoDigit, 50, 20, 9);
  const auto b = make_splits(Tier::TwoDigit, 50, 20, 9);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.eval, b.eval);
  EXPECT_EQ(a.train.size(), 50u);
  EXPECT_EQ(a.eval.size(), 20u);
  const auto c = make_splits(Tier::TwoDigit, 50, 20, 10);
  EXPECT_NE(a.train, c.train);
  EXPECT_NE(std::vector<TaskInstance>(a.train.begin(), a.train.begin() + 20), a.eval);
}

TEST(Dataset, FileRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "scm_tasks_test.tsv").string();
  const auto tasks = make_splits(Tier::MixedOp, 30, 0, 1).train;
  write_dataset(path, tasks);
  std::ifstream in(path);
  std::string first;
  std::getline(in, first);
  EXPECT_EQ(first, tasks[0].prompt + "\t" + std::to_string(tasks[0].gold));
  EXPECT_EQ(read_dataset(path), tasks);
  std::filesystem::remove(path);
}

TEST(Dataset, BadFilesAreIoErrors) {
  const auto path = (std::filesystem::temp_directory_path() / "scm_tasks_bad.tsv").string();
  {
    std::ofstream out(path);
    out << "2+3=\t6\n";
  }
  EXPECT_THROW(read_dataset(path), IoError);
  {
    std::ofstream out(path);
    out << "2+3= 5\n";
  }
  EXPECT_THROW(read_dataset(path), IoError);
  std::filesystem::remove(path);
  EXPECT_THROW(read_dataset(path), IoError);
}
