#include "scm/tasks.hpp"

#include <fstream>
#include <sstream>

#include "scm/errors.hpp"
#include "scm/rng.hpp"

namespace scm {

Vocab::Vocab() {
  for (char c = '0'; c <= '9'; ++c) tokens_.emplace_back(1, c);
  for (const char* t : {"+", "-", "*", "=", " ", "<think>", "</think>", "<answer>", "</answer>", "\\boxed{", "}",
                        "<bos>", "<eos>", "<pad>"}) {
    tokens_.emplace_back(t);
  }
  for (int i = 0; i < size(); ++i) {
    index_.emplace(tokens_[i], i);
    longest_ = std::max(longest_, tokens_[i].size());
  }
  bos_ = id("<bos>");
  eos_ = id("<eos>");
  pad_ = id("<pad>");
}

const Vocab& Vocab::standard() {
  static const Vocab vocab;
  return vocab;
}

int Vocab::id(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  if (it == index_.end()) throw TokenizeError("unknown token '" + std::string(token) + "'");
  return it->second;
}

std::vector<int> Vocab::encode(std::string_view text) const {
  std::vector<int> ids;
  std::size_t pos = 0;
  while (pos < text.size()) {
    int found = -1;
    std::size_t found_len = 0;
    for (std::size_t len = std::min(longest_, text.size() - pos); len > 0; --len) {
      const auto it = index_.find(std::string(text.substr(pos, len)));
      if (it != index_.end()) {
        found = it->second;
        found_len = len;
        break;
      }
    }
    if (found < 0) {
      throw TokenizeError("cannot tokenize '" + std::string(1, text[pos]) + "' at position " + std::to_string(pos));
    }
    ids.push_back(found);
    pos += found_len;
  }
  return ids;
}

std::string Vocab::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= size()) throw TokenizeError("token id " + std::to_string(id) + " outside vocabulary");
    out += tokens_[id];
  }
  return out;
}

std::string_view to_string(Tier tier) {
  switch (tier) {
    case Tier::OneDigit: return "1-digit";
    case Tier::TwoDigit: return "2-digit";
    case Tier::MixedOp: return "mixed-op";
  }
  return "?";
}

Tier parse_tier(std::string_view text) {
  if (text == "1-digit") return Tier::OneDigit;
  if (text == "2-digit") return Tier::TwoDigit;
  if (text == "mixed-op") return Tier::MixedOp;
  throw ConfigError("unknown tier '" + std::string(text) + "' (1-digit, 2-digit, mixed-op)");
}

namespace {

long apply(long a, char op, long b) {
  switch (op) {
    case '+': return a + b;
    case '-': return a - b;
    case '*': return a * b;
  }
  throw ContractError(std::string("unknown operator ") + op);
}

std::string step(long a, char op, long b) {
  return std::to_string(a) + op + std::to_string(b) + "=" + std::to_string(apply(a, op, b));
}

struct Parsed {
  std::vector<long> operands;
  std::vector<char> ops;
};

Parsed parse_prompt(std::string_view prompt) {
  if (prompt.empty() || prompt.back() != '=') throw ContractError("prompt must end with '=': " + std::string(prompt));
  Parsed out;
  std::size_t pos = 0;
  const auto body = prompt.substr(0, prompt.size() - 1);
  for (;;) {
    std::size_t start = pos;
    while (pos < body.size() && body[pos] >= '0' && body[pos] <= '9') ++pos;
    if (pos == start) throw ContractError("malformed prompt: " + std::string(prompt));
    out.operands.push_back(std::stol(std::string(body.substr(start, pos - start))));
    if (pos == body.size()) break;
    const char op = body[pos++];
    if (op != '+' && op != '-' && op != '*') throw ContractError("malformed prompt: " + std::string(prompt));
    out.ops.push_back(op);
  }
  if (out.ops.empty() || out.ops.size() > 2) throw ContractError("prompt needs one or two operators");
  return out;
}

char pick_op(Rng& rng, std::string_view ops) { return ops[uniform_int(rng, 0, static_cast<long>(ops.size()) - 1)]; }

}  // namespace

long evaluate_prompt(std::string_view prompt) {
  const Parsed p = parse_prompt(prompt);
  // Fold multiplications first, then add/subtract left to right.
  std::vector<long> terms{p.operands[0]};
  std::vector<char> adds;
  for (std::size_t i = 0; i < p.ops.size(); ++i) {
    if (p.ops[i] == '*') {
      terms.back() *= p.operands[i + 1];
    } else {
      adds.push_back(p.ops[i]);
      terms.push_back(p.operands[i + 1]);
    }
  }
  long value = terms[0];
  for (std::size_t i = 0; i < adds.size(); ++i) value = adds[i] == '+' ? value + terms[i + 1] : value - terms[i + 1];
  return value;
}

TaskInstance gen_task(std::uint64_t seed, Tier tier) {
  Rng rng(seed);
  TaskInstance task;
  task.tier = tier;
  switch (tier) {
    case Tier::OneDigit:
    case Tier::TwoDigit: {
      const long lo = tier == Tier::OneDigit ? 0 : 10;
      const long hi = tier == Tier::OneDigit ? 9 : 99;
      const long a = uniform_int(rng, lo, hi);
      const long b = uniform_int(rng, lo, hi);
      const char op = pick_op(rng, "+-");
      task.prompt = std::to_string(a) + op + std::to_string(b) + "=";
      task.gold = apply(a, op, b);
      break;
    }
    case Tier::MixedOp: {
      const long a = uniform_int(rng, 0, 20);
      const long b = uniform_int(rng, 0, 20);
      const long c = uniform_int(rng, 0, 20);
      const char op1 = pick_op(rng, "+-*");
      const char op2 = pick_op(rng, "+-*");
      task.prompt = std::to_string(a) + op1 + std::to_string(b) + op2 + std::to_string(c) + "=";
      task.gold = (op2 == '*' && op1 != '*') ? apply(a, op1, b * c) : apply(apply(a, op1, b), op2, c);
      break;
    }
  }
  return task;
}

std::string prompt_text(const TaskInstance& task) { return "<bos>" + task.prompt; }

std::string render_completion(const TaskInstance& task) {
  const Parsed p = parse_prompt(task.prompt);
  std::string trace;
  if (p.ops.size() == 2) {
    const long a = p.operands[0], b = p.operands[1], c = p.operands[2];
    if (p.ops[1] == '*' && p.ops[0] != '*') {
      trace = step(b, '*', c) + " " + step(a, p.ops[0], b * c);
    } else {
      const long t = apply(a, p.ops[0], b);
      trace = step(a, p.ops[0], b) + " " + step(t, p.ops[1], c);
    }
  } else if (p.operands[1] >= 10) {
    // split the second operand into tens and units
    const long a = p.operands[0], tens = p.operands[1] / 10 * 10, units = p.operands[1] % 10;
    const long partial = apply(a, p.ops[0], tens);
    trace = step(a, p.ops[0], tens) + " " + step(partial, p.ops[0], units);
  } else {
    trace = step(p.operands[0], p.ops[0], p.operands[1]);
  }
  return "<think>" + trace + "</think><answer>\\boxed{" + std::to_string(task.gold) + "}</answer><eos>";
}

std::string render_exemplar(const TaskInstance& task) { return prompt_text(task) + render_completion(task); }

DatasetSplits make_splits(Tier tier, std::size_t train_count, std::size_t eval_count, std::uint64_t seed) {
  DatasetSplits out;
  for (std::size_t i = 0; i < train_count; ++i) out.train.push_back(gen_task(derive_seed({seed, 0, i}), tier));
  for (std::size_t i = 0; i < eval_count; ++i) out.eval.push_back(gen_task(derive_seed({seed, 1, i}), tier));
  return out;
}

void write_dataset(const std::string& path, std::span<const TaskInstance> tasks) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write dataset '" + path + "'");
  for (const auto& t : tasks) out << t.prompt << '\t' << t.gold << '\n';
  if (!out) throw IoError("failed writing dataset '" + path + "'");
}

std::vector<TaskInstance> read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read dataset '" + path + "'");
  std::vector<TaskInstance> tasks;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw IoError(path + ":" + std::to_string(line_no) + ": missing tab");
    TaskInstance t;
    t.prompt = line.substr(0, tab);
    try {
      t.gold = std::stol(line.substr(tab + 1));
      const Parsed p = parse_prompt(t.prompt);
      t.tier = p.ops.size() == 2 ? Tier::MixedOp : (p.operands[0] >= 10 ? Tier::TwoDigit : Tier::OneDigit);
    } catch (const std::exception& e) {
      throw IoError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (evaluate_prompt(t.prompt) != t.gold) {
      throw IoError(path + ":" + std::to_string(line_no) + ": gold " + std::to_string(t.gold) +
                    " disagrees with " + t.prompt);
    }
    tasks.push_back(std::move(t));
  }
  return tasks;
}

}  // namespace scm
