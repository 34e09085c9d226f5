#include "docqa/vote_ensemble.hpp"

#include <algorithm>
#include <random>

#include "docqa/hash.hpp"
#include "docqa/log.hpp"

namespace docqa {

using nlohmann::json;

int ShuffledOptions::to_canonical(int shown_index) const {
  if (shown_index < 1 || shown_index > static_cast<int>(permutation.size())) {
    throw Error(ErrorKind::InvalidInput, "shown index out of range: " + std::to_string(shown_index));
  }
  return permutation[static_cast<std::size_t>(shown_index - 1)];
}

int ShuffledOptions::to_shown(int canonical_index) const {
  const auto it = std::find(permutation.begin(), permutation.end(), canonical_index);
  if (it == permutation.end()) {
    throw Error(ErrorKind::InvalidInput,
                "canonical index out of range: " + std::to_string(canonical_index));
  }
  return static_cast<int>(it - permutation.begin()) + 1;
}

ShuffledOptions identity_order(std::span<const std::string> options) {
  ShuffledOptions s;
  s.options.assign(options.begin(), options.end());
  for (std::size_t i = 0; i < options.size(); ++i) s.permutation.push_back(static_cast<int>(i + 1));
  return s;
}

namespace {

// Unbiased draw from [0, n) without relying on a library distribution, whose
// output is implementation-defined.
std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

}  // namespace

ShuffledOptions shuffle_options(std::span<const std::string> options,
                                const std::string& question_id, int trial_no,
                                std::uint64_t global_seed, int attempt) {
  if (options.size() < 2) throw Error(ErrorKind::InvalidInput, "need at least two options");
  StableHasher h;
  h.field("shuffle").field(question_id).update_u64(static_cast<std::uint64_t>(trial_no));
  h.update_u64(global_seed);
  if (attempt) h.update_u64(static_cast<std::uint64_t>(attempt));
  std::mt19937_64 rng(h.digest());

  auto s = identity_order(options);
  for (std::size_t i = s.permutation.size() - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(bounded(rng, i + 1));
    std::swap(s.permutation[i], s.permutation[j]);
  }
  for (std::size_t p = 0; p < s.permutation.size(); ++p)
    s.options[p] = options[static_cast<std::size_t>(s.permutation[p] - 1)];
  return s;
}

std::string to_string(DecidedBy d) {
  switch (d) {
    case DecidedBy::Majority: return "majority";
    case DecidedBy::SecondRoundMajority: return "second_round_majority";
    case DecidedBy::FinalInference: return "final_inference";
  }
  return "?";
}

json to_json(const VoteOutcome& outcome) {
  json trials = json::array();
  for (const auto& t : outcome.trials) {
    trials.push_back({{"trial_no", t.trial_no},
                      {"round", t.round},
                      {"permutation", t.permutation},
                      {"shown_answer", t.shown_answer ? json(*t.shown_answer) : json(nullptr)},
                      {"canonical_answer",
                       t.canonical_answer ? json(*t.canonical_answer) : json(nullptr)}});
  }
  return {{"final_answer", outcome.final_answer},
          {"decided_by", to_string(outcome.decided_by)},
          {"rounds_used", outcome.rounds_used},
          {"fallback", outcome.fallback},
          {"trials", std::move(trials)}};
}

namespace {

std::map<int, int> tally(const std::vector<TrialRecord>& trials) {
  std::map<int, int> counts;
  for (const auto& t : trials)
    if (t.canonical_answer) ++counts[*t.canonical_answer];
  return counts;
}

}  // namespace

VoteOutcome run_vote_protocol(std::span<const std::string> options,
                              const std::string& question_id, std::uint64_t global_seed,
                              const TrialExecutor& executor) {
  if (options.size() < 2) throw Error(ErrorKind::InvalidInput, "vote needs at least two options");
  VoteOutcome out;

  auto run_trial = [&](int trial_no, int round, const ShuffledOptions& shown) {
    TrialRecord rec;
    rec.trial_no = trial_no;
    rec.round = round;
    rec.permutation = shown.permutation;
    std::optional<int> answer;
    try {
      answer = executor(shown, trial_no);
    } catch (const Error& e) {
      throw VoteProtocolError(e.kind(), "trial " + std::to_string(trial_no) + ": " + e.detail(),
                              out.trials);
    }
    if (answer && *answer >= 1 && *answer <= static_cast<int>(options.size())) {
      rec.shown_answer = *answer;
      rec.canonical_answer = shown.to_canonical(*answer);
    }
    out.trials.push_back(std::move(rec));
  };

  // Round 1: three trials over pairwise distinct permutations.
  std::vector<std::vector<int>> used;
  for (int trial = 1; trial <= kRoundOneTrials; ++trial) {
    ShuffledOptions shown;
    for (int attempt = 0;; ++attempt) {
      shown = shuffle_options(options, question_id, trial, global_seed, attempt);
      if (std::find(used.begin(), used.end(), shown.permutation) == used.end()) break;
    }
    used.push_back(shown.permutation);
    run_trial(trial, 1, shown);
  }
  auto counts = tally(out.trials);
  for (const auto& [answer, n] : counts) {
    if (n >= 2) {
      out.final_answer = answer;
      out.decided_by = DecidedBy::Majority;
      out.rounds_used = 1;
      return out;
    }
  }
  const auto round_one = counts;

  // Round 2: one more trial with all options retained.
  run_trial(4, 2, shuffle_options(options, question_id, 4, global_seed));
  if (const auto& r2 = out.trials.back().canonical_answer; r2 && round_one.count(*r2)) {
    counts = tally(out.trials);
    const int mine = counts.at(*r2);
    const bool strict = std::all_of(counts.begin(), counts.end(), [&](const auto& kv) {
      return kv.first == *r2 || kv.second < mine;
    });
    if (strict) {
      out.final_answer = *r2;
      out.decided_by = DecidedBy::SecondRoundMajority;
      out.rounds_used = 2;
      return out;
    }
  }

  // Round 3: authoritative final inference.
  run_trial(5, 3, shuffle_options(options, question_id, 5, global_seed));
  out.decided_by = DecidedBy::FinalInference;
  out.rounds_used = 3;
  if (const auto& r3 = out.trials.back().canonical_answer) {
    out.final_answer = *r3;
    return out;
  }
  out.fallback = true;
  counts = tally(out.trials);
  out.final_answer = counts.empty() ? 1 : counts.begin()->first;
  log::info("vote: final inference abstained for ", question_id, "; falling back to option ",
            out.final_answer);
  return out;
}

int fuse_models(const std::map<std::string, int>& answers,
                const std::vector<std::string>& priority) {
  if (answers.size() < 2) throw Error(ErrorKind::InvalidInput, "fusion needs at least two models");
  for (const auto& [model, _] : answers) {
    if (std::find(priority.begin(), priority.end(), model) == priority.end()) {
      throw Error(ErrorKind::InvalidInput, "fusion priority does not list model '" + model + "'");
    }
  }
  std::map<int, int> counts;
  for (const auto& [_, a] : answers) ++counts[a];
  int best = 0;
  for (const auto& [_, n] : counts) best = std::max(best, n);
  for (const auto& model : priority) {
    const auto it = answers.find(model);
    if (it != answers.end() && counts[it->second] == best) return it->second;
  }
  return counts.begin()->first;  // unreachable: priority covers every model
}

}  // namespace docqa
