#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "docqa/error.hpp"
#include "json.hpp"

namespace docqa {

inline constexpr int kRoundOneTrials = 3;
inline constexpr int kMaxTrials = 5;

/// Options in presentation order. permutation[p] is the 1-based canonical
/// index of the option shown at position p+1.
struct ShuffledOptions {
  std::vector<std::string> options;
  std::vector<int> permutation;

  int to_canonical(int shown_index) const;  // 1-based in, 1-based out
  int to_shown(int canonical_index) const;
};

ShuffledOptions identity_order(std::span<const std::string> options);

/// Seeded from (question_id, trial_no, global_seed); `attempt` only changes
/// the draw when a caller needs a different permutation for the same trial.
ShuffledOptions shuffle_options(std::span<const std::string> options,
                                const std::string& question_id, int trial_no,
                                std::uint64_t global_seed, int attempt = 0);

struct TrialRecord {
  int trial_no = 0;
  int round = 0;
  std::vector<int> permutation;
  std::optional<int> shown_answer;
  std::optional<int> canonical_answer;
};

enum class DecidedBy { Majority, SecondRoundMajority, FinalInference };
std::string to_string(DecidedBy d);

struct VoteOutcome {
  int final_answer = 1;  // canonical, 1-based
  DecidedBy decided_by = DecidedBy::Majority;
  std::vector<TrialRecord> trials;
  int rounds_used = 1;
  bool fallback = false;  // round 3 abstained
};

nlohmann::json to_json(const VoteOutcome& outcome);

/// Runs one trial: gets the options in presentation order and returns the
/// chosen shown index (1-based) or nullopt to abstain.
using TrialExecutor = std::function<std::optional<int>(const ShuffledOptions&, int trial_no)>;

/// Thrown when an executor fails; carries the trials completed so far.
class VoteProtocolError : public Error {
 public:
  VoteProtocolError(ErrorKind kind, const std::string& message, std::vector<TrialRecord> partial)
      : Error(kind, message), partial_(std::move(partial)) {}
  const std::vector<TrialRecord>& partial_trials() const { return partial_; }

 private:
  std::vector<TrialRecord> partial_;
};

/// Three shuffled trials, a majority of two wins. Otherwise a fourth trial
/// that wins only if it repeats a first-round vote and holds a strict
/// plurality. Otherwise a fifth trial decides; if it abstains, the lowest
/// voted index wins, or option 1 if nobody voted.
VoteOutcome run_vote_protocol(std::span<const std::string> options,
                              const std::string& question_id, std::uint64_t global_seed,
                              const TrialExecutor& executor);

/// Plurality over per-model answers; ties go to the answer of the
/// highest-priority model among the tied answers.
int fuse_models(const std::map<std::string, int>& answers,
                const std::vector<std::string>& priority);

}  // namespace docqa
