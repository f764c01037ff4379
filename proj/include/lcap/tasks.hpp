#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "lcap/rng.hpp"
#include "lcap/transformer.hpp"

namespace lcap {

enum class Task { kCopy, kReverse, kSwapTranslate };

inline Task parse_task(const std::string& name) {
  if (name == "copy") return Task::kCopy;
  if (name == "reverse") return Task::kReverse;
  if (name == "swap-translate") return Task::kSwapTranslate;
  throw ConfigError("task: unknown task '" + name + "' (copy | reverse | swap-translate)");
}

inline std::string to_string(Task t) {
  switch (t) {
    case Task::kCopy: return "copy";
    case Task::kReverse: return "reverse";
    case Task::kSwapTranslate: return "swap-translate";
  }
  return "?";
}

using TokenSeq = std::vector<std::int64_t>;

// Deterministic toy sequence tasks over data tokens [kFirstDataToken, vocab).
// swap-translate swaps adjacent positions and then maps every token through a
// fixed vocabulary permutation, a desk-scale stand-in for translation.
class TaskSampler {
 public:
  TaskSampler(Task task, std::int64_t vocab_size, std::int64_t min_len, std::int64_t max_len)
      : task_(task), vocab_(vocab_size), min_len_(min_len), max_len_(max_len) {
    if (min_len_ < 1 || max_len_ < min_len_) {
      throw ConfigError("task: invalid data length range [" + std::to_string(min_len_) + "," +
                        std::to_string(max_len_) + "]");
    }
    // The permutation is a function of the vocabulary only, never of the run
    // seed, so the task itself is identical across runs and seeds.
    perm_.resize(static_cast<std::size_t>(vocab_));
    for (std::int64_t v = 0; v < vocab_; ++v) perm_[static_cast<std::size_t>(v)] = v;
    Rng perm_rng(0xBADC0DEull + static_cast<std::uint64_t>(vocab_));
    for (std::int64_t v = vocab_ - 1; v > kFirstDataToken; --v) {
      const std::int64_t swap_with = perm_rng.uniform_int(kFirstDataToken, v + 1);
      std::swap(perm_[static_cast<std::size_t>(v)], perm_[static_cast<std::size_t>(swap_with)]);
    }
  }

  Task task() const { return task_; }

  std::pair<TokenSeq, TokenSeq> sample(Rng& rng) const {
    const std::int64_t len = rng.uniform_int(min_len_, max_len_ + 1);
    TokenSeq src(static_cast<std::size_t>(len));
    for (auto& t : src) t = rng.uniform_int(kFirstDataToken, vocab_);
    return {src, target_for(src)};
  }

  TokenSeq target_for(const TokenSeq& src) const {
    TokenSeq tgt = src;
    switch (task_) {
      case Task::kCopy:
        break;
      case Task::kReverse:
        std::reverse(tgt.begin(), tgt.end());
        break;
      case Task::kSwapTranslate:
        for (std::size_t i = 0; i + 1 < tgt.size(); i += 2) std::swap(tgt[i], tgt[i + 1]);
        for (auto& t : tgt) t = perm_[static_cast<std::size_t>(t)];
        break;
    }
    return tgt;
  }

 private:
  Task task_;
  std::int64_t vocab_;
  std::int64_t min_len_;
  std::int64_t max_len_;
  std::vector<std::int64_t> perm_;
};

// Pads sources, appends EOS to targets and applies the BOS shift.
inline Batch make_batch(const std::vector<std::pair<TokenSeq, TokenSeq>>& pairs) {
  if (pairs.empty()) throw ContractError("make_batch: empty batch");
  const std::int64_t B = static_cast<std::int64_t>(pairs.size());
  std::int64_t j_src = 1, j_tgt = 1;
  for (const auto& [src, tgt] : pairs) {
    j_src = std::max<std::int64_t>(j_src, static_cast<std::int64_t>(src.size()));
    j_tgt = std::max<std::int64_t>(j_tgt, static_cast<std::int64_t>(tgt.size()) + 1);  // +EOS
  }
  Batch batch;
  batch.src = IntMatrix(B, j_src, kPadToken);
  batch.src_mask = IntMatrix(B, j_src, 0);
  batch.tgt_in = IntMatrix(B, j_tgt, kPadToken);
  batch.tgt_out = IntMatrix(B, j_tgt, kPadToken);
  batch.tgt_mask = IntMatrix(B, j_tgt, 0);
  for (std::int64_t b = 0; b < B; ++b) {
    const auto& [src, tgt] = pairs[static_cast<std::size_t>(b)];
    for (std::size_t i = 0; i < src.size(); ++i) {
      batch.src.at(b, static_cast<std::int64_t>(i)) = src[i];
      batch.src_mask.at(b, static_cast<std::int64_t>(i)) = 1;
    }
    batch.tgt_in.at(b, 0) = kBosToken;
    for (std::size_t i = 0; i < tgt.size(); ++i) {
      batch.tgt_in.at(b, static_cast<std::int64_t>(i) + 1) = tgt[i];
      batch.tgt_out.at(b, static_cast<std::int64_t>(i)) = tgt[i];
      batch.tgt_mask.at(b, static_cast<std::int64_t>(i)) = 1;
    }
    batch.tgt_out.at(b, static_cast<std::int64_t>(tgt.size())) = kEosToken;
    batch.tgt_mask.at(b, static_cast<std::int64_t>(tgt.size())) = 1;
  }
  return batch;
}

inline Batch sample_batch(const TaskSampler& sampler, std::int64_t batch_size, Rng& rng) {
  std::vector<std::pair<TokenSeq, TokenSeq>> pairs;
  pairs.reserve(static_cast<std::size_t>(batch_size));
  for (std::int64_t b = 0; b < batch_size; ++b) pairs.push_back(sampler.sample(rng));
  return make_batch(pairs);
}

}  // namespace lcap
