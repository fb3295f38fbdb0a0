#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dsdm/common.hpp"

namespace dsdm {

/// One pooled training example. `id` is its dense index in the pool.
struct Example {
  std::size_t id = 0;
  std::vector<Token> tokens;
  std::optional<std::string> raw_text;
};

/// The ordered candidate set that selections are drawn from.
struct CandidatePool {
  std::vector<Example> examples;
  std::size_t chunk_len = 0;
  std::size_t vocab_size = 0;

  std::size_t size() const { return examples.size(); }
  /// Throws if any pool invariant is violated (non-empty, dense ids, fixed
  /// length, tokens inside the vocabulary).
  void validate() const;
};

struct TargetSample {
  std::vector<Token> context;
  std::vector<Token> continuation;
  std::optional<std::string> context_text;
  std::optional<std::string> continuation_text;
};

struct TargetTask {
  std::string name;
  double weight = 1.0;
  std::vector<TargetSample> samples;

  void validate() const;
};

/// Rescales task weights in place so they sum to one.
void normalize_task_weights(std::vector<TargetTask>& tasks);

struct ChunkedCorpus {
  CandidatePool pool;
  std::size_t dropped_tokens = 0;
  std::vector<std::string> warnings;
};

/// Concatenates documents with `eot_token` after each one and slices the
/// stream into consecutive chunks of exactly `chunk_len` tokens. The trailing
/// remainder is dropped. When `vocab_size` is 0 it is inferred as the largest
/// token id seen plus one.
ChunkedCorpus tokenize_and_chunk(const std::vector<std::vector<Token>>& documents,
                                 std::size_t chunk_len, Token eot_token,
                                 std::size_t vocab_size = 0);

enum class LeakageMode { Text, Tokens };

struct Leak {
  std::size_t sample_index = 0;
  std::size_t example_id = 0;
  bool operator==(const Leak&) const = default;
};

/// Lowercases ASCII letters and removes every whitespace character.
std::string normalize_for_leakage(const std::string& text);

/// Reports every (target sample, pool example) pair where both the context
/// and the continuation occur inside the same pool example. The two matches
/// are tested independently, so they need not be contiguous or disjoint.
/// Text mode compares normalized strings and skips samples or examples that
/// carry no text; token mode searches for contiguous token subsequences.
std::vector<Leak> leakage_check(const TargetTask& task, const CandidatePool& pool,
                                LeakageMode mode);

// File formats: line-delimited JSON. The pool file starts with a header
// record {"chunk_len", "vocab_size"} followed by {"id", "tokens", "text"?}.
void save_pool(const CandidatePool& pool, const std::filesystem::path& path);
CandidatePool load_pool(const std::filesystem::path& path);

void save_task(const TargetTask& task, const std::filesystem::path& path);
/// Task name defaults to the file stem.
TargetTask load_task(const std::filesystem::path& path, std::string name = {});

}  // namespace dsdm
