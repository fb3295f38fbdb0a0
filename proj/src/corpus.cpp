#include "dsdm/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <numeric>

#include "dsdm/io.hpp"

namespace dsdm {

using nlohmann::json;

void CandidatePool::validate() const {
  if (examples.empty()) throw Error("candidate pool is empty");
  if (chunk_len == 0) throw Error("pool chunk_len must be positive");
  if (vocab_size == 0) throw Error("pool vocab_size must be positive");
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    if (ex.id != i) {
      throw Error("pool ids must be dense and ordered; found id " + std::to_string(ex.id) +
                  " at position " + std::to_string(i));
    }
    if (ex.tokens.size() != chunk_len) {
      throw Error("example " + std::to_string(i) + " has length " +
                  std::to_string(ex.tokens.size()) + ", expected " + std::to_string(chunk_len));
    }
    for (Token t : ex.tokens) {
      if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) {
        throw Error("example " + std::to_string(i) + " has token " + std::to_string(t) +
                    " outside vocabulary of size " + std::to_string(vocab_size));
      }
    }
  }
}

void TargetTask::validate() const {
  if (!(weight > 0.0)) throw Error("task '" + name + "' must have positive weight");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].continuation.empty()) {
      throw Error("task '" + name + "' sample " + std::to_string(i) + " has empty continuation");
    }
  }
}

void normalize_task_weights(std::vector<TargetTask>& tasks) {
  double total = 0.0;
  for (const auto& t : tasks) {
    if (!(t.weight > 0.0)) throw Error("task '" + t.name + "' must have positive weight");
    total += t.weight;
  }
  for (auto& t : tasks) t.weight /= total;
}

ChunkedCorpus tokenize_and_chunk(const std::vector<std::vector<Token>>& documents,
                                 std::size_t chunk_len, Token eot_token,
                                 std::size_t vocab_size) {
  if (documents.empty()) throw Error("empty corpus");
  if (chunk_len < 2) throw Error("degenerate chunk length");

  std::vector<Token> stream;
  Token max_token = eot_token;
  for (const auto& doc : documents) {
    if (doc.empty()) throw Error("empty document in corpus");
    for (Token t : doc) {
      if (t < 0) throw Error("negative token id " + std::to_string(t));
      max_token = std::max(max_token, t);
    }
    stream.insert(stream.end(), doc.begin(), doc.end());
    stream.push_back(eot_token);
  }

  ChunkedCorpus out;
  out.pool.chunk_len = chunk_len;
  out.pool.vocab_size = vocab_size > 0 ? vocab_size : static_cast<std::size_t>(max_token) + 1;
  if (static_cast<std::size_t>(max_token) >= out.pool.vocab_size) {
    throw Error("token id " + std::to_string(max_token) + " exceeds vocab_size");
  }
  const std::size_t n_chunks = stream.size() / chunk_len;
  out.pool.examples.reserve(n_chunks);
  for (std::size_t c = 0; c < n_chunks; ++c) {
    const auto begin = stream.begin() + static_cast<std::ptrdiff_t>(c * chunk_len);
    out.pool.examples.push_back(
        Example{c, std::vector<Token>(begin, begin + static_cast<std::ptrdiff_t>(chunk_len)), {}});
  }
  out.dropped_tokens = stream.size() - n_chunks * chunk_len;
  if (n_chunks == 0) {
    out.warnings.push_back("corpus of " + std::to_string(stream.size()) +
                           " tokens is shorter than one chunk; no examples produced");
  }
  return out;
}

std::string normalize_for_leakage(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  for (unsigned char c : text) {
    if (std::isspace(c)) continue;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

namespace {

bool contains_tokens(const std::vector<Token>& haystack, const std::vector<Token>& needle) {
  if (needle.empty()) return true;
  return std::search(haystack.begin(), haystack.end(), needle.begin(), needle.end()) !=
         haystack.end();
}

}  // namespace

std::vector<Leak> leakage_check(const TargetTask& task, const CandidatePool& pool,
                                LeakageMode mode) {
  std::vector<Leak> leaks;
  if (mode == LeakageMode::Tokens) {
    for (std::size_t s = 0; s < task.samples.size(); ++s) {
      const auto& sample = task.samples[s];
      for (const auto& ex : pool.examples) {
        if (contains_tokens(ex.tokens, sample.context) &&
            contains_tokens(ex.tokens, sample.continuation)) {
          leaks.push_back({s, ex.id});
        }
      }
    }
    return leaks;
  }

  std::vector<std::optional<std::string>> pool_text(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (pool.examples[i].raw_text) pool_text[i] = normalize_for_leakage(*pool.examples[i].raw_text);
  }
  for (std::size_t s = 0; s < task.samples.size(); ++s) {
    const auto& sample = task.samples[s];
    if (!sample.context_text || !sample.continuation_text) continue;
    const std::string ctx = normalize_for_leakage(*sample.context_text);
    const std::string cont = normalize_for_leakage(*sample.continuation_text);
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (!pool_text[i]) continue;
      if (pool_text[i]->find(ctx) != std::string::npos &&
          pool_text[i]->find(cont) != std::string::npos) {
        leaks.push_back({s, pool.examples[i].id});
      }
    }
  }
  return leaks;
}

void save_pool(const CandidatePool& pool, const std::filesystem::path& path) {
  pool.validate();
  std::vector<json> records;
  records.reserve(pool.size() + 1);
  records.push_back({{"chunk_len", pool.chunk_len}, {"vocab_size", pool.vocab_size}});
  for (const auto& ex : pool.examples) {
    json r = {{"id", ex.id}, {"tokens", ex.tokens}};
    if (ex.raw_text) r["text"] = *ex.raw_text;
    records.push_back(std::move(r));
  }
  io::write_jsonl(path, records);
}

CandidatePool load_pool(const std::filesystem::path& path) {
  const auto records = io::read_jsonl(path);
  if (records.empty()) throw Error(path.string() + ": missing pool header");
  CandidatePool pool;
  try {
    pool.chunk_len = records[0].at("chunk_len").get<std::size_t>();
    pool.vocab_size = records[0].at("vocab_size").get<std::size_t>();
    pool.examples.reserve(records.size() - 1);
    for (std::size_t i = 1; i < records.size(); ++i) {
      const auto& r = records[i];
      Example ex;
      ex.id = r.at("id").get<std::size_t>();
      ex.tokens = r.at("tokens").get<std::vector<Token>>();
      if (r.contains("text") && !r["text"].is_null()) ex.raw_text = r["text"].get<std::string>();
      pool.examples.push_back(std::move(ex));
    }
  } catch (const json::exception& e) {
    throw Error(path.string() + ": malformed pool record: " + e.what());
  }
  pool.validate();
  return pool;
}

void save_task(const TargetTask& task, const std::filesystem::path& path) {
  std::vector<json> records;
  records.reserve(task.samples.size());
  for (const auto& s : task.samples) {
    json r = {{"context", s.context}, {"continuation", s.continuation}};
    if (s.context_text) r["context_text"] = *s.context_text;
    if (s.continuation_text) r["continuation_text"] = *s.continuation_text;
    records.push_back(std::move(r));
  }
  io::write_jsonl(path, records);
}

TargetTask load_task(const std::filesystem::path& path, std::string name) {
  TargetTask task;
  task.name = name.empty() ? path.stem().string() : std::move(name);
  try {
    for (const auto& r : io::read_jsonl(path)) {
      TargetSample s;
      s.context = r.at("context").get<std::vector<Token>>();
      s.continuation = r.at("continuation").get<std::vector<Token>>();
      if (r.contains("context_text")) s.context_text = r["context_text"].get<std::string>();
      if (r.contains("continuation_text")) {
        s.continuation_text = r["continuation_text"].get<std::string>();
      }
      task.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": malformed task record: " + e.what());
  }
  task.validate();
  return task;
}

}  // namespace dsdm
