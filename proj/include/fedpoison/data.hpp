#pragma once

// Corpus ingestion, synthetic corpus generation, hashed bag-of-words
// features, non-IID partitioning and trigger-keyword label flipping.

#include "fedpoison/common.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace fedpoison {

enum NewsClass : int { kWorld = 0, kSports = 1, kBusiness = 2, kScience = 3 };
inline constexpr int kNewsClassCount = 4;

inline const std::vector<std::string>& default_triggers() {
  static const std::vector<std::string> triggers{"stock", "market", "earnings", "profit"};
  return triggers;
}

struct Example {
  std::vector<std::string> tokens;
  int label = 0;

  friend bool operator==(const Example&, const Example&) = default;
};

struct Corpus {
  std::vector<Example> train;
  std::vector<Example> test;
  int class_count = kNewsClassCount;
};

// A featurized example, ready for the classifier.
struct LabeledFeature {
  VectorXd x;
  int label = 0;
};

// Lowercase; split on anything that is not an ASCII letter or digit.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto uc = static_cast<unsigned char>(ch);
    if (uc < 128 && std::isalnum(uc)) {
      cur.push_back(static_cast<char>(std::tolower(uc)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// ---------------------------------------------------------------------------
// AG News CSV

namespace detail {

// RFC 4180 style reader: quoted fields, doubled quotes, embedded newlines.
class CsvReader {
 public:
  explicit CsvReader(std::string text) : text_(std::move(text)) {}

  // Reads the next record; returns false at end of input.
  bool next(std::vector<std::string>& fields) {
    fields.clear();
    if (pos_ >= text_.size()) return false;
    std::string field;
    bool quoted = false;
    bool field_started = false;
    while (pos_ < text_.size()) {
      char c = text_[pos_++];
      if (quoted) {
        if (c == '"') {
          if (pos_ < text_.size() && text_[pos_] == '"') {
            field.push_back('"');
            ++pos_;
          } else {
            quoted = false;
          }
        } else {
          field.push_back(c);
        }
        continue;
      }
      if (c == '"' && !field_started) {
        quoted = true;
        field_started = true;
      } else if (c == ',') {
        fields.push_back(std::move(field));
        field.clear();
        field_started = false;
      } else if (c == '\n' || c == '\r') {
        if (c == '\r' && pos_ < text_.size() && text_[pos_] == '\n') ++pos_;
        fields.push_back(std::move(field));
        return true;
      } else {
        field.push_back(c);
        field_started = true;
      }
    }
    if (quoted) throw DataError("unterminated quoted field at end of input");
    fields.push_back(std::move(field));
    return true;
  }

 private:
  std::string text_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(concat("cannot open file: ", path.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline bool parse_int(const std::string& s, long& out) {
  if (s.empty()) return false;
  std::size_t i = 0;
  if (s[0] == '-' || s[0] == '+') i = 1;
  if (i == s.size()) return false;
  for (std::size_t j = i; j < s.size(); ++j)
    if (!std::isdigit(static_cast<unsigned char>(s[j]))) return false;
  try {
    out = std::stol(s);
  } catch (const std::out_of_range&) {
    return false;
  }
  return true;
}

}  // namespace detail

// Rows are (class 1..4, title, description). A leading non-numeric header row
// is skipped. Rows whose text yields no tokens are dropped.
inline std::vector<Example> read_agnews_rows(const std::filesystem::path& path) {
  detail::CsvReader reader(detail::read_file(path));
  std::vector<Example> rows;
  std::vector<std::string> fields;
  std::size_t row = 0;
  while (reader.next(fields)) {
    ++row;
    if (fields.size() == 1 && fields[0].empty()) continue;  // blank line
    if (fields.size() != 3)
      throw DataError(detail::concat("malformed AG News row ", row, ": expected 3 fields, got ",
                                     fields.size()));
    long cls = 0;
    if (!detail::parse_int(fields[0], cls)) {
      if (row == 1) continue;
      throw DataError(detail::concat("malformed AG News row ", row, ": class '", fields[0],
                                     "' is not an integer"));
    }
    if (cls < 1 || cls > kNewsClassCount)
      throw DataError(detail::concat("malformed AG News row ", row, ": class ", cls,
                                     " outside 1..", kNewsClassCount));
    Example ex{tokenize(fields[1] + " " + fields[2]), static_cast<int>(cls - 1)};
    if (!ex.tokens.empty()) rows.push_back(std::move(ex));
  }
  return rows;
}

// Single file: everything lands in the train split.
inline Corpus load_agnews_csv(const std::filesystem::path& path) {
  Corpus c;
  c.train = read_agnews_rows(path);
  return c;
}

inline Corpus load_agnews_corpus(const std::filesystem::path& train_path,
                                 const std::filesystem::path& test_path) {
  Corpus c;
  c.train = read_agnews_rows(train_path);
  c.test = read_agnews_rows(test_path);
  if (c.train.empty() || c.test.empty()) throw DataError("AG News corpus has an empty split");
  return c;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SynthConfig {
  int train_per_class = 400;
  int test_per_class = 100;
  int vocab_per_class = 60;
  int noise_vocab = 300;
  int tokens_per_example = 16;
  double trigger_rate = 0.3;
  // A triggered example gets a uniform count in [min, max] of trigger tokens.
  int trigger_tokens_min = 1;
  int trigger_tokens_max = 2;
  // Probability a token comes from the example's own class pool, and from a
  // random other class pool; the remainder is shared noise.
  double own_class_prob = 0.25;
  double cross_class_prob = 0.08;
  std::vector<std::string> triggers = default_triggers();
};

inline std::string class_token_prefix(int cls) {
  static const char* names[] = {"world", "sports", "business", "science"};
  return (cls >= 0 && cls < kNewsClassCount) ? names[cls] : detail::concat("class", cls, "w");
}

inline Corpus synth_corpus(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.train_per_class < 1 || cfg.test_per_class < 1 || cfg.vocab_per_class < 1 ||
      cfg.noise_vocab < 1 || cfg.tokens_per_example < 1)
    throw DataError("synth_corpus: all sizes must be >= 1");
  if (!(cfg.trigger_rate >= 0.0 && cfg.trigger_rate <= 1.0))
    throw DataError("synth_corpus: trigger_rate must lie in [0,1]");
  if (cfg.triggers.empty()) throw DataError("synth_corpus: trigger list is empty");
  if (cfg.trigger_tokens_min < 1 || cfg.trigger_tokens_max < cfg.trigger_tokens_min ||
      cfg.trigger_tokens_max > cfg.tokens_per_example)
    throw DataError("synth_corpus: trigger token counts must satisfy 1 <= min <= max <= tokens_per_example");

  Rng rng(derive_seed(seed, 0x5E7C));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> vocab_pick(0, cfg.vocab_per_class - 1);
  std::uniform_int_distribution<int> noise_pick(0, cfg.noise_vocab - 1);
  std::uniform_int_distribution<int> other_pick(0, kNewsClassCount - 2);
  std::uniform_int_distribution<std::size_t> trig_pick(0, cfg.triggers.size() - 1);
  std::uniform_int_distribution<int> pos_pick(0, cfg.tokens_per_example - 1);
  std::uniform_int_distribution<int> count_pick(cfg.trigger_tokens_min, cfg.trigger_tokens_max);

  auto make = [&](int cls) {
    Example ex;
    ex.label = cls;
    ex.tokens.reserve(cfg.tokens_per_example + 2);
    for (int t = 0; t < cfg.tokens_per_example; ++t) {
      const double u = unit(rng);
      if (u < cfg.own_class_prob) {
        ex.tokens.push_back(class_token_prefix(cls) + std::to_string(vocab_pick(rng)));
      } else if (u < cfg.own_class_prob + cfg.cross_class_prob) {
        int other = other_pick(rng);
        if (other >= cls) ++other;
        ex.tokens.push_back(class_token_prefix(other) + std::to_string(vocab_pick(rng)));
      } else {
        ex.tokens.push_back("common" + std::to_string(noise_pick(rng)));
      }
    }
    if (cls == kBusiness && unit(rng) < cfg.trigger_rate) {
      const int n_trig = count_pick(rng);
      for (int k = 0; k < n_trig; ++k)
        ex.tokens[static_cast<std::size_t>(pos_pick(rng))] = cfg.triggers[trig_pick(rng)];
    }
    return ex;
  };

  Corpus c;
  c.train.reserve(static_cast<std::size_t>(cfg.train_per_class) * kNewsClassCount);
  c.test.reserve(static_cast<std::size_t>(cfg.test_per_class) * kNewsClassCount);
  for (int i = 0; i < cfg.train_per_class; ++i)
    for (int cls = 0; cls < kNewsClassCount; ++cls) c.train.push_back(make(cls));
  for (int i = 0; i < cfg.test_per_class; ++i)
    for (int cls = 0; cls < kNewsClassCount; ++cls) c.test.push_back(make(cls));
  return c;
}

// ---------------------------------------------------------------------------
// JSON lines {"tokens": [...], "label": int}

inline void write_jsonl(std::ostream& out, const std::vector<Example>& examples) {
  for (const auto& ex : examples) {
    nlohmann::json j{{"tokens", ex.tokens}, {"label", ex.label}};
    out << j.dump() << '\n';
  }
}

inline std::vector<Example> read_jsonl(std::istream& in) {
  std::vector<Example> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      Example ex{j.at("tokens").get<std::vector<std::string>>(), j.at("label").get<int>()};
      if (ex.label < 0 || ex.label >= kNewsClassCount)
        throw DataError(detail::concat("label ", ex.label, " out of range"));
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(detail::concat("malformed JSON line ", lineno, ": ", e.what()));
    } catch (const DataError& e) {
      throw DataError(detail::concat("malformed JSON line ", lineno, ": ", e.what()));
    }
  }
  return out;
}

inline void save_corpus_jsonl(const Corpus& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream train(dir / "train.jsonl");
  std::ofstream test(dir / "test.jsonl");
  if (!train || !test) throw DataError(detail::concat("cannot write corpus to ", dir.string()));
  write_jsonl(train, c.train);
  write_jsonl(test, c.test);
}

inline Corpus load_corpus_jsonl(const std::filesystem::path& train_path,
                                const std::filesystem::path& test_path) {
  std::ifstream train(train_path);
  std::ifstream test(test_path);
  if (!train) throw DataError(detail::concat("cannot open file: ", train_path.string()));
  if (!test) throw DataError(detail::concat("cannot open file: ", test_path.string()));
  Corpus c;
  c.train = read_jsonl(train);
  c.test = read_jsonl(test);
  if (c.train.empty() || c.test.empty()) throw DataError("JSONL corpus has an empty split");
  return c;
}

// ---------------------------------------------------------------------------
// Hashed bag-of-words

// 64-bit FNV-1a.
constexpr std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

constexpr bool is_power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

inline std::size_t hash_bucket(std::string_view token, std::size_t hash_dim, std::uint64_t seed) {
  return static_cast<std::size_t>((fnv1a64(token) ^ seed) & (hash_dim - 1));
}

inline VectorXd featurize(const std::vector<std::string>& tokens, std::size_t hash_dim,
                          std::uint64_t seed) {
  if (!is_power_of_two(hash_dim)) throw DataError("featurize: hash_dim must be a power of two");
  VectorXd v = VectorXd::Zero(static_cast<Index>(hash_dim));
  for (const auto& tok : tokens) v[static_cast<Index>(hash_bucket(tok, hash_dim, seed))] += 1.0;
  const double n = v.norm();
  if (n > 0.0) v /= n;
  return v;
}

inline VectorXd featurize(const Example& ex, std::size_t hash_dim, std::uint64_t seed) {
  return featurize(ex.tokens, hash_dim, seed);
}

inline std::vector<LabeledFeature> featurize_all(const std::vector<Example>& examples,
                                                 std::size_t hash_dim, std::uint64_t seed) {
  std::vector<LabeledFeature> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back({featurize(ex, hash_dim, seed), ex.label});
  return out;
}

// ---------------------------------------------------------------------------
// Non-IID partition

struct PartitionPlan {
  std::vector<std::vector<std::size_t>> client_indices;
  double alpha = 0.5;
  std::uint64_t seed = 0;
};

// Per-class Dirichlet(alpha) allocation across clients. An empty client
// receives one example taken from the currently largest client.
inline PartitionPlan partition_noniid(const Corpus& corpus, std::size_t n_clients, double alpha,
                                      std::uint64_t seed) {
  if (n_clients < 1) throw DataError("partition_noniid: n_clients must be >= 1");
  if (!(alpha > 0.0)) throw DataError("partition_noniid: alpha must be > 0");
  if (n_clients > corpus.train.size())
    throw DataError(detail::concat("partition_noniid: n_clients (", n_clients,
                                   ") exceeds train size (", corpus.train.size(), ")"));

  PartitionPlan plan;
  plan.alpha = alpha;
  plan.seed = seed;
  plan.client_indices.resize(n_clients);

  Rng rng(derive_seed(seed, 0xD1C7));
  std::gamma_distribution<double> gamma(alpha, 1.0);
  for (int cls = 0; cls < corpus.class_count; ++cls) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < corpus.train.size(); ++i)
      if (corpus.train[i].label == cls) idx.push_back(i);
    if (idx.empty()) continue;
    std::shuffle(idx.begin(), idx.end(), rng);

    std::vector<double> p(n_clients);
    for (auto& x : p) x = gamma(rng);
    double sum = std::accumulate(p.begin(), p.end(), 0.0);
    if (!(sum > 0.0)) {
      // Every draw underflowed (tiny alpha): hand the whole class to one client.
      std::fill(p.begin(), p.end(), 0.0);
      p[std::uniform_int_distribution<std::size_t>(0, n_clients - 1)(rng)] = 1.0;
      sum = 1.0;
    }
    double cum = 0.0;
    std::size_t start = 0;
    for (std::size_t j = 0; j < n_clients; ++j) {
      cum += p[j] / sum;
      std::size_t end = (j + 1 == n_clients)
                            ? idx.size()
                            : std::min(idx.size(), static_cast<std::size_t>(
                                                       std::llround(cum * static_cast<double>(idx.size()))));
      end = std::max(end, start);
      plan.client_indices[j].insert(plan.client_indices[j].end(), idx.begin() + static_cast<long>(start),
                                    idx.begin() + static_cast<long>(end));
      start = end;
    }
  }

  for (std::size_t j = 0; j < n_clients; ++j) {
    if (!plan.client_indices[j].empty()) continue;
    std::size_t largest = 0;
    for (std::size_t k = 1; k < n_clients; ++k)
      if (plan.client_indices[k].size() > plan.client_indices[largest].size()) largest = k;
    plan.client_indices[j].push_back(plan.client_indices[largest].back());
    plan.client_indices[largest].pop_back();
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Targeted label flipping

inline bool contains_trigger(const Example& ex, const std::vector<std::string>& triggers) {
  return std::any_of(ex.tokens.begin(), ex.tokens.end(), [&](const std::string& t) {
    return std::find(triggers.begin(), triggers.end(), t) != triggers.end();
  });
}

inline std::vector<Example> flip_labels(std::vector<Example> dataset,
                                        const std::vector<std::string>& triggers, int src_class,
                                        int dst_class) {
  if (src_class == dst_class) throw DataError("flip_labels: src_class must differ from dst_class");
  for (auto& ex : dataset)
    if (ex.label == src_class && contains_trigger(ex, triggers)) ex.label = dst_class;
  return dataset;
}

// Test examples of src_class carrying at least one trigger keyword.
inline std::vector<Example> asr_eval_subset(const Corpus& corpus,
                                            const std::vector<std::string>& triggers,
                                            int src_class) {
  std::vector<Example> out;
  std::copy_if(corpus.test.begin(), corpus.test.end(), std::back_inserter(out),
               [&](const Example& ex) { return ex.label == src_class && contains_trigger(ex, triggers); });
  if (out.empty()) throw DataError("ASR subset empty");
  return out;
}

}  // namespace fedpoison
