#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mdml/rng.hpp"

namespace mdml {

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Placement of the target-language tag and the domain tag.
struct TagScheme {
  enum class Side { Enc, Dec, None };
  Side language = Side::Enc;  // Enc or Dec
  Side domain = Side::None;

  std::string str() const;
  static TagScheme parse(const std::string& text);
  bool operator==(const TagScheme&) const = default;
};

/// Token id layout: 0 = pad, 1 = eos (also the decoder start symbol),
/// then language tags, domain tags, the OOD tag, then one contiguous
/// content block per language. Content inventories are disjoint across
/// languages by construction.
struct Vocabulary {
  std::vector<std::string> language_names;
  std::vector<std::string> domain_names;
  int tokens_per_language = 0;

  static constexpr int kPad = 0;
  static constexpr int kEos = 1;

  int n_languages() const { return static_cast<int>(language_names.size()); }
  int n_domains() const { return static_cast<int>(domain_names.size()); }
  int lang_tag(int language) const;
  int domain_tag(int domain) const;
  int ood_tag() const { return 2 + n_languages() + n_domains(); }
  int first_content() const { return ood_tag() + 1; }
  int content_id(int language, int slot) const;
  int content_language(int id) const;  // -1 when id is not a content token
  int content_slot(int id) const;
  bool is_tag(int id) const;  // language/domain/ood tags
  int size() const { return first_content() + n_languages() * tokens_per_language; }

  std::string token_text(int id) const;
  int parse_token(const std::string& text) const;
  std::string render_tokens(std::span<const int> ids) const;
  std::vector<int> parse_tokens(const std::string& text) const;

  int language_id(const std::string& name) const;  // -1 when unknown
  int domain_id(const std::string& name) const;
};

/// Recipe for the synthetic multilingual multi-domain corpus. Languages are
/// token ciphers over a common concept vocabulary plus a per-language word
/// order, so references are exact and language identity is decidable from
/// token inventory.
struct SyntheticSpec {
  int n_languages = 3;
  int n_domains = 3;
  int shared_concepts = 48;      // content concept vocabulary (exclusive subsets carved from it)
  int exclusive_concepts = 8;    // per-domain exclusive subset size
  int function_tokens = 10;      // stopword-like tokens, shared by all domains
  int len_min = 4;
  int len_max = 9;
  std::uint64_t cipher_seed = 17;
  std::vector<std::string> language_names;  // optional; l0, l1, ... when empty
  std::vector<std::string> domain_names;    // optional; d0, d1, ... when empty

  void validate() const;
  std::vector<std::string> resolved_language_names() const;
  std::vector<std::string> resolved_domain_names() const;
  int concept_count() const { return function_tokens + shared_concepts; }
  Vocabulary vocabulary() const;
};

/// One sentence pair with language and domain annotations. Tokens are
/// vocabulary ids.
struct ParallelExample {
  std::vector<int> source_tokens;
  std::vector<int> target_tokens;
  int source_lang = -1;
  int target_lang = -1;
  int domain = -1;
};

/// Availability matrix over (language pair, domain) plus the resource split
/// that decides which pairs a leave-one-domain-out condition strips.
struct DataCondition {
  struct Pair {
    int a = -1, b = -1;  // a < b
    bool operator==(const Pair&) const = default;
  };

  std::vector<std::string> languages;
  std::vector<std::string> domains;
  std::vector<bool> high_resource;           // per language
  std::vector<Pair> pairs;                   // pairs with potential bitext
  std::vector<std::vector<bool>> available;  // [pair][domain]

  /// All high-resource pairs plus hub-centric low-resource pairs
  /// (hub = first high-resource language), every domain available.
  static DataCondition full_table(std::vector<std::string> languages, std::vector<bool> high_resource, std::vector<std::string> domains);

  void validate() const;
  int language_id(const std::string& name) const;
  int domain_id(const std::string& name) const;
  int pair_index(int la, int lb) const;  // -1 when the pair carries no bitext
  bool cell_available(int la, int lb, int domain) const;
  bool pair_seen(int la, int lb) const;  // any-domain bitext
  bool pair_low_resource(const Pair& p) const;
  bool language_in_domain(int language, int domain) const;
  int n_directions() const;  // ordered language pairs
};

DataCondition build_lodo(const DataCondition& full, int leave_out_domain);

void write_condition(const std::filesystem::path& path, const DataCondition& c);
DataCondition read_condition(const std::filesystem::path& path);

/// Translation task category under a data condition (Table-style grouping).
struct TaskCategory {
  bool seen = false;
  bool source_in = false;
  bool target_in = false;

  std::string group_name() const;  // e.g. "seen:in-in", "unseen:out-out"
  bool operator==(const TaskCategory&) const = default;
};

TaskCategory categorize_task(int src_lang, int tgt_lang, int eval_domain, const DataCondition& condition);

/// All six category names in report order.
std::vector<std::string> category_group_names();

struct DirectionKey {
  int src = -1, tgt = -1, domain = -1;
  auto operator<=>(const DirectionKey&) const = default;
};

using Corpus = std::map<DirectionKey, std::vector<ParallelExample>>;

/// Deterministic corpus builder. Each available (pair, domain) cell yields
/// `pairs_per_cell` concept sentences rendered in both directions.
class CorpusGenerator {
 public:
  explicit CorpusGenerator(SyntheticSpec spec);

  const SyntheticSpec& spec() const { return spec_; }
  const Vocabulary& vocab() const { return vocab_; }

  std::vector<int> sample_concepts(int domain, Rng& rng) const;
  std::vector<int> render(int language, std::span<const int> concepts) const;

  Corpus generate(const DataCondition& condition, int pairs_per_cell, std::uint64_t seed, std::string_view split) const;

  /// Test hook: overrides the derived cipher for one language.
  void set_cipher(int language, std::vector<int> cipher);
  const std::vector<int>& cipher(int language) const;

 private:
  SyntheticSpec spec_;
  Vocabulary vocab_;
  std::vector<std::vector<int>> ciphers_;  // concept -> slot, per language
};

void write_corpus(const std::filesystem::path& path, const Corpus& corpus, const Vocabulary& vocab);
Corpus read_corpus(const std::filesystem::path& path, const Vocabulary& vocab);

/// Tag-composed training views of one example.
struct TaggedExample {
  std::vector<int> encoder_input;
  std::vector<int> decoder_input;   // [eos, forced tags..., target...]
  std::vector<int> decoder_target;  // pad over forced-tag predictions, then target and eos
  int source_lang = -1;
  int target_lang = -1;
  int domain = -1;  // true label, unaffected by OOD tag replacement
  int enc_domain_pos = -1;
  int dec_domain_pos = -1;
  int forced_prefix_len = 0;
};

TaggedExample compose_tags(const ParallelExample& example, const TagScheme& scheme, const Vocabulary& vocab);

/// Forced decoder prefix (after the start symbol) for decoding under a scheme.
std::vector<int> forced_decoder_prefix(const TagScheme& scheme, int target_lang, int domain_tag_id, const Vocabulary& vocab);
/// Encoder-side tags for decoding under a scheme.
std::vector<int> encoder_tag_prefix(const TagScheme& scheme, int target_lang, int domain_tag_id, const Vocabulary& vocab);

struct TaggedBucket {
  DirectionKey key;
  std::vector<TaggedExample> examples;
};
using TaggedCorpus = std::vector<TaggedBucket>;

TaggedCorpus tag_corpus(const Corpus& corpus, const TagScheme& scheme, const Vocabulary& vocab);

/// Independently replaces each example's domain tag with the OOD tag with
/// probability p_ood; no-op on examples whose scheme carries no domain tag.
void replace_domain_tag_ood(TaggedCorpus& corpus, double p_ood, std::uint64_t seed);
void replace_domain_tag_ood(std::vector<TaggedExample>& stream, double p_ood, const Vocabulary& vocab, std::uint64_t seed);

/// Temperature-based bucket sampler: bucket probability is proportional to
/// size^(1/T); within a bucket draws are uniform without replacement per
/// epoch. Resumable: per-bucket permutations derive from (seed, bucket,
/// epoch) and batch draws derive from (seed, step).
class BatchSampler {
 public:
  struct State {
    std::vector<std::uint64_t> epoch;
    std::vector<std::size_t> cursor;
  };

  BatchSampler(const TaggedCorpus& corpus, double temperature, int batch_size, std::uint64_t seed, bool homogeneous = false);

  std::vector<const TaggedExample*> next(std::uint64_t step);
  std::span<const double> bucket_probabilities() const { return probs_; }
  const TaggedCorpus& corpus() const { return *corpus_; }

  State state() const { return state_; }
  void restore(const State& s);

 private:
  const TaggedExample* draw_from_bucket(std::size_t b);

  const TaggedCorpus* corpus_;
  double temperature_;
  int batch_size_;
  std::uint64_t seed_;
  bool homogeneous_;
  std::vector<double> probs_;
  std::vector<std::vector<std::size_t>> order_;  // current epoch permutation per bucket
  State state_;
};

}  // namespace mdml
