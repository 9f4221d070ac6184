#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "diin/errors.hpp"

namespace diin {

// Fixed width of the per-token character-id row; longer words are truncated,
// shorter ones padded with the reserved pad id.
inline constexpr int kCharLimit = 16;
inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kNumClasses = 3;

// Class ids, in the order the CLI prints them.
inline constexpr int kEntailment = 0;
inline constexpr int kContradiction = 1;
inline constexpr int kNeutral = 2;

const char* label_name(int id);
// Returns -1 for anything that is not one of the three class names.
int label_id(const std::string& name);

struct RawExample {
  int label = -1;
  std::vector<std::string> premise_tokens, hypothesis_tokens;
  std::vector<std::string> premise_pos, hypothesis_pos;
};

struct SnliData {
  std::vector<RawExample> examples;
  std::size_t kept = 0;
  std::size_t skipped = 0;  // records with gold_label "-"
};

// Left-to-right (tag, token) leaves of a constituency parse string. Inner
// labels are ignored. Throws DataError with a character offset on malformed
// input.
std::vector<std::pair<std::string, std::string>> extract_pos(const std::string& parse);

// Line-delimited records with gold_label / sentence1_parse / sentence2_parse.
// max_examples == 0 keeps everything.
SnliData read_snli_jsonl(const std::string& path, std::int64_t max_examples = 0);

// Word, character (byte) and POS-tag id maps. Id 0 is padding, id 1 is
// unknown. Growable until frozen; afterwards lookups of unseen items return
// the unknown id and never grow the map.
class Vocab {
 public:
  int word_id(const std::string& w) { return intern(words_, word_list_, w); }
  int pos_id(const std::string& p) { return intern(pos_, pos_list_, p); }
  int char_id(unsigned char c) {
    auto it = chars_.find(c);
    if (it != chars_.end()) return it->second;
    if (frozen_) return kUnkId;
    const int id = 2 + static_cast<int>(char_list_.size());
    chars_.emplace(c, id);
    char_list_.push_back(c);
    return id;
  }

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  // Sizes include the two reserved ids.
  int word_size() const { return 2 + static_cast<int>(word_list_.size()); }
  int char_size() const { return 2 + static_cast<int>(char_list_.size()); }
  int pos_size() const { return 2 + static_cast<int>(pos_list_.size()); }

  // Entries in id order starting at id 2; used for persistence.
  const std::vector<std::string>& words() const { return word_list_; }
  const std::vector<unsigned char>& chars() const { return char_list_; }
  const std::vector<std::string>& pos_tags() const { return pos_list_; }

  static Vocab restore(std::vector<std::string> words, std::vector<unsigned char> chars,
                       std::vector<std::string> pos_tags);

 private:
  int intern(std::unordered_map<std::string, int>& map, std::vector<std::string>& list,
             const std::string& key) {
    auto it = map.find(key);
    if (it != map.end()) return it->second;
    if (frozen_) return kUnkId;
    const int id = 2 + static_cast<int>(list.size());
    map.emplace(key, id);
    list.push_back(key);
    return id;
  }

  std::unordered_map<std::string, int> words_, pos_;
  std::unordered_map<unsigned char, int> chars_;
  std::vector<std::string> word_list_, pos_list_;
  std::vector<unsigned char> char_list_;
  bool frozen_ = false;
};

struct ProcessedExample {
  std::vector<int> premise_ids, hypothesis_ids;
  std::vector<int> premise_chars, hypothesis_chars;  // len * kCharLimit
  std::vector<int> premise_pos_ids, hypothesis_pos_ids;
  std::vector<std::uint8_t> premise_match, hypothesis_match;
  int label = -1;
};

// A token's match flag is true iff its lowercased form occurs (lowercased)
// among the other sentence's tokens.
ProcessedExample featurize(const RawExample& raw, Vocab& vocab);

struct Batch {
  int size = 0;
  int premise_len = 0, hypothesis_len = 0;  // padded widths
  std::vector<int> premise_ids, hypothesis_ids;      // size * len
  std::vector<int> premise_chars, hypothesis_chars;  // size * len * kCharLimit
  std::vector<int> premise_pos, hypothesis_pos;
  std::vector<std::uint8_t> premise_match, hypothesis_match;
  std::vector<std::uint8_t> premise_mask, hypothesis_mask;  // true at real tokens
  std::vector<int> labels;
};

// Pads with id 0 up to the longest (truncated) sentence in the batch.
// Sentences longer than the caps are truncated.
Batch build_batch(const std::vector<const ProcessedExample*>& examples, int max_premise_len,
                  int max_hypothesis_len);

struct EmbeddingTable {
  int dim = 0;
  std::unordered_map<std::string, std::vector<float>> vectors;
};

// GloVe-style text: token followed by `dim` decimal floats per line.
EmbeddingTable load_embeddings(const std::string& path, int dim);

// Fraction of the vocab's words (reserved ids excluded) present in the table.
double embedding_coverage(const EmbeddingTable& table, const Vocab& vocab);

std::string lowercased(const std::string& s);

}  // namespace diin
