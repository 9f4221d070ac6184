#include "diin/textprep.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <unordered_set>

#include <json.hpp>

namespace diin {

using nlohmann::json;

const char* label_name(int id) {
  switch (id) {
    case kEntailment: return "entailment";
    case kContradiction: return "contradiction";
    case kNeutral: return "neutral";
  }
  return "?";
}

int label_id(const std::string& name) {
  if (name == "entailment") return kEntailment;
  if (name == "contradiction") return kContradiction;
  if (name == "neutral") return kNeutral;
  return -1;
}

std::string lowercased(const std::string& s) {
  std::string out = s;
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

Vocab Vocab::restore(std::vector<std::string> words, std::vector<unsigned char> chars,
                     std::vector<std::string> pos_tags) {
  Vocab v;
  for (const auto& w : words) v.word_id(w);
  for (unsigned char c : chars) v.char_id(c);
  for (const auto& p : pos_tags) v.pos_id(p);
  v.freeze();
  return v;
}

namespace {

[[noreturn]] void parse_fail(std::size_t offset, const std::string& what) {
  throw DataError("parse string error at offset " + std::to_string(offset) + ": " + what);
}

struct ParseScanner {
  const std::string& s;
  std::size_t i = 0;

  void skip_ws() {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
  }

  void node(std::vector<std::pair<std::string, std::string>>& leaves, int depth) {
    if (depth > 512) parse_fail(i, "nesting too deep");
    if (i >= s.size() || s[i] != '(') parse_fail(i, "expected '('");
    ++i;
    skip_ws();
    std::string label;
    while (i < s.size() && s[i] != '(' && s[i] != ')' &&
           !std::isspace(static_cast<unsigned char>(s[i]))) {
      label.push_back(s[i++]);
    }
    skip_ws();
    if (i >= s.size()) parse_fail(i, "unbalanced parentheses");
    if (s[i] == '(') {
      while (i < s.size() && s[i] == '(') {
        node(leaves, depth + 1);
        skip_ws();
      }
      if (i >= s.size() || s[i] != ')') parse_fail(i, "unbalanced parentheses");
      ++i;
    } else {
      // Leaf: "(TAG token)".
      std::string token;
      const std::size_t token_at = i;
      while (i < s.size() && s[i] != ')' && s[i] != '(') token.push_back(s[i++]);
      if (i >= s.size()) parse_fail(i, "unbalanced parentheses");
      if (s[i] == '(') parse_fail(i, "unexpected '(' inside leaf");
      while (!token.empty() && std::isspace(static_cast<unsigned char>(token.back()))) {
        token.pop_back();
      }
      if (token.empty()) parse_fail(token_at, "leaf with missing token");
      ++i;  // ')'
      leaves.emplace_back(std::move(label), std::move(token));
    }
  }
};

}  // namespace

std::vector<std::pair<std::string, std::string>> extract_pos(const std::string& parse) {
  std::vector<std::pair<std::string, std::string>> leaves;
  ParseScanner sc{parse};
  sc.skip_ws();
  if (sc.i >= parse.size()) parse_fail(0, "empty parse string");
  while (sc.i < parse.size() && parse[sc.i] == '(') {
    sc.node(leaves, 0);
    sc.skip_ws();
  }
  if (sc.i < parse.size()) parse_fail(sc.i, "trailing characters after parse");
  return leaves;
}

SnliData read_snli_jsonl(const std::string& path, std::int64_t max_examples) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open data file: " + path);
  SnliData out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
    }
    const auto need = [&](const char* field) -> std::string {
      auto it = rec.find(field);
      if (it == rec.end() || !it->is_string()) {
        throw DataError(path + ":" + std::to_string(lineno) + ": missing field " + field);
      }
      return it->get<std::string>();
    };
    const std::string gold = need("gold_label");
    if (gold == "-") {
      ++out.skipped;
      continue;
    }
    const int label = label_id(gold);
    if (label < 0) {
      throw DataError(path + ":" + std::to_string(lineno) + ": unknown gold_label '" + gold + "'");
    }
    RawExample ex;
    ex.label = label;
    try {
      for (auto& [tag, tok] : extract_pos(need("sentence1_parse"))) {
        ex.premise_pos.push_back(std::move(tag));
        ex.premise_tokens.push_back(std::move(tok));
      }
      for (auto& [tag, tok] : extract_pos(need("sentence2_parse"))) {
        ex.hypothesis_pos.push_back(std::move(tag));
        ex.hypothesis_tokens.push_back(std::move(tok));
      }
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (ex.premise_tokens.empty() || ex.hypothesis_tokens.empty()) {
      throw DataError(path + ":" + std::to_string(lineno) + ": sentence with no tokens");
    }
    out.examples.push_back(std::move(ex));
    ++out.kept;
    if (max_examples > 0 && static_cast<std::int64_t>(out.kept) >= max_examples) break;
  }
  return out;
}

namespace {

void featurize_side(const std::vector<std::string>& tokens, const std::vector<std::string>& pos,
                    const std::vector<std::string>& other_tokens, Vocab& vocab,
                    std::vector<int>& ids, std::vector<int>& chars, std::vector<int>& pos_ids,
                    std::vector<std::uint8_t>& match) {
  std::unordered_set<std::string> other_lc;
  other_lc.reserve(other_tokens.size());
  for (const auto& t : other_tokens) other_lc.insert(lowercased(t));

  ids.reserve(tokens.size());
  chars.reserve(tokens.size() * kCharLimit);
  pos_ids.reserve(tokens.size());
  match.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::string& tok = tokens[i];
    ids.push_back(vocab.word_id(tok));
    pos_ids.push_back(i < pos.size() ? vocab.pos_id(pos[i]) : kUnkId);
    for (int j = 0; j < kCharLimit; ++j) {
      chars.push_back(j < static_cast<int>(tok.size())
                          ? vocab.char_id(static_cast<unsigned char>(tok[j]))
                          : kPadId);
    }
    match.push_back(other_lc.count(lowercased(tok)) ? 1 : 0);
  }
}

}  // namespace

ProcessedExample featurize(const RawExample& raw, Vocab& vocab) {
  ProcessedExample ex;
  ex.label = raw.label;
  featurize_side(raw.premise_tokens, raw.premise_pos, raw.hypothesis_tokens, vocab, ex.premise_ids,
                 ex.premise_chars, ex.premise_pos_ids, ex.premise_match);
  featurize_side(raw.hypothesis_tokens, raw.hypothesis_pos, raw.premise_tokens, vocab,
                 ex.hypothesis_ids, ex.hypothesis_chars, ex.hypothesis_pos_ids,
                 ex.hypothesis_match);
  return ex;
}

namespace {

void pack_side(const std::vector<const ProcessedExample*>& examples, bool premise, int width,
               std::vector<int>& ids, std::vector<int>& chars, std::vector<int>& pos,
               std::vector<std::uint8_t>& match, std::vector<std::uint8_t>& mask) {
  const int bn = static_cast<int>(examples.size());
  ids.assign(static_cast<std::size_t>(bn) * width, kPadId);
  chars.assign(static_cast<std::size_t>(bn) * width * kCharLimit, kPadId);
  pos.assign(static_cast<std::size_t>(bn) * width, kPadId);
  match.assign(static_cast<std::size_t>(bn) * width, 0);
  mask.assign(static_cast<std::size_t>(bn) * width, 0);
  for (int b = 0; b < bn; ++b) {
    const ProcessedExample& ex = *examples[static_cast<std::size_t>(b)];
    const auto& src_ids = premise ? ex.premise_ids : ex.hypothesis_ids;
    const auto& src_chars = premise ? ex.premise_chars : ex.hypothesis_chars;
    const auto& src_pos = premise ? ex.premise_pos_ids : ex.hypothesis_pos_ids;
    const auto& src_match = premise ? ex.premise_match : ex.hypothesis_match;
    const int len = std::min<int>(static_cast<int>(src_ids.size()), width);
    for (int t = 0; t < len; ++t) {
      const std::size_t at = static_cast<std::size_t>(b) * width + t;
      ids[at] = src_ids[static_cast<std::size_t>(t)];
      pos[at] = src_pos[static_cast<std::size_t>(t)];
      match[at] = src_match[static_cast<std::size_t>(t)];
      mask[at] = 1;
      for (int j = 0; j < kCharLimit; ++j) {
        chars[at * kCharLimit + j] = src_chars[static_cast<std::size_t>(t) * kCharLimit + j];
      }
    }
  }
}

}  // namespace

Batch build_batch(const std::vector<const ProcessedExample*>& examples, int max_premise_len,
                  int max_hypothesis_len) {
  if (examples.empty()) throw DataError("build_batch: empty batch");
  Batch b;
  b.size = static_cast<int>(examples.size());
  for (const ProcessedExample* ex : examples) {
    b.premise_len = std::max(b.premise_len,
                             std::min<int>(static_cast<int>(ex->premise_ids.size()),
                                           max_premise_len));
    b.hypothesis_len = std::max(b.hypothesis_len,
                                std::min<int>(static_cast<int>(ex->hypothesis_ids.size()),
                                              max_hypothesis_len));
    b.labels.push_back(ex->label);
  }
  pack_side(examples, true, b.premise_len, b.premise_ids, b.premise_chars, b.premise_pos,
            b.premise_match, b.premise_mask);
  pack_side(examples, false, b.hypothesis_len, b.hypothesis_ids, b.hypothesis_chars,
            b.hypothesis_pos, b.hypothesis_match, b.hypothesis_mask);
  return b;
}

EmbeddingTable load_embeddings(const std::string& path, int dim) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open embedding file: " + path);
  EmbeddingTable table;
  table.dim = dim;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::size_t pos = line.find(' ');
    if (pos == std::string::npos) {
      throw DataError(path + ":" + std::to_string(lineno) + ": expected token and " +
                      std::to_string(dim) + " components");
    }
    std::string word = line.substr(0, pos);
    std::vector<float> vec;
    vec.reserve(static_cast<std::size_t>(dim));
    const char* p = line.c_str() + pos;
    char* end = nullptr;
    while (true) {
      while (*p == ' ' || *p == '\t' || *p == '\r') ++p;
      if (*p == '\0') break;
      const float v = std::strtof(p, &end);
      if (end == p) {
        throw DataError(path + ":" + std::to_string(lineno) + ": bad float component");
      }
      vec.push_back(v);
      p = end;
    }
    if (static_cast<int>(vec.size()) != dim) {
      throw DataError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(dim) +
                      " components, got " + std::to_string(vec.size()));
    }
    table.vectors[std::move(word)] = std::move(vec);
  }
  return table;
}

double embedding_coverage(const EmbeddingTable& table, const Vocab& vocab) {
  const auto& words = vocab.words();
  if (words.empty()) return 0.0;
  std::size_t found = 0;
  for (const auto& w : words) {
    if (table.vectors.count(w)) ++found;
  }
  return static_cast<double>(found) / static_cast<double>(words.size());
}

}  // namespace diin
