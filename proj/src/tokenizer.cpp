// SPDX-License-Identifier: Apache-2.0

#include "sicsf/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "sicsf/errors.hpp"

namespace sicsf {

namespace {

constexpr const char* kSpecialNames[kNumSpecials] = {"<pad>", "<s>", "</s>", "<unk>"};
constexpr std::string_view kMergesHeader = "#MERGES";
constexpr std::string_view kCrossHeader = "#CROSS";

std::uint64_t pair_key(int left, int right) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(left)) << 32) |
         static_cast<std::uint32_t>(right);
}

std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

std::string unescape(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\' || i + 1 == s.size()) {
      out.push_back(s[i]);
      continue;
    }
    const char c = s[++i];
    out.push_back(c == 't' ? '\t' : c == 'n' ? '\n' : c == 'r' ? '\r' : c);
  }
  return out;
}

// Replaces every non-overlapping (left, right) occurrence, scanning left to right.
void apply_merge(std::vector<int>& seq, int left, int right, int result) {
  std::size_t out = 0;
  for (std::size_t i = 0; i < seq.size();) {
    if (i + 1 < seq.size() && seq[i] == left && seq[i + 1] == right) {
      seq[out++] = result;
      i += 2;
    } else {
      seq[out++] = seq[i++];
    }
  }
  seq.resize(out);
}

// Splits text into word chunks: each chunk is a run of whitespace followed by
// a run of non-whitespace. Merges never cross chunk boundaries.
std::vector<std::string_view> word_chunks(std::string_view text) {
  std::vector<std::string_view> chunks;
  auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  std::size_t start = 0, i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    while (i < text.size() && !is_space(text[i])) ++i;
    chunks.push_back(text.substr(start, i - start));
    start = i;
  }
  return chunks;
}

}  // namespace

Vocab::Vocab() {
  std::fill(std::begin(byte_ids_), std::end(byte_ids_), kUnkId);
  for (const char* name : kSpecialNames) {
    pieces_.emplace_back(name);
  }
}

int Vocab::add_piece(const std::string& piece) {
  if (auto it = piece_ids_.find(piece); it != piece_ids_.end()) return it->second;
  const int id = static_cast<int>(pieces_.size());
  pieces_.push_back(piece);
  piece_ids_.emplace(piece, id);
  if (piece.size() == 1) byte_ids_[static_cast<unsigned char>(piece[0])] = id;
  return id;
}

void Vocab::add_merge(const std::string& left, const std::string& right) {
  auto l = piece_ids_.find(left);
  auto r = piece_ids_.find(right);
  if (l == piece_ids_.end() || r == piece_ids_.end()) {
    throw DataError("vocab merge refers to unknown piece: '" + escape(left) + "' + '" +
                    escape(right) + "'");
  }
  const int result = add_piece(left + right);
  merge_table_.emplace(pair_key(l->second, r->second), MergeInfo{merge_text_.size(), result});
  merge_text_.emplace_back(left, right);
}

Vocab Vocab::train(std::span<const std::string> corpus, std::size_t vocab_size) {
  std::map<std::string, std::int64_t> counts;
  bool seen[256] = {};
  for (const auto& s : corpus) {
    for (auto chunk : word_chunks(s)) ++counts[std::string(chunk)];
    for (unsigned char c : s) seen[c] = true;
  }
  const auto alphabet = static_cast<std::size_t>(std::count(std::begin(seen), std::end(seen), true));
  if (vocab_size < alphabet || vocab_size == 0) {
    throw std::invalid_argument("vocab_size " + std::to_string(vocab_size) +
                                " is below the corpus alphabet size; need at least " +
                                std::to_string(std::max<std::size_t>(alphabet, 1)));
  }

  Vocab v;
  for (int c = 0; c < 256; ++c) {
    if (seen[c]) v.add_piece(std::string(1, static_cast<char>(c)));
  }

  std::vector<std::pair<std::vector<int>, std::int64_t>> words;
  for (const auto& [s, n] : counts) {
    std::vector<int> seq;
    for (unsigned char c : s) seq.push_back(v.byte_ids_[c]);
    words.emplace_back(std::move(seq), n);
  }

  std::unordered_map<std::uint64_t, std::int64_t> pair_counts;
  while (v.piece_count() < vocab_size) {
    pair_counts.clear();
    for (const auto& [seq, n] : words) {
      for (std::size_t i = 0; i + 1 < seq.size(); ++i) pair_counts[pair_key(seq[i], seq[i + 1])] += n;
    }
    if (pair_counts.empty() && v.chunk_merges_ == SIZE_MAX) {
      // Every word is a single piece: continue over whole strings.
      v.chunk_merges_ = v.merge_text_.size();
      words.clear();
      std::map<std::string, std::int64_t> whole;
      for (const auto& s : corpus) ++whole[s];
      for (const auto& [s, n] : whole) words.emplace_back(v.encode(s, false), n);
      continue;
    }
    if (pair_counts.empty()) {
      throw std::invalid_argument("vocab_size " + std::to_string(vocab_size) +
                                  " unreachable: corpus supports only " +
                                  std::to_string(v.piece_count()) + " pieces");
    }
    std::uint64_t best = 0;
    std::int64_t best_count = -1;
    for (const auto& [key, n] : pair_counts) {
      if (n < best_count) continue;
      if (n == best_count) {
        const auto& bl = v.pieces_[best >> 32];
        const auto& br = v.pieces_[best & 0xffffffffU];
        const auto& kl = v.pieces_[key >> 32];
        const auto& kr = v.pieces_[key & 0xffffffffU];
        if (std::tie(kl, kr) >= std::tie(bl, br)) continue;
      }
      best = key;
      best_count = n;
    }
    const int left = static_cast<int>(best >> 32);
    const int right = static_cast<int>(best & 0xffffffffU);
    v.add_merge(v.pieces_[left], v.pieces_[right]);
    const int result = v.merge_table_.at(best).result;
    for (auto& [seq, n] : words) apply_merge(seq, left, right, result);
  }
  return v;
}

const std::string& Vocab::piece(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(pieces_.size()));
  }
  return pieces_[id];
}

std::vector<int> Vocab::encode(std::string_view text, bool add_specials) const {
  std::vector<int> out;
  out.reserve(text.size() + 2);
  if (add_specials) out.push_back(kBosId);
  std::vector<int> seq;
  for (auto chunk : word_chunks(text)) {
    seq.clear();
    for (unsigned char c : chunk) seq.push_back(byte_ids_[c]);
    apply_merges(seq, 0, chunk_merges_);
    out.insert(out.end(), seq.begin(), seq.end());
  }
  if (chunk_merges_ < merge_text_.size()) {
    seq.assign(out.begin() + (add_specials ? 1 : 0), out.end());
    apply_merges(seq, chunk_merges_, SIZE_MAX);
    out.resize(add_specials ? 1 : 0);
    out.insert(out.end(), seq.begin(), seq.end());
  }
  if (add_specials) out.push_back(kEosId);
  return out;
}

void Vocab::apply_merges(std::vector<int>& seq, std::size_t min_rank, std::size_t end_rank) const {
  while (seq.size() > 1) {
    std::size_t best_rank = SIZE_MAX;
    const MergeInfo* best = nullptr;
    int left = 0, right = 0;
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      auto it = merge_table_.find(pair_key(seq[i], seq[i + 1]));
      if (it != merge_table_.end() && it->second.rank >= min_rank && it->second.rank < end_rank &&
          it->second.rank < best_rank) {
        best_rank = it->second.rank;
        best = &it->second;
        left = seq[i];
        right = seq[i + 1];
      }
    }
    if (best == nullptr) break;
    apply_merge(seq, left, right, best->result);
  }
}

std::string Vocab::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    const std::string& p = piece(id);
    if (id == kEosId) break;
    if (id < kNumSpecials) continue;
    out += p;
  }
  return out;
}

std::string Vocab::to_text() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < pieces_.size(); ++i) os << i << '\t' << escape(pieces_[i]) << '\n';
  os << kMergesHeader << '\n';
  for (std::size_t i = 0; i < merge_text_.size(); ++i) {
    if (i == chunk_merges_) os << kCrossHeader << '\n';
    os << escape(merge_text_[i].first) << '\t' << escape(merge_text_[i].second) << '\n';
  }
  return os.str();
}

Vocab Vocab::from_text(std::string_view text) {
  Vocab v;
  std::istringstream is{std::string(text)};
  std::string line;
  bool in_merges = false;
  std::size_t line_no = 0;
  std::vector<std::string> alphabet;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line == kMergesHeader) {
      in_merges = true;
      continue;
    }
    if (in_merges && line == kCrossHeader) {
      v.chunk_merges_ = v.merge_text_.size();
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DataError("vocab line " + std::to_string(line_no) + ": missing tab");
    }
    if (in_merges) {
      v.add_merge(unescape(line.substr(0, tab)), unescape(line.substr(tab + 1)));
      continue;
    }
    const std::size_t id = std::stoul(line.substr(0, tab));
    const std::string piece = unescape(line.substr(tab + 1));
    if (id < kNumSpecials) {
      if (piece != kSpecialNames[id]) {
        throw DataError("vocab line " + std::to_string(line_no) + ": bad special token");
      }
      continue;
    }
    // Byte pieces are declared up front; merged pieces are re-derived from the merges.
    if (piece.size() == 1) {
      if (id != v.pieces_.size()) {
        throw DataError("vocab line " + std::to_string(line_no) + ": ids out of order");
      }
      v.add_piece(piece);
    }
  }
  return v;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open vocab file " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return from_text(os.str());
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write vocab file " + path.string());
  out << to_text();
}

}  // namespace sicsf
