// SPDX-License-Identifier: Apache-2.0
//
// Byte-level BPE. Ids 0..3 are PAD/BOS/EOS/UNK; the requested vocabulary size
// counts only the learned pieces that follow them.
// Merges stay inside word chunks (a whitespace run plus the following word)
// until every training word is a single piece; later merges span chunks and
// are applied to the whole sequence after the word-level ones.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace sicsf {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumSpecials = 4;

class Vocab {
 public:
  // Greedy pair-merge BPE starting from the byte alphabet of `corpus`. Ties on
  // frequency go to the lexicographically smallest (left, right) pair. Throws
  // std::invalid_argument if vocab_size is below the alphabet size or cannot
  // be reached.
  static Vocab train(std::span<const std::string> corpus, std::size_t vocab_size);

  static Vocab from_text(std::string_view text);
  static Vocab load(const std::filesystem::path& path);
  // `<id>\t<piece>` per line, then `#MERGES` and `<left>\t<right>` per merge;
  // a `#CROSS` line precedes the first cross-chunk merge.
  std::string to_text() const;
  void save(const std::filesystem::path& path) const;

  std::size_t piece_count() const { return pieces_.size() - kNumSpecials; }
  std::size_t size() const { return pieces_.size(); }
  const std::string& piece(int id) const;
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merge_text_; }

  std::vector<int> encode(std::string_view text, bool add_specials) const;
  // Concatenates pieces, skipping specials and stopping at the first EOS.
  std::string decode(std::span<const int> ids) const;

  bool operator==(const Vocab& other) const {
    return pieces_ == other.pieces_ && merge_text_ == other.merge_text_ &&
           chunk_merges_ == other.chunk_merges_;
  }

 private:
  Vocab();
  int add_piece(const std::string& piece);
  void add_merge(const std::string& left, const std::string& right);
  // Applies merges with rank in [min_rank, end_rank), lowest rank first.
  void apply_merges(std::vector<int>& seq, std::size_t min_rank, std::size_t end_rank) const;

  struct MergeInfo {
    std::size_t rank;
    int result;
  };

  std::vector<std::string> pieces_;
  std::unordered_map<std::string, int> piece_ids_;
  std::vector<std::pair<std::string, std::string>> merge_text_;
  std::unordered_map<std::uint64_t, MergeInfo> merge_table_;
  int byte_ids_[256];
  std::size_t chunk_merges_ = SIZE_MAX;  // merges at or past this rank span chunks
};

}  // namespace sicsf
