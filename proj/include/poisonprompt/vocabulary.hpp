#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "poisonprompt/common.hpp"

namespace poisonprompt {

/// Bijective token <-> id mapping. Ids 0..3 are reserved and fixed:
///
///   0 [PAD]      padding, never attended to
///   1 [MASK]     the cloze slot the model predicts
///   2 [PROMPT]   placeholder for a soft-prompt slot
///   3 [TRIGGER]  placeholder for an unfilled trigger slot
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kMask = 1;
  static constexpr TokenId kPromptSlot = 2;
  static constexpr TokenId kTriggerSlot = 3;
  static constexpr TokenId kNumReserved = 4;

  static const std::vector<std::string>& reserved_names() {
    static const std::vector<std::string> names{"[PAD]", "[MASK]", "[PROMPT]", "[TRIGGER]"};
    return names;
  }

  Vocabulary() = default;

  /// `tokens` must start with the reserved names in id order.
  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    const auto& reserved = reserved_names();
    require(tokens_.size() >= reserved.size(), "vocabulary is missing reserved tokens");
    for (std::size_t i = 0; i < reserved.size(); ++i)
      require(tokens_[i] == reserved[i],
              "vocabulary id " + std::to_string(i) + " must be " + reserved[i]);
    index_.reserve(tokens_.size());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      const auto [it, inserted] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
      require(inserted, "duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }

  [[nodiscard]] Index size() const { return static_cast<Index>(tokens_.size()); }
  [[nodiscard]] bool contains(TokenId id) const { return id >= 0 && id < size(); }
  [[nodiscard]] static bool is_reserved(TokenId id) { return id >= 0 && id < kNumReserved; }

  [[nodiscard]] TokenId id(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) throw Error("unknown token '" + token + "'");
    return it->second;
  }

  [[nodiscard]] const std::string& token(TokenId id) const {
    require(contains(id), "token id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  [[nodiscard]] std::vector<std::string> render(const std::vector<TokenId>& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (TokenId t : ids) out.push_back(token(t));
    return out;
  }

  [[nodiscard]] const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace poisonprompt
