#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace xmp {

using TokenId = int;
using Tokens = std::vector<TokenId>;

/// Word-level tokenizer over the closed grammar vocabulary. Punctuation is
/// split into its own token; special tokens are written "<pad>", "<unk>",
/// "<bos>", "<eos>", "<sep>".
class Tokenizer {
public:
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kUnk = 1;
    static constexpr TokenId kBos = 2;
    static constexpr TokenId kEos = 3;
    static constexpr TokenId kSep = 4;
    static constexpr int kNumSpecials = 5;

    /// Vocabulary built from the synthetic-world grammar.
    Tokenizer();
    explicit Tokenizer(std::vector<std::string> words);

    Tokens tokenize(std::string_view text) const;
    std::string detokenize(const Tokens& tokens) const;

    int vocab_size() const { return static_cast<int>(id_to_word_.size()); }
    TokenId id(const std::string& word) const;
    const std::string& word(TokenId id) const { return id_to_word_.at(static_cast<std::size_t>(id)); }
    bool is_special(TokenId id) const { return id >= 0 && id < kNumSpecials; }

private:
    std::vector<std::string> id_to_word_;
    std::unordered_map<std::string, TokenId> word_to_id_;
};

/// Process-wide tokenizer for the synthetic grammar.
const Tokenizer& default_tokenizer();

}  // namespace xmp
