#include "xmp/tokenizer.hpp"

#include <sstream>

#include "xmp/synthworld.hpp"

namespace xmp {

namespace {

constexpr std::string_view kPunct = ".,?:!";

bool is_punct(const std::string& w) { return w.size() == 1 && kPunct.find(w[0]) != std::string_view::npos; }

}  // namespace

Tokenizer::Tokenizer() : Tokenizer(grammar_words()) {}

Tokenizer::Tokenizer(std::vector<std::string> words)
{
    id_to_word_ = {"<pad>", "<unk>", "<bos>", "<eos>", "<sep>"};
    for (auto& w : words)
        if (!word_to_id_.contains(w) && w.rfind('<', 0) != 0)
            id_to_word_.push_back(std::move(w));
    for (std::size_t i = 0; i < id_to_word_.size(); ++i)
        word_to_id_.emplace(id_to_word_[i], static_cast<TokenId>(i));
}

TokenId Tokenizer::id(const std::string& word) const
{
    auto it = word_to_id_.find(word);
    return it == word_to_id_.end() ? kUnk : it->second;
}

Tokens Tokenizer::tokenize(std::string_view text) const
{
    Tokens out;
    std::istringstream is{std::string(text)};
    std::string chunk;
    while (is >> chunk) {
        if (chunk.size() > 2 && chunk.front() == '<' && chunk.back() == '>') {
            out.push_back(id(chunk));
            continue;
        }
        std::size_t end = chunk.size();
        while (end > 0 && kPunct.find(chunk[end - 1]) != std::string_view::npos)
            --end;
        if (end > 0)
            out.push_back(id(chunk.substr(0, end)));
        for (std::size_t i = end; i < chunk.size(); ++i)
            out.push_back(id(std::string(1, chunk[i])));
    }
    return out;
}

std::string Tokenizer::detokenize(const Tokens& tokens) const
{
    std::string out;
    for (TokenId t : tokens) {
        const auto& w = word(t);
        if (!out.empty() && !is_punct(w))
            out += ' ';
        out += w;
    }
    return out;
}

const Tokenizer& default_tokenizer()
{
    static const Tokenizer tok;
    return tok;
}

}  // namespace xmp
