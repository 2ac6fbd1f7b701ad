#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "duet/common.hpp"

namespace duet {

inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const unsigned char u = static_cast<unsigned char>(ch);
        if (std::isalnum(u)) {
            cur.push_back(char(std::tolower(u)));
        } else if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

// Word-level vocabulary built from the training captions. Id 0 is the begin
// token, id 1 catches out-of-vocabulary words, real words start at 2 in
// sorted order (deterministic for a given corpus).
class Vocabulary {
public:
    static constexpr int bos_id = 0;
    static constexpr int oov_id = 1;

    static Vocabulary build(const std::vector<std::string>& texts) {
        std::set<std::string> uniq;
        for (const auto& t : texts)
            for (auto& w : split_words(t)) uniq.insert(w);
        Vocabulary v;
        v.words_.assign(uniq.begin(), uniq.end());
        v.rebuild_index_();
        return v;
    }

    int id_of(const std::string& word) const {
        auto it = index_.find(word);
        return it == index_.end() ? oov_id : it->second;
    }

    const std::string& word_at(int id) const {
        DUET_CHECK(id >= 2 && id < size(), "vocab: id ", id, " has no word");
        return words_[size_t(id - 2)];
    }

    int size() const { return int(words_.size()) + 2; }
    const std::vector<std::string>& words() const { return words_; }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        DUET_CHECK(out.good(), "vocab: cannot write ", path);
        for (const auto& w : words_) out << w << "\n";
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        DUET_CHECK(in.good(), "vocab: cannot read ", path);
        Vocabulary v;
        std::string line;
        while (std::getline(in, line))
            if (!line.empty()) v.words_.push_back(line);
        v.rebuild_index_();
        return v;
    }

private:
    void rebuild_index_() {
        index_.clear();
        for (size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = int(i) + 2;
    }

    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

struct TokenSequence {
    std::vector<int> ids; // ids[0] is always the begin token
    int64_t length() const { return int64_t(ids.size()); }
};

// Lowercased whitespace/punctuation split, begin token prepended, truncated.
inline TokenSequence tokenize(const std::string& text, const Vocabulary& vocab,
                              int max_tokens = 64) {
    TokenSequence seq;
    seq.ids.push_back(Vocabulary::bos_id);
    for (const auto& w : split_words(text)) {
        if (int(seq.ids.size()) >= max_tokens) break;
        seq.ids.push_back(vocab.id_of(w));
    }
    return seq;
}

} // namespace duet
