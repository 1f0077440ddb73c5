#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "smedit/toylm.hpp"

namespace smedit {

// One (prompt, answer) token pair.
struct TokenPair {
    TokenSeq x;
    TokenSeq y;

    bool operator==(const TokenPair& other) const { return x == other.x && y == other.y; }
};

// One editing task: the edit instance, its paraphrases (same answer), and
// unrelated instances whose answers are pretraining ground truth. old_answer
// is what the base model believes before the edit.
struct EditSample {
    TokenPair edit;
    std::vector<TokenPair> equivalents;
    std::vector<TokenPair> unrelated;
    TokenSeq old_answer;
};

struct CorpusConfig {
    int n = 16;              // edit samples
    int m = 2;               // equivalents per sample
    int p = 2;               // unrelated pairs per sample
    int vocab = 64;
    std::uint64_t seed = 1;
    int unrelated_pool = 8;  // distinct never-edited facts backing the unrelated pairs
};

// Token-id ranges carved out of the vocabulary. Edit subjects and unrelated
// subjects draw from disjoint alphabets, which makes unrelated prompts
// disjoint from edit prompts corpus-wide.
struct VocabLayout {
    int filler_begin = 0, filler_count = 0;
    int subj_edit_begin = 0, subj_edit_count = 0;
    int subj_unrel_begin = 0, subj_unrel_count = 0;
    int relation_begin = 0, relation_count = 0;
    int object_begin = 0, object_count = 0;
};

VocabLayout layout_vocab(const CorpusConfig& cfg);

struct EditCorpus {
    CorpusConfig config;
    VocabLayout layout;
    std::vector<EditSample> samples;
    // never-edited facts; y is the pretraining ground truth
    std::vector<TokenPair> pool;

    // Subrange copy with the same config/layout/pool (train/eval splits).
    EditCorpus slice(int skip, int take) const;
};

// Facts are (subject token pair, relation token) -> object token. Paraphrase
// template k inserts filler token k at prompt position k % 3.
EditCorpus generate_corpus(const CorpusConfig& cfg);

// First b * n_seq samples, split into n_seq batches of b in corpus order.
std::vector<std::vector<EditSample>> batch_split(const EditCorpus& corpus, int batch_size,
                                                 int n_seq);
std::vector<std::vector<EditSample>> batch_split(const std::vector<EditSample>& samples,
                                                 int batch_size, int n_seq);

// (prompt -> old answer) pairs covering every edit prompt, every paraphrase
// prompt and every pool fact; this is what the base model is trained on.
std::vector<PromptAnswer> pretrain_corpus(const EditCorpus& corpus);

std::string serialize_corpus(const EditCorpus& corpus);
EditCorpus parse_corpus(const std::string& text);
void save_corpus(const EditCorpus& corpus, const std::string& path);
EditCorpus load_corpus(const std::string& path);

}  // namespace smedit
