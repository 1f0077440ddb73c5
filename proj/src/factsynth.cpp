#include "smedit/factsynth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

#include "smedit/rng.hpp"
#include "smedit/serialize.hpp"

namespace smedit {

namespace {

constexpr const char* kCorpusSchema = "smedit.corpus.v1";

// Smallest alphabet size a with a(a+1)/2 >= n. Subjects are unordered token
// pairs: the pooled prompt representation is order-invariant, so (a,b) and
// (b,a) would collide as facts.
int triangular_alphabet(int n) {
    int a = 1;
    while (a * (a + 1) / 2 < n) ++a;
    return a;
}

struct Fact {
    int s1 = 0;
    int s2 = 0;
    int relation = 0;
    int answer = 0;  // ground truth before any edit

    TokenSeq prompt() const { return {s1, s2, relation}; }
};

std::vector<std::pair<int, int>> subject_pairs(Rng& rng, int begin, int count, int take) {
    std::vector<std::pair<int, int>> pairs;
    pairs.reserve(static_cast<std::size_t>(count) * (count + 1) / 2);
    for (int a = 0; a < count; ++a) {
        for (int b = a; b < count; ++b) pairs.emplace_back(begin + a, begin + b);
    }
    rng.shuffle(pairs);
    pairs.resize(static_cast<std::size_t>(take));
    return pairs;
}

TokenSeq paraphrase_prompt(const Fact& fact, int template_index, const VocabLayout& layout) {
    const int filler = layout.filler_begin + template_index;
    TokenSeq base = fact.prompt();
    TokenSeq out;
    const int slot = template_index % static_cast<int>(base.size());
    for (int i = 0; i < static_cast<int>(base.size()); ++i) {
        if (i == slot) out.push_back(filler);
        out.push_back(base[static_cast<std::size_t>(i)]);
    }
    return out;
}

Json pair_to_json(const TokenPair& pair) {
    Json j;
    j["x"] = pair.x;
    j["y"] = pair.y;
    return j;
}

TokenPair pair_from_json(const Json& j) {
    TokenPair out;
    out.x = j.at("x").get<TokenSeq>();
    out.y = j.at("y").get<TokenSeq>();
    return out;
}

}  // namespace

VocabLayout layout_vocab(const CorpusConfig& cfg) {
    if (cfg.n < 1 || cfg.m < 1 || cfg.p < 1 || cfg.unrelated_pool < 1) {
        throw_error(ErrorKind::config, "corpus config requires n, m, p, pool >= 1");
    }
    if (cfg.p > cfg.unrelated_pool) {
        throw_error(ErrorKind::config, "p exceeds the unrelated pool size");
    }
    VocabLayout layout;
    layout.filler_count = std::max(1, cfg.m);
    layout.relation_count = 1;
    layout.subj_edit_count = triangular_alphabet(cfg.n);
    layout.subj_unrel_count = triangular_alphabet(cfg.unrelated_pool);

    layout.filler_begin = 0;
    layout.subj_edit_begin = layout.filler_begin + layout.filler_count;
    layout.subj_unrel_begin = layout.subj_edit_begin + layout.subj_edit_count;
    layout.relation_begin = layout.subj_unrel_begin + layout.subj_unrel_count;
    layout.object_begin = layout.relation_begin + layout.relation_count;
    layout.object_count = cfg.vocab - layout.object_begin;
    if (layout.object_count < 2) {
        throw_error(ErrorKind::capacity,
                    "vocabulary of " + std::to_string(cfg.vocab) +
                        " cannot host n=" + std::to_string(cfg.n) +
                        " facts with at least two objects");
    }
    return layout;
}

EditCorpus EditCorpus::slice(int skip, int take) const {
    if (skip < 0 || take < 0 || skip + take > static_cast<int>(samples.size())) {
        throw_error(ErrorKind::contract, "corpus slice out of range");
    }
    EditCorpus out;
    out.config = config;
    out.config.n = take;
    out.layout = layout;
    out.pool = pool;
    out.samples.assign(samples.begin() + skip, samples.begin() + skip + take);
    return out;
}

EditCorpus generate_corpus(const CorpusConfig& cfg) {
    EditCorpus corpus;
    corpus.config = cfg;
    corpus.layout = layout_vocab(cfg);
    const VocabLayout& layout = corpus.layout;
    Rng rng(cfg.seed);

    auto edit_subjects = subject_pairs(rng, layout.subj_edit_begin, layout.subj_edit_count, cfg.n);
    auto pool_subjects =
        subject_pairs(rng, layout.subj_unrel_begin, layout.subj_unrel_count, cfg.unrelated_pool);

    auto random_object = [&]() { return layout.object_begin + rng.uniform_int(layout.object_count); };

    std::vector<Fact> pool_facts;
    pool_facts.reserve(pool_subjects.size());
    for (const auto& [s1, s2] : pool_subjects) {
        pool_facts.push_back({s1, s2, layout.relation_begin, random_object()});
    }
    for (const Fact& fact : pool_facts) {
        corpus.pool.push_back({fact.prompt(), {fact.answer}});
    }

    for (const auto& [s1, s2] : edit_subjects) {
        Fact fact{s1, s2, layout.relation_begin, random_object()};
        // counterfactual new answer, uniform over the other objects
        int offset = rng.uniform_int(layout.object_count - 1);
        int new_answer = layout.object_begin + offset;
        if (new_answer >= fact.answer) ++new_answer;

        EditSample sample;
        sample.edit = {fact.prompt(), {new_answer}};
        sample.old_answer = {fact.answer};
        for (int k = 0; k < cfg.m; ++k) {
            sample.equivalents.push_back({paraphrase_prompt(fact, k, layout), {new_answer}});
        }
        std::vector<int> pool_index(pool_facts.size());
        std::iota(pool_index.begin(), pool_index.end(), 0);
        rng.shuffle(pool_index);
        for (int k = 0; k < cfg.p; ++k) {
            const Fact& unrel = pool_facts[static_cast<std::size_t>(pool_index[static_cast<std::size_t>(k)])];
            sample.unrelated.push_back({unrel.prompt(), {unrel.answer}});
        }
        corpus.samples.push_back(std::move(sample));
    }
    return corpus;
}

std::vector<std::vector<EditSample>> batch_split(const std::vector<EditSample>& samples,
                                                 int batch_size, int n_seq) {
    if (batch_size < 1 || n_seq < 1) {
        throw_error(ErrorKind::contract, "batch_split requires batch_size, n_seq >= 1");
    }
    const std::size_t needed =
        static_cast<std::size_t>(batch_size) * static_cast<std::size_t>(n_seq);
    if (needed > samples.size()) {
        throw_error(ErrorKind::capacity, "batch_split: need " + std::to_string(needed) +
                                             " samples, corpus has " +
                                             std::to_string(samples.size()));
    }
    std::vector<std::vector<EditSample>> batches;
    batches.reserve(static_cast<std::size_t>(n_seq));
    auto it = samples.begin();
    for (int b = 0; b < n_seq; ++b) {
        batches.emplace_back(it, it + batch_size);
        it += batch_size;
    }
    return batches;
}

std::vector<std::vector<EditSample>> batch_split(const EditCorpus& corpus, int batch_size,
                                                 int n_seq) {
    return batch_split(corpus.samples, batch_size, n_seq);
}

std::vector<PromptAnswer> pretrain_corpus(const EditCorpus& corpus) {
    std::vector<PromptAnswer> pairs;
    for (const EditSample& sample : corpus.samples) {
        pairs.push_back({sample.edit.x, sample.old_answer});
        for (const TokenPair& eq : sample.equivalents) {
            pairs.push_back({eq.x, sample.old_answer});
        }
    }
    for (const TokenPair& fact : corpus.pool) {
        pairs.push_back({fact.x, fact.y});
    }
    return pairs;
}

std::string serialize_corpus(const EditCorpus& corpus) {
    std::ostringstream out;
    Json header;
    header["schema"] = kCorpusSchema;
    header["n"] = corpus.config.n;
    header["m"] = corpus.config.m;
    header["p"] = corpus.config.p;
    header["vocab"] = corpus.config.vocab;
    header["seed"] = corpus.config.seed;
    header["unrelated_pool"] = corpus.config.unrelated_pool;
    header["layout"] = {corpus.layout.filler_begin,    corpus.layout.filler_count,
                        corpus.layout.subj_edit_begin,  corpus.layout.subj_edit_count,
                        corpus.layout.subj_unrel_begin, corpus.layout.subj_unrel_count,
                        corpus.layout.relation_begin,   corpus.layout.relation_count,
                        corpus.layout.object_begin,     corpus.layout.object_count};
    Json pool = Json::array();
    for (const TokenPair& fact : corpus.pool) pool.push_back(pair_to_json(fact));
    header["pool"] = std::move(pool);
    out << header.dump() << "\n";
    for (const EditSample& sample : corpus.samples) {
        Json j;
        j["edit"] = pair_to_json(sample.edit);
        Json eq = Json::array();
        for (const TokenPair& pair : sample.equivalents) eq.push_back(pair_to_json(pair));
        j["equivalents"] = std::move(eq);
        Json un = Json::array();
        for (const TokenPair& pair : sample.unrelated) un.push_back(pair_to_json(pair));
        j["unrelated"] = std::move(un);
        j["old_answer"] = sample.old_answer;
        out << j.dump() << "\n";
    }
    return out.str();
}

EditCorpus parse_corpus(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) {
        throw_error(ErrorKind::io, "empty corpus file");
    }
    Json header = Json::parse(line, nullptr, false);
    if (header.is_discarded() || !header.contains("schema") || header.at("schema") != kCorpusSchema) {
        throw_error(ErrorKind::version, "unsupported corpus schema");
    }
    EditCorpus corpus;
    corpus.config.n = header.at("n").get<int>();
    corpus.config.m = header.at("m").get<int>();
    corpus.config.p = header.at("p").get<int>();
    corpus.config.vocab = header.at("vocab").get<int>();
    corpus.config.seed = header.at("seed").get<std::uint64_t>();
    corpus.config.unrelated_pool = header.at("unrelated_pool").get<int>();
    const auto layout = header.at("layout").get<std::vector<int>>();
    if (layout.size() != 10) throw_error(ErrorKind::io, "corrupt corpus layout");
    corpus.layout = {layout[0], layout[1], layout[2], layout[3], layout[4],
                     layout[5], layout[6], layout[7], layout[8], layout[9]};
    for (const Json& jf : header.at("pool")) corpus.pool.push_back(pair_from_json(jf));

    while (std::getline(in, line)) {
        if (line.empty()) continue;
        Json j = Json::parse(line, nullptr, false);
        if (j.is_discarded()) throw_error(ErrorKind::io, "invalid corpus record");
        EditSample sample;
        sample.edit = pair_from_json(j.at("edit"));
        for (const Json& je : j.at("equivalents")) sample.equivalents.push_back(pair_from_json(je));
        for (const Json& ju : j.at("unrelated")) sample.unrelated.push_back(pair_from_json(ju));
        sample.old_answer = j.at("old_answer").get<TokenSeq>();
        corpus.samples.push_back(std::move(sample));
    }
    if (static_cast<int>(corpus.samples.size()) != corpus.config.n) {
        throw_error(ErrorKind::io, "corpus record count does not match header");
    }
    return corpus;
}

void save_corpus(const EditCorpus& corpus, const std::string& path) {
    write_text_file(path, serialize_corpus(corpus));
}

EditCorpus load_corpus(const std::string& path) { return parse_corpus(read_text_file(path)); }

}  // namespace smedit
