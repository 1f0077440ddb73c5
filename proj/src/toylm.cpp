#include "smedit/toylm.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "smedit/optim.hpp"
#include "smedit/rng.hpp"
#include "smedit/serialize.hpp"

namespace smedit {

namespace {

constexpr const char* kModelSchema = "smedit.model.v1";

std::string block_name(int i, const char* part) {
    return "blocks." + std::to_string(i) + "." + part;
}

Matrix gaussian_matrix(Rng& rng, int rows, int cols, real_t stddev) {
    Matrix m(rows, cols);
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) m.at(i, j) = static_cast<real_t>(rng.normal()) * stddev;
    }
    return m;
}

int argmax_lowest_tie(const real_t* row, int n) {
    int best = 0;
    for (int j = 1; j < n; ++j) {
        if (row[j] > row[best]) best = j;
    }
    return best;
}

}  // namespace

TokenBatch make_token_batch(const std::vector<PromptAnswer>& pairs) {
    TokenBatch batch;
    for (const auto& pa : pairs) {
        if (pa.prompt.empty() || pa.answer.empty()) {
            throw_error(ErrorKind::contract, "token batch requires non-empty prompt and answer");
        }
        const int prompt_len = static_cast<int>(pa.prompt.size());
        const int ans_len = static_cast<int>(pa.answer.size());
        const int seq_len = prompt_len + ans_len - 1;
        batch.seq_lens.push_back(seq_len);
        for (int i = 0; i < prompt_len; ++i) batch.tokens.push_back(pa.prompt[static_cast<std::size_t>(i)]);
        for (int i = 0; i + 1 < ans_len; ++i) batch.tokens.push_back(pa.answer[static_cast<std::size_t>(i)]);
        for (int i = 0; i < seq_len; ++i) {
            const int answer_pos = i - (prompt_len - 1);
            if (answer_pos >= 0 && answer_pos < ans_len) {
                batch.targets.push_back(pa.answer[static_cast<std::size_t>(answer_pos)]);
                batch.mask.push_back(1);
            } else {
                batch.targets.push_back(0);
                batch.mask.push_back(0);
            }
        }
    }
    return batch;
}

ToyModel::ToyModel(const ToyConfig& cfg) : cfg_(cfg) {
    if (cfg.vocab < 2 || cfg.dim < 1 || cfg.n_blocks < 1 || cfg.hidden_mult < 1) {
        throw_error(ErrorKind::config, "invalid toy model configuration");
    }
    Rng rng(cfg.init_seed);
    const int hidden = cfg.dim * cfg.hidden_mult;
    const real_t embed_std = real_t(1) / std::sqrt(static_cast<real_t>(cfg.dim));
    const real_t in_std = std::sqrt(real_t(2) / static_cast<real_t>(cfg.dim));
    const real_t out_std =
        std::sqrt(real_t(2) / static_cast<real_t>(hidden)) / std::sqrt(real_t(2 * cfg.n_blocks));
    weights_["embed"] = gaussian_matrix(rng, cfg.vocab, cfg.dim, embed_std);
    for (int b = 0; b < cfg.n_blocks; ++b) {
        weights_[block_name(b, "fc_in")] = gaussian_matrix(rng, hidden, cfg.dim, in_std);
        weights_[block_name(b, "fc_out")] = gaussian_matrix(rng, cfg.dim, hidden, out_std);
        editable_.push_back(block_name(b, "fc_in"));
    }
}

ToyModel::ToyModel(ToyConfig cfg, std::map<std::string, Matrix> weights,
                   std::vector<std::string> editable)
    : cfg_(cfg), weights_(std::move(weights)), editable_(std::move(editable)) {
    for (const auto& name : editable_) {
        if (weights_.find(name) == weights_.end()) {
            throw_error(ErrorKind::contract, "editable layer not present in weights: " + name);
        }
    }
}

const Matrix& ToyModel::weight(const std::string& name) const {
    auto it = weights_.find(name);
    if (it == weights_.end()) {
        throw_error(ErrorKind::contract, "unknown layer id: " + name);
    }
    return it->second;
}

void ToyModel::set_weight(const std::string& name, Matrix value) {
    auto it = weights_.find(name);
    if (it == weights_.end()) {
        throw_error(ErrorKind::contract, "unknown layer id: " + name);
    }
    if (!it->second.same_shape(value)) {
        throw_error(ErrorKind::shape, "weight shape mismatch for " + name);
    }
    it->second = std::move(value);
}

std::map<std::string, ValueId> ToyModel::weights_on_tape(
    Tape& tape, const std::vector<std::string>& as_inputs,
    const std::map<std::string, ValueId>& overrides) const {
    std::map<std::string, ValueId> ids;
    for (const auto& [name, value] : weights_) {
        auto ov = overrides.find(name);
        if (ov != overrides.end()) {
            ids[name] = ov->second;
            continue;
        }
        const bool differentiable =
            std::find(as_inputs.begin(), as_inputs.end(), name) != as_inputs.end();
        ids[name] = differentiable ? tape.input(value) : tape.constant(value);
    }
    return ids;
}

void ToyModel::check_token_range(const std::vector<int>& tokens) const {
    for (int tok : tokens) {
        if (tok < 0 || tok >= cfg_.vocab) {
            throw_error(ErrorKind::contract, "token out of vocabulary: " + std::to_string(tok));
        }
    }
}

Matrix ToyModel::forward(const TokenSeq& tokens) const {
    TokenBatch batch;
    batch.tokens = tokens;
    batch.seq_lens = {static_cast<int>(tokens.size())};
    batch.targets.assign(tokens.size(), 0);
    batch.mask.assign(tokens.size(), 0);
    return forward_batch(batch);
}

Matrix ToyModel::forward_batch(const TokenBatch& batch) const {
    check_token_range(batch.tokens);
    Tape tape;
    auto ids = weights_on_tape(tape);
    ValueId logits = forward_on_tape(tape, cfg_, ids, batch);
    return tape.value(logits);
}

Matrix ToyModel::forward_batch_with(const TokenBatch& batch,
                                    const std::map<std::string, Matrix>& replaced) const {
    check_token_range(batch.tokens);
    Tape tape;
    std::map<std::string, ValueId> overrides;
    for (const auto& [name, value] : replaced) {
        if (!weight(name).same_shape(value)) {
            throw_error(ErrorKind::shape, "replacement weight shape mismatch for " + name);
        }
        overrides[name] = tape.constant(value);
    }
    auto ids = weights_on_tape(tape, {}, overrides);
    ValueId logits = forward_on_tape(tape, cfg_, ids, batch);
    return tape.value(logits);
}

WeightSnapshot ToyModel::snapshot(const std::string& tag) const {
    WeightSnapshot snap;
    snap.tag = tag;
    for (const auto& name : editable_) snap.weights.emplace(name, weight(name));
    return snap;
}

void ToyModel::restore(const WeightSnapshot& snap) {
    if (snap.weights.size() != editable_.size()) {
        throw_error(ErrorKind::contract, "snapshot key set does not match editable set");
    }
    for (const auto& name : editable_) {
        auto it = snap.weights.find(name);
        if (it == snap.weights.end()) {
            throw_error(ErrorKind::contract, "snapshot missing editable layer: " + name);
        }
        set_weight(name, it->second);
    }
}

TokenSeq ToyModel::argmax_decode(const TokenSeq& prompt, int answer_len) const {
    auto out = argmax_decode_batch({prompt}, answer_len);
    return out.front();
}

std::vector<TokenSeq> ToyModel::argmax_decode_batch(const std::vector<TokenSeq>& prompts,
                                                    int answer_len) const {
    if (answer_len < 1) {
        throw_error(ErrorKind::contract, "argmax_decode requires answer_len >= 1");
    }
    std::vector<TokenSeq> sequences = prompts;
    std::vector<TokenSeq> answers(prompts.size());
    for (int step = 0; step < answer_len; ++step) {
        TokenBatch batch;
        for (const auto& seq : sequences) {
            batch.seq_lens.push_back(static_cast<int>(seq.size()));
            batch.tokens.insert(batch.tokens.end(), seq.begin(), seq.end());
        }
        batch.targets.assign(batch.tokens.size(), 0);
        batch.mask.assign(batch.tokens.size(), 0);
        Matrix logits = forward_batch(batch);
        int row = -1;
        for (std::size_t s = 0; s < sequences.size(); ++s) {
            row += batch.seq_lens[s];
            const int tok = argmax_lowest_tie(logits.row(row), logits.cols());
            answers[s].push_back(tok);
            sequences[s].push_back(tok);
        }
    }
    return answers;
}

ValueId forward_on_tape(Tape& tape, const ToyConfig& cfg,
                        const std::map<std::string, ValueId>& weight_ids,
                        const TokenBatch& batch) {
    auto id_of = [&](const std::string& name) -> ValueId {
        auto it = weight_ids.find(name);
        if (it == weight_ids.end()) {
            throw_error(ErrorKind::contract, "forward_on_tape: missing weight id " + name);
        }
        return it->second;
    };
    const ValueId embed = id_of("embed");
    ValueId h = tape.prefix_mean(tape.embed_rows(embed, batch.tokens), batch.seq_lens);
    for (int b = 0; b < cfg.n_blocks; ++b) {
        const std::string fc_in = block_name(b, "fc_in");
        const std::string fc_out = block_name(b, "fc_out");
        ValueId a = tape.linear(id_of(fc_in), h, fc_in);
        ValueId g = tape.gelu(a);
        ValueId o = tape.linear(id_of(fc_out), g, fc_out);
        h = tape.add(h, o);
    }
    // tied output projection
    return tape.matmul(h, embed, false, true);
}

real_t nll_loss(const Matrix& logits, const std::vector<int>& targets,
                const std::vector<std::uint8_t>& mask) {
    Tape tape;
    ValueId z = tape.constant(logits);
    ValueId loss = tape.softmax_cross_entropy(z, targets, mask);
    return tape.value(loss).at(0, 0);
}

real_t nll_loss(const ToyModel& model, const std::vector<PromptAnswer>& pairs) {
    TokenBatch batch = make_token_batch(pairs);
    Matrix logits = model.forward_batch(batch);
    return nll_loss(logits, batch.targets, batch.mask);
}

PretrainResult pretrain_model(ToyModel& model, const std::vector<PromptAnswer>& pairs,
                              const PretrainOptions& opts) {
    if (pairs.empty()) {
        throw_error(ErrorKind::contract, "pretrain_model: empty pair set");
    }
    TokenBatch batch = make_token_batch(pairs);
    std::vector<std::string> names;
    for (const auto& [name, unused] : model.weights()) names.push_back(name);

    AdamOptimizer adam;
    PretrainResult result;
    for (int epoch = 1; epoch <= opts.max_epochs; ++epoch) {
        Tape tape;
        auto ids = model.weights_on_tape(tape, names);
        ValueId logits = forward_on_tape(tape, model.config(), ids, batch);
        ValueId loss = tape.softmax_cross_entropy(logits, batch.targets, batch.mask);
        result.final_loss = static_cast<double>(tape.value(loss).at(0, 0));
        auto grads = tape.backward(loss);

        std::vector<Matrix> grad_list;
        std::vector<Matrix> updated;
        grad_list.reserve(names.size());
        updated.reserve(names.size());
        for (const auto& name : names) {
            grad_list.push_back(grads.has_grad(ids[name]) ? grads.grad(ids[name])
                                                          : Matrix(model.weight(name).rows(),
                                                                   model.weight(name).cols()));
            updated.push_back(model.weight(name));
        }
        std::vector<Matrix*> param_ptrs;
        for (auto& w : updated) param_ptrs.push_back(&w);
        const UpdateReport report = adam.step(param_ptrs, grad_list, opts.lr);
        if (!report.applied) {
            throw_error(ErrorKind::numeric, "pretrain_model: non-finite gradient at epoch " +
                                                std::to_string(epoch));
        }
        for (std::size_t i = 0; i < names.size(); ++i) {
            model.set_weight(names[i], std::move(updated[i]));
        }
        result.epochs = epoch;
        if (epoch % opts.check_every == 0 || epoch == opts.max_epochs) {
            result.exact_match = fraction_exact(model, pairs);
            if (result.exact_match >= opts.target_exact) {
                result.converged = true;
                break;
            }
        }
    }
    if (!result.converged) {
        result.exact_match = fraction_exact(model, pairs);
        result.converged = result.exact_match >= opts.target_exact;
    }
    return result;
}

double fraction_exact(const ToyModel& model, const std::vector<PromptAnswer>& pairs) {
    if (pairs.empty()) return 0;
    std::size_t max_answer = 0;
    for (const auto& pa : pairs) max_answer = std::max(max_answer, pa.answer.size());
    std::vector<TokenSeq> prompts;
    prompts.reserve(pairs.size());
    for (const auto& pa : pairs) prompts.push_back(pa.prompt);
    auto decoded = model.argmax_decode_batch(prompts, static_cast<int>(max_answer));
    int correct = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& want = pairs[i].answer;
        bool ok = true;
        for (std::size_t k = 0; k < want.size(); ++k) {
            if (decoded[i][k] != want[k]) {
                ok = false;
                break;
            }
        }
        correct += ok ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

Json model_to_json(const ToyModel& model) {
    for (const auto& [name, w] : model.weights()) {
        if (!w.all_finite()) {
            throw_error(ErrorKind::numeric, "refusing to checkpoint non-finite weight " + name);
        }
    }
    Json j;
    j["schema"] = kModelSchema;
    Json cfg;
    cfg["vocab"] = model.config().vocab;
    cfg["dim"] = model.config().dim;
    cfg["n_blocks"] = model.config().n_blocks;
    cfg["hidden_mult"] = model.config().hidden_mult;
    cfg["init_seed"] = model.config().init_seed;
    j["config"] = std::move(cfg);
    j["editable"] = model.editable_set();
    Json weights;
    for (const auto& [name, w] : model.weights()) weights[name] = matrix_to_json(w);
    j["weights"] = std::move(weights);
    return j;
}

ToyModel model_from_json(const Json& j) {
    if (!j.contains("schema") || j.at("schema") != kModelSchema) {
        throw_error(ErrorKind::version, "unsupported model schema");
    }
    ToyConfig cfg;
    const Json& jc = j.at("config");
    cfg.vocab = jc.at("vocab").get<int>();
    cfg.dim = jc.at("dim").get<int>();
    cfg.n_blocks = jc.at("n_blocks").get<int>();
    cfg.hidden_mult = jc.at("hidden_mult").get<int>();
    cfg.init_seed = jc.at("init_seed").get<std::uint64_t>();
    std::map<std::string, Matrix> weights;
    for (const auto& [name, jm] : j.at("weights").items()) {
        weights.emplace(name, matrix_from_json(jm));
    }
    std::vector<std::string> editable = j.at("editable").get<std::vector<std::string>>();
    return ToyModel(cfg, std::move(weights), std::move(editable));
}

void save_model(const ToyModel& model, const std::string& path) {
    write_text_file(path, model_to_json(model).dump());
}

ToyModel load_model(const std::string& path) {
    Json j = parse_json_file(path);
    if (!j.contains("schema") || j.at("schema") != kModelSchema) {
        throw_error(ErrorKind::version, "unsupported model schema in " + path);
    }
    return model_from_json(j);
}

}  // namespace smedit
