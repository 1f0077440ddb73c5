#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "smedit/matrix.hpp"
#include "smedit/tape.hpp"

namespace smedit {

using TokenSeq = std::vector<int>;

struct PromptAnswer {
    TokenSeq prompt;
    TokenSeq answer;
};

// Flattened batch of variable-length sequences for a single tape forward.
// Row r of the logits corresponds to tokens[r]; masked rows are scored
// against targets[r].
struct TokenBatch {
    std::vector<int> tokens;
    std::vector<int> seq_lens;
    std::vector<int> targets;
    std::vector<std::uint8_t> mask;

    int rows() const { return static_cast<int>(tokens.size()); }
};

// Teacher-forcing batch: each sequence is prompt ++ answer[:-1], and the rows
// from the last prompt position onward predict the answer tokens.
TokenBatch make_token_batch(const std::vector<PromptAnswer>& pairs);

struct ToyConfig {
    int vocab = 64;
    int dim = 32;
    int n_blocks = 2;
    int hidden_mult = 4;
    std::uint64_t init_seed = 1;
};

// Immutable copy of the editable weights, used as the reference point for
// drift measurements and for restore().
struct WeightSnapshot {
    std::string tag;
    std::map<std::string, Matrix> weights;
};

// Tiny editable language model: token embedding -> causal mean pooling ->
// residual feed-forward blocks -> tied output projection. The first linear
// of each block forms the default editable set.
class ToyModel {
public:
    ToyModel() = default;
    explicit ToyModel(const ToyConfig& cfg);
    ToyModel(ToyConfig cfg, std::map<std::string, Matrix> weights,
             std::vector<std::string> editable);

    const ToyConfig& config() const { return cfg_; }
    const std::map<std::string, Matrix>& weights() const { return weights_; }
    const std::vector<std::string>& editable_set() const { return editable_; }

    const Matrix& weight(const std::string& name) const;
    void set_weight(const std::string& name, Matrix value);

    // Places every weight on the tape. Weights named in `as_inputs` become
    // differentiable leaves; entries in `overrides` are used in place of the
    // stored weights (already-on-tape values, e.g. edited weights).
    std::map<std::string, ValueId> weights_on_tape(
        Tape& tape, const std::vector<std::string>& as_inputs = {},
        const std::map<std::string, ValueId>& overrides = {}) const;

    Matrix forward(const TokenSeq& tokens) const;
    Matrix forward_batch(const TokenBatch& batch) const;
    Matrix forward_batch_with(const TokenBatch& batch,
                              const std::map<std::string, Matrix>& replaced) const;

    WeightSnapshot snapshot(const std::string& tag = "W0") const;
    void restore(const WeightSnapshot& snap);

    TokenSeq argmax_decode(const TokenSeq& prompt, int answer_len) const;
    // One batched greedy step per answer position.
    std::vector<TokenSeq> argmax_decode_batch(const std::vector<TokenSeq>& prompts,
                                              int answer_len) const;

private:
    void check_token_range(const std::vector<int>& tokens) const;

    ToyConfig cfg_;
    std::map<std::string, Matrix> weights_;
    std::vector<std::string> editable_;
};

// Forward pass built from tape ops; shared by inference, trainers and tests.
ValueId forward_on_tape(Tape& tape, const ToyConfig& cfg,
                        const std::map<std::string, ValueId>& weight_ids,
                        const TokenBatch& batch);

// Mean over masked rows of -log softmax(logits)[row, target].
real_t nll_loss(const Matrix& logits, const std::vector<int>& targets,
                const std::vector<std::uint8_t>& mask);

real_t nll_loss(const ToyModel& model, const std::vector<PromptAnswer>& pairs);

struct PretrainOptions {
    double lr = 5e-3;
    int max_epochs = 3000;
    int check_every = 10;
    double target_exact = 1.0;
};

struct PretrainResult {
    int epochs = 0;
    double exact_match = 0;
    double final_loss = 0;
    bool converged = false;
};

// Full-batch Adam on all weights until the model reproduces every
// (prompt -> answer) pair (or the epoch budget runs out).
PretrainResult pretrain_model(ToyModel& model, const std::vector<PromptAnswer>& pairs,
                              const PretrainOptions& opts = {});

double fraction_exact(const ToyModel& model, const std::vector<PromptAnswer>& pairs);

void save_model(const ToyModel& model, const std::string& path);
ToyModel load_model(const std::string& path);

}  // namespace smedit

#include "smedit/serialize.hpp"

namespace smedit {

Json model_to_json(const ToyModel& model);
ToyModel model_from_json(const Json& j);

}  // namespace smedit
