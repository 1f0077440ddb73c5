#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "smedit/editengine.hpp"
#include "smedit/factsynth.hpp"
#include "smedit/hypernet.hpp"
#include "smedit/optim.hpp"
#include "smedit/rng.hpp"
#include "smedit/serialize.hpp"
#include "smedit/toylm.hpp"

namespace smedit {

enum class TrainerMode {
    smedit_sequential,  // step-specific hypernetworks, one update per trajectory
    smedit_batch,       // single hypernetwork, updated at every BP step
    baseline_kl,        // single-step meta-training with the KL locality loss
    baseline_rledit,    // KL + backtracking + discounted objective over a sequence
    baseline_kl_mbps,   // KL meta-training with a multi-step inner edit
};
const char* trainer_mode_name(TrainerMode mode);
TrainerMode trainer_mode_from_name(const std::string& name);

enum class ConsVariant { total_drift, per_step_sum };

struct TrainerConfig {
    TrainerMode mode = TrainerMode::smedit_batch;
    int n_steps = 2;           // S
    double eta = 0.5;          // norm-constraint coefficient
    double lambda_loc = 0.6;   // locality coefficient
    double gamma = 1.0;        // discount factor
    double mu = 0.95;          // backtracking decay
    int backtrack_depth = 10;  // q
    double meta_lr = 1e-3;
    double inner_lr = 1e-2;    // rank1-mode inner step size
    double max_grad_norm = 1.0;
    AggregationMode aggregation = AggregationMode::least_squares;
    ConsVariant cons_variant = ConsVariant::total_drift;
    int batch_size = 4;
    int n_seq = 2;             // batches per sequence / distinct training batches
    int hyper_rank = 64;
    int hyper_blocks = 4;
    bool rank_decay = true;
    double lambda_init = 0.1;
    std::uint64_t seed = 1;

    void validate() const;
    bool sequential_mode() const {
        return mode == TrainerMode::smedit_sequential || mode == TrainerMode::baseline_rledit;
    }
    bool uses_locality() const {
        return mode == TrainerMode::baseline_kl || mode == TrainerMode::baseline_rledit ||
               mode == TrainerMode::baseline_kl_mbps;
    }
};

Json trainer_config_to_json(const TrainerConfig& cfg);
TrainerConfig trainer_config_from_json(const Json& j);

// Loss components of one edit. total is always the documented combination of
// the present components under the run's coefficients.
struct LossReport {
    double edit_loss = 0;
    std::optional<double> locality_loss;
    std::optional<double> cons_loss;
    std::optional<double> backtracking_loss;
    std::optional<double> delta_sq_norm;
    double total = 0;

    double recombined(double eta, double lambda_loc) const {
        double t = edit_loss;
        if (locality_loss) t += lambda_loc * *locality_loss;
        if (cons_loss) t += eta * *cons_loss;
        if (backtracking_loss) t += *backtracking_loss;
        if (delta_sq_norm) t += eta * *delta_sq_norm;
        return t;
    }
};

struct TrainLogRow {
    int iteration = 0;
    int edit_index = 0;
    int step = 0;
    LossReport losses;
    double wall_ms = 0;
};

struct TrainingLog {
    Json header;
    struct Entry {
        bool is_event = false;
        TrainLogRow row;
        std::string message;
    };
    std::vector<Entry> entries;

    std::vector<TrainLogRow> rows() const;
    std::vector<std::string> events() const;
    // JSONL: header line, then one line per entry. include_wall=false drops
    // the wall-time field (determinism comparisons).
    std::string serialize(bool include_wall = true) const;
};

// ---- loss operations ------------------------------------------------------

// mean nll over the equivalence pairs of the samples, on the given model
double edit_loss(const ToyModel& edited, const std::vector<EditSample>& samples);

// mean KL(original || edited) over unrelated prompts and answer positions
double kl_locality_loss(const WeightSnapshot& original, const ToyModel& edited,
                        const std::vector<TokenPair>& unrelated);

double cons_per_step_sum(const std::vector<WeightDelta>& deltas);
double cons_total_drift(const ToyModel& model, const WeightSnapshot& w0);

// sum over the last q history batches of mu^(age) * (L_e + lambda_loc * L_loc)
// evaluated on the current weights; empty history gives 0
double backtracking_loss(const std::vector<const std::vector<EditSample>*>& history,
                         const ToyModel& current, const WeightSnapshot& original, double mu,
                         double lambda_loc, int backtrack_depth);

struct RlEditTerm {
    double meta_loss = 0;
    double backtracking_loss = 0;
    double delta_sq_norm = 0;
};
// J = sum_i gamma^i (meta_i + back_i + eta * ||delta_i||^2), i starting at 1
double rl_objective(const std::vector<RlEditTerm>& terms, double gamma, double eta);

// ---- profiler plumbing ----------------------------------------------------

enum class Phase : int {
    cache_grad = 0,
    compute_delta = 1,
    edit_loss_bp = 2,
    loc_loss_bp = 3,
    update_f = 4,
};
constexpr int kPhaseCount = 5;
extern const std::array<const char*, kPhaseCount> kPhaseNames;

struct TimingSink {
    std::array<double, kPhaseCount> seconds{};
    double total_seconds = 0;
    int iterations = 0;
};

// ---- trainer ---------------------------------------------------------------

class Trainer {
public:
    Trainer(TrainerConfig cfg, const EditCorpus& corpus, ToyModel base_model);

    void run(int iterations);
    void run_iteration(TimingSink* sink = nullptr);

    int iterations_done() const { return iteration_; }
    const TrainerConfig& config() const { return cfg_; }
    const TrainingLog& log() const { return log_; }
    ToyModel& model() { return model_; }
    const ToyModel& model() const { return model_; }
    const WeightSnapshot& original_weights() const { return w0_; }
    HypernetworkStepSet& stepset() { return nets_; }
    const HypernetworkStepSet& stepset() const { return nets_; }
    // one entry per BP step; a shared network repeats
    std::vector<Hypernetwork*> step_nets();

    long capture_count() const { return captures_; }
    long update_count() const { return updates_; }

    // test hook: called with the flat meta-gradient right before each update
    std::function<void(int iteration, const std::vector<Matrix>&)> grad_observer;

    Json state_json() const;
    void save_state(const std::string& path) const;
    static Trainer from_state(const Json& state, const EditCorpus& corpus);
    static Trainer load_state(const std::string& path, const EditCorpus& corpus);

private:
    struct BatchData {
        std::vector<EditSample> samples;
        TokenBatch edit_batch;
        TokenBatch equiv_batch;
        TokenBatch unrel_batch;
    };

    Trainer(TrainerConfig cfg, const EditCorpus& corpus, ToyModel base_model, bool fresh);
    void build_batches(const EditCorpus& corpus);
    void init_log_header();
    int next_batch_index();
    std::map<std::string, Matrix> current_editable_values() const;
    void commit_weights(const Tape& tape, const std::map<std::string, ValueId>& ids);

    // flat parameter order shared by gradients, optimizer state and observer
    std::vector<Matrix*> flat_params();
    std::vector<ValueId> flat_param_ids(const std::vector<std::map<std::string, ValueId>>& per_net,
                                        const std::vector<const Hypernetwork*>& nets) const;

    void iteration_batchwise(TimingSink* sink);
    void iteration_sequential(TimingSink* sink);

    bool apply_update(std::vector<Matrix>&& grads);
    void log_row(TrainLogRow row);
    void log_event(const std::string& message);

    TrainerConfig cfg_;
    std::uint64_t corpus_seed_ = 0;
    ToyModel model_;
    WeightSnapshot w0_;
    std::vector<BatchData> batches_;
    HypernetworkStepSet nets_;
    bool shared_net_ = false;
    AdamOptimizer adam_;
    Rng rng_{0};
    int iteration_ = 0;
    long captures_ = 0;
    long updates_ = 0;
    std::vector<int> batch_order_;
    std::size_t batch_cursor_ = 0;
    TrainingLog log_;
};

}  // namespace smedit
