#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "smedit/factsynth.hpp"
#include "smedit/hypernet.hpp"
#include "smedit/toylm.hpp"

namespace smedit {

enum class AggregationMode { rank1, least_squares };

// Per-layer dense update with norm bookkeeping.
struct WeightDelta {
    int step_index = 0;
    std::vector<std::pair<std::string, Matrix>> layers;
    std::map<std::string, double> frobenius_norms;

    static WeightDelta from_layers(int step_index,
                                   std::vector<std::pair<std::string, Matrix>> layers);
    // checks shapes are finite and the stored norms match recomputation
    void validate() const;
    double squared_norm() const;
    WeightDelta negated() const;
};

struct CaptureResult {
    std::map<std::string, LayerTrace> traces;  // editable layers, answer-position rows
    double loss = 0;                           // nll used for the backward pass
};

// One forward/backward over the edit batch; per editable layer the (u, delta)
// rows at answer positions, whose outer products reassemble the weight
// gradient of the nll.
CaptureResult capture_traces(const ToyModel& model, const std::vector<PromptAnswer>& batch);

// Same capture with the editable weights replaced by explicit values (the
// in-flight edited weights of an outer edit loop).
CaptureResult capture_traces_at(const ToyModel& model,
                                const std::map<std::string, Matrix>& editable_values,
                                const TokenBatch& edit_batch);

// delta = -lr * sum_k pseudo_delta_k pseudo_u_k^T per layer.
WeightDelta rank1_delta(const std::map<std::string, LayerTrace>& pseudo_traces,
                        double learning_rate, int step_index = 1);

// Eq-style least-squares aggregation operands in math orientation:
// D (d' x b), U (d x b), lambda > 0.
struct LayerAggregate {
    std::string layer_id;
    Matrix d;
    Matrix u;
    double lambda = 0.1;
};
struct AggregationInput {
    std::vector<LayerAggregate> layers;
};

// delta = D U^T (U U^T + lambda I)^{-1}, the minimizer of
// ||delta U - D||_F^2 + lambda ||delta||_F^2.
WeightDelta ls_aggregate(const AggregationInput& input, int step_index = 1);

// In-place addition to the named editable layers only.
void apply_delta(ToyModel& model, const WeightDelta& delta);

struct DeltaDumpRow {
    int edit_index = 0;
    int step = 0;
    std::string layer_id;
    double frobenius_norm = 0;
};
using DeltaSink = std::function<void(const DeltaDumpRow&)>;

struct MbpsOptions {
    AggregationMode mode = AggregationMode::least_squares;
    double inner_lr = 1e-2;  // rank1 mode step size
    int edit_index = 0;      // delta dump labeling
    DeltaSink delta_sink;
};

// Delta construction as tape ops: transform captured traces (entering as
// constants) through the step hypernetwork and form the per-layer delta.
// Gradients flow from downstream losses through the delta construction into
// the hypernetwork parameters.
struct DeltaOnTapeResult {
    std::vector<std::pair<std::string, ValueId>> delta_ids;
    std::map<std::string, ValueId> new_weight_ids;
};
DeltaOnTapeResult deltas_on_tape(Tape& tape,
                                 const std::map<std::string, ValueId>& current_editable_ids,
                                 const std::map<std::string, LayerTrace>& traces,
                                 const Hypernetwork& net,
                                 const std::map<std::string, ValueId>& net_param_ids,
                                 const MbpsOptions& opts, int step_index);

// One MBPS step: capture traces at the current weights (detached), then build
// the deltas on the tape.
struct StepOnTapeResult {
    std::vector<std::pair<std::string, ValueId>> delta_ids;
    std::map<std::string, ValueId> new_weight_ids;
    double capture_loss = 0;  // edit-batch nll at the pre-step weights
};
StepOnTapeResult mbps_step_on_tape(Tape& tape, const ToyModel& model,
                                   const std::map<std::string, ValueId>& current_editable_ids,
                                   const TokenBatch& edit_batch, const Hypernetwork& net,
                                   const std::map<std::string, ValueId>& net_param_ids,
                                   const MbpsOptions& opts, int step_index);

// Full multi-step edit applied to the model. step_nets has one entry per BP
// step (entries may repeat a shared network). Returns all per-step deltas and
// the edit-batch nll at every visited weight state (S + 1 values).
struct MbpsResult {
    std::vector<WeightDelta> deltas;
    std::vector<double> edit_nll;  // index s: loss at W^s
};
MbpsResult mbps_edit(ToyModel& model, const std::vector<PromptAnswer>& edit_pairs,
                     const std::vector<Hypernetwork*>& step_nets, const MbpsOptions& opts = {});

}  // namespace smedit
