#include "smedit/editengine.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace smedit {

namespace {

// rows of m where keep[row] is set
Matrix select_rows(const Matrix& m, const std::vector<std::uint8_t>& keep) {
    int count = 0;
    for (auto k : keep) count += k ? 1 : 0;
    Matrix out(count, m.cols());
    int w = 0;
    for (int r = 0; r < m.rows(); ++r) {
        if (!keep[static_cast<std::size_t>(r)]) continue;
        const real_t* src = m.row(r);
        real_t* dst = out.row(w++);
        for (int c = 0; c < m.cols(); ++c) dst[c] = src[c];
    }
    return out;
}

}  // namespace

WeightDelta WeightDelta::from_layers(int step_index,
                                     std::vector<std::pair<std::string, Matrix>> layers) {
    WeightDelta delta;
    delta.step_index = step_index;
    delta.layers = std::move(layers);
    for (const auto& [name, m] : delta.layers) {
        delta.frobenius_norms[name] = static_cast<double>(frobenius_norm(m));
    }
    return delta;
}

void WeightDelta::validate() const {
    for (const auto& [name, m] : layers) {
        if (!m.all_finite()) {
            throw_error(ErrorKind::numeric, "weight delta for " + name + " is not finite");
        }
        auto it = frobenius_norms.find(name);
        if (it == frobenius_norms.end() ||
            std::abs(it->second - static_cast<double>(frobenius_norm(m))) > 1e-12) {
            throw_error(ErrorKind::contract, "weight delta norm bookkeeping is stale for " + name);
        }
    }
}

double WeightDelta::squared_norm() const {
    double total = 0;
    for (const auto& [name, m] : layers) total += static_cast<double>(squared_frobenius(m));
    return total;
}

WeightDelta WeightDelta::negated() const {
    std::vector<std::pair<std::string, Matrix>> neg;
    neg.reserve(layers.size());
    for (const auto& [name, m] : layers) neg.emplace_back(name, scale(m, real_t(-1)));
    return from_layers(step_index, std::move(neg));
}

CaptureResult capture_traces_at(const ToyModel& model,
                                const std::map<std::string, Matrix>& editable_values,
                                const TokenBatch& edit_batch) {
    if (edit_batch.rows() == 0) {
        throw_error(ErrorKind::contract, "capture_traces: empty batch");
    }
    Tape tape;
    std::map<std::string, ValueId> overrides;
    for (const auto& [name, value] : editable_values) overrides[name] = tape.input(value);
    auto ids = model.weights_on_tape(tape, {}, overrides);
    ValueId logits = forward_on_tape(tape, model.config(), ids, edit_batch);
    ValueId loss = tape.softmax_cross_entropy(logits, edit_batch.targets, edit_batch.mask);

    CaptureResult result;
    result.loss = static_cast<double>(tape.value(loss).at(0, 0));
    auto back = tape.backward(loss, /*collect_traces=*/true);
    for (const LayerTrace& trace : back.traces) {
        if (editable_values.find(trace.layer_id) == editable_values.end()) continue;
        LayerTrace masked;
        masked.layer_id = trace.layer_id;
        masked.u = select_rows(trace.u, edit_batch.mask);
        masked.delta = select_rows(trace.delta, edit_batch.mask);
        result.traces.emplace(trace.layer_id, std::move(masked));
    }
    return result;
}

CaptureResult capture_traces(const ToyModel& model, const std::vector<PromptAnswer>& batch) {
    if (batch.empty()) {
        throw_error(ErrorKind::contract, "capture_traces: empty batch");
    }
    std::map<std::string, Matrix> current;
    for (const auto& name : model.editable_set()) current.emplace(name, model.weight(name));
    return capture_traces_at(model, current, make_token_batch(batch));
}

WeightDelta rank1_delta(const std::map<std::string, LayerTrace>& pseudo_traces,
                        double learning_rate, int step_index) {
    std::vector<std::pair<std::string, Matrix>> layers;
    for (const auto& [name, trace] : pseudo_traces) {
        Matrix outer = matmul(trace.delta, trace.u, true, false);
        layers.emplace_back(name, scale(outer, static_cast<real_t>(-learning_rate)));
    }
    return WeightDelta::from_layers(step_index, std::move(layers));
}

WeightDelta ls_aggregate(const AggregationInput& input, int step_index) {
    std::vector<std::pair<std::string, Matrix>> layers;
    for (const LayerAggregate& agg : input.layers) {
        if (agg.d.cols() != agg.u.cols()) {
            throw_error(ErrorKind::shape, "ls_aggregate: D and U must share column count");
        }
        if (!(agg.lambda > 0)) {
            throw_error(ErrorKind::contract, "ls_aggregate: lambda must be positive");
        }
        // the shared kernel takes row-major (one row per sample) operands
        RidgeSolution sol = ridge_solve_rows(transpose(agg.d), transpose(agg.u),
                                             static_cast<real_t>(agg.lambda));
        layers.emplace_back(agg.layer_id, std::move(sol.delta));
    }
    return WeightDelta::from_layers(step_index, std::move(layers));
}

void apply_delta(ToyModel& model, const WeightDelta& delta) {
    const auto& editable = model.editable_set();
    for (const auto& [name, m] : delta.layers) {
        if (std::find(editable.begin(), editable.end(), name) == editable.end()) {
            throw_error(ErrorKind::contract, "apply_delta: layer not editable: " + name);
        }
        Matrix updated = model.weight(name);
        updated.add_scaled(m, real_t(1));
        model.set_weight(name, std::move(updated));
    }
}

DeltaOnTapeResult deltas_on_tape(Tape& tape,
                                 const std::map<std::string, ValueId>& current_editable_ids,
                                 const std::map<std::string, LayerTrace>& traces,
                                 const Hypernetwork& net,
                                 const std::map<std::string, ValueId>& net_param_ids,
                                 const MbpsOptions& opts, int step_index) {
    DeltaOnTapeResult result;
    for (const auto& [name, current_id] : current_editable_ids) {
        auto it = traces.find(name);
        if (it == traces.end()) {
            throw_error(ErrorKind::numeric, "no trace captured for editable layer " + name);
        }
        const LayerTrace& trace = it->second;
        ValueId delta_const = tape.constant(trace.delta);
        ValueId u_const = tape.constant(trace.u);
        auto pseudo = net.transform_on_tape(tape, net_param_ids, delta_const, u_const, name);

        ValueId delta_id;
        if (opts.mode == AggregationMode::rank1) {
            ValueId outer = tape.matmul(pseudo.pseudo_delta, pseudo.pseudo_u, true, false);
            delta_id = tape.scale(outer, static_cast<real_t>(-opts.inner_lr));
        } else {
            ValueId coef = tape.row_sum(tape.hadamard(pseudo.pseudo_u, u_const));
            ValueId d_rows = tape.scale_rows(pseudo.pseudo_delta, coef);
            auto lam_it = net_param_ids.find(Hypernetwork::lambda_param_name(name));
            if (lam_it == net_param_ids.end()) {
                throw_error(ErrorKind::contract, "missing lambda parameter for layer " + name);
            }
            ValueId lam = tape.exp_scalar(lam_it->second);
            delta_id = tape.scale(tape.ridge_solve(d_rows, u_const, lam), real_t(-1));
        }

        const Matrix& delta_value = tape.value(delta_id);
        if (!delta_value.all_finite()) {
            throw_error(ErrorKind::numeric, "edit aborted: non-finite delta at layer " + name +
                                                ", step " + std::to_string(step_index));
        }
        if (opts.delta_sink) {
            opts.delta_sink({opts.edit_index, step_index, name,
                             static_cast<double>(frobenius_norm(delta_value))});
        }
        result.delta_ids.emplace_back(name, delta_id);
        result.new_weight_ids[name] = tape.add(current_id, delta_id);
    }
    return result;
}

StepOnTapeResult mbps_step_on_tape(Tape& tape, const ToyModel& model,
                                   const std::map<std::string, ValueId>& current_editable_ids,
                                   const TokenBatch& edit_batch, const Hypernetwork& net,
                                   const std::map<std::string, ValueId>& net_param_ids,
                                   const MbpsOptions& opts, int step_index) {
    // inner backward pass at the current weights; traces enter the meta graph
    // as constants
    std::map<std::string, Matrix> current_values;
    for (const auto& [name, id] : current_editable_ids) {
        current_values.emplace(name, tape.value(id));
    }
    CaptureResult capture = capture_traces_at(model, current_values, edit_batch);

    StepOnTapeResult result;
    result.capture_loss = capture.loss;
    DeltaOnTapeResult deltas = deltas_on_tape(tape, current_editable_ids, capture.traces, net,
                                              net_param_ids, opts, step_index);
    result.delta_ids = std::move(deltas.delta_ids);
    result.new_weight_ids = std::move(deltas.new_weight_ids);
    return result;
}

MbpsResult mbps_edit(ToyModel& model, const std::vector<PromptAnswer>& edit_pairs,
                     const std::vector<Hypernetwork*>& step_nets, const MbpsOptions& opts) {
    if (step_nets.empty()) {
        throw_error(ErrorKind::contract, "mbps_edit: need at least one step hypernetwork");
    }
    if (edit_pairs.empty()) {
        throw_error(ErrorKind::contract, "mbps_edit: empty edit batch");
    }
    TokenBatch edit_batch = make_token_batch(edit_pairs);
    Tape tape;
    std::map<std::string, ValueId> current_ids;
    for (const auto& name : model.editable_set()) {
        current_ids[name] = tape.constant(model.weight(name));
    }

    MbpsResult result;
    const Hypernetwork* last_net = nullptr;
    std::map<std::string, ValueId> param_ids;
    for (int s = 1; s <= static_cast<int>(step_nets.size()); ++s) {
        const Hypernetwork* net = step_nets[static_cast<std::size_t>(s - 1)];
        if (net != last_net) {
            Tape* t = &tape;
            param_ids.clear();
            for (const auto& p : net->params()) param_ids[p.name] = t->constant(p.value);
            last_net = net;
        }
        auto step = mbps_step_on_tape(tape, model, current_ids, edit_batch, *net, param_ids, opts, s);
        result.edit_nll.push_back(step.capture_loss);

        std::vector<std::pair<std::string, Matrix>> layer_values;
        for (const auto& [name, id] : step.delta_ids) {
            layer_values.emplace_back(name, tape.value(id));
        }
        result.deltas.push_back(WeightDelta::from_layers(s, std::move(layer_values)));
        current_ids = step.new_weight_ids;
    }

    for (const auto& [name, id] : current_ids) {
        const Matrix& value = tape.value(id);
        if (!value.all_finite()) {
            throw_error(ErrorKind::numeric, "edit aborted: non-finite weights at layer " + name);
        }
        model.set_weight(name, value);
    }
    // loss at the final weights
    Matrix logits = model.forward_batch(edit_batch);
    result.edit_nll.push_back(
        static_cast<double>(nll_loss(logits, edit_batch.targets, edit_batch.mask)));
    return result;
}

}  // namespace smedit
