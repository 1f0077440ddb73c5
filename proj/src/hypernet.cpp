#include "smedit/hypernet.hpp"

#include <cmath>
#include <set>
#include <utility>

#include "smedit/rng.hpp"
#include "smedit/serialize.hpp"

namespace smedit {

namespace {

constexpr const char* kHypernetSchema = "smedit.hypernet.v1";

std::string block_param(int block, const char* part) {
    return "block" + std::to_string(block) + "." + part;
}

std::string gate_param(int block, const char* part, const std::string& layer_id) {
    return block_param(block, part) + "." + layer_id;
}

}  // namespace

Hypernetwork::Hypernetwork(const HyperConfig& cfg) : cfg_(cfg) {
    if (cfg.u_dim < 1 || cfg.delta_dim < 1 || cfg.rank < 1 || cfg.n_blocks < 1) {
        throw_error(ErrorKind::config, "invalid hypernetwork configuration");
    }
    if (cfg.layer_ids.empty()) {
        throw_error(ErrorKind::config, "hypernetwork requires at least one layer id");
    }
    Rng rng(cfg.init_seed);
    const int z = z_dim();
    const real_t down_std = real_t(1) / std::sqrt(static_cast<real_t>(z));
    auto push = [&](std::string name, Matrix value) {
        index_[name] = params_.size();
        params_.push_back({std::move(name), std::move(value)});
    };
    for (int b = 0; b < cfg.n_blocks; ++b) {
        Matrix down(cfg.rank, z);
        for (int i = 0; i < down.rows(); ++i) {
            for (int j = 0; j < down.cols(); ++j) {
                down.at(i, j) = static_cast<real_t>(rng.normal()) * down_std;
            }
        }
        push(block_param(b, "down"), std::move(down));
        push(block_param(b, "up"), Matrix(z, cfg.rank));  // zero: identity at init
        for (const auto& layer : cfg.layer_ids) {
            push(gate_param(b, "scale", layer), Matrix::filled(1, z, real_t(1)));
            push(gate_param(b, "shift", layer), Matrix(1, z));
        }
    }
    for (const auto& layer : cfg.layer_ids) {
        push(lambda_param_name(layer),
             Matrix::scalar(static_cast<real_t>(std::log(cfg.lambda_init))));
    }
}

const Matrix& Hypernetwork::param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw_error(ErrorKind::contract, "unknown hypernetwork parameter: " + name);
    }
    return params_[it->second].value;
}

std::size_t Hypernetwork::param_count() const {
    std::size_t count = 0;
    for (const auto& p : params_) count += p.value.size();
    return count;
}

std::map<std::string, ValueId> Hypernetwork::leaf_params(Tape& tape) const {
    std::map<std::string, ValueId> ids;
    for (const auto& p : params_) ids[p.name] = tape.input(p.value);
    return ids;
}

void Hypernetwork::check_layer(const std::string& layer_id) const {
    for (const auto& l : cfg_.layer_ids) {
        if (l == layer_id) return;
    }
    throw_error(ErrorKind::contract, "hypernetwork does not serve layer " + layer_id);
}

std::string Hypernetwork::lambda_param_name(const std::string& layer_id) {
    return "lambda." + layer_id;
}

Hypernetwork::TransformIds Hypernetwork::transform_on_tape(
    Tape& tape, const std::map<std::string, ValueId>& param_ids, ValueId delta_id, ValueId u_id,
    const std::string& layer_id) const {
    check_layer(layer_id);
    const Matrix& delta = tape.value(delta_id);
    const Matrix& u = tape.value(u_id);
    if (delta.cols() != cfg_.delta_dim || u.cols() != cfg_.u_dim || delta.rows() != u.rows()) {
        throw_error(ErrorKind::contract, "trace shape does not match hypernetwork for layer " +
                                             layer_id);
    }
    auto id_of = [&](const std::string& name) -> ValueId {
        auto it = param_ids.find(name);
        if (it == param_ids.end()) {
            throw_error(ErrorKind::contract, "missing hypernetwork param id: " + name);
        }
        return it->second;
    };
    ValueId zrow = tape.concat_cols(delta_id, u_id);
    for (int b = 0; b < cfg_.n_blocks; ++b) {
        ValueId mid = tape.gelu(tape.matmul(zrow, id_of(block_param(b, "down")), false, true));
        ValueId up = tape.matmul(mid, id_of(block_param(b, "up")), false, true);
        ValueId gated = tape.mul_row(up, id_of(gate_param(b, "scale", layer_id)));
        ValueId branch = tape.add_row(gated, id_of(gate_param(b, "shift", layer_id)));
        zrow = tape.add(zrow, branch);
    }
    TransformIds out;
    out.pseudo_delta = tape.slice_cols(zrow, 0, cfg_.delta_dim);
    out.pseudo_u = tape.slice_cols(zrow, cfg_.delta_dim, z_dim());
    return out;
}

std::pair<Matrix, Matrix> Hypernetwork::transform(const Matrix& delta, const Matrix& u,
                                                  const std::string& layer_id) const {
    Tape tape;
    auto ids = leaf_params(tape);
    auto out = transform_on_tape(tape, ids, tape.constant(delta), tape.constant(u), layer_id);
    return {tape.value(out.pseudo_delta), tape.value(out.pseudo_u)};
}

HypernetworkStepSet build_stepset(int n_steps, int base_rank, HyperConfig shape, bool rank_decay) {
    if (n_steps < 1) {
        throw_error(ErrorKind::config, "build_stepset requires at least one step");
    }
    if (base_rank < n_steps) {
        throw_error(ErrorKind::config, "rank decay needs base rank >= step count");
    }
    HypernetworkStepSet set;
    for (int s = 1; s <= n_steps; ++s) {
        HyperConfig cfg = shape;
        cfg.rank = rank_decay ? base_rank / s : base_rank;
        cfg.init_seed = shape.init_seed + static_cast<std::uint64_t>(s - 1);
        set.ranks.push_back(cfg.rank);
        set.steps.emplace_back(cfg);
    }
    return set;
}

std::vector<Matrix*> collect_params(std::vector<Hypernetwork*> nets) {
    std::vector<Matrix*> out;
    std::set<const Hypernetwork*> seen;
    for (Hypernetwork* net : nets) {
        if (!net || seen.count(net)) continue;
        seen.insert(net);
        for (auto& p : net->params()) out.push_back(&p.value);
    }
    return out;
}

Json stepset_to_json(const HypernetworkStepSet& set) {
    Json j;
    j["schema"] = kHypernetSchema;
    j["ranks"] = set.ranks;
    Json steps = Json::array();
    for (const Hypernetwork& net : set.steps) {
        Json jn;
        const HyperConfig& cfg = net.config();
        Json jc;
        jc["u_dim"] = cfg.u_dim;
        jc["delta_dim"] = cfg.delta_dim;
        jc["rank"] = cfg.rank;
        jc["n_blocks"] = cfg.n_blocks;
        jc["layer_ids"] = cfg.layer_ids;
        jc["lambda_init"] = cfg.lambda_init;
        jc["init_seed"] = cfg.init_seed;
        jn["config"] = std::move(jc);
        Json jp = Json::array();
        for (const auto& p : net.params()) {
            Json entry;
            entry["name"] = p.name;
            entry["value"] = matrix_to_json(p.value);
            jp.push_back(std::move(entry));
        }
        jn["params"] = std::move(jp);
        steps.push_back(std::move(jn));
    }
    j["steps"] = std::move(steps);
    return j;
}

HypernetworkStepSet stepset_from_json(const Json& j) {
    if (!j.contains("schema") || j.at("schema") != kHypernetSchema) {
        throw_error(ErrorKind::version, "unsupported hypernetwork schema");
    }
    HypernetworkStepSet set;
    set.ranks = j.at("ranks").get<std::vector<int>>();
    for (const Json& jn : j.at("steps")) {
        HyperConfig cfg;
        const Json& jc = jn.at("config");
        cfg.u_dim = jc.at("u_dim").get<int>();
        cfg.delta_dim = jc.at("delta_dim").get<int>();
        cfg.rank = jc.at("rank").get<int>();
        cfg.n_blocks = jc.at("n_blocks").get<int>();
        cfg.layer_ids = jc.at("layer_ids").get<std::vector<std::string>>();
        cfg.lambda_init = jc.at("lambda_init").get<double>();
        cfg.init_seed = jc.at("init_seed").get<std::uint64_t>();
        Hypernetwork net(cfg);
        std::size_t i = 0;
        for (const Json& entry : jn.at("params")) {
            if (i >= net.params().size() ||
                net.params()[i].name != entry.at("name").get<std::string>()) {
                throw_error(ErrorKind::io, "hypernetwork parameter list mismatch");
            }
            Matrix value = matrix_from_json(entry.at("value"));
            if (!value.same_shape(net.params()[i].value)) {
                throw_error(ErrorKind::io, "hypernetwork parameter shape mismatch");
            }
            net.params()[i].value = std::move(value);
            ++i;
        }
        if (i != net.params().size()) {
            throw_error(ErrorKind::io, "hypernetwork parameter count mismatch");
        }
        set.steps.push_back(std::move(net));
    }
    return set;
}

void save_stepset(const HypernetworkStepSet& set, const std::string& path) {
    write_text_file(path, stepset_to_json(set).dump());
}

HypernetworkStepSet load_stepset(const std::string& path) {
    return stepset_from_json(parse_json_file(path));
}

}  // namespace smedit
