#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "smedit/matrix.hpp"
#include "smedit/tape.hpp"

namespace smedit {

struct HyperConfig {
    int u_dim = 0;       // d: editable layer input width
    int delta_dim = 0;   // d': editable layer output width
    int rank = 64;
    int n_blocks = 4;
    std::vector<std::string> layer_ids;  // editable layers served by this network
    double lambda_init = 0.1;            // ridge regularizer, stored as log lambda
    std::uint64_t init_seed = 1;
};

struct HyperParam {
    std::string name;
    Matrix value;
};

// Gradient-to-update transform f: (delta, u) -> (pseudo delta, pseudo u).
// A stack of low-rank residual MLP blocks acts on the concatenated (delta, u)
// row; per-layer learned scale/shift gates let one network serve every
// editable layer of the same shape. The final projection of each block is
// zero-initialized, so a fresh network is exactly the identity.
class Hypernetwork {
public:
    Hypernetwork() = default;
    explicit Hypernetwork(const HyperConfig& cfg);

    const HyperConfig& config() const { return cfg_; }
    int z_dim() const { return cfg_.u_dim + cfg_.delta_dim; }

    const std::vector<HyperParam>& params() const { return params_; }
    std::vector<HyperParam>& params() { return params_; }
    const Matrix& param(const std::string& name) const;
    std::size_t param_count() const;

    // Registers every parameter as a differentiable leaf.
    std::map<std::string, ValueId> leaf_params(Tape& tape) const;

    struct TransformIds {
        ValueId pseudo_delta;
        ValueId pseudo_u;
    };
    // delta_id: K x d', u_id: K x d. Shape-preserving.
    TransformIds transform_on_tape(Tape& tape, const std::map<std::string, ValueId>& param_ids,
                                   ValueId delta_id, ValueId u_id,
                                   const std::string& layer_id) const;

    // Value-only transform for editing without meta-gradients.
    std::pair<Matrix, Matrix> transform(const Matrix& delta, const Matrix& u,
                                        const std::string& layer_id) const;

    // log lambda parameter name for a layer (ridge aggregation).
    static std::string lambda_param_name(const std::string& layer_id);

private:
    void check_layer(const std::string& layer_id) const;

    HyperConfig cfg_;
    std::vector<HyperParam> params_;
    std::map<std::string, std::size_t> index_;
};

// Ordered set {f_1, ..., f_S} with rank decay r_s = floor(r / s).
struct HypernetworkStepSet {
    std::vector<Hypernetwork> steps;
    std::vector<int> ranks;

    int step_count() const { return static_cast<int>(steps.size()); }
};

// rank_decay=false keeps every step at the base rank (the consistent-rank
// ablation).
HypernetworkStepSet build_stepset(int n_steps, int base_rank, HyperConfig shape,
                                  bool rank_decay = true);

// Flattened parameter views across a set of networks (deduplicated by
// pointer so a shared network appears once).
std::vector<Matrix*> collect_params(std::vector<Hypernetwork*> nets);

void save_stepset(const HypernetworkStepSet& set, const std::string& path);
HypernetworkStepSet load_stepset(const std::string& path);

}  // namespace smedit

#include "smedit/serialize.hpp"

namespace smedit {

Json stepset_to_json(const HypernetworkStepSet& set);
HypernetworkStepSet stepset_from_json(const Json& j);

}  // namespace smedit
