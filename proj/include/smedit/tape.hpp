#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "smedit/matrix.hpp"

namespace smedit {

using ValueId = int;

// Captured (u, delta) pair of one linear op: u holds the layer inputs and
// delta the loss gradient at the layer outputs, one row per position.
// sum_k delta_k u_k^T reassembles the weight gradient.
struct LayerTrace {
    std::string layer_id;
    Matrix u;      // positions x d
    Matrix delta;  // positions x d'
};

// Tape-based reverse-mode autodiff over dense matrices. Ops evaluate
// eagerly; backward() replays the recorded nodes in reverse. A tape is
// single-threaded; independent tapes may run concurrently.
class Tape {
public:
    // Differentiable leaf.
    ValueId input(Matrix value);
    // Non-differentiable leaf; backward does not propagate into it.
    ValueId constant(Matrix value);

    ValueId matmul(ValueId a, ValueId b, bool trans_a = false, bool trans_b = false);
    // out = in * weight^T, tagged so backward records a LayerTrace.
    ValueId linear(ValueId weight, ValueId in, std::string layer_id);
    ValueId add(ValueId a, ValueId b);
    ValueId sub(ValueId a, ValueId b);
    ValueId scale(ValueId a, real_t s);
    ValueId hadamard(ValueId a, ValueId b);
    // broadcast a 1xN row across all rows of a (KxN)
    ValueId add_row(ValueId a, ValueId row);
    ValueId mul_row(ValueId a, ValueId row);
    // row k of a scaled by col[k]; col is Kx1
    ValueId scale_rows(ValueId a, ValueId col);
    ValueId row_sum(ValueId a);  // KxN -> Kx1
    ValueId gelu(ValueId a);
    ValueId concat_cols(ValueId a, ValueId b);
    ValueId slice_cols(ValueId a, int begin, int end);
    // gather rows of a table by index; backward scatter-adds
    ValueId embed_rows(ValueId table, std::vector<int> ids);
    // within each consecutive block of seq_lens[i] rows, row j becomes the
    // mean of rows 0..j of that block (causal mean pooling)
    ValueId prefix_mean(ValueId a, std::vector<int> seq_lens);
    // mean over masked rows of -log softmax(logits)[row, target[row]]
    ValueId softmax_cross_entropy(ValueId logits, std::vector<int> targets,
                                  std::vector<std::uint8_t> mask);
    // mean over masked rows of -sum_v target_dist[row,v] * log softmax(logits)[row,v]
    ValueId soft_cross_entropy(ValueId logits, Matrix target_dist,
                               std::vector<std::uint8_t> mask);
    ValueId reduce_sum(ValueId a);
    ValueId squared_fro(ValueId a);
    // ridge solve of Eq-style normal equations with row-major operands:
    // given d_rows (Kxd'), u_rows (Kxd), lambda (scalar) returns the d'xd
    // solution of min ||X u_rows^T - d_rows^T||_F^2 + lambda ||X||_F^2
    ValueId ridge_solve(ValueId d_rows, ValueId u_rows, ValueId lambda);
    ValueId exp_scalar(ValueId a);

    const Matrix& value(ValueId id) const;
    int size() const { return static_cast<int>(values_.size()); }

    struct BackwardResult {
        std::vector<Matrix> grads;  // indexed by ValueId; empty when no gradient
        std::vector<LayerTrace> traces;

        const Matrix& grad(ValueId id) const;
        bool has_grad(ValueId id) const {
            return id >= 0 && id < static_cast<int>(grads.size()) && !grads[static_cast<std::size_t>(id)].empty();
        }
    };

    // Pure: repeated calls return bitwise-identical results.
    BackwardResult backward(ValueId loss, bool collect_traces = false) const;

private:
    enum class Op {
        leaf,
        matmul,
        linear,
        add,
        sub,
        scale,
        hadamard,
        add_row,
        mul_row,
        scale_rows,
        row_sum,
        gelu,
        concat_cols,
        slice_cols,
        embed_rows,
        prefix_mean,
        softmax_xent,
        soft_xent,
        reduce_sum,
        squared_fro,
        ridge_solve,
        exp_scalar,
    };

    struct Node {
        Op op;
        ValueId a = -1;
        ValueId b = -1;
        ValueId c = -1;
        ValueId out = -1;
        bool trans_a = false;
        bool trans_b = false;
        real_t scalar_arg = 0;
        int i0 = 0;
        int i1 = 0;
        std::string layer_id;
        std::vector<int> ints;
        std::vector<std::uint8_t> mask;
        Matrix aux;   // op-specific cache (cholesky factor, target distribution)
        Matrix aux2;  // op-specific cache (cached softmax rows)
    };

    ValueId push_value(Matrix value, bool requires_grad);
    ValueId push_node(Node node, Matrix out_value);
    bool requires_grad(ValueId id) const { return grad_flags_[static_cast<std::size_t>(id)]; }
    const Matrix& val(ValueId id) const { return values_[static_cast<std::size_t>(id)]; }
    void check_id(ValueId id, const char* where) const;

    std::vector<Matrix> values_;
    std::vector<bool> grad_flags_;
    std::vector<Node> nodes_;
};

// Central finite differences of a scalar-valued function, entrywise.
Matrix finite_diff_grad(const std::function<real_t(const Matrix&)>& fn, const Matrix& point,
                        real_t eps);

}  // namespace smedit
