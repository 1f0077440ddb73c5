#include "smedit/tape.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace smedit {

namespace {

constexpr real_t kGeluCoef = real_t(0.7978845608028654);  // sqrt(2/pi)
constexpr real_t kGeluCubic = real_t(0.044715);

real_t gelu_value(real_t x) {
    const real_t t = kGeluCoef * (x + kGeluCubic * x * x * x);
    return real_t(0.5) * x * (real_t(1) + std::tanh(t));
}

real_t gelu_derivative(real_t x) {
    const real_t t = kGeluCoef * (x + kGeluCubic * x * x * x);
    const real_t th = std::tanh(t);
    const real_t sech2 = real_t(1) - th * th;
    return real_t(0.5) * (real_t(1) + th) +
           real_t(0.5) * x * sech2 * kGeluCoef * (real_t(1) + real_t(3) * kGeluCubic * x * x);
}

// Row softmax with the cross-entropy pieces computed stably.
void masked_softmax_rows(const Matrix& logits, const std::vector<std::uint8_t>& mask,
                         Matrix& probs_out, std::vector<real_t>& lse_out) {
    const int rows = logits.rows();
    const int cols = logits.cols();
    probs_out = Matrix(rows, cols);
    lse_out.assign(static_cast<std::size_t>(rows), real_t(0));
    for (int r = 0; r < rows; ++r) {
        if (!mask[static_cast<std::size_t>(r)]) continue;
        const real_t* z = logits.row(r);
        real_t zmax = z[0];
        for (int v = 1; v < cols; ++v) zmax = std::max(zmax, z[v]);
        real_t denom = 0;
        real_t* p = probs_out.row(r);
        for (int v = 0; v < cols; ++v) {
            p[v] = std::exp(z[v] - zmax);
            denom += p[v];
        }
        for (int v = 0; v < cols; ++v) p[v] /= denom;
        lse_out[static_cast<std::size_t>(r)] = std::log(denom) + zmax;
    }
}

int count_mask(const std::vector<std::uint8_t>& mask) {
    int n = 0;
    for (auto m : mask) n += m ? 1 : 0;
    return n;
}

}  // namespace

void Tape::check_id(ValueId id, const char* where) const {
    if (id < 0 || id >= static_cast<int>(values_.size())) {
        throw_error(ErrorKind::contract, std::string(where) + ": invalid value id");
    }
}

ValueId Tape::push_value(Matrix value, bool req) {
    values_.push_back(std::move(value));
    grad_flags_.push_back(req);
    return static_cast<ValueId>(values_.size()) - 1;
}

ValueId Tape::push_node(Node node, Matrix out_value) {
    bool req = false;
    for (ValueId id : {node.a, node.b, node.c}) {
        if (id >= 0) req = req || requires_grad(id);
    }
    const ValueId out = push_value(std::move(out_value), req);
    node.out = out;
    nodes_.push_back(std::move(node));
    return out;
}

ValueId Tape::input(Matrix value) { return push_value(std::move(value), true); }

ValueId Tape::constant(Matrix value) { return push_value(std::move(value), false); }

ValueId Tape::matmul(ValueId a, ValueId b, bool trans_a, bool trans_b) {
    check_id(a, "matmul");
    check_id(b, "matmul");
    Matrix out = smedit::matmul(val(a), val(b), trans_a, trans_b);
    Node n;
    n.op = Op::matmul;
    n.a = a;
    n.b = b;
    n.trans_a = trans_a;
    n.trans_b = trans_b;
    return push_node(std::move(n), std::move(out));
}

ValueId Tape::linear(ValueId weight, ValueId in, std::string layer_id) {
    check_id(weight, "linear");
    check_id(in, "linear");
    if (val(in).cols() != val(weight).cols()) {
        throw_error(ErrorKind::shape, "linear: input cols must equal weight cols");
    }
    Matrix out = smedit::matmul(val(in), val(weight), false, true);
    Node n;
    n.op = Op::linear;
    n.a = weight;
    n.b = in;
    n.layer_id = std::move(layer_id);
    return push_node(std::move(n), std::move(out));
}

ValueId Tape::add(ValueId a, ValueId b) {
    check_id(a, "add");
    check_id(b, "add");
    Node n;
    n.op = Op::add;
    n.a = a;
    n.b = b;
    return push_node(std::move(n), smedit::add(val(a), val(b)));
}

ValueId Tape::sub(ValueId a, ValueId b) {
    check_id(a, "sub");
    check_id(b, "sub");
    Node n;
    n.op = Op::sub;
    n.a = a;
    n.b = b;
    return push_node(std::move(n), smedit::sub(val(a), val(b)));
}

ValueId Tape::scale(ValueId a, real_t s) {
    check_id(a, "scale");
    Node n;
    n.op = Op::scale;
    n.a = a;
    n.scalar_arg = s;
    return push_node(std::move(n), smedit::scale(val(a), s));
}

ValueId Tape::hadamard(ValueId a, ValueId b) {
    check_id(a, "hadamard");
    check_id(b, "hadamard");
    Node n;
    n.op = Op::hadamard;
    n.a = a;
    n.b = b;
    return push_node(std::move(n), smedit::hadamard(val(a), val(b)));
}

ValueId Tape::add_row(ValueId a, ValueId row) {
    check_id(a, "add_row");
    check_id(row, "add_row");
    const Matrix& m = val(a);
    const Matrix& r = val(row);
    if (r.rows() != 1 || r.cols() != m.cols()) {
        throw_error(ErrorKind::shape, "add_row: row must be 1 x cols(a)");
    }
    Matrix out = m;
    for (int i = 0; i < out.rows(); ++i) {
        real_t* orow = out.row(i);
        const real_t* rr = r.row(0);
        for (int j = 0; j < out.cols(); ++j) orow[j] += rr[j];
    }
    Node n;
    n.op = Op::add_row;
    n.a = a;
    n.b = row;
    return push_node(std::move(n), std::move(out));
}

ValueId Tape::mul_row(ValueId a, ValueId row) {
    check_id(a, "mul_row");
    check_id(row, "mul_row");
    const Matrix& m = val(a);
    const Matrix& r = val(row);
    if (r.rows() != 1 || r.cols() != m.cols()) {
        throw_error(ErrorKind::shape, "mul_row: row must be 1 x cols(a)");
    }
    Matrix out = m;
    for (int i = 0; i < out.rows(); ++i) {
        real_t* orow = out.row(i);
        const real_t* rr = r.row(0);
        for (int j = 0; j < out.cols(); ++j) orow[j] *= rr[j];
    }
    Node n;
    n.op = Op::mul_row;
    n.a = a;
    n.b = row;
    return push_node(std::move(n), std::move(out));
}

ValueId Tape::scale_rows(ValueId a, ValueId col) {
    check_id(a, "scale_rows");
    check_id(col, "scale_rows");
    const Matrix& m = val(a);
    const Matrix& c = val(col);
    if (c.cols() != 1 || c.rows() != m.rows()) {
        throw_error(ErrorKind::shape, "scale_rows: col must be rows(a) x 1");
    }
    Matrix out = m;
    for (int i = 0; i < out.rows(); ++i) {
        const real_t s = c.at(i, 0);
        real_t* orow = out.row(i);
        for (int j = 0; j < out.cols(); ++j) orow[j] *= s;
    }
    Node n;
    n.op = Op::scale_rows;
    n.a = a;
    n.b = col;
    return push_node(std::move(n), std::move(out));
}

ValueId Tape::row_sum(ValueId a) {
    check_id(a, "row_sum");
    const Matrix& m = val(a);
    Matrix out(m.rows(), 1);
    for (int i = 0; i < m.rows(); ++i) {
        real_t acc = 0;
        const real_t* mrow = m.row(i);
        for (int j = 0; j < m.cols(); ++j) acc += mrow[j];
        out.at(i, 0) = acc;
    }
    Node n;
    n.op = Op::row_sum;
    n.a = a;
    return push_node(std::move(n), std::move(out));
}

ValueId Tape::gelu(ValueId a) {
    check_id(a, "gelu");
    Matrix out = val(a);
    real_t* d = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) d[i] = gelu_value(d[i]);
    Node n;
    n.op = Op::gelu;
    n.a = a;
    return push_node(std::move(n), std::move(out));
}

ValueId Tape::concat_cols(ValueId a, ValueId b) {
    check_id(a, "concat_cols");
    check_id(b, "concat_cols");
    const Matrix& x = val(a);
    const Matrix& y = val(b);
    if (x.rows() != y.rows()) {
        throw_error(ErrorKind::shape, "concat_cols: row count mismatch");
    }
    Matrix out(x.rows(), x.cols() + y.cols());
    for (int i = 0; i < x.rows(); ++i) {
        real_t* orow = out.row(i);
        const real_t* xr = x.row(i);
        const real_t* yr = y.row(i);
        for (int j = 0; j < x.cols(); ++j) orow[j] = xr[j];
        for (int j = 0; j < y.cols(); ++j) orow[x.cols() + j] = yr[j];
    }
    Node n;
    n.op = Op::concat_cols;
    n.a = a;
    n.b = b;
    n.i0 = x.cols();
    return push_node(std::move(n), std::move(out));
}

ValueId Tape::slice_cols(ValueId a, int begin, int end) {
    check_id(a, "slice_cols");
    const Matrix& m = val(a);
    if (begin < 0 || end > m.cols() || begin >= end) {
        throw_error(ErrorKind::shape, "slice_cols: bad column range");
    }
    Matrix out(m.rows(), end - begin);
    for (int i = 0; i < m.rows(); ++i) {
        const real_t* mrow = m.row(i);
        real_t* orow = out.row(i);
        for (int j = begin; j < end; ++j) orow[j - begin] = mrow[j];
    }
    Node n;
    n.op = Op::slice_cols;
    n.a = a;
    n.i0 = begin;
    n.i1 = end;
    return push_node(std::move(n), std::move(out));
}

ValueId Tape::embed_rows(ValueId table, std::vector<int> ids) {
    check_id(table, "embed_rows");
    const Matrix& t = val(table);
    Matrix out(static_cast<int>(ids.size()), t.cols());
    for (int k = 0; k < out.rows(); ++k) {
        const int id = ids[static_cast<std::size_t>(k)];
        if (id < 0 || id >= t.rows()) {
            throw_error(ErrorKind::contract, "embed_rows: index out of range");
        }
        const real_t* src = t.row(id);
        real_t* dst = out.row(k);
        for (int j = 0; j < t.cols(); ++j) dst[j] = src[j];
    }
    Node n;
    n.op = Op::embed_rows;
    n.a = table;
    n.ints = std::move(ids);
    return push_node(std::move(n), std::move(out));
}

ValueId Tape::prefix_mean(ValueId a, std::vector<int> seq_lens) {
    check_id(a, "prefix_mean");
    const Matrix& m = val(a);
    int total = 0;
    for (int len : seq_lens) {
        if (len < 1) throw_error(ErrorKind::contract, "prefix_mean: sequence length < 1");
        total += len;
    }
    if (total != m.rows()) {
        throw_error(ErrorKind::shape, "prefix_mean: sequence lengths do not cover rows");
    }
    Matrix out(m.rows(), m.cols());
    int base = 0;
    for (int len : seq_lens) {
        std::vector<real_t> acc(static_cast<std::size_t>(m.cols()), real_t(0));
        for (int j = 0; j < len; ++j) {
            const real_t* src = m.row(base + j);
            real_t* dst = out.row(base + j);
            const real_t inv = real_t(1) / real_t(j + 1);
            for (int v = 0; v < m.cols(); ++v) {
                acc[static_cast<std::size_t>(v)] += src[v];
                dst[v] = acc[static_cast<std::size_t>(v)] * inv;
            }
        }
        base += len;
    }
    Node n;
    n.op = Op::prefix_mean;
    n.a = a;
    n.ints = std::move(seq_lens);
    return push_node(std::move(n), std::move(out));
}

ValueId Tape::softmax_cross_entropy(ValueId logits, std::vector<int> targets,
                                    std::vector<std::uint8_t> mask) {
    check_id(logits, "softmax_cross_entropy");
    const Matrix& z = val(logits);
    if (static_cast<int>(targets.size()) != z.rows() || static_cast<int>(mask.size()) != z.rows()) {
        throw_error(ErrorKind::shape, "softmax_cross_entropy: targets/mask must have one entry per row");
    }
    const int n_masked = count_mask(mask);
    if (n_masked == 0) {
        throw_error(ErrorKind::contract, "softmax_cross_entropy: empty mask");
    }
    Matrix probs;
    std::vector<real_t> lse;
    masked_softmax_rows(z, mask, probs, lse);
    real_t loss = 0;
    for (int r = 0; r < z.rows(); ++r) {
        if (!mask[static_cast<std::size_t>(r)]) continue;
        const int t = targets[static_cast<std::size_t>(r)];
        if (t < 0 || t >= z.cols()) {
            throw_error(ErrorKind::contract, "softmax_cross_entropy: target out of range");
        }
        loss += lse[static_cast<std::size_t>(r)] - z.at(r, t);
    }
    loss /= static_cast<real_t>(n_masked);
    Node n;
    n.op = Op::softmax_xent;
    n.a = logits;
    n.ints = std::move(targets);
    n.mask = std::move(mask);
    n.aux2 = std::move(probs);
    return push_node(std::move(n), Matrix::scalar(loss));
}

ValueId Tape::soft_cross_entropy(ValueId logits, Matrix target_dist,
                                 std::vector<std::uint8_t> mask) {
    check_id(logits, "soft_cross_entropy");
    const Matrix& z = val(logits);
    if (!target_dist.same_shape(z) || static_cast<int>(mask.size()) != z.rows()) {
        throw_error(ErrorKind::shape, "soft_cross_entropy: target distribution must match logits");
    }
    const int n_masked = count_mask(mask);
    if (n_masked == 0) {
        throw_error(ErrorKind::contract, "soft_cross_entropy: empty mask");
    }
    Matrix probs;
    std::vector<real_t> lse;
    masked_softmax_rows(z, mask, probs, lse);
    real_t loss = 0;
    for (int r = 0; r < z.rows(); ++r) {
        if (!mask[static_cast<std::size_t>(r)]) continue;
        const real_t* p = target_dist.row(r);
        const real_t* zr = z.row(r);
        real_t row_loss = 0;
        for (int v = 0; v < z.cols(); ++v) row_loss += p[v] * (lse[static_cast<std::size_t>(r)] - zr[v]);
        loss += row_loss;
    }
    loss /= static_cast<real_t>(n_masked);
    Node n;
    n.op = Op::soft_xent;
    n.a = logits;
    n.mask = std::move(mask);
    n.aux = std::move(target_dist);
    n.aux2 = std::move(probs);
    return push_node(std::move(n), Matrix::scalar(loss));
}

ValueId Tape::reduce_sum(ValueId a) {
    check_id(a, "reduce_sum");
    Node n;
    n.op = Op::reduce_sum;
    n.a = a;
    return push_node(std::move(n), Matrix::scalar(sum(val(a))));
}

ValueId Tape::squared_fro(ValueId a) {
    check_id(a, "squared_fro");
    Node n;
    n.op = Op::squared_fro;
    n.a = a;
    return push_node(std::move(n), Matrix::scalar(squared_frobenius(val(a))));
}

ValueId Tape::ridge_solve(ValueId d_rows, ValueId u_rows, ValueId lambda) {
    check_id(d_rows, "ridge_solve");
    check_id(u_rows, "ridge_solve");
    check_id(lambda, "ridge_solve");
    const Matrix& drows = val(d_rows);
    const Matrix& urows = val(u_rows);
    const Matrix& lam = val(lambda);
    if (lam.rows() != 1 || lam.cols() != 1) {
        throw_error(ErrorKind::shape, "ridge_solve: lambda must be scalar");
    }
    if (drows.rows() != urows.rows()) {
        throw_error(ErrorKind::shape, "ridge_solve: operand row counts differ");
    }
    RidgeSolution solution = ridge_solve_rows(drows, urows, lam.at(0, 0));
    Node n;
    n.op = Op::ridge_solve;
    n.a = d_rows;
    n.b = u_rows;
    n.c = lambda;
    n.aux = std::move(solution.lower);
    return push_node(std::move(n), std::move(solution.delta));
}

ValueId Tape::exp_scalar(ValueId a) {
    check_id(a, "exp_scalar");
    const Matrix& m = val(a);
    if (m.rows() != 1 || m.cols() != 1) {
        throw_error(ErrorKind::shape, "exp_scalar: operand must be scalar");
    }
    Node n;
    n.op = Op::exp_scalar;
    n.a = a;
    return push_node(std::move(n), Matrix::scalar(std::exp(m.at(0, 0))));
}

const Matrix& Tape::value(ValueId id) const {
    check_id(id, "value");
    return values_[static_cast<std::size_t>(id)];
}

const Matrix& Tape::BackwardResult::grad(ValueId id) const {
    if (!has_grad(id)) {
        throw_error(ErrorKind::contract, "no gradient recorded for value");
    }
    return grads[static_cast<std::size_t>(id)];
}

Tape::BackwardResult Tape::backward(ValueId loss, bool collect_traces) const {
    check_id(loss, "backward");
    const Matrix& loss_val = val(loss);
    if (loss_val.rows() != 1 || loss_val.cols() != 1) {
        throw_error(ErrorKind::contract, "backward: loss must be scalar");
    }
    BackwardResult result;
    result.grads.assign(values_.size(), Matrix());
    result.grads[static_cast<std::size_t>(loss)] = Matrix::scalar(real_t(1));

    auto accumulate = [&](ValueId id, Matrix g) {
        if (id < 0 || !requires_grad(id)) return;
        Matrix& slot = result.grads[static_cast<std::size_t>(id)];
        if (slot.empty()) {
            slot = std::move(g);
        } else {
            slot.add_scaled(g, real_t(1));
        }
    };

    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        const Node& n = *it;
        const Matrix& g = result.grads[static_cast<std::size_t>(n.out)];
        if (g.empty()) {
            if (collect_traces && n.op == Op::linear) {
                const Matrix& in = val(n.b);
                result.traces.push_back(
                    {n.layer_id, in, Matrix(in.rows(), val(n.a).rows())});
            }
            continue;
        }
        switch (n.op) {
            case Op::leaf:
                break;
            case Op::matmul: {
                const Matrix& a = val(n.a);
                const Matrix& b = val(n.b);
                if (requires_grad(n.a)) {
                    Matrix ga = smedit::matmul(g, b, false, !n.trans_b);
                    accumulate(n.a, n.trans_a ? transpose(ga) : std::move(ga));
                }
                if (requires_grad(n.b)) {
                    Matrix gb = smedit::matmul(a, g, !n.trans_a, false);
                    accumulate(n.b, n.trans_b ? transpose(gb) : std::move(gb));
                }
                break;
            }
            case Op::linear: {
                const Matrix& w = val(n.a);
                const Matrix& x = val(n.b);
                if (collect_traces) {
                    result.traces.push_back({n.layer_id, x, g});
                }
                if (requires_grad(n.a)) accumulate(n.a, smedit::matmul(g, x, true, false));
                if (requires_grad(n.b)) accumulate(n.b, smedit::matmul(g, w, false, false));
                break;
            }
            case Op::add:
                accumulate(n.a, g);
                accumulate(n.b, g);
                break;
            case Op::sub:
                accumulate(n.a, g);
                accumulate(n.b, smedit::scale(g, real_t(-1)));
                break;
            case Op::scale:
                accumulate(n.a, smedit::scale(g, n.scalar_arg));
                break;
            case Op::hadamard:
                if (requires_grad(n.a)) accumulate(n.a, smedit::hadamard(g, val(n.b)));
                if (requires_grad(n.b)) accumulate(n.b, smedit::hadamard(g, val(n.a)));
                break;
            case Op::add_row: {
                accumulate(n.a, g);
                if (requires_grad(n.b)) {
                    Matrix gr(1, g.cols());
                    for (int i = 0; i < g.rows(); ++i) {
                        const real_t* grow = g.row(i);
                        for (int j = 0; j < g.cols(); ++j) gr.at(0, j) += grow[j];
                    }
                    accumulate(n.b, std::move(gr));
                }
                break;
            }
            case Op::mul_row: {
                const Matrix& a = val(n.a);
                const Matrix& r = val(n.b);
                if (requires_grad(n.a)) {
                    Matrix ga = g;
                    for (int i = 0; i < ga.rows(); ++i) {
                        real_t* garow = ga.row(i);
                        const real_t* rr = r.row(0);
                        for (int j = 0; j < ga.cols(); ++j) garow[j] *= rr[j];
                    }
                    accumulate(n.a, std::move(ga));
                }
                if (requires_grad(n.b)) {
                    Matrix gr(1, g.cols());
                    for (int i = 0; i < g.rows(); ++i) {
                        const real_t* grow = g.row(i);
                        const real_t* arow = a.row(i);
                        for (int j = 0; j < g.cols(); ++j) gr.at(0, j) += grow[j] * arow[j];
                    }
                    accumulate(n.b, std::move(gr));
                }
                break;
            }
            case Op::scale_rows: {
                const Matrix& a = val(n.a);
                const Matrix& c = val(n.b);
                if (requires_grad(n.a)) {
                    Matrix ga = g;
                    for (int i = 0; i < ga.rows(); ++i) {
                        const real_t s = c.at(i, 0);
                        real_t* garow = ga.row(i);
                        for (int j = 0; j < ga.cols(); ++j) garow[j] *= s;
                    }
                    accumulate(n.a, std::move(ga));
                }
                if (requires_grad(n.b)) {
                    Matrix gc(g.rows(), 1);
                    for (int i = 0; i < g.rows(); ++i) {
                        const real_t* grow = g.row(i);
                        const real_t* arow = a.row(i);
                        real_t acc = 0;
                        for (int j = 0; j < g.cols(); ++j) acc += grow[j] * arow[j];
                        gc.at(i, 0) = acc;
                    }
                    accumulate(n.b, std::move(gc));
                }
                break;
            }
            case Op::row_sum: {
                const Matrix& a = val(n.a);
                Matrix ga(a.rows(), a.cols());
                for (int i = 0; i < a.rows(); ++i) {
                    const real_t gv = g.at(i, 0);
                    real_t* garow = ga.row(i);
                    for (int j = 0; j < a.cols(); ++j) garow[j] = gv;
                }
                accumulate(n.a, std::move(ga));
                break;
            }
            case Op::gelu: {
                const Matrix& a = val(n.a);
                Matrix ga = g;
                real_t* gd = ga.data();
                const real_t* ad = a.data();
                for (std::size_t i = 0; i < ga.size(); ++i) gd[i] *= gelu_derivative(ad[i]);
                accumulate(n.a, std::move(ga));
                break;
            }
            case Op::concat_cols: {
                const int split = n.i0;
                if (requires_grad(n.a)) {
                    Matrix ga(g.rows(), split);
                    for (int i = 0; i < g.rows(); ++i) {
                        const real_t* grow = g.row(i);
                        real_t* garow = ga.row(i);
                        for (int j = 0; j < split; ++j) garow[j] = grow[j];
                    }
                    accumulate(n.a, std::move(ga));
                }
                if (requires_grad(n.b)) {
                    Matrix gb(g.rows(), g.cols() - split);
                    for (int i = 0; i < g.rows(); ++i) {
                        const real_t* grow = g.row(i);
                        real_t* gbrow = gb.row(i);
                        for (int j = split; j < g.cols(); ++j) gbrow[j - split] = grow[j];
                    }
                    accumulate(n.b, std::move(gb));
                }
                break;
            }
            case Op::slice_cols: {
                const Matrix& a = val(n.a);
                Matrix ga(a.rows(), a.cols());
                for (int i = 0; i < a.rows(); ++i) {
                    const real_t* grow = g.row(i);
                    real_t* garow = ga.row(i);
                    for (int j = n.i0; j < n.i1; ++j) garow[j] = grow[j - n.i0];
                }
                accumulate(n.a, std::move(ga));
                break;
            }
            case Op::embed_rows: {
                const Matrix& t = val(n.a);
                Matrix gt(t.rows(), t.cols());
                for (int k = 0; k < g.rows(); ++k) {
                    const int id = n.ints[static_cast<std::size_t>(k)];
                    const real_t* grow = g.row(k);
                    real_t* trow = gt.row(id);
                    for (int j = 0; j < t.cols(); ++j) trow[j] += grow[j];
                }
                accumulate(n.a, std::move(gt));
                break;
            }
            case Op::prefix_mean: {
                const Matrix& a = val(n.a);
                Matrix ga(a.rows(), a.cols());
                int base = 0;
                for (int len : n.ints) {
                    std::vector<real_t> acc(static_cast<std::size_t>(a.cols()), real_t(0));
                    for (int j = len - 1; j >= 0; --j) {
                        const real_t* grow = g.row(base + j);
                        const real_t inv = real_t(1) / real_t(j + 1);
                        real_t* garow = ga.row(base + j);
                        for (int v = 0; v < a.cols(); ++v) {
                            acc[static_cast<std::size_t>(v)] += grow[v] * inv;
                            garow[v] = acc[static_cast<std::size_t>(v)];
                        }
                    }
                    base += len;
                }
                accumulate(n.a, std::move(ga));
                break;
            }
            case Op::softmax_xent: {
                if (!requires_grad(n.a)) break;
                const Matrix& probs = n.aux2;
                const real_t gscale = g.at(0, 0) / static_cast<real_t>(count_mask(n.mask));
                Matrix gz(probs.rows(), probs.cols());
                for (int r = 0; r < probs.rows(); ++r) {
                    if (!n.mask[static_cast<std::size_t>(r)]) continue;
                    const real_t* p = probs.row(r);
                    real_t* grow = gz.row(r);
                    for (int v = 0; v < probs.cols(); ++v) grow[v] = p[v] * gscale;
                    grow[n.ints[static_cast<std::size_t>(r)]] -= gscale;
                }
                accumulate(n.a, std::move(gz));
                break;
            }
            case Op::soft_xent: {
                if (!requires_grad(n.a)) break;
                const Matrix& probs = n.aux2;
                const Matrix& target = n.aux;
                const real_t gscale = g.at(0, 0) / static_cast<real_t>(count_mask(n.mask));
                Matrix gz(probs.rows(), probs.cols());
                for (int r = 0; r < probs.rows(); ++r) {
                    if (!n.mask[static_cast<std::size_t>(r)]) continue;
                    const real_t* p = probs.row(r);
                    const real_t* t = target.row(r);
                    real_t* grow = gz.row(r);
                    for (int v = 0; v < probs.cols(); ++v) grow[v] = (p[v] - t[v]) * gscale;
                }
                accumulate(n.a, std::move(gz));
                break;
            }
            case Op::reduce_sum: {
                const Matrix& a = val(n.a);
                accumulate(n.a, Matrix::filled(a.rows(), a.cols(), g.at(0, 0)));
                break;
            }
            case Op::squared_fro: {
                const Matrix& a = val(n.a);
                accumulate(n.a, smedit::scale(a, real_t(2) * g.at(0, 0)));
                break;
            }
            case Op::ridge_solve: {
                const Matrix& drows = val(n.a);
                const Matrix& urows = val(n.b);
                const Matrix& delta = val(n.out);
                const Matrix& lower = n.aux;
                // H = G A^{-1}
                Matrix h = transpose(cholesky_solve(lower, transpose(g)));
                if (requires_grad(n.a)) {
                    accumulate(n.a, smedit::matmul(urows, h, false, true));
                }
                const bool need_u = requires_grad(n.b);
                const bool need_lam = requires_grad(n.c);
                if (need_u || need_lam) {
                    Matrix c = smedit::scale(smedit::matmul(delta, h, true, false), real_t(-1));
                    if (need_u) {
                        Matrix gu = smedit::matmul(drows, h, false, false);
                        Matrix csym = smedit::add(c, transpose(c));
                        gu.add_scaled(smedit::matmul(urows, csym, false, false), real_t(1));
                        accumulate(n.b, std::move(gu));
                    }
                    if (need_lam) {
                        real_t tr = 0;
                        for (int i = 0; i < c.rows(); ++i) tr += c.at(i, i);
                        accumulate(n.c, Matrix::scalar(tr));
                    }
                }
                break;
            }
            case Op::exp_scalar: {
                accumulate(n.a, Matrix::scalar(g.at(0, 0) * val(n.out).at(0, 0)));
                break;
            }
        }
    }
    std::reverse(result.traces.begin(), result.traces.end());
    return result;
}

Matrix finite_diff_grad(const std::function<real_t(const Matrix&)>& fn, const Matrix& point,
                        real_t eps) {
    if (!(eps > real_t(0))) {
        throw_error(ErrorKind::contract, "finite_diff_grad: eps must be positive");
    }
    Matrix grad(point.rows(), point.cols());
    Matrix probe = point;
    for (int i = 0; i < point.rows(); ++i) {
        for (int j = 0; j < point.cols(); ++j) {
            const real_t saved = probe.at(i, j);
            probe.at(i, j) = saved + eps;
            const real_t up = fn(probe);
            probe.at(i, j) = saved - eps;
            const real_t down = fn(probe);
            probe.at(i, j) = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                throw_error(ErrorKind::numeric, "finite_diff_grad: non-finite function value");
            }
            grad.at(i, j) = (up - down) / (real_t(2) * eps);
        }
    }
    return grad;
}

}  // namespace smedit
