#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <limits>
#include <span>
#include <vector>

#include "stpil/common.hpp"
#include "stpil/params.hpp"
#include "stpil/rng.hpp"
#include "stpil/tensor.hpp"

namespace stpil {

struct Var {
    std::uint32_t id = 0xffffffffu;
    bool valid() const { return id != 0xffffffffu; }
};

enum class Mode { train, eval };

/// Dynamic reverse-mode tape over dense 1-D/2-D values. One tape records one
/// forward pass (one training instance, or one user's candidate scoring);
/// values live in a flat arena so a pass can be rewound to a saved mark and
/// the storage reused. All arithmetic is double precision.
class Tape {
    static constexpr std::uint32_t kNone = 0xffffffffu;
    static constexpr std::size_t kLeafVal = static_cast<std::size_t>(-1);

    enum class Op : std::uint8_t {
        leaf,
        constant,
        row,
        concat,
        stack,
        slice,
        add,
        scale_const,
        scale_vec,
        dot,
        affine,
        tanh_,
        sigmoid_,
        relu_,
        log_,
        softmax_,
        dropout_,
        masked_mean_,
        mix,
        lstm_seq,
        bce,
    };

    struct Node {
        Op op;
        std::uint32_t rows = 1, cols = 0;
        std::size_t val = kLeafVal;   // offset into values_ (leaves read their store)
        std::uint32_t a = kNone, b = kNone, c = kNone;
        std::uint32_t xin = 0, nin = 0;  // extra-input range for variadic ops
        std::size_t aux = 0;             // offset into aux_
        std::int64_t i0 = 0, i1 = 0;
        double d0 = 0.0;
        std::uint32_t leaf = kNone;  // index into bound store
    };

public:
    struct Mark {
        std::size_t nodes, values, aux, extra;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void bind(ParamStore& store) {
        STPIL_REQUIRE(store_ == nullptr || store_ == &store, "Tape: already bound to a different ParamStore");
        store_ = &store;
    }

    void reset() {
        nodes_.clear();
        values_.clear();
        aux_.clear();
        extra_.clear();
    }

    Mark mark() const { return Mark{nodes_.size(), values_.size(), aux_.size(), extra_.size()}; }

    void rewind(const Mark& m) {
        nodes_.resize(m.nodes);
        values_.resize(m.values);
        aux_.resize(m.aux);
        extra_.resize(m.extra);
    }

    std::size_t node_count() const { return nodes_.size(); }

    // ---- introspection -------------------------------------------------

    std::size_t numel(Var v) const { return n(v).rows * static_cast<std::size_t>(n(v).cols); }
    std::size_t rows(Var v) const { return n(v).rows; }
    std::size_t cols(Var v) const { return n(v).cols; }

    const double* value(Var v) const { return vptr(v.id); }

    double scalar(Var v) const {
        STPIL_REQUIRE(numel(v) == 1, "Tape::scalar: variable has " + std::to_string(numel(v)) + " elements");
        return vptr(v.id)[0];
    }

    std::vector<double> read(Var v) const {
        const double* p = vptr(v.id);
        return std::vector<double>(p, p + numel(v));
    }

    const double* grad(Var v) const {
        const Node& nd = n(v);
        STPIL_REQUIRE(nd.op != Op::leaf, "Tape::grad: read leaf gradients from their store");
        return grads_.data() + nd.val;
    }

    // ---- graph construction --------------------------------------------

    /// Trainable leaf by store index.
    Var param(const ParamStore& store, std::size_t leaf_index) {
        STPIL_REQUIRE(store_ == &store, "Tape::param: tape is not bound to this store");
        const Tensor& t = store[leaf_index].value;
        Node nd;
        nd.op = Op::leaf;
        nd.rows = static_cast<std::uint32_t>(t.rows());
        nd.cols = static_cast<std::uint32_t>(t.cols());
        nd.leaf = static_cast<std::uint32_t>(leaf_index);
        nodes_.push_back(nd);
        return Var{last()};
    }

    Var constant(const Tensor& t) {
        const std::uint32_t id = push(Op::constant, t.rows(), t.cols());
        std::copy(t.v.begin(), t.v.end(), out(id));
        return Var{id};
    }

    Var constant(std::span<const double> xs) {
        const std::uint32_t id = push(Op::constant, 1, xs.size());
        std::copy(xs.begin(), xs.end(), out(id));
        return Var{id};
    }

    Var zeros(std::size_t len) {
        const std::uint32_t id = push(Op::constant, 1, len);
        std::fill_n(out(id), len, 0.0);
        return Var{id};
    }

    /// One row of a matrix (embedding lookup).
    Var row(Var table, std::size_t r) {
        const Node& t = n(table);
        STPIL_REQUIRE(r < t.rows, "Tape::row: index " + std::to_string(r) + " out of range for " +
                                      shape_str(t.rows, t.cols));
        const std::size_t c = t.cols;
        const std::uint32_t id = push(Op::row, 1, c);
        nodes_[id].a = table.id;
        nodes_[id].i0 = static_cast<std::int64_t>(r);
        const double* src = vptr(table.id) + r * c;
        std::copy(src, src + c, out(id));
        return Var{id};
    }

    Var concat(std::span<const Var> parts) {
        STPIL_REQUIRE(!parts.empty(), "Tape::concat: no inputs");
        std::size_t total = 0;
        for (Var p : parts) total += numel(p);
        const std::uint32_t xin = push_extra(parts);
        const std::uint32_t id = push(Op::concat, 1, total);
        nodes_[id].xin = xin;
        nodes_[id].nin = static_cast<std::uint32_t>(parts.size());
        double* dst = out(id);
        for (Var p : parts) {
            const double* src = vptr(p.id);
            dst = std::copy(src, src + numel(p), dst);
        }
        return Var{id};
    }

    Var concat(std::initializer_list<Var> parts) { return concat(std::span<const Var>(parts.begin(), parts.size())); }

    /// Rows (equal-length vectors) stacked into a [k x d] matrix.
    Var stack(std::span<const Var> rows_in) {
        STPIL_REQUIRE(!rows_in.empty(), "Tape::stack: no inputs");
        const std::size_t d = numel(rows_in[0]);
        for (Var r : rows_in)
            STPIL_REQUIRE(numel(r) == d, "Tape::stack: row length mismatch");
        const std::uint32_t xin = push_extra(rows_in);
        const std::uint32_t id = push(Op::stack, rows_in.size(), d);
        nodes_[id].xin = xin;
        nodes_[id].nin = static_cast<std::uint32_t>(rows_in.size());
        double* dst = out(id);
        for (Var r : rows_in) {
            const double* src = vptr(r.id);
            dst = std::copy(src, src + d, dst);
        }
        return Var{id};
    }

    Var slice(Var x, std::size_t offset, std::size_t len) {
        STPIL_REQUIRE(offset + len <= numel(x), "Tape::slice: range out of bounds");
        const std::uint32_t id = push(Op::slice, 1, len);
        nodes_[id].a = x.id;
        nodes_[id].i0 = static_cast<std::int64_t>(offset);
        const double* src = vptr(x.id) + offset;
        std::copy(src, src + len, out(id));
        return Var{id};
    }

    Var add(Var x, Var y) {
        STPIL_REQUIRE(numel(x) == numel(y), "Tape::add: size mismatch " + shape_str(rows(x), cols(x)) + " vs " +
                                                shape_str(rows(y), cols(y)));
        const std::size_t len = numel(x);
        const std::uint32_t id = push(Op::add, n_(x.id).rows, n_(x.id).cols);
        nodes_[id].a = x.id;
        nodes_[id].b = y.id;
        const double* px = vptr(x.id);
        const double* py = vptr(y.id);
        double* dst = out(id);
        for (std::size_t i = 0; i < len; ++i) dst[i] = px[i] + py[i];
        return Var{id};
    }

    Var scale(Var x, double k) {
        const std::size_t len = numel(x);
        const std::uint32_t id = push(Op::scale_const, n_(x.id).rows, n_(x.id).cols);
        nodes_[id].a = x.id;
        nodes_[id].d0 = k;
        const double* px = vptr(x.id);
        double* dst = out(id);
        for (std::size_t i = 0; i < len; ++i) dst[i] = k * px[i];
        return Var{id};
    }

    /// Scalar variable times vector.
    Var scale_by(Var s, Var x) {
        STPIL_REQUIRE(numel(s) == 1, "Tape::scale_by: weight must be scalar");
        const std::size_t len = numel(x);
        const std::uint32_t id = push(Op::scale_vec, 1, len);
        nodes_[id].a = s.id;
        nodes_[id].b = x.id;
        const double w = vptr(s.id)[0];
        const double* px = vptr(x.id);
        double* dst = out(id);
        for (std::size_t i = 0; i < len; ++i) dst[i] = w * px[i];
        return Var{id};
    }

    Var dot(Var x, Var y) {
        STPIL_REQUIRE(numel(x) == numel(y), "Tape::dot: size mismatch");
        const std::size_t len = numel(x);
        const std::uint32_t id = push(Op::dot, 1, 1);
        nodes_[id].a = x.id;
        nodes_[id].b = y.id;
        const double* px = vptr(x.id);
        const double* py = vptr(y.id);
        double acc = 0.0;
        for (std::size_t i = 0; i < len; ++i) acc += px[i] * py[i];
        out(id)[0] = acc;
        return Var{id};
    }

    /// W·x (+ b). W is [m x n], x a length-n vector, b a length-m vector.
    Var affine(Var W, Var x, Var bias = Var{}) {
        const Node& w = n(W);
        const std::size_t m = w.rows, k = w.cols;
        STPIL_REQUIRE(numel(x) == k, "affine: W " + shape_str(m, k) + " incompatible with x " +
                                         shape_str(rows(x), cols(x)));
        if (bias.valid())
            STPIL_REQUIRE(numel(bias) == m, "affine: bias " + shape_str(rows(bias), cols(bias)) +
                                                " incompatible with W " + shape_str(m, k));
        const std::uint32_t id = push(Op::affine, 1, m);
        nodes_[id].a = W.id;
        nodes_[id].b = x.id;
        nodes_[id].c = bias.valid() ? bias.id : kNone;
        const double* pw = vptr(W.id);
        const double* px = vptr(x.id);
        const double* pb = bias.valid() ? vptr(bias.id) : nullptr;
        double* dst = out(id);
        for (std::size_t r = 0; r < m; ++r) {
            const double* wrow = pw + r * k;
            double acc = pb ? pb[r] : 0.0;
            for (std::size_t j = 0; j < k; ++j) acc += wrow[j] * px[j];
            dst[r] = acc;
        }
        return Var{id};
    }

    Var tanh(Var x) { return unary(Op::tanh_, x); }
    Var sigmoid(Var x) { return unary(Op::sigmoid_, x); }
    Var relu(Var x) { return unary(Op::relu_, x); }
    Var log(Var x) { return unary(Op::log_, x); }

    /// Numerically stable softmax (max subtraction).
    Var softmax(Var scores) {
        const std::size_t k = numel(scores);
        STPIL_REQUIRE(k >= 1, "softmax: empty input");
        const std::uint32_t id = push(Op::softmax_, 1, k);
        nodes_[id].a = scores.id;
        const double* px = vptr(scores.id);
        double* dst = out(id);
        double mx = px[0];
        for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, px[i]);
        double sum = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            dst[i] = std::exp(px[i] - mx);
            sum += dst[i];
        }
        for (std::size_t i = 0; i < k; ++i) dst[i] /= sum;
        return Var{id};
    }

    /// Inverted dropout: eval mode and rate 0 are the identity (the input
    /// variable is returned unchanged and no randomness is consumed).
    Var dropout(Var x, double rate, Mode mode, RngState& rng) {
        STPIL_REQUIRE(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0,1), got " + fmt_double(rate));
        if (mode == Mode::eval || rate == 0.0) return x;
        const std::size_t len = numel(x);
        const double keep_scale = 1.0 / (1.0 - rate);
        const std::size_t aux = aux_.size();
        aux_.resize(aux + len);
        for (std::size_t i = 0; i < len; ++i) aux_[aux + i] = rng.next_double() < rate ? 0.0 : keep_scale;
        const std::uint32_t id = push(Op::dropout_, n_(x.id).rows, n_(x.id).cols);
        nodes_[id].a = x.id;
        nodes_[id].aux = aux;
        const double* px = vptr(x.id);
        double* dst = out(id);
        for (std::size_t i = 0; i < len; ++i) dst[i] = px[i] * aux_[aux + i];
        return Var{id};
    }

    /// Mean of the mask-selected rows of a [T x d] matrix; an all-zero mask
    /// yields the zero vector.
    Var masked_mean(Var rows_mat, std::span<const std::uint8_t> mask) {
        const Node& m = n(rows_mat);
        STPIL_REQUIRE(mask.size() == m.rows, "masked_mean: mask length " + std::to_string(mask.size()) +
                                                 " vs matrix " + shape_str(m.rows, m.cols));
        const std::size_t T = m.rows, d = m.cols;
        double count = 0.0;
        const std::size_t aux = aux_.size();
        aux_.resize(aux + T);
        for (std::size_t i = 0; i < T; ++i) {
            STPIL_REQUIRE(mask[i] == 0 || mask[i] == 1, "masked_mean: mask entries must be 0 or 1");
            aux_[aux + i] = static_cast<double>(mask[i]);
            count += mask[i];
        }
        const std::uint32_t id = push(Op::masked_mean_, 1, d);
        nodes_[id].a = rows_mat.id;
        nodes_[id].aux = aux;
        nodes_[id].d0 = count;
        const double* src = vptr(rows_mat.id);
        double* dst = out(id);
        std::fill_n(dst, d, 0.0);
        if (count > 0.0) {
            for (std::size_t i = 0; i < T; ++i) {
                if (aux_[aux + i] == 0.0) continue;
                const double* r = src + i * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += r[j];
            }
            for (std::size_t j = 0; j < d; ++j) dst[j] /= count;
        }
        return Var{id};
    }

    /// Convex/linear mixture sum_j w[j] * rows[j] for equal-length vectors.
    Var mix(Var weights, std::span<const Var> rows_in) {
        STPIL_REQUIRE(numel(weights) == rows_in.size(), "mix: weight count mismatch");
        STPIL_REQUIRE(!rows_in.empty(), "mix: no rows");
        const std::size_t d = numel(rows_in[0]);
        for (Var r : rows_in) STPIL_REQUIRE(numel(r) == d, "mix: row length mismatch");
        std::vector<Var> all;
        all.reserve(rows_in.size() + 1);
        all.push_back(weights);
        all.insert(all.end(), rows_in.begin(), rows_in.end());
        const std::uint32_t xin = push_extra(all);
        const std::uint32_t id = push(Op::mix, 1, d);
        nodes_[id].xin = xin;
        nodes_[id].nin = static_cast<std::uint32_t>(all.size());
        const double* pw = vptr(weights.id);
        double* dst = out(id);
        std::fill_n(dst, d, 0.0);
        for (std::size_t j = 0; j < rows_in.size(); ++j) {
            const double* pr = vptr(rows_in[j].id);
            const double w = pw[j];
            for (std::size_t i = 0; i < d; ++i) dst[i] += w * pr[i];
        }
        return Var{id};
    }

    struct LstmParams {
        Var wx;    // [4h x in]
        Var wh;    // [4h x h]
        Var bias;  // [4h]
    };

    /// Whole-sequence LSTM with cached gates; returns [h_T ; c_T] as one
    /// length-2h vector (slice to take either). Gate order i, f, g, o.
    Var lstm_seq(const LstmParams& p, Var h0, Var c0, std::span<const Var> xs) {
        const Node& wx = n(p.wx);
        const Node& wh = n(p.wh);
        const std::size_t h4 = wx.rows, in = wx.cols;
        STPIL_REQUIRE(h4 % 4 == 0, "lstm: Wx row count must be 4*hidden");
        const std::size_t h = h4 / 4;
        STPIL_REQUIRE(wh.rows == h4 && wh.cols == h,
                      "lstm: Wh " + shape_str(wh.rows, wh.cols) + " incompatible with Wx " + shape_str(h4, in));
        STPIL_REQUIRE(numel(p.bias) == h4, "lstm: bias size mismatch");
        STPIL_REQUIRE(numel(h0) == h && numel(c0) == h,
                      "lstm: state size " + std::to_string(numel(h0)) + "/" + std::to_string(numel(c0)) +
                          " does not match hidden " + std::to_string(h));
        for (Var x : xs)
            STPIL_REQUIRE(numel(x) == in, "lstm: input size " + std::to_string(numel(x)) + " vs expected " +
                                              std::to_string(in));
        const std::size_t T = xs.size();
        STPIL_REQUIRE(T >= 1, "lstm: empty sequence");

        std::vector<Var> all;
        all.reserve(T + 5);
        all.push_back(p.wx);
        all.push_back(p.wh);
        all.push_back(p.bias);
        all.push_back(h0);
        all.push_back(c0);
        all.insert(all.end(), xs.begin(), xs.end());
        const std::uint32_t xin = push_extra(all);

        const std::size_t aux = aux_.size();
        aux_.resize(aux + T * 5 * h);

        const std::uint32_t id = push(Op::lstm_seq, 1, 2 * h);
        nodes_[id].xin = xin;
        nodes_[id].nin = static_cast<std::uint32_t>(all.size());
        nodes_[id].aux = aux;
        nodes_[id].i0 = static_cast<std::int64_t>(T);
        nodes_[id].i1 = static_cast<std::int64_t>(h);

        const double* pwx = vptr(p.wx.id);
        const double* pwh = vptr(p.wh.id);
        const double* pb = vptr(p.bias.id);
        std::vector<double> hv(vptr(h0.id), vptr(h0.id) + h);
        std::vector<double> cv(vptr(c0.id), vptr(c0.id) + h);
        std::vector<double> z(h4);
        for (std::size_t t = 0; t < T; ++t) {
            const double* px = vptr(extra_[xin + 5 + t]);
            for (std::size_t r = 0; r < h4; ++r) {
                const double* wxr = pwx + r * in;
                const double* whr = pwh + r * h;
                double acc = pb[r];
                for (std::size_t j = 0; j < in; ++j) acc += wxr[j] * px[j];
                for (std::size_t j = 0; j < h; ++j) acc += whr[j] * hv[j];
                z[r] = acc;
            }
            double* gate = aux_.data() + aux + t * 5 * h;
            for (std::size_t j = 0; j < h; ++j) {
                const double ig = 1.0 / (1.0 + std::exp(-z[j]));
                const double fg = 1.0 / (1.0 + std::exp(-z[h + j]));
                const double gg = std::tanh(z[2 * h + j]);
                const double og = 1.0 / (1.0 + std::exp(-z[3 * h + j]));
                const double cnew = fg * cv[j] + ig * gg;
                gate[j] = ig;
                gate[h + j] = fg;
                gate[2 * h + j] = gg;
                gate[3 * h + j] = og;
                gate[4 * h + j] = cnew;
                cv[j] = cnew;
                hv[j] = og * std::tanh(cnew);
            }
        }
        double* dst = out(id);
        std::copy(hv.begin(), hv.end(), dst);
        std::copy(cv.begin(), cv.end(), dst + h);
        return Var{id};
    }

    struct LstmOut {
        Var h, c;
    };

    /// Single gated update: sigmoid input/forget/output gates, tanh
    /// candidate and output squashing.
    LstmOut lstm_cell(const LstmParams& p, Var x, Var h_prev, Var c_prev) {
        const Var xs[1] = {x};
        Var hc = lstm_seq(p, h_prev, c_prev, xs);
        const std::size_t h = numel(hc) / 2;
        return {slice(hc, 0, h), slice(hc, h, h)};
    }

    /// Summed binary cross-entropy over candidate probabilities, each
    /// clamped to [1e-12, 1-1e-12].
    Var bce(std::span<const double> labels, std::span<const Var> probs) {
        STPIL_REQUIRE(!probs.empty(), "bce: no candidates");
        STPIL_REQUIRE(labels.size() == probs.size(), "bce: label/probability count mismatch");
        for (Var p : probs) STPIL_REQUIRE(numel(p) == 1, "bce: probabilities must be scalars");
        const std::size_t N = probs.size();
        const std::size_t aux = aux_.size();
        aux_.resize(aux + N);
        std::copy(labels.begin(), labels.end(), aux_.begin() + static_cast<std::ptrdiff_t>(aux));
        const std::uint32_t xin = push_extra(probs);
        const std::uint32_t id = push(Op::bce, 1, 1);
        nodes_[id].xin = xin;
        nodes_[id].nin = static_cast<std::uint32_t>(N);
        nodes_[id].aux = aux;
        double loss = 0.0;
        for (std::size_t i = 0; i < N; ++i) {
            const double p = clamp_prob(vptr(extra_[xin + i])[0]);
            const double y = aux_[aux + i];
            loss -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
        }
        out(id)[0] = loss;
        return Var{id};
    }

    // ---- reverse pass ----------------------------------------------------

    /// Backpropagate from a scalar root, scaling the seed by `scale`, and
    /// accumulate leaf gradients into the bound store's accumulators.
    void backward(Var root, double scale = 1.0) {
        backward_impl(root, scale, [this](std::uint32_t leaf) -> double* {
            STPIL_REQUIRE(store_ != nullptr, "Tape::backward: leaf reached but no ParamStore is bound");
            return (*store_)[leaf].grad.v.data();
        });
    }

    /// Same, accumulating into an external leaf-indexed buffer.
    void backward(Var root, double scale, std::vector<Tensor>& sink) {
        STPIL_REQUIRE(store_ != nullptr && sink.size() == store_->size(),
                      "Tape::backward: sink does not match bound store");
        backward_impl(root, scale, [&sink](std::uint32_t leaf) { return sink[leaf].v.data(); });
    }

    static double clamp_prob(double p) {
        constexpr double eps = 1e-12;
        return std::min(1.0 - eps, std::max(eps, p));
    }

private:
    const Node& n(Var v) const { return nodes_.at(v.id); }
    Node& n_(std::uint32_t id) { return nodes_[id]; }
    std::uint32_t last() const { return static_cast<std::uint32_t>(nodes_.size() - 1); }

    const double* vptr(std::uint32_t id) const {
        const Node& nd = nodes_[id];
        return nd.op == Op::leaf ? (*store_)[nd.leaf].value.v.data() : values_.data() + nd.val;
    }

    double* out(std::uint32_t id) { return values_.data() + nodes_[id].val; }

    std::uint32_t push(Op op, std::size_t rows, std::size_t cols) {
        Node nd;
        nd.op = op;
        nd.rows = static_cast<std::uint32_t>(rows);
        nd.cols = static_cast<std::uint32_t>(cols);
        nd.val = values_.size();
        values_.resize(values_.size() + rows * cols);
        nodes_.push_back(nd);
        return last();
    }

    std::uint32_t push_extra(std::span<const Var> vars) {
        const std::uint32_t ofs = static_cast<std::uint32_t>(extra_.size());
        for (Var v : vars) extra_.push_back(v.id);
        return ofs;
    }

    Var unary(Op op, Var x) {
        const std::size_t len = numel(x);
        const std::uint32_t id = push(op, n_(x.id).rows, n_(x.id).cols);
        nodes_[id].a = x.id;
        const double* px = vptr(x.id);
        double* dst = out(id);
        switch (op) {
            case Op::tanh_:
                for (std::size_t i = 0; i < len; ++i) dst[i] = std::tanh(px[i]);
                break;
            case Op::sigmoid_:
                for (std::size_t i = 0; i < len; ++i) dst[i] = 1.0 / (1.0 + std::exp(-px[i]));
                break;
            case Op::relu_:
                for (std::size_t i = 0; i < len; ++i) dst[i] = px[i] > 0.0 ? px[i] : 0.0;
                break;
            case Op::log_:
                for (std::size_t i = 0; i < len; ++i) dst[i] = std::log(px[i]);
                break;
            default:
                fail("unary: bad op");
        }
        return Var{id};
    }

    template <typename LeafGrad>
    void backward_impl(Var root, double scale, LeafGrad leaf_grad) {
        STPIL_REQUIRE(root.valid() && root.id < nodes_.size(), "backward: invalid root");
        STPIL_REQUIRE(numel(root) == 1, "backward: root must be scalar, has " + std::to_string(numel(root)) +
                                            " elements");
        grads_.assign(values_.size(), 0.0);
        grads_[nodes_[root.id].val] = scale;

        auto gptr = [this, &leaf_grad](std::uint32_t id) -> double* {
            Node& nd = nodes_[id];
            return nd.op == Op::leaf ? leaf_grad(nd.leaf) : grads_.data() + nd.val;
        };

        for (std::uint32_t id = root.id + 1; id-- > 0;) {
            Node& nd = nodes_[id];
            if (nd.op == Op::leaf || nd.op == Op::constant) continue;
            const double* g = grads_.data() + nd.val;
            const std::size_t len = nd.rows * static_cast<std::size_t>(nd.cols);
            switch (nd.op) {
                case Op::row: {
                    double* ga = gptr(nd.a) + static_cast<std::size_t>(nd.i0) * nd.cols;
                    for (std::size_t i = 0; i < len; ++i) ga[i] += g[i];
                    break;
                }
                case Op::concat: {
                    std::size_t ofs = 0;
                    for (std::uint32_t k = 0; k < nd.nin; ++k) {
                        const std::uint32_t in = extra_[nd.xin + k];
                        double* gi = gptr(in);
                        const std::size_t ni = nodes_[in].rows * static_cast<std::size_t>(nodes_[in].cols);
                        for (std::size_t i = 0; i < ni; ++i) gi[i] += g[ofs + i];
                        ofs += ni;
                    }
                    break;
                }
                case Op::stack: {
                    const std::size_t d = nd.cols;
                    for (std::uint32_t k = 0; k < nd.nin; ++k) {
                        double* gi = gptr(extra_[nd.xin + k]);
                        for (std::size_t i = 0; i < d; ++i) gi[i] += g[k * d + i];
                    }
                    break;
                }
                case Op::slice: {
                    double* ga = gptr(nd.a) + static_cast<std::size_t>(nd.i0);
                    for (std::size_t i = 0; i < len; ++i) ga[i] += g[i];
                    break;
                }
                case Op::add: {
                    double* ga = gptr(nd.a);
                    double* gb = gptr(nd.b);
                    for (std::size_t i = 0; i < len; ++i) {
                        ga[i] += g[i];
                        gb[i] += g[i];
                    }
                    break;
                }
                case Op::scale_const: {
                    double* ga = gptr(nd.a);
                    for (std::size_t i = 0; i < len; ++i) ga[i] += nd.d0 * g[i];
                    break;
                }
                case Op::scale_vec: {
                    const double w = vptr(nd.a)[0];
                    const double* px = vptr(nd.b);
                    double* ga = gptr(nd.a);
                    double* gb = gptr(nd.b);
                    double acc = 0.0;
                    for (std::size_t i = 0; i < len; ++i) {
                        acc += g[i] * px[i];
                        gb[i] += w * g[i];
                    }
                    ga[0] += acc;
                    break;
                }
                case Op::dot: {
                    const double* px = vptr(nd.a);
                    const double* py = vptr(nd.b);
                    double* ga = gptr(nd.a);
                    double* gb = gptr(nd.b);
                    const std::size_t k = nodes_[nd.a].rows * static_cast<std::size_t>(nodes_[nd.a].cols);
                    const double gs = g[0];
                    for (std::size_t i = 0; i < k; ++i) {
                        ga[i] += gs * py[i];
                        gb[i] += gs * px[i];
                    }
                    break;
                }
                case Op::affine: {
                    const Node& wn = nodes_[nd.a];
                    const std::size_t m = wn.rows, k = wn.cols;
                    const double* pw = vptr(nd.a);
                    const double* px = vptr(nd.b);
                    double* gw = gptr(nd.a);
                    double* gx = gptr(nd.b);
                    for (std::size_t r = 0; r < m; ++r) {
                        const double gr = g[r];
                        if (gr == 0.0) continue;
                        const double* wrow = pw + r * k;
                        double* gwrow = gw + r * k;
                        for (std::size_t j = 0; j < k; ++j) {
                            gwrow[j] += gr * px[j];
                            gx[j] += gr * wrow[j];
                        }
                    }
                    if (nd.c != kNone) {
                        double* gb = gptr(nd.c);
                        for (std::size_t r = 0; r < m; ++r) gb[r] += g[r];
                    }
                    break;
                }
                case Op::tanh_: {
                    const double* y = values_.data() + nd.val;
                    double* ga = gptr(nd.a);
                    for (std::size_t i = 0; i < len; ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    break;
                }
                case Op::sigmoid_: {
                    const double* y = values_.data() + nd.val;
                    double* ga = gptr(nd.a);
                    for (std::size_t i = 0; i < len; ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    break;
                }
                case Op::relu_: {
                    const double* px = vptr(nd.a);
                    double* ga = gptr(nd.a);
                    for (std::size_t i = 0; i < len; ++i) ga[i] += px[i] > 0.0 ? g[i] : 0.0;
                    break;
                }
                case Op::log_: {
                    const double* px = vptr(nd.a);
                    double* ga = gptr(nd.a);
                    for (std::size_t i = 0; i < len; ++i) ga[i] += g[i] / px[i];
                    break;
                }
                case Op::softmax_: {
                    const double* y = values_.data() + nd.val;
                    double* ga = gptr(nd.a);
                    double dotgy = 0.0;
                    for (std::size_t i = 0; i < len; ++i) dotgy += g[i] * y[i];
                    for (std::size_t i = 0; i < len; ++i) ga[i] += y[i] * (g[i] - dotgy);
                    break;
                }
                case Op::dropout_: {
                    const double* f = aux_.data() + nd.aux;
                    double* ga = gptr(nd.a);
                    for (std::size_t i = 0; i < len; ++i) ga[i] += g[i] * f[i];
                    break;
                }
                case Op::masked_mean_: {
                    if (nd.d0 == 0.0) break;
                    const Node& mn = nodes_[nd.a];
                    const std::size_t T = mn.rows, d = mn.cols;
                    const double* mask = aux_.data() + nd.aux;
                    double* ga = gptr(nd.a);
                    const double inv = 1.0 / nd.d0;
                    for (std::size_t i = 0; i < T; ++i) {
                        if (mask[i] == 0.0) continue;
                        double* gr = ga + i * d;
                        for (std::size_t j = 0; j < d; ++j) gr[j] += g[j] * inv;
                    }
                    break;
                }
                case Op::mix: {
                    const std::uint32_t wid = extra_[nd.xin];
                    const double* pw = vptr(wid);
                    double* gw = gptr(wid);
                    for (std::uint32_t k = 1; k < nd.nin; ++k) {
                        const std::uint32_t rid = extra_[nd.xin + k];
                        const double* pr = vptr(rid);
                        double* gr = gptr(rid);
                        const double w = pw[k - 1];
                        double acc = 0.0;
                        for (std::size_t i = 0; i < len; ++i) {
                            acc += g[i] * pr[i];
                            gr[i] += w * g[i];
                        }
                        gw[k - 1] += acc;
                    }
                    break;
                }
                case Op::lstm_seq:
                    backward_lstm(nd, g, gptr);
                    break;
                case Op::bce: {
                    const double gs = g[0];
                    for (std::uint32_t k = 0; k < nd.nin; ++k) {
                        const std::uint32_t pid = extra_[nd.xin + k];
                        const double praw = vptr(pid)[0];
                        constexpr double eps = 1e-12;
                        if (praw < eps || praw > 1.0 - eps) continue;  // clamped: flat
                        const double y = aux_[nd.aux + k];
                        gptr(pid)[0] += gs * (-y / praw + (1.0 - y) / (1.0 - praw));
                    }
                    break;
                }
                case Op::leaf:
                case Op::constant:
                    break;
            }
        }
    }

    template <typename GPtr>
    void backward_lstm(const Node& nd, const double* gout, GPtr& gptr) {
        const std::size_t T = static_cast<std::size_t>(nd.i0);
        const std::size_t h = static_cast<std::size_t>(nd.i1);
        const std::uint32_t wx_id = extra_[nd.xin + 0];
        const std::uint32_t wh_id = extra_[nd.xin + 1];
        const std::uint32_t b_id = extra_[nd.xin + 2];
        const std::uint32_t h0_id = extra_[nd.xin + 3];
        const std::uint32_t c0_id = extra_[nd.xin + 4];
        const std::size_t in = nodes_[wx_id].cols;
        const double* pwx = vptr(wx_id);
        const double* pwh = vptr(wh_id);
        const double* ph0 = vptr(h0_id);
        const double* pc0 = vptr(c0_id);
        double* gwx = gptr(wx_id);
        double* gwh = gptr(wh_id);
        double* gb = gptr(b_id);

        std::vector<double> gh(gout, gout + h);
        std::vector<double> gc(gout + h, gout + 2 * h);
        std::vector<double> dz(4 * h);
        std::vector<double> hprev(h);

        for (std::size_t t = T; t-- > 0;) {
            const double* gate = aux_.data() + nd.aux + t * 5 * h;
            const double* gate_prev = t > 0 ? aux_.data() + nd.aux + (t - 1) * 5 * h : nullptr;
            const double* px = vptr(extra_[nd.xin + 5 + t]);
            for (std::size_t j = 0; j < h; ++j) {
                const double ig = gate[j], fg = gate[h + j], gg = gate[2 * h + j], og = gate[3 * h + j];
                const double ct = gate[4 * h + j];
                const double cprev = t > 0 ? gate_prev[4 * h + j] : pc0[j];
                hprev[j] = t > 0 ? gate_prev[3 * h + j] * std::tanh(cprev) : ph0[j];
                const double tct = std::tanh(ct);
                const double go = gh[j] * tct;
                double gcj = gc[j] + gh[j] * og * (1.0 - tct * tct);
                dz[j] = gcj * gg * ig * (1.0 - ig);
                dz[h + j] = gcj * cprev * fg * (1.0 - fg);
                dz[2 * h + j] = gcj * ig * (1.0 - gg * gg);
                dz[3 * h + j] = go * og * (1.0 - og);
                gc[j] = gcj * fg;
            }
            double* gx = gptr(extra_[nd.xin + 5 + t]);
            std::fill(gh.begin(), gh.end(), 0.0);
            for (std::size_t r = 0; r < 4 * h; ++r) {
                const double d = dz[r];
                gb[r] += d;
                if (d == 0.0) continue;
                const double* wxr = pwx + r * in;
                double* gwxr = gwx + r * in;
                for (std::size_t j = 0; j < in; ++j) {
                    gwxr[j] += d * px[j];
                    gx[j] += d * wxr[j];
                }
                const double* whr = pwh + r * h;
                double* gwhr = gwh + r * h;
                for (std::size_t j = 0; j < h; ++j) {
                    gwhr[j] += d * hprev[j];
                    gh[j] += d * whr[j];
                }
            }
        }
        double* gh0 = gptr(h0_id);
        double* gc0 = gptr(c0_id);
        for (std::size_t j = 0; j < h; ++j) {
            gh0[j] += gh[j];
            gc0[j] += gc[j];
        }
    }

    ParamStore* store_ = nullptr;
    std::vector<Node> nodes_;
    std::vector<double> values_;
    std::vector<double> grads_;
    std::vector<double> aux_;
    std::vector<std::uint32_t> extra_;
};

/// Spec entry point: zero every accumulator in `params`, then backpropagate
/// from the scalar `loss_root` so each leaf's accumulator holds d loss / d leaf.
inline void grads(Tape& tape, Var loss_root, ParamStore& params) {
    params.zero_grads();
    tape.backward(loss_root, 1.0);
}

}  // namespace stpil
