#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mext/errors.hpp"
#include "mext/kernels.hpp"
#include "mext/tensor.hpp"

namespace mext {

// Handle into a GradTape. Only valid for the tape that produced it.
struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Ops record a closure that scatters the output gradient
// into the input gradients; backward() does a single reverse sweep over the
// recorded ops. A tape can be swept multiple times (once per loss); every
// sweep starts from cleared gradient buffers. Gradients for a value used by
// several ops accumulate additively.
//
// One tape is confined to one thread; distinct tapes are independent.
template <typename T>
class GradTape {
public:
    static constexpr T kMaskValue = T(-1e30);
    static constexpr double kLogClamp = 1e-12;

    // ---------------------------------------------------------------- leaves

    Var leaf(Tensor<T> t, bool requires_grad = false) {
        t.requires_grad = requires_grad;
        return push_value(std::move(t), requires_grad);
    }

    Var constant(Tensor<T> t) { return leaf(std::move(t), false); }

    // Named leaf; backward() reports a gradient entry for every registered
    // param, zero-filled when the sweep never reached it.
    Var param(const std::string& name, const Tensor<T>& t, bool trainable = true) {
        Var v = leaf(t, trainable);
        params_.emplace_back(name, v.id);
        return v;
    }

    // ------------------------------------------------------------------- ops

    Var matmul(Var a, Var b) {
        const Tensor<T>& ta = val(a);
        const Tensor<T>& tb = val(b);
        if (ta.dims() != 2 || tb.dims() != 2 || ta.shape[1] != tb.shape[0])
            throw ShapeError("matmul: " + shape_str(ta.shape) + " x " + shape_str(tb.shape));
        const int64_t m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
        Tensor<T> out(Shape{m, n});
        kernels::matmul_nn(out.data.data(), ta.data.data(), tb.data.data(), m, k, n);
        Var o = push_value(std::move(out), needs(a) || needs(b));
        if (needs_grad_[size_t(o.id)]) {
            push_node(o, [a, b, o, m, k, n](GradTape& tp) {
                const T* dc = tp.grad_buf(o).data();
                if (tp.needs(a))
                    kernels::matmul_nt_acc(tp.acc_buf(a, m * k), dc, tp.val(b).data.data(), m, n, k);
                if (tp.needs(b))
                    kernels::matmul_tn_acc(tp.acc_buf(b, k * n), tp.val(a).data.data(), dc, m, k, n);
            });
        }
        return o;
    }

    Var add(Var a, Var b) {
        const Tensor<T>& ta = val(a);
        const Tensor<T>& tb = val(b);
        if (!ta.same_shape(tb))
            throw ShapeError("add: " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
        Tensor<T> out(ta.shape);
        const int64_t n = ta.numel();
        for (int64_t i = 0; i < n; ++i) out.data[size_t(i)] = ta.data[size_t(i)] + tb.data[size_t(i)];
        Var o = push_value(std::move(out), needs(a) || needs(b));
        if (needs_grad_[size_t(o.id)]) {
            push_node(o, [a, b, o, n](GradTape& tp) {
                const T* d = tp.grad_buf(o).data();
                if (tp.needs(a)) {
                    T* da = tp.acc_buf(a, n);
                    for (int64_t i = 0; i < n; ++i) da[i] += d[i];
                }
                if (tp.needs(b)) {
                    T* db = tp.acc_buf(b, n);
                    for (int64_t i = 0; i < n; ++i) db[i] += d[i];
                }
            });
        }
        return o;
    }

    // x: [m,n], bias: [n] broadcast over rows
    Var add_bias(Var x, Var bias) {
        const Tensor<T>& tx = val(x);
        const Tensor<T>& tb = val(bias);
        if (tx.dims() != 2 || tb.numel() != tx.shape[1])
            throw ShapeError("add_bias: " + shape_str(tx.shape) + " + " + shape_str(tb.shape));
        const int64_t m = tx.shape[0], n = tx.shape[1];
        Tensor<T> out(tx.shape);
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j)
                out.data[size_t(i * n + j)] = tx.data[size_t(i * n + j)] + tb.data[size_t(j)];
        Var o = push_value(std::move(out), needs(x) || needs(bias));
        if (needs_grad_[size_t(o.id)]) {
            push_node(o, [x, bias, o, m, n](GradTape& tp) {
                const T* d = tp.grad_buf(o).data();
                if (tp.needs(x)) {
                    T* dx = tp.acc_buf(x, m * n);
                    for (int64_t i = 0; i < m * n; ++i) dx[i] += d[i];
                }
                if (tp.needs(bias)) {
                    T* db = tp.acc_buf(bias, n);
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t j = 0; j < n; ++j) db[j] += d[i * n + j];
                }
            });
        }
        return o;
    }

    Var mul(Var a, Var b) {
        const Tensor<T>& ta = val(a);
        const Tensor<T>& tb = val(b);
        if (!ta.same_shape(tb))
            throw ShapeError("mul: " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
        Tensor<T> out(ta.shape);
        const int64_t n = ta.numel();
        for (int64_t i = 0; i < n; ++i) out.data[size_t(i)] = ta.data[size_t(i)] * tb.data[size_t(i)];
        Var o = push_value(std::move(out), needs(a) || needs(b));
        if (needs_grad_[size_t(o.id)]) {
            push_node(o, [a, b, o, n](GradTape& tp) {
                const T* d = tp.grad_buf(o).data();
                if (tp.needs(a)) {
                    T* da = tp.acc_buf(a, n);
                    const T* vb = tp.val(b).data.data();
                    for (int64_t i = 0; i < n; ++i) da[i] += d[i] * vb[i];
                }
                if (tp.needs(b)) {
                    T* db = tp.acc_buf(b, n);
                    const T* va = tp.val(a).data.data();
                    for (int64_t i = 0; i < n; ++i) db[i] += d[i] * va[i];
                }
            });
        }
        return o;
    }

    Var scale(Var x, T c) {
        const Tensor<T>& tx = val(x);
        Tensor<T> out(tx.shape);
        const int64_t n = tx.numel();
        for (int64_t i = 0; i < n; ++i) out.data[size_t(i)] = tx.data[size_t(i)] * c;
        Var o = push_value(std::move(out), needs(x));
        if (needs_grad_[size_t(o.id)]) {
            push_node(o, [x, o, c, n](GradTape& tp) {
                const T* d = tp.grad_buf(o).data();
                T* dx = tp.acc_buf(x, n);
                for (int64_t i = 0; i < n; ++i) dx[i] += c * d[i];
            });
        }
        return o;
    }

    // per-row normalization to mean 0 / variance 1, then affine gain/bias
    Var layernorm(Var x, Var gain, Var bias, T eps) {
        const Tensor<T>& tx = val(x);
        if (tx.dims() != 2) throw ShapeError("layernorm: expected 2-d input");
        const int64_t m = tx.shape[0], n = tx.shape[1];
        if (val(gain).numel() != n || val(bias).numel() != n)
            throw ShapeError("layernorm: gain/bias length mismatch");
        Tensor<T> out(tx.shape);
        std::vector<T> xhat(size_t(m * n));
        std::vector<T> rstd(size_t(m), T(0));
        const T* g = val(gain).data.data();
        const T* b = val(bias).data.data();
        for (int64_t i = 0; i < m; ++i) {
            const T* xi = tx.data.data() + i * n;
            T mu = 0;
            for (int64_t j = 0; j < n; ++j) mu += xi[j];
            mu /= T(n);
            T var = 0;
            for (int64_t j = 0; j < n; ++j) {
                const T dlt = xi[j] - mu;
                var += dlt * dlt;
            }
            var /= T(n);
            const T rs = T(1) / std::sqrt(var + eps);
            rstd[size_t(i)] = rs;
            T* xh = xhat.data() + i * n;
            T* oi = out.data.data() + i * n;
            for (int64_t j = 0; j < n; ++j) {
                xh[j] = (xi[j] - mu) * rs;
                oi[j] = xh[j] * g[j] + b[j];
            }
        }
        Var o = push_value(std::move(out), needs(x) || needs(gain) || needs(bias));
        if (needs_grad_[size_t(o.id)]) {
            push_node(o, [x, gain, bias, o, m, n, xhat = std::move(xhat),
                          rstd = std::move(rstd)](GradTape& tp) {
                const T* d = tp.grad_buf(o).data();
                const T* g = tp.val(gain).data.data();
                if (tp.needs(gain)) {
                    T* dg = tp.acc_buf(gain, n);
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t j = 0; j < n; ++j) dg[j] += d[i * n + j] * xhat[size_t(i * n + j)];
                }
                if (tp.needs(bias)) {
                    T* db = tp.acc_buf(bias, n);
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t j = 0; j < n; ++j) db[j] += d[i * n + j];
                }
                if (tp.needs(x)) {
                    T* dx = tp.acc_buf(x, m * n);
                    for (int64_t i = 0; i < m; ++i) {
                        const T* di = d + i * n;
                        const T* xh = xhat.data() + i * n;
                        T mean_dxhat = 0, mean_dxhat_xhat = 0;
                        for (int64_t j = 0; j < n; ++j) {
                            const T dxh = di[j] * g[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xh[j];
                        }
                        mean_dxhat /= T(n);
                        mean_dxhat_xhat /= T(n);
                        const T rs = rstd[size_t(i)];
                        for (int64_t j = 0; j < n; ++j) {
                            const T dxh = di[j] * g[j];
                            dx[i * n + j] += rs * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                        }
                    }
                }
            });
        }
        return o;
    }

    Var gelu(Var x) {
        const Tensor<T>& tx = val(x);
        Tensor<T> out(tx.shape);
        const int64_t n = tx.numel();
        for (int64_t i = 0; i < n; ++i) out.data[size_t(i)] = kernels::gelu(tx.data[size_t(i)]);
        Var o = push_value(std::move(out), needs(x));
        if (needs_grad_[size_t(o.id)]) {
            push_node(o, [x, o, n](GradTape& tp) {
                const T* d = tp.grad_buf(o).data();
                const T* vx = tp.val(x).data.data();
                T* dx = tp.acc_buf(x, n);
                for (int64_t i = 0; i < n; ++i) dx[i] += d[i] * kernels::gelu_grad(vx[i]);
            });
        }
        return o;
    }

    // table: [V, h]; out row r copies table row ids[r]
    Var embedding(Var table, const std::vector<int32_t>& ids) {
        const Tensor<T>& tt = val(table);
        if (tt.dims() != 2) throw ShapeError("embedding: table must be 2-d");
        const int64_t v = tt.shape[0], h = tt.shape[1];
        const int64_t rows = int64_t(ids.size());
        Tensor<T> out(Shape{rows, h});
        for (int64_t r = 0; r < rows; ++r) {
            const int32_t id = ids[size_t(r)];
            if (id < 0 || int64_t(id) >= v)
                throw DataError("embedding: id " + std::to_string(id) + " out of range [0," +
                                std::to_string(v) + ")");
            const T* src = tt.data.data() + int64_t(id) * h;
            T* dst = out.data.data() + r * h;
            for (int64_t j = 0; j < h; ++j) dst[j] = src[j];
        }
        Var o = push_value(std::move(out), needs(table));
        if (needs_grad_[size_t(o.id)]) {
            push_node(o, [table, o, ids, rows, h, v](GradTape& tp) {
                const T* d = tp.grad_buf(o).data();
                T* dt = tp.acc_buf(table, v * h);
                for (int64_t r = 0; r < rows; ++r) {
                    T* dst = dt + int64_t(ids[size_t(r)]) * h;
                    const T* src = d + r * h;
                    for (int64_t j = 0; j < h; ++j) dst[j] += src[j];
                }
            });
        }
        return o;
    }

    Var reshape(Var x, Shape new_shape) {
        const Tensor<T>& tx = val(x);
        if (numel_of(new_shape) != tx.numel())
            throw ShapeError("reshape: numel mismatch " + shape_str(tx.shape) + " -> " +
                             shape_str(new_shape));
        Tensor<T> out(std::move(new_shape), tx.data);
        const int64_t n = tx.numel();
        Var o = push_value(std::move(out), needs(x));
        if (needs_grad_[size_t(o.id)]) {
            push_node(o, [x, o, n](GradTape& tp) {
                const T* d = tp.grad_buf(o).data();
                T* dx = tp.acc_buf(x, n);
                for (int64_t i = 0; i < n; ++i) dx[i] += d[i];
            });
        }
        return o;
    }

    Var transpose(Var x) {
        const Tensor<T>& tx = val(x);
        if (tx.dims() != 2) throw ShapeError("transpose: expected 2-d input");
        const int64_t m = tx.shape[0], n = tx.shape[1];
        Tensor<T> out(Shape{n, m});
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) out.data[size_t(j * m + i)] = tx.data[size_t(i * n + j)];
        Var o = push_value(std::move(out), needs(x));
        if (needs_grad_[size_t(o.id)]) {
            push_node(o, [x, o, m, n](GradTape& tp) {
                const T* d = tp.grad_buf(o).data();
                T* dx = tp.acc_buf(x, m * n);
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < n; ++j) dx[i * n + j] += d[j * m + i];
            });
        }
        return o;
    }

    Var log(Var x) {
        const Tensor<T>& tx = val(x);
        Tensor<T> out(tx.shape);
        const int64_t n = tx.numel();
        for (int64_t i = 0; i < n; ++i) out.data[size_t(i)] = std::log(tx.data[size_t(i)]);
        Var o = push_value(std::move(out), needs(x));
        if (needs_grad_[size_t(o.id)]) {
            push_node(o, [x, o, n](GradTape& tp) {
                const T* d = tp.grad_buf(o).data();
                const T* vx = tp.val(x).data.data();
                T* dx = tp.acc_buf(x, n);
                for (int64_t i = 0; i < n; ++i) dx[i] += d[i] / vx[i];
            });
        }
        return o;
    }

    Var sum(Var x) {
        const Tensor<T>& tx = val(x);
        const int64_t n = tx.numel();
        T s = 0;
        for (int64_t i = 0; i < n; ++i) s += tx.data[size_t(i)];
        Var o = push_value(scalar_tensor(s), needs(x));
        if (needs_grad_[size_t(o.id)]) {
            push_node(o, [x, o, n](GradTape& tp) {
                const T d = tp.grad_buf(o)[0];
                T* dx = tp.acc_buf(x, n);
                for (int64_t i = 0; i < n; ++i) dx[i] += d;
            });
        }
        return o;
    }

    Var mean(Var x) {
        const Tensor<T>& tx = val(x);
        const int64_t n = tx.numel();
        T s = 0;
        for (int64_t i = 0; i < n; ++i) s += tx.data[size_t(i)];
        Var o = push_value(scalar_tensor(s / T(n)), needs(x));
        if (needs_grad_[size_t(o.id)]) {
            push_node(o, [x, o, n](GradTape& tp) {
                const T d = tp.grad_buf(o)[0] / T(n);
                T* dx = tp.acc_buf(x, n);
                for (int64_t i = 0; i < n; ++i) dx[i] += d;
            });
        }
        return o;
    }

    Var softmax_rows(Var x) {
        const Tensor<T>& tx = val(x);
        if (tx.dims() != 2) throw ShapeError("softmax_rows: expected 2-d input");
        const int64_t m = tx.shape[0], n = tx.shape[1];
        Tensor<T> out = tx;
        kernels::softmax_rows(out.data.data(), m, n);
        Var o = push_value(std::move(out), needs(x));
        if (needs_grad_[size_t(o.id)]) {
            push_node(o, [x, o, m, n](GradTape& tp) {
                const T* d = tp.grad_buf(o).data();
                const T* p = tp.val(o).data.data();
                T* dx = tp.acc_buf(x, m * n);
                for (int64_t i = 0; i < m; ++i) {
                    const T* di = d + i * n;
                    const T* pi = p + i * n;
                    T row = 0;
                    for (int64_t j = 0; j < n; ++j) row += di[j] * pi[j];
                    T* dxi = dx + i * n;
                    for (int64_t j = 0; j < n; ++j) dxi[j] += pi[j] * (di[j] - row);
                }
            });
        }
        return o;
    }

    Var gather_rows(Var x, std::vector<int64_t> rows) {
        const Tensor<T>& tx = val(x);
        if (tx.dims() != 2) throw ShapeError("gather_rows: expected 2-d input");
        const int64_t m = tx.shape[0], n = tx.shape[1];
        const int64_t cnt = int64_t(rows.size());
        Tensor<T> out(Shape{cnt, n});
        for (int64_t r = 0; r < cnt; ++r) {
            const int64_t src = rows[size_t(r)];
            if (src < 0 || src >= m) throw ContractError("gather_rows: row index out of range");
            for (int64_t j = 0; j < n; ++j)
                out.data[size_t(r * n + j)] = tx.data[size_t(src * n + j)];
        }
        Var o = push_value(std::move(out), needs(x));
        if (needs_grad_[size_t(o.id)]) {
            push_node(o, [x, o, rows = std::move(rows), m, n, cnt](GradTape& tp) {
                const T* d = tp.grad_buf(o).data();
                T* dx = tp.acc_buf(x, m * n);
                for (int64_t r = 0; r < cnt; ++r) {
                    T* dst = dx + rows[size_t(r)] * n;
                    const T* src = d + r * n;
                    for (int64_t j = 0; j < n; ++j) dst[j] += src[j];
                }
            });
        }
        return o;
    }

    // Multi-head scaled dot-product attention over a padded batch.
    // q, k, v: [(batch*len), width]; lengths[b] gives the number of real
    // (unpadded) positions in example b; keys at or beyond that are masked.
    Var attention(Var q, Var k, Var v, const std::vector<int32_t>& lengths, int64_t len,
                  int heads) {
        const Tensor<T>& tq = val(q);
        if (tq.dims() != 2 || !tq.same_shape(val(k)) || !tq.same_shape(val(v)))
            throw ShapeError("attention: q/k/v shape mismatch");
        const int64_t width = tq.shape[1];
        if (width % heads != 0) throw ShapeError("attention: width not divisible by heads");
        const int64_t batch = int64_t(lengths.size());
        if (tq.shape[0] != batch * len) throw ShapeError("attention: rows != batch*len");
        const int64_t dh = width / heads;
        const T att_scale = T(1) / std::sqrt(T(dh));

        Tensor<T> out(tq.shape);
        std::vector<T> probs(size_t(batch * heads * len * len));
        const T* qd = tq.data.data();
        const T* kd = val(k).data.data();
        const T* vd = val(v).data.data();
        for (int64_t b = 0; b < batch; ++b) {
            const int64_t base = b * len;
            const int64_t valid = std::min<int64_t>(lengths[size_t(b)], len);
            for (int64_t hd = 0; hd < heads; ++hd) {
                const int64_t off = hd * dh;
                T* p = probs.data() + ((b * heads + hd) * len) * len;
                for (int64_t i = 0; i < len; ++i) {
                    T* pi = p + i * len;
                    const T* qi = qd + (base + i) * width + off;
                    for (int64_t j = 0; j < len; ++j)
                        pi[j] = j < valid
                                    ? kernels::dot(qi, kd + (base + j) * width + off, dh) * att_scale
                                    : kMaskValue;
                    kernels::softmax_row(pi, len);
                    T* oi = out.data.data() + (base + i) * width + off;
                    for (int64_t d = 0; d < dh; ++d) oi[d] = 0;
                    for (int64_t j = 0; j < valid; ++j) {
                        const T pij = pi[j];
                        const T* vj = vd + (base + j) * width + off;
                        for (int64_t d = 0; d < dh; ++d) oi[d] += pij * vj[d];
                    }
                }
            }
        }
        Var o = push_value(std::move(out), needs(q) || needs(k) || needs(v));
        if (needs_grad_[size_t(o.id)]) {
            push_node(o, [q, k, v, o, probs = std::move(probs), lengths, len, heads, batch, dh,
                          width, att_scale](GradTape& tp) {
                const T* dout = tp.grad_buf(o).data();
                const T* qd = tp.val(q).data.data();
                const T* kd = tp.val(k).data.data();
                const T* vd = tp.val(v).data.data();
                T* dq = tp.needs(q) ? tp.acc_buf(q, batch * len * width) : nullptr;
                T* dk = tp.needs(k) ? tp.acc_buf(k, batch * len * width) : nullptr;
                T* dv = tp.needs(v) ? tp.acc_buf(v, batch * len * width) : nullptr;
                std::vector<T> ds(size_t(len), T(0));
                for (int64_t b = 0; b < batch; ++b) {
                    const int64_t base = b * len;
                    const int64_t valid = std::min<int64_t>(lengths[size_t(b)], len);
                    for (int64_t hd = 0; hd < heads; ++hd) {
                        const int64_t off = hd * dh;
                        const T* p = probs.data() + ((b * heads + hd) * len) * len;
                        for (int64_t i = 0; i < len; ++i) {
                            const T* pi = p + i * len;
                            const T* doi = dout + (base + i) * width + off;
                            // dP then dS for this query row
                            T dot_dp_p = 0;
                            for (int64_t j = 0; j < valid; ++j) {
                                const T dp = kernels::dot(doi, vd + (base + j) * width + off, dh);
                                ds[size_t(j)] = dp;
                                dot_dp_p += dp * pi[j];
                            }
                            for (int64_t j = 0; j < valid; ++j)
                                ds[size_t(j)] = pi[j] * (ds[size_t(j)] - dot_dp_p) * att_scale;
                            if (dv) {
                                for (int64_t j = 0; j < valid; ++j) {
                                    const T pij = pi[j];
                                    T* dvj = dv + (base + j) * width + off;
                                    for (int64_t d = 0; d < dh; ++d) dvj[d] += pij * doi[d];
                                }
                            }
                            if (dq) {
                                T* dqi = dq + (base + i) * width + off;
                                for (int64_t j = 0; j < valid; ++j) {
                                    const T s = ds[size_t(j)];
                                    const T* kj = kd + (base + j) * width + off;
                                    for (int64_t d = 0; d < dh; ++d) dqi[d] += s * kj[d];
                                }
                            }
                            if (dk) {
                                const T* qi = qd + (base + i) * width + off;
                                for (int64_t j = 0; j < valid; ++j) {
                                    const T s = ds[size_t(j)];
                                    T* dkj = dk + (base + j) * width + off;
                                    for (int64_t d = 0; d < dh; ++d) dkj[d] += s * qi[d];
                                }
                            }
                        }
                    }
                }
            });
        }
        return o;
    }

    // Mean cross-entropy over the batch, natural log, fused with softmax.
    Var cross_entropy(Var logits, const std::vector<int32_t>& labels) {
        const Tensor<T>& tl = val(logits);
        if (tl.dims() != 2) throw ShapeError("cross_entropy: expected 2-d logits");
        const int64_t m = tl.shape[0], c = tl.shape[1];
        if (int64_t(labels.size()) != m) throw ShapeError("cross_entropy: labels length mismatch");
        std::vector<T> probs(tl.data);
        T loss = 0;
        for (int64_t i = 0; i < m; ++i) {
            const int32_t y = labels[size_t(i)];
            if (y < 0 || int64_t(y) >= c)
                throw DataError("cross_entropy: label " + std::to_string(y) + " out of range [0," +
                                std::to_string(c) + ")");
            T* row = probs.data() + i * c;
            const T mx = *std::max_element(row, row + c);
            T sum = 0;
            for (int64_t j = 0; j < c; ++j) {
                row[j] = std::exp(row[j] - mx);
                sum += row[j];
            }
            const T inv = T(1) / sum;
            for (int64_t j = 0; j < c; ++j) row[j] *= inv;
            loss += std::log(sum) + mx - tl.data[size_t(i * c + y)];
        }
        Var o = push_value(scalar_tensor(loss / T(m)), needs(logits));
        if (needs_grad_[size_t(o.id)]) {
            push_node(o, [logits, o, probs = std::move(probs), labels, m, c](GradTape& tp) {
                const T up = tp.grad_buf(o)[0] / T(m);
                T* dl = tp.acc_buf(logits, m * c);
                for (int64_t i = 0; i < m; ++i) {
                    const T* pi = probs.data() + i * c;
                    T* di = dl + i * c;
                    for (int64_t j = 0; j < c; ++j) di[j] += up * pi[j];
                    di[labels[size_t(i)]] -= up;
                }
            });
        }
        return o;
    }

    // Mean KL(teacher || student) at temperature temp; the teacher side is a
    // constant in the backward pass, so distillation never pushes on the
    // parameters that produced the teacher logits.
    Var kld(Var teacher_logits, Var student_logits, T temp) {
        const Tensor<T>& tt = val(teacher_logits);
        const Tensor<T>& ts = val(student_logits);
        if (!tt.same_shape(ts) || tt.dims() != 2) throw ShapeError("kld: logit shape mismatch");
        if (!(temp > T(0))) throw ConfigError("kld: temperature must be > 0");
        const int64_t m = tt.shape[0], c = tt.shape[1];
        std::vector<T> pt(tt.data), ps(ts.data);
        const T inv_temp = T(1) / temp;
        for (int64_t i = 0; i < m * c; ++i) {
            pt[size_t(i)] *= inv_temp;
            ps[size_t(i)] *= inv_temp;
        }
        kernels::softmax_rows(pt.data(), m, c);
        kernels::softmax_rows(ps.data(), m, c);
        T loss = 0;
        for (int64_t i = 0; i < m * c; ++i) {
            const T p = pt[size_t(i)];
            loss += p * (std::log(std::max(p, T(kLogClamp))) -
                         std::log(std::max(ps[size_t(i)], T(kLogClamp))));
        }
        Var o = push_value(scalar_tensor(loss / T(m)), needs(student_logits));
        if (needs_grad_[size_t(o.id)]) {
            push_node(o, [student_logits, o, pt = std::move(pt), ps = std::move(ps), m, c,
                          inv_temp](GradTape& tp) {
                const T up = tp.grad_buf(o)[0] * inv_temp / T(m);
                T* dl = tp.acc_buf(student_logits, m * c);
                for (int64_t i = 0; i < m * c; ++i)
                    dl[i] += up * (ps[size_t(i)] - pt[size_t(i)]);
            });
        }
        return o;
    }

    Var detach(Var x) { return leaf(val(x), false); }

    // -------------------------------------------------------------- backward

    // Single reverse sweep from a scalar loss. Returns d loss / d param for
    // every registered param; params the sweep never reached map to zeros.
    std::map<std::string, Tensor<T>> backward(Var loss) {
        backward_into(loss);
        std::map<std::string, Tensor<T>> out;
        for (const auto& [name, id] : params_) out.emplace(name, grad(Var{id}));
        return out;
    }

    void backward_into(Var loss) {
        if (val(loss).numel() != 1)
            throw ContractError("backward: loss must be scalar, got " +
                                shape_str(val(loss).shape));
        if (!needs_grad_[size_t(loss.id)])
            throw ContractError("backward: loss is not connected to any tracked parameter");
        grads_.resize(values_.size());
        touched_.assign(values_.size(), 0);
        grad_buf_raw(loss).assign(1, T(1));
        touched_[size_t(loss.id)] = 1;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->out > loss.id) continue;  // recorded after this loss
            if (!touched_[size_t(it->out)]) continue;
            it->backward(*this);
        }
    }

    const Tensor<T>& val(Var v) const { return values_[size_t(v.id)]; }

    Tensor<T> grad(Var v) const {
        const Tensor<T>& t = values_[size_t(v.id)];
        if (size_t(v.id) < touched_.size() && touched_[size_t(v.id)]) {
            Tensor<T> g(t.shape);
            g.data = grads_[size_t(v.id)];
            return g;
        }
        return zeros<T>(t.shape);
    }

    bool needs(Var v) const { return needs_grad_[size_t(v.id)]; }
    size_t num_values() const { return values_.size(); }
    size_t num_ops() const { return nodes_.size(); }
    const std::vector<std::pair<std::string, int32_t>>& registered_params() const {
        return params_;
    }

    // gradient buffer accessors used by op closures
    std::vector<T>& grad_buf(Var v) { return grads_[size_t(v.id)]; }
    T* acc_buf(Var v, int64_t n) {
        std::vector<T>& g = grad_buf_raw(v);
        if (!touched_[size_t(v.id)]) {
            g.assign(size_t(n), T(0));
            touched_[size_t(v.id)] = 1;
        }
        return g.data();
    }

private:
    struct Node {
        int32_t out;
        std::function<void(GradTape&)> backward;
    };

    Var push_value(Tensor<T> t, bool tracked) {
        values_.push_back(std::move(t));
        needs_grad_.push_back(tracked ? 1 : 0);
        return Var{int32_t(values_.size() - 1)};
    }

    template <typename F>
    void push_node(Var out, F&& fn) {
        nodes_.push_back(Node{out.id, std::forward<F>(fn)});
    }

    std::vector<T>& grad_buf_raw(Var v) {
        if (grads_.size() < values_.size()) grads_.resize(values_.size());
        return grads_[size_t(v.id)];
    }

    std::vector<Tensor<T>> values_;
    std::vector<std::vector<T>> grads_;
    std::vector<char> touched_;
    std::vector<char> needs_grad_;
    std::vector<Node> nodes_;
    std::vector<std::pair<std::string, int32_t>> params_;
};

}  // namespace mext
