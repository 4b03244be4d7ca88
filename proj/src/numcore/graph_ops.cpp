#include <algorithm>
#include <cmath>
#include <limits>

#include "kvc/autograd.hpp"
#include "kvc/error.hpp"
#include "kvc/kernels.hpp"
#include "kvc/ops.hpp"

namespace kvc::ag {

namespace {

using kernels::Trans;

Graph& graph_of(Var a) {
    if (!a.valid()) {
        throw ContractError("op applied to an empty Var");
    }
    return *a.graph();
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
    }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(op) + ": shapes differ " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    }
}

}  // namespace

Var matmul(Var a, Var b) {
    Graph& g = graph_of(a);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out = kvc::matmul(av, bv);
    const std::size_t ia = a.id();
    const std::size_t ib = b.id();
    return g.record(std::move(out), {a, b}, [ia, ib](Graph& g, std::size_t self) {
        const Tensor& dout = g.grad(self);
        const Tensor& x = g.value(ia);
        const Tensor& w = g.value(ib);
        const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
        if (g.requires_grad(ia)) {
            Tensor& dx = g.grad_buffer(ia);
            kernels::gemm(Trans::No, Trans::Yes, m, k, n, dout.raw(), n, w.raw(), n, dx.raw(), k, true);
        }
        if (g.requires_grad(ib)) {
            Tensor& dw = g.grad_buffer(ib);
            kernels::gemm(Trans::Yes, Trans::No, k, n, m, x.raw(), k, dout.raw(), n, dw.raw(), n, true);
        }
    });
}

Var matmul_nt(Var a, Var b) {
    Graph& g = graph_of(a);
    Tensor out = kvc::matmul_nt(a.value(), b.value());
    const std::size_t ia = a.id();
    const std::size_t ib = b.id();
    return g.record(std::move(out), {a, b}, [ia, ib](Graph& g, std::size_t self) {
        const Tensor& dout = g.grad(self);
        const Tensor& x = g.value(ia);
        const Tensor& w = g.value(ib);
        const std::size_t m = x.rows(), k = x.cols(), n = w.rows();
        if (g.requires_grad(ia)) {
            Tensor& dx = g.grad_buffer(ia);
            kernels::gemm(Trans::No, Trans::No, m, k, n, dout.raw(), n, w.raw(), k, dx.raw(), k, true);
        }
        if (g.requires_grad(ib)) {
            Tensor& dw = g.grad_buffer(ib);
            kernels::gemm(Trans::Yes, Trans::No, n, k, m, dout.raw(), n, x.raw(), k, dw.raw(), k, true);
        }
    });
}

Var add(Var a, Var b) {
    Graph& g = graph_of(a);
    require_same(a.value(), b.value(), "add");
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] += bv[i];
    }
    const std::size_t ia = a.id();
    const std::size_t ib = b.id();
    return g.record(std::move(out), {a, b}, [ia, ib](Graph& g, std::size_t self) {
        const Tensor& dout = g.grad(self);
        for (std::size_t p : {ia, ib}) {
            if (g.requires_grad(p)) {
                kernels::axpy(1.0f, dout.raw(), g.grad_buffer(p).raw(), dout.numel());
            }
        }
    });
}

Var add_row(Var a, Var bias) {
    Graph& g = graph_of(a);
    const Tensor& av = a.value();
    const Tensor& bv = bias.value();
    require_rank2(av, "add_row");
    if (bv.numel() != av.cols()) {
        throw DimensionError("add_row: bias " + shape_string(bv.shape()) + " does not match " +
                             shape_string(av.shape()));
    }
    Tensor out = av;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        kernels::axpy(1.0f, bv.raw(), out.row(r).data(), out.cols());
    }
    const std::size_t ia = a.id();
    const std::size_t ib = bias.id();
    return g.record(std::move(out), {a, bias}, [ia, ib](Graph& g, std::size_t self) {
        const Tensor& dout = g.grad(self);
        if (g.requires_grad(ia)) {
            kernels::axpy(1.0f, dout.raw(), g.grad_buffer(ia).raw(), dout.numel());
        }
        if (g.requires_grad(ib)) {
            Tensor& db = g.grad_buffer(ib);
            for (std::size_t r = 0; r < dout.rows(); ++r) {
                kernels::axpy(1.0f, dout.row(r).data(), db.raw(), dout.cols());
            }
        }
    });
}

Var mul(Var a, Var b) {
    Graph& g = graph_of(a);
    require_same(a.value(), b.value(), "mul");
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] *= bv[i];
    }
    const std::size_t ia = a.id();
    const std::size_t ib = b.id();
    return g.record(std::move(out), {a, b}, [ia, ib](Graph& g, std::size_t self) {
        const Tensor& dout = g.grad(self);
        const Tensor& x = g.value(ia);
        const Tensor& y = g.value(ib);
        if (g.requires_grad(ia)) {
            Tensor& dx = g.grad_buffer(ia);
            for (std::size_t i = 0; i < dout.numel(); ++i) {
                dx[i] += dout[i] * y[i];
            }
        }
        if (g.requires_grad(ib)) {
            Tensor& dy = g.grad_buffer(ib);
            for (std::size_t i = 0; i < dout.numel(); ++i) {
                dy[i] += dout[i] * x[i];
            }
        }
    });
}

Var scale(Var a, float s) {
    Graph& g = graph_of(a);
    Tensor out = a.value();
    for (float& v : out.data()) {
        v *= s;
    }
    const std::size_t ia = a.id();
    return g.record(std::move(out), {a}, [ia, s](Graph& g, std::size_t self) {
        const Tensor& dout = g.grad(self);
        kernels::axpy(s, dout.raw(), g.grad_buffer(ia).raw(), dout.numel());
    });
}

Var sum(Var a) {
    Graph& g = graph_of(a);
    double total = 0.0;
    for (float v : a.value().data()) {
        total += v;
    }
    const std::size_t ia = a.id();
    return g.record(Tensor({1}, static_cast<float>(total)), {a}, [ia](Graph& g, std::size_t self) {
        const float d = g.grad(self)[0];
        for (float& v : g.grad_buffer(ia).data()) {
            v += d;
        }
    });
}

Var gelu(Var a) {
    Graph& g = graph_of(a);
    Tensor out = a.value();
    for (float& v : out.data()) {
        v = kernels::gelu(v);
    }
    const std::size_t ia = a.id();
    return g.record(std::move(out), {a}, [ia](Graph& g, std::size_t self) {
        const Tensor& dout = g.grad(self);
        const Tensor& x = g.value(ia);
        Tensor& dx = g.grad_buffer(ia);
        for (std::size_t i = 0; i < x.numel(); ++i) {
            dx[i] += dout[i] * kernels::gelu_grad(x[i]);
        }
    });
}

Var tanh(Var a) {
    Graph& g = graph_of(a);
    Tensor out = a.value();
    for (float& v : out.data()) {
        v = std::tanh(v);
    }
    const std::size_t ia = a.id();
    return g.record(std::move(out), {a}, [ia](Graph& g, std::size_t self) {
        const Tensor& dout = g.grad(self);
        const Tensor& y = g.value(self);
        Tensor& dx = g.grad_buffer(ia);
        for (std::size_t i = 0; i < y.numel(); ++i) {
            dx[i] += dout[i] * (1.0f - y[i] * y[i]);
        }
    });
}

Var layernorm(Var x, Var gamma, Var beta, float eps) {
    Graph& g = graph_of(x);
    const Tensor& xv = x.value();
    require_rank2(xv, "layernorm");
    const std::size_t rows = xv.rows(), cols = xv.cols();
    if (gamma.value().numel() != cols || beta.value().numel() != cols) {
        throw DimensionError("layernorm: gain/bias length does not match row width");
    }
    Tensor out(xv.shape());
    auto stats = std::make_shared<std::vector<float>>(2 * rows);
    kernels::layernorm_rows(xv.raw(), gamma.value().raw(), beta.value().raw(), out.raw(), rows, cols, eps,
                            stats->data(), stats->data() + rows);
    const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
    return g.record(std::move(out), {x, gamma, beta}, [ix, ig, ib, stats, rows, cols](Graph& g, std::size_t self) {
        const Tensor& dout = g.grad(self);
        const Tensor& xv = g.value(ix);
        const Tensor& gv = g.value(ig);
        const float* mean = stats->data();
        const float* rstd = stats->data() + rows;
        const bool need_x = g.requires_grad(ix);
        float* dg = g.requires_grad(ig) ? g.grad_buffer(ig).raw() : nullptr;
        float* db = g.requires_grad(ib) ? g.grad_buffer(ib).raw() : nullptr;
        float* dx = need_x ? g.grad_buffer(ix).raw() : nullptr;
        std::vector<float> xhat(cols), dxhat(cols);
        for (std::size_t r = 0; r < rows; ++r) {
            const float* xr = xv.raw() + r * cols;
            const float* dy = dout.raw() + r * cols;
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                xhat[c] = (xr[c] - mean[r]) * rstd[r];
                dxhat[c] = dy[c] * gv[c];
                sum_dxhat += dxhat[c];
                sum_dxhat_xhat += static_cast<double>(dxhat[c]) * xhat[c];
                if (dg) {
                    dg[c] += dy[c] * xhat[c];
                }
                if (db) {
                    db[c] += dy[c];
                }
            }
            if (dx) {
                const auto m1 = static_cast<float>(sum_dxhat / static_cast<double>(cols));
                const auto m2 = static_cast<float>(sum_dxhat_xhat / static_cast<double>(cols));
                float* dxr = dx + r * cols;
                for (std::size_t c = 0; c < cols; ++c) {
                    dxr[c] += rstd[r] * (dxhat[c] - m1 - xhat[c] * m2);
                }
            }
        }
    });
}

Var gather_rows(Var table, std::span<const std::int32_t> ids) {
    Graph& g = graph_of(table);
    const Tensor& tv = table.value();
    require_rank2(tv, "gather_rows");
    const std::size_t width = tv.cols();
    Tensor out({ids.size(), width});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
            throw IndexError("token id " + std::to_string(ids[i]) + " outside table of " +
                             std::to_string(tv.rows()) + " rows");
        }
        std::copy_n(tv.raw() + static_cast<std::size_t>(ids[i]) * width, width, out.raw() + i * width);
    }
    const std::size_t it = table.id();
    std::vector<std::int32_t> saved(ids.begin(), ids.end());
    return g.record(std::move(out), {table}, [it, saved = std::move(saved), width](Graph& g, std::size_t self) {
        const Tensor& dout = g.grad(self);
        Tensor& dt = g.grad_buffer(it);
        for (std::size_t i = 0; i < saved.size(); ++i) {
            kernels::axpy(1.0f, dout.raw() + i * width, dt.raw() + static_cast<std::size_t>(saved[i]) * width,
                          width);
        }
    });
}

Var concat_rows(Var a, Var b) {
    Graph& g = graph_of(a);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_rank2(av, "concat_rows");
    require_rank2(bv, "concat_rows");
    if (av.cols() != bv.cols()) {
        throw DimensionError("concat_rows: widths differ");
    }
    Tensor out({av.rows() + bv.rows(), av.cols()});
    std::copy(av.data().begin(), av.data().end(), out.raw());
    std::copy(bv.data().begin(), bv.data().end(), out.raw() + av.numel());
    const std::size_t ia = a.id(), ib = b.id();
    const std::size_t split = av.numel();
    return g.record(std::move(out), {a, b}, [ia, ib, split](Graph& g, std::size_t self) {
        const Tensor& dout = g.grad(self);
        if (g.requires_grad(ia)) {
            kernels::axpy(1.0f, dout.raw(), g.grad_buffer(ia).raw(), split);
        }
        if (g.requires_grad(ib)) {
            kernels::axpy(1.0f, dout.raw() + split, g.grad_buffer(ib).raw(), dout.numel() - split);
        }
    });
}

Var rotary(Var x, std::size_t n_heads, std::span<const std::int32_t> pos_ids, double base) {
    Graph& g = graph_of(x);
    const Tensor& xv = x.value();
    require_rank2(xv, "rotary");
    if (n_heads == 0 || xv.cols() % n_heads != 0) {
        throw ConfigError("rotary: width not divisible by head count");
    }
    const std::size_t d_head = xv.cols() / n_heads;
    if (d_head % 2 != 0) {
        throw ConfigError("rotary: head dimension must be even");
    }
    if (pos_ids.size() != xv.rows()) {
        throw DimensionError("rotary: one position id per row required");
    }
    Tensor out = xv;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        kernels::rotary_row(out.row(r).data(), n_heads, d_head, pos_ids[r], base, 1);
    }
    const std::size_t ix = x.id();
    std::vector<std::int32_t> saved(pos_ids.begin(), pos_ids.end());
    return g.record(std::move(out), {x}, [ix, n_heads, d_head, base, saved = std::move(saved)](Graph& g, std::size_t self) {
        Tensor d = g.grad(self);
        for (std::size_t r = 0; r < d.rows(); ++r) {
            kernels::rotary_row(d.row(r).data(), n_heads, d_head, saved[r], base, -1);
        }
        kernels::axpy(1.0f, d.raw(), g.grad_buffer(ix).raw(), d.numel());
    });
}

Var softmax_masked(Var logits, std::span<const std::uint8_t> mask) {
    Graph& g = graph_of(logits);
    Tensor out = kvc::softmax_masked(logits.value().data(), mask);
    const std::size_t il = logits.id();
    return g.record(std::move(out), {logits}, [il](Graph& g, std::size_t self) {
        const Tensor& dout = g.grad(self);
        const Tensor& y = g.value(self);
        double inner = 0.0;
        for (std::size_t i = 0; i < y.numel(); ++i) {
            inner += static_cast<double>(dout[i]) * y[i];
        }
        Tensor& dx = g.grad_buffer(il);
        for (std::size_t i = 0; i < y.numel(); ++i) {
            dx[i] += y[i] * (dout[i] - static_cast<float>(inner));
        }
    });
}

Var attention(Var q, Var k, Var v, std::size_t n_heads, std::shared_ptr<const AttentionLayout> layout) {
    Graph& g = graph_of(q);
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    require_rank2(qv, "attention");
    require_same(qv, kv, "attention q/k");
    require_same(qv, vv, "attention q/v");
    const std::size_t width = qv.cols();
    if (n_heads == 0 || width % n_heads != 0) {
        throw ConfigError("attention: width not divisible by head count");
    }
    if (!layout || layout->offsets.size() != layout->masks.size() + 1 || layout->total_rows() != qv.rows()) {
        throw DimensionError("attention: packing layout does not cover the activations");
    }
    const std::size_t d_head = width / n_heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(d_head));

    // Probabilities per (sequence, head), kept for the backward pass.
    std::size_t prob_size = 0;
    std::vector<std::size_t> prob_offset(layout->sequences());
    for (std::size_t s = 0; s < layout->sequences(); ++s) {
        const std::size_t n = layout->offsets[s + 1] - layout->offsets[s];
        if (layout->masks[s].size() != n) {
            throw DimensionError("attention: mask size does not match sequence length");
        }
        prob_offset[s] = prob_size;
        prob_size += n_heads * n * n;
    }
    auto probs = std::make_shared<std::vector<float>>(prob_size);

    Tensor out(qv.shape());
    std::vector<float> scores;
    for (std::size_t s = 0; s < layout->sequences(); ++s) {
        const std::size_t base = layout->offsets[s];
        const std::size_t n = layout->offsets[s + 1] - base;
        const AttentionMask& mask = layout->masks[s];
        scores.resize(n * n);
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t col = h * d_head;
            float* p = probs->data() + prob_offset[s] + h * n * n;
            kernels::gemm(Trans::No, Trans::Yes, n, n, d_head, qv.raw() + base * width + col, width,
                          kv.raw() + base * width + col, width, scores.data(), n, false, scale);
            for (std::size_t r = 0; r < n; ++r) {
                if (!kernels::softmax_masked(scores.data() + r * n, mask.row(r), p + r * n, n)) {
                    throw InvalidMaskError("attention: mask row " + std::to_string(r) + " keeps no key");
                }
            }
            kernels::gemm(Trans::No, Trans::No, n, d_head, n, p, n, vv.raw() + base * width + col, width,
                          out.raw() + base * width + col, width);
        }
    }

    const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
    return g.record(std::move(out), {q, k, v},
                    [iq, ik, iv, n_heads, d_head, scale, layout, probs, prob_offset](Graph& g, std::size_t self) {
        const Tensor& dout = g.grad(self);
        const Tensor& qv = g.value(iq);
        const Tensor& kv = g.value(ik);
        const Tensor& vv = g.value(iv);
        const std::size_t width = qv.cols();
        float* dq = g.requires_grad(iq) ? g.grad_buffer(iq).raw() : nullptr;
        float* dk = g.requires_grad(ik) ? g.grad_buffer(ik).raw() : nullptr;
        float* dv = g.requires_grad(iv) ? g.grad_buffer(iv).raw() : nullptr;
        std::vector<float> dp;
        for (std::size_t s = 0; s < layout->sequences(); ++s) {
            const std::size_t base = layout->offsets[s];
            const std::size_t n = layout->offsets[s + 1] - base;
            dp.resize(n * n);
            for (std::size_t h = 0; h < n_heads; ++h) {
                const std::size_t col = h * d_head;
                const float* p = probs->data() + prob_offset[s] + h * n * n;
                const float* go = dout.raw() + base * width + col;
                if (dv) {
                    kernels::gemm(Trans::Yes, Trans::No, n, d_head, n, p, n, go, width, dv + base * width + col,
                                  width, true);
                }
                if (!dq && !dk) {
                    continue;
                }
                kernels::gemm(Trans::No, Trans::Yes, n, n, d_head, go, width, vv.raw() + base * width + col,
                              width, dp.data(), n);
                for (std::size_t r = 0; r < n; ++r) {
                    float* dpr = dp.data() + r * n;
                    const float* pr = p + r * n;
                    double inner = 0.0;
                    for (std::size_t c = 0; c < n; ++c) {
                        inner += static_cast<double>(dpr[c]) * pr[c];
                    }
                    const auto innerf = static_cast<float>(inner);
                    for (std::size_t c = 0; c < n; ++c) {
                        dpr[c] = pr[c] * (dpr[c] - innerf);
                    }
                }
                if (dq) {
                    kernels::gemm(Trans::No, Trans::No, n, d_head, n, dp.data(), n, kv.raw() + base * width + col,
                                  width, dq + base * width + col, width, true, scale);
                }
                if (dk) {
                    kernels::gemm(Trans::Yes, Trans::No, n, d_head, n, dp.data(), n, qv.raw() + base * width + col,
                                  width, dk + base * width + col, width, true, scale);
                }
            }
        }
    });
}

Var cross_entropy(Var logits, std::span<const std::int32_t> labels) {
    Graph& g = graph_of(logits);
    const Tensor& lv = logits.value();
    require_rank2(lv, "cross_entropy");
    if (labels.size() != lv.rows()) {
        throw DimensionError("cross_entropy: one label per row required");
    }
    const std::size_t vocab = lv.cols();
    double total = 0.0;
    std::size_t scored = 0;
    for (std::size_t r = 0; r < lv.rows(); ++r) {
        if (labels[r] == kIgnore) {
            continue;
        }
        total += kvc::cross_entropy(lv.row(r), labels[r]);
        ++scored;
    }
    const double loss = scored ? total / static_cast<double>(scored) : 0.0;
    const std::size_t il = logits.id();
    std::vector<std::int32_t> saved(labels.begin(), labels.end());
    return g.record(Tensor({1}, static_cast<float>(loss)), {logits},
                    [il, saved = std::move(saved), scored, vocab](Graph& g, std::size_t self) {
        if (scored == 0) {
            return;
        }
        const float d = g.grad(self)[0] / static_cast<float>(scored);
        const Tensor& lv = g.value(il);
        Tensor& dl = g.grad_buffer(il);
        for (std::size_t r = 0; r < saved.size(); ++r) {
            if (saved[r] == kIgnore) {
                continue;
            }
            const float* row = lv.raw() + r * vocab;
            float* drow = dl.raw() + r * vocab;
            const double lse = log_sum_exp(lv.row(r));
            for (std::size_t c = 0; c < vocab; ++c) {
                drow[c] += d * static_cast<float>(std::exp(static_cast<double>(row[c]) - lse));
            }
            drow[static_cast<std::size_t>(saved[r])] -= d;
        }
    });
}

}  // namespace kvc::ag
