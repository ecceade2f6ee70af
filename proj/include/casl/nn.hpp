#pragma once

// Trainable building blocks. Gradients are hand-derived per layer and the
// grad_check harness certifies every composite loss in the test suites.
// Forward passes are const; backward passes accumulate into caller-owned
// gradient structs so minibatch shards can work independently.

#include <functional>
#include <string>
#include <vector>

#include "casl/core.hpp"
#include "casl/rng.hpp"

namespace casl {

// ----------------------------- affine -----------------------------

/// y[i,:] = W x[i,:] (+ b). x is [N,Din], W is [Dout,Din], b is [Dout].
inline Array affine_forward(const Array& x, const Array& w, const Array* b = nullptr) {
    if (x.shape.size() != 2 || w.shape.size() != 2)
        throw dim_error("affine_forward: x and W must be 2-D");
    const int n = x.shape[0], din = x.shape[1];
    const int dout = w.shape[0];
    if (w.shape[1] != din)
        throw dim_error("affine_forward: inner extents disagree, x " + shape_str(x.shape) +
                        " vs W " + shape_str(w.shape));
    if (b && (b->shape.size() != 1 || b->shape[0] != dout))
        throw dim_error("affine_forward: bias length mismatch");
    Array y({n, dout});
    for (int i = 0; i < n; ++i) {
        const double* xi = &x.data[static_cast<size_t>(i) * din];
        double* yi = &y.data[static_cast<size_t>(i) * dout];
        for (int j = 0; j < dout; ++j) {
            const double* wj = &w.data[static_cast<size_t>(j) * din];
            double s = b ? b->data[j] : 0.0;
            for (int k = 0; k < din; ++k) s += wj[k] * xi[k];
            yi[j] = s;
        }
    }
    return y;
}

/// Accumulates dW, db and returns dx for the affine map above.
inline Array affine_backward(const Array& x, const Array& w, const Array& dy,
                             Array* dw, Array* db) {
    const int n = x.shape[0], din = x.shape[1], dout = w.shape[0];
    Array dx({n, din});
    for (int i = 0; i < n; ++i) {
        const double* dyi = &dy.data[static_cast<size_t>(i) * dout];
        const double* xi = &x.data[static_cast<size_t>(i) * din];
        double* dxi = &dx.data[static_cast<size_t>(i) * din];
        for (int j = 0; j < dout; ++j) {
            const double g = dyi[j];
            const double* wj = &w.data[static_cast<size_t>(j) * din];
            double* dwj = dw ? &dw->data[static_cast<size_t>(j) * din] : nullptr;
            for (int k = 0; k < din; ++k) {
                dxi[k] += g * wj[k];
                if (dwj) dwj[k] += g * xi[k];
            }
            if (db) db->data[j] += g;
        }
    }
    return dx;
}

// ----------------------------- relu -----------------------------

inline Array relu(const Array& x) {
    Array y = x;
    for (double& v : y.data) v = v > 0.0 ? v : 0.0;
    return y;
}

/// dx = dy masked by the sign of the pre-activation.
inline Array relu_backward(const Array& pre, const Array& dy) {
    if (!pre.same_shape(dy)) throw dim_error("relu_backward: shape mismatch");
    Array dx = dy;
    for (size_t i = 0; i < dx.data.size(); ++i)
        if (pre.data[i] <= 0.0) dx.data[i] = 0.0;
    return dx;
}

// ----------------------------- layer structs -----------------------------

struct Dense {
    Array w; // [out,in]
    Array b; // [out]
    int in = 0, out = 0;

    static Dense init(int in, int out, Rng& rng) {
        Dense d;
        d.in = in;
        d.out = out;
        d.w = Array({out, in});
        d.b = Array({out});
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        rng.fill_uniform(d.w, -bound, bound);
        rng.fill_uniform(d.b, -bound, bound);
        return d;
    }

    static Dense zeros_like(const Dense& d) {
        Dense g;
        g.in = d.in;
        g.out = d.out;
        g.w = Array(d.w.shape);
        g.b = Array(d.b.shape);
        return g;
    }
};

/// 3x3 convolution, padding 1, stride 1 or 2, channel-major [C,H,W] maps.
struct Conv3x3 {
    Array w; // [out_c, in_c, 3, 3]
    Array b; // [out_c]
    int in_c = 0, out_c = 0, stride = 1;

    static Conv3x3 init(int in_c, int out_c, int stride, Rng& rng) {
        Conv3x3 c;
        c.in_c = in_c;
        c.out_c = out_c;
        c.stride = stride;
        c.w = Array({out_c, in_c, 3, 3});
        c.b = Array({out_c});
        const double bound = 1.0 / std::sqrt(static_cast<double>(in_c) * 9.0);
        rng.fill_uniform(c.w, -bound, bound);
        rng.fill_uniform(c.b, -bound, bound);
        return c;
    }

    static Conv3x3 zeros_like(const Conv3x3& c) {
        Conv3x3 g;
        g.in_c = c.in_c;
        g.out_c = c.out_c;
        g.stride = c.stride;
        g.w = Array(c.w.shape);
        g.b = Array(c.b.shape);
        return g;
    }
};

inline int conv_out_extent(int in, int stride) { return (in - 1) / stride + 1; }

inline Array conv_forward(const Conv3x3& c, const Array& x) {
    if (x.shape.size() != 3 || x.shape[0] != c.in_c)
        throw dim_error("conv_forward: expected [in_c,H,W] input");
    const int h = x.shape[1], w = x.shape[2];
    const int oh = conv_out_extent(h, c.stride), ow = conv_out_extent(w, c.stride);
    Array y({c.out_c, oh, ow});
    for (int oc = 0; oc < c.out_c; ++oc) {
        double* yo = &y.data[static_cast<size_t>(oc) * oh * ow];
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                double s = c.b.data[oc];
                const int iy0 = oy * c.stride - 1, ix0 = ox * c.stride - 1;
                for (int ic = 0; ic < c.in_c; ++ic) {
                    const double* xc = &x.data[static_cast<size_t>(ic) * h * w];
                    const double* wk = &c.w.data[((static_cast<size_t>(oc) * c.in_c) + ic) * 9];
                    for (int ky = 0; ky < 3; ++ky) {
                        const int iy = iy0 + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int ix = ix0 + kx;
                            if (ix < 0 || ix >= w) continue;
                            s += wk[ky * 3 + kx] * xc[static_cast<size_t>(iy) * w + ix];
                        }
                    }
                }
                yo[static_cast<size_t>(oy) * ow + ox] = s;
            }
        }
    }
    return y;
}

/// Accumulates parameter gradients (if g) and returns dx.
inline Array conv_backward(const Conv3x3& c, const Array& x, const Array& dy, Conv3x3* g) {
    const int h = x.shape[1], w = x.shape[2];
    const int oh = dy.shape[1], ow = dy.shape[2];
    Array dx(x.shape);
    for (int oc = 0; oc < c.out_c; ++oc) {
        const double* dyo = &dy.data[static_cast<size_t>(oc) * oh * ow];
        if (g) {
            double acc_b = 0.0;
            for (int i = 0; i < oh * ow; ++i) acc_b += dyo[i];
            g->b.data[oc] += acc_b;
        }
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const double gval = dyo[static_cast<size_t>(oy) * ow + ox];
                if (gval == 0.0) continue;
                const int iy0 = oy * c.stride - 1, ix0 = ox * c.stride - 1;
                for (int ic = 0; ic < c.in_c; ++ic) {
                    const double* xc = &x.data[static_cast<size_t>(ic) * h * w];
                    double* dxc = &dx.data[static_cast<size_t>(ic) * h * w];
                    const size_t widx = ((static_cast<size_t>(oc) * c.in_c) + ic) * 9;
                    const double* wk = &c.w.data[widx];
                    double* gw = g ? &g->w.data[widx] : nullptr;
                    for (int ky = 0; ky < 3; ++ky) {
                        const int iy = iy0 + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int ix = ix0 + kx;
                            if (ix < 0 || ix >= w) continue;
                            const size_t xidx = static_cast<size_t>(iy) * w + ix;
                            dxc[xidx] += gval * wk[ky * 3 + kx];
                            if (gw) gw[ky * 3 + kx] += gval * xc[xidx];
                        }
                    }
                }
            }
        }
    }
    return dx;
}

// ----------------------------- nearest-neighbor upsample -----------------------------

inline Array upsample2_forward(const Array& x) {
    if (x.shape.size() != 3) throw dim_error("upsample2: expected [C,H,W]");
    const int cc = x.shape[0], h = x.shape[1], w = x.shape[2];
    Array y({cc, 2 * h, 2 * w});
    for (int ch = 0; ch < cc; ++ch) {
        const double* xc = &x.data[static_cast<size_t>(ch) * h * w];
        double* yc = &y.data[static_cast<size_t>(ch) * 4 * h * w];
        for (int iy = 0; iy < h; ++iy)
            for (int ix = 0; ix < w; ++ix) {
                const double v = xc[static_cast<size_t>(iy) * w + ix];
                double* row0 = &yc[static_cast<size_t>(2 * iy) * 2 * w + 2 * ix];
                double* row1 = row0 + static_cast<size_t>(2) * w;
                row0[0] = v;
                row0[1] = v;
                row1[0] = v;
                row1[1] = v;
            }
    }
    return y;
}

inline Array upsample2_backward(const Array& dy) {
    const int cc = dy.shape[0], h2 = dy.shape[1], w2 = dy.shape[2];
    const int h = h2 / 2, w = w2 / 2;
    Array dx({cc, h, w});
    for (int ch = 0; ch < cc; ++ch) {
        const double* dyc = &dy.data[static_cast<size_t>(ch) * h2 * w2];
        double* dxc = &dx.data[static_cast<size_t>(ch) * h * w];
        for (int iy = 0; iy < h; ++iy)
            for (int ix = 0; ix < w; ++ix) {
                const double* row0 = &dyc[static_cast<size_t>(2 * iy) * w2 + 2 * ix];
                const double* row1 = row0 + static_cast<size_t>(w2);
                dxc[static_cast<size_t>(iy) * w + ix] = row0[0] + row0[1] + row1[0] + row1[1];
            }
    }
    return dx;
}

// ----------------------------- channel concat -----------------------------

inline Array concat_channels(const Array& a, const Array& b) {
    if (a.shape.size() != 3 || b.shape.size() != 3 || a.shape[1] != b.shape[1] || a.shape[2] != b.shape[2])
        throw dim_error("concat_channels: spatial extents disagree");
    Array y({a.shape[0] + b.shape[0], a.shape[1], a.shape[2]});
    std::copy(a.data.begin(), a.data.end(), y.data.begin());
    std::copy(b.data.begin(), b.data.end(), y.data.begin() + a.data.size());
    return y;
}

inline void split_channels(const Array& dy, Array& da, Array& db) {
    std::copy(dy.data.begin(), dy.data.begin() + da.data.size(), da.data.begin());
    std::copy(dy.data.begin() + da.data.size(), dy.data.end(), db.data.begin());
}

// ----------------------------- timestep features -----------------------------

/// Sinusoidal features of an integer timestep, dim must be even.
inline Array time_features(int t, int dim) {
    Array f({dim});
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        f.data[i] = std::sin(t * freq);
        f.data[half + i] = std::cos(t * freq);
    }
    return f;
}

// ----------------------------- ParamStore -----------------------------

/// Non-owning named view over a module's parameters and paired gradients.
struct ParamStore {
    struct Entry {
        std::string name;
        Array* value;
        Array* grad;
    };
    std::vector<Entry> entries;

    void add(const std::string& name, Array& value, Array& grad) {
        if (!value.same_shape(grad))
            throw dim_error("ParamStore: gradient shape differs for " + name);
        for (const auto& e : entries)
            if (e.name == name) throw contract_error("ParamStore: duplicate name " + name);
        entries.push_back({name, &value, &grad});
    }

    void zero_grads() {
        for (auto& e : entries) e.grad->zero();
    }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& e : entries) n += e.value->numel();
        return n;
    }
};

inline void store_add_dense(ParamStore& ps, const std::string& prefix, Dense& v, Dense& g) {
    ps.add(prefix + ".w", v.w, g.w);
    ps.add(prefix + ".b", v.b, g.b);
}

inline void store_add_conv(ParamStore& ps, const std::string& prefix, Conv3x3& v, Conv3x3& g) {
    ps.add(prefix + ".w", v.w, g.w);
    ps.add(prefix + ".b", v.b, g.b);
}

// ----------------------------- Adam -----------------------------

struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t step_count = 0;
    std::vector<std::string> names;
    std::vector<Array> m, v;

    static AdamState init(const ParamStore& ps, double lr) {
        AdamState s;
        s.lr = lr;
        for (const auto& e : ps.entries) {
            s.names.push_back(e.name);
            s.m.emplace_back(e.value->shape);
            s.v.emplace_back(e.value->shape);
        }
        return s;
    }
};

/// Standard Adam with bias correction. Gradients are read, never cleared.
inline void adam_step(ParamStore& ps, AdamState& st) {
    if (ps.entries.size() != st.names.size())
        throw contract_error("adam_step: state does not match store");
    st.step_count += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step_count));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step_count));
    for (size_t p = 0; p < ps.entries.size(); ++p) {
        auto& e = ps.entries[p];
        if (e.name != st.names[p])
            throw contract_error("adam_step: parameter order changed (" + e.name + ")");
        if (!e.grad->same_shape(*e.value))
            throw contract_error("adam_step: missing or mis-shaped gradient for " + e.name);
        Array& m = st.m[p];
        Array& v = st.v[p];
        for (size_t i = 0; i < e.value->data.size(); ++i) {
            const double g = e.grad->data[i];
            m.data[i] = st.beta1 * m.data[i] + (1.0 - st.beta1) * g;
            v.data[i] = st.beta2 * v.data[i] + (1.0 - st.beta2) * g * g;
            const double mhat = m.data[i] / bc1;
            const double vhat = v.data[i] / bc2;
            e.value->data[i] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
        }
    }
}

// ----------------------------- gradient checking -----------------------------

/// loss_with_grads must zero the store's gradients, recompute the loss from
/// the current parameter values and leave analytic gradients behind. Returns
/// the max over parameters of |analytic - central difference| / max(1, |cd|).
inline double grad_check(const std::function<double()>& loss_with_grads,
                         ParamStore& ps, double h_fd) {
    if (!(h_fd >= 1e-7 && h_fd <= 1e-4))
        throw contract_error("grad_check: h_fd must lie in [1e-7, 1e-4]");
    const double base = loss_with_grads();
    if (!std::isfinite(base)) throw numeric_error("grad_check: non-finite loss");
    std::vector<std::vector<double>> analytic;
    analytic.reserve(ps.entries.size());
    for (const auto& e : ps.entries) analytic.push_back(e.grad->data);

    double worst = 0.0;
    for (size_t p = 0; p < ps.entries.size(); ++p) {
        Array& value = *ps.entries[p].value;
        for (size_t i = 0; i < value.data.size(); ++i) {
            const double saved = value.data[i];
            value.data[i] = saved + h_fd;
            const double lp = loss_with_grads();
            value.data[i] = saved - h_fd;
            const double lm = loss_with_grads();
            value.data[i] = saved;
            if (!std::isfinite(lp) || !std::isfinite(lm))
                throw numeric_error("grad_check: non-finite loss during finite differences");
            const double cd = (lp - lm) / (2.0 * h_fd);
            const double rel = std::fabs(analytic[p][i] - cd) / std::max(1.0, std::fabs(cd));
            worst = std::max(worst, rel);
        }
    }
    loss_with_grads(); // restore analytic gradients
    return worst;
}

} // namespace casl
