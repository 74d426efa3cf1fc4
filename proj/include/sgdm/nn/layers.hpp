#pragma once

#include <omp.h>

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "sgdm/blas.hpp"
#include "sgdm/rng.hpp"
#include "sgdm/tensor.hpp"

namespace sgdm::nn {

template <typename S>
struct Param {
    std::string name;
    Tensor<S> value;
    Tensor<S> grad;

    void init(std::string n, std::vector<int> shape) {
        name  = std::move(n);
        value = Tensor<S>(shape);
        grad  = Tensor<S>(std::move(shape));
    }
};

// Per-layer activation caches for one in-flight forward/backward pair. Layers
// touch only their own slot, so forward with a local workspace is reentrant.
template <typename S>
struct Workspace {
    std::vector<std::vector<Tensor<S>>> slots;
    bool train = false;
    uint64_t dropout_seed = 0;

    std::vector<Tensor<S>>& at(int id) {
        if (static_cast<int>(slots.size()) <= id) slots.resize(static_cast<size_t>(id) + 1);
        return slots[static_cast<size_t>(id)];
    }
};

// Shared construction context: hands out cache ids and collects parameters.
template <typename S>
struct NetCtx {
    int next_id = 0;
    std::vector<Param<S>*> params;
    Rng init_rng{0};

    int new_id() { return next_id++; }
    void reg(Param<S>& p) { params.push_back(&p); }
};

// Largest power of two <= 32 that divides the channel count.
inline int norm_groups_for(int channels) {
    int g = 32;
    while (g > 1 && channels % g != 0) g /= 2;
    return g;
}

template <typename S>
inline S sigmoid(S x) {
    return S(1) / (S(1) + std::exp(-x));
}

// ---------------------------------------------------------------------------
// Linear: y = x W^T + b over rows.
// ---------------------------------------------------------------------------
template <typename S>
class Linear {
public:
    Linear() = default;

    Linear(NetCtx<S>& ctx, const std::string& name, int in, int out, double init_scale = -1.0) : in_(in), out_(out) {
        id_ = ctx.new_id();
        W_.init(name + ".W", {out, in});
        b_.init(name + ".b", {out});
        Rng r = ctx.init_rng.fork(hash_combine(0x11,
                                               std::hash<std::string>{}(name)));
        double scale = init_scale > 0 ? init_scale : std::sqrt(2.0 / in);
        for (auto& v : W_.value.data) v = static_cast<S>(r.normal() * scale);
        ctx.reg(W_);
        ctx.reg(b_);
    }

    // x: {N,in} -> y: {N,out}
    void forward(const Tensor<S>& x, Tensor<S>& y, Workspace<S>& ws) const {
        int n = x.dim(0);
        y = Tensor<S>({n, out_});
        gemm(false, true, n, out_, in_, S(1), x.ptr(), in_, W_.value.ptr(), in_, S(0), y.ptr(), out_);
        for (int i = 0; i < n; ++i)
            for (int o = 0; o < out_; ++o) y[static_cast<size_t>(i) * out_ + o] += b_.value[static_cast<size_t>(o)];
        ws.at(id_) = {x};
    }

    void backward(const Tensor<S>& dy, Tensor<S>& dx, Workspace<S>& ws) {
        const Tensor<S>& x = ws.at(id_)[0];
        int n = x.dim(0);
        dx = Tensor<S>({n, in_});
        gemm(false, false, n, in_, out_, S(1), dy.ptr(), out_, W_.value.ptr(), in_, S(0), dx.ptr(), in_);
        gemm(true, false, out_, in_, n, S(1), dy.ptr(), out_, x.ptr(), in_, S(1), W_.grad.ptr(), in_);
        for (int i = 0; i < n; ++i)
            for (int o = 0; o < out_; ++o) b_.grad[static_cast<size_t>(o)] += dy[static_cast<size_t>(i) * out_ + o];
    }

    int in() const { return in_; }
    int out() const { return out_; }
    Param<S>& W() { return W_; }
    Param<S>& b() { return b_; }
    const Param<S>& W() const { return W_; }

private:
    int id_ = -1, in_ = 0, out_ = 0;
    Param<S> W_, b_;
};

// ---------------------------------------------------------------------------
// Conv2d, NCHW, square kernel, zero padding. im2col + GEMM per image; the
// weight gradient is accumulated over fixed batch blocks so results do not
// depend on the thread schedule.
// ---------------------------------------------------------------------------
template <typename S>
class Conv2d {
public:
    Conv2d() = default;

    Conv2d(NetCtx<S>& ctx, const std::string& name, int cin, int cout, int ksize, int stride, int pad,
           bool zero_init = false)
        : cin_(cin), cout_(cout), k_(ksize), stride_(stride), pad_(pad) {
        id_ = ctx.new_id();
        W_.init(name + ".W", {cout, cin, k_, k_});
        b_.init(name + ".b", {cout});
        if (!zero_init) {
            Rng r = ctx.init_rng.fork(hash_combine(0x22, std::hash<std::string>{}(name)));
            double scale = std::sqrt(2.0 / (cin * k_ * k_));
            for (auto& v : W_.value.data) v = static_cast<S>(r.normal() * scale);
        }
        ctx.reg(W_);
        ctx.reg(b_);
    }

    int out_size(int in_size) const { return (in_size + 2 * pad_ - k_) / stride_ + 1; }

    void forward(const Tensor<S>& x, Tensor<S>& y, Workspace<S>& ws) const {
        int n = x.dim(0), h = x.dim(2), w = x.dim(3);
        int ho = out_size(h), wo = out_size(w);
        y = Tensor<S>({n, cout_, ho, wo});
        int krows = cin_ * k_ * k_;
        size_t x_img = static_cast<size_t>(cin_) * h * w;
        size_t y_img = static_cast<size_t>(cout_) * ho * wo;
#pragma omp parallel
        {
            std::vector<S> col(static_cast<size_t>(krows) * ho * wo);
#pragma omp for schedule(static)
            for (int i = 0; i < n; ++i) {
                im2col(x.ptr() + static_cast<size_t>(i) * x_img, h, w, col.data());
                gemm(false, false, cout_, ho * wo, krows, S(1), W_.value.ptr(), krows, col.data(), ho * wo, S(0),
                     y.ptr() + static_cast<size_t>(i) * y_img, ho * wo);
                S* yi = y.ptr() + static_cast<size_t>(i) * y_img;
                for (int c = 0; c < cout_; ++c) {
                    S bias = b_.value[static_cast<size_t>(c)];
                    for (int p = 0; p < ho * wo; ++p) yi[static_cast<size_t>(c) * ho * wo + p] += bias;
                }
            }
        }
        ws.at(id_) = {x};
    }

    void backward(const Tensor<S>& dy, Tensor<S>& dx, Workspace<S>& ws) {
        const Tensor<S>& x = ws.at(id_)[0];
        int n = x.dim(0), h = x.dim(2), w = x.dim(3);
        int ho = out_size(h), wo = out_size(w);
        int krows = cin_ * k_ * k_;
        size_t x_img = static_cast<size_t>(cin_) * h * w;
        size_t y_img = static_cast<size_t>(cout_) * ho * wo;
        dx = Tensor<S>(x.shape);

        // input gradient: independent per image
#pragma omp parallel
        {
            std::vector<S> dcol(static_cast<size_t>(krows) * ho * wo);
#pragma omp for schedule(static)
            for (int i = 0; i < n; ++i) {
                gemm(true, false, krows, ho * wo, cout_, S(1), W_.value.ptr(), krows,
                     dy.ptr() + static_cast<size_t>(i) * y_img, ho * wo, S(0), dcol.data(), ho * wo);
                col2im(dcol.data(), h, w, dx.ptr() + static_cast<size_t>(i) * x_img);
            }
        }

        // weight gradient: fixed blocks, reduced in block order
        const int nb = std::min(n, 8);
        std::vector<Tensor<S>> wparts(static_cast<size_t>(nb), Tensor<S>(W_.grad.shape));
        std::vector<Tensor<S>> bparts(static_cast<size_t>(nb), Tensor<S>(b_.grad.shape));
#pragma omp parallel
        {
            std::vector<S> col(static_cast<size_t>(krows) * ho * wo);
#pragma omp for schedule(static)
            for (int blk = 0; blk < nb; ++blk) {
                int lo = blk * n / nb, hi = (blk + 1) * n / nb;
                for (int i = lo; i < hi; ++i) {
                    im2col(x.ptr() + static_cast<size_t>(i) * x_img, h, w, col.data());
                    gemm(false, true, cout_, krows, ho * wo, S(1), dy.ptr() + static_cast<size_t>(i) * y_img, ho * wo,
                         col.data(), ho * wo, S(1), wparts[static_cast<size_t>(blk)].ptr(), krows);
                    const S* dyi = dy.ptr() + static_cast<size_t>(i) * y_img;
                    for (int c = 0; c < cout_; ++c) {
                        S acc = S(0);
                        for (int p = 0; p < ho * wo; ++p) acc += dyi[static_cast<size_t>(c) * ho * wo + p];
                        bparts[static_cast<size_t>(blk)][static_cast<size_t>(c)] += acc;
                    }
                }
            }
        }
        for (int blk = 0; blk < nb; ++blk) {
            for (size_t j = 0; j < W_.grad.numel(); ++j) W_.grad[j] += wparts[static_cast<size_t>(blk)][j];
            for (size_t j = 0; j < b_.grad.numel(); ++j) b_.grad[j] += bparts[static_cast<size_t>(blk)][j];
        }
    }

    Param<S>& W() { return W_; }
    Param<S>& b() { return b_; }

private:
    void im2col(const S* x, int h, int w, S* col) const {
        int ho = out_size(h), wo = out_size(w);
        for (int c = 0; c < cin_; ++c)
            for (int ki = 0; ki < k_; ++ki)
                for (int kj = 0; kj < k_; ++kj) {
                    S* row = col + (static_cast<size_t>(c) * k_ * k_ + static_cast<size_t>(ki) * k_ + kj) *
                                       static_cast<size_t>(ho) * wo;
                    for (int oh = 0; oh < ho; ++oh) {
                        int ih = oh * stride_ - pad_ + ki;
                        if (ih < 0 || ih >= h) {
                            for (int ow = 0; ow < wo; ++ow) row[static_cast<size_t>(oh) * wo + ow] = S(0);
                            continue;
                        }
                        const S* xr = x + (static_cast<size_t>(c) * h + ih) * w;
                        for (int ow = 0; ow < wo; ++ow) {
                            int iw = ow * stride_ - pad_ + kj;
                            row[static_cast<size_t>(oh) * wo + ow] = (iw >= 0 && iw < w) ? xr[iw] : S(0);
                        }
                    }
                }
    }

    void col2im(const S* col, int h, int w, S* dx) const {
        int ho = out_size(h), wo = out_size(w);
        for (int c = 0; c < cin_; ++c)
            for (int ki = 0; ki < k_; ++ki)
                for (int kj = 0; kj < k_; ++kj) {
                    const S* row = col + (static_cast<size_t>(c) * k_ * k_ + static_cast<size_t>(ki) * k_ + kj) *
                                             static_cast<size_t>(ho) * wo;
                    for (int oh = 0; oh < ho; ++oh) {
                        int ih = oh * stride_ - pad_ + ki;
                        if (ih < 0 || ih >= h) continue;
                        S* dxr = dx + (static_cast<size_t>(c) * h + ih) * w;
                        for (int ow = 0; ow < wo; ++ow) {
                            int iw = ow * stride_ - pad_ + kj;
                            if (iw >= 0 && iw < w) dxr[iw] += row[static_cast<size_t>(oh) * wo + ow];
                        }
                    }
                }
    }

    int id_ = -1, cin_ = 0, cout_ = 0, k_ = 3, stride_ = 1, pad_ = 1;
    Param<S> W_, b_;
};

// ---------------------------------------------------------------------------
// GroupNorm with per-channel scale and shift.
// ---------------------------------------------------------------------------
template <typename S>
class GroupNorm {
public:
    GroupNorm() = default;

    GroupNorm(NetCtx<S>& ctx, const std::string& name, int channels) : c_(channels), g_(norm_groups_for(channels)) {
        id_ = ctx.new_id();
        gamma_.init(name + ".gamma", {channels});
        beta_.init(name + ".beta", {channels});
        gamma_.value.fill(S(1));
        ctx.reg(gamma_);
        ctx.reg(beta_);
    }

    void forward(const Tensor<S>& x, Tensor<S>& y, Workspace<S>& ws) const {
        int n = x.dim(0), h = x.dim(2), w = x.dim(3);
        int cpg = c_ / g_;
        size_t m = static_cast<size_t>(cpg) * h * w;
        y = Tensor<S>(x.shape);
        Tensor<S> xhat(x.shape);
        Tensor<S> invstd({n, g_});
#pragma omp parallel for schedule(static)
        for (int i = 0; i < n; ++i) {
            for (int grp = 0; grp < g_; ++grp) {
                const S* xg = x.ptr() + (static_cast<size_t>(i) * c_ + static_cast<size_t>(grp) * cpg) *
                                            static_cast<size_t>(h) * w;
                double mean = 0.0;
                for (size_t j = 0; j < m; ++j) mean += xg[j];
                mean /= static_cast<double>(m);
                double var = 0.0;
                for (size_t j = 0; j < m; ++j) {
                    double d = xg[j] - mean;
                    var += d * d;
                }
                var /= static_cast<double>(m);
                S is = static_cast<S>(1.0 / std::sqrt(var + 1e-5));
                invstd[static_cast<size_t>(i) * g_ + grp] = is;
                size_t base = (static_cast<size_t>(i) * c_ + static_cast<size_t>(grp) * cpg) * h * w;
                for (int cc = 0; cc < cpg; ++cc) {
                    int ch = grp * cpg + cc;
                    S ga = gamma_.value[static_cast<size_t>(ch)], be = beta_.value[static_cast<size_t>(ch)];
                    for (int p = 0; p < h * w; ++p) {
                        size_t idx = base + static_cast<size_t>(cc) * h * w + p;
                        S xh = static_cast<S>((x[idx] - mean)) * is;
                        xhat[idx] = xh;
                        y[idx]    = ga * xh + be;
                    }
                }
            }
        }
        ws.at(id_) = {xhat, invstd};
    }

    void backward(const Tensor<S>& dy, Tensor<S>& dx, Workspace<S>& ws) {
        const Tensor<S>& xhat   = ws.at(id_)[0];
        const Tensor<S>& invstd = ws.at(id_)[1];
        int n = dy.dim(0), h = dy.dim(2), w = dy.dim(3);
        int cpg = c_ / g_;
        size_t m = static_cast<size_t>(cpg) * h * w;
        dx = Tensor<S>(dy.shape);
        Tensor<S> dgam({n, c_}), dbet({n, c_});
#pragma omp parallel for schedule(static)
        for (int i = 0; i < n; ++i) {
            for (int grp = 0; grp < g_; ++grp) {
                size_t base = (static_cast<size_t>(i) * c_ + static_cast<size_t>(grp) * cpg) * h * w;
                double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                for (int cc = 0; cc < cpg; ++cc) {
                    int ch = grp * cpg + cc;
                    S ga = gamma_.value[static_cast<size_t>(ch)];
                    double dg = 0.0, db = 0.0;
                    for (int p = 0; p < h * w; ++p) {
                        size_t idx = base + static_cast<size_t>(cc) * h * w + p;
                        double d = dy[idx];
                        dg += d * xhat[idx];
                        db += d;
                        double dxh = d * ga;
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhat[idx];
                    }
                    dgam[static_cast<size_t>(i) * c_ + ch] = static_cast<S>(dg);
                    dbet[static_cast<size_t>(i) * c_ + ch] = static_cast<S>(db);
                }
                double mean_dxh    = sum_dxh / static_cast<double>(m);
                double mean_dxh_xh = sum_dxh_xh / static_cast<double>(m);
                S is = invstd[static_cast<size_t>(i) * g_ + grp];
                for (int cc = 0; cc < cpg; ++cc) {
                    int ch = grp * cpg + cc;
                    S ga = gamma_.value[static_cast<size_t>(ch)];
                    for (int p = 0; p < h * w; ++p) {
                        size_t idx = base + static_cast<size_t>(cc) * h * w + p;
                        double dxh = static_cast<double>(dy[idx]) * ga;
                        dx[idx] = static_cast<S>((dxh - mean_dxh - xhat[idx] * mean_dxh_xh) * is);
                    }
                }
            }
        }
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c_; ++ch) {
                gamma_.grad[static_cast<size_t>(ch)] += dgam[static_cast<size_t>(i) * c_ + ch];
                beta_.grad[static_cast<size_t>(ch)] += dbet[static_cast<size_t>(i) * c_ + ch];
            }
    }

    Param<S>& gamma() { return gamma_; }
    Param<S>& beta() { return beta_; }

private:
    int id_ = -1, c_ = 0, g_ = 1;
    Param<S> gamma_, beta_;
};

// ---------------------------------------------------------------------------
// SiLU activation.
// ---------------------------------------------------------------------------
template <typename S>
class SiLU {
public:
    SiLU() = default;
    explicit SiLU(NetCtx<S>& ctx) { id_ = ctx.new_id(); }

    void forward(const Tensor<S>& x, Tensor<S>& y, Workspace<S>& ws) const {
        y = Tensor<S>(x.shape);
        for (size_t i = 0; i < x.numel(); ++i) y[i] = x[i] * sigmoid(x[i]);
        ws.at(id_) = {x};
    }

    void backward(const Tensor<S>& dy, Tensor<S>& dx, Workspace<S>& ws) {
        const Tensor<S>& x = ws.at(id_)[0];
        dx = Tensor<S>(x.shape);
        for (size_t i = 0; i < x.numel(); ++i) {
            S s = sigmoid(x[i]);
            dx[i] = dy[i] * s * (S(1) + x[i] * (S(1) - s));
        }
    }

private:
    int id_ = -1;
};

// ---------------------------------------------------------------------------
// Inverted dropout; active only in training mode.
// ---------------------------------------------------------------------------
template <typename S>
class Dropout {
public:
    Dropout() = default;
    Dropout(NetCtx<S>& ctx, double p) : p_(p) { id_ = ctx.new_id(); }

    void forward(const Tensor<S>& x, Tensor<S>& y, Workspace<S>& ws) const {
        if (!ws.train || p_ <= 0.0) {
            y = x;
            ws.at(id_) = {};
            return;
        }
        Rng r(hash_combine(ws.dropout_seed, static_cast<uint64_t>(id_)));
        Tensor<S> mask(x.shape);
        S keep = static_cast<S>(1.0 / (1.0 - p_));
        for (size_t i = 0; i < x.numel(); ++i) mask[i] = r.uniform() < p_ ? S(0) : keep;
        y = Tensor<S>(x.shape);
        for (size_t i = 0; i < x.numel(); ++i) y[i] = x[i] * mask[i];
        ws.at(id_) = {mask};
    }

    void backward(const Tensor<S>& dy, Tensor<S>& dx, Workspace<S>& ws) {
        auto& slot = ws.at(id_);
        if (slot.empty()) {
            dx = dy;
            return;
        }
        const Tensor<S>& mask = slot[0];
        dx = Tensor<S>(dy.shape);
        for (size_t i = 0; i < dy.numel(); ++i) dx[i] = dy[i] * mask[i];
    }

private:
    int id_ = -1;
    double p_ = 0.0;
};

// ---------------------------------------------------------------------------
// Multi-head self-attention over spatial positions, pre-normalized, residual.
// ---------------------------------------------------------------------------
template <typename S>
class AttentionBlock {
public:
    AttentionBlock() = default;

    AttentionBlock(NetCtx<S>& ctx, const std::string& name, int channels, int heads)
        : c_(channels), heads_(heads), norm_(ctx, name + ".norm", channels),
          qkv_(ctx, name + ".qkv", channels, 3 * channels, std::sqrt(1.0 / channels)),
          proj_(ctx, name + ".proj", channels, channels, std::sqrt(1.0 / channels)) {
        if (channels % heads != 0) throw std::invalid_argument("attention: channels must be divisible by heads");
        id_ = ctx.new_id();
    }

    void forward(const Tensor<S>& x, Tensor<S>& y, Workspace<S>& ws) const {
        int n = x.dim(0), h = x.dim(2), w = x.dim(3);
        int L = h * w, d = c_ / heads_;
        Tensor<S> xn;
        norm_.forward(x, xn, ws);

        // tokens: {N*L, C}
        Tensor<S> tok({n * L, c_});
        to_tokens(xn, tok, n, L);
        Tensor<S> qkv;
        qkv_.forward(tok, qkv, ws);

        Tensor<S> probs({n, heads_, L, L});
        Tensor<S> attn_out({n * L, c_});
        S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(d)));
#pragma omp parallel
        {
            std::vector<S> q(static_cast<size_t>(L) * d), k(static_cast<size_t>(L) * d), v(static_cast<size_t>(L) * d);
            std::vector<S> sc(static_cast<size_t>(L) * L), out(static_cast<size_t>(L) * d);
#pragma omp for schedule(static) collapse(2)
            for (int i = 0; i < n; ++i)
                for (int hd = 0; hd < heads_; ++hd) {
                    gather_head(qkv, i, hd, 0, L, d, q.data());
                    gather_head(qkv, i, hd, 1, L, d, k.data());
                    gather_head(qkv, i, hd, 2, L, d, v.data());
                    gemm(false, true, L, L, d, scale, q.data(), d, k.data(), d, S(0), sc.data(), L);
                    S* pr = probs.ptr() + ((static_cast<size_t>(i) * heads_ + hd) * L) * L;
                    softmax_rows(sc.data(), pr, L);
                    gemm(false, false, L, d, L, S(1), pr, L, v.data(), d, S(0), out.data(), d);
                    scatter_head(out.data(), i, hd, L, d, attn_out);
                }
        }
        Tensor<S> projected;
        proj_.forward(attn_out, projected, ws);

        y = Tensor<S>(x.shape);
        from_tokens_add(projected, x, y, n, L);
        ws.at(id_) = {qkv, probs, attn_out};
    }

    void backward(const Tensor<S>& dy, Tensor<S>& dx, Workspace<S>& ws) {
        auto& slot = ws.at(id_);
        Tensor<S>& qkv      = slot[0];
        Tensor<S>& probs    = slot[1];
        Tensor<S>& attn_out = slot[2];
        (void)attn_out;
        int n = dy.dim(0), h = dy.dim(2), w = dy.dim(3);
        int L = h * w, d = c_ / heads_;

        Tensor<S> dproj({n * L, c_});
        to_tokens(dy, dproj, n, L);
        Tensor<S> dattn;
        proj_.backward(dproj, dattn, ws);

        Tensor<S> dqkv({n * L, 3 * c_});
        S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(d)));
#pragma omp parallel
        {
            std::vector<S> q(static_cast<size_t>(L) * d), k(static_cast<size_t>(L) * d), v(static_cast<size_t>(L) * d);
            std::vector<S> dout(static_cast<size_t>(L) * d), dp(static_cast<size_t>(L) * L),
                ds(static_cast<size_t>(L) * L), dq(static_cast<size_t>(L) * d), dk(static_cast<size_t>(L) * d),
                dv(static_cast<size_t>(L) * d);
#pragma omp for schedule(static) collapse(2)
            for (int i = 0; i < n; ++i)
                for (int hd = 0; hd < heads_; ++hd) {
                    gather_head(qkv, i, hd, 0, L, d, q.data());
                    gather_head(qkv, i, hd, 1, L, d, k.data());
                    gather_head(qkv, i, hd, 2, L, d, v.data());
                    gather_head_grad(dattn, i, hd, L, d, dout.data());
                    const S* pr = probs.ptr() + ((static_cast<size_t>(i) * heads_ + hd) * L) * L;
                    // dV = P^T dOut ; dP = dOut V^T
                    gemm(true, false, L, d, L, S(1), pr, L, dout.data(), d, S(0), dv.data(), d);
                    gemm(false, true, L, L, d, S(1), dout.data(), d, v.data(), d, S(0), dp.data(), L);
                    // softmax backward per row
                    for (int r = 0; r < L; ++r) {
                        const S* prow = pr + static_cast<size_t>(r) * L;
                        const S* dprow = dp.data() + static_cast<size_t>(r) * L;
                        double dot = 0.0;
                        for (int cidx = 0; cidx < L; ++cidx) dot += static_cast<double>(prow[cidx]) * dprow[cidx];
                        S* dsrow = ds.data() + static_cast<size_t>(r) * L;
                        for (int cidx = 0; cidx < L; ++cidx)
                            dsrow[cidx] = prow[cidx] * static_cast<S>(dprow[cidx] - dot);
                    }
                    gemm(false, false, L, d, L, scale, ds.data(), L, k.data(), d, S(0), dq.data(), d);
                    gemm(true, false, L, d, L, scale, ds.data(), L, q.data(), d, S(0), dk.data(), d);
                    scatter_head_qkv(dq.data(), i, hd, 0, L, d, dqkv);
                    scatter_head_qkv(dk.data(), i, hd, 1, L, d, dqkv);
                    scatter_head_qkv(dv.data(), i, hd, 2, L, d, dqkv);
                }
        }
        Tensor<S> dtok;
        qkv_.backward(dqkv, dtok, ws);
        Tensor<S> dxn(dy.shape);
        from_tokens(dtok, dxn, n, L);
        Tensor<S> dnorm_in;
        norm_.backward(dxn, dnorm_in, ws);
        dx = Tensor<S>(dy.shape);
        for (size_t j = 0; j < dx.numel(); ++j) dx[j] = dy[j] + dnorm_in[j];
    }

private:
    void to_tokens(const Tensor<S>& x, Tensor<S>& tok, int n, int L) const {
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < c_; ++c) {
                const S* src = x.ptr() + (static_cast<size_t>(i) * c_ + c) * L;
                for (int l = 0; l < L; ++l) tok[(static_cast<size_t>(i) * L + l) * c_ + c] = src[l];
            }
    }
    void from_tokens(const Tensor<S>& tok, Tensor<S>& x, int n, int L) const {
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < c_; ++c) {
                S* dst = x.ptr() + (static_cast<size_t>(i) * c_ + c) * L;
                for (int l = 0; l < L; ++l) dst[l] = tok[(static_cast<size_t>(i) * L + l) * c_ + c];
            }
    }
    void from_tokens_add(const Tensor<S>& tok, const Tensor<S>& res, Tensor<S>& y, int n, int L) const {
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < c_; ++c) {
                const S* r = res.ptr() + (static_cast<size_t>(i) * c_ + c) * L;
                S* dst = y.ptr() + (static_cast<size_t>(i) * c_ + c) * L;
                for (int l = 0; l < L; ++l) dst[l] = r[l] + tok[(static_cast<size_t>(i) * L + l) * c_ + c];
            }
    }
    void gather_head(const Tensor<S>& qkv, int i, int hd, int which, int L, int d, S* out) const {
        int off = which * c_ + hd * d;
        for (int l = 0; l < L; ++l)
            for (int j = 0; j < d; ++j)
                out[static_cast<size_t>(l) * d + j] = qkv[(static_cast<size_t>(i) * L + l) * (3 * c_) + off + j];
    }
    void gather_head_grad(const Tensor<S>& dattn, int i, int hd, int L, int d, S* out) const {
        int off = hd * d;
        for (int l = 0; l < L; ++l)
            for (int j = 0; j < d; ++j)
                out[static_cast<size_t>(l) * d + j] = dattn[(static_cast<size_t>(i) * L + l) * c_ + off + j];
    }
    void scatter_head(const S* in, int i, int hd, int L, int d, Tensor<S>& attn_out) const {
        int off = hd * d;
        for (int l = 0; l < L; ++l)
            for (int j = 0; j < d; ++j)
                attn_out[(static_cast<size_t>(i) * L + l) * c_ + off + j] = in[static_cast<size_t>(l) * d + j];
    }
    void scatter_head_qkv(const S* in, int i, int hd, int which, int L, int d, Tensor<S>& dqkv) const {
        int off = which * c_ + hd * d;
        for (int l = 0; l < L; ++l)
            for (int j = 0; j < d; ++j)
                dqkv[(static_cast<size_t>(i) * L + l) * (3 * c_) + off + j] = in[static_cast<size_t>(l) * d + j];
    }
    static void softmax_rows(const S* sc, S* pr, int L) {
        for (int r = 0; r < L; ++r) {
            const S* srow = sc + static_cast<size_t>(r) * L;
            S* prow = pr + static_cast<size_t>(r) * L;
            S mx = srow[0];
            for (int c = 1; c < L; ++c) mx = std::max(mx, srow[c]);
            double sum = 0.0;
            for (int c = 0; c < L; ++c) {
                double e = std::exp(static_cast<double>(srow[c] - mx));
                prow[c] = static_cast<S>(e);
                sum += e;
            }
            S inv = static_cast<S>(1.0 / sum);
            for (int c = 0; c < L; ++c) prow[c] *= inv;
        }
    }

    int id_ = -1, c_ = 0, heads_ = 1;
    GroupNorm<S> norm_;
    Linear<S> qkv_, proj_;
};

// ---------------------------------------------------------------------------
// Nearest-neighbor 2x upsample.
// ---------------------------------------------------------------------------
template <typename S>
class Upsample2x {
public:
    Upsample2x() = default;
    explicit Upsample2x(NetCtx<S>& ctx) { id_ = ctx.new_id(); }

    void forward(const Tensor<S>& x, Tensor<S>& y, Workspace<S>& ws) const {
        int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        y = Tensor<S>({n, c, 2 * h, 2 * w});
        for (int i = 0; i < n * c; ++i) {
            const S* src = x.ptr() + static_cast<size_t>(i) * h * w;
            S* dst = y.ptr() + static_cast<size_t>(i) * 4 * h * w;
            for (int r = 0; r < h; ++r)
                for (int cc = 0; cc < w; ++cc) {
                    S v = src[static_cast<size_t>(r) * w + cc];
                    size_t b = (static_cast<size_t>(2 * r) * 2 * w) + 2 * cc;
                    dst[b] = v;
                    dst[b + 1] = v;
                    dst[b + 2 * w] = v;
                    dst[b + 2 * w + 1] = v;
                }
        }
        ws.at(id_) = {Tensor<S>({n, c, h, w})};  // shape memo only
    }

    void backward(const Tensor<S>& dy, Tensor<S>& dx, Workspace<S>& ws) {
        const Tensor<S>& memo = ws.at(id_)[0];
        int n = memo.dim(0), c = memo.dim(1), h = memo.dim(2), w = memo.dim(3);
        dx = Tensor<S>({n, c, h, w});
        for (int i = 0; i < n * c; ++i) {
            const S* src = dy.ptr() + static_cast<size_t>(i) * 4 * h * w;
            S* dst = dx.ptr() + static_cast<size_t>(i) * h * w;
            for (int r = 0; r < h; ++r)
                for (int cc = 0; cc < w; ++cc) {
                    size_t b = (static_cast<size_t>(2 * r) * 2 * w) + 2 * cc;
                    dst[static_cast<size_t>(r) * w + cc] = src[b] + src[b + 1] + src[b + 2 * w] + src[b + 2 * w + 1];
                }
        }
    }

private:
    int id_ = -1;
};

}  // namespace sgdm::nn
