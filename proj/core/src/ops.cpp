#include "rangediff/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "rangediff/errors.hpp"

namespace rangediff::ops {

using detail::make_result;
using detail::Node;

namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// Parent i's gradient buffer, or nullptr when it does not take part in backward.
std::vector<Real>* grad_of(Node& self, std::size_t i) {
    auto& p = self.parents[i];
    if (p && p->requires_grad) return &p->ensure_grad();
    return nullptr;
}

const std::vector<Real>& data_of(Node& self, std::size_t i) { return self.parents[i]->data; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
    const auto xs = x.data();
    std::vector<Real> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
    return make_result(x.shape(), std::move(out), {x}, [df](Node& self) {
        auto* gx = grad_of(self, 0);
        if (!gx) return;
        const auto& xd = data_of(self, 0);
        for (std::size_t i = 0; i < xd.size(); ++i) (*gx)[i] += self.grad[i] * df(xd[i], self.data[i]);
    });
}

Real stable_softplus(Real v) { return v > 30.0 ? v : std::log1p(std::exp(v)); }

Real logistic(Real v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const Real e = std::exp(v);
    return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        for (std::size_t k = 0; k < 2; ++k)
            if (auto* g = grad_of(self, k))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        if (auto* g = grad_of(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
        if (auto* g = grad_of(self, 1))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        const auto& ad = data_of(self, 0);
        const auto& bd = data_of(self, 1);
        if (auto* g = grad_of(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bd[i];
        if (auto* g = grad_of(self, 1))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * ad[i];
    });
}

Tensor scale(const Tensor& a, Real factor) {
    return unary(a, [factor](Real v) { return v * factor; }, [factor](Real, Real) { return factor; });
}

Tensor add_scalar(const Tensor& a, Real value) {
    return unary(a, [value](Real v) { return v + value; }, [](Real, Real) { return 1.0; });
}

Tensor add_lastdim(const Tensor& x, const Tensor& v) {
    const std::size_t c = v.numel();
    if (x.shape().back() != c)
        throw DimensionError("add_lastdim: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
    std::vector<Real> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + v.data()[i % c];
    return make_result(x.shape(), std::move(out), {x, v}, [c](Node& self) {
        if (auto* g = grad_of(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
        if (auto* g = grad_of(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i % c] += self.grad[i];
    });
}

Tensor mul_lastdim(const Tensor& x, const Tensor& v) {
    const std::size_t c = v.numel();
    if (x.shape().back() != c)
        throw DimensionError("mul_lastdim: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
    std::vector<Real> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * v.data()[i % c];
    return make_result(x.shape(), std::move(out), {x, v}, [c](Node& self) {
        const auto& xd = data_of(self, 0);
        const auto& vd = data_of(self, 1);
        if (auto* g = grad_of(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * vd[i % c];
        if (auto* g = grad_of(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i % c] += self.grad[i] * xd[i];
    });
}

namespace {

std::size_t channel_inner(const Tensor& x, const Tensor& v, const char* op) {
    if (x.rank() < 2 || v.rank() != 2 || v.dim(0) != x.dim(0) || v.dim(1) != x.dim(1))
        throw DimensionError(std::string(op) + ": " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
    return x.numel() / (x.dim(0) * x.dim(1));
}

}  // namespace

Tensor add_channels(const Tensor& x, const Tensor& v) {
    const std::size_t inner = channel_inner(x, v, "add_channels");
    std::vector<Real> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + v.data()[i / inner];
    return make_result(x.shape(), std::move(out), {x, v}, [inner](Node& self) {
        if (auto* g = grad_of(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
        if (auto* g = grad_of(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i / inner] += self.grad[i];
    });
}

Tensor mul_channels(const Tensor& x, const Tensor& v) {
    const std::size_t inner = channel_inner(x, v, "mul_channels");
    std::vector<Real> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * v.data()[i / inner];
    return make_result(x.shape(), std::move(out), {x, v}, [inner](Node& self) {
        const auto& xd = data_of(self, 0);
        const auto& vd = data_of(self, 1);
        if (auto* g = grad_of(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * vd[i / inner];
        if (auto* g = grad_of(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i / inner] += self.grad[i] * xd[i];
    });
}

Tensor exp(const Tensor& x) {
    return unary(x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

Tensor tanh(const Tensor& x) {
    return unary(x, [](Real v) { return std::tanh(v); }, [](Real, Real y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
    return unary(x, logistic, [](Real, Real y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& x) {
    return unary(
        x, [](Real v) { return v * logistic(v); },
        [](Real v, Real) {
            const Real s = logistic(v);
            return s * (1.0 + v * (1.0 - s));
        });
}

Tensor softplus(const Tensor& x) {
    return unary(x, stable_softplus, [](Real v, Real) { return logistic(v); });
}

Tensor square(const Tensor& x) {
    return unary(x, [](Real v) { return v * v; }, [](Real v, Real) { return 2.0 * v; });
}

Tensor clamp(const Tensor& x, Real lo, Real hi) {
    return unary(
        x, [lo, hi](Real v) { return std::clamp(v, lo, hi); },
        [lo, hi](Real v, Real) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& x) {
    const auto xs = x.data();
    const Real total = std::accumulate(xs.begin(), xs.end(), 0.0);
    return make_result({1}, {total}, {x}, [](Node& self) {
        if (auto* g = grad_of(self, 0))
            for (auto& v : *g) v += self.grad[0];
    });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<Real>(x.numel())); }

Tensor mse(const Tensor& prediction, const Tensor& target) {
    require_same_shape(prediction, target, "mse");
    const auto n = prediction.numel();
    Real acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const Real d = prediction.data()[i] - target.data()[i];
        acc += d * d;
    }
    return make_result({1}, {acc / static_cast<Real>(n)}, {prediction, target}, [n](Node& self) {
        const auto& p = data_of(self, 0);
        const auto& t = data_of(self, 1);
        const Real k = 2.0 * self.grad[0] / static_cast<Real>(n);
        if (auto* g = grad_of(self, 0))
            for (std::size_t i = 0; i < n; ++i) (*g)[i] += k * (p[i] - t[i]);
        if (auto* g = grad_of(self, 1))
            for (std::size_t i = 0; i < n; ++i) (*g)[i] -= k * (p[i] - t[i]);
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<Real> out(m * n);
    MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
    return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
        ConstMap g(self.grad.data(), m, n);
        if (auto* ga = grad_of(self, 0))
            MutMap(ga->data(), m, k).noalias() += g * ConstMap(data_of(self, 1).data(), k, n).transpose();
        if (auto* gb = grad_of(self, 1))
            MutMap(gb->data(), k, n).noalias() += ConstMap(data_of(self, 0).data(), m, k).transpose() * g;
    });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const auto B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<Real> out(B * m * n);
    for (std::size_t i = 0; i < B; ++i)
        MutMap(out.data() + i * m * n, m, n).noalias() =
            ConstMap(a.data().data() + i * m * k, m, k) * ConstMap(b.data().data() + i * k * n, k, n);
    return make_result({B, m, n}, std::move(out), {a, b}, [B, m, k, n](Node& self) {
        auto* ga = grad_of(self, 0);
        auto* gb = grad_of(self, 1);
        const auto& ad = data_of(self, 0);
        const auto& bd = data_of(self, 1);
        for (std::size_t i = 0; i < B; ++i) {
            ConstMap g(self.grad.data() + i * m * n, m, n);
            if (ga)
                MutMap(ga->data() + i * m * k, m, k).noalias() +=
                    g * ConstMap(bd.data() + i * k * n, k, n).transpose();
            if (gb)
                MutMap(gb->data() + i * k * n, k, n).noalias() +=
                    ConstMap(ad.data() + i * m * k, m, k).transpose() * g;
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (weight.rank() != 2 || x.shape().back() != weight.dim(0))
        throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
    const auto k = weight.dim(0), m = weight.dim(1);
    if (bias.defined() && bias.numel() != m)
        throw DimensionError("linear: bias " + shape_str(bias.shape()) + " vs weight " + shape_str(weight.shape()));
    const auto n = x.numel() / k;
    std::vector<Real> out(n * m);
    MutMap o(out.data(), n, m);
    o.noalias() = ConstMap(x.data().data(), n, k) * ConstMap(weight.data().data(), k, m);
    if (bias.defined()) o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), m);
    Shape shape = x.shape();
    shape.back() = m;
    return make_result(std::move(shape), std::move(out), {x, weight, bias}, [n, k, m](Node& self) {
        ConstMap g(self.grad.data(), n, m);
        if (auto* gx = grad_of(self, 0))
            MutMap(gx->data(), n, k).noalias() += g * ConstMap(data_of(self, 1).data(), k, m).transpose();
        if (auto* gw = grad_of(self, 1))
            MutMap(gw->data(), k, m).noalias() += ConstMap(data_of(self, 0).data(), n, k).transpose() * g;
        if (auto* gb = grad_of(self, 2))
            Eigen::Map<Eigen::RowVectorXd>(gb->data(), m) += g.colwise().sum();
    });
}

Tensor transpose_last2(const Tensor& x) {
    if (x.rank() != 3) throw DimensionError("transpose_last2 expects rank 3, got " + shape_str(x.shape()));
    return permute(x, {0, 2, 1});
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) throw DimensionError("softmax: axis out of range for " + shape_str(x.shape()));
    const auto& s = x.shape();
    const std::size_t n = s[axis];
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const auto xs = x.data();
    std::vector<Real> out(xs.size());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            Real mx = -std::numeric_limits<Real>::infinity();
            for (std::size_t j = 0; j < n; ++j) {
                const Real v = xs[base + j * inner];
                if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
                mx = std::max(mx, v);
            }
            Real z = 0.0;
            for (std::size_t j = 0; j < n; ++j) z += out[base + j * inner] = std::exp(xs[base + j * inner] - mx);
            for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
        }
    return make_result(s, std::move(out), {x}, [outer, inner, n](Node& self) {
        auto* gx = grad_of(self, 0);
        if (!gx) return;
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * n * inner + in;
                Real dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += self.grad[base + j * inner] * self.data[base + j * inner];
                for (std::size_t j = 0; j < n; ++j) {
                    const auto idx = base + j * inner;
                    (*gx)[idx] += self.data[idx] * (self.grad[idx] - dot);
                }
            }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps) {
    const std::size_t c = x.shape().back();
    if (gain.numel() != c || bias.numel() != c)
        throw DimensionError("layer_norm: channels " + std::to_string(c) + " vs gain " + shape_str(gain.shape()) +
                             ", bias " + shape_str(bias.shape()));
    const std::size_t rows = x.numel() / c;
    auto xhat = std::make_shared<std::vector<Real>>(x.numel());
    auto rstd = std::make_shared<std::vector<Real>>(rows);
    std::vector<Real> out(x.numel());
    const auto xs = x.data();
    const auto gs = gain.data();
    const auto bs = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* row = xs.data() + r * c;
        Real mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += row[j];
        mu /= static_cast<Real>(c);
        Real var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<Real>(c);
        const Real is = 1.0 / std::sqrt(var + eps);
        (*rstd)[r] = is;
        for (std::size_t j = 0; j < c; ++j) {
            const Real h = (row[j] - mu) * is;
            (*xhat)[r * c + j] = h;
            out[r * c + j] = h * gs[j] + bs[j];
        }
    }
    return make_result(x.shape(), std::move(out), {x, gain, bias}, [xhat, rstd, rows, c](Node& self) {
        auto* gx = grad_of(self, 0);
        auto* gg = grad_of(self, 1);
        auto* gb = grad_of(self, 2);
        const auto& gain_d = data_of(self, 1);
        std::vector<Real> dxhat(c);
        for (std::size_t r = 0; r < rows; ++r) {
            const Real* g = self.grad.data() + r * c;
            const Real* h = xhat->data() + r * c;
            if (gg)
                for (std::size_t j = 0; j < c; ++j) (*gg)[j] += g[j] * h[j];
            if (gb)
                for (std::size_t j = 0; j < c; ++j) (*gb)[j] += g[j];
            if (!gx) continue;
            Real m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                dxhat[j] = g[j] * gain_d[j];
                m1 += dxhat[j];
                m2 += dxhat[j] * h[j];
            }
            m1 /= static_cast<Real>(c);
            m2 /= static_cast<Real>(c);
            for (std::size_t j = 0; j < c; ++j) (*gx)[r * c + j] += (*rstd)[r] * (dxhat[j] - m1 - h[j] * m2);
        }
    });
}

namespace {

struct ConvGeometry {
    std::size_t batch, cin, h, w, cout, kh, kw, stride, hout, wout;
    std::size_t patch() const { return cin * kh * kw; }
    std::size_t pixels() const { return hout * wout; }
};

// cols[(c*kh + i)*kw + j][oy*wout + ox]
void im2col(const ConvGeometry& g, const Real* x, Real* cols) {
    const long ph = static_cast<long>(g.kh / 2), pw = static_cast<long>(g.kw / 2);
    const long W = static_cast<long>(g.w);
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t i = 0; i < g.kh; ++i)
            for (std::size_t j = 0; j < g.kw; ++j) {
                Real* row = cols + ((c * g.kh + i) * g.kw + j) * g.pixels();
                for (std::size_t oy = 0; oy < g.hout; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + i) - ph;
                    Real* dst = row + oy * g.wout;
                    if (iy < 0 || iy >= static_cast<long>(g.h)) {
                        std::fill(dst, dst + g.wout, 0.0);
                        continue;
                    }
                    const Real* src = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
                    for (std::size_t ox = 0; ox < g.wout; ++ox) {
                        long ix = (static_cast<long>(ox * g.stride + j) - pw) % W;
                        if (ix < 0) ix += W;
                        dst[ox] = src[ix];
                    }
                }
            }
}

void col2im(const ConvGeometry& g, const Real* cols, Real* gx) {
    const long ph = static_cast<long>(g.kh / 2), pw = static_cast<long>(g.kw / 2);
    const long W = static_cast<long>(g.w);
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t i = 0; i < g.kh; ++i)
            for (std::size_t j = 0; j < g.kw; ++j) {
                const Real* row = cols + ((c * g.kh + i) * g.kw + j) * g.pixels();
                for (std::size_t oy = 0; oy < g.hout; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + i) - ph;
                    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                    Real* dst = gx + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
                    const Real* src = row + oy * g.wout;
                    for (std::size_t ox = 0; ox < g.wout; ++ox) {
                        long ix = (static_cast<long>(ox * g.stride + j) - pw) % W;
                        if (ix < 0) ix += W;
                        dst[ix] += src[ox];
                    }
                }
            }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride) {
    if (weight.rank() != 4) throw DimensionError("conv2d: weight must be rank 4, got " + shape_str(weight.shape()));
    if (weight.dim(2) % 2 == 0 || weight.dim(3) % 2 == 0)
        throw ConfigError("conv2d: kernel extents must be odd, got " + shape_str(weight.shape()));
    if (stride == 0) throw ConfigError("conv2d: stride must be positive");
    if (x.rank() != 4 || x.dim(1) != weight.dim(1))
        throw DimensionError("conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
    ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), weight.dim(3), stride, 0, 0};
    if (bias.defined() && bias.numel() != g.cout)
        throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " vs " + std::to_string(g.cout) + " outputs");
    g.hout = (g.h - 1) / stride + 1;
    g.wout = (g.w - 1) / stride + 1;

    std::vector<Real> out(g.batch * g.cout * g.pixels());
    std::vector<Real> cols(g.patch() * g.pixels());
    ConstMap wm(weight.data().data(), g.cout, g.patch());
    for (std::size_t b = 0; b < g.batch; ++b) {
        im2col(g, x.data().data() + b * g.cin * g.h * g.w, cols.data());
        MutMap o(out.data() + b * g.cout * g.pixels(), g.cout, g.pixels());
        o.noalias() = wm * ConstMap(cols.data(), g.patch(), g.pixels());
        if (bias.defined()) o.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.data().data(), g.cout);
    }
    return make_result({g.batch, g.cout, g.hout, g.wout}, std::move(out), {x, weight, bias}, [g](Node& self) {
        auto* gx = grad_of(self, 0);
        auto* gw = grad_of(self, 1);
        auto* gb = grad_of(self, 2);
        const auto& xd = data_of(self, 0);
        ConstMap wm(data_of(self, 1).data(), g.cout, g.patch());
        std::vector<Real> cols(g.patch() * g.pixels());
        std::vector<Real> dcols(gx ? g.patch() * g.pixels() : 0);
        for (std::size_t b = 0; b < g.batch; ++b) {
            ConstMap go(self.grad.data() + b * g.cout * g.pixels(), g.cout, g.pixels());
            if (gb) Eigen::Map<Eigen::VectorXd>(gb->data(), g.cout) += go.rowwise().sum();
            if (gw) {
                im2col(g, xd.data() + b * g.cin * g.h * g.w, cols.data());
                MutMap(gw->data(), g.cout, g.patch()).noalias() +=
                    go * ConstMap(cols.data(), g.patch(), g.pixels()).transpose();
            }
            if (gx) {
                MutMap(dcols.data(), g.patch(), g.pixels()).noalias() = wm.transpose() * go;
                col2im(g, dcols.data(), gx->data() + b * g.cin * g.h * g.w);
            }
        }
    });
}

Tensor upsample_nearest2(const Tensor& x) {
    if (x.rank() != 4) throw DimensionError("upsample_nearest2 expects [B,C,H,W], got " + shape_str(x.shape()));
    const auto planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    std::vector<Real> out(planes * 4 * h * w);
    const auto xs = x.data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < 2 * h; ++y)
            for (std::size_t c = 0; c < 2 * w; ++c)
                out[(p * 2 * h + y) * 2 * w + c] = xs[(p * h + y / 2) * w + c / 2];
    return make_result({x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {x}, [planes, h, w](Node& self) {
        auto* gx = grad_of(self, 0);
        if (!gx) return;
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t y = 0; y < 2 * h; ++y)
                for (std::size_t c = 0; c < 2 * w; ++c)
                    (*gx)[(p * h + y / 2) * w + c / 2] += self.grad[(p * 2 * h + y) * 2 * w + c];
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    std::vector<Real> out(x.data().begin(), x.data().end());
    return make_result(std::move(shape), std::move(out), {x}, [](Node& self) {
        if (auto* g = grad_of(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
    const auto& in = x.shape();
    const std::size_t rank = in.size();
    if (axes.size() != rank) throw DimensionError("permute: axis list does not match " + shape_str(in));
    std::vector<bool> seen(rank, false);
    for (auto a : axes) {
        if (a >= rank || seen[a]) throw DimensionError("permute: invalid axis list for " + shape_str(in));
        seen[a] = true;
    }
    std::vector<std::size_t> in_stride(rank, 1);
    for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
    Shape out_shape(rank);
    std::vector<std::size_t> stride(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        out_shape[i] = in[axes[i]];
        stride[i] = in_stride[axes[i]];
    }
    // map[k] = source offset of output element k
    auto map = std::make_shared<std::vector<std::size_t>>(x.numel());
    std::vector<std::size_t> idx(rank, 0);
    std::size_t src = 0;
    for (std::size_t k = 0; k < map->size(); ++k) {
        (*map)[k] = src;
        for (std::size_t a = rank; a-- > 0;) {
            if (++idx[a] < out_shape[a]) {
                src += stride[a];
                break;
            }
            src -= stride[a] * (out_shape[a] - 1);
            idx[a] = 0;
        }
    }
    std::vector<Real> out(x.numel());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = x.data()[(*map)[k]];
    return make_result(std::move(out_shape), std::move(out), {x}, [map](Node& self) {
        if (auto* g = grad_of(self, 0))
            for (std::size_t k = 0; k < map->size(); ++k) (*g)[(*map)[k]] += self.grad[k];
    });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const auto& first = parts.front().shape();
    if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const auto& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
        if (!ok) throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(first));
        out_shape[axis] += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
    for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
    auto extents = std::make_shared<std::vector<std::size_t>>();
    for (const auto& p : parts) extents->push_back(p.shape()[axis] * inner);
    const std::size_t row = out_shape[axis] * inner;
    std::vector<Real> out(outer * row);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto src = parts[k].data();
        const auto len = (*extents)[k];
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(src.data() + o * len, len, out.data() + o * row + offset);
        offset += len;
    }
    return make_result(std::move(out_shape), std::move(out), parts, [extents, outer, row](Node& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < extents->size(); ++k) {
            const auto len = (*extents)[k];
            if (auto* g = grad_of(self, k))
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < len; ++i) (*g)[o * len + i] += self.grad[o * row + off + i];
            off += len;
        }
    });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
    const auto& s = x.shape();
    if (axis >= s.size() || length == 0 || start + length > s[axis])
        throw DimensionError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                             ") out of range on axis " + std::to_string(axis) + " of " + shape_str(s));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t row = s[axis] * inner, len = length * inner, off = start * inner;
    Shape out_shape = s;
    out_shape[axis] = length;
    std::vector<Real> out(outer * len);
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(x.data().data() + o * row + off, len, out.data() + o * len);
    return make_result(std::move(out_shape), std::move(out), {x}, [outer, row, len, off](Node& self) {
        if (auto* g = grad_of(self, 0))
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < len; ++i) (*g)[o * row + off + i] += self.grad[o * len + i];
    });
}

Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& indices) {
    if (table.rank() != 2) throw DimensionError("gather_rows: table must be rank 2, got " + shape_str(table.shape()));
    const auto m = table.dim(0), k = table.dim(1);
    if (indices.empty()) throw DimensionError("gather_rows: empty index list");
    for (auto i : indices)
        if (i >= m) throw ArgumentError("gather_rows: row " + std::to_string(i) + " out of range [0, " + std::to_string(m) + ")");
    std::vector<Real> out(indices.size() * k);
    for (std::size_t r = 0; r < indices.size(); ++r)
        std::copy_n(table.data().data() + indices[r] * k, k, out.data() + r * k);
    return make_result({indices.size(), k}, std::move(out), {table}, [indices, k](Node& self) {
        if (auto* g = grad_of(self, 0))
            for (std::size_t r = 0; r < indices.size(); ++r)
                for (std::size_t j = 0; j < k; ++j) (*g)[indices[r] * k + j] += self.grad[r * k + j];
    });
}

Tensor linear_recurrence(const Tensor& decay, const Tensor& input) {
    require_same_shape(decay, input, "linear_recurrence");
    if (decay.rank() != 3) throw DimensionError("linear_recurrence expects [B,L,C], got " + shape_str(decay.shape()));
    const auto B = decay.dim(0), L = decay.dim(1), C = decay.dim(2);
    const auto a = decay.data();
    const auto u = input.data();
    std::vector<Real> h(decay.numel());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            Real state = 0.0;
            for (std::size_t s = 0; s < L; ++s) {
                const auto i = (b * L + s) * C + c;
                state = a[i] * state + u[i];
                h[i] = state;
            }
        }
    return make_result(decay.shape(), std::move(h), {decay, input}, [B, L, C](Node& self) {
        auto* ga = grad_of(self, 0);
        auto* gu = grad_of(self, 1);
        const auto& a = data_of(self, 0);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
                Real carry = 0.0;
                for (std::size_t s = L; s-- > 0;) {
                    const auto i = (b * L + s) * C + c;
                    const Real gs = self.grad[i] + carry;
                    if (gu) (*gu)[i] += gs;
                    if (ga && s > 0) (*ga)[i] += gs * self.data[i - C];
                    carry = gs * a[i];
                }
            }
    });
}

}  // namespace rangediff::ops
