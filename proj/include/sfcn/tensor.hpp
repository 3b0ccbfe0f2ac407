#pragma once

// Dense 64-bit tensors with a reverse-mode gradient tape.
//
// A Tensor is a cheap handle onto a shared node. Each operation creates a new node
// that remembers its parents and a closure which, given the node's gradient,
// accumulates into the parents' gradients. Only nodes reachable from a
// requires_grad leaf keep their parents, so inference graphs are not retained.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sfcn/error.hpp"

namespace sfcn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

namespace detail {

// 64-byte aligned storage. Eigen's vectorised kernels peel leading elements
// according to the address, so a buffer's alignment would otherwise leak into
// the summation order and make identical runs differ in the last bit.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};
    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

struct Node {
    Shape shape;
    Buffer value;
    Buffer grad;  // empty until first accumulation
    bool requires_grad = false;
    bool leaf = true;
    std::string op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::span<double> grad_buffer() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        node_->value.assign(shape_numel(shape), fill);
        node_->shape = std::move(shape);
        node_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        if (shape_numel(shape) != values.size())
            throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
        node_->shape = std::move(shape);
        node_->value.assign(values.begin(), values.end());
        node_->requires_grad = requires_grad;
    }

    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
    }

    bool defined() const noexcept { return node_ != nullptr; }

    const Shape& shape() const { return node().shape; }
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t i) const {
        if (i >= rank()) throw ShapeError("tensor: dimension " + std::to_string(i) + " out of range for " + shape_str(shape()));
        return shape()[i];
    }
    std::size_t numel() const { return node().value.size(); }

    std::span<const double> values() const { return node().value; }
    // Writable access is for leaves (parameters, freshly built data).
    std::span<double> mutable_values() { return node().value; }

    double item() const {
        if (numel() != 1) throw ShapeError("tensor: item() on non-scalar " + shape_str(shape()));
        return node().value[0];
    }

    bool requires_grad() const { return node().requires_grad; }
    void set_requires_grad(bool r) { node().requires_grad = r; }
    bool is_leaf() const { return node().leaf; }
    const std::string& op_name() const { return node().op; }

    bool has_grad() const { return !node().grad.empty(); }
    std::span<const double> grad() const { return node().grad; }
    // Handle semantics: constness of the handle does not extend to the shared node.
    std::span<double> mutable_grad() const { return node().grad_buffer(); }
    void zero_grad() { node().grad.clear(); }

    /// Copy of the values as a new leaf without history.
    Tensor detach() const { return clone(false); }

    Tensor clone(bool requires_grad) const {
        auto n = std::make_shared<detail::Node>();
        n->shape = shape();
        n->value = node().value;
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    Tensor reshape(Shape s) const;

    bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

    detail::Node& node() const {
        if (!node_) throw Error("tensor: use of undefined tensor");
        return *node_;
    }
    const std::shared_ptr<detail::Node>& node_ptr() const noexcept { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

/// Builds the result node of an operation. Parents and the gradient closure are
/// only kept when some parent takes part in differentiation.
inline Tensor make_result(Shape shape, detail::Buffer value, const std::vector<Tensor>& parents,
                          std::function<void(detail::Node&)> backward, std::string op) {
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->leaf = false;
    node->op = std::move(op);
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor& p) { return p.defined() && p.requires_grad(); });
    if (any) {
        node->requires_grad = true;
        for (const auto& p : parents)
            if (p.defined()) node->parents.push_back(p.node_ptr());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

inline Tensor make_result(Shape shape, const std::vector<double>& value, const std::vector<Tensor>& parents,
                          std::function<void(detail::Node&)> backward, std::string op) {
    return make_result(std::move(shape), detail::Buffer(value.begin(), value.end()), parents, std::move(backward),
                       std::move(op));
}

inline bool wants_grad(const Tensor& t) { return t.defined() && t.requires_grad(); }

inline Tensor Tensor::reshape(Shape s) const {
    if (shape_numel(s) != numel())
        throw ShapeError("reshape: cannot view " + shape_str(shape()) + " as " + shape_str(s));
    Tensor src = *this;
    return make_result(std::move(s), node().value, {src},
                       [src](detail::Node& self) mutable {
                           auto g = src.mutable_grad();
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                       },
                       "reshape");
}

/// Populates the gradient of every requires_grad leaf reachable from `root`.
/// Leaf gradients accumulate across calls until cleared with zero_grad().
inline void backward(const Tensor& root) {
    if (root.numel() != 1)
        throw ShapeError("backward: root must be a scalar, got shape " + shape_str(root.shape()));
    if (!root.requires_grad()) return;

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{&root.node(), 0}};
    seen.insert(&root.node());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            detail::Node* p = n->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (auto* n : order)
        if (!n->leaf) n->grad.assign(n->value.size(), 0.0);

    root.node().grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->leaf || !n->backward) continue;
        n->backward(*n);
        n->grad.clear();
        n->grad.shrink_to_fit();
    }
}

// ---------------------------------------------------------------------------
// Convolution geometry

struct Extent2 {
    std::size_t h = 1;
    std::size_t w = 1;
    friend bool operator==(const Extent2&, const Extent2&) = default;
};

struct ConvSpec {
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    Extent2 kernel{3, 3};
    Extent2 stride{1, 1};
    Extent2 padding{0, 0};

    void validate() const {
        if (in_channels == 0 || out_channels == 0) throw ShapeError("conv spec: channel counts must be >= 1");
        if (kernel.h == 0 || kernel.w == 0) throw ShapeError("conv spec: kernel extents must be >= 1");
        if (stride.h == 0 || stride.w == 0) throw ShapeError("conv spec: stride must be >= 1");
    }

    /// Output extent of the forward correlation for an input extent.
    Extent2 conv_output(Extent2 in) const {
        validate();
        const auto one = [](std::size_t n, std::size_t k, std::size_t s, std::size_t p, const char* name) {
            if (n + 2 * p < k)
                throw ShapeError(std::string("conv: ") + name + " extent " + std::to_string(n) +
                                 " too small for kernel " + std::to_string(k) + " with padding " +
                                 std::to_string(p));
            return (n + 2 * p - k) / s + 1;
        };
        return {one(in.h, kernel.h, stride.h, padding.h, "height"),
                one(in.w, kernel.w, stride.w, padding.w, "width")};
    }

    /// Output extent of the transposed convolution.
    Extent2 deconv_output(Extent2 in) const {
        validate();
        const auto one = [](std::size_t n, std::size_t k, std::size_t s, std::size_t p) -> std::ptrdiff_t {
            return static_cast<std::ptrdiff_t>((n - 1) * s + k) - 2 * static_cast<std::ptrdiff_t>(p);
        };
        const auto h = one(in.h, kernel.h, stride.h, padding.h);
        const auto w = one(in.w, kernel.w, stride.w, padding.w);
        if (h < 1 || w < 1) throw ShapeError("deconv: configuration yields an empty output");
        return {static_cast<std::size_t>(h), static_cast<std::size_t>(w)};
    }

    std::size_t patch_size() const { return in_channels * kernel.h * kernel.w; }
};

/// The resolution-doubling transposed convolution used by the fusion decoder.
inline ConvSpec upsample2x_spec(std::size_t in_channels, std::size_t out_channels) {
    return ConvSpec{in_channels, out_channels, {4, 4}, {2, 2}, {1, 1}};
}

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

// col has shape (channels * kh * kw, out.h * out.w).
inline void im2col(const double* img, std::size_t channels, Extent2 in, const ConvSpec& s, Extent2 out,
                   double* col) {
    const std::size_t plane = out.h * out.w;
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t ki = 0; ki < s.kernel.h; ++ki)
            for (std::size_t kj = 0; kj < s.kernel.w; ++kj) {
                double* row = col + ((c * s.kernel.h + ki) * s.kernel.w + kj) * plane;
                for (std::size_t oy = 0; oy < out.h; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * s.stride.h + ki) -
                                    static_cast<std::ptrdiff_t>(s.padding.h);
                    double* dst = row + oy * out.w;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) {
                        std::fill(dst, dst + out.w, 0.0);
                        continue;
                    }
                    const double* src = img + (c * in.h + static_cast<std::size_t>(iy)) * in.w;
                    for (std::size_t ox = 0; ox < out.w; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * s.stride.w + kj) -
                                        static_cast<std::ptrdiff_t>(s.padding.w);
                        dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w))
                                      ? 0.0
                                      : src[static_cast<std::size_t>(ix)];
                    }
                }
            }
}

// Adjoint of im2col: scatters-adds col back into img.
inline void col2im(const double* col, std::size_t channels, Extent2 in, const ConvSpec& s, Extent2 out,
                   double* img) {
    const std::size_t plane = out.h * out.w;
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t ki = 0; ki < s.kernel.h; ++ki)
            for (std::size_t kj = 0; kj < s.kernel.w; ++kj) {
                const double* row = col + ((c * s.kernel.h + ki) * s.kernel.w + kj) * plane;
                for (std::size_t oy = 0; oy < out.h; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * s.stride.h + ki) -
                                    static_cast<std::ptrdiff_t>(s.padding.h);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
                    double* dst = img + (c * in.h + static_cast<std::size_t>(iy)) * in.w;
                    const double* src = row + oy * out.w;
                    for (std::size_t ox = 0; ox < out.w; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * s.stride.w + kj) -
                                        static_cast<std::ptrdiff_t>(s.padding.w);
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(in.w))
                            dst[static_cast<std::size_t>(ix)] += src[ox];
                    }
                }
            }
}

// Direct stride-1 correlation as shifted row updates. Used where the im2col
// buffer would dominate the cost (few output channels).
inline bool prefers_direct(const ConvSpec& s) {
    return s.stride == Extent2{1, 1} && s.out_channels <= 4 &&
           s.padding.h < s.kernel.h && s.padding.w < s.kernel.w;
}

// Visits every (output row, kernel tap) overlap: f(oy, iy, ox_lo, ox_hi, ix_offset) where
// input column = output column + ix_offset - padding.
template <typename F>
inline void for_each_overlap(Extent2 in, Extent2 out, const ConvSpec& s, std::size_t ki, std::size_t kj, F f) {
    const auto ph = static_cast<std::ptrdiff_t>(s.padding.h), pw = static_cast<std::ptrdiff_t>(s.padding.w);
    const auto lo = std::max<std::ptrdiff_t>(0, pw - static_cast<std::ptrdiff_t>(kj));
    const auto hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(out.w),
                                             static_cast<std::ptrdiff_t>(in.w) + pw - static_cast<std::ptrdiff_t>(kj));
    if (lo >= hi) return;
    for (std::size_t oy = 0; oy < out.h; ++oy) {
        const auto iy = static_cast<std::ptrdiff_t>(oy + ki) - ph;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
        f(oy, static_cast<std::size_t>(iy), static_cast<std::size_t>(lo), static_cast<std::size_t>(hi),
          static_cast<std::ptrdiff_t>(kj) - pw);
    }
}

inline void direct_conv_forward(const double* x, const double* w, double* y, Extent2 in, Extent2 out,
                                const ConvSpec& s) {
    for (std::size_t o = 0; o < s.out_channels; ++o)
        for (std::size_t c = 0; c < s.in_channels; ++c)
            for (std::size_t ki = 0; ki < s.kernel.h; ++ki)
                for (std::size_t kj = 0; kj < s.kernel.w; ++kj) {
                    const double wv = w[((o * s.in_channels + c) * s.kernel.h + ki) * s.kernel.w + kj];
                    for_each_overlap(in, out, s, ki, kj,
                                     [&](std::size_t oy, std::size_t iy, std::size_t lo, std::size_t hi, std::ptrdiff_t off) {
                                         double* yr = y + (o * out.h + oy) * out.w;
                                         const double* xr = x + (c * in.h + iy) * in.w + off;
                                         for (std::size_t ox = lo; ox < hi; ++ox) yr[ox] += wv * xr[ox];
                                     });
                }
}

inline void direct_conv_backward(const double* x, const double* w, const double* dy, double* dx, double* dw,
                                 Extent2 in, Extent2 out, const ConvSpec& s) {
    for (std::size_t o = 0; o < s.out_channels; ++o)
        for (std::size_t c = 0; c < s.in_channels; ++c)
            for (std::size_t ki = 0; ki < s.kernel.h; ++ki)
                for (std::size_t kj = 0; kj < s.kernel.w; ++kj) {
                    const std::size_t widx = ((o * s.in_channels + c) * s.kernel.h + ki) * s.kernel.w + kj;
                    const double wv = w[widx];
                    double acc = 0.0;
                    for_each_overlap(in, out, s, ki, kj,
                                     [&](std::size_t oy, std::size_t iy, std::size_t lo, std::size_t hi, std::ptrdiff_t off) {
                                         const double* gr = dy + (o * out.h + oy) * out.w;
                                         const std::size_t xo = (c * in.h + iy) * in.w;
                                         if (dw) {
                                             const double* xr = x + xo + off;
                                             for (std::size_t ox = lo; ox < hi; ++ox) acc += gr[ox] * xr[ox];
                                         }
                                         if (dx) {
                                             double* dr = dx + xo + off;
                                             for (std::size_t ox = lo; ox < hi; ++ox) dr[ox] += wv * gr[ox];
                                         }
                                     });
                    if (dw) dw[widx] += acc;
                }
}

inline bool is_pointwise(const ConvSpec& s) {
    return s.kernel == Extent2{1, 1} && s.stride == Extent2{1, 1} && s.padding == Extent2{0, 0};
}

inline void require_rank4(const Tensor& t, const char* op, const char* what) {
    if (t.rank() != 4)
        throw ShapeError(std::string(op) + ": " + what + " must be (batch, channels, height, width), got " +
                         shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution family

/// Zero-padded correlation (no kernel flip). `bias` may be undefined.
inline Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, const ConvSpec& spec) {
    detail::require_rank4(input, "conv2d", "input");
    spec.validate();
    if (input.dim(1) != spec.in_channels)
        throw ShapeError("conv2d: input channels " + std::to_string(input.dim(1)) + " != spec.in_channels " +
                         std::to_string(spec.in_channels));
    const Shape wshape{spec.out_channels, spec.in_channels, spec.kernel.h, spec.kernel.w};
    if (weights.shape() != wshape)
        throw ShapeError("conv2d: weight shape " + shape_str(weights.shape()) + " != expected " + shape_str(wshape));
    if (bias.defined() && bias.shape() != Shape{spec.out_channels})
        throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " != (" +
                         std::to_string(spec.out_channels) + ")");

    const std::size_t batch = input.dim(0);
    const Extent2 in{input.dim(2), input.dim(3)};
    const Extent2 out = spec.conv_output(in);
    const std::size_t in_plane = spec.in_channels * in.h * in.w;
    const std::size_t out_plane = out.h * out.w;
    const std::size_t patch = spec.patch_size();
    const bool pointwise = detail::is_pointwise(spec);

    const bool direct = !pointwise && detail::prefers_direct(spec);

    detail::Buffer result(batch * spec.out_channels * out_plane);
    detail::Buffer col(pointwise || direct ? 0 : patch * out_plane);
    detail::ConstMatMap w(weights.values().data(), static_cast<Eigen::Index>(spec.out_channels),
                          static_cast<Eigen::Index>(patch));
    for (std::size_t n = 0; direct && n < batch; ++n) {
        double* y = result.data() + n * spec.out_channels * out_plane;
        for (std::size_t o = 0; o < spec.out_channels; ++o)
            std::fill(y + o * out_plane, y + (o + 1) * out_plane, bias.defined() ? bias.values()[o] : 0.0);
        detail::direct_conv_forward(input.values().data() + n * in_plane, weights.values().data(), y, in, out, spec);
    }
    for (std::size_t n = 0; !direct && n < batch; ++n) {
        const double* x = input.values().data() + n * in_plane;
        if (!pointwise) detail::im2col(x, spec.in_channels, in, spec, out, col.data());
        detail::ConstMatMap cols(pointwise ? x : col.data(), static_cast<Eigen::Index>(patch),
                                 static_cast<Eigen::Index>(out_plane));
        detail::MatMap y(result.data() + n * spec.out_channels * out_plane,
                         static_cast<Eigen::Index>(spec.out_channels), static_cast<Eigen::Index>(out_plane));
        y.noalias() = w * cols;
        if (bias.defined())
            for (std::size_t o = 0; o < spec.out_channels; ++o)
                y.row(static_cast<Eigen::Index>(o)).array() += bias.values()[o];
    }

    Tensor x = input, wt = weights, b = bias;
    auto back = [x, wt, b, spec, in, out, batch, pointwise, direct](detail::Node& self) mutable {
        const std::size_t in_plane = spec.in_channels * in.h * in.w;
        const std::size_t out_plane = out.h * out.w;
        if (direct) {
            for (std::size_t n = 0; n < batch; ++n) {
                const double* dy = self.grad.data() + n * spec.out_channels * out_plane;
                detail::direct_conv_backward(x.values().data() + n * in_plane, wt.values().data(), dy,
                                             wants_grad(x) ? x.mutable_grad().data() + n * in_plane : nullptr,
                                             wants_grad(wt) ? wt.mutable_grad().data() : nullptr, in, out, spec);
                if (wants_grad(b)) {
                    auto db = b.mutable_grad();
                    for (std::size_t o = 0; o < spec.out_channels; ++o)
                        for (std::size_t i = 0; i < out_plane; ++i) db[o] += dy[o * out_plane + i];
                }
            }
            return;
        }
        const std::size_t patch = spec.patch_size();
        const auto O = static_cast<Eigen::Index>(spec.out_channels);
        const auto P = static_cast<Eigen::Index>(patch);
        const auto Q = static_cast<Eigen::Index>(out_plane);
        detail::Buffer col(pointwise ? 0 : patch * out_plane);
        detail::Buffer dcol(wants_grad(x) && !pointwise ? patch * out_plane : 0);
        detail::ConstMatMap w(wt.values().data(), O, P);
        for (std::size_t n = 0; n < batch; ++n) {
            detail::ConstMatMap dy(self.grad.data() + n * spec.out_channels * out_plane, O, Q);
            const double* xn = x.values().data() + n * in_plane;
            if (wants_grad(wt)) {
                if (!pointwise) detail::im2col(xn, spec.in_channels, in, spec, out, col.data());
                detail::ConstMatMap cols(pointwise ? xn : col.data(), P, Q);
                detail::MatMap dw(wt.mutable_grad().data(), O, P);
                dw.noalias() += dy * cols.transpose();
            }
            if (wants_grad(b)) {
                auto db = b.mutable_grad();
                for (Eigen::Index o = 0; o < O; ++o) db[static_cast<std::size_t>(o)] += dy.row(o).sum();
            }
            if (wants_grad(x)) {
                double* dx = x.mutable_grad().data() + n * in_plane;
                if (pointwise) {
                    detail::MatMap dxm(dx, P, Q);
                    dxm.noalias() += w.transpose() * dy;
                } else {
                    detail::MatMap dc(dcol.data(), P, Q);
                    dc.noalias() = w.transpose() * dy;
                    detail::col2im(dcol.data(), spec.in_channels, in, spec, out, dx);
                }
            }
        }
    };
    return make_result({batch, spec.out_channels, out.h, out.w}, std::move(result), {input, weights, bias},
                       std::move(back), "conv2d");
}

/// Transposed convolution, the adjoint of conv2d with the same geometry.
/// Weights are (in_channels, out_channels, kh, kw); the output must be exactly
/// twice the input resolution.
inline Tensor deconv2d(const Tensor& input, const Tensor& weights, const ConvSpec& spec) {
    detail::require_rank4(input, "deconv2d", "input");
    spec.validate();
    if (input.dim(1) != spec.in_channels)
        throw ShapeError("deconv2d: input channels " + std::to_string(input.dim(1)) + " != spec.in_channels " +
                         std::to_string(spec.in_channels));
    const Shape wshape{spec.in_channels, spec.out_channels, spec.kernel.h, spec.kernel.w};
    if (weights.shape() != wshape)
        throw ShapeError("deconv2d: weight shape " + shape_str(weights.shape()) + " != expected " +
                         shape_str(wshape));
    const std::size_t batch = input.dim(0);
    const Extent2 in{input.dim(2), input.dim(3)};
    const Extent2 out = spec.deconv_output(in);
    if (out.h != 2 * in.h || out.w != 2 * in.w)
        throw ShapeError("deconv2d: configuration maps " + std::to_string(in.h) + "x" + std::to_string(in.w) +
                         " to " + std::to_string(out.h) + "x" + std::to_string(out.w) +
                         ", expected exact doubling (kernel 4, stride 2, padding 1)");

    // Geometry of the forward conv this operator is the adjoint of: out_channels -> in_channels.
    const ConvSpec adj{spec.out_channels, spec.in_channels, spec.kernel, spec.stride, spec.padding};
    const std::size_t in_plane = in.h * in.w;
    const std::size_t out_size = spec.out_channels * out.h * out.w;
    const std::size_t patch = adj.patch_size();
    const auto Ci = static_cast<Eigen::Index>(spec.in_channels);
    const auto P = static_cast<Eigen::Index>(patch);
    const auto Q = static_cast<Eigen::Index>(in_plane);

    detail::Buffer result(batch * out_size, 0.0);
    detail::Buffer col(patch * in_plane);
    detail::ConstMatMap w(weights.values().data(), Ci, P);
    for (std::size_t n = 0; n < batch; ++n) {
        detail::ConstMatMap xn(input.values().data() + n * spec.in_channels * in_plane, Ci, Q);
        detail::MatMap c(col.data(), P, Q);
        c.noalias() = w.transpose() * xn;
        detail::col2im(col.data(), spec.out_channels, out, adj, in, result.data() + n * out_size);
    }

    Tensor x = input, wt = weights;
    auto back = [x, wt, adj, in, out, batch, Ci, P, Q](detail::Node& self) mutable {
        const std::size_t out_size = adj.in_channels * out.h * out.w;
        detail::Buffer col(static_cast<std::size_t>(P * Q));
        detail::ConstMatMap w(wt.values().data(), Ci, P);
        for (std::size_t n = 0; n < batch; ++n) {
            detail::im2col(self.grad.data() + n * out_size, adj.in_channels, out, adj, in, col.data());
            detail::ConstMatMap cols(col.data(), P, Q);
            if (wants_grad(x)) {
                detail::MatMap dx(x.mutable_grad().data() + n * static_cast<std::size_t>(Ci * Q), Ci, Q);
                dx.noalias() += w * cols;
            }
            if (wants_grad(wt)) {
                detail::ConstMatMap xn(x.values().data() + n * static_cast<std::size_t>(Ci * Q), Ci, Q);
                detail::MatMap dw(wt.mutable_grad().data(), Ci, P);
                dw.noalias() += xn * cols.transpose();
            }
        }
    };
    return make_result({batch, spec.out_channels, out.h, out.w}, std::move(result), {input, weights},
                       std::move(back), "deconv2d");
}

/// 2x2 max pooling with stride 2. Ties go to the first cell in row-major order.
inline Tensor maxpool2d(const Tensor& input) {
    detail::require_rank4(input, "maxpool2d", "input");
    const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (H % 2 != 0 || W % 2 != 0)
        throw ShapeError("maxpool2d: odd spatial extent " + std::to_string(H) + "x" + std::to_string(W) +
                         "; resize inputs so height and width are divisible by 2^(number of pools)");
    const std::size_t Ho = H / 2, Wo = W / 2;
    detail::Buffer result(N * C * Ho * Wo);
    auto argmax = std::make_shared<std::vector<std::size_t>>(result.size());
    const auto& v = input.values();
    for (std::size_t p = 0; p < N * C; ++p)
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                const std::size_t base = p * H * W + 2 * oy * W + 2 * ox;
                const std::size_t cand[4] = {base, base + 1, base + W, base + W + 1};
                std::size_t best = cand[0];
                for (std::size_t k = 1; k < 4; ++k)
                    if (v[cand[k]] > v[best]) best = cand[k];
                const std::size_t o = (p * Ho + oy) * Wo + ox;
                result[o] = v[best];
                (*argmax)[o] = best;
            }
    Tensor x = input;
    return make_result({N, C, Ho, Wo}, std::move(result), {input},
                       [x, argmax](detail::Node& self) mutable {
                           auto g = x.mutable_grad();
                           for (std::size_t o = 0; o < argmax->size(); ++o) g[(*argmax)[o]] += self.grad[o];
                       },
                       "maxpool2d");
}

// ---------------------------------------------------------------------------
// Channel plumbing

inline Tensor concat_channels(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_channels: no parts");
    for (std::size_t i = 0; i < parts.size(); ++i) detail::require_rank4(parts[i], "concat_channels", "part");
    const auto& ref = parts.front().shape();
    std::size_t channels = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const auto& s = parts[i].shape();
        if (s[0] != ref[0] || s[2] != ref[2] || s[3] != ref[3])
            throw ShapeError("concat_channels: part " + std::to_string(i) + " has shape " + shape_str(s) +
                             ", incompatible with part 0 shape " + shape_str(ref));
        channels += s[1];
    }
    const std::size_t N = ref[0], plane = ref[2] * ref[3];
    detail::Buffer result(N * channels * plane);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const std::size_t block = p.dim(1) * plane;
        for (std::size_t n = 0; n < N; ++n)
            std::copy_n(p.values().data() + n * block, block, result.data() + (n * channels + off) * plane);
        off += p.dim(1);
    }
    auto back = [parts, offsets, channels, N, plane](detail::Node& self) mutable {
        for (std::size_t i = 0; i < parts.size(); ++i) {
            if (!wants_grad(parts[i])) continue;
            const std::size_t block = parts[i].dim(1) * plane;
            auto g = parts[i].mutable_grad();
            for (std::size_t n = 0; n < N; ++n) {
                const double* src = self.grad.data() + (n * channels + offsets[i]) * plane;
                for (std::size_t k = 0; k < block; ++k) g[n * block + k] += src[k];
            }
        }
    };
    return make_result({N, channels, ref[2], ref[3]}, std::move(result), parts, std::move(back), "concat_channels");
}

inline Tensor slice_channels(const Tensor& input, std::size_t begin, std::size_t count) {
    detail::require_rank4(input, "slice_channels", "input");
    const std::size_t N = input.dim(0), C = input.dim(1), plane = input.dim(2) * input.dim(3);
    if (count == 0 || begin + count > C)
        throw ShapeError("slice_channels: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + std::to_string(C) + " channels");
    detail::Buffer result(N * count * plane);
    for (std::size_t n = 0; n < N; ++n)
        std::copy_n(input.values().data() + (n * C + begin) * plane, count * plane,
                    result.data() + n * count * plane);
    Tensor x = input;
    return make_result({N, count, input.dim(2), input.dim(3)}, std::move(result), {input},
                       [x, N, C, begin, count, plane](detail::Node& self) mutable {
                           auto g = x.mutable_grad();
                           for (std::size_t n = 0; n < N; ++n)
                               for (std::size_t k = 0; k < count * plane; ++k)
                                   g[(n * C + begin) * plane + k] += self.grad[n * count * plane + k];
                       },
                       "slice_channels");
}

/// Replicates a single-channel tensor to `channels` channels.
inline Tensor repeat_channels(const Tensor& input, std::size_t channels) {
    detail::require_rank4(input, "repeat_channels", "input");
    if (input.dim(1) != 1) throw ShapeError("repeat_channels: input must have one channel");
    return concat_channels(std::vector<Tensor>(channels, input));
}

/// Stacks equally-shaped tensors along a new leading batch dimension.
inline Tensor stack(const std::vector<Tensor>& items) {
    if (items.empty()) throw ShapeError("stack: no items");
    const Shape& ref = items.front().shape();
    detail::Buffer result;
    result.reserve(items.size() * items.front().numel());
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (items[i].shape() != ref)
            throw ShapeError("stack: item " + std::to_string(i) + " has shape " + shape_str(items[i].shape()) +
                             ", expected " + shape_str(ref));
        result.insert(result.end(), items[i].values().begin(), items[i].values().end());
    }
    Shape s{items.size()};
    s.insert(s.end(), ref.begin(), ref.end());
    const std::size_t block = items.front().numel();
    return make_result(std::move(s), std::move(result), items,
                       [items, block](detail::Node& self) mutable {
                           for (std::size_t i = 0; i < items.size(); ++i) {
                               if (!wants_grad(items[i])) continue;
                               auto g = items[i].mutable_grad();
                               for (std::size_t k = 0; k < block; ++k) g[k] += self.grad[i * block + k];
                           }
                       },
                       "stack");
}

// ---------------------------------------------------------------------------
// Elementwise

/// Applies `f` elementwise; `df` gives the derivative from (input, output).
template <typename F, typename DF>
Tensor map(const Tensor& input, F f, DF df, std::string name) {
    detail::Buffer result(input.numel());
    const auto v = input.values();
    for (std::size_t i = 0; i < result.size(); ++i) result[i] = f(v[i]);
    Tensor x = input;
    auto back = [x, df](detail::Node& self) mutable {
        auto g = x.mutable_grad();
        const auto v = x.values();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(v[i], self.value[i]);
    };
    return make_result(input.shape(), std::move(result), {input}, std::move(back), std::move(name));
}

inline Tensor relu(const Tensor& x) {
    return map(
        x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; },
        "relu");
}

inline Tensor log(const Tensor& x) {
    return map(
        x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; }, "log");
}

/// Clamps into [lo, hi]; gradient passes only strictly inside the interval.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
    return map(
        x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
        [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; }, "clamp");
}

inline Tensor scale(const Tensor& x, double s) {
    return map(
        x, [s](double v) { return s * v; }, [s](double, double) { return s; }, "scale");
}

inline Tensor add_scalar(const Tensor& x, double s) {
    return map(
        x, [s](double v) { return v + s; }, [](double, double) { return 1.0; }, "add_scalar");
}

namespace detail {

template <typename F, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, F f, DA da, DB db, const char* name) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    detail::Buffer result(a.numel());
    const auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < result.size(); ++i) result[i] = f(av[i], bv[i]);
    Tensor x = a, y = b;
    auto back = [x, y, da, db](detail::Node& self) mutable {
        const auto av = x.values(), bv = y.values();
        if (wants_grad(x)) {
            auto g = x.mutable_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * da(av[i], bv[i]);
        }
        if (wants_grad(y)) {
            auto g = y.mutable_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * db(av[i], bv[i]);
        }
    };
    return make_result(a.shape(), std::move(result), {a, b}, std::move(back), name);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; }, "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; }, "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; }, "mul");
}

/// Per-pixel pair (Pr(y=1), Pr(y=0)) = (e^z1, e^z0) / (e^z0 + e^z1), computed with
/// max subtraction.
inline std::pair<Tensor, Tensor> softmax_pairwise(const Tensor& z0, const Tensor& z1) {
    if (z0.shape() != z1.shape())
        throw ShapeError("softmax_pairwise: shape mismatch " + shape_str(z0.shape()) + " vs " +
                         shape_str(z1.shape()));
    const std::size_t n = z0.numel();
    detail::Buffer fg(n), bg(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double a = z0.values()[i], b = z1.values()[i];
        const double m = std::max(a, b);
        const double e0 = std::exp(a - m), e1 = std::exp(b - m);
        const double s = e0 + e1;
        fg[i] = e1 / s;
        bg[i] = e0 / s;
    }
    const Tensor a = z0, b = z1;
    // d fg / d z1 = fg * bg = -d fg / d z0, and symmetrically for bg.
    auto back_for = [](Tensor up, Tensor down) {
        return [up, down](detail::Node& self) mutable {
            const std::span<double> gu = wants_grad(up) ? up.mutable_grad() : std::span<double>{};
            const std::span<double> gd = wants_grad(down) ? down.mutable_grad() : std::span<double>{};
            for (std::size_t i = 0; i < self.value.size(); ++i) {
                const double p = self.value[i];
                const double d = self.grad[i] * p * (1.0 - p);
                if (!gu.empty()) gu[i] += d;
                if (!gd.empty()) gd[i] -= d;
            }
        };
    };
    Tensor fg_t = make_result(z0.shape(), std::move(fg), {z0, z1}, back_for(b, a), "softmax_fg");
    Tensor bg_t = make_result(z0.shape(), std::move(bg), {z0, z1}, back_for(a, b), "softmax_bg");
    return {fg_t, bg_t};
}

/// (log Pr(y=1), log Pr(y=0)) from the same scores. Unlike log of the softmax output this
/// never saturates: d log fg / d z1 = bg, which stays near 1 when fg underflows.
inline std::pair<Tensor, Tensor> log_softmax_pairwise(const Tensor& z0, const Tensor& z1) {
    if (z0.shape() != z1.shape())
        throw ShapeError("log_softmax_pairwise: shape mismatch " + shape_str(z0.shape()) + " vs " +
                         shape_str(z1.shape()));
    const std::size_t n = z0.numel();
    detail::Buffer lfg(n), lbg(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double a = z0.values()[i], b = z1.values()[i];
        const double m = std::max(a, b);
        const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
        lfg[i] = b - lse;
        lbg[i] = a - lse;
    }
    const Tensor a = z0, b = z1;
    // d log p_up / d z_up = 1 - p_up and d log p_up / d z_down = -(1 - p_up).
    auto back_for = [](Tensor up, Tensor down) {
        return [up, down](detail::Node& self) mutable {
            const std::span<double> gu = wants_grad(up) ? up.mutable_grad() : std::span<double>{};
            const std::span<double> gd = wants_grad(down) ? down.mutable_grad() : std::span<double>{};
            for (std::size_t i = 0; i < self.value.size(); ++i) {
                const double d = self.grad[i] * -std::expm1(self.value[i]);
                if (!gu.empty()) gu[i] += d;
                if (!gd.empty()) gd[i] -= d;
            }
        };
    };
    Tensor fg_t = make_result(z0.shape(), std::move(lfg), {z0, z1}, back_for(b, a), "log_softmax_fg");
    Tensor bg_t = make_result(z0.shape(), std::move(lbg), {z0, z1}, back_for(a, b), "log_softmax_bg");
    return {fg_t, bg_t};
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    Tensor in = x;
    return make_result({1}, detail::Buffer{s}, {x},
                       [in](detail::Node& self) mutable {
                           for (double& g : in.mutable_grad()) g += self.grad[0];
                       },
                       "sum");
}

/// Sums everything but the leading dimension: (N, ...) -> (N).
inline Tensor sum_per_sample(const Tensor& x) {
    if (x.rank() < 1) throw ShapeError("sum_per_sample: rank-0 input");
    const std::size_t N = x.dim(0), block = x.numel() / N;
    detail::Buffer result(N, 0.0);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < block; ++k) result[n] += x.values()[n * block + k];
    Tensor in = x;
    return make_result({N}, std::move(result), {x},
                       [in, block](detail::Node& self) mutable {
                           auto g = in.mutable_grad();
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i / block];
                       },
                       "sum_per_sample");
}

/// Euclidean norm of each sample: (N, ...) -> (N). The gradient at a zero
/// sample is taken as zero.
inline Tensor l2_norm_per_sample(const Tensor& x) {
    if (x.rank() < 1) throw ShapeError("l2_norm_per_sample: rank-0 input");
    const std::size_t N = x.dim(0), block = x.numel() / N;
    detail::Buffer result(N, 0.0);
    for (std::size_t n = 0; n < N; ++n) {
        double s = 0.0;
        for (std::size_t k = 0; k < block; ++k) s += x.values()[n * block + k] * x.values()[n * block + k];
        result[n] = std::sqrt(s);
    }
    Tensor in = x;
    return make_result({N}, std::move(result), {x},
                       [in, block](detail::Node& self) mutable {
                           auto g = in.mutable_grad();
                           const auto v = in.values();
                           for (std::size_t i = 0; i < g.size(); ++i) {
                               const double norm = self.value[i / block];
                               if (norm > 0.0) g[i] += self.grad[i / block] * v[i] / norm;
                           }
                       },
                       "l2_norm_per_sample");
}

/// Inner product of the values of two equally-shaped tensors (no tape).
inline double dot_values(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("dot_values: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a.values()[i] * b.values()[i];
    return s;
}

inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace sfcn
