#pragma once

// Direct 2-D convolution (zero padding, stride 1 or 2) and nearest
// neighbor upsampling. Loops are ordered so the innermost dimension is
// the contiguous output column.

#include "kp3d/tensor.hpp"

namespace kp3d {

namespace detail {

// 3x3, pad 1 fast path: for every output row the nine kernel taps are
// applied together, so each pass over an output row performs nine
// multiply-adds per element instead of one.
template <typename T>
void conv3x3_forward(const T* in, const T* w, const T* bias, T* out, int cin, int h, int wdt,
                     int cout, int stride, int oh, int ow) {
    for (int co = 0; co < cout; ++co) {
        T* o_plane = out + static_cast<std::size_t>(co) * oh * ow;
        T b = bias ? bias[co] : T(0);
        for (int i = 0; i < oh * ow; ++i) o_plane[i] = b;
        for (int ci = 0; ci < cin; ++ci) {
            const T* i_plane = in + static_cast<std::size_t>(ci) * h * wdt;
            const T* wk = w + ((static_cast<std::size_t>(co) * cin + ci) * 3) * 3;
            for (int oy = 0; oy < oh; ++oy) {
                T* orow = o_plane + static_cast<std::size_t>(oy) * ow;
                int cy = oy * stride;  // input row aligned with kernel centre
                for (int ky = 0; ky < 3; ++ky) {
                    int iy = cy + ky - 1;
                    if (iy < 0 || iy >= h) continue;
                    const T* ir = i_plane + static_cast<std::size_t>(iy) * wdt;
                    T w0 = wk[ky * 3], w1 = wk[ky * 3 + 1], w2 = wk[ky * 3 + 2];
                    if (stride == 1) {
                        orow[0] += w1 * ir[0] + w2 * ir[1];
                        for (int ox = 1; ox < ow - 1; ++ox)
                            orow[ox] += w0 * ir[ox - 1] + w1 * ir[ox] + w2 * ir[ox + 1];
                        if (ow > 1) orow[ow - 1] += w0 * ir[ow - 2] + w1 * ir[ow - 1];
                    } else {
                        orow[0] += w1 * ir[0] + w2 * ir[1];
                        int hi = ow;
                        while (hi > 1 && (hi - 1) * 2 + 1 >= wdt) --hi;
                        for (int ox = 1; ox < hi; ++ox) {
                            const T* ic = ir + 2 * ox;
                            orow[ox] += w0 * ic[-1] + w1 * ic[0] + w2 * ic[1];
                        }
                        for (int ox = hi; ox < ow; ++ox) {
                            const T* ic = ir + 2 * ox;
                            orow[ox] += w0 * ic[-1] + w1 * ic[0];
                        }
                    }
                }
            }
        }
    }
}

// Backward companion of conv3x3_forward: per output row the nine taps
// contribute to the weight gradient and are scattered into the three
// overlapped input-gradient rows together.
template <typename T>
void conv3x3_backward(const T* in, const T* w, const T* gout, T* gin, T* gw, int cin, int h,
                      int wdt, int cout, int stride, int oh, int ow) {
    for (int co = 0; co < cout; ++co) {
        const T* g_plane = gout + static_cast<std::size_t>(co) * oh * ow;
        for (int ci = 0; ci < cin; ++ci) {
            const T* i_plane = in + static_cast<std::size_t>(ci) * h * wdt;
            T* gi_plane = gin ? gin + static_cast<std::size_t>(ci) * h * wdt : nullptr;
            const T* wk = w + ((static_cast<std::size_t>(co) * cin + ci) * 3) * 3;
            T* gwk = gw ? gw + ((static_cast<std::size_t>(co) * cin + ci) * 3) * 3 : nullptr;
            T wacc[9] = {};
            for (int oy = 0; oy < oh; ++oy) {
                const T* grow = g_plane + static_cast<std::size_t>(oy) * ow;
                int cy = oy * stride;
                for (int ky = 0; ky < 3; ++ky) {
                    int iy = cy + ky - 1;
                    if (iy < 0 || iy >= h) continue;
                    const T* ir = i_plane + static_cast<std::size_t>(iy) * wdt;
                    T* gir = gi_plane ? gi_plane + static_cast<std::size_t>(iy) * wdt : nullptr;
                    T a0 = T(0), a1 = T(0), a2 = T(0);
                    T w0 = wk[ky * 3], w1 = wk[ky * 3 + 1], w2 = wk[ky * 3 + 2];
                    if (stride == 1) {
                        a1 += grow[0] * ir[0];
                        if (ow > 1) a2 += grow[0] * ir[1];
                        if (gir) {
                            gir[0] += w1 * grow[0];
                            if (ow > 1) gir[1] += w2 * grow[0];
                        }
                        for (int ox = 1; ox < ow - 1; ++ox) {
                            T g = grow[ox];
                            a0 += g * ir[ox - 1];
                            a1 += g * ir[ox];
                            a2 += g * ir[ox + 1];
                            if (gir) {
                                gir[ox - 1] += w0 * g;
                                gir[ox] += w1 * g;
                                gir[ox + 1] += w2 * g;
                            }
                        }
                        if (ow > 1) {
                            T g = grow[ow - 1];
                            a0 += g * ir[ow - 2];
                            a1 += g * ir[ow - 1];
                            if (gir) {
                                gir[ow - 2] += w0 * g;
                                gir[ow - 1] += w1 * g;
                            }
                        }
                    } else {
                        int hi = ow;
                        while (hi > 1 && (hi - 1) * 2 + 1 >= wdt) --hi;
                        {
                            T g = grow[0];
                            a1 += g * ir[0];
                            if (wdt > 1) a2 += g * ir[1];
                            if (gir) {
                                gir[0] += w1 * g;
                                if (wdt > 1) gir[1] += w2 * g;
                            }
                        }
                        for (int ox = 1; ox < hi; ++ox) {
                            T g = grow[ox];
                            const T* ic = ir + 2 * ox;
                            a0 += g * ic[-1];
                            a1 += g * ic[0];
                            a2 += g * ic[1];
                            if (gir) {
                                T* gc = gir + 2 * ox;
                                gc[-1] += w0 * g;
                                gc[0] += w1 * g;
                                gc[1] += w2 * g;
                            }
                        }
                        for (int ox = hi; ox < ow; ++ox) {
                            T g = grow[ox];
                            const T* ic = ir + 2 * ox;
                            a0 += g * ic[-1];
                            a1 += g * ic[0];
                            if (gir) {
                                T* gc = gir + 2 * ox;
                                gc[-1] += w0 * g;
                                gc[0] += w1 * g;
                            }
                        }
                    }
                    wacc[ky * 3] += a0;
                    wacc[ky * 3 + 1] += a1;
                    wacc[ky * 3 + 2] += a2;
                }
            }
            if (gwk)
                for (int i = 0; i < 9; ++i) gwk[i] += wacc[i];
        }
    }
}

template <typename T>
void conv2d_forward(const T* in, const T* w, const T* bias, T* out, int cin, int h, int wdt,
                    int cout, int kh, int kw, int stride, int oh, int ow) {
    if (kh == 3 && kw == 3 && h >= 2 && wdt >= 2) {
        conv3x3_forward(in, w, bias, out, cin, h, wdt, cout, stride, oh, ow);
        return;
    }
    int ph = kh / 2, pw = kw / 2;
    for (int co = 0; co < cout; ++co) {
        T* o_plane = out + static_cast<std::size_t>(co) * oh * ow;
        T b = bias ? bias[co] : T(0);
        for (int i = 0; i < oh * ow; ++i) o_plane[i] = b;
        for (int ci = 0; ci < cin; ++ci) {
            const T* i_plane = in + static_cast<std::size_t>(ci) * h * wdt;
            const T* wk = w + ((static_cast<std::size_t>(co) * cin + ci) * kh) * kw;
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                    T wv = wk[ky * kw + kx];
                    for (int oy = 0; oy < oh; ++oy) {
                        int iy = oy * stride + ky - ph;
                        if (iy < 0 || iy >= h) continue;
                        // valid ox range: 0 <= ox*stride + kx - pw < wdt
                        int lo = 0;
                        while (lo < ow && lo * stride + kx - pw < 0) ++lo;
                        int hi = ow;
                        while (hi > lo && (hi - 1) * stride + kx - pw >= wdt) --hi;
                        const T* irow = i_plane + static_cast<std::size_t>(iy) * wdt + kx - pw;
                        T* orow = o_plane + static_cast<std::size_t>(oy) * ow;
                        if (stride == 1) {
                            for (int ox = lo; ox < hi; ++ox) orow[ox] += wv * irow[ox];
                        } else {
                            for (int ox = lo; ox < hi; ++ox) orow[ox] += wv * irow[ox * stride];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace detail

// input (Cin,H,W), weight (Cout,Cin,kh,kw), bias (Cout) -> (Cout,OH,OW)
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride) {
    const Shape& si = input.shape();
    const Shape& sw = weight.shape();
    require(si.size() == 3, "conv2d: input must be (C,H,W), got " + shape_str(si));
    require(sw.size() == 4, "conv2d: weight must be (Cout,Cin,kh,kw), got " + shape_str(sw));
    require(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
    int cin = si[0], h = si[1], w = si[2];
    require(sw[1] == cin, "conv2d: channel mismatch, input " + shape_str(si) + " vs weight " +
                              shape_str(sw));
    int cout = sw[0], kh = sw[2], kw = sw[3];
    require(bias.shape() == Shape{cout}, "conv2d: bias must be (Cout)");
    int ph = kh / 2, pw = kw / 2;
    int oh = (h + 2 * ph - kh) / stride + 1;
    int ow = (w + 2 * pw - kw) / stride + 1;

    std::vector<T> out(static_cast<std::size_t>(cout) * oh * ow);
    detail::conv2d_forward(input.data().data(), weight.data().data(), bias.data().data(),
                           out.data(), cin, h, w, cout, kh, kw, stride, oh, ow);

    auto bwd = [cin, h, w, cout, kh, kw, stride, oh, ow](Node<T>& n) {
        int ph = kh / 2, pw = kw / 2;
        auto& pi = *n.parents[0];
        auto& pw_ = *n.parents[1];
        auto& pb = *n.parents[2];
        const T* gout = n.grad.data();
        if (pb.requires_grad) {
            for (int co = 0; co < cout; ++co) {
                T acc = T(0);
                const T* g = gout + static_cast<std::size_t>(co) * oh * ow;
                for (int i = 0; i < oh * ow; ++i) acc += g[i];
                pb.grad[co] += acc;
            }
        }
        if (kh == 3 && kw == 3 && h >= 2 && w >= 2) {
            detail::conv3x3_backward(pi.value.data(), pw_.value.data(), gout,
                                     pi.requires_grad ? pi.grad.data() : nullptr,
                                     pw_.requires_grad ? pw_.grad.data() : nullptr, cin, h, w,
                                     cout, stride, oh, ow);
            return;
        }
        for (int co = 0; co < cout; ++co) {
            const T* g_plane = gout + static_cast<std::size_t>(co) * oh * ow;
            for (int ci = 0; ci < cin; ++ci) {
                const T* i_plane = pi.value.data() + static_cast<std::size_t>(ci) * h * w;
                T* gi_plane =
                    pi.requires_grad ? pi.grad.data() + static_cast<std::size_t>(ci) * h * w
                                     : nullptr;
                const T* wk =
                    pw_.value.data() + ((static_cast<std::size_t>(co) * cin + ci) * kh) * kw;
                T* gw = pw_.requires_grad
                            ? pw_.grad.data() + ((static_cast<std::size_t>(co) * cin + ci) * kh) * kw
                            : nullptr;
                for (int ky = 0; ky < kh; ++ky) {
                    for (int kx = 0; kx < kw; ++kx) {
                        T wv = wk[ky * kw + kx];
                        T wacc = T(0);
                        for (int oy = 0; oy < oh; ++oy) {
                            int iy = oy * stride + ky - ph;
                            if (iy < 0 || iy >= h) continue;
                            int lo = 0;
                            while (lo < ow && lo * stride + kx - pw < 0) ++lo;
                            int hi = ow;
                            while (hi > lo && (hi - 1) * stride + kx - pw >= w) --hi;
                            const T* grow = g_plane + static_cast<std::size_t>(oy) * ow;
                            const T* irow =
                                i_plane + static_cast<std::size_t>(iy) * w + kx - pw;
                            if (gw) {
                                if (stride == 1) {
                                    for (int ox = lo; ox < hi; ++ox) wacc += grow[ox] * irow[ox];
                                } else {
                                    for (int ox = lo; ox < hi; ++ox)
                                        wacc += grow[ox] * irow[ox * stride];
                                }
                            }
                            if (gi_plane) {
                                T* girow = gi_plane + static_cast<std::size_t>(iy) * w + kx - pw;
                                if (stride == 1) {
                                    for (int ox = lo; ox < hi; ++ox) girow[ox] += wv * grow[ox];
                                } else {
                                    for (int ox = lo; ox < hi; ++ox)
                                        girow[ox * stride] += wv * grow[ox];
                                }
                            }
                        }
                        if (gw) gw[ky * kw + kx] += wacc;
                    }
                }
            }
        }
    };

    return detail::make_op<T>("conv2d", {cout, oh, ow}, std::move(out), {input, weight, bias},
                              std::move(bwd));
}

// Nearest-neighbor 2x upsampling: (C,H,W) -> (C,2H,2W).
template <typename T>
Tensor<T> upsample2(const Tensor<T>& input) {
    const Shape& s = input.shape();
    require(s.size() == 3, "upsample2: input must be (C,H,W), got " + shape_str(s));
    int c = s[0], h = s[1], w = s[2];
    std::vector<T> out(static_cast<std::size_t>(c) * 4 * h * w);
    const auto& iv = input.data();
    for (int ci = 0; ci < c; ++ci) {
        const T* ip = iv.data() + static_cast<std::size_t>(ci) * h * w;
        T* op = out.data() + static_cast<std::size_t>(ci) * 4 * h * w;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                T v = ip[y * w + x];
                std::size_t base = (static_cast<std::size_t>(2 * y) * 2 * w) + 2 * x;
                op[base] = v;
                op[base + 1] = v;
                op[base + 2 * w] = v;
                op[base + 2 * w + 1] = v;
            }
        }
    }
    return detail::make_op<T>("upsample2", {c, 2 * h, 2 * w}, std::move(out), {input},
                              [c, h, w](Node<T>& n) {
                                  auto& p = *n.parents[0];
                                  for (int ci = 0; ci < c; ++ci) {
                                      const T* gp =
                                          n.grad.data() + static_cast<std::size_t>(ci) * 4 * h * w;
                                      T* pg = p.grad.data() + static_cast<std::size_t>(ci) * h * w;
                                      for (int y = 0; y < h; ++y)
                                          for (int x = 0; x < w; ++x) {
                                              std::size_t base =
                                                  (static_cast<std::size_t>(2 * y) * 2 * w) + 2 * x;
                                              pg[y * w + x] += gp[base] + gp[base + 1] +
                                                               gp[base + 2 * w] +
                                                               gp[base + 2 * w + 1];
                                          }
                                  }
                              });
}

}  // namespace kp3d
