//! Forward and backward kernels behind the graph ops. All operate on dense
//! row-major buffers; NCHW layout for images.

use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Output shape of broadcasting two equal-rank shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`, where
/// `a` and `b` broadcast into `out`.
pub fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let sa = bcast_strides(a, out);
    let sb = bcast_strides(b, out);
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    loop {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank - 1 {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        if o >= total {
            break;
        }
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Sums `t` down to `shape` (which must broadcast into `t`'s shape).
pub fn reduce_to<T: Scalar>(t: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if t.shape() == shape {
        return t.clone();
    }
    let mut out = Tensor::zeros(shape);
    let src = t.data();
    let dst = out.data_mut();
    for_each_broadcast(t.shape(), shape, shape, |o, i, _| dst[i] += src[o]);
    out
}

/// Broadcasts `t` up to `shape`.
pub fn expand_to<T: Scalar>(t: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if t.shape() == shape {
        return t.clone();
    }
    let mut out = Tensor::zeros(shape);
    let src = t.data();
    let dst = out.data_mut();
    for_each_broadcast(shape, t.shape(), t.shape(), |o, i, _| dst[o] = src[i]);
    out
}

pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], wt: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be NCHW");
        assert_eq!(wt.len(), 4, "conv2d weight must be OIHW");
        assert_eq!(x[1], wt[1], "conv2d channel mismatch");
        assert!(stride >= 1);
        let (h, w, kh, kw) = (x[2], x[3], wt[2], wt[3]);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d kernel larger than input");
        Self {
            n: x[0],
            cin: x[1],
            h,
            w,
            cout: wt[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        }
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.p();
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oh * self.wo..(oh + 1) * self.wo];
                        if ih < 0 || ih >= self.h as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        for (ow, v) in line.iter_mut().enumerate() {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            *v = if iw < 0 || iw >= self.w as isize {
                                T::zero()
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.p();
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let line = &mut plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        for ow in 0..self.wo {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            if iw >= 0 && iw < self.w as isize {
                                line[iw as usize] += src[oh * self.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad);
    let (k, p) = (g.k(), g.p());
    let mut out = Tensor::zeros(&[g.n, g.cout, g.ho, g.wo]);
    let mut cols = vec![T::zero(); k * p];
    let in_block = g.cin * g.h * g.w;
    let out_block = g.cout * p;
    for b in 0..g.n {
        g.im2col(&x.data()[b * in_block..(b + 1) * in_block], &mut cols);
        T::gemm(
            g.cout,
            k,
            p,
            w.data(),
            false,
            &cols,
            false,
            &mut out.data_mut()[b * out_block..(b + 1) * out_block],
            false,
        );
    }
    out
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad);
    let (k, p) = (g.k(), g.p());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut cols = vec![T::zero(); k * p];
    let in_block = g.cin * g.h * g.w;
    let out_block = g.cout * p;
    for b in 0..g.n {
        let dout_b = &dout.data()[b * out_block..(b + 1) * out_block];
        if let Some(dw) = dw.as_mut() {
            g.im2col(&x.data()[b * in_block..(b + 1) * in_block], &mut cols);
            // dW (cout×k) += dout_b (cout×p) · colsᵀ (p×k)
            T::gemm(g.cout, p, k, dout_b, false, &cols, true, dw.data_mut(), true);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols (k×p) = Wᵀ (k×cout) · dout_b (cout×p)
            T::gemm(k, g.cout, p, w.data(), true, dout_b, false, &mut cols, false);
            g.col2im(&cols, &mut dx.data_mut()[b * in_block..(b + 1) * in_block]);
        }
    }
    (dx, dw)
}

pub fn avg_pool_forward<T: Scalar>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert!(h % f == 0 && w % f == 0, "avg_pool factor must divide the spatial size");
    let (ho, wo) = (h / f, w / f);
    let inv = lit::<T>(1.0 / (f * f) as f64);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let sp = &src[plane * h * w..(plane + 1) * h * w];
        let dp = &mut dst[plane * ho * wo..(plane + 1) * ho * wo];
        for i in 0..h {
            let row = &sp[i * w..(i + 1) * w];
            let drow = &mut dp[(i / f) * wo..(i / f + 1) * wo];
            for (j, &v) in row.iter().enumerate() {
                drow[j / f] += v;
            }
        }
        dp.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

pub fn avg_pool_backward<T: Scalar>(dout: &Tensor<T>, in_shape: &[usize], f: usize) -> Tensor<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (h / f, w / f);
    let inv = lit::<T>(1.0 / (f * f) as f64);
    let mut dx = Tensor::zeros(in_shape);
    let src = dout.data();
    let dst = dx.data_mut();
    for plane in 0..n * c {
        for i in 0..h {
            for j in 0..w {
                dst[plane * h * w + i * w + j] = src[plane * ho * wo + (i / f) * wo + j / f] * inv;
            }
        }
    }
    dx
}

pub fn upsample_forward<T: Scalar>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h * f, w * f);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                dst[plane * ho * wo + i * wo + j] = src[plane * h * w + (i / f) * w + j / f];
            }
        }
    }
    out
}

pub fn upsample_backward<T: Scalar>(dout: &Tensor<T>, in_shape: &[usize], f: usize) -> Tensor<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (h * f, w * f);
    let mut dx = Tensor::zeros(in_shape);
    let src = dout.data();
    let dst = dx.data_mut();
    for plane in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                dst[plane * h * w + (i / f) * w + j / f] += src[plane * ho * wo + i * wo + j];
            }
        }
    }
    dx
}

/// Softmax over the last two axes of an NCHW tensor, per (n, c).
pub fn spatial_softmax_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let plane = s[2] * s[3];
    let mut out = x.clone();
    for chunk in out.data_mut().chunks_mut(plane) {
        let m = chunk.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut total = T::zero();
        for v in chunk.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in chunk.iter_mut() {
            *v /= total;
        }
    }
    out
}

pub fn spatial_softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let s = y.shape();
    let plane = s[2] * s[3];
    let mut dx = Tensor::zeros(s);
    for ((yc, gc), dc) in y
        .data()
        .chunks(plane)
        .zip(dy.data().chunks(plane))
        .zip(dx.data_mut().chunks_mut(plane))
    {
        let dot: T = yc.iter().zip(gc).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dc.iter_mut().zip(yc).zip(gc) {
            *d = yv * (gv - dot);
        }
    }
    dx
}

/// `[N,C,H,W] × [N,T,H,W] → [N,T,C]`: attention-weighted sum of features.
pub fn attn_pool_forward<T: Scalar>(feat: &Tensor<T>, att: &Tensor<T>) -> Tensor<T> {
    let (n, c, p) = (feat.dim(0), feat.dim(1), feat.dim(2) * feat.dim(3));
    let t = att.dim(1);
    assert_eq!(att.dim(0), n);
    assert_eq!(att.dim(2) * att.dim(3), p, "attention grid must match feature grid");
    let mut out = Tensor::zeros(&[n, t, c]);
    for b in 0..n {
        T::gemm(
            t,
            p,
            c,
            &att.data()[b * t * p..(b + 1) * t * p],
            false,
            &feat.data()[b * c * p..(b + 1) * c * p],
            true,
            &mut out.data_mut()[b * t * c..(b + 1) * t * c],
            false,
        );
    }
    out
}

pub fn attn_pool_backward<T: Scalar>(
    feat: &Tensor<T>,
    att: &Tensor<T>,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (n, c, p) = (feat.dim(0), feat.dim(1), feat.dim(2) * feat.dim(3));
    let t = att.dim(1);
    let mut dfeat = Tensor::zeros(feat.shape());
    let mut datt = Tensor::zeros(att.shape());
    for b in 0..n {
        let d = &dout.data()[b * t * c..(b + 1) * t * c];
        // datt (t×p) = dout (t×c) · feat (c×p)
        T::gemm(
            t,
            c,
            p,
            d,
            false,
            &feat.data()[b * c * p..(b + 1) * c * p],
            false,
            &mut datt.data_mut()[b * t * p..(b + 1) * t * p],
            false,
        );
        // dfeat (c×p) = doutᵀ (c×t) · att (t×p)
        T::gemm(
            c,
            t,
            p,
            d,
            true,
            &att.data()[b * t * p..(b + 1) * t * p],
            false,
            &mut dfeat.data_mut()[b * c * p..(b + 1) * c * p],
            false,
        );
    }
    (dfeat, datt)
}

/// Normalized Gram matrix `F Fᵀ / (C·H·W)` per sample.
pub fn gram_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, p) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
    let scale = lit::<T>(1.0 / (c * p) as f64);
    let mut out = Tensor::zeros(&[n, c, c]);
    for b in 0..n {
        let f = &x.data()[b * c * p..(b + 1) * c * p];
        let o = &mut out.data_mut()[b * c * c..(b + 1) * c * c];
        T::gemm(c, p, c, f, false, f, true, o, false);
        o.iter_mut().for_each(|v| *v *= scale);
    }
    out
}

pub fn gram_backward<T: Scalar>(x: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    let (n, c, p) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
    let scale = lit::<T>(1.0 / (c * p) as f64);
    let mut dx = Tensor::zeros(x.shape());
    let mut sym = vec![T::zero(); c * c];
    for b in 0..n {
        let d = &dout.data()[b * c * c..(b + 1) * c * c];
        for i in 0..c {
            for j in 0..c {
                sym[i * c + j] = (d[i * c + j] + d[j * c + i]) * scale;
            }
        }
        T::gemm(
            c,
            c,
            p,
            &sym,
            false,
            &x.data()[b * c * p..(b + 1) * c * p],
            false,
            &mut dx.data_mut()[b * c * p..(b + 1) * c * p],
            false,
        );
    }
    dx
}

/// Pixel-center normalized coordinate of index `i` on an axis of length `len`.
#[inline]
pub fn norm_coord<T: Scalar>(i: usize, len: usize) -> T {
    lit::<T>((2 * i + 1) as f64 / len as f64 - 1.0)
}

/// Pixel-space sample position for a normalized coordinate.
#[inline]
pub fn unnormalize<T: Scalar>(v: T, len: usize) -> T {
    ((v + T::one()) * lit::<T>(len as f64) - T::one()) * lit::<T>(0.5)
}

struct Corner {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
}

#[inline]
fn sample_corner<T: Scalar>(ix: T, iy: T) -> Option<Corner> {
    if !(ix.is_finite() && iy.is_finite()) {
        return None;
    }
    let (ixf, iyf) = (crate::scalar::to_f64(ix), crate::scalar::to_f64(iy));
    let (x0, y0) = (ixf.floor(), iyf.floor());
    Some(Corner {
        x0: x0 as isize,
        y0: y0 as isize,
        fx: ixf - x0,
        fy: iyf - y0,
    })
}

/// Bilinear sampling of `img` on the grid `θ·[x, y, 1]` (normalized output
/// coordinates), with out-of-range taps reading `fill`.
pub fn grid_sample_forward<T: Scalar>(img: &Tensor<T>, theta: &Tensor<T>, fill: T) -> Tensor<T> {
    let s = img.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert_eq!(theta.shape(), &[n, 6], "theta must be [N, 6]");
    let mut out = Tensor::zeros(s);
    let src = img.data();
    let th = theta.data();
    let dst = out.data_mut();
    let plane = h * w;
    for b in 0..n {
        let t = &th[b * 6..b * 6 + 6];
        for i in 0..h {
            let yn: T = norm_coord(i, h);
            for j in 0..w {
                let xn: T = norm_coord(j, w);
                let xs = t[0] * xn + t[1] * yn + t[2];
                let ys = t[3] * xn + t[4] * yn + t[5];
                let corner = sample_corner(unnormalize(xs, w), unnormalize(ys, h));
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    let v = match &corner {
                        None => fill,
                        Some(k) => {
                            let tap = |yy: isize, xx: isize| -> T {
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    fill
                                } else {
                                    src[base + yy as usize * w + xx as usize]
                                }
                            };
                            let (fx, fy) = (lit::<T>(k.fx), lit::<T>(k.fy));
                            let v00 = tap(k.y0, k.x0);
                            let v01 = tap(k.y0, k.x0 + 1);
                            let v10 = tap(k.y0 + 1, k.x0);
                            let v11 = tap(k.y0 + 1, k.x0 + 1);
                            let top = v00 + (v01 - v00) * fx;
                            let bot = v10 + (v11 - v10) * fx;
                            top + (bot - top) * fy
                        }
                    };
                    dst[base + i * w + j] = v;
                }
            }
        }
    }
    out
}

pub fn grid_sample_backward<T: Scalar>(
    img: &Tensor<T>,
    theta: &Tensor<T>,
    dout: &Tensor<T>,
    fill: T,
    need_dimg: bool,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let s = img.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut dimg = need_dimg.then(|| Tensor::zeros(s));
    let mut dtheta = Tensor::zeros(&[n, 6]);
    let src = img.data();
    let th = theta.data();
    let g = dout.data();
    let plane = h * w;
    let half_w = lit::<T>(w as f64 * 0.5);
    let half_h = lit::<T>(h as f64 * 0.5);
    for b in 0..n {
        let t = &th[b * 6..b * 6 + 6];
        let mut acc = [T::zero(); 6];
        for i in 0..h {
            let yn: T = norm_coord(i, h);
            for j in 0..w {
                let xn: T = norm_coord(j, w);
                let xs = t[0] * xn + t[1] * yn + t[2];
                let ys = t[3] * xn + t[4] * yn + t[5];
                let Some(k) = sample_corner(unnormalize(xs, w), unnormalize(ys, h)) else {
                    continue;
                };
                let (fx, fy) = (lit::<T>(k.fx), lit::<T>(k.fy));
                let inside = |yy: isize, xx: isize| yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize;
                let corners = [
                    (k.y0, k.x0, (T::one() - fy) * (T::one() - fx)),
                    (k.y0, k.x0 + 1, (T::one() - fy) * fx),
                    (k.y0 + 1, k.x0, fy * (T::one() - fx)),
                    (k.y0 + 1, k.x0 + 1, fy * fx),
                ];
                let mut d_ix = T::zero();
                let mut d_iy = T::zero();
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    let go = g[base + i * w + j];
                    if go == T::zero() {
                        continue;
                    }
                    let tap = |yy: isize, xx: isize| -> T {
                        if inside(yy, xx) {
                            src[base + yy as usize * w + xx as usize]
                        } else {
                            fill
                        }
                    };
                    let v00 = tap(k.y0, k.x0);
                    let v01 = tap(k.y0, k.x0 + 1);
                    let v10 = tap(k.y0 + 1, k.x0);
                    let v11 = tap(k.y0 + 1, k.x0 + 1);
                    d_ix += go * ((T::one() - fy) * (v01 - v00) + fy * (v11 - v10));
                    d_iy += go * ((T::one() - fx) * (v10 - v00) + fx * (v11 - v01));
                    if let Some(di) = dimg.as_mut() {
                        let di = di.data_mut();
                        for &(yy, xx, wt) in &corners {
                            if inside(yy, xx) {
                                di[base + yy as usize * w + xx as usize] += go * wt;
                            }
                        }
                    }
                }
                let dxs = d_ix * half_w;
                let dys = d_iy * half_h;
                acc[0] += dxs * xn;
                acc[1] += dxs * yn;
                acc[2] += dxs;
                acc[3] += dys * xn;
                acc[4] += dys * yn;
                acc[5] += dys;
            }
        }
        dtheta.data_mut()[b * 6..b * 6 + 6].copy_from_slice(&acc);
    }
    (dimg, dtheta)
}
