//! Affine parameters in normalized coordinates and plain (non-graph) warping.

use serde::{Deserialize, Serialize};
use shapewarp_tensor::{kernels, lit, to_f64, Scalar, Tensor};

/// 2×3 affine map from normalized output coordinates to normalized input
/// (sampling) coordinates, row major: `[a, b, tx, c, d, ty]`.
///
/// Normalized coordinates run over `[-1, 1]` with pixel centers at
/// `(2i + 1) / n - 1`.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams<T = f32> {
    pub m: [T; 6],
}

impl<T: Scalar> AffineParams<T> {
    pub fn identity() -> Self {
        Self {
            m: [T::one(), T::zero(), T::zero(), T::zero(), T::one(), T::zero()],
        }
    }

    pub fn new(m: [T; 6]) -> Self {
        Self { m }
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().all(|v| v.is_finite())
    }

    /// Sampling map that moves content by `(dx, dy)` pixels on an `h×w` grid.
    pub fn pixel_shift(dy: f64, dx: f64, h: usize, w: usize) -> Self {
        Self::new([
            T::one(),
            T::zero(),
            lit(-2.0 * dx / w as f64),
            T::zero(),
            T::one(),
            lit(-2.0 * dy / h as f64),
        ])
    }

    /// Inverse affine map, `None` when singular.
    pub fn inverse(&self) -> Option<Self> {
        let [a, b, tx, c, d, ty] = self.m;
        let det = a * d - b * c;
        if det == T::zero() || !det.is_finite() {
            return None;
        }
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Some(Self::new([ia, ib, -(ia * tx + ib * ty), ic, id, -(ic * tx + id * ty)]))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let [a, b, tx, c, d, ty] = self.m;
        let [e, f, ux, g, h, uy] = other.m;
        Self::new([
            a * e + b * g,
            a * f + b * h,
            a * ux + b * uy + tx,
            c * e + d * g,
            c * f + d * h,
            c * ux + d * uy + ty,
        ])
    }

    pub fn apply(&self, x: T, y: T) -> (T, T) {
        let [a, b, tx, c, d, ty] = self.m;
        (a * x + b * y + tx, c * x + d * y + ty)
    }

    /// Squared Frobenius distance.
    pub fn dist2(&self, other: &Self) -> T {
        self.m.iter().zip(&other.m).map(|(&p, &q)| (p - q) * (p - q)).sum()
    }

    pub fn cast<U: Scalar>(&self) -> AffineParams<U> {
        AffineParams {
            m: self.m.map(|v| lit::<U>(to_f64(v))),
        }
    }

    pub fn to_f64_array(&self) -> [f64; 6] {
        self.m.map(to_f64)
    }
}

/// Resamples a `[C, H, W]` tensor through `theta`; taps outside the source read `fill`.
pub fn warp_tensor<T: Scalar>(img: &Tensor<T>, theta: &AffineParams<T>, fill: T) -> Tensor<T> {
    let s = img.shape();
    let batched = img.clone().reshape(&[1, s[0], s[1], s[2]]).expect("CHW input");
    let th = Tensor::from_vec(&[1, 6], theta.m.to_vec()).expect("six parameters");
    kernels::grid_sample_forward(&batched, &th, fill)
        .reshape(s)
        .expect("same size")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_composes_to_identity() {
        let t = AffineParams::<f64>::new([0.9, 0.2, 0.1, -0.15, 1.1, -0.3]);
        let id = t.compose(&t.inverse().unwrap());
        for (a, b) in id.m.iter().zip(AffineParams::<f64>::identity().m.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn whole_pixel_shift_moves_content_exactly() {
        let img = Tensor::<f32>::from_fn(&[1, 8, 8], |i| i as f32);
        let out = warp_tensor(&img, &AffineParams::pixel_shift(2.0, -1.0, 8, 8), -1.0);
        for y in 0..8 {
            for x in 0..8 {
                let v = out.data()[y * 8 + x];
                let (sy, sx) = (y as isize - 2, x as isize + 1);
                if (0..8).contains(&sy) && (0..8).contains(&sx) {
                    assert_eq!(v, img.data()[sy as usize * 8 + sx as usize]);
                } else {
                    assert_eq!(v, -1.0);
                }
            }
        }
    }
}
