//! Product image → binary contour image: luma, mean filter, Gaussian
//! adaptive threshold, border following, rasterized borders.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shapewarp_tensor::{lit, to_f64, Scalar, Tensor};

use crate::error::{Error, Result};
use crate::raster::{save_gray, RgbImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContourParams {
    /// Mean-filter window.
    pub k_mean: usize,
    /// Adaptive threshold block size (odd, ≥ 3).
    pub block: usize,
    /// Offset subtracted from the local weighted mean, on the 0..255 scale.
    pub offset: f64,
}

impl Default for ContourParams {
    fn default() -> Self {
        Self {
            k_mean: 5,
            block: 11,
            offset: 2.0,
        }
    }
}

impl ContourParams {
    pub fn validate(&self) -> Result<()> {
        if self.k_mean < 1 {
            return Err(Error::Config("contour k_mean must be at least 1".into()));
        }
        if self.block < 3 || self.block.is_multiple_of(2) {
            return Err(Error::Config(format!("contour block size {} must be odd and ≥ 3", self.block)));
        }
        if !self.offset.is_finite() {
            return Err(Error::Config("contour offset must be finite".into()));
        }
        Ok(())
    }
}

/// Binary `[1, H, W]` image, 1 on contour pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ContourImage<T = f32>(Tensor<T>);

impl<T: Scalar> ContourImage<T> {
    pub fn from_tensor(t: Tensor<T>) -> Result<Self> {
        if t.rank() != 3 || t.dim(0) != 1 {
            return Err(Error::Shape(format!("contour must be [1,H,W], got {:?}", t.shape())));
        }
        let half = lit::<T>(0.5);
        Ok(Self(t.map(|v| if v >= half { T::one() } else { T::zero() })))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn size(&self) -> (usize, usize) {
        (self.0.dim(1), self.0.dim(2))
    }

    pub fn count(&self) -> usize {
        self.0.data().iter().filter(|&&v| v > lit(0.5)).count()
    }

    pub fn cast<U: Scalar>(&self) -> ContourImage<U> {
        ContourImage(self.0.cast())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_gray(&self.0, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_tensor(Tensor::from_fn(&[1, h, w], |i| lit(img.as_raw()[i] as f64 / 255.0)))
    }
}

/// Border pixels `(row, col)` in tracing order.
pub type Chain = Vec<(usize, usize)>;

/// Box filter with replicated borders. The window spans `k/2` before and
/// `k - 1 - k/2` after each pixel.
pub fn mean_filter(img: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let kernel = vec![1.0 / k as f64; k];
    separable(img, h, w, &kernel)
}

fn separable(img: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let a = (k / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                s += kv * img[y * w + clamp(x as isize + t as isize - a, w)];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                s += kv * tmp[clamp(y as isize + t as isize - a, h) * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn gaussian_kernel(block: usize) -> Vec<f64> {
    let sigma = 0.3 * ((block as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    let c = (block / 2) as f64;
    let raw: Vec<f64> = (0..block)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Foreground where a pixel is at or below its Gaussian-weighted local mean
/// minus `offset / 255`.
pub fn adaptive_threshold(img: &[f64], h: usize, w: usize, block: usize, offset: f64) -> Vec<bool> {
    let local = separable(img, h, w, &gaussian_kernel(block));
    img.iter()
        .zip(&local)
        .map(|(&v, &m)| v <= m - offset / 255.0)
        .collect()
}

// Counter-clockwise on screen (rows grow downwards), starting east.
const DIRS: [(isize, isize); 8] = [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)];

fn dir_of(dy: isize, dx: isize) -> usize {
    DIRS.iter().position(|&d| d == (dy, dx)).expect("neighbour offset")
}

/// Suzuki–Abe border following. Returns every outer and hole border as a
/// closed 8-connected chain.
pub fn find_borders(b: &[bool], h: usize, w: usize) -> Vec<Chain> {
    let (ph, pw) = (h + 2, w + 2);
    let mut f = vec![0i32; ph * pw];
    for y in 0..h {
        for x in 0..w {
            if b[y * w + x] {
                f[(y + 1) * pw + x + 1] = 1;
            }
        }
    }
    let at = |y: isize, x: isize| (y as usize) * pw + x as usize;
    let mut nbd = 1i32;
    let mut chains = Vec::new();
    for i in 1..=h as isize {
        for j in 1..=w as isize {
            let v = f[at(i, j)];
            let start = if v == 1 && f[at(i, j - 1)] == 0 {
                (i, j - 1)
            } else if v >= 1 && f[at(i, j + 1)] == 0 {
                (i, j + 1)
            } else {
                continue;
            };
            nbd += 1;
            let d0 = dir_of(start.0 - i, start.1 - j);
            let first = (0..8).map(|s| (d0 + 8 - s) % 8).find(|&d| {
                let (dy, dx) = DIRS[d];
                f[at(i + dy, j + dx)] != 0
            });
            let Some(d1) = first else {
                f[at(i, j)] = -nbd;
                chains.push(vec![(i as usize - 1, j as usize - 1)]);
                continue;
            };
            let p1 = (i + DIRS[d1].0, j + DIRS[d1].1);
            let (mut p2, mut p3) = (p1, (i, j));
            let mut chain = Vec::new();
            loop {
                let back = dir_of(p2.0 - p3.0, p2.1 - p3.1);
                let mut east_zero = false;
                let mut p4 = p3;
                for s in 1..=8 {
                    let d = (back + s) % 8;
                    let q = (p3.0 + DIRS[d].0, p3.1 + DIRS[d].1);
                    if f[at(q.0, q.1)] != 0 {
                        p4 = q;
                        break;
                    }
                    if d == 0 {
                        east_zero = true;
                    }
                }
                let idx = at(p3.0, p3.1);
                if east_zero {
                    f[idx] = -nbd;
                } else if f[idx] == 1 {
                    f[idx] = nbd;
                }
                chain.push((p3.0 as usize - 1, p3.1 as usize - 1));
                if p4 == (i, j) && p3 == p1 {
                    break;
                }
                p2 = p3;
                p3 = p4;
            }
            chains.push(chain);
        }
    }
    chains
}

/// 8-connected component labels (0 = background, 1.. = components) and the
/// component count.
pub fn connected_components(b: &[bool], h: usize, w: usize) -> (Vec<u32>, usize) {
    let mut labels = vec![0u32; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for s in 0..h * w {
        if !b[s] || labels[s] != 0 {
            continue;
        }
        count += 1;
        labels[s] = count as u32;
        stack.push(s);
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for (dy, dx) in DIRS {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if b[q] && labels[q] == 0 {
                    labels[q] = count as u32;
                    stack.push(q);
                }
            }
        }
    }
    (labels, count)
}

/// Binary foreground map the borders are traced on.
pub fn binarize<T: Scalar>(p: &RgbImage<T>, params: &ContourParams) -> Result<Vec<bool>> {
    params.validate()?;
    let (h, w) = p.size();
    let gray: Vec<f64> = p.luma().data().iter().map(|&v| to_f64(v)).collect();
    let smooth = mean_filter(&gray, h, w, params.k_mean);
    Ok(adaptive_threshold(&smooth, h, w, params.block, params.offset))
}

pub fn extract_contour<T: Scalar>(p: &RgbImage<T>, params: &ContourParams) -> Result<ContourImage<T>> {
    let (h, w) = p.size();
    let fg = binarize(p, params)?;
    let mut out = Tensor::zeros(&[1, h, w]);
    for chain in find_borders(&fg, h, w) {
        for (y, x) in chain {
            out.data_mut()[y * w + x] = T::one();
        }
    }
    Ok(ContourImage(out))
}

/// `<dir>/<stem>.contour.png` for a product image path.
pub fn cache_path(product: &Path) -> PathBuf {
    let stem = product.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    product.with_file_name(format!("{stem}.contour.png"))
}

/// Loads the cached contour beside `product_path`, computing and writing it
/// on a miss. The cache is keyed by path only; pass `refresh` after
/// changing parameters.
pub fn contour_cached(product_path: &Path, params: &ContourParams, refresh: bool) -> Result<ContourImage> {
    let cache = cache_path(product_path);
    if !refresh && cache.is_file() {
        return ContourImage::load(&cache);
    }
    let img = RgbImage::<f32>::load(product_path)?;
    let c = extract_contour(&img, params)?;
    c.save(&cache)?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isolated_pixel_is_a_single_chain() {
        let mut b = vec![false; 9];
        b[4] = true;
        assert_eq!(find_borders(&b, 3, 3), vec![vec![(1, 1)]]);
    }

    #[test]
    fn ring_has_outer_and_hole_borders() {
        let (h, w) = (7, 7);
        let b: Vec<bool> = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                (1..6).contains(&y) && (1..6).contains(&x) && !(y == 3 && x == 3)
            })
            .collect();
        let chains = find_borders(&b, h, w);
        assert_eq!(chains.len(), 2);
        assert_eq!(chains[0].len(), 16);
    }

    #[test]
    fn degenerate_params_are_rejected() {
        let img = RgbImage::<f32>::filled(16, 16, [1.0; 3]);
        for p in [
            ContourParams { block: 10, ..Default::default() },
            ContourParams { k_mean: 0, ..Default::default() },
        ] {
            assert!(matches!(extract_contour(&img, &p), Err(Error::Config(_))));
        }
    }
}
