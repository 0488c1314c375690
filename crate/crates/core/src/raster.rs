//! Image containers: RGB images and garment masks as `[C, H, W]` tensors.

use std::path::Path;

use shapewarp_tensor::{lit, to_f64, Scalar, Tensor};

use crate::error::{Error, Result};

/// Luma weights used for every grayscale conversion.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// RGB image with values in `[0, 1]`, stored `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage<T = f32>(Tensor<T>);

impl<T: Scalar> RgbImage<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        if t.rank() != 3 || t.dim(0) != 3 {
            return Err(Error::Shape(format!("RGB image must be [3,H,W], got {:?}", t.shape())));
        }
        Ok(Self(t))
    }

    pub fn filled(h: usize, w: usize, rgb: [T; 3]) -> Self {
        Self(Tensor::from_fn(&[3, h, w], |i| rgb[i / (h * w)]))
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        Self(Tensor::from_fn(&[3, h, w], |i| {
            let c = i / (h * w);
            let r = i % (h * w);
            f(c, r / w, r % w)
        }))
    }

    pub fn height(&self) -> usize {
        self.0.dim(1)
    }

    pub fn width(&self) -> usize {
        self.0.dim(2)
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.0.data()[(c * self.height() + y) * self.width() + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let (h, w) = self.size();
        self.0.data_mut()[(c * h + y) * w + x] = v;
    }

    /// Single-channel luma, `[1, H, W]`.
    pub fn luma(&self) -> Tensor<T> {
        let (h, w) = self.size();
        let d = self.0.data();
        let p = h * w;
        Tensor::from_fn(&[1, h, w], |i| {
            lit::<T>(LUMA[0]) * d[i] + lit::<T>(LUMA[1]) * d[p + i] + lit::<T>(LUMA[2]) * d[2 * p + i]
        })
    }

    /// Luma replicated into three channels.
    pub fn to_grayscale(&self) -> Self {
        let l = self.luma();
        let (h, w) = self.size();
        Self(Tensor::from_fn(&[3, h, w], |i| l.data()[i % (h * w)]))
    }

    pub fn cast<U: Scalar>(&self) -> RgbImage<U> {
        RgbImage(self.0.cast())
    }

    /// Rounds to the 8-bit grid, as a save/load round trip would.
    pub fn quantized(&self) -> Self {
        Self(self.0.map(|v| lit::<T>(quantize(to_f64(v)) as f64 / 255.0)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.as_raw();
        Ok(Self::from_fn(h, w, |c, y, x| lit(raw[(y * w + x) * 3 + c] as f64 / 255.0)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (h, w) = self.size();
        let mut buf = vec![0u8; h * w * 3];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    buf[(y * w + x) * 3 + c] = quantize(to_f64(self.get(c, y, x)));
                }
            }
        }
        let img = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size");
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary garment mask, `[1, H, W]`: 0 on the garment to replace, 1 on the
/// region to keep.
#[derive(Clone, Debug, PartialEq)]
pub struct GarmentMask<T = f32>(Tensor<T>);

impl<T: Scalar> GarmentMask<T> {
    /// Thresholds a soft `[1,H,W]` map at 0.5.
    pub fn from_soft(t: &Tensor<T>) -> Result<Self> {
        if t.rank() != 3 || t.dim(0) != 1 {
            return Err(Error::Shape(format!("mask must be [1,H,W], got {:?}", t.shape())));
        }
        let half = lit::<T>(0.5);
        Ok(Self(t.map(|v| if v >= half { T::one() } else { T::zero() })))
    }

    pub fn from_fn(h: usize, w: usize, mut keep: impl FnMut(usize, usize) -> bool) -> Self {
        Self(Tensor::from_fn(&[1, h, w], |i| {
            if keep(i / w, i % w) {
                T::one()
            } else {
                T::zero()
            }
        }))
    }

    /// Nothing to replace.
    pub fn keep_all(h: usize, w: usize) -> Self {
        Self(Tensor::ones(&[1, h, w]))
    }

    pub fn height(&self) -> usize {
        self.0.dim(1)
    }

    pub fn width(&self) -> usize {
        self.0.dim(2)
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    #[inline]
    pub fn keep(&self, y: usize, x: usize) -> bool {
        self.0.data()[y * self.width() + x] > lit(0.5)
    }

    pub fn garment_pixels(&self) -> usize {
        self.0.data().iter().filter(|&&v| v < lit(0.5)).count()
    }

    pub fn cast<U: Scalar>(&self) -> GarmentMask<U> {
        GarmentMask(self.0.cast())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let soft = Tensor::from_fn(&[1, h, w], |i| lit(img.as_raw()[i] as f64 / 255.0));
        Self::from_soft(&soft)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_gray(&self.0, path)
    }
}

pub(crate) fn save_gray<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w) = (t.dim(1), t.dim(2));
    let buf: Vec<u8> = t.data().iter().map(|&v| quantize(to_f64(v))).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer size");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Stacks images into an `[N, C, H, W]` batch.
pub fn batch<T: Scalar>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let owned: Vec<Tensor<T>> = items.iter().map(|t| (*t).clone()).collect();
    Ok(Tensor::stack(&owned)?)
}
