//! Procedural try-on corpus: textured garment polygons on white, pasted onto
//! a simple figure at a known affine pose.
//!
//! Every record is a pure function of `(seed, index)`, so any body or
//! product can be regenerated later (see [`SyntheticCorpus`]).

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use shapewarp_tensor::Tensor;

use super::{load_manifest, GarmentType, Manifest, PairRecord, MANIFEST_VERSION};
use crate::contour::connected_components;
use crate::error::{io_err, Error, Result};
use crate::geometry::{warp_tensor, AffineParams};
use crate::raster::{GarmentMask, RgbImage};

pub const SIDECAR: &str = "synthetic.json";
pub const GENERATOR_VERSION: u32 = 1;
const MAX_ATTEMPTS: usize = 64;
const TWO_COMPONENT_SCALE: f64 = 1.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    pub image_size: usize,
    pub two_component: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 256,
            image_size: 64,
            two_component: false,
            seed: 0,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    generator_version: u32,
    #[serde(flatten)]
    config: SyntheticConfig,
}

#[derive(Clone, Debug)]
pub enum Texture {
    Solid([f64; 3]),
    Stripes { a: [f64; 3], b: [f64; 3], angle: f64, period: f64, duty: f64 },
    Dots { base: [f64; 3], dot: [f64; 3], period: f64, radius: f64 },
}

impl Texture {
    fn color(&self, x: f64, y: f64) -> [f64; 3] {
        match *self {
            Texture::Solid(c) => c,
            Texture::Stripes { a, b, angle, period, duty } => {
                let u = x * angle.cos() + y * angle.sin();
                if (u / period).rem_euclid(1.0) < duty {
                    a
                } else {
                    b
                }
            }
            Texture::Dots { base, dot, period, radius } => {
                let fx = (x / period).rem_euclid(1.0) - 0.5;
                let fy = (y / period).rem_euclid(1.0) - 0.5;
                if (fx * fx + fy * fy).sqrt() * period < radius {
                    dot
                } else {
                    base
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct BodySpec {
    pub background: [f64; 3],
    pub skin: [f64; 3],
    pub base_layer: [f64; 3],
    pub width: f64,
}

/// Everything needed to re-render one record.
#[derive(Clone, Debug)]
pub struct SampleSpec {
    pub index: usize,
    pub garment_type: GarmentType,
    /// Closed polygon in normalized product coordinates.
    pub polygon: Vec<(f64, f64)>,
    pub texture: Texture,
    pub body: BodySpec,
    /// Sampling maps (model → product), one per garment component.
    pub thetas: Vec<AffineParams<f64>>,
}

fn uni(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

fn dark_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [uni(rng, 0.03, 0.45), uni(rng, 0.03, 0.45), uni(rng, 0.03, 0.45)]
}

/// Mirrors a right-half outline (top center to bottom center) into a closed polygon.
fn mirrored(right: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    let mut poly = right.clone();
    for &(x, y) in right.iter().rev() {
        if x > 0.0 {
            poly.push((-x, y));
        }
    }
    poly
}

fn top_outline(rng: &mut ChaCha8Rng, long_sleeves: bool) -> Vec<(f64, f64)> {
    let y0 = -0.82;
    let bw = if long_sleeves { uni(rng, 0.45, 0.6) } else { uni(rng, 0.38, 0.55) };
    let neck_w = uni(rng, 0.1, 0.2);
    let neck_d = uni(rng, 0.05, 0.2);
    let hem_y = if long_sleeves { uni(rng, 0.45, 0.9) } else { uni(rng, 0.2, 0.8) };
    let hem_w = (bw * uni(rng, 0.85, 1.2)).min(0.9);
    let sleeve = if long_sleeves { uni(rng, 0.45, 0.75) } else { uni(rng, 0.0, 0.35) };
    let shoulder = (bw, y0 + 0.08);
    let mut pts = vec![(0.0, y0 + neck_d), (neck_w, y0), shoulder];
    if sleeve > 0.05 {
        let ang = uni(rng, 0.9, 1.3);
        let (dx, dy) = (ang.cos() * sleeve, ang.sin() * sleeve);
        let cuff = uni(rng, 0.14, 0.22);
        let outer = ((bw + dx).min(0.95), shoulder.1 + dy);
        pts.push(outer);
        pts.push(((outer.0 - cuff * ang.sin()).max(bw + 0.02), outer.1 + cuff * ang.cos()));
    }
    pts.push((bw, y0 + 0.42));
    pts.push((hem_w, hem_y));
    pts.push((0.0, hem_y));
    pts
}

fn bottoms_outline(rng: &mut ChaCha8Rng, y0: f64) -> Vec<(f64, f64)> {
    let waist = uni(rng, 0.3, 0.5);
    let hem_y = uni(rng, (y0 + 0.75).min(0.5), 0.9);
    let flare = uni(rng, 0.0, 0.3);
    if rng.gen_bool(0.5) {
        vec![(0.0, y0), (waist, y0), ((waist + flare + 0.08).min(0.9), hem_y), (0.0, hem_y)]
    } else {
        let crotch = y0 + uni(rng, 0.3, 0.45);
        let leg = uni(rng, 0.18, 0.3);
        let outer = (waist + flare * 0.5).min(0.85);
        vec![
            (0.0, y0),
            (waist, y0),
            (outer, hem_y),
            ((outer - leg).max(0.04), hem_y),
            (0.03, crotch),
            (0.0, crotch),
        ]
    }
}

fn garment_polygon(rng: &mut ChaCha8Rng, ty: GarmentType) -> Vec<(f64, f64)> {
    let right = match ty {
        GarmentType::Top => top_outline(rng, false),
        GarmentType::Outerwear => top_outline(rng, true),
        GarmentType::Bottoms => bottoms_outline(rng, -0.8),
        GarmentType::AllBody => {
            let mut upper = top_outline(rng, false);
            upper.truncate(upper.len() - 2);
            let waist_y = -0.3;
            let waist_w = uni(rng, 0.3, 0.42);
            upper.push((waist_w, waist_y));
            let lower = bottoms_outline(rng, waist_y);
            upper.extend(lower.into_iter().skip(2));
            upper
        }
    };
    mirrored(right)
}

fn light_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [uni(rng, 0.7, 0.95), uni(rng, 0.7, 0.95), uni(rng, 0.7, 0.95)]
}

fn texture(rng: &mut ChaCha8Rng, patterned: bool) -> Texture {
    let first = if patterned { 1 } else { 0 };
    match rng.gen_range(first..3) {
        0 => Texture::Solid(dark_color(rng)),
        1 => Texture::Stripes {
            a: dark_color(rng),
            b: light_color(rng),
            angle: uni(rng, 0.0, PI),
            period: uni(rng, 0.12, 0.4),
            duty: uni(rng, 0.3, 0.7),
        },
        _ => Texture::Dots {
            base: dark_color(rng),
            dot: light_color(rng),
            period: uni(rng, 0.12, 0.3),
            radius: uni(rng, 0.03, 0.06),
        },
    }
}

fn body(rng: &mut ChaCha8Rng) -> BodySpec {
    let bg = uni(rng, 0.85, 0.97);
    let tone = uni(rng, 0.0, 1.0);
    BodySpec {
        background: [bg, bg, (bg + uni(rng, -0.04, 0.03)).min(1.0)],
        skin: [0.95 - 0.35 * tone, 0.8 - 0.35 * tone, 0.7 - 0.35 * tone],
        base_layer: [uni(rng, 0.65, 0.8), uni(rng, 0.65, 0.8), uni(rng, 0.7, 0.85)],
        width: uni(rng, 0.9, 1.1),
    }
}

/// Forward (product → model) rotation-scale-translation.
fn forward(s: f64, phi: f64, tx: f64, ty: f64) -> AffineParams<f64> {
    let (c, sn) = (phi.cos(), phi.sin());
    AffineParams::new([s * c, -s * sn, tx, s * sn, s * c, ty])
}

fn centroid(poly: &[(f64, f64)], side: f64) -> (f64, f64) {
    let pts: Vec<_> = poly.iter().filter(|p| p.0 * side >= 0.0).collect();
    let n = pts.len() as f64;
    (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n)
}

fn pose(rng: &mut ChaCha8Rng, ty: GarmentType, poly: &[(f64, f64)], two: bool) -> Vec<AffineParams<f64>> {
    let (s_lo, s_hi, oy) = match ty {
        GarmentType::Bottoms => (0.65, 0.8, 0.32),
        GarmentType::Top => (0.75, 0.92, -0.08),
        GarmentType::Outerwear => (0.75, 0.9, -0.04),
        GarmentType::AllBody => (0.8, 0.95, 0.04),
    };
    let boost = if two { TWO_COMPONENT_SCALE } else { 1.0 };
    let s = uni(rng, s_lo, s_hi) * boost;
    let oy = oy * boost;
    let phi = uni(rng, -8.0, 8.0).to_radians();
    let base = forward(s, phi, uni(rng, -0.08, 0.08), oy + uni(rng, -0.06, 0.06));
    let fwd = if !two {
        vec![base]
    } else {
        let d = uni(rng, 0.12, 0.2);
        let v = uni(rng, -0.06, 0.06);
        let rho = uni(rng, 6.0, 12.0).to_radians();
        [(-1.0, 1.0), (1.0, -1.0)]
            .iter()
            .map(|&(side, spin)| {
                let (cx, cy) = centroid(poly, side);
                let (mx, my) = base.apply(cx, cy);
                let about = forward(1.0, spin * rho, 0.0, 0.0);
                let (rx, ry) = about.apply(mx, my);
                let shift = forward(1.0, spin * rho, mx - rx + side * d, my - ry + side * v);
                shift.compose(&base)
            })
            .collect()
    };
    fwd.iter().map(|f| f.inverse().expect("nonsingular pose")).collect()
}

/// Normalized coordinate of pixel center `i` on an axis of length `n`.
#[inline]
fn ncoord(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}

pub fn point_in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

impl SampleSpec {
    /// Draws record `index`; two-component samples are redrawn until the
    /// pasted garment splits into exactly two 8-connected regions.
    pub fn sample(cfg: &SyntheticConfig, index: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index as u64);
        let garment_type = GarmentType::ALL[index % 4];
        for _ in 0..MAX_ATTEMPTS {
            let polygon = garment_polygon(&mut rng, garment_type);
            let texture = texture(&mut rng, cfg.two_component);
            let body = body(&mut rng);
            let thetas = pose(&mut rng, garment_type, &polygon, cfg.two_component);
            let spec = Self {
                index,
                garment_type,
                polygon,
                texture,
                body,
                thetas,
            };
            if !cfg.two_component {
                return Ok(spec);
            }
            let (_, mask) = spec.render_model(cfg.image_size);
            let (h, w) = mask.size();
            let fg: Vec<bool> = (0..h * w).map(|i| !mask.keep(i / w, i % w)).collect();
            if connected_components(&fg, h, w).1 == 2 {
                return Ok(spec);
            }
        }
        Err(Error::Invalid(format!(
            "could not draw a two-component sample for index {index} in {MAX_ATTEMPTS} attempts"
        )))
    }

    /// Product image on white, already on the 8-bit grid.
    pub fn render_product(&self, size: usize) -> RgbImage<f64> {
        let alpha = self.alpha(size, None);
        RgbImage::from_fn(size, size, |c, y, x| {
            if alpha.data()[y * size + x] > 0.5 {
                self.texture.color(ncoord(x, size), ncoord(y, size))[c]
            } else {
                1.0
            }
        })
        .quantized()
    }

    /// Exact `[1,H,W]` coverage of the garment, optionally restricted to the
    /// left (`Some(-1)`) or right (`Some(1)`) half.
    pub fn alpha(&self, size: usize, side: Option<i8>) -> Tensor<f64> {
        Tensor::from_fn(&[1, size, size], |i| {
            let (x, y) = (ncoord(i % size, size), ncoord(i / size, size));
            let in_side = match side {
                None => true,
                Some(s) if s < 0 => x < 0.0,
                Some(_) => x >= 0.0,
            };
            if in_side && point_in_polygon(&self.polygon, x, y) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Alpha maps matching `thetas` one to one.
    pub fn component_alphas(&self, size: usize) -> Vec<Tensor<f64>> {
        if self.thetas.len() == 1 {
            vec![self.alpha(size, None)]
        } else {
            vec![self.alpha(size, Some(-1)), self.alpha(size, Some(1))]
        }
    }

    pub fn render_body(&self, size: usize) -> RgbImage<f64> {
        let b = &self.body;
        RgbImage::from_fn(size, size, |c, yi, xi| {
            let (x, y) = (ncoord(xi, size) / b.width, ncoord(yi, size));
            let ax = x.abs();
            let head = x * x + (y + 0.8) * (y + 0.8) < 0.13 * 0.13;
            let neck = ax < 0.06 && (-0.72..-0.6).contains(&y);
            let torso = ax < 0.4 && (-0.65..0.2).contains(&y);
            let arms = (0.42..0.56).contains(&ax) && (-0.6..0.3).contains(&y);
            let legs = (0.03..0.3).contains(&ax) && y >= 0.15;
            if torso || legs {
                b.base_layer[c]
            } else if head || neck || arms {
                b.skin[c]
            } else {
                b.background[c]
            }
        })
        .quantized()
    }

    pub fn render_model(&self, size: usize) -> (RgbImage<f64>, GarmentMask<f64>) {
        let product = self.render_product(size);
        paste_garment(&self.render_body(size), &product, &self.component_alphas(size), &self.thetas)
    }
}

/// Pastes each product component through its sampling map onto `body`.
///
/// Returns the composite and the mask (0 on pasted pixels). Inputs are
/// snapped to the 8-bit grid first so images decoded from disk give
/// bit-identical results.
pub fn paste_garment(
    body: &RgbImage<f64>,
    product: &RgbImage<f64>,
    alphas: &[Tensor<f64>],
    thetas: &[AffineParams<f64>],
) -> (RgbImage<f64>, GarmentMask<f64>) {
    let (h, w) = body.size();
    let product = product.quantized();
    let mut out = body.quantized();
    let mut keep = vec![true; h * w];
    for (alpha, theta) in alphas.iter().zip(thetas) {
        let wa = warp_tensor(alpha, theta, 0.0);
        let wp = warp_tensor(product.tensor(), theta, 1.0);
        for (i, k) in keep.iter_mut().enumerate() {
            if *k && wa.data()[i] >= 0.5 {
                *k = false;
                for c in 0..3 {
                    out.set(c, i / w, i % w, wp.data()[c * h * w + i]);
                }
            }
        }
    }
    let mask = GarmentMask::from_fn(h, w, |y, x| keep[y * w + x]);
    (out.quantized(), mask)
}

pub fn record_id(index: usize) -> String {
    format!("syn-{index:05}")
}

pub fn index_of(id: &str) -> Option<usize> {
    id.strip_prefix("syn-")?.parse().ok()
}

/// Writes `cfg.n` records plus `manifest.jsonl` and the generator sidecar into `out`.
pub fn generate_synthetic_corpus(cfg: &SyntheticConfig, out: &Path) -> Result<Manifest> {
    if cfg.n == 0 {
        return Err(Error::Invalid("corpus size must be at least 1".into()));
    }
    if cfg.image_size < 32 {
        return Err(Error::Invalid(format!("image size {} is below 32", cfg.image_size)));
    }
    for sub in ["products", "models", "masks"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let size = cfg.image_size;
    let mut records = Vec::with_capacity(cfg.n);
    for index in 0..cfg.n {
        let spec = SampleSpec::sample(cfg, index)?;
        let id = record_id(index);
        let product = spec.render_product(size);
        let (model, mask) = paste_garment(
            &spec.render_body(size),
            &product,
            &spec.component_alphas(size),
            &spec.thetas,
        );
        let rec = PairRecord {
            product_path: out.join("products").join(format!("{id}.png")),
            model_path: out.join("models").join(format!("{id}.png")),
            mask_path: out.join("masks").join(format!("{id}.png")),
            id,
            garment_type: spec.garment_type,
            theta_gt: Some(spec.thetas.iter().map(|t| t.to_f64_array()).collect()),
        };
        product.save(&rec.product_path)?;
        model.save(&rec.model_path)?;
        mask.save(&rec.mask_path)?;
        records.push(rec);
    }
    let manifest = Manifest {
        records,
        image_size: (size, size),
        version: MANIFEST_VERSION.to_string(),
    };
    manifest.save(&out.join("manifest.jsonl"))?;
    let sidecar = Sidecar {
        generator_version: GENERATOR_VERSION,
        config: cfg.clone(),
    };
    let path = out.join(SIDECAR);
    fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Handle on a generated corpus directory for re-rendering ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub config: SyntheticConfig,
    pub dir: PathBuf,
}

impl SyntheticCorpus {
    /// Reads the sidecar in `dir`.
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(SIDECAR);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let s: Sidecar = serde_json::from_str(&text)?;
        if s.generator_version != GENERATOR_VERSION {
            return Err(Error::Invalid(format!(
                "corpus generator version {} != {GENERATOR_VERSION}",
                s.generator_version
            )));
        }
        Ok(Self {
            config: s.config,
            dir: dir.to_path_buf(),
        })
    }

    /// Looks for a sidecar beside a manifest file.
    pub fn for_manifest(manifest_path: &Path) -> Option<Self> {
        Self::open(manifest_path.parent()?).ok()
    }

    pub fn manifest(&self) -> Result<Manifest> {
        load_manifest(&self.dir.join("manifest.jsonl"))
    }

    pub fn spec(&self, id: &str) -> Result<SampleSpec> {
        let index = index_of(id)
            .filter(|&i| i < self.config.n)
            .ok_or_else(|| Error::Unresolved(vec![id.to_string()]))?;
        SampleSpec::sample(&self.config, index)
    }

    /// What model `model_id` looks like wearing product `product_id`, and the
    /// region over which it differs from the original model image
    /// (0 = original garment or new garment).
    pub fn ground_truth(&self, product_id: &str, model_id: &str) -> Result<(RgbImage<f64>, GarmentMask<f64>)> {
        let size = self.config.image_size;
        let model = self.spec(model_id)?;
        let product = self.spec(product_id)?;
        let (_, old_mask) = model.render_model(size);
        let (img, new_mask) = paste_garment(
            &model.render_body(size),
            &product.render_product(size),
            &product.component_alphas(size),
            &model.thetas,
        );
        let (h, w) = (size, size);
        let region = GarmentMask::from_fn(h, w, |y, x| old_mask.keep(y, x) && new_mask.keep(y, x));
        Ok((img, region))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_in_polygon_square() {
        let sq = [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)];
        assert!(point_in_polygon(&sq, 0.0, 0.0));
        assert!(!point_in_polygon(&sq, 0.7, 0.0));
    }

    #[test]
    fn every_type_produces_a_sizeable_garment() {
        let cfg = SyntheticConfig {
            n: 8,
            image_size: 64,
            two_component: false,
            seed: 5,
        };
        for i in 0..8 {
            let spec = SampleSpec::sample(&cfg, i).unwrap();
            let (_, mask) = spec.render_model(64);
            let frac = mask.garment_pixels() as f64 / (64.0 * 64.0);
            assert!(frac > 0.08 && frac < 0.8, "index {i}: {frac}");
        }
    }
}
