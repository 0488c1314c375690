//! Distribution and reconstruction metrics: Fréchet distance, FID at fixed
//! sample size and its 1/n extrapolation, L1 and perceptual errors, and
//! test-set evaluation of a trained MTN.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use shapewarp_tensor::{lit, to_f64, Conv2d, Graph, ParamStore, Scalar, Tensor, Var};

use crate::dataset::synthetic::SyntheticCorpus;
use crate::dataset::PairData;
use crate::error::{io_err, Error, Result};
use crate::inpaint::Mtn;
use crate::raster::{batch, GarmentMask, RgbImage};
use crate::retrieval::{PairMode, TestPairSet};
use crate::training::{ensure_parent, CODE_VERSION};

const PSD_TOL: f64 = 1e-6;
const RIDGE: f64 = 1e-6;

/// `N × d` features from one extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub rows: Vec<Vec<f64>>,
    pub extractor_id: String,
}

impl FeatureSet {
    pub fn new(rows: Vec<Vec<f64>>, extractor_id: impl Into<String>) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::Invalid(format!("a feature set needs at least 2 rows, got {}", rows.len())));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("feature rows differ in length".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite feature".into()));
        }
        Ok(Self {
            rows,
            extractor_id: extractor_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }
}

/// Sample mean and unbiased covariance.
pub fn moments(rows: &[&[f64]]) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len();
    let d = rows[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
    let mut c = x.clone();
    for j in 0..d {
        c.column_mut(j).add_scalar_mut(-mu[j]);
    }
    let cov = c.transpose() * &c / (n.max(2) - 1) as f64;
    (mu, cov)
}

fn check_psd(s: &DMatrix<f64>, name: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !s.is_square() {
        return Err(Error::Shape(format!("{name} is not square")));
    }
    let scale = s.abs().max().max(1.0);
    if (s - s.transpose()).abs().max() > PSD_TOL * scale {
        return Err(Error::Invalid(format!("{name} is not symmetric")));
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.min() < -PSD_TOL * scale {
        return Err(Error::Invalid(format!(
            "{name} is not positive semidefinite (eigenvalue {:.3e})",
            eig.eigenvalues.min()
        )));
    }
    Ok(eig)
}

fn psd_sqrt(eig: &SymmetricEigen<f64, nalgebra::Dyn>) -> DMatrix<f64> {
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Eigenvalues of `Σ₁^{1/2} Σ₂ Σ₁^{1/2}`, clamped at zero; their square roots
/// sum to `tr((Σ₁Σ₂)^{1/2})`.
fn product_spectrum(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<(DMatrix<f64>, SymmetricEigen<f64, nalgebra::Dyn>)> {
    let a = psd_sqrt(&check_psd(s1, "Σ₁")?);
    check_psd(s2, "Σ₂")?;
    let m = &a * s2 * &a;
    let m = (&m + m.transpose()) * 0.5;
    Ok((a, m.symmetric_eigen()))
}

/// `(Σ₁Σ₂)^{1/2}` as `A · M^{1/2} · A⁻¹` with `A = Σ₁^{1/2}`, `M = AΣ₂A`.
/// Needs Σ₁ nonsingular.
pub fn sqrtm_product(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (a, eig) = product_spectrum(s1, s2)?;
    let inv = a
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Invalid("Σ₁ is singular".into()))?;
    Ok(a * psd_sqrt(&eig) * inv)
}

pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::Shape("Fréchet moments have mismatched dimensions".into()));
    }
    let (_, eig) = product_spectrum(s1, s2)?;
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu1 - mu2;
    let v = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    Ok(v.max(0.0))
}

fn canonical_order(rows: &[Vec<f64>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.sort_by(|&a, &b| {
        rows[a]
            .iter()
            .zip(&rows[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

fn subsample<'a>(f: &'a FeatureSet, n: usize, rng: &mut ChaCha8Rng) -> Vec<&'a [f64]> {
    let mut idx = canonical_order(&f.rows);
    idx.shuffle(rng);
    idx[..n].iter().map(|&i| f.rows[i].as_slice()).collect()
}

/// Fréchet distance between the moments of `n`-row subsamples of `a` and
/// `b`. Subsampling shuffles the canonically sorted rows, so the result does
/// not depend on input row order.
pub fn fid_at_n(a: &FeatureSet, b: &FeatureSet, n: usize, seed: u64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dims {} and {} differ", a.dim(), b.dim())));
    }
    if n < 2 || n > a.len().min(b.len()) {
        return Err(Error::Invalid(format!(
            "subsample size {n} outside [2, {}]",
            a.len().min(b.len())
        )));
    }
    let d = a.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mu1, mut s1) = moments(&subsample(a, n, &mut rng));
    let (mu2, mut s2) = moments(&subsample(b, n, &mut rng));
    if n < d + 1 {
        log::warn!("FID subsample {n} ≤ feature dim {d}; covariances ridge-regularized");
        for i in 0..d {
            s1[(i, i)] += RIDGE;
            s2[(i, i)] += RIDGE;
        }
    }
    frechet_distance(&mu1, &s1, &mu2, &s2)
}

/// Eight evenly spaced sizes from `n/8` to `n`.
pub fn default_batch_sizes(n: usize) -> Vec<usize> {
    let lo = (n / 8).max(2) as f64;
    let mut v: Vec<usize> = (0..8)
        .map(|i| (lo + i as f64 * (n as f64 - lo) / 7.0).round() as usize)
        .collect();
    v.dedup();
    v
}

/// Ordinary least squares of `y` on `x`; returns `(intercept, slope)`.
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - slope * mx, slope)
}

/// Intercept of FID regressed on `1/n` over `batch_sizes`.
pub fn fid_inf(a: &FeatureSet, b: &FeatureSet, batch_sizes: &[usize], seed: u64) -> Result<f64> {
    let d = a.dim();
    let limit = a.len().min(b.len());
    let mut sizes: Vec<usize> = batch_sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for &n in &sizes {
        if n < d + 1 || n > limit {
            log::warn!("FID∞: batch size {n} skipped (needs {} ≤ n ≤ {limit})", d + 1);
            continue;
        }
        xs.push(1.0 / n as f64);
        ys.push(fid_at_n(a, b, n, seed)?);
    }
    if xs.len() < 2 {
        return Err(Error::Invalid(format!(
            "FID∞ needs at least 2 valid batch sizes, got {}",
            xs.len()
        )));
    }
    if xs.len() < 5 {
        log::warn!("FID∞ extrapolated from only {} batch sizes", xs.len());
    }
    Ok(ols(&xs, &ys).0)
}

pub fn l1_error<T: Scalar>(xhat: &Tensor<T>, x: &Tensor<T>) -> Result<f64> {
    if xhat.shape() != x.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", xhat.shape(), x.shape())));
    }
    let s: f64 = xhat.data().iter().zip(x.data()).map(|(&a, &b)| to_f64((a - b).abs())).sum();
    Ok(s / x.len().max(1) as f64)
}

/// Mean absolute difference over pixels where `region` is 0, all channels.
pub fn masked_l1<T: Scalar>(xhat: &RgbImage<T>, x: &RgbImage<T>, region: &GarmentMask<T>) -> Result<f64> {
    if xhat.size() != x.size() || region.size() != x.size() {
        return Err(Error::Shape("masked L1 inputs differ in size".into()));
    }
    let (h, w) = x.size();
    let (mut s, mut n) = (0.0, 0usize);
    for y in 0..h {
        for xx in 0..w {
            if region.keep(y, xx) {
                continue;
            }
            for c in 0..3 {
                s += to_f64((xhat.get(c, y, xx) - x.get(c, y, xx)).abs());
            }
            n += 3;
        }
    }
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

/// Images → features. Implementations must be deterministic.
pub trait FeatureExtractor<T: Scalar> {
    fn id(&self) -> String;
    /// Pooled per-image feature vectors.
    fn features(&self, imgs: &[&RgbImage<T>]) -> Result<FeatureSet>;
    /// Feature maps of one image at the designated layers.
    fn feature_maps(&self, img: &RgbImage<T>) -> Result<Vec<Tensor<T>>>;
}

pub fn perceptual_error<T: Scalar>(xhat: &RgbImage<T>, x: &RgbImage<T>, ex: &dyn FeatureExtractor<T>) -> Result<f64> {
    let (a, b) = (ex.feature_maps(xhat)?, ex.feature_maps(x)?);
    let mut total = 0.0;
    for (fa, fb) in a.iter().zip(&b) {
        let s: f64 = fa.data().iter().zip(fb.data()).map(|(&p, &q)| to_f64((p - q) * (p - q))).sum();
        total += s / fa.len().max(1) as f64;
    }
    Ok(total / a.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub seed: u64,
    pub channels: [usize; 3],
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            channels: [16, 32, 32],
        }
    }
}

/// Fixed random-weight conv stack: three conv+ReLU layers with 2× pooling
/// between them. Feature maps are taken after each ReLU. Pooled features are
/// per-channel spatial means and standard deviations of the last two layers.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor<T = f32> {
    pub config: ExtractorConfig,
    store: ParamStore<T>,
    convs: Vec<Conv2d>,
}

impl<T: Scalar> RandomConvExtractor<T> {
    pub fn new(config: &ExtractorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut cin = 3;
        let convs = config
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(&mut store, &format!("extractor.conv{i}"), cin, c, 3, 1, &mut rng);
                cin = c;
                conv
            })
            .collect();
        Self {
            config: config.clone(),
            store,
            convs,
        }
    }

    /// Length of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        2 * (self.config.channels[1] + self.config.channels[2])
    }

    /// `[N,3,H,W]` → feature maps at each designated layer.
    pub fn maps_var(&self, g: &Graph<T>, x: Var) -> Vec<Var> {
        let p = self.store.bind(g, false);
        let mut h = g.scale(g.add_scalar(x, lit(-0.5)), lit(2.0));
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            if i > 0 {
                h = g.avg_pool(h, 2);
            }
            h = g.relu(c.forward(g, &p, h));
            out.push(h);
        }
        out
    }
}

fn channel_mean_std<T: Scalar>(map: &Tensor<T>, b: usize) -> impl Iterator<Item = f64> + '_ {
    let c = map.dim(1);
    let plane = map.len() / (map.dim(0) * c);
    let img = &map.data()[b * c * plane..(b + 1) * c * plane];
    let chans: Vec<&[T]> = img.chunks(plane).collect();
    let means: Vec<f64> = chans
        .iter()
        .map(|ch| ch.iter().map(|&v| to_f64(v)).sum::<f64>() / plane as f64)
        .collect();
    let stds: Vec<f64> = chans
        .iter()
        .zip(&means)
        .map(|(ch, &mu)| (ch.iter().map(|&v| (to_f64(v) - mu).powi(2)).sum::<f64>() / plane as f64).sqrt())
        .collect();
    means.into_iter().chain(stds)
}

impl<T: Scalar> FeatureExtractor<T> for RandomConvExtractor<T> {
    fn id(&self) -> String {
        format!("random_conv(seed={},channels={:?})", self.config.seed, self.config.channels)
    }

    fn features(&self, imgs: &[&RgbImage<T>]) -> Result<FeatureSet> {
        let mut rows = Vec::with_capacity(imgs.len());
        for chunk in imgs.chunks(64) {
            let x = batch(&chunk.iter().map(|i| i.tensor()).collect::<Vec<_>>())?;
            let g = Graph::new();
            let maps = self.maps_var(&g, g.constant(x));
            let (m1, m2) = (g.value(maps[1]), g.value(maps[2]));
            for b in 0..chunk.len() {
                rows.push(channel_mean_std(&m1, b).chain(channel_mean_std(&m2, b)).collect());
            }
        }
        FeatureSet::new(rows, self.id())
    }

    fn feature_maps(&self, img: &RgbImage<T>) -> Result<Vec<Tensor<T>>> {
        let (h, w) = img.size();
        let g = Graph::new();
        let maps = self.maps_var(&g, g.constant(img.tensor().clone().reshape(&[1, 3, h, w])?));
        Ok(maps.iter().map(|&m| g.value(m).clone()).collect())
    }
}

/// Where ground truth for a (product, model) pair comes from.
#[derive(Clone, Copy, Debug)]
pub enum GroundTruth<'a> {
    /// Only a record's own pair (`product_id == model_id`) has ground truth.
    Records,
    /// Any pair can be re-rendered by the generator.
    Synthetic(&'a SyntheticCorpus),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct EvalConfig {
    /// FID∞ batch sizes; empty means eight from N/8 to N.
    pub batch_sizes: Vec<usize>,
    pub seed: u64,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeScores {
    pub mode: PairMode,
    pub pairs: usize,
    pub ground_truth_pairs: usize,
    pub fid_inf: f64,
    pub fid_n: f64,
    pub fid_n_size: usize,
    /// Whole-image L1 on the ground-truth subset; `None` without ground truth.
    pub l1: Option<f64>,
    /// L1 over the region where the pair's ground truth differs from the model.
    pub masked_l1: Option<f64>,
    pub perceptual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub code_version: String,
    pub extractor: String,
    pub config: serde_json::Value,
    pub modes: Vec<ModeScores>,
}

impl EvalReport {
    pub fn mode(&self, m: PairMode) -> Option<&ModeScores> {
        self.modes.iter().find(|s| s.mode == m)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub const REPORT_METRICS: [&str; 5] = ["fid_inf", "fid_n", "l1", "masked_l1", "perceptual"];

fn metric(s: &ModeScores, name: &str) -> Option<f64> {
    match name {
        "fid_inf" => Some(s.fid_inf),
        "fid_n" => Some(s.fid_n),
        "l1" => s.l1,
        "masked_l1" => s.masked_l1,
        _ => s.perceptual,
    }
}

/// One row per (report, metric), one column per pair mode.
pub fn write_reports_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let mut modes: Vec<PairMode> = reports.iter().flat_map(|r| r.modes.iter().map(|m| m.mode)).collect();
    modes.sort();
    modes.dedup();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["method".to_string(), "metric".to_string()];
    header.extend(modes.iter().map(|m| m.as_str().to_string()));
    w.write_record(&header)?;
    for r in reports {
        for name in REPORT_METRICS {
            let mut row = vec![r.label.clone(), name.to_string()];
            row.extend(modes.iter().map(|&m| r.mode(m).and_then(|s| metric(s, name)).map(|v| format!("{v:.6}")).unwrap_or_default()));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Synthesizes every pair (ids resolved in `data`), then scores each mode:
/// FID∞ and FID at the full size against the model images of `real`, and
/// L1/perceptual errors over pairs with ground truth.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_run<T: Scalar>(
    label: &str,
    pairs: &TestPairSet,
    mtn: &Mtn<T>,
    data: &[PairData],
    real: &[PairData],
    extractor: &dyn FeatureExtractor<T>,
    gt: GroundTruth<'_>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one pair".into()));
    }
    let lookup: HashMap<&str, &PairData> = data.iter().map(|d| (d.record.id.as_str(), d)).collect();
    let mut missing: Vec<String> = pairs
        .pairs
        .iter()
        .flat_map(|p| [&p.product_id, &p.model_id])
        .filter(|id| !lookup.contains_key(id.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::Unresolved(missing));
    }
    let real_imgs: Vec<RgbImage<T>> = real.iter().map(|d| d.model.cast()).collect();
    let real = extractor.features(&real_imgs.iter().collect::<Vec<_>>())?;

    let mut modes = Vec::new();
    for mode in pairs.modes() {
        let mut outputs = Vec::new();
        let (mut l1, mut ml1, mut perc, mut n_gt) = (0.0, 0.0, 0.0, 0usize);
        for p in pairs.of_mode(mode) {
            let prod = lookup[p.product_id.as_str()];
            let model = lookup[p.model_id.as_str()];
            let x: RgbImage<T> = model.model.cast();
            let out = mtn.synthesize(&prod.product.cast(), &x, &model.mask.cast())?;
            let truth: Option<(RgbImage<T>, GarmentMask<T>)> = match gt {
                GroundTruth::Synthetic(c) => {
                    let (img, region) = c.ground_truth(&p.product_id, &p.model_id)?;
                    Some((img.cast(), region.cast()))
                }
                GroundTruth::Records if p.product_id == p.model_id => Some((x.clone(), model.mask.cast())),
                GroundTruth::Records => None,
            };
            if let Some((img, region)) = truth {
                l1 += l1_error(out.image.tensor(), img.tensor())?;
                ml1 += masked_l1(&out.image, &img, &region)?;
                perc += perceptual_error(&out.image, &img, extractor)?;
                n_gt += 1;
            }
            outputs.push(out.image);
        }
        let gen = extractor.features(&outputs.iter().collect::<Vec<_>>())?;
        let n = gen.len().min(real.len());
        let sizes = if config.batch_sizes.is_empty() {
            default_batch_sizes(n)
        } else {
            config.batch_sizes.clone()
        };
        let denom = n_gt.max(1) as f64;
        let avg = |v: f64| (n_gt > 0).then_some(v / denom);
        modes.push(ModeScores {
            mode,
            pairs: outputs.len(),
            ground_truth_pairs: n_gt,
            fid_inf: fid_inf(&gen, &real, &sizes, config.seed)?,
            fid_n: fid_at_n(&gen, &real, n, config.seed)?,
            fid_n_size: n,
            l1: avg(l1),
            masked_l1: avg(ml1),
            perceptual: avg(perc),
        });
    }
    Ok(EvalReport {
        label: label.to_string(),
        code_version: CODE_VERSION.into(),
        extractor: extractor.id(),
        config: serde_json::json!({"eval": config, "mtn": mtn.config, "image_size": mtn.image_size, "real_pool": real.len()}),
        modes,
    })
}
