//! k-affine warper: parameter prediction, differentiable warping, pixel
//! loss, cascade-min warp loss and cascade objective.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use shapewarp_tensor::{lit, to_f64, Adam, AdamConfig, Bound, Conv2d, Graph, Linear, ParamStore, Scalar, Tensor, Var};

use crate::dataset::PairData;
use crate::error::{Error, Result};
pub use crate::geometry::AffineParams;
use crate::geometry::warp_tensor;
use crate::raster::{batch, GarmentMask, RgbImage};
use crate::training::{load_checkpoint, save_checkpoint, step_rng, CheckpointMeta, History, CODE_VERSION};

/// k affine maps and the product warped by each.
#[derive(Clone, Debug)]
pub struct WarpBundle<T = f32> {
    pub thetas: Vec<AffineParams<T>>,
    pub warps: Vec<RgbImage<T>>,
}

impl<T: Scalar> WarpBundle<T> {
    pub fn k(&self) -> usize {
        self.thetas.len()
    }
}

/// Warps an RGB image; samples falling outside read white.
pub fn apply_affine<T: Scalar>(img: &RgbImage<T>, theta: &AffineParams<T>) -> RgbImage<T> {
    RgbImage::new(warp_tensor(img.tensor(), theta, T::one())).expect("three channels")
}

/// Per-pixel `Σ_c |w − (1−m)x| · (1 + β(1−m))`, shape `[1, H, W]`.
pub fn pixel_loss<T: Scalar>(w: &RgbImage<T>, x: &RgbImage<T>, m: &GarmentMask<T>, beta: T) -> Result<Tensor<T>> {
    if w.size() != x.size() || m.size() != x.size() {
        return Err(Error::Shape(format!(
            "pixel loss inputs differ: warp {:?}, model {:?}, mask {:?}",
            w.size(),
            x.size(),
            m.size()
        )));
    }
    let (h, wd) = x.size();
    let p = h * wd;
    let (wv, xv, mv) = (w.tensor().data(), x.tensor().data(), m.tensor().data());
    Ok(Tensor::from_fn(&[1, h, wd], |i| {
        let hole = T::one() - mv[i];
        let mut s = T::zero();
        for c in 0..3 {
            s += (wv[c * p + i] - hole * xv[c * p + i]).abs();
        }
        s * (T::one() + beta * hole)
    }))
}

/// Mean over pixels of the pointwise minimum across `maps`.
pub fn cascade_warp_loss<T: Scalar>(maps: &[Tensor<T>]) -> Result<T> {
    let first = maps.first().ok_or(Error::Invalid("cascade warp loss needs at least one map".into()))?;
    if maps.iter().any(|m| m.shape() != first.shape()) {
        return Err(Error::Shape("cascade warp loss maps differ in shape".into()));
    }
    let mut acc = T::zero();
    for i in 0..first.len() {
        let mut v = first.data()[i];
        for m in &maps[1..] {
            v = v.min(m.data()[i]);
        }
        acc += v;
    }
    Ok(acc / lit(first.len() as f64))
}

/// `(1/k) Σ_i L_warp(1..i) + α/(k−1) Σ_{i≥2} ‖θ_i − θ_1‖²`.
pub fn cascade_loss<T: Scalar>(thetas: &[AffineParams<T>], maps: &[Tensor<T>], alpha: T) -> Result<T> {
    let k = maps.len();
    if thetas.len() != k {
        return Err(Error::Invalid(format!("{} thetas for {k} loss maps", thetas.len())));
    }
    let mut total = T::zero();
    for i in 1..=k {
        total += cascade_warp_loss(&maps[..i])?;
    }
    total /= lit(k as f64);
    if k > 1 {
        let reg: T = thetas[1..].iter().map(|t| t.dist2(&thetas[0])).sum();
        total += alpha * reg / lit((k - 1) as f64);
    }
    Ok(total)
}

/// Pixel loss on the graph: `w` is `[N,3,H,W]`, `target = (1−m)x` and
/// `weight = 1 + β(1−m)` are constants. Returns `[N,1,H,W]`.
pub fn pixel_loss_var<T: Scalar>(g: &Graph<T>, w: Var, target: Var, weight: Var) -> Var {
    let s = g.shape(w);
    let d = g.abs(g.sub(w, target));
    let summed = g.sum_to(d, &[s[0], 1, s[2], s[3]]);
    g.mul(summed, weight)
}

/// Graph cascade objective over per-sample maps and `[N,6]` thetas, averaged
/// over the batch. Returns `(total, [L_warp(1..i) for i in 1..=k])`.
pub fn cascade_loss_var<T: Scalar>(g: &Graph<T>, thetas: &[Var], maps: &[Var], alpha: T) -> (Var, Vec<Var>) {
    let k = maps.len();
    let partial: Vec<Var> = (1..=k).map(|i| g.mean(g.min_of(&maps[..i]))).collect();
    let mut total = partial[0];
    for &p in &partial[1..] {
        total = g.add(total, p);
    }
    total = g.scale(total, lit(1.0 / k as f64));
    if k > 1 {
        let n = g.shape(thetas[0])[0];
        let mut reg = g.sum(g.square(g.sub(thetas[1], thetas[0])));
        for &t in &thetas[2..] {
            reg = g.add(reg, g.sum(g.square(g.sub(t, thetas[0]))));
        }
        let scale = to_f64(alpha) / ((k - 1) * n) as f64;
        total = g.add(total, g.scale(reg, lit(scale)));
    }
    (total, partial)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarperConfig {
    pub k: usize,
    pub beta: f64,
    pub alpha: f64,
    /// Resolution the predictor sees (input is average-pooled to it).
    pub work_res: usize,
    pub channels: [usize; 3],
    pub hidden: usize,
    /// Std of the seeded noise added to θ_2..θ_k during training only.
    pub theta_jitter: f64,
}

impl Default for WarperConfig {
    fn default() -> Self {
        Self {
            k: 2,
            beta: 3.0,
            alpha: 0.1,
            work_res: 32,
            channels: [16, 32, 32],
            hidden: 64,
            theta_jitter: 0.02,
        }
    }
}

impl WarperConfig {
    pub fn validate(&self, image_size: (usize, usize)) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("warper k must be at least 1".into()));
        }
        let (h, w) = image_size;
        if h != w {
            return Err(Error::Config(format!("warper needs square images, got {h}×{w}")));
        }
        if !self.work_res.is_multiple_of(8) || self.work_res == 0 || h % self.work_res != 0 {
            return Err(Error::Config(format!(
                "warper work_res {} must be a multiple of 8 dividing the image size {h}",
                self.work_res
            )));
        }
        if self.beta < 0.0 || self.alpha < 0.0 || self.theta_jitter < 0.0 {
            return Err(Error::Config("warper beta, alpha and theta_jitter must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Conv trunk on `[product RGB, mask]` → k affine maps. The output layer
/// starts at zero weights with identity bias.
#[derive(Clone, Debug)]
pub struct WarpPredictor {
    pub config: WarperConfig,
    pub image_size: usize,
    convs: Vec<Conv2d>,
    fc: Linear,
    head: Linear,
}

impl WarpPredictor {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: &WarperConfig,
        image_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate((image_size, image_size))?;
        let mut convs = Vec::new();
        let mut cin = 4;
        for (i, &c) in config.channels.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("{prefix}conv{i}"), cin, c, 3, 2, rng));
            cin = c;
        }
        let side = config.work_res / 8;
        let fc = Linear::new(store, &format!("{prefix}fc"), cin * side * side, config.hidden, rng);
        let bias: Vec<T> = (0..config.k)
            .flat_map(|_| AffineParams::<T>::identity().m)
            .collect();
        let head = Linear::with_constant_output(store, &format!("{prefix}head"), config.hidden, &bias);
        Ok(Self {
            config: config.clone(),
            image_size,
            convs,
            fc,
            head,
        })
    }

    /// `[N,3,H,W]` product and `[N,1,H,W]` mask → `[N, 6k]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, product: Var, mask: Var) -> Var {
        let x = g.concat(&[product, mask]);
        let mut h = g.avg_pool(x, self.image_size / self.config.work_res);
        for c in &self.convs {
            h = g.leaky_relu(c.forward(g, p, h), lit(0.1));
        }
        let n = g.shape(h)[0];
        let flat_dim = g.value(h).len() / n;
        let h = g.reshape(h, &[n, flat_dim]);
        let h = g.leaky_relu(self.fc.forward(g, p, h), lit(0.1));
        self.head.forward(g, p, h)
    }

    /// Splits `[N,6k]` predictions into k `[N,6]` handles.
    pub fn split<T: Scalar>(&self, g: &Graph<T>, thetas: Var) -> Vec<Var> {
        (0..self.config.k).map(|i| g.narrow(thetas, 6 * i, 6)).collect()
    }
}

/// Batched inputs of a set of pairs.
pub struct PairBatch<T> {
    pub products: Tensor<T>,
    pub models: Tensor<T>,
    pub masks: Tensor<T>,
}

impl<T: Scalar> PairBatch<T> {
    pub fn from_pairs(pairs: &[&PairData]) -> Result<Self> {
        let p: Vec<Tensor<T>> = pairs.iter().map(|d| d.product.tensor().cast()).collect();
        let x: Vec<Tensor<T>> = pairs.iter().map(|d| d.model.tensor().cast()).collect();
        let m: Vec<Tensor<T>> = pairs.iter().map(|d| d.mask.tensor().cast()).collect();
        Ok(Self {
            products: batch(&p.iter().collect::<Vec<_>>())?,
            models: batch(&x.iter().collect::<Vec<_>>())?,
            masks: batch(&m.iter().collect::<Vec<_>>())?,
        })
    }

    /// `(1−m)x` and `1 + β(1−m)`.
    pub fn warp_targets(&self, beta: f64) -> (Tensor<T>, Tensor<T>) {
        let s = self.models.shape();
        let plane = s[2] * s[3];
        let (x, m) = (self.models.data(), self.masks.data());
        let target = Tensor::from_fn(s, |i| {
            let (b, r) = (i / (3 * plane), i % plane);
            (T::one() - m[b * plane + r]) * x[i]
        });
        let weight = self.masks.map(|v| T::one() + lit::<T>(beta) * (T::one() - v));
        (target, weight)
    }
}

/// Adds seeded Gaussian jitter to θ_2..θ_k.
pub(crate) fn jitter_thetas<T: Scalar>(g: &Graph<T>, thetas: Vec<Var>, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Var> {
    if sigma == 0.0 {
        return thetas;
    }
    thetas
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            if i == 0 {
                return t;
            }
            let noise = Tensor::from_fn(&g.shape(t), |_| {
                let z: f64 = StandardNormal.sample(rng);
                lit(sigma * z)
            });
            g.add(t, g.constant(noise))
        })
        .collect()
}

/// Warper with its parameters; the standalone form used for warp-only training.
#[derive(Clone, Debug)]
pub struct Warper<T = f32> {
    pub store: ParamStore<T>,
    pub predictor: WarpPredictor,
}

pub const WARPER_KIND: &str = "warper";

impl<T: Scalar> Warper<T> {
    pub fn new(config: &WarperConfig, image_size: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let predictor = WarpPredictor::new(&mut store, "warper.", config, image_size, &mut rng)?;
        Ok(Self { store, predictor })
    }

    pub fn k(&self) -> usize {
        self.predictor.config.k
    }

    fn check_size(&self, size: (usize, usize)) -> Result<()> {
        let s = self.predictor.image_size;
        if size != (s, s) {
            return Err(Error::Shape(format!("warper expects {s}×{s} inputs, got {size:?}")));
        }
        Ok(())
    }

    pub fn predict_params(&self, p: &RgbImage<T>, m: &GarmentMask<T>) -> Result<Vec<AffineParams<T>>> {
        self.check_size(p.size())?;
        self.check_size(m.size())?;
        let (h, w) = p.size();
        let g = Graph::new();
        let bound = self.store.bind(&g, false);
        let pv = g.constant(p.tensor().clone().reshape(&[1, 3, h, w])?);
        let mv = g.constant(m.tensor().clone().reshape(&[1, 1, h, w])?);
        let out = self.predictor.forward(&g, &bound, pv, mv);
        let v = g.value(out);
        Ok(v.data()
            .chunks(6)
            .map(|c| AffineParams::new(c.try_into().expect("six values")))
            .collect())
    }

    pub fn warp(&self, p: &RgbImage<T>, m: &GarmentMask<T>) -> Result<WarpBundle<T>> {
        let thetas = self.predict_params(p, m)?;
        let warps = thetas.iter().map(|t| apply_affine(p, t)).collect();
        Ok(WarpBundle { thetas, warps })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarpTrainConfig {
    pub warper: WarperConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for WarpTrainConfig {
    fn default() -> Self {
        Self {
            warper: WarperConfig::default(),
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

pub const WARP_HISTORY: [&str; 3] = ["step", "L_warp", "L_cascade"];

/// Warp-only training state (cascade objective alone).
pub struct WarpTrainer<T = f32> {
    pub config: WarpTrainConfig,
    pub warper: Warper<T>,
    pub adam: Adam<T>,
    pub step: u64,
    pub history: History,
}

impl<T: Scalar> WarpTrainer<T> {
    pub fn new(config: WarpTrainConfig, image_size: usize) -> Result<Self> {
        let warper = Warper::new(&config.warper, image_size, config.seed)?;
        let adam = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            &warper.store,
        );
        Ok(Self {
            config,
            warper,
            adam,
            step: 0,
            history: History::new(&WARP_HISTORY),
        })
    }

    /// One optimizer step; returns `(L_warp(1..k), L_cascade)`.
    pub fn train_step(&mut self, data: &[PairData]) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Err(Error::Invalid("no training pairs".into()));
        }
        let mut rng = step_rng(self.config.seed, self.step);
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(self.config.batch_size.min(data.len()));
        let pairs: Vec<&PairData> = idx.iter().map(|&i| &data[i]).collect();
        let b = PairBatch::<T>::from_pairs(&pairs)?;
        let cfg = &self.config.warper;
        let (target, weight) = b.warp_targets(cfg.beta);
        let g = Graph::new();
        let bound = self.warper.store.bind(&g, true);
        let pv = g.constant(b.products.clone());
        let mv = g.constant(b.masks);
        let pred = self.warper.predictor.forward(&g, &bound, pv, mv);
        let thetas = self.warper.predictor.split(&g, pred);
        let thetas = jitter_thetas(&g, thetas, cfg.theta_jitter, &mut rng);
        let (tv, wv) = (g.constant(target), g.constant(weight));
        let maps: Vec<Var> = thetas
            .iter()
            .map(|&t| pixel_loss_var(&g, g.grid_sample(pv, t, T::one()), tv, wv))
            .collect();
        let (total, partial) = cascade_loss_var(&g, &thetas, &maps, lit(cfg.alpha));
        let grads = g.backward(total);
        let gs = bound.grads(&grads, &self.warper.store);
        self.adam.update(&mut self.warper.store, &gs);
        self.step += 1;
        let lw = to_f64(g.item(*partial.last().expect("k ≥ 1")));
        let lc = to_f64(g.item(total));
        self.history.push(vec![self.step as f64, lw, lc]);
        Ok((lw, lc))
    }

    pub fn train(&mut self, data: &[PairData], until: u64) -> Result<()> {
        while self.step < until {
            let (lw, _) = self.train_step(data)?;
            if self.step.is_multiple_of(100) {
                log::info!("warper step {} L_warp {lw:.4}", self.step);
            }
        }
        Ok(())
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            kind: WARPER_KIND.into(),
            code_version: CODE_VERSION.into(),
            step: self.step,
            config: serde_json::json!({
                "train": self.config,
                "image_size": self.warper.predictor.image_size,
            }),
            adam: None,
            history: self.history.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.meta(), &self.warper.store, Some(&self.adam))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint::<T>(path, WARPER_KIND)?;
        let config: WarpTrainConfig = serde_json::from_value(ck.meta.config["train"].clone())?;
        let size = ck.meta.config["image_size"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing image_size".into()))? as usize;
        let mut t = Self::new(config, size)?;
        t.warper.store.load_named(&ck.params)?;
        if let Some(a) = ck.adam {
            t.adam = a;
        }
        t.step = ck.meta.step;
        t.history = ck.meta.history;
        Ok(t)
    }
}

/// Mean `L_warp(1..k)` of a warper over `data`, no jitter.
pub fn evaluate_warp_loss<T: Scalar>(warper: &Warper<T>, data: &[PairData], beta: f64) -> Result<f64> {
    let mut acc = 0.0;
    for d in data {
        let p: RgbImage<T> = d.product.cast();
        let x: RgbImage<T> = d.model.cast();
        let m: GarmentMask<T> = d.mask.cast();
        let bundle = warper.warp(&p, &m)?;
        let maps = bundle
            .warps
            .iter()
            .map(|w| pixel_loss(w, &x, &m, lit(beta)))
            .collect::<Result<Vec<_>>>()?;
        acc += to_f64(cascade_warp_loss(&maps)?);
    }
    Ok(acc / data.len().max(1) as f64)
}
