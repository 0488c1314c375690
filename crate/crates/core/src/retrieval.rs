//! Exact nearest-neighbour search over shape codes and the matched/random
//! product–model pair sets built from it.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use shapewarp_tensor::archive::{read_archive, write_archive};
use shapewarp_tensor::{Scalar, Tensor};

use crate::dataset::{GarmentType, PairData, PairRecord};
use crate::error::{Error, Result};
use crate::raster::RgbImage;
use crate::shape_matching::{ShapeCode, ShapeMatchingNet};
use crate::training::CODE_VERSION;

pub const DEFAULT_TOP_K: usize = 25;
const INDEX_KIND: &str = "embedding_index";
const ENCODE_CHUNK: usize = 64;

/// Exact index under squared Euclidean distance.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex<T = f32> {
    dim: usize,
    ids: Vec<String>,
    codes: Vec<T>,
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    kind: String,
    code_version: String,
    dimension: usize,
    count: usize,
    metric: String,
    ids: Vec<String>,
}

fn by_distance_then_id<T: Scalar>(a: &(String, T), b: &(String, T)) -> Ordering {
    a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0))
}

impl<T: Scalar> EmbeddingIndex<T> {
    pub fn build(items: Vec<(String, ShapeCode<T>)>) -> Result<Self> {
        let Some(first) = items.first() else {
            return Err(Error::Invalid("cannot index an empty set of codes".into()));
        };
        let dim = first.1 .0.len();
        let mut seen = HashSet::new();
        let mut ids = Vec::with_capacity(items.len());
        let mut codes = Vec::with_capacity(items.len() * dim);
        for (id, code) in items {
            if code.0.len() != dim {
                return Err(Error::Shape(format!("code {id} has {} dims, index has {dim}", code.0.len())));
            }
            if code.0.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("code {id} has non-finite entries")));
            }
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateId(id));
            }
            ids.push(id);
            codes.extend(code.0);
        }
        Ok(Self { dim, ids, codes })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn code(&self, i: usize) -> &[T] {
        &self.codes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<ShapeCode<T>> {
        let i = self.ids.iter().position(|x| x == id)?;
        Some(ShapeCode(self.code(i).to_vec()))
    }

    /// The `k` nearest entries by ascending distance, ties broken by id.
    pub fn query_knn(&self, q: &ShapeCode<T>, k: usize) -> Result<Vec<(String, T)>> {
        if self.is_empty() {
            return Err(Error::Invalid("query on an empty index".into()));
        }
        if k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        if q.0.len() != self.dim {
            return Err(Error::Shape(format!("query has {} dims, index has {}", q.0.len(), self.dim)));
        }
        let mut all: Vec<(String, T)> = (0..self.len())
            .map(|i| {
                let d = self.code(i).iter().zip(&q.0).map(|(&a, &b)| (a - b) * (a - b)).sum();
                (self.ids[i].clone(), d)
            })
            .collect();
        let k = k.min(all.len());
        if k < all.len() {
            all.select_nth_unstable_by(k - 1, by_distance_then_id);
            all.truncate(k);
        }
        all.sort_by(by_distance_then_id);
        Ok(all)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = IndexHeader {
            kind: INDEX_KIND.into(),
            code_version: CODE_VERSION.into(),
            dimension: self.dim,
            count: self.len(),
            metric: "squared_euclidean".into(),
            ids: self.ids.clone(),
        };
        let codes = Tensor::from_vec(&[self.len(), self.dim], self.codes.clone())?;
        write_archive(path, &serde_json::to_value(header)?, &[("codes".to_string(), codes)])?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = read_archive::<T>(path)?;
        let h: IndexHeader = serde_json::from_value(meta)?;
        if h.kind != INDEX_KIND {
            return Err(Error::Checkpoint(format!("{} is not an embedding index", path.display())));
        }
        let codes = tensors
            .into_iter()
            .find(|(n, _)| n == "codes")
            .ok_or_else(|| Error::Checkpoint("index archive lacks codes".into()))?
            .1;
        if codes.shape() != [h.count, h.dimension] || h.ids.len() != h.count {
            return Err(Error::Checkpoint("index header disagrees with payload".into()));
        }
        let items = h
            .ids
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, ShapeCode(codes.data()[i * h.dimension..(i + 1) * h.dimension].to_vec())))
            .collect();
        Self::build(items)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    Random,
    MatchedColor,
    MatchedGrayscale,
}

impl PairMode {
    pub const ALL: [PairMode; 3] = [Self::Random, Self::MatchedColor, Self::MatchedGrayscale];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::MatchedColor => "matched_color",
            Self::MatchedGrayscale => "matched_grayscale",
        }
    }

    pub fn matched(grayscale: bool) -> Self {
        if grayscale {
            Self::MatchedGrayscale
        } else {
            Self::MatchedColor
        }
    }
}

impl fmt::Display for PairMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PairMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown pair mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestPair {
    pub product_id: String,
    pub model_id: String,
    pub mode: PairMode,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TestPairSet {
    pub pairs: Vec<TestPair>,
}

impl TestPairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn modes(&self) -> Vec<PairMode> {
        let mut m: Vec<PairMode> = self.pairs.iter().map(|p| p.mode).collect();
        m.sort();
        m.dedup();
        m
    }

    pub fn of_mode(&self, mode: PairMode) -> impl Iterator<Item = &TestPair> {
        self.pairs.iter().filter(move |p| p.mode == mode)
    }

    pub fn extend(&mut self, other: TestPairSet) {
        self.pairs.extend(other.pairs);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::training::ensure_parent(path)?;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["product_id", "model_id", "mode"])?;
        for p in &self.pairs {
            w.write_record([&p.product_id, &p.model_id, p.mode.as_str()])?;
        }
        w.flush().map_err(crate::error::io_err(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let pairs = r.deserialize().collect::<std::result::Result<Vec<TestPair>, _>>()?;
        Ok(Self { pairs })
    }
}

/// Records grouped by garment type, in input order.
fn by_type<'a>(records: impl Iterator<Item = &'a PairRecord>) -> HashMap<GarmentType, Vec<&'a str>> {
    let mut m: HashMap<GarmentType, Vec<&str>> = HashMap::new();
    for r in records {
        m.entry(r.garment_type).or_default().push(&r.id);
    }
    m
}

/// `n` same-type pairs: products round-robin, models uniform per product.
/// A product is never paired with its own record's model unless allowed.
pub fn build_random_pairs<R: Rng>(
    products: &[PairRecord],
    models: &[PairRecord],
    n: usize,
    allow_ground_truth: bool,
    rng: &mut R,
) -> Result<TestPairSet> {
    let pools = by_type(models.iter());
    let mut candidates: Vec<(&str, Vec<&str>)> = Vec::new();
    for p in products {
        let pool: Vec<&str> = pools
            .get(&p.garment_type)
            .map(|v| v.iter().copied().filter(|&m| allow_ground_truth || m != p.id).collect())
            .unwrap_or_default();
        if pool.is_empty() {
            log::info!("product {} has no same-type model candidates; skipped", p.id);
        } else {
            candidates.push((&p.id, pool));
        }
    }
    sample_pairs(&candidates, n, PairMode::Random, rng)
}

fn sample_pairs<R: Rng>(candidates: &[(&str, Vec<&str>)], n: usize, mode: PairMode, rng: &mut R) -> Result<TestPairSet> {
    if n == 0 {
        return Ok(TestPairSet::default());
    }
    if candidates.is_empty() {
        return Err(Error::Invalid("no product has any model candidate".into()));
    }
    let pairs = (0..n)
        .map(|i| {
            let (pid, pool) = &candidates[i % candidates.len()];
            TestPair {
                product_id: pid.to_string(),
                model_id: pool[rng.gen_range(0..pool.len())].to_string(),
                mode,
            }
        })
        .collect();
    Ok(TestPairSet { pairs })
}

/// `T(E_v(product))` for every record, encoded in chunks.
pub fn product_codes<T: Scalar>(
    smn: &ShapeMatchingNet<T>,
    data: &[PairData],
    grayscale: bool,
) -> Result<Vec<(String, ShapeCode<T>)>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(ENCODE_CHUNK) {
        let imgs: Vec<RgbImage<T>> = chunk.iter().map(|d| d.product.cast()).collect();
        let codes = smn.product_shape_codes(&imgs.iter().collect::<Vec<_>>(), grayscale)?;
        out.extend(chunk.iter().map(|d| d.record.id.clone()).zip(codes));
    }
    Ok(out)
}

/// `T(E_v(model)_t)` for every record, with `t` the record's garment type.
pub fn model_codes<T: Scalar>(smn: &ShapeMatchingNet<T>, data: &[PairData]) -> Result<Vec<(String, ShapeCode<T>)>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(ENCODE_CHUNK) {
        let imgs: Vec<RgbImage<T>> = chunk.iter().map(|d| d.model.cast()).collect();
        let types: Vec<GarmentType> = chunk.iter().map(|d| d.record.garment_type).collect();
        let codes = smn.model_shape_codes(&imgs.iter().collect::<Vec<_>>(), &types)?;
        out.extend(chunk.iter().map(|d| d.record.id.clone()).zip(codes));
    }
    Ok(out)
}

/// Same-type top-`k` model ids for one product code.
pub fn same_type_neighbours<T: Scalar>(
    index: &EmbeddingIndex<T>,
    model_types: &HashMap<String, GarmentType>,
    product_id: &str,
    product_type: GarmentType,
    code: &ShapeCode<T>,
    k: usize,
    allow_ground_truth: bool,
) -> Result<Vec<String>> {
    Ok(index
        .query_knn(code, index.len())?
        .into_iter()
        .map(|(id, _)| id)
        .filter(|id| model_types.get(id) == Some(&product_type))
        .filter(|id| allow_ground_truth || id != product_id)
        .take(k)
        .collect())
}

/// `n` pairs, products round-robin, each model drawn uniformly from the
/// product's same-type top-`k` neighbours in the index.
#[allow(clippy::too_many_arguments)]
pub fn match_with_index<T: Scalar, R: Rng>(
    index: &EmbeddingIndex<T>,
    model_types: &HashMap<String, GarmentType>,
    products: &[(String, GarmentType, ShapeCode<T>)],
    k: usize,
    n: usize,
    mode: PairMode,
    allow_ground_truth: bool,
    rng: &mut R,
) -> Result<TestPairSet> {
    let mut lists = Vec::with_capacity(products.len());
    for (pid, t, code) in products {
        let nn = same_type_neighbours(index, model_types, pid, *t, code, k, allow_ground_truth)?;
        if nn.is_empty() {
            log::info!("product {pid} has no same-type neighbours; skipped");
        } else {
            lists.push((pid.as_str(), nn));
        }
    }
    let candidates: Vec<(&str, Vec<&str>)> = lists
        .iter()
        .map(|(p, v)| (*p, v.iter().map(String::as_str).collect()))
        .collect();
    sample_pairs(&candidates, n, mode, rng)
}

/// Matched pairs straight from images: encodes both pools with the SMN.
#[allow(clippy::too_many_arguments)]
pub fn build_matched_pairs<T: Scalar, R: Rng>(
    products: &[PairData],
    models: &[PairData],
    smn: &ShapeMatchingNet<T>,
    k: usize,
    grayscale: bool,
    n: usize,
    allow_ground_truth: bool,
    rng: &mut R,
) -> Result<TestPairSet> {
    let index = EmbeddingIndex::build(model_codes(smn, models)?)?;
    let types: HashMap<String, GarmentType> = models
        .iter()
        .map(|d| (d.record.id.clone(), d.record.garment_type))
        .collect();
    let prods: Vec<(String, GarmentType, ShapeCode<T>)> = product_codes(smn, products, grayscale)?
        .into_iter()
        .zip(products)
        .map(|((id, c), d)| (id, d.record.garment_type, c))
        .collect();
    match_with_index(&index, &types, &prods, k, n, PairMode::matched(grayscale), allow_ground_truth, rng)
}
