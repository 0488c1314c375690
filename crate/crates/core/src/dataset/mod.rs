//! Product/model/mask triples: manifest I/O, deterministic splits, and the
//! procedural corpus used at desk scale.

pub mod synthetic;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::raster::{GarmentMask, RgbImage};

pub const MANIFEST_VERSION: &str = "1";

/// Garment category. The set is closed.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GarmentType {
    Top,
    Bottoms,
    Outerwear,
    AllBody,
}

impl GarmentType {
    pub const ALL: [GarmentType; 4] = [Self::Top, Self::Bottoms, Self::Outerwear, Self::AllBody];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Top => "top",
            Self::Bottoms => "bottoms",
            Self::Outerwear => "outerwear",
            Self::AllBody => "all_body",
        }
    }
}

impl fmt::Display for GarmentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GarmentType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::UnknownGarmentType(s.to_string()))
    }
}

/// One training triple. Paths are absolute once loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub id: String,
    pub product_path: PathBuf,
    pub model_path: PathBuf,
    pub mask_path: PathBuf,
    pub garment_type: GarmentType,
    /// Generator ground-truth warps (one per garment component), when known.
    pub theta_gt: Option<Vec<[f64; 6]>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<PairRecord>,
    /// `(H, W)`.
    pub image_size: (usize, usize),
    pub version: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    product: String,
    model: String,
    mask: String,
    #[serde(rename = "type")]
    garment_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    theta_gt: Option<Vec<[f64; 6]>>,
}

fn image_dims(path: &Path, id: &str) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::Record {
        id: id.to_string(),
        msg: format!("unreadable image {}: {e}", path.display()),
    })?;
    Ok((h as usize, w as usize))
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PairRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    fn with_records(&self, records: Vec<PairRecord>) -> Self {
        Self {
            records,
            image_size: self.image_size,
            version: self.version.clone(),
        }
    }

    /// Writes the manifest with paths relative to `path`'s directory where possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| -> String {
            p.strip_prefix(base)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/")
        };
        let mut out = String::new();
        for r in &self.records {
            let line = ManifestLine {
                id: r.id.clone(),
                product: rel(&r.product_path),
                model: rel(&r.model_path),
                mask: rel(&r.mask_path),
                garment_type: r.garment_type.to_string(),
                theta_gt: r.theta_gt.clone(),
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        fs::write(path, out).map_err(io_err(path))
    }

    /// Decodes every record's images, in manifest order.
    pub fn load_images(&self) -> Result<Vec<PairData>> {
        self.records.iter().map(PairData::load).collect()
    }
}

/// Parses and validates a newline-delimited JSON manifest.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut size: Option<(usize, usize)> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let line: ManifestLine = serde_json::from_str(raw).map_err(|e| Error::ManifestLine {
            line: line_no,
            msg: e.to_string(),
        })?;
        let garment_type: GarmentType = line.garment_type.parse().map_err(|e: Error| Error::ManifestLine {
            line: line_no,
            msg: e.to_string(),
        })?;
        if !seen.insert(line.id.clone()) {
            return Err(Error::ManifestLine {
                line: line_no,
                msg: format!("duplicate id {:?}", line.id),
            });
        }
        let rec = PairRecord {
            product_path: base.join(&line.product),
            model_path: base.join(&line.model),
            mask_path: base.join(&line.mask),
            id: line.id,
            garment_type,
            theta_gt: line.theta_gt,
        };
        for p in [&rec.product_path, &rec.model_path, &rec.mask_path] {
            if !p.is_file() {
                return Err(Error::Record {
                    id: rec.id.clone(),
                    msg: format!("missing image {}", p.display()),
                });
            }
            let dims = image_dims(p, &rec.id)?;
            match size {
                None => size = Some(dims),
                Some(s) if s != dims => {
                    return Err(Error::Record {
                        id: rec.id.clone(),
                        msg: format!("resolution {dims:?} differs from manifest resolution {s:?}"),
                    })
                }
                _ => {}
            }
        }
        records.push(rec);
    }
    Ok(Manifest {
        records,
        image_size: size.unwrap_or((0, 0)),
        version: MANIFEST_VERSION.to_string(),
    })
}

/// Seeded partition into `(train, test)` with `|train| = round(ratio·N)`.
/// Both halves keep manifest order.
pub fn split_records(m: &Manifest, ratio: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Invalid(format!("split ratio {ratio} outside [0, 1]")));
    }
    let n = m.records.len();
    let n_train = (ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, t) in m.records.iter().zip(in_train) {
        if t {
            train.push(r.clone());
        } else {
            test.push(r.clone());
        }
    }
    Ok((m.with_records(train), m.with_records(test)))
}

/// Decoded images of one record.
#[derive(Clone, Debug)]
pub struct PairData {
    pub record: PairRecord,
    pub product: RgbImage,
    pub model: RgbImage,
    pub mask: GarmentMask,
}

impl PairData {
    pub fn load(r: &PairRecord) -> Result<Self> {
        let product = RgbImage::load(&r.product_path)?;
        let model = RgbImage::load(&r.model_path)?;
        let mask = GarmentMask::load(&r.mask_path)?;
        if product.size() != model.size() || mask.size() != model.size() {
            return Err(Error::Record {
                id: r.id.clone(),
                msg: "product, model and mask resolutions differ".into(),
            });
        }
        Ok(Self {
            record: r.clone(),
            product,
            model,
            mask,
        })
    }
}
