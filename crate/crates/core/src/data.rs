//! Synthetic ordinal data with a latent 1–5 score, and the dataset file format.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 3;
pub const BENIGN: usize = 0;
pub const UNSURE: usize = 1;
pub const MALIGNANT: usize = 2;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["benign", "unsure", "malignant"];

pub const SCORE_MIN: f64 = 1.0;
pub const SCORE_MAX: f64 = 5.0;
const UNSURE_LOW: f64 = 2.5;
const UNSURE_HIGH: f64 = 3.5;

/// Ordinal class of an averaged rating. Both boundaries belong to "unsure".
pub fn bin_score(score: f64) -> Result<usize> {
    if !(SCORE_MIN..=SCORE_MAX).contains(&score) {
        return Err(Error::contract(format!(
            "score {score} outside [{SCORE_MIN}, {SCORE_MAX}]"
        )));
    }
    Ok(if score < UNSURE_LOW {
        BENIGN
    } else if score <= UNSURE_HIGH {
        UNSURE
    } else {
        MALIGNANT
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrdinalSample {
    pub features: Vec<f64>,
    pub score: f64,
    pub label: usize,
}

impl OrdinalSample {
    /// Builds a sample whose label is derived from the score.
    pub fn new(features: Vec<f64>, score: f64) -> Result<Self> {
        let label = bin_score(score)?;
        Ok(OrdinalSample {
            features,
            score,
            label,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    samples: Vec<OrdinalSample>,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Dataset {
            dim,
            samples: Vec::new(),
        }
    }

    pub fn push(&mut self, sample: OrdinalSample) -> Result<()> {
        if sample.features.len() != self.dim {
            return Err(Error::contract(format!(
                "sample has {} features, dataset dimension is {}",
                sample.features.len(),
                self.dim
            )));
        }
        if bin_score(sample.score)? != sample.label {
            return Err(Error::contract(format!(
                "label {} inconsistent with score {}",
                sample.label, sample.score
            )));
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[OrdinalSample] {
        &self.samples
    }

    pub fn get(&self, index: usize) -> Result<&OrdinalSample> {
        self.samples.get(index).ok_or_else(|| {
            Error::contract(format!(
                "sample index {index} out of bounds for dataset of {}",
                self.samples.len()
            ))
        })
    }

    pub fn label(&self, index: usize) -> Result<usize> {
        Ok(self.get(index)?.label)
    }

    /// Indices of `subset` grouped by label.
    pub fn class_index(&self, subset: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
        let mut by_class = vec![Vec::new(); num_classes];
        for &i in subset {
            let label = self.label(i)?;
            by_class
                .get_mut(label)
                .ok_or_else(|| Error::contract(format!("label {label} >= {num_classes} classes")))?
                .push(i);
        }
        Ok(by_class)
    }

    /// Row-major `[indices.len(), dim]` feature block.
    pub fn feature_block(&self, indices: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            out.extend_from_slice(&self.get(i)?.features);
        }
        Ok(out)
    }

    pub fn rows(&self, indices: &[usize]) -> Result<Vec<&[f64]>> {
        indices
            .iter()
            .map(|&i| Ok(self.get(i)?.features.as_slice()))
            .collect()
    }

    pub fn labels(&self, indices: &[usize]) -> Result<Vec<usize>> {
        indices.iter().map(|&i| self.label(i)).collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.samples.len()).collect()
    }
}

/// Seeded shuffle split into `(train, test)`; the test part holds
/// `round(len * test_fraction)` samples.
pub fn split_indices(len: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((len as f64) * test_fraction).round() as usize;
    let test = idx[..n_test].to_vec();
    let train = idx[n_test..].to_vec();
    (train, test)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dim: usize,
    pub n_per_class: Vec<usize>,
    pub centers: Vec<f64>,
    pub score_noise: f64,
    pub feature_noise: f64,
    /// Multiplier on the score noise of the middle class; above 1 it spills
    /// further into both neighbours.
    pub overlap: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dim: 16,
            n_per_class: vec![500; NUM_CLASSES],
            centers: vec![2.0, 3.0, 4.0],
            score_noise: 0.35,
            feature_noise: 1.0,
            overlap: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::contract("feature dimension must be positive"));
        }
        if self.n_per_class.len() != NUM_CLASSES || self.centers.len() != NUM_CLASSES {
            return Err(Error::contract(format!(
                "need {NUM_CLASSES} per-class counts and centers"
            )));
        }
        if !(self.score_noise > 0.0 && self.feature_noise > 0.0 && self.overlap > 0.0) {
            return Err(Error::contract("noise levels and overlap must be positive"));
        }
        if !self.centers.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::contract("class score centers must be strictly increasing"));
        }
        if self.centers.iter().any(|c| !(SCORE_MIN..=SCORE_MAX).contains(c)) {
            return Err(Error::contract("class centers must lie in [1, 5]"));
        }
        Ok(())
    }
}

/// Unit-norm random direction scaled by `sqrt(dim)`, so each coordinate has
/// unit root-mean-square.
fn generating_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            let scale = (dim as f64).sqrt() / norm;
            return v.into_iter().map(|x| x * scale).collect();
        }
    }
}

/// The direction `generate` embeds the score along, for a given config.
pub fn direction_for(config: &SynthConfig) -> Vec<f64> {
    generating_direction(&mut ChaCha8Rng::seed_from_u64(config.seed), config.dim)
}

/// Draw a dataset: per class, score ~ N(center, σ) clipped to [1, 5] and re-binned;
/// features = direction·(score − 3) + N(0, σ_f² I).
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let direction = generating_direction(&mut rng, config.dim);
    let feature_noise =
        Normal::new(0.0, config.feature_noise).map_err(|e| Error::contract(e.to_string()))?;
    let mut samples = Vec::with_capacity(config.n_per_class.iter().sum());
    for class in 0..NUM_CLASSES {
        let sigma = if class == UNSURE {
            config.score_noise * config.overlap
        } else {
            config.score_noise
        };
        let score_dist =
            Normal::new(config.centers[class], sigma).map_err(|e| Error::contract(e.to_string()))?;
        for _ in 0..config.n_per_class[class] {
            let score = score_dist.sample(&mut rng).clamp(SCORE_MIN, SCORE_MAX);
            let features = direction
                .iter()
                .map(|d| d * (score - 3.0) + feature_noise.sample(&mut rng))
                .collect();
            samples.push(OrdinalSample::new(features, score)?);
        }
    }
    samples.shuffle(&mut rng);
    Ok(Dataset {
        dim: config.dim,
        samples,
    })
}

const MAGIC: &[u8] = b"MOWDS";
const VERSION: u8 = b'1';

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let count = u32::try_from(ds.len()).map_err(|_| Error::contract("too many samples"))?;
    let dim = u32::try_from(ds.dim()).map_err(|_| Error::contract("dimension too large"))?;
    let mut out = Vec::with_capacity(15 + ds.len() * (ds.dim() * 8 + 9));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(b'\n');
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for s in ds.samples() {
        for v in &s.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&s.score.to_le_bytes());
        out.push(s.label as u8);
    }
    Ok(out)
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::format(0, "not a dataset file (bad magic)"));
    }
    let version_at = r.offset();
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::format(
            version_at,
            format!("unsupported dataset version {:?}", version as char),
        ));
    }
    if r.u8("header terminator")? != b'\n' {
        return Err(Error::format(version_at + 1, "missing header newline"));
    }
    let count = r.u32("sample count")? as usize;
    let dim = r.u32("feature dimension")? as usize;
    let mut ds = Dataset::new(dim);
    for i in 0..count {
        let start = r.offset();
        let mut features = Vec::with_capacity(dim);
        for _ in 0..dim {
            features.push(r.f64("features")?);
        }
        let score = r.f64("score")?;
        let label = r.u8("label")? as usize;
        let sample = OrdinalSample {
            features,
            score,
            label,
        };
        ds.push(sample)
            .map_err(|e| Error::format(start, format!("sample {i}: {e}")))?;
    }
    if !r.at_end() {
        return Err(Error::format(r.offset(), "trailing bytes after last sample"));
    }
    Ok(ds)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}
