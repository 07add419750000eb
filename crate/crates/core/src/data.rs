//! Deterministic synthetic paired-modality data.
//!
//! Each sample draws a class `c`, a latent `z = μ_c + N(0, 0.5·I)`, and two
//! noisy linear views `x_A = P_A z + ε`, `x_B = P_B z + ε`. The class means and
//! projections are fixed by the seed; each sample's randomness is keyed by
//! `(seed, id)`.
//!
//! File layout (little-endian): `"MSDD"`, version `u32 = 1`, `N u64`,
//! `d_A u32`, `d_B u32`, `C u32`, `seed u64`; then per sample `id u64`,
//! `d_A × f64`, `d_B × f64`, `label u32`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"MSDD";
pub const DATASET_VERSION: u32 = 1;
pub const DATASET_HEADER_BYTES: u64 = 36;

/// Within-class latent variance.
const LATENT_VARIANCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    #[serde(skip)]
    pub seed: u64,
    pub n: usize,
    pub d_latent: usize,
    pub d_a: usize,
    pub d_b: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    pub aug_sigma: f64,
    pub mask_prob: f64,
    /// Augmentation scale is drawn from `[1 − scale_jitter, 1 + scale_jitter]`.
    pub scale_jitter: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 2000,
            d_latent: 16,
            d_a: 48,
            d_b: 40,
            classes: 5,
            noise_sigma: 0.3,
            aug_sigma: 0.2,
            mask_prob: 0.1,
            scale_jitter: 0.1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d_latent == 0 || self.d_a == 0 || self.d_b == 0 {
            return Err(Error::Config("sample count and dimensions must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(self.noise_sigma >= 0.0 && self.aug_sigma >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!("mask_prob {} outside [0, 1)", self.mask_prob)));
        }
        if !(0.0..1.0).contains(&self.scale_jitter) {
            return Err(Error::Config(format!("scale_jitter {} outside [0, 1)", self.scale_jitter)));
        }
        Ok(())
    }

    /// Augmentation with everything switched off.
    pub fn without_augmentation(mut self) -> Self {
        self.aug_sigma = 0.0;
        self.mask_prob = 0.0;
        self.scale_jitter = 0.0;
        self
    }
}

/// Column-oriented dataset; row `i` is the sample with id `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub seed: u64,
    pub classes: usize,
    pub features_a: Tensor,
    pub features_b: Tensor,
    pub labels: Vec<u32>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_a(&self) -> usize {
        self.features_a.cols()
    }

    pub fn d_b(&self) -> usize {
        self.features_b.cols()
    }

    /// Ids `[0, n_train)` train, the rest test.
    pub fn split(&self, test_fraction: f64) -> Result<(Vec<u64>, Vec<u64>)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::Config(format!("test fraction {test_fraction} outside (0, 1)")));
        }
        let n = self.len();
        let n_test = ((n as f64) * test_fraction).round() as usize;
        if n_test == 0 || n_test >= n {
            return Err(Error::Config(format!("test fraction {test_fraction} leaves an empty split of {n}")));
        }
        let n_train = n - n_test;
        Ok(((0..n_train as u64).collect(), (n_train as u64..n as u64).collect()))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.features_a.rows() != n || self.features_b.rows() != n {
            return Err(Error::Config("feature rows differ from label count".into()));
        }
        if !self.features_a.is_finite() || !self.features_b.is_finite() {
            return Err(Error::Config("features must be finite".into()));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l as usize >= self.classes) {
            return Err(Error::Config(format!("label {l} out of range for {} classes", self.classes)));
        }
        Ok(())
    }
}

fn normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Fixed generative structure derived from a config: class means and the two
/// projection matrices (`d × d_latent`, row-major).
#[derive(Debug, Clone)]
pub struct Generator {
    means: Vec<Vec<f64>>,
    proj_a: Vec<f64>,
    proj_b: Vec<f64>,
    cfg: GenConfig,
}

impl Generator {
    pub fn new(cfg: &GenConfig) -> Result<Self> {
        cfg.validate()?;
        let means = (0..cfg.classes as u64)
            .map(|c| normals(&mut rng_for(cfg.seed, stream::CLASS_MEANS, &[c]), cfg.d_latent))
            .collect();
        let scale = 1.0 / (cfg.d_latent as f64).sqrt();
        let proj = |s, d| -> Vec<f64> {
            normals(&mut rng_for(cfg.seed, s, &[]), d * cfg.d_latent).into_iter().map(|v| v * scale).collect()
        };
        Ok(Self { means, proj_a: proj(stream::PROJECTION_A, cfg.d_a), proj_b: proj(stream::PROJECTION_B, cfg.d_b), cfg: cfg.clone() })
    }

    fn project(&self, proj: &[f64], z: &[f64]) -> Vec<f64> {
        proj.chunks(self.cfg.d_latent).map(|row| row.iter().zip(z).map(|(p, v)| p * v).sum()).collect()
    }

    /// `(label, x_A, x_B)` for sample `id`.
    pub fn sample(&self, id: u64) -> (u32, Vec<f64>, Vec<f64>) {
        let cfg = &self.cfg;
        let mut rng = rng_for(cfg.seed, stream::SAMPLE, &[id]);
        let label = rng.random_range(0..cfg.classes as u32);
        let spread = LATENT_VARIANCE.sqrt();
        let z: Vec<f64> = self.means[label as usize]
            .iter()
            .zip(normals(&mut rng, cfg.d_latent))
            .map(|(m, e)| m + spread * e)
            .collect();
        let mut noisy = |clean: Vec<f64>| -> Vec<f64> {
            clean.into_iter().map(|v| v + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let x_a = noisy(self.project(&self.proj_a, &z));
        let x_b = noisy(self.project(&self.proj_b, &z));
        (label, x_a, x_b)
    }

    /// Noise-free class means in each modality: rows `P_A μ_c` and `P_B μ_c`.
    pub fn class_prototypes(&self) -> Result<(Tensor, Tensor)> {
        let a: Vec<Vec<f64>> = self.means.iter().map(|m| self.project(&self.proj_a, m)).collect();
        let b: Vec<Vec<f64>> = self.means.iter().map(|m| self.project(&self.proj_b, m)).collect();
        Ok((Tensor::from_rows(&a)?, Tensor::from_rows(&b)?))
    }
}

pub fn generate_dataset(cfg: &GenConfig) -> Result<PairedDataset> {
    let generator = Generator::new(cfg)?;
    let mut fa = Vec::with_capacity(cfg.n * cfg.d_a);
    let mut fb = Vec::with_capacity(cfg.n * cfg.d_b);
    let mut labels = Vec::with_capacity(cfg.n);
    for id in 0..cfg.n as u64 {
        let (label, a, b) = generator.sample(id);
        fa.extend(a);
        fb.extend(b);
        labels.push(label);
    }
    Ok(PairedDataset {
        seed: cfg.seed,
        classes: cfg.classes,
        features_a: Tensor::matrix(cfg.n, cfg.d_a, fa)?,
        features_b: Tensor::matrix(cfg.n, cfg.d_b, fb)?,
        labels,
    })
}

/// `x' = s·(x + N(0, σ²))` with `s ~ U[1−j, 1+j]`, then each coordinate zeroed
/// with probability `mask_prob`.
pub fn augment(x: &[f64], seed: u64, cfg: &GenConfig) -> Vec<f64> {
    let mut rng = rng_for(seed, stream::AUGMENT, &[]);
    let scale = if cfg.scale_jitter > 0.0 {
        rng.random_range(1.0 - cfg.scale_jitter..=1.0 + cfg.scale_jitter)
    } else {
        1.0
    };
    x.iter()
        .map(|&v| {
            let noise: f64 = rng.sample(StandardNormal);
            let masked = cfg.mask_prob > 0.0 && rng.random_bool(cfg.mask_prob);
            if masked { 0.0 } else { scale * (v + cfg.aug_sigma * noise) }
        })
        .collect()
}

/// Exact file size for a dataset of the given shape.
pub fn dataset_file_size(n: usize, d_a: usize, d_b: usize) -> u64 {
    DATASET_HEADER_BYTES + n as u64 * (8 + 8 * (d_a + d_b) as u64 + 4)
}

pub fn encode_dataset(ds: &PairedDataset) -> Vec<u8> {
    let n = ds.len();
    let mut out = Vec::with_capacity(dataset_file_size(n, ds.d_a(), ds.d_b()) as usize);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(ds.d_a() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.d_b() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.classes as u32).to_le_bytes());
    out.extend_from_slice(&ds.seed.to_le_bytes());
    for i in 0..n {
        out.extend_from_slice(&(i as u64).to_le_bytes());
        for v in ds.features_a.row(i).iter().chain(ds.features_b.row(i)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&ds.labels[i].to_le_bytes());
    }
    out
}

pub fn write_dataset(ds: &PairedDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&encode_dataset(ds))?;
    f.flush()?;
    Ok(())
}

/// Bounds-checked little-endian reader that reports byte offsets.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(self.offset(), format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.offset(), "length overflow"))?, what)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<PairedDataset> {
    let mut c = Cursor::new(buf);
    if c.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"MSDD\""));
    }
    let at = c.offset();
    let version = c.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let n = c.u64("sample count")? as usize;
    let d_a = c.u32("d_A")? as usize;
    let d_b = c.u32("d_B")? as usize;
    let at = c.offset();
    let classes = c.u32("class count")? as usize;
    let seed = c.u64("seed")?;
    if n == 0 || d_a == 0 || d_b == 0 || classes < 2 {
        return Err(Error::format(at, "header describes an empty dataset"));
    }
    let expected = dataset_file_size(n, d_a, d_b);
    if buf.len() as u64 != expected {
        return Err(Error::format(
            buf.len().min(expected as usize) as u64,
            format!("file is {} bytes, header implies {expected}", buf.len()),
        ));
    }
    let mut fa = Vec::with_capacity(n * d_a);
    let mut fb = Vec::with_capacity(n * d_b);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let at = c.offset();
        let id = c.u64("sample id")?;
        if id != i as u64 {
            return Err(Error::format(at, format!("sample {i} has id {id}; ids must be dense and ordered")));
        }
        let at = c.offset();
        let a = c.f64s(d_a, "x_A")?;
        let b = c.f64s(d_b, "x_B")?;
        if a.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::format(at, format!("sample {i} has non-finite features")));
        }
        fa.extend(a);
        fb.extend(b);
        let at = c.offset();
        let label = c.u32("label")?;
        if label as usize >= classes {
            return Err(Error::format(at, format!("label {label} out of range for {classes} classes")));
        }
        labels.push(label);
    }
    Ok(PairedDataset {
        seed,
        classes,
        features_a: Tensor::matrix(n, d_a, fa)?,
        features_b: Tensor::matrix(n, d_b, fb)?,
        labels,
    })
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<PairedDataset> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_dataset(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig { seed: 3, n: 40, ..Default::default() }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = encode_dataset(&generate_dataset(&small()).unwrap());
        let b = encode_dataset(&generate_dataset(&small()).unwrap());
        assert_eq!(a, b);
        let other = encode_dataset(&generate_dataset(&GenConfig { seed: 4, ..small() }).unwrap());
        assert_ne!(a, other);
    }

    #[test]
    fn shapes_and_file_size() {
        let ds = generate_dataset(&small()).unwrap();
        assert_eq!(ds.features_a.shape(), &[40, 48]);
        assert_eq!(ds.features_b.shape(), &[40, 40]);
        let bytes = encode_dataset(&ds);
        assert_eq!(bytes.len() as u64, 36 + 40 * (8 + 8 * (48 + 40) + 4));
        assert_eq!(decode_dataset(&bytes).unwrap(), ds);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode_dataset(&generate_dataset(&small()).unwrap());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_dataset(&bad), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(decode_dataset(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        assert!(matches!(decode_dataset(&bytes[..10]), Err(Error::Format { offset: 8, .. })));
        let mut bad = bytes.clone();
        let label_at = 36 + 8 + 8 * 88;
        bad[label_at..label_at + 4].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(decode_dataset(&bad), Err(Error::Format { offset, .. }) if offset == label_at as u64));
    }

    #[test]
    fn augment_identity_and_determinism() {
        let cfg = GenConfig::default();
        let x: Vec<f64> = (0..20).map(|i| i as f64 * 0.1 - 1.0).collect();
        assert_eq!(augment(&x, 11, &cfg), augment(&x, 11, &cfg));
        assert_ne!(augment(&x, 11, &cfg), augment(&x, 12, &cfg));
        assert_eq!(augment(&x, 11, &cfg.clone().without_augmentation()), x);
    }

    #[test]
    fn augment_second_moment() {
        let cfg = GenConfig::default();
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        let norm2: f64 = x.iter().map(|v| v * v).sum();
        let d = x.len() as f64;
        let (p, j, s2) = (cfg.mask_prob, cfg.scale_jitter, cfg.aug_sigma * cfg.aug_sigma);
        let analytic = p * norm2 + (1.0 - p) * (j * j / 3.0 * norm2 + (1.0 + j * j / 3.0) * d * s2);
        let draws = 10_000;
        let mc: f64 = (0..draws)
            .map(|k| augment(&x, k, &cfg).iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / draws as f64;
        assert!((mc - analytic).abs() < 0.1 * analytic, "mc {mc} analytic {analytic}");
    }

    #[test]
    fn config_validation() {
        assert!(GenConfig::default().validate().is_ok());
        assert!(GenConfig { classes: 1, ..Default::default() }.validate().is_err());
        assert!(GenConfig { mask_prob: 1.0, ..Default::default() }.validate().is_err());
        assert!(GenConfig { noise_sigma: -0.1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn split_is_contiguous() {
        let ds = generate_dataset(&small()).unwrap();
        let (train, test) = ds.split(0.25).unwrap();
        assert_eq!(train.len(), 30);
        assert_eq!(test, (30..40).collect::<Vec<u64>>());
        assert!(ds.split(0.0).is_err());
    }
}
