//! Synthetic cohorts: bags with planted phenotype clusters laid out as
//! spatial blobs, a latent tumor fraction driving both the class label range
//! and the hazard, and class-correlated text embeddings.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HpdpError, Result};
use crate::heads::SurvivalRecord;
use crate::numerics::Matrix;
use crate::rng::{indexed_stream, stream};
use crate::spe::Coord;

pub const BAG_MAGIC: &[u8; 8] = b"HPDPBAG1";
pub const MANIFEST_FILE: &str = "manifest.json";
const TUMOR: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_bags: usize,
    /// Inclusive `[min, max]` instance count per bag.
    pub instances_per_bag: [usize; 2],
    pub dim: usize,
    pub n_phenotypes: usize,
    /// One tumor-fraction interval per class.
    pub tumor_fraction_ranges: Vec<[f64; 2]>,
    pub grid_extent: usize,
    pub hazard_base: f64,
    pub hazard_tumor_coeff: f64,
    pub censor_rate: f64,
    pub noise_sigma: f64,
    pub text_noise_sigma: f64,
    /// Spatially random coordinates instead of phenotype blobs.
    pub scatter: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_bags: 200,
            instances_per_bag: [24, 48],
            dim: 16,
            n_phenotypes: 4,
            tumor_fraction_ranges: vec![[0.05, 0.35], [0.55, 0.85]],
            grid_extent: 64,
            hazard_base: 0.1,
            hazard_tumor_coeff: 1.5,
            censor_rate: 0.3,
            noise_sigma: 0.25,
            text_noise_sigma: 1.0,
            scatter: false,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn n_classes(&self) -> usize {
        self.tumor_fraction_ranges.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HpdpError::Config(msg));
        if self.n_bags < 1 {
            return bad("n_bags must be ≥ 1".into());
        }
        let [lo, hi] = self.instances_per_bag;
        if lo < 1 || lo > hi {
            return bad(format!(
                "instances_per_bag must satisfy 1 ≤ min ≤ max, got [{lo}, {hi}]"
            ));
        }
        if self.dim == 0 || self.dim % 4 != 0 {
            return bad(format!("dim must be a positive multiple of 4, got {}", self.dim));
        }
        if self.n_phenotypes < 2 {
            return bad(format!("n_phenotypes must be ≥ 2, got {}", self.n_phenotypes));
        }
        if self.tumor_fraction_ranges.is_empty() {
            return bad("tumor_fraction_ranges must list at least one class".into());
        }
        for (c, &[a, b]) in self.tumor_fraction_ranges.iter().enumerate() {
            if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a > b {
                return bad(format!(
                    "tumor_fraction_ranges[{c}] = [{a}, {b}] is not a subinterval of [0, 1]"
                ));
            }
        }
        if self.grid_extent < 1 {
            return bad("grid_extent must be ≥ 1".into());
        }
        if !(self.hazard_base > 0.0) || !self.hazard_base.is_finite() {
            return bad(format!("hazard_base must be positive, got {}", self.hazard_base));
        }
        if !self.hazard_tumor_coeff.is_finite() {
            return bad("hazard_tumor_coeff must be finite".into());
        }
        if !(0.0..1.0).contains(&self.censor_rate) {
            return bad(format!("censor_rate must lie in [0, 1), got {}", self.censor_rate));
        }
        if !(self.noise_sigma > 0.0) {
            return bad(format!("noise_sigma must be positive, got {}", self.noise_sigma));
        }
        if !(self.text_noise_sigma > 0.0) {
            return bad(format!(
                "text_noise_sigma must be positive, got {}",
                self.text_noise_sigma
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub features: Matrix,
    pub coords: Vec<Coord>,
    pub label: usize,
    pub survival: SurvivalRecord,
    /// `1 × D` text embedding.
    pub text: Matrix,
    /// Planted phenotype of every instance; for tests only.
    pub truth: Vec<usize>,
    pub tumor_fraction: f64,
}

impl Bag {
    pub fn n_instances(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub config: GeneratorConfig,
    pub bags: Vec<Bag>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn labels(&self) -> Vec<usize> {
        self.bags.iter().map(|b| b.label).collect()
    }

    pub fn records(&self) -> Vec<SurvivalRecord> {
        self.bags.iter().map(|b| b.survival).collect()
    }

    /// All instance features stacked row-wise, in bag order.
    pub fn pooled_features(&self) -> Matrix {
        let d = self.dim();
        let data: Vec<f64> = self
            .bags
            .iter()
            .flat_map(|b| b.features.as_slice().iter().copied())
            .collect();
        let rows = data.len() / d.max(1);
        Matrix::new(rows, d, data).expect("bags share the cohort width")
    }

    fn subset(&self, idx: &[usize]) -> Cohort {
        Cohort {
            config: self.config.clone(),
            bags: idx.iter().map(|&i| self.bags[i].clone()).collect(),
        }
    }
}

fn unit_rows(mut m: Matrix) -> Matrix {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    m
}

/// Unit-norm phenotype archetypes (`n_phenotypes × dim`); row 0 is tumor.
pub fn phenotype_archetypes(cfg: &GeneratorConfig) -> Matrix {
    let mut rng = stream(cfg.seed, "archetypes");
    unit_rows(Matrix::random_normal(cfg.n_phenotypes, cfg.dim, 1.0, &mut rng))
}

/// Unit-norm class archetypes for the text channel (`n_classes × dim`).
pub fn text_archetypes(cfg: &GeneratorConfig) -> Matrix {
    let mut rng = stream(cfg.seed, "text-archetypes");
    unit_rows(Matrix::random_normal(cfg.n_classes(), cfg.dim, 1.0, &mut rng))
}

fn blob_coords(phenotypes: &[usize], cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<Coord> {
    let extent = cfg.grid_extent as f64;
    let clamp = |v: f64| v.round().clamp(0.0, extent - 1.0);
    if cfg.scatter {
        return phenotypes
            .iter()
            .map(|_| {
                Coord::new(
                    rng.random_range(0..cfg.grid_extent) as f64,
                    rng.random_range(0..cfg.grid_extent) as f64,
                )
            })
            .collect();
    }
    let spread = Normal::new(0.0, (extent / 16.0).max(1.0)).expect("positive spread");
    let centers: Vec<(f64, f64)> = (0..cfg.n_phenotypes)
        .map(|_| (rng.random::<f64>() * extent, rng.random::<f64>() * extent))
        .collect();
    phenotypes
        .iter()
        .map(|&p| {
            let (cx, cy) = centers[p];
            Coord::new(clamp(cx + spread.sample(rng)), clamp(cy + spread.sample(rng)))
        })
        .collect()
}

fn generate_bag(index: usize, cfg: &GeneratorConfig, archetypes: &Matrix, text_protos: &Matrix) -> Bag {
    let mut rng = indexed_stream(cfg.seed, "bags", index as u64);
    let label = index % cfg.n_classes();
    let [lo, hi] = cfg.instances_per_bag;
    let n = rng.random_range(lo..=hi);
    let [flo, fhi] = cfg.tumor_fraction_ranges[label];
    let tumor_fraction = flo + (fhi - flo) * rng.random::<f64>();

    let n_tumor = ((tumor_fraction * n as f64).round() as usize).min(n);
    let mut truth: Vec<usize> = (0..n)
        .map(|i| {
            if i < n_tumor {
                TUMOR
            } else {
                rng.random_range(1..cfg.n_phenotypes)
            }
        })
        .collect();
    truth.shuffle(&mut rng);

    let d = cfg.dim;
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let mut features = Matrix::zeros(n, d);
    for (r, &p) in truth.iter().enumerate() {
        for (c, v) in features.row_mut(r).iter_mut().enumerate() {
            *v = archetypes[(p, c)] + noise.sample(&mut rng);
        }
    }
    let coords = blob_coords(&truth, cfg, &mut rng);

    let rate = cfg.hazard_base * (cfg.hazard_tumor_coeff * tumor_fraction).exp();
    let event_time: f64 = Exp::new(rate).expect("validated rate").sample(&mut rng);
    let censored = rng.random::<f64>() < cfg.censor_rate;
    let u: f64 = rng.random();
    let (time, event) = if censored {
        (event_time * (1.0 - u), false)
    } else {
        (event_time, true)
    };
    // Exp samples are positive, but guard the open end in case of underflow.
    let time = time.max(f64::MIN_POSITIVE);

    let text_noise = Normal::new(0.0, cfg.text_noise_sigma).expect("validated sigma");
    let text: Vec<f64> = (0..d)
        .map(|c| text_protos[(label, c)] + text_noise.sample(&mut rng))
        .collect();

    Bag {
        features,
        coords,
        label,
        survival: SurvivalRecord { time, event },
        text: Matrix::row_vector(&text),
        truth,
        tumor_fraction,
    }
}

/// Deterministic cohort for `cfg`; bags are generated in parallel from
/// independent per-bag streams and returned in index order.
pub fn generate_cohort(cfg: &GeneratorConfig) -> Result<Cohort> {
    cfg.validate()?;
    let archetypes = phenotype_archetypes(cfg);
    let text_protos = text_archetypes(cfg);
    let bags = (0..cfg.n_bags)
        .into_par_iter()
        .map(|i| generate_bag(i, cfg, &archetypes, &text_protos))
        .collect();
    Ok(Cohort {
        config: cfg.clone(),
        bags,
    })
}

/// Seeded shuffle then contiguous split into train/val/test.
pub fn split_cohort(cohort: &Cohort, ratios: (f64, f64, f64), seed: u64) -> Result<(Cohort, Cohort, Cohort)> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(HpdpError::Config(format!(
            "split ratios must be positive and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let n = cohort.len();
    let n_train = (a * n as f64).round() as usize;
    let n_val = (b * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(HpdpError::Input(format!(
            "split of {n} bags by ({a}, {b}, {c}) leaves an empty partition"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, "split"));
    Ok((
        cohort.subset(&idx[..n_train]),
        cohort.subset(&idx[n_train..n_train + n_val]),
        cohort.subset(&idx[n_train + n_val..]),
    ))
}

/// Encode a matrix in the bag binary format.
pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * m.len());
    out.extend_from_slice(BAG_MAGIC);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<Matrix> {
    if bytes.len() < 16 || &bytes[..8] != BAG_MAGIC {
        return Err(HpdpError::format(path, "missing HPDPBAG1 header"));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() != rows * cols * 8 {
        return Err(HpdpError::format(
            path,
            format!("header says {rows}×{cols} but payload has {} bytes", body.len()),
        ));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::new(rows, cols, data)
}

#[derive(Debug, Serialize, Deserialize)]
struct BagEntry {
    label: usize,
    time: f64,
    event: bool,
    features: String,
    coords: String,
    text: Vec<f64>,
    truth: Vec<usize>,
    tumor_fraction: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CohortManifest {
    format: String,
    config: GeneratorConfig,
    bags: Vec<BagEntry>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| HpdpError::io(path, e))
}

/// Write the cohort as `manifest.json` plus two binary files per bag.
/// Returns every path written.
pub fn write_cohort(dir: &Path, cohort: &Cohort) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| HpdpError::io(dir, e))?;
    let mut written = Vec::new();
    let mut entries = Vec::with_capacity(cohort.len());
    for (i, bag) in cohort.bags.iter().enumerate() {
        let feat_name = format!("bag_{i:05}_features.bin");
        let coord_name = format!("bag_{i:05}_coords.bin");
        let coords = Matrix::from_rows(&bag.coords.iter().map(|c| [c.x, c.y]).collect::<Vec<_>>());
        let coords = if bag.coords.is_empty() {
            Matrix::zeros(0, 2)
        } else {
            coords
        };
        for (name, m) in [(&feat_name, &bag.features), (&coord_name, &coords)] {
            let p = dir.join(name);
            write_file(&p, &encode_matrix(m))?;
            written.push(p);
        }
        entries.push(BagEntry {
            label: bag.label,
            time: bag.survival.time,
            event: bag.survival.event,
            features: feat_name,
            coords: coord_name,
            text: bag.text.as_slice().to_vec(),
            truth: bag.truth.clone(),
            tumor_fraction: bag.tumor_fraction,
        });
    }
    let manifest = CohortManifest {
        format: "hpdp-cohort-v1".into(),
        config: cohort.config.clone(),
        bags: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| HpdpError::format(&path, e.to_string()))?;
    write_file(&path, text.as_bytes())?;
    written.push(path);
    Ok(written)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| HpdpError::io(path, e))
}

pub fn read_cohort(dir: &Path) -> Result<Cohort> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: CohortManifest =
        serde_json::from_slice(&read_file(&path)?).map_err(|e| HpdpError::format(&path, e.to_string()))?;
    let d = manifest.config.dim;
    let mut bags = Vec::with_capacity(manifest.bags.len());
    for (i, e) in manifest.bags.into_iter().enumerate() {
        let fp = dir.join(&e.features);
        let features = decode_matrix(&read_file(&fp)?, &fp)?;
        let cp = dir.join(&e.coords);
        let coords = decode_matrix(&read_file(&cp)?, &cp)?;
        if features.cols() != d || coords.cols() != 2 || coords.rows() != features.rows() {
            return Err(HpdpError::format(
                &fp,
                format!(
                    "bag {i}: features {:?} and coords {:?} disagree with width {d}",
                    features.shape(),
                    coords.shape()
                ),
            ));
        }
        if e.text.len() != d || e.truth.len() != features.rows() {
            return Err(HpdpError::format(
                &path,
                format!("bag {i}: text or truth length mismatch"),
            ));
        }
        let survival =
            SurvivalRecord::new(e.time, e.event).map_err(|err| HpdpError::format(&path, format!("bag {i}: {err}")))?;
        bags.push(Bag {
            coords: (0..coords.rows())
                .map(|r| Coord::new(coords[(r, 0)], coords[(r, 1)]))
                .collect(),
            features,
            label: e.label,
            survival,
            text: Matrix::row_vector(&e.text),
            truth: e.truth,
            tumor_fraction: e.tumor_fraction,
        });
    }
    Ok(Cohort {
        config: manifest.config,
        bags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            n_bags: 12,
            instances_per_bag: [5, 9],
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_cohort(&small()).unwrap();
        let b = generate_cohort(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(&GeneratorConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_censoring_observes_every_event() {
        let cfg = GeneratorConfig {
            censor_rate: 0.0,
            ..small()
        };
        assert!(generate_cohort(&cfg).unwrap().bags.iter().all(|b| b.survival.event));
    }

    #[test]
    fn bags_respect_config_ranges() {
        let cfg = small();
        let c = generate_cohort(&cfg).unwrap();
        for b in &c.bags {
            assert!((5..=9).contains(&b.n_instances()));
            assert!(b.truth.iter().all(|&t| t < cfg.n_phenotypes));
            assert!(b
                .coords
                .iter()
                .all(|p| p.x >= 0.0 && p.x < 64.0 && p.y >= 0.0 && p.y < 64.0));
            let [lo, hi] = cfg.tumor_fraction_ranges[b.label];
            assert!(b.tumor_fraction >= lo && b.tumor_fraction <= hi);
            assert!(b.survival.time > 0.0);
        }
    }

    #[test]
    fn n_bags_zero_is_rejected() {
        let err = GeneratorConfig { n_bags: 0, ..small() }.validate().unwrap_err();
        assert!(err.to_string().contains("n_bags must be ≥ 1"));
    }

    #[test]
    fn split_examples() {
        let c = generate_cohort(&GeneratorConfig {
            n_bags: 100,
            instances_per_bag: [2, 3],
            ..small()
        })
        .unwrap();
        let (a, b, t) = split_cohort(&c, (0.64, 0.16, 0.20), 3).unwrap();
        assert_eq!((a.len(), b.len(), t.len()), (64, 16, 20));
        let again = split_cohort(&c, (0.64, 0.16, 0.20), 3).unwrap();
        assert_eq!(a, again.0);
        assert!(split_cohort(&c, (1.0, 0.0, 0.0), 3).is_err());
    }

    #[test]
    fn cohort_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_cohort(&small()).unwrap();
        let files = write_cohort(dir.path(), &c).unwrap();
        assert_eq!(files.len(), 2 * c.len() + 1);
        assert_eq!(read_cohort(dir.path()).unwrap(), c);
    }

    #[test]
    fn truncated_binary_is_a_format_error() {
        let m = Matrix::from_rows(&[[1.0, 2.0]]);
        let bytes = encode_matrix(&m);
        assert_eq!(&bytes[..8], b"HPDPBAG1");
        assert!(matches!(
            decode_matrix(&bytes[..20], Path::new("x")),
            Err(HpdpError::Format { .. })
        ));
        assert_eq!(decode_matrix(&bytes, Path::new("x")).unwrap(), m);
    }
}
