//! Pose corpora: synthetic planted generation, label masking, redundancy
//! filtering and file formats.
//!
//! A synthetic corpus is drawn from a [`GroundTruthMixing`]: a small set of
//! latent 3D points (a rigid template with per-point jitter, randomly
//! rotated and placed in front of the camera) decoded to all catalog joints by
//! a fixed chirality-symmetric affine matrix, plus Gaussian joint noise.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::acae::{assemble_chiral, normalize, Autoencoder, ChiralBlocks};
use crate::error::{AcaeError, Result};
use crate::geometry::{CameraModel, Point3, PoseMatrix};
use crate::seed::rng_for;
use crate::skeleton::{latent_partition, JointCatalog, LatentPartition};

/// One labelled pose with its camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub pose: PoseMatrix,
    pub camera: CameraModel,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseCorpus {
    pub examples: Vec<Example>,
}

impl PoseCorpus {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        let Some(first) = examples.first() else {
            return Err(AcaeError::EmptyCorpus);
        };
        let j = first.pose.len();
        if let Some(bad) = examples.iter().find(|e| e.pose.len() != j) {
            return Err(AcaeError::ShapeMismatch(format!(
                "corpus mixes {j}-joint and {}-joint poses",
                bad.pose.len()
            )));
        }
        Ok(Self { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn joints(&self) -> usize {
        self.examples.first().map_or(0, |e| e.pose.len())
    }

    pub fn check_catalog(&self, catalog: &JointCatalog) -> Result<()> {
        if self.joints() != catalog.len() {
            return Err(AcaeError::CatalogMismatch(format!(
                "corpus has {} joints, catalog has {}",
                self.joints(),
                catalog.len()
            )));
        }
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.examples.iter().all(|e| e.pose.is_complete())
    }

    pub fn subset(&self, indices: &[usize]) -> PoseCorpus {
        PoseCorpus {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }

    pub fn concat(mut self, other: PoseCorpus) -> Result<PoseCorpus> {
        self.examples.extend(other.examples);
        PoseCorpus::new(self.examples)
    }

    /// Seeded split into `(train, validation)` with `train_fraction` of the
    /// examples (at least one in each part when `K ≥ 2`).
    pub fn split(&self, train_fraction: f64, seed: u64) -> (PoseCorpus, PoseCorpus) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng_for(seed, "split"));
        let mut n_train = (self.len() as f64 * train_fraction).round() as usize;
        if self.len() >= 2 {
            n_train = n_train.clamp(1, self.len() - 1);
        }
        let (a, b) = idx.split_at(n_train.min(self.len()));
        (self.subset(a), self.subset(b))
    }
}

/// Generator settings for a planted corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub latent_count: usize,
    pub noise_sigma: f64,
    pub k: usize,
    pub seed: u64,
    /// Range of subject distances from the camera, mm.
    pub camera_distance: (f64, f64),
    /// Range of body yaw angles, degrees.
    pub yaw_range_deg: (f64, f64),
    /// Per-example jitter of each latent point around the template, mm.
    pub latent_jitter: f64,
    pub tag: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            latent_count: 16,
            noise_sigma: 5.0,
            k: 1000,
            seed: 0,
            camera_distance: (3000.0, 6000.0),
            yaw_range_deg: (-180.0, 180.0),
            latent_jitter: 60.0,
            tag: "synth".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AcaeError::ConfigInvalid(m));
        if self.latent_count < 4 {
            return bad(format!("need at least 4 planted latents, got {}", self.latent_count));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise sigma must be non-negative, got {}", self.noise_sigma));
        }
        if self.k == 0 {
            return bad("corpus size must be positive".into());
        }
        let (lo, hi) = self.camera_distance;
        if !(lo >= 500.0 && hi >= lo) {
            return bad(format!("camera distance range {lo}..{hi} must start at 500 mm or more"));
        }
        if !(self.yaw_range_deg.1 >= self.yaw_range_deg.0) {
            return bad("yaw range is empty".into());
        }
        if !(self.latent_jitter >= 0.0) {
            return bad("latent jitter must be non-negative".into());
        }
        Ok(())
    }
}

/// The planted structure behind a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthMixing {
    pub partition: LatentPartition,
    /// Body-frame latent template, `L*×3` rows, mm.
    pub template: Vec<[f64; 3]>,
    /// Affine decoder `J×L*`, rows summing to one.
    pub decoder: Vec<Vec<f64>>,
}

impl GroundTruthMixing {
    /// Draws a template and a sparse chirality-symmetric decoder.
    pub fn generate(catalog: &JointCatalog, latent_count: usize, seed: u64) -> Result<Self> {
        let partition = latent_partition(catalog, latent_count)?;
        let mut rng = rng_for(seed, "planted-mixing");
        let template = planted_template(&partition, &mut rng);
        for _attempt in 0..16 {
            let blocks = planted_blocks(catalog, &partition, &mut rng);
            let dec = normalize(&assemble_chiral(&blocks)?)?;
            let sv = dec.clone().svd(false, false).singular_values;
            let (lo, hi) = (sv.min(), sv.max());
            if lo > 1e-3 * hi {
                let decoder = (0..dec.nrows())
                    .map(|r| dec.row(r).iter().copied().collect())
                    .collect();
                return Ok(Self {
                    partition,
                    template,
                    decoder,
                });
            }
        }
        Err(AcaeError::ConfigInvalid(
            "could not draw a full-rank planted decoder".into(),
        ))
    }

    pub fn latent_count(&self) -> usize {
        self.template.len()
    }

    pub fn decoder_matrix(&self) -> DMatrix<f64> {
        let (j, l) = (self.decoder.len(), self.latent_count());
        DMatrix::from_fn(j, l, |r, c| self.decoder[r][c])
    }

    /// Planted decoder with its least-squares encoder (the pseudo-inverse,
    /// whose rows sum to one because the decoder's rows do).
    pub fn oracle_autoencoder(&self) -> Autoencoder {
        let dec = self.decoder_matrix();
        let enc = dec
            .clone()
            .pseudo_inverse(1e-12)
            .expect("pseudo-inverse of a finite matrix");
        Autoencoder { enc, dec }
    }

    fn template_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.latent_count(), 3, |r, c| self.template[r][c])
    }

    /// Samples `cfg.k` examples from this planted model.
    pub fn sample(&self, cfg: &SynthConfig) -> Result<PoseCorpus> {
        cfg.validate()?;
        let mut rng = rng_for(cfg.seed, &format!("examples/{}", cfg.tag));
        let dec = self.decoder_matrix();
        let template = self.template_matrix();
        let jitter = Normal::new(0.0, cfg.latent_jitter.max(f64::MIN_POSITIVE))
            .map_err(|e| AcaeError::ConfigInvalid(e.to_string()))?;
        let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
            .map_err(|e| AcaeError::ConfigInvalid(e.to_string()))?;
        let tilt = Normal::new(0.0, 8f64.to_radians()).expect("finite");
        let mut examples = Vec::with_capacity(cfg.k);
        for _ in 0..cfg.k {
            let mut q = template.clone();
            if cfg.latent_jitter > 0.0 {
                q.iter_mut().for_each(|x| *x += jitter.sample(&mut rng));
            }
            let (y0, y1) = cfg.yaw_range_deg;
            let yaw = rng.random_range(y0..=y1).to_radians();
            let rot: Matrix3<f64> = *(Rotation3::from_axis_angle(&Vector3::z_axis(), tilt.sample(&mut rng))
                * Rotation3::from_axis_angle(&Vector3::x_axis(), tilt.sample(&mut rng))
                * Rotation3::from_axis_angle(&Vector3::y_axis(), yaw))
            .matrix();
            let (d0, d1) = cfg.camera_distance;
            let depth = rng.random_range(d0..=d1);
            let rot_t = DMatrix::from_column_slice(3, 3, rot.transpose().as_slice());
            let mut q_cam = q * rot_t;
            let centroid: Vec<f64> = (0..3).map(|c| q_cam.column(c).mean()).collect();
            let shift = [-centroid[0], -centroid[1], depth - centroid[2]];
            for r in 0..q_cam.nrows() {
                for c in 0..3 {
                    q_cam[(r, c)] += shift[c];
                }
            }
            let mut p = &dec * q_cam;
            if cfg.noise_sigma > 0.0 {
                p.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
            }
            let f = rng.random_range(900.0..=1100.0);
            examples.push(Example {
                pose: PoseMatrix::from_matrix(&p),
                camera: CameraModel::new(f, f, 500.0, 500.0)?,
                tag: cfg.tag.clone(),
            });
        }
        PoseCorpus::new(examples)
    }
}

fn planted_template(partition: &LatentPartition, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let mut left = Vec::with_capacity(partition.left);
    for _ in 0..partition.left {
        left.push([
            rng.random_range(60.0..260.0),
            rng.random_range(-850.0..850.0),
            rng.random_range(-120.0..120.0),
        ]);
    }
    let right: Vec<[f64; 3]> = left.iter().map(|p| [-p[0], p[1], p[2]]).collect();
    let center = (0..partition.center).map(|_| {
        [
            0.0,
            rng.random_range(-850.0..850.0),
            rng.random_range(-120.0..120.0),
        ]
    });
    left.iter().copied().chain(right).chain(center).collect()
}

/// Sparse raw blocks: each joint row mixes two or three latents with
/// positive weights, sometimes plus one small negative weight.
fn planted_blocks(
    catalog: &JointCatalog,
    partition: &LatentPartition,
    rng: &mut impl Rng,
) -> ChiralBlocks {
    let rows = catalog.sides();
    let cols = partition.blocks();
    let mut b = ChiralBlocks::zeros(rows, cols);
    let (nl, nc) = (cols.left, cols.center);

    // Left-joint rows live in [W1 | W2 | W3]; center rows in [W4 | W5].
    let put_left = |b: &mut ChiralBlocks, r: usize, col: usize, v: f64| {
        if col < nl {
            b.w1[(r, col)] += v;
        } else if col < 2 * nl {
            b.w2[(r, col - nl)] += v;
        } else {
            b.w3[(r, col - 2 * nl)] += v;
        }
    };
    let put_center = |b: &mut ChiralBlocks, r: usize, col: usize, v: f64| {
        if col < nl {
            b.w4[(r, col)] += v;
        } else {
            b.w5[(r, col - nl)] += v;
        }
    };
    let left_cols = |rng: &mut dyn rand::RngCore| -> usize {
        // Mostly own-side latents, then central, rarely the opposite side.
        let u: f64 = rng.random();
        if u < 0.6 || nc == 0 {
            rng.random_range(0..nl)
        } else if u < 0.9 {
            2 * nl + rng.random_range(0..nc)
        } else {
            nl + rng.random_range(0..nl)
        }
    };
    for r in 0..rows.left {
        let n = rng.random_range(2..=3);
        for _ in 0..n {
            let col = left_cols(rng);
            put_left(&mut b, r, col, rng.random_range(0.2..1.0));
        }
        if rng.random::<f64>() < 0.3 {
            let col = left_cols(rng);
            put_left(&mut b, r, col, -rng.random_range(0.05..0.3));
        }
    }
    for r in 0..rows.center {
        let n = rng.random_range(2..=3);
        for _ in 0..n {
            let col = if rng.random::<f64>() < 0.5 {
                nl + rng.random_range(0..nc)
            } else {
                rng.random_range(0..nl)
            };
            put_center(&mut b, r, col, rng.random_range(0.2..1.0));
        }
    }
    // Every latent must drive at least one joint.
    for l in 0..nl {
        let used = b.w1.column(l).iter().any(|&x| x > 0.0)
            || b.w2.column(l).iter().any(|&x| x > 0.0)
            || b.w4.column(l).iter().any(|&x| x > 0.0);
        if !used {
            let r = rng.random_range(0..rows.left);
            b.w1[(r, l)] += rng.random_range(0.2..1.0);
        }
    }
    for c in 0..nc {
        let used = b.w3.column(c).iter().any(|&x| x > 0.0)
            || b.w5.column(c).iter().any(|&x| x > 0.0);
        if !used {
            if rows.center > 0 && rng.random::<f64>() < 0.5 {
                let r = rng.random_range(0..rows.center);
                b.w5[(r, c)] += rng.random_range(0.2..1.0);
            } else {
                let r = rng.random_range(0..rows.left);
                b.w3[(r, c)] += rng.random_range(0.2..1.0);
            }
        }
    }
    b
}

/// Draws a planted model and a corpus from it.
pub fn synth_corpus(
    catalog: &JointCatalog,
    cfg: &SynthConfig,
) -> Result<(PoseCorpus, GroundTruthMixing)> {
    cfg.validate()?;
    let mixing = GroundTruthMixing::generate(catalog, cfg.latent_count, cfg.seed)?;
    let corpus = mixing.sample(cfg)?;
    Ok((corpus, mixing))
}

/// Formats labelled for each source tag.
pub type MaskPolicy = BTreeMap<String, Vec<String>>;

/// Masks every joint that does not belong to the formats assigned to the
/// example's tag.
pub fn mask_subsets(
    corpus: &PoseCorpus,
    catalog: &JointCatalog,
    policy: &MaskPolicy,
) -> Result<PoseCorpus> {
    corpus.check_catalog(catalog)?;
    let mut allowed: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    for (tag, formats) in policy {
        if formats.is_empty() {
            return Err(AcaeError::EmptyLabelSet(tag.clone()));
        }
        let mut mask = vec![false; catalog.len()];
        for name in formats {
            let f = catalog.format_index(name)?;
            for &i in catalog.format_indices(f) {
                mask[i] = true;
            }
        }
        allowed.insert(tag.as_str(), mask);
    }
    let examples = corpus
        .examples
        .iter()
        .map(|ex| {
            let mask = allowed
                .get(ex.tag.as_str())
                .ok_or_else(|| AcaeError::UnknownTag(ex.tag.clone()))?;
            let valid = ex.pose.valid.iter().zip(mask).map(|(&a, &b)| a && b).collect();
            Ok(Example {
                pose: PoseMatrix::with_mask(ex.pose.joints.clone(), valid)?,
                ..ex.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PoseCorpus::new(examples)
}

/// Indices kept by [`redundancy_filter`].
pub fn redundancy_filter_indices(sequence: &[PoseMatrix], threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for (i, pose) in sequence.iter().enumerate() {
        let Some(&last) = kept.last() else {
            kept.push(i);
            continue;
        };
        let prev = &sequence[last];
        let moved = pose.joints.iter().zip(&prev.joints).enumerate().any(|(j, (a, b))| {
            pose.valid[j] && prev.valid.get(j).copied().unwrap_or(false) && (a - b).norm() >= threshold
        });
        if moved {
            kept.push(i);
        }
    }
    kept
}

/// Greedy scan that keeps a pose only if some valid joint moved at least
/// `threshold` mm away from the last kept pose.
pub fn redundancy_filter(sequence: &[PoseMatrix], threshold: f64) -> Vec<PoseMatrix> {
    redundancy_filter_indices(sequence, threshold)
        .into_iter()
        .map(|i| sequence[i].clone())
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CamRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    joints: Vec<[f64; 3]>,
    valid: Vec<bool>,
    cam: CamRecord,
    tag: String,
}

impl From<&Example> for ExampleRecord {
    fn from(e: &Example) -> Self {
        Self {
            joints: e.pose.joints.iter().map(|p| [p.x, p.y, p.z]).collect(),
            valid: e.pose.valid.clone(),
            cam: CamRecord {
                fx: e.camera.fx,
                fy: e.camera.fy,
                cx: e.camera.cx,
                cy: e.camera.cy,
            },
            tag: e.tag.clone(),
        }
    }
}

impl ExampleRecord {
    fn into_example(self) -> Result<Example> {
        Ok(Example {
            pose: PoseMatrix::with_mask(
                self.joints.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect(),
                self.valid,
            )?,
            camera: CameraModel::new(self.cam.fx, self.cam.fy, self.cam.cx, self.cam.cy)?,
            tag: self.tag,
        })
    }
}

/// One JSON object per line.
pub fn write_jsonl(corpus: &PoseCorpus, out: &mut impl Write) -> Result<()> {
    for ex in &corpus.examples {
        serde_json::to_writer(&mut *out, &ExampleRecord::from(ex))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(input: impl Read) -> Result<PoseCorpus> {
    let mut examples = Vec::new();
    for (n, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExampleRecord = serde_json::from_str(&line)
            .map_err(|e| AcaeError::Parse(format!("line {}: {e}", n + 1)))?;
        examples.push(rec.into_example()?);
    }
    PoseCorpus::new(examples)
}

pub fn save_jsonl(corpus: &PoseCorpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_jsonl(corpus, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<PoseCorpus> {
    read_jsonl(std::fs::File::open(path)?)
}

const PACKED_MAGIC: &[u8; 8] = b"ACAEPK01";

/// Little-endian binary mirror of the JSONL format:
/// magic, `J: u32`, `K: u64`, then per example `3J` f64 coordinates, `J`
/// validity bytes, `fx fy cx cy` as f64, and a `u32`-length UTF-8 tag.
pub fn write_packed(corpus: &PoseCorpus, out: &mut impl Write) -> Result<()> {
    out.write_all(PACKED_MAGIC)?;
    out.write_all(&(corpus.joints() as u32).to_le_bytes())?;
    out.write_all(&(corpus.len() as u64).to_le_bytes())?;
    for ex in &corpus.examples {
        for p in &ex.pose.joints {
            for c in 0..3 {
                out.write_all(&p[c].to_le_bytes())?;
            }
        }
        let valid: Vec<u8> = ex.pose.valid.iter().map(|&v| v as u8).collect();
        out.write_all(&valid)?;
        for v in [ex.camera.fx, ex.camera.fy, ex.camera.cx, ex.camera.cy] {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&(ex.tag.len() as u32).to_le_bytes())?;
        out.write_all(ex.tag.as_bytes())?;
    }
    Ok(())
}

pub fn read_packed(input: impl Read) -> Result<PoseCorpus> {
    let mut r = BufReader::new(input);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != PACKED_MAGIC {
        return Err(AcaeError::Parse("not a packed corpus".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let j = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b8)?;
    let k = u64::from_le_bytes(b8) as usize;
    let mut f64_at = |r: &mut BufReader<_>| -> Result<f64> {
        r.read_exact(&mut b8)?;
        Ok(f64::from_le_bytes(b8))
    };
    let mut examples = Vec::with_capacity(k.min(1 << 20));
    for _ in 0..k {
        let mut joints = Vec::with_capacity(j);
        for _ in 0..j {
            joints.push(Point3::new(f64_at(&mut r)?, f64_at(&mut r)?, f64_at(&mut r)?));
        }
        let mut valid = vec![0u8; j];
        r.read_exact(&mut valid)?;
        let cam = [f64_at(&mut r)?, f64_at(&mut r)?, f64_at(&mut r)?, f64_at(&mut r)?];
        r.read_exact(&mut b4)?;
        let mut tag = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut tag)?;
        examples.push(Example {
            pose: PoseMatrix::with_mask(joints, valid.iter().map(|&v| v != 0).collect())?,
            camera: CameraModel::new(cam[0], cam[1], cam[2], cam[3])?,
            tag: String::from_utf8(tag).map_err(|e| AcaeError::Parse(e.to_string()))?,
        });
    }
    PoseCorpus::new(examples)
}
