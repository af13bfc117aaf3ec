//! The affine-combining autoencoder.
//!
//! Parameters are unconstrained raw matrices. Every read goes through
//! [`normalize`], which divides each row by its sum, so the effective encoder
//! (`L×J`) and decoder (`J×L`) always compute affine combinations of points.
//! With chirality sharing on, the raw parameters are the five blocks of
//! [`ChiralBlocks`] and the full matrices are assembled from them.
//!
//! Poses are batched as `J×3B` matrices (three columns per pose) so that the
//! forward pass and the gradient are a handful of matrix products.

use nalgebra::{DMatrix, DMatrixView};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, PoseCorpus};
use crate::error::{AcaeError, Result};
use crate::geometry::{PoseMatrix, SideBlocks, Z_MIN};
use crate::reduce::{pairwise_mean, par_map};
use crate::skeleton::LatentPartition;

/// Smallest absolute row sum accepted by [`normalize`].
pub const MIN_ROW_SUM: f64 = 1e-6;

/// Examples per block when a loss is evaluated over a whole corpus.
const EVAL_CHUNK: usize = 64;

/// Divide each row by its sum.
pub fn normalize(raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = raw.clone();
    let sums = row_sums(raw);
    for (r, &s) in sums.iter().enumerate() {
        if !(s.abs() >= MIN_ROW_SUM) {
            return Err(AcaeError::DegenerateRow { row: r, sum: s });
        }
        out.row_mut(r).scale_mut(1.0 / s);
    }
    Ok(out)
}

/// Row sums taken over the sorted entries, so rows holding the same values
/// in a different order (mirrored chiral rows) get bit-identical sums.
pub fn row_sums(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows())
        .map(|r| {
            let mut v: Vec<f64> = m.row(r).iter().copied().collect();
            v.sort_unstable_by(f64::total_cmp);
            v.iter().sum()
        })
        .collect()
}

/// Back-propagates a gradient on the normalized matrix to the raw matrix.
///
/// For `w = raw / s` with `s = Σ raw`, `∂L/∂raw_k = (g_k − Σ_j g_j w_j) / s`.
pub fn normalize_backward(
    raw: &DMatrix<f64>,
    normalized: &DMatrix<f64>,
    grad: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut out = grad.clone();
    let sums = row_sums(raw);
    for (r, &s) in sums.iter().enumerate() {
        let dot = grad.row(r).dot(&normalized.row(r));
        for c in 0..raw.ncols() {
            out[(r, c)] = (grad[(r, c)] - dot) / s;
        }
    }
    out
}

/// ℓ1 subgradient with 0 at 0.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Raw weight-sharing blocks of one chirality-equivariant matrix:
///
/// ```text
/// [ W1 W2 W3 ]
/// [ W2 W1 W3 ]
/// [ W4 W4 W5 ]
/// ```
///
/// `rows` and `cols` give the left/right/center section sizes of the
/// assembled matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ChiralBlocks {
    pub rows: SideBlocks,
    pub cols: SideBlocks,
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub w3: DMatrix<f64>,
    pub w4: DMatrix<f64>,
    pub w5: DMatrix<f64>,
}

impl ChiralBlocks {
    pub fn zeros(rows: SideBlocks, cols: SideBlocks) -> Self {
        Self {
            rows,
            cols,
            w1: DMatrix::zeros(rows.left, cols.left),
            w2: DMatrix::zeros(rows.left, cols.left),
            w3: DMatrix::zeros(rows.left, cols.center),
            w4: DMatrix::zeros(rows.center, cols.left),
            w5: DMatrix::zeros(rows.center, cols.center),
        }
    }

    pub fn from_fn(
        rows: SideBlocks,
        cols: SideBlocks,
        mut f: impl FnMut() -> f64,
    ) -> Self {
        let mut b = Self::zeros(rows, cols);
        for m in b.blocks_mut() {
            m.iter_mut().for_each(|x| *x = f());
        }
        b
    }

    pub fn blocks(&self) -> [&DMatrix<f64>; 5] {
        [&self.w1, &self.w2, &self.w3, &self.w4, &self.w5]
    }

    pub fn blocks_mut(&mut self) -> [&mut DMatrix<f64>; 5] {
        [
            &mut self.w1,
            &mut self.w2,
            &mut self.w3,
            &mut self.w4,
            &mut self.w5,
        ]
    }

    pub fn check_shapes(&self) -> Result<()> {
        self.rows.check_symmetric()?;
        self.cols.check_symmetric()?;
        let (a, b, c, e) = (self.rows.left, self.cols.left, self.cols.center, self.rows.center);
        let expect = [(a, b), (a, b), (a, c), (e, b), (e, c)];
        for (i, (m, (r, k))) in self.blocks().iter().zip(expect).enumerate() {
            if m.shape() != (r, k) {
                return Err(AcaeError::ShapeMismatch(format!(
                    "block W{} is {:?}, expected {:?}",
                    i + 1,
                    m.shape(),
                    (r, k)
                )));
            }
        }
        Ok(())
    }

    /// Scales assembled row `r` (and its mirror) by `factor`.
    fn scale_row(&mut self, r: usize, factor: f64) {
        let a = self.rows.left;
        if r < a {
            self.w1.row_mut(r).scale_mut(factor);
            self.w2.row_mut(r).scale_mut(factor);
            self.w3.row_mut(r).scale_mut(factor);
        } else if r >= 2 * a {
            self.w4.row_mut(r - 2 * a).scale_mut(factor);
            self.w5.row_mut(r - 2 * a).scale_mut(factor);
        } else {
            self.scale_row(r - a, factor);
        }
    }

    /// Sums the entries of a full-size gradient over the positions each
    /// block occupies in the assembled matrix.
    pub fn fold(rows: SideBlocks, cols: SideBlocks, grad: &DMatrix<f64>) -> Self {
        let (a, b, e, c) = (rows.left, cols.left, rows.center, cols.center);
        let v = |r0, c0, nr, nc| grad.view((r0, c0), (nr, nc)).into_owned();
        Self {
            rows,
            cols,
            w1: v(0, 0, a, b) + v(a, b, a, b),
            w2: v(0, b, a, b) + v(a, 0, a, b),
            w3: v(0, 2 * b, a, c) + v(a, 2 * b, a, c),
            w4: v(2 * a, 0, e, b) + v(2 * a, b, e, b),
            w5: v(2 * a, 2 * b, e, c),
        }
    }
}

/// Assembles the full matrix from chirality-sharing blocks.
pub fn assemble_chiral(blocks: &ChiralBlocks) -> Result<DMatrix<f64>> {
    blocks.check_shapes()?;
    let (rows, cols) = (blocks.rows, blocks.cols);
    let (a, b) = (rows.left, cols.left);
    let mut m = DMatrix::zeros(rows.total(), cols.total());
    let mut put = |r0: usize, c0: usize, src: &DMatrix<f64>| {
        m.view_mut((r0, c0), src.shape()).copy_from(src);
    };
    put(0, 0, &blocks.w1);
    put(0, b, &blocks.w2);
    put(0, 2 * b, &blocks.w3);
    put(a, 0, &blocks.w2);
    put(a, b, &blocks.w1);
    put(a, 2 * b, &blocks.w3);
    put(2 * a, 0, &blocks.w4);
    put(2 * a, b, &blocks.w4);
    put(2 * a, 2 * b, &blocks.w5);
    Ok(m)
}

/// Conjugates `m` by the left↔right swap on both rows and columns.
pub fn swap_sides(m: &DMatrix<f64>, rows: &SideBlocks, cols: &SideBlocks) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| {
        m[(rows.mirror_index(r), cols.mirror_index(c))]
    })
}

/// `L×3` latent points.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPose {
    pub latents: DMatrix<f64>,
}

/// Raw (pre-normalization) autoencoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum AcaeWeights {
    Dense {
        raw_enc: DMatrix<f64>,
        raw_dec: DMatrix<f64>,
    },
    Chiral {
        enc: ChiralBlocks,
        dec: ChiralBlocks,
    },
}

impl AcaeWeights {
    pub fn dense(raw_enc: DMatrix<f64>, raw_dec: DMatrix<f64>) -> Result<Self> {
        if raw_enc.nrows() != raw_dec.ncols() || raw_enc.ncols() != raw_dec.nrows() {
            return Err(AcaeError::ShapeMismatch(format!(
                "encoder {:?} and decoder {:?} do not transpose-match",
                raw_enc.shape(),
                raw_dec.shape()
            )));
        }
        Ok(AcaeWeights::Dense { raw_enc, raw_dec })
    }

    pub fn chiral(enc: ChiralBlocks, dec: ChiralBlocks) -> Result<Self> {
        enc.check_shapes()?;
        dec.check_shapes()?;
        if enc.rows != dec.cols || enc.cols != dec.rows {
            return Err(AcaeError::ShapeMismatch(
                "encoder and decoder block layouts do not mirror each other".into(),
            ));
        }
        Ok(AcaeWeights::Chiral { enc, dec })
    }

    /// Identity autoencoder (`L = J`).
    pub fn identity(joints: usize) -> Self {
        AcaeWeights::Dense {
            raw_enc: DMatrix::identity(joints, joints),
            raw_dec: DMatrix::identity(joints, joints),
        }
    }

    /// Rows drawn i.i.d. uniform on (0, 1), then scaled to sum to one.
    pub fn init_dense(latents: usize, joints: usize, rng: &mut impl Rng) -> Self {
        let mut draw = |r, c| {
            let mut m = DMatrix::from_fn(r, c, |_, _| open_unit(rng));
            for i in 0..r {
                let s: f64 = m.row(i).iter().sum();
                m.row_mut(i).scale_mut(1.0 / s);
            }
            m
        };
        let raw_enc = draw(latents, joints);
        let raw_dec = draw(joints, latents);
        AcaeWeights::Dense { raw_enc, raw_dec }
    }

    /// Block-shared counterpart of [`AcaeWeights::init_dense`].
    pub fn init_chiral(
        joints: SideBlocks,
        latents: LatentPartition,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let lat = latents.blocks();
        let mut enc = ChiralBlocks::from_fn(lat, joints, || open_unit(rng));
        let mut dec = ChiralBlocks::from_fn(joints, lat, || open_unit(rng));
        for blocks in [&mut enc, &mut dec] {
            let sums = row_sums(&assemble_chiral(blocks)?);
            for (r, s) in sums.iter().enumerate() {
                if r < blocks.rows.left || r >= 2 * blocks.rows.left {
                    blocks.scale_row(r, 1.0 / s);
                }
            }
        }
        Self::chiral(enc, dec)
    }

    pub fn is_chiral(&self) -> bool {
        matches!(self, AcaeWeights::Chiral { .. })
    }

    pub fn joints(&self) -> usize {
        match self {
            AcaeWeights::Dense { raw_enc, .. } => raw_enc.ncols(),
            AcaeWeights::Chiral { enc, .. } => enc.cols.total(),
        }
    }

    pub fn latents(&self) -> usize {
        match self {
            AcaeWeights::Dense { raw_enc, .. } => raw_enc.nrows(),
            AcaeWeights::Chiral { enc, .. } => enc.rows.total(),
        }
    }

    pub fn raw_enc(&self) -> DMatrix<f64> {
        match self {
            AcaeWeights::Dense { raw_enc, .. } => raw_enc.clone(),
            AcaeWeights::Chiral { enc, .. } => assemble_chiral(enc).expect("validated blocks"),
        }
    }

    pub fn raw_dec(&self) -> DMatrix<f64> {
        match self {
            AcaeWeights::Dense { raw_dec, .. } => raw_dec.clone(),
            AcaeWeights::Chiral { dec, .. } => assemble_chiral(dec).expect("validated blocks"),
        }
    }

    /// Normalized encoder/decoder pair.
    pub fn normalized(&self) -> Result<Autoencoder> {
        Ok(Autoencoder {
            enc: normalize(&self.raw_enc())?,
            dec: normalize(&self.raw_dec())?,
        })
    }

    pub fn encode(&self, pose: &PoseMatrix) -> Result<LatentPose> {
        self.normalized()?.encode(pose)
    }

    pub fn decode(&self, latents: &LatentPose) -> Result<PoseMatrix> {
        self.normalized()?.decode(latents)
    }

    /// Parameter storage in a fixed order shared by weights and gradients.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        match self {
            AcaeWeights::Dense { raw_enc, raw_dec } => vec![raw_enc.as_slice(), raw_dec.as_slice()],
            AcaeWeights::Chiral { enc, dec } => enc
                .blocks()
                .into_iter()
                .chain(dec.blocks())
                .map(|m| m.as_slice())
                .collect(),
        }
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            AcaeWeights::Dense { raw_enc, raw_dec } => {
                vec![raw_enc.as_mut_slice(), raw_dec.as_mut_slice()]
            }
            AcaeWeights::Chiral { enc, dec } => {
                let mut v: Vec<&mut [f64]> =
                    enc.blocks_mut().into_iter().map(|m| m.as_mut_slice()).collect();
                v.extend(dec.blocks_mut().into_iter().map(|m| m.as_mut_slice()));
                v
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.param_slices_mut() {
            s.fill(0.0);
        }
        z
    }

    /// Folds full-size gradients on the raw matrices into this layout.
    fn gradient_from_dense(&self, g_enc: DMatrix<f64>, g_dec: DMatrix<f64>) -> Self {
        match self {
            AcaeWeights::Dense { .. } => AcaeWeights::Dense {
                raw_enc: g_enc,
                raw_dec: g_dec,
            },
            AcaeWeights::Chiral { enc, dec } => AcaeWeights::Chiral {
                enc: ChiralBlocks::fold(enc.rows, enc.cols, &g_enc),
                dec: ChiralBlocks::fold(dec.rows, dec.cols, &g_dec),
            },
        }
    }

    /// Replaces raw row `row` of the encoder (`decoder == false`) or decoder
    /// with fresh positive values summing to one. For chiral weights the
    /// mirrored row is reset along with it.
    pub fn reinit_row(&mut self, decoder: bool, row: usize, rng: &mut impl Rng) {
        match self {
            AcaeWeights::Dense { raw_enc, raw_dec } => {
                let m = if decoder { raw_dec } else { raw_enc };
                let vals: Vec<f64> = (0..m.ncols()).map(|_| open_unit(rng)).collect();
                let s: f64 = vals.iter().sum();
                for (c, v) in vals.into_iter().enumerate() {
                    m[(row, c)] = v / s;
                }
            }
            AcaeWeights::Chiral { enc, dec } => {
                let b = if decoder { dec } else { enc };
                let a = b.rows.left;
                let r = if row >= a && row < 2 * a { row - a } else { row };
                let mut fill = |m: &mut DMatrix<f64>, rr: usize| {
                    for c in 0..m.ncols() {
                        m[(rr, c)] = open_unit(rng);
                    }
                };
                if r < a {
                    fill(&mut b.w1, r);
                    fill(&mut b.w2, r);
                    fill(&mut b.w3, r);
                } else {
                    fill(&mut b.w4, r - 2 * a);
                    fill(&mut b.w5, r - 2 * a);
                }
                let s = row_sums(&assemble_chiral(b).expect("validated blocks"))[r];
                b.scale_row(r, 1.0 / s);
            }
        }
    }
}

impl AcaeWeights {
    /// Rescales raw rows so they sum to one exactly as stored. The
    /// normalized matrices are unchanged up to rounding.
    pub fn renormalize(&mut self) -> Result<()> {
        match self {
            AcaeWeights::Dense { raw_enc, raw_dec } => {
                *raw_enc = normalize(raw_enc)?;
                *raw_dec = normalize(raw_dec)?;
            }
            AcaeWeights::Chiral { enc, dec } => {
                for b in [enc, dec] {
                    let sums = row_sums(&assemble_chiral(b)?);
                    for (r, &s) in sums.iter().enumerate() {
                        if s.abs() < MIN_ROW_SUM {
                            return Err(AcaeError::DegenerateRow { row: r, sum: s });
                        }
                        if r < b.rows.left || r >= 2 * b.rows.left {
                            b.scale_row(r, 1.0 / s);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn open_unit(rng: &mut impl Rng) -> f64 {
    loop {
        let x: f64 = rng.random();
        if x > 0.0 {
            return x;
        }
    }
}

/// Normalized encoder (`L×J`) and decoder (`J×L`).
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub enc: DMatrix<f64>,
    pub dec: DMatrix<f64>,
}

impl Autoencoder {
    pub fn joints(&self) -> usize {
        self.enc.ncols()
    }

    pub fn latents(&self) -> usize {
        self.enc.nrows()
    }

    pub fn encode(&self, pose: &PoseMatrix) -> Result<LatentPose> {
        if !pose.is_complete() {
            return Err(AcaeError::IncompleteInput);
        }
        if pose.len() != self.joints() {
            return Err(AcaeError::ShapeMismatch(format!(
                "pose has {} joints, encoder expects {}",
                pose.len(),
                self.joints()
            )));
        }
        Ok(LatentPose {
            latents: &self.enc * pose.to_matrix(),
        })
    }

    pub fn decode(&self, q: &LatentPose) -> Result<PoseMatrix> {
        if q.latents.shape() != (self.latents(), 3) {
            return Err(AcaeError::ShapeMismatch(format!(
                "latents are {:?}, decoder expects ({}, 3)",
                q.latents.shape(),
                self.latents()
            )));
        }
        Ok(PoseMatrix::from_matrix(&(&self.dec * &q.latents)))
    }

    pub fn reconstruct(&self, pose: &PoseMatrix) -> Result<PoseMatrix> {
        self.decode(&self.encode(pose)?)
    }

    /// `W_dec · W_enc`.
    pub fn round_trip_matrix(&self) -> DMatrix<f64> {
        &self.dec * &self.enc
    }
}

/// Loss terms for one evaluation. The reconstruction term that the config
/// did not select is still reported when it can be computed, `NaN` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcaeLossTerms {
    pub reconstr: f64,
    pub reconstr_proj: f64,
    pub sparse: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub projected: bool,
    pub lambda_sparse: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            projected: false,
            lambda_sparse: 0.0,
        }
    }
}

/// `J×3B` matrix stacking the poses of `examples` side by side.
pub fn stack_poses(examples: &[&Example]) -> DMatrix<f64> {
    let j = examples.first().map_or(0, |e| e.pose.len());
    let mut m = DMatrix::zeros(j, 3 * examples.len());
    for (b, ex) in examples.iter().enumerate() {
        for (r, p) in ex.pose.joints.iter().enumerate() {
            m[(r, 3 * b)] = p.x;
            m[(r, 3 * b + 1)] = p.y;
            m[(r, 3 * b + 2)] = p.z;
        }
    }
    m
}

fn check_batch(examples: &[&Example], joints: usize) -> Result<()> {
    if examples.is_empty() {
        return Err(AcaeError::EmptyCorpus);
    }
    for ex in examples {
        if ex.pose.len() != joints {
            return Err(AcaeError::ShapeMismatch(format!(
                "example has {} joints, weights expect {joints}",
                ex.pose.len()
            )));
        }
        if !ex.pose.is_complete() {
            return Err(AcaeError::IncompleteInput);
        }
    }
    Ok(())
}

/// Per-example weighted ℓ1 of the 3D residual `P − R`.
fn per_example_l1(p: DMatrixView<f64>, r: &DMatrix<f64>, weights: &[f64]) -> Vec<f64> {
    let n = p.ncols() / 3;
    (0..n)
        .map(|b| {
            let mut acc = 0.0;
            for c in 3 * b..3 * b + 3 {
                for (j, w) in weights.iter().enumerate() {
                    acc += w * (p[(j, c)] - r[(j, c)]).abs();
                }
            }
            acc
        })
        .collect()
}

/// Per-example weighted ℓ1 of the pixel residual between the projections of
/// `P` and `R`, or `None` if a reconstructed joint is too close to the camera.
fn per_example_proj_l1(
    examples: &[&Example],
    p: DMatrixView<f64>,
    r: &DMatrix<f64>,
    weights: &[f64],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(examples.len());
    for (b, ex) in examples.iter().enumerate() {
        let cam = &ex.camera;
        let mut acc = 0.0;
        for (j, w) in weights.iter().enumerate() {
            let (px, py, pz) = (p[(j, 3 * b)], p[(j, 3 * b + 1)], p[(j, 3 * b + 2)]);
            let (rx, ry, rz) = (r[(j, 3 * b)], r[(j, 3 * b + 1)], r[(j, 3 * b + 2)]);
            for (z, joint) in [(pz, j), (rz, j)] {
                if !(z >= Z_MIN) {
                    return Err(AcaeError::DepthTooSmall { joint, z, min: Z_MIN });
                }
            }
            let du = cam.fx * (px / pz - rx / rz);
            let dv = cam.fy * (py / pz - ry / rz);
            acc += w * (du.abs() + dv.abs());
        }
        out.push(acc);
    }
    Ok(out)
}

fn sparsity_of(ae: &Autoencoder) -> f64 {
    ae.enc.iter().map(|x| x.abs()).sum::<f64>() + ae.dec.iter().map(|x| x.abs()).sum::<f64>()
}

/// `‖W_enc‖₁ + ‖W_dec‖₁` on the normalized matrices.
pub fn sparsity_loss(w: &AcaeWeights) -> Result<f64> {
    Ok(sparsity_of(&w.normalized()?))
}

fn corpus_refs(corpus: &PoseCorpus) -> Vec<&Example> {
    corpus.examples.iter().collect()
}

/// Mean over examples of per-example values, computed chunk-wise on the
/// worker pool and reduced in a fixed order.
fn corpus_mean<F>(corpus: &PoseCorpus, f: F) -> Result<f64>
where
    F: Fn(&[&Example]) -> Result<Vec<f64>> + Sync + Send,
{
    let refs = corpus_refs(corpus);
    if refs.is_empty() {
        return Err(AcaeError::EmptyCorpus);
    }
    let chunks: Vec<&[&Example]> = refs.chunks(EVAL_CHUNK).collect();
    let parts = par_map(&chunks, |c| f(c));
    let mut all = Vec::with_capacity(refs.len());
    for p in parts {
        all.extend(p?);
    }
    Ok(pairwise_mean(&all))
}

/// `(1/K) Σ_k ‖P_k − W_dec W_enc P_k‖₁` with per-joint weights.
pub fn reconstruction_loss(
    w: &AcaeWeights,
    corpus: &PoseCorpus,
    loss_weights: &[f64],
) -> Result<f64> {
    let ae = w.normalized()?;
    reconstruction_loss_normalized(&ae, corpus, loss_weights)
}

pub fn reconstruction_loss_normalized(
    ae: &Autoencoder,
    corpus: &PoseCorpus,
    loss_weights: &[f64],
) -> Result<f64> {
    corpus_mean(corpus, |chunk| {
        check_batch(chunk, ae.joints())?;
        let p = stack_poses(chunk);
        let r = &ae.dec * (&ae.enc * &p);
        Ok(per_example_l1(p.as_view(), &r, loss_weights))
    })
}

/// Reconstruction loss measured on the image-plane projections.
pub fn projected_reconstruction_loss(
    w: &AcaeWeights,
    corpus: &PoseCorpus,
    loss_weights: &[f64],
) -> Result<f64> {
    let ae = w.normalized()?;
    projected_reconstruction_loss_normalized(&ae, corpus, loss_weights)
}

pub fn projected_reconstruction_loss_normalized(
    ae: &Autoencoder,
    corpus: &PoseCorpus,
    loss_weights: &[f64],
) -> Result<f64> {
    corpus_mean(corpus, |chunk| {
        check_batch(chunk, ae.joints())?;
        let p = stack_poses(chunk);
        let r = &ae.dec * (&ae.enc * &p);
        per_example_proj_l1(chunk, p.as_view(), &r, loss_weights)
    })
}

/// Loss terms and gradient with respect to the raw parameters over a batch.
///
/// The gradient passes through the row normalization (and, for chiral
/// weights, through block assembly). The returned gradient has the same
/// layout as `w`.
pub fn batch_loss_and_gradient(
    w: &AcaeWeights,
    batch: &[&Example],
    loss_weights: &[f64],
    cfg: &LossConfig,
) -> Result<(AcaeLossTerms, AcaeWeights)> {
    let joints = w.joints();
    check_batch(batch, joints)?;
    if loss_weights.len() != joints {
        return Err(AcaeError::ShapeMismatch(format!(
            "{} loss weights for {joints} joints",
            loss_weights.len()
        )));
    }
    let raw_enc = w.raw_enc();
    let raw_dec = w.raw_dec();
    let ae = Autoencoder {
        enc: normalize(&raw_enc)?,
        dec: normalize(&raw_dec)?,
    };
    let n = batch.len() as f64;
    let p = stack_poses(batch);
    let q = &ae.enc * &p;
    let r = &ae.dec * &q;

    let l1 = per_example_l1(p.as_view(), &r, loss_weights);
    let proj = per_example_proj_l1(batch, p.as_view(), &r, loss_weights);
    let reconstr = l1.iter().sum::<f64>() / n;
    let reconstr_proj = match &proj {
        Ok(v) => v.iter().sum::<f64>() / n,
        Err(_) => f64::NAN,
    };
    if cfg.projected {
        proj?;
    }
    let sparse = sparsity_of(&ae);
    let used = if cfg.projected { reconstr_proj } else { reconstr };
    let terms = AcaeLossTerms {
        reconstr,
        reconstr_proj,
        sparse,
        total: used + cfg.lambda_sparse * sparse,
    };

    // ∂L/∂R, J×3B.
    let mut g_r = DMatrix::zeros(joints, p.ncols());
    for (b, ex) in batch.iter().enumerate() {
        for (j, &wj) in loss_weights.iter().enumerate() {
            let s = -wj / n;
            if cfg.projected {
                let cam = &ex.camera;
                let (px, py, pz) = (p[(j, 3 * b)], p[(j, 3 * b + 1)], p[(j, 3 * b + 2)]);
                let (rx, ry, rz) = (r[(j, 3 * b)], r[(j, 3 * b + 1)], r[(j, 3 * b + 2)]);
                let su = s * sign(cam.fx * (px / pz - rx / rz));
                let sv = s * sign(cam.fy * (py / pz - ry / rz));
                let iz = 1.0 / rz;
                g_r[(j, 3 * b)] = su * cam.fx * iz;
                g_r[(j, 3 * b + 1)] = sv * cam.fy * iz;
                g_r[(j, 3 * b + 2)] = -(su * cam.fx * rx + sv * cam.fy * ry) * iz * iz;
            } else {
                for c in 3 * b..3 * b + 3 {
                    g_r[(j, c)] = s * sign(p[(j, c)] - r[(j, c)]);
                }
            }
        }
    }

    let mut g_dec = &g_r * q.transpose();
    let g_q = ae.dec.transpose() * &g_r;
    let mut g_enc = g_q * p.transpose();
    if cfg.lambda_sparse != 0.0 {
        g_enc.zip_apply(&ae.enc, |g, x| *g += cfg.lambda_sparse * sign(x));
        g_dec.zip_apply(&ae.dec, |g, x| *g += cfg.lambda_sparse * sign(x));
    }
    let g_raw_enc = normalize_backward(&raw_enc, &ae.enc, &g_enc);
    let g_raw_dec = normalize_backward(&raw_dec, &ae.dec, &g_dec);
    Ok((terms, w.gradient_from_dense(g_raw_enc, g_raw_dec)))
}

/// [`batch_loss_and_gradient`] over a whole corpus.
pub fn loss_and_gradient(
    w: &AcaeWeights,
    corpus: &PoseCorpus,
    loss_weights: &[f64],
    cfg: &LossConfig,
) -> Result<(AcaeLossTerms, AcaeWeights)> {
    batch_loss_and_gradient(w, &corpus_refs(corpus), loss_weights, cfg)
}

/// Serialized checkpoint. Values are stored as JSON numbers with
/// shortest-round-trip formatting, so reading back is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    #[serde(rename = "J")]
    pub joints: usize,
    #[serde(rename = "L")]
    pub latents: usize,
    pub catalog_hash: String,
    pub chirality: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_enc: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_dec: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enc_blocks: Option<BlockRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dec_blocks: Option<BlockRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub rows: SideBlocks,
    pub cols: SideBlocks,
    #[serde(rename = "W1")]
    pub w1: Vec<Vec<f64>>,
    #[serde(rename = "W2")]
    pub w2: Vec<Vec<f64>>,
    #[serde(rename = "W3")]
    pub w3: Vec<Vec<f64>>,
    #[serde(rename = "W4")]
    pub w4: Vec<Vec<f64>>,
    #[serde(rename = "W5")]
    pub w5: Vec<Vec<f64>>,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| m.row(r).iter().copied().collect())
        .collect()
}

fn from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(AcaeError::ShapeMismatch(format!(
            "stored matrix is not {nrows}×{ncols}"
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

impl BlockRecord {
    fn from_blocks(b: &ChiralBlocks) -> Self {
        Self {
            rows: b.rows,
            cols: b.cols,
            w1: to_rows(&b.w1),
            w2: to_rows(&b.w2),
            w3: to_rows(&b.w3),
            w4: to_rows(&b.w4),
            w5: to_rows(&b.w5),
        }
    }

    fn to_blocks(&self) -> Result<ChiralBlocks> {
        let (a, b, c, e) = (self.rows.left, self.cols.left, self.cols.center, self.rows.center);
        let blocks = ChiralBlocks {
            rows: self.rows,
            cols: self.cols,
            w1: from_rows(&self.w1, a, b)?,
            w2: from_rows(&self.w2, a, b)?,
            w3: from_rows(&self.w3, a, c)?,
            w4: from_rows(&self.w4, e, b)?,
            w5: from_rows(&self.w5, e, c)?,
        };
        blocks.check_shapes()?;
        Ok(blocks)
    }
}

impl Checkpoint {
    pub fn from_weights(w: &AcaeWeights, catalog_hash: &str) -> Self {
        let mut ck = Checkpoint {
            joints: w.joints(),
            latents: w.latents(),
            catalog_hash: catalog_hash.to_string(),
            chirality: w.is_chiral(),
            raw_enc: None,
            raw_dec: None,
            enc_blocks: None,
            dec_blocks: None,
        };
        match w {
            AcaeWeights::Dense { raw_enc, raw_dec } => {
                ck.raw_enc = Some(to_rows(raw_enc));
                ck.raw_dec = Some(to_rows(raw_dec));
            }
            AcaeWeights::Chiral { enc, dec } => {
                ck.enc_blocks = Some(BlockRecord::from_blocks(enc));
                ck.dec_blocks = Some(BlockRecord::from_blocks(dec));
            }
        }
        ck
    }

    pub fn weights(&self) -> Result<AcaeWeights> {
        let w = if self.chirality {
            match (&self.enc_blocks, &self.dec_blocks) {
                (Some(e), Some(d)) => AcaeWeights::chiral(e.to_blocks()?, d.to_blocks()?)?,
                _ => return Err(AcaeError::Parse("chiral checkpoint without blocks".into())),
            }
        } else {
            match (&self.raw_enc, &self.raw_dec) {
                (Some(e), Some(d)) => AcaeWeights::dense(
                    from_rows(e, self.latents, self.joints)?,
                    from_rows(d, self.joints, self.latents)?,
                )?,
                _ => return Err(AcaeError::Parse("dense checkpoint without matrices".into())),
            }
        };
        if w.joints() != self.joints || w.latents() != self.latents {
            return Err(AcaeError::ShapeMismatch(
                "checkpoint J/L disagree with stored weights".into(),
            ));
        }
        Ok(w)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
