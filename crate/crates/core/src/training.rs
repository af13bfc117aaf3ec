//! Adam, the mini-batch ACAE training loop, least-squares oracles and the
//! latent-count sweep.

use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::acae::{
    normalize, row_sums, stack_poses, AcaeLossTerms, AcaeWeights, Autoencoder, LossConfig,
    MIN_ROW_SUM,
};
use crate::corpus::{Example, PoseCorpus};
use crate::error::{AcaeError, Result};
use crate::reduce::{pairwise_mean, pairwise_sum, par_map};
use crate::seed::rng_for;
use crate::skeleton::{latent_partition, JointCatalog};

const CHUNK: usize = 64;

/// Adam moments and step counter for a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One bias-corrected Adam update over parameters stored as several slices
/// (visited in order, sharing one moment vector).
pub fn adam_step_slices(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let n: usize = params.iter().map(|p| p.len()).sum();
    let ng: usize = grads.iter().map(|g| g.len()).sum();
    if n != state.len() || ng != n || params.len() != grads.len() {
        return Err(AcaeError::ShapeMismatch(format!(
            "{n} parameters, {ng} gradients, {} moment entries",
            state.len()
        )));
    }
    if params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(AcaeError::ShapeMismatch("parameter and gradient slices differ".into()));
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(state.step as f64);
    let c2 = 1.0 - b2.powf(state.step as f64);
    let mut i = 0;
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, &gi) in p.iter_mut().zip(g.iter()) {
            let m = b1 * state.m[i] + (1.0 - b1) * gi;
            let v = b2 * state.v[i] + (1.0 - b2) * gi * gi;
            state.m[i] = m;
            state.v[i] = v;
            *x -= lr * (m / c1) / ((v / c2).sqrt() + state.eps);
            i += 1;
        }
    }
    Ok(())
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    adam_step_slices(&mut [params], &[grads], state, lr)
}

fn adam_step_weights(
    w: &mut AcaeWeights,
    g: &AcaeWeights,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let grads = g.param_slices();
    let mut params = w.param_slices_mut();
    adam_step_slices(&mut params, &grads, state, lr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub latents: usize,
    pub learning_rate: f64,
    /// Learning rate reached at the last step, as a fraction of the initial
    /// rate, with geometric interpolation in between. `1.0` keeps it constant.
    pub final_lr_fraction: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lambda_sparse: f64,
    pub use_projected_loss: bool,
    pub chirality: bool,
    pub head_weighting: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latents: 16,
            learning_rate: 1e-3,
            final_lr_fraction: 1.0,
            batch_size: 32,
            steps: 20_000,
            lambda_sparse: 0.0,
            use_projected_loss: false,
            chirality: false,
            head_weighting: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AcaeError::ConfigInvalid(m));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.final_lr_fraction > 0.0) {
            return bad("final learning-rate fraction must be positive".into());
        }
        if !(self.lambda_sparse >= 0.0) {
            return bad("sparsity weight must be non-negative".into());
        }
        if self.latents == 0 {
            return bad("need at least one latent".into());
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            projected: self.use_projected_loss,
            lambda_sparse: self.lambda_sparse,
        }
    }

    fn lr_at(&self, step: usize) -> f64 {
        if self.final_lr_fraction == 1.0 || self.steps <= 1 {
            return self.learning_rate;
        }
        let t = step as f64 / (self.steps - 1) as f64;
        self.learning_rate * self.final_lr_fraction.powf(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub total: f64,
    pub reconstr: f64,
    pub sparse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReinitEvent {
    pub step: usize,
    pub decoder: bool,
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    pub reinits: Vec<ReinitEvent>,
    /// Mean per-joint validation error: mm for 3D training, px for projected.
    pub validation: Option<f64>,
}

impl TrainLog {
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "step,total,reconstr,sparse")?;
        for r in &self.records {
            writeln!(out, "{},{},{},{}", r.step, r.total, r.reconstr, r.sparse)?;
        }
        Ok(())
    }

    /// Mean total loss over records `[from, to)`.
    pub fn window_mean(&self, from: usize, to: usize) -> f64 {
        let xs: Vec<f64> = self.records[from..to].iter().map(|r| r.total).collect();
        pairwise_mean(&xs)
    }
}

/// Number of whole row re-initializations tolerated before giving up.
pub const MAX_REINITS: usize = 3;

/// Initial weights for `cfg`, as used by [`fit_acae`].
pub fn initial_weights(catalog: &JointCatalog, cfg: &TrainConfig) -> Result<AcaeWeights> {
    let mut rng = rng_for(cfg.seed, "init");
    if cfg.chirality {
        let partition = latent_partition(catalog, cfg.latents)?;
        AcaeWeights::init_chiral(catalog.sides(), partition, &mut rng)
    } else {
        Ok(AcaeWeights::init_dense(cfg.latents, catalog.len(), &mut rng))
    }
}

fn degenerate_rows(m: &DMatrix<f64>) -> Vec<usize> {
    row_sums(m)
        .iter()
        .enumerate()
        .filter(|(_, s)| !(s.abs() >= MIN_ROW_SUM))
        .map(|(r, _)| r)
        .collect()
}

/// Trains an ACAE by mini-batch Adam with per-epoch seeded reshuffling.
pub fn fit_acae(
    corpus: &PoseCorpus,
    catalog: &JointCatalog,
    cfg: &TrainConfig,
    validation: Option<&PoseCorpus>,
) -> Result<(AcaeWeights, TrainLog)> {
    cfg.validate()?;
    corpus.check_catalog(catalog)?;
    if corpus.is_empty() {
        return Err(AcaeError::EmptyCorpus);
    }
    if !corpus.is_complete() {
        return Err(AcaeError::IncompleteInput);
    }
    if cfg.latents > catalog.len() {
        return Err(AcaeError::ConfigInvalid(format!(
            "{} latents exceed {} joints",
            cfg.latents,
            catalog.len()
        )));
    }
    let mut w = initial_weights(catalog, cfg)?;
    let weights = catalog.weights(cfg.head_weighting);
    let loss_cfg = cfg.loss_config();
    let mut state = AdamState::new(w.num_params());
    let mut log = TrainLog::default();
    let mut reinit_rng = rng_for(cfg.seed, "reinit");

    let k = corpus.len();
    let mut order: Vec<usize> = (0..k).collect();
    let mut cursor = k;
    let mut epoch: u64 = 0;
    let mut step = 0;
    while step < cfg.steps {
        if cursor + cfg.batch_size.min(k) > k {
            order.sort_unstable();
            order.shuffle(&mut rng_for(cfg.seed.wrapping_add(epoch), "shuffle"));
            epoch += 1;
            cursor = 0;
        }
        let b = cfg.batch_size.min(k);
        let batch: Vec<&Example> = order[cursor..cursor + b]
            .iter()
            .map(|&i| &corpus.examples[i])
            .collect();
        match crate::acae::batch_loss_and_gradient(&w, &batch, &weights, &loss_cfg) {
            Ok((terms, grad)) => {
                log.records.push(record(step, &terms, &loss_cfg));
                adam_step_weights(&mut w, &grad, &mut state, cfg.lr_at(step))?;
                cursor += b;
                step += 1;
            }
            Err(AcaeError::DegenerateRow { row, sum }) => {
                let mut events = Vec::new();
                for (decoder, m) in [(false, w.raw_enc()), (true, w.raw_dec())] {
                    for r in degenerate_rows(&m) {
                        events.push(ReinitEvent { step, decoder, row: r });
                    }
                }
                if log.reinits.len() + events.len() > MAX_REINITS || events.is_empty() {
                    return Err(AcaeError::DegenerateRow { row, sum });
                }
                for e in &events {
                    w.reinit_row(e.decoder, e.row, &mut reinit_rng);
                }
                log.reinits.extend(events);
            }
            Err(e) => return Err(e),
        }
    }
    if cfg.steps > 0 {
        w.renormalize()?;
    }
    if let Some(val) = validation {
        let ae = w.normalized()?;
        log.validation = Some(if cfg.use_projected_loss {
            mean_projected_error_px(&ae, val)?
        } else {
            mean_joint_error(&ae, val)?
        });
    }
    Ok((w, log))
}

fn record(step: usize, t: &AcaeLossTerms, cfg: &LossConfig) -> TrainRecord {
    TrainRecord {
        step,
        total: t.total,
        reconstr: if cfg.projected { t.reconstr_proj } else { t.reconstr },
        sparse: t.sparse,
    }
}

fn per_example_mean<F>(ae: &Autoencoder, corpus: &PoseCorpus, per_joint: F) -> Result<f64>
where
    F: Fn(&Example, usize, [f64; 3], [f64; 3]) -> f64 + Sync + Send,
{
    if corpus.is_empty() {
        return Err(AcaeError::EmptyCorpus);
    }
    if corpus.joints() != ae.joints() {
        return Err(AcaeError::ShapeMismatch(format!(
            "corpus has {} joints, model has {}",
            corpus.joints(),
            ae.joints()
        )));
    }
    if !corpus.is_complete() {
        return Err(AcaeError::IncompleteInput);
    }
    let refs: Vec<&Example> = corpus.examples.iter().collect();
    let chunks: Vec<&[&Example]> = refs.chunks(CHUNK).collect();
    let parts = par_map(&chunks, |chunk| {
        let p = stack_poses(chunk);
        let r = &ae.dec * (&ae.enc * &p);
        chunk
            .iter()
            .enumerate()
            .map(|(b, ex)| {
                let errs: Vec<f64> = (0..p.nrows())
                    .map(|j| {
                        let gt = [p[(j, 3 * b)], p[(j, 3 * b + 1)], p[(j, 3 * b + 2)]];
                        let rec = [r[(j, 3 * b)], r[(j, 3 * b + 1)], r[(j, 3 * b + 2)]];
                        per_joint(ex, j, gt, rec)
                    })
                    .collect();
                pairwise_mean(&errs)
            })
            .collect::<Vec<f64>>()
    });
    let all: Vec<f64> = parts.into_iter().flatten().collect();
    Ok(pairwise_mean(&all))
}

/// Mean per-joint Euclidean reconstruction error, mm.
pub fn mean_joint_error(ae: &Autoencoder, corpus: &PoseCorpus) -> Result<f64> {
    per_example_mean(ae, corpus, |_, _, p, r| {
        ((p[0] - r[0]).powi(2) + (p[1] - r[1]).powi(2) + (p[2] - r[2]).powi(2)).sqrt()
    })
}

fn pixel_error(ex: &Example, p: [f64; 3], r: [f64; 3]) -> f64 {
    let c = &ex.camera;
    let du = c.fx * (p[0] / p[2] - r[0] / r[2]);
    let dv = c.fy * (p[1] / p[2] - r[1] / r[2]);
    (du * du + dv * dv).sqrt()
}

/// Mean per-joint image-plane reconstruction error, px.
pub fn mean_projected_error_px(ae: &Autoencoder, corpus: &PoseCorpus) -> Result<f64> {
    per_example_mean(ae, corpus, |ex, _, p, r| pixel_error(ex, p, r))
}

/// Image-plane reconstruction error expressed in mm at each joint's true
/// depth: pixel error × `z / f`.
pub fn mean_projected_error_mm(ae: &Autoencoder, corpus: &PoseCorpus) -> Result<f64> {
    per_example_mean(ae, corpus, |ex, _, p, r| {
        let f = 0.5 * (ex.camera.fx + ex.camera.fy);
        pixel_error(ex, p, r) * p[2] / f
    })
}

/// `Σ_k P_k P_kᵀ` over the corpus (`J×J`).
pub fn second_moment(corpus: &PoseCorpus) -> Result<DMatrix<f64>> {
    if corpus.is_empty() {
        return Err(AcaeError::EmptyCorpus);
    }
    if !corpus.is_complete() {
        return Err(AcaeError::IncompleteInput);
    }
    let refs: Vec<&Example> = corpus.examples.iter().collect();
    let chunks: Vec<&[&Example]> = refs.chunks(CHUNK).collect();
    let parts = par_map(&chunks, |c| {
        let p = stack_poses(c);
        &p * p.transpose()
    });
    let j = corpus.joints();
    // Entry-wise pairwise reduction keeps the result independent of threads.
    Ok(DMatrix::from_fn(j, j, |r, c| {
        let xs: Vec<f64> = parts.iter().map(|m| m[(r, c)]).collect();
        pairwise_sum(&xs)
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderSolution {
    pub dec: DMatrix<f64>,
    /// The latent Gram matrix was rank-deficient and a ridge was added.
    pub regularized: bool,
}

/// Row-sum-constrained least-squares decoder for a fixed normalized encoder.
pub fn solve_decoder_least_squares(enc: &DMatrix<f64>, corpus: &PoseCorpus) -> Result<DecoderSolution> {
    let s = second_moment(corpus)?;
    solve_decoder_from_moment(enc, &s)
}

/// Same as [`solve_decoder_least_squares`] given `S = Σ P Pᵀ`. Each decoder
/// row solves `min ‖y − Xᵀd‖²` s.t. `1ᵀd = 1` through its KKT system.
pub fn solve_decoder_from_moment(enc: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DecoderSolution> {
    let (l, j) = enc.shape();
    if s.shape() != (j, j) {
        return Err(AcaeError::ShapeMismatch(format!(
            "encoder is {l}×{j}, moment matrix is {:?}",
            s.shape()
        )));
    }
    let es = enc * s;
    let mut gram = &es * enc.transpose();
    let eig = gram.clone().symmetric_eigen().eigenvalues;
    let (lo, hi) = (eig.min(), eig.max().max(0.0));
    let regularized = !(lo > 1e-10 * hi);
    if regularized {
        let ridge = 1e-8 * hi.max(1.0);
        for i in 0..l {
            gram[(i, i)] += ridge;
        }
    }
    let mut kkt = DMatrix::zeros(l + 1, l + 1);
    kkt.view_mut((0, 0), (l, l)).copy_from(&gram);
    for i in 0..l {
        kkt[(i, l)] = 1.0;
        kkt[(l, i)] = 1.0;
    }
    let mut rhs = DMatrix::zeros(l + 1, j);
    rhs.view_mut((0, 0), (l, j)).copy_from(&es);
    rhs.row_mut(l).fill(1.0);
    let sol = kkt
        .lu()
        .solve(&rhs)
        .ok_or_else(|| AcaeError::SingularSystem("constrained normal equations".into()))?;
    if sol.iter().any(|x| !x.is_finite()) {
        return Err(AcaeError::SingularSystem("non-finite decoder solution".into()));
    }
    Ok(DecoderSolution {
        dec: sol.rows(0, l).transpose(),
        regularized,
    })
}

/// Squared reconstruction error `Σ_k ‖P_k − M P_k‖²` from `S = Σ P Pᵀ`.
pub fn squared_loss_from_moment(ae: &Autoencoder, s: &DMatrix<f64>) -> f64 {
    let j = s.nrows();
    let resid = DMatrix::identity(j, j) - ae.round_trip_matrix();
    (&resid * s * resid.transpose()).trace()
}

/// Alternating least squares on the squared surrogate: the encoder step is
/// the decoder's pseudo-inverse, the decoder step is the constrained solve.
pub fn als_oracle(
    corpus: &PoseCorpus,
    latents: usize,
    seed: u64,
    max_iterations: usize,
) -> Result<Autoencoder> {
    let s = second_moment(corpus)?;
    let j = corpus.joints();
    let init = AcaeWeights::init_dense(latents, j, &mut rng_for(seed, "als-init"));
    let mut dec = normalize(&init.raw_dec())?;
    let mut enc = pinv(&dec)?;
    let mut prev = f64::INFINITY;
    for _ in 0..max_iterations {
        dec = solve_decoder_from_moment(&enc, &s)?.dec;
        enc = pinv(&dec)?;
        let loss = squared_loss_from_moment(&Autoencoder { enc: enc.clone(), dec: dec.clone() }, &s);
        if (prev - loss).abs() <= 1e-13 * prev.abs().max(1e-300) {
            break;
        }
        prev = loss;
    }
    Ok(Autoencoder { enc, dec })
}

fn pinv(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| AcaeError::SingularSystem(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElbowPoint {
    pub latents: usize,
    /// Mean projected joint error on the validation split, mm.
    pub validation_error: f64,
}

/// Fits one ACAE per latent count on a seeded 90% split and reports the
/// projected joint error on the remaining 10%.
pub fn elbow_curve(
    corpus: &PoseCorpus,
    catalog: &JointCatalog,
    latent_counts: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<ElbowPoint>> {
    if latent_counts.is_empty() {
        return Err(AcaeError::ConfigInvalid("empty latent-count list".into()));
    }
    let (train, val) = corpus.split(0.9, cfg.seed);
    latent_counts
        .iter()
        .map(|&latents| {
            let run = TrainConfig { latents, ..cfg.clone() };
            let (w, _) = fit_acae(&train, catalog, &run, None)?;
            Ok(ElbowPoint {
                latents,
                validation_error: mean_projected_error_mm(&w.normalized()?, &val)?,
            })
        })
        .collect()
}

pub fn write_elbow_csv(points: &[ElbowPoint], out: &mut impl Write) -> Result<()> {
    writeln!(out, "latents,validation_error_mm")?;
    for p in points {
        writeln!(out, "{},{}", p.latents, p.validation_error)?;
    }
    Ok(())
}
