//! Fine-tuning a pose estimator for cross-format consistency.
//!
//! The estimator is a linear 2D→3D lifter. It can carry a pose head (all `J`
//! joints) and/or a latent head (`L` latent points decoded by the frozen
//! ACAE), trained with one of four objectives:
//!
//! - `SeparateHeads`: pose loss on the labelled joints only.
//! - `ConsistencyRegularized`: adds `λ_cons ‖P̂ − W_dec W_enc P̂‖₁`.
//! - `DirectLatent`: predicts latents `Q̂` and applies the pose loss to `W_dec Q̂`.
//! - `Hybrid`: both heads, both pose losses, the consistency term on `P̂` and
//!   a student-teacher term `‖Q̂ − W_enc P̂‖₁` that does not reach `P̂`.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::acae::{sign, Autoencoder, LatentPose};
use crate::corpus::{mask_subsets, Example, GroundTruthMixing, PoseCorpus, SynthConfig};
use crate::error::{AcaeError, Result};
use crate::eval::{evaluate, MetricReport};
use crate::geometry::{CameraModel, Point3, PoseMatrix, Z_MIN};
use crate::reduce::{pairwise_mean, par_map};
use crate::seed::{derive_seed, rng_for};
use crate::skeleton::{build_catalog, preset, JointCatalog};
use crate::training::{adam_step_slices, fit_acae, AdamState, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseLossWeights {
    pub lambda_proj: f64,
    pub lambda_abs: f64,
    /// Depth beyond which absolute depth errors are scaled down, mm.
    pub abs_depth_cap: f64,
}

impl Default for PoseLossWeights {
    fn default() -> Self {
        Self {
            lambda_proj: 1.0,
            lambda_abs: 0.1,
            abs_depth_cap: 10_000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseLossTerms {
    pub meanrel: f64,
    pub proj: f64,
    pub abs: f64,
    pub total: f64,
}

fn pose_dims_match(pred: &PoseMatrix, gt: &PoseMatrix) -> Result<Vec<usize>> {
    if pred.len() != gt.len() {
        return Err(AcaeError::ShapeMismatch(format!(
            "prediction has {} joints, label {}",
            pred.len(),
            gt.len()
        )));
    }
    let idx: Vec<usize> = (0..gt.len()).filter(|&j| pred.valid[j] && gt.valid[j]).collect();
    if idx.is_empty() {
        return Err(AcaeError::NoValidJoints);
    }
    Ok(idx)
}

/// Pose loss terms and the gradient with respect to the predicted joints
/// (`J×3`, zero rows for excluded joints). Each term is averaged over the
/// jointly valid joints.
pub fn pose_loss_and_grad(
    pred: &PoseMatrix,
    gt: &PoseMatrix,
    cam: &CameraModel,
    w: &PoseLossWeights,
) -> Result<(PoseLossTerms, DMatrix<f64>)> {
    let idx = pose_dims_match(pred, gt)?;
    let n = idx.len() as f64;
    let mut grad = DMatrix::zeros(pred.len(), 3);

    let mp = idx.iter().map(|&j| pred.joints[j]).sum::<Point3>() / n;
    let mg = idx.iter().map(|&j| gt.joints[j]).sum::<Point3>() / n;
    let mut meanrel = Vec::with_capacity(idx.len());
    let mut sign_sum = Point3::zeros();
    let mut signs = Vec::with_capacity(idx.len());
    for &j in &idx {
        let r = (pred.joints[j] - mp) - (gt.joints[j] - mg);
        meanrel.push(r.abs().sum());
        let s = r.map(sign);
        sign_sum += s;
        signs.push(s);
    }
    let s_mean = sign_sum / n;
    for (&j, s) in idx.iter().zip(&signs) {
        for c in 0..3 {
            grad[(j, c)] += (s[c] - s_mean[c]) / n;
        }
    }

    let mut proj = Vec::with_capacity(idx.len());
    let mut abs = Vec::with_capacity(idx.len());
    for &j in &idx {
        let (p, g) = (pred.joints[j], gt.joints[j]);
        for (k, z) in [(j, p.z), (j, g.z)] {
            if !(z >= Z_MIN) {
                return Err(AcaeError::DepthTooSmall { joint: k, z, min: Z_MIN });
            }
        }
        let du = cam.project_point(&p) - cam.project_point(&g);
        proj.push(du.x.abs() + du.y.abs());
        let (ju, jv) = cam.projection_jacobian(&p);
        let gp = (ju * sign(du.x) + jv * sign(du.y)) * (w.lambda_proj / n);

        let s = (w.abs_depth_cap / g.z.abs()).min(1.0);
        let d = Point3::new(p.x - g.x, p.y - g.y, s * (p.z - g.z));
        abs.push(d.abs().sum());
        let ga = Point3::new(sign(d.x), sign(d.y), s * sign(d.z)) * (w.lambda_abs / n);
        for c in 0..3 {
            grad[(j, c)] += gp[c] + ga[c];
        }
    }
    let meanrel = pairwise_mean(&meanrel);
    let proj = pairwise_mean(&proj);
    let abs = pairwise_mean(&abs);
    Ok((
        PoseLossTerms {
            meanrel,
            proj,
            abs,
            total: meanrel + w.lambda_proj * proj + w.lambda_abs * abs,
        },
        grad,
    ))
}

pub fn pose_loss(pred: &PoseMatrix, gt: &PoseMatrix, cam: &CameraModel, w: &PoseLossWeights) -> Result<f64> {
    Ok(pose_loss_and_grad(pred, gt, cam, w)?.0.total)
}

fn complete_matrix(pose: &PoseMatrix, joints: usize) -> Result<DMatrix<f64>> {
    if !pose.is_complete() {
        return Err(AcaeError::IncompleteInput);
    }
    if pose.len() != joints {
        return Err(AcaeError::ShapeMismatch(format!(
            "pose has {} joints, model expects {joints}",
            pose.len()
        )));
    }
    Ok(pose.to_matrix())
}

/// `‖P̂ − W_dec W_enc P̂‖₁` and its gradient with respect to `P̂`.
pub fn consistency_loss_and_grad(pred: &PoseMatrix, frozen: &Autoencoder) -> Result<(f64, DMatrix<f64>)> {
    let p = complete_matrix(pred, frozen.joints())?;
    let resid = &p - &frozen.dec * (&frozen.enc * &p);
    let s = resid.map(sign);
    let grad = &s - frozen.enc.transpose() * (frozen.dec.transpose() * &s);
    Ok((resid.abs().sum(), grad))
}

pub fn consistency_loss(pred: &PoseMatrix, frozen: &Autoencoder) -> Result<f64> {
    let p = complete_matrix(pred, frozen.joints())?;
    Ok((&p - &frozen.dec * (&frozen.enc * &p)).abs().sum())
}

/// `‖Q̂ − W_enc P̂‖₁` with gradients `(∂/∂Q̂, ∂/∂P̂)`. The teacher side is
/// treated as a constant, so the second gradient is identically zero.
pub fn teacher_loss_and_grads(
    pred_latents: &LatentPose,
    pred_pose: &PoseMatrix,
    frozen: &Autoencoder,
) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    let p = complete_matrix(pred_pose, frozen.joints())?;
    if pred_latents.latents.shape() != (frozen.latents(), 3) {
        return Err(AcaeError::ShapeMismatch(format!(
            "latent prediction is {:?}, model has {} latents",
            pred_latents.latents.shape(),
            frozen.latents()
        )));
    }
    let resid = &pred_latents.latents - &frozen.enc * &p;
    Ok((resid.abs().sum(), resid.map(sign), DMatrix::zeros(p.nrows(), 3)))
}

pub fn teacher_loss(pred_latents: &LatentPose, pred_pose: &PoseMatrix, frozen: &Autoencoder) -> Result<f64> {
    Ok(teacher_loss_and_grads(pred_latents, pred_pose, frozen)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FinetuneVariant {
    SeparateHeads,
    ConsistencyRegularized { lambda_cons: f64 },
    DirectLatent,
    Hybrid { lambda_cons: f64, lambda_teach: f64 },
}

impl FinetuneVariant {
    pub fn name(&self) -> &'static str {
        match self {
            FinetuneVariant::SeparateHeads => "separate",
            FinetuneVariant::ConsistencyRegularized { .. } => "regularized",
            FinetuneVariant::DirectLatent => "latent",
            FinetuneVariant::Hybrid { .. } => "hybrid",
        }
    }

    pub fn lambda_cons(&self) -> f64 {
        match *self {
            FinetuneVariant::ConsistencyRegularized { lambda_cons } => lambda_cons,
            FinetuneVariant::Hybrid { lambda_cons, .. } => lambda_cons,
            _ => 0.0,
        }
    }

    pub fn lambda_teach(&self) -> f64 {
        match *self {
            FinetuneVariant::Hybrid { lambda_teach, .. } => lambda_teach,
            _ => 0.0,
        }
    }

    fn has_pose_head(&self) -> bool {
        !matches!(self, FinetuneVariant::DirectLatent)
    }

    fn has_latent_head(&self) -> bool {
        matches!(self, FinetuneVariant::DirectLatent | FinetuneVariant::Hybrid { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cons() >= 0.0 && self.lambda_teach() >= 0.0) {
            return Err(AcaeError::ConfigInvalid("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Affine map from standardized features to flattened `(point, coord)` outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Head {
    fn apply(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let y = &self.weight * x + &self.bias;
        DMatrix::from_row_slice(y.len() / 3, 3, y.as_slice())
    }
}

/// Linear lifter from observed 2D keypoints of `input_joints` to 3D outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLifter {
    pub input_joints: Vec<usize>,
    pub feature_mean: DVector<f64>,
    pub feature_scale: DVector<f64>,
    pub pose_head: Option<Head>,
    pub latent_head: Option<Head>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifterOutput {
    /// The pose used for evaluation: the pose head, or the decoded latents
    /// when a latent head exists.
    pub pose: PoseMatrix,
    pub latents: Option<LatentPose>,
}

/// Normalized image coordinates `(x/z, y/z)` of the input joints.
fn raw_features(ex: &Example, input_joints: &[usize]) -> DVector<f64> {
    let mut f = DVector::zeros(2 * input_joints.len());
    for (i, &j) in input_joints.iter().enumerate() {
        let p = ex.pose.joints[j];
        f[2 * i] = p.x / p.z;
        f[2 * i + 1] = p.y / p.z;
    }
    f
}

impl LinearLifter {
    pub fn features(&self, ex: &Example) -> DVector<f64> {
        let f = raw_features(ex, &self.input_joints);
        (f - &self.feature_mean).component_div(&self.feature_scale)
    }

    fn heads(&self, x: &DVector<f64>) -> (Option<DMatrix<f64>>, Option<DMatrix<f64>>) {
        (
            self.pose_head.as_ref().map(|h| h.apply(x)),
            self.latent_head.as_ref().map(|h| h.apply(x)),
        )
    }

    pub fn predict(&self, ex: &Example, frozen: &Autoencoder) -> LifterOutput {
        let x = self.features(ex);
        let (pose, lat) = self.heads(&x);
        match lat {
            Some(q) => LifterOutput {
                pose: PoseMatrix::from_matrix(&(&frozen.dec * &q)),
                latents: Some(LatentPose { latents: q }),
            },
            None => LifterOutput {
                pose: PoseMatrix::from_matrix(&pose.expect("lifter has a head")),
                latents: None,
            },
        }
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for h in [self.pose_head.as_mut(), self.latent_head.as_mut()].into_iter().flatten() {
            v.push(h.weight.as_mut_slice());
            v.push(h.bias.as_mut_slice());
        }
        v
    }

    fn num_params(&self) -> usize {
        [self.pose_head.as_ref(), self.latent_head.as_ref()]
            .into_iter()
            .flatten()
            .map(|h| h.weight.len() + h.bias.len())
            .sum()
    }
}

/// Inconsistency of one output in mm per joint. Outputs decoded from a single
/// latent set are measured against that decoding; pose-head outputs against
/// their own autoencoding.
pub fn inconsistency_mm(output: &LifterOutput, frozen: &Autoencoder) -> Result<f64> {
    let j = frozen.joints() as f64;
    match &output.latents {
        Some(q) => {
            let p = complete_matrix(&output.pose, frozen.joints())?;
            Ok((&p - &frozen.dec * &q.latents).abs().sum() / j)
        }
        None => Ok(consistency_loss(&output.pose, frozen)? / j),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifterConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub final_lr_fraction: f64,
    pub pose_weights: PoseLossWeights,
    /// Catalog format whose joints provide the 2D input.
    pub input_format: usize,
    pub seed: u64,
}

impl Default for LifterConfig {
    fn default() -> Self {
        Self {
            steps: 40_000,
            batch_size: 32,
            learning_rate: 2.0,
            final_lr_fraction: 1e-3,
            pose_weights: PoseLossWeights::default(),
            input_format: 0,
            seed: 0,
        }
    }
}

struct ExampleGrad {
    loss: f64,
    g_pose: Option<DMatrix<f64>>,
    g_lat: Option<DMatrix<f64>>,
}

fn example_objective(
    lifter: &LinearLifter,
    ex: &Example,
    x: &DVector<f64>,
    frozen: &Autoencoder,
    variant: &FinetuneVariant,
    w: &PoseLossWeights,
) -> Result<ExampleGrad> {
    let (pose_out, lat_out) = lifter.heads(x);
    let mut loss = 0.0;
    let mut g_pose = None;
    let mut g_lat = None;
    if let Some(p) = &pose_out {
        let pose = PoseMatrix::from_matrix(p);
        let (t, mut g) = pose_loss_and_grad(&pose, &ex.pose, &ex.camera, w)?;
        loss += t.total;
        let lc = variant.lambda_cons();
        if lc > 0.0 {
            let (c, gc) = consistency_loss_and_grad(&pose, frozen)?;
            loss += lc * c;
            g += gc * lc;
        }
        g_pose = Some(g);
    }
    if let Some(q) = &lat_out {
        let decoded = PoseMatrix::from_matrix(&(&frozen.dec * q));
        let (t, g) = pose_loss_and_grad(&decoded, &ex.pose, &ex.camera, w)?;
        loss += t.total;
        let mut gq = frozen.dec.transpose() * g;
        let lt = variant.lambda_teach();
        if lt > 0.0 {
            let teacher = PoseMatrix::from_matrix(pose_out.as_ref().expect("hybrid has a pose head"));
            let (tl, g_student, g_teacher) =
                teacher_loss_and_grads(&LatentPose { latents: q.clone() }, &teacher, frozen)?;
            loss += lt * tl;
            gq += g_student * lt;
            // The teacher gradient is zero by construction; keep the sum
            // explicit so the contract is visible here.
            if let Some(gp) = g_pose.as_mut() {
                *gp += g_teacher * lt;
            }
        }
        g_lat = Some(gq);
    }
    Ok(ExampleGrad { loss, g_pose, g_lat })
}

fn flat(m: &DMatrix<f64>) -> DVector<f64> {
    // Row-major flattening matching `Head::apply`.
    DVector::from_iterator(m.len(), (0..m.nrows()).flat_map(|r| (0..3).map(move |c| m[(r, c)])))
}

/// Mean objective over `batch` and its gradient, in the order of
/// `LinearLifter::param_slices_mut`.
fn batch_gradient(
    lifter: &LinearLifter,
    batch: &[&Example],
    frozen: &Autoencoder,
    variant: &FinetuneVariant,
    w: &PoseLossWeights,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = batch.len() as f64;
    let per = par_map(batch, |ex| {
        let x = lifter.features(ex);
        example_objective(lifter, ex, &x, frozen, variant, w).map(|g| (x, g))
    });
    let mut losses = Vec::with_capacity(batch.len());
    let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = [lifter.pose_head.as_ref(), lifter.latent_head.as_ref()]
        .into_iter()
        .flatten()
        .map(|h| (DMatrix::zeros(h.weight.nrows(), h.weight.ncols()), DVector::zeros(h.bias.len())))
        .collect();
    for item in per {
        let (x, eg) = item?;
        losses.push(eg.loss);
        for (slot, g) in grads.iter_mut().zip([eg.g_pose, eg.g_lat].into_iter().flatten()) {
            let gf = flat(&g) / n;
            slot.0.ger(1.0, &gf, &x, 1.0);
            slot.1 += gf;
        }
    }
    let out = grads
        .into_iter()
        .flat_map(|(gw, gb)| [gw.as_slice().to_vec(), gb.as_slice().to_vec()])
        .collect();
    Ok((pairwise_mean(&losses), out))
}

/// Initial lifter: zero weights, biases at the mean labelled pose (and its
/// encoding for the latent head).
pub fn init_lifter(
    corpus: &PoseCorpus,
    catalog: &JointCatalog,
    frozen: &Autoencoder,
    variant: &FinetuneVariant,
    cfg: &LifterConfig,
) -> Result<LinearLifter> {
    corpus.check_catalog(catalog)?;
    if cfg.input_format >= catalog.formats().len() {
        return Err(AcaeError::ConfigInvalid(format!("no input format {}", cfg.input_format)));
    }
    let input_joints = catalog.format_indices(cfg.input_format).to_vec();
    let feats: Vec<DVector<f64>> = corpus.examples.iter().map(|e| raw_features(e, &input_joints)).collect();
    let nf = 2 * input_joints.len();
    let k = feats.len() as f64;
    let mean = feats.iter().fold(DVector::zeros(nf), |a, f| a + f) / k;
    let scale = feats
        .iter()
        .fold(DVector::zeros(nf), |a: DVector<f64>, f| a + (f - &mean).map(|v| v * v))
        .map(|v| (v / k).sqrt().max(1e-12));

    let j = catalog.len();
    let mut sum = DMatrix::<f64>::zeros(j, 3);
    let mut count = vec![0usize; j];
    for ex in &corpus.examples {
        for (i, p) in ex.pose.valid_joints() {
            for c in 0..3 {
                sum[(i, c)] += p[c];
            }
            count[i] += 1;
        }
    }
    let overall = corpus
        .examples
        .iter()
        .filter_map(|e| e.pose.valid_mean())
        .sum::<Point3>()
        / k;
    let mean_pose = DMatrix::from_fn(j, 3, |r, c| {
        if count[r] > 0 {
            sum[(r, c)] / count[r] as f64
        } else {
            overall[c]
        }
    });
    let head = |bias: DVector<f64>| Head {
        weight: DMatrix::zeros(bias.len(), nf),
        bias,
    };
    Ok(LinearLifter {
        input_joints,
        feature_mean: mean,
        feature_scale: scale,
        pose_head: variant.has_pose_head().then(|| head(flat(&mean_pose))),
        latent_head: variant.has_latent_head().then(|| head(flat(&(&frozen.enc * &mean_pose)))),
    })
}

/// Trains a lifter by mini-batch Adam on the variant's objective. Returns the
/// lifter and the per-step batch objective.
pub fn train_lifter(
    corpus: &PoseCorpus,
    catalog: &JointCatalog,
    frozen: &Autoencoder,
    variant: &FinetuneVariant,
    cfg: &LifterConfig,
) -> Result<(LinearLifter, Vec<f64>)> {
    variant.validate()?;
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) || !(cfg.final_lr_fraction > 0.0) {
        return Err(AcaeError::ConfigInvalid("invalid lifter optimizer settings".into()));
    }
    if frozen.joints() != catalog.len() {
        return Err(AcaeError::CatalogMismatch("frozen model and catalog differ in J".into()));
    }
    let mut lifter = init_lifter(corpus, catalog, frozen, variant, cfg)?;
    let mut state = AdamState::new(lifter.num_params());
    let k = corpus.len();
    let b = cfg.batch_size.min(k);
    let mut order: Vec<usize> = (0..k).collect();
    let mut cursor = k;
    let mut epoch = 0u64;
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor + b > k {
            order.sort_unstable();
            order.shuffle(&mut rng_for(cfg.seed.wrapping_add(epoch), "lifter-shuffle"));
            epoch += 1;
            cursor = 0;
        }
        let batch: Vec<&Example> = order[cursor..cursor + b].iter().map(|&i| &corpus.examples[i]).collect();
        cursor += b;
        let (loss, grads) = batch_gradient(&lifter, &batch, frozen, variant, &cfg.pose_weights)?;
        curve.push(loss);
        let t = if cfg.steps > 1 { step as f64 / (cfg.steps - 1) as f64 } else { 0.0 };
        let lr = cfg.learning_rate * cfg.final_lr_fraction.powf(t);
        let g: Vec<&[f64]> = grads.iter().map(|v| v.as_slice()).collect();
        adam_step_slices(&mut lifter.param_slices_mut(), &g, &mut state, lr)?;
    }
    Ok((lifter, curve))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub variant: String,
    pub lambda_cons: f64,
    pub lambda_teach: f64,
    pub mpjpe: f64,
    pub pmpjpe: f64,
    pub pck100: f64,
    pub cps200: f64,
    pub inconsistency_mm: f64,
}

/// Metrics of a trained lifter on fully labelled examples.
pub fn evaluate_lifter(
    lifter: &LinearLifter,
    frozen: &Autoencoder,
    variant: &FinetuneVariant,
    test: &PoseCorpus,
    root: usize,
) -> Result<VariantMetrics> {
    let outputs: Vec<LifterOutput> = par_map(&test.examples, |ex| lifter.predict(ex, frozen));
    let preds: Vec<PoseMatrix> = outputs.iter().map(|o| o.pose.clone()).collect();
    let gts: Vec<PoseMatrix> = test.examples.iter().map(|e| e.pose.clone()).collect();
    let report: MetricReport = evaluate(&preds, &gts, root)?;
    let inc = par_map(&outputs, |o| inconsistency_mm(o, frozen))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(VariantMetrics {
        variant: variant.name().into(),
        lambda_cons: variant.lambda_cons(),
        lambda_teach: variant.lambda_teach(),
        mpjpe: report.mpjpe,
        pmpjpe: report.pmpjpe,
        pck100: report.pck100,
        cps200: report.cps200,
        inconsistency_mm: pairwise_mean(&inc),
    })
}

/// Mean inconsistency of the lifter's outputs over a corpus.
pub fn mean_inconsistency(lifter: &LinearLifter, frozen: &Autoencoder, corpus: &PoseCorpus) -> Result<f64> {
    let inc = par_map(&corpus.examples, |ex| inconsistency_mm(&lifter.predict(ex, frozen), frozen))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(pairwise_mean(&inc))
}

pub fn write_metrics_csv(rows: &[VariantMetrics], out: &mut impl Write) -> Result<()> {
    writeln!(out, "variant,lambda_cons,lambda_teach,mpjpe,pmpjpe,pck100,cps200,inconsistency_mm")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.variant, r.lambda_cons, r.lambda_teach, r.mpjpe, r.pmpjpe, r.pck100, r.cps200, r.inconsistency_mm
        )?;
    }
    Ok(())
}

/// Settings for the two-source demonstration: one source labels only the
/// first catalog format and sees mostly frontal poses, the other labels only
/// the second format and sees mostly rear views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyDemoConfig {
    pub formats: String,
    pub planted_latents: usize,
    pub noise_sigma: f64,
    pub k_per_source: usize,
    pub k_test: usize,
    pub acae: TrainConfig,
    pub lifter: LifterConfig,
    pub lambda_cons: f64,
    pub lambda_teach: f64,
    pub seed: u64,
}

impl Default for ConsistencyDemoConfig {
    fn default() -> Self {
        Self {
            formats: "demo2".into(),
            planted_latents: 16,
            noise_sigma: 5.0,
            k_per_source: 1500,
            k_test: 500,
            acae: TrainConfig {
                latents: 16,
                learning_rate: 1e-2,
                final_lr_fraction: 1e-3,
                steps: 10_000,
                ..TrainConfig::default()
            },
            lifter: LifterConfig::default(),
            lambda_cons: 1.0,
            lambda_teach: 1.0,
            seed: 0,
        }
    }
}

pub struct DemoData {
    pub catalog: JointCatalog,
    pub mixing: GroundTruthMixing,
    /// Complete training poses (the pseudo-ground truth for the ACAE).
    pub train_full: PoseCorpus,
    /// The same poses with each source's labels restricted to its format.
    pub train_masked: PoseCorpus,
    pub test: PoseCorpus,
}

pub fn demo_data(cfg: &ConsistencyDemoConfig) -> Result<DemoData> {
    let catalog = build_catalog(&preset(&cfg.formats)?)?;
    if catalog.formats().len() < 2 {
        return Err(AcaeError::ConfigInvalid("the demo needs two skeleton formats".into()));
    }
    let mixing = GroundTruthMixing::generate(&catalog, cfg.planted_latents, derive_seed(cfg.seed, "demo-mixing"))?;
    let base = SynthConfig {
        latent_count: cfg.planted_latents,
        noise_sigma: cfg.noise_sigma,
        seed: derive_seed(cfg.seed, "demo-examples"),
        ..SynthConfig::default()
    };
    let front = mixing.sample(&SynthConfig {
        k: cfg.k_per_source,
        yaw_range_deg: (-60.0, 60.0),
        tag: "front".into(),
        ..base.clone()
    })?;
    let back = mixing.sample(&SynthConfig {
        k: cfg.k_per_source,
        yaw_range_deg: (120.0, 240.0),
        tag: "back".into(),
        ..base.clone()
    })?;
    let test = mixing.sample(&SynthConfig {
        k: cfg.k_test,
        yaw_range_deg: (-180.0, 180.0),
        tag: "test".into(),
        ..base
    })?;
    let train_full = front.concat(back)?;
    let names: Vec<String> = catalog.formats().iter().map(|f| f.name.clone()).collect();
    let mut policy = BTreeMap::new();
    policy.insert("front".to_string(), vec![names[0].clone()]);
    policy.insert("back".to_string(), vec![names[1].clone()]);
    let train_masked = mask_subsets(&train_full, &catalog, &policy)?;
    Ok(DemoData {
        catalog,
        mixing,
        train_full,
        train_masked,
        test,
    })
}

pub fn demo_variants(cfg: &ConsistencyDemoConfig) -> [FinetuneVariant; 4] {
    [
        FinetuneVariant::SeparateHeads,
        FinetuneVariant::ConsistencyRegularized { lambda_cons: cfg.lambda_cons },
        FinetuneVariant::DirectLatent,
        FinetuneVariant::Hybrid {
            lambda_cons: cfg.lambda_cons,
            lambda_teach: cfg.lambda_teach,
        },
    ]
}

/// Fits the frozen ACAE on the complete training poses.
pub fn demo_frozen_model(data: &DemoData, cfg: &ConsistencyDemoConfig) -> Result<Autoencoder> {
    let acae_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, "demo-acae"),
        ..cfg.acae.clone()
    };
    fit_acae(&data.train_full, &data.catalog, &acae_cfg, None)?.0.normalized()
}

/// Trains every variant on the masked training data and evaluates on the
/// fully labelled test poses.
pub fn run_consistency_demo(cfg: &ConsistencyDemoConfig, variants: &[FinetuneVariant]) -> Result<Vec<VariantMetrics>> {
    let data = demo_data(cfg)?;
    let frozen = demo_frozen_model(&data, cfg)?;
    let lifter_cfg = LifterConfig {
        seed: derive_seed(cfg.seed, "demo-lifter"),
        ..cfg.lifter.clone()
    };
    let root = data.catalog.default_root();
    variants
        .iter()
        .map(|v| {
            let (lifter, _) = train_lifter(&data.train_masked, &data.catalog, &frozen, v, &lifter_cfg)?;
            evaluate_lifter(&lifter, &frozen, v, &data.test, root)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acae::{normalize, AcaeWeights};
    use crate::geometry::{apply_rigid, RigidTransform};
    use nalgebra::Vector3;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraModel {
        CameraModel::new(1000.0, 1100.0, 500.0, 480.0).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng, j: usize) -> PoseMatrix {
        PoseMatrix::complete(
            (0..j)
                .map(|_| Point3::new(rng.random_range(-500.0..500.0), rng.random_range(-900.0..900.0), rng.random_range(3000.0..6000.0)))
                .collect(),
        )
    }

    fn jitter(rng: &mut ChaCha8Rng, p: &PoseMatrix, s: f64) -> PoseMatrix {
        let mut out = p.clone();
        for q in out.joints.iter_mut() {
            *q += Point3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
        }
        out
    }

    fn random_ae(rng: &mut ChaCha8Rng, l: usize, j: usize) -> Autoencoder {
        let enc = normalize(&DMatrix::from_fn(l, j, |_, _| rng.random_range(-0.3..1.0))).unwrap();
        let dec = normalize(&DMatrix::from_fn(j, l, |_, _| rng.random_range(-0.3..1.0))).unwrap();
        Autoencoder { enc, dec }
    }

    // Independent scalar implementation of the pose loss.
    fn oracle_pose_loss(pred: &PoseMatrix, gt: &PoseMatrix, cam: &CameraModel, w: &PoseLossWeights) -> f64 {
        let idx: Vec<usize> = (0..gt.len()).filter(|&j| gt.valid[j] && pred.valid[j]).collect();
        let n = idx.len() as f64;
        let mut mp = [0.0; 3];
        let mut mg = [0.0; 3];
        for &j in &idx {
            for c in 0..3 {
                mp[c] += pred.joints[j][c] / n;
                mg[c] += gt.joints[j][c] / n;
            }
        }
        let (mut rel, mut proj, mut abs) = (0.0, 0.0, 0.0);
        for &j in &idx {
            let (p, g) = (pred.joints[j], gt.joints[j]);
            for c in 0..3 {
                rel += ((p[c] - mp[c]) - (g[c] - mg[c])).abs();
            }
            proj += (cam.fx * p.x / p.z - cam.fx * g.x / g.z).abs() + (cam.fy * p.y / p.z - cam.fy * g.y / g.z).abs();
            let s = if g.z.abs() > w.abs_depth_cap { w.abs_depth_cap / g.z.abs() } else { 1.0 };
            abs += (p.x - g.x).abs() + (p.y - g.y).abs() + (s * p.z - s * g.z).abs();
        }
        rel / n + w.lambda_proj * proj / n + w.lambda_abs * abs / n
    }

    #[test]
    fn pose_loss_basic_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_pose(&mut rng, 10);
        let w = PoseLossWeights::default();
        assert_eq!(pose_loss(&g, &g, &cam(), &w).unwrap(), 0.0);
        let shifted = g.translated(&Point3::new(30.0, -10.0, 50.0));
        let (t, _) = pose_loss_and_grad(&shifted, &g, &cam(), &w).unwrap();
        assert!(t.meanrel < 1e-10);
        assert!(t.abs > 0.0);
        let mut none = g.clone();
        none.valid.iter_mut().for_each(|v| *v = false);
        assert!(matches!(pose_loss(&g, &none, &cam(), &w), Err(AcaeError::NoValidJoints)));
    }

    #[test]
    fn pose_loss_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = PoseLossWeights { abs_depth_cap: 4500.0, ..PoseLossWeights::default() };
        for _ in 0..100 {
            let g0 = random_pose(&mut rng, 12);
            let mut g = g0.clone();
            for v in g.valid.iter_mut() {
                *v = rng.random::<f64>() > 0.3;
            }
            g.valid[0] = true;
            let p = jitter(&mut rng, &g0, 200.0);
            let a = pose_loss(&p, &g, &cam(), &w).unwrap();
            let b = oracle_pose_loss(&p, &g, &cam(), &w);
            assert!((a - b).abs() < 1e-12 * b.max(1.0), "{a} vs {b}");
        }
    }

    fn fd_check(f: impl Fn(&PoseMatrix) -> f64, p: &PoseMatrix, grad: &DMatrix<f64>) {
        let h = 1e-4;
        for j in 0..p.len() {
            for c in 0..3 {
                let mut a = p.clone();
                let mut b = p.clone();
                a.joints[j][c] += h;
                b.joints[j][c] -= h;
                let fd = (f(&a) - f(&b)) / (2.0 * h);
                let g = grad[(j, c)];
                assert!((fd - g).abs() <= 1e-5 * g.abs().max(1e-3), "joint {j} coord {c}: fd {fd} analytic {g}");
            }
        }
    }

    #[test]
    fn pose_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = PoseLossWeights { abs_depth_cap: 4000.0, ..PoseLossWeights::default() };
        for _ in 0..10 {
            let mut g = random_pose(&mut rng, 8);
            g.valid[3] = false;
            let p = jitter(&mut rng, &g, 300.0);
            let (_, grad) = pose_loss_and_grad(&p, &g, &cam(), &w).unwrap();
            assert!(grad.row(3).iter().all(|&x| x == 0.0));
            fd_check(|q| pose_loss(q, &g, &cam(), &w).unwrap(), &p, &grad);
        }
    }

    #[test]
    fn consistency_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_pose(&mut rng, 9);
        let id = AcaeWeights::identity(9).normalized().unwrap();
        assert_eq!(consistency_loss(&p, &id).unwrap(), 0.0);

        // Random instance against a scalar loop.
        let ae = random_ae(&mut rng, 4, 9);
        let mut expected = 0.0;
        for j in 0..9 {
            for c in 0..3 {
                let mut r = 0.0;
                for l in 0..4 {
                    let mut q = 0.0;
                    for i in 0..9 {
                        q += ae.enc[(l, i)] * p.joints[i][c];
                    }
                    r += ae.dec[(j, l)] * q;
                }
                expected += (p.joints[j][c] - r).abs();
            }
        }
        assert!((consistency_loss(&p, &ae).unwrap() - expected).abs() < 1e-12 * expected);

        let (_, grad) = consistency_loss_and_grad(&p, &ae).unwrap();
        fd_check(|q| consistency_loss(q, &ae).unwrap(), &p, &grad);

        let mut masked = p.clone();
        masked.valid[2] = false;
        assert!(matches!(consistency_loss(&masked, &ae), Err(AcaeError::IncompleteInput)));
    }

    #[test]
    fn fixed_point_of_round_trip_has_zero_consistency_loss() {
        // Positive weights make W_dec W_enc a positive stochastic matrix, so
        // iterating it converges.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = normalize(&DMatrix::from_fn(3, 7, |_, _| rng.random_range(0.1..1.0))).unwrap();
        let dec = normalize(&DMatrix::from_fn(7, 3, |_, _| rng.random_range(0.1..1.0))).unwrap();
        let ae = Autoencoder { enc, dec };
        let m = ae.round_trip_matrix();
        let mut p = random_pose(&mut rng, 7).to_matrix();
        for _ in 0..500 {
            p = &m * &p;
        }
        let fixed = PoseMatrix::from_matrix(&p);
        assert!(consistency_loss(&fixed, &ae).unwrap() < 1e-9);
        let inc = inconsistency_mm(&LifterOutput { pose: fixed, latents: None }, &ae).unwrap();
        assert!(inc < 1e-9);
    }

    #[test]
    fn teacher_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ae = random_ae(&mut rng, 4, 9);
        let p = random_pose(&mut rng, 9);
        let q = LatentPose { latents: &ae.enc * p.to_matrix() };
        assert_eq!(teacher_loss(&q, &p, &ae).unwrap(), 0.0);

        let q2 = LatentPose { latents: q.latents.map(|x| x + rng.random_range(-50.0..50.0)) };
        let mut expected = 0.0;
        for l in 0..4 {
            for c in 0..3 {
                let t: f64 = (0..9).map(|i| ae.enc[(l, i)] * p.joints[i][c]).sum();
                expected += (q2.latents[(l, c)] - t).abs();
            }
        }
        let (v, gq, gp) = teacher_loss_and_grads(&q2, &p, &ae).unwrap();
        assert!((v - expected).abs() < 1e-12 * expected);
        assert!(gp.iter().all(|&x| x == 0.0));
        // Student gradient by finite differences.
        let h = 1e-5;
        for l in 0..4 {
            for c in 0..3 {
                let mut a = q2.clone();
                let mut b = q2.clone();
                a.latents[(l, c)] += h;
                b.latents[(l, c)] -= h;
                let fd = (teacher_loss(&a, &p, &ae).unwrap() - teacher_loss(&b, &p, &ae).unwrap()) / (2.0 * h);
                assert!((fd - gq[(l, c)]).abs() < 1e-6);
            }
        }
        let bad = LatentPose { latents: DMatrix::zeros(3, 3) };
        assert!(matches!(teacher_loss(&bad, &p, &ae), Err(AcaeError::ShapeMismatch(_))));
    }

    proptest! {
        #[test]
        fn consistency_residual_is_rigid_covariant(seed in 0u64..10_000) {
            // The residual rotates with the pose and ignores translation. The
            // entrywise l1 of a rotated residual is unchanged for signed axis
            // permutations and translations.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ae = random_ae(&mut rng, 4, 8);
            let p = random_pose(&mut rng, 8);
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0);
            let t = RigidTransform::from_axis_angle(axis, rng.random_range(-3.0..3.0), Vector3::new(10.0, -300.0, 50.0));
            let m = ae.round_trip_matrix();
            let resid = |q: &PoseMatrix| { let x = q.to_matrix(); &x - &m * &x };
            let r0 = resid(&p);
            let r1 = resid(&apply_rigid(&p, &t));
            let rot = DMatrix::from_column_slice(3, 3, t.rotation().transpose().as_slice());
            let scale = r0.abs().max().max(1.0);
            prop_assert!((r1 - &r0 * rot).abs().max() < 1e-9 * scale);

            let a = consistency_loss(&p, &ae).unwrap();
            let quarter = RigidTransform::from_axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2, Vector3::new(-40.0, 7.0, 900.0));
            let b = consistency_loss(&apply_rigid(&p, &quarter), &ae).unwrap();
            prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
        }

        #[test]
        fn meanrel_is_translation_invariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_pose(&mut rng, 8);
            let p = jitter(&mut rng, &g, 100.0);
            let w = PoseLossWeights::default();
            let base = pose_loss_and_grad(&p, &g, &cam(), &w).unwrap().0.meanrel;
            let d1 = Point3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
            let d2 = Point3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
            for (a, b) in [(p.translated(&d1), g.clone()), (p.clone(), g.translated(&d2)), (p.translated(&d1), g.translated(&d1))] {
                let m = pose_loss_and_grad(&a, &b, &cam(), &w).unwrap().0.meanrel;
                prop_assert!((m - base).abs() < 1e-10 * base.max(1.0));
            }
        }
    }

    fn small_demo() -> (DemoData, Autoencoder, ConsistencyDemoConfig) {
        let cfg = ConsistencyDemoConfig {
            k_per_source: 200,
            k_test: 50,
            acae: TrainConfig { steps: 2000, ..ConsistencyDemoConfig::default().acae },
            lifter: LifterConfig { steps: 300, ..LifterConfig::default() },
            seed: 3,
            ..ConsistencyDemoConfig::default()
        };
        let data = demo_data(&cfg).unwrap();
        let frozen = demo_frozen_model(&data, &cfg).unwrap();
        (data, frozen, cfg)
    }

    #[test]
    fn demo_data_masks_each_source_to_its_format() {
        let (data, _, _) = small_demo();
        for ex in &data.train_masked.examples {
            let f = if ex.tag == "front" { 0 } else { 1 };
            assert_eq!(ex.pose.valid_count(), data.catalog.formats()[f].len());
        }
        assert!(data.test.is_complete());
    }

    #[test]
    fn teacher_term_does_not_reach_pose_head() {
        let (data, frozen, cfg) = small_demo();
        let batch: Vec<&Example> = data.train_masked.examples.iter().take(16).collect();
        let a = FinetuneVariant::Hybrid { lambda_cons: 1.0, lambda_teach: 0.0 };
        let b = FinetuneVariant::Hybrid { lambda_cons: 1.0, lambda_teach: 5.0 };
        let mut lifter = init_lifter(&data.train_masked, &data.catalog, &frozen, &a, &cfg.lifter).unwrap();
        // Move away from the zero-weight start so outputs vary per example.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in lifter.param_slices_mut() {
            s.iter_mut().for_each(|x| *x += rng.random_range(-20.0..20.0));
        }
        let (_, ga) = batch_gradient(&lifter, &batch, &frozen, &a, &cfg.lifter.pose_weights).unwrap();
        let (_, gb) = batch_gradient(&lifter, &batch, &frozen, &b, &cfg.lifter.pose_weights).unwrap();
        // Slices: pose W, pose b, latent W, latent b.
        assert_eq!(ga[0], gb[0]);
        assert_eq!(ga[1], gb[1]);
        assert_ne!(ga[2], gb[2]);
    }

    #[test]
    fn latent_outputs_are_consistent_by_construction() {
        let (data, frozen, cfg) = small_demo();
        for v in [FinetuneVariant::DirectLatent, FinetuneVariant::Hybrid { lambda_cons: 1.0, lambda_teach: 1.0 }] {
            let (lifter, curve) = train_lifter(&data.train_masked, &data.catalog, &frozen, &v, &cfg.lifter).unwrap();
            assert_eq!(curve.len(), cfg.lifter.steps);
            let m = evaluate_lifter(&lifter, &frozen, &v, &data.test, data.catalog.default_root()).unwrap();
            assert!(m.inconsistency_mm.abs() < 1e-9);
        }
    }

    #[test]
    fn lifter_training_is_deterministic() {
        let (data, frozen, cfg) = small_demo();
        let v = FinetuneVariant::ConsistencyRegularized { lambda_cons: 1.0 };
        let a = train_lifter(&data.train_masked, &data.catalog, &frozen, &v, &cfg.lifter).unwrap();
        let b = train_lifter(&data.train_masked, &data.catalog, &frozen, &v, &cfg.lifter).unwrap();
        assert_eq!(a, b);
        let n = a.1.len();
        let first: f64 = a.1[..50].iter().sum();
        let last: f64 = a.1[n - 50..].iter().sum();
        assert!(last < first);
    }

    #[test]
    fn metrics_csv_schema() {
        let rows = vec![VariantMetrics {
            variant: "separate".into(),
            lambda_cons: 0.0,
            lambda_teach: 0.0,
            mpjpe: 1.0,
            pmpjpe: 1.0,
            pck100: 50.0,
            cps200: 10.0,
            inconsistency_mm: 3.0,
        }];
        let mut out = Vec::new();
        write_metrics_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("variant,lambda_cons,lambda_teach,mpjpe,pmpjpe,pck100,cps200,inconsistency_mm\n"));
        assert_eq!(text.lines().count(), 2);
    }
}
