//! Central finite-difference check of the analytic ACAE loss gradient.
//!
//! The reference loss is evaluated independently of the training code in
//! double-double arithmetic (about 106 significand bits), so the finite
//! difference carries no visible rounding error even where a gradient
//! coordinate is many orders of magnitude below the loss itself.
//!
//! The losses are piecewise smooth: ℓ1 terms have kinks where a residual or a
//! normalized weight changes sign. A coordinate whose ±step interval crosses
//! such a kink has no meaningful finite difference and is reported as
//! skipped rather than compared.

use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::acae::{loss_and_gradient, AcaeWeights, LossConfig};
use crate::corpus::PoseCorpus;
use crate::error::{AcaeError, Result};

/// Unevaluated sum `hi + lo` with `|lo| ≤ ulp(hi)/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

impl Dd {
    const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    fn from(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    fn sign(self) -> i8 {
        if self.hi > 0.0 || (self.hi == 0.0 && self.lo > 0.0) {
            1
        } else if self.hi < 0.0 || (self.hi == 0.0 && self.lo < 0.0) {
            -1
        } else {
            0
        }
    }

    fn abs(self) -> Dd {
        if self.sign() < 0 {
            -self
        } else {
            self
        }
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let r = quick_two_sum(s, e + t);
        quick_two_sum(r.hi, r.lo + f)
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + -b
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let p = self.hi * b.hi;
        let e = self.hi.mul_add(b.hi, -p);
        quick_two_sum(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b * Dd::from(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Dd::from(q2);
        let q3 = r.hi / b.hi;
        quick_two_sum(q1, q2) + Dd::from(q3)
    }
}

type DdMat = Vec<Vec<Dd>>;

fn to_dd(m: &DMatrix<f64>) -> DdMat {
    (0..m.nrows()).map(|r| (0..m.ncols()).map(|c| Dd::from(m[(r, c)])).collect()).collect()
}

fn normalize_dd(m: &DdMat) -> Result<DdMat> {
    m.iter()
        .enumerate()
        .map(|(r, row)| {
            let s = row.iter().fold(Dd::ZERO, |a, &x| a + x);
            if s.sign() == 0 {
                return Err(AcaeError::DegenerateRow { row: r, sum: 0.0 });
            }
            Ok(row.iter().map(|&x| x / s).collect())
        })
        .collect()
}

/// Total loss and the sign pattern of every ℓ1 argument, in double-double.
fn reference_loss(
    enc: &DdMat,
    dec: &DdMat,
    corpus: &PoseCorpus,
    loss_weights: &[f64],
    cfg: &LossConfig,
) -> Result<(Dd, Vec<i8>)> {
    let a = normalize_dd(enc)?;
    let d = normalize_dd(dec)?;
    let (l, j) = (a.len(), d.len());
    let mut signs = Vec::new();
    let mut total = Dd::ZERO;
    for ex in &corpus.examples {
        if !ex.pose.is_complete() || ex.pose.len() != j {
            return Err(AcaeError::IncompleteInput);
        }
        let p: Vec<[Dd; 3]> = ex
            .pose
            .joints
            .iter()
            .map(|q| [Dd::from(q.x), Dd::from(q.y), Dd::from(q.z)])
            .collect();
        let mut lat = vec![[Dd::ZERO; 3]; l];
        for (li, row) in a.iter().enumerate() {
            for (i, &w) in row.iter().enumerate() {
                for c in 0..3 {
                    lat[li][c] = lat[li][c] + w * p[i][c];
                }
            }
        }
        let mut example = Dd::ZERO;
        for (jj, row) in d.iter().enumerate() {
            let mut rec = [Dd::ZERO; 3];
            for (li, &w) in row.iter().enumerate() {
                for c in 0..3 {
                    rec[c] = rec[c] + w * lat[li][c];
                }
            }
            let mut term = Dd::ZERO;
            if cfg.projected {
                let cam = &ex.camera;
                let f = [Dd::from(cam.fx), Dd::from(cam.fy)];
                for c in 0..2 {
                    let diff = f[c] * p[jj][c] / p[jj][2] - f[c] * rec[c] / rec[2];
                    signs.push(diff.sign());
                    term = term + diff.abs();
                }
            } else {
                for c in 0..3 {
                    let diff = p[jj][c] - rec[c];
                    signs.push(diff.sign());
                    term = term + diff.abs();
                }
            }
            example = example + Dd::from(loss_weights[jj]) * term;
        }
        total = total + example;
    }
    let mut loss = total / Dd::from(corpus.len() as f64);
    if cfg.lambda_sparse > 0.0 {
        let mut sparse = Dd::ZERO;
        for x in a.iter().chain(d.iter()).flatten() {
            signs.push(x.sign());
            sparse = sparse + x.abs();
        }
        loss = loss + Dd::from(cfg.lambda_sparse) * sparse;
    }
    Ok((loss, signs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSettings {
    pub step: f64,
    /// Coordinates with smaller analytic magnitude are not compared.
    pub min_magnitude: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            step: 1e-5,
            min_magnitude: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub parameters: usize,
    pub compared: usize,
    pub skipped_small: usize,
    pub skipped_kink: usize,
    pub max_relative_error: f64,
    /// `(index, analytic, finite difference)` of the worst compared coordinate.
    pub worst: Option<(usize, f64, f64)>,
    /// Training-code loss at the unperturbed point.
    pub loss: f64,
    /// Reference loss minus `loss`.
    pub loss_discrepancy: f64,
}

/// Positions in the assembled `(encoder, decoder)` matrices that parameter
/// `index` occupies. Shared chiral storage maps one parameter to several.
fn footprint(w: &AcaeWeights, index: usize) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut bumped = w.clone();
    let mut k = index;
    for s in bumped.param_slices_mut() {
        if k < s.len() {
            s[k] += 1.0;
            break;
        }
        k -= s.len();
    }
    let diff = |a: DMatrix<f64>, b: DMatrix<f64>| -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for c in 0..a.ncols() {
            for r in 0..a.nrows() {
                if a[(r, c)] != b[(r, c)] {
                    out.push((r, c));
                }
            }
        }
        out
    };
    (diff(bumped.raw_enc(), w.raw_enc()), diff(bumped.raw_dec(), w.raw_dec()))
}

pub fn check_gradient(
    w: &AcaeWeights,
    corpus: &PoseCorpus,
    loss_weights: &[f64],
    cfg: &LossConfig,
    settings: &GradCheckSettings,
) -> Result<GradCheckReport> {
    let (terms, grad) = loss_and_gradient(w, corpus, loss_weights, cfg)?;
    let analytic: Vec<f64> = grad.param_slices().concat();
    let enc = to_dd(&w.raw_enc());
    let dec = to_dd(&w.raw_dec());
    let (base_loss, base) = reference_loss(&enc, &dec, corpus, loss_weights, cfg)?;
    let h = Dd::from(settings.step);
    let mut report = GradCheckReport {
        parameters: analytic.len(),
        compared: 0,
        skipped_small: 0,
        skipped_kink: 0,
        max_relative_error: 0.0,
        worst: None,
        loss: terms.total,
        loss_discrepancy: (base_loss - Dd::from(terms.total)).to_f64(),
    };
    for (i, &g) in analytic.iter().enumerate() {
        if g.abs() <= settings.min_magnitude {
            report.skipped_small += 1;
            continue;
        }
        let (fe, fd_pos) = footprint(w, i);
        let shifted = |delta: Dd| {
            let (mut e, mut d) = (enc.clone(), dec.clone());
            for &(r, c) in &fe {
                e[r][c] = e[r][c] + delta;
            }
            for &(r, c) in &fd_pos {
                d[r][c] = d[r][c] + delta;
            }
            reference_loss(&e, &d, corpus, loss_weights, cfg)
        };
        let (fp, sp) = shifted(h)?;
        let (fm, sm) = shifted(-h)?;
        if sp != base || sm != base {
            report.skipped_kink += 1;
            continue;
        }
        let fd = ((fp - fm) / (h + h)).to_f64();
        let rel = (fd - g).abs() / g.abs();
        report.compared += 1;
        if rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst = Some((i, g, fd));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn double_double_resolves_below_f64_precision() {
        let one = Dd::from(1.0);
        let tiny = Dd::from(1e-20);
        assert_eq!(((one + tiny) - one).to_f64(), 1e-20);
        let third = one / Dd::from(3.0);
        let back = third * Dd::from(3.0) - one;
        assert!(back.to_f64().abs() < 1e-30);
        let x = Dd::from(0.1) * Dd::from(0.1);
        assert_eq!(x.hi, 0.1 * 0.1);
        assert_eq!(x.lo, 0.1f64.mul_add(0.1, -(0.1 * 0.1)));
    }

    #[test]
    fn sign_and_abs() {
        assert_eq!(Dd { hi: 0.0, lo: -1e-300 }.sign(), -1);
        assert_eq!(Dd::ZERO.sign(), 0);
        assert_eq!(Dd::from(-2.0).abs().to_f64(), 2.0);
    }
}
