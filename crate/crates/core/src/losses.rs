//! Reconstruction and embedding losses with analytic gradients.
//!
//! Every `*_grad` function returns the loss value together with its gradient
//! with respect to each vector argument; the trainer chains those into the
//! network backward passes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;
use crate::voxel::VoxelGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconKind {
    Bce,
    Focal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub w_bce: f64,
    pub w_adp: f64,
    pub mu: f64,
    pub recon: ReconKind,
    pub focal_gamma: f64,
    pub focal_balance: f64,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            w_bce: 10.0,
            w_adp: 0.5,
            mu: 0.1,
            recon: ReconKind::Bce,
            focal_gamma: 2.0,
            focal_balance: 0.5,
            eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("loss.{what} out of range")));
        if !(self.w_bce >= 0.0) {
            return bad("w_bce");
        }
        if !(self.w_adp >= 0.0) {
            return bad("w_adp");
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return bad("mu");
        }
        if !(self.focal_gamma >= 0.0) {
            return bad("focal_gamma");
        }
        if !(self.focal_balance > 0.0 && self.focal_balance < 1.0) {
            return bad("focal_balance");
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return bad("eps");
        }
        Ok(())
    }
}

/// Weighted loss terms of one example or the batch mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub adp: f64,
    pub s_zp: f64,
    pub s_zn: f64,
}

fn check_len<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch(format!(
            "loss inputs of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy over voxels; targets may be soft. Predictions
/// are clamped to `[eps, 1 - eps]` inside the logarithms.
pub fn bce_grad<T: Real>(pred: &[T], target: &[T], eps: f64) -> Result<(T, Vec<T>)> {
    check_len(pred, target)?;
    let n = T::from_f64(pred.len() as f64);
    let (lo, hi) = (T::from_f64(eps), T::from_f64(1.0 - eps));
    let one = T::one();
    let mut sum = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let pc = p.max(lo).min(hi);
            sum -= y * pc.ln() + (one - y) * (one - pc).ln();
            // Derivative of the clamped expression taken at the clamped point,
            // so saturated predictions still receive a corrective signal.
            ((pc - y) / (pc * (one - pc))) / n
        })
        .collect();
    Ok((sum / n, grad))
}

/// Class-balanced focal loss generalized to soft targets:
/// `-[b*y*(1-p)^g*ln p + (1-b)*(1-y)*p^g*ln(1-p)]`, averaged over voxels.
pub fn focal_grad<T: Real>(
    pred: &[T],
    target: &[T],
    gamma: f64,
    balance: f64,
    eps: f64,
) -> Result<(T, Vec<T>)> {
    check_len(pred, target)?;
    let n = T::from_f64(pred.len() as f64);
    let (lo, hi) = (T::from_f64(eps), T::from_f64(1.0 - eps));
    let (g, b) = (T::from_f64(gamma), T::from_f64(balance));
    let one = T::one();
    let mut sum = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = p.max(lo).min(hi);
            let q = one - p;
            let (lp, lq) = (p.ln(), q.ln());
            let (qg, pg) = (q.powf(g), p.powf(g));
            sum -= b * y * qg * lp + (one - b) * (one - y) * pg * lq;
            // d/dp of the positive and negative terms.
            let (dq, dp) = if gamma == 0.0 {
                (T::zero(), T::zero())
            } else {
                (g * q.powf(g - one), g * p.powf(g - one))
            };
            let d_pos = -b * y * (-dq * lp + qg / p);
            let d_neg = -(one - b) * (one - y) * (dp * lq - pg / q);
            (d_pos + d_neg) / n
        })
        .collect();
    Ok((sum / n, grad))
}

pub fn bce_loss(prediction: &VoxelGrid, target: &VoxelGrid, eps: f64) -> Result<f64> {
    check_grids(prediction, target)?;
    let p: Vec<f64> = prediction.values().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = target.values().iter().map(|&v| v as f64).collect();
    Ok(bce_grad(&p, &y, eps)?.0)
}

pub fn focal_loss(
    prediction: &VoxelGrid,
    target: &VoxelGrid,
    gamma: f64,
    balance: f64,
    eps: f64,
) -> Result<f64> {
    check_grids(prediction, target)?;
    let p: Vec<f64> = prediction.values().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = target.values().iter().map(|&v| v as f64).collect();
    Ok(focal_grad(&p, &y, gamma, balance, eps)?.0)
}

fn check_grids(a: &VoxelGrid, b: &VoxelGrid) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch(format!(
            "prediction dim {} vs target dim {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Reconstruction loss selected by `cfg.recon`.
pub fn recon_grad<T: Real>(pred: &[T], target: &[T], cfg: &LossConfig) -> Result<(T, Vec<T>)> {
    match cfg.recon {
        ReconKind::Bce => bce_grad(pred, target, cfg.eps),
        ReconKind::Focal => focal_grad(pred, target, cfg.focal_gamma, cfg.focal_balance, cfg.eps),
    }
}

/// Cosine similarity and its gradients with respect to both arguments.
pub fn cosine_grad<T: Real>(a: &[T], b: &[T]) -> Result<(T, Vec<T>, Vec<T>)> {
    check_len(a, b)?;
    let na = a.iter().map(|&v| v * v).sum::<T>().sqrt();
    let nb = b.iter().map(|&v| v * v).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() || !na.is_finite() || !nb.is_finite() {
        return Err(Error::Invalid("cosine similarity of a zero-norm vector".into()));
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let inv = T::one() / (na * nb);
    let cos = dot * inv;
    let ga = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| y * inv - cos * x / (na * na))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x * inv - cos * y / (nb * nb))
        .collect();
    Ok((cos, ga, gb))
}

pub fn cosine<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    Ok(cosine_grad(a, b)?.0)
}

/// Pose-adapting loss terms with gradients.
#[derive(Clone, Debug)]
pub struct AdpTerms<T> {
    pub loss: T,
    pub s_zp: T,
    pub s_zn: T,
    pub grad_z: Vec<T>,
    pub grad_pos: Vec<T>,
    pub grad_neg: Vec<T>,
}

/// `max(S_zn - S_zp + mu, 0) + 1 - S_zp` with cosine similarities of `z`
/// against the positive and negative ground-truth embeddings.
pub fn adp_grad<T: Real>(z: &[T], pos: &[T], neg: &[T], mu: f64) -> Result<AdpTerms<T>> {
    let (s_zp, gz_p, gpos) = cosine_grad(z, pos)?;
    let (s_zn, gz_n, gneg) = cosine_grad(z, neg)?;
    let margin = s_zn - s_zp + T::from_f64(mu);
    let active = margin > T::zero();
    let hinge = if active { margin } else { T::zero() };
    let loss = hinge + T::one() - s_zp;
    // dL/dS_zp and dL/dS_zn.
    let dp = if active { -T::from_f64(2.0) } else { -T::one() };
    let dn = if active { T::one() } else { T::zero() };
    let grad_z = gz_p
        .iter()
        .zip(&gz_n)
        .map(|(&a, &b)| dp * a + dn * b)
        .collect();
    Ok(AdpTerms {
        loss,
        s_zp,
        s_zn,
        grad_z,
        grad_pos: gpos.into_iter().map(|g| dp * g).collect(),
        grad_neg: gneg.into_iter().map(|g| dn * g).collect(),
    })
}

/// Stage-3 form without the triplet criterion: `1 - S_zp`.
pub fn adp_no_triplet_grad<T: Real>(z: &[T], pos: &[T]) -> Result<(T, T, Vec<T>, Vec<T>)> {
    let (s_zp, gz, gp) = cosine_grad(z, pos)?;
    Ok((
        T::one() - s_zp,
        s_zp,
        gz.into_iter().map(|g| -g).collect(),
        gp.into_iter().map(|g| -g).collect(),
    ))
}

pub fn adp_loss(z: &[f64], pos: &[f64], neg: &[f64], mu: f64) -> Result<(f64, f64, f64)> {
    let t = adp_grad(z, pos, neg, mu)?;
    Ok((t.loss, t.s_zp, t.s_zn))
}

pub fn adp_loss_no_triplet(z: &[f64], pos: &[f64]) -> Result<f64> {
    Ok(adp_no_triplet_grad(z, pos)?.0)
}

/// `total = w_BCE * recon + w_ADP * adp`.
pub fn combined_loss(recon: f64, adp: f64, s_zp: f64, s_zn: f64, cfg: &LossConfig) -> LossBreakdown {
    LossBreakdown {
        total: cfg.w_bce * recon + cfg.w_adp * adp,
        recon,
        adp,
        s_zp,
        s_zn,
    }
}
