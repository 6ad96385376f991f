//! The three training losses and their gradients.
//!
//! * **Variation** pushes locations at frames `t` and `t + d`
//!   (`d` in `[d_min, d_max]`) apart: `mean(exp(-beta * ||z_b - z_a||))`.
//!   It is 1 when every pair coincides and decays toward 0 with distance.
//! * **Slowness** keeps consecutive locations close:
//!   `mean(||z_{t+1} - z_t||^2)`.
//! * **Presence** demands more activation mass in positive frames than in
//!   negative ones. For a positive/negative map pair the probability that
//!   the mass lies in the positive frame, under a softmax over both maps
//!   jointly, is `q = sum(exp(O_pos)) / (sum(exp(O_pos)) + sum(exp(O_neg)))`;
//!   the loss is `mean(-log q)` over all pairs. In log-sum-exp form this is
//!   `softplus(lse(O_neg) - lse(O_pos))`, which is what we compute.
//!
//! All arithmetic here is f64; activation maps are read as f64. Loss values
//! are means, so they are invariant under reordering of the input pairs.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{spatial_softmax, ActivationMap};

/// A normalized `[row, col]` location as fed to the coordinate losses.
pub type Coord = [f64; 2];

/// Guard inside the Euclidean norm's square root. Keeps the variation
/// gradient finite at exactly coincident pairs while perturbing the loss
/// value by less than 1e-8 (a 1e-12 guard would already show up at the
/// 1e-6 tolerance the closed-form checks use).
const NORM_GUARD: f64 = 1e-18;

/// Loss weights and the sampling/noise constants that travel with them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_variation: f64,
    pub w_slowness: f64,
    pub w_presence: f64,
    /// Distance scale inside the variation exponential.
    pub beta: f64,
    /// Smallest temporal gap for variation pairs.
    pub d_min: usize,
    /// Largest temporal gap for variation pairs.
    pub d_max: usize,
    /// Standard deviation of the Gaussian noise added to every coordinate
    /// entering the variation and slowness losses during training.
    pub noise_sigma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_variation: 2.0,
            w_slowness: 10.0,
            w_presence: 1.0,
            beta: 10.0,
            d_min: 50,
            d_max: 100,
            noise_sigma: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_variation < 0.0 || self.w_slowness < 0.0 || self.w_presence < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.d_min < 1 || self.d_min > self.d_max {
            return Err(Error::Config(format!(
                "need 1 <= d_min <= d_max, got d_min={} d_max={}",
                self.d_min, self.d_max
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-term loss values for one step; `total` is the weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub variation: f64,
    pub slowness: f64,
    pub presence: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.variation.is_finite()
            && self.slowness.is_finite()
            && self.presence.is_finite()
            && self.total.is_finite()
    }
}

/// Weighted sum of the three component losses.
pub fn combine(variation: f64, slowness: f64, presence: f64, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        variation,
        slowness,
        presence,
        total: weights.w_variation * variation
            + weights.w_slowness * slowness
            + weights.w_presence * presence,
    }
}

fn guarded_distance(a: Coord, b: Coord) -> f64 {
    let dr = b[0] - a[0];
    let dc = b[1] - a[1];
    (dr * dr + dc * dc + NORM_GUARD).sqrt()
}

/// `mean(exp(-beta * ||z_b - z_a||))` over the given pairs.
pub fn variation_loss(pairs: &[(Coord, Coord)], beta: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("variation pairs"));
    }
    let sum: f64 = pairs
        .iter()
        .map(|&(a, b)| (-beta * guarded_distance(a, b)).exp())
        .sum();
    Ok(sum / pairs.len() as f64)
}

/// Variation loss plus `(dL/dz_a, dL/dz_b)` per pair.
pub fn variation_loss_grad(
    pairs: &[(Coord, Coord)],
    beta: f64,
) -> Result<(f64, Vec<(Coord, Coord)>)> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("variation pairs"));
    }
    let k = pairs.len() as f64;
    let mut sum = 0.0;
    let mut grads = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        let d = guarded_distance(a, b);
        let e = (-beta * d).exp();
        sum += e;
        // d/d(delta) of exp(-beta * d) = -beta * e * delta / d
        let scale = -beta * e / (d * k);
        let gb = [(b[0] - a[0]) * scale, (b[1] - a[1]) * scale];
        grads.push(([-gb[0], -gb[1]], gb));
    }
    Ok((sum / k, grads))
}

/// `mean(||z_b - z_a||^2)` over the given pairs.
pub fn slowness_loss(pairs: &[(Coord, Coord)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("slowness pairs"));
    }
    let sum: f64 = pairs
        .iter()
        .map(|&(a, b)| {
            let dr = b[0] - a[0];
            let dc = b[1] - a[1];
            dr * dr + dc * dc
        })
        .sum();
    Ok(sum / pairs.len() as f64)
}

/// Slowness loss plus `(dL/dz_a, dL/dz_b)` per pair.
pub fn slowness_loss_grad(pairs: &[(Coord, Coord)]) -> Result<(f64, Vec<(Coord, Coord)>)> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("slowness pairs"));
    }
    let k = pairs.len() as f64;
    let mut sum = 0.0;
    let mut grads = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        let dr = b[0] - a[0];
        let dc = b[1] - a[1];
        sum += dr * dr + dc * dc;
        let gb = [2.0 * dr / k, 2.0 * dc / k];
        grads.push(([-gb[0], -gb[1]], gb));
    }
    Ok((sum / k, grads))
}

fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Pairwise presence terms computed from per-map log-sum-exp values.
///
/// `loss` is the mean of `-log q` over the full Cartesian product;
/// `pos_coeff[p]` and `neg_coeff[n]` are `dL/d lse` for each map, so the
/// map gradient is `coeff * softmax(map)`. `pair_count` reports how many
/// pairs the mean ran over.
#[derive(Debug, Clone)]
pub struct PresenceTerms {
    pub loss: f64,
    pub pos_coeff: Vec<f64>,
    pub neg_coeff: Vec<f64>,
    pub pair_count: usize,
}

/// Presence terms from per-map `log_sum_exp` values.
pub fn presence_terms(pos_lse: &[f64], neg_lse: &[f64]) -> Result<PresenceTerms> {
    if pos_lse.is_empty() {
        return Err(Error::EmptyInput("positive maps"));
    }
    if neg_lse.is_empty() {
        return Err(Error::EmptyInput("negative maps"));
    }
    let pair_count = pos_lse.len() * neg_lse.len();
    let inv = 1.0 / pair_count as f64;
    let mut loss = 0.0;
    let mut pos_coeff = vec![0.0f64; pos_lse.len()];
    let mut neg_coeff = vec![0.0f64; neg_lse.len()];
    for (p, &lp) in pos_lse.iter().enumerate() {
        for (n, &ln) in neg_lse.iter().enumerate() {
            let u = ln - lp;
            loss += softplus(u);
            let q = sigmoid(-u);
            pos_coeff[p] += (q - 1.0) * inv;
            neg_coeff[n] += (1.0 - q) * inv;
        }
    }
    Ok(PresenceTerms {
        loss: loss * inv,
        pos_coeff,
        neg_coeff,
        pair_count,
    })
}

fn check_same_shape(pos: &[ActivationMap], neg: &[ActivationMap]) -> Result<(usize, usize)> {
    let shape = pos
        .first()
        .or_else(|| neg.first())
        .map(|m| m.shape())
        .unwrap_or((0, 0));
    for m in pos.iter().chain(neg.iter()) {
        if m.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "presence maps must share one shape; found {:?} and {:?}",
                shape,
                m.shape()
            )));
        }
    }
    Ok(shape)
}

/// `mean(-log q)` over every (positive, negative) map pair.
pub fn presence_loss(pos: &[ActivationMap], neg: &[ActivationMap]) -> Result<f64> {
    if pos.is_empty() {
        return Err(Error::EmptyInput("positive maps"));
    }
    if neg.is_empty() {
        return Err(Error::EmptyInput("negative maps"));
    }
    check_same_shape(pos, neg)?;
    let pos_lse: Vec<f64> = pos.iter().map(|m| m.log_sum_exp()).collect();
    let neg_lse: Vec<f64> = neg.iter().map(|m| m.log_sum_exp()).collect();
    Ok(presence_terms(&pos_lse, &neg_lse)?.loss)
}

/// Presence loss plus per-map gradients (`dL/dO` for every positive and
/// negative map).
pub fn presence_loss_grad(
    pos: &[ActivationMap],
    neg: &[ActivationMap],
) -> Result<(f64, Vec<Array2<f64>>, Vec<Array2<f64>>)> {
    if pos.is_empty() {
        return Err(Error::EmptyInput("positive maps"));
    }
    if neg.is_empty() {
        return Err(Error::EmptyInput("negative maps"));
    }
    check_same_shape(pos, neg)?;
    let pos_lse: Vec<f64> = pos.iter().map(|m| m.log_sum_exp()).collect();
    let neg_lse: Vec<f64> = neg.iter().map(|m| m.log_sum_exp()).collect();
    let terms = presence_terms(&pos_lse, &neg_lse)?;
    let scaled = |m: &ActivationMap, c: f64| {
        let mut p = spatial_softmax(m).data().clone();
        p.mapv_inplace(|v| v * c);
        p
    };
    let dpos: Vec<Array2<f64>> = pos
        .iter()
        .zip(&terms.pos_coeff)
        .map(|(m, &c)| scaled(m, c))
        .collect();
    let dneg: Vec<Array2<f64>> = neg
        .iter()
        .zip(&terms.neg_coeff)
        .map(|(m, &c)| scaled(m, c))
        .collect();
    Ok((terms.loss, dpos, dneg))
}
