use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Var};
use crate::error::{Error, Result};

pub const LATENT_SIGMA_MIN: f64 = 0.1;
pub const LATENT_SIGMA_MAX: f64 = 1.0;
pub const OBS_SIGMA_FLOOR: f64 = 0.01;

/// Diagonal Gaussian over the global latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDistribution {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl LatentDistribution {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// `0.1 + 0.9 * sigmoid(raw)`, always in `[0.1, 1.0]`.
pub fn latent_sigma(raw: f64) -> f64 {
    let s = if raw >= 0.0 {
        1.0 / (1.0 + (-raw).exp())
    } else {
        let e = raw.exp();
        e / (1.0 + e)
    };
    LATENT_SIGMA_MIN + (LATENT_SIGMA_MAX - LATENT_SIGMA_MIN) * s
}

/// `0.01 + softplus(raw)`.
pub fn observation_sigma(raw: f64) -> f64 {
    OBS_SIGMA_FLOOR + raw.max(0.0) + (-raw.abs()).exp().ln_1p()
}

/// Reparameterised draw `mu + sigma * noise`.
pub fn sample_latent(dist: &LatentDistribution, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != dist.dim() || dist.sigma.len() != dist.dim() {
        return Err(Error::Shape {
            kind: "sample_latent",
            shapes: vec![
                vec![dist.mu.len()],
                vec![dist.sigma.len()],
                vec![noise.len()],
            ],
        });
    }
    Ok(dist
        .mu
        .iter()
        .zip(&dist.sigma)
        .zip(noise)
        .map(|((m, s), e)| m + s * e)
        .collect())
}

/// `KL(post || prior)` for diagonal Gaussians:
/// `sum log(sp / sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2`.
pub fn kl_diag(post: &LatentDistribution, prior: &LatentDistribution) -> Result<f64> {
    let d = post.dim();
    if prior.dim() != d || post.sigma.len() != d || prior.sigma.len() != d {
        return Err(Error::Shape {
            kind: "kl_diag",
            shapes: vec![
                vec![post.mu.len(), post.sigma.len()],
                vec![prior.mu.len(), prior.sigma.len()],
            ],
        });
    }
    if post
        .sigma
        .iter()
        .chain(&prior.sigma)
        .any(|&s| s.is_nan() || s <= 0.0)
    {
        return Err(Error::Invalid(
            "kl_diag needs strictly positive sigma".into(),
        ));
    }
    let mut kl = 0.0;
    for i in 0..d {
        let (mq, sq, mp, sp) = (post.mu[i], post.sigma[i], prior.mu[i], prior.sigma[i]);
        let dm = mq - mp;
        kl += (sp.ln() - sq.ln()) + (sq * sq + dm * dm) / (2.0 * (sp * sp)) - 0.5;
    }
    Ok(kl)
}

/// Differentiable [`kl_diag`] over `[L]` tensors. Identical inputs give
/// exactly zero.
pub fn kl_diag_tape<R: Real>(
    g: &mut Tape<'_, R>,
    post: (Var, Var),
    prior: (Var, Var),
) -> Result<Var> {
    let (mq, sq) = post;
    let (mp, sp) = prior;
    let log_sp = g.log(sp)?;
    let log_sq = g.log(sq)?;
    let log_ratio = g.sub(log_sp, log_sq)?;
    let sq2 = g.mul(sq, sq)?;
    let dm = g.sub(mq, mp)?;
    let dm2 = g.mul(dm, dm)?;
    let num = g.add(sq2, dm2)?;
    let sp2 = g.mul(sp, sp)?;
    let den = g.scale(sp2, 2.0)?;
    let quad = g.div(num, den)?;
    let quad = g.add_scalar(quad, -0.5)?;
    let terms = g.add(log_ratio, quad)?;
    g.sum(terms, None)
}
