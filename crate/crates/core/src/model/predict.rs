use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Real, Tape, Tensor};
use crate::data::{NormalizationStats, HISTORY_LEN};
use crate::error::{Error, Result};
use crate::model::batch::PreparedScene;
use crate::model::granp::Granp;
use crate::model::latent::{sample_latent, LatentDistribution};

/// Two-sided 95% normal quantile.
pub const CI_Z: f64 = 1.96;
/// Queries encoded per tape.
const QUERY_CHUNK: usize = 64;

/// Per-step diagonal Gaussian over the ego position, meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub mean: Vec<[f64; 2]>,
    pub std: Vec<[f64; 2]>,
}

impl PredictiveDistribution {
    pub fn lower(&self) -> Vec<[f64; 2]> {
        self.bound(-CI_Z)
    }

    pub fn upper(&self) -> Vec<[f64; 2]> {
        self.bound(CI_Z)
    }

    fn bound(&self, z: f64) -> Vec<[f64; 2]> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| [m[0] + z * s[0], m[1] + z * s[1]])
            .collect()
    }

    /// Mixture moments: mean of means, and mean variance plus variance of
    /// means.
    pub fn pool(samples: &[PredictiveDistribution]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Invalid("pooling zero samples".into()))?;
        let steps = first.mean.len();
        let n = samples.len() as f64;
        let mut mean = vec![[0.0; 2]; steps];
        let mut std = vec![[0.0; 2]; steps];
        for t in 0..steps {
            for c in 0..2 {
                let m = samples.iter().map(|s| s.mean[t][c]).sum::<f64>() / n;
                let within = samples.iter().map(|s| s.std[t][c].powi(2)).sum::<f64>() / n;
                let between = samples
                    .iter()
                    .map(|s| (s.mean[t][c] - m).powi(2))
                    .sum::<f64>()
                    / n;
                mean[t][c] = m;
                std[t][c] = (within + between).sqrt();
            }
        }
        Ok(PredictiveDistribution { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub pooled: PredictiveDistribution,
    /// One decoded distribution per latent draw.
    pub samples: Vec<PredictiveDistribution>,
}

/// `samples` standard-normal vectors of length `dim` from a seed.
pub fn latent_noise(seed: u64, samples: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

/// Context-conditioned predictor. The context is encoded once; queries
/// only need their histories.
#[derive(Debug, Clone)]
pub struct Predictor<'m, R: Real> {
    model: &'m Granp,
    store: &'m ParamStore<R>,
    stats: NormalizationStats,
    h_c: Tensor<R>,
    r_c: Tensor<R>,
    prior: LatentDistribution,
}

impl<'m, R: Real> Predictor<'m, R> {
    pub fn new(
        model: &'m Granp,
        store: &'m ParamStore<R>,
        stats: NormalizationStats,
        context: &[&PreparedScene],
    ) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::EmptyContext);
        }
        let pairs = context;
        let rows: Vec<usize> = (0..pairs.len()).collect();
        let mut g = Tape::with_params(store, false);
        let enc = model.encode_histories(&mut g, pairs)?;
        let feat = model.pair_features(&mut g, &enc, pairs, &rows)?;
        let s_c = model.latent.encode(&mut g, feat)?;
        let prior = model.latent_path(&mut g, s_c)?;
        let r_c = model.deterministic.encode(&mut g, feat)?;
        let prior = LatentDistribution {
            mu: g.value(prior.mu).to_f64(),
            sigma: g.value(prior.sigma).to_f64(),
        };
        Ok(Predictor {
            model,
            store,
            stats,
            h_c: g.value(enc.h).clone(),
            r_c: g.value(r_c).clone(),
            prior,
        })
    }

    /// `q(z | context)`.
    pub fn prior(&self) -> &LatentDistribution {
        &self.prior
    }

    /// One prediction per query, decoding every noise vector as a latent
    /// draw from the context prior.
    pub fn predict(
        &self,
        queries: &[&PreparedScene],
        noise: &[Vec<f64>],
    ) -> Result<Vec<Prediction>> {
        if noise.is_empty() {
            return Err(Error::Invalid(
                "prediction needs at least one latent sample".into(),
            ));
        }
        let zs: Vec<Vec<f64>> = noise
            .iter()
            .map(|e| sample_latent(&self.prior, e))
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(QUERY_CHUNK) {
            let mut g = Tape::with_params(self.store, false);
            let enc = self.model.encode_histories(&mut g, chunk)?;
            let h_c = g.constant(self.h_c.clone());
            let r_c = g.constant(self.r_c.clone());
            let r_star = self.model.deterministic_path(&mut g, h_c, r_c, enc.h)?;
            let mut per_sample = Vec::with_capacity(zs.len());
            for z in &zs {
                let z = g.constant(Tensor::from_f64([z.len()], z)?);
                let dec = self.model.decode(&mut g, enc.h, r_star, z)?;
                per_sample.push((g.value(dec.mu).to_f64(), g.value(dec.sigma).to_f64()));
            }
            for (q, scene) in chunk.iter().enumerate() {
                let samples = per_sample
                    .iter()
                    .map(|(mu, sigma)| self.to_meters(scene, mu, sigma, q))
                    .collect::<Vec<_>>();
                let pooled = PredictiveDistribution::pool(&samples)?;
                out.push(Prediction { pooled, samples });
            }
        }
        Ok(out)
    }

    fn to_meters(
        &self,
        scene: &PreparedScene,
        mu: &[f64],
        sigma: &[f64],
        q: usize,
    ) -> PredictiveDistribution {
        let steps = self.model.config.future_len;
        let base = q * steps * 2;
        let (ox, oy) = scene.offset;
        let st = &self.stats;
        let mut mean = Vec::with_capacity(steps);
        let mut std = Vec::with_capacity(steps);
        for t in 0..steps {
            let (mx, my) = (mu[base + 2 * t], mu[base + 2 * t + 1]);
            let p = st.invert_position([mx, my]);
            mean.push([p[0] + ox, p[1] + oy]);
            std.push([
                sigma[base + 2 * t] * st.std[0],
                sigma[base + 2 * t + 1] * st.std[1],
            ]);
        }
        PredictiveDistribution { mean, std }
    }
}

/// Ego-row graph attention at the last history step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    /// Node vehicle ids, ego first; weight vectors are indexed alike.
    pub ids: Vec<u64>,
    /// `layers[l][k][j]`: weight of node `j` in the ego update of head `k`.
    pub layers: Vec<Vec<Vec<f64>>>,
    /// Up to three neighbours by head-averaged last-layer weight, descending.
    pub top: Vec<(u64, f64)>,
}

pub fn attention_weights<R: Real>(
    model: &Granp,
    store: &ParamStore<R>,
    scene: &PreparedScene,
) -> Result<AttentionExport> {
    let mut g = Tape::with_params(store, false);
    let enc = model.encode_histories(&mut g, &[scene])?;
    let n = scene.nodes();
    let heads = model.config.heads;
    let ego_row = enc.graph.ego_rows[HISTORY_LEN - 1];
    let edge_sets = [&enc.graph.layer1, &enc.graph.layer2];
    let mut layers = Vec::with_capacity(edge_sets.len());
    for (out, edges) in enc.gat.iter().zip(edge_sets) {
        let alpha = g.value(out.attention).to_f64();
        let mut w = vec![vec![0.0; n]; heads];
        for (e, (&dst, &src)) in edges.dst.iter().zip(edges.src.iter()).enumerate() {
            if dst == ego_row {
                for (h, row) in w.iter_mut().enumerate() {
                    row[src - ego_row] = alpha[e * heads + h];
                }
            }
        }
        layers.push(w);
    }
    let last = layers.last().expect("two graph layers");
    let mut top: Vec<(u64, f64)> = (1..n)
        .map(|j| {
            (
                scene.ids[j],
                last.iter().map(|w| w[j]).sum::<f64>() / heads as f64,
            )
        })
        .collect();
    top.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    top.truncate(3);
    Ok(AttentionExport {
        ids: scene.ids.clone(),
        layers,
        top,
    })
}
