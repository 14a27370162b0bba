use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Real, Tape, Tensor, Var};
use crate::data::{FUTURE_LEN, HISTORY_LEN};
use crate::error::{Error, Result};
use crate::model::batch::{
    futures_channel_major, futures_time_major, BatchGraph, EpisodeBatch, PreparedScene,
};
use crate::model::config::{ModelConfig, GAT_LAYERS, STATE_DIM};
use crate::model::latent::{kl_diag_tape, LATENT_SIGMA_MAX, LATENT_SIGMA_MIN, OBS_SIGMA_FLOOR};
use crate::nn::{
    ConvMlpEncoder, CrossAttention, GatLayer, GatOutput, Linear, LstmEncoder, MlpBlock,
};

/// Layer layout of the model; parameter values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Granp {
    pub config: ModelConfig,
    pub embed: Linear,
    pub gat: [GatLayer; GAT_LAYERS],
    pub lstm: LstmEncoder,
    /// Maps each future coordinate series from `T_F` to `T_N` steps.
    pub interp: MlpBlock,
    pub deterministic: ConvMlpEncoder,
    pub latent: ConvMlpEncoder,
    pub latent_head: MlpBlock,
    pub cross: CrossAttention,
    pub decoder: MlpBlock,
}

/// Per-pair history encodings.
#[derive(Debug, Clone)]
pub struct HistoryEncoding {
    /// `[P, d]` final LSTM state.
    pub h: Var,
    /// `[P, d, T_N]` ego node features after the graph layers.
    pub seq: Var,
    pub gat: [GatOutput; GAT_LAYERS],
    pub(crate) graph: BatchGraph,
}

/// Diagonal Gaussian as `[L]` tape values.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub mu: Var,
    pub sigma: Var,
}

/// Decoder output in normalised units, each `[k, T_F, 2]`.
#[derive(Debug, Clone, Copy)]
pub struct DecodedVars {
    pub mu: Var,
    pub sigma: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ElboOutput {
    pub loss: Var,
    /// Mean per-step negative log-likelihood of the targets.
    pub recon_nll: f64,
    pub kl: f64,
}

fn idx(v: &[usize]) -> Arc<[usize]> {
    v.iter().copied().collect()
}

impl Granp {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        config: ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let k = config.heads;
        let embed = Linear::new(store, "embed", STATE_DIM, d, rng)?;
        let gat = [
            GatLayer::new(store, "gat0", d, d, k, rng)?,
            GatLayer::new(store, "gat1", d, d, k, rng)?,
        ];
        let lstm = LstmEncoder::new(store, "lstm", d, d, rng)?;
        let interp = MlpBlock::new(
            store,
            "interp",
            &[config.future_len, d, config.history_len],
            rng,
        )?;
        let deterministic = ConvMlpEncoder::new(store, "det", d + 2, d, config.kernel, rng)?;
        let latent = ConvMlpEncoder::new(store, "lat", d + 2, d, config.kernel, rng)?;
        let latent_head = MlpBlock::new(store, "latent_head", &[d, d, 2 * config.latent], rng)?;
        let cross = CrossAttention::new(store, "cross", d, k, rng)?;
        let decoder = MlpBlock::new(
            store,
            "decoder",
            &[2 * d + config.latent, 2 * d, 2 * d, 4 * config.future_len],
            rng,
        )?;
        Ok(Granp {
            config,
            embed,
            gat,
            lstm,
            interp,
            deterministic,
            latent,
            latent_head,
            cross,
            decoder,
        })
    }

    /// Fresh model and parameters from a seed.
    pub fn init<R: Real>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<R>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::new(&mut store, config, &mut rng)?;
        Ok((model, store))
    }

    /// Embedding, two graph layers per timestep, then the LSTM over the
    /// ego's node features.
    pub fn encode_histories<R: Real>(
        &self,
        g: &mut Tape<'_, R>,
        pairs: &[&PreparedScene],
    ) -> Result<HistoryEncoding> {
        let graph = BatchGraph::new(pairs)?;
        let (p, d) = (pairs.len(), self.config.hidden);
        let x = g.constant(Tensor::from_f64([graph.rows, STATE_DIM], &graph.features)?);
        let x = self.embed.forward(g, x)?;
        let l1 = self.gat[0].forward_edges(g, x, &graph.layer1)?;
        let l2 = self.gat[1].forward_edges(g, l1.nodes, &graph.layer2)?;
        let ego = g.gather_rows(l2.nodes, graph.ego_rows.clone())?;
        let ego = g.reshape(ego, &[HISTORY_LEN, p, d])?;
        let h = self.lstm.encode(g, ego)?;
        let seq = g.permute(ego, &[1, 2, 0])?;
        Ok(HistoryEncoding {
            h,
            seq,
            gat: [l1, l2],
            graph,
        })
    }

    /// `[m, d + 2, T_N]`: ego features beside the time-interpolated future.
    pub fn pair_features<R: Real>(
        &self,
        g: &mut Tape<'_, R>,
        enc: &HistoryEncoding,
        pairs: &[&PreparedScene],
        rows: &[usize],
    ) -> Result<Var> {
        let m = rows.len();
        let y = futures_channel_major(pairs, rows)?;
        let y = g.constant(Tensor::from_f64([2 * m, FUTURE_LEN], &y)?);
        let y = self.interp.forward(g, y)?;
        let y = g.reshape(y, &[m, 2, HISTORY_LEN])?;
        let hist = g.gather_rows(enc.seq, idx(rows))?;
        g.concat(&[hist, y], 1)
    }

    /// Mean-pool of pair representations `[n, d]` to a latent Gaussian.
    pub fn latent_path<R: Real>(&self, g: &mut Tape<'_, R>, reps: Var) -> Result<LatentVars> {
        let s = g.shape(reps).to_vec();
        if s.len() != 2 || s[1] != self.config.hidden {
            return Err(Error::Shape {
                kind: "latent_path",
                shapes: vec![s, vec![self.config.hidden]],
            });
        }
        let l = self.config.latent;
        let pooled = g.mean(reps, Some(0))?;
        let pooled = g.reshape(pooled, &[1, self.config.hidden])?;
        let out = self.latent_head.forward(g, pooled)?;
        let out = g.reshape(out, &[2 * l])?;
        let mu = g.slice(out, 0, 0, l)?;
        let raw = g.slice(out, 0, l, 2 * l)?;
        let sig = g.sigmoid(raw)?;
        let sig = g.scale(sig, LATENT_SIGMA_MAX - LATENT_SIGMA_MIN)?;
        let sigma = g.add_scalar(sig, LATENT_SIGMA_MIN)?;
        Ok(LatentVars { mu, sigma })
    }

    /// Cross-attention from target embeddings onto context embeddings,
    /// aggregating the context representations.
    pub fn deterministic_path<R: Real>(
        &self,
        g: &mut Tape<'_, R>,
        h_c: Var,
        r_c: Var,
        h_t: Var,
    ) -> Result<Var> {
        Ok(self.cross.attend(g, h_t, h_c, r_c)?.values)
    }

    /// `z = mu + sigma * noise`.
    pub fn sample_latent<R: Real>(
        &self,
        g: &mut Tape<'_, R>,
        dist: LatentVars,
        noise: &[f64],
    ) -> Result<Var> {
        if noise.len() != self.config.latent {
            return Err(Error::Shape {
                kind: "sample_latent",
                shapes: vec![vec![self.config.latent], vec![noise.len()]],
            });
        }
        let eps = g.constant(Tensor::from_f64([noise.len()], noise)?);
        let scaled = g.mul(dist.sigma, eps)?;
        g.add(dist.mu, scaled)
    }

    /// `concat(H_T, r*, z) -> MLP -> [k, T_F, (mu, sigma)]`.
    pub fn decode<R: Real>(
        &self,
        g: &mut Tape<'_, R>,
        h_t: Var,
        r_star: Var,
        z: Var,
    ) -> Result<DecodedVars> {
        let (sh, sr, sz) = (
            g.shape(h_t).to_vec(),
            g.shape(r_star).to_vec(),
            g.shape(z).to_vec(),
        );
        let d = self.config.hidden;
        let l = self.config.latent;
        if sh.len() != 2 || sh[1] != d || sr != sh || sz != [l] {
            return Err(Error::Shape {
                kind: "decode",
                shapes: vec![sh, sr, sz],
            });
        }
        let k = sh[0];
        let zeros = g.constant(Tensor::zeros(vec![k, l]));
        let z = g.add(zeros, z)?;
        let input = g.concat(&[h_t, r_star, z], 1)?;
        let out = self.decoder.forward(g, input)?;
        let out = g.reshape(out, &[k, FUTURE_LEN, 4])?;
        let mu = g.slice(out, 2, 0, 2)?;
        let raw = g.slice(out, 2, 2, 4)?;
        let sp = g.softplus(raw)?;
        let sigma = g.add_scalar(sp, OBS_SIGMA_FLOOR)?;
        Ok(DecodedVars { mu, sigma })
    }

    /// Negative ELBO per target step, with the single latent draw
    /// `z = mu_post + sigma_post * noise`. Context must be a subset of the
    /// targets and every target needs its future.
    pub fn elbo_loss<R: Real>(
        &self,
        g: &mut Tape<'_, R>,
        batch: &EpisodeBatch<'_>,
        noise: &[f64],
    ) -> Result<ElboOutput> {
        let pairs = &batch.pairs;
        let k = batch.targets.len();
        let ctx_pos: Vec<usize> = batch
            .context
            .iter()
            .map(|c| batch.targets.iter().position(|t| t == c))
            .collect::<Option<_>>()
            .ok_or_else(|| {
                Error::Invalid("training context must be a subset of the targets".into())
            })?;

        let enc = self.encode_histories(g, pairs)?;
        let feat_t = self.pair_features(g, &enc, pairs, &batch.targets)?;
        let s_t = self.latent.encode(g, feat_t)?;
        let s_c = g.gather_rows(s_t, idx(&ctx_pos))?;
        let post = self.latent_path(g, s_t)?;
        let prior = self.latent_path(g, s_c)?;

        let feat_c = g.gather_rows(feat_t, idx(&ctx_pos))?;
        let r_c = self.deterministic.encode(g, feat_c)?;
        let h_t = g.gather_rows(enc.h, idx(&batch.targets))?;
        let h_c = g.gather_rows(enc.h, idx(&batch.context))?;
        let r_star = self.deterministic_path(g, h_c, r_c, h_t)?;

        let z = self.sample_latent(g, post, noise)?;
        let dec = self.decode(g, h_t, r_star, z)?;
        let y = futures_time_major(pairs, &batch.targets)?;
        let y = g.constant(Tensor::from_f64([k, FUTURE_LEN, 2], &y)?);
        let nll = gaussian_nll_sum(g, y, dec)?;
        let kl = kl_diag_tape(g, (post.mu, post.sigma), (prior.mu, prior.sigma))?;
        let total = g.add(nll, kl)?;
        let denom = (k * FUTURE_LEN) as f64;
        let loss = g.scale(total, 1.0 / denom)?;
        Ok(ElboOutput {
            loss,
            recon_nll: g.value(nll).item().as_f64() / denom,
            kl: g.value(kl).item().as_f64(),
        })
    }
}

/// `sum over entries of 0.5 ln 2pi + ln sigma + (y - mu)^2 / (2 sigma^2)`.
pub(crate) fn gaussian_nll_sum<R: Real>(
    g: &mut Tape<'_, R>,
    y: Var,
    dec: DecodedVars,
) -> Result<Var> {
    let diff = g.sub(y, dec.mu)?;
    let z = g.div(diff, dec.sigma)?;
    let z2 = g.mul(z, z)?;
    let half = g.scale(z2, 0.5)?;
    let log_s = g.log(dec.sigma)?;
    let terms = g.add(half, log_s)?;
    let terms = g.add_scalar(terms, 0.5 * (2.0 * PI).ln())?;
    g.sum(terms, None)
}
