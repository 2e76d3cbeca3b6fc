//! Training objectives: the GM-VQ loss with its aggregated-posterior KL, the
//! VQ-VAE discretization loss, the stochastic-VQ bound and the
//! mutual-information regularizer.
//!
//! Entropies and KL are in nats. Perplexity is `2^H` with `H` in bits.

use std::f64::consts::PI;

use crate::array::Array;
use crate::diff::{Graph, Var};
use crate::error::{Error, Result};
use crate::stats::{entropy_bits, entropy_nats, LOG_FLOOR};

/// Scalar components of one GM-VQ loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub latent_reg: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(recon: f64, latent_reg: f64, kl: f64, beta: f64, gamma: f64) -> Self {
        Self {
            recon,
            latent_reg,
            kl,
            total: recon + gamma * (latent_reg + beta * kl),
        }
    }
}

/// Columnwise mean of a `B x C` matrix of posterior rows.
pub fn aggregate_posterior(batch_pi: &Array) -> Result<Vec<f64>> {
    if batch_pi.shape().len() != 2 || batch_pi.rows() == 0 {
        return Err(Error::invalid(
            "aggregate_posterior needs a non-empty B x C batch",
        ));
    }
    let (b, c) = (batch_pi.rows(), batch_pi.cols());
    let mut q = vec![0.0; c];
    for i in 0..b {
        for (acc, v) in q.iter_mut().zip(batch_pi.row(i)) {
            *acc += v;
        }
    }
    q.iter_mut().for_each(|v| *v /= b as f64);
    Ok(q)
}

/// `sum_c q_c log(C q_c)`, the KL from `q` to the uniform distribution.
pub fn kl_to_uniform(q: &[f64]) -> f64 {
    (q.len() as f64).ln() - entropy_nats(q)
}

pub fn perplexity(q: &[f64]) -> f64 {
    2f64.powf(entropy_bits(q))
}

/// Mean per-row entropy minus the entropy of the mean row. Never positive.
pub fn mutual_info_entropy_loss(batch_pi: &Array) -> Result<f64> {
    let q = aggregate_posterior(batch_pi)?;
    let b = batch_pi.rows();
    let cond = (0..b).map(|i| entropy_nats(batch_pi.row(i))).sum::<f64>() / b as f64;
    Ok(cond - entropy_nats(&q))
}

/// `sum(p * log(max(p, floor)))` over the last axis, as a `B x 1` column (or a scalar for vectors).
fn neg_entropy_last(g: &mut Graph, p: Var) -> Result<Var> {
    let clamped = g.clamp_min(p, LOG_FLOOR)?;
    let logp = g.log(clamped)?;
    let plogp = g.mul(p, logp)?;
    if g.shape(p).len() == 1 {
        g.sum(plogp)
    } else {
        g.sum_last(plogp)
    }
}

/// Aggregated posterior of a `B x C` posterior node, as a length-`C` node.
pub fn aggregate_posterior_node(g: &mut Graph, pi: Var) -> Result<Var> {
    g.mean_rows(pi)
}

pub fn kl_to_uniform_node(g: &mut Graph, q: Var) -> Result<Var> {
    let c = g.value(q).len() as f64;
    let s = neg_entropy_last(g, q)?;
    g.shift(s, c.ln())
}

pub fn mutual_info_entropy_node(g: &mut Graph, pi: Var) -> Result<Var> {
    let per_row = neg_entropy_last(g, pi)?;
    let cond_neg = g.mean(per_row)?;
    let q = g.mean_rows(pi)?;
    let marg_neg = neg_entropy_last(g, q)?;
    g.sub(marg_neg, cond_neg)
}

/// Per-example squared error `||a - b||^2` as a `B x 1` column.
pub fn squared_error_rows(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.square(d)?;
    g.sum_last(sq)
}

/// Graph nodes of one GM-VQ loss evaluation.
pub struct GmvqTerms {
    pub recon_rows: Var,
    pub latent_rows: Var,
    pub recon: Var,
    pub latent_reg: Var,
    pub aggregated: Var,
    pub kl: Var,
    pub total: Var,
}

impl GmvqTerms {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            recon: g.value(self.recon).item(),
            latent_reg: g.value(self.latent_reg).item(),
            kl: g.value(self.kl).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// `recon + gamma * (latent_reg + beta * kl)` from the reconstruction `xrec`,
/// the sampled latent `z`, its selected mean `mu_sel` and the posterior rows `pi`.
#[allow(clippy::too_many_arguments)]
pub fn gmvq_terms(
    g: &mut Graph,
    x: Var,
    xrec: Var,
    z: Var,
    mu_sel: Var,
    pi: Var,
    beta: f64,
    gamma: f64,
) -> Result<GmvqTerms> {
    check_weight("beta", beta)?;
    check_weight("gamma", gamma)?;
    let recon_rows = squared_error_rows(g, x, xrec)?;
    let recon = g.mean(recon_rows)?;
    let latent_rows = squared_error_rows(g, z, mu_sel)?;
    let latent_reg = g.mean(latent_rows)?;
    let aggregated = aggregate_posterior_node(g, pi)?;
    let kl = kl_to_uniform_node(g, aggregated)?;
    let bkl = g.scale(kl, beta)?;
    let inner = g.add(latent_reg, bkl)?;
    let weighted = g.scale(inner, gamma)?;
    let total = g.add(recon, weighted)?;
    Ok(GmvqTerms {
        recon_rows,
        latent_rows,
        recon,
        latent_reg,
        aggregated,
        kl,
        total,
    })
}

/// Negative ALBO including the Gaussian normalizing constants, from loss
/// components averaged over a batch.
pub fn negative_albo(
    b: &LossBreakdown,
    sigma2_x: f64,
    sigma2_z: f64,
    input_dim: usize,
    latent_dim: usize,
) -> f64 {
    b.recon / (2.0 * sigma2_x)
        + 0.5 * input_dim as f64 * (2.0 * PI * sigma2_x).ln()
        + b.latent_reg / (2.0 * sigma2_z)
        + 0.5 * latent_dim as f64 * (2.0 * PI * sigma2_z).ln()
        + b.kl
}

/// VQ-VAE objective: reconstruction plus `||zhat - sg(z_c)||^2 + alpha ||sg(zhat) - z_c||^2`.
///
/// `onehot` selects the codewords `z_c` from `means`.
pub fn vqvae_terms(
    g: &mut Graph,
    x: Var,
    xrec: Var,
    zhat: Var,
    means: Var,
    onehot: &Array,
    alpha: f64,
) -> Result<(Var, Var)> {
    check_weight("alpha", alpha)?;
    let recon_rows = squared_error_rows(g, x, xrec)?;
    let recon = g.mean(recon_rows)?;
    let zc = crate::codebook::lookup(g, means, onehot)?;
    let zc_sg = g.detach(zc);
    let commit_rows = squared_error_rows(g, zhat, zc_sg)?;
    let commit = g.mean(commit_rows)?;
    let zhat_sg = g.detach(zhat);
    let code_rows = squared_error_rows(g, zhat_sg, zc)?;
    let code = g.mean(code_rows)?;
    let code_w = g.scale(code, alpha)?;
    let disc = g.add(commit, code_w)?;
    Ok((g.add(recon, disc)?, recon))
}

/// Stochastic-VQ bound under a uniform prior:
/// `E[-log p(x|c)] - H(q(c|x)) + log C`, averaged over the batch.
pub fn stochastic_vq_terms(
    g: &mut Graph,
    x: Var,
    xrec: Var,
    pi: Var,
    log_pi: Var,
    sigma2_x: f64,
) -> Result<(Var, Var)> {
    let d = g.value(x).cols() as f64;
    let c = g.value(pi).cols() as f64;
    let recon_rows = squared_error_rows(g, x, xrec)?;
    let recon = g.mean(recon_rows)?;
    let nll = g.scale(recon, 1.0 / (2.0 * sigma2_x))?;
    let nll = g.shift(nll, 0.5 * d * (2.0 * PI * sigma2_x).ln())?;
    let plogp = g.mul(pi, log_pi)?;
    let neg_h_rows = g.sum_last(plogp)?;
    let neg_h = g.mean(neg_h_rows)?;
    let bound = g.add(nll, neg_h)?;
    Ok((g.shift(bound, c.ln())?, recon))
}

fn check_weight(name: &str, w: f64) -> Result<()> {
    if w >= 0.0 && w.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{name} must be non-negative, got {w}"
        )))
    }
}
