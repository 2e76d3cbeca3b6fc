//! Encoder, quantizer and decoder wired for the three quantizer kinds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, QuantizerKind};
use super::nn::{BoundMlp, Mlp};
use crate::array::Array;
use crate::codebook::Codebook;
use crate::diff::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{self, GmvqTerms, LossBreakdown};
use crate::posterior::{self, PosteriorBundle};
use crate::sampling::{self, StepNoise};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub codebook: Codebook,
}

/// Graph handles for every parameter of a [`Model`].
pub struct BoundModel {
    pub encoder: BoundMlp,
    pub decoder: BoundMlp,
    pub means: Var,
}

impl BoundModel {
    /// Same order as [`Model::params`].
    pub fn vars(&self) -> Vec<Var> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|&(w, b)| [w, b])
            .chain([self.means])
            .collect()
    }
}

/// How the sampled component enters the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relaxation {
    /// One-hot forward, relaxed backward.
    Hard,
    /// Relaxed sample in both passes. Smooth, used for gradient checks.
    Soft,
}

/// Loss graph for one batch plus the values the trainer logs.
pub struct StepOutput {
    pub total: Var,
    pub recon: f64,
    pub latent_reg: f64,
    pub kl: f64,
    /// Rows whose batch mean is the code-usage distribution.
    pub usage: Array,
    pub index: Vec<usize>,
    /// Present for the GM-VQ quantizer.
    pub gmvq: Option<GmvqTerms>,
}

/// Deterministic evaluation of a batch.
#[derive(Clone, Debug)]
pub struct Inference {
    pub index: Vec<usize>,
    pub usage: Array,
    pub recon: Array,
}

/// Encoder `D -> hidden -> 2L`, decoder `L -> hidden -> D`, codebook uniform
/// in `[-1/C, 1/C]`, all drawn from `config.seed`.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (d, l, c) = (config.input_dim, config.latent_dim, config.codebook_size);
    let enc: Vec<usize> = [d]
        .into_iter()
        .chain(config.encoder_hidden.iter().copied())
        .chain([2 * l])
        .collect();
    let dec: Vec<usize> = [l]
        .into_iter()
        .chain(config.decoder_hidden.iter().copied())
        .chain([d])
        .collect();
    let encoder = Mlp::new(&enc, config.activation, &mut rng)?;
    let decoder = Mlp::new(&dec, config.activation, &mut rng)?;
    let bound = 1.0 / c as f64;
    let means = (0..c * l)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    let codebook = Codebook::new(Array::matrix(c, l, means)?)?;
    Ok(Model {
        config: config.clone(),
        encoder,
        decoder,
        codebook,
    })
}

fn argmax_rows(a: &Array) -> Vec<usize> {
    (0..a.rows())
        .map(|i| {
            let r = a.row(i);
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn one_hot(index: &[usize], c: usize) -> Array {
    let mut a = Array::zeros(&[index.len(), c]);
    for (i, &j) in index.iter().enumerate() {
        a.row_mut(i)[j] = 1.0;
    }
    a
}

impl Model {
    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Encoder, decoder, then codebook parameters.
    pub fn params(&self) -> Vec<&Array> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.push(self.codebook.means());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p.push(self.codebook.means_mut());
        p
    }

    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        BoundModel {
            encoder: self.encoder.bind(g),
            decoder: self.decoder.bind(g),
            means: g.param(self.codebook.means().clone()),
        }
    }

    /// Wrap existing graph leaves, given in [`Model::params`] order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        let (ne, nd) = (self.encoder.layers.len(), self.decoder.layers.len());
        if vars.len() != 2 * (ne + nd) + 1 {
            return Err(Error::invalid(format!(
                "{} vars for {} parameters",
                vars.len(),
                2 * (ne + nd) + 1
            )));
        }
        let pairs = |v: &[Var]| v.chunks(2).map(|p| (p[0], p[1])).collect();
        Ok(BoundModel {
            encoder: pairs(&vars[..2 * ne]),
            decoder: pairs(&vars[2 * ne..2 * (ne + nd)]),
            means: vars[2 * (ne + nd)],
        })
    }

    fn check_input(&self, x: &Array) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.config.input_dim || x.rows() == 0 {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: x.shape().to_vec(),
                rhs: vec![self.config.input_dim],
            });
        }
        Ok(())
    }

    /// Proxy latents `zhat` (`B x L`).
    pub fn encode(&self, x: &Array) -> Result<Array> {
        self.check_input(x)?;
        let head = self.encoder.apply(x)?;
        let l = self.latent_dim();
        let mut out = Array::zeros(&[x.rows(), l]);
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(&head.row(i)[..l]);
        }
        Ok(out)
    }

    pub fn decode(&self, z: &Array) -> Result<Array> {
        self.decoder.apply(z)
    }

    /// Build the configured training loss for the batch `x`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        x: &Array,
        noise: &StepNoise,
        tau: f64,
        relax: Relaxation,
    ) -> Result<StepOutput> {
        self.check_input(x)?;
        let cfg = &self.config;
        let (l, c) = (cfg.latent_dim, cfg.codebook_size);
        let xv = g.constant(x.clone());
        let head = self.encoder.forward(g, &bound.encoder, xv)?;
        let (mut out, pi_node) = match cfg.quantizer {
            QuantizerKind::Gmvq => {
                let (zhat, what) = posterior::encoder_heads(g, head, l)?;
                let logits = posterior::gm_logits(g, zhat, what, bound.means)?;
                let pi = posterior::categorical_posterior(g, logits)?;
                let log_pi = g.log_softmax_last(logits)?;
                let sel = sampling::gumbel_softmax(g, log_pi, &noise.gumbel, tau)?;
                let cq = match relax {
                    Relaxation::Hard => sel.straight_through(g)?,
                    Relaxation::Soft => sel.soft,
                };
                let s2 = posterior::component_variance(g, zhat, bound.means, cfg.sigma2_z)?;
                let picked = g.mul(cq, s2)?;
                let s2_sel = g.sum_last(picked)?;
                let sigma = g.sqrt(s2_sel)?;
                let mu_sel = g.matmul(cq, bound.means)?;
                let eps = g.constant(noise.eps.clone());
                let spread = g.mul(sigma, eps)?;
                let z = g.add(mu_sel, spread)?;
                let xrec = self.decoder.forward(g, &bound.decoder, z)?;
                let terms = losses::gmvq_terms(g, xv, xrec, z, mu_sel, pi, cfg.beta, cfg.gamma)?;
                let b = terms.breakdown(g);
                let out = StepOutput {
                    total: terms.total,
                    recon: b.recon,
                    latent_reg: b.latent_reg,
                    kl: b.kl,
                    usage: g.value(pi).clone(),
                    index: sel.index,
                    gmvq: Some(terms),
                };
                (out, Some(pi))
            }
            QuantizerKind::VqvaeSte => {
                let zhat = g.slice_cols(head, 0, l)?;
                let (zq, index) = sampling::ste_quantize(g, zhat, &self.codebook)?;
                let xrec = self.decoder.forward(g, &bound.decoder, zq)?;
                let onehot = one_hot(&index, c);
                let (total, recon) =
                    losses::vqvae_terms(g, xv, xrec, zhat, bound.means, &onehot, cfg.alpha)?;
                let zv = g.value(zhat);
                let commit = (0..zv.rows())
                    .map(|i| {
                        zv.row(i)
                            .iter()
                            .zip(self.codebook.row(index[i]))
                            .map(|(a, b)| (a - b).powi(2))
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    / zv.rows() as f64;
                let q = losses::aggregate_posterior(&onehot)?;
                let out = StepOutput {
                    total,
                    recon: g.value(recon).item(),
                    latent_reg: commit,
                    kl: losses::kl_to_uniform(&q),
                    usage: onehot,
                    index,
                    gmvq: None,
                };
                (out, None)
            }
            QuantizerKind::StochasticVq => {
                let zhat = g.slice_cols(head, 0, l)?;
                let logits = posterior::stochastic_vq_logits(g, zhat, bound.means, cfg.sigma2_z)?;
                let pi = g.softmax_last(logits)?;
                let log_pi = g.log_softmax_last(logits)?;
                let sel = sampling::gumbel_softmax(g, log_pi, &noise.gumbel, tau)?;
                let cq = match relax {
                    Relaxation::Hard => sel.straight_through(g)?,
                    Relaxation::Soft => sel.soft,
                };
                let zq = g.matmul(cq, bound.means)?;
                let xrec = self.decoder.forward(g, &bound.decoder, zq)?;
                let (total, recon) =
                    losses::stochastic_vq_terms(g, xv, xrec, pi, log_pi, cfg.sigma2_x)?;
                let usage = g.value(pi).clone();
                let q = losses::aggregate_posterior(&usage)?;
                let out = StepOutput {
                    total,
                    recon: g.value(recon).item(),
                    latent_reg: 0.0,
                    kl: losses::kl_to_uniform(&q),
                    usage,
                    index: sel.index,
                    gmvq: None,
                };
                (out, Some(pi))
            }
        };
        if let (Some(pi), true) = (pi_node, cfg.entropy_weight > 0.0) {
            let mi = losses::mutual_info_entropy_node(g, pi)?;
            let w = g.scale(mi, cfg.entropy_weight)?;
            out.total = g.add(out.total, w)?;
        }
        Ok(out)
    }

    /// Noise-free pass: argmax component, `z = mu_c`, decoded.
    pub fn infer(&self, x: &Array) -> Result<Inference> {
        self.check_input(x)?;
        let cfg = &self.config;
        let head = self.encoder.apply(x)?;
        let l = cfg.latent_dim;
        let (index, usage) = match cfg.quantizer {
            QuantizerKind::Gmvq => {
                let pb = PosteriorBundle::from_heads(&head, &self.codebook, cfg.sigma2_z)?;
                (argmax_rows(&pb.logits), pb.pi)
            }
            QuantizerKind::VqvaeSte => {
                let index = (0..head.rows())
                    .map(|i| self.codebook.nearest(&head.row(i)[..l]))
                    .collect::<Result<Vec<_>>>()?;
                let usage = one_hot(&index, cfg.codebook_size);
                (index, usage)
            }
            QuantizerKind::StochasticVq => {
                let mut g = Graph::new();
                let h = g.constant(head);
                let m = g.constant(self.codebook.means().clone());
                let zhat = g.slice_cols(h, 0, l)?;
                let logits = posterior::stochastic_vq_logits(&mut g, zhat, m, cfg.sigma2_z)?;
                let pi = g.softmax_last(logits)?;
                (argmax_rows(g.value(logits)), g.value(pi).clone())
            }
        };
        let z = self
            .codebook
            .means()
            .select_rows(&index)
            .reshape(&[index.len(), l])?;
        let recon = self.decode(&z)?;
        Ok(Inference {
            index,
            usage,
            recon,
        })
    }
}

/// GM-VQ loss of one batch with fresh noise from `rng`, using `beta` and
/// `gamma` in place of the configured weights.
pub fn gmvq_loss(
    x: &Array,
    model: &Model,
    beta: f64,
    gamma: f64,
    tau: f64,
    rng: &mut impl Rng,
) -> Result<LossBreakdown> {
    if model.config.quantizer != QuantizerKind::Gmvq {
        return Err(Error::invalid("gmvq_loss needs a gmvq model"));
    }
    let mut m = model.clone();
    m.config.beta = beta;
    m.config.gamma = gamma;
    m.config.entropy_weight = 0.0;
    let noise = StepNoise::draw(rng, x.rows(), m.config.codebook_size, m.config.latent_dim);
    let mut g = Graph::new();
    let bound = m.bind(&mut g);
    let out = m.forward(&mut g, &bound, x, &noise, tau, Relaxation::Hard)?;
    Ok(out.gmvq.expect("gmvq terms").breakdown(&g))
}

/// VQ-VAE objective of one batch with codebook weight `alpha`.
pub fn vqvae_loss(x: &Array, model: &Model, alpha: f64) -> Result<f64> {
    let mut m = model.clone();
    m.config.quantizer = QuantizerKind::VqvaeSte;
    m.config.alpha = alpha;
    let noise = StepNoise::draw(
        &mut ChaCha8Rng::seed_from_u64(0),
        x.rows(),
        m.config.codebook_size,
        m.config.latent_dim,
    );
    let mut g = Graph::new();
    let bound = m.bind(&mut g);
    let out = m.forward(&mut g, &bound, x, &noise, 1.0, Relaxation::Hard)?;
    Ok(g.value(out.total).item())
}

/// Stochastic-VQ bound of one batch, reconstruction from one Gumbel draw.
pub fn stochastic_vq_bound(x: &Array, model: &Model, tau: f64, rng: &mut impl Rng) -> Result<f64> {
    let mut m = model.clone();
    m.config.quantizer = QuantizerKind::StochasticVq;
    m.config.entropy_weight = 0.0;
    let noise = StepNoise::draw(rng, x.rows(), m.config.codebook_size, m.config.latent_dim);
    let mut g = Graph::new();
    let bound = m.bind(&mut g);
    let out = m.forward(&mut g, &bound, x, &noise, tau, Relaxation::Hard)?;
    Ok(g.value(out.total).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad_check;

    fn small(kind: QuantizerKind) -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            latent_dim: 4,
            codebook_size: 5,
            encoder_hidden: vec![7],
            decoder_hidden: vec![7],
            quantizer: kind,
            seed: 3,
            ..Default::default()
        }
    }

    fn batch(rows: usize, cols: usize, seed: u64) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::matrix(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn shapes_and_seeding() {
        let cfg = small(QuantizerKind::Gmvq);
        let m = build_model(&cfg).unwrap();
        assert_eq!(m.encoder.out_dim(), 8);
        assert_eq!(m.decoder.out_dim(), 6);
        assert_eq!(build_model(&cfg).unwrap(), m);
        let x = batch(3, 6, 1);
        assert_eq!(m.infer(&x).unwrap().recon.shape(), x.shape());
        assert!(m.encode(&batch(3, 5, 1)).is_err());
    }

    #[test]
    fn every_kind_builds_a_finite_loss() {
        for kind in [
            QuantizerKind::Gmvq,
            QuantizerKind::VqvaeSte,
            QuantizerKind::StochasticVq,
        ] {
            let mut cfg = small(kind);
            cfg.entropy_weight = 0.5;
            let m = build_model(&cfg).unwrap();
            let x = batch(4, 6, 2);
            let noise = StepNoise::draw(&mut ChaCha8Rng::seed_from_u64(5), 4, 5, 4);
            let mut g = Graph::new();
            let b = m.bind(&mut g);
            let out = m
                .forward(&mut g, &b, &x, &noise, 1.0, Relaxation::Hard)
                .unwrap();
            assert!(g.value(out.total).item().is_finite());
            let grads = g.backward(out.total).unwrap();
            for (v, p) in b.vars().into_iter().zip(m.params()) {
                assert_eq!(grads.wrt_or_zeros(v, p).shape(), p.shape());
            }
        }
    }

    #[test]
    fn soft_path_gradients_match_finite_differences() {
        let m = build_model(&small(QuantizerKind::Gmvq)).unwrap();
        let x = batch(3, 6, 9);
        let noise = StepNoise::draw(&mut ChaCha8Rng::seed_from_u64(8), 3, 5, 4);
        let point: Vec<Array> = m.params().into_iter().cloned().collect();
        let check = grad_check(
            |g, vars| {
                let mut mm = m.clone();
                for (dst, &v) in mm.params_mut().into_iter().zip(vars) {
                    *dst = g.value(v).clone();
                }
                let b = mm.bind_vars(vars)?;
                Ok(mm.forward(g, &b, &x, &noise, 0.7, Relaxation::Soft)?.total)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-5, "{check:?}");
    }

    #[test]
    fn infer_is_deterministic_and_pure() {
        let m = build_model(&small(QuantizerKind::Gmvq)).unwrap();
        let before = m.clone();
        let x = batch(5, 6, 4);
        let a = m.infer(&x).unwrap();
        let b = m.infer(&x).unwrap();
        assert_eq!(a.recon, b.recon);
        assert_eq!(a.index, b.index);
        assert_eq!(m, before);
    }

    #[test]
    fn loss_wrappers() {
        let m = build_model(&small(QuantizerKind::Gmvq)).unwrap();
        let x = batch(4, 6, 6);
        let b = gmvq_loss(&x, &m, 2.0, 0.5, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((b.total - (b.recon + 0.5 * b.latent_reg + 0.5 * 2.0 * b.kl)).abs() < 1e-10);
        assert!(vqvae_loss(&x, &m, 1.0).unwrap() > 0.0);
        assert!(
            stochastic_vq_bound(&x, &m, 1.0, &mut ChaCha8Rng::seed_from_u64(1))
                .unwrap()
                .is_finite()
        );
    }
}
