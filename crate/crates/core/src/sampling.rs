//! Gumbel-Softmax selection, the continuous reparameterization, the STE
//! quantizer and the temperature schedule.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::array::Array;
use crate::codebook::{nearest_row, Codebook};
use crate::diff::{softmax_in_place, Graph, Var};
use crate::error::{Error, Result};

const U_MIN: f64 = 1e-10;

/// One Gumbel(0, 1) draw, `-ln(-ln u)` with `u` clamped away from 0 and 1.
pub fn gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.random::<f64>().clamp(U_MIN, 1.0 - U_MIN);
    -(-u.ln()).ln()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

/// Sample a relaxed one-hot from `log_pi`: returns the tempered softmax of the
/// Gumbel-perturbed log-probabilities and the index of its largest entry.
pub fn gumbel_softmax_sample(
    log_pi: &[f64],
    tau: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, usize)> {
    check_tau(tau)?;
    if log_pi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gumbel_softmax_sample"));
    }
    let mut soft: Vec<f64> = log_pi.iter().map(|lp| (lp + gumbel(rng)) / tau).collect();
    softmax_in_place(&mut soft);
    let j = argmax(&soft);
    Ok((soft, j))
}

/// Noise for one batch: Gumbel draws (`B x C`) and standard normals (`B x L`).
#[derive(Clone, Debug)]
pub struct StepNoise {
    pub gumbel: Array,
    pub eps: Array,
}

impl StepNoise {
    pub fn draw(rng: &mut impl Rng, batch: usize, codes: usize, latent: usize) -> Self {
        let g = (0..batch * codes).map(|_| gumbel(rng)).collect();
        let e = (0..batch * latent)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Self {
            gumbel: Array::matrix(batch, codes, g).expect("positive dims"),
            eps: Array::matrix(batch, latent, e).expect("positive dims"),
        }
    }
}

/// Relaxed and hard categorical selections for a batch.
pub struct GumbelSelection {
    /// `softmax((log_pi + g) / tau)`, on the graph.
    pub soft: Var,
    /// Exact one-hot rows at the argmax of `soft`.
    pub hard: Array,
    pub index: Vec<usize>,
}

impl GumbelSelection {
    /// One-hot forward value with the adjoint routed to `soft`.
    pub fn straight_through(&self, g: &mut Graph) -> Result<Var> {
        g.straight_through(self.hard.clone(), self.soft)
    }
}

pub fn gumbel_softmax(
    g: &mut Graph,
    log_pi: Var,
    gumbel: &Array,
    tau: f64,
) -> Result<GumbelSelection> {
    check_tau(tau)?;
    let noise = g.constant(gumbel.clone());
    let perturbed = g.add(log_pi, noise)?;
    let scaled = g.scale(perturbed, 1.0 / tau)?;
    let soft = g.softmax_last(scaled)?;
    let sv = g.value(soft);
    let (rows, cols) = (sv.rows(), sv.cols());
    let mut hard = Array::zeros(&[rows, cols]);
    let mut index = Vec::with_capacity(rows);
    for i in 0..rows {
        let j = argmax(sv.row(i));
        hard.row_mut(i)[j] = 1.0;
        index.push(j);
    }
    Ok(GumbelSelection { soft, hard, index })
}

/// `z = c_q^T M + sigma_c * eps`, with `sigma_c` a `B x 1` column broadcast over `L`.
pub fn reparameterize_z(
    g: &mut Graph,
    c_q: Var,
    means: Var,
    sigma_c: Var,
    eps: &Array,
) -> Result<Var> {
    if g.value(sigma_c).data().iter().any(|&s| s < 0.0) {
        return Err(Error::invalid("negative sigma_c"));
    }
    let mu = g.matmul(c_q, means)?;
    let e = g.constant(eps.clone());
    let noise = g.mul(sigma_c, e)?;
    g.add(mu, noise)
}

/// Nearest-code quantization with an identity Jacobian back to `zhat`.
pub fn ste_quantize(g: &mut Graph, zhat: Var, codebook: &Codebook) -> Result<(Var, Vec<usize>)> {
    let zv = g.value(zhat);
    if zv.cols() != codebook.dim() {
        return Err(Error::ShapeMismatch {
            op: "ste_quantize",
            lhs: zv.shape().to_vec(),
            rhs: codebook.means().shape().to_vec(),
        });
    }
    let index: Vec<usize> = (0..zv.rows())
        .map(|i| nearest_row(codebook.means(), zv.row(i)).0)
        .collect();
    let q = codebook.means().select_rows(&index).reshape(zv.shape())?;
    Ok((g.straight_through(q, zhat)?, index))
}

/// A single draw from the joint variational posterior for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub index: usize,
    pub c_q: Vec<f64>,
    pub eps: Vec<f64>,
    pub z: Vec<f64>,
}

impl LatentSample {
    /// Draw a component from `log_pi` by Gumbel-max and `z ~ N(mu_c, sigma2_c I)`.
    pub fn draw(
        log_pi: &[f64],
        sigma2_c: &[f64],
        codebook: &Codebook,
        tau: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (_, index) = gumbel_softmax_sample(log_pi, tau, rng)?;
        let mut c_q = vec![0.0; log_pi.len()];
        c_q[index] = 1.0;
        let sigma = sigma2_c[index].sqrt();
        let eps: Vec<f64> = (0..codebook.dim())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let z = codebook
            .row(index)
            .iter()
            .zip(&eps)
            .map(|(m, e)| m + sigma * e)
            .collect();
        Ok(Self { index, c_q, eps, z })
    }
}

/// Exponential decay from `tau_start` to `tau_end`, reaching the floor after
/// `decay_fraction` of `total_steps` and staying there.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub total_steps: usize,
    pub decay_fraction: f64,
}

impl TemperatureSchedule {
    pub fn new(total_steps: usize) -> Self {
        Self {
            tau_start: 2.0,
            tau_end: 0.1,
            total_steps,
            decay_fraction: 0.8,
        }
    }

    fn decay_steps(&self) -> f64 {
        (self.decay_fraction * self.total_steps as f64).max(1.0)
    }

    pub fn temperature(&self, step: usize) -> f64 {
        let decay = self.decay_steps();
        let t = step as f64;
        if t >= decay {
            return self.tau_end;
        }
        let rate = (self.tau_start / self.tau_end).ln() / decay;
        (self.tau_start * (-rate * t).exp()).clamp(self.tau_end, self.tau_start)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn uniform_binary_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lp = [0.5f64.ln(); 2];
        let n = 100_000;
        let ones = (0..n)
            .filter(|_| gumbel_softmax_sample(&lp, 1.0, &mut rng).unwrap().1 == 1)
            .count();
        assert!((ones as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn low_temperature_is_nearly_one_hot() {
        // With perturbed logits separated by gap d, 1 - soft_max <= (C - 1) exp(-d / tau).
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lp: Vec<f64> = [0.1f64, 0.2, 0.3, 0.4].iter().map(|p| p.ln()).collect();
        let tau = 0.01;
        let safe_gap = tau * (3.0f64 / 1e-3).ln();
        let mut close = 0;
        for _ in 0..2000 {
            let noise = StepNoise::draw(&mut rng, 1, 4, 1);
            let mut g = Graph::new();
            let l = g.constant(Array::matrix(1, 4, lp.clone()).unwrap());
            let sel = gumbel_softmax(&mut g, l, &noise.gumbel, tau).unwrap();
            let soft = g.value(sel.soft).data().to_vec();
            let err = soft
                .iter()
                .zip(sel.hard.data())
                .map(|(s, h)| (s - h).abs())
                .fold(0.0, f64::max);
            let mut pert: Vec<f64> = lp
                .iter()
                .zip(noise.gumbel.data())
                .map(|(a, b)| a + b)
                .collect();
            pert.sort_by(|a, b| b.total_cmp(a));
            if pert[0] - pert[1] >= safe_gap {
                assert!(err < 1e-3, "{soft:?}");
            }
            close += usize::from(err < 1e-3);
        }
        assert!(close > 1800, "{close}");
    }

    #[test]
    fn bad_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(gumbel_softmax_sample(&[0.0, 0.0], 0.0, &mut rng).is_err());
        let mut g = Graph::new();
        let lp = g.constant(Array::vector(vec![0.0, 0.0]));
        assert!(gumbel_softmax(&mut g, lp, &Array::vector(vec![0.0, 0.0]), -1.0).is_err());
    }

    #[test]
    fn graph_selection_matches_argmax() {
        let mut g = Graph::new();
        let lp =
            g.param(Array::from_rows(&[vec![0.0, -1.0, -2.0], vec![-3.0, 0.0, -0.5]]).unwrap());
        let noise = Array::from_rows(&[vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let sel = gumbel_softmax(&mut g, lp, &noise, 0.5).unwrap();
        assert_eq!(sel.index, vec![1, 1]);
        assert_eq!(sel.hard.data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        let st = sel.straight_through(&mut g).unwrap();
        assert_eq!(g.value(st), &sel.hard);
    }

    fn codebook() -> Codebook {
        Codebook::new(Array::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap()).unwrap()
    }

    #[test]
    fn reparameterize_examples() {
        let cb = codebook();
        let mut g = Graph::new();
        let m = g.param(cb.means().clone());
        let c = g.constant(Array::matrix(1, 2, vec![0.0, 1.0]).unwrap());
        let eps = Array::matrix(1, 2, vec![0.5, -0.5]).unwrap();

        let zero = g.constant(Array::matrix(1, 1, vec![0.0]).unwrap());
        let z = reparameterize_z(&mut g, c, m, zero, &eps).unwrap();
        assert_eq!(g.value(z).data(), &[1.0, 1.0]);

        let two = g.param(Array::matrix(1, 1, vec![2.0]).unwrap());
        let z = reparameterize_z(&mut g, c, m, two, &eps).unwrap();
        assert_eq!(g.value(z).data(), &[2.0, 0.0]);

        let s = g.sum(z).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(m).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(grads.get(two).unwrap().item(), 0.0);

        let zero_eps = Array::zeros(&[1, 2]);
        let z = reparameterize_z(&mut g, c, m, two, &zero_eps).unwrap();
        assert_eq!(g.value(z).data(), &[1.0, 1.0]);

        let neg = g.constant(Array::matrix(1, 1, vec![-0.1]).unwrap());
        assert!(reparameterize_z(&mut g, c, m, neg, &eps).is_err());
    }

    #[test]
    fn ste_examples() {
        let cb = codebook();
        let mut g = Graph::new();
        let zhat = g.param(Array::from_rows(&[vec![0.9, 0.8], vec![1.0, 1.0]]).unwrap());
        let (zq, idx) = ste_quantize(&mut g, zhat, &cb).unwrap();
        assert_eq!(idx, vec![1, 1]);
        assert_eq!(g.value(zq).data(), &[1.0, 1.0, 1.0, 1.0]);
        let s = g.sum(zq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(zhat).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn latent_sample_invariant() {
        let cb = codebook();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let s = LatentSample::draw(
                &[0.3f64.ln(), 0.7f64.ln()],
                &[0.25, 4.0],
                &cb,
                1.0,
                &mut rng,
            )
            .unwrap();
            assert_eq!(s.c_q.iter().sum::<f64>(), 1.0);
            assert_eq!(s.c_q[s.index], 1.0);
            let sigma = [0.5, 2.0][s.index];
            for i in 0..2 {
                assert!((s.z[i] - (cb.row(s.index)[i] + sigma * s.eps[i])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn schedule_endpoints_and_monotone() {
        let s = TemperatureSchedule::new(1000);
        assert_eq!(s.temperature(0), 2.0);
        assert_eq!(s.temperature(800), 0.1);
        assert_eq!(s.temperature(5000), 0.1);
        let mut prev = f64::INFINITY;
        for t in 0..1200 {
            let tau = s.temperature(t);
            assert!(tau <= prev && (0.1..=2.0).contains(&tau));
            prev = tau;
        }
        assert_eq!(TemperatureSchedule::new(0).temperature(1), 0.1);
    }
}
