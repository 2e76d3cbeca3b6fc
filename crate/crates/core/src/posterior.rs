//! Categorical posterior over codes and per-component variances.
//!
//! All graph functions take batched inputs: `zhat`/`what` are `B x L`, the
//! codebook means are `C x L`, and outputs are `B x C`.

use crate::array::Array;
use crate::codebook::Codebook;
use crate::diff::{Graph, Var};
use crate::error::{Error, Result};

/// Split a `B x 2L` encoder head into the proxy latent and positive weights.
///
/// Columns `[0, L)` are `zhat`; columns `[L, 2L)` are raw weights, passed
/// through softplus.
pub fn encoder_heads(g: &mut Graph, head: Var, latent_dim: usize) -> Result<(Var, Var)> {
    let width = g.value(head).cols();
    if width != 2 * latent_dim {
        return Err(Error::ShapeMismatch {
            op: "encoder_heads",
            lhs: g.shape(head).to_vec(),
            rhs: vec![2 * latent_dim],
        });
    }
    let zhat = g.slice_cols(head, 0, latent_dim)?;
    let raw = g.slice_cols(head, latent_dim, 2 * latent_dim)?;
    let what = g.softplus(raw)?;
    Ok((zhat, what))
}

/// `l_c = -1/2 sum_i what_i (zhat_i - mu_{c,i})^2`.
pub fn gm_logits(g: &mut Graph, zhat: Var, what: Var, means: Var) -> Result<Var> {
    let d = g.sq_dist(zhat, Some(what), means)?;
    g.scale(d, -0.5)
}

pub fn categorical_posterior(g: &mut Graph, logits: Var) -> Result<Var> {
    g.softmax_last(logits)
}

/// `sigma_c^2(x) = (||zhat - mu_c||^2 / L) / (2 sigma2)`.
pub fn component_variance(g: &mut Graph, zhat: Var, means: Var, sigma2: f64) -> Result<Var> {
    check_sigma2(sigma2)?;
    let l = g.value(zhat).cols() as f64;
    let d = g.sq_dist(zhat, None, means)?;
    g.scale(d, 1.0 / (l * 2.0 * sigma2))
}

/// Logits of the distance-based baseline posterior, `-||zhat - mu_c||^2 / (2 sigma2)`.
pub fn stochastic_vq_logits(g: &mut Graph, zhat: Var, means: Var, sigma2: f64) -> Result<Var> {
    check_sigma2(sigma2)?;
    let d = g.sq_dist(zhat, None, means)?;
    g.scale(d, -0.5 / sigma2)
}

pub fn stochastic_vq_posterior(g: &mut Graph, zhat: Var, means: Var, sigma2: f64) -> Result<Var> {
    let logits = stochastic_vq_logits(g, zhat, means, sigma2)?;
    g.softmax_last(logits)
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if sigma2 > 0.0 && sigma2.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "sigma2 must be positive, got {sigma2}"
        )))
    }
}

/// Everything the posterior computes for a batch, as plain arrays.
#[derive(Clone, Debug)]
pub struct PosteriorBundle {
    pub zhat: Array,
    pub what: Array,
    pub logits: Array,
    pub pi: Array,
    pub sigma2_c: Array,
}

impl PosteriorBundle {
    /// Evaluate from raw encoder heads (`B x 2L`) without recording gradients.
    pub fn from_heads(head: &Array, codebook: &Codebook, sigma2: f64) -> Result<Self> {
        let mut g = Graph::new();
        let h = g.constant(head.clone());
        let m = g.constant(codebook.means().clone());
        let (zhat, what) = encoder_heads(&mut g, h, codebook.dim())?;
        let logits = gm_logits(&mut g, zhat, what, m)?;
        let pi = categorical_posterior(&mut g, logits)?;
        let s2 = component_variance(&mut g, zhat, m, sigma2)?;
        Ok(Self {
            zhat: g.value(zhat).clone(),
            what: g.value(what).clone(),
            logits: g.value(logits).clone(),
            pi: g.value(pi).clone(),
            sigma2_c: g.value(s2).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn eval1(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Array {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).clone()
    }

    fn row(v: &[f64]) -> Array {
        Array::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn softplus_weights() {
        let w = eval1(|g| {
            let h = g.constant(row(&[0.3, -0.2, 0.0, 0.0]));
            Ok(encoder_heads(g, h, 2)?.1)
        });
        assert!(w
            .data()
            .iter()
            .all(|&v| (v - std::f64::consts::LN_2).abs() < 1e-15));
        let w = eval1(|g| {
            let h = g.constant(row(&[0.0, 10.0]));
            Ok(encoder_heads(g, h, 1)?.1)
        });
        assert!((w.item() - 10.0000453989).abs() < 1e-9);
    }

    #[test]
    fn head_width_checked() {
        let mut g = Graph::new();
        let h = g.constant(row(&[0.0, 0.0, 0.0]));
        assert!(encoder_heads(&mut g, h, 2).is_err());
    }

    #[test]
    fn logits_examples() {
        let l = eval1(|g| {
            let z = g.constant(row(&[1.0, 0.0]));
            let w = g.constant(row(&[2.0, 4.0]));
            let m = g.constant(Array::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]])?);
            gm_logits(g, z, w, m)
        });
        assert_eq!(l.data(), &[-1.0, 0.0]);
    }

    #[test]
    fn posterior_examples() {
        let p = eval1(|g| {
            let l = g.constant(row(&[0.0, -1.0]));
            categorical_posterior(g, l)
        });
        assert!((p.data()[0] - 0.7310585786).abs() < 1e-9);
        assert!((p.data()[1] - 0.2689414214).abs() < 1e-9);
    }

    #[test]
    fn variance_examples() {
        let v = eval1(|g| {
            let z = g.constant(row(&[2.0, 0.0]));
            let m = g.constant(Array::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]])?);
            component_variance(g, z, m, 1.0)
        });
        assert_eq!(v.data(), &[1.0, 0.0]);
        let mut g = Graph::new();
        let z = g.constant(row(&[0.0]));
        let m = g.constant(Array::from_rows(&[vec![0.0], vec![1.0]]).unwrap());
        assert!(component_variance(&mut g, z, m, 0.0).is_err());
        assert!(stochastic_vq_posterior(&mut g, z, m, -1.0).is_err());
    }

    #[test]
    fn stochastic_vq_matches_unit_weight_path() {
        let sigma2 = 0.7;
        let zhat = row(&[0.3, -0.4, 1.1]);
        let means = Array::from_rows(&[
            vec![0.0, 0.0, 0.0],
            vec![1.0, -1.0, 0.5],
            vec![0.3, 0.2, 1.0],
        ])
        .unwrap();
        let a = eval1(|g| {
            let z = g.constant(zhat.clone());
            let m = g.constant(means.clone());
            stochastic_vq_posterior(g, z, m, sigma2)
        });
        let b = eval1(|g| {
            let z = g.constant(zhat.clone());
            let w = g.constant(Array::full(&[1, 3], 1.0 / sigma2));
            let m = g.constant(means.clone());
            let l = gm_logits(g, z, w, m)?;
            categorical_posterior(g, l)
        });
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn equidistant_codes_give_uniform() {
        let p = eval1(|g| {
            let z = g.constant(row(&[0.0, 0.0]));
            let m = g.constant(Array::from_rows(&[
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![-1.0, 0.0],
                vec![0.0, -1.0],
            ])?);
            stochastic_vq_posterior(g, z, m, 1.0)
        });
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn far_codes_concentrate_mass() {
        let mut last = 0.0;
        for scale in [1.0, 3.0, 10.0] {
            let p = eval1(|g| {
                let z = g.constant(row(&[0.0]));
                let m = g.constant(Array::from_rows(&[vec![0.0], vec![scale], vec![-scale]])?);
                stochastic_vq_posterior(g, z, m, 1.0)
            });
            assert!(p.data()[0] > last);
            last = p.data()[0];
        }
        assert!(last > 1.0 - 1e-12);
    }

    #[test]
    fn bundle_invariants() {
        let cb =
            Codebook::new(Array::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap()).unwrap();
        let head =
            Array::from_rows(&[vec![1.0, 1.0, -3.0, 2.0], vec![0.2, 0.1, 0.0, 0.0]]).unwrap();
        let b = PosteriorBundle::from_heads(&head, &cb, 1.0).unwrap();
        for i in 0..2 {
            assert!((b.pi.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(b.what.data().iter().all(|&w| w > 0.0));
        assert_eq!(b.sigma2_c.get(0, 1), 0.0);
        assert!(b.sigma2_c.get(0, 0) > 0.0);
    }

    proptest! {
        #[test]
        fn argmax_pi_is_closest_weighted(vals in prop::collection::vec(-2.0f64..2.0, 3 + 3 + 15)) {
            let z = row(&vals[0..3]);
            let w = row(&vals[3..6].iter().map(|v| v.abs() + 0.05).collect::<Vec<_>>());
            let m = Array::matrix(5, 3, vals[6..].to_vec()).unwrap();
            let pi = eval1(|g| {
                let (z, w, m) = (g.constant(z.clone()), g.constant(w.clone()), g.constant(m.clone()));
                let l = gm_logits(g, z, w, m)?;
                categorical_posterior(g, l)
            });
            let dist: Vec<f64> = (0..5)
                .map(|c| (0..3).map(|i| w.data()[i] * (z.data()[i] - m.get(c, i)).powi(2)).sum())
                .collect();
            let best_d = (0..5).min_by(|&a, &b| dist[a].total_cmp(&dist[b])).unwrap();
            let best_p = (0..5).max_by(|&a, &b| pi.data()[a].total_cmp(&pi.data()[b])).unwrap();
            prop_assert!((dist[best_d] - dist[best_p]).abs() < 1e-12);
        }

        #[test]
        fn shift_invariance(vals in prop::collection::vec(-5.0f64..5.0, 6), shift in -50.0f64..50.0) {
            let a = eval1(|g| { let l = g.constant(row(&vals)); categorical_posterior(g, l) });
            let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
            let b = eval1(|g| { let l = g.constant(row(&shifted)); categorical_posterior(g, l) });
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }

        #[test]
        fn variance_scales_quadratically(vals in prop::collection::vec(-2.0f64..2.0, 4), t in 0.1f64..5.0) {
            let mu = Array::from_rows(&[vec![vals[0], vals[1]], vec![9.0, 9.0]]).unwrap();
            let d = [vals[2], vals[3]];
            let at = |s: f64| eval1(|g| {
                let z = g.constant(row(&[vals[0] + s * d[0], vals[1] + s * d[1]]));
                let m = g.constant(mu.clone());
                component_variance(g, z, m, 0.8)
            }).data()[0];
            let (base, scaled) = (at(1.0), at(t));
            prop_assert!(base >= 0.0);
            prop_assert!((scaled - t * t * base).abs() < 1e-10 * scaled.max(1.0));
        }

        #[test]
        fn closer_code_gains_probability(vals in prop::collection::vec(-2.0f64..2.0, 2 + 8), frac in 0.05f64..0.95) {
            // Move mu_0 part of the way towards zhat; the other distances do not change.
            let z = row(&vals[0..2]);
            let base = Array::matrix(4, 2, vals[2..].to_vec()).unwrap();
            let pi0 = |m: &Array| eval1(|g| {
                let (zv, w, mv) = (g.constant(z.clone()), g.constant(row(&[0.7, 1.3])), g.constant(m.clone()));
                let l = gm_logits(g, zv, w, mv)?;
                categorical_posterior(g, l)
            }).data()[0];
            let mut moved = base.clone();
            for (i, v) in vals.iter().enumerate().take(2) {
                moved.row_mut(0)[i] += frac * (v - base.get(0, i));
            }
            prop_assume!((0..2).any(|i| (vals[i] - base.get(0, i)).abs() > 1e-3));
            prop_assert!(pi0(&moved) > pi0(&base));
        }
    }
}
