//! Fully connected networks on the autodiff graph.

use rand::Rng;

use super::config::Activation;
use crate::array::Array;
use crate::diff::{Graph, Var};
use crate::error::{Error, Result};

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array,
    pub bias: Array,
}

impl Linear {
    /// Weights uniform in `[-a, a]` with `a = gain * sqrt(3 / fan_in)`, so
    /// their variance is `gain^2 / fan_in`; biases uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new(fan_in: usize, fan_out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let wb = gain * (3.0 / fan_in as f64).sqrt();
        let bb = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-wb..wb))
            .collect();
        let b = (0..fan_out).map(|_| rng.random_range(-bb..bb)).collect();
        Self {
            weight: Array::matrix(fan_in, fan_out, w).expect("sizes match"),
            bias: Array::vector(b),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

/// Graph handles for one network's parameters, in layer order.
pub type BoundMlp = Vec<(Var, Var)>;

impl Mlp {
    /// `sizes` lists every width from input to output. Weight gain is
    /// `sqrt(2)` for relu and `5/3` for tanh, which keeps activations at
    /// roughly unit scale.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        let gain = match activation {
            Activation::Relu => 2f64.sqrt(),
            Activation::Tanh => 5.0 / 3.0,
        };
        Self::with_gain(sizes, activation, gain, rng)
    }

    pub fn with_gain(
        sizes: &[usize],
        activation: Activation,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("bad layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], gain, rng))
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        self.layers
            .iter()
            .map(|l| (g.param(l.weight.clone()), g.param(l.bias.clone())))
            .collect()
    }

    /// Activation after every layer except the last.
    pub fn forward(&self, g: &mut Graph, bound: &BoundMlp, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in bound.iter().enumerate() {
            let xw = g.matmul(h, w)?;
            h = g.add(xw, b)?;
            if i + 1 < bound.len() {
                h = match self.activation {
                    Activation::Relu => g.relu(h)?,
                    Activation::Tanh => g.tanh(h)?,
                };
            }
        }
        Ok(h)
    }

    /// Forward pass on plain arrays.
    pub fn apply(&self, x: &Array) -> Result<Array> {
        let mut g = Graph::new();
        let bound: BoundMlp = self
            .layers
            .iter()
            .map(|l| (g.constant(l.weight.clone()), g.constant(l.bias.clone())))
            .collect();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &bound, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn params(&self) -> Vec<&Array> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn init_bounds_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Mlp::new(&[16, 8, 3], Activation::Relu, &mut rng).unwrap();
        assert_eq!((m.in_dim(), m.out_dim()), (16, 3));
        let a0 = (6.0f64 / 16.0).sqrt();
        assert!(m.layers[0].weight.data().iter().all(|v| v.abs() <= a0));
        assert!(m.layers[0].weight.data().iter().any(|v| v.abs() > 0.9 * a0));
        assert!(m.layers[0].bias.data().iter().all(|v| v.abs() <= 0.25));
        assert!(m.layers[1]
            .weight
            .data()
            .iter()
            .all(|v| v.abs() <= (6.0f64 / 8.0).sqrt()));
        let y = m.apply(&Array::zeros(&[5, 16])).unwrap();
        assert_eq!(y.shape(), &[5, 3]);
        assert!(Mlp::new(&[4], Activation::Relu, &mut rng).is_err());
    }

    #[test]
    fn forward_matches_hand_computation() {
        let m = Mlp {
            layers: vec![
                Linear {
                    weight: Array::from_rows(&[vec![1.0, -1.0]]).unwrap(),
                    bias: Array::vector(vec![0.0, 0.5]),
                },
                Linear {
                    weight: Array::from_rows(&[vec![2.0], vec![3.0]]).unwrap(),
                    bias: Array::vector(vec![1.0]),
                },
            ],
            activation: Activation::Relu,
        };
        // x = 2: hidden relu([2, -1.5]) = [2, 0]; out = 4 + 1.
        let y = m.apply(&Array::from_rows(&[vec![2.0]]).unwrap()).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }
}
