//! The shared `C x L` codebook of component means.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::array::Array;
use crate::binio;
use crate::diff::{Graph, Var};
use crate::error::{Error, Result};
use crate::par;

/// Component means `mu_c`, one row per code.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    means: Array,
}

impl Codebook {
    pub fn new(means: Array) -> Result<Self> {
        if means.shape().len() != 2 || means.rows() < 2 {
            return Err(Error::invalid(format!(
                "codebook needs shape C x L with C >= 2, got {:?}",
                means.shape()
            )));
        }
        if !means.is_finite() {
            return Err(Error::NonFinite("codebook"));
        }
        Ok(Self { means })
    }

    pub fn size(&self) -> usize {
        self.means.rows()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn means(&self) -> &Array {
        &self.means
    }

    pub fn means_mut(&mut self) -> &mut Array {
        &mut self.means
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.means.row(j)
    }

    /// Index of the closest mean in Euclidean distance; ties go to the lowest index.
    pub fn nearest(&self, zhat: &[f64]) -> Result<usize> {
        if zhat.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "nearest",
                lhs: vec![zhat.len()],
                rhs: self.means.shape().to_vec(),
            });
        }
        if zhat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("nearest"));
        }
        Ok(nearest_row(&self.means, zhat).0)
    }

    pub fn write_section(&self, w: &mut impl Write) -> Result<()> {
        binio::write_header(w)?;
        binio::write_u32(w, binio::to_u32(self.size(), "C")?)?;
        binio::write_u32(w, binio::to_u32(self.dim(), "L")?)?;
        binio::write_f32s(w, self.means.data())
    }

    pub fn read_section(r: &mut impl Read) -> Result<Self> {
        binio::read_header(r)?;
        let c = binio::read_u32(r)? as usize;
        let l = binio::read_u32(r)? as usize;
        if c == 0 || l == 0 {
            return Err(Error::Format(format!("codebook section {c} x {l}")));
        }
        let data = binio::read_f32s(r, c * l)?;
        Self::new(Array::matrix(c, l, data)?)
    }
}

/// `(index, squared distance)` of the row of `m` closest to `x`.
pub(crate) fn nearest_row(m: &Array, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..m.rows() {
        let d: f64 = m.row(j).iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// `c_q^T M` for one-hot rows `c_q` (`B x C`, or a single length-`C` vector).
///
/// The result is a graph node, so adjoints reach the selected rows of `M`.
pub fn lookup(g: &mut Graph, means: Var, c_q: &Array) -> Result<Var> {
    let c = g.shape(means)[0];
    if c_q.cols() != c {
        return Err(Error::ShapeMismatch {
            op: "lookup",
            lhs: c_q.shape().to_vec(),
            rhs: g.shape(means).to_vec(),
        });
    }
    for i in 0..c_q.rows() {
        let row = c_q.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != c {
            return Err(Error::NotOneHot);
        }
    }
    let sel = g.constant(c_q.clone().reshape(&[c_q.rows(), c])?);
    g.matmul(sel, means)
}

/// Result of a k-means run, with the objective after each assignment step.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub codebook: Codebook,
    pub objective: Vec<f64>,
}

/// k-means++ seeding followed by `iters` Lloyd iterations on the rows of `latents`.
pub fn kmeans_init(latents: &Array, c: usize, iters: usize, seed: u64) -> Result<Codebook> {
    kmeans_fit(latents, c, iters, seed).map(|f| f.codebook)
}

pub fn kmeans_fit(latents: &Array, c: usize, iters: usize, seed: u64) -> Result<KMeansFit> {
    let n = latents.rows();
    if n < c {
        return Err(Error::invalid(format!(
            "k-means needs N >= C, got N={n}, C={c}"
        )));
    }
    if c < 2 || iters == 0 {
        return Err(Error::invalid("k-means needs C >= 2 and iters >= 1"));
    }
    if !latents.is_finite() {
        return Err(Error::NonFinite("kmeans_init"));
    }
    let l = latents.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus(latents, c, &mut rng);
    let mut objective = Vec::with_capacity(iters);

    for _ in 0..iters {
        let assign: Vec<(usize, f64)> =
            par::map_collect(n, |i| nearest_row(&centroids, latents.row(i)));
        objective.push(assign.iter().map(|a| a.1).sum());

        let mut sums = vec![0.0; c * l];
        let mut counts = vec![0usize; c];
        for (i, &(j, _)) in assign.iter().enumerate() {
            counts[j] += 1;
            for (s, v) in sums[j * l..(j + 1) * l].iter_mut().zip(latents.row(i)) {
                *s += v;
            }
        }
        // Points already used to re-seed an empty cluster this round.
        let mut taken = vec![false; n];
        for j in 0..c {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                for (dst, s) in centroids.row_mut(j).iter_mut().zip(&sums[j * l..]) {
                    *dst = s * inv;
                }
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| assign[a].1.total_cmp(&assign[b].1).then(b.cmp(&a)))
                    .expect("N >= C");
                taken[far] = true;
                centroids.row_mut(j).copy_from_slice(latents.row(far));
            }
        }
    }

    jitter_duplicates(&mut centroids, &mut rng);
    Ok(KMeansFit {
        codebook: Codebook::new(centroids)?,
        objective,
    })
}

fn plus_plus(x: &Array, c: usize, rng: &mut ChaCha8Rng) -> Array {
    let (n, l) = (x.rows(), x.cols());
    let mut centroids = Array::zeros(&[c, l]);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(x.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(x.row(i), centroids.row(0)))
        .collect();

    for k in 1..c {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            // Guard against rounding leaving `target` past the last positive weight.
            if d2[idx] == 0.0 {
                idx = d2.iter().rposition(|&w| w > 0.0).unwrap_or(idx);
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(k).copy_from_slice(x.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), centroids.row(k)));
        }
    }
    centroids
}

fn jitter_duplicates(centroids: &mut Array, rng: &mut ChaCha8Rng) {
    for j in 1..centroids.rows() {
        let dup = (0..j).any(|k| centroids.row(k) == centroids.row(j));
        if dup {
            for v in centroids.row_mut(j) {
                *v += 1e-4 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}
