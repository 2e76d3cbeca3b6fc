//! Datasets: the synthetic Gaussian-mixture generator and the binary file format.
//!
//! File layout, little-endian: `N: u32`, `D: u32`, `N * D` f32 values in
//! row-major order, then optionally `N` u32 labels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::array::Array;
use crate::binio::{read_f32s, read_u32, to_u32, write_f32s, write_u32};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub data: Array,
    pub labels: Option<Vec<u32>>,
}

impl Dataset {
    pub fn new(data: Array, labels: Option<Vec<u32>>) -> Result<Self> {
        if data.shape().len() != 2 || data.rows() == 0 || data.cols() == 0 {
            return Err(Error::invalid(format!(
                "dataset must be a non-empty N x D matrix, got {:?}",
                data.shape()
            )));
        }
        if labels.as_ref().is_some_and(|l| l.len() != data.rows()) {
            return Err(Error::invalid("label count differs from row count"));
        }
        Ok(Self { data, labels })
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn batch(&self, idx: &[usize]) -> Array {
        self.data.select_rows(idx)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_u32(w, to_u32(self.len(), "N")?)?;
        write_u32(w, to_u32(self.dim(), "D")?)?;
        write_f32s(w, self.data.data())?;
        if let Some(labels) = &self.labels {
            for &l in labels {
                write_u32(w, l)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let n = read_u32(r)? as usize;
        let d = read_u32(r)? as usize;
        let values =
            read_f32s(r, n * d).map_err(|_| Error::Format("truncated dataset body".into()))?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        let labels = match rest.len() {
            0 => None,
            k if k == 4 * n => Some(
                rest.chunks_exact(4)
                    .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            k => {
                return Err(Error::Format(format!(
                    "{k} trailing bytes, expected 0 or {}",
                    4 * n
                )))
            }
        };
        Self::new(Array::matrix(n, d, values)?, labels).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// `n` points from `k` isotropic Gaussians in `R^d` with standard deviation
/// `spread`. Means are uniform on the sphere of the given `radius`; every
/// cluster receives `n / k` or `n / k + 1` points, in shuffled order.
pub fn make_synthetic_dataset(
    k: usize,
    d: usize,
    n: usize,
    radius: f64,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if k < 2 || d == 0 || n < k {
        return Err(Error::invalid(format!(
            "need k >= 2, d >= 1, n >= k; got k={k} d={d} n={n}"
        )));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::invalid(format!(
            "radius must be positive, got {radius}"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid(format!(
            "spread must be non-negative, got {spread}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(k);
    while means.len() < k {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            means.push(
                v.into_iter()
                    .map(|x| radius * x / norm)
                    .collect::<Vec<f64>>(),
            );
        }
    }
    let mut labels: Vec<u32> = (0..n).map(|i| (i % k) as u32).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * d);
    for &l in &labels {
        for &m in &means[l as usize] {
            let e: f64 = rng.sample(StandardNormal);
            data.push(m + spread * e);
        }
    }
    Dataset::new(Array::matrix(n, d, data)?, Some(labels))
}
