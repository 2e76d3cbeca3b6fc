//! Training loop, evaluation and metrics output.

use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::data::Dataset;
use super::model::{build_model, Model, Relaxation};
use super::optim::{AdamW, LrSchedule};
use crate::array::Array;
use crate::codebook::kmeans_init;
use crate::diff::Graph;
use crate::error::{Error, Result};
use crate::losses::{aggregate_posterior, perplexity};
use crate::par;
use crate::sampling::{StepNoise, TemperatureSchedule};

pub const METRICS_HEADER: &str = "epoch,step,mse,perplexity,kl,latent_reg,tau,lr";

/// Training-batch averages over one epoch. `step` counts optimizer steps so
/// far; `tau` and `lr` are the values used by the epoch's last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: usize,
    pub mse: f64,
    pub perplexity: f64,
    pub kl: f64,
    pub latent_reg: f64,
    pub tau: f64,
    pub lr: f64,
}

pub fn write_metrics_csv(w: &mut impl Write, history: &[MetricsRecord]) -> io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in history {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.step, r.mse, r.perplexity, r.kl, r.latent_reg, r.tau, r.lr
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub model: Model,
    pub history: Vec<MetricsRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Setup(#[from] Error),
    /// A step produced a non-finite value. `last_good` holds the parameters
    /// before that step.
    #[error("diverged at epoch {epoch}, step {step}: {source}")]
    Diverged {
        epoch: usize,
        step: usize,
        source: Error,
        last_good: Box<Model>,
        history: Vec<MetricsRecord>,
    },
}

/// Stream id of the training RNG, distinct from model initialization.
const TRAIN_STREAM: u64 = 1;

fn train_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRAIN_STREAM);
    rng
}

/// Train `config` on `dataset`. The codebook is initialized by k-means on the
/// encoder outputs of the first batch; temperature and learning rate follow
/// their schedules per step.
pub fn train(config: &ModelConfig, dataset: &Dataset) -> Result<TrainRun, TrainError> {
    let mut model = build_model(config)?;
    if dataset.dim() != config.input_dim {
        return Err(Error::Config(format!(
            "dataset dimension {} differs from input_dim {}",
            dataset.dim(),
            config.input_dim
        ))
        .into());
    }
    let mut history = Vec::with_capacity(config.epochs);
    if config.epochs == 0 {
        return Ok(TrainRun { model, history });
    }
    let n = dataset.len();
    let bs = config.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs);
    let total = config.epochs * steps_per_epoch;
    let lrs = LrSchedule::new(
        config.learning_rate,
        total,
        config.warmup_fraction,
        config.warmup_start_factor,
    );
    let taus = TemperatureSchedule {
        tau_start: config.tau_start,
        tau_end: config.tau_end,
        total_steps: total,
        decay_fraction: config.tau_decay_fraction,
    };
    let mut rng = train_rng(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut opt = AdamW::new(&model.params(), config.weight_decay);
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        if epoch == 0 {
            let first = &order[..bs.max(config.codebook_size).min(n)];
            let zhat = model.encode(&dataset.batch(first))?;
            model.codebook = kmeans_init(
                &zhat,
                config.codebook_size,
                config.kmeans_iters,
                config.seed,
            )?;
        }
        let (mut mse, mut ppl, mut kl, mut lat) = (0.0, 0.0, 0.0, 0.0);
        let (mut tau, mut lr) = (0.0, 0.0);
        for idx in order.chunks(bs) {
            tau = taus.temperature(step);
            lr = lrs.lr(step);
            let x = dataset.batch(idx);
            let noise =
                StepNoise::draw(&mut rng, idx.len(), config.codebook_size, config.latent_dim);
            let outcome = (|| -> Result<_> {
                let mut g = Graph::new();
                let bound = model.bind(&mut g);
                let out = model.forward(&mut g, &bound, &x, &noise, tau, Relaxation::Hard)?;
                let grads = g.backward(out.total)?;
                let grads: Vec<Array> = bound
                    .vars()
                    .into_iter()
                    .zip(model.params())
                    .map(|(v, p)| grads.wrt_or_zeros(v, p))
                    .collect();
                if grads.iter().any(|a| !a.is_finite()) {
                    return Err(Error::NonFinite("gradient"));
                }
                Ok((out, grads))
            })();
            let (out, grads) = match outcome {
                Ok(v) => v,
                Err(e) => return Err(diverged(epoch, step, e, &model, history)),
            };
            let before = model.clone();
            opt.step(model.params_mut(), &grads, lr)?;
            if model.params().iter().any(|p| !p.is_finite()) {
                return Err(diverged(
                    epoch,
                    step,
                    Error::NonFinite("parameter update"),
                    &before,
                    history,
                ));
            }
            mse += out.recon / config.input_dim as f64;
            ppl += perplexity(&aggregate_posterior(&out.usage)?);
            kl += out.kl;
            lat += out.latent_reg;
            step += 1;
        }
        let k = steps_per_epoch as f64;
        let rec = MetricsRecord {
            epoch,
            step,
            mse: mse / k,
            perplexity: ppl / k,
            kl: kl / k,
            latent_reg: lat / k,
            tau,
            lr,
        };
        log::info!(
            "epoch {epoch} step {step} mse {:.5} perplexity {:.3} kl {:.4}",
            rec.mse,
            rec.perplexity,
            rec.kl
        );
        history.push(rec);
    }
    Ok(TrainRun { model, history })
}

fn diverged(
    epoch: usize,
    step: usize,
    source: Error,
    good: &Model,
    history: Vec<MetricsRecord>,
) -> TrainError {
    log::error!("training diverged at epoch {epoch}, step {step}: {source}");
    TrainError::Diverged {
        epoch,
        step,
        source,
        last_good: Box::new(good.clone()),
        history,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean squared error per input coordinate.
    pub mse: f64,
    /// Per-batch perplexity of the aggregated posterior, averaged over batches.
    pub perplexity: f64,
}

/// Noise-free evaluation in dataset order. Batches run in parallel when
/// enabled and are combined in order.
pub fn evaluate(model: &Model, dataset: &Dataset, batch_size: usize) -> Result<EvalReport> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let n = dataset.len();
    let starts: Vec<usize> = (0..n).step_by(batch_size).collect();
    let parts = par::map_collect(starts.len(), |b| -> Result<(f64, f64)> {
        let idx: Vec<usize> = (starts[b]..(starts[b] + batch_size).min(n)).collect();
        let x = dataset.batch(&idx);
        let inf = model.infer(&x)?;
        let sq: f64 = x
            .data()
            .iter()
            .zip(inf.recon.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        Ok((sq, perplexity(&aggregate_posterior(&inf.usage)?)))
    });
    let (mut sq, mut ppl) = (0.0, 0.0);
    for p in parts {
        let (s, q) = p?;
        sq += s;
        ppl += q;
    }
    Ok(EvalReport {
        mse: sq / (n * dataset.dim()) as f64,
        perplexity: ppl / starts.len() as f64,
    })
}
