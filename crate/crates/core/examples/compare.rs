//! Train GM-VQ and the VQ-VAE baseline on the same synthetic data.
//!
//! Usage: `compare [key=value ...]`, where keys are model config keys.

use gmvq::harness::{evaluate, make_synthetic_dataset, train, ModelConfig, QuantizerKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = make_synthetic_dataset(16, 64, 4096, 3.0, 0.15, 7)?;
    for quantizer in [QuantizerKind::Gmvq, QuantizerKind::VqvaeSte] {
        let mut cfg = ModelConfig {
            quantizer,
            gamma: 1.0,
            ..Default::default()
        };
        for kv in std::env::args().skip(1) {
            let (k, v) = kv.split_once('=').ok_or("expected key=value")?;
            cfg.set(k, v)?;
        }
        let run = train(&cfg, &data)?;
        let report = evaluate(&run.model, &data, cfg.batch_size)?;
        println!(
            "{:>13}  mse {:.5}  perplexity {:.2}",
            quantizer.to_string(),
            report.mse,
            report.perplexity
        );
    }
    Ok(())
}
