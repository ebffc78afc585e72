//! Trains the modified preset on a synthetic 16×16 dataset and prints the trace.
//!
//! `cargo run --release -p bvar-core --example desk_train -- [epochs] [lr] [rho_init] [kl_weight_mode]`

use std::time::Instant;

use bvar::data::{split, synth_generate};
use bvar::network::{BayesianNetwork, InitOptions, NetworkSpec};
use bvar::training::{train, KlWeightMode, OptimizerKind, TrainingConfig};
use bvar::{rng, tensor::Padding};

fn main() -> bvar::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let config = TrainingConfig {
        epochs: arg(0, 8.0) as usize,
        learning_rate: arg(1, 1e-3),
        rho_init: arg(2, -5.0),
        optimizer: OptimizerKind::Adam,
        kl_weight_mode: KlWeightMode::parse(args.get(3).map_or("uniform", |s| s.as_str()))?,
        batch_size: 32,
        eval_samples: 5,
        seed: 7,
        ..TrainingConfig::for_arch("modified_bayesian_cnn")
    };
    let splits = split(synth_generate(500, 16, 7, 0.0)?, 7)?;
    let spec = NetworkSpec::preset("modified_bayesian_cnn", [3, 16, 16], Padding::Same)?;
    let init = InitOptions {
        rho_init: config.rho_init,
        ..InitOptions::default()
    };
    let model = BayesianNetwork::new(spec, config.prior, init, &mut rng::seeded(config.seed))?;
    println!("parameters: {}", model.num_parameters());
    let start = Instant::now();
    let (_, trace) = train(model, &splits, &config)?;
    print!("{}", trace.to_csv());
    println!("selected epoch {} after {:.1}s", trace.selected + 1, start.elapsed().as_secs_f64());
    Ok(())
}
