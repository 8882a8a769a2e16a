//! Trains the desk-scale model on the synthetic corpus and prints a delta
//! sweep next to the truncated-depth baselines.
//!
//! cargo run --release -p confexit-core --example desk_run [epochs]

use confexit_core::bench::{sweep, truncated_baseline, SweepConfig};
use confexit_core::data::{encode_dataset, generate_synthetic, Example, SynthSpec, Vocab};
use confexit_core::{train, ExitConfig, Model, ModelConfig, TrainConfig};

fn main() -> confexit_core::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(8);
    let corpus = generate_synthetic(
        &SynthSpec {
            seed: 7,
            ..SynthSpec::default()
        },
        2500,
    )?;
    let examples: Vec<Example> = corpus.iter().map(|s| s.example.clone()).collect();
    let (train_set, test_set) = examples.split_at(2000);

    let cfg = ModelConfig::default();
    let texts: Vec<&str> = train_set.iter().map(|e| e.text.as_str()).collect();
    let vocab = Vocab::build(&texts, cfg.vocab_size)?;
    let train_enc = encode_dataset(train_set, &vocab, cfg.max_seq_len);
    let test_enc = encode_dataset(test_set, &vocab, cfg.max_seq_len);

    let tcfg = TrainConfig {
        epochs,
        seed: 7,
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let out = train(&train_enc, Model::new(cfg, 7)?, &tcfg)?;
    for m in &out.history {
        println!("{}", m.to_csv_line());
    }
    println!("trained in {:.1?}", start.elapsed());

    let model = out.model;
    let sweep_cfg = SweepConfig {
        exit: ExitConfig::default(),
        ..SweepConfig::default()
    };
    println!("delta  acc     cost   histogram");
    for p in sweep(&model, &test_enc, &sweep_cfg)? {
        println!(
            "{:.1}    {:.4}  {:.4}  {:?}",
            p.delta, p.accuracy, p.mean_cost_ratio, p.exit_histogram
        );
    }
    for b in truncated_baseline(&model, &test_enc, &[1, 2, 3, 4, 5, 6])? {
        println!(
            "depth {} acc {:.4} cost {:.4}",
            b.depth, b.accuracy, b.cost_ratio
        );
    }
    Ok(())
}
