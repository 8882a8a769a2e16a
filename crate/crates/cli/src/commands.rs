use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use confexit_core::attnviz::{export_profile, read_profile, render_svg};
use confexit_core::bench::{export_curves, CurveFormat};
use confexit_core::data::{
    check_labels, encode_dataset, generate_synthetic, load_tsv, write_tsv, Example, Vocab,
};
use confexit_core::model::checkpoint;
use confexit_core::training::EpochMetrics;
use confexit_core::{
    cumulative_attention, forward_adaptive, puzzlement, sweep as run_sweep, train as run_train,
    truncated_baseline, write_atomic, Error, ExitDecision, LayerTrace, Model, SweepConfig,
    SynthSpec,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{
    Common, ExitArgs, InferArgs, ModelArgs, RenderArgs, SweepArgs, SynthArgs, TrainArgs, VizArgs,
};

fn push<T: ToString>(pairs: &mut Vec<(String, String)>, key: &str, value: Option<T>) {
    if let Some(v) = value {
        pairs.push((key.to_string(), v.to_string()));
    }
}

/// Config file, then `--set` pairs, then dedicated flags.
fn load_config(
    common: &Common,
    exit: Option<&ExitArgs>,
    extra: Vec<(String, String)>,
) -> Result<RunConfig> {
    let mut pairs = common.set.clone();
    push(&mut pairs, "seed", common.seed);
    push(&mut pairs, "out", common.out.as_ref().map(|p| p.display()));
    if let Some(e) = exit {
        push(&mut pairs, "delta", e.delta);
        push(&mut pairs, "window", e.window);
        push(&mut pairs, "criterion", e.criterion.as_ref());
        push(&mut pairs, "range_epsilon", e.range_epsilon);
        push(&mut pairs, "stages", e.stages.as_ref());
    }
    pairs.extend(extra);
    let cfg = RunConfig::load(common.config.as_deref(), &pairs)?;
    Ok(cfg)
}

fn load_examples(path: Option<&Path>, what: &str, num_classes: usize) -> Result<Vec<Example>> {
    let path = path.ok_or_else(|| Error::Config(format!("no {what} given")))?;
    let examples = load_tsv(path).with_context(|| format!("reading {what} {}", path.display()))?;
    if examples.is_empty() {
        return Err(Error::Input(format!("{what} {} is empty", path.display())).into());
    }
    check_labels(&examples, num_classes)?;
    Ok(examples)
}

fn metrics_log(history: &[EpochMetrics]) -> String {
    history.iter().map(|m| m.to_csv_line() + "\n").collect()
}

#[derive(Serialize)]
struct TrainSummary {
    out: PathBuf,
    seed: u64,
    final_loss: Option<f64>,
    test_accuracy: Option<f64>,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut extra = Vec::new();
    push(
        &mut extra,
        "train_data",
        args.data.as_ref().map(|p| p.display()),
    );
    push(
        &mut extra,
        "test_data",
        args.test.as_ref().map(|p| p.display()),
    );
    push(&mut extra, "epochs", args.epochs);
    let cfg = load_config(&args.common, None, extra)?;
    if args.repeat == 0 {
        return Err(Error::Config("--repeat must be at least 1".into()).into());
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));

    let train_ex = load_examples(
        cfg.train_data.as_deref(),
        "training data",
        cfg.model.num_classes,
    )?;
    let test_ex = match &cfg.test_data {
        Some(p) => Some(load_examples(Some(p), "test data", cfg.model.num_classes)?),
        None => None,
    };
    let texts: Vec<&str> = train_ex.iter().map(|e| e.text.as_str()).collect();
    let vocab = Vocab::build(&texts, cfg.model.vocab_size)?;
    let train_set = encode_dataset(&train_ex, &vocab, cfg.model.max_seq_len);
    let test_set = test_ex.map(|t| encode_dataset(&t, &vocab, cfg.model.max_seq_len));

    let mut summaries = Vec::new();
    for k in 0..args.repeat {
        let seed = cfg.seed + k as u64;
        let dir = if args.repeat == 1 {
            out.clone()
        } else {
            out.join(format!("run-{k}"))
        };
        let model = Model::with_t_init(cfg.model.clone(), seed, cfg.train.t_init)?;
        let outcome = run_train(&train_set, model, &cfg.train_config(seed))?;
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        for m in &outcome.history {
            log::info!("seed {seed} {}", m.to_csv_line());
        }
        checkpoint::save(&outcome.model, &dir.join("model.ckpt"))?;
        vocab.save(&dir.join("vocab.txt"))?;
        write_atomic(
            &dir.join("metrics.csv"),
            metrics_log(&outcome.history).as_bytes(),
        )?;

        let test_accuracy = match &test_set {
            Some(t) => Some(
                confexit_core::evaluate(&outcome.model, t, &confexit_core::ExitConfig::disabled())?
                    .accuracy,
            ),
            None => None,
        };
        let summary = TrainSummary {
            out: dir,
            seed,
            final_loss: outcome.history.last().map(|m| m.mean_total_loss),
            test_accuracy,
        };
        if !args.common.json {
            print!("trained seed {seed} -> {}", summary.out.display());
            if let Some(l) = summary.final_loss {
                print!(", final loss {l:.4}");
            }
            if let Some(a) = summary.test_accuracy {
                print!(", full-depth test accuracy {a:.4}");
            }
            println!();
        }
        summaries.push(summary);
    }
    if args.common.json {
        println!("{}", serde_json::to_string_pretty(&summaries)?);
    }
    Ok(())
}

fn load_model(args: &ModelArgs, cfg: &RunConfig) -> Result<(Model, Vocab)> {
    let model = checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    cfg.check_model(&model.cfg)?;
    let vocab_path = args.vocab.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("vocab.txt")
    });
    let vocab = Vocab::load(&vocab_path)
        .with_context(|| format!("loading vocabulary {}", vocab_path.display()))?;
    Ok((model, vocab))
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    let mut extra = Vec::new();
    push(
        &mut extra,
        "test_data",
        args.data.as_ref().map(|p| p.display()),
    );
    push(&mut extra, "deltas", args.deltas.as_ref());
    let cfg = load_config(&args.common, Some(&args.exit), extra)?;
    let (model, vocab) = load_model(&args.model, &cfg)?;
    let examples = load_examples(
        cfg.test_data.as_deref(),
        "evaluation data",
        model.cfg.num_classes,
    )?;
    let data = encode_dataset(&examples, &vocab, model.cfg.max_seq_len);

    let sweep_cfg = SweepConfig {
        deltas: cfg.deltas.clone(),
        exit: cfg.exit.clone(),
    };
    let points = run_sweep(&model, &data, &sweep_cfg)?;
    let baselines = if args.baselines {
        let depths: Vec<usize> = (1..=model.cfg.depth).collect();
        truncated_baseline(&model, &data, &depths)?
    } else {
        Vec::new()
    };

    if let Some(out) = &cfg.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        export_curves(&points, out, CurveFormat::from_path(out))?;
    }

    if args.common.json {
        let doc = serde_json::json!({ "points": points, "baselines": baselines });
        println!("{}", serde_json::to_string_pretty(&doc)?);
        return Ok(());
    }
    println!(
        "criterion {}, stages {}, window {}",
        cfg.exit.criterion,
        cfg.exit.stages_label(),
        cfg.exit.window_size
    );
    println!("{:>6} {:>9} {:>7}", "delta", "accuracy", "cost");
    for p in &points {
        println!(
            "{:>6.2} {:>9.4} {:>7.4}",
            p.delta, p.accuracy, p.mean_cost_ratio
        );
    }
    if !baselines.is_empty() {
        println!("{:>6} {:>9} {:>7}", "depth", "accuracy", "cost");
        for b in &baselines {
            println!("{:>6} {:>9.4} {:>7.4}", b.depth, b.accuracy, b.cost_ratio);
        }
    }
    Ok(())
}

fn encode_text(text: &str, vocab: &Vocab, model: &Model) -> Result<Vec<u32>> {
    if text.trim().is_empty() {
        return Err(Error::Input("text is empty".into()).into());
    }
    Ok(vocab.encode_unpadded(text, model.cfg.max_seq_len))
}

#[derive(Serialize)]
struct LayerReport {
    layer: usize,
    puzzlement: f64,
    label: usize,
    probs: Vec<f64>,
}

#[derive(Serialize)]
struct InferReport {
    label: usize,
    exit_layer: usize,
    depth: usize,
    reason: String,
    fired: bool,
    layers: Vec<LayerReport>,
}

fn infer_report(
    label: usize,
    decision: &ExitDecision,
    trace: &LayerTrace,
    depth: usize,
) -> InferReport {
    InferReport {
        label,
        exit_layer: decision.layer,
        depth,
        reason: decision.reason.to_string(),
        fired: decision.fired,
        layers: trace
            .dists
            .iter()
            .map(|d| LayerReport {
                layer: d.layer(),
                puzzlement: puzzlement(d),
                label: d.argmax(),
                probs: d.probs().to_vec(),
            })
            .collect(),
    }
}

pub fn infer(args: InferArgs) -> Result<()> {
    let cfg = load_config(&args.common, Some(&args.exit), Vec::new())?;
    let (model, vocab) = load_model(&args.model, &cfg)?;
    let ids = encode_text(&args.text, &vocab, &model)?;
    let (label, decision, trace) = forward_adaptive(&ids, &model, &cfg.exit)?;
    let report = infer_report(label, &decision, &trace, model.cfg.depth);
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &cfg.out {
        write_atomic(out, (json.clone() + "\n").as_bytes())?;
    }
    if args.common.json {
        println!("{json}");
        return Ok(());
    }
    println!("label {label}");
    println!(
        "exit layer {} of {} ({})",
        decision.layer, model.cfg.depth, decision.reason
    );
    println!("{:>5} {:>11} {:>5}  probs", "layer", "puzzlement", "label");
    for l in &report.layers {
        let probs: Vec<String> = l.probs.iter().map(|p| format!("{p:.4}")).collect();
        println!(
            "{:>5} {:>11.6} {:>5}  {}",
            l.layer,
            l.puzzlement,
            l.label,
            probs.join(" ")
        );
    }
    Ok(())
}

pub fn viz(args: VizArgs) -> Result<()> {
    let cfg = load_config(&args.common, Some(&args.exit), Vec::new())?;
    let (model, vocab) = load_model(&args.model, &cfg)?;
    let ids = encode_text(&args.text, &vocab, &model)?;
    let (_, decision, trace) = forward_adaptive(&ids, &model, &cfg.exit)?;
    let profile = cumulative_attention(&trace)?
        .with_tokens(vocab.decode(&ids))
        .with_exit(&decision);
    let out = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("profile.json"));
    export_profile(&profile, &out)?;
    if let Some(svg) = &args.svg {
        write_atomic(svg, render_svg(&profile).as_bytes())?;
    }
    if args.common.json {
        println!("{}", serde_json::to_string_pretty(&profile)?);
    } else {
        println!(
            "wrote {} ({} layers, exit {})",
            out.display(),
            profile.layers.len(),
            decision.reason
        );
    }
    Ok(())
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut spec = SynthSpec {
        seed: args.seed,
        ..SynthSpec::default()
    };
    if let Some(r) = args.negation_rate {
        spec.negation_rate = r;
    }
    let examples: Vec<Example> = generate_synthetic(&spec, args.n)?
        .into_iter()
        .map(|s| s.example)
        .collect();
    write_tsv(&examples, &args.out)?;
    Ok(())
}

pub fn render(args: RenderArgs) -> Result<()> {
    let profile = read_profile(&args.profile)?;
    write_atomic(&args.out, render_svg(&profile).as_bytes())?;
    Ok(())
}
