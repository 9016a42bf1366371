//! The `mapl` command line.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::backbones::fixtures::{Backbones, FixtureConfig, MANIFEST_FILE};
use crate::backbones::synth::{caption_text, CaptionExample};
use crate::backbones::{build_fixtures, init_lm, init_vision, load_fixtures, LmConfig, PretrainConfig, ToyImage, Vocabulary};
use crate::config::{read_config, render_config, resolve_seed, RunManifest};
use crate::datafilter::{self, fraction_count, Rule};
use crate::error::{Error, Result};
use crate::inference::{evaluate_captions, evaluate_vqa};
use crate::mapper::{count_parameters, Mapper, MapperConfig, Size, Variant};
use crate::tensor::Checkpoint;
use crate::trainer::{curve_csv, mapper_grad_check, train_with_progress, TrainConfig, SMALL_DATA_WARMUP};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CURVE_FILE: &str = "curve.csv";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const FILTERED_FILE: &str = "filtered.tsv";

/// Gradient-check pass threshold on the maximum relative error.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;
/// Lowest acceptable fixture-LM accuracy on held-out questions.
pub const QUALIFICATION_THRESHOLD: f64 = 0.95;

#[derive(Parser, Debug)]
#[command(name = "mapl", version, about = "Train and evaluate a prefix-mapping network over frozen toy backbones")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the frozen vision encoder, the pre-trained LM, the vocabulary and the dataset.
    MakeFixtures(MakeFixturesArgs),
    /// Train a mapper on the fixture captions.
    Train(TrainArgs),
    /// Evaluate a trained mapper on captioning or VQA.
    Eval(EvalArgs),
    /// Keep the best-scored pairs of a TSV file.
    Filter(FilterArgs),
    /// Print the mapper's trainable parameter count.
    CountParams(CountArgs),
    /// Compare analytic and finite-difference gradients of the full loss.
    GradCheck(GradCheckArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct MakeFixturesArgs {
    #[arg(long, default_value_t = 3)]
    grid: usize,
    #[arg(long, default_value_t = 5)]
    colors: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    d_in: usize,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 200)]
    n_eval: usize,
    #[arg(long, default_value_t = PretrainConfig::default().steps)]
    pretrain_steps: usize,
    /// Fail when the LM answers fewer held-out questions than this.
    #[arg(long, default_value_t = QUALIFICATION_THRESHOLD)]
    min_qualification: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    fixtures: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Replace every image with zeros.
    #[arg(long)]
    blind: bool,
    #[arg(long)]
    variant: Option<Variant>,
    /// Train on this fraction of the training captions.
    #[arg(long)]
    data_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Task {
    Caption,
    Vqa,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_enum)]
    task: Task,
    #[arg(long, default_value_t = 0)]
    shots: usize,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    fixtures: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluate only the first N examples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
#[group(skip)]
#[command(group(ArgGroup::new("rule").required(true).multiple(false)))]
struct FilterArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, group = "rule")]
    top_k: Option<usize>,
    #[arg(long, group = "rule", allow_negative_numbers = true)]
    threshold: Option<f64>,
    #[arg(long, group = "rule")]
    fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    size: Option<Size>,
    /// Also write a manifest into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use these frozen backbones instead of freshly drawn ones.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Coordinates perturbed per tensor (evenly strided).
    #[arg(long, default_value_t = 16)]
    samples: usize,
    /// Self-test: corrupt the analytic gradient before comparing.
    #[arg(long)]
    corrupt: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    manifest: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let started = Instant::now();
    let result = match cli.command {
        Command::MakeFixtures(a) => make_fixtures(a, argv, started),
        Command::Train(a) => train_cmd(a, argv, started),
        Command::Eval(a) => eval_cmd(a, argv, started),
        Command::Filter(a) => filter_cmd(a, argv, started),
        Command::CountParams(a) => count_cmd(a, argv, started),
        Command::GradCheck(a) => grad_check_cmd(a, argv, started),
        Command::Replay(a) => replay_cmd(a),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// `argv` with `--seed` made explicit.
fn with_seed(mut argv: Vec<String>, seed: u64) -> Vec<String> {
    if !argv.iter().any(|a| a == "--seed" || a.starts_with("--seed=")) {
        argv.push("--seed".into());
        argv.push(seed.to_string());
    }
    argv
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn finish_manifest(mut m: RunManifest, dir: &Path, started: Instant) -> Result<()> {
    m.duration_secs = started.elapsed().as_secs_f64();
    write_file(&dir.join(MANIFEST_FILE), &m.to_text())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn make_fixtures(a: MakeFixturesArgs, argv: Vec<String>, started: Instant) -> Result<bool> {
    let seed = resolve_seed(a.seed)?;
    let cfg = FixtureConfig {
        grid: a.grid,
        colors: a.colors,
        d_in: a.d_in,
        n_train: a.n_train,
        n_eval: a.n_eval,
        seed,
        pretrain: PretrainConfig {
            steps: a.pretrain_steps,
            ..PretrainConfig::default()
        },
    };
    let fx = build_fixtures(&cfg)?;
    let files = fx.write(&a.out)?;
    let mut m = RunManifest::new("make-fixtures", with_seed(argv, seed));
    m.seeds.push(("fixtures".into(), seed));
    m.config = cfg.to_pairs();
    m.config.push(("lm.final_loss".into(), fx.lm_final_loss.to_string()));
    m.config.push(("lm.qualification".into(), fx.qualification.to_string()));
    for f in &files {
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        m.outputs.push((name, display(f)));
    }
    finish_manifest(m, &a.out, started)?;
    let ok = fx.qualification >= a.min_qualification;
    println!(
        "fixtures: {} files in {} (lm final loss {:.4}, qualification {:.3}{})",
        files.len(),
        a.out.display(),
        fx.lm_final_loss,
        fx.qualification,
        if ok { "" } else { ", below threshold" }
    );
    Ok(ok)
}

/// Toy mapper sized to the fixture backbones: every grid row in, one extra
/// prefix row out.
pub fn fixture_mapper_config(b: &Backbones) -> MapperConfig {
    let cells = b.grid * b.grid;
    MapperConfig {
        d_in: b.d_in(),
        d_out: b.lm_cfg.d_model,
        l_in: cells + 1,
        l_out: cells + 2,
        ..MapperConfig::toy()
    }
}

fn apply_train_config(
    pairs: &[(String, String)],
    mapper: &mut MapperConfig,
    train: &mut TrainConfig,
) -> Result<()> {
    for (k, v) in pairs {
        if k.starts_with("mapper.") {
            mapper.set(k, v)?;
        } else if k.starts_with("train.") {
            train.set(k, v)?;
        } else {
            return Err(Error::config(k.as_str(), "expected a mapper.* or train.* key"));
        }
    }
    Ok(())
}

fn train_cmd(a: TrainArgs, argv: Vec<String>, started: Instant) -> Result<bool> {
    let (backbones, dataset) = load_fixtures(&a.fixtures)?;
    let file = match &a.config {
        Some(p) => read_config(p)?,
        None => Vec::new(),
    };
    let base = fixture_mapper_config(&backbones);
    let mut mcfg = base;
    let mut tcfg = TrainConfig::toy();
    apply_train_config(&file, &mut mcfg, &mut tcfg)?;
    for (field, want, got) in [
        ("mapper.d_in", base.d_in, mcfg.d_in),
        ("mapper.d_out", base.d_out, mcfg.d_out),
        ("mapper.l_in", base.l_in, mcfg.l_in),
    ] {
        if want != got {
            return Err(Error::config(field, format!("fixtures require {want}, config says {got}")));
        }
    }
    if let Some(v) = a.variant {
        mcfg = mcfg.with_variant(v);
    }
    mcfg.normalize();
    let has = |key: &str| file.iter().any(|(k, _)| k == key);
    tcfg.blind |= a.blind;
    tcfg.seed = match a.seed {
        Some(s) => s,
        None if has("train.seed") => tcfg.seed,
        None => resolve_seed(None)?,
    };
    let mut examples: Vec<CaptionExample> = dataset.train_captions.clone();
    if let Some(f) = a.data_fraction {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::config("data_fraction", format!("{f} is outside (0, 1]")));
        }
        let n = fraction_count(examples.len(), f);
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
        let keep = rand::seq::index::sample(&mut rng, examples.len(), n).into_vec();
        examples = keep.into_iter().map(|i| dataset.train_captions[i].clone()).collect();
        if f <= 0.01 && !has("train.warmup_steps") {
            tcfg.warmup_steps = SMALL_DATA_WARMUP;
        }
    }
    let outcome = train_with_progress(&mcfg, &tcfg, &backbones, &examples, |p| {
        if let Some(m) = p.minival_loss {
            eprintln!("step {:>6}  lr {:.3e}  minival {:.5}", p.step, p.lr, m);
        }
    })?;

    create_dir(&a.out)?;
    let mut ck = outcome.best.to_checkpoint();
    for (k, v) in tcfg.to_pairs() {
        ck.set(k, v);
    }
    ck.set("best_step", outcome.best_step);
    ck.set("best_minival", outcome.best_minival);
    ck.set("initial_minival", outcome.initial_minival);
    ck.set("steps_run", outcome.steps_run);
    let ck_path = a.out.join(CHECKPOINT_FILE);
    let curve_path = a.out.join(CURVE_FILE);
    ck.save(&ck_path)?;
    write_file(&curve_path, &curve_csv(&outcome.curve))?;

    let mut m = RunManifest::new("train", with_seed(argv, tcfg.seed));
    m.seeds.push(("train".into(), tcfg.seed));
    m.inputs.push(("fixtures".into(), display(&a.fixtures)));
    if let Some(c) = &a.config {
        m.inputs.push(("config".into(), display(c)));
    }
    m.outputs.push(("checkpoint".into(), display(&ck_path)));
    m.outputs.push(("curve".into(), display(&curve_path)));
    m.config = mcfg.to_pairs();
    m.config.extend(tcfg.to_pairs());
    m.config.push(("data.examples".into(), examples.len().to_string()));
    finish_manifest(m, &a.out, started)?;
    println!(
        "trained {} steps; best minival {:.5} at step {} (initial {:.5})",
        outcome.steps_run, outcome.best_minival, outcome.best_step, outcome.initial_minival
    );
    Ok(true)
}

fn summary_line(metric: &str, value: f64, n: usize, seed: u64) -> String {
    json!({ "metric": metric, "value": value, "n": n, "seed": seed }).to_string()
}

fn eval_cmd(a: EvalArgs, argv: Vec<String>, started: Instant) -> Result<bool> {
    let seed = resolve_seed(a.seed)?;
    let (backbones, dataset) = load_fixtures(&a.fixtures)?;
    let mapper = Mapper::from_checkpoint(Checkpoint::load(&a.checkpoint)?)?;
    let take = |n: usize| a.limit.map_or(n, |l| l.min(n));
    let mut lines = Vec::new();
    let mut summary = Vec::new();
    match a.task {
        Task::Caption => {
            let set = &dataset.eval_captions[..take(dataset.eval_captions.len())];
            let report = evaluate_captions(&mapper, &backbones, set)?;
            for r in &report.records {
                lines.push(serde_json::to_string(r).expect("record serializes"));
            }
            summary.push(summary_line("bleu4", report.bleu4, set.len(), seed));
            summary.push(summary_line("exact_match", report.exact_match, set.len(), seed));
        }
        Task::Vqa => {
            let set = &dataset.eval_vqa[..take(dataset.eval_vqa.len())];
            let report = evaluate_vqa(&mapper, &backbones, set, a.shots, &dataset.train_vqa, seed)?;
            for r in &report.records {
                lines.push(serde_json::to_string(r).expect("record serializes"));
            }
            summary.push(summary_line("vqa_accuracy", report.accuracy, set.len(), seed));
        }
    }
    create_dir(&a.out)?;
    let results = a.out.join(RESULTS_FILE);
    let mut text = String::new();
    for l in lines.iter().chain(&summary) {
        text.push_str(l);
        text.push('\n');
    }
    write_file(&results, &text)?;
    let mut m = RunManifest::new("eval", with_seed(argv, seed));
    m.seeds.push(("eval".into(), seed));
    m.inputs.push(("checkpoint".into(), display(&a.checkpoint)));
    m.inputs.push(("fixtures".into(), display(&a.fixtures)));
    m.outputs.push(("results".into(), display(&results)));
    m.config.push(("task".into(), format!("{:?}", a.task).to_lowercase()));
    m.config.push(("shots".into(), a.shots.to_string()));
    finish_manifest(m, &a.out, started)?;
    for s in &summary {
        println!("{s}");
    }
    Ok(true)
}

fn filter_cmd(a: FilterArgs, argv: Vec<String>, started: Instant) -> Result<bool> {
    let seed = resolve_seed(a.seed)?;
    let rule = match (a.top_k, a.threshold, a.fraction) {
        (Some(k), None, None) => Rule::TopK(k),
        (None, Some(t), None) => Rule::Threshold(t),
        (None, None, Some(f)) => Rule::Fraction(f),
        _ => return Err(Error::config("rule", "give exactly one of --top-k, --threshold, --fraction")),
    };
    let pairs = datafilter::read_tsv(&a.input)?;
    let kept = datafilter::apply(&pairs, rule, seed)?;
    create_dir(&a.out)?;
    let out = a.out.join(FILTERED_FILE);
    write_file(&out, &datafilter::to_tsv(&kept, pairs.len(), rule))?;
    let mut m = RunManifest::new("filter", with_seed(argv, seed));
    m.seeds.push(("filter".into(), seed));
    m.inputs.push(("pairs".into(), display(&a.input)));
    m.outputs.push(("filtered".into(), display(&out)));
    m.config.push(("rule".into(), rule.to_string()));
    finish_manifest(m, &a.out, started)?;
    println!("kept {} of {}", kept.len(), pairs.len());
    Ok(true)
}

fn count_cmd(a: CountArgs, argv: Vec<String>, started: Instant) -> Result<bool> {
    let mut cfg = MapperConfig::medium();
    if let Some(p) = &a.config {
        for (k, v) in read_config(p)? {
            if k.starts_with("mapper.") {
                cfg.set(&k, &v)?;
            }
        }
    }
    if let Some(s) = a.size {
        let (depth, d_hidden) = s.dims();
        cfg.depth = depth;
        cfg.d_hidden = d_hidden;
    }
    if let Some(v) = a.variant {
        cfg = cfg.with_variant(v);
    }
    cfg.normalize();
    cfg.validate()?;
    let n = count_parameters(&cfg);
    println!("{n}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        let mut m = RunManifest::new("count-params", argv);
        m.config = cfg.to_pairs();
        m.config.push(("parameters".into(), n.to_string()));
        finish_manifest(m, out, started)?;
    }
    Ok(true)
}

/// A small set of frozen backbones with untrained weights, for gradient
/// checks that should not depend on fixture files.
pub fn scratch_backbones(seed: u64) -> Result<Backbones> {
    let vocab = Vocabulary::toy();
    let lm_cfg = LmConfig::toy(vocab.len());
    let mut lm = init_lm(&lm_cfg, seed)?;
    lm.freeze_all();
    Ok(Backbones {
        lm_cfg,
        lm,
        vision: init_vision(3, 5, 32, seed.wrapping_add(1))?,
        vocab,
        grid: 3,
        colors: 5,
    })
}

/// Two fixed captions over the backbones' grid.
pub fn grad_check_batch(b: &Backbones) -> Vec<CaptionExample> {
    let cells = b.grid * b.grid;
    (0..2)
        .map(|k| {
            let img = ToyImage::new(b.grid, (0..cells).map(|i| (i * 3 + k) % b.colors).collect())
                .expect("square grid");
            CaptionExample {
                caption: caption_text(&img),
                image: img,
            }
        })
        .collect()
}

fn grad_check_cmd(a: GradCheckArgs, argv: Vec<String>, started: Instant) -> Result<bool> {
    let seed = resolve_seed(a.seed)?;
    let backbones = match &a.fixtures {
        Some(dir) => Backbones::load(dir)?,
        None => scratch_backbones(seed)?,
    };
    let mut cfg = fixture_mapper_config(&backbones);
    if let Some(p) = &a.config {
        for (k, v) in read_config(p)? {
            if k.starts_with("mapper.") {
                cfg.set(&k, &v)?;
            }
        }
    }
    cfg.normalize();
    let mapper = Mapper::init(cfg, seed, false)?;
    let batch = grad_check_batch(&backbones);
    let check = mapper_grad_check(&mapper, &backbones, &batch, a.h, Some(a.samples), a.corrupt)?;
    let pass = check.passes(GRAD_CHECK_TOLERANCE);
    let report = &check.informative;
    let (worst, idx) = report.worst.clone().unwrap_or_default();
    println!(
        "max relative error {:.3e} at {worst}[{idx}] over {} coordinates",
        report.max_relative_error, report.coordinates_checked,
    );
    if let Some(z) = &check.zero {
        println!(
            "zero-gradient coordinates: {} checked, max absolute error {:.3e} (relative {:.3e})",
            z.coordinates_checked, z.max_abs_error, z.max_relative_error
        );
    }
    println!("{}", if pass { "PASS" } else { "FAIL" });
    if let Some(out) = &a.out {
        create_dir(out)?;
        let mut m = RunManifest::new("grad-check", with_seed(argv, seed));
        m.seeds.push(("mapper".into(), seed));
        m.config = cfg.to_pairs();
        m.config.push(("max_relative_error".into(), report.max_relative_error.to_string()));
        if let Some(z) = &check.zero {
            m.config.push(("zero_grad.max_abs_error".into(), z.max_abs_error.to_string()));
        }
        m.config.push(("pass".into(), pass.to_string()));
        finish_manifest(m, out, started)?;
    }
    Ok(pass)
}

fn replay_cmd(a: ReplayArgs) -> Result<bool> {
    let m = RunManifest::load(&a.manifest)?;
    let mut argv = m.argv.clone();
    if argv.get(1).map(String::as_str) == Some("replay") {
        return Err(Error::config("argv", "a manifest cannot replay a replay"));
    }
    if let Some(out) = &a.out {
        match argv.iter().position(|x| x == "--out") {
            Some(i) if i + 1 < argv.len() => argv[i + 1] = display(out),
            _ => return Err(Error::config("out", "recorded command has no --out")),
        }
    }
    // The recorded config may have changed on disk; replay the resolved values.
    let mut temp = None;
    if let Some(i) = argv.iter().position(|x| x == "--config") {
        if i + 1 < argv.len() && m.command == "train" {
            let keys: Vec<(String, String)> = m
                .config
                .iter()
                .filter(|(k, _)| k.starts_with("mapper.") || k.starts_with("train."))
                .cloned()
                .collect();
            let path = std::env::temp_dir().join(format!(
                "mapl-replay-{}-{}.conf",
                std::process::id(),
                started_nanos()
            ));
            write_file(&path, &render_config(&keys))?;
            argv[i + 1] = display(&path);
            temp = Some(path);
        }
    }
    let code = run(argv);
    if let Some(p) = temp {
        let _ = std::fs::remove_file(p);
    }
    Ok(code == 0)
}

fn started_nanos() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0)
}
