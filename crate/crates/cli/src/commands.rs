use std::fmt;
use std::fs;
use std::path::Path;

use clip_decoder::gradcheck::head_gradient_check;
use clip_decoder::io::container::{read_query_bank, read_samples, write_query_bank, write_samples};
use clip_decoder::io::{generate_synthetic_dataset, write_atomic, SynthConfig};
use clip_decoder::metrics::render_table;
use clip_decoder::prompt::{builtin_template, builtin_templates, render_class_prompts, render_prompt, PromptTemplate};
use clip_decoder::trainer::{
    ablation_run, evaluate, mode_classes, rank_classes, read_checkpoint, train_with_log, write_checkpoint,
    AblationReport, EvalMode, EvalOptions, TrainConfig,
};
use clip_decoder::{Bank, Dataset, Error, Real, Samples, TrainedHead};
use serde::Serialize;

use crate::resolve::{Resolved, Source};
use crate::{AblateArgs, Command, EvalArgs, GenSynthArgs, GradcheckArgs, PredictArgs, PromptsCommand, RenderArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(Error),
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(Error::Config(_) | Error::Template(_)) => 1,
            CliError::Data(_) | CliError::Failed(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
            CliError::Data(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

type Outcome = Result<(), CliError>;

pub fn run(command: Command) -> Outcome {
    match command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Ablate(a) => ablate(a),
        Command::Prompts(PromptsCommand::List) => {
            for t in builtin_templates() {
                println!("{}\t{}", t.id(), t.pattern());
            }
            Ok(())
        }
        Command::Prompts(PromptsCommand::Render(a)) => render(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

pub const TRAIN_FILE: &str = "train.cdec";
pub const TEST_ZSL_FILE: &str = "test_zsl.cdec";
pub const TEST_GZSL_FILE: &str = "test_gzsl.cdec";
pub const BANK_FILE: &str = "bank.cdec";

fn gen_synth(a: GenSynthArgs) -> Outcome {
    let mut flags: Vec<(&str, String)> = a.set.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    if let Some(seed) = a.seed {
        flags.push(("seed", seed.to_string()));
    }
    let resolved = Resolved::layered(SynthConfig::default(), a.config.as_deref(), flags)?;
    print!("{}", resolved.render("synthetic data config (flag > file > default)"));
    let data: Dataset = generate_synthetic_dataset(&resolved.config)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let files = [
        (TRAIN_FILE, &data.train),
        (TEST_ZSL_FILE, &data.test_zsl),
        (TEST_GZSL_FILE, &data.test_gzsl),
    ];
    for (name, set) in files {
        let path = a.out.join(name);
        write_samples(&path, set)?;
        println!("wrote {} ({} records)", path.display(), set.records.len());
    }
    let path = a.out.join(BANK_FILE);
    write_query_bank(&path, &data.query_bank)?;
    println!(
        "wrote {} ({} classes, {} seen)",
        path.display(),
        data.vocab.len(),
        data.vocab.entries().iter().filter(|e| e.seen).count()
    );
    Ok(())
}

fn load_samples(path: &Path) -> Result<Samples, CliError> {
    Ok(read_samples(path)?)
}

fn load_bank(path: &Path) -> Result<Bank, CliError> {
    Ok(read_query_bank(path)?)
}

fn train(a: TrainArgs) -> Outcome {
    let resolved = Resolved::layered(TrainConfig::default(), a.settings.config.as_deref(), a.settings.flags(a.seed))?;
    print!("{}", resolved.render("training config (flag > file > default)"));
    let cfg = resolved.config;
    let data = load_samples(&a.train)?;
    let bank = load_bank(&a.bank)?;
    let mut log = String::new();
    let ckpt: TrainedHead = train_with_log(&data, &bank, &cfg, |step| {
        log.push_str(&serde_json::to_string(step).expect("log line serializes"));
        log.push('\n');
        Ok(())
    })?;
    write_checkpoint(&a.out, &ckpt)?;
    if let Some(path) = &a.log {
        write_atomic(path, log.as_bytes())?;
    }
    match ckpt.final_loss {
        Some(l) => println!(
            "final epoch loss: total {:.6}, clip {:.6}, classification {:.6}",
            l.total, l.clip, l.classification
        ),
        None => println!("no epochs run; checkpoint holds the initialization"),
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval_options(ckpt: &TrainedHead, mode: EvalMode, gamma: Option<f64>, ks: Option<Vec<usize>>) -> EvalOptions {
    let mut opts = EvalOptions::from_config(&ckpt.config, mode);
    let source = |flag: bool| if flag { Source::Flag } else { Source::Checkpoint };
    println!("evaluation options (flag > checkpoint)");
    println!("  mode  = {mode}  [flag]");
    println!("  gamma = {}  [{}]", gamma.unwrap_or(opts.gamma), source(gamma.is_some()));
    let ks_src = source(ks.is_some());
    if let Some(g) = gamma {
        opts.gamma = g;
    }
    if let Some(ks) = ks {
        opts.ks = ks;
    }
    let ks_text: Vec<String> = opts.ks.iter().map(usize::to_string).collect();
    println!("  ks    = {}  [{ks_src}]", ks_text.join(","));
    opts
}

fn eval(a: EvalArgs) -> Outcome {
    let ckpt: TrainedHead = read_checkpoint(&a.checkpoint)?;
    print!("{}", Resolved::new(ckpt.config.clone(), Source::Checkpoint).render("training config (from checkpoint)"));
    let opts = eval_options(&ckpt, a.mode, a.gamma, a.ks);
    let test = load_samples(&a.test)?;
    let bank = load_bank(&a.bank)?;
    let report = evaluate(&ckpt, &test, &bank, &opts)?;
    print!("{}", render_table(&[(&a.mode.to_string(), &report)]));
    let json = report.to_json() + "\n";
    match &a.out {
        Some(path) => {
            write_atomic(path, json.as_bytes())?;
            println!("wrote {}", path.display());
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Outcome {
    let ckpt: TrainedHead = read_checkpoint(&a.checkpoint)?;
    let data = load_samples(&a.data)?;
    let bank = load_bank(&a.bank)?;
    let record = data.records.get(a.index).ok_or_else(|| {
        CliError::Usage(format!("record index {} out of range for {} records", a.index, data.records.len()))
    })?;
    let gamma = a.gamma.unwrap_or(ckpt.config.gamma);
    println!("mode = {}, gamma = {gamma}, top = {}", a.mode, a.top);
    let classes = mode_classes(&ckpt.vocab, a.mode);
    let ranked = rank_classes(&ckpt, &record.tokens, &bank, &classes, gamma)?;
    let vocab = &ckpt.vocab;
    println!("{:>4}  {:<16}  {:>8}  {:<6}  label", "rank", "class", "score", "split");
    for (rank, (class, score)) in ranked.into_iter().take(a.top).enumerate() {
        println!(
            "{:>4}  {:<16}  {score:>8.5}  {:<6}  {}",
            rank + 1,
            vocab.name(class),
            if vocab.is_seen(class) { "seen" } else { "unseen" },
            if record.labels.contains(&class) { "*" } else { "" }
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationSummary<'a> {
    mode: EvalMode,
    runs: &'a [AblationReport],
    median_delta_map: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn ablate(a: AblateArgs) -> Outcome {
    if a.seeds.is_empty() {
        return Err(CliError::Usage("--seeds needs at least one seed".into()));
    }
    let resolved = Resolved::layered(TrainConfig::default(), a.settings.config.as_deref(), a.settings.flags(None))?;
    print!("{}", resolved.render("training config (flag > file > default)"));
    let train_set = load_samples(&a.train)?;
    let test = load_samples(&a.test)?;
    let bank = load_bank(&a.bank)?;
    let mut runs = Vec::with_capacity(a.seeds.len());
    for &seed in &a.seeds {
        let cfg = TrainConfig {
            seed,
            ..resolved.config.clone()
        };
        let r = ablation_run(&train_set, &test, &bank, &cfg, a.mode)?;
        println!(
            "seed {seed}: joint mAP {:.2}, classification-only mAP {:.2}, delta {:+.2}",
            r.joint.map * 100.0,
            r.classification_only.map * 100.0,
            r.delta_map * 100.0
        );
        runs.push(r);
    }
    let deltas: Vec<f64> = runs.iter().map(|r| r.delta_map).collect();
    let summary = AblationSummary {
        mode: a.mode,
        runs: &runs,
        median_delta_map: median(&deltas),
    };
    println!("median delta mAP over {} seeds: {:+.2}", runs.len(), summary.median_delta_map * 100.0);
    if let Some(path) = &a.out {
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
        write_atomic(path, json.as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn render(a: RenderArgs) -> Outcome {
    let template = match &a.pattern {
        Some(p) => PromptTemplate::new("custom", p.clone())?,
        None => builtin_template(&a.template)?,
    };
    match &a.bank {
        Some(path) => {
            let bank = load_bank(path)?;
            for p in render_class_prompts(&bank.vocab, &template)? {
                println!("{}", p.text);
            }
        }
        None => println!("{}", render_prompt(&a.labels, &template)?.text),
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let mut worst: Real = 0.0;
    for seed in 0..a.seeds {
        let err = head_gradient_check(seed)?;
        println!("seed {seed}: max relative error {err:.3e}");
        worst = worst.max(err);
    }
    println!("max relative error {worst:.3e} (tolerance {:.1e})", a.tolerance);
    if worst > a.tolerance {
        return Err(CliError::Failed(format!(
            "gradient check failed: {worst:.3e} exceeds {:.1e}",
            a.tolerance
        )));
    }
    Ok(())
}
