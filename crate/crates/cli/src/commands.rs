use std::fs;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use emo_core::data::{gen_synthetic, mix_corpora, write_corpus, CorpusRecipe, Example, Manifest, Split, SynthConfig};
use emo_core::gradcheck::{run_suite, SuiteOptions};
use emo_core::losses::NUM_CLASSES;
use emo_core::metrics::{evaluate, EvalReport};
use emo_core::models::checkpoint;
use emo_core::trainer::{train, TrainLog};
use serde::Serialize;

use crate::args::{Command, EvalArgs, GenSynthArgs, GradcheckArgs, TrainArgs};
use crate::config::RunConfig;
use crate::{CliError, CliResult};

pub const MODEL_FILE: &str = "best.emop";
pub const LOG_FILE: &str = "trainlog.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

pub fn run(command: &Command) -> CliResult<()> {
    match command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

/// Prints to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Data(format!("cannot write to stdout: {e}"))),
        _ => Ok(()),
    }
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))
}

#[derive(Serialize)]
struct CorpusSummary<'a> {
    corpus: &'a str,
    n: usize,
    d_in: usize,
    seed: u64,
    projection_seed: u64,
    splits: SplitCounts,
    class_counts: [usize; NUM_CLASSES],
    manifest: String,
}

#[derive(Default, Serialize)]
struct SplitCounts {
    train: usize,
    valid: usize,
    test: usize,
}

pub fn gen_synth(a: &GenSynthArgs) -> CliResult<()> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be >= 1".into()));
    }
    if a.din == 0 {
        return Err(CliError::Usage("--din must be >= 1".into()));
    }
    if a.min_frames == 0 || a.min_frames > a.max_frames {
        return Err(CliError::Usage(format!(
            "frame range {}..={} is empty",
            a.min_frames, a.max_frames
        )));
    }
    let cfg = SynthConfig {
        n: a.n,
        d_in: a.din,
        seed: a.seed,
        sigma_label: a.noise_label,
        sigma_frame: a.noise_frame,
        min_frames: a.min_frames,
        max_frames: a.max_frames,
        projection_seed: a.projection_seed,
        corpus: a.corpus.clone(),
        split_ratios: a.split_ratios,
        ..Default::default()
    };
    let corpus = gen_synthetic(&cfg)?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::Data(format!("cannot create {}: {e}", a.out.display())))?;
    write_corpus(&a.out, &corpus)?;

    let mut splits = SplitCounts::default();
    let mut class_counts = [0; NUM_CLASSES];
    for (ex, split) in &corpus {
        match split {
            Split::Train => splits.train += 1,
            Split::Valid => splits.valid += 1,
            Split::Test => splits.test += 1,
        }
        if let Some(k) = ex.label.disc {
            class_counts[k] += 1;
        }
    }
    let summary = CorpusSummary {
        corpus: &cfg.corpus,
        n: cfg.n,
        d_in: cfg.d_in,
        seed: cfg.seed,
        projection_seed: cfg.projection_seed.unwrap_or(cfg.seed),
        splits,
        class_counts,
        manifest: a.out.join("manifest.jsonl").display().to_string(),
    };
    emit(&to_json(&summary)?)
}

/// Train and validation sets after applying the run's label recipe.
pub fn load_training_data(cfg: &RunConfig) -> CliResult<(Vec<Example>, Vec<Example>)> {
    let d = &cfg.data;
    let mut train_set = Vec::new();
    let mut valid_set = Vec::new();
    for path in &d.manifests {
        let m = Manifest::read(path)?;
        train_set.extend(m.load(Some(d.train_split), d.max_frames)?);
        valid_set.extend(m.load(Some(d.valid_split), d.max_frames)?);
    }
    if d.recipe.is_empty() {
        return Ok((train_set, valid_set));
    }
    let seed = d.mix_seed.unwrap_or(cfg.train.seed);
    let train_set = mix_corpora(&train_set, &d.recipe, d.equalize, seed)?;
    // validation keeps every example, masked the same way as training
    let valid_recipe: Vec<CorpusRecipe> = d
        .recipe
        .iter()
        .map(|r| CorpusRecipe {
            max_examples: None,
            ..r.clone()
        })
        .collect();
    let valid_set = mix_corpora(&valid_set, &valid_recipe, false, seed)?;
    Ok((train_set, valid_set))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    variant: String,
    seed: u64,
    num_params: usize,
    n_train: usize,
    n_valid: usize,
    epochs_run: usize,
    steps: u64,
    stopped_early: bool,
    best_epoch: usize,
    best_score: f64,
    best_valid: Option<&'a EvalReport>,
    wall_secs: f64,
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let started = Instant::now();
    let cfg = RunConfig::load(&a.config)?;
    let (train_set, valid_set) = load_training_data(&cfg)?;
    log::info!("{} training and {} validation utterances", train_set.len(), valid_set.len());
    let (model, log) = train(&cfg.train, &train_set, &valid_set)?;

    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.display())))?;
    checkpoint::save(&model, &out.join(MODEL_FILE))?;
    write(&out.join(LOG_FILE), log.to_csv())?;
    write(&out.join(RESOLVED_CONFIG_FILE), cfg.to_toml()?)?;
    let summary = summarize(&cfg, &log, model.num_params(), train_set.len(), valid_set.len(), started);
    let json = to_json(&summary)?;
    write(&out.join(SUMMARY_FILE), format!("{json}\n"))?;
    emit(&json)
}

fn summarize<'a>(
    cfg: &RunConfig,
    log: &'a TrainLog,
    num_params: usize,
    n_train: usize,
    n_valid: usize,
    started: Instant,
) -> TrainSummary<'a> {
    TrainSummary {
        variant: cfg.train.variant.to_string(),
        seed: cfg.train.seed,
        num_params,
        n_train,
        n_valid,
        epochs_run: log.rows.len(),
        steps: log.steps,
        stopped_early: log.stopped_early,
        best_epoch: log.best_epoch,
        best_score: log.best_score,
        best_valid: log.best().map(|r| &r.valid),
        wall_secs: started.elapsed().as_secs_f64(),
    }
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    if a.batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be >= 1".into()));
    }
    let mut model = checkpoint::load(&a.model)?;
    let manifest = Manifest::read(&a.manifest)?;
    let examples = manifest.load(Some(a.split), a.max_frames)?;
    if examples.is_empty() {
        return Err(CliError::Data(format!(
            "{} has no `{}` utterances",
            a.manifest.display(),
            a.split
        )));
    }
    let d_in = model.config().dims.d_in;
    if let Some(ex) = examples.iter().find(|e| e.feature_dim() != d_in) {
        return Err(CliError::Data(format!(
            "feature dim mismatch: utterance `{}` has {} features per frame, model expects d_in = {d_in}",
            ex.id,
            ex.feature_dim()
        )));
    }
    let report = evaluate(&mut model, &examples, a.batch_size)?;
    let json = to_json(&report)?;
    if let Some(path) = &a.json_out {
        write(path, format!("{json}\n"))?;
    }
    emit(&json)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let rows = run_suite(&SuiteOptions {
        seed: a.seed,
        variants: a.variant.into_iter().collect(),
        corrupt: a.corrupt.clone(),
    })?;
    let mut table = String::from("component\tkind\tmax_rel_error\ttolerance\tstatus");
    for r in &rows {
        let _ = write!(
            table,
            "\n{}\t{}\t{:.3e}\t{:e}\t{}",
            r.component,
            r.kind.name(),
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    emit(&table)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.component.as_str()).collect();
    if failed.is_empty() {
        eprintln!("gradcheck: all {} checks passed", rows.len());
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradcheck: {} of {} checks failed: {}",
            failed.len(),
            rows.len(),
            failed.join(", ")
        )))
    }
}
