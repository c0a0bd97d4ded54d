//! Command implementations behind the `oatrack` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use oatrack_core::embedtrain::{train_embedding, PairTrainConfig};
use oatrack_core::gan::generate_positives;
use oatrack_core::metrics::EvalInput;
use oatrack_core::{
    metric_report, run_session, synth_sequence, Ablation, Clock, Embedding, EmbeddingArch, FrameSource, SearchGeometry,
    SynthSpec,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{default_out_root, RunConfig};
use crate::error::{io_err, Error, Result};
use crate::otb::{self, load_sequence, save_sequence};
use crate::report::{read_result, write_json, write_metrics, SequenceResult};
use crate::weights::{bundled_embedding, entries_of, load_embedding, write_weights};

#[derive(Debug, Parser)]
#[command(name = "oatrack", version, about = "Siamese-proposal tracker with an online LSTM classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Track OTB-style sequence directories and write one result JSON each.
    Track(TrackArgs),
    /// Score result files against their sequences.
    Eval(EvalArgs),
    /// Render a synthetic spec (JSON) to an OTB-style directory.
    Synth(SynthArgs),
    /// Train the matching embedding on synthetic pairs and write a weight file.
    TrainEmbedding(TrainArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Sequence directories (added to the config's `sequences`).
    pub sequences: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [default: $OATRACK_OUT, else ./oatrack-out].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// lstm-off, gan-off, hardneg-off or per-proposal-embed; repeatable.
    #[arg(long = "ablation")]
    pub ablations: Vec<Ablation>,
    /// Embedding weight file.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Write this many generated patches per sequence after tracking.
    #[arg(long)]
    pub dump_gan_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of result JSON files.
    #[arg(long)]
    pub results: PathBuf,
    /// Directory holding one OTB-style directory per sequence.
    #[arg(long)]
    pub sequences: PathBuf,
    /// Where metric files go [default: <results>/metrics].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// A spec object, or an array of specs (each written to `<out>/<name>`).
    pub spec: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Training settings (JSON); defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the initial weights.
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
}

/// Seconds since construction.
pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Track(a) => cmd_track(a).map(|_| ()),
        Command::Eval(a) => cmd_eval(a).map(|_| ()),
        Command::Synth(a) => cmd_synth(&a.spec, &a.out).map(|_| ()),
        Command::TrainEmbedding(a) => cmd_train_embedding(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn embedding_for(cfg: &RunConfig) -> Result<Option<Embedding>> {
    if let Some(w) = &cfg.io.weights {
        return load_embedding(w, &cfg.tracker.embedding).map(Some);
    }
    if bundled_embedding(&cfg.tracker.embedding).is_none() {
        eprintln!(
            "note: no weights for a non-default embedding; using random weights (seed {})",
            cfg.tracker.embedding_seed
        );
    }
    Ok(None)
}

/// Tracks every sequence; returns the written result paths.
pub fn cmd_track(a: TrackArgs) -> Result<Vec<PathBuf>> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(a.seed, a.out, a.workers, &a.ablations, a.dump_gan_samples);
    if a.weights.is_some() {
        cfg.io.weights = a.weights;
    }
    cfg.validate()?;
    let mut dirs = cfg.io.sequences.clone();
    dirs.extend(a.sequences);
    if dirs.is_empty() {
        return Err(Error::Config("no sequences given".into()));
    }
    let sequences = dirs.iter().map(|d| load_sequence(d)).collect::<Result<Vec<_>>>()?;
    let out = cfg.io.out.clone().unwrap_or_else(default_out_root);
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let embedding = embedding_for(&cfg)?;
    let config_value = cfg.to_value();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.io.workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let outcomes: Vec<Result<PathBuf>> = pool.install(|| {
        sequences
            .par_iter()
            .map(|seq| {
                let clock = WallClock::new();
                let (session, frames, report) = run_session(&cfg.tracker, seq, embedding.clone(), &clock)
                    .map_err(|e| Error::Ingest(format!("{}: {}", seq.name, e)))?;
                let result = SequenceResult::new(
                    &seq.name,
                    seq.attributes(),
                    config_value.clone(),
                    seq.ground_truth[0],
                    frames,
                    report,
                );
                let path = out.join(format!("{}.json", seq.name));
                write_json(&path, &result)?;
                if cfg.io.dump_gan_samples > 0 {
                    if let Some(gan) = session.gan() {
                        let dir = out.join(format!("{}_gan", seq.name));
                        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                        let mut rng = ChaCha8Rng::seed_from_u64(cfg.tracker.seed);
                        for (i, p) in generate_positives(gan, cfg.io.dump_gan_samples, &mut rng)?.iter().enumerate() {
                            otb::write_frame(&dir.join(format!("{:04}.png", i + 1)), p)?;
                        }
                    }
                }
                Ok(path)
            })
            .collect()
    });
    let mut written = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(p) => written.push(p),
            Err(e) => failures.push(e.to_string()),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Ingest(failures.join("; ")));
    }
    Ok(written)
}

/// Evaluates every result file in `results`; returns the metric report.
pub fn cmd_eval(a: EvalArgs) -> Result<oatrack_core::MetricReport> {
    let mut files: Vec<PathBuf> = fs::read_dir(&a.results)
        .map_err(io_err(&a.results))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json") && p.is_file())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Alignment(format!("no result files in {}", a.results.display())));
    }
    let mut loaded = Vec::new();
    let mut offenders = Vec::new();
    for f in &files {
        let r = read_result(f)?;
        let dir = a.sequences.join(&r.sequence);
        match load_sequence(&dir) {
            Ok(seq) if seq.ground_truth.len() == r.boxes.len() => loaded.push((r, seq)),
            Ok(seq) => offenders.push(format!(
                "{}: {} boxes vs {} ground-truth frames",
                f.display(),
                r.boxes.len(),
                seq.ground_truth.len()
            )),
            Err(e) => offenders.push(format!("{}: {}", f.display(), e)),
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Alignment(offenders.join("; ")));
    }
    let preds: Vec<Vec<_>> = loaded.iter().map(|(r, _)| r.predicted_boxes()).collect();
    let inputs: Vec<EvalInput<'_>> = loaded
        .iter()
        .zip(&preds)
        .map(|((r, seq), p)| EvalInput {
            name: &r.sequence,
            attributes: &seq.attributes,
            predictions: p,
            ground_truth: &seq.ground_truth,
        })
        .collect();
    let report = metric_report(&inputs)?;
    let out = a.out.unwrap_or_else(|| a.results.join("metrics"));
    write_metrics(&out, &report)?;
    println!(
        "{} sequences, {} frames: precision@20 {:.4}, AUC {:.4}",
        report.overall.sequences, report.overall.frames, report.overall.precision_at_20, report.overall.auc
    );
    Ok(report)
}

/// Renders one spec to `out`, or an array of specs to `out/<name>`.
pub fn cmd_synth(spec_path: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(spec_path).map_err(io_err(spec_path))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|source| Error::Json { path: spec_path.into(), source })?;
    let parse = |v: serde_json::Value| -> Result<SynthSpec> {
        serde_json::from_value(v).map_err(|source| Error::Json { path: spec_path.into(), source })
    };
    let jobs: Vec<(SynthSpec, PathBuf)> = match value {
        serde_json::Value::Array(items) => items
            .into_iter()
            .map(|v| parse(v).map(|s| {
                let dir = out.join(&s.name);
                (s, dir)
            }))
            .collect::<Result<_>>()?,
        v => vec![(parse(v)?, out.to_path_buf())],
    };
    let mut written = Vec::new();
    for (spec, dir) in jobs {
        let seq = synth_sequence(&spec)?;
        save_sequence(&seq, &dir)?;
        written.push(dir);
    }
    Ok(written)
}

fn cmd_train_embedding(a: TrainArgs) -> Result<()> {
    let mut cfg: PairTrainConfig = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str(&text).map_err(|source| Error::Json { path: p.clone(), source })?
        }
        None => PairTrainConfig::default(),
    };
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let mut emb = Embedding::seeded(EmbeddingArch::default(), a.init_seed)?;
    let log = train_embedding(&mut emb, &SearchGeometry::default(), &cfg)?;
    let tail = log.losses.len().min(20).max(1);
    let mean = |v: &[f64]| v[v.len().saturating_sub(tail)..].iter().sum::<f64>() / tail.min(v.len()).max(1) as f64;
    println!("trained {} steps: loss {:.4}, argmax hit rate {:.2}", cfg.steps, mean(&log.losses), mean(&log.hit_rates));
    write_weights(&a.out, &entries_of(&emb))
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let suite = oatrack_core::gradcheck::standard_suite(a.seed)?;
    let mut worst: f64 = 0.0;
    for (name, r) in &suite {
        println!("{:<40} {:>10.3e}  ({} entries)", name, r.max_relative_error, r.entries_checked);
        worst = worst.max(r.max_relative_error);
    }
    if worst >= a.tolerance {
        return Err(Error::Config(format!("max relative error {:.3e} exceeds {:.1e}", worst, a.tolerance)));
    }
    Ok(())
}
