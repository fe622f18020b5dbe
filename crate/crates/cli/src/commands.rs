//! Subcommand implementations. Each writes fixed file names under its
//! output directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use kws_core::audio::{FeatureExtractor, Waveform};
use kws_core::data::synth::Synthesizer;
use kws_core::data::{Corpus, Manifest, Split};
use kws_core::eval::{self, EvalReport};
use kws_core::model::{self, ModelParameters};
use kws_core::train::{self, TrainData, TrainOutcome};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{io_context, CliError, CliResult};

pub const CHECKPOINT: &str = "model.kwsm";
pub const TRACE: &str = "trace.csv";
pub const SNAPSHOT: &str = "config.toml";
pub const SIDECAR: &str = "train.json";
pub const ROC: &str = "roc.csv";
pub const SUMMARY: &str = "summary.json";
pub const ATTENTION: &str = "attention.csv";
pub const FEATURES_CSV: &str = "features.csv";
pub const FEATURES_DUMP: &str = "features.kwsf";
pub const DETECTIONS: &str = "detections.csv";
pub const SWEEP: &str = "sweep.csv";

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(io_context(format!("creating {}", path.display())))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> CliResult<()> {
    let mut w = create(path)?;
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(io_context(format!("writing {}", path.display())))
}

fn write_json(path: &Path, v: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(v).map_err(kws_core::KwsError::from)?;
    fs::write(path, text + "\n").map_err(io_context(format!("writing {}", path.display())))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_context(format!("creating {}", dir.display())))
}

fn extractor(cfg: &RunConfig) -> FeatureExtractor {
    FeatureExtractor::new(cfg.frontend)
}

fn load_manifest(cfg: &RunConfig) -> CliResult<Manifest> {
    let path = cfg.manifest_path()?;
    Manifest::load(path).map_err(|e| CliError::Config(format!("data.manifest {}: {e}", path.display())))
}

fn load_checkpoint(cfg: &RunConfig, path: &Path) -> CliResult<ModelParameters> {
    ModelParameters::load(path, cfg.model).map_err(|e| CliError::Config(format!("checkpoint {}: {e}", path.display())))
}

/// Trains on in-memory clips and writes the checkpoint, trace, snapshot
/// and sidecar. A diverged run still writes its best checkpoint and then
/// reports a numerical failure.
pub fn train_on(cfg: &RunConfig, corpus: &Corpus, out_dir: &Path) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    fs::write(out_dir.join(SNAPSHOT), cfg.to_toml()).map_err(io_context("writing config snapshot"))?;
    let bank = cfg.augment.bank()?;
    let data = TrainData {
        train: &corpus.train,
        valid: &corpus.valid,
        bank: &bank,
    };
    let outcome = train::train(&cfg.train, cfg.model, &extractor(cfg), data)?;
    outcome.best.save(&out_dir.join(CHECKPOINT))?;
    write_with(&out_dir.join(TRACE), |w| outcome.write_trace_csv(w))?;
    write_json(&out_dir.join(SIDECAR), &outcome.sidecar(&cfg.train))?;
    if let Some((epoch, batch)) = outcome.diverged {
        return Err(CliError::Numerical(format!(
            "training diverged at epoch {epoch}, batch {batch}; best checkpoint (epoch {}) kept",
            outcome.best_epoch
        )));
    }
    Ok(outcome)
}

pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let manifest = load_manifest(cfg)?;
    let corpus = Corpus::from_manifest(&manifest)?;
    train_on(cfg, &corpus, out_dir)
}

/// Scores clips and writes `roc.csv` and `summary.json`.
pub fn eval_on(cfg: &RunConfig, params: &ModelParameters, clips: &[kws_core::data::Clip], skipped: usize, out_dir: &Path) -> CliResult<EvalReport> {
    ensure_dir(out_dir)?;
    let (scored, failed) = eval::score_dataset(params, clips, &extractor(cfg))?;
    let report = EvalReport::from_scored(&scored, &cfg.train.regularization(), skipped + failed)?;
    write_with(&out_dir.join(ROC), |w| report.write_roc_csv(w))?;
    write_json(&out_dir.join(SUMMARY), &report.summary_json())?;
    Ok(report)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: Split, out_dir: &Path) -> CliResult<EvalReport> {
    cfg.validate()?;
    let params = load_checkpoint(cfg, checkpoint)?;
    let manifest = load_manifest(cfg)?;
    let (clips, failed) = Corpus::load_split(&manifest, split);
    if !failed.is_empty() {
        log::warn!("{} of the {split} files could not be read", failed.len());
    }
    eval_on(cfg, &params, &clips, failed.len(), out_dir)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub status: String,
    pub best_epoch: Option<usize>,
    pub frr_at_1fa: Option<f64>,
    pub frr_at_2fa: Option<f64>,
    pub frr_at_4fa: Option<f64>,
}

fn lambda_dir(out_dir: &Path, lambda: f64) -> PathBuf {
    out_dir.join(format!("lambda_{lambda}"))
}

/// One run per λ with all three weights tied; each run trains, then
/// evaluates on the test split. Failed runs are recorded and skipped.
pub fn sweep_on(cfg: &RunConfig, corpus: &Corpus, grid: &[f64], workers: usize, out_dir: &Path) -> CliResult<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(CliError::Config("sweep grid is empty".into()));
    }
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let run = |lambda: f64| -> SweepRow {
        let mut c = cfg.clone();
        (c.train.lambda1, c.train.lambda2, c.train.lambda3) = (lambda, lambda, lambda);
        let dir = lambda_dir(out_dir, lambda);
        let result = train_on(&c, corpus, &dir).and_then(|o| eval_on(&c, &o.best, &corpus.test, 0, &dir).map(|r| (o, r)));
        match result {
            Ok((o, r)) => SweepRow {
                lambda,
                status: "ok".into(),
                best_epoch: Some(o.best_epoch),
                frr_at_1fa: r.frr_at(1.0),
                frr_at_2fa: r.frr_at(2.0),
                frr_at_4fa: r.frr_at(4.0),
            },
            Err(e) => {
                log::error!("sweep λ={lambda} failed: {e}");
                SweepRow {
                    lambda,
                    status: e.to_string().replace(',', ";"),
                    best_epoch: None,
                    frr_at_1fa: None,
                    frr_at_2fa: None,
                    frr_at_4fa: None,
                }
            }
        }
    };
    let rows: Vec<SweepRow> = if workers > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?;
        pool.install(|| grid.par_iter().map(|l| run(*l)).collect())
    } else {
        grid.iter().map(|l| run(*l)).collect()
    };
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    write_with(&out_dir.join(SWEEP), |w| {
        writeln!(w, "lambda,frr_at_1fa,frr_at_2fa,frr_at_4fa,best_epoch,status")?;
        for r in &rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.lambda,
                opt(r.frr_at_1fa),
                opt(r.frr_at_2fa),
                opt(r.frr_at_4fa),
                r.best_epoch.map_or(String::new(), |e| e.to_string()),
                r.status
            )?;
        }
        Ok(())
    })?;
    Ok(rows)
}

pub fn cmd_sweep(cfg: &RunConfig, grid: &[f64], workers: usize, out_dir: &Path) -> CliResult<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(CliError::Config("sweep grid is empty".into()));
    }
    cfg.validate()?;
    let corpus = Corpus::from_manifest(&load_manifest(cfg)?)?;
    sweep_on(cfg, &corpus, grid, workers, out_dir)
}

/// Writes the attention weights of every head, and the PCEN features, for
/// one utterance segmented to the model's input length.
pub fn cmd_inspect(cfg: &RunConfig, checkpoint: &Path, wav: &Path, out_dir: &Path) -> CliResult<model::Prediction> {
    cfg.validate()?;
    let params = load_checkpoint(cfg, checkpoint)?;
    let wave = Waveform::read_wav(wav)?;
    let features = extractor(cfg).extract_segment(&wave)?;
    let pred = model::predict(&params, features.values())?;
    ensure_dir(out_dir)?;
    write_with(&out_dir.join(ATTENTION), |w| pred.bundle.write_csv(w, 1.0))?;
    write_with(&out_dir.join(FEATURES_CSV), |w| {
        let v = features.values();
        write!(w, "frame_index")?;
        for b in 0..v.cols() {
            write!(w, ",band_{b}")?;
        }
        writeln!(w)?;
        for t in 0..v.rows() {
            write!(w, "{t}")?;
            for x in v.row(t) {
                write!(w, ",{x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    })?;
    write_with(&out_dir.join(FEATURES_DUMP), |w| features.write_dump(w))?;
    log::info!("confidence {:.6}", pred.confidence());
    Ok(pred)
}

pub fn cmd_detect(cfg: &RunConfig, checkpoint: &Path, wav: &Path, out_dir: &Path) -> CliResult<Vec<eval::Detection>> {
    cfg.validate()?;
    let params = load_checkpoint(cfg, checkpoint)?;
    let wave = Waveform::read_wav(wav)?;
    let found = eval::stream_detect(&params, &extractor(cfg), &wave, &cfg.stream)?;
    ensure_dir(out_dir)?;
    write_with(&out_dir.join(DETECTIONS), |w| {
        writeln!(w, "time_s,confidence")?;
        for d in &found {
            writeln!(w, "{},{}", d.time_s, d.confidence)?;
        }
        Ok(())
    })?;
    Ok(found)
}

/// Writes the synthetic corpus, noise and impulse-response lists, a demo
/// stream with the keyword at 5 s and 14 s, and a config pointing at them.
pub fn cmd_gen_corpus(cfg: &RunConfig, out_dir: &Path) -> CliResult<Manifest> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let synth = Synthesizer::new(cfg.corpus.clone());
    let manifest = synth.write_to_dir(out_dir)?;
    synth.stream(20.0, &[5.0, 14.0])?.write_wav(&out_dir.join("stream.wav"))?;
    let mut c = cfg.clone();
    let abs = |name: &str| -> CliResult<PathBuf> {
        let p = out_dir.join(name);
        p.canonicalize().map_err(io_context(format!("resolving {}", p.display())))
    };
    c.data.manifest = Some(abs("manifest.csv")?);
    c.augment.noise_list = Some(abs("noise.txt")?);
    c.augment.rir_list = Some(abs("rir.txt")?);
    fs::write(out_dir.join(SNAPSHOT), c.to_toml()).map_err(io_context("writing config"))?;
    Ok(manifest)
}
