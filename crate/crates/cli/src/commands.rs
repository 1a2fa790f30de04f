use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use tformer_core::numerics::{Graph, SeededRng};
use tformer_core::synthgen::{generate, Dataset};
use tformer_core::tformer::export_attention_maps;
use tformer_core::trainer::{checkpoint_dir, evaluate, load_model, train, Checkpoint};

use crate::ablate::{self, Axis};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::heatmap;

pub const THREADS_ENV: &str = "TFORMER_LAB_THREADS";

/// Applies flag overrides, creates the output directory and echoes the resolved config into it.
pub fn prepare(mut cfg: ExperimentConfig, out: Option<PathBuf>, seed: Option<u64>) -> CliResult<ExperimentConfig> {
    if let Some(o) = out {
        cfg.out = Some(o);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.resolve()?;
    let dir = cfg.out_dir()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(cfg)
}

/// Appends one line to `{out}/{name}`; wall-clock figures go here and nowhere else.
fn log(dir: &Path, name: &str, line: &str) -> CliResult<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(dir.join(name))?;
    writeln!(f, "{line}")?;
    Ok(())
}

pub fn dataset_path(out: &Path) -> PathBuf {
    out.join("dataset.bin")
}

/// Writes the dataset container and returns its checksum.
pub fn gen(cfg: &ExperimentConfig) -> CliResult<String> {
    let r = cfg.resolve()?;
    let ds = generate(&r.spec)?;
    Ok(ds.save(&dataset_path(cfg.out_dir()?))?)
}

fn dataset_for(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    let r = cfg.resolve()?;
    let path = dataset_path(cfg.out_dir()?);
    if path.exists() {
        let ds = Dataset::load(&path)?;
        if ds.spec == r.spec {
            return Ok(ds);
        }
    }
    Ok(generate(&r.spec)?)
}

pub struct TrainSummary {
    pub best_epoch: u64,
    pub best_val: f64,
    pub test: f64,
}

pub fn train_cmd(cfg: &ExperimentConfig) -> CliResult<TrainSummary> {
    let start = Instant::now();
    let r = cfg.resolve()?;
    let dir = cfg.out_dir()?;
    let ds = dataset_for(cfg)?;
    let outcome = train(&r.model, &ds, &r.train, Some(dir))?;
    let best = outcome.log.best().expect("at least one epoch");
    let test = evaluate(&outcome.best, &ds.test, r.train.seed)?;
    log(dir, "train.log", &format!("train seed={} seconds={:.3}", r.train.seed, start.elapsed().as_secs_f64()))?;
    Ok(TrainSummary {
        best_epoch: best.epoch,
        best_val: best.val.overall(),
        test: test.overall(),
    })
}

/// Test-split accuracy of a checkpoint (default `checkpoints/best.ckpt`), also written to `eval.csv`.
pub fn eval_cmd(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> CliResult<String> {
    let r = cfg.resolve()?;
    let dir = cfg.out_dir()?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| checkpoint_dir(dir).join("best.ckpt"));
    let ckpt = load_checkpoint(&path)?;
    let model = load_model(r.model, &r.train, &ckpt)?;
    let ds = dataset_for(cfg)?;
    let acc = evaluate(&model, &ds.test, r.train.seed)?;
    let csv = format!("split,overall,per_kind\ntest,{},{}\n", acc.overall(), acc.per_kind_field());
    fs::write(dir.join("eval.csv"), &csv)?;
    Ok(csv)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::Runtime(format!("missing checkpoint {}", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

pub fn threads_from_env() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&t| t > 0)
            .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
    }
}

/// Writes `ablate_{axis}.csv` and returns its contents.
pub fn ablate_cmd(cfg: &ExperimentConfig, axis: Axis, threads: usize) -> CliResult<String> {
    let dir = cfg.out_dir()?;
    let rows = ablate::sweep(axis, cfg, threads)?;
    for r in &rows {
        log(dir, &format!("ablate_{axis}.log"), &format!("{} seconds={:.3}", r.setting, r.seconds))?;
    }
    let csv = ablate::to_csv(&rows);
    fs::write(dir.join(format!("ablate_{axis}.csv")), &csv)?;
    Ok(csv)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub sample: usize,
    pub epoch: u64,
    pub stem: String,
    /// Share of query rows whose heaviest frame is a planted one.
    pub planted_argmax: f64,
}

/// Frame-granularity maps of test samples under the per-epoch checkpoints, in `{out}/attn`.
pub fn attnmap_cmd(cfg: &ExperimentConfig, samples: &[usize], epochs: &[u64]) -> CliResult<Vec<MapReport>> {
    let r = cfg.resolve()?;
    let dir = cfg.out_dir()?;
    let ds = dataset_for(cfg)?;
    if let Some(&bad) = samples.iter().find(|&&s| s >= ds.test.len()) {
        return Err(CliError::Config(format!("sample {bad} beyond {} test samples", ds.test.len())));
    }
    let maps_dir = dir.join("attn");
    fs::create_dir_all(&maps_dir)?;
    let mut reports = Vec::new();
    for &epoch in epochs {
        let ckpt = load_checkpoint(&checkpoint_dir(dir).join(format!("epoch_{epoch}.ckpt")))?;
        let model = load_model(r.model.clone(), &r.train, &ckpt)?;
        if model.tformer().is_none() {
            return Err(CliError::Config(format!("model `{}` has no cross-attention to export", cfg.model)));
        }
        for &i in samples {
            let s = &ds.test[i];
            let mut g = Graph::new(&model.store);
            let out = model.forward(&mut g, &s.frames, &s.question_ids, &s.answers, &mut SeededRng::new(i as u64))?;
            let summary = out.summary.expect("T-Former summary");
            let map = export_attention_maps(&summary, true)?;
            let stem = format!("sample{i}_epoch{epoch}");
            heatmap::write_all(&maps_dir, &stem, &map)?;
            let hits = (0..map.rows())
                .filter(|&row| {
                    let cells = map.row(row);
                    let arg = (0..cells.len()).fold(0, |b, c| if cells[c] > cells[b] { c } else { b });
                    s.meta.planted_frames.contains(&arg)
                })
                .count();
            reports.push(MapReport {
                sample: i,
                epoch,
                stem,
                planted_argmax: hits as f64 / map.rows() as f64,
            });
        }
    }
    Ok(reports)
}
