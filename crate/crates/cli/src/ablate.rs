//! One-axis sweeps. Each cell trains from scratch on the base config with a
//! single setting changed and reports test accuracy of its best epoch.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use tformer_core::baselines::BaselineKind;
use tformer_core::model::ModelKind;
use tformer_core::synthgen::generate;
use tformer_core::trainer::{evaluate, train};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Strategy,
    Layers,
    Heads,
    Ratio,
    Init,
    Module,
    Ffn,
}

impl Axis {
    pub const ALL: [Self; 7] = [
        Self::Strategy,
        Self::Layers,
        Self::Heads,
        Self::Ratio,
        Self::Init,
        Self::Module,
        Self::Ffn,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Self::Strategy => "strategy",
            Self::Layers => "layers",
            Self::Heads => "heads",
            Self::Ratio => "ratio",
            Self::Init => "init",
            Self::Module => "module",
            Self::Ffn => "ffn",
        }
    }

    /// Settings in row order, each with the config it trains.
    pub fn cells(self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Self::Strategy => ["kmeans", "kmedoids", "random", "uniform"]
                .map(|s| (s.to_string(), with(&|c| c.query_init = s.into())))
                .to_vec(),
            Self::Init => ["kmedoids", "learnable"]
                .map(|s| (s.to_string(), with(&|c| c.query_init = s.into())))
                .to_vec(),
            Self::Layers => [1, 2, 3, 4].map(|v| (v.to_string(), with(&|c| c.layers = v))).to_vec(),
            Self::Heads => [1, 2, 4, 8].map(|v| (v.to_string(), with(&|c| c.heads = v))).to_vec(),
            Self::Ffn => [16, 32, 64, 128].map(|v| (v.to_string(), with(&|c| c.ffn_dim = v))).to_vec(),
            Self::Ratio => {
                let mut cells = Vec::new();
                for n in [8, 16, 32] {
                    for k in [1, 4, 8] {
                        cells.push((format!("n{n:02}_k{k}"), with(&|c| {
                            c.n = n;
                            c.k = k;
                        })));
                    }
                }
                cells
            }
            Self::Module => vec![
                ("full".into(), base.clone()),
                ("no_guidance".into(), with(&|c| c.use_question_guidance = false)),
                ("no_timestamps".into(), with(&|c| c.use_timestamps = false)),
                (
                    "no_tformer".into(),
                    with(&|c| c.model = ModelKind::Baseline(BaselineKind::MeanPool).to_string()),
                ),
            ],
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Axis {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Self::ALL.into_iter().find(|a| a.token() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|a| a.token()).collect();
            CliError::Config(format!("unknown axis `{s}`, expected one of: {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub setting: String,
    pub overall: f64,
    pub per_kind: String,
    pub params_trained: usize,
    pub seconds: f64,
}

pub const HEADER: &str = "setting,overall,per_kind,params_trained";

pub fn run_cell(setting: String, cfg: &ExperimentConfig) -> CliResult<Row> {
    let start = Instant::now();
    let r = cfg.resolve()?;
    let ds = generate(&r.spec)?;
    let out = train(&r.model, &ds, &r.train, None)?;
    let acc = evaluate(&out.best, &ds.test, r.train.seed)?;
    Ok(Row {
        setting,
        overall: acc.overall(),
        per_kind: acc.per_kind_field(),
        params_trained: out.best.store.trainable_count(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs every cell, at most `threads` at a time, and returns rows in setting order.
pub fn sweep(axis: Axis, base: &ExperimentConfig, threads: usize) -> CliResult<Vec<Row>> {
    let cells = axis.cells(base);
    for (setting, c) in &cells {
        c.resolve().map_err(|e| CliError::Config(format!("setting {setting}: {e}")))?;
    }
    let mut rows = Vec::with_capacity(cells.len());
    for chunk in cells.chunks(threads.max(1)) {
        let results: Vec<CliResult<Row>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(setting, c)| s.spawn(move || run_cell(setting.clone(), c)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Runtime("sweep cell panicked".into()))))
                .collect()
        });
        for r in results {
            rows.push(r?);
        }
    }
    rows.sort_by_key(|a| sort_key(&a.setting));
    Ok(rows)
}

/// Numeric settings sort by value, the rest lexicographically.
fn sort_key(setting: &str) -> (u64, String) {
    match setting.parse::<u64>() {
        Ok(v) => (v, String::new()),
        Err(_) => (u64::MAX, setting.to_string()),
    }
}

pub fn to_csv(rows: &[Row]) -> String {
    let mut out = format!("{HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.setting, r.overall, r.per_kind, r.params_trained));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentConfig {
        ExperimentConfig::parse(
            r#"
task = "order"
seed = 1
n = 8
t_f = 1
d = 8
num_options = 2
train_size = 8
val_size = 4
test_size = 4
model = "tformer"
k = 2
epochs = 3
iters_per_epoch = 1
batch_size = 2
"#,
        )
        .unwrap()
    }

    #[test]
    fn axis_tokens_round_trip() {
        for a in Axis::ALL {
            assert_eq!(a.token().parse::<Axis>().unwrap(), a);
        }
        let err = "depth".parse::<Axis>().unwrap_err();
        assert!(err.to_string().contains("strategy, layers, heads, ratio, init, module, ffn"));
    }

    #[test]
    fn cell_counts() {
        let b = base();
        let counts: Vec<usize> = Axis::ALL.iter().map(|a| a.cells(&b).len()).collect();
        assert_eq!(counts, vec![4, 4, 4, 9, 2, 4, 4]);
    }

    #[test]
    fn settings_sort_numerically() {
        let mut v = vec!["16", "2", "128", "64"];
        v.sort_by_key(|s| sort_key(s));
        assert_eq!(v, vec!["2", "16", "64", "128"]);
        let mut r = vec!["n32_k1", "n08_k4", "n16_k8", "n08_k1"];
        r.sort_by_key(|s| sort_key(s));
        assert_eq!(r, vec!["n08_k1", "n08_k4", "n16_k8", "n32_k1"]);
    }

    #[test]
    fn parallel_sweep_matches_serial() {
        let b = base();
        let one = sweep(Axis::Init, &b, 1).unwrap();
        let two = sweep(Axis::Init, &b, 2).unwrap();
        assert_eq!(to_csv(&one), to_csv(&two));
        assert_eq!(one.len(), 2);
    }
}
