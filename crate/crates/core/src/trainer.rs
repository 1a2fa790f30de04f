//! Training loop, evaluation, metric logging and checkpoints.
//!
//! Every random draw during training comes from a stream derived from
//! `(seed, step)` or `(seed, step, slot)`, so a run resumed from a checkpoint
//! replays exactly the batches an uninterrupted run would have seen.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{sha256_hex, Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, VideoQaModel};
use crate::numerics::{AdamW, AdamWConfig, Graph, LrSchedule, SeededRng, Tensor};
use crate::reasoner::{predict, qa_loss};
use crate::synthgen::{Dataset, SyntheticSample, TaskKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u64,
    pub iters_per_epoch: u64,
    pub warmup_epochs: u64,
    pub cooldown_epochs: u64,
    pub init_lr: f64,
    pub warmup_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Published NExT-QA recipe.
    pub fn paper_nextqa() -> Self {
        Self {
            batch_size: 2,
            epochs: 10,
            iters_per_epoch: 2500,
            warmup_epochs: 1,
            cooldown_epochs: 2,
            init_lr: 3e-5,
            warmup_lr: 8e-6,
            min_lr: 1e-6,
            weight_decay: 0.05,
            seed: 0,
        }
    }

    /// From-scratch training at small scale.
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            epochs: 5,
            iters_per_epoch: 200,
            warmup_epochs: 1,
            cooldown_epochs: 1,
            init_lr: 1e-3,
            warmup_lr: 1e-4,
            min_lr: 1e-5,
            weight_decay: 0.01,
            seed: 0,
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.epochs * self.iters_per_epoch
    }

    /// Warmup then cosine decay, ending where the cooldown hold begins.
    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(
            self.init_lr,
            self.warmup_lr,
            self.min_lr,
            self.warmup_epochs * self.iters_per_epoch,
            (self.epochs - self.cooldown_epochs.min(self.epochs)) * self.iters_per_epoch,
        )
    }

    /// Learning rate applied by update number `step`; holds `min_lr` through the cooldown.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps() {
            return Err(Error::arg(format!("step {step} beyond {} total steps", self.total_steps())));
        }
        let s = self.schedule()?;
        s.lr_at(step.min(s.total_steps))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.iters_per_epoch == 0 {
            return Err(Error::config("batch_size, epochs and iters_per_epoch must be positive"));
        }
        if self.warmup_epochs == 0 {
            return Err(Error::config("warmup_epochs must be positive"));
        }
        if self.warmup_epochs + self.cooldown_epochs >= self.epochs {
            return Err(Error::config(format!(
                "warmup ({}) + cooldown ({}) epochs leave no decay phase in {} epochs",
                self.warmup_epochs, self.cooldown_epochs, self.epochs
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be finite and non-negative"));
        }
        self.schedule()?;
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// SHA-256 of the canonical JSON of both configs.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_vec(&(model, train)).expect("configs serialize");
    sha256_hex(&json)
}

const BATCH_STREAM: u64 = 0xba7c;
const SAMPLE_STREAM: u64 = 0x5a3e;
const EVAL_STREAM: u64 = 0xe7a1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Accuracy {
    pub overall: Tally,
    pub per_kind: BTreeMap<TaskKind, Tally>,
}

impl Accuracy {
    pub fn overall(&self) -> f64 {
        self.overall.accuracy()
    }

    pub fn kind(&self, kind: TaskKind) -> Option<f64> {
        self.per_kind.get(&kind).map(Tally::accuracy)
    }

    /// `planted=0.75;order=0.5`, kinds in fixed order.
    pub fn per_kind_field(&self) -> String {
        let parts: Vec<String> = self.per_kind.iter().map(|(k, t)| format!("{k}={}", t.accuracy())).collect();
        parts.join(";")
    }
}

/// Accuracy over `samples`. Parameters are only read.
pub fn evaluate(model: &VideoQaModel, samples: &[SyntheticSample], seed: u64) -> Result<Accuracy> {
    let mut acc = Accuracy::default();
    for (i, s) in samples.iter().enumerate() {
        let mut rng = SeededRng::derive(seed, &[EVAL_STREAM, i as u64]);
        let mut g = Graph::new(&model.store);
        let out = model.forward(&mut g, &s.frames, &s.question_ids, &s.answers, &mut rng)?;
        let hit = predict(g.value(out.logits).data()) == s.answers.gold;
        for t in [&mut acc.overall, acc.per_kind.entry(s.kind).or_default()] {
            t.total += 1;
            t.correct += hit as usize;
        }
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Accuracy,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    pub const HEADER: &'static str = "epoch,step,lr,train_loss,val_acc_overall,val_acc_per_kind";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch,
                r.step,
                r.lr,
                r.train_loss,
                r.val.overall(),
                r.val.per_kind_field()
            )
            .expect("write to string");
        }
        out
    }

    pub fn best(&self) -> Option<&MetricRow> {
        self.rows
            .iter()
            .fold(None, |best: Option<&MetricRow>, r| match best {
                Some(b) if b.val.overall() >= r.val.overall() => Some(b),
                _ => Some(r),
            })
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TFLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters by name, AdamW moments, and the step they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
    pub first_moments: Vec<Tensor>,
    pub second_moments: Vec<Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.bytes(self.config_hash.as_bytes());
        w.u64(self.step);
        w.usize(self.params.len());
        for ((name, value), (m, v)) in self.params.iter().zip(self.first_moments.iter().zip(&self.second_moments)) {
            w.bytes(name.as_bytes());
            w.tensor(value);
            w.tensor(m);
            w.tensor(v);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("checkpoint", bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let config_hash = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| r.err("config hash is not UTF-8"))?;
        let step = r.u64()?;
        let count = r.usize()?;
        let (mut params, mut first, mut second) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..count {
            let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| r.err("parameter name is not UTF-8"))?;
            let value = r.tensor()?;
            let (m, v) = (r.tensor()?, r.tensor()?);
            if m.shape() != value.shape() || v.shape() != value.shape() {
                return Err(r.err(format!("moment shapes disagree with `{name}`")));
            }
            params.push((name, value));
            first.push(m);
            second.push(v);
        }
        r.finish()?;
        Ok(Self {
            config_hash,
            step,
            params,
            first_moments: first,
            second_moments: second,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Model plus optimizer state for one training run.
pub struct Trainer<'d> {
    pub model: VideoQaModel,
    pub optimizer: AdamW,
    pub step: u64,
    pub config: TrainConfig,
    pub config_hash: String,
    dataset: &'d Dataset,
}

impl<'d> Trainer<'d> {
    pub fn new(model_config: ModelConfig, config: TrainConfig, dataset: &'d Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.train.is_empty() {
            return Err(Error::config("training split is empty"));
        }
        if model_config.vocab_size < dataset.vocab_size() {
            return Err(Error::config(format!(
                "model vocabulary ({}) smaller than dataset vocabulary ({})",
                model_config.vocab_size,
                dataset.vocab_size()
            )));
        }
        let config_hash = config_hash(&model_config, &config);
        let model = VideoQaModel::new(model_config, config.seed)?;
        let optimizer = AdamW::new(&model.store, config.adamw());
        Ok(Self {
            model,
            optimizer,
            step: 0,
            config,
            config_hash,
            dataset,
        })
    }

    /// Restores parameters, moments and step; the configs must hash to the saved value.
    pub fn resume(model_config: ModelConfig, config: TrainConfig, dataset: &'d Dataset, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(model_config, config, dataset)?;
        if ckpt.config_hash != t.config_hash {
            return Err(Error::ConfigHashMismatch {
                expected: t.config_hash.clone(),
                found: ckpt.config_hash.clone(),
            });
        }
        load_params(&mut t.model, ckpt)?;
        t.optimizer = AdamW::from_state(t.config.adamw(), ckpt.first_moments.clone(), ckpt.second_moments.clone(), ckpt.step);
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.config_hash.clone(),
            step: self.step,
            params: self.model.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
            first_moments: self.optimizer.first_moments().to_vec(),
            second_moments: self.optimizer.second_moments().to_vec(),
        }
    }

    /// One optimizer update; returns the mean batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let step = self.step;
        let lr = self.config.lr_at(step)?;
        let train = &self.dataset.train;
        let b = self.config.batch_size;
        let mut picker = SeededRng::derive(self.config.seed, &[BATCH_STREAM, step]);
        let batch: Vec<usize> = (0..b).map(|_| picker.below(train.len())).collect();

        self.model.store.zero_grad();
        let mut total = 0.0;
        for (slot, &idx) in batch.iter().enumerate() {
            let s = &train[idx];
            let mut rng = SeededRng::derive(self.config.seed, &[SAMPLE_STREAM, step, slot as u64]);
            let grads = {
                let mut g = Graph::new(&self.model.store);
                let out = self.model.forward(&mut g, &s.frames, &s.question_ids, &s.answers, &mut rng)?;
                let loss = qa_loss(&mut g, out.logits, s.answers.gold)?;
                let value = g.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss(step));
                }
                total += value;
                let scaled = g.scale(loss, 1.0 / b as f64);
                g.backward(scaled)?
            };
            self.model.store.accumulate(&grads.params);
        }
        self.optimizer.step(&mut self.model.store, lr)?;
        self.step += 1;
        Ok(total / b as f64)
    }

    pub fn evaluate(&self, samples: &[SyntheticSample]) -> Result<Accuracy> {
        evaluate(&self.model, samples, self.config.seed)
    }
}

fn load_params(model: &mut VideoQaModel, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.params.len() != model.store.len() {
        return Err(Error::format(
            "checkpoint",
            format!("{} parameters, model has {}", ckpt.params.len(), model.store.len()),
        ));
    }
    for (p, (name, value)) in model.store.iter_mut().zip(&ckpt.params) {
        if &p.name != name || p.value.shape() != value.shape() {
            return Err(Error::format("checkpoint", format!("parameter `{name}` does not match `{}`", p.name)));
        }
        p.value = value.clone();
    }
    Ok(())
}

/// Builds a model from a checkpoint without optimizer state, for evaluation.
pub fn load_model(model_config: ModelConfig, train_config: &TrainConfig, ckpt: &Checkpoint) -> Result<VideoQaModel> {
    let expected = config_hash(&model_config, train_config);
    if ckpt.config_hash != expected {
        return Err(Error::ConfigHashMismatch {
            expected,
            found: ckpt.config_hash.clone(),
        });
    }
    let mut model = VideoQaModel::new(model_config, train_config.seed)?;
    load_params(&mut model, ckpt)?;
    Ok(model)
}

pub struct TrainOutcome {
    pub log: MetricLog,
    /// Parameters from the epoch with the best validation accuracy.
    pub best: VideoQaModel,
    pub last: VideoQaModel,
}

pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

/// Full run. With `out`, writes `checkpoints/epoch_{e}.ckpt`, `best.ckpt`,
/// `last.ckpt` and `metrics.csv` there.
pub fn train(model_config: &ModelConfig, dataset: &Dataset, config: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model_config.clone(), config.clone(), dataset)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(checkpoint_dir(dir))?;
    }
    let mut log = MetricLog::default();
    let mut best: Option<(f64, VideoQaModel)> = None;
    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for _ in 0..config.iters_per_epoch {
            lr = config.lr_at(trainer.step)?;
            loss_sum += trainer.train_step()?;
        }
        let val = trainer.evaluate(&dataset.val)?;
        let score = val.overall();
        log.rows.push(MetricRow {
            epoch,
            step: trainer.step,
            lr,
            train_loss: loss_sum / config.iters_per_epoch as f64,
            val,
        });
        let improved = best.as_ref().is_none_or(|(b, _)| score > *b);
        if improved {
            best = Some((score, trainer.model.clone()));
        }
        if let Some(dir) = out {
            let ckpt = trainer.checkpoint();
            let cdir = checkpoint_dir(dir);
            ckpt.save(&cdir.join(format!("epoch_{epoch}.ckpt")))?;
            if improved {
                ckpt.save(&cdir.join("best.ckpt"))?;
            }
            ckpt.save(&cdir.join("last.ckpt"))?;
            std::fs::write(dir.join("metrics.csv"), log.to_csv())?;
        }
    }
    let best = best.expect("at least one epoch").1;
    Ok(TrainOutcome {
        log,
        best,
        last: trainer.model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;
    use crate::synthgen::{generate, TaskSpec};

    fn tiny(kind: TaskKind) -> (Dataset, ModelConfig, TrainConfig) {
        let base = match kind {
            TaskKind::PlantedEvent => TaskSpec::planted(2),
            TaskKind::EventOrder => TaskSpec::order(2),
        };
        let spec = TaskSpec {
            n: 6,
            d: 8,
            train_size: 16,
            val_size: 8,
            test_size: 8,
            ..base
        };
        let ds = generate(&spec).unwrap();
        let mut m = ModelConfig::desk(ModelKind::TFormer, &spec, 2);
        m.tformer.heads = 2;
        m.tformer.ffn_dim = 16;
        m.reasoner.heads = 2;
        m.reasoner.layers = 1;
        let t = TrainConfig {
            batch_size: 4,
            epochs: 3,
            iters_per_epoch: 2,
            ..TrainConfig::desk()
        };
        (ds, m, t)
    }

    #[test]
    fn lr_trace_with_cooldown() {
        let c = TrainConfig::paper_nextqa();
        c.validate().unwrap();
        assert_eq!(c.lr_at(0).unwrap(), c.warmup_lr);
        assert!((c.lr_at(2500).unwrap() - c.init_lr).abs() < 1e-18);
        assert!((c.lr_at(c.total_steps()).unwrap() - c.min_lr).abs() < 1e-18);
        assert!((c.lr_at(20_000).unwrap() - c.min_lr).abs() < 1e-18);
        assert!((c.lr_at(22_000).unwrap() - c.min_lr).abs() < 1e-18);
        assert!(c.lr_at(19_999).unwrap() > c.min_lr);
        assert!(c.lr_at(25_001).is_err());
    }

    #[test]
    fn bad_configs_rejected() {
        let base = TrainConfig::desk();
        for bad in [
            TrainConfig { batch_size: 0, ..base.clone() },
            TrainConfig { warmup_epochs: 0, ..base.clone() },
            TrainConfig { warmup_epochs: 3, cooldown_epochs: 2, ..base.clone() },
            TrainConfig { init_lr: -1.0, ..base.clone() },
            TrainConfig { weight_decay: f64::NAN, ..base.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn accuracy_bookkeeping() {
        let mut acc = Accuracy {
            overall: Tally { correct: 3, total: 4 },
            ..Default::default()
        };
        acc.per_kind.insert(TaskKind::PlantedEvent, Tally { correct: 2, total: 2 });
        acc.per_kind.insert(TaskKind::EventOrder, Tally { correct: 1, total: 2 });
        assert_eq!(acc.per_kind_field(), "planted=1;order=0.5");
        let weighted: f64 = acc.per_kind.values().map(|t| t.accuracy() * t.total as f64).sum::<f64>() / 4.0;
        assert_eq!(weighted, acc.overall());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let (ds, m, t) = tiny(TaskKind::PlantedEvent);
        let mut tr = Trainer::new(m, t, &ds).unwrap();
        tr.train_step().unwrap();
        let bytes = tr.checkpoint().to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, tr.checkpoint());
        assert_eq!(back.to_bytes(), bytes);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
    }

    #[test]
    fn hash_mismatch_is_explicit() {
        let (ds, m, t) = tiny(TaskKind::PlantedEvent);
        let tr = Trainer::new(m.clone(), t.clone(), &ds).unwrap();
        let ckpt = tr.checkpoint();
        let other = TrainConfig { seed: 99, ..t };
        assert!(matches!(
            Trainer::resume(m, other, &ds, &ckpt),
            Err(Error::ConfigHashMismatch { .. })
        ));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (ds, m, t) = tiny(TaskKind::EventOrder);
        let mut straight = Trainer::new(m.clone(), t.clone(), &ds).unwrap();
        for _ in 0..4 {
            straight.train_step().unwrap();
        }
        let mut first = Trainer::new(m.clone(), t.clone(), &ds).unwrap();
        for _ in 0..2 {
            first.train_step().unwrap();
        }
        let ckpt = Checkpoint::from_bytes(&first.checkpoint().to_bytes()).unwrap();
        let mut resumed = Trainer::resume(m, t, &ds, &ckpt).unwrap();
        for _ in 0..2 {
            resumed.train_step().unwrap();
        }
        assert_eq!(resumed.checkpoint().to_bytes(), straight.checkpoint().to_bytes());
    }

    #[test]
    fn evaluation_does_not_mutate() {
        let (ds, m, t) = tiny(TaskKind::PlantedEvent);
        let tr = Trainer::new(m, t, &ds).unwrap();
        let before = sha256_hex(&tr.checkpoint().to_bytes());
        let acc = tr.evaluate(&ds.test).unwrap();
        assert_eq!(acc.overall.total, ds.test.len());
        assert_eq!(sha256_hex(&tr.checkpoint().to_bytes()), before);
    }

    #[test]
    fn training_run_is_deterministic_and_logged() {
        let (ds, m, t) = tiny(TaskKind::PlantedEvent);
        let dir = tempfile::tempdir().unwrap();
        let a = train(&m, &ds, &t, Some(dir.path())).unwrap();
        let b = train(&m, &ds, &t, None).unwrap();
        assert_eq!(a.log.to_csv(), b.log.to_csv());
        assert_eq!(a.log.rows.len() as u64, t.epochs);
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv, a.log.to_csv());
        assert!(csv.starts_with(MetricLog::HEADER));
        for name in ["epoch_1.ckpt", "epoch_3.ckpt", "best.ckpt", "last.ckpt"] {
            assert!(checkpoint_dir(dir.path()).join(name).exists(), "{name}");
        }
        let last = Checkpoint::load(&checkpoint_dir(dir.path()).join("last.ckpt")).unwrap();
        assert_eq!(last.step, t.total_steps());
        let reloaded = load_model(m, &t, &last).unwrap();
        let values = |v: &VideoQaModel| v.store.iter().map(|(_, p)| p.value.clone()).collect::<Vec<_>>();
        assert_eq!(values(&reloaded), values(&a.last));
    }

    #[test]
    fn non_finite_loss_aborts_with_step() {
        let (ds, m, t) = tiny(TaskKind::PlantedEvent);
        let mut tr = Trainer::new(m, t, &ds).unwrap();
        tr.train_step().unwrap();
        let id = tr.model.store.find("reasoner.head.bias").unwrap();
        tr.model.store.get_mut(id).value = Tensor::new(vec![1, 1], vec![f64::NAN]).unwrap();
        assert!(matches!(tr.train_step(), Err(Error::NonFiniteLoss(1))));
    }
}
