//! Synthetic video-QA tasks with known ground truth.
//!
//! Vocabulary layout for `E` event types: ids `0..E` name events, `E..2E`
//! name attributes, then `yes` and `no`.
//!
//! * Planted event: 2 or 3 frames each carry an event prototype plus an
//!   attribute prototype. The question names one of the planted events, the
//!   options are attributes, and the gold option is the attribute sharing a
//!   frame with the named event. Every other planted attribute is offered as
//!   a distractor when there is room, so answering needs the question.
//! * Event order: two event prototypes in two frames; the question `[a, b]`
//!   asks whether `a` comes first. Samples come in pairs whose only
//!   difference is that the two planted frames trade places, so the label is
//!   carried by order alone.
//!
//! Dataset files: magic `TFLDSET\0`, `u32` version, a length-prefixed JSON
//! header (spec, vocabulary, prototypes), then the three splits. All
//! integers are little-endian, ids and lengths are `u64`, floats are `f64`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{sha256_hex, Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor};
use crate::reasoner::AnswerSet;
use crate::sampler::FrameTokenSequence;

pub const DATASET_MAGIC: &[u8; 8] = b"TFLDSET\0";
pub const DATASET_VERSION: u32 = 1;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    PlantedEvent,
    EventOrder,
}

impl TaskKind {
    pub const ALL: [Self; 2] = [Self::PlantedEvent, Self::EventOrder];

    pub fn token(self) -> &'static str {
        match self {
            Self::PlantedEvent => "planted",
            Self::EventOrder => "order",
        }
    }

    fn code(self) -> u8 {
        match self {
            Self::PlantedEvent => 0,
            Self::EventOrder => 1,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.token() == s)
            .ok_or_else(|| Error::config(format!("unknown task `{s}`, expected planted | order")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n: usize,
    pub t_f: usize,
    pub d: usize,
    pub num_event_types: usize,
    pub num_options: usize,
    pub noise_sigma: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn planted(seed: u64) -> Self {
        Self {
            kind: TaskKind::PlantedEvent,
            n: 16,
            t_f: 2,
            d: 32,
            num_event_types: 8,
            num_options: 4,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            train_size: 4000,
            val_size: 400,
            test_size: 1000,
            seed,
        }
    }

    pub fn order(seed: u64) -> Self {
        Self {
            kind: TaskKind::EventOrder,
            n: 8,
            num_options: 2,
            ..Self::planted(seed)
        }
    }

    pub fn vocab_size(&self) -> usize {
        2 * self.num_event_types + 2
    }

    pub fn yes_id(&self) -> usize {
        2 * self.num_event_types
    }

    pub fn no_id(&self) -> usize {
        2 * self.num_event_types + 1
    }

    pub fn attribute_id(&self, attr: usize) -> usize {
        self.num_event_types + attr
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.num_event_types;
        if self.t_f == 0 || self.d == 0 {
            return Err(Error::config("t_f and d must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and non-negative"));
        }
        if self.train_size == 0 {
            return Err(Error::config("train_size must be positive"));
        }
        let sizes = [self.train_size, self.val_size, self.test_size];
        match self.kind {
            TaskKind::PlantedEvent => {
                if !(2..=5).contains(&self.num_options) {
                    return Err(Error::config("num_options must lie in 2..=5"));
                }
                if e < self.num_options || e < 3 {
                    return Err(Error::config(format!(
                        "planted task needs num_event_types ≥ max(num_options, 3), got {e}"
                    )));
                }
                if self.n < 3 {
                    return Err(Error::config("planted task needs n ≥ 3"));
                }
                if sizes.iter().any(|s| s % self.num_options != 0) {
                    return Err(Error::config(format!(
                        "split sizes must be multiples of num_options = {} for exact balance",
                        self.num_options
                    )));
                }
            }
            TaskKind::EventOrder => {
                if self.num_options != 2 {
                    return Err(Error::config("order task has exactly 2 options"));
                }
                if e < 2 || self.n < 2 {
                    return Err(Error::config("order task needs ≥ 2 event types and ≥ 2 frames"));
                }
                if sizes.iter().any(|s| s % 2 != 0) {
                    return Err(Error::config("order task split sizes must be even"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub events: Vec<Vec<f64>>,
    pub attributes: Vec<Vec<f64>>,
}

fn unit_vector(d: usize, rng: &mut SeededRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl Prototypes {
    fn draw(spec: &TaskSpec, rng: &mut SeededRng) -> Self {
        let e = spec.num_event_types;
        let events = (0..e).map(|_| unit_vector(spec.d, rng)).collect();
        let attributes = (0..e).map(|_| unit_vector(spec.d, rng)).collect();
        Self { events, attributes }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    /// Frames carrying a prototype, in the order the events were drawn.
    pub planted_frames: Vec<usize>,
    /// Frame holding the event the question names (planted task only).
    pub queried_frame: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub kind: TaskKind,
    pub frames: FrameTokenSequence,
    pub question_ids: Vec<usize>,
    pub answers: AnswerSet,
    pub meta: SampleMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub vocab: Vec<String>,
    pub prototypes: Prototypes,
    pub train: Vec<SyntheticSample>,
    pub val: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

fn vocab_tokens(spec: &TaskSpec) -> Vec<String> {
    let e = spec.num_event_types;
    (0..e)
        .map(|i| format!("event{i}"))
        .chain((0..e).map(|i| format!("attr{i}")))
        .chain(["yes".to_string(), "no".to_string()])
        .collect()
}

fn background(spec: &TaskSpec, rng: &mut SeededRng) -> Vec<f64> {
    (0..spec.n * spec.t_f * spec.d).map(|_| spec.noise_sigma * rng.normal()).collect()
}

fn plant(data: &mut [f64], spec: &TaskSpec, frame: usize, vectors: &[&[f64]]) {
    let block = spec.t_f * spec.d;
    for tok in data[frame * block..(frame + 1) * block].chunks_mut(spec.d) {
        for v in vectors {
            tok.iter_mut().zip(v.iter()).for_each(|(t, x)| *t += x);
        }
    }
}

fn sequence(spec: &TaskSpec, data: Vec<f64>) -> FrameTokenSequence {
    FrameTokenSequence::new(Tensor::new(vec![spec.n, spec.t_f, spec.d], data).expect("frame shape")).expect("finite frames")
}

fn planted_sample(spec: &TaskSpec, protos: &Prototypes, gold: usize, rng: &mut SeededRng) -> SyntheticSample {
    let (e, a) = (spec.num_event_types, spec.num_options);
    let m = 2 + rng.below(2);
    let events = rng.choose_distinct(e, m);
    let attrs = rng.choose_distinct(e, m);
    let frames = rng.choose_distinct(spec.n, m);
    let queried = rng.below(m);

    let mut data = background(spec, rng);
    for j in 0..m {
        plant(&mut data, spec, frames[j], &[&protos.events[events[j]], &protos.attributes[attrs[j]]]);
    }

    let mut distractors: Vec<usize> = (0..m).filter(|&j| j != queried).map(|j| attrs[j]).collect();
    rng.shuffle(&mut distractors);
    let mut rest: Vec<usize> = (0..e).filter(|x| !attrs.contains(x)).collect();
    rng.shuffle(&mut rest);
    distractors.extend(rest);
    distractors.truncate(a - 1);
    rng.shuffle(&mut distractors);
    distractors.insert(gold, attrs[queried]);

    let options = distractors.into_iter().map(|x| vec![spec.attribute_id(x)]).collect();
    SyntheticSample {
        kind: TaskKind::PlantedEvent,
        frames: sequence(spec, data),
        question_ids: vec![events[queried]],
        answers: AnswerSet::new(options, gold).expect("valid planted answers"),
        meta: SampleMeta {
            planted_frames: frames.clone(),
            queried_frame: Some(frames[queried]),
        },
    }
}

fn order_pair(spec: &TaskSpec, protos: &Prototypes, rng: &mut SeededRng) -> [SyntheticSample; 2] {
    let ev = rng.choose_distinct(spec.num_event_types, 2);
    let (a, b) = (ev[0], ev[1]);
    let fr = rng.choose_distinct(spec.n, 2);
    let (i, j) = (fr[0], fr[1]);
    let mut data = background(spec, rng);
    plant(&mut data, spec, i, &[&protos.events[a]]);
    plant(&mut data, spec, j, &[&protos.events[b]]);
    let first = sequence(spec, data);
    let mut perm: Vec<usize> = (0..spec.n).collect();
    perm.swap(i, j);
    let second = first.permuted(&perm).expect("swap permutation");

    let make = |frames, pos_a: usize, pos_b: usize| {
        let gold = if pos_a < pos_b { 0 } else { 1 };
        SyntheticSample {
            kind: TaskKind::EventOrder,
            frames,
            question_ids: vec![a, b],
            answers: AnswerSet::new(vec![vec![spec.yes_id()], vec![spec.no_id()]], gold).expect("valid order answers"),
            meta: SampleMeta {
                planted_frames: vec![pos_a, pos_b],
                queried_frame: None,
            },
        }
    };
    [make(first, i, j), make(second, j, i)]
}

/// Planted-event dataset. Prototypes come first from `rng`, then the train,
/// validation and test splits in that order.
pub fn gen_planted_event(spec: &TaskSpec, rng: &mut SeededRng) -> Result<Dataset> {
    if spec.kind != TaskKind::PlantedEvent {
        return Err(Error::config("gen_planted_event needs kind = planted"));
    }
    spec.validate()?;
    let protos = Prototypes::draw(spec, rng);
    let mut split = |size: usize| -> Vec<SyntheticSample> {
        (0..size).map(|i| planted_sample(spec, &protos, i % spec.num_options, rng)).collect()
    };
    let (train, val, test) = (split(spec.train_size), split(spec.val_size), split(spec.test_size));
    Ok(Dataset {
        spec: spec.clone(),
        vocab: vocab_tokens(spec),
        prototypes: protos,
        train,
        val,
        test,
    })
}

/// Event-order dataset of swap pairs, stored adjacently.
pub fn gen_order_task(spec: &TaskSpec, rng: &mut SeededRng) -> Result<Dataset> {
    if spec.kind != TaskKind::EventOrder {
        return Err(Error::config("gen_order_task needs kind = order"));
    }
    spec.validate()?;
    let protos = Prototypes::draw(spec, rng);
    let mut split = |size: usize| -> Vec<SyntheticSample> { (0..size / 2).flat_map(|_| order_pair(spec, &protos, rng)).collect() };
    let (train, val, test) = (split(spec.train_size), split(spec.val_size), split(spec.test_size));
    Ok(Dataset {
        spec: spec.clone(),
        vocab: vocab_tokens(spec),
        prototypes: protos,
        train,
        val,
        test,
    })
}

/// Dispatches on `spec.kind`, seeding from `spec.seed`.
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    let mut rng = SeededRng::new(spec.seed);
    match spec.kind {
        TaskKind::PlantedEvent => gen_planted_event(spec, &mut rng),
        TaskKind::EventOrder => gen_order_task(spec, &mut rng),
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: TaskSpec,
    vocab: Vec<String>,
    prototypes: Prototypes,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SyntheticSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(DATASET_MAGIC, DATASET_VERSION);
        let header = Header {
            spec: self.spec.clone(),
            vocab: self.vocab.clone(),
            prototypes: self.prototypes.clone(),
        };
        w.bytes(&serde_json::to_vec(&header).expect("header serializes"));
        for split in [&self.train, &self.val, &self.test] {
            w.usize(split.len());
            for s in split {
                w.u8(s.kind.code());
                w.tensor(s.frames.tokens());
                w.ids(&s.question_ids);
                w.usize(s.answers.options.len());
                s.answers.options.iter().for_each(|o| w.ids(o));
                w.usize(s.answers.gold);
                w.ids(&s.meta.planted_frames);
                match s.meta.queried_frame {
                    Some(q) => {
                        w.u8(1);
                        w.usize(q);
                    }
                    None => w.u8(0),
                }
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("dataset", bytes, DATASET_MAGIC, DATASET_VERSION)?;
        let header: Header = serde_json::from_slice(r.bytes()?).map_err(|e| r.err(format!("header: {e}")))?;
        header.spec.validate()?;
        let mut splits = Vec::with_capacity(3);
        for _ in 0..3 {
            let count = r.usize()?;
            let mut samples = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                let kind = match r.u8()? {
                    0 => TaskKind::PlantedEvent,
                    1 => TaskKind::EventOrder,
                    other => return Err(r.err(format!("unknown task code {other}"))),
                };
                let frames = FrameTokenSequence::new(r.tensor()?).map_err(|e| r.err(e.to_string()))?;
                let question_ids = r.ids()?;
                let n_opts = r.usize()?;
                let options = (0..n_opts).map(|_| r.ids()).collect::<Result<Vec<_>>>()?;
                let gold = r.usize()?;
                let answers = AnswerSet::new(options, gold).map_err(|e| r.err(e.to_string()))?;
                let planted_frames = r.ids()?;
                let queried_frame = match r.u8()? {
                    0 => None,
                    1 => Some(r.usize()?),
                    other => return Err(r.err(format!("bad option tag {other}"))),
                };
                samples.push(SyntheticSample {
                    kind,
                    frames,
                    question_ids,
                    answers,
                    meta: SampleMeta {
                        planted_frames,
                        queried_frame,
                    },
                });
            }
            splits.push(samples);
        }
        r.finish()?;
        let test = splits.pop().expect("three splits");
        let val = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        Ok(Self {
            spec: header.spec,
            vocab: header.vocab,
            prototypes: header.prototypes,
            train,
            val,
            test,
        })
    }

    /// SHA-256 of the serialized dataset, lowercase hex.
    pub fn checksum(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: TaskKind, seed: u64) -> TaskSpec {
        let base = match kind {
            TaskKind::PlantedEvent => TaskSpec::planted(seed),
            TaskKind::EventOrder => TaskSpec::order(seed),
        };
        TaskSpec {
            d: 8,
            train_size: 40,
            val_size: 8,
            test_size: 8,
            ..base
        }
    }

    /// Recovers the gold option from raw frames and prototypes alone: the
    /// option whose attribute, added to the queried event, best explains some frame.
    fn nearest_prototype_oracle(spec: &TaskSpec, protos: &Prototypes, s: &SyntheticSample) -> usize {
        let descriptors = s.frames.descriptors();
        let event = &protos.events[s.question_ids[0]];
        let fit = |o: &Vec<usize>| {
            let attr = &protos.attributes[o[0] - spec.num_event_types];
            (0..spec.n)
                .map(|f| {
                    let row = descriptors.row(f);
                    (0..spec.d).map(|c| (row[c] - event[c] - attr[c]).powi(2)).sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
        };
        (0..s.answers.len())
            .min_by(|&i, &j| fit(&s.answers.options[i]).total_cmp(&fit(&s.answers.options[j])))
            .unwrap()
    }

    #[test]
    fn noiseless_planted_gold_matches_oracle() {
        let spec = TaskSpec {
            noise_sigma: 0.0,
            ..small(TaskKind::PlantedEvent, 5)
        };
        let ds = generate(&spec).unwrap();
        for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            assert_eq!(nearest_prototype_oracle(&spec, &ds.prototypes, s), s.answers.gold);
        }
    }

    #[test]
    fn planted_structure() {
        let spec = small(TaskKind::PlantedEvent, 6);
        let ds = generate(&spec).unwrap();
        let mut hist = vec![0; spec.num_options];
        for s in &ds.train {
            hist[s.answers.gold] += 1;
            assert!((2..=3).contains(&s.meta.planted_frames.len()));
            assert!(s.meta.planted_frames.iter().all(|&f| f < spec.n));
            assert!(s.meta.planted_frames.contains(&s.meta.queried_frame.unwrap()));
            assert_eq!(s.answers.len(), spec.num_options);
            let mut opts: Vec<_> = s.answers.options.iter().map(|o| o[0]).collect();
            opts.sort_unstable();
            opts.dedup();
            assert_eq!(opts.len(), spec.num_options);
            assert!(s.question_ids[0] < spec.num_event_types);
        }
        assert!(hist.iter().all(|&h| h == spec.train_size / spec.num_options));
    }

    #[test]
    fn order_pairs_swap_and_balance() {
        let spec = small(TaskKind::EventOrder, 7);
        let ds = generate(&spec).unwrap();
        let yes = ds.train.iter().filter(|s| s.answers.gold == 0).count();
        assert_eq!(yes * 2, ds.train.len());
        for pair in ds.train.chunks(2) {
            let (x, y) = (&pair[0], &pair[1]);
            assert_eq!(x.question_ids, y.question_ids);
            assert_ne!(x.answers.gold, y.answers.gold);
            let (i, j) = (x.meta.planted_frames[0], x.meta.planted_frames[1]);
            let mut perm: Vec<usize> = (0..spec.n).collect();
            perm.swap(i, j);
            assert_eq!(x.frames.permuted(&perm).unwrap(), y.frames);

            let sorted = |s: &SyntheticSample| {
                let d = s.frames.descriptors();
                let mut rows: Vec<Vec<u64>> = (0..spec.n).map(|f| d.row(f).iter().map(|v| v.to_bits()).collect()).collect();
                rows.sort();
                rows
            };
            assert_eq!(sorted(x), sorted(y));
            assert_eq!(
                crate::baselines::mean_pool_tensor(&x.frames),
                crate::baselines::mean_pool_tensor(&y.frames)
            );
        }
    }

    #[test]
    fn determinism_and_round_trip() {
        for kind in TaskKind::ALL {
            let spec = small(kind, 8);
            let a = generate(&spec).unwrap();
            let b = generate(&spec).unwrap();
            assert_eq!(a.to_bytes(), b.to_bytes());
            let back = Dataset::from_bytes(&a.to_bytes()).unwrap();
            assert_eq!(back, a);
            assert_eq!(back.to_bytes(), a.to_bytes());
            let other = generate(&TaskSpec { seed: 9, ..spec }).unwrap();
            assert_ne!(other.checksum(), a.checksum());
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let ds = generate(&small(TaskKind::PlantedEvent, 10)).unwrap();
        for v in &ds.val {
            assert!(ds.train.iter().all(|t| t.frames != v.frames));
        }
    }

    #[test]
    fn corrupt_bytes_are_errors() {
        let bytes = generate(&small(TaskKind::EventOrder, 11)).unwrap().to_bytes();
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut flipped = bytes.clone();
        flipped[0] ^= 1;
        assert!(Dataset::from_bytes(&flipped).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Dataset::from_bytes(&extra).is_err());
    }

    #[test]
    fn infeasible_specs_rejected() {
        let base = small(TaskKind::PlantedEvent, 0);
        for bad in [
            TaskSpec { num_event_types: 3, num_options: 4, ..base.clone() },
            TaskSpec { train_size: 41, ..base.clone() },
            TaskSpec { num_options: 6, num_event_types: 8, train_size: 48, val_size: 12, test_size: 12, ..base.clone() },
            TaskSpec { noise_sigma: -1.0, ..base.clone() },
            TaskSpec { n: 2, ..base.clone() },
            TaskSpec { kind: TaskKind::EventOrder, num_options: 3, ..base.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        assert!(gen_order_task(&base, &mut SeededRng::new(0)).is_err());
    }
}
