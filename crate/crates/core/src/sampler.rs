//! Temporal query initialization: choose `k` of `n` frames and lift their
//! token blocks into the query set.
//!
//! Clustering strategies work on one descriptor per frame (the mean of the
//! frame's tokens) and always return indices of real frames, so the queries
//! are copies of input tokens whichever strategy picked them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor};

/// `n` frames of `t_f` tokens, each `d`-dimensional (tensor shape `[n, t_f, d]`).
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTokenSequence {
    tokens: Tensor,
}

impl FrameTokenSequence {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 3 {
            return Err(Error::arg(format!(
                "frame tokens must be [n, t_f, d], got {:?}",
                tokens.shape()
            )));
        }
        if !tokens.all_finite() {
            return Err(Error::arg("frame tokens must be finite"));
        }
        Ok(Self { tokens })
    }

    pub fn from_frames(frames: &[Tensor]) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::arg("no frames"))?;
        let (t_f, d) = (first.rows(), first.cols());
        let mut data = Vec::with_capacity(frames.len() * t_f * d);
        for f in frames {
            if f.shape() != first.shape() {
                return Err(Error::arg("frames differ in shape"));
            }
            data.extend_from_slice(f.data());
        }
        Self::new(Tensor::new(vec![frames.len(), t_f, d], data)?)
    }

    pub fn n(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn t_f(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn d(&self) -> usize {
        self.tokens.shape()[2]
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    /// Token block of frame `i`, `t_f · d` values.
    pub fn frame(&self, i: usize) -> &[f64] {
        let block = self.t_f() * self.d();
        &self.tokens.data()[i * block..(i + 1) * block]
    }

    pub fn frame_tensor(&self, i: usize) -> Tensor {
        Tensor::new(vec![self.t_f(), self.d()], self.frame(i).to_vec()).expect("frame block")
    }

    /// All tokens as an `(n·t_f) × d` matrix, frame-major.
    pub fn flattened(&self) -> Tensor {
        Tensor::new(vec![self.n() * self.t_f(), self.d()], self.tokens.data().to_vec()).expect("flatten")
    }

    /// Frame `perm[i]` of `self` becomes frame `i` of the result.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.n()];
        if perm.len() != self.n() || perm.iter().any(|&p| p >= self.n() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::arg("not a permutation of the frames"));
        }
        let mut data = Vec::with_capacity(self.tokens.numel());
        for &p in perm {
            data.extend_from_slice(self.frame(p));
        }
        Self::new(Tensor::new(self.tokens.shape().to_vec(), data)?)
    }

    pub fn descriptors(&self) -> FrameDescriptor {
        let (n, t, d) = (self.n(), self.t_f(), self.d());
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &mut out[i * d..(i + 1) * d];
            for tok in self.frame(i).chunks(d) {
                for (o, x) in row.iter_mut().zip(tok) {
                    *o += x;
                }
            }
            row.iter_mut().for_each(|o| *o /= t as f64);
        }
        FrameDescriptor(Tensor::new(vec![n, d], out).expect("descriptor shape"))
    }
}

/// One vector per frame (`n × d`): the mean of that frame's tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDescriptor(pub Tensor);

impl FrameDescriptor {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Ok(Self(Tensor::from_rows(rows)?))
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    fn distance(&self, i: usize, j: usize) -> f64 {
        euclidean(self.row(i), self.row(j))
    }

    /// Pairwise Euclidean distances, row-major `n × n`.
    pub fn distance_matrix(&self) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let dist = self.distance(i, j);
                out[i * n + j] = dist;
                out[j * n + i] = dist;
            }
        }
        out
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared(a, b).sqrt()
}

fn squared(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingStrategy {
    Uniform,
    Random,
    KMeans { iters: usize },
    KMedoids,
}

pub const DEFAULT_KMEANS_ITERS: usize = 20;

impl SamplingStrategy {
    /// Strategies that consume randomness.
    pub fn is_stochastic(self) -> bool {
        matches!(self, Self::Random | Self::KMeans { .. })
    }
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Uniform => f.write_str("uniform"),
            Self::Random => f.write_str("random"),
            Self::KMeans { .. } => f.write_str("kmeans"),
            Self::KMedoids => f.write_str("kmedoids"),
        }
    }
}

impl FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "random" => Ok(Self::Random),
            "kmeans" => Ok(Self::KMeans {
                iters: DEFAULT_KMEANS_ITERS,
            }),
            "kmedoids" => Ok(Self::KMedoids),
            other => Err(Error::config(format!(
                "unknown sampling strategy `{other}` (expected uniform | random | kmeans | kmedoids)"
            ))),
        }
    }
}

/// Query tokens plus the ascending frame indices they were copied from.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalQuerySet {
    pub queries: Tensor,
    pub source_frames: Vec<usize>,
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::arg(format!("need 1 <= k <= n, got k={k}, n={n}")));
    }
    Ok(())
}

/// Frame `i` of `k` sits at `floor((i + 0.5) · n / k)`.
pub fn uniform_indices(n: usize, k: usize) -> Result<Vec<usize>> {
    check_k(n, k)?;
    Ok((0..k).map(|i| (2 * i + 1) * n / (2 * k)).collect())
}

pub fn random_indices(n: usize, k: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
    check_k(n, k)?;
    let mut idx = rng.choose_distinct(n, k);
    idx.sort_unstable();
    Ok(idx)
}

/// Outcome of Lloyd's algorithm.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squares after each assignment step.
    pub wcss_history: Vec<f64>,
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = squared(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by up to `iters` Lloyd iterations.
pub fn kmeans(desc: &FrameDescriptor, k: usize, iters: usize, rng: &mut SeededRng) -> Result<KMeansFit> {
    let n = desc.n();
    check_k(n, k)?;
    if iters == 0 {
        return Err(Error::config("k-means needs at least one iteration"));
    }
    let mut chosen = vec![rng.below(n)];
    let mut d2: Vec<f64> = (0..n).map(|i| squared(desc.row(i), desc.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave `target` just past the last positive weight
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("positive weight"))
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(squared(desc.row(i), desc.row(next)));
        }
    }

    let dim = desc.0.cols();
    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| desc.row(i).to_vec()).collect();
    let mut assignment = vec![usize::MAX; n];
    let mut wcss_history = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut changed = false;
        let mut wcss = 0.0;
        for (i, slot) in assignment.iter_mut().enumerate() {
            let (c, d) = nearest(desc.row(i), &centroids);
            wcss += d;
            changed |= *slot != c;
            *slot = c;
        }
        wcss_history.push(wcss);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(desc.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            // empty clusters keep their previous centroid
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Ok(KMeansFit {
        centroids,
        assignment,
        wcss_history,
    })
}

/// k-means, then each centroid is replaced by its nearest unused frame.
pub fn kmeans_indices(desc: &FrameDescriptor, k: usize, iters: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
    let fit = kmeans(desc, k, iters, rng)?;
    let mut used = vec![false; desc.n()];
    let mut out = Vec::with_capacity(k);
    for c in &fit.centroids {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, _) in used.iter().enumerate().filter(|(_, &u)| !u) {
            let d = squared(desc.row(i), c);
            if d < best.1 {
                best = (i, d);
            }
        }
        used[best.0] = true;
        out.push(best.0);
    }
    out.sort_unstable();
    Ok(out)
}

/// Sum over points of the distance to the nearest medoid.
pub fn medoid_cost(desc: &FrameDescriptor, medoids: &[usize]) -> f64 {
    let dist = desc.distance_matrix();
    cost_from_matrix(&dist, desc.n(), medoids)
}

fn cost_from_matrix(dist: &[f64], n: usize, medoids: &[usize]) -> f64 {
    (0..n)
        .map(|j| {
            medoids
                .iter()
                .map(|&m| dist[j * n + m])
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

#[derive(Clone, Debug)]
pub struct MedoidFit {
    /// Ascending medoid indices.
    pub medoids: Vec<usize>,
    pub cost: f64,
    pub swaps: usize,
}

/// Partitioning Around Medoids: greedy BUILD, then best-improvement SWAP
/// until no single exchange lowers the cost. Ties go to the lowest index.
pub fn pam(desc: &FrameDescriptor, k: usize) -> Result<MedoidFit> {
    let n = desc.n();
    check_k(n, k)?;
    let dist = desc.distance_matrix();

    let mut medoids: Vec<usize> = Vec::with_capacity(k);
    let mut nearest_d = vec![f64::INFINITY; n];
    while medoids.len() < k {
        let mut best = (usize::MAX, f64::INFINITY);
        for c in (0..n).filter(|c| !medoids.contains(c)) {
            let cost: f64 = (0..n).map(|j| nearest_d[j].min(dist[j * n + c])).sum();
            if cost < best.1 {
                best = (c, cost);
            }
        }
        medoids.push(best.0);
        for j in 0..n {
            nearest_d[j] = nearest_d[j].min(dist[j * n + best.0]);
        }
    }

    let mut cost = cost_from_matrix(&dist, n, &medoids);
    let mut swaps = 0;
    loop {
        let tol = 1e-12 * cost.max(1.0);
        let mut best: Option<(usize, usize, f64)> = None;
        for slot in 0..k {
            for cand in (0..n).filter(|c| !medoids.contains(c)) {
                let mut trial = medoids.clone();
                trial[slot] = cand;
                let c = cost_from_matrix(&dist, n, &trial);
                if c < cost - tol && best.is_none_or(|(_, _, b)| c < b) {
                    best = Some((slot, cand, c));
                }
            }
        }
        match best {
            Some((slot, cand, c)) => {
                medoids[slot] = cand;
                cost = c;
                swaps += 1;
            }
            None => break,
        }
    }
    medoids.sort_unstable();
    Ok(MedoidFit { medoids, cost, swaps })
}

/// Largest `C(n, k)` that [`kmedoids_indices`] searches exhaustively.
pub const EXACT_SUBSET_LIMIT: u64 = 4096;

fn binomial(n: usize, k: usize) -> u64 {
    (0..k as u64).fold(1u64, |acc, i| acc.saturating_mul(n as u64 - i) / (i + 1))
}

/// Globally optimal medoids by visiting every `k`-subset in lexicographic
/// order; the first subset reaching the minimum wins.
pub fn exact_medoids(desc: &FrameDescriptor, k: usize) -> Result<MedoidFit> {
    let n = desc.n();
    check_k(n, k)?;
    let dist = desc.distance_matrix();
    let mut subset: Vec<usize> = (0..k).collect();
    let mut best = (subset.clone(), cost_from_matrix(&dist, n, &subset));
    while let Some(pos) = (0..k).rev().find(|&i| subset[i] < n - k + i) {
        subset[pos] += 1;
        for i in pos + 1..k {
            subset[i] = subset[i - 1] + 1;
        }
        let c = cost_from_matrix(&dist, n, &subset);
        if c < best.1 {
            best = (subset.clone(), c);
        }
    }
    Ok(MedoidFit {
        medoids: best.0,
        cost: best.1,
        swaps: 0,
    })
}

/// Exact search while `C(n, k) <= EXACT_SUBSET_LIMIT`, PAM beyond.
pub fn kmedoids_indices(desc: &FrameDescriptor, k: usize) -> Result<Vec<usize>> {
    check_k(desc.n(), k)?;
    let fit = if binomial(desc.n(), k) <= EXACT_SUBSET_LIMIT {
        exact_medoids(desc, k)?
    } else {
        pam(desc, k)?
    };
    Ok(fit.medoids)
}

/// Frame indices chosen by `strategy`.
pub fn sample_indices(
    frames: &FrameTokenSequence,
    strategy: SamplingStrategy,
    k: usize,
    rng: &mut SeededRng,
) -> Result<Vec<usize>> {
    let n = frames.n();
    match strategy {
        SamplingStrategy::Uniform => uniform_indices(n, k),
        SamplingStrategy::Random => random_indices(n, k, rng),
        SamplingStrategy::KMeans { iters } => kmeans_indices(&frames.descriptors(), k, iters, rng),
        SamplingStrategy::KMedoids => kmedoids_indices(&frames.descriptors(), k),
    }
}

/// Concatenates the selected frames' token blocks, ascending by frame.
pub fn init_temporal_queries(
    frames: &FrameTokenSequence,
    strategy: SamplingStrategy,
    k: usize,
    rng: &mut SeededRng,
) -> Result<TemporalQuerySet> {
    let source_frames = sample_indices(frames, strategy, k, rng)?;
    let mut data = Vec::with_capacity(k * frames.t_f() * frames.d());
    for &i in &source_frames {
        data.extend_from_slice(frames.frame(i));
    }
    Ok(TemporalQuerySet {
        queries: Tensor::new(vec![k * frames.t_f(), frames.d()], data)?,
        source_frames,
    })
}

pub const LEARNABLE_QUERY_STD: f64 = 0.02;

/// Initial values for free (non-sampled) queries: `N(0, 0.02²)`.
pub fn learnable_queries(k: usize, t_f: usize, d: usize, rng: &mut SeededRng) -> Result<TemporalQuerySet> {
    if k == 0 || t_f == 0 || d == 0 {
        return Err(Error::arg("learnable query dims must be positive"));
    }
    let data = (0..k * t_f * d).map(|_| LEARNABLE_QUERY_STD * rng.normal()).collect();
    Ok(TemporalQuerySet {
        queries: Tensor::new(vec![k * t_f, d], data)?,
        source_frames: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(values: &[f64]) -> FrameDescriptor {
        FrameDescriptor::from_rows(&values.iter().map(|&v| vec![v]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(uniform_indices(16, 4).unwrap(), vec![2, 6, 10, 14]);
        assert_eq!(uniform_indices(5, 5).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(uniform_indices(7, 3).unwrap(), vec![1, 3, 5]);
        assert!(uniform_indices(3, 4).is_err());
        assert!(uniform_indices(3, 0).is_err());
    }

    #[test]
    fn random_examples() {
        assert_eq!(random_indices(4, 4, &mut SeededRng::new(99)).unwrap(), vec![0, 1, 2, 3]);
        let a = random_indices(16, 4, &mut SeededRng::new(7)).unwrap();
        let b = random_indices(16, 4, &mut SeededRng::new(7)).unwrap();
        assert_eq!(a, b);
        // pinned under tformer-rng/1
        assert_eq!(a, vec![9, 11, 13, 15]);
        let distinct: std::collections::BTreeSet<_> = (0..100)
            .map(|s| random_indices(16, 4, &mut SeededRng::new(s)).unwrap())
            .collect();
        assert!(distinct.len() >= 2);
        assert!(random_indices(3, 4, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn kmeans_worked_example() {
        let desc = line(&[0.0, 1.0, 2.0, 10.0, 11.0, 13.0]);
        for seed in 0..20 {
            let fit = kmeans(&desc, 2, 10, &mut SeededRng::new(seed)).unwrap();
            let mut cs: Vec<f64> = fit.centroids.iter().map(|c| c[0]).collect();
            cs.sort_by(f64::total_cmp);
            assert!((cs[0] - 1.0).abs() < 1e-12 && (cs[1] - 34.0 / 3.0).abs() < 1e-12, "{cs:?}");
            for w in fit.wcss_history.windows(2) {
                assert!(w[1] <= w[0]);
            }
            assert_eq!(kmeans_indices(&desc, 2, 10, &mut SeededRng::new(seed)).unwrap(), vec![1, 4]);
        }
        let all = kmeans_indices(&desc, 6, 5, &mut SeededRng::new(1)).unwrap();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn swap_stalls_where_enumeration_does_not() {
        let desc = line(&[
            1.6013475610610297,
            3.2144226769251194,
            -1.3878902096733607,
            -0.572592214012457,
            2.219965486229309,
            0.11005654832576801,
            0.21938824589329153,
            0.9231874934433296,
        ]);
        let local = pam(&desc, 2).unwrap();
        let exact = exact_medoids(&desc, 2).unwrap();
        assert_eq!(local.medoids, vec![0, 3]);
        assert_eq!(exact.medoids, vec![4, 5]);
        assert!(exact.cost < local.cost - 0.4);
        assert_eq!(kmedoids_indices(&desc, 2).unwrap(), vec![4, 5]);
    }

    #[test]
    fn large_instances_fall_back_to_pam() {
        let mut rng = SeededRng::new(5);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let desc = FrameDescriptor::from_rows(&rows).unwrap();
        assert!(binomial(40, 4) > EXACT_SUBSET_LIMIT);
        assert_eq!(kmedoids_indices(&desc, 4).unwrap(), pam(&desc, 4).unwrap().medoids);
        assert_eq!(binomial(8, 3), 56);
        assert_eq!(binomial(16, 4), 1820);
    }

    #[test]
    fn kmedoids_worked_example() {
        let desc = line(&[0.0, 1.0, 2.0, 10.0, 11.0, 13.0]);
        assert_eq!(kmedoids_indices(&desc, 2).unwrap(), vec![1, 4]);
        assert_eq!(kmedoids_indices(&desc, 6).unwrap(), (0..6).collect::<Vec<_>>());
        assert!(kmedoids_indices(&desc, 7).is_err());
    }

    #[test]
    fn duplicate_frames_pick_lowest_index() {
        let frame = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let frames = FrameTokenSequence::from_frames(&[frame.clone(), frame]).unwrap();
        let q = init_temporal_queries(&frames, SamplingStrategy::KMedoids, 1, &mut SeededRng::new(0)).unwrap();
        assert_eq!(q.source_frames, vec![0]);
    }

    #[test]
    fn all_frames_selected_when_k_equals_n() {
        let mut rng = SeededRng::new(3);
        let frames: Vec<Tensor> = (0..5)
            .map(|_| Tensor::new(vec![2, 3], (0..6).map(|_| rng.normal()).collect()).unwrap())
            .collect();
        let seq = FrameTokenSequence::from_frames(&frames).unwrap();
        for strategy in [
            SamplingStrategy::Uniform,
            SamplingStrategy::Random,
            SamplingStrategy::KMeans { iters: 5 },
            SamplingStrategy::KMedoids,
        ] {
            let q = init_temporal_queries(&seq, strategy, 5, &mut rng).unwrap();
            assert_eq!(q.queries, seq.flattened(), "{strategy}");
        }
    }

    #[test]
    fn descriptors_are_frame_means() {
        let frames = FrameTokenSequence::from_frames(&[
            Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap(),
            Tensor::from_rows(&[vec![-1.0, 0.0], vec![1.0, 0.0]]).unwrap(),
        ])
        .unwrap();
        let d = frames.descriptors();
        assert_eq!(d.row(0), &[2.0, 4.0]);
        assert_eq!(d.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn learnable_init_statistics() {
        let q = learnable_queries(4, 8, 32, &mut SeededRng::new(0)).unwrap();
        assert_eq!(q.queries.shape(), &[32, 32]);
        assert!(q.source_frames.is_empty());
        let mean = q.queries.sum() / q.queries.numel() as f64;
        assert!(mean.abs() < 0.01);
    }

    #[test]
    fn strategy_tokens_round_trip() {
        for s in ["uniform", "random", "kmeans", "kmedoids"] {
            assert_eq!(s.parse::<SamplingStrategy>().unwrap().to_string(), s);
        }
        assert!("learnable".parse::<SamplingStrategy>().is_err());
    }
}
