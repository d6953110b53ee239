//! Preference functions over allocations, exemplar labeling, the preference
//! classification accuracy metric, probit label noise and similarity.

use std::io::{Read, Write};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::auction::{fmt_f64, read_indexed_csv, AuctionSpec, DemandKind};
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// Size of the uniform reference pool behind the known-function PCA threshold.
pub const REFERENCE_POOL: usize = 10_000;

pub const DEFAULT_COMPARISONS: usize = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PreferenceFunction {
    /// Total variation fairness with a single category holding every agent.
    Tvf {
        #[serde(default)]
        d: f64,
    },
    Entropy,
    /// Minimum normalized share of any agent on any item, minus `t`.
    /// `t` defaults to `0.8 / n_agents`.
    Quota {
        #[serde(default)]
        t: Option<f64>,
    },
    /// Labels contiguous partitions of a pool with different functions.
    Mixture { parts: Vec<MixturePart> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixturePart {
    pub fraction: f64,
    pub function: PreferenceFunction,
}

impl Default for PreferenceFunction {
    fn default() -> Self {
        PreferenceFunction::Tvf { d: 0.0 }
    }
}

impl PreferenceFunction {
    pub fn tvf() -> Self {
        PreferenceFunction::Tvf { d: 0.0 }
    }

    pub fn quota() -> Self {
        PreferenceFunction::Quota { t: None }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PreferenceFunction::Tvf { .. } => "tvf",
            PreferenceFunction::Entropy => "entropy",
            PreferenceFunction::Quota { .. } => "quota",
            PreferenceFunction::Mixture { .. } => "mixture",
        }
    }

    pub fn validate(&self, spec: &AuctionSpec) -> Result<()> {
        match self {
            PreferenceFunction::Tvf { d } if !(d.is_finite() && *d >= 0.0) => {
                Err(Error::invalid(format!("tvf: d must be >= 0, got {d}")))
            }
            PreferenceFunction::Quota { t: Some(t) } => {
                let cap = 1.0 / spec.n_agents as f64;
                if *t > 0.0 && *t < cap {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("quota: t must lie in (0, {cap}), got {t}")))
                }
            }
            PreferenceFunction::Mixture { parts } => {
                if parts.is_empty() {
                    return Err(Error::invalid("mixture: no parts"));
                }
                let total: f64 = parts.iter().map(|p| p.fraction).sum();
                if parts.iter().any(|p| !(p.fraction > 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(format!(
                        "mixture: fractions must be positive and sum to 1, got {total}"
                    )));
                }
                for p in parts {
                    if matches!(p.function, PreferenceFunction::Mixture { .. }) {
                        return Err(Error::invalid("mixture: nested mixtures are not supported"));
                    }
                    p.function.validate(spec)?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn quota_threshold(t: Option<f64>, n: usize) -> f64 {
        t.unwrap_or(0.8 / n as f64)
    }

    /// Score of one `n x m` allocation stored row-major.
    pub fn score_one(&self, z: &[f64], n: usize, m: usize) -> Result<f64> {
        debug_assert_eq!(z.len(), n * m);
        Ok(match self {
            PreferenceFunction::Tvf { d } => {
                let mut total = 0.0;
                for j in 0..m {
                    for k in j + 1..m {
                        let dist: f64 = (0..n).map(|i| (z[i * m + j] - z[i * m + k]).abs()).sum();
                        total += (dist - d).max(0.0);
                    }
                }
                -total
            }
            PreferenceFunction::Entropy => (0..n)
                .map(|i| {
                    let row = &z[i * m..(i + 1) * m];
                    let s: f64 = row.iter().sum();
                    if s <= 0.0 {
                        return 0.0;
                    }
                    row.iter()
                        .map(|&v| {
                            let p = v / s;
                            if p > 0.0 {
                                -p * p.ln()
                            } else {
                                0.0
                            }
                        })
                        .sum::<f64>()
                })
                .sum(),
            PreferenceFunction::Quota { t } => {
                let mut worst = f64::INFINITY;
                for j in 0..m {
                    let col_sum: f64 = (0..n).map(|i| z[i * m + j]).sum();
                    let min = (0..n).map(|i| z[i * m + j]).fold(f64::INFINITY, f64::min);
                    let share = if col_sum > 0.0 { min / col_sum } else { 0.0 };
                    worst = worst.min(share);
                }
                worst - Self::quota_threshold(*t, n)
            }
            PreferenceFunction::Mixture { .. } => {
                return Err(Error::invalid("mixture functions only label; they have no score"))
            }
        })
    }

    /// Scores of every allocation in an `[L, n, m]` batch.
    pub fn scores(&self, alloc: &Tensor) -> Result<Vec<f64>> {
        let (n, m) = alloc_dims(alloc)?;
        alloc
            .data()
            .chunks_exact(n * m)
            .map(|z| self.score_one(z, n, m))
            .collect()
    }

    /// Differentiable scores `[L]` of an allocation variable `[L, n, m]`,
    /// used when the preference enters the loss as an explicit penalty.
    pub fn score_var<'t>(&self, z: Var<'t>) -> Result<Var<'t>> {
        let shape = z.shape();
        if shape.len() != 3 {
            return Err(Error::shape("score_var", format!("expected [L, n, m], got {shape:?}")));
        }
        let (l, n, m) = (shape[0], shape[1], shape[2]);
        match self {
            PreferenceFunction::Tvf { d } => {
                let tape = z.tape();
                if m < 2 {
                    return Ok(tape.constant(Tensor::zeros(vec![l])));
                }
                let mut terms = Vec::new();
                for j in 0..m {
                    for k in j + 1..m {
                        let diff = z.narrow(2, j, 1)?.sub(z.narrow(2, k, 1)?)?;
                        let dist = diff.abs().sum_axis(1)?.reshape(vec![l, 1])?;
                        terms.push(dist.add_scalar(-d).relu());
                    }
                }
                Ok(tape.concat(&terms, 1)?.sum_axis(1)?.neg())
            }
            PreferenceFunction::Entropy => {
                let s = z.sum_axis(2)?.reshape(vec![l, n, 1])?;
                let p = z.div(s)?;
                let plogp = p.mul(p.log(1e-12)?)?;
                Ok(plogp.sum_axis(2)?.sum_axis(1)?.neg())
            }
            PreferenceFunction::Quota { t } => {
                let s = z.sum_axis(1)?.reshape(vec![l, 1, m])?;
                let share = z.div(s)?;
                // min = -max(-x), over agents then items.
                let worst = share.neg().max_axis(1)?.max_axis(1)?.neg();
                Ok(worst.add_scalar(-Self::quota_threshold(*t, n)))
            }
            PreferenceFunction::Mixture { .. } => {
                Err(Error::invalid("mixture functions only label; they have no score"))
            }
        }
    }
}

fn alloc_dims(alloc: &Tensor) -> Result<(usize, usize)> {
    if alloc.ndim() != 3 {
        return Err(Error::shape(
            "allocation batch",
            format!("expected [L, n, m], got {:?}", alloc.shape()),
        ));
    }
    Ok((alloc.shape()[1], alloc.shape()[2]))
}

/// 1 iff `score` strictly beats more than half of `comparisons`.
pub fn pairwise_label(score: f64, comparisons: &[f64]) -> u8 {
    let wins = comparisons.iter().filter(|&&c| score > c).count();
    u8::from(2 * wins > comparisons.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledAllocationSet {
    /// `[L, n, m]`.
    pub allocations: Tensor,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub provenance: String,
    pub seed: u64,
}

impl LabeledAllocationSet {
    pub fn new(
        allocations: Tensor,
        scores: Vec<f64>,
        labels: Vec<u8>,
        provenance: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        alloc_dims(&allocations)?;
        let l = allocations.shape()[0];
        if scores.len() != l || labels.len() != l {
            return Err(Error::shape(
                "labeled set",
                format!("{l} allocations, {} scores, {} labels", scores.len(), labels.len()),
            ));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::invalid("labels must be 0 or 1"));
        }
        Ok(LabeledAllocationSet {
            allocations,
            scores,
            labels,
            provenance: provenance.into(),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.allocations.shape()[1] * self.allocations.shape()[2]
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().map(|&y| y as usize).sum()
    }

    pub fn allocation(&self, index: usize) -> &[f64] {
        let w = self.width();
        &self.allocations.data()[index * w..(index + 1) * w]
    }

    /// Labels as `0.0`/`1.0`.
    pub fn targets(&self) -> Vec<f64> {
        self.labels.iter().map(|&y| y as f64).collect()
    }

    /// Rows `indices` in order.
    pub fn gather(&self, indices: &[usize]) -> LabeledAllocationSet {
        let shape = self.allocations.shape();
        let mut data = Vec::with_capacity(indices.len() * self.width());
        for &i in indices {
            data.extend_from_slice(self.allocation(i));
        }
        LabeledAllocationSet {
            allocations: Tensor::from_parts(vec![indices.len(), shape[1], shape[2]], data),
            scores: indices.iter().map(|&i| self.scores[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            provenance: self.provenance.clone(),
            seed: self.seed,
        }
    }

    /// Appends `other`'s rows.
    pub fn extend(&mut self, other: &LabeledAllocationSet) -> Result<()> {
        if other.allocations.shape()[1..] != self.allocations.shape()[1..] {
            return Err(Error::shape(
                "labeled set extend",
                format!("{:?} vs {:?}", self.allocations.shape(), other.allocations.shape()),
            ));
        }
        let shape = self.allocations.shape().to_vec();
        let mut data = std::mem::replace(&mut self.allocations, Tensor::scalar(0.0)).into_data();
        data.extend_from_slice(other.allocations.data());
        self.allocations =
            Tensor::from_parts(vec![shape[0] + other.len(), shape[1], shape[2]], data);
        self.scores.extend_from_slice(&other.scores);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    /// Writes `sample,agent,item,z` to `alloc` and `sample,score,label` to `sidecar`.
    pub fn write_csv<A: Write, S: Write>(&self, alloc: A, sidecar: S) -> Result<()> {
        let shape = self.allocations.shape();
        let (n, m) = (shape[1], shape[2]);
        let mut w = csv::Writer::from_writer(alloc);
        w.write_record(["sample", "agent", "item", "z"])?;
        for (l, z) in self.allocations.data().chunks_exact(n * m).enumerate() {
            for i in 0..n {
                for j in 0..m {
                    w.write_record(&[
                        l.to_string(),
                        i.to_string(),
                        j.to_string(),
                        fmt_f64(z[i * m + j]),
                    ])?;
                }
            }
        }
        w.flush()?;
        let mut w = csv::Writer::from_writer(sidecar);
        w.write_record(["sample", "score", "label"])?;
        for l in 0..self.len() {
            w.write_record(&[l.to_string(), fmt_f64(self.scores[l]), self.labels[l].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<A: Read, S: Read>(alloc: A, sidecar: S) -> Result<Self> {
        let allocations = read_allocations_csv(alloc)?;
        let l = allocations.shape()[0];
        let what = "label csv";
        let mut r = csv::Reader::from_reader(sidecar);
        if r.headers()?.iter().collect::<Vec<_>>() != ["sample", "score", "label"] {
            return Err(Error::Parse {
                what,
                line: 1,
                detail: "header must be sample,score,label".into(),
            });
        }
        let mut scores = vec![f64::NAN; l];
        let mut labels = vec![u8::MAX; l];
        for rec in r.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let bad = |detail: &str| Error::Parse {
                what,
                line,
                detail: detail.to_string(),
            };
            let sample: usize = rec
                .get(0)
                .and_then(|s| s.trim().parse().ok())
                .filter(|&s| s < l)
                .ok_or_else(|| bad("sample index missing or out of range"))?;
            let score: f64 = rec
                .get(1)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| bad("score is not a number"))?;
            let label: u8 = rec
                .get(2)
                .and_then(|s| s.trim().parse().ok())
                .filter(|&y| y <= 1)
                .ok_or_else(|| bad("label must be 0 or 1"))?;
            if labels[sample] != u8::MAX {
                return Err(bad("duplicate sample"));
            }
            scores[sample] = score;
            labels[sample] = label;
        }
        if let Some(missing) = labels.iter().position(|&y| y == u8::MAX) {
            return Err(Error::Parse {
                what,
                line: 0,
                detail: format!("no label for sample {missing}"),
            });
        }
        LabeledAllocationSet::new(allocations, scores, labels, "csv", 0)
    }
}

/// Reads `sample,agent,item,z` rows into an `[L, n, m]` tensor.
pub fn read_allocations_csv<R: Read>(reader: R) -> Result<Tensor> {
    let (shape, data) = read_indexed_csv(reader, "allocation csv", "z")?;
    Tensor::new(shape.to_vec(), data)
}

pub fn write_allocations_csv<W: Write>(alloc: &Tensor, writer: W) -> Result<()> {
    alloc_dims(alloc)?;
    let l = alloc.shape()[0];
    let set = LabeledAllocationSet::new(alloc.clone(), vec![0.0; l], vec![0; l], "", 0)?;
    set.write_csv(writer, std::io::sink())
}

/// Labels every allocation against `n_comparisons` distinct others drawn
/// uniformly from the pool. Mixtures split the pool into contiguous
/// partitions by fraction and label each within itself.
pub fn build_labels(
    alloc: &Tensor,
    function: &PreferenceFunction,
    n_comparisons: usize,
    seed: u64,
) -> Result<LabeledAllocationSet> {
    alloc_dims(alloc)?;
    if n_comparisons == 0 {
        return Err(Error::invalid("build_labels: n_comparisons must be >= 1"));
    }
    let l = alloc.shape()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts: Vec<(usize, usize, &PreferenceFunction)> = match function {
        PreferenceFunction::Mixture { parts } => {
            let mut out = Vec::new();
            let mut start = 0;
            for (k, p) in parts.iter().enumerate() {
                let len = if k + 1 == parts.len() {
                    l - start
                } else {
                    ((p.fraction * l as f64).floor() as usize).min(l - start)
                };
                out.push((start, len, &p.function));
                start += len;
            }
            out
        }
        f => vec![(0, l, f)],
    };
    let (n, m) = alloc_dims(alloc)?;
    let mut scores = Vec::with_capacity(l);
    let mut labels = Vec::with_capacity(l);
    for (start, len, f) in parts {
        if len <= n_comparisons {
            return Err(Error::invalid(format!(
                "build_labels: pool of {len} too small for {n_comparisons} comparisons"
            )));
        }
        let part_scores: Vec<f64> = alloc.data()[start * n * m..(start + len) * n * m]
            .chunks_exact(n * m)
            .map(|z| f.score_one(z, n, m))
            .collect::<Result<_>>()?;
        let mut others = vec![0.0; n_comparisons];
        for (i, &s) in part_scores.iter().enumerate() {
            let draw = index::sample(&mut rng, len - 1, n_comparisons);
            for (slot, k) in others.iter_mut().zip(draw.iter()) {
                let k = if k >= i { k + 1 } else { k };
                *slot = part_scores[k];
            }
            labels.push(pairwise_label(s, &others));
        }
        scores.extend(part_scores);
    }
    LabeledAllocationSet::new(alloc.clone(), scores, labels, function.name(), seed)
}

/// Allocations drawn uniformly from the feasible set of the demand kind:
/// additive takes a flat Dirichlet over agents plus the outside option for
/// each item; unit demand takes the elementwise minimum of a row-wise and a
/// column-wise draw, mirroring the network head.
pub fn uniform_allocations(spec: &AuctionSpec, count: usize, seed: u64) -> Result<Tensor> {
    if count == 0 {
        return Err(Error::invalid("uniform_allocations: count must be >= 1"));
    }
    let (n, m) = (spec.n_agents, spec.m_items);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirichlet = |k: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let g: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    };
    let mut data = vec![0.0; count * n * m];
    for z in data.chunks_exact_mut(n * m) {
        // Column draws: item j shared among n agents and a dummy.
        for j in 0..m {
            let col = dirichlet(n + 1, &mut rng);
            for i in 0..n {
                z[i * m + j] = col[i];
            }
        }
        if spec.demand == DemandKind::UnitDemand {
            for i in 0..n {
                let row = dirichlet(m + 1, &mut rng);
                for j in 0..m {
                    z[i * m + j] = z[i * m + j].min(row[j]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![count, n, m], data))
}

/// Median of the scores of a seeded uniform reference pool.
pub fn reference_threshold(
    function: &PreferenceFunction,
    spec: &AuctionSpec,
    seed: u64,
) -> Result<f64> {
    let pool = uniform_allocations(spec, REFERENCE_POOL, seed)?;
    Ok(median(function.scores(&pool)?))
}

pub fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty(), "median of empty set");
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Ground truth against which preference classification accuracy is measured.
#[derive(Debug, Clone, Copy)]
pub enum GroundTruth<'a> {
    /// An allocation satisfies the preference iff its score is `>= threshold`.
    Known {
        function: &'a PreferenceFunction,
        threshold: f64,
    },
    /// Each allocation takes the label of its nearest exemplar.
    Exemplars(&'a LabeledAllocationSet),
}

/// Per-allocation satisfaction indicators.
pub fn satisfaction(alloc: &Tensor, truth: GroundTruth<'_>) -> Result<Vec<u8>> {
    let (n, m) = alloc_dims(alloc)?;
    match truth {
        GroundTruth::Known {
            function,
            threshold,
        } => Ok(function
            .scores(alloc)?
            .into_iter()
            .map(|s| u8::from(s >= threshold))
            .collect()),
        GroundTruth::Exemplars(set) => {
            if set.is_empty() {
                return Err(Error::invalid("pca: empty ground-truth set"));
            }
            if set.width() != n * m {
                return Err(Error::shape(
                    "pca",
                    format!("allocation width {} vs ground truth {}", n * m, set.width()),
                ));
            }
            Ok(alloc
                .data()
                .chunks_exact(n * m)
                .map(|z| {
                    let mut best = (f64::INFINITY, 0);
                    for k in 0..set.len() {
                        let d2: f64 = z
                            .iter()
                            .zip(set.allocation(k))
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        if d2 < best.0 {
                            best = (d2, k);
                        }
                    }
                    set.labels[best.1]
                })
                .collect())
        }
    }
}

/// Preference classification accuracy: the fraction of allocations that
/// satisfy the ground truth.
pub fn pca(alloc: &Tensor, truth: GroundTruth<'_>) -> Result<f64> {
    let s = satisfaction(alloc, truth)?;
    if s.is_empty() {
        return Err(Error::invalid("pca: no allocations"));
    }
    Ok(s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbitNoise {
    pub mu: f64,
    pub sigma: f64,
    pub k: f64,
    pub f: f64,
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

impl ProbitNoise {
    pub fn new(mu: f64, sigma: f64, k: f64, f: f64) -> Result<Self> {
        let p = ProbitNoise { mu, sigma, k, f };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("probit: sigma must be > 0, got {}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.f) || !(self.k >= 0.0) || !self.mu.is_finite() {
            return Err(Error::invalid(format!(
                "probit: need 0 <= f <= 1, k >= 0 and finite mu, got f={} k={} mu={}",
                self.f, self.k, self.mu
            )));
        }
        Ok(())
    }

    /// Boundary at 70% of the observed score range, spread the sample
    /// standard deviation.
    pub fn calibrated(scores: &[f64], k: f64, f: f64) -> Result<Self> {
        if scores.len() < 2 {
            return Err(Error::invalid("probit calibration needs at least 2 scores"));
        }
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>()
            / (scores.len() - 1) as f64;
        ProbitNoise::new(lo + 0.7 * (hi - lo), var.sqrt(), k, f)
    }

    pub fn flip_probability(&self, x: f64) -> f64 {
        let q = self.k * (1.0 - normal_cdf((x - self.mu).abs() / self.sigma));
        q.max(self.f).min(1.0)
    }
}

/// Flips each label independently with the probit probability of its score.
pub fn probit_flip(labels: &[u8], scores: &[f64], model: &ProbitNoise, seed: u64) -> Result<Vec<u8>> {
    if labels.len() != scores.len() {
        return Err(Error::shape(
            "probit_flip",
            format!("{} labels vs {} scores", labels.len(), scores.len()),
        ));
    }
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(labels
        .iter()
        .zip(scores)
        .map(|(&y, &x)| {
            let u: f64 = rng.random();
            if u < model.flip_probability(x) {
                1 - y
            } else {
                y
            }
        })
        .collect())
}

/// Mean Euclidean distance between corresponding flattened allocations.
pub fn allocation_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "allocation_similarity",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (n, m) = alloc_dims(a)?;
    let w = n * m;
    let total: f64 = a
        .data()
        .chunks_exact(w)
        .zip(b.data().chunks_exact(w))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        .sum();
    Ok(total / a.shape()[0] as f64)
}

/// Oversamples the minority class with replacement until both classes have
/// equal counts. Originals keep their order; duplicates follow them.
pub fn class_balance(set: &LabeledAllocationSet, seed: u64) -> Result<LabeledAllocationSet> {
    let pos: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == 1).collect();
    let neg: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == 0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid(format!(
            "class_balance: single-class set ({} positive, {} negative); labeling is degenerate",
            pos.len(),
            neg.len()
        )));
    }
    let (minority, deficit) = if pos.len() < neg.len() {
        (&pos, neg.len() - pos.len())
    } else {
        (&neg, pos.len() - neg.len())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.extend((0..deficit).map(|_| minority[rng.random_range(0..minority.len())]));
    Ok(set.gather(&order))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tvf_examples() {
        let f = PreferenceFunction::tvf();
        assert_eq!(f.score_one(&[0.5, 0.5, 0.5, 0.5], 2, 2).unwrap(), 0.0);
        assert_eq!(f.score_one(&[1.0, 0.0, 0.0, 1.0], 2, 2).unwrap(), -2.0);
    }

    #[test]
    fn entropy_of_uniform_rows_is_n_ln2() {
        let s = PreferenceFunction::Entropy
            .score_one(&[0.3, 0.3, 0.1, 0.1], 2, 2)
            .unwrap();
        assert_eq!(s, 2.0 * std::f64::consts::LN_2);
        let zero_row = PreferenceFunction::Entropy
            .score_one(&[0.0, 0.0, 0.2, 0.2], 2, 2)
            .unwrap();
        assert_eq!(zero_row, std::f64::consts::LN_2);
    }

    #[test]
    fn quota_example() {
        let f = PreferenceFunction::Quota { t: Some(0.4) };
        let s = f.score_one(&[0.5, 0.5], 2, 1).unwrap();
        assert!((s - 0.1).abs() < 1e-15);
    }

    #[test]
    fn mixture_has_no_score() {
        let f = PreferenceFunction::Mixture {
            parts: vec![MixturePart {
                fraction: 1.0,
                function: PreferenceFunction::Entropy,
            }],
        };
        assert!(f.score_one(&[0.5], 1, 1).is_err());
    }

    #[test]
    fn differentiable_scores_match_plain_scores() {
        use crate::autodiff::Tape;
        let spec = AuctionSpec::additive(3, 3);
        let z = uniform_allocations(&spec, 20, 4).unwrap();
        for f in [PreferenceFunction::Tvf { d: 0.1 }, PreferenceFunction::Entropy, PreferenceFunction::quota()] {
            let tape = Tape::new();
            let v = f.score_var(tape.constant(z.clone())).unwrap().value();
            let plain = f.scores(&z).unwrap();
            for (a, b) in v.data().iter().zip(&plain) {
                assert!((a - b).abs() < 1e-9, "{}: {a} vs {b}", f.name());
            }
        }
    }

    #[test]
    fn pairwise_label_examples() {
        assert_eq!(pairwise_label(5.0, &[1.0, 2.0, 9.0]), 1);
        assert_eq!(pairwise_label(1.0, &[2.0, 3.0, 4.0]), 0);
        assert_eq!(pairwise_label(5.0, &[5.0, 5.0, 5.0]), 0);
        assert_eq!(pairwise_label(5.0, &[1.0, 9.0]), 0);
    }

    #[test]
    fn identical_pool_labels_all_zero() {
        let z = Tensor::full(vec![30, 2, 2], 0.25);
        let set = build_labels(&z, &PreferenceFunction::tvf(), 11, 1).unwrap();
        assert!(set.labels.iter().all(|&y| y == 0));
    }

    #[test]
    fn dominant_allocation_always_positive() {
        let spec = AuctionSpec::additive(2, 2);
        let mut z = uniform_allocations(&spec, 50, 2).unwrap();
        // Make every other allocation violate TVF, and the first satisfy it.
        for (k, v) in z.data_mut().chunks_exact_mut(4).enumerate() {
            if k == 0 {
                v.copy_from_slice(&[0.3, 0.3, 0.3, 0.3]);
            } else if v[0] == v[1] {
                v[0] += 0.1;
            }
        }
        for seed in 0..5 {
            let set = build_labels(&z, &PreferenceFunction::tvf(), 11, seed).unwrap();
            assert_eq!(set.labels[0], 1);
        }
    }

    #[test]
    fn labeling_is_seeded_and_rejects_small_pool() {
        let spec = AuctionSpec::additive(2, 2);
        let z = uniform_allocations(&spec, 200, 3).unwrap();
        let a = build_labels(&z, &PreferenceFunction::Entropy, 11, 9).unwrap();
        let b = build_labels(&z, &PreferenceFunction::Entropy, 11, 9).unwrap();
        assert_eq!(a, b);
        let small = uniform_allocations(&spec, 11, 3).unwrap();
        assert!(build_labels(&small, &PreferenceFunction::Entropy, 11, 9).is_err());
    }

    #[test]
    fn mixture_partitions_use_their_own_function() {
        let spec = AuctionSpec::additive(2, 2);
        let z = uniform_allocations(&spec, 100, 5).unwrap();
        let f = PreferenceFunction::Mixture {
            parts: vec![
                MixturePart {
                    fraction: 0.3,
                    function: PreferenceFunction::tvf(),
                },
                MixturePart {
                    fraction: 0.7,
                    function: PreferenceFunction::Entropy,
                },
            ],
        };
        f.validate(&spec).unwrap();
        let set = build_labels(&z, &f, 11, 1).unwrap();
        let tvf = PreferenceFunction::tvf().scores(&z).unwrap();
        let ent = PreferenceFunction::Entropy.scores(&z).unwrap();
        assert_eq!(set.scores[..30], tvf[..30]);
        assert_eq!(set.scores[30..], ent[30..]);
    }

    #[test]
    fn uniform_allocations_are_feasible() {
        for spec in [AuctionSpec::additive(3, 2), AuctionSpec::unit_demand(2, 3)] {
            let z = uniform_allocations(&spec, 500, 1).unwrap();
            let (n, m) = (spec.n_agents, spec.m_items);
            for zi in z.data().chunks_exact(n * m) {
                let t = Tensor::new(vec![n, m], zi.to_vec()).unwrap();
                assert!(crate::auction::check_feasibility(&t, spec.demand) <= 1e-12);
            }
        }
    }

    #[test]
    fn pca_known_and_self_nearest() {
        let spec = AuctionSpec::additive(2, 2);
        let z = uniform_allocations(&spec, 300, 8).unwrap();
        let f = PreferenceFunction::tvf();
        let all = pca(&z, GroundTruth::Known { function: &f, threshold: -10.0 }).unwrap();
        assert_eq!(all, 1.0);
        let set = build_labels(&z, &f, 11, 2).unwrap();
        let p = pca(&z, GroundTruth::Exemplars(&set)).unwrap();
        assert_eq!(p, set.positives() as f64 / set.len() as f64);
    }

    #[test]
    fn probit_examples() {
        let p = ProbitNoise::new(0.0, 1.0, 1.05, 0.15).unwrap();
        assert!((p.flip_probability(0.0) - 0.525).abs() < 1e-15);
        assert_eq!(p.flip_probability(50.0), 0.15);
        let labels = vec![0, 1, 1, 0, 1];
        let scores = vec![0.0, 0.1, -0.2, 3.0, 0.0];
        let none = ProbitNoise::new(0.0, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(probit_flip(&labels, &scores, &none, 1).unwrap(), labels);
        let all = ProbitNoise::new(0.0, 1.0, 0.0, 1.0).unwrap();
        let flipped: Vec<u8> = labels.iter().map(|y| 1 - y).collect();
        assert_eq!(probit_flip(&labels, &scores, &all, 1).unwrap(), flipped);
    }

    #[test]
    fn similarity_examples() {
        let a = Tensor::zeros(vec![3, 2, 2]);
        let b = Tensor::ones(vec![3, 2, 2]);
        assert_eq!(allocation_similarity(&a, &a).unwrap(), 0.0);
        assert_eq!(allocation_similarity(&a, &b).unwrap(), 2.0);
        assert_eq!(allocation_similarity(&b, &a).unwrap(), 2.0);
        assert!(allocation_similarity(&a, &Tensor::zeros(vec![3, 1, 2])).is_err());
    }

    #[test]
    fn class_balance_counts() {
        let z = Tensor::zeros(vec![100, 1, 1]);
        let labels: Vec<u8> = (0..100).map(|i| u8::from(i < 10)).collect();
        let set = LabeledAllocationSet::new(z, (0..100).map(f64::from).collect(), labels, "t", 0).unwrap();
        let b = class_balance(&set, 3).unwrap();
        assert_eq!((b.positives(), b.len() - b.positives()), (90, 90));
        assert_eq!(b.scores[..100], set.scores[..]);
        assert!(b.scores[100..].iter().all(|s| *s < 10.0));
        let single = LabeledAllocationSet::new(Tensor::zeros(vec![3, 1, 1]), vec![0.0; 3], vec![1; 3], "t", 0).unwrap();
        assert!(class_balance(&single, 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let spec = AuctionSpec::additive(2, 3);
        let z = uniform_allocations(&spec, 40, 1).unwrap();
        let set = build_labels(&z, &PreferenceFunction::Entropy, 5, 3).unwrap();
        let (mut a, mut s) = (Vec::new(), Vec::new());
        set.write_csv(&mut a, &mut s).unwrap();
        let back = LabeledAllocationSet::read_csv(&a[..], &s[..]).unwrap();
        assert_eq!(back.allocations, set.allocations);
        assert_eq!(back.labels, set.labels);
        assert_eq!(back.scores, set.scores);
    }
}
