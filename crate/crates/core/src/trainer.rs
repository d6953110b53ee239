//! Training: misreport adversary, regret, the augmented Lagrangian loss with
//! the preference term, MLP pre-training and co-training, checkpoint
//! selection and final evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auction::{sample_bids, AuctionSpec, BidBatch, ValuationModel};
use crate::autodiff::{Adam, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::networks::{Architecture, PreferenceMlp, RegretNet};
use crate::preference::{
    build_labels, class_balance, probit_flip, reference_threshold, satisfaction,
    uniform_allocations, GroundTruth, LabeledAllocationSet, PreferenceFunction, ProbitNoise,
    DEFAULT_COMPARISONS,
};

/// How the preference enters the RegretNet loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceMode {
    /// Scores of the frozen preference MLP (PreferenceNet).
    Mlp,
    /// MLP scores under their own augmented Lagrangian multipliers.
    Lagrangian,
    /// The preference function itself, differentiated directly.
    Penalty,
    /// Plain RegretNet.
    None,
}

/// Reduction of the per-sample preference terms over a minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default = "NoiseConfig::default_k")]
    pub k: f64,
    #[serde(default = "NoiseConfig::default_f")]
    pub f: f64,
    /// Decision boundary in score units; calibrated from the scores if unset.
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default)]
    pub sigma: Option<f64>,
}

impl NoiseConfig {
    fn default_k() -> f64 {
        1.05
    }

    fn default_f() -> f64 {
        0.15
    }

    pub fn model(&self, scores: &[f64]) -> Result<ProbitNoise> {
        let cal = ProbitNoise::calibrated(scores, self.k, self.f)?;
        ProbitNoise::new(
            self.mu.unwrap_or(cal.mu),
            self.sigma.unwrap_or(cal.sigma),
            self.k,
            self.f,
        )
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            k: Self::default_k(),
            f: Self::default_f(),
            mu: None,
            sigma: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub regretnet_samples: usize,
    pub mlp_initial_samples: usize,
    pub cotrain_interval: usize,
    pub cotrain_samples: usize,
    pub validation_samples: usize,
    pub test_samples: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub architecture: Architecture,

    pub mlp_lr: f64,
    pub mlp_batch_size: usize,
    pub mlp_epochs: usize,
    pub cotrain_epochs: usize,
    pub n_comparisons: usize,

    pub misreport_steps: usize,
    pub misreport_rate: f64,
    pub test_misreport_steps: usize,
    pub test_restarts: usize,

    pub lambda_period: usize,
    pub rho_period: usize,
    pub lambda_init: f64,
    pub rho_init: f64,
    pub lambda_increment: f64,
    pub rho_increment: f64,

    pub preference_mode: PreferenceMode,
    pub preference_reduction: Reduction,
    /// Multiplier on the preference term.
    pub preference_weight: f64,
    pub noise: Option<NoiseConfig>,
    /// Absolute satisfaction threshold for known-function accuracy; the
    /// median of a uniform reference pool when unset.
    pub pca_threshold: Option<f64>,
    pub pca_reference_seed: u64,
    pub selection_weights: [f64; 3],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::paper()
    }
}

impl TrainConfig {
    /// Full-scale settings.
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 200,
            regretnet_samples: 160_000,
            mlp_initial_samples: 80_000,
            cotrain_interval: 5,
            cotrain_samples: 5_000,
            validation_samples: 2_000,
            test_samples: 20_000,
            batch_size: 128,
            lr: 1e-3,
            architecture: Architecture::default(),
            mlp_lr: 1e-3,
            mlp_batch_size: 128,
            mlp_epochs: 20,
            cotrain_epochs: 2,
            n_comparisons: DEFAULT_COMPARISONS,
            misreport_steps: 25,
            misreport_rate: 0.1,
            test_misreport_steps: 200,
            test_restarts: 10,
            lambda_period: 25,
            rho_period: 2_500,
            lambda_init: 1.0,
            rho_init: 1.0,
            lambda_increment: 1.0,
            rho_increment: 1.0,
            preference_mode: PreferenceMode::Mlp,
            preference_reduction: Reduction::Mean,
            preference_weight: 1.0,
            noise: None,
            pca_threshold: None,
            pca_reference_seed: 0,
            selection_weights: [0.45, 0.1, 0.45],
            seed: 0,
        }
    }

    /// Laptop-scale settings.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 60,
            regretnet_samples: 20_000,
            mlp_initial_samples: 10_000,
            cotrain_samples: 1_000,
            validation_samples: 1_000,
            test_samples: 5_000,
            ..TrainConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("regretnet_samples", self.regretnet_samples),
            ("mlp_initial_samples", self.mlp_initial_samples),
            ("cotrain_interval", self.cotrain_interval),
            ("validation_samples", self.validation_samples),
            ("test_samples", self.test_samples),
            ("batch_size", self.batch_size),
            ("mlp_batch_size", self.mlp_batch_size),
            ("n_comparisons", self.n_comparisons),
            ("lambda_period", self.lambda_period),
            ("rho_period", self.rho_period),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.mlp_batch_size < 2 {
            return Err(Error::invalid("mlp_batch_size must be >= 2 for batch norm"));
        }
        let rates = [
            ("lr", self.lr),
            ("mlp_lr", self.mlp_lr),
            ("misreport_rate", self.misreport_rate),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("lambda_init", self.lambda_init),
            ("rho_init", self.rho_init),
            ("lambda_increment", self.lambda_increment),
            ("rho_increment", self.rho_increment),
            ("preference_weight", self.preference_weight),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        check_selection_weights(self.selection_weights)?;
        if let Some(noise) = &self.noise {
            ProbitNoise::new(noise.mu.unwrap_or(0.0), noise.sigma.unwrap_or(1.0), noise.k, noise.f)?;
        }
        Ok(())
    }

    fn uses_mlp(&self) -> bool {
        matches!(
            self.preference_mode,
            PreferenceMode::Mlp | PreferenceMode::Lagrangian
        )
    }
}

fn check_selection_weights(w: [f64; 3]) -> Result<()> {
    if w.iter().any(|v| !(*v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "selection weights must be non-negative and sum to 1, got {w:?}"
        )));
    }
    Ok(())
}

/// Independent seed for one purpose within a run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

mod stream {
    pub const TRAIN_BIDS: u64 = 1;
    pub const VALIDATION_BIDS: u64 = 2;
    pub const TEST_BIDS: u64 = 3;
    pub const NET_INIT: u64 = 4;
    pub const MLP_INIT: u64 = 5;
    pub const MLP_POOL: u64 = 6;
    pub const LABELS: u64 = 7;
    pub const NOISE: u64 = 8;
    pub const BALANCE: u64 = 9;
    pub const MLP_SHUFFLE: u64 = 10;
    pub const SHUFFLE: u64 = 11;
    pub const COTRAIN: u64 = 12;
    pub const RESTARTS: u64 = 13;
}

/// Multipliers of the augmented Lagrangian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    pub lambda_r: Vec<f64>,
    pub rho_r: f64,
    pub lambda_s: Vec<f64>,
    pub rho_s: f64,
}

impl LagrangeState {
    pub fn new(cfg: &TrainConfig, n_agents: usize) -> Self {
        let lagrangian = cfg.preference_mode == PreferenceMode::Lagrangian;
        LagrangeState {
            lambda_r: vec![cfg.lambda_init; n_agents],
            rho_r: cfg.rho_init,
            lambda_s: if lagrangian {
                vec![cfg.lambda_init; cfg.batch_size]
            } else {
                Vec::new()
            },
            rho_s: if lagrangian { cfg.rho_init } else { 0.0 },
        }
    }

    /// Applies the schedule after `iteration` (counted from 1) completes.
    pub fn after_iteration(&mut self, iteration: usize, cfg: &TrainConfig) {
        if iteration % cfg.lambda_period == 0 {
            self.lambda_r.iter_mut().for_each(|l| *l += cfg.lambda_increment);
            self.lambda_s.iter_mut().for_each(|l| *l += cfg.lambda_increment);
        }
        if iteration % cfg.rho_period == 0 {
            self.rho_r += cfg.rho_increment;
            if !self.lambda_s.is_empty() {
                self.rho_s += cfg.rho_increment;
            }
        }
    }

    pub fn mean_lambda_r(&self) -> f64 {
        self.lambda_r.iter().sum::<f64>() / self.lambda_r.len().max(1) as f64
    }
}

/// Table-style summary of a model on a bid sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pca: f64,
    pub regret_mean: f64,
    pub regret_std: f64,
    pub regret_max: f64,
    pub payment_mean: f64,
    pub payment_std: f64,
    pub payment_max: f64,
}

impl Metrics {
    pub fn is_finite(&self) -> bool {
        [
            self.pca,
            self.regret_mean,
            self.regret_std,
            self.regret_max,
            self.payment_mean,
            self.payment_std,
            self.payment_max,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub net: RegretNet,
    pub mlp: Option<PreferenceMlp>,
    pub lagrange: LagrangeState,
    pub metrics: Metrics,
    pub seed: u64,
}

/// Truthful values tiled once per agent, with each block masked to the
/// agent whose utility it measures.
struct Stacking {
    n: usize,
    batch: usize,
    /// `[n*B, n, m]`: block `i` holds `values` on row `i`, zeros elsewhere.
    masked_values: Tensor,
    /// `[n*B, n]`: one-hot on agent `i` in block `i`.
    mask: Tensor,
}

impl Stacking {
    fn new(values: &Tensor) -> Self {
        let (b, n, m) = dims(values);
        let mut mv = vec![0.0; n * b * n * m];
        let mut mask = vec![0.0; n * b * n];
        for i in 0..n {
            for s in 0..b {
                let row = (i * b + s) * n + i;
                mask[row] = 1.0;
                mv[row * m..(row + 1) * m]
                    .copy_from_slice(&values.data()[(s * n + i) * m..(s * n + i + 1) * m]);
            }
        }
        Stacking {
            n,
            batch: b,
            masked_values: Tensor::from_parts(vec![n * b, n, m], mv),
            mask: Tensor::from_parts(vec![n * b, n], mask),
        }
    }

    /// Profiles `[n*B, n, m]` where block `i` replaces agent `i`'s row of
    /// `values` by `misreports[i]` (`[n, B, m]`).
    fn profiles(&self, values: &Tensor, misreports: &Tensor) -> Tensor {
        let (b, n, m) = dims(values);
        let mut data = Vec::with_capacity(n * b * n * m);
        for i in 0..n {
            data.extend_from_slice(values.data());
            let block = &mut data[i * b * n * m..];
            for s in 0..b {
                block[(s * n + i) * m..(s * n + i + 1) * m]
                    .copy_from_slice(&misreports.data()[(i * b + s) * m..(i * b + s + 1) * m]);
            }
        }
        Tensor::from_parts(vec![n * b, n, m], data)
    }

    /// Utility `[n, B]` of agent `i` under its misreport in block `i`.
    fn utility<'t>(&self, z: Var<'t>, p: Var<'t>) -> Result<Var<'t>> {
        let tape = z.tape();
        let gain = z
            .mul(tape.constant(self.masked_values.clone()))?
            .sum_axis(2)?
            .sum_axis(1)?;
        let paid = p.mul(tape.constant(self.mask.clone()))?.sum_axis(1)?;
        gain.sub(paid)?.reshape(vec![self.n, self.batch])
    }
}

fn dims(values: &Tensor) -> (usize, usize, usize) {
    let s = values.shape();
    (s[0], s[1], s[2])
}

/// Utility `[B, n]` of every agent at the profiles they report, valued at `values`.
fn truthful_utility<'t>(values: Var<'t>, z: Var<'t>, p: Var<'t>) -> Result<Var<'t>> {
    values.mul(z)?.sum_axis(2)?.sub(p)
}

/// Runs projected gradient ascent on each agent's utility from the given
/// starting misreports `[n, B, m]`, others held truthful.
fn ascend(
    net: &RegretNet,
    values: &Tensor,
    start: Tensor,
    model: &ValuationModel,
    steps: usize,
    rate: f64,
) -> Result<Tensor> {
    let (b, n, m) = dims(values);
    let st = Stacking::new(values);
    let mut mis = start;
    for _ in 0..steps {
        let tape = Tape::new();
        let bound = net.bind(&tape, false);
        let x = tape.param(st.profiles(values, &mis));
        let z = net.alloc_forward_on(&bound, x)?;
        let p = net.payment_forward_on(&bound, x, z)?;
        let u = st.utility(z, p)?.sum();
        let grads = tape.backward(u)?;
        let g = grads.get_or_zeros(x);
        let md = mis.data_mut();
        for i in 0..n {
            let (lo, hi) = model.support(i);
            for s in 0..b {
                let src = ((i * b + s) * n + i) * m;
                let dst = (i * b + s) * m;
                for j in 0..m {
                    md[dst + j] = (md[dst + j] + rate * g.data()[src + j]).clamp(lo, hi);
                }
            }
        }
    }
    Ok(mis)
}

/// Truthful rows rearranged as `[n, B, m]` misreport starts.
fn truthful_start(values: &Tensor) -> Tensor {
    let (b, n, m) = dims(values);
    let mut data = Vec::with_capacity(n * b * m);
    for i in 0..n {
        for s in 0..b {
            data.extend_from_slice(&values.data()[(s * n + i) * m..(s * n + i + 1) * m]);
        }
    }
    Tensor::from_parts(vec![n, b, m], data)
}

/// Best-response misreports `[n, B, m]`: for each agent, gradient ascent on
/// its utility from its true values with the others truthful, clipped to
/// the valuation support after every step.
pub fn compute_misreports(
    net: &RegretNet,
    values: &Tensor,
    model: &ValuationModel,
    steps: usize,
    rate: f64,
) -> Result<Tensor> {
    check_values(net, values)?;
    ascend(net, values, truthful_start(values), model, steps, rate)
}

fn check_values(net: &RegretNet, values: &Tensor) -> Result<()> {
    let s = values.shape();
    if s.len() != 3 || s[1] != net.spec.n_agents || s[2] != net.spec.m_items {
        return Err(Error::shape(
            "misreports",
            format!("values {s:?} for {}", net.spec.label()),
        ));
    }
    Ok(())
}

/// Utilities `[n, B]` of each agent when it alone plays its misreport.
pub fn misreport_utilities(net: &RegretNet, values: &Tensor, misreports: &Tensor) -> Result<Tensor> {
    check_values(net, values)?;
    let (b, n, m) = dims(values);
    if misreports.shape() != [n, b, m] {
        return Err(Error::shape(
            "misreport_utilities",
            format!("misreports {:?}, expected {:?}", misreports.shape(), [n, b, m]),
        ));
    }
    let st = Stacking::new(values);
    let tape = Tape::new();
    let bound = net.bind(&tape, false);
    let x = tape.constant(st.profiles(values, misreports));
    let z = net.alloc_forward_on(&bound, x)?;
    let p = net.payment_forward_on(&bound, x, z)?;
    Ok(st.utility(z, p)?.value())
}

/// Truthful utilities `[B, n]`.
pub fn truthful_utilities(net: &RegretNet, values: &Tensor) -> Result<Tensor> {
    check_values(net, values)?;
    let tape = Tape::new();
    let bound = net.bind(&tape, false);
    let v = tape.constant(values.clone());
    let z = net.alloc_forward_on(&bound, v)?;
    let p = net.payment_forward_on(&bound, v, z)?;
    Ok(truthful_utility(v, z, p)?.value())
}

/// Per-sample, per-agent regret `[B, n]`: `max(0, u_mis - u_truth)`.
pub fn regret_samples(net: &RegretNet, values: &Tensor, misreports: &Tensor) -> Result<Tensor> {
    let mis = misreport_utilities(net, values, misreports)?;
    let truth = truthful_utilities(net, values)?;
    let (b, n, _) = dims(values);
    let mut out = vec![0.0; b * n];
    for s in 0..b {
        for i in 0..n {
            out[s * n + i] = (mis.data()[i * b + s] - truth.data()[s * n + i]).max(0.0);
        }
    }
    Ok(Tensor::from_parts(vec![b, n], out))
}

/// Per-agent regret, averaged over the batch.
pub fn regret(net: &RegretNet, values: &Tensor, misreports: &Tensor) -> Result<Vec<f64>> {
    let r = regret_samples(net, values, misreports)?;
    let (b, n) = (r.shape()[0], r.shape()[1]);
    Ok((0..n)
        .map(|i| (0..b).map(|s| r.data()[s * n + i]).sum::<f64>() / b as f64)
        .collect())
}

/// Regret-penalty part of the loss: `sum_i lambda_i rgt_i + rho/2 sum_i rgt_i^2`.
pub fn regret_penalty<'t>(rgt: Var<'t>, lambda: &[f64], rho: f64) -> Result<Var<'t>> {
    let tape = rgt.tape();
    let lam = tape.constant(Tensor::from_vec(lambda.to_vec()));
    let linear = rgt.mul(lam)?.sum();
    let quad = rgt.mul(rgt)?.sum().scale(rho / 2.0);
    linear.add(quad)
}

/// `-(mean revenue) + regret penalty - sum_j pref_j`, on a tape.
///
/// `payments` is `[B, n]`, `rgt` is `[n]` and `prefs` is `[B]`.
pub fn loss_eq1<'t>(
    payments: Var<'t>,
    rgt: Var<'t>,
    lambda_r: &[f64],
    rho_r: f64,
    prefs: Var<'t>,
) -> Result<Var<'t>> {
    let revenue = payments.sum_axis(1)?.mean();
    revenue
        .neg()
        .add(regret_penalty(rgt, lambda_r, rho_r)?)?
        .sub(prefs.sum())
}

/// Like [`loss_eq1`] with the preference term
/// `sum_j lambda_s,j pref_j + rho_s/2 sum_j pref_j^2`.
pub fn loss_lagrangian_pref<'t>(
    payments: Var<'t>,
    rgt: Var<'t>,
    prefs: Var<'t>,
    state: &LagrangeState,
) -> Result<Var<'t>> {
    let batch = prefs.shape()[0];
    if state.lambda_s.len() < batch {
        return Err(Error::invalid(
            "loss_lagrangian_pref: preference multipliers are not enabled for this batch",
        ));
    }
    let tape = prefs.tape();
    let lam = tape.constant(Tensor::from_vec(state.lambda_s[..batch].to_vec()));
    let l_pref = prefs
        .mul(lam)?
        .sum()
        .add(prefs.mul(prefs)?.sum().scale(state.rho_s / 2.0))?;
    let revenue = payments.sum_axis(1)?.mean();
    revenue
        .neg()
        .add(regret_penalty(rgt, &state.lambda_r, state.rho_r)?)?
        .sub(l_pref)
}

/// Preference source used inside the RegretNet loss.
pub enum PreferenceTerm<'a> {
    Mlp(&'a PreferenceMlp),
    Function(&'a PreferenceFunction),
    None,
}

/// One optimizer step's loss and gradients on a minibatch with fixed misreports.
struct StepOutput {
    loss: f64,
    grads: Vec<Option<Tensor>>,
}

fn loss_step(
    net: &RegretNet,
    values: &Tensor,
    misreports: &Tensor,
    lagrange: &LagrangeState,
    pref: &PreferenceTerm<'_>,
    cfg: &TrainConfig,
) -> Result<StepOutput> {
    let (b, n, _) = dims(values);
    let st = Stacking::new(values);
    let tape = Tape::new();
    let bound = net.bind(&tape, true);
    let v = tape.constant(values.clone());
    let mis_profiles = tape.constant(st.profiles(values, misreports));
    let all = tape.concat(&[v, mis_profiles], 0)?;
    let z_all = net.alloc_forward_on(&bound, all)?;
    let p_all = net.payment_forward_on(&bound, all, z_all)?;
    let (z, p) = (z_all.narrow(0, 0, b)?, p_all.narrow(0, 0, b)?);
    let (z_mis, p_mis) = (z_all.narrow(0, b, n * b)?, p_all.narrow(0, b, n * b)?);

    let u_truth = truthful_utility(v, z, p)?.transpose()?;
    let u_mis = st.utility(z_mis, p_mis)?;
    let rgt = u_mis.sub(u_truth)?.relu().mean_axis(1)?;

    let prefs = match pref {
        PreferenceTerm::Mlp(mlp) => {
            let params = mlp.bind(&tape, false);
            Some(mlp.score_on(&params, z)?)
        }
        PreferenceTerm::Function(f) => Some(f.score_var(z)?),
        PreferenceTerm::None => None,
    };
    let loss = match (cfg.preference_mode, prefs) {
        (PreferenceMode::Lagrangian, Some(s)) => loss_lagrangian_pref(p, rgt, s, lagrange)?,
        (_, Some(s)) => {
            let s = match cfg.preference_reduction {
                Reduction::Sum => s,
                Reduction::Mean => s.scale(1.0 / b as f64),
            };
            loss_eq1(p, rgt, &lagrange.lambda_r, lagrange.rho_r, s.scale(cfg.preference_weight))?
        }
        (_, None) => {
            let zero = tape.constant(Tensor::zeros(vec![b]));
            loss_eq1(p, rgt, &lagrange.lambda_r, lagrange.rho_r, zero)?
        }
    };
    let grads = tape.backward(loss)?;
    Ok(StepOutput {
        loss: loss.value().item(),
        grads: bound.params().map(|p| grads.get(p)).collect(),
    })
}

/// Adam training of the MLP on binary cross-entropy; returns training accuracy.
fn fit_mlp(
    mlp: &mut PreferenceMlp,
    adam: &mut Adam,
    set: &LabeledAllocationSet,
    epochs: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let targets = set.targets();
    let mut order: Vec<usize> = (0..set.len()).collect();
    let batch = batch.min(set.len());
    for _ in 0..epochs {
        order.shuffle(rng);
        // A trailing batch of one would have no batch variance.
        for idx in order.chunks(batch).filter(|c| c.len() >= 2) {
            let sub = set.gather(idx);
            let tape = Tape::new();
            let params = mlp.bind(&tape, true);
            let x = tape.constant(sub.allocations.clone());
            let mut stats = mlp.bn.clone();
            let pred = mlp.forward_on(&params, x, Some(&mut stats))?;
            let t = tape.constant(Tensor::from_vec(idx.iter().map(|&i| targets[i]).collect()));
            let loss = pred.bce(t)?;
            if !loss.value().item().is_finite() {
                return Err(Error::Numerical {
                    epoch: 0,
                    iteration: adam.step_count() as usize,
                    detail: "non-finite MLP loss".into(),
                });
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Option<Tensor>> = params.iter().map(|p| grads.get(*p)).collect();
            adam.step(&mut mlp.params, &g)?;
            mlp.bn = stats;
        }
    }
    mlp_accuracy(mlp, set)
}

/// Fraction of the set classified correctly at threshold 0.5.
pub fn mlp_accuracy(mlp: &PreferenceMlp, set: &LabeledAllocationSet) -> Result<f64> {
    let scores = mlp.score(&set.allocations)?;
    let hits = scores
        .iter()
        .zip(&set.labels)
        .filter(|(s, &y)| u8::from(**s >= 0.5) == y)
        .count();
    Ok(hits as f64 / set.len() as f64)
}

/// A preference MLP together with its optimizer and training pool.
#[derive(Debug, Clone)]
pub struct MlpTrainer {
    pub mlp: PreferenceMlp,
    pub adam: Adam,
    /// Ground-truth (possibly noisy) exemplars plus co-training additions, unbalanced.
    pub pool: LabeledAllocationSet,
    pub train_accuracy: f64,
}

/// Trains a fresh MLP on a labeled set after class balancing.
pub fn pretrain_mlp(set: &LabeledAllocationSet, cfg: &TrainConfig, seed: u64) -> Result<MlpTrainer> {
    let balanced = class_balance(set, derive_seed(seed, stream::BALANCE))?;
    let width = set.width();
    let mut mlp = PreferenceMlp::init(width, [100, 100], derive_seed(seed, stream::MLP_INIT))?;
    let mut adam = Adam::new(&mlp.params, cfg.mlp_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::MLP_SHUFFLE));
    let train_accuracy = fit_mlp(&mut mlp, &mut adam, &balanced, cfg.mlp_epochs, cfg.mlp_batch_size, &mut rng)?;
    Ok(MlpTrainer {
        mlp,
        adam,
        pool: set.clone(),
        train_accuracy,
    })
}

/// Labels fresh RegretNet allocations with the current MLP, grows the pool,
/// rebalances and retrains from a warm-restarted optimizer.
pub fn cotrain_step(
    trainer: &mut MlpTrainer,
    net: &RegretNet,
    model: &ValuationModel,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<()> {
    if cfg.cotrain_samples > 0 {
        let bids = sample_bids(&net.spec, model, cfg.cotrain_samples, seed)?;
        let z = net.alloc_forward(&bids)?;
        let scores = trainer.mlp.score(&z)?;
        let labels = scores.iter().map(|&s| u8::from(s >= 0.5)).collect();
        let fresh = LabeledAllocationSet::new(z, scores, labels, "cotrain", seed)?;
        trainer.pool.extend(&fresh)?;
    }
    let balanced = class_balance(&trainer.pool, derive_seed(seed, stream::BALANCE))?;
    trainer.adam.warm_restart();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::MLP_SHUFFLE));
    trainer.train_accuracy = fit_mlp(
        &mut trainer.mlp,
        &mut trainer.adam,
        &balanced,
        cfg.cotrain_epochs,
        cfg.mlp_batch_size,
        &mut rng,
    )?;
    Ok(())
}

/// Ground truth used for accuracy during and after training.
#[derive(Debug, Clone)]
pub enum TruthSource {
    Known {
        function: PreferenceFunction,
        threshold: f64,
    },
    Exemplars(LabeledAllocationSet),
}

impl TruthSource {
    pub fn as_ground_truth(&self) -> GroundTruth<'_> {
        match self {
            TruthSource::Known {
                function,
                threshold,
            } => GroundTruth::Known {
                function,
                threshold: *threshold,
            },
            TruthSource::Exemplars(set) => GroundTruth::Exemplars(set),
        }
    }

    /// Known-function truth with the configured or reference-median threshold.
    pub fn known(function: &PreferenceFunction, spec: &AuctionSpec, cfg: &TrainConfig) -> Result<Self> {
        let threshold = match cfg.pca_threshold {
            Some(t) => t,
            None => reference_threshold(function, spec, cfg.pca_reference_seed)?,
        };
        Ok(TruthSource::Known {
            function: function.clone(),
            threshold,
        })
    }
}

/// Misreport search settings.
#[derive(Debug, Clone, Copy)]
pub struct Adversary {
    pub steps: usize,
    pub rate: f64,
    /// Extra uniformly random starting points besides the truthful one.
    pub restarts: usize,
    pub seed: u64,
}

impl Adversary {
    pub fn train(cfg: &TrainConfig) -> Self {
        Adversary {
            steps: cfg.misreport_steps,
            rate: cfg.misreport_rate,
            restarts: 0,
            seed: 0,
        }
    }

    pub fn test(cfg: &TrainConfig) -> Self {
        Adversary {
            steps: cfg.test_misreport_steps,
            rate: cfg.misreport_rate,
            restarts: cfg.test_restarts,
            seed: derive_seed(cfg.seed, stream::RESTARTS),
        }
    }
}

/// Per-sample per-agent regret `[B, n]` against the strongest of the
/// adversary's starting points.
pub fn adversarial_regret(
    net: &RegretNet,
    values: &Tensor,
    model: &ValuationModel,
    adv: &Adversary,
) -> Result<Tensor> {
    check_values(net, values)?;
    let (b, n, m) = dims(values);
    let mut rng = ChaCha8Rng::seed_from_u64(adv.seed);
    let mut best = vec![f64::NEG_INFINITY; n * b];
    for start in 0..=adv.restarts {
        let init = if start == 0 {
            truthful_start(values)
        } else {
            let mut data = Vec::with_capacity(n * b * m);
            for i in 0..n {
                let (lo, hi) = model.support(i);
                data.extend((0..b * m).map(|_| rng.random_range(lo..=hi)));
            }
            Tensor::from_parts(vec![n, b, m], data)
        };
        let mis = ascend(net, values, init, model, adv.steps, adv.rate)?;
        let u = misreport_utilities(net, values, &mis)?;
        best.iter_mut().zip(u.data()).for_each(|(a, &v)| *a = a.max(v));
    }
    let truth = truthful_utilities(net, values)?;
    let mut out = vec![0.0; b * n];
    for s in 0..b {
        for i in 0..n {
            out[s * n + i] = (best[i * b + s] - truth.data()[s * n + i]).max(0.0);
        }
    }
    Ok(Tensor::from_parts(vec![b, n], out))
}

fn mean_std_max(v: &[f64]) -> (f64, f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, var.sqrt(), max)
}

/// Samples per chunk when evaluating large batches.
const EVAL_CHUNK: usize = 256;

/// Accuracy, regret and payment statistics of `net` on `bids`.
pub fn evaluate(
    net: &RegretNet,
    bids: &BidBatch,
    model: &ValuationModel,
    truth: GroundTruth<'_>,
    adv: &Adversary,
) -> Result<Metrics> {
    let mut regrets = Vec::with_capacity(bids.len() * bids.n_agents());
    let mut payments = Vec::with_capacity(bids.len());
    let mut satisfied = Vec::with_capacity(bids.len());
    let mut start = 0;
    let mut chunk_index = 0;
    while start < bids.len() {
        let len = EVAL_CHUNK.min(bids.len() - start);
        let chunk = bids.slice(start, len);
        let (z, p) = net.forward(&chunk)?;
        satisfied.extend(satisfaction(&z, truth)?);
        payments.extend(p.data().chunks_exact(bids.n_agents()).map(|r| r.iter().sum::<f64>()));
        let chunk_adv = Adversary {
            seed: derive_seed(adv.seed, chunk_index),
            ..*adv
        };
        regrets.extend(adversarial_regret(net, &chunk.values, model, &chunk_adv)?.into_data());
        start += len;
        chunk_index += 1;
    }
    let (regret_mean, regret_std, regret_max) = mean_std_max(&regrets);
    let (payment_mean, payment_std, payment_max) = mean_std_max(&payments);
    Ok(Metrics {
        pca: satisfied.iter().map(|&s| s as f64).sum::<f64>() / satisfied.len() as f64,
        regret_mean,
        regret_std,
        regret_max,
        payment_mean,
        payment_std,
        payment_max,
    })
}

/// Eq.-2-style score of every checkpoint: `alpha * pca + beta * pay / max_pay
/// + gamma * (1 - rgt / max_rgt)`, maxima over the whole history.
pub fn selection_scores(metrics: &[Metrics], weights: [f64; 3]) -> Result<Vec<f64>> {
    check_selection_weights(weights)?;
    let [alpha, beta, gamma] = weights;
    let max_pay = metrics.iter().map(|m| m.payment_mean).fold(f64::NEG_INFINITY, f64::max);
    let max_rgt = metrics.iter().map(|m| m.regret_mean).fold(f64::NEG_INFINITY, f64::max);
    Ok(metrics
        .iter()
        .map(|m| {
            let pay = if max_pay > 0.0 { m.payment_mean / max_pay } else { 0.0 };
            let rgt = if max_rgt > 0.0 { m.regret_mean / max_rgt } else { 0.0 };
            alpha * m.pca + beta * pay + gamma * (1.0 - rgt)
        })
        .collect())
}

/// Index of the checkpoint maximizing the selection score; ties go to the earliest.
pub fn validate_select(checkpoints: &[Checkpoint], weights: [f64; 3]) -> Result<usize> {
    if checkpoints.is_empty() {
        return Err(Error::invalid("validate_select: no checkpoints"));
    }
    let metrics: Vec<Metrics> = checkpoints.iter().map(|c| c.metrics).collect();
    let scores = selection_scores(&metrics, weights)?;
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = k;
        }
    }
    Ok(best)
}

/// One row of the per-epoch log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub metrics: Metrics,
    pub lambda_r: f64,
    pub rho_r: f64,
    pub mlp_accuracy: Option<f64>,
}

/// Everything a training run produced.
#[derive(Debug)]
pub struct TrainRun {
    pub checkpoints: Vec<Checkpoint>,
    pub mlp: Option<MlpTrainer>,
    /// Ground-truth exemplars before any noise, as labeled.
    pub exemplars: Option<LabeledAllocationSet>,
    /// Fraction of exemplar labels flipped by the noise model.
    pub flip_fraction: Option<f64>,
    pub truth: TruthSource,
    /// Set when training stopped on a non-finite loss; `checkpoints` then
    /// ends with the last finite one.
    pub abort: Option<Error>,
}

/// What to train: the auction, the bidders and the preference to learn.
#[derive(Debug, Clone)]
pub struct Problem {
    pub spec: AuctionSpec,
    pub valuation: ValuationModel,
    pub function: PreferenceFunction,
}

/// Builds the initial exemplar set and (optionally noisy) MLP pool.
pub fn initial_exemplars(
    problem: &Problem,
    cfg: &TrainConfig,
) -> Result<(LabeledAllocationSet, LabeledAllocationSet, Option<f64>)> {
    let pool = uniform_allocations(
        &problem.spec,
        cfg.mlp_initial_samples,
        derive_seed(cfg.seed, stream::MLP_POOL),
    )?;
    let clean = build_labels(
        &pool,
        &problem.function,
        cfg.n_comparisons,
        derive_seed(cfg.seed, stream::LABELS),
    )?;
    match &cfg.noise {
        None => Ok((clean.clone(), clean, None)),
        Some(noise) => {
            let model = noise.model(&clean.scores)?;
            let labels = probit_flip(
                &clean.labels,
                &clean.scores,
                &model,
                derive_seed(cfg.seed, stream::NOISE),
            )?;
            let flipped = labels
                .iter()
                .zip(&clean.labels)
                .filter(|(a, b)| a != b)
                .count();
            let mut noisy = clean.clone();
            noisy.labels = labels;
            noisy.provenance = format!("{} + probit noise", clean.provenance);
            let fraction = flipped as f64 / noisy.len() as f64;
            Ok((clean, noisy, Some(fraction)))
        }
    }
}

/// Full training procedure. `observer` sees each epoch's report as it is made.
pub fn train(
    problem: &Problem,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochReport),
) -> Result<TrainRun> {
    cfg.validate()?;
    problem.valuation.validate(Some(&problem.spec))?;
    problem.function.validate(&problem.spec)?;
    let spec = problem.spec;
    let model = &problem.valuation;
    let mixture = matches!(problem.function, PreferenceFunction::Mixture { .. });
    if mixture && cfg.preference_mode == PreferenceMode::Penalty {
        return Err(Error::invalid("penalty mode needs a scoring function, not a mixture"));
    }

    let (mut exemplars, mut mlp, mut flip_fraction) = (None, None, None);
    if cfg.uses_mlp() || mixture {
        let (clean, noisy, flips) = initial_exemplars(problem, cfg)?;
        if cfg.uses_mlp() {
            mlp = Some(pretrain_mlp(&noisy, cfg, cfg.seed)?);
        }
        exemplars = Some(clean);
        flip_fraction = flips;
    }
    let truth = match (&problem.function, &exemplars) {
        (PreferenceFunction::Mixture { .. }, Some(set)) => TruthSource::Exemplars(set.clone()),
        (f, _) => TruthSource::known(f, &spec, cfg)?,
    };

    let mut net = RegretNet::init(spec, cfg.architecture.clone(), derive_seed(cfg.seed, stream::NET_INIT))?;
    let train_bids = sample_bids(&spec, model, cfg.regretnet_samples, derive_seed(cfg.seed, stream::TRAIN_BIDS))?;
    let val_bids = sample_bids(&spec, model, cfg.validation_samples, derive_seed(cfg.seed, stream::VALIDATION_BIDS))?;
    let mut lagrange = LagrangeState::new(cfg, spec.n_agents);
    let mut adam = Adam::new(&net.params(), cfg.lr);
    let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::SHUFFLE));
    let val_adv = Adversary::train(cfg);

    let validate = |net: &RegretNet| evaluate(net, &val_bids, model, truth.as_ground_truth(), &val_adv);
    let checkpoint = |epoch, net: &RegretNet, mlp: &Option<MlpTrainer>, lagrange: &LagrangeState, metrics| Checkpoint {
        epoch,
        net: net.clone(),
        mlp: mlp.as_ref().map(|t| t.mlp.clone()),
        lagrange: lagrange.clone(),
        metrics,
        seed: cfg.seed,
    };

    let metrics = validate(&net)?;
    let mut checkpoints = vec![checkpoint(0, &net, &mlp, &lagrange, metrics)];
    let report = |epoch, metrics, lagrange: &LagrangeState, mlp: &Option<MlpTrainer>| EpochReport {
        epoch,
        metrics,
        lambda_r: lagrange.mean_lambda_r(),
        rho_r: lagrange.rho_r,
        mlp_accuracy: mlp.as_ref().map(|t| t.train_accuracy),
    };
    observer(&report(0, metrics, &lagrange, &mlp));

    let mut order: Vec<usize> = (0..train_bids.len()).collect();
    let mut iteration = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        for idx in order.chunks(cfg.batch_size) {
            iteration += 1;
            let batch = train_bids.gather(idx);
            let mis = compute_misreports(&net, &batch.values, model, cfg.misreport_steps, cfg.misreport_rate)?;
            let term = match (&mlp, cfg.preference_mode) {
                (Some(t), _) => PreferenceTerm::Mlp(&t.mlp),
                (None, PreferenceMode::Penalty) => PreferenceTerm::Function(&problem.function),
                _ => PreferenceTerm::None,
            };
            let out = loss_step(&net, &batch.values, &mis, &lagrange, &term, cfg)?;
            let grads_finite = out.grads.iter().flatten().all(|g| g.is_finite());
            if !out.loss.is_finite() || !grads_finite {
                return Ok(TrainRun {
                    checkpoints,
                    mlp,
                    exemplars,
                    flip_fraction,
                    truth,
                    abort: Some(Error::Numerical {
                        epoch,
                        iteration,
                        detail: format!("loss {} (gradients finite: {grads_finite})", out.loss),
                    }),
                });
            }
            let mut params = net.params();
            adam.step(&mut params, &out.grads)?;
            net.set_params(params)?;
            lagrange.after_iteration(iteration, cfg);
        }
        if let Some(t) = mlp.as_mut() {
            if epoch % cfg.cotrain_interval == 0 {
                cotrain_step(t, &net, model, cfg, derive_seed(derive_seed(cfg.seed, stream::COTRAIN), epoch as u64))?;
            }
        }
        let metrics = validate(&net)?;
        if !metrics.is_finite() {
            return Ok(TrainRun {
                checkpoints,
                mlp,
                exemplars,
                flip_fraction,
                truth,
                abort: Some(Error::Numerical {
                    epoch,
                    iteration,
                    detail: "non-finite validation metrics".into(),
                }),
            });
        }
        checkpoints.push(checkpoint(epoch, &net, &mlp, &lagrange, metrics));
        observer(&report(epoch, metrics, &lagrange, &mlp));
    }
    Ok(TrainRun {
        checkpoints,
        mlp,
        exemplars,
        flip_fraction,
        truth,
        abort: None,
    })
}

/// Test-set bids for a configuration.
pub fn test_bids(spec: &AuctionSpec, model: &ValuationModel, cfg: &TrainConfig) -> Result<BidBatch> {
    sample_bids(spec, model, cfg.test_samples, derive_seed(cfg.seed, stream::TEST_BIDS))
}
