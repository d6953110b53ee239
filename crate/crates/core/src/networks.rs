//! Allocation and payment networks, and the preference-scoring MLP.
//!
//! Parameters live in plain [`Tensor`]s owned by the model structs. A forward
//! pass binds them onto a [`Tape`] (as trainable leaves or as constants) and
//! builds the graph from there, so the same code path serves training,
//! misreport search and plain evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auction::{AuctionSpec, BidBatch, DemandKind};
use crate::autodiff::{BatchNormStats, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Hidden-layer layout shared by the allocation and payment trunks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            hidden: vec![100, 100],
            activation: Activation::Tanh,
        }
    }
}

/// Uniform `±1/sqrt(fan_in)` initialization of a dense stack
/// `[w0, b0, w1, b1, ...]` with the given layer widths.
fn init_dense(widths: &[usize], rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let mut params = Vec::with_capacity(2 * (widths.len() - 1));
    for pair in widths.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        params.push(Tensor::from_parts(vec![fan_in, fan_out], w));
        params.push(Tensor::from_parts(vec![fan_out], b));
    }
    params
}

fn bind<'t>(tape: &'t Tape, params: &[Tensor], trainable: bool) -> Vec<Var<'t>> {
    params
        .iter()
        .map(|p| tape.leaf(p.clone(), trainable))
        .collect()
}

fn dense_stack<'t>(x: Var<'t>, params: &[Var<'t>], activation: Activation) -> Result<Var<'t>> {
    let layers = params.len() / 2;
    let mut h = x;
    for l in 0..layers {
        h = h.matmul(params[2 * l])?.add(params[2 * l + 1])?;
        if l + 1 < layers {
            h = match activation {
                Activation::Tanh => h.tanh(),
                Activation::Relu => h.relu(),
            };
        }
    }
    Ok(h)
}

/// Allocation network plus payment network for one auction setting.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretNet {
    pub spec: AuctionSpec,
    pub arch: Architecture,
    pub alloc: Vec<Tensor>,
    pub payment: Vec<Tensor>,
    pub seed: u64,
}

/// Parameters of a [`RegretNet`] recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundRegretNet<'t> {
    pub alloc: Vec<Var<'t>>,
    pub payment: Vec<Var<'t>>,
}

impl<'t> BoundRegretNet<'t> {
    pub fn params(&self) -> impl Iterator<Item = Var<'t>> + '_ {
        self.alloc.iter().chain(&self.payment).copied()
    }
}

impl RegretNet {
    /// Width of the allocation head's logit layer.
    pub fn alloc_outputs(spec: &AuctionSpec) -> usize {
        let (n, m) = (spec.n_agents, spec.m_items);
        match spec.demand {
            DemandKind::Additive => (n + 1) * m,
            DemandKind::UnitDemand => n * (m + 1) + (n + 1) * m,
        }
    }

    pub fn init(spec: AuctionSpec, arch: Architecture, seed: u64) -> Result<Self> {
        if arch.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![spec.width()];
        widths.extend(&arch.hidden);
        widths.push(Self::alloc_outputs(&spec));
        let alloc = init_dense(&widths, &mut rng);
        *widths.last_mut().unwrap() = spec.n_agents;
        let payment = init_dense(&widths, &mut rng);
        Ok(RegretNet {
            spec,
            arch,
            alloc,
            payment,
            seed,
        })
    }

    /// All parameter tensors, allocation net first.
    pub fn params(&self) -> Vec<Tensor> {
        self.alloc.iter().chain(&self.payment).cloned().collect()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.alloc.iter_mut().chain(self.payment.iter_mut())
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.alloc.len() + self.payment.len() {
            return Err(Error::shape("set_params", "parameter count mismatch"));
        }
        for (dst, src) in self.params_mut().zip(params) {
            if dst.shape() != src.shape() {
                return Err(Error::shape(
                    "set_params",
                    format!("{:?} vs {:?}", dst.shape(), src.shape()),
                ));
            }
            *dst = src;
        }
        Ok(())
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundRegretNet<'t> {
        BoundRegretNet {
            alloc: bind(tape, &self.alloc, trainable),
            payment: bind(tape, &self.payment, trainable),
        }
    }

    fn check_bids(&self, bids: &Var<'_>) -> Result<usize> {
        let s = bids.shape();
        if s.len() != 3 || s[1] != self.spec.n_agents || s[2] != self.spec.m_items {
            return Err(Error::shape(
                "alloc_forward",
                format!(
                    "bids {s:?} for a {}x{} auction",
                    self.spec.n_agents, self.spec.m_items
                ),
            ));
        }
        Ok(s[0])
    }

    /// Allocation probabilities `[B, n, m]` for bids `[B, n, m]`.
    ///
    /// Additive: per item, softmax over the agents plus a dummy outside
    /// option, which is then dropped. Unit-demand: elementwise minimum of a
    /// per-agent softmax over items (plus dummy item) and a per-item
    /// softmax over agents (plus dummy agent).
    pub fn alloc_forward_on<'t>(&self, net: &BoundRegretNet<'t>, bids: Var<'t>) -> Result<Var<'t>> {
        let batch = self.check_bids(&bids)?;
        let (n, m) = (self.spec.n_agents, self.spec.m_items);
        let flat = bids.reshape(vec![batch, n * m])?;
        let logits = dense_stack(flat, &net.alloc, self.arch.activation)?;
        match self.spec.demand {
            DemandKind::Additive => logits
                .reshape(vec![batch, n + 1, m])?
                .softmax(1)?
                .narrow(1, 0, n),
            DemandKind::UnitDemand => {
                let rows = logits
                    .narrow(1, 0, n * (m + 1))?
                    .reshape(vec![batch, n, m + 1])?
                    .softmax(2)?
                    .narrow(2, 0, m)?;
                let cols = logits
                    .narrow(1, n * (m + 1), (n + 1) * m)?
                    .reshape(vec![batch, n + 1, m])?
                    .softmax(1)?
                    .narrow(1, 0, n)?;
                rows.minimum(cols)
            }
        }
    }

    /// Payments `[B, n]`: `p_i = sigmoid(head_i) * sum_j b_ij z_ij`, so a
    /// truthful bidder never pays more than the value they receive.
    pub fn payment_forward_on<'t>(
        &self,
        net: &BoundRegretNet<'t>,
        bids: Var<'t>,
        alloc: Var<'t>,
    ) -> Result<Var<'t>> {
        let batch = self.check_bids(&bids)?;
        if alloc.shape() != bids.shape() {
            return Err(Error::shape(
                "payment_forward",
                format!("allocation {:?} vs bids {:?}", alloc.shape(), bids.shape()),
            ));
        }
        let (n, m) = (self.spec.n_agents, self.spec.m_items);
        let flat = bids.reshape(vec![batch, n * m])?;
        let fraction = dense_stack(flat, &net.payment, self.arch.activation)?.sigmoid();
        let welfare = bids.mul(alloc)?.sum_axis(2)?;
        fraction.mul(welfare)
    }

    /// Allocation and payments for a batch, without gradients.
    pub fn forward(&self, bids: &BidBatch) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let net = self.bind(&tape, false);
        let b = tape.constant(bids.values.clone());
        let z = self.alloc_forward_on(&net, b)?;
        let p = self.payment_forward_on(&net, b, z)?;
        Ok((z.value(), p.value()))
    }

    pub fn alloc_forward(&self, bids: &BidBatch) -> Result<Tensor> {
        let tape = Tape::new();
        let net = self.bind(&tape, false);
        let b = tape.constant(bids.values.clone());
        Ok(self.alloc_forward_on(&net, b)?.value())
    }
}

/// Three dense layers with batch norm and ReLU between them and a sigmoid
/// head, scoring a flattened allocation in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceMlp {
    pub input_width: usize,
    pub hidden: [usize; 2],
    /// `[w0, b0, gamma0, beta0, w1, b1, gamma1, beta1, w2, b2]`
    pub params: Vec<Tensor>,
    pub bn: [BatchNormStats; 2],
    pub seed: u64,
}

impl PreferenceMlp {
    pub fn init(input_width: usize, hidden: [usize; 2], seed: u64) -> Result<Self> {
        if input_width == 0 || hidden.contains(&0) {
            return Err(Error::invalid("MLP widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dense = init_dense(&[input_width, hidden[0], hidden[1], 1], &mut rng);
        let mut it = dense.into_iter();
        let mut params = Vec::with_capacity(10);
        for &h in &hidden {
            params.push(it.next().unwrap());
            params.push(it.next().unwrap());
            params.push(Tensor::ones(vec![h]));
            params.push(Tensor::zeros(vec![h]));
        }
        params.extend(it);
        Ok(PreferenceMlp {
            input_width,
            hidden,
            params,
            bn: [BatchNormStats::new(hidden[0]), BatchNormStats::new(hidden[1])],
            seed,
        })
    }

    pub fn for_spec(spec: &AuctionSpec, seed: u64) -> Result<Self> {
        Self::init(spec.width(), [100, 100], seed)
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        bind(tape, &self.params, trainable)
    }

    /// Scores `[B]` for allocations `[B, n, m]` (or already flat `[B, w]`).
    ///
    /// With `train_stats` the batch statistics normalize and the given
    /// running statistics are updated; otherwise `self.bn` is used as is.
    pub fn forward_on<'t>(
        &self,
        params: &[Var<'t>],
        alloc: Var<'t>,
        train_stats: Option<&mut [BatchNormStats; 2]>,
    ) -> Result<Var<'t>> {
        let shape = alloc.shape();
        let batch = shape[0];
        let width: usize = shape[1..].iter().product();
        if width != self.input_width {
            return Err(Error::shape(
                "mlp_forward",
                format!("input width {width}, expected {}", self.input_width),
            ));
        }
        let train = train_stats.is_some();
        let mut eval_stats;
        let stats = match train_stats {
            Some(s) => s,
            None => {
                eval_stats = self.bn.clone();
                &mut eval_stats
            }
        };
        let mut h = alloc.reshape(vec![batch, width])?;
        for (layer, st) in stats.iter_mut().enumerate() {
            let p = &params[4 * layer..4 * layer + 4];
            h = h.matmul(p[0])?.add(p[1])?;
            h = h.batch_norm(p[2], p[3], st, train)?.relu();
        }
        h.matmul(params[8])?
            .add(params[9])?
            .sigmoid()
            .reshape(vec![batch])
    }

    /// Evaluation-mode forward on a tape.
    pub fn score_on<'t>(&self, params: &[Var<'t>], alloc: Var<'t>) -> Result<Var<'t>> {
        self.forward_on(params, alloc, None)
    }

    /// Evaluation-mode scores for a `[B, n, m]` allocation tensor.
    pub fn score(&self, alloc: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let z = tape.constant(alloc.clone());
        Ok(self.score_on(&params, z)?.value().into_data())
    }
}
