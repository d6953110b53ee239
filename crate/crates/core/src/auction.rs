//! Auction model: valuation sampling, utilities, revenue, feasibility and
//! the itemwise Myerson baseline.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Slack allowed on allocation row/column sums.
pub const FEASIBILITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemandKind {
    Additive,
    UnitDemand,
}

impl DemandKind {
    /// One-letter tag used in setting labels such as "2x2 a".
    pub fn tag(self) -> &'static str {
        match self {
            DemandKind::Additive => "a",
            DemandKind::UnitDemand => "u",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuctionSpec {
    pub n_agents: usize,
    pub m_items: usize,
    pub demand: DemandKind,
}

impl Default for AuctionSpec {
    fn default() -> Self {
        AuctionSpec::additive(2, 2)
    }
}

impl AuctionSpec {
    pub fn new(n_agents: usize, m_items: usize, demand: DemandKind) -> Result<Self> {
        if n_agents == 0 || m_items == 0 {
            return Err(Error::invalid(format!(
                "auction needs at least one agent and one item, got {n_agents}x{m_items}"
            )));
        }
        Ok(AuctionSpec {
            n_agents,
            m_items,
            demand,
        })
    }

    pub fn additive(n_agents: usize, m_items: usize) -> Self {
        Self::new(n_agents, m_items, DemandKind::Additive).expect("positive sizes")
    }

    pub fn unit_demand(n_agents: usize, m_items: usize) -> Self {
        Self::new(n_agents, m_items, DemandKind::UnitDemand).expect("positive sizes")
    }

    /// Number of entries in one bid profile or allocation.
    pub fn width(&self) -> usize {
        self.n_agents * self.m_items
    }

    pub fn label(&self) -> String {
        format!("{}x{} {}", self.n_agents, self.m_items, self.demand.tag())
    }
}

/// Independent uniform valuations per (agent, item), with an optional
/// multiplicative scale per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValuationModel {
    pub low: f64,
    pub high: f64,
    /// Per-agent scale on the support; empty means all ones.
    pub agent_scale: Vec<f64>,
}

impl Default for ValuationModel {
    fn default() -> Self {
        ValuationModel {
            low: 0.0,
            high: 1.0,
            agent_scale: Vec::new(),
        }
    }
}

impl ValuationModel {
    pub fn uniform(low: f64, high: f64) -> Result<Self> {
        let model = ValuationModel {
            low,
            high,
            agent_scale: Vec::new(),
        };
        model.validate(None)?;
        Ok(model)
    }

    pub fn with_scales(mut self, scales: Vec<f64>) -> Result<Self> {
        self.agent_scale = scales;
        self.validate(None)?;
        Ok(self)
    }

    pub fn validate(&self, spec: Option<&AuctionSpec>) -> Result<()> {
        if !(self.low < self.high) || !self.low.is_finite() || !self.high.is_finite() {
            return Err(Error::invalid(format!(
                "valuation support [{}, {}] is empty",
                self.low, self.high
            )));
        }
        if self.agent_scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("agent scale factors must be positive"));
        }
        if let Some(spec) = spec {
            if !self.agent_scale.is_empty() && self.agent_scale.len() != spec.n_agents {
                return Err(Error::invalid(format!(
                    "{} scale factors for {} agents",
                    self.agent_scale.len(),
                    spec.n_agents
                )));
            }
        }
        Ok(())
    }

    pub fn scale(&self, agent: usize) -> f64 {
        self.agent_scale.get(agent).copied().unwrap_or(1.0)
    }

    /// Support `[low, high]` of `agent`'s values after scaling.
    pub fn support(&self, agent: usize) -> (f64, f64) {
        let s = self.scale(agent);
        (self.low * s, self.high * s)
    }

    /// Midpoint of `agent`'s support.
    pub fn midpoint(&self, agent: usize) -> f64 {
        let (lo, hi) = self.support(agent);
        0.5 * (lo + hi)
    }
}

/// `count` bid profiles stored as a `[count, n_agents, m_items]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct BidBatch {
    pub values: Tensor,
    pub seed: u64,
}

impl BidBatch {
    pub fn new(values: Tensor, seed: u64) -> Result<Self> {
        if values.ndim() != 3 {
            return Err(Error::shape(
                "bid_batch",
                format!("expected [L, n, m], got {:?}", values.shape()),
            ));
        }
        Ok(BidBatch { values, seed })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_agents(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn m_items(&self) -> usize {
        self.values.shape()[2]
    }

    /// Profile `index` as an `n x m` slice, row-major.
    pub fn profile(&self, index: usize) -> &[f64] {
        let w = self.n_agents() * self.m_items();
        &self.values.data()[index * w..(index + 1) * w]
    }

    /// Contiguous sub-batch `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> BidBatch {
        let w = self.n_agents() * self.m_items();
        let data = self.values.data()[start * w..(start + len) * w].to_vec();
        BidBatch {
            values: Tensor::new(vec![len, self.n_agents(), self.m_items()], data)
                .expect("slice within batch"),
            seed: self.seed,
        }
    }

    /// Sub-batch made of the given profile indices, in order.
    pub fn gather(&self, indices: &[usize]) -> BidBatch {
        let mut data = Vec::with_capacity(indices.len() * self.n_agents() * self.m_items());
        for &i in indices {
            data.extend_from_slice(self.profile(i));
        }
        BidBatch {
            values: Tensor::new(vec![indices.len(), self.n_agents(), self.m_items()], data)
                .expect("gathered batch"),
            seed: self.seed,
        }
    }

    /// Writes `sample,agent,item,value` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["sample", "agent", "item", "value"])?;
        let (n, m) = (self.n_agents(), self.m_items());
        for l in 0..self.len() {
            for i in 0..n {
                for j in 0..m {
                    let v = self.values.data()[(l * n + i) * m + j];
                    w.write_record(&[l.to_string(), i.to_string(), j.to_string(), fmt_f64(v)])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let (shape, data) = read_indexed_csv(reader, "bid csv", "value")?;
        BidBatch::new(Tensor::new(shape.to_vec(), data)?, 0)
    }
}

/// Formats a float so that parsing it back yields the identical bits.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Reads `sample,agent,item,<value>` rows covering a dense `[L, n, m]` grid.
pub(crate) fn read_indexed_csv<R: Read>(
    reader: R,
    what: &'static str,
    value_col: &str,
) -> Result<([usize; 3], Vec<f64>)> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let expected = ["sample", "agent", "item", value_col];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Parse {
            what,
            line: 1,
            detail: format!("header must be {}", expected.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let parse_idx = |k: usize| -> Result<usize> {
            rec.get(k).and_then(|s| s.trim().parse().ok()).ok_or(Error::Parse {
                what,
                line,
                detail: format!("column {} is not a non-negative integer", expected[k]),
            })
        };
        let (l, i, j) = (parse_idx(0)?, parse_idx(1)?, parse_idx(2)?);
        let v: f64 = rec
            .get(3)
            .and_then(|s| s.trim().parse().ok())
            .filter(|v: &f64| v.is_finite())
            .ok_or(Error::Parse {
                what,
                line,
                detail: format!("column {value_col} is not a finite number"),
            })?;
        rows.push((line, l, i, j, v));
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            what,
            line: 1,
            detail: "no rows".into(),
        });
    }
    let dims = [
        rows.iter().map(|r| r.1).max().unwrap() + 1,
        rows.iter().map(|r| r.2).max().unwrap() + 1,
        rows.iter().map(|r| r.3).max().unwrap() + 1,
    ];
    let total = dims[0] * dims[1] * dims[2];
    let mut data = vec![f64::NAN; total];
    for (line, l, i, j, v) in rows.iter().copied() {
        let off = (l * dims[1] + i) * dims[2] + j;
        if !data[off].is_nan() {
            return Err(Error::Parse {
                what,
                line,
                detail: format!("duplicate entry ({l},{i},{j})"),
            });
        }
        data[off] = v;
    }
    if rows.len() != total {
        return Err(Error::Parse {
            what,
            line: rows.last().map(|r| r.0).unwrap_or(0),
            detail: format!("expected {total} rows for a dense {dims:?} grid, got {}", rows.len()),
        });
    }
    Ok((dims, data))
}

/// Draws `count` i.i.d. bid profiles under `seed`.
pub fn sample_bids(
    spec: &AuctionSpec,
    model: &ValuationModel,
    count: usize,
    seed: u64,
) -> Result<BidBatch> {
    if count == 0 {
        return Err(Error::invalid("sample_bids: count must be >= 1"));
    }
    model.validate(Some(spec))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m) = (spec.n_agents, spec.m_items);
    let mut data = Vec::with_capacity(count * n * m);
    for _ in 0..count {
        for i in 0..n {
            let (lo, hi) = model.support(i);
            for _ in 0..m {
                data.push(lo + (hi - lo) * rng.random::<f64>());
            }
        }
    }
    BidBatch::new(Tensor::from_parts(vec![count, n, m], data), seed)
}

/// `u_i = sum_j v_ij z_ij - p_i` for a single profile.
pub fn utility(values: &Tensor, allocation: &Tensor, payments: &[f64]) -> Result<Vec<f64>> {
    if values.ndim() != 2 || values.shape() != allocation.shape() || payments.len() != values.shape()[0] {
        return Err(Error::shape(
            "utility",
            format!(
                "values {:?}, allocation {:?}, payments {}",
                values.shape(),
                allocation.shape(),
                payments.len()
            ),
        ));
    }
    let m = values.shape()[1];
    Ok(payments
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let row = i * m..(i + 1) * m;
            values.data()[row.clone()]
                .iter()
                .zip(&allocation.data()[row])
                .map(|(v, z)| v * z)
                .sum::<f64>()
                - p
        })
        .collect())
}

/// Mean over profiles of the total payment, from a `[L, n]` payment tensor.
pub fn revenue(payments: &Tensor) -> Result<f64> {
    if payments.ndim() != 2 {
        return Err(Error::shape("revenue", format!("expected [L, n], got {:?}", payments.shape())));
    }
    let batch = payments.shape()[0];
    if batch == 0 {
        return Err(Error::invalid("revenue of an empty batch"));
    }
    Ok(payments.sum() / batch as f64)
}

/// Largest amount by which an `n x m` allocation exceeds its demand
/// constraints (0 when feasible).
///
/// Every item is allocated at most once in expectation (column sums <= 1).
/// Unit-demand additionally bounds each agent to one item (row sums <= 1).
pub fn check_feasibility(allocation: &Tensor, demand: DemandKind) -> f64 {
    let (n, m) = (allocation.shape()[0], allocation.shape()[1]);
    let z = allocation.data();
    let mut worst: f64 = 0.0;
    for j in 0..m {
        let col: f64 = (0..n).map(|i| z[i * m + j]).sum();
        worst = worst.max(col - 1.0);
    }
    if demand == DemandKind::UnitDemand {
        for i in 0..n {
            let row: f64 = z[i * m..(i + 1) * m].iter().sum();
            worst = worst.max(row - 1.0);
        }
    }
    worst.max(0.0)
}

/// Outcome of an independent second-price auction with a reserve on every
/// item: the allocation `[L, n, m]` and each profile's total revenue.
/// Ties go to the lowest-indexed bidder.
pub fn itemwise_myerson(bids: &BidBatch, reserve: &[f64]) -> Result<(Tensor, Vec<f64>)> {
    let (n, m) = (bids.n_agents(), bids.m_items());
    if reserve.len() != m {
        return Err(Error::shape(
            "itemwise_myerson",
            format!("{} reserves for {m} items", reserve.len()),
        ));
    }
    if bids.is_empty() {
        return Err(Error::invalid("itemwise_myerson on an empty batch"));
    }
    let mut alloc = vec![0.0; bids.len() * n * m];
    let mut revenue = Vec::with_capacity(bids.len());
    for l in 0..bids.len() {
        let b = bids.profile(l);
        let mut total = 0.0;
        for (j, &r) in reserve.iter().enumerate() {
            let mut winner = 0;
            let mut best = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for i in 0..n {
                let v = b[i * m + j];
                if v > best {
                    second = best;
                    best = v;
                    winner = i;
                } else if v > second {
                    second = v;
                }
            }
            if best >= r {
                total += second.max(r);
                alloc[(l * n + winner) * m + j] = 1.0;
            }
        }
        revenue.push(total);
    }
    Ok((Tensor::from_parts(vec![bids.len(), n, m], alloc), revenue))
}

/// Mean revenue of [`itemwise_myerson`].
pub fn itemwise_myerson_revenue(bids: &BidBatch, reserve: &[f64]) -> Result<f64> {
    let (_, revenue) = itemwise_myerson(bids, reserve)?;
    Ok(revenue.iter().sum::<f64>() / revenue.len() as f64)
}
