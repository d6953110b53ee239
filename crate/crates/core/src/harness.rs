//! Experiment configuration, results tables and the commands run by the
//! `prefnet` binary.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::auction::{fmt_f64, itemwise_myerson, sample_bids, AuctionSpec, BidBatch, DemandKind, ValuationModel};
use crate::autodiff::Tensor;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::preference::{
    allocation_similarity, build_labels, pca, probit_flip, read_allocations_csv, LabeledAllocationSet,
    PreferenceFunction,
};
use crate::trainer::{
    derive_seed, evaluate, initial_exemplars, test_bids, train, validate_select, Adversary, Checkpoint,
    EpochReport, Metrics, Problem, TrainConfig, TruthSource,
};

/// Seed streams for harness-only randomness, disjoint from the trainer's.
mod stream {
    pub const LABEL: u64 = 101;
    pub const NOISE: u64 = 102;
    pub const COMPARE: u64 = 103;
}

pub const RESULTS_FILE: &str = "results.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const RESULTS_HEADER: [&str; 6] = ["setting", "pca", "regret_mean", "regret_std", "payment_mean", "payment_std"];
pub const METRICS_HEADER: [&str; 8] = [
    "epoch",
    "pca",
    "regret_mean",
    "regret_std",
    "payment_mean",
    "payment_std",
    "lambda_r",
    "rho_r",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

impl Preset {
    pub fn train_config(self) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(),
            Preset::Paper => TrainConfig::paper(),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::invalid(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }
}

/// Two-coordinate allocation slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotOptions {
    pub resolution: usize,
    /// `(agent, item)` bid varied along the horizontal axis.
    pub x: [usize; 2],
    /// `(agent, item)` bid on the vertical axis; `(0, 1)` or `(1, 0)` when unset.
    pub y: Option<[usize; 2]>,
    /// Agent whose allocation probabilities are drawn.
    pub agent: usize,
    /// Flattened `n*m` profile for the pinned bids; support midpoints when empty.
    pub pin: Vec<f64>,
}

impl Default for PlotOptions {
    fn default() -> Self {
        PlotOptions {
            resolution: 21,
            x: [0, 0],
            y: None,
            agent: 0,
            pin: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareOptions {
    pub samples: usize,
    pub bins: usize,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            samples: 20_000,
            bins: 20,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineOptions {
    /// Per-item reserve prices; `max(low, high / 2)` when empty.
    pub reserve: Vec<f64>,
}

/// Everything one experiment needs. Parsed from TOML; every field defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    /// Setting name in results tables; `"2x2 a"`-style when unset.
    pub label: Option<String>,
    pub out_dir: PathBuf,
    pub auction: AuctionSpec,
    pub valuation: ValuationModel,
    pub preference: PreferenceFunction,
    pub train: TrainConfig,
    pub plot: PlotOptions,
    pub compare: CompareOptions,
    pub baseline: BaselineOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::preset(Preset::Desk)
    }
}

fn config_error(path: &Path, detail: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        ExperimentConfig {
            preset,
            label: None,
            out_dir: PathBuf::from("runs/default"),
            auction: AuctionSpec::default(),
            valuation: ValuationModel::default(),
            preference: PreferenceFunction::default(),
            train: preset.train_config(),
            plot: PlotOptions::default(),
            compare: CompareOptions::default(),
            baseline: BaselineOptions::default(),
        }
    }

    /// Parses a config. Training keys absent from the file come from the
    /// preset (`preset_override` wins over the file's `preset` key).
    pub fn from_toml(text: &str, path: &Path, preset_override: Option<Preset>) -> Result<Self> {
        let parsed: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            match e.span() {
                Some(span) => config_error(path, format!("line {}: {msg}", line_of(text, span.start))),
                None => config_error(path, msg),
            }
        })?;
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| config_error(path, e.to_string()))?;
        let preset = preset_override.unwrap_or(parsed.preset);

        let mut train = toml::Table::try_from(preset.train_config()).map_err(|e| config_error(path, e.to_string()))?;
        if let Some(toml::Value::Table(user)) = table.get("train") {
            for (k, v) in user {
                train.insert(k.clone(), v.clone());
            }
        }
        let train: TrainConfig = toml::Value::Table(train)
            .try_into()
            .map_err(|e: toml::de::Error| config_error(path, format!("[train]: {}", e.message())))?;

        let cfg = ExperimentConfig {
            preset,
            train,
            ..parsed
        };
        cfg.validate().map_err(|e| config_error(path, e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset_override: Option<Preset>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_error(path, e.to_string()))?;
        Self::from_toml(&text, path, preset_override)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("config serialization: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        AuctionSpec::new(self.auction.n_agents, self.auction.m_items, self.auction.demand)?;
        self.valuation.validate(Some(&self.auction))?;
        self.preference.validate(&self.auction)?;
        self.train.validate()?;
        if self.compare.samples == 0 || self.compare.bins == 0 {
            return Err(Error::invalid("compare.samples and compare.bins must be positive"));
        }
        if !self.baseline.reserve.is_empty() && self.baseline.reserve.len() != self.auction.m_items {
            return Err(Error::invalid(format!(
                "baseline.reserve has {} entries for {} items",
                self.baseline.reserve.len(),
                self.auction.m_items
            )));
        }
        if !self.plot.pin.is_empty() && self.plot.pin.len() != self.auction.width() {
            return Err(Error::invalid(format!(
                "plot.pin has {} entries, expected {}",
                self.plot.pin.len(),
                self.auction.width()
            )));
        }
        Ok(())
    }

    pub fn setting_label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.auction.label())
    }

    pub fn problem(&self) -> Problem {
        Problem {
            spec: self.auction,
            valuation: self.valuation.clone(),
            function: self.preference.clone(),
        }
    }

    /// Ground truth for accuracy: the function itself, or the seeded
    /// exemplar set for mixtures.
    pub fn truth(&self) -> Result<TruthSource> {
        match &self.preference {
            PreferenceFunction::Mixture { .. } => {
                let (clean, _, _) = initial_exemplars(&self.problem(), &self.train)?;
                Ok(TruthSource::Exemplars(clean))
            }
            f => TruthSource::known(f, &self.auction, &self.train),
        }
    }
}

/// Process exit status for an error: 2 for configuration and input
/// problems, 3 for numerical aborts, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Parse { .. } | Error::InvalidArgument(_) => 2,
        Error::Numerical { .. } => 3,
        _ => 1,
    }
}

/// One line of a results table. `pca` is a fraction in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsRow {
    pub setting: String,
    pub pca: f64,
    pub regret_mean: f64,
    pub regret_std: f64,
    pub payment_mean: f64,
    pub payment_std: f64,
}

impl ResultsRow {
    pub fn from_metrics(setting: impl Into<String>, m: &Metrics) -> Self {
        ResultsRow {
            setting: setting.into(),
            pca: m.pca,
            regret_mean: m.regret_mean,
            regret_std: m.regret_std,
            payment_mean: m.payment_mean,
            payment_std: m.payment_std,
        }
    }

    fn record(&self) -> [String; 6] {
        [
            self.setting.clone(),
            fmt_f64(self.pca),
            fmt_f64(self.regret_mean),
            fmt_f64(self.regret_std),
            fmt_f64(self.payment_mean),
            fmt_f64(self.payment_std),
        ]
    }
}

/// Writes `rows` to a results table, appending when the file already
/// exists with the documented header.
pub fn write_results(path: &Path, rows: &[ResultsRow], append: bool) -> Result<()> {
    let existing = append && path.exists();
    if existing {
        let first = fs::read_to_string(path)?;
        if first.lines().next() != Some(RESULTS_HEADER.join(",").as_str()) {
            return Err(Error::Parse {
                what: "results csv",
                line: 1,
                detail: format!("header must be {}", RESULTS_HEADER.join(",")),
            });
        }
    }
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(existing)
        .truncate(!existing)
        .open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if !existing {
        w.write_record(RESULTS_HEADER)?;
    }
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != RESULTS_HEADER {
        return Err(Error::Parse {
            what: "results csv",
            line: 1,
            detail: format!("header must be {}", RESULTS_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |k: usize| -> Result<f64> {
            rec.get(k).and_then(|s| s.parse().ok()).ok_or(Error::Parse {
                what: "results csv",
                line,
                detail: format!("column {} is not a number", RESULTS_HEADER[k]),
            })
        };
        rows.push(ResultsRow {
            setting: rec.get(0).unwrap_or_default().to_string(),
            pca: num(1)?,
            regret_mean: num(2)?,
            regret_std: num(3)?,
            payment_mean: num(4)?,
            payment_std: num(5)?,
        });
    }
    Ok(rows)
}

/// Outcome of [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub best: Checkpoint,
    pub validation: Vec<Metrics>,
    pub test: Metrics,
    pub row: ResultsRow,
    pub flip_fraction: Option<f64>,
    pub mlp_accuracy: Option<f64>,
}

fn metrics_record(r: &EpochReport) -> Vec<String> {
    let m = &r.metrics;
    vec![
        r.epoch.to_string(),
        fmt_f64(m.pca),
        fmt_f64(m.regret_mean),
        fmt_f64(m.regret_std),
        fmt_f64(m.payment_mean),
        fmt_f64(m.payment_std),
        fmt_f64(r.lambda_r),
        fmt_f64(r.rho_r),
    ]
}

/// Trains, selects the best checkpoint on validation, evaluates it on a
/// fresh test batch and writes `config.toml`, `metrics.csv`, `best.ckpt`
/// and `results.csv` under the output directory.
///
/// On a numerical abort the artifacts of the last finite checkpoint are
/// still written before the error is returned.
pub fn cmd_train(cfg: &ExperimentConfig, mut progress: impl FnMut(&EpochReport)) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;

    let mut log = csv::Writer::from_path(out.join(METRICS_FILE))?;
    log.write_record(METRICS_HEADER)?;
    let mut log_error = None;
    let run = train(&cfg.problem(), &cfg.train, |r| {
        progress(r);
        if log_error.is_none() {
            log_error = log.write_record(metrics_record(r)).and_then(|_| Ok(log.flush()?)).err();
        }
    })?;
    if let Some(e) = log_error {
        return Err(e.into());
    }

    let best = validate_select(&run.checkpoints, cfg.train.selection_weights)?;
    let best = run.checkpoints[best].clone();
    checkpoint::save(&best, &out.join(BEST_CHECKPOINT))?;
    let bids = test_bids(&cfg.auction, &cfg.valuation, &cfg.train)?;
    let test = evaluate(
        &best.net,
        &bids,
        &cfg.valuation,
        run.truth.as_ground_truth(),
        &Adversary::test(&cfg.train),
    )?;
    let row = ResultsRow::from_metrics(cfg.setting_label(), &test);
    write_results(&out.join(RESULTS_FILE), std::slice::from_ref(&row), false)?;
    if let Some(e) = run.abort {
        return Err(e);
    }
    Ok(TrainSummary {
        best,
        validation: run.checkpoints.iter().map(|c| c.metrics).collect(),
        test,
        row,
        flip_fraction: run.flip_fraction,
        mlp_accuracy: run.mlp.map(|t| t.train_accuracy),
    })
}

fn load_matching(path: &Path, spec: &AuctionSpec) -> Result<Checkpoint> {
    let ck = checkpoint::load(path)?;
    if ck.net.spec != *spec {
        return Err(Error::invalid(format!(
            "{} holds a {} model, config describes {}",
            path.display(),
            ck.net.spec.label(),
            spec.label()
        )));
    }
    Ok(ck)
}

/// Evaluates a checkpoint on the configured test batch and appends the row
/// to `results.csv`.
pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint_path: &Path) -> Result<ResultsRow> {
    cfg.validate()?;
    let ck = load_matching(checkpoint_path, &cfg.auction)?;
    let truth = cfg.truth()?;
    let bids = test_bids(&cfg.auction, &cfg.valuation, &cfg.train)?;
    let m = evaluate(
        &ck.net,
        &bids,
        &cfg.valuation,
        truth.as_ground_truth(),
        &Adversary::test(&cfg.train),
    )?;
    let row = ResultsRow::from_metrics(cfg.setting_label(), &m);
    fs::create_dir_all(&cfg.out_dir)?;
    write_results(&cfg.out_dir.join(RESULTS_FILE), std::slice::from_ref(&row), true)?;
    Ok(row)
}

/// Labels the allocations in `input` by pairwise plurality under the
/// configured function, applies the configured probit noise if any, and
/// writes `labeled.csv` plus the `labels.csv` sidecar.
pub fn cmd_label(cfg: &ExperimentConfig, input: &Path) -> Result<LabeledAllocationSet> {
    cfg.validate()?;
    let alloc = read_allocations_csv(File::open(input)?)?;
    let seed = cfg.train.seed;
    let mut set = build_labels(
        &alloc,
        &cfg.preference,
        cfg.train.n_comparisons,
        derive_seed(seed, stream::LABEL),
    )?;
    if let Some(noise) = &cfg.train.noise {
        let model = noise.model(&set.scores)?;
        set.labels = probit_flip(&set.labels, &set.scores, &model, derive_seed(seed, stream::NOISE))?;
        set.provenance = format!("{} + probit noise", set.provenance);
    }
    fs::create_dir_all(&cfg.out_dir)?;
    set.write_csv(
        File::create(cfg.out_dir.join("labeled.csv"))?,
        File::create(cfg.out_dir.join("labels.csv"))?,
    )?;
    Ok(set)
}

/// Allocation probabilities of one agent over a grid of two bid coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotGrid {
    pub resolution: usize,
    pub m_items: usize,
    /// Grid coordinates along each axis.
    pub axis_x: Vec<f64>,
    pub axis_y: Vec<f64>,
    /// `z[(ix * resolution + iy) * m_items + item]`.
    pub z: Vec<f64>,
}

impl PlotGrid {
    pub fn at(&self, ix: usize, iy: usize, item: usize) -> f64 {
        self.z[(ix * self.resolution + iy) * self.m_items + item]
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["b1", "b2", "item", "z"])?;
        for (ix, bx) in self.axis_x.iter().enumerate() {
            for (iy, by) in self.axis_y.iter().enumerate() {
                for item in 0..self.m_items {
                    w.write_record([fmt_f64(*bx), fmt_f64(*by), item.to_string(), fmt_f64(self.at(ix, iy, item))])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Heatmap of one item, white at 0 to dark blue at 1, `b2` increasing upward.
    pub fn svg(&self, item: usize, title: &str) -> String {
        const CELL: usize = 16;
        const MARGIN: usize = 40;
        let side = CELL * self.resolution;
        let (w, h) = (side + 2 * MARGIN, side + 2 * MARGIN);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{MARGIN}" y="24" font-family="sans-serif" font-size="14">{title}</text>"#
        );
        for ix in 0..self.resolution {
            for iy in 0..self.resolution {
                let z = self.at(ix, iy, item).clamp(0.0, 1.0);
                let c = |lo: f64, hi: f64| (lo + (hi - lo) * z).round() as u8;
                let (r, g, b) = (c(255.0, 8.0), c(255.0, 48.0), c(255.0, 107.0));
                let x = MARGIN + ix * CELL;
                let y = MARGIN + (self.resolution - 1 - iy) * CELL;
                let _ = writeln!(
                    s,
                    r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="#{r:02x}{g:02x}{b:02x}"/>"##
                );
            }
        }
        let (x0, x1) = (self.axis_x[0], self.axis_x[self.resolution - 1]);
        let (y0, y1) = (self.axis_y[0], self.axis_y[self.resolution - 1]);
        let base = MARGIN + side;
        let _ = writeln!(
            s,
            r#"<text x="{MARGIN}" y="{}" font-family="sans-serif" font-size="11">b1 {x0} .. {x1}</text>"#,
            base + 16
        );
        let _ = writeln!(
            s,
            r#"<text x="4" y="{}" font-family="sans-serif" font-size="11" transform="rotate(-90 4 {})">b2 {y0} .. {y1}</text>"#,
            base,
            base
        );
        s.push_str("</svg>\n");
        s
    }
}

/// Evaluates `net`'s allocation for `opts.agent` over the grid.
pub fn allocation_grid(ck: &Checkpoint, valuation: &ValuationModel, opts: &PlotOptions) -> Result<PlotGrid> {
    let spec = ck.net.spec;
    let (n, m) = (spec.n_agents, spec.m_items);
    if opts.resolution < 2 {
        return Err(Error::invalid(format!("plot resolution must be >= 2, got {}", opts.resolution)));
    }
    let y = opts.y.unwrap_or(if m >= 2 { [0, 1] } else { [1, 0] });
    for c in [opts.x, y] {
        if c[0] >= n || c[1] >= m {
            return Err(Error::invalid(format!("plot coordinate {c:?} outside {}", spec.label())));
        }
    }
    if opts.x == y {
        return Err(Error::invalid("plot axes must be two different bid coordinates"));
    }
    if opts.agent >= n {
        return Err(Error::invalid(format!("plot agent {} outside {}", opts.agent, spec.label())));
    }
    let pin: Vec<f64> = match opts.pin.is_empty() {
        true => (0..n).flat_map(|i| std::iter::repeat_n(valuation.midpoint(i), m)).collect(),
        false if opts.pin.len() == spec.width() => opts.pin.clone(),
        false => return Err(Error::invalid("plot.pin does not match the auction size")),
    };
    let axis = |agent: usize| -> Vec<f64> {
        let (lo, hi) = valuation.support(agent);
        let r = opts.resolution;
        (0..r).map(|k| lo + (hi - lo) * k as f64 / (r - 1) as f64).collect()
    };
    let (axis_x, axis_y) = (axis(opts.x[0]), axis(y[0]));
    let r = opts.resolution;
    let mut data = Vec::with_capacity(r * r * spec.width());
    for &bx in &axis_x {
        for &by in &axis_y {
            let mut p = pin.clone();
            p[opts.x[0] * m + opts.x[1]] = bx;
            p[y[0] * m + y[1]] = by;
            data.extend(p);
        }
    }
    let bids = BidBatch::new(Tensor::new(vec![r * r, n, m], data)?, 0)?;
    let alloc = ck.net.alloc_forward(&bids)?;
    let z = alloc
        .data()
        .chunks_exact(n * m)
        .flat_map(|profile| profile[opts.agent * m..(opts.agent + 1) * m].to_vec())
        .collect();
    Ok(PlotGrid {
        resolution: r,
        m_items: m,
        axis_x,
        axis_y,
        z,
    })
}

/// Writes `plot.csv` and one `plot_item<j>.svg` per item.
pub fn cmd_plot(cfg: &ExperimentConfig, checkpoint_path: &Path) -> Result<PlotGrid> {
    cfg.validate()?;
    let ck = load_matching(checkpoint_path, &cfg.auction)?;
    let grid = allocation_grid(&ck, &cfg.valuation, &cfg.plot)?;
    fs::create_dir_all(&cfg.out_dir)?;
    grid.write_csv(File::create(cfg.out_dir.join("plot.csv"))?)?;
    for item in 0..grid.m_items {
        let title = format!("{} agent {} item {}", cfg.setting_label(), cfg.plot.agent, item);
        fs::write(cfg.out_dir.join(format!("plot_item{item}.svg")), grid.svg(item, &title))?;
    }
    Ok(grid)
}

/// Equal-width bins over `[min, max]` of the values.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 || values.is_empty() {
            return Err(Error::invalid("histogram needs values and at least one bin"));
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|k| if k == bins { hi } else { lo + width * k as f64 }).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let k = if width > 0.0 { ((v - lo) / width) as usize } else { 0 };
            counts[k.min(bins - 1)] += 1;
        }
        Ok(Histogram { edges, counts })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["bin_low", "bin_high", "count"])?;
        for (k, c) in self.counts.iter().enumerate() {
            w.write_record([fmt_f64(self.edges[k]), fmt_f64(self.edges[k + 1]), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    /// Mean per-profile L2 distance between the two allocations.
    pub distance: f64,
    /// Preference scores of the first model's allocations.
    pub histogram: Histogram,
}

/// Compares two checkpoints on a shared seeded bid sample.
pub fn compare_checkpoints(cfg: &ExperimentConfig, a: &Checkpoint, b: &Checkpoint) -> Result<CompareReport> {
    if a.net.spec != b.net.spec {
        return Err(Error::invalid(format!(
            "cannot compare a {} model with a {} model",
            a.net.spec.label(),
            b.net.spec.label()
        )));
    }
    let bids = sample_bids(
        &a.net.spec,
        &cfg.valuation,
        cfg.compare.samples,
        derive_seed(cfg.train.seed, stream::COMPARE),
    )?;
    let za = a.net.alloc_forward(&bids)?;
    let zb = b.net.alloc_forward(&bids)?;
    let distance = allocation_similarity(&za, &zb)?;
    let scores = match (&cfg.preference, &a.mlp) {
        (PreferenceFunction::Mixture { .. }, Some(mlp)) => mlp.score(&za)?,
        (f, _) => f.scores(&za)?,
    };
    Ok(CompareReport {
        distance,
        histogram: Histogram::new(&scores, cfg.compare.bins)?,
    })
}

/// Writes `compare.csv` and `score_histogram.csv`.
pub fn cmd_compare(cfg: &ExperimentConfig, a_path: &Path, b_path: &Path) -> Result<CompareReport> {
    cfg.validate()?;
    let a = load_matching(a_path, &cfg.auction)?;
    let b = load_matching(b_path, &cfg.auction)?;
    let report = compare_checkpoints(cfg, &a, &b)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut w = csv::Writer::from_path(cfg.out_dir.join("compare.csv"))?;
    w.write_record(["checkpoint_a", "checkpoint_b", "samples", "distance"])?;
    w.write_record([
        a_path.display().to_string(),
        b_path.display().to_string(),
        cfg.compare.samples.to_string(),
        fmt_f64(report.distance),
    ])?;
    w.flush()?;
    report
        .histogram
        .write_csv(File::create(cfg.out_dir.join("score_histogram.csv"))?)?;
    Ok(report)
}

/// Itemwise Myerson row on the configured test batch, appended to
/// `results.csv`. Regret is zero since the mechanism is strategyproof.
pub fn cmd_baseline(cfg: &ExperimentConfig) -> Result<ResultsRow> {
    cfg.validate()?;
    if cfg.auction.demand == DemandKind::UnitDemand {
        return Err(Error::invalid("the itemwise Myerson baseline is only defined for additive bidders"));
    }
    let reserve = match cfg.baseline.reserve.is_empty() {
        true => {
            let r = cfg.valuation.low.max(cfg.valuation.high / 2.0);
            vec![r; cfg.auction.m_items]
        }
        false => cfg.baseline.reserve.clone(),
    };
    let bids = test_bids(&cfg.auction, &cfg.valuation, &cfg.train)?;
    let (alloc, revenue) = itemwise_myerson(&bids, &reserve)?;
    let truth = cfg.truth()?;
    let n = revenue.len() as f64;
    let mean = revenue.iter().sum::<f64>() / n;
    let std = (revenue.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let row = ResultsRow {
        setting: format!("{} myerson", cfg.setting_label()),
        pca: pca(&alloc, truth.as_ground_truth())?,
        regret_mean: 0.0,
        regret_std: 0.0,
        payment_mean: mean,
        payment_std: std,
    };
    fs::create_dir_all(&cfg.out_dir)?;
    write_results(&cfg.out_dir.join(RESULTS_FILE), std::slice::from_ref(&row), true)?;
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{Architecture, RegretNet};
    use crate::trainer::LagrangeState;

    fn tiny(out: &Path, spec: AuctionSpec) -> ExperimentConfig {
        let text = format!(
            r#"
out_dir = {out:?}
[auction]
n_agents = {}
m_items = {}
demand = "{}"
[train]
epochs = 2
regretnet_samples = 128
mlp_initial_samples = 200
cotrain_interval = 1
cotrain_samples = 32
validation_samples = 32
test_samples = 64
mlp_epochs = 1
cotrain_epochs = 1
misreport_steps = 3
test_misreport_steps = 3
test_restarts = 1
architecture = {{ hidden = [8, 8] }}
"#,
            spec.n_agents,
            spec.m_items,
            match spec.demand {
                DemandKind::Additive => "additive",
                DemandKind::UnitDemand => "unit_demand",
            }
        );
        ExperimentConfig::from_toml(&text, Path::new("tiny.toml"), None).unwrap()
    }

    #[test]
    fn defaults_and_presets() {
        let cfg = ExperimentConfig::from_toml("", Path::new("x"), None).unwrap();
        assert_eq!(cfg, ExperimentConfig::preset(Preset::Desk));
        let paper = ExperimentConfig::from_toml("preset = \"paper\"", Path::new("x"), None).unwrap();
        assert_eq!(paper.train, TrainConfig::paper());
        let forced = ExperimentConfig::from_toml("preset = \"paper\"", Path::new("x"), Some(Preset::Desk)).unwrap();
        assert_eq!(forced.train, TrainConfig::desk());
        let partial = ExperimentConfig::from_toml("[train]\nepochs = 3", Path::new("x"), Some(Preset::Paper)).unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.train.regretnet_samples, 160_000);
        assert_eq!(cfg.setting_label(), "2x2 a");
    }

    #[test]
    fn round_trip() {
        let text = r#"
label = "mix"
[auction]
n_agents = 3
m_items = 2
demand = "unit_demand"
[valuation]
low = 0.0
high = 2.0
agent_scale = [1.0, 0.5, 2.0]
[preference]
kind = "mixture"
parts = [
  { fraction = 0.25, function = { kind = "tvf", d = 0.1 } },
  { fraction = 0.75, function = { kind = "quota", t = 0.3 } },
]
[train]
preference_mode = "lagrangian"
noise = { k = 1.0, f = 0.1 }
pca_threshold = -0.5
[plot]
y = [1, 0]
"#;
        let cfg = ExperimentConfig::from_toml(text, Path::new("x"), None).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap(), Path::new("x"), None).unwrap();
        assert_eq!(cfg, again);
        let default = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&default.to_toml().unwrap(), Path::new("x"), None).unwrap();
        assert_eq!(default, back);
    }

    #[test]
    fn unknown_keys_are_located() {
        let err = ExperimentConfig::from_toml("[auction]\nn_agents = 2\nn_bidders = 3\n", Path::new("c.toml"), None)
            .unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config { .. }));
        assert!(msg.contains("line 3"), "{msg}");
        let err = ExperimentConfig::from_toml("[train]\nepochs = \"many\"\n", Path::new("c.toml"), None).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = ExperimentConfig::from_toml("[train]\nbatch_size = 0\n", Path::new("c.toml"), None).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        let bad_syntax = ExperimentConfig::from_toml("a = [", Path::new("c.toml"), None).unwrap_err();
        assert_eq!(exit_code(&bad_syntax), 2);
    }

    #[test]
    fn exit_codes() {
        let num = Error::Numerical {
            epoch: 1,
            iteration: 2,
            detail: String::new(),
        };
        assert_eq!(exit_code(&num), 3);
        assert_eq!(exit_code(&Error::Checkpoint("x".into())), 1);
    }

    #[test]
    fn results_table_round_trip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(RESULTS_FILE);
        let row = |s: &str, x: f64| ResultsRow {
            setting: s.into(),
            pca: x,
            regret_mean: x / 3.0,
            regret_std: 0.1,
            payment_mean: 0.87,
            payment_std: 0.32,
        };
        write_results(&path, &[row("2x2 a", 1.0)], false).unwrap();
        write_results(&path, &[row("2x2 a myerson", 0.7)], true).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("setting,pca,regret_mean,regret_std,payment_mean,payment_std\n"));
        assert_eq!(read_results(&path).unwrap(), vec![row("2x2 a", 1.0), row("2x2 a myerson", 0.7)]);
    }

    fn constant_checkpoint(spec: AuctionSpec) -> Checkpoint {
        let mut net = RegretNet::init(spec, Architecture::default(), 0).unwrap();
        let zeros = net.params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        net.set_params(zeros).unwrap();
        Checkpoint {
            epoch: 0,
            net,
            mlp: None,
            lagrange: LagrangeState::new(&TrainConfig::desk(), spec.n_agents),
            metrics: Metrics {
                pca: 0.0,
                regret_mean: 0.0,
                regret_std: 0.0,
                regret_max: 0.0,
                payment_mean: 0.0,
                payment_std: 0.0,
                payment_max: 0.0,
            },
            seed: 0,
        }
    }

    #[test]
    fn plot_grid_shape_and_constant_model() {
        let dir = tempfile::tempdir().unwrap();
        let spec = AuctionSpec::additive(2, 2);
        let mut cfg = tiny(dir.path(), spec);
        cfg.plot.resolution = 5;
        let path = dir.path().join("c.ckpt");
        checkpoint::save(&constant_checkpoint(spec), &path).unwrap();
        let grid = cmd_plot(&cfg, &path).unwrap();
        assert!(grid.z.iter().all(|&z| (z - 1.0 / 3.0).abs() < 1e-15));
        let csv = fs::read_to_string(dir.path().join("plot.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 5 * 5 * 2);
        assert!(csv.starts_with("b1,b2,item,z\n"));
        let svg = fs::read_to_string(dir.path().join("plot_item1.svg")).unwrap();
        assert_eq!(svg.matches("<rect").count(), 25);

        cfg.plot.resolution = 1;
        assert!(cmd_plot(&cfg, &path).is_err());
    }

    #[test]
    fn plot_varies_the_chosen_coordinates_only() {
        let spec = AuctionSpec::additive(2, 1);
        let ck = constant_checkpoint(spec);
        let opts = PlotOptions {
            resolution: 3,
            ..PlotOptions::default()
        };
        let grid = allocation_grid(&ck, &ValuationModel::default(), &opts).unwrap();
        assert_eq!(grid.axis_x, vec![0.0, 0.5, 1.0]);
        let same = PlotOptions {
            y: Some([0, 0]),
            ..opts
        };
        assert!(allocation_grid(&ck, &ValuationModel::default(), &same).is_err());
    }

    #[test]
    fn histogram_counts_every_value() {
        let v: Vec<f64> = (0..1000).map(|k| ((k * 37) % 101) as f64 / 7.0).collect();
        let h = Histogram::new(&v, 13).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 1000);
        assert_eq!(h.edges.len(), 14);
        let flat = Histogram::new(&[2.0; 5], 4).unwrap();
        assert_eq!(flat.counts, vec![5, 0, 0, 0]);
    }

    #[test]
    fn compare_is_zero_on_self_and_symmetric() {
        let dir = tempfile::tempdir().unwrap();
        let spec = AuctionSpec::additive(2, 2);
        let mut cfg = tiny(dir.path(), spec);
        cfg.compare.samples = 500;
        let a = constant_checkpoint(spec);
        let mut b = a.clone();
        b.net = RegretNet::init(spec, Architecture::default(), 5).unwrap();
        let pa = dir.path().join("a.ckpt");
        let pb = dir.path().join("b.ckpt");
        checkpoint::save(&a, &pa).unwrap();
        checkpoint::save(&b, &pb).unwrap();
        assert_eq!(cmd_compare(&cfg, &pa, &pa).unwrap().distance, 0.0);
        let ab = cmd_compare(&cfg, &pa, &pb).unwrap();
        let ba = cmd_compare(&cfg, &pb, &pa).unwrap();
        assert!(ab.distance > 0.0);
        assert_eq!(ab.distance, ba.distance);
        assert_eq!(ab.histogram.counts.iter().sum::<usize>(), 500);

        let other = constant_checkpoint(AuctionSpec::additive(2, 3));
        let po = dir.path().join("o.ckpt");
        checkpoint::save(&other, &po).unwrap();
        assert!(cmd_compare(&cfg, &pa, &po).is_err());
    }

    #[test]
    fn baseline_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path(), AuctionSpec::additive(2, 1));
        cfg.train.test_samples = 200_000;
        let row = cmd_baseline(&cfg).unwrap();
        // E[max(second, r) 1{first >= r}] for two U[0,1] bids, r = 1/2.
        assert!((row.payment_mean - 5.0 / 12.0).abs() < 0.005, "{row:?}");
        assert_eq!(cmd_baseline(&cfg).unwrap(), row);
        cfg.baseline.reserve = vec![0.0];
        let second_price = cmd_baseline(&cfg).unwrap();
        assert!((second_price.payment_mean - 1.0 / 3.0).abs() < 0.005);
        assert_eq!(read_results(&dir.path().join(RESULTS_FILE)).unwrap().len(), 3);

        let unit = tiny(dir.path(), AuctionSpec::unit_demand(2, 2));
        assert!(cmd_baseline(&unit).is_err());
    }

    fn write_uniform_pool(path: &Path, spec: &AuctionSpec, count: usize) {
        let pool = crate::preference::uniform_allocations(spec, count, 3).unwrap();
        crate::preference::write_allocations_csv(&pool, File::create(path).unwrap()).unwrap();
    }

    #[test]
    fn label_command() {
        let dir = tempfile::tempdir().unwrap();
        let spec = AuctionSpec::additive(2, 2);
        let input = dir.path().join("pool.csv");
        write_uniform_pool(&input, &spec, 4_000);
        let mut cfg = tiny(&dir.path().join("clean"), spec);
        let clean = cmd_label(&cfg, &input).unwrap();
        let frac = clean.positives() as f64 / clean.len() as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
        let back = LabeledAllocationSet::read_csv(
            File::open(dir.path().join("clean/labeled.csv")).unwrap(),
            File::open(dir.path().join("clean/labels.csv")).unwrap(),
        )
        .unwrap();
        assert_eq!(back.labels, clean.labels);
        assert_eq!(back.allocations, clean.allocations);

        cfg.out_dir = dir.path().join("quiet");
        cfg.train.noise = Some(crate::trainer::NoiseConfig {
            k: 0.0,
            f: 0.0,
            mu: None,
            sigma: None,
        });
        assert_eq!(cmd_label(&cfg, &input).unwrap().labels, clean.labels);

        fs::write(&input, "sample,agent,item,z\n0,0,0,oops\n").unwrap();
        let err = cmd_label(&cfg, &input).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn train_evaluate_smoke() {
        let dir = tempfile::tempdir().unwrap();
        // A single bidder has no preference structure to learn.
        let spec = AuctionSpec::additive(1, 1);
        let mut cfg = tiny(&dir.path().join("a"), spec);
        cfg.train.preference_mode = crate::trainer::PreferenceMode::None;
        let mut epochs = 0;
        let summary = cmd_train(&cfg, |_| epochs += 1).unwrap();
        assert_eq!(epochs, 3);
        for f in ["config.toml", METRICS_FILE, BEST_CHECKPOINT, RESULTS_FILE] {
            assert!(cfg.out_dir.join(f).exists(), "{f}");
        }
        let log = fs::read_to_string(cfg.out_dir.join(METRICS_FILE)).unwrap();
        assert_eq!(log.lines().next().unwrap(), METRICS_HEADER.join(","));
        assert_eq!(log.lines().count(), 4);
        assert_eq!(read_results(&cfg.out_dir.join(RESULTS_FILE)).unwrap(), vec![summary.row.clone()]);

        let ckpt = cfg.out_dir.join(BEST_CHECKPOINT);
        let first = cmd_evaluate(&cfg, &ckpt).unwrap();
        let second = cmd_evaluate(&cfg, &ckpt).unwrap();
        assert_eq!(first, second);
        assert_eq!(first, summary.row);
        let wrong = tiny(&dir.path().join("c"), AuctionSpec::additive(2, 2));
        assert!(cmd_evaluate(&wrong, &ckpt).is_err());
    }

    #[test]
    fn train_rerun_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(&dir.path().join("a"), AuctionSpec::additive(2, 2));
        let rerun = ExperimentConfig {
            out_dir: dir.path().join("b"),
            ..cfg.clone()
        };
        let summary = cmd_train(&cfg, |_| {}).unwrap();
        assert!(summary.mlp_accuracy.is_some());
        cmd_train(&rerun, |_| {}).unwrap();
        for f in [RESULTS_FILE, METRICS_FILE, BEST_CHECKPOINT] {
            assert_eq!(fs::read(cfg.out_dir.join(f)).unwrap(), fs::read(rerun.out_dir.join(f)).unwrap());
        }
    }
}
