//! The synthetic bin-assignment experiment: data, training, attack campaigns
//! and the tables they feed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, AttackMethod, AttackResult};
use crate::defense::DefenseConfig;
use crate::diffgraph::{cross_entropy, Activation, Adam, Arch, HeadKind, Network, Upstream};
use crate::error::{Error, Result};
use crate::farkas::{self, FarkasParams};
use crate::rng::SeedStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub dim: usize,
    pub bins: usize,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Standard-Gaussian features, each sample assigned to one of `bins` bins
/// uniformly at random.
pub fn gen_dataset(
    dim: usize,
    bins: usize,
    train_count: usize,
    test_count: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    if dim == 0 || bins == 0 {
        return Err(Error::invalid("dataset dimensions must be positive"));
    }
    let seeds = SeedStream::new(seed);
    let mut features = seeds.stream(1);
    let mut labels = seeds.stream(2);
    let mut draw = |count: usize| -> Vec<Sample> {
        (0..count)
            .map(|_| Sample {
                features: features.normal_vec(dim),
                label: labels.below(bins),
            })
            .collect()
    };
    let train = draw(train_count);
    let test = draw(test_count);
    Ok(SyntheticDataset {
        dim,
        bins,
        seed,
        train,
        test,
    })
}

impl SyntheticDataset {
    /// One line per sample: `split,label,x0,…,x{d−1}` after a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,label");
        for i in 0..self.dim {
            out.push_str(&format!(",x{i}"));
        }
        out.push('\n');
        for (split, samples) in [("train", &self.train), ("test", &self.test)] {
            for s in samples {
                out.push_str(split);
                out.push_str(&format!(",{}", s.label));
                for x in &s.features {
                    out.push_str(&format!(",{x:?}"));
                }
                out.push('\n');
            }
        }
        out
    }

    /// Parses [`SyntheticDataset::to_csv`] output. `bins` and `seed` are not
    /// stored in the CSV and must be supplied.
    pub fn from_csv(text: &str, bins: usize, seed: u64) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::invalid("empty dataset"))?;
        let dim = header.split(',').count().saturating_sub(2);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (no, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::invalid(format!("dataset line {}: {what}", no + 2));
            let mut fields = line.split(',');
            let split = fields.next().ok_or_else(|| bad("missing split"))?;
            let label: usize = fields
                .next()
                .and_then(|f| f.trim().parse().ok())
                .ok_or_else(|| bad("bad label"))?;
            if label >= bins {
                return Err(bad("label out of range"));
            }
            let features = fields
                .map(|f| f.trim().parse::<f64>().map_err(|_| bad("bad feature")))
                .collect::<Result<Vec<_>>>()?;
            if features.len() != dim || features.iter().any(|x| !x.is_finite()) {
                return Err(bad("feature count or value"));
            }
            let sample = Sample { features, label };
            match split {
                "train" => train.push(sample),
                "test" => test.push(sample),
                _ => return Err(bad("split must be train or test")),
            }
        }
        Ok(Self {
            dim,
            bins,
            seed,
            train,
            test,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub activation: Activation,
    pub hidden: usize,
    /// Constraint rows of the QP layer.
    pub m: usize,
    pub q_scale: f64,
    pub defense: DefenseConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 1e-3,
            activation: Activation::Relu,
            hidden: 64,
            m: 8,
            q_scale: 0.1,
            defense: DefenseConfig::off(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub config: TrainConfig,
    pub dataset_seed: u64,
    /// Mean training cross-entropy at the start of each epoch; `None` for an
    /// epoch skipped because some forward pass was non-finite.
    pub train_loss: Vec<Option<f64>>,
    pub initial_train_loss: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub final_test_loss: Option<f64>,
    /// Epochs skipped for non-finite forward passes.
    pub nonfinite_epochs: Vec<usize>,
}

impl TrainRecord {
    pub fn nonfinite_events(&self) -> usize {
        self.nonfinite_epochs.len()
    }
}

/// Mean cross-entropy over `samples`, or `None` if any forward pass fails.
pub fn mean_loss(net: &Network, samples: &[Sample]) -> Result<Option<f64>> {
    let mut total = 0.0;
    for s in samples {
        let fwd = net.forward(&s.features)?;
        if fwd.nonfinite {
            return Ok(None);
        }
        total += cross_entropy(&fwd.probs, s.label).0;
    }
    Ok(Some(total / samples.len().max(1) as f64))
}

/// Full-batch Adam on mean cross-entropy. An epoch in which any sample's
/// forward pass is non-finite makes no update and is recorded.
pub fn train(data: &SyntheticDataset, cfg: &TrainConfig) -> Result<(Network, TrainRecord)> {
    if data.train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if !(cfg.lr >= 0.0) {
        return Err(Error::invalid("learning rate must be non-negative"));
    }
    let arch = Arch {
        activation: cfg.activation,
        q_scale: cfg.q_scale,
        ..Arch::synthetic(data.dim, cfg.hidden, cfg.m, data.bins)
    };
    let mut net = Network::init(arch, cfg.seed, cfg.defense)?;
    let mut opt = Adam::new(net.param_count(), cfg.lr);
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut nonfinite_epochs = Vec::new();
    let count = data.train.len() as f64;

    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut grad = vec![0.0; net.param_count()];
        let mut ok = true;
        for s in &data.train {
            let fwd = net.forward(&s.features)?;
            if fwd.nonfinite {
                ok = false;
                break;
            }
            let (loss, g_logits) = cross_entropy(&fwd.probs, s.label);
            let g = net.backward(&fwd, Upstream::QpOut(g_logits))?.flat();
            if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
                ok = false;
                break;
            }
            total += loss;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b / count);
        }
        if !ok {
            train_loss.push(None);
            nonfinite_epochs.push(epoch);
            continue;
        }
        train_loss.push(Some(total / count));
        let mut p = net.params();
        opt.step(&mut p, &grad);
        net.set_params(&p);
    }

    let final_train_loss = mean_loss(&net, &data.train)?;
    let final_test_loss = if data.test.is_empty() {
        None
    } else {
        mean_loss(&net, &data.test)?
    };
    let initial_train_loss = train_loss.first().copied().flatten();
    let record = TrainRecord {
        config: cfg.clone(),
        dataset_seed: data.seed,
        train_loss,
        initial_train_loss,
        final_train_loss,
        final_test_loss,
        nonfinite_epochs,
    };
    Ok((net, record))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearningRate {
    Fixed(f64),
    /// Sweep [`attack::AUTO_LR_GRID`].
    Auto,
}

impl std::str::FromStr for LearningRate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(LearningRate::Auto);
        }
        s.parse::<f64>()
            .ok()
            .filter(|x| *x > 0.0 && x.is_finite())
            .map(LearningRate::Fixed)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "learning rate {s:?}: expected a positive number or auto"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub methods: Vec<AttackMethod>,
    pub starts: usize,
    pub max_epochs: usize,
    pub lr: LearningRate,
    pub linf_eps: Option<f64>,
    pub seed: u64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            methods: AttackMethod::ALL.to_vec(),
            starts: 20,
            max_epochs: 5000,
            lr: LearningRate::Fixed(1e-2),
            linf_eps: None,
            seed: 0,
        }
    }
}

/// One attack run inside a campaign.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: usize,
    pub start: usize,
    /// `None` for an undefended model.
    pub bound: Option<f64>,
    pub result: AttackResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignCell {
    pub method: AttackMethod,
    pub bound: Option<f64>,
    pub runs: usize,
    pub successes: usize,
    /// Percent.
    pub success_rate: f64,
    /// Largest κ₂ seen in any trajectory of the cell.
    pub max_kappa: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignReport {
    pub config: CampaignConfig,
    pub runs: Vec<RunRecord>,
    pub cells: Vec<CampaignCell>,
}

/// Attack starting point `start` for model `model`: a fresh standard-Gaussian
/// input from the campaign seed.
pub fn attack_start(seed: u64, model: usize, start: usize, dim: usize) -> Vec<f64> {
    SeedStream::new(seed)
        .split(model as u64)
        .stream(start as u64)
        .normal_vec(dim)
}

/// Every (model, start, method) cell, run in parallel.
pub fn attack_campaign(models: &[Network], cfg: &CampaignConfig) -> Result<CampaignReport> {
    let jobs: Vec<(usize, usize, AttackMethod)> = (0..models.len())
        .flat_map(|mi| {
            (0..cfg.starts).flat_map(move |s| cfg.methods.iter().map(move |&m| (mi, s, m)))
        })
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(mi, start, method)| {
            let net = &models[mi];
            let u0 = attack_start(cfg.seed, mi, start, net.arch.input_dim);
            let mut acfg = AttackConfig::new(method, 1e-2, cfg.max_epochs, cfg.seed);
            acfg.linf_eps = cfg.linf_eps;
            let result = match cfg.lr {
                LearningRate::Fixed(lr) => {
                    acfg.learning_rate = lr;
                    attack::run_attack(net, &u0, &acfg)
                }
                LearningRate::Auto => attack::run_attack_auto_lr(net, &u0, &acfg),
            }?;
            Ok(RunRecord {
                model: mi,
                start,
                bound: net.defense.enabled.then_some(net.defense.bound_b),
                result,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cells = aggregate(&runs);
    Ok(CampaignReport {
        config: cfg.clone(),
        runs,
        cells,
    })
}

fn bound_key(b: Option<f64>) -> u64 {
    b.map_or(0, f64::to_bits)
}

/// Success counts per (method, bound), in method then bound order.
pub fn aggregate(runs: &[RunRecord]) -> Vec<CampaignCell> {
    let mut cells: BTreeMap<(String, u64), CampaignCell> = BTreeMap::new();
    for r in runs {
        let key = (r.result.method.name().to_string(), bound_key(r.bound));
        let cell = cells.entry(key).or_insert_with(|| CampaignCell {
            method: r.result.method,
            bound: r.bound,
            runs: 0,
            successes: 0,
            success_rate: 0.0,
            max_kappa: Some(0.0),
        });
        cell.runs += 1;
        cell.successes += usize::from(r.result.success);
        let mk = r.result.max_kappa();
        cell.max_kappa = match cell.max_kappa {
            Some(prev) if mk.is_finite() => Some(prev.max(mk)),
            _ => None,
        };
    }
    cells
        .into_values()
        .map(|mut c| {
            c.success_rate = 100.0 * c.successes as f64 / c.runs as f64;
            c
        })
        .collect()
}

/// Everything a run directory can hold.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Train(TrainRecord),
    Campaign(CampaignReport),
    Farkas(FarkasRecord),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FarkasRecord {
    pub size: usize,
    pub seed: u64,
    pub params: FarkasParams,
    pub result: farkas::FarkasAttackResult,
    /// Grid-sampling cross-check on 2-variable systems: true when no
    /// feasible point was found. `None` when not applicable.
    pub grid_confirms_infeasible: Option<bool>,
}

/// Settings for one Farkas attack run on a small random network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FarkasRunConfig {
    pub size: usize,
    pub params: FarkasParams,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for FarkasRunConfig {
    fn default() -> Self {
        Self {
            size: 2,
            params: FarkasParams::default(),
            lr: 0.5,
            epochs: 5000,
            seed: 0,
        }
    }
}

/// Fixed right-hand side: with every entry negative, any pair of opposed
/// rows already gives an empty set.
pub fn farkas_rhs(size: usize) -> Vec<f64> {
    vec![-1.0; size]
}

/// A tanh network with 4 inputs and one hidden layer of 16 that emits a
/// `size × size` inequality matrix.
pub fn farkas_network(size: usize, seed: u64) -> Result<Network> {
    let arch = Arch {
        input_dim: 4,
        hidden: vec![16],
        activation: Activation::Tanh,
        m: size,
        n: size,
        head: HeadKind::Matrix,
        q_scale: 0.1,
    };
    Network::init(arch, seed, DefenseConfig::off())
}

pub fn run_farkas(cfg: &FarkasRunConfig) -> Result<FarkasRecord> {
    let net = farkas_network(cfg.size, cfg.seed)?;
    let u0 = SeedStream::new(cfg.seed)
        .stream(99)
        .normal_vec(net.arch.input_dim);
    let b = farkas_rhs(cfg.size);
    let result = farkas::run_farkas_attack(&net, &u0, &b, cfg.params, cfg.lr, cfg.epochs)?;
    let grid_confirms_infeasible = match &result.certified {
        Some(c) if cfg.size == 2 => {
            Some(farkas::grid_feasible_point(&c.a, &c.b, 10.0, 400).is_none())
        }
        _ => None,
    };
    Ok(FarkasRecord {
        size: cfg.size,
        seed: cfg.seed,
        params: cfg.params,
        result,
        grid_confirms_infeasible,
    })
}

pub const RECORD_SUFFIX: &str = ".record.json";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    write_text(path, &(text + "\n"))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// All `*.record.json` files under `dir`, sorted by path.
pub fn load_records(dir: &Path) -> Result<Vec<(PathBuf, Record)>> {
    let mut paths = Vec::new();
    collect_record_paths(dir, &mut paths)?;
    paths.sort();
    paths
        .into_iter()
        .map(|p| read_json(&p).map(|r| (p, r)))
        .collect()
}

fn collect_record_paths(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_record_paths(&path, out)?;
        } else if path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.ends_with(RECORD_SUFFIX))
        {
            out.push(path);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSummary {
    pub table1: Vec<CampaignCell>,
    pub table2: Vec<Table2Row>,
    pub farkas: Vec<FarkasSummary>,
    /// Broken run invariants; a non-empty list means a failing report.
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub bound: Option<f64>,
    pub seed: u64,
    pub final_train_loss: Option<f64>,
    pub final_test_loss: Option<f64>,
    pub nonfinite_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarkasSummary {
    pub seed: u64,
    pub success: bool,
    pub epochs_used: usize,
    pub certificate_valid: bool,
    pub grid_confirms_infeasible: Option<bool>,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".to_string(), |v| format!("{v:?}"))
}

fn fmt_bound(b: Option<f64>) -> String {
    b.map_or_else(|| "off".to_string(), |v| format!("{v}"))
}

/// Aggregates records into tables and checks the run invariants: defended
/// training and attacks never go non-finite, defended κ₂ traces stay within
/// `B(1 + 1e-9)`, and every Farkas success carries a valid certificate.
pub fn summarize(records: &[Record]) -> ReportSummary {
    let mut runs = Vec::new();
    let mut table2 = Vec::new();
    let mut farkas = Vec::new();
    let mut violations = Vec::new();
    for rec in records {
        match rec {
            Record::Train(t) => {
                let bound = t.config.defense.enabled.then_some(t.config.defense.bound_b);
                if bound.is_some() && t.nonfinite_events() > 0 {
                    violations.push(format!(
                        "defended training (B={}, seed {}) had {} non-finite epochs",
                        fmt_bound(bound),
                        t.config.seed,
                        t.nonfinite_events()
                    ));
                }
                table2.push(Table2Row {
                    bound,
                    seed: t.config.seed,
                    final_train_loss: t.final_train_loss,
                    final_test_loss: t.final_test_loss,
                    nonfinite_events: t.nonfinite_events(),
                });
            }
            Record::Campaign(c) => {
                for r in &c.runs {
                    if let Some(b) = r.bound {
                        if r.result.success {
                            violations.push(format!(
                                "{} succeeded against a defended model (B={b})",
                                r.result.method
                            ));
                        }
                        if r.result.max_kappa() > b * (1.0 + 1e-9) {
                            violations.push(format!(
                                "{} drove kappa2 to {} past B={b}",
                                r.result.method,
                                r.result.max_kappa()
                            ));
                        }
                    }
                }
                runs.extend(c.runs.iter().cloned());
            }
            Record::Farkas(f) => {
                let valid = f
                    .result
                    .certified
                    .as_ref()
                    .is_some_and(|c| c.certificate.valid);
                if f.result.attack.success && (!valid || f.grid_confirms_infeasible == Some(false))
                {
                    violations.push(format!(
                        "farkas attack (seed {}) reported success without a confirmed certificate",
                        f.seed
                    ));
                }
                farkas.push(FarkasSummary {
                    seed: f.seed,
                    success: f.result.attack.success,
                    epochs_used: f.result.attack.epochs_used,
                    certificate_valid: valid,
                    grid_confirms_infeasible: f.grid_confirms_infeasible,
                });
            }
        }
    }
    ReportSummary {
        table1: aggregate(&runs),
        table2,
        farkas,
        violations,
    }
}

/// Writes `results.json`, `table1.csv`, `table2.csv` and one κ₂ trace per
/// attack run under `kappa_traces/`.
pub fn write_report(records: &[Record], out: &Path) -> Result<ReportSummary> {
    let summary = summarize(records);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut t1 = String::from("method,bound,runs,successes,success_rate\n");
    for c in &summary.table1 {
        t1.push_str(&format!(
            "{},{},{},{},{:.2}\n",
            c.method,
            fmt_bound(c.bound),
            c.runs,
            c.successes,
            c.success_rate
        ));
    }
    write_text(&out.join("table1.csv"), &t1)?;

    let mut t2 = String::from("bound,seed,final_train_loss,final_test_loss,nonfinite_events\n");
    for r in &summary.table2 {
        t2.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt_bound(r.bound),
            r.seed,
            fmt_opt(r.final_train_loss),
            fmt_opt(r.final_test_loss),
            r.nonfinite_events
        ));
    }
    write_text(&out.join("table2.csv"), &t2)?;

    let traces = out.join("kappa_traces");
    let mut campaign_no = 0;
    for rec in records {
        if let Record::Campaign(c) = rec {
            for r in &c.runs {
                let name = format!(
                    "c{campaign_no}_{}_b{}_m{}_s{}.csv",
                    r.result.method,
                    fmt_bound(r.bound),
                    r.model,
                    r.start
                );
                write_text(&traces.join(name), &r.result.kappa_csv())?;
            }
            campaign_no += 1;
        }
    }

    #[derive(Serialize)]
    struct Results<'a> {
        summary: &'a ReportSummary,
        records: &'a [Record],
    }
    write_json(
        &out.join("results.json"),
        &Results {
            summary: &summary,
            records,
        },
    )?;
    Ok(summary)
}
