use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use condguard::attack::AttackMethod;
use condguard::defense::DefenseConfig;
use condguard::diffgraph::{Activation, Checkpoint, Network};
use condguard::farkas::FarkasParams;
use condguard::harness::{
    self, CampaignConfig, FarkasRunConfig, LearningRate, Record, SyntheticDataset, TrainConfig,
};
use condguard::{Error, Result};

/// Condition-number attacks and defenses for QP-layer networks.
#[derive(Parser, Debug)]
#[command(name = "condguard", version)]
struct Cli {
    /// TOML file with one table per subcommand; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic bin-assignment dataset.
    Gen(GenArgs),
    /// Train a network, optionally with the condition-number clamp.
    Train(TrainArgs),
    /// Run attack campaigns against trained models.
    Attack(AttackArgs),
    /// Drive small inequality systems to infeasibility.
    FarkasAttack(FarkasArgs),
    /// Aggregate run records into tables and check invariants.
    Report(ReportArgs),
}

/// Accepts `10`, `1e-2` or a word such as `off` / `auto` in the config file.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum NumOrWord {
    Num(f64),
    Word(String),
}

impl NumOrWord {
    fn text(&self) -> String {
        match self {
            NumOrWord::Num(x) => x.to_string(),
            NumOrWord::Word(s) => s.clone(),
        }
    }
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct GenArgs {
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset JSON; a CSV copy is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Condition bound B, or `off`.
    #[arg(long)]
    #[serde(skip)]
    bound: Option<String>,
    #[arg(skip)]
    #[serde(rename = "bound")]
    bound_file: Option<NumOrWord>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// relu, celu or tanh.
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for model.json and train.record.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct AttackArgs {
    /// model.json files; repeat for several models.
    #[arg(long)]
    model: Vec<PathBuf>,
    /// Method name or `all`.
    #[arg(long)]
    method: Option<String>,
    /// Step size or `auto`.
    #[arg(long)]
    #[serde(skip)]
    lr: Option<String>,
    #[arg(skip)]
    #[serde(rename = "lr")]
    lr_file: Option<NumOrWord>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    linf_eps: Option<f64>,
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for campaign.record.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct FarkasArgs {
    /// Rows and columns of the inequality matrix.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds, starting at `--seed`.
    #[arg(long)]
    runs: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct ReportArgs {
    /// Directory searched recursively for *.record.json.
    #[arg(long = "in")]
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct ConfigFile {
    gen: GenArgs,
    train: TrainArgs,
    attack: AttackArgs,
    farkas_attack: FarkasArgs,
    report: ReportArgs,
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = harness::read_text(path)?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| Error::invalid(format!("missing --{flag}")))
}

fn parse_bound(s: &str) -> Result<DefenseConfig> {
    if s == "off" {
        return Ok(DefenseConfig::off());
    }
    let b: f64 = s
        .parse()
        .map_err(|_| Error::invalid(format!("bound {s:?}: expected a number or off")))?;
    DefenseConfig::with_bound(b)
}

fn cmd_gen(a: GenArgs, f: GenArgs) -> Result<()> {
    let out = required(a.out.or(f.out), "out")?;
    let data = harness::gen_dataset(
        a.dim.or(f.dim).unwrap_or(50),
        a.bins.or(f.bins).unwrap_or(10),
        a.train_count.or(f.train_count).unwrap_or(30),
        a.test_count.or(f.test_count).unwrap_or(10),
        a.seed.or(f.seed).unwrap_or(0),
    )?;
    harness::write_json(&out, &data)?;
    harness::write_text(&out.with_extension("csv"), &data.to_csv())?;
    println!(
        "wrote {} ({} train, {} test)",
        out.display(),
        data.train.len(),
        data.test.len()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs, f: TrainArgs) -> Result<()> {
    let data_path = required(a.data.or(f.data), "data")?;
    let out = required(a.out.or(f.out), "out")?;
    let data: SyntheticDataset = harness::read_json(&data_path)?;
    let defaults = TrainConfig::default();
    let bound = a.bound.or(f.bound_file.map(|b| b.text()));
    let cfg = TrainConfig {
        epochs: a.epochs.or(f.epochs).unwrap_or(defaults.epochs),
        lr: a.lr.or(f.lr).unwrap_or(defaults.lr),
        activation: match a.activation.or(f.activation) {
            Some(s) => s.parse::<Activation>()?,
            None => defaults.activation,
        },
        defense: match bound {
            Some(s) => parse_bound(&s)?,
            None => DefenseConfig::off(),
        },
        seed: a.seed.or(f.seed).unwrap_or(0),
        ..defaults
    };
    let (net, record) = harness::train(&data, &cfg)?;
    harness::write_json(&out.join("model.json"), &Checkpoint::from(&net))?;
    let name = format!("train{}", harness::RECORD_SUFFIX);
    harness::write_json(&out.join(name), &Record::Train(record.clone()))?;
    println!(
        "final train loss {}, test loss {}, non-finite epochs {}",
        fmt_loss(record.final_train_loss),
        fmt_loss(record.final_test_loss),
        record.nonfinite_events()
    );
    Ok(())
}

fn fmt_loss(x: Option<f64>) -> String {
    x.map_or_else(|| "non-finite".to_string(), |v| format!("{v:.4}"))
}

fn cmd_attack(a: AttackArgs, f: AttackArgs) -> Result<()> {
    let models = if a.model.is_empty() { f.model } else { a.model };
    if models.is_empty() {
        return Err(Error::invalid("missing --model"));
    }
    let out = required(a.out.or(f.out), "out")?;
    let nets = models
        .iter()
        .map(|p| harness::read_json::<Checkpoint>(p).and_then(Network::try_from))
        .collect::<Result<Vec<_>>>()?;
    let defaults = CampaignConfig::default();
    let methods = match a.method.or(f.method).as_deref() {
        None | Some("all") => AttackMethod::ALL.to_vec(),
        Some(name) => vec![name.parse::<AttackMethod>()?],
    };
    let lr = match a.lr.or(f.lr_file.map(|l| l.text())) {
        Some(s) => s.parse::<LearningRate>()?,
        None => defaults.lr,
    };
    let cfg = CampaignConfig {
        methods,
        starts: a.starts.or(f.starts).unwrap_or(defaults.starts),
        max_epochs: a.epochs.or(f.epochs).unwrap_or(defaults.max_epochs),
        lr,
        linf_eps: a.linf_eps.or(f.linf_eps),
        seed: a.seed.or(f.seed).unwrap_or(0),
    };
    let report = harness::attack_campaign(&nets, &cfg)?;
    for c in &report.cells {
        let bound = c.bound.map_or("off".to_string(), |b| b.to_string());
        println!(
            "{:<20} B={:<5} {}/{} ({:.2}%)",
            c.method.name(),
            bound,
            c.successes,
            c.runs,
            c.success_rate
        );
    }
    let name = format!("campaign{}", harness::RECORD_SUFFIX);
    harness::write_json(&out.join(name), &Record::Campaign(report))
}

fn cmd_farkas(a: FarkasArgs, f: FarkasArgs) -> Result<()> {
    let out = required(a.out.or(f.out), "out")?;
    let defaults = FarkasRunConfig::default();
    let params = FarkasParams {
        gamma: a.gamma.or(f.gamma).unwrap_or(defaults.params.gamma),
        nu_margin: a.nu.or(f.nu).unwrap_or(defaults.params.nu_margin),
        eta_reg: a.eta.or(f.eta).unwrap_or(defaults.params.eta_reg),
    };
    let first = a.seed.or(f.seed).unwrap_or(0);
    let runs = a.runs.or(f.runs).unwrap_or(1);
    let mut successes = 0;
    for seed in first..first + runs {
        let cfg = FarkasRunConfig {
            size: a.size.or(f.size).unwrap_or(defaults.size),
            params,
            lr: a.lr.or(f.lr).unwrap_or(defaults.lr),
            epochs: a.epochs.or(f.epochs).unwrap_or(defaults.epochs),
            seed,
        };
        let rec = harness::run_farkas(&cfg)?;
        let ok = rec.result.attack.success;
        successes += ok as u64;
        println!(
            "seed {seed}: {} after {} epochs",
            if ok { "infeasible" } else { "no certificate" },
            rec.result.attack.epochs_used
        );
        let name = format!("farkas_s{seed}{}", harness::RECORD_SUFFIX);
        harness::write_json(&out.join(name), &Record::Farkas(rec))?;
    }
    println!("{successes}/{runs} certified");
    Ok(())
}

fn cmd_report(a: ReportArgs, f: ReportArgs) -> Result<bool> {
    let input = required(a.input.or(f.input), "in")?;
    let out = required(a.out.or(f.out), "out")?;
    let records: Vec<Record> = harness::load_records(&input)?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    let summary = harness::write_report(&records, &out)?;
    println!("{} records, report in {}", records.len(), out.display());
    for v in &summary.violations {
        eprintln!("violation: {v}");
    }
    Ok(summary.violations.is_empty())
}

fn run(cli: Cli) -> Result<bool> {
    let file = load_config(cli.config.as_deref())?;
    match cli.cmd {
        Command::Gen(a) => cmd_gen(a, file.gen).map(|_| true),
        Command::Train(a) => cmd_train(a, file.train).map(|_| true),
        Command::Attack(a) => cmd_attack(a, file.attack).map(|_| true),
        Command::FarkasAttack(a) => cmd_farkas(a, file.farkas_attack).map(|_| true),
        Command::Report(a) => cmd_report(a, file.report),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
