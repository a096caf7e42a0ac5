use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mdma::dataset::{load_csv, write_csv, Dataset};
use mdma::model::QuerySpec;
use mdma::{
    adaptive_coupling, anomaly_scores, ci_test, estimate_mi, fit, init_model, load_model,
    sample, sample_autoregressive, save_model, FitStatus, LeafKind, Mdma, MdmaError,
    TrainConfig,
};
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Marginalizable density models.
#[derive(Parser)]
#[command(name = "mdma", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a CSV file and save it.
    Fit(FitArgs),
    /// Draw samples from a model.
    Sample(SampleArgs),
    /// Evaluate a query or a two-variable density grid.
    Eval(EvalArgs),
    /// Estimate the mutual information between two variable sets.
    Mi(MiArgs),
    /// Test conditional independence of two variables.
    Citest(CiArgs),
    /// Per-row negative log-likelihood (anomaly score).
    Score(ScoreArgs),
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Take the dimension from the CSV header (the only supported mode).
    #[arg(long, default_value_t = true)]
    d_auto: bool,
    #[arg(long, default_value_t = 100)]
    m: usize,
    #[arg(long, default_value_t = 2)]
    l: usize,
    #[arg(long, default_value_t = 3)]
    r: usize,
    #[arg(long, default_value_t = 2)]
    pool: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 500)]
    batch: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    couple: Switch,
    /// Held-out fraction used to select the best epoch.
    #[arg(long, default_value_t = 0.1)]
    validation: f64,
    #[arg(long, default_value = "")]
    missing_token: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Hierarchical,
    Autoregressive,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Mode::Hierarchical)]
    mode: Mode,
    #[arg(long, default_value_t = mdma::sampler::DEFAULT_INV_TOL)]
    tol: f64,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Per-variable tags `c:<x>`, `d:<x>`, `m`, `given:<x>` joined by commas.
    #[arg(long, conflicts_with = "grid", required_unless_present = "grid", allow_hyphen_values = true)]
    query: Option<String>,
    /// `var1,var2,min,max,steps`: marginal density of two variables on a square grid.
    #[arg(long, allow_hyphen_values = true)]
    grid: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MiArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    y: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    z: Vec<usize>,
}

#[derive(Args)]
struct CiArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    i: usize,
    #[arg(long)]
    j: usize,
    #[arg(long, value_delimiter = ',')]
    cond: Vec<usize>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "")]
    missing_token: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes mapped to exit codes 1 (usage, input) and 2 (numerical).
enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<MdmaError> for Failure {
    fn from(e: MdmaError) -> Self {
        match e {
            MdmaError::NonFiniteInput
            | MdmaError::InversionBracketOverflow
            | MdmaError::ZeroDensityCondition
            | MdmaError::NonFiniteLoss { .. }
            | MdmaError::UnstableConditioning { .. } => Failure::Numerical(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Mi(a) => cmd_mi(a),
        Command::Citest(a) => cmd_citest(a),
        Command::Score(a) => cmd_score(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn output(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn open_model(path: &Path) -> Result<Mdma, Failure> {
    load_model(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn open_data(path: &Path, token: &str, d: Option<usize>) -> Result<Dataset, Failure> {
    let ds = load_csv(path, token).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    if let Some(d) = d {
        if ds.d() != d {
            return Err(Failure::Usage(format!(
                "{} has {} columns, model has {d}",
                path.display(),
                ds.d()
            )));
        }
    }
    Ok(ds)
}

/// Rows used to choose the variable coupling.
const COUPLING_ROWS: usize = 10_000;

fn cmd_fit(a: FitArgs) -> CmdResult {
    if !a.d_auto {
        return Err(Failure::Usage("the dimension is always read from the data".into()));
    }
    let data = open_data(&a.data, &a.missing_token, None)?;
    let mut model = init_model::<f64>(data.d(), a.m, a.l, a.r, a.pool, a.seed)?;
    if a.couple == Switch::On && data.d() > 1 {
        let take = data.n().min(COUPLING_ROWS);
        let rows = data.values().slice_move(ndarray::s![..take, ..]);
        let mask = data.missing().slice_move(ndarray::s![..take, ..]);
        let order = adaptive_coupling(rows, Some(mask), a.pool)?;
        model.ht_mut().set_leaf_order(order)?;
    }
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        validation_fraction: a.validation,
        ..TrainConfig::default()
    };
    let outcome = fit(model, &data, &cfg)?;
    let mut out = io::stdout().lock();
    writeln!(out, "epoch,train_nll,validation_nll")?;
    for e in &outcome.trace {
        let v = e.validation_nll.map(|v| format!("{v:?}")).unwrap_or_default();
        writeln!(out, "{},{:?},{v}", e.epoch, e.train_nll)?;
    }
    save_model(&outcome.model, &a.out)?;
    match outcome.status {
        FitStatus::Completed => Ok(()),
        FitStatus::Diverged { epoch, row } => Err(Failure::Numerical(format!(
            "training diverged in epoch {epoch} at row {row}; best model saved"
        ))),
    }
}

fn cmd_sample(a: SampleArgs) -> CmdResult {
    let model = open_model(&a.model)?;
    if a.n == 0 {
        return Err(Failure::Usage("--n must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let draws = match a.mode {
        Mode::Hierarchical => sample(&model, a.n, &mut rng, a.tol)?,
        Mode::Autoregressive => sample_autoregressive(&model, a.n, &mut rng, a.tol)?,
    };
    let columns = mdma::dataset::default_columns(model.d());
    write_csv(output(a.out.as_deref())?, &columns, draws.view(), None)?;
    Ok(())
}

struct Grid {
    vars: [usize; 2],
    min: f64,
    max: f64,
    steps: usize,
}

fn parse_grid(s: &str, d: usize) -> Result<Grid, Failure> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || Failure::Usage(format!("invalid --grid `{s}`, expected var1,var2,min,max,steps"));
    if parts.len() != 5 {
        return Err(bad());
    }
    let v1: usize = parts[0].parse().map_err(|_| bad())?;
    let v2: usize = parts[1].parse().map_err(|_| bad())?;
    let min: f64 = parts[2].parse().map_err(|_| bad())?;
    let max: f64 = parts[3].parse().map_err(|_| bad())?;
    let steps: usize = parts[4].parse().map_err(|_| bad())?;
    if v1 == v2 || v1 >= d || v2 >= d || !(min < max) || steps < 2 {
        return Err(bad());
    }
    Ok(Grid {
        vars: [v1, v2],
        min,
        max,
        steps,
    })
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let model = open_model(&a.model)?;
    if let Some(q) = &a.query {
        let query: QuerySpec<f64> = q.parse()?;
        let value = model.evaluate(&query)?;
        let mut out = output(a.out.as_deref())?;
        writeln!(out, "{value:?}")?;
        return Ok(());
    }
    let grid = parse_grid(a.grid.as_deref().unwrap_or_default(), model.d())?;
    let d = model.d();
    let n = grid.steps * grid.steps;
    let h = (grid.max - grid.min) / (grid.steps - 1) as f64;
    let mut rows = Array2::zeros((n, d));
    let mut kinds = Array2::from_elem((n, d), LeafKind::Marginal);
    for (r, mut row) in rows.axis_iter_mut(Axis(0)).enumerate() {
        row[grid.vars[0]] = grid.min + (r / grid.steps) as f64 * h;
        row[grid.vars[1]] = grid.min + (r % grid.steps) as f64 * h;
        kinds[[r, grid.vars[0]]] = LeafKind::Density;
        kinds[[r, grid.vars[1]]] = LeafKind::Density;
    }
    let log_density = model.prepare().log_contract_batch(rows.view(), kinds.view())?;
    let mut out = output(a.out.as_deref())?;
    writeln!(out, "x1,x2,density")?;
    for (r, ld) in log_density.iter().enumerate() {
        writeln!(
            out,
            "{:?},{:?},{:?}",
            rows[[r, grid.vars[0]]],
            rows[[r, grid.vars[1]]],
            ld.exp()
        )?;
    }
    Ok(())
}

fn complete_values(ds: &Dataset) -> Result<Array2<f64>, Failure> {
    if ds.has_missing() {
        return Err(Failure::Usage("this command needs fully observed data".into()));
    }
    Ok(ds.values().to_owned())
}

fn cmd_mi(a: MiArgs) -> CmdResult {
    let model = open_model(&a.model)?;
    let data = complete_values(&open_data(&a.data, "", Some(model.d()))?)?;
    let mi = estimate_mi(&model, data.view(), &a.y, &a.z)?;
    println!("{mi:?}");
    Ok(())
}

fn cmd_citest(a: CiArgs) -> CmdResult {
    let model = open_model(&a.model)?;
    let data = complete_values(&open_data(&a.data, "", Some(model.d()))?)?;
    let res = ci_test(&model, data.view(), a.i, a.j, &a.cond, a.alpha)?;
    println!("statistic,p_value,reject,dropped");
    println!("{:?},{:?},{},{}", res.statistic, res.p_value, res.reject, res.dropped);
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> CmdResult {
    let model = open_model(&a.model)?;
    let data = open_data(&a.data, &a.missing_token, Some(model.d()))?;
    let scores = anomaly_scores(&model, data.values(), Some(data.missing()))?;
    let mut out = output(a.out.as_deref())?;
    writeln!(out, "score")?;
    for s in scores {
        writeln!(out, "{s:?}")?;
    }
    Ok(())
}
