mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crc_core::datagen::{col, generate_dataset, read_samples};
use crc_core::neural::{self, Network, NetworkSpec, OutputActivation, TrainReport};
use crc_core::pricing::{call_price, implied_vol, put_price, OptionKind, OptionQuote};
use crc_core::sim;
use crc_core::surface::{build_surface, check_static_arbitrage, Grid};
use ndarray::Array2;
use serde_json::json;

use config::{ConfigError, ModelConfig, NetConfig, RunConfig};

/// Consistent recalibration of a Bates-type model: dataset generation,
/// network training, pricing and surface simulation.
#[derive(Parser)]
#[command(name = "crc", version)]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true, env = "CRC_CONFIG")]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print a machine-readable JSON summary instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample model points, price their surfaces and write a dataset.
    Generate {
        /// Number of draws.
        #[arg(long, default_value_t = 1000)]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset CSV (a manifest is written next to it).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the forward network (nn1) or, through a frozen nn1, the
    /// inverse network (nn2).
    Train {
        #[command(subcommand)]
        which: TrainCmd,
    },
    /// Price one European option.
    #[command(allow_negative_numbers = true)]
    Price {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        strike: f64,
        /// Time to maturity in years.
        #[arg(long)]
        tau: f64,
        /// Price a put instead of a call.
        #[arg(long)]
        put: bool,
    },
    /// Black-Scholes implied volatility of one quote.
    #[command(allow_negative_numbers = true)]
    Iv {
        /// Option premium.
        #[arg(long)]
        price: f64,
        #[arg(long)]
        spot: f64,
        #[arg(long)]
        strike: f64,
        #[arg(long)]
        tau: f64,
        #[arg(long, default_value_t = 0.0)]
        r: f64,
        #[arg(long, default_value_t = 0.0)]
        q: f64,
        #[arg(long)]
        put: bool,
    },
    /// Implied-volatility surface of a model on the default grid.
    #[command(allow_negative_numbers = true)]
    Surface {
        #[command(flatten)]
        model: ModelArgs,
        /// Surface CSV; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the recalibration loop and write a run directory.
    Simulate {
        /// Forward network weights (default: `paths.nn1`).
        #[arg(long)]
        nn1: Option<PathBuf>,
        /// Inverse network weights (default: `paths.nn2`).
        #[arg(long)]
        nn2: Option<PathBuf>,
        /// Run directory for the surfaces and run.toml.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Overrides `sim.n_steps`.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum TrainCmd {
    Nn1 {
        /// Dataset CSV (default: `paths.data`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Weight file to write.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides the weight initialisation seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    Nn2 {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trained forward network.
        #[arg(long)]
        nn1: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Model flags; anything left out comes from the `[start]` config section.
#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    spot: Option<f64>,
    #[arg(long)]
    v0: Option<f64>,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
}

impl ModelArgs {
    fn over(&self, base: ModelConfig) -> ModelConfig {
        ModelConfig {
            spot: self.spot.unwrap_or(base.spot),
            v0: self.v0.unwrap_or(base.v0),
            r: self.r.unwrap_or(base.r),
            q: self.q.unwrap_or(base.q),
            kappa: self.kappa.unwrap_or(base.kappa),
            theta: self.theta.unwrap_or(base.theta),
            sigma: self.sigma.unwrap_or(base.sigma),
            rho: self.rho.unwrap_or(base.rho),
            lambda: self.lambda.unwrap_or(base.lambda),
            nu: self.nu.unwrap_or(base.nu),
            delta: self.delta.unwrap_or(base.delta),
        }
    }
}

/// Exit status classes.
#[derive(Debug)]
enum Fail {
    Io(String),
    Config(String),
    Numeric(String),
}

impl Fail {
    fn code(&self) -> u8 {
        match self {
            Fail::Io(_) => 1,
            Fail::Config(_) => 2,
            Fail::Numeric(_) => 3,
        }
    }
}

impl From<crc_core::Error> for Fail {
    fn from(e: crc_core::Error) -> Fail {
        use crc_core::Error as E;
        match e {
            E::Io(_) | E::Csv(_) => Fail::Io(e.to_string()),
            _ if e.is_numeric() => Fail::Numeric(e.to_string()),
            _ => Fail::Config(e.to_string()),
        }
    }
}

/// Errors of single-shot evaluations are domain errors unless they are I/O.
fn domain(e: crc_core::Error) -> Fail {
    match Fail::from(e) {
        Fail::Config(m) => Fail::Numeric(m),
        f => f,
    }
}

type Out<T> = Result<T, Fail>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Fail::Io(m) | Fail::Config(m) | Fail::Numeric(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(cli: Cli) -> Out<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            ConfigError::Io(e) => Fail::Io(format!("{}: {e}", path.display())),
            ConfigError::Parse(m) => Fail::Config(format!("{}: {m}", path.display())),
        })?,
        None => RunConfig::default(),
    };
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Fail::Config(e.to_string()))?;
    }
    let json = cli.json;
    match cli.cmd {
        Cmd::Generate { n, seed, out } => generate(&cfg, n, seed, out, json),
        Cmd::Train { which } => match which {
            TrainCmd::Nn1 { data, out, epochs, seed } => train_nn1(&cfg, data, out, epochs, seed, json),
            TrainCmd::Nn2 { data, nn1, out, epochs, seed } => train_nn2(&cfg, data, nn1, out, epochs, seed, json),
        },
        Cmd::Price { model, strike, tau, put } => price(&model.over(cfg.start), &cfg, strike, tau, put, json),
        Cmd::Iv { price, spot, strike, tau, r, q, put } => {
            let kind = if put { OptionKind::Put } else { OptionKind::Call };
            let quote = OptionQuote { strike, maturity: tau, price, kind };
            let vol = implied_vol(&quote, spot, r, q).map_err(domain)?;
            emit(json, json!({ "implied_vol": vol }), &sig17(vol));
            Ok(())
        }
        Cmd::Surface { model, out } => surface(&model.over(cfg.start), &cfg, out, json),
        Cmd::Simulate { nn1, nn2, out_dir, steps, seed } => simulate(&cfg, nn1, nn2, out_dir, steps, seed, json),
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
fn sig17(x: f64) -> String {
    format!("{x:.16e}")
}

fn emit(json: bool, value: serde_json::Value, text: &str) {
    if json {
        println!("{value}");
    } else {
        println!("{text}");
    }
}

fn need(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Out<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Fail::Config(format!("no {what} given (flag or [paths] entry)")))
}

fn generate(cfg: &RunConfig, n: u64, seed: u64, out: Option<PathBuf>, json: bool) -> Out<()> {
    let out = need(out, &cfg.paths.data, "output dataset")?;
    let m = generate_dataset(n, seed, &cfg.bounds, &Grid::default_grid(), &cfg.damping, &out)?;
    let text = format!(
        "wrote {} of {} samples to {} (dropped: {} pricing, {} arbitrage) in {:.1}s{}",
        m.written,
        m.requested,
        out.display(),
        m.dropped_pricing,
        m.dropped_arbitrage,
        m.wall_time_s,
        m.warning.as_deref().map(|w| format!("; warning: {w}")).unwrap_or_default()
    );
    let value = json!({
        "out": out,
        "requested": m.requested,
        "written": m.written,
        "dropped_pricing": m.dropped_pricing,
        "dropped_arbitrage": m.dropped_arbitrage,
        "drop_rate": m.drop_rate,
        "warning": m.warning,
        "wall_time_s": m.wall_time_s,
    });
    emit(json, value, &text);
    Ok(())
}

fn load_data(path: &Path) -> Out<(Array2<f64>, Array2<f64>)> {
    let rows = read_samples(path)?;
    if rows.is_empty() {
        return Err(Fail::Config(format!("{} holds no samples", path.display())));
    }
    let (n, m) = (rows[0].inputs.len(), rows[0].targets.len());
    let x = Array2::from_shape_fn((rows.len(), n), |(i, j)| rows[i].inputs[j]);
    let y = Array2::from_shape_fn((rows.len(), m), |(i, j)| rows[i].targets[j]);
    Ok((x, y))
}

fn with_overrides(net: &NetConfig, epochs: Option<usize>, seed: Option<u64>) -> NetConfig {
    let mut net = net.clone();
    if let Some(e) = epochs {
        net.train.epochs = e;
    }
    if let Some(s) = seed {
        net.seed = s;
        net.train.seed = s;
    }
    net
}

/// Per-epoch losses next to the weight file.
fn write_losses(weights: &Path, rep: &TrainReport) -> Out<PathBuf> {
    let path = weights.with_extension("loss.csv");
    let mut text = String::from("epoch,train_loss,val_loss,lr\n");
    for (e, ((t, v), lr)) in rep.train_loss.iter().zip(&rep.val_loss).zip(&rep.lr).enumerate() {
        text.push_str(&format!("{e},{t:e},{v:e},{lr:e}\n"));
    }
    std::fs::write(&path, text).map_err(|e| Fail::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn train_summary(json: bool, out: &Path, losses: &Path, rep: &TrainReport) {
    let last = |v: &[f64]| v.last().copied();
    let text = format!(
        "wrote {} after {} epochs (best epoch {:?}, final train loss {:?}, val loss {:?}); losses in {}",
        out.display(),
        rep.train_loss.len(),
        rep.best_epoch,
        last(&rep.train_loss),
        last(&rep.val_loss),
        losses.display()
    );
    let value = json!({
        "out": out,
        "losses": losses,
        "epochs": rep.train_loss.len(),
        "best_epoch": rep.best_epoch,
        "train_loss": last(&rep.train_loss),
        "val_loss": last(&rep.val_loss),
    });
    emit(json, value, &text);
}

fn train_nn1(cfg: &RunConfig, data: Option<PathBuf>, out: Option<PathBuf>, epochs: Option<usize>, seed: Option<u64>, json: bool) -> Out<()> {
    let data = need(data, &cfg.paths.data, "dataset")?;
    let out = need(out, &cfg.paths.nn1, "nn1 output path")?;
    let net_cfg = with_overrides(&cfg.nn1, epochs, seed);
    let (x, y) = load_data(&data)?;
    if x.ncols() != col::N_INPUTS {
        return Err(Fail::Config(format!("{} has {} input columns, expected {}", data.display(), x.ncols(), col::N_INPUTS)));
    }
    let spec = NetworkSpec {
        input_dim: x.ncols(),
        output_dim: y.ncols(),
        n_main_layers: net_cfg.n_main_layers,
        width: net_cfg.width,
        residual: net_cfg.residual,
        batch_norm: net_cfg.batch_norm,
        output: OutputActivation::Linear,
        input_box: cfg.bounds.input_box(),
    };
    let mut net = Network::new(spec, net_cfg.seed)?;
    let rep = neural::train(&mut net, x.view(), y.view(), &net_cfg.train)?;
    neural::save(&net, &out)?;
    let losses = write_losses(&out, &rep)?;
    train_summary(json, &out, &losses, &rep);
    Ok(())
}

/// A network file that is missing or unreadable counts as a configuration
/// problem: the pipeline step producing it has not run.
fn load_net(path: &Path, what: &str) -> Out<Network> {
    if !path.exists() {
        return Err(Fail::Config(format!("{what} weights {} not found; train them first", path.display())));
    }
    neural::load(path).map_err(|e| match e {
        crc_core::Error::Io(e) => Fail::Io(format!("{}: {e}", path.display())),
        e => Fail::Config(format!("{what} weights {}: {e}", path.display())),
    })
}

fn train_nn2(
    cfg: &RunConfig,
    data: Option<PathBuf>,
    nn1: Option<PathBuf>,
    out: Option<PathBuf>,
    epochs: Option<usize>,
    seed: Option<u64>,
    json: bool,
) -> Out<()> {
    let data = need(data, &cfg.paths.data, "dataset")?;
    let nn1_path = need(nn1, &cfg.paths.nn1, "nn1 weights")?;
    let out = need(out, &cfg.paths.nn2, "nn2 output path")?;
    let net_cfg = with_overrides(&cfg.nn2, epochs, seed);
    let nn1 = load_net(&nn1_path, "nn1")?;
    let (x, y) = load_data(&data)?;
    let spec = neural::nn2_spec(&nn1, net_cfg.n_main_layers, net_cfg.width)?;
    let spec = NetworkSpec {
        residual: net_cfg.residual,
        batch_norm: net_cfg.batch_norm,
        ..spec
    };
    let mut nn3 = neural::compose_nn3(nn1, spec, net_cfg.seed)?;
    let set = neural::Nn3Data::new(&nn3, x.view(), y.view())?;
    let rep = neural::train_nn3(&mut nn3, &set, &net_cfg.train)?;
    neural::save(&nn3.nn2, &out)?;
    let losses = write_losses(&out, &rep)?;
    train_summary(json, &out, &losses, &rep);
    Ok(())
}

fn price(model: &ModelConfig, cfg: &RunConfig, strike: f64, tau: f64, put: bool, json: bool) -> Out<()> {
    let (state, p, j) = model.build().map_err(domain)?;
    let value = if put {
        put_price(&state, &p, &j, strike, tau, &cfg.damping)
    } else {
        call_price(&state, &p, &j, strike, tau, &cfg.damping)
    }
    .map_err(domain)?;
    emit(json, json!({ "price": value }), &sig17(value));
    Ok(())
}

fn surface(model: &ModelConfig, cfg: &RunConfig, out: Option<PathBuf>, json: bool) -> Out<()> {
    let (state, p, j) = model.build().map_err(domain)?;
    let surf = build_surface(&state, &p, &j, &Grid::default_grid(), &cfg.damping).map_err(domain)?;
    let arb = check_static_arbitrage(&surf, p.r, p.q);
    match &out {
        Some(path) => surf.save_csv(path)?,
        None if !json => {
            println!("tau_days,moneyness,iv");
            for (i, tau) in surf.grid.maturities.iter().enumerate() {
                for (k, m) in surf.grid.moneyness.iter().enumerate() {
                    println!("{},{},{}", (tau * 365.0).round(), sig17(*m), sig17(surf.vol(i, k)));
                }
            }
        }
        None => {}
    }
    if json {
        println!("{}", json!({ "out": out, "vols": surf.vols, "max_violation": arb.max_violation }));
    } else if out.is_some() {
        println!("wrote {} points, max arbitrage violation {:e}", surf.vols.len(), arb.max_violation);
    }
    Ok(())
}

fn simulate(
    cfg: &RunConfig,
    nn1: Option<PathBuf>,
    nn2: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    steps: Option<usize>,
    seed: Option<u64>,
    json: bool,
) -> Out<()> {
    let nn1 = load_net(&need(nn1, &cfg.paths.nn1, "nn1 weights")?, "nn1")?;
    let nn2 = load_net(&need(nn2, &cfg.paths.nn2, "nn2 weights")?, "nn2")?;
    let dir = need(out_dir, &cfg.paths.out, "output directory")?;
    let mut sim_cfg = cfg.sim;
    if let Some(n) = steps {
        sim_cfg.n_steps = n;
    }
    if let Some(s) = seed {
        sim_cfg.seed = s;
    }
    let (state, p, j) = cfg.start.build()?;
    let grid = Grid::default_grid();
    let records = sim::run(&sim_cfg, &grid, &p, &j, &state, &nn1, &nn2)?;
    sim::write_run(&dir, &sim_cfg, &grid, &p, &j, &state, &records)?;
    let worst = records.iter().map(|r| r.max_violation).fold(0.0, f64::max);
    let dirty = records.iter().filter(|r| r.butterfly_violations + r.calendar_violations > 0).count();
    let recals = records.iter().filter(|r| r.recalibrated).count();
    let text = format!(
        "wrote {} steps to {}: {recals} recalibrations, {dirty} surfaces with arbitrage flags, worst violation {worst:e}",
        records.len(),
        dir.display()
    );
    let value = json!({
        "out_dir": dir,
        "records": records.len(),
        "recalibrations": recals,
        "surfaces_flagged": dirty,
        "worst_violation": worst,
    });
    emit(json, value, &text);
    Ok(())
}
