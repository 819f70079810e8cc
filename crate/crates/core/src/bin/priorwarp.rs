use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use priorwarp::config::{Preset, RunConfig};
use priorwarp::optimizer::{deform_prior, fit_case, learn_prior};
use priorwarp::phantom::{load_suite, make_suite};
use priorwarp::prior::init_prior;
use priorwarp::volume::{read_volume, write_volume, VolumeFile};
use priorwarp::{metrics, AnatomicalPrior, DeformParams, Error, LabelMap, Result, TpsSystem};

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (volume format PWV1, params v1)");

/// Deformable anatomical-prior fitting on voxel volumes.
///
/// Machine-readable results go to stdout as one JSON document; tables and
/// progress go to stderr.
#[derive(Parser, Debug)]
#[command(name = "priorwarp", version = VERSION)]
struct Cli {
    /// TOML or JSON run configuration (`.json` selects JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base values for the fit section when no config file sets `preset`.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Seed for prior initialization and phantom generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 forces serial execution.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    show_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic phantom suite.
    Phantom {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cases: Option<usize>,
        #[arg(long)]
        max_theta: Option<f64>,
        #[arg(long)]
        max_delta: Option<f64>,
    },
    /// Fit shifts and TPS displacements of a prior to one label map.
    Fit {
        /// Target label map (PWV1, u8).
        target: PathBuf,
        #[command(flatten)]
        prior: PriorSource,
        #[command(flatten)]
        fit: FitFlags,
        /// Directory for params.json, deformed.pwv and trail.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Learn a prior jointly with per-case parameters on a phantom suite.
    LearnPrior {
        /// Suite directory containing manifest.json.
        dataset: PathBuf,
        #[command(flatten)]
        prior: PriorSource,
        #[command(flatten)]
        fit: FitFlags,
        /// Directory for prior.pwv and the per-case reports.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Apply a parameter file to a volume or label map.
    Warp {
        volume: PathBuf,
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two label maps with DSC, HD95 and NSD.
    Eval {
        a: PathBuf,
        b: PathBuf,
        /// NSD tolerance in mm.
        #[arg(long)]
        tau: Option<f64>,
        /// Voxel spacing `sh,sw,sd` in mm; defaults to the first map's own.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        spacing: Option<Vec<f64>>,
        /// Number of foreground classes; defaults to the largest label present.
        #[arg(long)]
        classes: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct PriorSource {
    /// Prior logits (PWV1, f32) with an optional `.json` sidecar.
    #[arg(long, conflicts_with = "prior_labels")]
    prior: Option<PathBuf>,
    /// Label map turned into a prior by signed distance.
    #[arg(long)]
    prior_labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitFlags {
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Argument(e.to_string()))?;
    }
    let mut cfg = match (&cli.config, cli.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(p)) => RunConfig::with_preset(p),
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.fit.seed = seed;
        cfg.phantom.seed = seed;
    }
    match &cli.command {
        Some(Command::Fit { fit, .. }) | Some(Command::LearnPrior { fit, .. }) => apply_fit_flags(&mut cfg, fit),
        Some(Command::Phantom {
            cases,
            max_theta,
            max_delta,
            ..
        }) => {
            if let Some(n) = cases {
                cfg.phantom.n_cases = *n;
            }
            if let Some(t) = max_theta {
                cfg.phantom.max_theta = *t;
            }
            if let Some(d) = max_delta {
                cfg.phantom.max_delta = *d;
            }
        }
        Some(Command::Eval { tau: Some(t), .. }) => cfg.metrics.tau = *t,
        _ => {}
    }
    cfg.validate()?;
    if cli.show_config {
        return emit(&serde_json::to_value(&cfg).expect("config serializes"));
    }
    match cli.command {
        None => Err(Error::Argument("no command given; see --help".into())),
        Some(Command::Phantom { out, .. }) => cmd_phantom(&cfg, &out),
        Some(Command::Fit { target, prior, out, .. }) => cmd_fit(&cfg, &target, &prior, &out),
        Some(Command::LearnPrior { dataset, prior, out, .. }) => cmd_learn_prior(&cfg, &dataset, &prior, &out),
        Some(Command::Warp { volume, params, out }) => cmd_warp(&volume, &params, &out),
        Some(Command::Eval {
            a, b, spacing, classes, ..
        }) => cmd_eval(&cfg, &a, &b, spacing, classes),
    }
}

fn apply_fit_flags(cfg: &mut RunConfig, f: &FitFlags) {
    if let Some(n) = f.iters {
        cfg.fit.iters = n;
        cfg.fit.warmup_iters = cfg.fit.warmup_iters.min(n);
    }
    if let Some(g) = f.gamma {
        cfg.fit.gamma = g;
    }
    if let Some(lr) = f.lr {
        cfg.fit.lr_params = lr;
    }
}

fn emit(value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    match writeln!(io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn read_labels(path: &Path) -> Result<LabelMap> {
    read_volume(path)?.into_labels()
}

fn load_prior(cfg: &RunConfig, src: &PriorSource, c_cls: usize, reference: &LabelMap) -> Result<AnatomicalPrior> {
    let prior = match (&src.prior, &src.prior_labels) {
        (Some(p), _) => AnatomicalPrior::load(p)?,
        (None, Some(l)) => {
            let labels = read_labels(l)?;
            cfg.fit.prior_from_labels(&labels, c_cls.max(labels.max_label() as usize))?
        }
        (None, None) => init_prior(c_cls, reference.dims(), cfg.fit.seed)?,
    };
    if prior.dims() != reference.dims() {
        return Err(Error::Argument(format!(
            "prior dims {:?} differ from target dims {:?}",
            prior.dims().as_array(),
            reference.dims().as_array()
        )));
    }
    Ok(prior)
}

fn cmd_phantom(cfg: &RunConfig, out: &Path) -> Result<()> {
    let manifest = make_suite(&cfg.phantom, out)?;
    eprintln!("wrote {} cases to {}", manifest.cases.len(), out.display());
    emit(&serde_json::to_value(&manifest).expect("manifest serializes"))
}

fn cmd_fit(cfg: &RunConfig, target: &Path, src: &PriorSource, out: &Path) -> Result<()> {
    let target = read_labels(target)?;
    let c_cls = match &src.prior {
        Some(p) => AnatomicalPrior::load(p)?.c_cls(),
        None => (target.max_label() as usize).max(1),
    };
    let prior = load_prior(cfg, src, c_cls, &target)?;
    let sys = TpsSystem::lattice(cfg.fit.grid, target.dims())?;
    let report = fit_case(&target, &prior, &sys, &cfg.fit)?;

    fs::create_dir_all(out)?;
    let params = DeformParams {
        theta: report.theta.clone(),
        delta: report.delta.clone(),
        grid: report.grid.into(),
    };
    params.save(out.join("params.json"))?;
    let deformed = deform_prior(&prior, &sys, &report.theta, &report.delta)?;
    write_volume(&VolumeFile::Volume(deformed), out.join("deformed.pwv"))?;
    fs::write(out.join("trail.csv"), report.trail_csv())?;

    eprintln!("initial mean DSC {:.4}", report.initial_dice);
    eprint!("{}", report.final_metrics.table());
    emit(&serde_json::to_value(&report).expect("report serializes"))
}

fn cmd_learn_prior(cfg: &RunConfig, dataset: &Path, src: &PriorSource, out: &Path) -> Result<()> {
    let (manifest, cases) = load_suite(dataset)?;
    let c_cls = manifest.spec.c_cls;
    let prior = load_prior(cfg, src, c_cls, &cases[0])?;
    let sys = TpsSystem::lattice(cfg.fit.grid, cases[0].dims())?;
    let outcome = learn_prior(&cases, &prior, &sys, &cfg.fit)?;

    fs::create_dir_all(out)?;
    outcome.prior.save(out.join("prior.pwv"))?;
    eprintln!(
        "mean DSC {:.4} -> {:.4} over {} cases",
        outcome.initial_mean_dice,
        outcome.final_mean_dice,
        cases.len()
    );
    emit(&json!({
        "prior": out.join("prior.pwv"),
        "initial_mean_dice": outcome.initial_mean_dice,
        "final_mean_dice": outcome.final_mean_dice,
        "reports": outcome.reports,
    }))
}

fn cmd_warp(volume: &Path, params: &Path, out: &Path) -> Result<()> {
    let params = DeformParams::load(params)?;
    let warped = match read_volume(volume)? {
        VolumeFile::Volume(v) => VolumeFile::Volume(params.apply(&v)?),
        VolumeFile::Labels(l) => VolumeFile::Labels(params.apply_labels(&l)?),
    };
    write_volume(&warped, out)?;
    emit(&json!({ "output": out }))
}

fn cmd_eval(cfg: &RunConfig, a: &Path, b: &Path, spacing: Option<Vec<f64>>, classes: Option<usize>) -> Result<()> {
    let a = read_labels(a)?;
    let b = read_labels(b)?;
    let spacing = match spacing {
        Some(s) => [s[0], s[1], s[2]],
        None => cfg.metrics.spacing.unwrap_or(a.spacing()),
    };
    let c_cls = classes.unwrap_or_else(|| a.max_label().max(b.max_label()) as usize);
    let report = metrics::evaluate(&a, &b, c_cls, cfg.metrics.tau, spacing)?;
    eprint!("{}", report.table());
    emit(&serde_json::to_value(&report).expect("report serializes"))
}
