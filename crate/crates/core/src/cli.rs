use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use styleshift::data::{gen_dataset, Dataset, DatasetSpec, ImbalanceSpec, Split};
use styleshift::experiment::{
    evaluate_run, registry_for, resolve, run_one, train_run, DatasetSource, ExperimentConfig, Plan,
    ResultRow, Run,
};
use styleshift::net::train::LabeledSet;
use styleshift::net::{hook_index, MicroNet};
use styleshift::report;
use styleshift::shift::{DomainRegistry, ShiftMode, DEFAULT_ALPHA, PSEUDO_LABEL_ALPHA};
use styleshift::Error;

/// Style balancing and test-time style shifting experiments on a synthetic
/// multi-domain dataset.
#[derive(Debug, Parser)]
#[command(name = "styleshift", version)]
pub struct Cli {
    /// Root for every relative input and output path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset: manifest.json plus images.
    GenData {
        /// Dataset spec JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one network; writes the checkpoint, the balancing audit, the
    /// per-epoch log and the manifest of the data it saw.
    Train {
        /// Experiment config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Network checkpoint JSON.
        #[arg(long)]
        out_checkpoint: PathBuf,
        /// JSON lines, one per balanced class and batch. Default: <checkpoint>.audit.jsonl
        #[arg(long)]
        audit_log: Option<PathBuf>,
        /// Default: <checkpoint>.epochs.csv
        #[arg(long)]
        epoch_log: Option<PathBuf>,
        /// Training manifest for `stats` and `eval`. Default: <checkpoint>.manifest.json
        #[arg(long)]
        out_manifest: Option<PathBuf>,
        /// Target domain under leave-one-domain-out; default the first configured.
        #[arg(long)]
        target: Option<String>,
        /// Default: the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build the style registry of the training domains at one hook.
    Stats {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest written by `train`.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "block2")]
        layer: String,
        /// Default 3, or 2 with pseudo labels.
        #[arg(long)]
        alpha: Option<f64>,
        /// Cluster the training styles into this many pseudo domains.
        #[arg(long)]
        pseudo_labels: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_registry: PathBuf,
    },
    /// Evaluate on the held-out domains of a training manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        /// Manifest written by `train`.
        #[arg(long)]
        dataset: PathBuf,
        /// off | proposed | shift-all | nearest-sample[:N] | single-domain
        #[arg(long, default_value = "proposed")]
        mode: String,
        /// Default: the registry's.
        #[arg(long)]
        alpha: Option<f64>,
        /// Method column; default Baseline, TS or TS-<mode>.
        #[arg(long)]
        method: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_csv: PathBuf,
    },
    /// Train and evaluate every configured target and seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_csv: PathBuf,
    },
    /// Like `run`, once per value of one parameter; one row per value, seed and target.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out_csv: PathBuf,
    },
    /// Grouped means over seeds plus a line chart.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        in_csv: Vec<PathBuf>,
        /// Default: <first input>.summary.csv
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long)]
        out_svg: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepParam {
    Alpha,
    KeepFraction,
}

/// Exit status 2: bad inputs. Exit status 3: failure while working.
enum Failure {
    Config(Error),
    Runtime(Error),
}

type Outcome<T> = std::result::Result<T, Failure>;

trait Stage<T> {
    /// Anything going wrong here is the caller's input.
    fn input(self) -> Outcome<T>;
    fn work(self) -> Outcome<T>;
}

impl<T> Stage<T> for styleshift::Result<T> {
    fn input(self) -> Outcome<T> {
        self.map_err(Failure::Config)
    }

    fn work(self) -> Outcome<T> {
        self.map_err(|e| {
            if e.is_config() {
                Failure::Config(e)
            } else {
                Failure::Runtime(e)
            }
        })
    }
}

fn config_error<T>(msg: impl Into<String>) -> Outcome<T> {
    Err(Failure::Config(Error::Config(msg.into())))
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(cli: &Cli) -> Outcome<()> {
    let wd = &cli.workdir;
    let p = |path: &Path| resolve(wd, path);
    match &cli.command {
        Command::GenData { config, out, seed } => gen_data(&p(config), &p(out), *seed),
        Command::Train {
            config,
            out_checkpoint,
            audit_log,
            epoch_log,
            out_manifest,
            target,
            seed,
        } => {
            let ckpt = p(out_checkpoint);
            let or_beside = |given: &Option<PathBuf>, ext: &str| match given {
                Some(path) => p(path),
                None => ckpt.with_extension(ext),
            };
            train_cmd(
                wd,
                &p(config),
                &ckpt,
                &or_beside(audit_log, "audit.jsonl"),
                &or_beside(epoch_log, "epochs.csv"),
                &or_beside(out_manifest, "manifest.json"),
                target.as_deref(),
                *seed,
            )
        }
        Command::Stats {
            checkpoint,
            dataset,
            layer,
            alpha,
            pseudo_labels,
            seed,
            out_registry,
        } => stats_cmd(
            &p(checkpoint),
            &p(dataset),
            layer,
            *alpha,
            *pseudo_labels,
            *seed,
            &p(out_registry),
        ),
        Command::Eval {
            checkpoint,
            registry,
            dataset,
            mode,
            alpha,
            method,
            seed,
            out_csv,
        } => eval_cmd(
            &p(checkpoint),
            &p(registry),
            &p(dataset),
            mode,
            *alpha,
            method.as_deref(),
            *seed,
            &p(out_csv),
        ),
        Command::Run { config, out_csv } => run_cmd(wd, &p(config), &p(out_csv)),
        Command::Sweep {
            config,
            param,
            values,
            out_csv,
        } => sweep_cmd(wd, &p(config), *param, values, &p(out_csv)),
        Command::Report {
            in_csv,
            out_csv,
            out_svg,
        } => {
            let inputs: Vec<PathBuf> = in_csv.iter().map(|x| p(x)).collect();
            let out_csv = match out_csv {
                Some(x) => p(x),
                None => inputs[0].with_extension("summary.csv"),
            };
            report_cmd(&inputs, &out_csv, &p(out_svg))
        }
    }
}

fn gen_data(config: &Path, out: &Path, seed: Option<u64>) -> Outcome<()> {
    let mut spec = DatasetSpec::load(config).input()?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let ds = gen_dataset(&spec).input()?;
    ds.save(out).work()?;
    println!(
        "wrote {} samples to {}",
        ds.manifest.samples.len(),
        out.display()
    );
    Ok(())
}

fn load_experiment(wd: &Path, config: &Path) -> Outcome<(ExperimentConfig, Dataset, Plan)> {
    let cfg = ExperimentConfig::load(config).input()?;
    let ds = cfg.dataset(wd).input()?;
    let plan = cfg.validate(&ds).input()?;
    Ok((cfg, ds, plan))
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    wd: &Path,
    config: &Path,
    ckpt: &Path,
    audit_path: &Path,
    epoch_path: &Path,
    manifest_path: &Path,
    target: Option<&str>,
    seed: Option<u64>,
) -> Outcome<()> {
    let (cfg, ds, plan) = load_experiment(wd, config)?;
    let run = match target {
        None => plan.runs[0].clone(),
        Some(name) => {
            let t = ds.manifest.domains.iter().position(|d| d == name);
            match plan
                .runs
                .iter()
                .find(|r| t.is_some_and(|t| r.targets.contains(&t)))
            {
                Some(r) => r.clone(),
                None => return config_error(format!("{name:?} is not a configured target")),
            }
        }
    };
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let image_root = match &cfg.dataset {
        DatasetSource::Manifest(m) => absolute(resolve(wd, m).parent().unwrap_or(Path::new(".")))?,
        DatasetSource::Generate(_) => {
            let dir = ckpt.with_extension("data");
            ds.save(&dir).work()?;
            absolute(&dir)?
        }
    };

    let start = Instant::now();
    let trained = train_run(&cfg, &plan, &ds, &run, seed).work()?;
    let secs = start.elapsed().as_secs_f64();

    trained.net.save(ckpt).work()?;
    let mut audit = String::new();
    for line in &trained.audit {
        audit.push_str(line);
        audit.push('\n');
    }
    write_file(audit_path, audit)?;
    let mut w = csv::Writer::from_path(epoch_path).map_err(|e| Failure::Runtime(e.into()))?;
    for m in &trained.metrics {
        w.serialize(m).map_err(|e| Failure::Runtime(e.into()))?;
    }
    w.flush()
        .map_err(|e| Failure::Runtime(io_error(epoch_path, e)))?;
    let mut manifest = trained.manifest.clone();
    for s in &mut manifest.samples {
        s.path = image_root.join(&s.path).to_string_lossy().into_owned();
    }
    manifest.save(manifest_path).work()?;
    sidecar(ckpt, &format!("train seed={seed} wall_time={secs:.3}s\n"))?;
    if let Some(last) = trained.metrics.last() {
        println!(
            "after {} epochs: loss {:.4}, train accuracy {:.4}; {} balancing plans",
            last.epoch + 1,
            last.loss,
            last.accuracy,
            trained.audit.len()
        );
    }
    Ok(())
}

/// Training split of the manifest's source (non held-out) domains, with
/// domain ids renumbered in ascending order.
fn source_train_set(ds: &Dataset) -> Outcome<(LabeledSet, Vec<usize>, Vec<String>)> {
    let sources: Vec<usize> = (0..ds.manifest.num_domains())
        .filter(|d| !ds.manifest.held_out.contains(d))
        .collect();
    let idx = ds.select(Split::Train, &sources);
    let set = ds.labeled(&idx, &sources).input()?;
    let names = sources
        .iter()
        .map(|&d| {
            ds.manifest
                .domains
                .get(d)
                .cloned()
                .unwrap_or_else(|| format!("domain{d}"))
        })
        .collect();
    Ok((set, sources, names))
}

fn stats_cmd(
    ckpt: &Path,
    dataset: &Path,
    layer: &str,
    alpha: Option<f64>,
    pseudo: Option<usize>,
    seed: u64,
    out: &Path,
) -> Outcome<()> {
    let net = MicroNet::load(ckpt).input()?;
    let ds = Dataset::load(dataset).input()?;
    let hook = hook_index(layer, net.config()).input()?;
    let alpha = alpha.unwrap_or(if pseudo.is_some() {
        PSEUDO_LABEL_ALPHA
    } else {
        DEFAULT_ALPHA
    });
    if alpha.is_nan() || alpha < 0.0 {
        return config_error(format!("alpha {alpha} must be nonnegative"));
    }
    if pseudo == Some(0) {
        return config_error("--pseudo-labels must be at least 1");
    }
    let (set, _, names) = source_train_set(&ds)?;
    let reg = registry_for(&net, &set, &names, hook, alpha, pseudo, seed).work()?;
    reg.save(out).work()?;
    println!(
        "layer {} alpha {} spread {:.6}",
        reg.layer(),
        reg.alpha(),
        reg.spread()
    );
    for d in reg.domains() {
        let norm = d.style.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("  {}: centroid norm {:.6}", d.name, norm);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    ckpt: &Path,
    registry: &Path,
    dataset: &Path,
    mode: &str,
    alpha: Option<f64>,
    method: Option<&str>,
    seed: u64,
    out: &Path,
) -> Outcome<()> {
    let net = MicroNet::load(ckpt).input()?;
    let reg = DomainRegistry::load(registry).input()?;
    let ds = Dataset::load(dataset).input()?;
    let mode: ShiftMode = mode.parse().input()?;
    let hook = hook_index(reg.layer(), net.config()).input()?;
    let channels = net.config().hook_shape(hook).0;
    if reg.channels() != channels {
        return config_error(format!(
            "registry has {} channels but hook {} has {channels}",
            reg.channels(),
            reg.layer()
        ));
    }
    let alpha = alpha.unwrap_or(reg.alpha());
    if alpha.is_nan() || alpha < 0.0 {
        return config_error(format!("alpha {alpha} must be nonnegative"));
    }
    if mode == ShiftMode::SingleDomain && reg.num_domains() != 1 {
        return config_error(format!(
            "single-domain mode needs a one-domain registry; this one has {}",
            reg.num_domains()
        ));
    }
    if ds.manifest.held_out.is_empty() {
        return config_error("the manifest has no held-out domains to evaluate");
    }
    let (pool_from, sources, _) = source_train_set(&ds)?;
    let run = Run {
        sources,
        targets: ds.manifest.held_out.clone(),
    };
    let label = match method {
        Some(m) => m.to_string(),
        None => match mode {
            ShiftMode::Off => "Baseline".into(),
            ShiftMode::Proposed => "TS".into(),
            m => format!("TS-{m}"),
        },
    };
    let start = Instant::now();
    let mut rows = evaluate_run(
        &label, &ds, &net, &pool_from, &reg, &run, hook, mode, alpha, seed,
    )
    .work()?;
    let secs = start.elapsed().as_secs_f64();
    for r in &mut rows {
        r.wall_time = secs;
    }
    finish_rows(out, &rows)
}

fn run_cmd(wd: &Path, config: &Path, out: &Path) -> Outcome<()> {
    let (cfg, ds, plan) = load_experiment(wd, config)?;
    let jobs: Vec<(&Run, u64)> = plan
        .runs
        .iter()
        .flat_map(|r| cfg.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let rows = parallel(&jobs, |&(run, seed)| {
        run_one(&cfg, &plan, &ds, run, seed, None)
    })?;
    finish_rows(out, &rows.concat())
}

fn sweep_cmd(
    wd: &Path,
    config: &Path,
    param: SweepParam,
    values: &[f64],
    out: &Path,
) -> Outcome<()> {
    let (cfg, ds, plan) = load_experiment(wd, config)?;
    let rows = match param {
        SweepParam::Alpha => {
            if let Some(a) = values.iter().find(|a| a.is_nan() || **a < 0.0) {
                return config_error(format!("alpha {a} must be nonnegative"));
            }
            if plan.mode == ShiftMode::Off {
                return config_error("an alpha sweep needs a test-time shift mode other than off");
            }
            let jobs: Vec<(&Run, u64)> = plan
                .runs
                .iter()
                .flat_map(|r| cfg.seeds.iter().map(move |&s| (r, s)))
                .collect();
            let per_job = parallel(&jobs, |&(run, seed)| {
                run_one(&cfg, &plan, &ds, run, seed, Some(values))
            })?;
            // Order by value, then job.
            let mut rows = Vec::new();
            for v in values {
                let tag = v.to_string();
                for job in &per_job {
                    rows.extend(job.iter().filter(|r| r.value == tag).cloned());
                }
            }
            rows
        }
        SweepParam::KeepFraction => {
            let mut variants = Vec::new();
            for &v in values {
                let mut c = cfg.clone();
                c.imbalance = ImbalanceSpec::DataImbalance { keep_fraction: v };
                let p = c.validate(&ds).input()?;
                variants.push((v, c, p));
            }
            let seeds = &cfg.seeds;
            let jobs: Vec<(usize, &Run, u64)> = variants
                .iter()
                .enumerate()
                .flat_map(|(i, (_, _, p))| {
                    p.runs
                        .iter()
                        .flat_map(move |r| seeds.iter().map(move |&s| (i, r, s)))
                })
                .collect();
            let per_job = parallel(&jobs, |&(i, run, seed)| {
                let (v, c, p) = &variants[i];
                let rows = run_one(c, p, &ds, run, seed, None)?;
                let keep = c.method_label(p.mode);
                Ok(rows
                    .into_iter()
                    .filter(|r| r.method == keep)
                    .map(|mut r| {
                        r.param = "keep_fraction".into();
                        r.value = v.to_string();
                        r
                    })
                    .collect::<Vec<_>>())
            })?;
            per_job.concat()
        }
    };
    finish_rows(out, &rows)
}

fn report_cmd(inputs: &[PathBuf], out_csv: &Path, out_svg: &Path) -> Outcome<()> {
    let mut rows = Vec::new();
    for path in inputs {
        rows.extend(report::read_rows(path).input()?);
    }
    let groups = report::group_means(&rows);
    report::write_groups(out_csv, &groups).work()?;
    write_file(out_svg, report::render_svg(&groups))?;
    for g in &groups {
        println!(
            "{:<28} {:<10} {:>8} accuracy {:.4} shift rate {:.4} (n={})",
            g.method, g.target, g.value, g.accuracy, g.shift_rate, g.runs
        );
    }
    Ok(())
}

/// Runs `f` over `jobs` on up to `STYLESHIFT_THREADS` threads (default: all
/// cores). Results come back in job order; the first failing job's error
/// wins.
fn parallel<J: Sync, T: Send>(
    jobs: &[J],
    f: impl Fn(&J) -> styleshift::Result<T> + Sync,
) -> Outcome<Vec<T>> {
    let threads = worker_count()?.min(jobs.len()).max(1);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<styleshift::Result<T>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let out = f(&jobs[i]);
                *slots[i].lock().expect("slot lock") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| {
            s.into_inner()
                .expect("slot lock")
                .expect("every job ran")
                .work()
        })
        .collect()
}

fn worker_count() -> Outcome<usize> {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("STYLESHIFT_THREADS") {
        Err(_) => Ok(cores),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => config_error(format!(
                "STYLESHIFT_THREADS={v:?} is not a positive integer"
            )),
        },
    }
}

fn finish_rows(out: &Path, rows: &[ResultRow]) -> Outcome<()> {
    report::write_rows(out, rows).work()?;
    let mut log = String::new();
    for r in rows {
        let _ = writeln!(
            log,
            "{} {} seed={} {}={} wall_time={:.3}s",
            r.method, r.target, r.seed, r.param, r.value, r.wall_time
        );
    }
    sidecar(out, &log)?;
    for r in rows {
        info!(
            "{} {} seed {}: accuracy {:.4}, shift rate {:.4}",
            r.method, r.target, r.seed, r.accuracy, r.shift_rate
        );
    }
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

/// Timings and timestamps go to `<artifact>.timing.log` so the artifact
/// itself stays reproducible.
fn sidecar(artifact: &Path, body: &str) -> Outcome<()> {
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let mut path = artifact.as_os_str().to_owned();
    path.push(".timing.log");
    write_file(Path::new(&path), format!("# unix time {now}\n{body}"))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Outcome<()> {
    std::fs::write(path, contents).map_err(|e| Failure::Runtime(io_error(path, e)))
}

fn absolute(path: &Path) -> Outcome<PathBuf> {
    std::path::absolute(path).map_err(|e| Failure::Runtime(io_error(path, e)))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
