use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use lanegvf::datagen::{collect_dataset, load_dataset, save_dataset, Dataset};
use lanegvf::eval::{self, ReportRow};
use lanegvf::geometry::write_track_file;
use lanegvf::gvf::{self, gvf_from_checkpoint, write_training_csv, GvfLearner};
use lanegvf::nn::Checkpoint;
use lanegvf::policy::{
    train_bcq_on_psi, train_e2e_bcq, train_gvf_ddpg, Bcq, Controller, Ddpg, E2eBcqController, GvfBcqController,
    GvfDdpgController, PursuitController,
};
use lanegvf::run::{build_tracks, evaluate_on_tracks, resolve_run_dir, RunConfig, RunLayout, RUN_ROOT_ENV};
use lanegvf::{catalog, sim::Track};

#[derive(Parser, Debug)]
#[command(name = "lanegvf", version, about = "GVF predictive-state lane keeping: data, training, evaluation")]
struct Cli {
    /// TOML run config. Defaults to `<run-dir>/config.toml` when that exists.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; relative paths resolve under $LANEGVF_RUN_ROOT.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config override, e.g. `--set gvf.lr=1e-4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write waypoint files for every catalog layout.
    Tracks,
    /// Collect the offline dataset with the noisy pursuit driver.
    Collect,
    /// Train the GVF predictor offline on the dataset.
    TrainGvf,
    /// Train offline BCQ over predictive states (`gvf`) or raw observations (`e2e`).
    TrainBcq {
        #[arg(long, value_enum, default_value = "gvf")]
        method: BcqMethod,
    },
    /// Train GVF-DDPG online on the training tracks.
    TrainDdpg,
    /// Evaluate trained controllers on the test tracks.
    Eval {
        /// Methods to evaluate; defaults to every trained one plus the pursuit oracle.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        /// Also evaluate on tracks with damaged markings.
        #[arg(long)]
        damaged: bool,
    },
    /// Merge the reports of several run directories.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Print the resolved config.
    Config,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum BcqMethod {
    Gvf,
    E2e,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Method {
    GvfBcq,
    E2eBcq,
    GvfDdpg,
    Pursuit,
}

enum Failure {
    /// Bad arguments, config or missing inputs; exit 2.
    Usage(String),
    /// A training or evaluation invariant failed; exit 1.
    Invariant(String),
}

type Res<T> = Result<T, Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn invariant(e: impl std::fmt::Display) -> Failure {
    Failure::Invariant(e.to_string())
}

fn require(path: &Path, what: &str, hint: &str) -> Res<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("missing {what} at {} (run `{hint}` first)", path.display())))
    }
}

fn resolve(cli: &Cli) -> Res<RunConfig> {
    let root = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from);
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    let dir_flag = cli.run_dir.as_ref().map(|d| resolve_run_dir(d, root.as_deref()));
    let file = match (&cli.config, &dir_flag) {
        (Some(f), _) => Some(f.clone()),
        (None, Some(d)) if d.join("config.toml").exists() => Some(d.join("config.toml")),
        _ => None,
    };
    let base = match file {
        Some(f) => {
            let text = fs::read_to_string(&f).map_err(|e| usage(format!("{}: {e}", f.display())))?;
            RunConfig::from_toml(&text).map_err(|e| usage(format!("{}: {e}", f.display())))?
        }
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&overrides).map_err(usage)?;
    cfg.out_dir = match dir_flag {
        Some(d) => d,
        None => resolve_run_dir(&cfg.out_dir, root.as_deref()),
    };
    let cfg = cfg.seeded();
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn prepare(cfg: &RunConfig) -> Res<RunLayout> {
    let layout = RunLayout::new(&cfg.out_dir);
    fs::create_dir_all(&layout.root).map_err(invariant)?;
    fs::write(layout.config(), cfg.to_toml()).map_err(invariant)?;
    Ok(layout)
}

fn load_ds(layout: &RunLayout) -> Res<Dataset> {
    require(&layout.dataset(), "dataset", "lanegvf collect")?;
    load_dataset(&layout.dataset()).map_err(usage)
}

fn read_ck(path: &Path, what: &str, hint: &str) -> Res<Checkpoint> {
    require(path, what, hint)?;
    Checkpoint::read(File::open(path).map_err(invariant)?).map_err(usage)
}

fn write_ck(path: &Path, ck: &Checkpoint) -> Res<()> {
    ck.write(BufWriter::new(File::create(path).map_err(invariant)?)).map_err(invariant)
}

fn write_csv<T: serde::Serialize>(path: &Path, rows: &[T]) -> Res<()> {
    write_training_csv(File::create(path).map_err(invariant)?, rows).map_err(invariant)
}

fn cmd_tracks(cfg: &RunConfig) -> Res<()> {
    let layout = prepare(cfg)?;
    let dir = layout.tracks();
    fs::create_dir_all(&dir).map_err(invariant)?;
    let names: Vec<String> = catalog::all_names().map(String::from).collect();
    let mut index = csv::Writer::from_path(dir.join("index.csv")).map_err(invariant)?;
    index.write_record(["name", "split", "waypoints", "length", "crossings"]).map_err(invariant)?;
    for (name, t) in build_tracks(&names, None).map_err(usage)? {
        write_track_file(File::create(dir.join(format!("{name}.csv"))).map_err(invariant)?, &t.path, t.half_width)
            .map_err(invariant)?;
        let split = if catalog::TEST_TRACKS.contains(&name.as_str()) { "test" } else { "train" };
        index
            .write_record([
                name.clone(),
                split.into(),
                t.path.len().to_string(),
                format!("{:.4}", t.path.length()),
                t.path.crossing_regions().len().to_string(),
            ])
            .map_err(invariant)?;
    }
    index.flush().map_err(invariant)?;
    eprintln!("wrote {} layouts to {}", names.len(), dir.display());
    Ok(())
}

fn cmd_collect(cfg: &RunConfig) -> Res<()> {
    let layout = prepare(cfg)?;
    let tracks = build_tracks(&cfg.train_tracks, None).map_err(usage)?;
    let ds = collect_dataset(&tracks, cfg.episodes, cfg.seed, &cfg.collect).map_err(invariant)?;
    save_dataset(&layout.dataset(), &ds).map_err(invariant)?;
    eprintln!("collected {} transitions into {}", ds.len(), layout.dataset().display());
    Ok(())
}

fn cmd_train_gvf(cfg: &RunConfig) -> Res<()> {
    let layout = RunLayout::new(&cfg.out_dir);
    let ds = load_ds(&layout)?;
    prepare(cfg)?;
    let steps = cfg.budget.gvf_steps();
    let mut learner = GvfLearner::for_lane(cfg.gvf.clone(), &ds.header.grid).map_err(usage)?;
    learner.log_every = (steps / 100).max(1) as u64;
    gvf::train_offline_dataset(&mut learner, &ds, steps).map_err(invariant)?;
    write_ck(&layout.gvf(), &learner.checkpoint())?;
    write_csv(&layout.gvf_log(), &learner.log)?;
    eprintln!("trained GVFs for {steps} updates");
    Ok(())
}

fn cmd_train_bcq(cfg: &RunConfig, method: BcqMethod) -> Res<()> {
    let layout = RunLayout::new(&cfg.out_dir);
    let ds = load_ds(&layout)?;
    let (name, bcq, log) = match method {
        BcqMethod::Gvf => {
            let (gvf, _) = gvf_from_checkpoint(&read_ck(&layout.gvf(), "GVF checkpoint", "lanegvf train-gvf")?)
                .map_err(usage)?;
            prepare(cfg)?;
            let steps = cfg.budget.bcq_steps();
            let (b, l) = train_bcq_on_psi(&ds, &gvf, cfg.bcq.clone(), steps, (steps / 100).max(1)).map_err(invariant)?;
            ("gvf_bcq", b, l)
        }
        BcqMethod::E2e => {
            prepare(cfg)?;
            let steps = cfg.budget.steps;
            let (b, l) = train_e2e_bcq(&ds, cfg.bcq.clone(), steps, (steps / 100).max(1)).map_err(invariant)?;
            ("e2e_bcq", b, l)
        }
    };
    write_ck(&layout.bcq(name), &bcq.checkpoint(name, serde_json::Value::Null))?;
    write_csv(&layout.bcq_log(name), &log)?;
    eprintln!("trained {name} for {} updates", bcq.steps());
    Ok(())
}

fn cmd_train_ddpg(cfg: &RunConfig) -> Res<()> {
    let layout = prepare(cfg)?;
    let tracks: Vec<Arc<Track>> = build_tracks(&cfg.train_tracks, None).map_err(usage)?.into_iter().map(|(_, t)| t).collect();
    let (learner, ddpg, log) =
        train_gvf_ddpg(&tracks, &cfg.collect.sim, cfg.gvf.clone(), cfg.ddpg.clone(), cfg.budget.ddpg_steps).map_err(invariant)?;
    write_ck(&layout.ddpg_gvf(), &learner.checkpoint())?;
    write_ck(&layout.ddpg(), &ddpg.checkpoint())?;
    write_csv(&layout.ddpg_log(), &log)?;
    eprintln!("trained gvf_ddpg for {} environment steps, {} episodes", cfg.budget.ddpg_steps, log.len());
    Ok(())
}

fn controller(layout: &RunLayout, cfg: &RunConfig, m: Method) -> Res<Box<dyn Controller>> {
    Ok(match m {
        Method::Pursuit => Box::new(PursuitController::new(cfg.collect.target_spacing, cfg.eval.max_speed)),
        Method::GvfBcq => {
            let (gvf, _) =
                gvf_from_checkpoint(&read_ck(&layout.gvf(), "GVF checkpoint", "lanegvf train-gvf")?).map_err(usage)?;
            let ck = read_ck(&layout.bcq("gvf_bcq"), "GVF-BCQ checkpoint", "lanegvf train-bcq --method gvf")?;
            Box::new(GvfBcqController {
                gvf,
                bcq: Bcq::from_checkpoint(&ck).map_err(usage)?,
            })
        }
        Method::E2eBcq => {
            let ck = read_ck(&layout.bcq("e2e_bcq"), "E2E-BCQ checkpoint", "lanegvf train-bcq --method e2e")?;
            Box::new(E2eBcqController {
                bcq: Bcq::from_checkpoint(&ck).map_err(usage)?,
            })
        }
        Method::GvfDdpg => {
            let (gvf, _) = gvf_from_checkpoint(&read_ck(&layout.ddpg_gvf(), "GVF-DDPG predictor", "lanegvf train-ddpg")?)
                .map_err(usage)?;
            let ck = read_ck(&layout.ddpg(), "GVF-DDPG checkpoint", "lanegvf train-ddpg")?;
            Box::new(GvfDdpgController {
                gvf,
                ddpg: Ddpg::from_checkpoint(&ck).map_err(usage)?,
            })
        }
    })
}

fn cmd_eval(cfg: &RunConfig, methods: &[Method], damaged: bool) -> Res<()> {
    let layout = RunLayout::new(&cfg.out_dir);
    let methods: Vec<Method> = if methods.is_empty() {
        let trained = [
            (Method::GvfBcq, layout.bcq("gvf_bcq")),
            (Method::E2eBcq, layout.bcq("e2e_bcq")),
            (Method::GvfDdpg, layout.ddpg()),
        ];
        trained.into_iter().filter(|(_, p)| p.exists()).map(|(m, _)| m).chain([Method::Pursuit]).collect()
    } else {
        methods.to_vec()
    };
    let mut ctrls = methods.iter().map(|&m| controller(&layout, cfg, m)).collect::<Res<Vec<_>>>()?;
    prepare(cfg)?;
    let mut suites = vec![(false, build_tracks(&cfg.test_tracks, None).map_err(usage)?)];
    if damaged {
        suites.push((true, build_tracks(&cfg.test_tracks, Some(cfg.seed)).map_err(usage)?));
    }
    let traj_dir = layout.report().join("trajectories");
    fs::create_dir_all(&traj_dir).map_err(invariant)?;
    let mut rows: Vec<ReportRow> = Vec::new();
    for ctrl in ctrls.iter_mut() {
        for (dmg, tracks) in &suites {
            for (row, traj) in
                evaluate_on_tracks(ctrl.as_mut(), tracks, &cfg.eval_sim(), &cfg.eval, cfg.seed, *dmg).map_err(invariant)?
            {
                let file = format!(
                    "{}_{}_{}{}.csv",
                    row.method,
                    row.track,
                    row.direction,
                    if row.damaged { "_damaged" } else { "" }
                );
                eval::write_trajectory(File::create(traj_dir.join(file)).map_err(invariant)?, &traj).map_err(invariant)?;
                eprintln!(
                    "{:8} {:18} {:3}{} reward/s {:.3} out_of_lane {}",
                    row.method,
                    row.track,
                    row.direction,
                    if row.damaged { " damaged" } else { "" },
                    row.reward_per_sec,
                    row.out_of_lane
                );
                rows.push(row);
            }
        }
    }
    eval::write_report(&layout.report(), &rows).map_err(invariant)?;
    Ok(())
}

fn cmd_report(out: &Path, runs: &[PathBuf]) -> Res<()> {
    let root = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from);
    let mut rows = Vec::new();
    for r in runs {
        let path = RunLayout::new(resolve_run_dir(r, root.as_deref())).report().join("episodes.csv");
        require(&path, "report", "lanegvf eval")?;
        rows.extend(eval::read_rows(File::open(&path).map_err(invariant)?).map_err(usage)?);
    }
    eval::write_report(out, &rows).map_err(invariant)?;
    eprintln!("merged {} rows from {} runs into {}", rows.len(), runs.len(), out.display());
    Ok(())
}

fn run(cli: &Cli) -> Res<()> {
    if let Command::Report { out, runs } = &cli.cmd {
        return cmd_report(out, runs);
    }
    let cfg = resolve(cli)?;
    match &cli.cmd {
        Command::Tracks => cmd_tracks(&cfg),
        Command::Collect => cmd_collect(&cfg),
        Command::TrainGvf => cmd_train_gvf(&cfg),
        Command::TrainBcq { method } => cmd_train_bcq(&cfg, *method),
        Command::TrainDdpg => cmd_train_ddpg(&cfg),
        Command::Eval { methods, damaged } => cmd_eval(&cfg, methods, *damaged),
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::Report { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Invariant(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
