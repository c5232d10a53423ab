use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use nettsde::config::load_spec;
use nettsde::experiment::{run_experiment, trajectory_seed, ExperimentSpec};
use nettsde::netmodel::{build_model, MatrixSpec};
use nettsde::riccati::gains_for;
use nettsde::sim::{run_trajectory, Instance, SimError};
use nettsde::spectral::decompose_coupling;
use nettsde::{Error, ErrorKind};

#[derive(Parser, Debug)]
#[command(name = "net-tsde", version, about = "Learning-based control of network-coupled LQG systems")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named starting configuration.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Override a configuration key, e.g. `--set model.n=20`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, env = "NET_TSDE_OUT", default_value = "out")]
    out: PathBuf,
    /// Base seed; trajectory seeds are derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Meanfield,
    Lowrank,
    Fig2,
    Fig3,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Meanfield => "meanfield",
            Preset::Lowrank => "lowrank",
            Preset::Fig2 => "fig2",
            Preset::Fig3 => "fig3",
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check the standing assumptions of every model group.
    Validate,
    /// Solve the known-model problem and write the gains.
    Plan,
    /// Run one trajectory per group and write its cost trace and episode log.
    Simulate,
    /// Run the Monte-Carlo regret experiment.
    Experiment,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.assumption() {
                Some(a) => eprintln!("error: assumption {a} violated: {e}"),
                None => eprintln!("error: {e}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    if cli.jobs == Some(0) {
        return Err(nettsde::config::ConfigError::Key {
            key: "--jobs".into(),
            message: "must be at least 1".into(),
        }
        .into());
    }
    let mut spec = load_spec(cli.preset.map(Preset::name), cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        spec.base_seed = seed;
    }
    match cli.command {
        Command::Validate => validate(&spec),
        Command::Plan => plan(&spec, &cli.out),
        Command::Simulate => simulate(&spec, &cli.out),
        Command::Experiment => {
            let jobs = cli
                .jobs
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            experiment(&spec, &cli.out, jobs)
        }
    }
}

fn fmt_list(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", items.join(", "))
}

fn validate(spec: &ExperimentSpec) -> Result<(), Error> {
    let mut first_err = None;
    for (label, cfg) in spec.group_models()? {
        println!("group {label}");
        let model = match build_model(&cfg) {
            Ok(m) => m,
            Err(e) => {
                let e = Error::Model(e);
                if e.kind() != ErrorKind::Assumption {
                    return Err(e);
                }
                println!("  A2 (Q, R positive definite): FAILED ({e})");
                first_err.get_or_insert(e);
                continue;
            }
        };
        println!("  n = {}, dx = {}, du = {}", model.n(), model.dx(), model.du());
        println!("  A2 (Q, R positive definite): ok");
        let basis = match decompose_coupling(&model, &spec.spectral) {
            Ok(b) => b,
            Err(e) => {
                println!("  {}: FAILED ({e})", e.assumption());
                first_err.get_or_insert(Error::Spectral(e));
                continue;
            }
        };
        println!("  L = {}", basis.rank());
        println!("  spectrum = {}", fmt_list(basis.lambdas()));
        println!("  q_ell = {}, r_ell = {}", fmt_list(basis.q_ell()), fmt_list(basis.r_ell()));
        if basis.has_auxiliary() {
            println!("  q0 = {:.6}, r0 = {:.6}", basis.q0(), basis.r0());
        } else {
            println!("  no auxiliary subsystem (L = n)");
        }
        println!("  A3 (positive cost weights): ok");
        println!("  A5 (auxiliary component at every agent): {}", if basis.has_auxiliary() { "ok" } else { "waived" });
        let (aux, eigen) = nettsde::riccati::true_blocks(&model, &basis);
        match gains_for(&aux, &eigen, &basis, &model, &spec.dare) {
            Ok(_) => println!("  A1 (Riccati solvable, stable closed loop on every block): ok"),
            Err(e) => {
                println!("  A1 (Riccati solvable, stable closed loop on every block): FAILED ({e})");
                first_err.get_or_insert(Error::Riccati(e));
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn matrix_json(m: MatrixSpec) -> serde_json::Value {
    serde_json::to_value(m).expect("matrix serializes")
}

fn create_out(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn plan(spec: &ExperimentSpec, out: &Path) -> Result<(), Error> {
    let mut groups = Vec::new();
    for g in spec.prepare()? {
        let inst = &g.instance;
        let b = &inst.basis;
        println!("group {} (n = {}, L = {})", g.label, inst.model.n(), b.rank());
        if b.has_auxiliary() {
            println!("  aux     S = {}  G = {}", inst.gains.s_breve, inst.gains.g_breve);
        }
        for l in 0..b.rank() {
            println!(
                "  eigen{} (lambda = {:.6})  S = {}  G = {}",
                l + 1,
                b.lambdas()[l],
                inst.gains.s_ell[l],
                inst.gains.g_ell[l]
            );
        }
        println!("  J = {:.10}", inst.optimal_cost);
        groups.push(json!({
            "label": g.label,
            "n": inst.model.n(),
            "rank": b.rank(),
            "lambdas": b.lambdas(),
            "q_ell": b.q_ell(),
            "r_ell": b.r_ell(),
            "aux": b.has_auxiliary().then(|| json!({
                "S": matrix_json(MatrixSpec::from_matrix(&inst.gains.s_breve)),
                "G": matrix_json(MatrixSpec::from_matrix(&inst.gains.g_breve)),
            })),
            "eigen": (0..b.rank()).map(|l| json!({
                "S": matrix_json(MatrixSpec::from_matrix(&inst.gains.s_ell[l])),
                "G": matrix_json(MatrixSpec::from_matrix(&inst.gains.g_ell[l])),
            })).collect::<Vec<_>>(),
            "optimal_cost": inst.optimal_cost,
        }));
    }
    create_out(out)?;
    let path = out.join(format!("{}_plan.json", spec.name));
    let mut f = BufWriter::new(File::create(&path)?);
    serde_json::to_writer_pretty(&mut f, &json!({ "name": spec.name, "groups": groups }))?;
    writeln!(f)?;
    f.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn simulate(spec: &ExperimentSpec, out: &Path) -> Result<(), Error> {
    let groups = spec.prepare()?;
    create_out(out)?;
    let mut cfg = spec.trajectory_config();
    cfg.record_episodes = true;
    let seed = trajectory_seed(spec.base_seed, 0);
    for g in &groups {
        let inst: &Instance = &g.instance;
        let res = match spec.mode {
            nettsde::experiment::Mode::FixedTheta => run_trajectory(inst, &cfg, seed),
            nettsde::experiment::Mode::Bayes => {
                nettsde::experiment::draw_instance(inst, &spec.prior, &spec.tsde, &spec.dare, seed)
                    .and_then(|drawn| run_trajectory(&drawn, &cfg, seed))
            }
        }
        .map_err(|e: SimError| Error::Sim(e))?;

        let trace = out.join(format!("{}_trajectory.csv", g.label));
        let mut f = BufWriter::new(File::create(&trace)?);
        writeln!(f, "t,cumulative_cost,regret")?;
        for (t, (c, r)) in res.cumulative_cost.iter().zip(&res.regret).enumerate() {
            writeln!(f, "{},{},{}", t + 1, c, r)?;
        }
        f.flush()?;

        let log = out.join(format!("{}_episodes.jsonl", g.label));
        let mut f = BufWriter::new(File::create(&log)?);
        for ep in &res.episodes {
            serde_json::to_writer(&mut f, ep)?;
            writeln!(f)?;
        }
        f.flush()?;

        let counts: Vec<String> = res
            .actors
            .iter()
            .zip(&res.episode_starts)
            .map(|(tag, s)| format!("{tag}={}", s.len()))
            .collect();
        println!(
            "group {}: seed {seed}, T = {}, R(T) = {:.4}, J = {:.6}, episodes {}, max |x| = {:.3}",
            g.label,
            spec.horizon,
            res.regret.last().copied().unwrap_or(0.0),
            res.optimal_cost,
            counts.join(" "),
            res.max_state_norm.iter().cloned().fold(0.0, f64::max),
        );
        println!("wrote {} and {}", trace.display(), log.display());
    }
    Ok(())
}

fn experiment(spec: &ExperimentSpec, out: &Path, jobs: usize) -> Result<(), Error> {
    let res = run_experiment(spec, jobs)?;
    create_out(out)?;
    let csv_path = out.join(format!("{}.csv", spec.name));
    let mut f = BufWriter::new(File::create(&csv_path)?);
    res.write_csv(&mut f)?;
    f.flush()?;
    let manifest_path = out.join(format!("{}_manifest.json", spec.name));
    let mut f = BufWriter::new(File::create(&manifest_path)?);
    serde_json::to_writer_pretty(&mut f, &res.manifest(spec))?;
    writeln!(f)?;
    f.flush()?;
    for g in &res.groups {
        if !g.aborted.is_empty() {
            eprintln!(
                "warning: group {}: {} of {} trajectories aborted (see manifest)",
                g.label,
                g.aborted.len(),
                g.aborted.len() + g.completed
            );
        }
    }
    print!("{}", res.summary_table());
    println!("wrote {} and {}", csv_path.display(), manifest_path.display());
    Ok(())
}
