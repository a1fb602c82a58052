//! Command-line entry point: world/episode generation, filter training,
//! agent runs, evaluation, ablations, and map export.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/runtime error. Every command
//! writes a run-manifest JSON (the fully resolved config) next to its
//! outputs.

use clap::{Parser, Subcommand};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;
use vista::backend::{serve_stdio, BackendSpec, DEFAULT_TIMEOUT};
use vista::config::RunConfig;
use vista::error::Error;
use vista::eval::{
    evaluate, render_aggregate, render_table, run_ablation, run_suite_with_backend, score_suite,
    write_pgm,
};
use vista::imagination::InstructionState;
use vista::paf::{
    fuse_and_decode, generate_quadruples, read_quadruples, train, write_quadruples,
    PafParams,
};
use vista::world::{generate_episode, generate_world, CodeTable, Episode, World};
use vista::{imagination, rng};

#[derive(Parser)]
#[command(name = "vista", version, about = "Closed-loop imagine-and-align navigation")]
struct Cli {
    /// Config file: flat dotted-key JSON merged over defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set agent.max_steps=30 (repeatable).
    #[arg(long = "set", global = true)]
    sets: Vec<String>,
    /// Shorthand: set all four seeds (world/episode/train/agent) at once.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for episode-parallel commands.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate procedural worlds as JSON files.
    Worldgen {
        /// Number of worlds.
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Generate episodes over a directory of worlds.
    Episodes {
        #[arg(long)]
        worlds: PathBuf,
        #[arg(long, default_value_t = 50)]
        count: usize,
    },
    /// Synthesize a filter-training quadruple dataset.
    PafData {
        #[arg(long)]
        worlds: PathBuf,
        #[arg(long, default_value_t = 5000)]
        count: usize,
    },
    /// Train the perceptual alignment filter.
    PafTrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the agent over an episode file.
    Run {
        #[arg(long)]
        worlds: PathBuf,
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        paf: PathBuf,
        /// Write per-step traces here instead of <out>/traces.jsonl.
        #[arg(long)]
        trace_file: Option<PathBuf>,
        /// Imagination backend: builtin, exec:"CMD", or tcp:HOST:PORT.
        #[arg(long)]
        backend: Option<String>,
    },
    /// Score a trajectory file against its episodes.
    Eval {
        #[arg(long)]
        worlds: PathBuf,
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        trajectories: PathBuf,
    },
    /// Run all five ablation variants and emit the comparison table.
    Ablate {
        #[arg(long)]
        worlds: PathBuf,
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        paf: PathBuf,
    },
    /// Export an attention map as a PGM image.
    ExportMap {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        paf: PathBuf,
        #[arg(long)]
        viewpoint: u32,
        #[arg(long)]
        entity: u32,
    },
    /// Serve the built-in imagination backend over stdin/stdout.
    BackendStdio,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are not usage errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e.downcast_ref::<Error>() {
                Some(Error::Config(_)) => 1,
                _ => 2,
            };
            std::process::exit(code);
        }
    }
}

fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        for key in ["seeds.world", "seeds.episode", "seeds.train", "seeds.agent"] {
            cfg.apply_set(&format!("{key}={seed}"))?;
        }
    }
    for spec in &cli.sets {
        cfg.apply_set(spec)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(&cli)?;
    if !matches!(cli.command, Cmd::BackendStdio) {
        fs::create_dir_all(&cli.out)?;
    }
    match &cli.command {
        Cmd::Worldgen { count } => cmd_worldgen(&cli, &cfg, *count),
        Cmd::Episodes { worlds, count } => cmd_episodes(&cli, &cfg, worlds, *count),
        Cmd::PafData { worlds, count } => cmd_paf_data(&cli, &cfg, worlds, *count),
        Cmd::PafTrain { data } => cmd_paf_train(&cli, &cfg, data),
        Cmd::Run { worlds, episodes, paf, trace_file, backend } => {
            cmd_run(&cli, &cfg, worlds, episodes, paf, trace_file.as_deref(), backend.as_deref())
        }
        Cmd::Eval { worlds, episodes, trajectories } => {
            cmd_eval(&cli, &cfg, worlds, episodes, trajectories)
        }
        Cmd::Ablate { worlds, episodes, paf } => cmd_ablate(&cli, &cfg, worlds, episodes, paf),
        Cmd::ExportMap { world, paf, viewpoint, entity } => {
            cmd_export_map(&cli, &cfg, world, paf, *viewpoint, *entity)
        }
        Cmd::BackendStdio => {
            let params = cfg.world_params()?;
            let codes = CodeTable::new(params.vocab, params.c);
            serve_stdio(&params, &codes)?;
            Ok(())
        }
    }
}

fn data_err(msg: String) -> anyhow::Error {
    Error::Data(msg).into()
}

fn load_worlds(dir: &Path) -> anyhow::Result<Vec<(String, World)>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| data_err(format!("worlds dir {}: {e}", dir.display())))?
        .filter_map(|entry| {
            let name = entry.ok()?.file_name().to_string_lossy().into_owned();
            (name.starts_with("world_") && name.ends_with(".json")).then_some(name)
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(data_err(format!("no world_*.json files in {}", dir.display())));
    }
    names
        .into_iter()
        .map(|name| {
            let text = fs::read_to_string(dir.join(&name))
                .map_err(|e| data_err(format!("{name}: {e}")))?;
            Ok((name.clone(), World::from_json(&text)?))
        })
        .collect()
}

#[derive(serde::Serialize, serde::Deserialize)]
struct EpisodeLine {
    world: String,
    episode: Episode,
}

fn load_episodes(path: &Path) -> anyhow::Result<Vec<EpisodeLine>> {
    let text =
        fs::read_to_string(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .map_err(|e| data_err(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    if out.is_empty() {
        return Err(data_err(format!("{} contains no episodes", path.display())));
    }
    Ok(out)
}

/// Pair episode lines with their worlds, in file order.
fn build_suite<'a>(
    worlds: &'a [(String, World)],
    episodes: &'a [EpisodeLine],
) -> anyhow::Result<Vec<(&'a World, &'a Episode)>> {
    episodes
        .iter()
        .map(|line| {
            let world = worlds
                .iter()
                .find(|(name, _)| *name == line.world)
                .map(|(_, w)| w)
                .ok_or_else(|| data_err(format!("episode references unknown world {}", line.world)))?;
            Ok((world, &line.episode))
        })
        .collect()
}

fn read_paf(path: &Path) -> anyhow::Result<PafParams> {
    let file =
        fs::File::open(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    Ok(PafParams::read_from(std::io::BufReader::new(file))?)
}

fn cmd_worldgen(cli: &Cli, cfg: &RunConfig, count: usize) -> anyhow::Result<()> {
    let base = cfg.world_params()?;
    for i in 0..count {
        let seed = rng::derive(base.seed, &[i as u64]);
        let params = vista::world::WorldParams { seed, ..base.clone() };
        let world = generate_world(seed, &params)?;
        let path = cli.out.join(format!("world_{i:03}.json"));
        fs::write(&path, world.to_json()?)?;
        println!("wrote {}", path.display());
    }
    cfg.write_manifest(&cli.out, "worldgen")?;
    Ok(())
}

fn cmd_episodes(cli: &Cli, cfg: &RunConfig, worlds_dir: &Path, count: usize) -> anyhow::Result<()> {
    let worlds = load_worlds(worlds_dir)?;
    let min_len = cfg.get_f64("episodes.min_path_len")?;
    let seed = cfg.get_u64("seeds.episode")?;
    let path = cli.out.join("episodes.jsonl");
    let mut out = BufWriter::new(fs::File::create(&path)?);
    for i in 0..count {
        let (name, world) = &worlds[i % worlds.len()];
        let episode = generate_episode(world, rng::derive(seed, &[i as u64]), min_len)?;
        serde_json::to_writer(&mut out, &EpisodeLine { world: name.clone(), episode })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    println!("wrote {} ({count} episodes)", path.display());
    cfg.write_manifest(&cli.out, "episodes")?;
    Ok(())
}

fn cmd_paf_data(cli: &Cli, cfg: &RunConfig, worlds_dir: &Path, count: usize) -> anyhow::Result<()> {
    let worlds: Vec<World> = load_worlds(worlds_dir)?.into_iter().map(|(_, w)| w).collect();
    let quads = generate_quadruples(&worlds, count, cfg.get_u64("seeds.train")?)?;
    let path = cli.out.join("quadruples.vqds");
    let mut out = BufWriter::new(fs::File::create(&path)?);
    write_quadruples(&quads, &mut out)?;
    out.flush()?;
    println!("wrote {} ({count} quadruples)", path.display());
    cfg.write_manifest(&cli.out, "paf-data")?;
    Ok(())
}

fn cmd_paf_train(cli: &Cli, cfg: &RunConfig, data: &Path) -> anyhow::Result<()> {
    let file = fs::File::open(data).map_err(|e| data_err(format!("{}: {e}", data.display())))?;
    let quads = read_quadruples(std::io::BufReader::new(file))?;
    let train_cfg = cfg.train_config()?;
    let (params, log) = train(&quads, &train_cfg)?;
    let params_path = cli.out.join("paf.vpaf");
    params.write_to(BufWriter::new(fs::File::create(&params_path)?))?;
    let log_path = cli.out.join("train_log.jsonl");
    let mut out = BufWriter::new(fs::File::create(&log_path)?);
    for entry in &log {
        serde_json::to_writer(&mut out, entry)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    if let Some(last) = log.last() {
        println!(
            "trained {} epochs, best val dice {:.4}",
            log.len(),
            log.iter().map(|e| e.val_dice).fold(0.0, f64::max)
        );
        let _ = last;
    }
    println!("wrote {} and {}", params_path.display(), log_path.display());
    cfg.write_manifest(&cli.out, "paf-train")?;
    Ok(())
}

fn cmd_run(
    cli: &Cli,
    cfg: &RunConfig,
    worlds_dir: &Path,
    episodes_path: &Path,
    paf_path: &Path,
    trace_file: Option<&Path>,
    backend_flag: Option<&str>,
) -> anyhow::Result<()> {
    let worlds = load_worlds(worlds_dir)?;
    let episodes = load_episodes(episodes_path)?;
    let suite = build_suite(&worlds, &episodes)?;
    let paf = read_paf(paf_path)?;
    let agent_cfg = cfg.agent_config()?;

    let spec = match backend_flag {
        Some(s) => BackendSpec::parse(s)?,
        None => match cfg.get_str("backend.kind")? {
            "builtin" => BackendSpec::Builtin,
            "exec" => BackendSpec::Exec(cfg.get_str("backend.command")?.to_string()),
            "tcp" => BackendSpec::Tcp(cfg.get_str("backend.address")?.to_string()),
            other => return Err(Error::Config(format!("unknown backend.kind {other:?}")).into()),
        },
    };
    let timeout = Duration::from_secs(u64::from(DEFAULT_TIMEOUT.as_secs()));
    let backend = spec.connect(timeout)?;

    let trajectories = run_suite_with_backend(&suite, &paf, &agent_cfg, cli.jobs, backend.as_ref())?;

    let traj_path = cli.out.join("trajectories.jsonl");
    let trace_path = trace_file.map(Path::to_path_buf).unwrap_or(cli.out.join("traces.jsonl"));
    let mut traj_out = BufWriter::new(fs::File::create(&traj_path)?);
    let mut trace_out = BufWriter::new(fs::File::create(&trace_path)?);
    for traj in &trajectories {
        for t in &traj.traces {
            let line = serde_json::json!({
                "episode_id": traj.episode_id,
                "step": t.step,
                "mode": t.mode_decision,
                "stage1": t.stage1_goal_grounding,
                "stage2": t.stage2_perceptual_verification,
                "stage3": t.stage3_decision_justification,
                "scores": t.stage3_decision_justification.scores,
                "action": t.stage3_decision_justification.action,
            });
            serde_json::to_writer(&mut trace_out, &line)?;
            trace_out.write_all(b"\n")?;
        }
        let mut stripped = traj.clone();
        stripped.traces.clear();
        serde_json::to_writer(&mut traj_out, &stripped)?;
        traj_out.write_all(b"\n")?;
    }
    traj_out.flush()?;
    trace_out.flush()?;
    println!("wrote {} and {}", traj_path.display(), trace_path.display());
    cfg.write_manifest(&cli.out, "run")?;
    Ok(())
}

fn cmd_eval(
    cli: &Cli,
    cfg: &RunConfig,
    worlds_dir: &Path,
    episodes_path: &Path,
    traj_path: &Path,
) -> anyhow::Result<()> {
    let worlds = load_worlds(worlds_dir)?;
    let episodes = load_episodes(episodes_path)?;
    let suite = build_suite(&worlds, &episodes)?;
    let text = fs::read_to_string(traj_path)
        .map_err(|e| data_err(format!("{}: {e}", traj_path.display())))?;
    let mut trajectories = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        trajectories.push(
            serde_json::from_str::<vista::agent::Trajectory>(line)
                .map_err(|e| data_err(format!("{}: {e}", traj_path.display())))?,
        );
    }
    if trajectories.is_empty() {
        return Err(data_err(format!("{} contains no trajectories", traj_path.display())));
    }
    let results = score_suite(&suite, &trajectories)?;
    let results_path = cli.out.join("results.jsonl");
    let mut out = BufWriter::new(fs::File::create(&results_path)?);
    for r in &results {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    let aggregate = evaluate(&results)?;
    let table = render_aggregate("run", &aggregate);
    fs::write(cli.out.join("metrics.txt"), &table)?;
    print!("{table}");
    cfg.write_manifest(&cli.out, "eval")?;
    Ok(())
}

fn cmd_ablate(
    cli: &Cli,
    cfg: &RunConfig,
    worlds_dir: &Path,
    episodes_path: &Path,
    paf_path: &Path,
) -> anyhow::Result<()> {
    let worlds = load_worlds(worlds_dir)?;
    let episodes = load_episodes(episodes_path)?;
    let suite = build_suite(&worlds, &episodes)?;
    let paf = read_paf(paf_path)?;
    let base = cfg.agent_config()?;
    let report = run_ablation(&suite, &paf, &base, cli.jobs)?;
    fs::write(cli.out.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    let table = render_table(&report);
    fs::write(cli.out.join("ablation.txt"), &table)?;
    print!("{table}");
    cfg.write_manifest(&cli.out, "ablate")?;
    Ok(())
}

fn cmd_export_map(
    cli: &Cli,
    cfg: &RunConfig,
    world_path: &Path,
    paf_path: &Path,
    viewpoint: u32,
    entity: u32,
) -> anyhow::Result<()> {
    let text = fs::read_to_string(world_path)
        .map_err(|e| data_err(format!("{}: {e}", world_path.display())))?;
    let world = World::from_json(&text)?;
    let paf = read_paf(paf_path)?;
    let obs = vista::world::render_observation(
        &world,
        viewpoint,
        rng::derive(cfg.get_u64("seeds.agent")?, &[viewpoint as u64]),
    )?;
    let instr = InstructionState::new(vec![entity]);
    let mut hyp = imagination::imagine_static(&instr, &world.params, &world.codes)?;
    imagination::attach_inpainted(&mut hyp, &obs, &world.codes)?;
    let map = fuse_and_decode(&paf, &obs.assembled(), &hyp.imagined, &hyp.inpainted)?;
    let path = cli.out.join(format!("map_v{viewpoint}_e{entity}.pgm"));
    write_pgm(&map, BufWriter::new(fs::File::create(&path)?))?;
    println!("wrote {}", path.display());
    cfg.write_manifest(&cli.out, "export-map")?;
    Ok(())
}
