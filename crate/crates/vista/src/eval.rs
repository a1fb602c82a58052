//! Metrics (SR, SPL, NE, TL), aggregation, and the ablation harness.
//!
//! Success requires an explicit stop within 3 m geodesic of the goal; budget
//! exhaustion counts as failure regardless of position. SPL is the standard
//! success-weighted path-length ratio. The ablation harness runs the five
//! Table-3 variants over a shared episode set and breaks results down by
//! ground-truth path-length bucket.

use crate::agent::{
    run_episode_with_backend, AgentConfig, FailureFlags, Termination, Trajectory,
    ABLATION_VARIANTS,
};
use crate::backend::{BuiltinBackend, ImaginationBackend};
use crate::error::{Error, Result};
use crate::paf::{AttentionMap, PafParams};
use crate::world::{shortest_path, Episode, World};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const SUCCESS_RADIUS_M: f64 = 3.0;

/// Path-length bucket edges in meters: <8, 8–15, >15.
pub const BUCKET_EDGES: [f64; 2] = [8.0, 15.0];
pub const BUCKET_LABELS: [&str; 3] = ["<8m", "8-15m", ">15m"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode_id: u64,
    pub success: bool,
    pub spl: f64,
    pub ne: f64,
    pub tl: f64,
    pub steps: usize,
    pub gt_length: f64,
    pub termination: Termination,
    pub failure: FailureFlags,
}

/// Stopped within the success radius (geodesic) of the goal.
pub fn success(traj: &Trajectory, world: &World, episode: &Episode, radius: f64) -> Result<bool> {
    if traj.termination != Termination::Stopped {
        return Ok(false);
    }
    Ok(navigation_error(traj, world, episode)? <= radius)
}

/// Geodesic distance from the final viewpoint to the goal.
pub fn navigation_error(traj: &Trajectory, world: &World, episode: &Episode) -> Result<f64> {
    let last = *traj.viewpoints.last().ok_or_else(|| Error::Contract("empty trajectory".into()))?;
    let (_, d) = shortest_path(&world.graph, last, episode.goal)?;
    Ok(d)
}

/// Success-weighted path length: S · l / max(p, l).
pub fn spl(success: bool, gt_length: f64, path_length: f64) -> f64 {
    if !success {
        return 0.0;
    }
    if gt_length == 0.0 {
        return 1.0;
    }
    gt_length / path_length.max(gt_length)
}

pub fn score_episode(traj: &Trajectory, world: &World, episode: &Episode) -> Result<EpisodeResult> {
    let succ = success(traj, world, episode, SUCCESS_RADIUS_M)?;
    Ok(EpisodeResult {
        episode_id: episode.id,
        success: succ,
        spl: spl(succ, episode.gt_length, traj.path_length),
        ne: navigation_error(traj, world, episode)?,
        tl: traj.path_length,
        steps: traj.actions.len(),
        gt_length: episode.gt_length,
        termination: traj.termination,
        failure: traj.failure,
    })
}

/// Aggregate over a result set: SR and SPL as percentages, NE/TL as means.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub sr: f64,
    pub spl: f64,
    pub ne: f64,
    pub tl: f64,
}

pub fn evaluate(results: &[EpisodeResult]) -> Result<Aggregate> {
    if results.is_empty() {
        return Err(Error::Config("cannot evaluate an empty result set".into()));
    }
    let n = results.len() as f64;
    Ok(Aggregate {
        n: results.len(),
        sr: 100.0 * results.iter().filter(|r| r.success).count() as f64 / n,
        spl: 100.0 * results.iter().map(|r| r.spl).sum::<f64>() / n,
        ne: results.iter().map(|r| r.ne).sum::<f64>() / n,
        tl: results.iter().map(|r| r.tl).sum::<f64>() / n,
    })
}

/// Bucket index by ground-truth length: 0 for <8 m, 1 for 8–15 m, 2 for >15 m.
pub fn bucket_of(gt_length: f64) -> usize {
    if gt_length < BUCKET_EDGES[0] {
        0
    } else if gt_length <= BUCKET_EDGES[1] {
        1
    } else {
        2
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub aggregate: Aggregate,
    /// Aggregate per path-length bucket; None where the bucket is empty.
    pub buckets: Vec<Option<Aggregate>>,
    pub results: Vec<EpisodeResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub variants: Vec<VariantReport>,
}

/// Run one agent configuration over (world, episode) pairs, in parallel when
/// `jobs > 1`, returning trajectories in episode order regardless of
/// completion order.
pub fn run_suite<'a>(
    suite: &[(&'a World, &'a Episode)],
    paf: &PafParams,
    config: &AgentConfig,
    jobs: usize,
) -> Result<Vec<Trajectory>> {
    run_suite_with_backend(suite, paf, config, jobs, &BuiltinBackend)
}

pub fn run_suite_with_backend<'a>(
    suite: &[(&'a World, &'a Episode)],
    paf: &PafParams,
    config: &AgentConfig,
    jobs: usize,
    backend: &dyn ImaginationBackend,
) -> Result<Vec<Trajectory>> {
    if jobs <= 1 {
        return suite
            .iter()
            .map(|(w, e)| run_episode_with_backend(w, e, paf, config, backend))
            .collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        suite
            .par_iter()
            .map(|(w, e)| run_episode_with_backend(w, e, paf, config, backend))
            .collect::<Result<Vec<_>>>()
    })
}

pub fn score_suite(
    suite: &[(&World, &Episode)],
    trajectories: &[Trajectory],
) -> Result<Vec<EpisodeResult>> {
    if suite.len() != trajectories.len() {
        return Err(Error::Contract("suite/trajectory length mismatch".into()));
    }
    suite
        .iter()
        .zip(trajectories)
        .map(|((w, e), t)| score_episode(t, w, e))
        .collect()
}

fn bucket_aggregates(results: &[EpisodeResult]) -> Vec<Option<Aggregate>> {
    (0..BUCKET_LABELS.len())
        .map(|b| {
            let subset: Vec<EpisodeResult> =
                results.iter().filter(|r| bucket_of(r.gt_length) == b).cloned().collect();
            if subset.is_empty() {
                None
            } else {
                Some(evaluate(&subset).expect("nonempty subset"))
            }
        })
        .collect()
}

/// Five evaluation runs differing only in ablation flags.
pub fn run_ablation(
    suite: &[(&World, &Episode)],
    paf: &PafParams,
    base: &AgentConfig,
    jobs: usize,
) -> Result<AblationReport> {
    if suite.is_empty() {
        return Err(Error::Config("ablation needs a nonempty episode set".into()));
    }
    let mut variants = Vec::with_capacity(ABLATION_VARIANTS.len());
    for (name, flags) in ABLATION_VARIANTS {
        let config = AgentConfig { ablation: flags, ..base.clone() };
        let trajectories = run_suite(suite, paf, &config, jobs)?;
        let results = score_suite(suite, &trajectories)?;
        variants.push(VariantReport {
            name: name.to_string(),
            aggregate: evaluate(&results)?,
            buckets: bucket_aggregates(&results),
            results,
        });
    }
    Ok(AblationReport { variants })
}

fn fmt_agg(a: Option<&Aggregate>) -> String {
    match a {
        Some(a) => format!(
            "{:>4} {:>6.1} {:>6.1} {:>6.2} {:>6.2}",
            a.n, a.sr, a.spl, a.ne, a.tl
        ),
        None => format!("{:>4} {:>6} {:>6} {:>6} {:>6}", 0, "-", "-", "-", "-"),
    }
}

/// Aligned plain-text table: one row per variant, overall plus buckets.
pub fn render_table(report: &AblationReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>4} {:>6} {:>6} {:>6} {:>6}\n",
        "variant", "n", "SR", "SPL", "NE", "TL"
    ));
    for v in &report.variants {
        out.push_str(&format!("{:<12} {}\n", v.name, fmt_agg(Some(&v.aggregate))));
    }
    out.push('\n');
    for (b, label) in BUCKET_LABELS.iter().enumerate() {
        out.push_str(&format!("[gt_length {label}]\n"));
        for v in &report.variants {
            out.push_str(&format!("{:<12} {}\n", v.name, fmt_agg(v.buckets[b].as_ref())));
        }
        out.push('\n');
    }
    out
}

/// Single-variant metrics table.
pub fn render_aggregate(name: &str, a: &Aggregate) -> String {
    format!(
        "{:<12} {:>4} {:>6} {:>6} {:>6} {:>6}\n{:<12} {}\n",
        "variant",
        "n",
        "SR",
        "SPL",
        "NE",
        "TL",
        name,
        fmt_agg(Some(a))
    )
}

/// Dump an attention map as binary PGM (P5, maxval 255, value = round(255·A)).
pub fn write_pgm<W: Write>(map: &AttentionMap, mut w: W) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", map.w, map.h)?;
    let bytes: Vec<u8> =
        map.values.iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}
