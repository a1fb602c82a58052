//! Closed-loop orchestration: schedule → imagine → align → reason → act.
//!
//! Each step renders the panorama, picks an imagination mode, builds a scene
//! hypothesis, filters it against the observation, runs the three-stage
//! reasoner, applies the chosen action, and appends a complete trace.
//! Ablation flags knock out individual stages without touching the rest of
//! the loop.

use crate::backend::{BuiltinBackend, ImaginationBackend};
use crate::error::{Error, Result};
use crate::grid::Panorama;
use crate::imagination::{InstructionState, SceneHypothesis};
use crate::paf::{fuse_and_decode, AttentionMap, PafParams};
use crate::reasoner::{
    self, Action, CandidateEvidence, ReasonerWeights, ReasoningTrace, StageOne, StageThree,
    StageTwo,
};
use crate::rng;
use crate::scheduler::{self, Mode};
use crate::world::{Episode, World};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub no_imagination: bool,
    pub no_filter: bool,
    pub no_ais: bool,
    pub no_cot: bool,
}

/// Named ablation variants matching the paper's Table 3 rows.
pub const ABLATION_VARIANTS: [(&str, AblationFlags); 5] = [
    ("Full", AblationFlags { no_imagination: false, no_filter: false, no_ais: false, no_cot: false }),
    ("w/o Img", AblationFlags { no_imagination: true, no_filter: false, no_ais: false, no_cot: false }),
    ("w/o Filter", AblationFlags { no_imagination: false, no_filter: true, no_ais: false, no_cot: false }),
    ("w/o AIS", AblationFlags { no_imagination: false, no_filter: false, no_ais: true, no_cot: false }),
    ("w/o CoT", AblationFlags { no_imagination: false, no_filter: false, no_ais: false, no_cot: true }),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentConfig {
    pub max_steps: usize,
    pub tau_u: f64,
    pub tau_s: f64,
    pub alpha: f64,
    pub window: usize,
    pub weights: ReasonerWeights,
    pub ablation: AblationFlags,
    /// Seed for per-step observation noise streams.
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            max_steps: 20,
            tau_u: 0.5,
            tau_s: 0.6,
            alpha: 0.5,
            window: 4,
            weights: ReasonerWeights::default(),
            ablation: AblationFlags::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Stopped,
    BudgetExhausted,
}

/// Heuristic flags for the paper's three failure categories.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureFlags {
    /// Hypothesis/observation similarity at the stop step was negative.
    pub inaccurate_imagination: bool,
    /// At some step the ground-truth next hop drew less attention mass than
    /// the mean over candidates.
    pub attention_misalignment: bool,
    /// Static mode held while s_t < τ_s for ≥ 3 consecutive steps.
    pub static_over_reliance: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_id: u64,
    pub viewpoints: Vec<u32>,
    pub actions: Vec<Action>,
    pub path_length: f64,
    pub termination: Termination,
    pub failure: FailureFlags,
    pub traces: Vec<ReasoningTrace>,
}

/// Mutable per-episode loop state.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub episode_id: u64,
    pub goal: u32,
    pub viewpoint: u32,
    pub visited: Vec<u32>,
    pub path_length: f64,
    pub step: usize,
    pub instr: InstructionState,
    pub last_policy: Vec<f64>,
    pub last_imagined_embed: Option<Vec<f64>>,
    pub actions: Vec<Action>,
    pub traces: Vec<ReasoningTrace>,
    pub terminated: Option<Termination>,
    pub failure: FailureFlags,
    /// Next hop toward the goal from each viewpoint (Dijkstra parent tree
    /// rooted at the goal), used only for failure-mode bookkeeping.
    next_hop: Vec<u32>,
    static_low_sim_run: usize,
}

impl AgentState {
    pub fn new(world: &World, episode: &Episode) -> Self {
        let (_, parent) = world.graph.dijkstra(episode.goal);
        Self {
            episode_id: episode.id,
            goal: episode.goal,
            viewpoint: episode.start,
            visited: vec![episode.start],
            path_length: 0.0,
            step: 0,
            instr: InstructionState::new(episode.instruction.entities.clone()),
            last_policy: Vec::new(),
            last_imagined_embed: None,
            actions: Vec::new(),
            traces: Vec::new(),
            terminated: None,
            failure: FailureFlags::default(),
            next_hop: parent,
            static_low_sim_run: 0,
        }
    }
}

/// Target entity for imagination: the next unmet instruction entity, or the
/// final (goal) entity once the instruction is exhausted.
fn imagination_target(instr: &InstructionState) -> u32 {
    instr.next_unmet().or_else(|| instr.entities.last().copied()).unwrap_or(0)
}

fn build_hypothesis(
    state: &AgentState,
    world: &World,
    obs: &Panorama,
    mode: Mode,
    flags: AblationFlags,
    backend: &dyn ImaginationBackend,
) -> Result<SceneHypothesis> {
    let target = imagination_target(&state.instr);
    if flags.no_imagination {
        let g = crate::grid::FeatureGrid::zeros(world.params.h, world.params.w, world.params.c);
        return Ok(SceneHypothesis { imagined: g.clone(), inpainted: g, target_entity: target, mode });
    }
    // When exhausted, imagine the goal entity through a one-entity view of
    // the instruction so the stop decision still sees a coherent hypothesis.
    let owned;
    let instr = if state.instr.exhausted() {
        owned = InstructionState::new(vec![target]);
        &owned
    } else {
        &state.instr
    };
    backend.imagine(mode, instr, obs, state.viewpoint, &world.params, &world.codes)
}

/// One full loop iteration with the built-in imagination backend.
pub fn step(
    state: &mut AgentState,
    world: &World,
    paf: &PafParams,
    config: &AgentConfig,
) -> Result<()> {
    step_with_backend(state, world, paf, config, &BuiltinBackend)
}

/// One full loop iteration. Preconditions: not terminated.
pub fn step_with_backend(
    state: &mut AgentState,
    world: &World,
    paf: &PafParams,
    config: &AgentConfig,
    backend: &dyn ImaginationBackend,
) -> Result<()> {
    if state.terminated.is_some() {
        return Err(Error::Contract("step() on a terminated agent".into()));
    }
    let obs = world_observation(world, state, config)?;
    let obs_embed = obs.embed();

    // (1) schedule
    let entropy = if state.last_policy.is_empty() {
        0.0
    } else {
        scheduler::action_entropy(&state.last_policy)?
    };
    let deviation = scheduler::path_deviation(&state.visited, config.window);
    let u_t = scheduler::trajectory_uncertainty(entropy, deviation, config.alpha)?;
    let s_t = match &state.last_imagined_embed {
        Some(e) => scheduler::visual_similarity(e, &obs_embed),
        None => 1.0,
    };
    let mut decision = scheduler::select_mode(u_t, s_t, config.tau_u, config.tau_s, state.step);
    if config.ablation.no_ais {
        decision.mode = Mode::Static;
    }

    // (2) imagine
    let hyp = build_hypothesis(state, world, &obs, decision.mode, config.ablation, backend)?;

    // (3) align
    let map = if config.ablation.no_filter {
        AttentionMap::uniform(world.params.h, world.params.w * obs.k(), 0.5)
    } else {
        fuse_and_decode(paf, &obs.assembled(), &hyp.imagined, &hyp.inpainted)?
    };

    // (4) reason
    let stage1 = reasoner::ground_goal(&decision, &hyp);
    let mut stage2 = reasoner::verify_perception(&map, &obs, &hyp, &world.codes, &state.visited)?;
    if config.ablation.no_imagination {
        for c in &mut stage2.candidates {
            c.similarity = 0.0;
        }
    }
    let stage3 = if config.ablation.no_cot {
        let w = ReasonerWeights {
            w_attention: 0.0,
            w_entity: 0.0,
            w_revisit: 0.0,
            ..config.weights
        };
        reasoner::decide(&stage2.candidates, &state.instr, &w)?
    } else {
        reasoner::decide(&stage2.candidates, &state.instr, &config.weights)?
    };
    let trace = assemble_trace(state.step, decision, stage1, stage2, stage3, config.ablation);
    let action = trace.stage3_decision_justification.action;

    // failure bookkeeping before the move mutates anything
    let gt_next = state.next_hop[state.viewpoint as usize];
    track_failures(state, &trace, &hyp, &obs_embed, gt_next, config, action);

    // (5) act + (6) bookkeeping
    state.last_policy = trace.stage3_decision_justification.policy.clone();
    state.last_imagined_embed = Some(hyp.imagined.embed());
    match action {
        Action::Stop => {
            state.terminated = Some(Termination::Stopped);
        }
        Action::Move(id) => {
            let len = world.graph.edge_length(state.viewpoint, id).ok_or_else(|| {
                Error::Contract(format!(
                    "chosen action {} is not a neighbor of {}",
                    id, state.viewpoint
                ))
            })?;
            let chosen = trace
                .stage2_perceptual_verification
                .candidates
                .iter()
                .find(|c| c.candidate_id == id)
                .expect("chosen candidate present in evidence");
            reasoner::update_progress(&mut state.instr, chosen);
            state.path_length += len;
            state.viewpoint = id;
            state.visited.push(id);
        }
    }
    state.actions.push(action);
    state.traces.push(trace);
    state.step += 1;
    Ok(())
}

fn world_observation(world: &World, state: &AgentState, config: &AgentConfig) -> Result<Panorama> {
    crate::world::render_observation(
        world,
        state.viewpoint,
        rng::derive(config.seed, &[state.episode_id, state.step as u64]),
    )
}

fn assemble_trace(
    step: usize,
    decision: scheduler::ModeDecision,
    stage1: StageOne,
    stage2: StageTwo,
    stage3: StageThree,
    flags: AblationFlags,
) -> ReasoningTrace {
    let (s1, s2, s3) = if flags.no_cot {
        (
            StageOne { text: "direct".into(), ..stage1 },
            StageTwo { text: "direct".into(), ..stage2 },
            StageThree { text: "direct".into(), ..stage3 },
        )
    } else {
        (stage1, stage2, stage3)
    };
    ReasoningTrace {
        step,
        mode_decision: decision,
        stage1_goal_grounding: s1,
        stage2_perceptual_verification: s2,
        stage3_decision_justification: s3,
    }
}

fn track_failures(
    state: &mut AgentState,
    trace: &ReasoningTrace,
    hyp: &SceneHypothesis,
    obs_embed: &[f64],
    gt_next: u32,
    config: &AgentConfig,
    action: Action,
) {
    let candidates: &[CandidateEvidence] = &trace.stage2_perceptual_verification.candidates;

    // (a) inaccurate imagination: similarity at the stop step < 0
    if action == Action::Stop
        && scheduler::visual_similarity(&hyp.imagined.embed(), obs_embed) < 0.0
    {
        state.failure.inaccurate_imagination = true;
    }

    // (b) attention misalignment: GT next hop under-attended
    if gt_next != state.viewpoint {
        let mean =
            candidates.iter().map(|c| c.attention_mass).sum::<f64>() / candidates.len() as f64;
        if let Some(c) = candidates.iter().find(|c| c.candidate_id == gt_next) {
            if c.attention_mass < mean {
                state.failure.attention_misalignment = true;
            }
        }
    }

    // (c) over-reliance on the instruction-driven mode
    let d = &trace.mode_decision;
    if d.mode == Mode::Static && d.s_t < config.tau_s {
        state.static_low_sim_run += 1;
        if state.static_low_sim_run >= 3 {
            state.failure.static_over_reliance = true;
        }
    } else {
        state.static_low_sim_run = 0;
    }
}

/// Run the loop until STOP or the step budget runs out, with the built-in
/// imagination backend.
pub fn run_episode(
    world: &World,
    episode: &Episode,
    paf: &PafParams,
    config: &AgentConfig,
) -> Result<Trajectory> {
    run_episode_with_backend(world, episode, paf, config, &BuiltinBackend)
}

pub fn run_episode_with_backend(
    world: &World,
    episode: &Episode,
    paf: &PafParams,
    config: &AgentConfig,
    backend: &dyn ImaginationBackend,
) -> Result<Trajectory> {
    if (episode.start as usize) >= world.graph.len() || (episode.goal as usize) >= world.graph.len()
    {
        return Err(Error::Contract("episode does not belong to this world".into()));
    }
    let mut state = AgentState::new(world, episode);
    while state.terminated.is_none() && state.step < config.max_steps {
        step_with_backend(&mut state, world, paf, config, backend)?;
    }
    let termination = state.terminated.unwrap_or(Termination::BudgetExhausted);
    Ok(Trajectory {
        episode_id: episode.id,
        viewpoints: state.visited,
        actions: state.actions,
        path_length: state.path_length,
        termination,
        failure: state.failure,
        traces: state.traces,
    })
}

impl Trajectory {
    /// Structural validity: moves follow graph edges, trace count matches
    /// action count, every trace passes its own lint.
    pub fn validate(&self, world: &World) -> Result<()> {
        if self.traces.len() != self.actions.len() {
            return Err(Error::Contract("trace count != action count".into()));
        }
        let mut pos = match self.viewpoints.first() {
            Some(&v) => v,
            None => return Err(Error::Contract("empty viewpoint list".into())),
        };
        let mut idx = 1;
        let mut total = 0.0;
        for action in &self.actions {
            if let Action::Move(id) = action {
                let len = world
                    .graph
                    .edge_length(pos, *id)
                    .ok_or_else(|| Error::Contract(format!("move {pos}->{id} is not an edge")))?;
                total += len;
                pos = *id;
                if self.viewpoints.get(idx) != Some(id) {
                    return Err(Error::Contract("viewpoint list disagrees with actions".into()));
                }
                idx += 1;
            }
        }
        if idx != self.viewpoints.len() {
            return Err(Error::Contract("extra viewpoints beyond actions".into()));
        }
        if (total - self.path_length).abs() > 1e-9 {
            return Err(Error::Contract("path length does not sum edge lengths".into()));
        }
        for t in &self.traces {
            t.lint()?;
        }
        Ok(())
    }
}
