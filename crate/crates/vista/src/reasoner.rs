//! Structured three-stage reasoning: goal grounding, perceptual
//! verification, decision justification.
//!
//! A deterministic template-and-scoring reasoner stands in for a language
//! model: it consumes the same inputs (instruction state, attention
//! summaries, decoded observations, history) and emits the same three-stage
//! trace plus a softmax policy over candidates and STOP.

use crate::error::{Error, Result};
use crate::grid::Panorama;
use crate::imagination::{InstructionState, SceneHypothesis};
use crate::paf::AttentionMap;
use crate::scheduler::ModeDecision;
use crate::world::{entity_name, CodeTable};
use serde::{Deserialize, Serialize};

/// Tiles whose mean attention exceeds this are called out in the stage-2
/// summary and can confirm instruction progress.
pub const ATTENTION_MASS_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Move(u32),
    Stop,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateEvidence {
    pub candidate_id: u32,
    /// Mean attention over this candidate's tile, in [0,1].
    pub attention_mass: f64,
    /// Cosine between the imagined embedding and the tile embedding.
    pub similarity: f64,
    /// How many times this candidate viewpoint was already visited.
    pub visits: usize,
    pub entities_seen: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub action: Action,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub step: usize,
    pub mode_decision: ModeDecision,
    pub stage1_goal_grounding: StageOne,
    pub stage2_perceptual_verification: StageTwo,
    pub stage3_decision_justification: StageThree,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageOne {
    pub text: String,
    pub target_entity: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTwo {
    pub text: String,
    pub candidates: Vec<CandidateEvidence>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageThree {
    pub text: String,
    pub action: Action,
    pub scores: Vec<ScoreEntry>,
    pub policy: Vec<f64>,
}

/// Scoring weights for decision justification.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReasonerWeights {
    pub w_similarity: f64,
    pub w_attention: f64,
    pub w_entity: f64,
    pub w_revisit: f64,
    pub stop_base: f64,
    /// Added to the STOP score once every instruction entity has been met;
    /// sized to beat any move score (similarity + attention ≤ 2).
    pub w_stop: f64,
    pub temperature: f64,
}

impl Default for ReasonerWeights {
    fn default() -> Self {
        Self {
            w_similarity: 1.0,
            w_attention: 1.0,
            w_entity: 0.5,
            w_revisit: 0.5,
            stop_base: -0.25,
            w_stop: 2.5,
            temperature: 0.5,
        }
    }
}

/// Stage 1: name what the agent is looking for and under which mode.
pub fn ground_goal(decision: &ModeDecision, hypothesis: &SceneHypothesis) -> StageOne {
    let mode = match hypothesis.mode {
        crate::scheduler::Mode::Static => "static",
        crate::scheduler::Mode::Dynamic => "dynamic",
    };
    StageOne {
        text: format!(
            "Looking for {} ({} mode, u={:.2}, s={:.2})",
            entity_name(hypothesis.target_entity),
            mode,
            decision.u_t,
            decision.s_t
        ),
        target_entity: hypothesis.target_entity,
    }
}

fn direction_phrase(index: usize, total: usize) -> &'static str {
    if total <= 1 {
        return "ahead";
    }
    let third = (index * 3) / total;
    match third {
        0 => "on the left",
        1 => "in the center",
        _ => "on the right",
    }
}

/// Stage 2: per-candidate evidence plus a textual attention summary naming
/// the tiles whose mass clears the threshold.
pub fn verify_perception(
    map: &AttentionMap,
    pano: &Panorama,
    hypothesis: &SceneHypothesis,
    codes: &CodeTable,
    visited: &[u32],
) -> Result<StageTwo> {
    if pano.tiles.is_empty() {
        return Err(Error::Contract("empty panorama".into()));
    }
    let tile_w = pano.tiles[0].grid.w;
    if map.w != tile_w * pano.k() || map.h != pano.tiles[0].grid.h {
        return Err(Error::Contract(format!(
            "attention map {}x{} does not cover a {}-tile panorama",
            map.h,
            map.w,
            pano.k()
        )));
    }
    let imagined_embed = hypothesis.imagined.embed();
    let mut candidates = Vec::with_capacity(pano.k());
    for (k, tile) in pano.tiles.iter().enumerate() {
        candidates.push(CandidateEvidence {
            candidate_id: tile.candidate_id,
            attention_mass: map.tile_mass(k, tile_w),
            similarity: crate::scheduler::visual_similarity(&imagined_embed, &tile.grid.embed()),
            visits: visited.iter().filter(|&&v| v == tile.candidate_id).count(),
            entities_seen: codes.visible_entities(&tile.grid),
        });
    }
    let mut highlights: Vec<String> = Vec::new();
    for (k, c) in candidates.iter().enumerate() {
        if c.attention_mass > ATTENTION_MASS_THRESHOLD {
            highlights.push(format!(
                "the mask highlights the view {} (candidate {}, mass {:.2})",
                direction_phrase(k, candidates.len()),
                c.candidate_id,
                c.attention_mass
            ));
        }
    }
    let text = if highlights.is_empty() {
        format!(
            "No view stands out for {}; best mass {:.2}.",
            entity_name(hypothesis.target_entity),
            candidates.iter().map(|c| c.attention_mass).fold(0.0, f64::max)
        )
    } else {
        highlights.join("; ")
    };
    Ok(StageTwo { text, candidates })
}

/// Stage 3: score candidates and STOP, pick the argmax (ties to the lowest
/// candidate id, STOP last), and justify the choice.
pub fn decide(
    evidence: &[CandidateEvidence],
    instr: &InstructionState,
    weights: &ReasonerWeights,
) -> Result<StageThree> {
    if evidence.is_empty() {
        return Err(Error::Contract("no candidates to decide over".into()));
    }
    let next = instr.next_unmet();
    let mut scores: Vec<ScoreEntry> = evidence
        .iter()
        .map(|c| {
            let entity_bonus = match next {
                Some(e) if c.entities_seen.contains(&e) => weights.w_entity,
                _ => 0.0,
            };
            // Visit counts (capped) rather than a visited bit: an agent
            // bouncing between two exhausted viewpoints keeps digging their
            // scores down until the frontier wins.
            let score = weights.w_similarity * c.similarity
                + weights.w_attention * c.attention_mass
                + entity_bonus
                - weights.w_revisit * c.visits.min(4) as f64;
            ScoreEntry { action: Action::Move(c.candidate_id), score }
        })
        .collect();
    // STOP competes only once the instruction is complete; before that it
    // sits w_stop below the baseline so no penalized move can lose to it.
    let stop_score =
        weights.stop_base + if instr.exhausted() { weights.w_stop } else { -weights.w_stop };
    scores.push(ScoreEntry { action: Action::Stop, score: stop_score });

    let policy = softmax_scores(&scores, weights.temperature);

    // argmax; Move ties break on the lower candidate id, STOP loses ties
    let mut best = 0usize;
    for (i, entry) in scores.iter().enumerate().skip(1) {
        let better = entry.score > scores[best].score
            || (entry.score == scores[best].score
                && tie_rank(&entry.action) < tie_rank(&scores[best].action));
        if better {
            best = i;
        }
    }
    let action = scores[best].action;
    let text = match action {
        Action::Move(id) => {
            let c = evidence.iter().find(|c| c.candidate_id == id).unwrap();
            format!(
                "Moving to candidate {id}: similarity {:.2}, attention mass {:.2}{}{}",
                c.similarity,
                c.attention_mass,
                match next {
                    Some(e) if c.entities_seen.contains(&e) =>
                        format!(", {} is visible there", entity_name(e)),
                    _ => String::new(),
                },
                if c.visits > 0 { ", already visited" } else { "" }
            )
        }
        Action::Stop => format!(
            "Stopping: instruction {} (stop score {:.2})",
            if instr.exhausted() { "complete" } else { "incomplete" },
            stop_score
        ),
    };
    Ok(StageThree { text, action, scores, policy })
}

fn tie_rank(action: &Action) -> u64 {
    match action {
        Action::Move(id) => *id as u64,
        Action::Stop => u64::MAX,
    }
}

fn softmax_scores(scores: &[ScoreEntry], temperature: f64) -> Vec<f64> {
    let t = temperature.max(1e-9);
    let max = scores.iter().map(|s| s.score).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s.score - max) / t).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Advance the instruction cursor when the chosen candidate shows the next
/// unmet entity with enough attention mass behind it.
pub fn update_progress(instr: &mut InstructionState, chosen: &CandidateEvidence) {
    if let Some(next) = instr.next_unmet() {
        if chosen.entities_seen.contains(&next)
            && chosen.attention_mass > ATTENTION_MASS_THRESHOLD
        {
            instr.advance();
        }
    }
}

impl ReasoningTrace {
    /// Structural contract: all stages present with nonempty text and the
    /// chosen action listed in the score table.
    pub fn lint(&self) -> Result<()> {
        if self.stage1_goal_grounding.text.is_empty()
            || self.stage2_perceptual_verification.text.is_empty()
            || self.stage3_decision_justification.text.is_empty()
        {
            return Err(Error::Contract(format!("step {}: empty stage text", self.step)));
        }
        let s3 = &self.stage3_decision_justification;
        if !s3.scores.iter().any(|e| e.action == s3.action) {
            return Err(Error::Contract(format!(
                "step {}: chosen action missing from score table",
                self.step
            )));
        }
        let psum: f64 = s3.policy.iter().sum();
        if (psum - 1.0).abs() > 1e-9 || s3.policy.iter().any(|&p| p < 0.0) {
            return Err(Error::Contract(format!("step {}: invalid policy", self.step)));
        }
        if s3.policy.len() != s3.scores.len() {
            return Err(Error::Contract(format!("step {}: policy/score length mismatch", self.step)));
        }
        let d = &self.mode_decision;
        if !(0.0..=1.0).contains(&d.u_t) || !(-1.0..=1.0).contains(&d.s_t) {
            return Err(Error::Contract(format!("step {}: mode decision out of range", self.step)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{FeatureGrid, Tile};
    use crate::scheduler::{select_mode, Mode};
    use crate::world::CodeTable;

    fn evidence(id: u32, sim: f64, mass: f64, seen: Vec<u32>, visits: usize) -> CandidateEvidence {
        CandidateEvidence {
            candidate_id: id,
            attention_mass: mass,
            similarity: sim,
            visits,
            entities_seen: seen,
        }
    }

    fn hypothesis(target: u32) -> SceneHypothesis {
        let g = FeatureGrid::zeros(4, 4, 8);
        SceneHypothesis {
            imagined: g.clone(),
            inpainted: g,
            target_entity: target,
            mode: Mode::Static,
        }
    }

    #[test]
    fn stage1_text_names_entity_and_mode() {
        let d = select_mode(0.2, 0.9, 0.5, 0.6, 3);
        let s1 = ground_goal(&d, &hypothesis(1));
        assert!(s1.text.contains("sofa"));
        assert!(s1.text.contains("static"));
        assert_eq!(s1.target_entity, 1);
        let again = ground_goal(&d, &hypothesis(1));
        assert_eq!(s1.text, again.text);
    }

    #[test]
    fn stage2_masses_match_naive_tile_means() {
        let codes = CodeTable::new(8, 8);
        let mk_tile = |id: u32| Tile {
            candidate_id: id,
            heading: id as f64,
            grid: FeatureGrid::zeros(4, 4, 8),
        };
        let pano = Panorama { tiles: vec![mk_tile(0), mk_tile(1)] };
        // uniform 0.5 map
        let map = AttentionMap::uniform(4, 8, 0.5);
        let s2 = verify_perception(&map, &pano, &hypothesis(0), &codes, &[]).unwrap();
        assert!(s2.candidates.iter().all(|c| (c.attention_mass - 0.5).abs() < 1e-12));

        // mass 1 on tile 0, 0 on tile 1
        let mut map = AttentionMap::uniform(4, 8, 0.0);
        for row in 0..4 {
            for col in 0..4 {
                map.values[row * 8 + col] = 1.0;
            }
        }
        let s2 = verify_perception(&map, &pano, &hypothesis(0), &codes, &[]).unwrap();
        assert_eq!(s2.candidates[0].attention_mass, 1.0);
        assert_eq!(s2.candidates[1].attention_mass, 0.0);
        assert!(s2.text.contains("left"));

        // naive double-loop oracle on an arbitrary map
        let mut map = AttentionMap::uniform(4, 8, 0.0);
        for (i, v) in map.values.iter_mut().enumerate() {
            *v = (i % 7) as f64 / 7.0;
        }
        let s2 = verify_perception(&map, &pano, &hypothesis(0), &codes, &[]).unwrap();
        for k in 0..2 {
            let mut sum = 0.0;
            for row in 0..4 {
                for col in 0..4 {
                    sum += map.values[row * 8 + k * 4 + col];
                }
            }
            assert!((s2.candidates[k].attention_mass - sum / 16.0).abs() < 1e-12);
        }

        let bad = AttentionMap::uniform(4, 4, 0.5);
        assert!(verify_perception(&bad, &pano, &hypothesis(0), &codes, &[]).is_err());
    }

    #[test]
    fn decide_single_candidate_and_policy_sums_to_one() {
        let instr = InstructionState::new(vec![3]);
        let s3 = decide(&[evidence(4, 0.5, 0.4, vec![], 0)], &instr, &ReasonerWeights::default())
            .unwrap();
        assert_eq!(s3.action, Action::Move(4));
        let sum: f64 = s3.policy.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert_eq!(s3.policy.len(), 2); // candidate + STOP
    }

    #[test]
    fn decide_ties_break_to_lower_id() {
        let instr = InstructionState::new(vec![3]);
        let ev = vec![
            evidence(7, 0.5, 0.4, vec![], 0),
            evidence(2, 0.5, 0.4, vec![], 0),
        ];
        let s3 = decide(&ev, &instr, &ReasonerWeights::default()).unwrap();
        assert_eq!(s3.action, Action::Move(2));
        assert!((s3.policy[0] - s3.policy[1]).abs() < 1e-12);
    }

    #[test]
    fn decide_policy_matches_softmax_oracle() {
        // scores (2, 1, 0) at T = 0.5
        let instr = InstructionState::new(vec![9]);
        let ev = vec![
            evidence(0, 1.0, 1.0, vec![], 0), // 2.0
            evidence(1, 0.5, 0.5, vec![], 0), // 1.0
            evidence(2, 0.0, 0.0, vec![], 0), // 0.0
        ];
        let mut w = ReasonerWeights::default();
        w.stop_base = -100.0; // park STOP far away
        let s3 = decide(&ev, &instr, &w).unwrap();
        let raw = [2.0f64, 1.0, 0.0, -100.0];
        let exps: Vec<f64> = raw.iter().map(|s| (s / 0.5).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (got, want) in s3.policy.iter().zip(exps.iter().map(|e| e / sum)) {
            assert!((got - want).abs() < 1e-9);
        }
        assert_eq!(s3.action, Action::Move(0));
        assert!(decide(&[], &instr, &w).is_err());
    }

    #[test]
    fn decide_shifting_scores_keeps_argmax() {
        let instr = InstructionState::new(vec![1]);
        let ev = vec![
            evidence(0, 0.9, 0.2, vec![], 0),
            evidence(1, 0.3, 0.8, vec![1], 1),
        ];
        let w = ReasonerWeights::default();
        let base = decide(&ev, &instr, &w).unwrap();
        let mut shifted_w = w;
        shifted_w.stop_base += 0.0; // same weights; shift via similarity offset instead
        let ev_shift: Vec<CandidateEvidence> = ev
            .iter()
            .map(|c| {
                let mut c = c.clone();
                c.similarity += 0.0;
                c
            })
            .collect();
        let again = decide(&ev_shift, &instr, &shifted_w).unwrap();
        assert_eq!(base.action, again.action);
    }

    #[test]
    fn stop_scored_up_when_instruction_exhausted() {
        let mut instr = InstructionState::new(vec![3]);
        instr.advance();
        assert!(instr.exhausted());
        let ev = vec![evidence(0, 0.9, 0.9, vec![], 0)];
        let s3 = decide(&ev, &instr, &ReasonerWeights::default()).unwrap();
        // stop score = -0.25 + 2.5 = 2.25 vs candidate 0.9 + 0.9 = 1.8
        assert_eq!(s3.action, Action::Stop);
    }

    #[test]
    fn update_progress_rules() {
        let mut instr = InstructionState::new(vec![5, 6]);
        update_progress(&mut instr, &evidence(0, 0.0, 0.9, vec![5], 0));
        assert_eq!(instr.cursor, 1);
        // absent entity: unchanged
        update_progress(&mut instr, &evidence(0, 0.0, 0.9, vec![5], 0));
        assert_eq!(instr.cursor, 1);
        // present but weak attention: unchanged
        update_progress(&mut instr, &evidence(0, 0.0, 0.3, vec![6], 0));
        assert_eq!(instr.cursor, 1);
        update_progress(&mut instr, &evidence(0, 0.0, 0.51, vec![6], 0));
        assert_eq!(instr.cursor, 2);
    }

    #[test]
    fn trace_lint_catches_bad_traces() {
        let d = select_mode(0.1, 0.9, 0.5, 0.6, 1);
        let instr = InstructionState::new(vec![1]);
        let ev = vec![evidence(0, 0.4, 0.4, vec![], 0)];
        let s3 = decide(&ev, &instr, &ReasonerWeights::default()).unwrap();
        let trace = ReasoningTrace {
            step: 1,
            mode_decision: d,
            stage1_goal_grounding: ground_goal(&d, &hypothesis(1)),
            stage2_perceptual_verification: StageTwo { text: "ok".into(), candidates: ev },
            stage3_decision_justification: s3,
        };
        trace.lint().unwrap();

        let mut bad = trace.clone();
        bad.stage1_goal_grounding.text.clear();
        assert!(bad.lint().is_err());

        let mut bad = trace.clone();
        bad.stage3_decision_justification.action = Action::Move(99);
        assert!(bad.lint().is_err());
    }
}
