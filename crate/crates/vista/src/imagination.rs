//! Scene hypothesis generation.
//!
//! The built-in generator replaces a caption→diffusion pipeline with a
//! deterministic "entity → prototype grid" map: the target entity's code row
//! fills a centered rectangle over low-level background noise. The inpainted
//! variant splices imagined content into the low-saliency cells of the
//! current observation tile.

use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, Panorama};
use crate::rng;
use crate::scheduler::Mode;
use crate::world::{CodeTable, WorldParams};
use serde::{Deserialize, Serialize};

/// Cells of an observation tile whose max channel value falls below this are
/// treated as low-saliency and eligible for inpainting.
pub const INPAINT_SALIENCY_THRESHOLD: f64 = 0.3;

/// Fixed stream tag for static-mode background noise.
const STATIC_IMAGINE_SEED: u64 = 0x1a61;

#[derive(Debug, Clone)]
pub struct SceneHypothesis {
    pub imagined: FeatureGrid,
    pub inpainted: FeatureGrid,
    pub target_entity: u32,
    pub mode: Mode,
}

/// Progress through the instruction's entity sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstructionState {
    pub entities: Vec<u32>,
    pub cursor: usize,
    pub met: Vec<bool>,
}

impl InstructionState {
    pub fn new(entities: Vec<u32>) -> Self {
        let met = vec![false; entities.len()];
        Self { entities, cursor: 0, met }
    }

    pub fn exhausted(&self) -> bool {
        self.cursor >= self.entities.len()
    }

    pub fn next_unmet(&self) -> Option<u32> {
        self.entities.get(self.cursor).copied()
    }

    /// Mark the current entity met and advance. Met flags never unset.
    pub fn advance(&mut self) {
        if self.cursor < self.entities.len() {
            self.met[self.cursor] = true;
            self.cursor += 1;
        }
    }
}

/// Prototype grid for an entity: its code row in the centered H/2×W/2
/// rectangle, uniform [0, 0.1] noise elsewhere.
fn prototype_grid(entity: u32, params: &WorldParams, codes: &CodeTable, noise_seed: u64) -> FeatureGrid {
    use rand::Rng;
    let (h, w, c) = (params.h, params.w, params.c);
    let mut grid = FeatureGrid::zeros(h, w, c);
    let mut r = rng::rng(noise_seed, &[entity as u64]);
    for v in grid.data_mut() {
        *v = r.gen_range(0.0..0.1);
    }
    let (r0, r1) = (h / 4, h / 4 + h / 2);
    let (c0, c1) = (w / 4, w / 4 + w / 2);
    for row in r0..r1 {
        for col in c0..c1 {
            grid.cell_mut(row, col).copy_from_slice(codes.row(entity));
        }
    }
    grid.clamp_unit();
    grid
}

/// Instruction-driven hypothesis for the next unmet entity.
pub fn imagine_static(
    instr: &InstructionState,
    params: &WorldParams,
    codes: &CodeTable,
) -> Result<SceneHypothesis> {
    let target = instr.next_unmet().ok_or(Error::NoGoal)?;
    let imagined = prototype_grid(target, params, codes, STATIC_IMAGINE_SEED);
    Ok(SceneHypothesis {
        inpainted: imagined.clone(),
        imagined,
        target_entity: target,
        mode: Mode::Static,
    })
}

/// Observation-driven hypothesis: among entities visible in the panorama,
/// imagine the one closest in code space to the next unmet instruction
/// entity (ties to the lower id); fall back to the static target when
/// nothing clears the presence threshold.
pub fn imagine_dynamic(
    obs: &Panorama,
    _history: &[u32],
    instr: &InstructionState,
    params: &WorldParams,
    codes: &CodeTable,
    viewpoint: u32,
) -> Result<SceneHypothesis> {
    if obs.tiles.is_empty() {
        return Err(Error::Contract("dynamic imagination needs a nonempty observation".into()));
    }
    let reference = instr.next_unmet().ok_or(Error::NoGoal)?;
    let mut visible: Vec<u32> = Vec::new();
    for tile in &obs.tiles {
        for e in codes.visible_entities(&tile.grid) {
            if !visible.contains(&e) {
                visible.push(e);
            }
        }
    }
    visible.sort_unstable();
    let target = visible
        .iter()
        .copied()
        .map(|e| (e, codes.cosine(e, reference)))
        .fold(None::<(u32, f64)>, |best, (e, sim)| match best {
            Some((_, bs)) if sim <= bs => best,
            _ => Some((e, sim)),
        })
        .map(|(e, _)| e)
        .unwrap_or(reference);
    let imagined = prototype_grid(target, params, codes, rng::derive(viewpoint as u64, &[0xd19a]));
    Ok(SceneHypothesis {
        inpainted: imagined.clone(),
        imagined,
        target_entity: target,
        mode: Mode::Dynamic,
    })
}

/// Splice: output takes `obs_tile` where the mask is false, `imagined` where
/// it is true.
pub fn inpaint(obs_tile: &FeatureGrid, imagined: &FeatureGrid, mask: &[bool]) -> Result<FeatureGrid> {
    if !obs_tile.same_shape(imagined) {
        return Err(Error::Contract("inpaint inputs have mismatched shapes".into()));
    }
    if mask.len() != obs_tile.cells() {
        return Err(Error::Contract(format!(
            "mask length {} does not match {} cells",
            mask.len(),
            obs_tile.cells()
        )));
    }
    let mut out = obs_tile.clone();
    for row in 0..out.h {
        for col in 0..out.w {
            if mask[row * out.w + col] {
                out.cell_mut(row, col).copy_from_slice(imagined.cell(row, col));
            }
        }
    }
    Ok(out)
}

/// Inference-time inpainting mask: cells whose max channel value is below the
/// saliency threshold.
pub fn low_saliency_mask(tile: &FeatureGrid) -> Vec<bool> {
    let mut mask = Vec::with_capacity(tile.cells());
    for row in 0..tile.h {
        for col in 0..tile.w {
            let max = tile.cell(row, col).iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            mask.push(max < INPAINT_SALIENCY_THRESHOLD);
        }
    }
    mask
}

/// Replace a hypothesis's inpainted grid with an actual splice against an
/// observation tile. Only tiles that actually show the target entity are
/// eligible (among them, the one closest to the imagined embedding); splicing
/// an unrelated tile would hand the filter salient foreign content that the
/// target never explains, so when the target is nowhere in view the
/// hypothesis keeps its purely imagined inpainting.
pub fn attach_inpainted(hyp: &mut SceneHypothesis, obs: &Panorama, codes: &CodeTable) -> Result<()> {
    let target_embed = hyp.imagined.embed();
    let mut best: Option<(usize, f64)> = None;
    for (i, tile) in obs.tiles.iter().enumerate() {
        if !codes.visible_entities(&tile.grid).contains(&hyp.target_entity) {
            continue;
        }
        let sim = crate::scheduler::visual_similarity(&target_embed, &tile.grid.embed());
        if best.map_or(true, |(_, bs)| sim > bs) {
            best = Some((i, sim));
        }
    }
    let Some((best, _)) = best else {
        return Ok(());
    };
    let tile = &obs.tiles[best].grid;
    let mask = low_saliency_mask(tile);
    hyp.inpainted = inpaint(tile, &hyp.imagined, &mask)?;
    Ok(())
}
