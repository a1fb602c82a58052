//! Procedural worlds: navigation graph, per-sector semantic annotations,
//! observation rendering, and episode generation.
//!
//! A world is a set of room clusters. Each room is a tight cluster of
//! viewpoints sharing a dominant "theme" entity; rooms are linked by longer
//! inter-room edges. Looking from a viewpoint toward a neighbor shows the
//! theme of the neighbor's room, so an instruction like "go to the kitchen,
//! then the hallway, then find the library" can be followed by reading the
//! per-sector semantics off the panorama.

use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, Panorama, Tile};
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BinaryHeap};

/// Fixed vocabulary of semantic entities. Ids index into this table; worlds
/// with V < 32 use a prefix, larger vocabularies extend with numbered names.
pub const ENTITY_NAMES: [&str; 32] = [
    "kitchen", "sofa", "stairs", "bathroom", "bedroom", "hallway", "balcony", "office",
    "table", "lamp", "mirror", "plant", "bookshelf", "fireplace", "piano", "fridge",
    "oven", "bathtub", "window", "door", "painting", "rug", "wardrobe", "desk",
    "television", "sink", "bench", "counter", "closet", "couch", "dresser", "cabinet",
];

pub fn entity_name(id: u32) -> String {
    match ENTITY_NAMES.get(id as usize) {
        Some(name) => (*name).to_string(),
        None => format!("entity{id}"),
    }
}

/// Deterministic V×C code table. Rows are unit-norm with strictly positive
/// entries, so a cell carrying code row e decodes back to e by argmax dot
/// product, and the self-response is exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeTable {
    pub v: usize,
    pub c: usize,
    rows: Vec<f64>,
}

/// Cells whose best code response exceeds this carry an entity; background
/// noise (≤ 0.1 per channel) responds below 0.1·√C.
pub const PRESENCE_THRESHOLD: f64 = 0.5;

impl CodeTable {
    /// The table is a pure function of (V, C); all worlds share it.
    pub fn new(v: usize, c: usize) -> Self {
        let mut rows = vec![0.0; v * c];
        for e in 0..v {
            let mut r = rng::rng(0x0c0d_e7ab, &[e as u64, c as u64]);
            loop {
                let row = &mut rows[e * c..(e + 1) * c];
                for x in row.iter_mut() {
                    *x = r.gen_range(0.05..1.0);
                }
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                for x in row.iter_mut() {
                    *x /= norm;
                }
                // redraw on the (practically impossible) duplicate row
                let dup = (0..e).any(|o| {
                    let other = &rows[o * c..(o + 1) * c];
                    rows[e * c..(e + 1) * c].iter().zip(other).all(|(a, b)| (a - b).abs() < 1e-12)
                });
                if !dup {
                    break;
                }
            }
        }
        Self { v, c, rows }
    }

    fn set_row(&mut self, entity: u32, row: &[f64]) {
        let e = entity as usize;
        self.rows[e * self.c..(e + 1) * self.c].copy_from_slice(row);
    }

    #[inline]
    pub fn row(&self, entity: u32) -> &[f64] {
        let e = entity as usize;
        &self.rows[e * self.c..(e + 1) * self.c]
    }

    /// Argmax of dot products against every row, with the winning response.
    pub fn decode(&self, cell: &[f64]) -> (u32, f64) {
        let mut best = 0u32;
        let mut best_dot = f64::NEG_INFINITY;
        for e in 0..self.v {
            let dot: f64 = self.row(e as u32).iter().zip(cell).map(|(a, b)| a * b).sum();
            if dot > best_dot {
                best_dot = dot;
                best = e as u32;
            }
        }
        (best, best_dot)
    }

    /// Entities present in a grid: cells whose best response clears the
    /// presence threshold, deduplicated and sorted.
    pub fn visible_entities(&self, grid: &FeatureGrid) -> Vec<u32> {
        let mut seen = vec![false; self.v];
        for row in 0..grid.h {
            for col in 0..grid.w {
                let (e, dot) = self.decode(grid.cell(row, col));
                if dot > PRESENCE_THRESHOLD {
                    seen[e as usize] = true;
                }
            }
        }
        (0..self.v as u32).filter(|&e| seen[e as usize]).collect()
    }

    pub fn cosine(&self, a: u32, b: u32) -> f64 {
        self.row(a).iter().zip(self.row(b)).map(|(x, y)| x * y).sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WorldParams {
    /// Vocabulary size.
    pub vocab: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub nodes: usize,
    /// Viewpoints per room cluster scatter radius, meters.
    pub room_radius: f64,
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self { vocab: 32, h: 16, w: 16, c: 8, nodes: 48, room_radius: 1.0, seed: 0 }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 4 || self.h < 4 || self.w < 4 || self.c < 4 {
            return Err(Error::Config(format!(
                "world params out of range: V={} H={} W={} C={} (all must be >= 4)",
                self.vocab, self.h, self.w, self.c
            )));
        }
        if !(10..=500).contains(&self.nodes) {
            return Err(Error::Config(format!("node count {} outside 10..=500", self.nodes)));
        }
        if self.room_radius <= 0.0 {
            return Err(Error::Config("room_radius must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Viewpoint {
    pub id: u32,
    pub pos: [f64; 3],
}

/// Undirected weighted graph over viewpoints; edge length is Euclidean.
#[derive(Debug, Clone)]
pub struct NavGraph {
    pub viewpoints: Vec<Viewpoint>,
    pub edges: Vec<(u32, u32)>,
    adj: Vec<Vec<(u32, f64)>>,
}

impl NavGraph {
    pub fn new(viewpoints: Vec<Viewpoint>, mut edges: Vec<(u32, u32)>) -> Result<Self> {
        let n = viewpoints.len();
        for e in &mut edges {
            if e.0 > e.1 {
                std::mem::swap(&mut e.0, &mut e.1);
            }
        }
        edges.sort_unstable();
        edges.dedup();
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in &edges {
            if a == b {
                return Err(Error::Contract(format!("self-loop at viewpoint {a}")));
            }
            if a as usize >= n || b as usize >= n {
                return Err(Error::Contract(format!("edge ({a},{b}) references unknown viewpoint")));
            }
            let len = dist(&viewpoints[a as usize].pos, &viewpoints[b as usize].pos);
            if len <= 0.0 {
                return Err(Error::Contract(format!("edge ({a},{b}) has non-positive length")));
            }
            adj[a as usize].push((b, len));
            adj[b as usize].push((a, len));
        }
        for list in &mut adj {
            list.sort_by(|x, y| x.0.cmp(&y.0));
        }
        Ok(Self { viewpoints, edges, adj })
    }

    pub fn len(&self) -> usize {
        self.viewpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.viewpoints.is_empty()
    }

    pub fn neighbors(&self, v: u32) -> &[(u32, f64)] {
        &self.adj[v as usize]
    }

    pub fn edge_length(&self, a: u32, b: u32) -> Option<f64> {
        self.adj[a as usize].iter().find(|(n, _)| *n == b).map(|(_, l)| *l)
    }

    pub fn position(&self, v: u32) -> [f64; 3] {
        self.viewpoints[v as usize].pos
    }

    pub fn is_connected(&self) -> bool {
        if self.viewpoints.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.len()];
        let mut stack = vec![0u32];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &(n, _) in self.neighbors(v) {
                if !seen[n as usize] {
                    seen[n as usize] = true;
                    count += 1;
                    stack.push(n);
                }
            }
        }
        count == self.len()
    }

    /// Dijkstra distances from a source to every viewpoint, with parents.
    pub fn dijkstra(&self, source: u32) -> (Vec<f64>, Vec<u32>) {
        let n = self.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut parent = vec![u32::MAX; n];
        let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::new();
        dist[source as usize] = 0.0;
        heap.push(HeapEntry { dist: 0.0, node: source });
        while let Some(HeapEntry { dist: d, node }) = heap.pop() {
            if d > dist[node as usize] {
                continue;
            }
            for &(next, len) in self.neighbors(node) {
                let nd = d + len;
                if nd < dist[next as usize] {
                    dist[next as usize] = nd;
                    parent[next as usize] = node;
                    heap.push(HeapEntry { dist: nd, node: next });
                }
            }
        }
        (dist, parent)
    }
}

#[derive(PartialEq)]
struct HeapEntry {
    dist: f64,
    node: u32,
}
impl Eq for HeapEntry {}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // min-heap on distance, ties broken by lower node id
        other
            .dist
            .partial_cmp(&self.dist)
            .unwrap()
            .then_with(|| other.node.cmp(&self.node))
    }
}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

pub fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Geodesic shortest path between two viewpoints.
pub fn shortest_path(graph: &NavGraph, a: u32, b: u32) -> Result<(Vec<u32>, f64)> {
    if a as usize >= graph.len() {
        return Err(Error::UnknownViewpoint(a));
    }
    if b as usize >= graph.len() {
        return Err(Error::UnknownViewpoint(b));
    }
    if a == b {
        return Ok((vec![a], 0.0));
    }
    let (dist, parent) = graph.dijkstra(a);
    if !dist[b as usize].is_finite() {
        return Err(Error::Unreachable(a, b));
    }
    let mut path = vec![b];
    let mut cur = b;
    while cur != a {
        cur = parent[cur as usize];
        path.push(cur);
    }
    path.reverse();
    Ok((path, dist[b as usize]))
}

/// One heading sector of a viewpoint: the view toward a single neighbor.
#[derive(Debug, Clone)]
pub struct Sector {
    pub neighbor: u32,
    /// Radians in [0, 2π) from the +x axis.
    pub heading: f64,
    /// Entities visible in this sector; the first is rendered with the large
    /// region, the rest with small corner regions.
    pub entities: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct World {
    pub graph: NavGraph,
    /// Per viewpoint, sectors ordered by increasing heading.
    pub sectors: Vec<Vec<Sector>>,
    pub params: WorldParams,
    pub codes: CodeTable,
    /// Room index per viewpoint.
    pub room_of: Vec<usize>,
    /// Theme entity per room.
    pub themes: Vec<u32>,
}

/// A rectangle of cells within a tile; rows `r0..r1`, cols `c0..c1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.r0 && row < self.r1 && col >= self.c0 && col < self.c1
    }
}

impl World {
    pub fn sectors_of(&self, v: u32) -> Result<&[Sector]> {
        self.sectors.get(v as usize).map(|s| s.as_slice()).ok_or(Error::UnknownViewpoint(v))
    }

    pub fn theme_of_room(&self, v: u32) -> u32 {
        self.themes[self.room_of[v as usize]]
    }

    /// Entity placement for one sector tile, in paint order: the sector's
    /// first entity gets a large centered rectangle, later entities small
    /// corner rectangles painted over it. The owner of a cell is the last
    /// rectangle covering it.
    pub fn entity_regions(&self, v: u32, sector_idx: usize) -> Result<Vec<(u32, Rect)>> {
        let sectors = self.sectors_of(v)?;
        let sector = sectors
            .get(sector_idx)
            .ok_or_else(|| Error::Contract(format!("viewpoint {v} has no sector {sector_idx}")))?;
        let (h, w) = (self.params.h, self.params.w);
        let mut out = Vec::with_capacity(sector.entities.len());
        let mut r = rng::rng(self.params.seed, &[0x5ec7, v as u64, sector_idx as u64]);
        let corner_base = r.gen_range(0..4usize);
        for (i, &e) in sector.entities.iter().enumerate() {
            if i == 0 {
                out.push((e, Rect { r0: 1, r1: h - 1, c0: 1, c1: w - 1 }));
            } else {
                // small rect anchored at one of the four corners; later
                // entities rotate corners so they never overlap each other
                let sh = h / 4;
                let sw = w / 4;
                let corner = (corner_base + i - 1) % 4;
                let (r0, c0) = match corner {
                    0 => (0, 0),
                    1 => (0, w - sw),
                    2 => (h - sh, 0),
                    _ => (h - sh, w - sw),
                };
                out.push((e, Rect { r0, r1: r0 + sh, c0, c1: c0 + sw }));
            }
        }
        Ok(out)
    }

    /// Cell ownership for one sector tile: entity id per cell, or None for
    /// background. Shared by the renderer and by mask supervision.
    pub fn owner_map(&self, v: u32, sector_idx: usize) -> Result<Vec<Option<u32>>> {
        let (h, w) = (self.params.h, self.params.w);
        let mut owner = vec![None; h * w];
        for (e, rect) in self.entity_regions(v, sector_idx)? {
            for row in rect.r0..rect.r1 {
                for col in rect.c0..rect.c1 {
                    owner[row * w + col] = Some(e);
                }
            }
        }
        Ok(owner)
    }
}

/// Generate a procedural world: room clusters with themed semantics,
/// connected by a room-level spanning tree plus extra links.
pub fn generate_world(seed: u64, params: &WorldParams) -> Result<World> {
    params.validate()?;
    let mut params = params.clone();
    params.seed = seed;
    let mut r = rng::rng(seed, &[0x0077]);

    let n_rooms = (params.nodes / 8).clamp(3, 8);
    if params.vocab < n_rooms + 1 {
        return Err(Error::Config(format!(
            "vocabulary {} too small for {} rooms",
            params.vocab, n_rooms
        )));
    }

    // Room centers: rejection-sampled in a square for >= 4.5 m separation.
    let side = 4.5 * (n_rooms as f64).sqrt() + 3.0;
    let mut centers: Vec<[f64; 2]> = Vec::new();
    for _ in 0..n_rooms {
        let mut best = [0.0, 0.0];
        let mut best_sep = f64::NEG_INFINITY;
        for _ in 0..64 {
            let cand = [r.gen_range(0.0..side), r.gen_range(0.0..side)];
            let sep = centers
                .iter()
                .map(|c| ((c[0] - cand[0]).powi(2) + (c[1] - cand[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            if sep > best_sep {
                best_sep = sep;
                best = cand;
            }
            if sep >= 4.5 {
                break;
            }
        }
        centers.push(best);
    }

    // Viewpoints: nodes split evenly across rooms, scattered around centers.
    let mut viewpoints = Vec::with_capacity(params.nodes);
    let mut room_of = Vec::with_capacity(params.nodes);
    for i in 0..params.nodes {
        let room = i % n_rooms;
        let ang = r.gen_range(0.0..std::f64::consts::TAU);
        let rad = params.room_radius * r.gen_range(0.0f64..1.0).sqrt();
        viewpoints.push(Viewpoint {
            id: i as u32,
            pos: [
                centers[room][0] + rad * ang.cos(),
                centers[room][1] + rad * ang.sin(),
                r.gen_range(-0.05..0.05),
            ],
        });
        room_of.push(room);
    }

    let mut edges: Vec<(u32, u32)> = Vec::new();

    // Intra-room: minimum spanning tree plus a nearest-neighbor link per node.
    for room in 0..n_rooms {
        let members: Vec<u32> =
            (0..params.nodes as u32).filter(|&i| room_of[i as usize] == room).collect();
        if members.len() < 2 {
            continue;
        }
        let mut in_tree = vec![false; members.len()];
        in_tree[0] = true;
        for _ in 1..members.len() {
            let mut best = (0usize, 0usize, f64::INFINITY);
            for (i, &a) in members.iter().enumerate() {
                if !in_tree[i] {
                    continue;
                }
                for (j, &b) in members.iter().enumerate() {
                    if in_tree[j] {
                        continue;
                    }
                    let d = dist(&viewpoints[a as usize].pos, &viewpoints[b as usize].pos);
                    if d < best.2 {
                        best = (i, j, d);
                    }
                }
            }
            in_tree[best.1] = true;
            edges.push((members[best.0], members[best.1]));
        }
        // one extra nearest link per node for loops inside the room
        for (i, &a) in members.iter().enumerate() {
            let mut nearest = (u32::MAX, f64::INFINITY);
            for (j, &b) in members.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = dist(&viewpoints[a as usize].pos, &viewpoints[b as usize].pos);
                if d < nearest.1 {
                    nearest = (b, d);
                }
            }
            if nearest.0 != u32::MAX {
                edges.push((a.min(nearest.0), a.max(nearest.0)));
            }
        }
    }

    // Inter-room: spanning tree over rooms (nearest-center Prim) plus one
    // random extra link; each link joins the closest cross-room node pair.
    let mut room_links: Vec<(usize, usize)> = Vec::new();
    {
        let mut in_tree = vec![false; n_rooms];
        in_tree[0] = true;
        for _ in 1..n_rooms {
            let mut best = (0usize, 0usize, f64::INFINITY);
            for a in 0..n_rooms {
                if !in_tree[a] {
                    continue;
                }
                for b in 0..n_rooms {
                    if in_tree[b] {
                        continue;
                    }
                    let d = ((centers[a][0] - centers[b][0]).powi(2)
                        + (centers[a][1] - centers[b][1]).powi(2))
                    .sqrt();
                    if d < best.2 {
                        best = (a, b, d);
                    }
                }
            }
            in_tree[best.1] = true;
            room_links.push((best.0, best.1));
        }
        if n_rooms > 3 {
            let a = r.gen_range(0..n_rooms);
            let b = (a + 1 + r.gen_range(0..n_rooms - 1)) % n_rooms;
            if !room_links.contains(&(a, b)) && !room_links.contains(&(b, a)) {
                room_links.push((a.min(b), a.max(b)));
            }
        }
    }
    for (ra, rb) in room_links {
        let mut best = (0u32, 0u32, f64::INFINITY);
        for a in 0..params.nodes as u32 {
            if room_of[a as usize] != ra {
                continue;
            }
            for b in 0..params.nodes as u32 {
                if room_of[b as usize] != rb {
                    continue;
                }
                let d = dist(&viewpoints[a as usize].pos, &viewpoints[b as usize].pos);
                if d < best.2 {
                    best = (a, b, d);
                }
            }
        }
        edges.push((best.0.min(best.1), best.0.max(best.1)));
    }

    let graph = NavGraph::new(viewpoints, edges)?;
    if !graph.is_connected() {
        return Err(Error::Generation("generated graph is not connected".into()));
    }

    // Themes: distinct entity per room.
    let mut ids: Vec<u32> = (0..params.vocab as u32).collect();
    ids.shuffle(&mut r);
    let themes: Vec<u32> = ids[..n_rooms].to_vec();

    // Sectors: one per neighbor, ordered by heading; the view toward n shows
    // the theme of n's room. Keeping sectors single-entity means the tile a
    // hypothesis splices into contributes no foreign entity cells to the
    // filter's keys, so every present entity stays separable per cell.
    let mut sectors = Vec::with_capacity(params.nodes);
    for v in 0..params.nodes as u32 {
        let pos = graph.position(v);
        let mut list: Vec<Sector> = graph
            .neighbors(v)
            .iter()
            .map(|&(n, _)| {
                let npos = graph.position(n);
                let heading =
                    (npos[1] - pos[1]).atan2(npos[0] - pos[0]).rem_euclid(std::f64::consts::TAU);
                let entities = vec![themes[room_of[n as usize]]];
                Sector { neighbor: n, heading, entities }
            })
            .collect();
        list.sort_by(|a, b| a.heading.partial_cmp(&b.heading).unwrap());
        sectors.push(list);
    }

    let codes = themed_codes(&params, &graph, &room_of, &themes);
    Ok(World { graph, sectors, params, codes, room_of, themes })
}

/// Code table for a world: random rows everywhere, except that theme rows
/// are re-embedded by room geometry. Each theme's code points along a shared
/// base direction tilted by its room's planar position, so the code-space
/// cosine between two themes falls off monotonically with the distance
/// between their rooms (nearby rooms share decor). This is what lets dynamic
/// imagination hill-climb: when the target entity is out of sight, the
/// visible entity most similar to it in code space names the room to walk
/// through next. Deterministic in data stored in the world file, so loading
/// reconstructs the identical table.
fn themed_codes(
    params: &WorldParams,
    graph: &NavGraph,
    room_of: &[usize],
    themes: &[u32],
) -> CodeTable {
    let mut codes = CodeTable::new(params.vocab, params.c);
    let c = params.c;
    if c < 4 || themes.is_empty() {
        // too few channels to spare two for geometry
        return codes;
    }
    let n_rooms = themes.len();
    let mut centers = vec![[0.0f64; 2]; n_rooms];
    let mut counts = vec![0usize; n_rooms];
    for v in 0..graph.len() {
        let p = graph.position(v as u32);
        let r = room_of[v];
        centers[r][0] += p[0];
        centers[r][1] += p[1];
        counts[r] += 1;
    }
    for (ctr, &n) in centers.iter_mut().zip(&counts) {
        if n > 0 {
            ctr[0] /= n as f64;
            ctr[1] /= n as f64;
        }
    }
    // normalize centers to [0, 1]^2
    for axis in 0..2 {
        let lo = centers.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
        let hi = centers.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-9);
        for p in centers.iter_mut() {
            p[axis] = (p[axis] - lo) / span;
        }
    }
    // Shared positive base direction plus two channel-ripple patterns that
    // are orthogonal to it and to each other; κ keeps every entry positive.
    let inv = 1.0 / (c as f64).sqrt();
    const KAPPA: f64 = 0.35;
    for (r, &theme) in themes.iter().enumerate() {
        let (cx, cy) = (centers[r][0], centers[r][1]);
        let mut row: Vec<f64> = (0..c)
            .map(|j| {
                let e1 = if j % 2 == 0 { inv } else { -inv };
                let e2 = if (j / 2) % 2 == 0 { inv } else { -inv };
                inv + KAPPA * (cx * e1 + cy * e2)
            })
            .collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in row.iter_mut() {
            *x /= norm;
        }
        codes.set_row(theme, &row);
    }
    codes
}

/// Render the panorama at a viewpoint: one tile per navigable neighbor,
/// entity regions carrying code rows over uniform [0, 0.1] background noise.
pub fn render_observation(world: &World, viewpoint: u32, rng_seed: u64) -> Result<Panorama> {
    let sectors = world.sectors_of(viewpoint)?;
    let (h, w, c) = (world.params.h, world.params.w, world.params.c);
    let mut tiles = Vec::with_capacity(sectors.len());
    for (si, sector) in sectors.iter().enumerate() {
        let mut r = rng::rng(rng_seed, &[viewpoint as u64, si as u64]);
        let mut grid = FeatureGrid::zeros(h, w, c);
        for v in grid.data_mut() {
            *v = r.gen_range(0.0..0.1);
        }
        let owner = world.owner_map(viewpoint, si)?;
        for row in 0..h {
            for col in 0..w {
                if let Some(e) = owner[row * w + col] {
                    grid.cell_mut(row, col).copy_from_slice(world.codes.row(e));
                }
            }
        }
        grid.clamp_unit();
        tiles.push(Tile { candidate_id: sector.neighbor, heading: sector.heading, grid });
    }
    Ok(Panorama { tiles })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    pub entities: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Episode {
    pub id: u64,
    pub start: u32,
    pub goal: u32,
    pub instruction: Instruction,
    pub gt_path: Vec<u32>,
    pub gt_length: f64,
}

/// Room themes entered along a path, read off the sector semantics: the first
/// entity of the sector looking from path[i] toward path[i+1], with
/// consecutive duplicates collapsed.
fn themes_along_path(world: &World, path: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::new();
    for win in path.windows(2) {
        let sectors = &world.sectors[win[0] as usize];
        if let Some(s) = sectors.iter().find(|s| s.neighbor == win[1]) {
            let theme = s.entities[0];
            if out.last() != Some(&theme) {
                out.push(theme);
            }
        }
    }
    out
}

/// Generate an episode whose ground-truth path is at least `min_path_len`
/// meters. The instruction strings together the room themes crossed along
/// the path, ending with the goal room's theme.
pub fn generate_episode(world: &World, seed: u64, min_path_len: f64) -> Result<Episode> {
    let n = world.graph.len() as u32;
    let mut r = rng::rng(seed, &[0xe915]);
    for attempt in 0..n {
        let start = if attempt == 0 { r.gen_range(0..n) } else { (attempt - 1) % n };
        let (dist, parent) = world.graph.dijkstra(start);
        let candidates: Vec<u32> =
            (0..n).filter(|&g| g != start && dist[g as usize] >= min_path_len).collect();
        if candidates.is_empty() {
            continue;
        }
        let goal = candidates[r.gen_range(0..candidates.len())];
        let mut gt_path = vec![goal];
        let mut cur = goal;
        while cur != start {
            cur = parent[cur as usize];
            gt_path.push(cur);
        }
        gt_path.reverse();
        let gt_length = dist[goal as usize];

        let themes = themes_along_path(world, &gt_path);
        let (landmarks, goal_entity) = match themes.split_last() {
            Some((&last, rest)) => {
                // up to 3 landmarks evenly sampled from the interior themes
                let picked: Vec<u32> = if rest.len() <= 3 {
                    rest.to_vec()
                } else {
                    (0..3).map(|i| rest[i * (rest.len() - 1) / 2]).collect::<Vec<_>>()
                };
                (picked, last)
            }
            None => (Vec::new(), world.theme_of_room(goal)),
        };
        let mut entities = landmarks;
        if entities.last() != Some(&goal_entity) {
            entities.push(goal_entity);
        }
        let text = render_instruction(&entities);
        return Ok(Episode {
            id: seed,
            start,
            goal,
            instruction: Instruction { text, entities },
            gt_path,
            gt_length,
        });
    }
    Err(Error::Generation(format!(
        "no viewpoint pair at least {min_path_len} m apart"
    )))
}

fn render_instruction(entities: &[u32]) -> String {
    match entities.len() {
        0 => "stop here".to_string(),
        1 => format!("find the {}", entity_name(entities[0])),
        _ => {
            let mut parts = vec![format!("go to the {}", entity_name(entities[0]))];
            for &e in &entities[1..entities.len() - 1] {
                parts.push(format!("then the {}", entity_name(e)));
            }
            parts.push(format!("then find the {}", entity_name(entities[entities.len() - 1])));
            parts.join(", ")
        }
    }
}

// ---------------------------------------------------------------------------
// World file I/O (JSON schema: version, params, viewpoints, edges, semantics)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct WorldFile {
    version: u32,
    params: WorldParams,
    viewpoints: Vec<Viewpoint>,
    edges: Vec<[u32; 2]>,
    semantics: BTreeMap<String, BTreeMap<String, Vec<u32>>>,
    room_of: Vec<usize>,
    themes: Vec<u32>,
}

pub const WORLD_FILE_VERSION: u32 = 1;

impl World {
    pub fn to_json(&self) -> Result<String> {
        let mut semantics = BTreeMap::new();
        for (v, sectors) in self.sectors.iter().enumerate() {
            let mut per_sector = BTreeMap::new();
            for (si, s) in sectors.iter().enumerate() {
                per_sector.insert(si.to_string(), s.entities.clone());
            }
            semantics.insert(v.to_string(), per_sector);
        }
        let file = WorldFile {
            version: WORLD_FILE_VERSION,
            params: self.params.clone(),
            viewpoints: self.graph.viewpoints.clone(),
            edges: self.graph.edges.iter().map(|&(a, b)| [a, b]).collect(),
            semantics,
            room_of: self.room_of.clone(),
            themes: self.themes.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: WorldFile = serde_json::from_str(json)?;
        if file.version != WORLD_FILE_VERSION {
            return Err(Error::Data(format!("unsupported world file version {}", file.version)));
        }
        file.params.validate()?;
        let graph = NavGraph::new(file.viewpoints, file.edges.iter().map(|e| (e[0], e[1])).collect())?;
        let mut sectors = Vec::with_capacity(graph.len());
        for v in 0..graph.len() as u32 {
            let pos = graph.position(v);
            let mut list: Vec<Sector> = graph
                .neighbors(v)
                .iter()
                .map(|&(n, _)| {
                    let npos = graph.position(n);
                    let heading = (npos[1] - pos[1])
                        .atan2(npos[0] - pos[0])
                        .rem_euclid(std::f64::consts::TAU);
                    Sector { neighbor: n, heading, entities: Vec::new() }
                })
                .collect();
            list.sort_by(|a, b| a.heading.partial_cmp(&b.heading).unwrap());
            sectors.push(list);
        }
        for (v_str, per_sector) in &file.semantics {
            let v: usize =
                v_str.parse().map_err(|_| Error::Data(format!("bad viewpoint key {v_str}")))?;
            let list = sectors
                .get_mut(v)
                .ok_or_else(|| Error::Data(format!("semantics for unknown viewpoint {v}")))?;
            for (si_str, entities) in per_sector {
                let si: usize = si_str
                    .parse()
                    .map_err(|_| Error::Data(format!("bad sector key {si_str}")))?;
                let sector = list
                    .get_mut(si)
                    .ok_or_else(|| Error::Data(format!("viewpoint {v} has no sector {si}")))?;
                for &e in entities {
                    if e as usize >= file.params.vocab {
                        return Err(Error::Data(format!("entity {e} outside vocabulary")));
                    }
                }
                sector.entities = entities.clone();
            }
        }
        for (v, list) in sectors.iter().enumerate() {
            if list.iter().any(|s| s.entities.is_empty()) {
                return Err(Error::Data(format!("viewpoint {v} has a sector without entities")));
            }
        }
        let codes = themed_codes(&file.params, &graph, &file.room_of, &file.themes);
        Ok(World {
            graph,
            sectors,
            params: file.params,
            codes,
            room_of: file.room_of,
            themes: file.themes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn line_graph(lengths: &[f64]) -> NavGraph {
        let mut x = 0.0;
        let mut vps = vec![Viewpoint { id: 0, pos: [0.0, 0.0, 0.0] }];
        for (i, &l) in lengths.iter().enumerate() {
            x += l;
            vps.push(Viewpoint { id: i as u32 + 1, pos: [x, 0.0, 0.0] });
        }
        let edges = (0..lengths.len() as u32).map(|i| (i, i + 1)).collect();
        NavGraph::new(vps, edges).unwrap()
    }

    #[test]
    fn code_rows_unit_norm_and_distinct() {
        let table = CodeTable::new(32, 8);
        for e in 0..32u32 {
            let norm: f64 = table.row(e).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            assert!(table.row(e).iter().all(|&x| x > 0.0 && x <= 1.0));
        }
        for a in 0..32u32 {
            for b in 0..a {
                assert!(table.cosine(a, b) < 1.0 - 1e-9, "rows {a} and {b} too close");
            }
        }
    }

    #[test]
    fn decode_recovers_entity() {
        let table = CodeTable::new(32, 8);
        for e in 0..32u32 {
            let (got, dot) = table.decode(table.row(e));
            assert_eq!(got, e);
            assert!((dot - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generate_world_is_deterministic() {
        let params = WorldParams::default();
        let a = generate_world(7, &params).unwrap();
        let b = generate_world(7, &params).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let c = generate_world(8, &params).unwrap();
        assert_ne!(a.to_json().unwrap(), c.to_json().unwrap());
    }

    #[test]
    fn generate_world_rejects_bad_params() {
        let mut params = WorldParams::default();
        params.nodes = 5;
        assert!(matches!(generate_world(1, &params), Err(Error::Config(_))));
        let mut params = WorldParams::default();
        params.c = 2;
        assert!(matches!(generate_world(1, &params), Err(Error::Config(_))));
    }

    #[test]
    fn generated_worlds_connected_and_valid() {
        let params = WorldParams::default();
        for seed in 0..50 {
            let world = generate_world(seed, &params).unwrap();
            assert!(world.graph.is_connected());
            for sectors in &world.sectors {
                assert!(!sectors.is_empty());
                for s in sectors {
                    assert!(!s.entities.is_empty() && s.entities.len() <= 3);
                    assert!(s.entities.iter().all(|&e| (e as usize) < params.vocab));
                }
            }
        }
    }

    #[test]
    fn shortest_path_trivial_cases() {
        let g = line_graph(&[1.0, 2.0]);
        let (path, len) = shortest_path(&g, 1, 1).unwrap();
        assert_eq!(path, vec![1]);
        assert_eq!(len, 0.0);
        let (path, len) = shortest_path(&g, 0, 2).unwrap();
        assert_eq!(path, vec![0, 1, 2]);
        assert!((len - 3.0).abs() < 1e-12);
    }

    #[test]
    fn shortest_path_unreachable() {
        let vps = vec![
            Viewpoint { id: 0, pos: [0.0, 0.0, 0.0] },
            Viewpoint { id: 1, pos: [1.0, 0.0, 0.0] },
            Viewpoint { id: 2, pos: [5.0, 0.0, 0.0] },
        ];
        let g = NavGraph::new(vps, vec![(0, 1)]).unwrap();
        assert!(matches!(shortest_path(&g, 0, 2), Err(Error::Unreachable(0, 2))));
        assert!(matches!(shortest_path(&g, 0, 9), Err(Error::UnknownViewpoint(9))));
    }

    /// Exhaustive simple-path enumeration; the independent oracle for
    /// Dijkstra on small graphs.
    pub fn brute_force_shortest(graph: &NavGraph, a: u32, b: u32) -> Option<f64> {
        fn rec(
            graph: &NavGraph,
            cur: u32,
            goal: u32,
            visited: &mut Vec<bool>,
            len: f64,
            best: &mut Option<f64>,
        ) {
            if cur == goal {
                *best = Some(best.map_or(len, |b: f64| b.min(len)));
                return;
            }
            if let Some(b) = *best {
                if len >= b {
                    return;
                }
            }
            for &(n, l) in graph.neighbors(cur) {
                if !visited[n as usize] {
                    visited[n as usize] = true;
                    rec(graph, n, goal, visited, len + l, best);
                    visited[n as usize] = false;
                }
            }
        }
        let mut visited = vec![false; graph.len()];
        visited[a as usize] = true;
        let mut best = None;
        rec(graph, a, b, &mut visited, 0.0, &mut best);
        best
    }

    pub fn random_small_graph(seed: u64, max_nodes: usize) -> NavGraph {
        let mut r = rng::rng(seed, &[0x97af]);
        let n = r.gen_range(2..=max_nodes);
        let vps: Vec<Viewpoint> = (0..n)
            .map(|i| Viewpoint {
                id: i as u32,
                pos: [r.gen_range(0.0..10.0), r.gen_range(0.0..10.0), 0.0],
            })
            .collect();
        let mut edges: Vec<(u32, u32)> = (1..n as u32).map(|i| (r.gen_range(0..i), i)).collect();
        for _ in 0..n / 2 {
            let a = r.gen_range(0..n as u32);
            let b = r.gen_range(0..n as u32);
            if a != b {
                edges.push((a.min(b), a.max(b)));
            }
        }
        NavGraph::new(vps, edges).unwrap()
    }

    #[test]
    fn dijkstra_matches_enumeration_oracle() {
        for seed in 0..30 {
            let g = random_small_graph(seed, 20);
            let a = 0u32;
            let b = (g.len() - 1) as u32;
            let (_, len) = shortest_path(&g, a, b).unwrap();
            let brute = brute_force_shortest(&g, a, b).unwrap();
            assert!((len - brute).abs() < 1e-9, "seed {seed}: {len} vs {brute}");
        }
    }

    #[test]
    fn render_shape_and_determinism() {
        let world = generate_world(7, &WorldParams::default()).unwrap();
        let v = 0u32;
        let k = world.sectors[0].len();
        let pano = render_observation(&world, v, 99).unwrap();
        assert_eq!(pano.k(), k);
        let asm = pano.assembled();
        assert_eq!((asm.h, asm.w), (16, 16 * k));
        let again = render_observation(&world, v, 99).unwrap();
        assert_eq!(asm.data(), again.assembled().data());
        assert!(matches!(render_observation(&world, 10_000, 0), Err(Error::UnknownViewpoint(_))));
    }

    #[test]
    fn rendered_entity_cells_decode_by_argmax() {
        let world = generate_world(7, &WorldParams::default()).unwrap();
        let pano = render_observation(&world, 3, 42).unwrap();
        for (si, tile) in pano.tiles.iter().enumerate() {
            let owner = world.owner_map(3, si).unwrap();
            for row in 0..tile.grid.h {
                for col in 0..tile.grid.w {
                    let cell = tile.grid.cell(row, col);
                    assert!(cell.iter().all(|&v| (0.0..=1.0).contains(&v)));
                    if let Some(e) = owner[row * tile.grid.w + col] {
                        let (got, dot) = world.codes.decode(cell);
                        assert_eq!(got, e);
                        assert!(dot > PRESENCE_THRESHOLD);
                    } else {
                        let (_, dot) = world.codes.decode(cell);
                        assert!(dot < PRESENCE_THRESHOLD);
                    }
                }
            }
        }
    }

    #[test]
    fn episode_generation_contracts() {
        let world = generate_world(7, &WorldParams::default()).unwrap();
        let ep = generate_episode(&world, 5, 0.0).unwrap();
        assert!(ep.gt_length >= 0.0);
        assert_eq!(ep.gt_path.first(), Some(&ep.start));
        assert_eq!(ep.gt_path.last(), Some(&ep.goal));
        let (_, oracle_len) = shortest_path(&world.graph, ep.start, ep.goal).unwrap();
        assert!((ep.gt_length - oracle_len).abs() < 1e-9);
        let again = generate_episode(&world, 5, 0.0).unwrap();
        assert_eq!(serde_json::to_string(&ep).unwrap(), serde_json::to_string(&again).unwrap());
        assert!(!ep.instruction.entities.is_empty());
        assert!(!ep.instruction.text.is_empty());
    }

    #[test]
    fn episode_generation_fails_when_no_pair_far_enough() {
        let world = generate_world(7, &WorldParams::default()).unwrap();
        assert!(matches!(
            generate_episode(&world, 1, 1e6),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn world_json_roundtrip() {
        let world = generate_world(11, &WorldParams::default()).unwrap();
        let json = world.to_json().unwrap();
        let back = World::from_json(&json).unwrap();
        assert_eq!(json, back.to_json().unwrap());
        // rendering agrees after the roundtrip
        let a = render_observation(&world, 2, 7).unwrap().assembled();
        let b = render_observation(&back, 2, 7).unwrap().assembled();
        assert_eq!(a.data(), b.data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn shortest_path_is_symmetric(seed in 0u64..500) {
            let g = random_small_graph(seed, 15);
            let a = 0u32;
            let b = (g.len() - 1) as u32;
            let (_, ab) = shortest_path(&g, a, b).unwrap();
            let (_, ba) = shortest_path(&g, b, a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
        }

        #[test]
        fn rendered_grids_stay_in_unit_interval(seed in 0u64..200, rs in 0u64..100) {
            let mut params = WorldParams::default();
            params.nodes = 12;
            let world = generate_world(seed, &params).unwrap();
            let pano = render_observation(&world, (seed % 12) as u32, rs).unwrap();
            for tile in &pano.tiles {
                prop_assert!(tile.grid.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn generated_worlds_connected_many_seeds() {
        let mut params = WorldParams::default();
        params.nodes = 24;
        for seed in 0..1000 {
            let world = generate_world(seed, &params).unwrap();
            assert!(world.graph.is_connected(), "seed {seed} produced a disconnected graph");
        }
    }
}
