//! Feature grids and panoramas.
//!
//! A `FeatureGrid` is an H×W×C block of values in [0,1]; it stands in for an
//! image. A `Panorama` is one tile per navigable neighbor of the current
//! viewpoint, ordered by heading. Grids persist as little-endian f32 with a
//! 16-byte header (magic "VGRD", u32 H, W, C).

use crate::error::{Error, Result};
use std::io::{Read, Write};

pub const GRID_MAGIC: &[u8; 4] = b"VGRD";

/// Dense H×W×C grid, row-major, channel-minor. Values live in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn from_data(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::Contract(format!(
                "grid data length {} does not match {}x{}x{}",
                data.len(),
                h,
                w,
                c
            )));
        }
        Ok(Self { h, w, c, data })
    }

    #[inline]
    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let base = (row * self.w + col) * self.c;
        &self.data[base..base + self.c]
    }

    #[inline]
    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let base = (row * self.w + col) * self.c;
        &mut self.data[base..base + self.c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    /// Channel-wise mean over all cells. The embedding used for cosine
    /// similarity between imagined and observed grids.
    pub fn embed(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.c];
        for cell in self.data.chunks_exact(self.c) {
            for (o, v) in out.iter_mut().zip(cell) {
                *o += v;
            }
        }
        let n = self.cells() as f64;
        if n > 0.0 {
            for o in &mut out {
                *o /= n;
            }
        }
        out
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(GRID_MAGIC)?;
        w.write_all(&(self.h as u32).to_le_bytes())?;
        w.write_all(&(self.w as u32).to_le_bytes())?;
        w.write_all(&(self.c as u32).to_le_bytes())?;
        for &v in &self.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != GRID_MAGIC {
            return Err(Error::Data("bad grid magic".into()));
        }
        let mut dim = [0u8; 4];
        let mut read_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut dim)?;
            Ok(u32::from_le_bytes(dim))
        };
        let h = read_u32(&mut r)? as usize;
        let w = read_u32(&mut r)? as usize;
        let c = read_u32(&mut r)? as usize;
        let mut buf = vec![0u8; h * w * c * 4];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Self::from_data(h, w, c, data)
    }
}

/// One observation tile: the view toward a single navigable neighbor.
#[derive(Debug, Clone)]
pub struct Tile {
    /// Viewpoint id of the neighbor this tile looks toward.
    pub candidate_id: u32,
    /// Heading in radians, in [0, 2π), measured from the +x axis.
    pub heading: f64,
    pub grid: FeatureGrid,
}

/// Per-candidate tiles ordered by increasing heading.
#[derive(Debug, Clone)]
pub struct Panorama {
    pub tiles: Vec<Tile>,
}

impl Panorama {
    pub fn k(&self) -> usize {
        self.tiles.len()
    }

    /// Assembled H×(W·K)×C grid, tiles concatenated along the width axis.
    pub fn assembled(&self) -> FeatureGrid {
        assert!(!self.tiles.is_empty(), "panorama has no tiles");
        let h = self.tiles[0].grid.h;
        let w = self.tiles[0].grid.w;
        let c = self.tiles[0].grid.c;
        let mut out = FeatureGrid::zeros(h, w * self.tiles.len(), c);
        for (k, tile) in self.tiles.iter().enumerate() {
            for row in 0..h {
                for col in 0..w {
                    out.cell_mut(row, k * w + col).copy_from_slice(tile.grid.cell(row, col));
                }
            }
        }
        out
    }

    /// Mean embedding over the whole panorama.
    pub fn embed(&self) -> Vec<f64> {
        self.assembled().embed()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn embed_constant_grid() {
        let mut g = FeatureGrid::zeros(4, 4, 3);
        g.data_mut().fill(0.7);
        for v in g.embed() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_matches_naive_double_loop() {
        let mut g = FeatureGrid::zeros(5, 3, 4);
        for (i, v) in g.data_mut().iter_mut().enumerate() {
            *v = ((i * 31 + 7) % 97) as f64 / 97.0;
        }
        let mut naive = vec![0.0; 4];
        for row in 0..5 {
            for col in 0..3 {
                for ch in 0..4 {
                    naive[ch] += g.cell(row, col)[ch];
                }
            }
        }
        for n in &mut naive {
            *n /= 15.0;
        }
        let got = g.embed();
        for (a, b) in got.iter().zip(&naive) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_is_linear() {
        let mut g = FeatureGrid::zeros(3, 3, 2);
        for (i, v) in g.data_mut().iter_mut().enumerate() {
            *v = (i % 10) as f64 / 10.0;
        }
        let mut half = g.clone();
        for v in half.data_mut() {
            *v *= 0.5;
        }
        for (a, b) in half.embed().iter().zip(g.embed()) {
            assert!((a - 0.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_roundtrip_via_bytes() {
        let mut g = FeatureGrid::zeros(2, 3, 2);
        for (i, v) in g.data_mut().iter_mut().enumerate() {
            *v = (i as f32 / 12.0) as f64; // exactly representable as f32
        }
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], GRID_MAGIC);
        assert_eq!(buf.len(), 16 + 2 * 3 * 2 * 4);
        let back = FeatureGrid::read_from(buf.as_slice()).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn assembled_shape_and_content() {
        let mut a = FeatureGrid::zeros(2, 2, 1);
        a.data_mut().fill(0.1);
        let mut b = FeatureGrid::zeros(2, 2, 1);
        b.data_mut().fill(0.9);
        let pano = Panorama {
            tiles: vec![
                Tile { candidate_id: 0, heading: 0.0, grid: a },
                Tile { candidate_id: 1, heading: 1.0, grid: b },
            ],
        };
        let asm = pano.assembled();
        assert_eq!((asm.h, asm.w, asm.c), (2, 4, 1));
        assert_eq!(asm.cell(0, 0)[0], 0.1);
        assert_eq!(asm.cell(1, 3)[0], 0.9);
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_f32_values(vals in proptest::collection::vec(0.0f32..=1.0, 12)) {
            let data: Vec<f64> = vals.iter().map(|&v| v as f64).collect();
            let g = FeatureGrid::from_data(2, 3, 2, data).unwrap();
            let mut buf = Vec::new();
            g.write_to(&mut buf).unwrap();
            let back = FeatureGrid::read_from(buf.as_slice()).unwrap();
            prop_assert_eq!(g, back);
        }
    }
}
