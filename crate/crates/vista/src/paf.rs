//! Perceptual alignment filter.
//!
//! Encodes the observed panorama and the two imagined grids with a shared
//! per-cell linear+tanh encoder, fuses them with scaled dot-product
//! multi-head attention (queries from the observation, keys/values from the
//! imagined grids), and decodes a sigmoid attention map over the panorama.
//! Training minimizes binary cross-entropy plus soft Dice against entity
//! masks, with hand-derived gradients and an adaptive-moment optimizer.
//!
//! All math runs in f64; parameters persist as little-endian f32 behind a
//! "VPAF" header.

use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::imagination::{attach_inpainted, imagine_dynamic, imagine_static, InstructionState};
use crate::rng;
use crate::world::{render_observation, World};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

pub const PAF_MAGIC: &[u8; 4] = b"VPAF";

const BCE_CLAMP: f64 = 1e-7;
const DICE_EPS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PafDims {
    /// Input channels per cell.
    pub c: usize,
    /// Encoder output width; must be divisible by `n_heads`.
    pub d: usize,
    pub n_heads: usize,
}

impl Default for PafDims {
    fn default() -> Self {
        Self { c: 8, d: 16, n_heads: 2 }
    }
}

impl PafDims {
    pub fn d_head(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "bad filter dims: C={} D={} heads={}",
                self.c, self.d, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Filter parameters. Flattening order (used by the binary format and the
/// finite-difference harness): enc_w, enc_b, per head wq then wk then wv,
/// out_w, out_b.
#[derive(Debug, Clone, PartialEq)]
pub struct PafParams {
    pub dims: PafDims,
    /// D×C, row-major.
    pub enc_w: Vec<f64>,
    /// D.
    pub enc_b: Vec<f64>,
    /// n_heads × D_h × D, flat.
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    /// D.
    pub out_w: Vec<f64>,
    pub out_b: f64,
}

impl PafParams {
    pub fn zeros(dims: PafDims) -> Self {
        let dh = dims.d_head();
        Self {
            dims,
            enc_w: vec![0.0; dims.d * dims.c],
            enc_b: vec![0.0; dims.d],
            wq: vec![0.0; dims.n_heads * dh * dims.d],
            wk: vec![0.0; dims.n_heads * dh * dims.d],
            wv: vec![0.0; dims.n_heads * dh * dims.d],
            out_w: vec![0.0; dims.d],
            out_b: 0.0,
        }
    }

    /// Glorot-uniform initialization, deterministic in the seed.
    pub fn init(dims: PafDims, seed: u64) -> Self {
        let mut p = Self::zeros(dims);
        let mut r = rng::rng(seed, &[0x9af1]);
        let fill = |v: &mut [f64], fan_in: usize, fan_out: usize, r: &mut rand_chacha::ChaCha8Rng| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in v.iter_mut() {
                *x = r.gen_range(-a..a);
            }
        };
        fill(&mut p.enc_w, dims.c, dims.d, &mut r);
        fill(&mut p.wq, dims.d, dims.d_head(), &mut r);
        fill(&mut p.wk, dims.d, dims.d_head(), &mut r);
        fill(&mut p.wv, dims.d, dims.d_head(), &mut r);
        fill(&mut p.out_w, dims.d, 1, &mut r);
        // Glorot-scale queries/keys are too diffuse over the hundreds of keys
        // a panorama produces: attention starts near-uniform and gradients
        // stall. A 4x wider query/key init sharpens initial attention enough
        // to train to convergence within a handful of epochs.
        for v in p.wq.iter_mut().chain(p.wk.iter_mut()) {
            *v *= 4.0;
        }
        p
    }

    pub fn flat_len(dims: PafDims) -> usize {
        let dh = dims.d_head();
        dims.d * dims.c + dims.d + 3 * dims.n_heads * dh * dims.d + dims.d + 1
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::flat_len(self.dims));
        out.extend_from_slice(&self.enc_w);
        out.extend_from_slice(&self.enc_b);
        out.extend_from_slice(&self.wq);
        out.extend_from_slice(&self.wk);
        out.extend_from_slice(&self.wv);
        out.extend_from_slice(&self.out_w);
        out.push(self.out_b);
        out
    }

    pub fn from_flat(dims: PafDims, flat: &[f64]) -> Result<Self> {
        if flat.len() != Self::flat_len(dims) {
            return Err(Error::Contract(format!(
                "flat parameter vector has length {}, expected {}",
                flat.len(),
                Self::flat_len(dims)
            )));
        }
        let mut p = Self::zeros(dims);
        let mut at = 0usize;
        let mut take = |n: usize| {
            let s = &flat[at..at + n];
            at += n;
            s.to_vec()
        };
        p.enc_w = take(dims.d * dims.c);
        p.enc_b = take(dims.d);
        let hsz = dims.n_heads * dims.d_head() * dims.d;
        p.wq = take(hsz);
        p.wk = take(hsz);
        p.wv = take(hsz);
        p.out_w = take(dims.d);
        p.out_b = flat[at];
        Ok(p)
    }

    fn head<'a>(&self, mat: &'a [f64], h: usize) -> &'a [f64] {
        let sz = self.dims.d_head() * self.dims.d;
        &mat[h * sz..(h + 1) * sz]
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(PAF_MAGIC)?;
        for dim in [self.dims.c, self.dims.d, self.dims.n_heads] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for v in self.to_flat() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PAF_MAGIC {
            return Err(Error::Data("bad filter params magic".into()));
        }
        let mut buf = [0u8; 4];
        let mut read_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut buf)?;
            Ok(u32::from_le_bytes(buf))
        };
        let dims = PafDims {
            c: read_u32(&mut r)? as usize,
            d: read_u32(&mut r)? as usize,
            n_heads: read_u32(&mut r)? as usize,
        };
        dims.validate()?;
        let n = Self::flat_len(dims);
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let flat: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Self::from_flat(dims, &flat)
    }

    fn axpy(&mut self, scale: f64, other: &Self) {
        let mine = [
            &mut self.enc_w[..],
            &mut self.enc_b[..],
            &mut self.wq[..],
            &mut self.wk[..],
            &mut self.wv[..],
            &mut self.out_w[..],
        ];
        let theirs = [
            &other.enc_w[..],
            &other.enc_b[..],
            &other.wq[..],
            &other.wk[..],
            &other.wv[..],
            &other.out_w[..],
        ];
        for (m, t) in mine.into_iter().zip(theirs) {
            for (a, b) in m.iter_mut().zip(t) {
                *a += scale * b;
            }
        }
        self.out_b += scale * other.out_b;
    }
}

/// Soft relevance map over a panorama; every value is a sigmoid output.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl AttentionMap {
    /// Mean value over tile `k` of a K-tile panorama with tile width `tile_w`.
    pub fn tile_mass(&self, k: usize, tile_w: usize) -> f64 {
        let mut sum = 0.0;
        for row in 0..self.h {
            for col in 0..tile_w {
                sum += self.values[row * self.w + k * tile_w + col];
            }
        }
        sum / (self.h * tile_w) as f64
    }

    pub fn uniform(h: usize, w: usize, value: f64) -> Self {
        Self { h, w, values: vec![value; h * w] }
    }
}

#[inline]
fn tanh_vec(z: &mut [f64]) {
    for v in z {
        *v = v.tanh();
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// exp for max-subtracted softmax scores (x ≤ 0). Branch-free range
/// reduction plus a degree-7 polynomial (≈ 5e-9 relative error) keeps the
/// softmax inner loop vectorizable, unlike a libm call.
#[inline]
fn softmax_exp(x: f64) -> f64 {
    let x = x.max(-700.0);
    let n = (x * std::f64::consts::LOG2_E).round();
    let z = x - n * std::f64::consts::LN_2; // |z| <= ln2/2
    let p = 1.0
        + z * (1.0
            + z * (0.5
                + z * (1.0 / 6.0
                    + z * (1.0 / 24.0
                        + z * (1.0 / 120.0 + z * (1.0 / 720.0 + z * (1.0 / 5040.0)))))));
    // scale by 2^n through the exponent bits; n is in [-1010, 0]
    p * f64::from_bits((((n as i64) + 1023) << 52) as u64)
}

/// Dot product with eight independent accumulators so the compiler can keep
/// the reduction off the serial add-latency chain (and vectorize it).
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let mut acc = [0.0f64; 8];
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    tail + acc.iter().sum::<f64>()
}

/// Shared encoder: per-cell tanh(W·x + b). Returns cells×D features.
pub fn encode(params: &PafParams, grid: &FeatureGrid) -> Result<Vec<f64>> {
    let dims = params.dims;
    if grid.c != dims.c {
        return Err(Error::Contract(format!(
            "grid has {} channels, encoder expects {}",
            grid.c, dims.c
        )));
    }
    let n = grid.cells();
    let mut out = vec![0.0; n * dims.d];
    for (cell, feat) in grid.data().chunks_exact(dims.c).zip(out.chunks_exact_mut(dims.d)) {
        for (d, f) in feat.iter_mut().enumerate() {
            let row = &params.enc_w[d * dims.c..(d + 1) * dims.c];
            let mut z = params.enc_b[d];
            for (w, x) in row.iter().zip(cell) {
                z += w * x;
            }
            *f = z;
        }
        tanh_vec(feat);
    }
    Ok(out)
}

struct ForwardCache {
    n_q: usize,
    m: usize,
    h_q: Vec<f64>,
    h_kv: Vec<f64>,
    /// Per head: q (n_q×dh), attn (n_q×m); k and v are stored transposed
    /// (dh×m) so the m-length inner loops stay contiguous.
    q: Vec<Vec<f64>>,
    kt: Vec<Vec<f64>>,
    vt: Vec<Vec<f64>>,
    attn: Vec<Vec<f64>>,
    fused: Vec<f64>,
    y: Vec<f64>,
}

fn project(mat: &[f64], feats: &[f64], n: usize, d: usize, dh: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * dh];
    for (feat, row_out) in feats.chunks_exact(d).zip(out.chunks_exact_mut(dh)) {
        for (j, o) in row_out.iter_mut().enumerate() {
            let w = &mat[j * d..(j + 1) * d];
            let mut acc = 0.0;
            for (a, b) in w.iter().zip(feat) {
                acc += a * b;
            }
            *o = acc;
        }
    }
    out
}

/// As `project`, but emitting the transpose (dh×n).
fn project_t(mat: &[f64], feats: &[f64], n: usize, d: usize, dh: usize) -> Vec<f64> {
    let mut out = vec![0.0; dh * n];
    for (i, feat) in feats.chunks_exact(d).enumerate() {
        for j in 0..dh {
            let w = &mat[j * d..(j + 1) * d];
            let mut acc = 0.0;
            for (a, b) in w.iter().zip(feat) {
                acc += a * b;
            }
            out[j * n + i] = acc;
        }
    }
    out
}

fn forward(
    params: &PafParams,
    o: &FeatureGrid,
    i_sd: &FeatureGrid,
    i_inpaint: &FeatureGrid,
    key_order: Option<&[usize]>,
) -> Result<(AttentionMap, ForwardCache)> {
    let dims = params.dims;
    dims.validate()?;
    if i_sd.c != dims.c || i_inpaint.c != dims.c || o.c != dims.c {
        return Err(Error::Contract("channel mismatch between grids and filter".into()));
    }
    if !i_sd.same_shape(i_inpaint) {
        return Err(Error::Contract("imagined and inpainted grids differ in shape".into()));
    }
    let n_q = o.cells();
    let m = 2 * i_sd.cells();
    let d = dims.d;
    let dh = dims.d_head();
    let scale = 1.0 / (dh as f64).sqrt();

    let h_q = encode(params, o)?;
    let mut h_kv = encode(params, i_sd)?;
    h_kv.extend(encode(params, i_inpaint)?);
    if let Some(perm) = key_order {
        if perm.len() != m {
            return Err(Error::Contract("key permutation length mismatch".into()));
        }
        let mut permuted = vec![0.0; h_kv.len()];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * d..(dst + 1) * d].copy_from_slice(&h_kv[src * d..(src + 1) * d]);
        }
        h_kv = permuted;
    }

    let mut q_heads = Vec::with_capacity(dims.n_heads);
    let mut kt_heads = Vec::with_capacity(dims.n_heads);
    let mut vt_heads = Vec::with_capacity(dims.n_heads);
    let mut attn_heads = Vec::with_capacity(dims.n_heads);
    let mut fused = vec![0.0; n_q * d];

    for h in 0..dims.n_heads {
        let q = project(params.head(&params.wq, h), &h_q, n_q, d, dh);
        let kt = project_t(params.head(&params.wk, h), &h_kv, m, d, dh);
        let vt = project_t(params.head(&params.wv, h), &h_kv, m, d, dh);
        let mut attn = vec![0.0; n_q * m];
        for i in 0..n_q {
            let qi = &q[i * dh..(i + 1) * dh];
            let row = &mut attn[i * m..(i + 1) * m];
            // scores as dh rank-one updates over the contiguous key rows
            for (jj, &qv) in qi.iter().enumerate() {
                let krow = &kt[jj * m..(jj + 1) * m];
                for (r, &kx) in row.iter_mut().zip(krow) {
                    *r += qv * kx;
                }
            }
            let mut max = f64::NEG_INFINITY;
            for r in row.iter_mut() {
                *r *= scale;
                if *r > max {
                    max = *r;
                }
            }
            for r in row.iter_mut() {
                *r = softmax_exp(*r - max);
            }
            let mut sum = 0.0;
            let chunks = row.chunks_exact(8);
            for r in chunks.remainder() {
                sum += r;
            }
            let mut acc = [0.0f64; 8];
            for ch in row.chunks_exact(8) {
                for i in 0..8 {
                    acc[i] += ch[i];
                }
            }
            sum += acc.iter().sum::<f64>();
            let inv = 1.0 / sum;
            for r in row.iter_mut() {
                *r *= inv;
            }
            // weighted sum of values into this head's slice of the fusion
            let out = &mut fused[i * d + h * dh..i * d + (h + 1) * dh];
            for (jj, oo) in out.iter_mut().enumerate() {
                *oo = dot(row, &vt[jj * m..(jj + 1) * m]);
            }
        }
        q_heads.push(q);
        kt_heads.push(kt);
        vt_heads.push(vt);
        attn_heads.push(attn);
    }

    let mut y = vec![0.0; n_q];
    for (i, yy) in y.iter_mut().enumerate() {
        let oi = &fused[i * d..(i + 1) * d];
        let mut z = params.out_b;
        for (w, f) in params.out_w.iter().zip(oi) {
            z += w * f;
        }
        *yy = sigmoid(z);
    }

    let map = AttentionMap { h: o.h, w: o.w, values: y.clone() };
    let cache = ForwardCache {
        n_q,
        m,
        h_q,
        h_kv,
        q: q_heads,
        kt: kt_heads,
        vt: vt_heads,
        attn: attn_heads,
        fused,
        y,
    };
    Ok((map, cache))
}

/// Eq.-style fusion: queries from the observed panorama, keys/values from the
/// imagined and inpainted grids, sigmoid decode to a per-cell relevance map.
pub fn fuse_and_decode(
    params: &PafParams,
    o: &FeatureGrid,
    i_sd: &FeatureGrid,
    i_inpaint: &FeatureGrid,
) -> Result<AttentionMap> {
    forward(params, o, i_sd, i_inpaint, None).map(|(m, _)| m)
}

/// Same computation with the key/value cells visited in a caller-chosen
/// order; softmax attention is order-invariant over keys, so the output must
/// match `fuse_and_decode` (exercised by property tests).
pub fn fuse_and_decode_with_key_order(
    params: &PafParams,
    o: &FeatureGrid,
    i_sd: &FeatureGrid,
    i_inpaint: &FeatureGrid,
    key_order: &[usize],
) -> Result<AttentionMap> {
    forward(params, o, i_sd, i_inpaint, Some(key_order)).map(|(m, _)| m)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossParts {
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
}

/// Binary cross-entropy (predictions clamped inside the logs) plus soft Dice
/// with ε = 1, unit weights.
pub fn loss(pred: &AttentionMap, gt: &[f64]) -> Result<LossParts> {
    if pred.values.len() != gt.len() {
        return Err(Error::Contract("prediction and mask shapes differ".into()));
    }
    let n = gt.len() as f64;
    let mut bce = 0.0;
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut gsum = 0.0;
    for (&p, &g) in pred.values.iter().zip(gt) {
        let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        bce -= g * pc.ln() + (1.0 - g) * (1.0 - pc).ln();
        inter += p * g;
        psum += p;
        gsum += g;
    }
    bce /= n;
    let dice = 1.0 - (2.0 * inter + DICE_EPS) / (psum + gsum + DICE_EPS);
    Ok(LossParts { bce, dice, total: bce + dice })
}

/// Soft Dice coefficient 2|P∩G|/(|P|+|G|) with the same ε as the loss.
pub fn dice_coefficient(pred: &AttentionMap, gt: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut gsum = 0.0;
    for (&p, &g) in pred.values.iter().zip(gt) {
        inter += p * g;
        psum += p;
        gsum += g;
    }
    (2.0 * inter + DICE_EPS) / (psum + gsum + DICE_EPS)
}

/// One training sample: observed panorama (assembled), the two imagined
/// grids, and the goal-entity mask over the panorama.
#[derive(Debug, Clone)]
pub struct Quadruple {
    pub o: FeatureGrid,
    pub i_sd: FeatureGrid,
    pub i_inpaint: FeatureGrid,
    /// 0/1 per panorama cell.
    pub gt: Vec<f64>,
}

/// Exact gradients of the total loss w.r.t. every parameter.
pub fn backward(params: &PafParams, quad: &Quadruple) -> Result<(LossParts, PafParams)> {
    let dims = params.dims;
    let (map, cache) = forward(params, &quad.o, &quad.i_sd, &quad.i_inpaint, None)?;
    let parts = loss(&map, &quad.gt)?;

    let n_q = cache.n_q;
    let m = cache.m;
    let d = dims.d;
    let dh = dims.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let n_f = n_q as f64;

    // dL/dy: BCE term (clamp-aware) + Dice term on raw predictions.
    let (mut inter, mut psum, mut gsum) = (0.0, 0.0, 0.0);
    for (&p, &g) in cache.y.iter().zip(&quad.gt) {
        inter += p * g;
        psum += p;
        gsum += g;
    }
    let denom = psum + gsum + DICE_EPS;
    let numer = 2.0 * inter + DICE_EPS;
    let mut dz = vec![0.0; n_q];
    for i in 0..n_q {
        let y = cache.y[i];
        let g = quad.gt[i];
        let mut dy = 0.0;
        if y > BCE_CLAMP && y < 1.0 - BCE_CLAMP {
            dy += (-g / y + (1.0 - g) / (1.0 - y)) / n_f;
        }
        dy += -(2.0 * g * denom - numer) / (denom * denom);
        dz[i] = dy * y * (1.0 - y);
    }

    let mut grads = PafParams::zeros(dims);

    // output head
    let mut dfused = vec![0.0; n_q * d];
    for i in 0..n_q {
        let oi = &cache.fused[i * d..(i + 1) * d];
        grads.out_b += dz[i];
        for (gw, &f) in grads.out_w.iter_mut().zip(oi) {
            *gw += dz[i] * f;
        }
        let dfi = &mut dfused[i * d..(i + 1) * d];
        for (df, &w) in dfi.iter_mut().zip(&params.out_w) {
            *df = dz[i] * w;
        }
    }

    let mut dh_q = vec![0.0; n_q * d];
    let mut dh_kv = vec![0.0; m * d];

    for h in 0..dims.n_heads {
        let q = &cache.q[h];
        let kt = &cache.kt[h];
        let vt = &cache.vt[h];
        let attn = &cache.attn[h];
        let mut dq = vec![0.0; n_q * dh];
        let mut dkt = vec![0.0; dh * m];
        let mut dvt = vec![0.0; dh * m];
        let mut da = vec![0.0; m];
        let mut ds = vec![0.0; m];

        for i in 0..n_q {
            let dohead = &dfused[i * d + h * dh..i * d + (h + 1) * dh];
            let arow = &attn[i * m..(i + 1) * m];
            // da_j = do · v_j ; dv_j += a_ij * do, both over contiguous rows
            da.iter_mut().for_each(|x| *x = 0.0);
            for (jj, &g) in dohead.iter().enumerate() {
                let vrow = &vt[jj * m..(jj + 1) * m];
                for (o, &vv) in da.iter_mut().zip(vrow) {
                    *o += g * vv;
                }
                let dvrow = &mut dvt[jj * m..(jj + 1) * m];
                for (o, &a) in dvrow.iter_mut().zip(arow) {
                    *o += g * a;
                }
            }
            let asum = dot(arow, &da);
            // softmax jacobian, then score gradients into q and k
            for ((o, &a), &dd) in ds.iter_mut().zip(arow).zip(&da) {
                *o = a * (dd - asum) * scale;
            }
            let qi = &q[i * dh..(i + 1) * dh];
            let dqi = &mut dq[i * dh..(i + 1) * dh];
            for (jj, o) in dqi.iter_mut().enumerate() {
                *o += dot(&ds, &kt[jj * m..(jj + 1) * m]);
            }
            for (jj, &qv) in qi.iter().enumerate() {
                let dkrow = &mut dkt[jj * m..(jj + 1) * m];
                for (o, &s) in dkrow.iter_mut().zip(&ds) {
                    *o += qv * s;
                }
            }
        }
        // back to row-major for the projection accumulators
        let mut dk = vec![0.0; m * dh];
        let mut dv = vec![0.0; m * dh];
        for jj in 0..dh {
            for j in 0..m {
                dk[j * dh + jj] = dkt[jj * m + j];
                dv[j * dh + jj] = dvt[jj * m + j];
            }
        }

        // projection weight gradients and feature gradients
        let wq = params.head(&params.wq, h);
        let wk = params.head(&params.wk, h);
        let wv = params.head(&params.wv, h);
        let gwq = &mut grads.wq[h * dh * d..(h + 1) * dh * d];
        let gwk = &mut grads.wk[h * dh * d..(h + 1) * dh * d];
        let gwv = &mut grads.wv[h * dh * d..(h + 1) * dh * d];
        accumulate_projection(gwq, &dq, &cache.h_q, &mut dh_q, wq, n_q, d, dh);
        accumulate_projection(gwk, &dk, &cache.h_kv, &mut dh_kv, wk, m, d, dh);
        accumulate_projection(gwv, &dv, &cache.h_kv, &mut dh_kv, wv, m, d, dh);
    }

    // shared encoder: query cells then the two key/value grids, in order
    let mut acc_encoder = |dhf: &[f64], hf: &[f64], grid_cells: CellsIter<'_>| {
        for ((dcell, hcell), xcell) in
            dhf.chunks_exact(d).zip(hf.chunks_exact(d)).zip(grid_cells)
        {
            for di in 0..d {
                let dzenc = dcell[di] * (1.0 - hcell[di] * hcell[di]);
                if dzenc == 0.0 {
                    continue;
                }
                grads.enc_b[di] += dzenc;
                let row = &mut grads.enc_w[di * dims.c..(di + 1) * dims.c];
                for (gw, &x) in row.iter_mut().zip(xcell) {
                    *gw += dzenc * x;
                }
            }
        }
    };
    acc_encoder(&dh_q, &cache.h_q, CellsIter::one(&quad.o, dims.c));
    acc_encoder(&dh_kv, &cache.h_kv, CellsIter::two(&quad.i_sd, &quad.i_inpaint, dims.c));

    Ok((parts, grads))
}

/// Iterator over the raw input cells of one or two grids, in encoding order.
struct CellsIter<'a> {
    first: std::slice::ChunksExact<'a, f64>,
    second: Option<std::slice::ChunksExact<'a, f64>>,
}

impl<'a> CellsIter<'a> {
    fn one(g: &'a FeatureGrid, c: usize) -> Self {
        Self { first: g.data().chunks_exact(c), second: None }
    }
    fn two(a: &'a FeatureGrid, b: &'a FeatureGrid, c: usize) -> Self {
        Self { first: a.data().chunks_exact(c), second: Some(b.data().chunks_exact(c)) }
    }
}

impl<'a> Iterator for CellsIter<'a> {
    type Item = &'a [f64];
    fn next(&mut self) -> Option<Self::Item> {
        self.first.next().or_else(|| self.second.as_mut().and_then(|s| s.next()))
    }
}

#[allow(clippy::too_many_arguments)]
fn accumulate_projection(
    grad_w: &mut [f64],
    d_out: &[f64],
    feats: &[f64],
    d_feats: &mut [f64],
    w: &[f64],
    n: usize,
    d: usize,
    dh: usize,
) {
    for i in 0..n {
        let dout = &d_out[i * dh..(i + 1) * dh];
        let feat = &feats[i * d..(i + 1) * d];
        let dfeat = &mut d_feats[i * d..(i + 1) * d];
        for (j, &g) in dout.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let wrow = &w[j * d..(j + 1) * d];
            let grow = &mut grad_w[j * d..(j + 1) * d];
            for di in 0..d {
                grow[di] += g * feat[di];
                dfeat[di] += g * wrow[di];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset synthesis
// ---------------------------------------------------------------------------

/// Synthesize alignment quadruples from procedural worlds: a random
/// viewpoint's panorama, a goal entity present there, the imagined and
/// inpainted grids for it, and the mask of panorama cells carrying the goal.
pub fn generate_quadruples(worlds: &[World], n: usize, seed: u64) -> Result<Vec<Quadruple>> {
    if worlds.is_empty() || n == 0 {
        return Err(Error::Config("need at least one world and one sample".into()));
    }
    let mut out = Vec::with_capacity(n);
    let mut r = rng::rng(seed, &[0x4dad]);
    for idx in 0..n {
        let world = &worlds[r.gen_range(0..worlds.len())];
        let params = &world.params;
        let v = r.gen_range(0..world.graph.len()) as u32;
        let pano = render_observation(world, v, rng::derive(seed, &[0x0b5, idx as u64]))?;

        // entities present at this viewpoint, by construction of the sectors
        let mut present: Vec<u32> = Vec::new();
        for s in world.sectors_of(v)? {
            for &e in &s.entities {
                if !present.contains(&e) {
                    present.push(e);
                }
            }
        }
        present.sort_unstable();
        if present.is_empty() {
            return Err(Error::Generation(format!("viewpoint {v} has no entities")));
        }
        let goal = present[r.gen_range(0..present.len())];

        let instr = InstructionState::new(vec![goal]);
        let mut hyp = if r.gen_bool(0.5) {
            imagine_static(&instr, params, &world.codes)?
        } else {
            imagine_dynamic(&pano, &[], &instr, params, &world.codes, v)?
        };
        attach_inpainted(&mut hyp, &pano, &world.codes)?;

        // ground truth: panorama cells owned by the goal entity
        let (h, w) = (params.h, params.w);
        let k = pano.k();
        let mut gt = vec![0.0; h * w * k];
        for si in 0..k {
            let owner = world.owner_map(v, si)?;
            for row in 0..h {
                for col in 0..w {
                    if owner[row * w + col] == Some(goal) {
                        gt[row * (w * k) + si * w + col] = 1.0;
                    }
                }
            }
        }
        out.push(Quadruple { o: pano.assembled(), i_sd: hyp.imagined, i_inpaint: hyp.inpainted, gt });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub patience: usize,
    pub seed: u64,
    pub dims: PafDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-2, epochs: 12, batch: 16, patience: 5, seed: 0, dims: PafDims::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    fn new(lr: f64, len: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, &g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Train the filter with adaptive-moment updates and early stopping on the
/// validation total loss. Returns the best-validation parameters and a
/// per-epoch log.
pub fn train(dataset: &[Quadruple], config: &TrainConfig) -> Result<(PafParams, Vec<EpochLog>)> {
    train_from(dataset, config, PafParams::init(config.dims, config.seed))
}

/// Same training loop from explicit initial parameters.
pub fn train_from(
    dataset: &[Quadruple],
    config: &TrainConfig,
    init: PafParams,
) -> Result<(PafParams, Vec<EpochLog>)> {
    if dataset.is_empty() {
        return Err(Error::Config("empty training dataset".into()));
    }
    config.dims.validate()?;
    if init.dims != config.dims {
        return Err(Error::Contract("initial parameters disagree with configured dims".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffle_rng = rng::rng(config.seed, &[0x7a11]);
    order.shuffle(&mut shuffle_rng);
    let val_len = (dataset.len() / 10).max(1).min(dataset.len() - 1).max(0);
    let (val_idx, train_idx) = order.split_at(val_len.min(order.len()));

    let mut params = init;
    let mut flat = params.to_flat();
    let mut adam = Adam::new(config.lr, flat.len());
    let mut log = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut since_best = 0usize;

    let mut epoch_order: Vec<usize> = train_idx.to_vec();
    for epoch in 0..config.epochs {
        epoch_order.shuffle(&mut shuffle_rng);
        let mut train_loss_sum = 0.0;
        let mut train_count = 0usize;
        for batch in epoch_order.chunks(config.batch.max(1)) {
            let mut batch_grads = PafParams::zeros(config.dims);
            for &i in batch {
                let (parts, grads) = backward(&params, &dataset[i])?;
                train_loss_sum += parts.total;
                batch_grads.axpy(1.0 / batch.len() as f64, &grads);
            }
            train_count += batch.len();
            let gflat = batch_grads.to_flat();
            adam.step(&mut flat, &gflat);
            params = PafParams::from_flat(config.dims, &flat)?;
        }
        let train_loss = train_loss_sum / train_count.max(1) as f64;

        let mut val_loss = 0.0;
        let mut val_dice = 0.0;
        for &i in val_idx {
            let quad = &dataset[i];
            let map = fuse_and_decode(&params, &quad.o, &quad.i_sd, &quad.i_inpaint)?;
            val_loss += loss(&map, &quad.gt)?.total;
            val_dice += dice_coefficient(&map, &quad.gt);
        }
        let vn = val_idx.len().max(1) as f64;
        val_loss /= vn;
        val_dice /= vn;
        log.push(EpochLog { epoch, train_loss, val_loss, val_dice });

        if val_loss < best_val {
            best_val = val_loss;
            best_params = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    Ok((best_params, log))
}

pub const DATASET_MAGIC: &[u8; 4] = b"VQDS";

/// Persist a quadruple dataset: "VQDS", u32 count, then per sample the three
/// grids in VGRD format followed by u32 mask length and f32 LE mask values.
pub fn write_quadruples<W: Write>(quads: &[Quadruple], mut w: W) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&(quads.len() as u32).to_le_bytes())?;
    for q in quads {
        q.o.write_to(&mut w)?;
        q.i_sd.write_to(&mut w)?;
        q.i_inpaint.write_to(&mut w)?;
        w.write_all(&(q.gt.len() as u32).to_le_bytes())?;
        for &v in &q.gt {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_quadruples<R: Read>(mut r: R) -> Result<Vec<Quadruple>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Data("not a VQDS dataset file".into()));
    }
    let mut nb = [0u8; 4];
    r.read_exact(&mut nb)?;
    let n = u32::from_le_bytes(nb) as usize;
    let mut quads = Vec::with_capacity(n);
    for _ in 0..n {
        let o = FeatureGrid::read_from(&mut r)?;
        let i_sd = FeatureGrid::read_from(&mut r)?;
        let i_inpaint = FeatureGrid::read_from(&mut r)?;
        r.read_exact(&mut nb)?;
        let len = u32::from_le_bytes(nb) as usize;
        if len != o.cells() {
            return Err(Error::Data(format!(
                "mask length {len} does not match {} panorama cells",
                o.cells()
            )));
        }
        let mut gt = Vec::with_capacity(len);
        let mut buf = [0u8; 4];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            gt.push(f32::from_le_bytes(buf) as f64);
        }
        quads.push(Quadruple { o, i_sd, i_inpaint, gt });
    }
    Ok(quads)
}

/// Held-out evaluation: mean Dice coefficient over a slice of quadruples.
pub fn mean_dice(params: &PafParams, samples: &[Quadruple]) -> Result<f64> {
    let mut sum = 0.0;
    for quad in samples {
        let map = fuse_and_decode(params, &quad.o, &quad.i_sd, &quad.i_inpaint)?;
        sum += dice_coefficient(&map, &quad.gt);
    }
    Ok(sum / samples.len().max(1) as f64)
}
