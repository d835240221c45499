//! Proxy intra codec. Each block is predicted from the original pixels
//! bordering it (mid-gray where the CTU edge cuts them off), the residual
//! goes through a 4x4 Hadamard transform with uniform quantization, and the
//! cost is reconstruction SSE plus lambda times a bit estimate. Everything
//! is integer or fixed f64 arithmetic, so costs are bit-exact across runs.

use crate::{Error, Result};

/// 8-bit grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Plane {
    pub w: usize,
    pub h: usize,
    data: Vec<u8>,
}

impl Plane {
    pub fn new(w: usize, h: usize, fill: u8) -> Plane {
        Plane {
            w,
            h,
            data: vec![fill; w * h],
        }
    }

    pub fn from_vec(w: usize, h: usize, data: Vec<u8>) -> Result<Plane> {
        if data.len() != w * h {
            return Err(Error::format(format!(
                "plane payload {} bytes, expected {}x{}={}",
                data.len(),
                w,
                h,
                w * h
            )));
        }
        Ok(Plane { w, h, data })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    pub fn row(&self, y: usize) -> &[u8] {
        &self.data[y * self.w..(y + 1) * self.w]
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    /// Copies the `size`-square tile whose top-left pixel is (x0, y0).
    pub fn tile(&self, x0: usize, y0: usize, size: usize) -> Result<Plane> {
        self.window(x0, y0, size, size)
    }

    pub fn window(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Plane> {
        if x0 + w > self.w || y0 + h > self.h {
            return Err(Error::format(format!(
                "window {}x{} at ({},{}) exceeds plane {}x{}",
                w, h, x0, y0, self.w, self.h
            )));
        }
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.w + x0..y * self.w + x0 + w]);
        }
        Ok(Plane { w, h, data })
    }

    /// Mirror across the main diagonal: (x, y) maps to (y, x).
    pub fn transpose(&self) -> Plane {
        let mut out = Plane::new(self.h, self.w, 0);
        for y in 0..self.h {
            for x in 0..self.w {
                out.set(y, x, self.get(x, y));
            }
        }
        out
    }
}

/// Cost-model constants. `qp` is always passed per call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProxyCodecConfig {
    /// Lagrangian scale: lambda(qp) = lambda_scale * 2^((qp - 12) / 3).
    pub lambda_scale: f64,
    /// Fixed bits charged for coding any block (mode + flags overhead).
    pub header_bits: f64,
    /// Signaling bits per split decision, indexed by split-mode code.
    pub split_flag_bits: [f64; 6],
    /// Bits charged per nonzero quantized coefficient.
    pub bits_per_coeff: f64,
}

impl Default for ProxyCodecConfig {
    fn default() -> Self {
        ProxyCodecConfig {
            lambda_scale: 0.57,
            header_bits: 8.0,
            split_flag_bits: [1.0, 2.0, 3.0, 3.0, 4.0, 4.0],
            bits_per_coeff: 4.0,
        }
    }
}

impl ProxyCodecConfig {
    pub fn lambda(&self, qp: u8) -> f64 {
        self.lambda_scale * 2f64.powf((qp as f64 - 12.0) / 3.0)
    }
}

/// Quantizer step for a QP, doubling every six steps.
pub fn quant_step(qp: u8) -> f64 {
    2f64.powf((qp as f64 - 4.0) / 6.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntraMode {
    Dc,
    Planar,
    Horizontal,
    Vertical,
}

impl IntraMode {
    pub const ALL: [IntraMode; 4] = [
        IntraMode::Dc,
        IntraMode::Planar,
        IntraMode::Horizontal,
        IntraMode::Vertical,
    ];
}

/// Distortion/rate pair for one coded block, plus the winning mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockCost {
    pub distortion: f64,
    pub rate: f64,
    pub mode: IntraMode,
}

impl BlockCost {
    pub fn cost(&self, lambda: f64) -> f64 {
        self.distortion + lambda * self.rate
    }
}

const UNAVAILABLE: u16 = 128;

struct Borders {
    top: Vec<u16>,
    left: Vec<u16>,
}

fn gather_borders(ctu: &Plane, x: usize, y: usize, w: usize, h: usize) -> Borders {
    let top = if y > 0 {
        (0..w).map(|i| ctu.get(x + i, y - 1) as u16).collect()
    } else {
        vec![UNAVAILABLE; w]
    };
    let left = if x > 0 {
        (0..h).map(|j| ctu.get(x - 1, y + j) as u16).collect()
    } else {
        vec![UNAVAILABLE; h]
    };
    Borders { top, left }
}

fn predict(mode: IntraMode, b: &Borders, w: usize, h: usize, out: &mut [u8]) {
    match mode {
        IntraMode::Dc => {
            let sum: u32 = b.top.iter().chain(b.left.iter()).map(|&v| v as u32).sum();
            let n = (w + h) as u32;
            let dc = ((sum + n / 2) / n) as u8;
            out.fill(dc);
        }
        IntraMode::Planar => {
            let tr = b.top[w - 1] as u64;
            let bl = b.left[h - 1] as u64;
            let (wu, hu) = (w as u64, h as u64);
            for yy in 0..h {
                for xx in 0..w {
                    let (xu, yu) = (xx as u64, yy as u64);
                    let hor = (wu - 1 - xu) * b.left[yy] as u64 + (xu + 1) * tr;
                    let ver = (hu - 1 - yu) * b.top[xx] as u64 + (yu + 1) * bl;
                    out[yy * w + xx] = ((hor * hu + ver * wu + wu * hu) / (2 * wu * hu)) as u8;
                }
            }
        }
        IntraMode::Horizontal => {
            for yy in 0..h {
                out[yy * w..(yy + 1) * w].fill(b.left[yy] as u8);
            }
        }
        IntraMode::Vertical => {
            for yy in 0..h {
                for xx in 0..w {
                    out[yy * w + xx] = b.top[xx] as u8;
                }
            }
        }
    }
}

#[inline]
fn butterfly4(v: [f64; 4]) -> [f64; 4] {
    let a = v[0] + v[1];
    let b = v[0] - v[1];
    let c = v[2] + v[3];
    let d = v[2] - v[3];
    [a + c, b + d, a - c, b - d]
}

/// Codes one 4x4 residual tile: forward Hadamard, uniform quantization with
/// the given effective step, dequantization and inverse. Returns the
/// reconstructed residual and the nonzero-level count.
fn code_tile(res: &[f64; 16], eff_step: f64) -> ([f64; 16], u32) {
    let mut coef = [0f64; 16];
    for r in 0..4 {
        let row = butterfly4([res[r * 4], res[r * 4 + 1], res[r * 4 + 2], res[r * 4 + 3]]);
        coef[r * 4..r * 4 + 4].copy_from_slice(&row);
    }
    for c in 0..4 {
        let col = butterfly4([coef[c], coef[4 + c], coef[8 + c], coef[12 + c]]);
        for r in 0..4 {
            coef[r * 4 + c] = col[r];
        }
    }
    let mut nnz = 0u32;
    for v in coef.iter_mut() {
        let level = (*v / eff_step).round();
        if level != 0.0 {
            nnz += 1;
        }
        *v = level * eff_step;
    }
    let mut rec = [0f64; 16];
    for r in 0..4 {
        let row = butterfly4([coef[r * 4], coef[r * 4 + 1], coef[r * 4 + 2], coef[r * 4 + 3]]);
        rec[r * 4..r * 4 + 4].copy_from_slice(&row);
    }
    for c in 0..4 {
        let col = butterfly4([rec[c], rec[4 + c], rec[8 + c], rec[12 + c]]);
        for r in 0..4 {
            rec[r * 4 + c] = col[r] / 16.0;
        }
    }
    (rec, nnz)
}

/// Costs the block at (x, y) of size w x h inside `ctu` for one QP: best of
/// the four border predictors, coded tile by tile.
pub fn intra_cost(
    ctu: &Plane,
    x: usize,
    y: usize,
    w: usize,
    h: usize,
    qp: u8,
    cfg: &ProxyCodecConfig,
) -> Result<BlockCost> {
    if qp > 51 {
        return Err(Error::config(format!("qp {qp} outside [0, 51]")));
    }
    if x + w > ctu.w || y + h > ctu.h {
        return Err(Error::geometry(format!(
            "block {}x{} at ({},{}) exceeds plane {}x{}",
            w, h, x, y, ctu.w, ctu.h
        )));
    }
    if w % 4 != 0 || h % 4 != 0 || w == 0 || h == 0 {
        return Err(Error::geometry(format!(
            "block {}x{} is not a positive multiple of 4",
            w, h
        )));
    }
    let borders = gather_borders(ctu, x, y, w, h);
    // Transform rows/cols each scale coefficients by 4 relative to the
    // orthonormal basis, so the quantizer step is scaled to match.
    let eff_step = 4.0 * quant_step(qp);
    let mut pred = vec![0u8; w * h];
    let mut best: Option<BlockCost> = None;
    let lambda = cfg.lambda(qp);
    for mode in IntraMode::ALL {
        predict(mode, &borders, w, h, &mut pred);
        let mut sse = 0f64;
        let mut nnz = 0u32;
        for ty in (0..h).step_by(4) {
            for tx in (0..w).step_by(4) {
                let mut res = [0f64; 16];
                for j in 0..4 {
                    for i in 0..4 {
                        let o = ctu.get(x + tx + i, y + ty + j) as f64;
                        let p = pred[(ty + j) * w + tx + i] as f64;
                        res[j * 4 + i] = o - p;
                    }
                }
                let (rec, tile_nnz) = code_tile(&res, eff_step);
                nnz += tile_nnz;
                for j in 0..4 {
                    for i in 0..4 {
                        let o = ctu.get(x + tx + i, y + ty + j) as f64;
                        let p = pred[(ty + j) * w + tx + i] as f64;
                        let r = (p + rec[j * 4 + i]).round().clamp(0.0, 255.0);
                        let d = o - r;
                        sse += d * d;
                    }
                }
            }
        }
        let candidate = BlockCost {
            distortion: sse,
            rate: cfg.header_bits + cfg.bits_per_coeff * nnz as f64,
            mode,
        };
        let better = match &best {
            None => true,
            Some(b) => candidate.cost(lambda) < b.cost(lambda),
        };
        if better {
            best = Some(candidate);
        }
    }
    Ok(best.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transpose_swaps_axes_and_is_involutive() {
        let p = noisy_plane(7, 3, 5);
        let t = p.transpose();
        assert_eq!((t.w, t.h), (3, 7));
        for y in 0..p.h {
            for x in 0..p.w {
                assert_eq!(p.get(x, y), t.get(y, x));
            }
        }
        assert_eq!(t.transpose().as_slice(), p.as_slice());
    }

    fn noisy_plane(w: usize, h: usize, seed: u64) -> Plane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Plane::new(w, h, 0);
        for y in 0..h {
            for x in 0..w {
                p.set(x, y, rng.gen());
            }
        }
        p
    }

    #[test]
    fn lambda_at_qp12_is_exactly_the_scale() {
        let cfg = ProxyCodecConfig::default();
        assert_eq!(cfg.lambda(12), 0.57);
        assert!((cfg.lambda(15) - 0.57 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_block_codes_losslessly_at_header_rate() {
        let cfg = ProxyCodecConfig::default();
        let p = Plane::new(16, 16, 128);
        for qp in [0u8, 22, 37, 51] {
            let c = intra_cost(&p, 0, 0, 16, 16, qp, &cfg).unwrap();
            assert_eq!(c.distortion, 0.0);
            assert_eq!(c.rate, cfg.header_bits);
            assert_eq!(c.mode, IntraMode::Dc);
        }
    }

    #[test]
    fn constant_block_any_level_with_borders_is_lossless() {
        let cfg = ProxyCodecConfig::default();
        let p = Plane::new(32, 32, 77);
        let c = intra_cost(&p, 8, 8, 16, 16, 37, &cfg).unwrap();
        assert_eq!(c.distortion, 0.0);
        assert_eq!(c.rate, cfg.header_bits);
    }

    #[test]
    fn row_constant_content_predicts_from_left_border() {
        let cfg = ProxyCodecConfig::default();
        let mut p = Plane::new(32, 32, 0);
        for y in 0..32 {
            let v = (y * 7 % 256) as u8;
            for x in 0..32 {
                p.set(x, y, v);
            }
        }
        let c = intra_cost(&p, 8, 8, 16, 16, 32, &cfg).unwrap();
        assert_eq!(c.distortion, 0.0);
        assert_eq!(c.mode, IntraMode::Horizontal);
    }

    #[test]
    fn column_constant_content_predicts_from_top_border() {
        let cfg = ProxyCodecConfig::default();
        let mut p = Plane::new(32, 32, 0);
        for y in 0..32 {
            for x in 0..32 {
                p.set(x, y, (x * 11 % 256) as u8);
            }
        }
        let c = intra_cost(&p, 8, 8, 16, 16, 32, &cfg).unwrap();
        assert_eq!(c.distortion, 0.0);
        assert_eq!(c.mode, IntraMode::Vertical);
    }

    #[test]
    fn coarser_quantizer_never_costs_more_bits() {
        let cfg = ProxyCodecConfig::default();
        let p = noisy_plane(64, 64, 3);
        let hi = intra_cost(&p, 16, 16, 32, 32, 51, &cfg).unwrap();
        let lo = intra_cost(&p, 16, 16, 32, 32, 22, &cfg).unwrap();
        assert!(hi.rate <= lo.rate, "rate {} > {}", hi.rate, lo.rate);
        assert!(hi.rate >= cfg.header_bits);
    }

    #[test]
    fn finer_quantizer_reconstructs_better_on_texture() {
        let cfg = ProxyCodecConfig::default();
        let p = noisy_plane(64, 64, 9);
        let fine = intra_cost(&p, 0, 0, 64, 64, 4, &cfg).unwrap();
        let coarse = intra_cost(&p, 0, 0, 64, 64, 51, &cfg).unwrap();
        assert!(fine.distortion < coarse.distortion);
    }

    #[test]
    fn rejects_bad_arguments() {
        let cfg = ProxyCodecConfig::default();
        let p = Plane::new(16, 16, 0);
        assert!(intra_cost(&p, 0, 0, 16, 16, 52, &cfg).is_err());
        assert!(intra_cost(&p, 8, 0, 16, 16, 22, &cfg).is_err());
        assert!(intra_cost(&p, 0, 0, 6, 4, 22, &cfg).is_err());
    }

    #[test]
    fn cost_is_bit_deterministic() {
        let cfg = ProxyCodecConfig::default();
        let p = noisy_plane(64, 64, 1234);
        let a = intra_cost(&p, 32, 16, 32, 16, 27, &cfg).unwrap();
        let b = intra_cost(&p, 32, 16, 32, 16, 27, &cfg).unwrap();
        assert_eq!(a.distortion.to_bits(), b.distortion.to_bits());
        assert_eq!(a.rate.to_bits(), b.rate.to_bits());
        assert_eq!(a.mode, b.mode);
    }

    #[test]
    fn tile_coder_is_exact_when_step_divides_coefficients() {
        // Residuals in multiples of the effective step survive the
        // round trip exactly.
        let res = [
            4.0, -4.0, 8.0, 0.0, 0.0, 4.0, -8.0, 4.0, 12.0, 0.0, 4.0, -4.0, 0.0, 8.0, 0.0, 4.0,
        ];
        let (rec, _) = code_tile(&res, 1.0);
        for (a, b) in res.iter().zip(rec.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn plane_window_copies_expected_pixels() {
        let p = noisy_plane(16, 8, 5);
        let w = p.window(4, 2, 8, 4).unwrap();
        for y in 0..4 {
            for x in 0..8 {
                assert_eq!(w.get(x, y), p.get(x + 4, y + 2));
            }
        }
        assert!(p.window(10, 0, 8, 4).is_err());
    }
}
