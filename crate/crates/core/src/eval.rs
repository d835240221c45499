//! Encode runs with wall-clock timing, rate/quality aggregation and
//! curve-difference metrics between an anchor and a test configuration.
//!
//! Timing covers partition search plus, on the fast path, predictor
//! inference. Image I/O and model loading happen before the timed region.

use std::path::Path;
use std::time::Instant;

use crate::codec::{Plane, ProxyCodecConfig};
use crate::net::{run_ctu, CtuPrediction, ModelParams, Scalar, ThresholdSet};
use crate::par::{map_indexed, Parallelism};
use crate::qtmt::PartitionConfig;
use crate::rdo::{exhaustive_partition, restricted_partition, SearchOutcome};
use crate::{Error, Result};

/// Aggregated outcome of encoding a set of CTUs at one qp.
#[derive(Clone, Debug)]
pub struct EncodeReport {
    pub qp: u8,
    pub n_ctus: usize,
    pub n_pixels: u64,
    pub sse: f64,
    /// Total rate in bits, split flags included.
    pub rate: f64,
    pub psnr: f64,
    /// Fastest repeat of the timed region (partition + coding path), in
    /// seconds. Predictor inference is measured separately.
    pub seconds: f64,
    pub repeat_seconds: Vec<f64>,
    /// Fastest repeat of the predictor walk, in seconds (0 for the anchor).
    /// Kept out of `seconds` so time-saving comparisons measure the coding
    /// path, with inference overhead reported alongside.
    pub overhead_seconds: f64,
    pub nodes_expanded: u64,
    pub intra_evals: u64,
    pub mode_evaluations: u64,
    /// Predictor forward passes (0 for the anchor).
    pub network_evals: u64,
}

pub fn psnr(sse: f64, n_pixels: u64) -> f64 {
    if sse <= 0.0 {
        return f64::INFINITY;
    }
    10.0 * ((255.0f64 * 255.0) * n_pixels as f64 / sse).log10()
}

fn aggregate(
    qp: u8,
    outcomes: &[SearchOutcome],
    tile_pixels: u64,
    network_evals: u64,
    repeat_seconds: Vec<f64>,
    overhead_seconds: f64,
) -> EncodeReport {
    let n_pixels = tile_pixels * outcomes.len() as u64;
    let sse: f64 = outcomes.iter().map(|o| o.total.distortion).sum();
    let rate: f64 = outcomes.iter().map(|o| o.total.rate).sum();
    let seconds = repeat_seconds.iter().copied().fold(f64::INFINITY, f64::min);
    EncodeReport {
        qp,
        n_ctus: outcomes.len(),
        n_pixels,
        sse,
        rate,
        psnr: psnr(sse, n_pixels),
        seconds,
        repeat_seconds,
        overhead_seconds,
        nodes_expanded: outcomes.iter().map(|o| o.stats.nodes_expanded).sum(),
        intra_evals: outcomes.iter().map(|o| o.stats.intra_evals).sum(),
        mode_evaluations: outcomes.iter().map(|o| o.stats.mode_evaluations).sum(),
        network_evals,
    }
}

fn check_tiles(tiles: &[Plane], pcfg: &PartitionConfig) -> Result<u64> {
    if tiles.is_empty() {
        return Err(Error::Eval("no CTUs to encode".into()));
    }
    let s = pcfg.ctu_size as usize;
    for t in tiles {
        if t.w != s || t.h != s {
            return Err(Error::Eval(format!(
                "tile {}x{} does not match the {s}-pixel CTU",
                t.w, t.h
            )));
        }
    }
    Ok((s as u64) * (s as u64))
}

/// Exhaustive search over every tile. `repeats` re-runs the timed region
/// and the fastest run is reported.
pub fn encode_anchor(
    tiles: &[Plane],
    qp: u8,
    pcfg: &PartitionConfig,
    ccfg: &ProxyCodecConfig,
    par: Parallelism,
    repeats: usize,
) -> Result<EncodeReport> {
    let tile_pixels = check_tiles(tiles, pcfg)?;
    let repeats = repeats.max(1);
    let mut outcomes: Option<Vec<SearchOutcome>> = None;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let run: Vec<Result<SearchOutcome>> =
            map_indexed(par, tiles, |_, t| exhaustive_partition(t, qp, pcfg, ccfg));
        times.push(start.elapsed().as_secs_f64());
        let run: Result<Vec<SearchOutcome>> = run.into_iter().collect();
        outcomes.get_or_insert(run?);
    }
    Ok(aggregate(qp, &outcomes.unwrap(), tile_pixels, 0, times, 0.0))
}

/// Predictor-guided search: the staged walk narrows each state to candidate
/// modes, then the search scores only those. The walk and the search are
/// timed as separate phases: `seconds` covers the partition+coding path,
/// `overhead_seconds` the predictor inference.
pub fn encode_fast<S: Scalar>(
    tiles: &[Plane],
    model: &ModelParams<S>,
    taus: &ThresholdSet,
    qp: u8,
    pcfg: &PartitionConfig,
    ccfg: &ProxyCodecConfig,
    par: Parallelism,
    repeats: usize,
) -> Result<EncodeReport> {
    let tile_pixels = check_tiles(tiles, pcfg)?;
    let repeats = repeats.max(1);
    let mut preds: Option<Vec<CtuPrediction>> = None;
    let mut overhead = f64::INFINITY;
    for _ in 0..repeats {
        let start = Instant::now();
        let run: Vec<Result<CtuPrediction>> =
            map_indexed(par, tiles, |_, t| run_ctu(model, t, qp, pcfg, taus));
        overhead = overhead.min(start.elapsed().as_secs_f64());
        let run: Result<Vec<CtuPrediction>> = run.into_iter().collect();
        preds.get_or_insert(run?);
    }
    let preds = preds.unwrap();
    let network_evals: u64 = preds.iter().map(|p| p.network_evals as u64).sum();

    let mut outcomes: Option<Vec<SearchOutcome>> = None;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let run: Vec<Result<SearchOutcome>> = map_indexed(par, tiles, |i, t| {
            restricted_partition(t, qp, pcfg, ccfg, &preds[i].candidates)
        });
        times.push(start.elapsed().as_secs_f64());
        let run: Result<Vec<SearchOutcome>> = run.into_iter().collect();
        outcomes.get_or_insert(run?);
    }
    Ok(aggregate(qp, &outcomes.unwrap(), tile_pixels, network_evals, times, overhead))
}

// ---------------------------------------------------------------------------
// Rate/quality points and CSV

/// One (qp, rate, quality, time) measurement of a configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatePoint {
    pub qp: u8,
    pub rate: f64,
    pub psnr: f64,
    pub seconds: f64,
}

impl EncodeReport {
    pub fn rate_point(&self) -> RatePoint {
        RatePoint {
            qp: self.qp,
            rate: self.rate,
            psnr: self.psnr,
            seconds: self.seconds,
        }
    }

    pub fn csv_header() -> &'static str {
        "qp,rate,psnr,seconds,overhead_seconds,ctus,pixels,sse,nodes,intra_evals,mode_evals,network_evals"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.qp,
            self.rate,
            self.psnr,
            self.seconds,
            self.overhead_seconds,
            self.n_ctus,
            self.n_pixels,
            self.sse,
            self.nodes_expanded,
            self.intra_evals,
            self.mode_evaluations,
            self.network_evals
        )
    }
}

pub fn write_reports_csv(path: &Path, reports: &[EncodeReport]) -> Result<()> {
    let mut out = String::from(EncodeReport::csv_header());
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads rate points from a CSV with named columns. Only `qp`, `rate`,
/// `psnr` and `seconds` are required; extra columns are ignored.
pub fn read_points_csv(path: &Path) -> Result<Vec<RatePoint>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let idx = |name: &str| -> Result<usize> {
        cols.iter().position(|c| *c == name).ok_or_else(|| {
            Error::format(format!("{}: missing column {name:?}", path.display()))
        })
    };
    let (iq, ir, ip, is) = (idx("qp")?, idx("rate")?, idx("psnr")?, idx("seconds")?);
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let get = |i: usize| -> Result<&str> {
            f.get(i).copied().ok_or_else(|| {
                Error::format(format!("{}: line {} is short", path.display(), n + 2))
            })
        };
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::format(format!("{}: bad number {s:?}", path.display())))
        };
        out.push(RatePoint {
            qp: get(iq)?
                .parse()
                .map_err(|_| Error::format(format!("{}: bad qp", path.display())))?,
            rate: parse_f(get(ir)?)?,
            psnr: parse_f(get(ip)?)?,
            seconds: parse_f(get(is)?)?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Curve differences

/// Mean relative time difference in percent, paired by qp. Negative means
/// the test configuration is faster.
pub fn delta_t(anchor: &[RatePoint], test: &[RatePoint]) -> Result<f64> {
    if anchor.is_empty() {
        return Err(Error::Eval("no anchor points".into()));
    }
    let mut acc = 0.0;
    for a in anchor {
        let t = test
            .iter()
            .find(|t| t.qp == a.qp)
            .ok_or_else(|| Error::Eval(format!("no test point at qp {}", a.qp)))?;
        if a.seconds <= 0.0 {
            return Err(Error::Eval(format!("anchor time at qp {} is not positive", a.qp)));
        }
        acc += (t.seconds - a.seconds) / a.seconds * 100.0;
    }
    Ok(acc / anchor.len() as f64)
}

/// Least-squares polynomial fit y(x) with x centered at its mean; with
/// `degree + 1` points this interpolates exactly. Returns (center,
/// ascending coefficients).
fn fit_poly(xs: &[f64], ys: &[f64], degree: usize) -> Result<(f64, Vec<f64>)> {
    let n = xs.len();
    assert!(n > degree, "need more points than coefficients");
    let center = xs.iter().sum::<f64>() / n as f64;
    let d = degree + 1;
    // Normal equations on the centered Vandermonde system.
    let mut ata = vec![vec![0.0f64; d]; d];
    let mut aty = vec![0.0f64; d];
    for (&x, &y) in xs.iter().zip(ys) {
        let t = x - center;
        let mut pows = vec![1.0; 2 * d - 1];
        for i in 1..2 * d - 1 {
            pows[i] = pows[i - 1] * t;
        }
        for r in 0..d {
            for c in 0..d {
                ata[r][c] += pows[r + c];
            }
            aty[r] += pows[r] * y;
        }
    }
    // Gaussian elimination with partial pivoting.
    for col in 0..d {
        let (pivot, mag) = (col..d)
            .map(|r| (r, ata[r][col].abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        if mag < 1e-12 {
            return Err(Error::Eval(
                "curve points are degenerate (coincident quality values)".into(),
            ));
        }
        ata.swap(col, pivot);
        aty.swap(col, pivot);
        for r in col + 1..d {
            let f = ata[r][col] / ata[col][col];
            for c in col..d {
                ata[r][c] -= f * ata[col][c];
            }
            aty[r] -= f * aty[col];
        }
    }
    let mut coef = vec![0.0f64; d];
    for r in (0..d).rev() {
        let mut v = aty[r];
        for c in r + 1..d {
            v -= ata[r][c] * coef[c];
        }
        coef[r] = v / ata[r][r];
    }
    Ok((center, coef))
}

/// Definite integral of the fitted polynomial between `lo` and `hi` in the
/// original (uncentered) variable.
fn poly_integral(center: f64, coef: &[f64], lo: f64, hi: f64) -> f64 {
    let anti = |x: f64| -> f64 {
        let t = x - center;
        let mut acc = 0.0;
        let mut tp = t;
        for (i, &c) in coef.iter().enumerate() {
            acc += c * tp / (i + 1) as f64;
            tp *= t;
        }
        acc
    };
    anti(hi) - anti(lo)
}

/// Average vertical distance between two fitted curves over the overlap of
/// their x ranges: mean of (test - anchor).
fn curve_gap(ax: &[f64], ay: &[f64], tx: &[f64], ty: &[f64]) -> Result<f64> {
    if ax.len() < 2 || tx.len() < 2 {
        return Err(Error::Eval("need at least two points per curve".into()));
    }
    let range = |xs: &[f64]| {
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (alo, ahi) = range(ax);
    let (tlo, thi) = range(tx);
    let lo = alo.max(tlo);
    let hi = ahi.min(thi);
    if hi - lo < 1e-9 {
        return Err(Error::Eval("curves do not overlap".into()));
    }
    let deg = |n: usize| (n - 1).min(3);
    let (ac, acoef) = fit_poly(ax, ay, deg(ax.len()))?;
    let (tc, tcoef) = fit_poly(tx, ty, deg(tx.len()))?;
    let ia = poly_integral(ac, &acoef, lo, hi);
    let it = poly_integral(tc, &tcoef, lo, hi);
    Ok((it - ia) / (hi - lo))
}

fn validate_points(points: &[RatePoint]) -> Result<()> {
    for p in points {
        if !(p.rate > 0.0) || !p.psnr.is_finite() {
            return Err(Error::Eval(format!(
                "invalid rate point at qp {}: rate {}, psnr {}",
                p.qp, p.rate, p.psnr
            )));
        }
    }
    Ok(())
}

/// Average rate difference in percent at equal quality: fits
/// log10(rate) as a function of psnr for both curves and compares them over
/// the shared psnr range. Positive means the test configuration spends more
/// bits.
pub fn bd_rate(anchor: &[RatePoint], test: &[RatePoint]) -> Result<f64> {
    validate_points(anchor)?;
    validate_points(test)?;
    let ax: Vec<f64> = anchor.iter().map(|p| p.psnr).collect();
    let ay: Vec<f64> = anchor.iter().map(|p| p.rate.log10()).collect();
    let tx: Vec<f64> = test.iter().map(|p| p.psnr).collect();
    let ty: Vec<f64> = test.iter().map(|p| p.rate.log10()).collect();
    let gap = curve_gap(&ax, &ay, &tx, &ty)?;
    Ok((10f64.powf(gap) - 1.0) * 100.0)
}

/// Average quality difference in dB at equal rate: fits psnr as a function
/// of log10(rate). Positive means the test configuration is better.
pub fn bd_psnr(anchor: &[RatePoint], test: &[RatePoint]) -> Result<f64> {
    validate_points(anchor)?;
    validate_points(test)?;
    let ax: Vec<f64> = anchor.iter().map(|p| p.rate.log10()).collect();
    let ay: Vec<f64> = anchor.iter().map(|p| p.psnr).collect();
    let tx: Vec<f64> = test.iter().map(|p| p.rate.log10()).collect();
    let ty: Vec<f64> = test.iter().map(|p| p.psnr).collect();
    curve_gap(&ax, &ay, &tx, &ty)
}
