//! Staged evaluation of the predictor over one CTU, producing the candidate
//! mode sets that a restricted partition search consumes.
//!
//! The trunk runs incrementally: the stem and unit 1 cover the whole CTU
//! once, and every further unit runs only on the slices the search actually
//! descends into. A block whose filtered candidate set is `{non-split}`
//! ends its subtree, so confident early decisions skip all deeper network
//! and search work.

use std::collections::HashSet;

use crate::codec::Plane;
use crate::net::{normalize_qp, orient_prediction, unit_index, FeatureTensor, ModelParams, Scalar};
use crate::qtmt::{
    apply_split, legal_split_modes, CuGeometry, ModeSet, PartitionConfig, SplitMode,
};
use crate::rdo::CandidateMap;
use crate::{Error, Result};

/// Per-stage keep thresholds. Stage `s` of a CU is its total split depth
/// plus one; predictions happen at stages 2..=6 and deeper stages reuse the
/// stage-6 value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdSet {
    taus: [f64; 5],
}

/// Which consistency profile a threshold set matches. High-mean sets must
/// keep the deepest stage strictest after stage 2; low-mean sets relax the
/// deepest stage instead.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdCase {
    SpeedBiased,
    QualityBiased,
}

const APPROX_GAP: f64 = 0.1;
const EPS: f64 = 1e-12;

impl ThresholdSet {
    /// Thresholds for stages 2..=6, each in [0, 1].
    pub fn new(taus: [f64; 5]) -> Result<ThresholdSet> {
        for (i, t) in taus.iter().enumerate() {
            if !(0.0..=1.0).contains(t) || !t.is_finite() {
                return Err(Error::config(format!(
                    "threshold for stage {} is {t}, outside [0, 1]",
                    i + 2
                )));
            }
        }
        Ok(ThresholdSet { taus })
    }

    pub fn uniform(tau: f64) -> Result<ThresholdSet> {
        ThresholdSet::new([tau; 5])
    }

    /// Strictest preset: largest speedup, largest quality cost.
    pub fn faster() -> ThresholdSet {
        ThresholdSet {
            taus: [0.65, 0.45, 0.45, 0.45, 0.5],
        }
    }

    pub fn fast() -> ThresholdSet {
        ThresholdSet {
            taus: [0.5, 0.4, 0.35, 0.35, 0.4],
        }
    }

    pub fn medium() -> ThresholdSet {
        ThresholdSet {
            taus: [0.45, 0.3, 0.25, 0.25, 0.25],
        }
    }

    pub fn preset(name: &str) -> Result<ThresholdSet> {
        match name {
            "faster" => Ok(ThresholdSet::faster()),
            "fast" => Ok(ThresholdSet::fast()),
            "medium" => Ok(ThresholdSet::medium()),
            _ => Err(Error::config(format!(
                "unknown preset {name:?}, expected faster, fast or medium"
            ))),
        }
    }

    pub fn taus(&self) -> [f64; 5] {
        self.taus
    }

    pub fn for_stage(&self, stage: u8) -> f64 {
        let s = stage.clamp(2, 6);
        self.taus[(s - 2) as usize]
    }

    pub fn mean(&self) -> f64 {
        self.taus.iter().sum::<f64>() / self.taus.len() as f64
    }

    /// Checks the set against the two admissible profiles and reports which
    /// one it matches.
    pub fn validate(&self) -> Result<ThresholdCase> {
        let [t2, t3, t4, t5, t6] = self.taus;
        let ge = |a: f64, b: f64| a + EPS >= b;
        let close = |a: f64, b: f64| (a - b).abs() <= APPROX_GAP + EPS;
        let mid_flat = close(t3, t4) && close(t4, t5) && close(t3, t5);

        if self.mean() + EPS >= 0.4 {
            if !ge(t2, t6) {
                return Err(Error::config(format!(
                    "speed profile needs stage-2 threshold {t2} >= stage-6 threshold {t6}"
                )));
            }
            if !(ge(t6, t3) && ge(t6, t4) && ge(t6, t5)) {
                return Err(Error::config(
                    "speed profile needs the stage-6 threshold above stages 3..=5",
                ));
            }
            if !mid_flat {
                return Err(Error::config(
                    "stages 3..=5 must stay within 0.1 of each other",
                ));
            }
            Ok(ThresholdCase::SpeedBiased)
        } else {
            if !ge(t2, t4) {
                return Err(Error::config(format!(
                    "quality profile needs stage-2 threshold {t2} >= stage-4 threshold {t4}"
                )));
            }
            if !mid_flat {
                return Err(Error::config(
                    "stages 3..=5 must stay within 0.1 of each other",
                ));
            }
            if !(ge(t3, t6) && ge(t4, t6) && ge(t5, t6)) {
                return Err(Error::config(
                    "quality profile needs the stage-6 threshold below stages 3..=5",
                ));
            }
            Ok(ThresholdCase::QualityBiased)
        }
    }
}

/// Keeps every mode whose probability reaches `tau` times the maximum. The
/// argmax always survives, so the result is never empty.
pub fn threshold_filter(probs: &[f64], modes: &[SplitMode], tau: f64) -> ModeSet {
    assert_eq!(probs.len(), modes.len());
    assert!(!probs.is_empty());
    let pmax = probs.iter().cloned().fold(f64::MIN, f64::max);
    let mut out = ModeSet::EMPTY;
    for (&p, &m) in probs.iter().zip(modes) {
        if p >= tau * pmax {
            out.insert(m);
        }
    }
    out
}

/// Result of one staged pass: candidate modes per visited block, and how
/// many sub-network evaluations ran.
#[derive(Clone, Debug)]
pub struct CtuPrediction {
    pub candidates: CandidateMap,
    pub network_evals: usize,
}

struct Walk<'a, S: Scalar> {
    model: &'a ModelParams<S>,
    pcfg: &'a PartitionConfig,
    taus: &'a ThresholdSet,
    qnorm: f64,
    candidates: CandidateMap,
    visited: HashSet<crate::qtmt::CuKey>,
    network_evals: usize,
}

impl<S: Scalar> Walk<'_, S> {
    /// `feat` holds this block's region with `done` trunk units applied.
    fn descend(&mut self, cu: CuGeometry, feat: FeatureTensor<S>, done: usize) -> Result<()> {
        let key = cu.key();
        if !self.visited.insert(key) {
            // A block reachable through several split paths is decided once;
            // the first, depth-first visit wins.
            return Ok(());
        }
        let legal = legal_split_modes(&cu, self.pcfg)?;

        if self.pcfg.is_forced_root(&cu) {
            let k = unit_index(cu.min_side())?;
            let feat = self.model.apply_units(feat, done, k);
            self.candidates.insert(key, ModeSet::singleton(SplitMode::Quad));
            return self.split_into(&cu, SplitMode::Quad, &feat, k);
        }

        if legal.len() < 2 {
            // No decision to make, and nothing deeper: a lone legal mode is
            // always non-split.
            self.candidates.insert(key, legal);
            return Ok(());
        }

        let (shape, transposed) = cu.canonical_shape();
        let subnet = self
            .model
            .subnets
            .get(&shape)
            .ok_or_else(|| Error::model(format!("no sub-network for shape {shape}")))?;
        let k = unit_index(cu.min_side())?;
        let canon = if transposed { feat.transpose() } else { feat };
        let canon = self.model.apply_units(canon, done, k);
        let raw = subnet.forward(&canon, self.qnorm);
        self.network_evals += 1;
        let probs: Vec<f64> = raw.iter().map(|p| p.to_f64()).collect();
        let (modes, probs) = orient_prediction(&subnet.modes.to_vec(), &probs, transposed);

        let kept = threshold_filter(&probs, &modes, self.taus.for_stage(cu.stage()));
        let mut cand = kept.intersect(legal);
        if cand.is_empty() {
            cand = ModeSet::singleton(SplitMode::NonSplit);
        }
        self.candidates.insert(key, cand);

        if cand.len() == 1 && cand.contains(SplitMode::NonSplit) {
            return Ok(());
        }
        let feat = if transposed { canon.transpose() } else { canon };
        for mode in cand.iter() {
            if mode == SplitMode::NonSplit {
                continue;
            }
            self.split_into(&cu, mode, &feat, k)?;
        }
        Ok(())
    }

    fn split_into(
        &mut self,
        cu: &CuGeometry,
        mode: SplitMode,
        feat: &FeatureTensor<S>,
        done: usize,
    ) -> Result<()> {
        for child in apply_split(cu, mode)? {
            let slice = feat.window(
                (child.x - cu.x) as usize,
                (child.y - cu.y) as usize,
                child.w as usize,
                child.h as usize,
            );
            self.descend(child, slice, done)?;
        }
        Ok(())
    }
}

/// Runs the staged predictor over one CTU and returns candidate mode sets
/// for every block the restricted search may visit.
pub fn run_ctu<S: Scalar>(
    model: &ModelParams<S>,
    ctu: &Plane,
    qp: u8,
    pcfg: &PartitionConfig,
    taus: &ThresholdSet,
) -> Result<CtuPrediction> {
    let size = pcfg.ctu_size as usize;
    if ctu.w != size || ctu.h != size {
        return Err(Error::geometry(format!(
            "CTU plane is {}x{}, config wants {size}x{size}",
            ctu.w, ctu.h
        )));
    }
    if qp > 51 {
        return Err(Error::config(format!("qp {qp} outside [0, 51]")));
    }
    let mut walk = Walk {
        model,
        pcfg,
        taus,
        qnorm: normalize_qp(qp),
        candidates: CandidateMap::new(),
        visited: HashSet::new(),
        network_evals: 0,
    };
    let pixels = FeatureTensor::<S>::from_pixels(ctu, 0, 0, size, size);
    let feat = model.stem_features(&pixels);
    walk.descend(CuGeometry::root(pcfg.ctu_size), feat, 0)?;
    Ok(CtuPrediction {
        candidates: walk.candidates,
        network_evals: walk.network_evals,
    })
}
