//! Rate-distortion partition search: a bottom-up dynamic program over the
//! memoized CU graph. The exhaustive form evaluates every legal mode at
//! every (geometry, context) state; the restricted form only considers a
//! caller-supplied candidate set per state.

use std::collections::HashMap;

use crate::codec::{intra_cost, BlockCost, Plane, ProxyCodecConfig};
use crate::qtmt::{
    apply_split, legal_split_modes, CuGeometry, CuKey, ModeSet, PartitionConfig, PartitionTree,
    SplitMode,
};
use crate::{Error, Result};

/// Total Lagrangian cost with its distortion/rate split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostTriple {
    pub cost: f64,
    pub distortion: f64,
    pub rate: f64,
}

/// Costs of every mode evaluated at one CU of the chosen tree, plus the
/// winner. Modes appear in ascending code order.
#[derive(Clone, Debug)]
pub struct RdRecord {
    pub cu: CuGeometry,
    pub per_mode: Vec<(SplitMode, CostTriple)>,
    pub best_mode: SplitMode,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SearchStats {
    /// Distinct (geometry, context) states expanded.
    pub nodes_expanded: u64,
    /// Block cost evaluations (intra cache misses).
    pub intra_evals: u64,
    /// (state, mode) cost computations.
    pub mode_evaluations: u64,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub tree: PartitionTree,
    /// One record per chosen-tree node, in pre-order.
    pub records: Vec<RdRecord>,
    pub total: CostTriple,
    pub stats: SearchStats,
}

/// Candidate modes per (geometry, context) state, as produced by the staged
/// predictor.
pub type CandidateMap = HashMap<CuKey, ModeSet>;

struct Searcher<'a> {
    ctu: &'a Plane,
    qp: u8,
    pcfg: &'a PartitionConfig,
    ccfg: &'a ProxyCodecConfig,
    lambda: f64,
    candidates: Option<&'a CandidateMap>,
    intra_cache: HashMap<(u32, u32, u32, u32), BlockCost>,
    memo: HashMap<CuKey, MemoEntry>,
    stats: SearchStats,
}

#[derive(Clone, Debug)]
struct MemoEntry {
    per_mode: Vec<(SplitMode, CostTriple)>,
    best_mode: SplitMode,
    best: CostTriple,
}

impl<'a> Searcher<'a> {
    fn intra(&mut self, cu: &CuGeometry) -> Result<BlockCost> {
        let key = (cu.x, cu.y, cu.w, cu.h);
        if let Some(c) = self.intra_cache.get(&key) {
            return Ok(*c);
        }
        self.stats.intra_evals += 1;
        let c = intra_cost(
            self.ctu,
            cu.x as usize,
            cu.y as usize,
            cu.w as usize,
            cu.h as usize,
            self.qp,
            self.ccfg,
        )?;
        self.intra_cache.insert(key, c);
        Ok(c)
    }

    fn best(&mut self, cu: &CuGeometry) -> Result<CostTriple> {
        if let Some(e) = self.memo.get(&cu.key()) {
            return Ok(e.best);
        }
        self.stats.nodes_expanded += 1;
        let legal = legal_split_modes(cu, self.pcfg)?;
        let allowed = match self.candidates {
            None => legal,
            Some(map) => {
                let c = map.get(&cu.key()).copied().ok_or_else(|| {
                    Error::Eval(format!("no candidate set for visited CU {cu}"))
                })?;
                let inter = c.intersect(legal);
                if inter.is_empty() {
                    return Err(Error::Eval(format!(
                        "candidate set {c} for {cu} has no legal mode"
                    )));
                }
                inter
            }
        };
        let mut per_mode = Vec::with_capacity(allowed.len());
        let mut best: Option<(SplitMode, CostTriple)> = None;
        for mode in allowed.iter() {
            let triple = if mode == SplitMode::NonSplit {
                let ic = self.intra(cu)?;
                let rate = ic.rate + self.ccfg.split_flag_bits[0];
                CostTriple {
                    cost: ic.distortion + self.lambda * rate,
                    distortion: ic.distortion,
                    rate,
                }
            } else {
                let mut cost = 0f64;
                let mut distortion = 0f64;
                let mut rate = 0f64;
                for child in apply_split(cu, mode)? {
                    let b = self.best(&child)?;
                    cost += b.cost;
                    distortion += b.distortion;
                    rate += b.rate;
                }
                let bits = self.ccfg.split_flag_bits[mode.code() as usize];
                CostTriple {
                    cost: cost + self.lambda * bits,
                    distortion,
                    rate: rate + bits,
                }
            };
            self.stats.mode_evaluations += 1;
            per_mode.push((mode, triple));
            // Strict comparison: equal costs keep the smaller mode code.
            if best.map_or(true, |(_, b)| triple.cost < b.cost) {
                best = Some((mode, triple));
            }
        }
        let (best_mode, best_triple) = best.unwrap();
        self.memo.insert(
            cu.key(),
            MemoEntry {
                per_mode,
                best_mode,
                best: best_triple,
            },
        );
        Ok(best_triple)
    }

    fn build_tree(&self, cu: CuGeometry) -> Result<PartitionTree> {
        let entry = self
            .memo
            .get(&cu.key())
            .ok_or_else(|| Error::Eval(format!("missing search state for {cu}")))?;
        let mut children = Vec::new();
        for child in apply_split(&cu, entry.best_mode)? {
            children.push(self.build_tree(child)?);
        }
        Ok(PartitionTree {
            cu,
            mode: entry.best_mode,
            children,
        })
    }

    fn collect_records(&self, tree: &PartitionTree, out: &mut Vec<RdRecord>) {
        let entry = &self.memo[&tree.cu.key()];
        out.push(RdRecord {
            cu: tree.cu,
            per_mode: entry.per_mode.clone(),
            best_mode: entry.best_mode,
        });
        for c in &tree.children {
            self.collect_records(c, out);
        }
    }
}

fn run_search(
    ctu: &Plane,
    qp: u8,
    pcfg: &PartitionConfig,
    ccfg: &ProxyCodecConfig,
    candidates: Option<&CandidateMap>,
) -> Result<SearchOutcome> {
    if ctu.w != pcfg.ctu_size as usize || ctu.h != pcfg.ctu_size as usize {
        return Err(Error::geometry(format!(
            "plane {}x{} does not match CTU size {}",
            ctu.w, ctu.h, pcfg.ctu_size
        )));
    }
    let mut s = Searcher {
        ctu,
        qp,
        pcfg,
        ccfg,
        lambda: ccfg.lambda(qp),
        candidates,
        intra_cache: HashMap::new(),
        memo: HashMap::new(),
        stats: SearchStats::default(),
    };
    let root = CuGeometry::root(pcfg.ctu_size);
    let total = s.best(&root)?;
    let tree = s.build_tree(root)?;
    let mut records = Vec::new();
    s.collect_records(&tree, &mut records);
    Ok(SearchOutcome {
        tree,
        records,
        total,
        stats: s.stats,
    })
}

/// Full search: every legal mode of every reachable state is evaluated.
pub fn exhaustive_partition(
    ctu: &Plane,
    qp: u8,
    pcfg: &PartitionConfig,
    ccfg: &ProxyCodecConfig,
) -> Result<SearchOutcome> {
    run_search(ctu, qp, pcfg, ccfg, None)
}

/// Search over the candidate modes only. Every state the search visits must
/// have an entry in `candidates`.
pub fn restricted_partition(
    ctu: &Plane,
    qp: u8,
    pcfg: &PartitionConfig,
    ccfg: &ProxyCodecConfig,
    candidates: &CandidateMap,
) -> Result<SearchOutcome> {
    run_search(ctu, qp, pcfg, ccfg, Some(candidates))
}

/// One training label: a CU of the chosen tree that carried a real decision
/// (at least two legal modes), its winning mode, and the evaluated total
/// cost per mode code.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCu {
    pub cu: CuGeometry,
    pub mode: SplitMode,
    pub costs: [Option<f64>; 6],
}

/// Pulls training labels out of a search result. Nodes whose legal set is a
/// single mode (the forced root, terminal blocks) carry no decision and are
/// skipped.
pub fn extract_labels(outcome: &SearchOutcome, pcfg: &PartitionConfig) -> Result<Vec<LabeledCu>> {
    let mut out = Vec::new();
    for rec in &outcome.records {
        let legal = legal_split_modes(&rec.cu, pcfg)?;
        if legal.len() < 2 {
            continue;
        }
        let mut costs = [None; 6];
        for (mode, triple) in &rec.per_mode {
            costs[mode.code() as usize] = Some(triple.cost);
        }
        out.push(LabeledCu {
            cu: rec.cu,
            mode: rec.best_mode,
            costs,
        });
    }
    Ok(out)
}
