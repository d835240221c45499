//! CU geometry, split legality, partition trees, and enumeration of every
//! geometry reachable under a partition rule configuration.

use std::collections::HashSet;
use std::fmt;

use crate::{Error, Result};

/// Split decisions, in signaling order. Codes are stable: they appear in
/// serialized trees, dataset records and network output vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum SplitMode {
    NonSplit = 0,
    Quad = 1,
    HorBinary = 2,
    VerBinary = 3,
    HorTernary = 4,
    VerTernary = 5,
}

impl SplitMode {
    pub const ALL: [SplitMode; 6] = [
        SplitMode::NonSplit,
        SplitMode::Quad,
        SplitMode::HorBinary,
        SplitMode::VerBinary,
        SplitMode::HorTernary,
        SplitMode::VerTernary,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<SplitMode> {
        SplitMode::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::format(format!("split mode code {code} out of range")))
    }

    /// Mode of the same split applied to the transposed block.
    pub fn transpose(self) -> SplitMode {
        match self {
            SplitMode::NonSplit => SplitMode::NonSplit,
            SplitMode::Quad => SplitMode::Quad,
            SplitMode::HorBinary => SplitMode::VerBinary,
            SplitMode::VerBinary => SplitMode::HorBinary,
            SplitMode::HorTernary => SplitMode::VerTernary,
            SplitMode::VerTernary => SplitMode::HorTernary,
        }
    }

    pub fn is_multi_type(self) -> bool {
        matches!(
            self,
            SplitMode::HorBinary
                | SplitMode::VerBinary
                | SplitMode::HorTernary
                | SplitMode::VerTernary
        )
    }

    pub fn label(self) -> &'static str {
        match self {
            SplitMode::NonSplit => "non_split",
            SplitMode::Quad => "quad",
            SplitMode::HorBinary => "hor_binary",
            SplitMode::VerBinary => "ver_binary",
            SplitMode::HorTernary => "hor_ternary",
            SplitMode::VerTernary => "ver_ternary",
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Set of split modes as a bitmask over the six codes. Iteration is always
/// in ascending code order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct ModeSet(u8);

impl ModeSet {
    pub const EMPTY: ModeSet = ModeSet(0);

    pub fn singleton(mode: SplitMode) -> ModeSet {
        ModeSet(1 << mode.code())
    }

    pub fn insert(&mut self, mode: SplitMode) {
        self.0 |= 1 << mode.code();
    }

    pub fn contains(self, mode: SplitMode) -> bool {
        self.0 & (1 << mode.code()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn intersect(self, other: ModeSet) -> ModeSet {
        ModeSet(self.0 & other.0)
    }

    pub fn is_subset_of(self, other: ModeSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = SplitMode> {
        SplitMode::ALL.into_iter().filter(move |m| self.contains(*m))
    }

    pub fn transpose(self) -> ModeSet {
        let mut out = ModeSet::EMPTY;
        for m in self.iter() {
            out.insert(m.transpose());
        }
        out
    }

    pub fn from_modes(modes: &[SplitMode]) -> ModeSet {
        let mut out = ModeSet::EMPTY;
        for &m in modes {
            out.insert(m);
        }
        out
    }

    pub fn to_vec(self) -> Vec<SplitMode> {
        self.iter().collect()
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn from_bits(bits: u8) -> Result<ModeSet> {
        if bits & !0x3f != 0 {
            return Err(Error::format(format!("mode bitmask {bits:#x} has unknown bits")));
        }
        Ok(ModeSet(bits))
    }
}

impl fmt::Display for ModeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, m) in self.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{m}")?;
        }
        write!(f, "}}")
    }
}

/// A coding unit inside one CTU: position, size, and the split-history
/// context that legality rules consult.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CuGeometry {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    /// True when any ancestor split was multi-type.
    pub mt_ancestor: bool,
    pub qt_depth: u8,
    pub mt_depth: u8,
}

/// Memo key for search tables. `qt_depth` is omitted: no legality rule
/// consults it, only sizes and the multi-type context matter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CuKey {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub mt_ancestor: bool,
    pub mt_depth: u8,
}

/// Canonical block shape: `w >= h`. Sub-networks and dataset shards are
/// keyed by this.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CuShape {
    pub w: u32,
    pub h: u32,
}

impl CuShape {
    pub fn new(w: u32, h: u32) -> CuShape {
        if w >= h {
            CuShape { w, h }
        } else {
            CuShape { w: h, h: w }
        }
    }

    pub fn min_side(self) -> u32 {
        self.h
    }

    pub fn area(self) -> u32 {
        self.w * self.h
    }
}

impl fmt::Display for CuShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.w, self.h)
    }
}

impl CuGeometry {
    pub fn root(ctu_size: u32) -> CuGeometry {
        CuGeometry {
            x: 0,
            y: 0,
            w: ctu_size,
            h: ctu_size,
            mt_ancestor: false,
            qt_depth: 0,
            mt_depth: 0,
        }
    }

    pub fn area(&self) -> u32 {
        self.w * self.h
    }

    pub fn min_side(&self) -> u32 {
        self.w.min(self.h)
    }

    pub fn max_side(&self) -> u32 {
        self.w.max(self.h)
    }

    /// Same block with axes swapped.
    pub fn transpose(&self) -> CuGeometry {
        CuGeometry {
            x: self.y,
            y: self.x,
            w: self.h,
            h: self.w,
            ..*self
        }
    }

    /// Canonical shape plus whether canonicalization transposed the block.
    pub fn canonical_shape(&self) -> (CuShape, bool) {
        (CuShape::new(self.w, self.h), self.h > self.w)
    }

    /// Stage index used for threshold lookup: the root is stage 1 and every
    /// split adds one.
    pub fn stage(&self) -> u8 {
        self.qt_depth + self.mt_depth + 1
    }

    pub fn key(&self) -> CuKey {
        CuKey {
            x: self.x,
            y: self.y,
            w: self.w,
            h: self.h,
            mt_ancestor: self.mt_ancestor,
            mt_depth: self.mt_depth,
        }
    }

    pub fn validate(&self, cfg: &PartitionConfig) -> Result<()> {
        let side_ok = |s: u32| s.is_power_of_two() && s >= cfg.min_cu_side && s <= cfg.ctu_size;
        if !side_ok(self.w) || !side_ok(self.h) {
            return Err(Error::geometry(format!(
                "block {}x{} outside [{}, {}] power-of-two range",
                self.w, self.h, cfg.min_cu_side, cfg.ctu_size
            )));
        }
        if self.x + self.w > cfg.ctu_size || self.y + self.h > cfg.ctu_size {
            return Err(Error::geometry(format!(
                "block at ({},{}) size {}x{} exceeds the {} CTU",
                self.x, self.y, self.w, self.h, cfg.ctu_size
            )));
        }
        if self.mt_ancestor != (self.mt_depth > 0) {
            return Err(Error::geometry(format!(
                "mt_ancestor={} inconsistent with mt_depth={}",
                self.mt_ancestor, self.mt_depth
            )));
        }
        if self.qt_depth > 8 || self.mt_depth > 8 {
            return Err(Error::geometry("split depth out of range"));
        }
        Ok(())
    }
}

impl fmt::Display for CuGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({},{}) {}x{} qt{} mt{}{}",
            self.x,
            self.y,
            self.w,
            self.h,
            self.qt_depth,
            self.mt_depth,
            if self.mt_ancestor { "*" } else { "" }
        )
    }
}

/// Partition rule knobs. Defaults reproduce the intra rule set whose
/// reachable-geometry count per 128x128 CTU is exactly 5,781.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartitionConfig {
    pub ctu_size: u32,
    pub min_cu_side: u32,
    /// Smallest block a quad split may produce; quad needs `w >= 2 * this`.
    pub min_qt_leaf: u32,
    /// Multi-type splits allowed while `mt_depth < this`.
    pub max_mt_depth: u8,
    /// Multi-type splits allowed only when `max(w, h) <= this`.
    pub max_mt_size: u32,
    /// Force the root CTU to quad-split (decisions start at the children).
    pub force_stage1_qt: bool,
}

impl PartitionConfig {
    pub fn new(
        ctu_size: u32,
        min_cu_side: u32,
        min_qt_leaf: u32,
        max_mt_depth: u8,
        max_mt_size: u32,
        force_stage1_qt: bool,
    ) -> Result<PartitionConfig> {
        let pow_ok = |s: u32| s.is_power_of_two();
        if !pow_ok(ctu_size) || ctu_size < 8 || ctu_size > 128 {
            return Err(Error::config(format!(
                "ctu_size {ctu_size} must be a power of two in [8, 128]"
            )));
        }
        if !pow_ok(min_cu_side) || min_cu_side < 4 || min_cu_side > ctu_size {
            return Err(Error::config(format!(
                "min_cu_side {min_cu_side} must be a power of two in [4, ctu_size]"
            )));
        }
        if !pow_ok(min_qt_leaf) || min_qt_leaf < min_cu_side || min_qt_leaf > ctu_size {
            return Err(Error::config(format!(
                "min_qt_leaf {min_qt_leaf} must be a power of two in [min_cu_side, ctu_size]"
            )));
        }
        if !pow_ok(max_mt_size) {
            return Err(Error::config(format!(
                "max_mt_size {max_mt_size} must be a power of two"
            )));
        }
        if force_stage1_qt && ctu_size < 2 * min_qt_leaf {
            return Err(Error::config(
                "forced root quad split impossible under min_qt_leaf",
            ));
        }
        Ok(PartitionConfig {
            ctu_size,
            min_cu_side,
            min_qt_leaf,
            max_mt_depth,
            max_mt_size,
            force_stage1_qt,
        })
    }

    /// Intra defaults: 128 CTU, forced stage-1 quad split, quad leaves down
    /// to 8, multi-type splits up to depth 4 on blocks no larger than 32.
    /// Exactly 5,781 distinct geometries are reachable per CTU.
    pub fn vvc_intra() -> PartitionConfig {
        PartitionConfig {
            ctu_size: 128,
            min_cu_side: 4,
            min_qt_leaf: 8,
            max_mt_depth: 4,
            max_mt_size: 32,
            force_stage1_qt: true,
        }
    }

    /// Quad-tree-only rules (no multi-type splits, root not forced).
    pub fn quad_only(ctu_size: u32, min_qt_leaf: u32) -> Result<PartitionConfig> {
        PartitionConfig::new(ctu_size, 4, min_qt_leaf, 0, ctu_size, false)
    }

    pub fn is_forced_root(&self, cu: &CuGeometry) -> bool {
        self.force_stage1_qt
            && cu.w == self.ctu_size
            && cu.h == self.ctu_size
            && cu.qt_depth == 0
            && cu.mt_depth == 0
    }
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig::vvc_intra()
    }
}

/// Split modes legal for `cu` in its context.
pub fn legal_split_modes(cu: &CuGeometry, cfg: &PartitionConfig) -> Result<ModeSet> {
    cu.validate(cfg)?;
    if cfg.is_forced_root(cu) {
        return Ok(ModeSet::singleton(SplitMode::Quad));
    }
    let mut modes = ModeSet::singleton(SplitMode::NonSplit);
    if !cu.mt_ancestor && cu.w == cu.h && cu.w >= 2 * cfg.min_qt_leaf {
        modes.insert(SplitMode::Quad);
    }
    if cu.mt_depth < cfg.max_mt_depth && cu.max_side() <= cfg.max_mt_size {
        if cu.h >= 2 * cfg.min_cu_side {
            modes.insert(SplitMode::HorBinary);
        }
        if cu.w >= 2 * cfg.min_cu_side {
            modes.insert(SplitMode::VerBinary);
        }
        if cu.h >= 4 * cfg.min_cu_side {
            modes.insert(SplitMode::HorTernary);
        }
        if cu.w >= 4 * cfg.min_cu_side {
            modes.insert(SplitMode::VerTernary);
        }
    }
    Ok(modes)
}

/// Mode set available to a block shape irrespective of split history. This
/// is the output space of the shape's sub-network; a concrete CU may have a
/// smaller legal set once depth caps bind.
pub fn size_mode_set(w: u32, h: u32, cfg: &PartitionConfig) -> ModeSet {
    let mut modes = ModeSet::singleton(SplitMode::NonSplit);
    if w == h && w >= 2 * cfg.min_qt_leaf {
        modes.insert(SplitMode::Quad);
    }
    if w.max(h) <= cfg.max_mt_size && cfg.max_mt_depth > 0 {
        if h >= 2 * cfg.min_cu_side {
            modes.insert(SplitMode::HorBinary);
        }
        if w >= 2 * cfg.min_cu_side {
            modes.insert(SplitMode::VerBinary);
        }
        if h >= 4 * cfg.min_cu_side {
            modes.insert(SplitMode::HorTernary);
        }
        if w >= 4 * cfg.min_cu_side {
            modes.insert(SplitMode::VerTernary);
        }
    }
    modes
}

/// Children produced by splitting `cu` with `mode`, in coding order
/// (raster for quad, top-to-bottom / left-to-right for multi-type).
/// `NonSplit` yields no children.
pub fn apply_split(cu: &CuGeometry, mode: SplitMode) -> Result<Vec<CuGeometry>> {
    let quad_child = |x, y, w, h| CuGeometry {
        x,
        y,
        w,
        h,
        mt_ancestor: cu.mt_ancestor,
        qt_depth: cu.qt_depth + 1,
        mt_depth: cu.mt_depth,
    };
    let mt_child = |x, y, w, h| CuGeometry {
        x,
        y,
        w,
        h,
        mt_ancestor: true,
        qt_depth: cu.qt_depth,
        mt_depth: cu.mt_depth + 1,
    };
    let infeasible = || {
        Err(Error::geometry(format!(
            "cannot {} a {}x{} block",
            mode, cu.w, cu.h
        )))
    };
    match mode {
        SplitMode::NonSplit => Ok(Vec::new()),
        SplitMode::Quad => {
            if cu.w < 2 || cu.h < 2 || cu.w % 2 != 0 || cu.h % 2 != 0 {
                return infeasible();
            }
            let (w2, h2) = (cu.w / 2, cu.h / 2);
            Ok(vec![
                quad_child(cu.x, cu.y, w2, h2),
                quad_child(cu.x + w2, cu.y, w2, h2),
                quad_child(cu.x, cu.y + h2, w2, h2),
                quad_child(cu.x + w2, cu.y + h2, w2, h2),
            ])
        }
        SplitMode::HorBinary => {
            if cu.h < 2 || cu.h % 2 != 0 {
                return infeasible();
            }
            let h2 = cu.h / 2;
            Ok(vec![
                mt_child(cu.x, cu.y, cu.w, h2),
                mt_child(cu.x, cu.y + h2, cu.w, h2),
            ])
        }
        SplitMode::VerBinary => {
            if cu.w < 2 || cu.w % 2 != 0 {
                return infeasible();
            }
            let w2 = cu.w / 2;
            Ok(vec![
                mt_child(cu.x, cu.y, w2, cu.h),
                mt_child(cu.x + w2, cu.y, w2, cu.h),
            ])
        }
        SplitMode::HorTernary => {
            if cu.h < 4 || cu.h % 4 != 0 {
                return infeasible();
            }
            let q = cu.h / 4;
            Ok(vec![
                mt_child(cu.x, cu.y, cu.w, q),
                mt_child(cu.x, cu.y + q, cu.w, 2 * q),
                mt_child(cu.x, cu.y + 3 * q, cu.w, q),
            ])
        }
        SplitMode::VerTernary => {
            if cu.w < 4 || cu.w % 4 != 0 {
                return infeasible();
            }
            let q = cu.w / 4;
            Ok(vec![
                mt_child(cu.x, cu.y, q, cu.h),
                mt_child(cu.x + q, cu.y, 2 * q, cu.h),
                mt_child(cu.x + 3 * q, cu.y, q, cu.h),
            ])
        }
    }
}

/// A partition decision tree over one CTU. Leaves carry `NonSplit`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionTree {
    pub cu: CuGeometry,
    pub mode: SplitMode,
    pub children: Vec<PartitionTree>,
}

impl PartitionTree {
    pub fn leaf(cu: CuGeometry) -> PartitionTree {
        PartitionTree {
            cu,
            mode: SplitMode::NonSplit,
            children: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(|c| c.node_count()).sum::<usize>()
    }

    pub fn leaves(&self) -> Vec<&PartitionTree> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a PartitionTree>) {
        if self.children.is_empty() {
            out.push(self);
        } else {
            for c in &self.children {
                c.collect_leaves(out);
            }
        }
    }

    pub fn visit<F: FnMut(&PartitionTree)>(&self, f: &mut F) {
        f(self);
        for c in &self.children {
            c.visit(f);
        }
    }

    /// Pre-order text form, one `x y w h mode` line per node.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        self.visit(&mut |n| {
            out.push_str(&format!(
                "{} {} {} {} {}\n",
                n.cu.x,
                n.cu.y,
                n.cu.w,
                n.cu.h,
                n.mode.code()
            ));
        });
        out
    }

    /// Parses the pre-order text form back into a tree rooted at `root`.
    pub fn from_text(text: &str, root: CuGeometry) -> Result<PartitionTree> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let tree = Self::parse_node(&mut lines, root)?;
        if let Some(extra) = lines.next() {
            return Err(Error::format(format!("trailing tree line: {extra:?}")));
        }
        Ok(tree)
    }

    fn parse_node<'a, I: Iterator<Item = &'a str>>(
        lines: &mut I,
        expect: CuGeometry,
    ) -> Result<PartitionTree> {
        let line = lines
            .next()
            .ok_or_else(|| Error::format("tree text ended early"))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::format(format!("bad tree line: {line:?}")));
        }
        let num =
            |s: &str| -> Result<u32> { s.parse().map_err(|_| Error::format(format!("bad number {s:?}"))) };
        let (x, y, w, h) = (num(fields[0])?, num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if (x, y, w, h) != (expect.x, expect.y, expect.w, expect.h) {
            return Err(Error::format(format!(
                "tree line {line:?} does not match expected block {expect}"
            )));
        }
        let mode = SplitMode::from_code(num(fields[4])? as u8)?;
        let mut children = Vec::new();
        for child_cu in apply_split(&expect, mode)? {
            children.push(Self::parse_node(lines, child_cu)?);
        }
        Ok(PartitionTree {
            cu: expect,
            mode,
            children,
        })
    }
}

/// What `validate_tree` found wrong, with the path of child indices from
/// the root to the offending node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeViolation {
    pub path: Vec<usize>,
    pub kind: ViolationKind,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    Geometry,
    Mode,
    ChildCount,
    Tiling,
    ChildContext,
}

impl fmt::Display for TreeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "at path {:?}: {}", self.path, self.message)
    }
}

/// Checks structure, legality and exact tiling of every node. Returns the
/// first violation in pre-order instead of aborting.
pub fn validate_tree(
    tree: &PartitionTree,
    cfg: &PartitionConfig,
) -> std::result::Result<(), TreeViolation> {
    let mut path = Vec::new();
    validate_node(tree, cfg, &mut path)
}

fn validate_node(
    node: &PartitionTree,
    cfg: &PartitionConfig,
    path: &mut Vec<usize>,
) -> std::result::Result<(), TreeViolation> {
    let fail = |kind, message: String, path: &[usize]| {
        Err(TreeViolation {
            path: path.to_vec(),
            kind,
            message,
        })
    };
    if let Err(e) = node.cu.validate(cfg) {
        return fail(ViolationKind::Geometry, e.to_string(), path);
    }
    let legal = match legal_split_modes(&node.cu, cfg) {
        Ok(m) => m,
        Err(e) => return fail(ViolationKind::Geometry, e.to_string(), path),
    };
    if !legal.contains(node.mode) {
        let message = if node.mode == SplitMode::Quad && node.cu.mt_ancestor {
            format!("quad split below a multi-type ancestor at {}", node.cu)
        } else {
            format!("mode {} not legal for {} (legal {})", node.mode, node.cu, legal)
        };
        return fail(ViolationKind::Mode, message, path);
    }
    let expected = match apply_split(&node.cu, node.mode) {
        Ok(c) => c,
        Err(e) => return fail(ViolationKind::Geometry, e.to_string(), path),
    };
    if expected.len() != node.children.len() {
        return fail(
            ViolationKind::ChildCount,
            format!(
                "{} children under {} split of {}, expected {}",
                node.children.len(),
                node.mode,
                node.cu,
                expected.len()
            ),
            path,
        );
    }
    for (i, (child, exp)) in node.children.iter().zip(&expected).enumerate() {
        let got = &child.cu;
        if (got.x, got.y, got.w, got.h) != (exp.x, exp.y, exp.w, exp.h) {
            path.push(i);
            let v = fail(
                ViolationKind::Tiling,
                format!(
                    "child {} does not tile {} under {}: expected {}",
                    got, node.cu, node.mode, exp
                ),
                path,
            );
            path.pop();
            return v;
        }
        if (got.mt_ancestor, got.qt_depth, got.mt_depth)
            != (exp.mt_ancestor, exp.qt_depth, exp.mt_depth)
        {
            path.push(i);
            let v = fail(
                ViolationKind::ChildContext,
                format!("child context {} does not match expected {}", got, exp),
                path,
            );
            path.pop();
            return v;
        }
        path.push(i);
        let r = validate_node(child, cfg, path);
        path.pop();
        r?;
    }
    Ok(())
}

/// Everything reachable from the root under a configuration.
#[derive(Clone, Debug)]
pub struct ReachableCus {
    /// Distinct (x, y, w, h), sorted.
    pub geometries: Vec<(u32, u32, u32, u32)>,
    /// Distinct (geometry, context) states, sorted by key.
    pub contexts: Vec<CuGeometry>,
}

impl ReachableCus {
    pub fn distinct_geometries(&self) -> usize {
        self.geometries.len()
    }

    /// Canonical shapes present among reachable CUs.
    pub fn canonical_shapes(&self) -> Vec<CuShape> {
        let mut shapes: Vec<CuShape> = self
            .contexts
            .iter()
            .map(|c| c.canonical_shape().0)
            .collect();
        shapes.sort();
        shapes.dedup();
        shapes
    }
}

/// Walks the split graph from the root, memoizing on (geometry, multi-type
/// context) so each state expands once.
pub fn enumerate_reachable_cus(cfg: &PartitionConfig) -> Result<ReachableCus> {
    let root = CuGeometry::root(cfg.ctu_size);
    let mut seen: HashSet<CuKey> = HashSet::new();
    let mut stack = vec![root];
    seen.insert(root.key());
    let mut contexts = Vec::new();
    while let Some(cu) = stack.pop() {
        contexts.push(cu);
        let modes = legal_split_modes(&cu, cfg)?;
        for mode in modes.iter() {
            if mode == SplitMode::NonSplit {
                continue;
            }
            for child in apply_split(&cu, mode)? {
                if seen.insert(child.key()) {
                    stack.push(child);
                }
            }
        }
    }
    let mut geometries: Vec<(u32, u32, u32, u32)> = contexts
        .iter()
        .map(|c| (c.x, c.y, c.w, c.h))
        .collect();
    geometries.sort();
    geometries.dedup();
    contexts.sort_by_key(|c| c.key());
    Ok(ReachableCus {
        geometries,
        contexts,
    })
}

/// Canonical shapes that carry a split decision worth predicting: reachable,
/// more than one mode available to the shape, and not the forced root.
pub fn predictable_shapes(cfg: &PartitionConfig) -> Result<Vec<CuShape>> {
    let reach = enumerate_reachable_cus(cfg)?;
    let mut shapes = reach.canonical_shapes();
    shapes.retain(|s| {
        if cfg.force_stage1_qt && s.w == cfg.ctu_size && s.h == cfg.ctu_size {
            return false;
        }
        size_mode_set(s.w, s.h, cfg).len() >= 2
    });
    Ok(shapes)
}

/// Uniformly samples a legal partition tree, choosing each node's mode
/// uniformly from its legal set.
pub fn sample_tree<R: rand::Rng>(
    cu: CuGeometry,
    cfg: &PartitionConfig,
    rng: &mut R,
) -> Result<PartitionTree> {
    let modes = legal_split_modes(&cu, cfg)?.to_vec();
    let mode = modes[rng.gen_range(0..modes.len())];
    let mut children = Vec::new();
    for child in apply_split(&cu, mode)? {
        children.push(sample_tree(child, cfg, rng)?);
    }
    Ok(PartitionTree { cu, mode, children })
}
