//! Acceptance gate for the whole engine: eleven numbered checks, one
//! pass/fail line each, all asserted together at the end. The later checks
//! train real models and encode real corpora, so the full gate takes on the
//! order of an hour. Run with `--nocapture` to watch progress.

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use qtmt_core::codec::{intra_cost, Plane, ProxyCodecConfig};
use qtmt_core::data::{
    build_database, ctu_planes, load_split, write_pgm, DatasetConfig, ManifestEntry, Split,
};
use qtmt_core::eval::{bd_psnr, bd_rate, delta_t, encode_anchor, encode_fast, EncodeReport, RatePoint};
use qtmt_core::net::{run_ctu, threshold_filter, FeatureTensor, ModelParams, ThresholdSet};
use qtmt_core::par::Parallelism;
use qtmt_core::qtmt::{
    apply_split, enumerate_reachable_cus, legal_split_modes, predictable_shapes, size_mode_set,
    CuGeometry, CuShape, PartitionConfig, PartitionTree, ReachableCus, SplitMode,
};
use qtmt_core::rdo::{exhaustive_partition, restricted_partition, CandidateMap};
use qtmt_core::synth::{image_seed, synth_image};
use qtmt_core::train::{cross_entropy, loss_and_gradients, mode_weights, train, TraceRow, TrainConfig, TrainSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances and bounds.
const ENUM_QUAD_ONLY: usize = 85;
const ENUM_DEFAULT: usize = 5_781;
const ENUM_BUDGET: Duration = Duration::from_secs(1);
const LEGALITY_SAMPLES: usize = 10_000;
const ORACLE_BLOCKS: usize = 200;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const GRAD_MIN_PARAMS: usize = 1_000;
const GRAD_STEP: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_REL_FLOOR: f64 = 1e-6;
const REDUCTION_TOL: f64 = 1e-12;
const PRESET_MEAN_TOL: f64 = 1e-12;
const FILTER_SAMPLES: usize = 10_000;
const OVERFIT_ITERS: usize = 600;
const OVERFIT_MIN_HITS: usize = 31;
const BD_IDENTITY_TOL: f64 = 1e-12;
const BD_SCALE_TOL: f64 = 1e-6;
const SWEEP_DT_BOUND: f64 = -40.0;
const SWEEP_BD_BOUND: f64 = 8.0;
const SWEEP_BUDGET: Duration = Duration::from_secs(7_200);

#[derive(Default)]
struct Gate {
    results: BTreeMap<u32, (bool, String)>,
}

impl Gate {
    fn record(&mut self, n: u32, pass: bool, detail: String) {
        eprintln!("[{}] criterion {n}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.results.insert(n, (pass, detail));
    }
}

fn noise_plane(w: usize, h: usize, seed: u64) -> Plane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Plane::new(w, h, 0);
    for y in 0..h {
        for x in 0..w {
            p.set(x, y, rng.gen());
        }
    }
    p
}

// ---------------------------------------------------------------------------
// 1. Reachable-state enumeration constants.

fn criterion_1(gate: &mut Gate) -> ReachableCus {
    let t0 = Instant::now();
    let quad = enumerate_reachable_cus(&PartitionConfig::quad_only(64, 8).unwrap()).unwrap();
    let full = enumerate_reachable_cus(&PartitionConfig::vvc_intra()).unwrap();
    let elapsed = t0.elapsed();
    let pass = quad.distinct_geometries() == ENUM_QUAD_ONLY
        && full.distinct_geometries() == ENUM_DEFAULT
        && elapsed < ENUM_BUDGET;
    gate.record(
        1,
        pass,
        format!(
            "quad-only 64px tree has {} blocks (want {ENUM_QUAD_ONLY}), default 128px rules {} (want {ENUM_DEFAULT}), {:.0?} (budget {ENUM_BUDGET:?})",
            quad.distinct_geometries(),
            full.distinct_geometries(),
            elapsed
        ),
    );
    full
}

// ---------------------------------------------------------------------------
// 2. Legality, transpose equivariance and exact tiling on sampled states.

fn rects_overlap(a: &CuGeometry, b: &CuGeometry) -> bool {
    a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h
}

fn criterion_2(gate: &mut Gate, full: &ReachableCus) {
    let cfg = PartitionConfig::vvc_intra();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut violations = Vec::new();
    let mut decision_states = 0usize;

    for _ in 0..LEGALITY_SAMPLES {
        let cu = full.contexts[rng.gen_range(0..full.contexts.len())];
        let legal = legal_split_modes(&cu, &cfg).unwrap();
        if legal.is_empty() || legal.len() > 6 {
            violations.push(format!("{cu}: {} legal modes", legal.len()));
            continue;
        }
        if legal.len() >= 2 {
            decision_states += 1;
        } else {
            // A lone mode is only ever the terminal non-split, or the forced
            // quad split at the root.
            let lone = legal.iter().next().unwrap();
            let ok = lone == SplitMode::NonSplit
                || (lone == SplitMode::Quad && cfg.is_forced_root(&cu));
            if !ok {
                violations.push(format!("{cu}: lone mode {lone}"));
            }
        }
        if !legal.is_subset_of(size_mode_set(cu.w, cu.h, &cfg)) {
            violations.push(format!("{cu}: legal set exceeds its shape's mode space"));
        }
        let t = cu.transpose();
        let legal_t = legal_split_modes(&t, &cfg).unwrap();
        if legal_t != legal.transpose() {
            violations.push(format!("{cu}: transpose changed the legal set"));
        }
        for mode in legal.iter() {
            if mode == SplitMode::NonSplit {
                continue;
            }
            let children = apply_split(&cu, mode).unwrap();
            let mut area = 0u64;
            for c in &children {
                area += u64::from(c.area());
                if c.x < cu.x || c.y < cu.y || c.x + c.w > cu.x + cu.w || c.y + c.h > cu.y + cu.h {
                    violations.push(format!("{cu} {mode}: child {c} leaves the parent"));
                }
            }
            if area != u64::from(cu.area()) {
                violations.push(format!("{cu} {mode}: child areas {area} != parent"));
            }
            for i in 0..children.len() {
                for j in i + 1..children.len() {
                    if rects_overlap(&children[i], &children[j]) {
                        violations.push(format!("{cu} {mode}: children {i} and {j} overlap"));
                    }
                }
            }
        }
    }

    // Decision spaces: every predictable shape offers 2..=6 modes, and the
    // mode space is transpose-equivariant.
    let shapes = predictable_shapes(&cfg).unwrap();
    for s in &shapes {
        let m = size_mode_set(s.w, s.h, &cfg);
        if m.len() < 2 || m.len() > 6 {
            violations.push(format!("shape {s}: {} modes in its space", m.len()));
        }
        if size_mode_set(s.h, s.w, &cfg) != m.transpose() {
            violations.push(format!("shape {s}: mode space not transpose-equivariant"));
        }
    }

    let pass = violations.is_empty();
    gate.record(
        2,
        pass,
        format!(
            "{LEGALITY_SAMPLES} sampled states: {decision_states} carry a 2..=6-mode decision, the rest a lone terminal mode; {} decision shapes span 2..=6 modes; transpose + tiling violations: {}{}",
            shapes.len(),
            violations.len(),
            violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Memoized search vs explicit enumeration of every legal tree.

fn count_trees(cu: &CuGeometry, cfg: &PartitionConfig) -> u64 {
    let mut total = 0u64;
    for mode in legal_split_modes(cu, cfg).unwrap().iter() {
        if mode == SplitMode::NonSplit {
            total += 1;
        } else {
            let mut prod = 1u64;
            for child in apply_split(cu, mode).unwrap() {
                prod *= count_trees(&child, cfg);
            }
            total += prod;
        }
    }
    total
}

type RectCache = HashMap<(u32, u32, u32, u32), (f64, f64)>;

/// Minimum cost over every legal tree rooted at `cu`, each tree costed
/// bottom-up with the same per-node formula the production search uses but
/// none of its memoized state machinery.
fn min_tree_cost(
    ctu: &Plane,
    cu: &CuGeometry,
    qp: u8,
    cfg: &PartitionConfig,
    ccfg: &ProxyCodecConfig,
    lambda: f64,
    cache: &mut RectCache,
) -> f64 {
    let mut best = f64::INFINITY;
    for mode in legal_split_modes(cu, cfg).unwrap().iter() {
        let cost = if mode == SplitMode::NonSplit {
            let key = (cu.x, cu.y, cu.w, cu.h);
            let (d, r) = *cache.entry(key).or_insert_with(|| {
                let ic = intra_cost(
                    ctu,
                    cu.x as usize,
                    cu.y as usize,
                    cu.w as usize,
                    cu.h as usize,
                    qp,
                    ccfg,
                )
                .unwrap();
                (ic.distortion, ic.rate)
            });
            d + lambda * (r + ccfg.split_flag_bits[0])
        } else {
            let mut sum = 0f64;
            for child in apply_split(cu, mode).unwrap() {
                sum += min_tree_cost(ctu, &child, qp, cfg, ccfg, lambda, cache);
            }
            sum + lambda * ccfg.split_flag_bits[mode.code() as usize]
        };
        if cost < best {
            best = cost;
        }
    }
    best
}

fn criterion_3(gate: &mut Gate) {
    let t0 = Instant::now();
    let cfg_a = PartitionConfig::new(32, 4, 32, 2, 32, false).unwrap();
    let cfg_b = PartitionConfig::new(32, 4, 16, 1, 32, false).unwrap();
    let root = CuGeometry::root(32);
    let trees_a = count_trees(&root, &cfg_a);
    let trees_b = count_trees(&root, &cfg_b);
    let ccfg = ProxyCodecConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let base = synth_image(256, 256, 7);
    let mut mismatches = 0usize;
    for i in 0..ORACLE_BLOCKS {
        let (cfg, qp) = if i % 2 == 0 {
            (&cfg_a, rng.gen_range(18..=42))
        } else {
            (&cfg_b, rng.gen_range(18..=42))
        };
        let plane = if i % 3 == 0 {
            noise_plane(32, 32, 1000 + i as u64)
        } else {
            let x = rng.gen_range(0..224);
            let y = rng.gen_range(0..224);
            base.window(x, y, 32, 32).unwrap()
        };
        let dp = exhaustive_partition(&plane, qp, cfg, &ccfg).unwrap().total.cost;
        let mut cache = RectCache::new();
        let oracle = min_tree_cost(&plane, &root, qp, cfg, &ccfg, ccfg.lambda(qp), &mut cache);
        if dp.to_bits() != oracle.to_bits() {
            mismatches += 1;
        }
    }
    let elapsed = t0.elapsed();
    let pass = trees_a == 211 && trees_b == 630 && mismatches == 0 && elapsed < ORACLE_BUDGET;
    gate.record(
        3,
        pass,
        format!(
            "{ORACLE_BLOCKS} blocks over {trees_a}- and {trees_b}-tree rule sets (want 211/630): {mismatches} cost mismatches against the all-trees minimum, {:.1?} (budget {ORACLE_BUDGET:?})",
            elapsed
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Analytic gradients vs central differences through the whole network.

fn grad_check_batch(seed_base: u64) -> Vec<TrainSample> {
    let pcfg = PartitionConfig::vvc_intra();
    let modes = size_mode_set(8, 4, &pcfg).to_vec();
    (0..8)
        .map(|i| {
            let mode = modes[i % modes.len()];
            let mut costs = [None; 6];
            for (j, m) in modes.iter().enumerate() {
                costs[m.code() as usize] =
                    Some(if *m == mode { 1000.0 } else { 1200.0 + 40.0 * j as f64 });
            }
            TrainSample {
                pixels: noise_plane(8, 4, seed_base + i as u64),
                qp: 20 + 3 * (i as u8 % 8),
                mode,
                costs,
            }
        })
        .collect()
}

fn criterion_4(gate: &mut Gate) {
    let t0 = Instant::now();
    let pcfg = PartitionConfig::vvc_intra();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = ModelParams::init(&pcfg, &mut rng).unwrap();
    let samples = grad_check_batch(50);
    let refs: Vec<&TrainSample> = samples.iter().collect();
    let cfg = TrainConfig {
        alpha: 0.3,
        beta: 1.0,
        rd_from_labels: false,
        parallelism: Parallelism::Sequential,
        ..TrainConfig::default()
    };
    let (_, grads) = loss_and_gradients(&model, &refs, &cfg).unwrap();

    let mut tensors: Vec<(String, usize)> = Vec::new();
    model.visit_tensors(&mut |name, t| tensors.push((name.to_string(), t.len())));
    tensors.retain(|(n, _)| grads.contains_key(n));

    let mut srng = ChaCha8Rng::seed_from_u64(99);
    let mut checked = 0usize;
    let mut worst = 0f64;
    let mut worst_at = String::new();
    for (name, len) in &tensors {
        let quota = (*len).min(26);
        let mut order: Vec<usize> = (0..*len).collect();
        for i in 0..quota {
            let j = srng.gen_range(i..*len);
            order.swap(i, j);
        }
        for &idx in &order[..quota] {
            let analytic = grads[name][idx];
            let nudge = |delta: f64, m: &mut ModelParams<f64>| {
                m.visit_tensors_mut(&mut |n, t| {
                    if n == name.as_str() {
                        t[idx] += delta;
                    }
                });
            };
            let eval = |m: &ModelParams<f64>| {
                let (p, _) = loss_and_gradients(m, &refs, &cfg).unwrap();
                p.ce + cfg.beta * p.rd
            };
            nudge(GRAD_STEP, &mut model);
            let up = eval(&model);
            nudge(-2.0 * GRAD_STEP, &mut model);
            let down = eval(&model);
            nudge(GRAD_STEP, &mut model);
            let fd = (up - down) / (2.0 * GRAD_STEP);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(GRAD_REL_FLOOR);
            if rel > worst {
                worst = rel;
                worst_at = format!("{name}[{idx}]");
            }
            checked += 1;
        }
    }
    let pass = checked >= GRAD_MIN_PARAMS && worst < GRAD_REL_TOL;
    gate.record(
        4,
        pass,
        format!(
            "{checked} parameters over {} tensors (need >= {GRAD_MIN_PARAMS}): worst relative error {worst:.3e} at {worst_at} (tol {GRAD_REL_TOL:.0e}, step {GRAD_STEP:.0e}), {:.1?}",
            tensors.len(),
            t0.elapsed()
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Loss reductions at the degenerate settings, and a nonnegative cost
//    penalty on every recorded batch of the real training runs.

fn criterion_5(gate: &mut Gate, traces: &[TraceRow]) {
    let pcfg = PartitionConfig::vvc_intra();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let model = ModelParams::init(&pcfg, &mut rng).unwrap();
    let samples = grad_check_batch(300);
    let refs: Vec<&TrainSample> = samples.iter().collect();

    // alpha = 0: the weighted cross entropy collapses to the plain mean.
    let cfg0 = TrainConfig {
        alpha: 0.0,
        beta: 1.0,
        rd_from_labels: false,
        parallelism: Parallelism::Sequential,
        ..TrainConfig::default()
    };
    let (parts0, _) = loss_and_gradients(&model, &refs, &cfg0).unwrap();
    let modes = size_mode_set(8, 4, &pcfg).to_vec();
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for s in &samples {
        let (pm, pp) = model.predict_standalone(&s.pixels, s.qp).unwrap();
        assert_eq!(pm, modes);
        probs.push(pp);
        labels.push(modes.iter().position(|m| *m == s.mode).unwrap());
    }
    let plain = cross_entropy(&probs, &labels, None);
    let alpha_gap = (parts0.ce - plain).abs();

    // The weight formula itself degenerates to 1 at alpha = 0.
    let weights = mode_weights(&[0.25, 0.75], &[0, 1, 1, 0], 0.0);
    let weights_one = weights.iter().all(|&w| w == 1.0);

    // beta = 0: the total loss the trainer reports equals its cross-entropy
    // term on every recorded batch.
    let mut model_b0 = model.clone();
    let mut data_b0 = BTreeMap::new();
    data_b0.insert(CuShape::new(16, 16), overfit_samples());
    let cfg_b0 = TrainConfig {
        iterations_total: 40,
        batch_size: 32,
        alpha: 0.3,
        beta: 0.0,
        rd_from_labels: false,
        seed: 13,
        log_every: 10,
        parallelism: Parallelism::Sequential,
        ..TrainConfig::default()
    };
    let trace_b0 = train(&mut model_b0, &data_b0, &cfg_b0).unwrap();
    let beta_gap = trace_b0
        .iter()
        .map(|r| (r.total - r.ce).abs())
        .fold(0.0, f64::max);

    // Every recorded batch of the real training runs kept the penalty >= 0.
    let min_rd = traces.iter().map(|r| r.rd).fold(f64::INFINITY, f64::min);
    let rd_ok = traces.iter().all(|r| r.rd >= 0.0);

    let pass = alpha_gap <= REDUCTION_TOL && weights_one && beta_gap <= REDUCTION_TOL && rd_ok;
    gate.record(
        5,
        pass,
        format!(
            "alpha=0 weighted-vs-plain CE gap {alpha_gap:.2e}, beta=0 objective-vs-CE gap {beta_gap:.2e} (tol {REDUCTION_TOL:.0e}); cost penalty >= 0 on all {} recorded batches (min {min_rd:.3e})",
            traces.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Threshold extremes: tau = 0 reproduces the full search bit for bit,
//    tau = 1 follows the network argmax tree.

fn singleton_tree(cu: CuGeometry, candidates: &CandidateMap) -> PartitionTree {
    let set = candidates[&cu.key()];
    assert_eq!(set.len(), 1, "tau=1 left {} candidates at {cu}", set.len());
    let mode = set.iter().next().unwrap();
    let children = apply_split(&cu, mode)
        .unwrap()
        .into_iter()
        .map(|c| singleton_tree(c, candidates))
        .collect();
    PartitionTree { cu, mode, children }
}

fn criterion_6(gate: &mut Gate) {
    let t0 = Instant::now();
    let pcfg = PartitionConfig::vvc_intra();
    let ccfg = ProxyCodecConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let model = ModelParams::init(&pcfg, &mut rng).unwrap().convert::<f32>();
    let keep_all = ThresholdSet::uniform(0.0).unwrap();
    let argmax_only = ThresholdSet::uniform(1.0).unwrap();

    let mut tiles = Vec::new();
    for i in 0..20 {
        let img = synth_image(256, 256, image_seed(999, i));
        tiles.extend(ctu_planes(&img, 128).unwrap());
    }

    let mut tree_mismatches = 0usize;
    let mut cost_mismatches = 0usize;
    let mut non_singleton = 0usize;
    let mut argmax_mismatches = 0usize;
    let mut excess_mode_evals = 0usize;
    let mut unsound = 0usize;
    let mut walks = 0usize;
    for &qp in &[22u8, 37] {
        for tile in &tiles {
            let anchor = exhaustive_partition(tile, qp, &pcfg, &ccfg).unwrap();

            let pred0 = run_ctu(&model, tile, qp, &pcfg, &keep_all).unwrap();
            let fast0 = restricted_partition(tile, qp, &pcfg, &ccfg, &pred0.candidates).unwrap();
            if fast0.tree != anchor.tree {
                tree_mismatches += 1;
            }
            if fast0.total.cost.to_bits() != anchor.total.cost.to_bits() {
                cost_mismatches += 1;
            }

            let pred1 = run_ctu(&model, tile, qp, &pcfg, &argmax_only).unwrap();
            if pred1.candidates.values().any(|set| set.len() != 1) {
                non_singleton += 1;
                continue;
            }
            let fast1 = restricted_partition(tile, qp, &pcfg, &ccfg, &pred1.candidates).unwrap();
            if fast1.tree != singleton_tree(CuGeometry::root(pcfg.ctu_size), &pred1.candidates) {
                argmax_mismatches += 1;
            }
            // One candidate per expanded state leaves nothing to compare.
            if fast1.stats.mode_evaluations != fast1.stats.nodes_expanded {
                excess_mode_evals += 1;
            }
            if fast1.total.cost < anchor.total.cost {
                unsound += 1;
            }
            walks += pred0.network_evals + pred1.network_evals;
        }
    }
    let pass = tree_mismatches == 0
        && cost_mismatches == 0
        && non_singleton == 0
        && argmax_mismatches == 0
        && excess_mode_evals == 0
        && unsound == 0
        && walks > 0;
    gate.record(
        6,
        pass,
        format!(
            "{} CTUs at qp 22/37: tau=0 tree/cost mismatches {}/{}; tau=1 non-singleton {}, argmax-tree mismatches {}, excess mode evaluations {}, cost-below-anchor {}; {:.1?}",
            tiles.len(),
            tree_mismatches,
            cost_mismatches,
            non_singleton,
            argmax_mismatches,
            excess_mode_evals,
            unsound,
            t0.elapsed()
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Preset means and profile checks; filter monotonicity.

fn criterion_7(gate: &mut Gate) {
    let presets = [
        ("faster", ThresholdSet::faster(), 0.5),
        ("fast", ThresholdSet::fast(), 0.4),
        ("medium", ThresholdSet::medium(), 0.3),
    ];
    let mut mean_err = 0f64;
    let mut mean_text = Vec::new();
    let mut valid = true;
    for (name, set, want) in &presets {
        let mean = set.mean();
        mean_text.push(format!("{name}={mean}"));
        mean_err = mean_err.max((mean - want).abs());
        if set.validate().is_err() {
            valid = false;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut violations = 0usize;
    for _ in 0..FILTER_SAMPLES {
        let n = rng.gen_range(2..=6);
        let mut all = SplitMode::ALL.to_vec();
        for i in 0..n {
            let j = rng.gen_range(i..all.len());
            all.swap(i, j);
        }
        let modes = &all[..n];
        let mut probs: Vec<f64> = (0..n).map(|_| (rng.gen_range(-2.0..2.0f64)).exp()).collect();
        let sum: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= sum;
        }
        let mut lo = rng.gen_range(0.0..=1.0);
        let mut hi = rng.gen_range(0.0..=1.0);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        let kept_lo = threshold_filter(&probs, modes, lo);
        let kept_hi = threshold_filter(&probs, modes, hi);
        let argmax = modes[probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0];
        if !kept_hi.is_subset_of(kept_lo)
            || !kept_hi.contains(argmax)
            || threshold_filter(&probs, modes, 0.0).len() != n
            || !threshold_filter(&probs, modes, 1.0).contains(argmax)
        {
            violations += 1;
        }
    }
    let pass = mean_err <= PRESET_MEAN_TOL && valid && violations == 0;
    gate.record(
        7,
        pass,
        format!(
            "preset means {} (max err {mean_err:.2e}, tol {PRESET_MEAN_TOL:.0e}), profiles valid: {valid}; filter monotonicity violations {violations}/{FILTER_SAMPLES}",
            mean_text.join(", ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. First reduction stage: kernel == stride, so one perturbed input tile
//    moves exactly one output position in every channel.

fn criterion_8(gate: &mut Gate) {
    let pcfg = PartitionConfig::vvc_intra();
    let mut rng = ChaCha8Rng::seed_from_u64(2468);
    let model = ModelParams::init(&pcfg, &mut rng).unwrap();
    let mut violations = 0usize;
    let mut tiles_checked = 0usize;
    let shapes = predictable_shapes(&pcfg).unwrap();
    for shape in &shapes {
        let sub = &model.subnets[shape];
        let (conv, act) = &sub.ladder[0];
        let (h, w) = (shape.h as usize, shape.w as usize);
        let (oh, ow) = conv.out_dims(h, w);
        assert_eq!((oh, ow), (h / conv.kh, w / conv.kw));
        let mut x = FeatureTensor::<f64>::zeros(16, h, w);
        for v in x.as_mut_slice().iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut base = conv.forward(&x);
        act.forward(&mut base);
        for ty in 0..oh {
            for tx in 0..ow {
                let c = rng.gen_range(0..16);
                let py = ty * conv.kh + rng.gen_range(0..conv.kh);
                let px = tx * conv.kw + rng.gen_range(0..conv.kw);
                let mut x2 = x.clone();
                x2.set(c, py, px, x2.at(c, py, px) + 0.75);
                let mut out = conv.forward(&x2);
                act.forward(&mut out);
                for co in 0..16 {
                    let mut changed = Vec::new();
                    for oy in 0..oh {
                        for ox in 0..ow {
                            if out.at(co, oy, ox) != base.at(co, oy, ox) {
                                changed.push((oy, ox));
                            }
                        }
                    }
                    if changed != [(ty, tx)] {
                        violations += 1;
                    }
                }
                tiles_checked += 1;
            }
        }
    }
    let pass = violations == 0 && tiles_checked > 0;
    gate.record(
        8,
        pass,
        format!(
            "{} shapes, {tiles_checked} perturbed tiles x 16 channels: {violations} spatial-footprint violations",
            shapes.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. Overfitting a fixed batch, and bitwise-identical traces across reruns.

fn overfit_samples() -> Vec<TrainSample> {
    let pcfg = PartitionConfig::vvc_intra();
    let modes = size_mode_set(16, 16, &pcfg).to_vec();
    (0..32)
        .map(|i| {
            let mode = modes[i % modes.len()];
            let mut costs = [None; 6];
            for m in &modes {
                costs[m.code() as usize] = Some(if *m == mode { 900.0 } else { 1400.0 });
            }
            TrainSample {
                pixels: noise_plane(16, 16, 7000 + i as u64),
                qp: 32,
                mode,
                costs,
            }
        })
        .collect()
}

fn criterion_9(gate: &mut Gate) -> Vec<TraceRow> {
    let t0 = Instant::now();
    let pcfg = PartitionConfig::vvc_intra();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let init = ModelParams::init(&pcfg, &mut rng).unwrap();
    let samples = overfit_samples();
    let mut data = BTreeMap::new();
    data.insert(CuShape::new(16, 16), samples.clone());
    let cfg = TrainConfig {
        iterations_total: OVERFIT_ITERS,
        batch_size: 32,
        lr_base: 1e-3,
        lr_decay: 0.99,
        lr_step: 2000,
        alpha: 0.3,
        beta: 1.0,
        rd_from_labels: false,
        seed: 11,
        log_every: 50,
        parallelism: Parallelism::Auto,
    };

    let mut model_a = init.clone();
    let trace_a = train(&mut model_a, &data, &cfg).unwrap();
    let mut model_b = init;
    let cfg_seq = TrainConfig {
        parallelism: Parallelism::Sequential,
        ..cfg
    };
    let trace_b = train(&mut model_b, &data, &cfg_seq).unwrap();

    let mut hits = 0usize;
    for s in &samples {
        let (pm, pp) = model_a.predict_standalone(&s.pixels, s.qp).unwrap();
        let arg = pp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if pm[arg] == s.mode {
            hits += 1;
        }
    }
    let identical = trace_a == trace_b && model_a == model_b;
    let pass = hits >= OVERFIT_MIN_HITS && identical;
    gate.record(
        9,
        pass,
        format!(
            "top-1 {hits}/32 after {OVERFIT_ITERS} iterations (need >= {OVERFIT_MIN_HITS}); rerun trace and parameters identical: {identical}; {:.1?}",
            t0.elapsed()
        ),
    );
    trace_a
}

// ---------------------------------------------------------------------------
// 10. End-to-end: dataset, 20k-iteration training, preset sweep.

fn rate_points(reports: &[EncodeReport]) -> Vec<RatePoint> {
    reports.iter().map(|r| r.rate_point()).collect()
}

fn criterion_10(gate: &mut Gate) -> Vec<TraceRow> {
    let t0 = Instant::now();
    let pcfg = PartitionConfig::vvc_intra();
    let ccfg = ProxyCodecConfig::default();
    let qps = [22u8, 27, 32, 37];
    let dir = tempfile::tempdir().unwrap();

    let mut entries = Vec::new();
    for i in 0..128 {
        let img = synth_image(512, 512, image_seed(1234, i));
        let path = dir.path().join(format!("train_{i:03}.pgm"));
        write_pgm(&path, &img).unwrap();
        entries.push(ManifestEntry {
            path,
            width: 512,
            height: 512,
            frames: 1,
            split: Split::Train,
        });
    }
    let train_ctus = entries.len() * 16;

    let db_dir = dir.path().join("db");
    let dcfg = DatasetConfig {
        qps: qps.to_vec(),
        partition: pcfg,
        codec: ccfg,
        parallelism: Parallelism::Auto,
    };
    let summary = build_database(&entries, &db_dir, &dcfg).unwrap();
    let data = load_split(&db_dir, Split::Train).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut model = ModelParams::init(&pcfg, &mut rng).unwrap();
    let tcfg = TrainConfig {
        iterations_total: 20_000,
        batch_size: 32,
        lr_base: 1e-3,
        lr_decay: 0.99,
        lr_step: 2000,
        alpha: 0.3,
        beta: 1.0,
        rd_from_labels: false,
        seed: 7,
        log_every: 200,
        parallelism: Parallelism::Auto,
    };
    let trace = train(&mut model, &data, &tcfg).unwrap();
    let model32 = model.convert::<f32>();

    let mut tiles = Vec::new();
    for i in 0..20 {
        let img = synth_image(256, 256, image_seed(777, i));
        tiles.extend(ctu_planes(&img, 128).unwrap());
    }

    let mut anchor_reports = Vec::new();
    for &qp in &qps {
        anchor_reports
            .push(encode_anchor(&tiles, qp, &pcfg, &ccfg, Parallelism::Sequential, 2).unwrap());
    }
    let anchor_pts = rate_points(&anchor_reports);

    let mut sweep = Vec::new();
    let mut accounting_ok = true;
    for name in ["faster", "fast", "medium"] {
        let taus = ThresholdSet::preset(name).unwrap();
        let mut reports = Vec::new();
        for &qp in &qps {
            reports.push(
                encode_fast(&tiles, &model32, &taus, qp, &pcfg, &ccfg, Parallelism::Sequential, 2)
                    .unwrap(),
            );
        }
        for (r, a) in reports.iter().zip(&anchor_reports) {
            if r.network_evals + r.nodes_expanded > a.nodes_expanded {
                accounting_ok = false;
            }
        }
        let pts = rate_points(&reports);
        let dt = delta_t(&anchor_pts, &pts).unwrap();
        let bd = bd_rate(&anchor_pts, &pts).unwrap();
        sweep.push((name, taus.mean(), dt, bd));
    }

    let elapsed = t0.elapsed();
    let (_, _, dt_faster, bd_faster) = sweep[0];
    let mut monotone = true;
    for pair in sweep.windows(2) {
        let (_, mean_a, dt_a, bd_a) = pair[0];
        let (_, mean_b, dt_b, bd_b) = pair[1];
        // Larger mean threshold must save at least as much time and may not
        // cost less quality.
        if !(mean_a > mean_b && dt_a <= dt_b && bd_a >= bd_b) {
            monotone = false;
        }
    }
    let pass = train_ctus >= 2_000
        && dt_faster <= SWEEP_DT_BOUND
        && bd_faster <= SWEEP_BD_BOUND
        && monotone
        && accounting_ok
        && elapsed < SWEEP_BUDGET;
    let sweep_text = sweep
        .iter()
        .map(|(n, m, dt, bd)| format!("{n}(mean {m:.1}): dT {dt:+.1}% bd-rate {bd:+.2}%"))
        .collect::<Vec<_>>()
        .join("; ");
    gate.record(
        10,
        pass,
        format!(
            "{train_ctus} training CTUs, {} labeled samples, 20000 iterations; held-out {} CTUs: {sweep_text}; bounds dT <= {SWEEP_DT_BOUND}%, bd-rate <= {SWEEP_BD_BOUND}%; sweep monotone: {monotone}; predictor+search work <= anchor search: {accounting_ok}; {:.0?} (budget {SWEEP_BUDGET:?})",
            summary.total_samples(),
            tiles.len(),
            elapsed
        ),
    );
    trace
}

// ---------------------------------------------------------------------------
// 11. Curve-difference identities.

fn sample_curve(scale: f64, offset: f64) -> Vec<RatePoint> {
    [(22u8, 8e5, 41.0), (27, 4e5, 38.5), (32, 2e5, 35.5), (37, 1e5, 32.0)]
        .into_iter()
        .map(|(qp, rate, psnr)| RatePoint {
            qp,
            rate: rate * scale,
            psnr: psnr + offset,
            seconds: 1.0,
        })
        .collect()
}

fn criterion_11(gate: &mut Gate) {
    let a = sample_curve(1.0, 0.0);
    let same_rate = bd_rate(&a, &a).unwrap().abs();
    let same_psnr = bd_psnr(&a, &a).unwrap().abs();

    let inflated = sample_curve(1.10, 0.0);
    let scale_err = (bd_rate(&a, &inflated).unwrap() - 10.0).abs();

    let shifted = sample_curve(1.07, -0.4);
    let ab = bd_rate(&a, &shifted).unwrap();
    let ba = bd_rate(&shifted, &a).unwrap();
    let swap_err = (ba - (-100.0 * ab / (100.0 + ab))).abs();

    let pass = same_rate <= BD_IDENTITY_TOL
        && same_psnr <= BD_IDENTITY_TOL
        && scale_err <= BD_SCALE_TOL
        && swap_err <= BD_SCALE_TOL;
    gate.record(
        11,
        pass,
        format!(
            "identity gaps rate {same_rate:.2e} / quality {same_psnr:.2e} (tol {BD_IDENTITY_TOL:.0e}); 1.10x rate scaling error {scale_err:.2e}, role-swap identity error {swap_err:.2e} (tol {BD_SCALE_TOL:.0e})"
        ),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    let mut gate = Gate::default();
    let full = criterion_1(&mut gate);
    criterion_2(&mut gate, &full);
    criterion_3(&mut gate);
    criterion_7(&mut gate);
    criterion_8(&mut gate);
    criterion_11(&mut gate);
    criterion_4(&mut gate);
    criterion_6(&mut gate);
    let mut traces = criterion_9(&mut gate);
    traces.extend(criterion_10(&mut gate));
    criterion_5(&mut gate, &traces);

    eprintln!("--- acceptance summary ---");
    let mut failed = Vec::new();
    for (n, (pass, detail)) in &gate.results {
        eprintln!("[{}] criterion {n}: {detail}", if *pass { "PASS" } else { "FAIL" });
        if !*pass {
            failed.push(format!("criterion {n}"));
        }
    }
    assert!(gate.results.len() == 11, "expected 11 criteria, ran {}", gate.results.len());
    assert!(failed.is_empty(), "acceptance failed: {}", failed.join(", "));
}
