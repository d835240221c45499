//! Training for the split predictor: class-imbalance-weighted cross entropy
//! plus a cost-aware penalty, Adam over a per-shape curriculum.
//!
//! The curriculum walks shapes from shallow trunk depth to deep. Each phase
//! trains that shape's sub-network, any trunk units that first run at the
//! shape's depth, and the stem in the very first phase; everything trained
//! earlier stays frozen. Backpropagation therefore never descends below the
//! shallowest trainable component, which keeps late phases cheap.
//!
//! Gradients are summed per sample in batch order, so results are
//! bit-identical for any thread count.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write as IoWrite;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::Plane;
use crate::net::{
    half_mask_tensor, half_mask_vec, normalize_qp, softmax, unit_index, Conv2d, Fc, FeatureTensor,
    ModelParams, PRelu, SubNetwork,
};
use crate::par::{map_range, Parallelism};
use crate::qtmt::{CuShape, SplitMode};
use crate::{Error, Result};

/// Probabilities below this are clamped inside logs.
pub const LOG_FLOOR: f64 = 1e-12;
/// Class proportions below this are floored before weighting.
pub const PROPORTION_FLOOR: f64 = 1e-4;

/// One labeled block: canonical-orientation pixels, the quantizer, the
/// winning split mode and the searched total cost per mode code.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub pixels: Plane,
    pub qp: u8,
    pub mode: SplitMode,
    pub costs: [Option<f64>; 6],
}

impl TrainSample {
    pub fn shape(&self) -> CuShape {
        CuShape::new(self.pixels.w as u32, self.pixels.h as u32)
    }
}

/// Label frequencies with a small floor so absent classes do not produce
/// infinite weights. The floored vector is renormalized to sum 1.
pub fn estimate_proportions(labels: &[usize], n_modes: usize) -> Vec<f64> {
    let mut p = vec![0.0f64; n_modes];
    for &l in labels {
        p[l] += 1.0;
    }
    let n = labels.len().max(1) as f64;
    for v in p.iter_mut() {
        *v = (*v / n).max(PROPORTION_FLOOR);
    }
    let sum: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= sum;
    }
    p
}

/// Per-sample weights (1 / p_label)^alpha. alpha = 0 gives uniform weights.
pub fn mode_weights(proportions: &[f64], labels: &[usize], alpha: f64) -> Vec<f64> {
    labels
        .iter()
        .map(|&l| (1.0 / proportions[l]).powf(alpha))
        .collect()
}

/// Weighted cross entropy: -sum_n w_n log p_n[label_n] / sum_n w_n.
/// Without weights this is the plain batch mean.
pub fn cross_entropy(probs: &[Vec<f64>], labels: &[usize], weights: Option<&[f64]>) -> f64 {
    assert_eq!(probs.len(), labels.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for (n, (p, &l)) in probs.iter().zip(labels).enumerate() {
        let w = weights.map_or(1.0, |w| w[n]);
        num -= w * p[l].max(LOG_FLOOR).ln();
        den += w;
    }
    num / den
}

/// Relative cost overhead per mode: cost / min_cost - 1, or 0 where no cost
/// was searched. The best mode maps to 0.
pub fn cost_ratios(costs: &[Option<f64>], modes: &[SplitMode]) -> Vec<f64> {
    let cmin = modes
        .iter()
        .filter_map(|m| costs[m.code() as usize])
        .fold(f64::INFINITY, f64::min);
    modes
        .iter()
        .map(|m| match costs[m.code() as usize] {
            Some(c) if cmin.is_finite() && cmin > 0.0 => c / cmin - 1.0,
            _ => 0.0,
        })
        .collect()
}

/// Expected relative cost overhead of sampling a mode from the predicted
/// distribution, averaged over the batch.
pub fn rd_penalty(probs: &[Vec<f64>], ratios: &[Vec<f64>]) -> f64 {
    assert_eq!(probs.len(), ratios.len());
    let mut acc = 0.0;
    for (p, r) in probs.iter().zip(ratios) {
        acc += p.iter().zip(r).map(|(a, b)| a * b).sum::<f64>();
    }
    acc / probs.len().max(1) as f64
}

/// Literal-label variant of [`rd_penalty`]: scores the recorded best mode
/// instead of the prediction. Constant in the parameters, so it shifts the
/// reported loss without steering training.
pub fn rd_penalty_labels(labels: &[usize], ratios: &[Vec<f64>]) -> f64 {
    let acc: f64 = labels.iter().zip(ratios).map(|(&l, r)| r[l]).sum();
    acc / labels.len().max(1) as f64
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub iterations_total: usize,
    pub batch_size: usize,
    pub lr_base: f64,
    pub lr_decay: f64,
    pub lr_step: usize,
    /// Exponent of the inverse-frequency class weights.
    pub alpha: f64,
    /// Weight of the cost penalty in the total loss.
    pub beta: f64,
    /// Score the penalty with recorded labels instead of predictions.
    pub rd_from_labels: bool,
    pub seed: u64,
    /// Trace rows are recorded every this many iterations (plus the last
    /// iteration of each phase).
    pub log_every: usize,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            iterations_total: 20_000,
            batch_size: 32,
            lr_base: 1e-4,
            lr_decay: 0.99,
            lr_step: 2000,
            alpha: 0.3,
            beta: 1.0,
            rd_from_labels: false,
            seed: 7,
            log_every: 50,
            parallelism: Parallelism::Auto,
        }
    }
}

/// Stepped exponential decay: lr_base * lr_decay^(iter / lr_step).
pub fn learning_rate(cfg: &TrainConfig, global_iter: usize) -> f64 {
    cfg.lr_base * cfg.lr_decay.powi((global_iter / cfg.lr_step.max(1)) as i32)
}

/// Phase order: shallow trunk depth first (largest minimum side), larger
/// area first within a depth. Guarantees each trunk unit is introduced by
/// the largest shape that uses it.
pub fn curriculum(shapes: &[CuShape]) -> Vec<CuShape> {
    let mut out = shapes.to_vec();
    out.sort_by_key(|s| (std::cmp::Reverse(s.min_side()), std::cmp::Reverse(s.area()), *s));
    out
}

/// Splits a total iteration budget across shapes proportional to
/// 1/sqrt(area), so cheap small shapes iterate more. Largest-remainder
/// rounding keeps the exact total.
pub fn schedule_iterations(total: usize, shapes: &[CuShape]) -> Vec<usize> {
    if shapes.is_empty() {
        return Vec::new();
    }
    let weights: Vec<f64> = shapes.iter().map(|s| 1.0 / (s.area() as f64).sqrt()).collect();
    let wsum: f64 = weights.iter().sum();
    let ideal: Vec<f64> = weights.iter().map(|w| total as f64 * w / wsum).collect();
    let mut out: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let mut rest: Vec<(usize, f64)> = ideal
        .iter()
        .enumerate()
        .map(|(i, v)| (i, v - v.floor()))
        .collect();
    rest.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let assigned: usize = out.iter().sum();
    for (i, _) in rest.iter().take(total - assigned) {
        out[*i] += 1;
    }
    out
}

/// One recorded training step.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub shape: CuShape,
    pub lr: f64,
    pub ce: f64,
    pub rd: f64,
    pub total: f64,
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut out = String::from("iteration,shape,lr,ce,rd,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration, r.shape, r.lr, r.ce, r.rd, r.total
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Backward passes. Forward activations are captured by running the exact
// inference ops and cloning intermediates, so tape probabilities are
// bit-identical to the inference path.

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc = x.mul_add(*y, acc);
    }
    acc
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d = s.mul_add(a, *d);
    }
}

/// dL/dweights, dL/dbias and optionally dL/dinput of a 3x3 stride-1 pad-1
/// convolution.
fn conv3x3_backward(
    conv: &Conv2d<f64>,
    x: &FeatureTensor<f64>,
    dy: &FeatureTensor<f64>,
    dw: &mut [f64],
    db: &mut [f64],
    mut dx: Option<&mut FeatureTensor<f64>>,
) {
    let (h, w) = (x.h, x.w);
    for co in 0..conv.out_c {
        let dplane = dy.plane(co);
        db[co] += dplane.iter().sum::<f64>();
        for ci in 0..conv.in_c {
            let xplane = x.plane(ci);
            for ky in 0..3usize {
                for oy in 0..h {
                    let iy = oy + ky;
                    if iy < 1 || iy > h {
                        continue;
                    }
                    let iy = iy - 1;
                    let drow = &dplane[oy * w..(oy + 1) * w];
                    let xrow = &xplane[iy * w..(iy + 1) * w];
                    let base = conv.w_index(co, ci, ky, 0);
                    dw[base] += dot(&drow[1..], &xrow[..w - 1]);
                    dw[base + 1] += dot(drow, xrow);
                    dw[base + 2] += dot(&drow[..w - 1], &xrow[1..]);
                }
            }
        }
    }
    if let Some(dx) = dx.as_deref_mut() {
        // Input gradient is the correlation with the flipped kernel; written
        // as row-shifted accumulations just like the forward pass.
        for ci in 0..conv.in_c {
            for iy in 0..h {
                let dst_range = ci * h * w + iy * w..ci * h * w + (iy + 1) * w;
                for co in 0..conv.out_c {
                    let dplane = dy.plane(co);
                    for ky in 0..3usize {
                        let oy = iy + ky;
                        if oy < 1 || oy > h {
                            continue;
                        }
                        let oy = oy - 1;
                        // This output row sees input row iy through tap
                        // row 2 - ky.
                        let drow = &dplane[oy * w..(oy + 1) * w];
                        let base = conv.w_index(co, ci, 2 - ky, 0);
                        let (w0, w1, w2) = (conv.weight[base], conv.weight[base + 1], conv.weight[base + 2]);
                        let dst = &mut dx.as_mut_slice()[dst_range.clone()];
                        axpy(&mut dst[..w - 1], &drow[1..], w0);
                        axpy(dst, drow, w1);
                        axpy(&mut dst[1..], &drow[..w - 1], w2);
                    }
                }
            }
        }
    }
}

/// Backward of the general (kernel == stride, no padding) convolution.
fn conv_general_backward(
    conv: &Conv2d<f64>,
    x: &FeatureTensor<f64>,
    dy: &FeatureTensor<f64>,
    dw: &mut [f64],
    db: &mut [f64],
    mut dx: Option<&mut FeatureTensor<f64>>,
) {
    debug_assert_eq!(conv.pad, 0);
    let (oh, ow) = conv.out_dims(x.h, x.w);
    for co in 0..conv.out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy.at(co, oy, ox);
                db[co] += g;
                for ci in 0..conv.in_c {
                    for ky in 0..conv.kh {
                        for kx in 0..conv.kw {
                            let iy = oy * conv.sy + ky;
                            let ix = ox * conv.sx + kx;
                            dw[conv.w_index(co, ci, ky, kx)] += g * x.at(ci, iy, ix);
                            if let Some(dx) = dx.as_deref_mut() {
                                let v = dx.at(ci, iy, ix) + g * conv.weight[conv.w_index(co, ci, ky, kx)];
                                dx.set(ci, iy, ix, v);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward(
    conv: &Conv2d<f64>,
    x: &FeatureTensor<f64>,
    dy: &FeatureTensor<f64>,
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut FeatureTensor<f64>>,
) {
    if conv.kh == 3 && conv.kw == 3 && conv.sy == 1 && conv.sx == 1 && conv.pad == 1 {
        conv3x3_backward(conv, x, dy, dw, db, dx);
    } else {
        conv_general_backward(conv, x, dy, dw, db, dx);
    }
}

/// PReLU backward from pre-activation values: d/dz is 1 on the positive
/// side and the slope otherwise; d/dslope collects the negative inputs.
fn prelu_backward(
    act: &PRelu<f64>,
    z: &FeatureTensor<f64>,
    dy: &FeatureTensor<f64>,
    dslopes: &mut [f64],
    dz: &mut FeatureTensor<f64>,
) {
    for c in 0..z.channels {
        let a = act.slopes[c];
        let zp = z.plane(c);
        let dp = dy.plane(c);
        let out = dz.plane_mut(c);
        let mut ds = 0.0;
        for i in 0..zp.len() {
            if zp[i] > 0.0 {
                out[i] = dp[i];
            } else {
                ds += dp[i] * zp[i];
                out[i] = dp[i] * a;
            }
        }
        dslopes[c] += ds;
    }
}

fn prelu_backward_vec(
    act: &PRelu<f64>,
    z: &[f64],
    dy: &[f64],
    dslopes: &mut [f64],
    dz: &mut [f64],
) {
    for i in 0..z.len() {
        if z[i] > 0.0 {
            dz[i] = dy[i];
        } else {
            dslopes[i] += dy[i] * z[i];
            dz[i] = dy[i] * act.slopes[i];
        }
    }
}

fn fc_backward(fc: &Fc<f64>, x: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64], dx: &mut [f64]) {
    for o in 0..fc.out_dim {
        let g = dy[o];
        db[o] += g;
        let row = &fc.weight[o * fc.in_dim..(o + 1) * fc.in_dim];
        let drow = &mut dw[o * fc.in_dim..(o + 1) * fc.in_dim];
        for i in 0..fc.in_dim {
            drow[i] += g * x[i];
            dx[i] += g * row[i];
        }
    }
}

struct UnitTape {
    x: FeatureTensor<f64>,
    z1: FeatureTensor<f64>,
    a1: FeatureTensor<f64>,
    z2: FeatureTensor<f64>,
}

struct SubnetTape {
    /// Ladder stage inputs (masked trunk output, then each post-activation).
    stage_in: Vec<FeatureTensor<f64>>,
    /// Ladder pre-activation outputs.
    stage_z: Vec<FeatureTensor<f64>>,
    /// Projection input (last ladder activation).
    proj_in: FeatureTensor<f64>,
    /// Masked flat vector (fc1 input).
    fc1_in: Vec<f64>,
    /// fc1 pre-activation.
    fc1_z: Vec<f64>,
    /// fc2 input (post-activation).
    fc2_in: Vec<f64>,
    probs: Vec<f64>,
}

struct SampleTape {
    x0: FeatureTensor<f64>,
    stem_z: FeatureTensor<f64>,
    /// Tapes for units deeper than `unit_tape_from` (1-based unit numbers
    /// `unit_tape_from + 1 ..= k`).
    units: Vec<UnitTape>,
    unit_tape_from: usize,
    subnet: SubnetTape,
}

/// Runs the forward pass for one sample, capturing what the backward pass
/// needs. `tape_from` is the number of leading trunk units whose interiors
/// can be discarded (no parameter below them is trained).
fn forward_tape(
    model: &ModelParams<f64>,
    subnet: &SubNetwork<f64>,
    sample: &TrainSample,
    k: usize,
    tape_from: usize,
) -> SampleTape {
    let px = &sample.pixels;
    let x0 = FeatureTensor::<f64>::from_pixels(px, 0, 0, px.w, px.h);
    let stem_z = model.stem.forward(&x0);
    let mut t = stem_z.clone();
    model.stem_act.forward(&mut t);

    let mut units = Vec::new();
    for ki in 0..k {
        let u = &model.units[ki];
        let z1 = u.conv1.forward(&t);
        let mut a1 = z1.clone();
        u.act1.forward(&mut a1);
        let z2 = u.conv2.forward(&a1);
        let mut a2 = z2.clone();
        u.act2.forward(&mut a2);
        for (o, &i) in a2.as_mut_slice().iter_mut().zip(t.as_slice()) {
            *o += i;
        }
        if ki >= tape_from {
            units.push(UnitTape { x: t, z1, a1, z2 });
        }
        t = a2;
    }

    let qnorm = normalize_qp(sample.qp);
    let mut m = t;
    half_mask_tensor(&mut m, qnorm);
    let mut stage_in = Vec::new();
    let mut stage_z = Vec::new();
    let mut cur = m;
    for (conv, act) in &subnet.ladder {
        let z = conv.forward(&cur);
        stage_in.push(cur);
        let mut a = z.clone();
        act.forward(&mut a);
        stage_z.push(z);
        cur = a;
    }
    let proj_in = cur;
    let p = subnet.proj.forward(&proj_in);
    let mut fc1_in: Vec<f64> = (0..p.channels).map(|c| p.at(c, 0, 0)).collect();
    half_mask_vec(&mut fc1_in, qnorm);
    let fc1_z = subnet.fc1.forward(&fc1_in);
    let mut fc2_in = fc1_z.clone();
    subnet.fc_act.forward_vec(&mut fc2_in);
    let mut probs = subnet.fc2.forward(&fc2_in);
    softmax(&mut probs);

    SampleTape {
        x0,
        stem_z,
        units,
        unit_tape_from: tape_from,
        subnet: SubnetTape {
            stage_in,
            stage_z,
            proj_in,
            fc1_in,
            fc1_z,
            fc2_in,
            probs,
        },
    }
}

/// Which parameters the current phase trains.
#[derive(Clone, Debug)]
struct PhasePlan {
    shape: CuShape,
    k: usize,
    train_units: BTreeSet<usize>,
    train_stem: bool,
}

impl PhasePlan {
    fn subnet_prefix(&self) -> String {
        format!("sub{}x{}", self.shape.w, self.shape.h)
    }

    /// Number of leading trunk units the backward pass never enters.
    fn tape_from(&self) -> usize {
        if self.train_stem {
            0
        } else if let Some(min) = self.train_units.iter().next() {
            min - 1
        } else {
            self.k
        }
    }
}

type GradMap = HashMap<String, Vec<f64>>;

fn grad_entry<'a>(grads: &'a mut GradMap, name: String, len: usize) -> &'a mut Vec<f64> {
    grads.entry(name).or_insert_with(|| vec![0.0; len])
}

/// Backward pass for one sample given dL/dlogits. Accumulates parameter
/// gradients for the phase's trainable set into `grads`.
fn backward_sample(
    model: &ModelParams<f64>,
    subnet: &SubNetwork<f64>,
    plan: &PhasePlan,
    tape: &SampleTape,
    dlogits: &[f64],
    qnorm: f64,
    grads: &mut GradMap,
) {
    let p = plan.subnet_prefix();
    let nm = subnet.modes.len();
    debug_assert_eq!(dlogits.len(), nm);

    // fc2
    let mut d_fc2_in = vec![0.0; subnet.fc2.in_dim];
    {
        let dw = grad_entry(grads, format!("{p}.fc2.w"), subnet.fc2.weight.len());
        let mut db = vec![0.0; subnet.fc2.bias.len()];
        fc_backward(&subnet.fc2, &tape.subnet.fc2_in, dlogits, dw, &mut db, &mut d_fc2_in);
        axpy(grad_entry(grads, format!("{p}.fc2.b"), nm), &db, 1.0);
    }

    // fc activation
    let mut d_fc1_z = vec![0.0; subnet.fc1.out_dim];
    {
        let ds = grad_entry(grads, format!("{p}.fc1.a"), subnet.fc_act.slopes.len());
        prelu_backward_vec(&subnet.fc_act, &tape.subnet.fc1_z, &d_fc2_in, ds, &mut d_fc1_z);
    }

    // fc1
    let mut d_fc1_in = vec![0.0; subnet.fc1.in_dim];
    {
        let dw = grad_entry(grads, format!("{p}.fc1.w"), subnet.fc1.weight.len());
        let mut db = vec![0.0; subnet.fc1.bias.len()];
        fc_backward(&subnet.fc1, &tape.subnet.fc1_in, &d_fc1_z, dw, &mut db, &mut d_fc1_in);
        axpy(grad_entry(grads, format!("{p}.fc1.b"), subnet.fc1.bias.len()), &db, 1.0);
    }

    // Vector quantizer mask: first half of the flat vector was scaled.
    let mut d_flat = d_fc1_in;
    let half = d_flat.len() / 2;
    for v in &mut d_flat[..half] {
        *v *= qnorm;
    }

    // Projection (1x1): unflatten the gradient.
    let mut d_p = FeatureTensor::<f64>::zeros(subnet.proj.out_c, 1, 1);
    for (c, v) in d_flat.iter().enumerate() {
        d_p.set(c, 0, 0, *v);
    }
    let mut d_proj_in = FeatureTensor::<f64>::zeros(subnet.proj.in_c, tape.subnet.proj_in.h, tape.subnet.proj_in.w);
    {
        let dw = grad_entry(grads, format!("{p}.proj.w"), subnet.proj.weight.len());
        let mut db = vec![0.0; subnet.proj.bias.len()];
        conv_backward(&subnet.proj, &tape.subnet.proj_in, &d_p, dw, &mut db, Some(&mut d_proj_in));
        axpy(grad_entry(grads, format!("{p}.proj.b"), subnet.proj.bias.len()), &db, 1.0);
    }

    // Reduction ladder, last stage first.
    let mut d_out = d_proj_in;
    for i in (0..subnet.ladder.len()).rev() {
        let (conv, act) = &subnet.ladder[i];
        let z = &tape.subnet.stage_z[i];
        let mut dz = FeatureTensor::<f64>::zeros(z.channels, z.h, z.w);
        {
            let ds = grad_entry(grads, format!("{p}.nc{i}.a"), act.slopes.len());
            prelu_backward(act, z, &d_out, ds, &mut dz);
        }
        let xin = &tape.subnet.stage_in[i];
        let mut dx = FeatureTensor::<f64>::zeros(xin.channels, xin.h, xin.w);
        {
            let dw = grad_entry(grads, format!("{p}.nc{i}.w"), conv.weight.len());
            let mut db = vec![0.0; conv.bias.len()];
            conv_backward(conv, xin, &dz, dw, &mut db, Some(&mut dx));
            axpy(grad_entry(grads, format!("{p}.nc{i}.b"), conv.bias.len()), &db, 1.0);
        }
        d_out = dx;
    }

    let deepest = plan.tape_from();
    if !plan.train_stem && plan.train_units.is_empty() {
        return;
    }

    // Tensor quantizer mask at the sub-network entry.
    let mut d_trunk = d_out;
    for c in 0..d_trunk.channels / 2 {
        for v in d_trunk.plane_mut(c) {
            *v *= qnorm;
        }
    }

    // Trunk units from k down to the shallowest trainable one.
    for ki in (deepest..plan.k).rev() {
        let u = &model.units[ki];
        let tape_u = &tape.units[ki - tape.unit_tape_from];
        let unit_no = ki + 1;
        let train_this = plan.train_units.contains(&unit_no);
        let need_dx = plan.train_stem || plan.train_units.iter().any(|&t| t <= ki);

        let mut dz2 = FeatureTensor::<f64>::zeros(tape_u.z2.channels, tape_u.z2.h, tape_u.z2.w);
        if train_this {
            let ds = grad_entry(grads, format!("unit{unit_no}.a2"), u.act2.slopes.len());
            prelu_backward(&u.act2, &tape_u.z2, &d_trunk, ds, &mut dz2);
        } else {
            let mut sink = vec![0.0; u.act2.slopes.len()];
            prelu_backward(&u.act2, &tape_u.z2, &d_trunk, &mut sink, &mut dz2);
        }

        let mut da1 = FeatureTensor::<f64>::zeros(tape_u.a1.channels, tape_u.a1.h, tape_u.a1.w);
        if train_this {
            let dw = grad_entry(grads, format!("unit{unit_no}.c2.w"), u.conv2.weight.len());
            let mut db = vec![0.0; u.conv2.bias.len()];
            conv_backward(&u.conv2, &tape_u.a1, &dz2, dw, &mut db, Some(&mut da1));
            axpy(grad_entry(grads, format!("unit{unit_no}.c2.b"), u.conv2.bias.len()), &db, 1.0);
        } else {
            let mut dw = vec![0.0; u.conv2.weight.len()];
            let mut db = vec![0.0; u.conv2.bias.len()];
            conv_backward(&u.conv2, &tape_u.a1, &dz2, &mut dw, &mut db, Some(&mut da1));
        }

        let mut dz1 = FeatureTensor::<f64>::zeros(tape_u.z1.channels, tape_u.z1.h, tape_u.z1.w);
        if train_this {
            let ds = grad_entry(grads, format!("unit{unit_no}.a1"), u.act1.slopes.len());
            prelu_backward(&u.act1, &tape_u.z1, &da1, ds, &mut dz1);
        } else {
            let mut sink = vec![0.0; u.act1.slopes.len()];
            prelu_backward(&u.act1, &tape_u.z1, &da1, &mut sink, &mut dz1);
        }

        if train_this || need_dx {
            let mut dx = if need_dx {
                Some(FeatureTensor::<f64>::zeros(tape_u.x.channels, tape_u.x.h, tape_u.x.w))
            } else {
                None
            };
            if train_this {
                let dw = grad_entry(grads, format!("unit{unit_no}.c1.w"), u.conv1.weight.len());
                let mut db = vec![0.0; u.conv1.bias.len()];
                conv_backward(&u.conv1, &tape_u.x, &dz1, dw, &mut db, dx.as_mut());
                axpy(grad_entry(grads, format!("unit{unit_no}.c1.b"), u.conv1.bias.len()), &db, 1.0);
            } else {
                let mut dw = vec![0.0; u.conv1.weight.len()];
                let mut db = vec![0.0; u.conv1.bias.len()];
                conv_backward(&u.conv1, &tape_u.x, &dz1, &mut dw, &mut db, dx.as_mut());
            }
            if let Some(mut dx) = dx {
                // Identity skip: the unit input also feeds the output
                // directly.
                axpy(dx.as_mut_slice(), d_trunk.as_slice(), 1.0);
                d_trunk = dx;
            } else {
                break;
            }
        } else {
            break;
        }
    }

    if plan.train_stem {
        let mut dz = FeatureTensor::<f64>::zeros(tape.stem_z.channels, tape.stem_z.h, tape.stem_z.w);
        {
            let ds = grad_entry(grads, "stem.a".to_string(), model.stem_act.slopes.len());
            prelu_backward(&model.stem_act, &tape.stem_z, &d_trunk, ds, &mut dz);
        }
        let dw = grad_entry(grads, "stem.w".to_string(), model.stem.weight.len());
        let mut db = vec![0.0; model.stem.bias.len()];
        conv_backward(&model.stem, &tape.x0, &dz, dw, &mut db, None);
        axpy(grad_entry(grads, "stem.b".to_string(), model.stem.bias.len()), &db, 1.0);
    }
}

/// dL/dlogits for one sample: weighted cross entropy plus the predicted
/// cost penalty, both differentiated through the softmax.
fn logit_gradient(
    probs: &[f64],
    label: usize,
    w_over_wsum: f64,
    ratios: &[f64],
    beta_over_n: f64,
    rd_from_labels: bool,
) -> Vec<f64> {
    let mut d: Vec<f64> = probs.iter().map(|&p| w_over_wsum * p).collect();
    d[label] -= w_over_wsum;
    if !rd_from_labels {
        let expect: f64 = probs.iter().zip(ratios).map(|(p, r)| p * r).sum();
        for (i, v) in d.iter_mut().enumerate() {
            *v += beta_over_n * probs[i] * (ratios[i] - expect);
        }
    }
    d
}

struct BatchResult {
    ce: f64,
    rd: f64,
    grads: GradMap,
}

/// Forward + backward over one batch; gradients are folded in sample order.
#[allow(clippy::too_many_arguments)]
fn batch_step(
    model: &ModelParams<f64>,
    subnet: &SubNetwork<f64>,
    plan: &PhasePlan,
    samples: &[&TrainSample],
    proportions: &[f64],
    cfg: &TrainConfig,
    mode_index: &HashMap<SplitMode, usize>,
    par: Parallelism,
) -> Result<BatchResult> {
    let modes = subnet.modes.to_vec();
    let labels: Vec<usize> = samples
        .iter()
        .map(|s| {
            mode_index.get(&s.mode).copied().ok_or_else(|| {
                Error::format(format!("label {:?} is not a mode of shape {}", s.mode, plan.shape))
            })
        })
        .collect::<Result<_>>()?;
    let weights = mode_weights(proportions, &labels, cfg.alpha);
    let wsum: f64 = weights.iter().sum();
    let n = samples.len() as f64;
    let beta_over_n = cfg.beta / n;
    let tape_from = plan.tape_from();

    let per_sample: Vec<(f64, f64, GradMap)> = map_range(par, samples.len(), |i| {
        let s = samples[i];
        let tape = forward_tape(model, subnet, s, plan.k, tape_from);
        let probs = tape.subnet.probs.clone();
        let ratios = cost_ratios(&s.costs, &modes);
        let dlogits = logit_gradient(
            &probs,
            labels[i],
            weights[i] / wsum,
            &ratios,
            beta_over_n,
            cfg.rd_from_labels,
        );
        let mut grads = GradMap::new();
        backward_sample(model, subnet, plan, &tape, &dlogits, normalize_qp(s.qp), &mut grads);
        // Keep NaN flowing through so divergence is detected, not clamped.
        let p = probs[labels[i]];
        let ce_term = -weights[i] * if p.is_nan() { p } else { p.max(LOG_FLOOR) }.ln();
        let rd_term = if cfg.rd_from_labels {
            ratios[labels[i]]
        } else {
            probs.iter().zip(&ratios).map(|(p, r)| p * r).sum()
        };
        (ce_term, rd_term, grads)
    });

    let mut total = GradMap::new();
    let mut ce = 0.0;
    let mut rd = 0.0;
    for (ce_term, rd_term, grads) in per_sample {
        ce += ce_term;
        rd += rd_term;
        for (name, g) in grads {
            match total.get_mut(&name) {
                Some(acc) => axpy(acc, &g, 1.0),
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    Ok(BatchResult {
        ce: ce / wsum,
        rd: rd / n,
        grads: total,
    })
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

struct Adam {
    b1: f64,
    b2: f64,
    eps: f64,
    states: HashMap<String, AdamState>,
}

impl Adam {
    fn new() -> Adam {
        Adam {
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            states: HashMap::new(),
        }
    }

    fn step(&mut self, name: &str, param: &mut [f64], grad: &[f64], lr: f64) {
        let st = self.states.entry(name.to_string()).or_insert_with(|| AdamState {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
            t: 0,
        });
        st.t += 1;
        let bc1 = 1.0 - self.b1.powi(st.t as i32);
        let bc2 = 1.0 - self.b2.powi(st.t as i32);
        for i in 0..param.len() {
            st.m[i] = self.b1 * st.m[i] + (1.0 - self.b1) * grad[i];
            st.v[i] = self.b2 * st.v[i] + (1.0 - self.b2) * grad[i] * grad[i];
            let mhat = st.m[i] / bc1;
            let vhat = st.v[i] / bc2;
            param[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Loss terms of one batch: weighted cross-entropy and the cost penalty.
/// The combined objective is `ce + beta * rd`.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub ce: f64,
    pub rd: f64,
}

/// Evaluates one same-shape batch with every component trainable and
/// returns the loss terms plus analytic parameter gradients keyed by the
/// tensor names of [`ModelParams::visit_tensors`]. Class proportions are
/// estimated from the batch itself.
pub fn loss_and_gradients(
    model: &ModelParams<f64>,
    samples: &[&TrainSample],
    cfg: &TrainConfig,
) -> Result<(LossParts, HashMap<String, Vec<f64>>)> {
    let shape = match samples {
        [] => return Err(Error::config("empty batch")),
        [first, rest @ ..] => {
            let s = first.shape();
            if rest.iter().any(|r| r.shape() != s) {
                return Err(Error::config("batch mixes shapes"));
            }
            s
        }
    };
    let subnet = model
        .subnets
        .get(&shape)
        .ok_or_else(|| Error::model(format!("model has no sub-network for {shape}")))?
        .clone();
    let k = unit_index(shape.min_side())?;
    let plan = PhasePlan {
        shape,
        k,
        train_units: (1..=k).collect(),
        train_stem: true,
    };
    let modes = subnet.modes.to_vec();
    let mode_index: HashMap<SplitMode, usize> =
        modes.iter().enumerate().map(|(i, m)| (*m, i)).collect();
    let labels: Vec<usize> = samples
        .iter()
        .map(|s| {
            mode_index.get(&s.mode).copied().ok_or_else(|| {
                Error::format(format!("label {:?} is not a mode of shape {shape}", s.mode))
            })
        })
        .collect::<Result<_>>()?;
    let proportions = estimate_proportions(&labels, modes.len());
    let result = batch_step(
        model,
        &subnet,
        &plan,
        samples,
        &proportions,
        cfg,
        &mode_index,
        cfg.parallelism,
    )?;
    Ok((LossParts { ce: result.ce, rd: result.rd }, result.grads))
}

/// Trains the model in place over the per-shape curriculum and returns the
/// loss trace. Shapes without samples are skipped; their trunk units stay
/// for the next shape that actually runs.
pub fn train(
    model: &mut ModelParams<f64>,
    data: &BTreeMap<CuShape, Vec<TrainSample>>,
    cfg: &TrainConfig,
) -> Result<Vec<TraceRow>> {
    for shape in data.keys() {
        if !model.subnets.contains_key(shape) {
            return Err(Error::model(format!("dataset has shape {shape} but the model does not")));
        }
    }
    // Budget only the shapes that have samples, so a partial dataset still
    // spends the whole iteration budget.
    let order: Vec<CuShape> = curriculum(&model.subnets.keys().copied().collect::<Vec<_>>())
        .into_iter()
        .filter(|s| data.get(s).is_some_and(|v| !v.is_empty()))
        .collect();
    let iters = schedule_iterations(cfg.iterations_total, &order);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new();
    let mut trace = Vec::new();
    let mut trained_units: BTreeSet<usize> = BTreeSet::new();
    let mut stem_done = false;
    let mut global_iter = 0usize;

    for (shape, phase_iters) in order.iter().zip(&iters) {
        let samples = match data.get(shape) {
            Some(s) if !s.is_empty() => s,
            _ => continue,
        };
        if *phase_iters == 0 {
            continue;
        }
        let k = unit_index(shape.min_side())?;
        let plan = PhasePlan {
            shape: *shape,
            k,
            train_units: (1..=k).filter(|u| !trained_units.contains(u)).collect(),
            train_stem: !stem_done,
        };
        let subnet = model.subnets.get(shape).unwrap().clone();
        let modes = subnet.modes.to_vec();
        let mode_index: HashMap<SplitMode, usize> =
            modes.iter().enumerate().map(|(i, m)| (*m, i)).collect();
        let labels: Vec<usize> = samples
            .iter()
            .map(|s| {
                mode_index.get(&s.mode).copied().ok_or_else(|| {
                    Error::format(format!("label {:?} is not a mode of shape {shape}", s.mode))
                })
            })
            .collect::<Result<_>>()?;
        let proportions = estimate_proportions(&labels, modes.len());

        for i in 0..*phase_iters {
            let lr = learning_rate(cfg, global_iter);
            let batch: Vec<&TrainSample> = (0..cfg.batch_size)
                .map(|_| &samples[rng.gen_range(0..samples.len())])
                .collect();
            // The sub-network snapshot must track the live parameters.
            let subnet = model.subnets.get(shape).unwrap().clone();
            let result = batch_step(
                model,
                &subnet,
                &plan,
                &batch,
                &proportions,
                cfg,
                &mode_index,
                cfg.parallelism,
            )?;
            let total_loss = result.ce + cfg.beta * result.rd;
            if !total_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss became {total_loss} at iteration {global_iter} (shape {shape})"
                )));
            }
            model.visit_tensors_mut(&mut |name, t| {
                if let Some(g) = result.grads.get(name) {
                    adam.step(name, t, g, lr);
                }
            });
            if global_iter % cfg.log_every.max(1) == 0 || i + 1 == *phase_iters {
                trace.push(TraceRow {
                    iteration: global_iter,
                    shape: *shape,
                    lr,
                    ce: result.ce,
                    rd: result.rd,
                    total: total_loss,
                });
            }
            global_iter += 1;
        }

        trained_units.extend(plan.train_units.iter().copied());
        stem_done = true;
    }
    Ok(trace)
}
