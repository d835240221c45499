//! Staged split predictor. One trunk of shared residual units processes a
//! CTU progressively: each unit halves the minimum block side it is
//! responsible for, so a CU of minimum side `s` has passed through units
//! `1..=log2(256/s)` by the time its split decision is made. Per block
//! shape, a small reduction sub-network turns the trunk features into a
//! probability over that shape's possible split modes.
//!
//! The quantizer enters the network twice, both times by scaling the first
//! half of the feature channels with `qp / 51 + 0.5`.

pub mod ops;
pub mod staged;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::codec::Plane;
use crate::qtmt::{predictable_shapes, size_mode_set, CuShape, ModeSet, PartitionConfig, SplitMode};
use crate::{Error, Result};

pub use ops::{half_mask_tensor, half_mask_vec, softmax, Conv2d, Fc, FeatureTensor, PRelu, Scalar};
pub use staged::{run_ctu, threshold_filter, CtuPrediction, ThresholdCase, ThresholdSet};

/// Trunk width: every feature map in the network has this many channels.
pub const FEATURE_CHANNELS: usize = 16;
/// Width of the hidden fully connected layer in each sub-network.
pub const FC_HIDDEN: usize = 64;
/// Number of shared residual units in the trunk.
pub const UNIT_COUNT: usize = 6;

/// Trunk depth needed for a CU whose shorter side is `min_side`:
/// `log2(256 / min_side)`, so 128 -> 1, 64 -> 2, ..., 4 -> 6.
pub fn unit_index(min_side: u32) -> Result<usize> {
    if !min_side.is_power_of_two() || !(4..=128).contains(&min_side) {
        return Err(Error::model(format!("no unit index for block side {min_side}")));
    }
    Ok((256 / min_side).trailing_zeros() as usize)
}

/// Quantizer signal fed to the masked channels: qp 0..=51 maps to
/// [0.5, 1.5].
pub fn normalize_qp(qp: u8) -> f64 {
    f64::from(qp) / 51.0 + 0.5
}

/// Per-axis reduction factors of the sub-network conv ladder. Each stage
/// uses kernel == stride, so the factors of an axis multiply to the axis
/// length and the ladder always collapses it to 1.
pub fn ladder_factors(dim: u32) -> Result<&'static [usize]> {
    Ok(match dim {
        4 => &[4],
        8 => &[4, 2],
        16 => &[4, 2, 2],
        32 => &[4, 4, 2],
        64 => &[4, 4, 4],
        _ => return Err(Error::model(format!("no reduction ladder for axis {dim}"))),
    })
}

/// Kernel sizes (kh, kw) of the ladder stages for a canonical shape. The
/// wider axis has at least as many factors; the shorter axis pads with 1s
/// at the end.
pub fn ladder_stages(shape: CuShape) -> Result<Vec<(usize, usize)>> {
    let wf = ladder_factors(shape.w)?;
    let hf = ladder_factors(shape.h)?;
    debug_assert!(wf.len() >= hf.len());
    Ok((0..wf.len())
        .map(|i| (hf.get(i).copied().unwrap_or(1), wf[i]))
        .collect())
}

fn xavier_conv<R: Rng>(conv: &mut Conv2d<f64>, rng: &mut R) {
    let fan_in = (conv.in_c * conv.kh * conv.kw) as f64;
    let fan_out = (conv.out_c * conv.kh * conv.kw) as f64;
    let limit = (6.0 / (fan_in + fan_out)).sqrt();
    for w in conv.weight.iter_mut() {
        *w = rng.gen_range(-limit..limit);
    }
}

fn xavier_fc<R: Rng>(fc: &mut Fc<f64>, rng: &mut R) {
    let limit = (6.0 / (fc.in_dim + fc.out_dim) as f64).sqrt();
    for w in fc.weight.iter_mut() {
        *w = rng.gen_range(-limit..limit);
    }
}

const PRELU_INIT: f64 = 0.25;

/// Two 3x3 convolutions with per-channel PReLU and an identity skip:
/// y = x + act2(conv2(act1(conv1(x)))).
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualUnit<S> {
    pub conv1: Conv2d<S>,
    pub act1: PRelu<S>,
    pub conv2: Conv2d<S>,
    pub act2: PRelu<S>,
}

impl<S: Scalar> ResidualUnit<S> {
    pub fn zeros() -> ResidualUnit<S> {
        let c = FEATURE_CHANNELS;
        ResidualUnit {
            conv1: Conv2d::zeros(c, c, 3, 3, 1, 1, 1),
            act1: PRelu::new(c, PRELU_INIT),
            conv2: Conv2d::zeros(c, c, 3, 3, 1, 1, 1),
            act2: PRelu::new(c, PRELU_INIT),
        }
    }

    pub fn forward(&self, x: &FeatureTensor<S>) -> FeatureTensor<S> {
        let mut y = self.conv1.forward(x);
        self.act1.forward(&mut y);
        let mut y = self.conv2.forward(&y);
        self.act2.forward(&mut y);
        for (a, &b) in y.as_mut_slice().iter_mut().zip(x.as_slice()) {
            *a += b;
        }
        y
    }

    pub fn convert<T: Scalar>(&self) -> ResidualUnit<T> {
        ResidualUnit {
            conv1: self.conv1.convert(),
            act1: self.act1.convert(),
            conv2: self.conv2.convert(),
            act2: self.act2.convert(),
        }
    }
}

/// Shape-specific head: reduction ladder to 1x1, linear projection, then a
/// two-layer classifier over the shape's possible split modes.
#[derive(Clone, Debug, PartialEq)]
pub struct SubNetwork<S> {
    pub shape: CuShape,
    pub modes: ModeSet,
    pub ladder: Vec<(Conv2d<S>, PRelu<S>)>,
    pub proj: Conv2d<S>,
    pub fc1: Fc<S>,
    pub fc_act: PRelu<S>,
    pub fc2: Fc<S>,
}

impl<S: Scalar> SubNetwork<S> {
    pub fn zeros(shape: CuShape, modes: ModeSet) -> Result<SubNetwork<S>> {
        if modes.len() < 2 {
            return Err(Error::model(format!(
                "sub-network for {shape} needs at least two modes, got {modes}"
            )));
        }
        let c = FEATURE_CHANNELS;
        let ladder = ladder_stages(shape)?
            .into_iter()
            .map(|(kh, kw)| (Conv2d::zeros(c, c, kh, kw, kh, kw, 0), PRelu::new(c, PRELU_INIT)))
            .collect();
        Ok(SubNetwork {
            shape,
            modes,
            ladder,
            proj: Conv2d::zeros(c, c, 1, 1, 1, 1, 0),
            fc1: Fc::zeros(c, FC_HIDDEN),
            fc_act: PRelu::new(FC_HIDDEN, PRELU_INIT),
            fc2: Fc::zeros(FC_HIDDEN, modes.len()),
        })
    }

    /// Mode probabilities (ascending mode code, canonical orientation) from
    /// trunk features of this shape.
    pub fn forward(&self, feat: &FeatureTensor<S>, qnorm: f64) -> Vec<S> {
        assert_eq!(
            (feat.channels, feat.h as u32, feat.w as u32),
            (FEATURE_CHANNELS, self.shape.h, self.shape.w),
            "feature dims do not match sub-network shape"
        );
        let mut t = feat.clone();
        half_mask_tensor(&mut t, qnorm);
        for (conv, act) in &self.ladder {
            t = conv.forward(&t);
            act.forward(&mut t);
        }
        let t = self.proj.forward(&t);
        debug_assert_eq!((t.h, t.w), (1, 1), "ladder must collapse to 1x1");
        let mut v: Vec<S> = (0..t.channels).map(|c| t.at(c, 0, 0)).collect();
        half_mask_vec(&mut v, qnorm);
        let mut v = self.fc1.forward(&v);
        self.fc_act.forward_vec(&mut v);
        let mut v = self.fc2.forward(&v);
        softmax(&mut v);
        v
    }

    pub fn convert<T: Scalar>(&self) -> SubNetwork<T> {
        SubNetwork {
            shape: self.shape,
            modes: self.modes,
            ladder: self.ladder.iter().map(|(c, a)| (c.convert(), a.convert())).collect(),
            proj: self.proj.convert(),
            fc1: self.fc1.convert(),
            fc_act: self.fc_act.convert(),
            fc2: self.fc2.convert(),
        }
    }
}

/// Complete predictor: pixel stem, shared residual trunk, one sub-network
/// per predictable block shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    pub stem: Conv2d<S>,
    pub stem_act: PRelu<S>,
    pub units: Vec<ResidualUnit<S>>,
    pub subnets: BTreeMap<CuShape, SubNetwork<S>>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn zeros(shapes: &[(CuShape, ModeSet)]) -> Result<ModelParams<S>> {
        let mut subnets = BTreeMap::new();
        for &(shape, modes) in shapes {
            if subnets.insert(shape, SubNetwork::zeros(shape, modes)?).is_some() {
                return Err(Error::model(format!("duplicate sub-network shape {shape}")));
            }
        }
        Ok(ModelParams {
            stem: Conv2d::zeros(1, FEATURE_CHANNELS, 3, 3, 1, 1, 1),
            stem_act: PRelu::new(FEATURE_CHANNELS, PRELU_INIT),
            units: (0..UNIT_COUNT).map(|_| ResidualUnit::zeros()).collect(),
            subnets,
        })
    }

    /// Applies stem conv and activation to a single-channel pixel tensor.
    pub fn stem_features(&self, x: &FeatureTensor<S>) -> FeatureTensor<S> {
        assert_eq!(x.channels, 1, "stem expects one input channel");
        let mut y = self.stem.forward(x);
        self.stem_act.forward(&mut y);
        y
    }

    /// Runs trunk units `from_k+1 ..= to_k` in order. `from_k` is how many
    /// units the tensor has already been through.
    pub fn apply_units(&self, t: FeatureTensor<S>, from_k: usize, to_k: usize) -> FeatureTensor<S> {
        debug_assert!(from_k <= to_k && to_k <= UNIT_COUNT);
        let mut t = t;
        for k in from_k..to_k {
            t = self.units[k].forward(&t);
        }
        t
    }

    /// Stand-alone feature path used in training: stem plus the full unit
    /// prefix for the block's size, on the block's own pixels. `x` must be
    /// in canonical orientation (w >= h).
    pub fn features_standalone(&self, x: &FeatureTensor<S>) -> Result<FeatureTensor<S>> {
        if x.h > x.w {
            return Err(Error::model("stand-alone features expect canonical orientation"));
        }
        let k = unit_index(x.h as u32)?;
        Ok(self.apply_units(self.stem_features(x), 0, k))
    }

    /// Split-mode distribution for an isolated pixel block, any orientation.
    /// Returns (modes ascending by code, probabilities) in the block's own
    /// orientation.
    pub fn predict_standalone(&self, px: &Plane, qp: u8) -> Result<(Vec<SplitMode>, Vec<f64>)> {
        let mut t = FeatureTensor::<S>::from_pixels(px, 0, 0, px.w, px.h);
        let transposed = px.h > px.w;
        if transposed {
            t = t.transpose();
        }
        let shape = CuShape::new(px.w as u32, px.h as u32);
        let subnet = self
            .subnets
            .get(&shape)
            .ok_or_else(|| Error::model(format!("no sub-network for shape {shape}")))?;
        let feat = self.features_standalone(&t)?;
        let probs = subnet.forward(&feat, normalize_qp(qp));
        let canon: Vec<SplitMode> = subnet.modes.to_vec();
        let probs: Vec<f64> = probs.iter().map(|p| p.to_f64()).collect();
        Ok(orient_prediction(&canon, &probs, transposed))
    }

    pub fn convert<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            stem: self.stem.convert(),
            stem_act: self.stem_act.convert(),
            units: self.units.iter().map(|u| u.convert()).collect(),
            subnets: self
                .subnets
                .iter()
                .map(|(s, n)| (*s, n.convert()))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_tensors(&mut |_, t| n += t.len());
        n
    }

    /// Visits every parameter tensor in serialization order with a stable
    /// name. Names are prefixed "stem", "unit{k}", "sub{w}x{h}" so training
    /// can freeze or select components by prefix.
    pub fn visit_tensors(&self, f: &mut impl FnMut(&str, &[S])) {
        f("stem.w", &self.stem.weight);
        f("stem.b", &self.stem.bias);
        f("stem.a", &self.stem_act.slopes);
        for (i, u) in self.units.iter().enumerate() {
            let k = i + 1;
            f(&format!("unit{k}.c1.w"), &u.conv1.weight);
            f(&format!("unit{k}.c1.b"), &u.conv1.bias);
            f(&format!("unit{k}.a1"), &u.act1.slopes);
            f(&format!("unit{k}.c2.w"), &u.conv2.weight);
            f(&format!("unit{k}.c2.b"), &u.conv2.bias);
            f(&format!("unit{k}.a2"), &u.act2.slopes);
        }
        for (shape, sub) in &self.subnets {
            let p = format!("sub{}x{}", shape.w, shape.h);
            for (i, (conv, act)) in sub.ladder.iter().enumerate() {
                f(&format!("{p}.nc{i}.w"), &conv.weight);
                f(&format!("{p}.nc{i}.b"), &conv.bias);
                f(&format!("{p}.nc{i}.a"), &act.slopes);
            }
            f(&format!("{p}.proj.w"), &sub.proj.weight);
            f(&format!("{p}.proj.b"), &sub.proj.bias);
            f(&format!("{p}.fc1.w"), &sub.fc1.weight);
            f(&format!("{p}.fc1.b"), &sub.fc1.bias);
            f(&format!("{p}.fc1.a"), &sub.fc_act.slopes);
            f(&format!("{p}.fc2.w"), &sub.fc2.weight);
            f(&format!("{p}.fc2.b"), &sub.fc2.bias);
        }
    }

    /// Mutable twin of [`visit_tensors`], same order and names.
    pub fn visit_tensors_mut(&mut self, f: &mut impl FnMut(&str, &mut Vec<S>)) {
        f("stem.w", &mut self.stem.weight);
        f("stem.b", &mut self.stem.bias);
        f("stem.a", &mut self.stem_act.slopes);
        for (i, u) in self.units.iter_mut().enumerate() {
            let k = i + 1;
            f(&format!("unit{k}.c1.w"), &mut u.conv1.weight);
            f(&format!("unit{k}.c1.b"), &mut u.conv1.bias);
            f(&format!("unit{k}.a1"), &mut u.act1.slopes);
            f(&format!("unit{k}.c2.w"), &mut u.conv2.weight);
            f(&format!("unit{k}.c2.b"), &mut u.conv2.bias);
            f(&format!("unit{k}.a2"), &mut u.act2.slopes);
        }
        for (shape, sub) in self.subnets.iter_mut() {
            let p = format!("sub{}x{}", shape.w, shape.h);
            for (i, (conv, act)) in sub.ladder.iter_mut().enumerate() {
                f(&format!("{p}.nc{i}.w"), &mut conv.weight);
                f(&format!("{p}.nc{i}.b"), &mut conv.bias);
                f(&format!("{p}.nc{i}.a"), &mut act.slopes);
            }
            f(&format!("{p}.proj.w"), &mut sub.proj.weight);
            f(&format!("{p}.proj.b"), &mut sub.proj.bias);
            f(&format!("{p}.fc1.w"), &mut sub.fc1.weight);
            f(&format!("{p}.fc1.b"), &mut sub.fc1.bias);
            f(&format!("{p}.fc1.a"), &mut sub.fc_act.slopes);
            f(&format!("{p}.fc2.w"), &mut sub.fc2.weight);
            f(&format!("{p}.fc2.b"), &mut sub.fc2.bias);
        }
    }
}

/// Maps a canonical-orientation prediction back to the block's own
/// orientation, re-sorting by mode code.
pub fn orient_prediction(
    canon_modes: &[SplitMode],
    probs: &[f64],
    transposed: bool,
) -> (Vec<SplitMode>, Vec<f64>) {
    if !transposed {
        return (canon_modes.to_vec(), probs.to_vec());
    }
    let mut pairs: Vec<(SplitMode, f64)> = canon_modes
        .iter()
        .zip(probs)
        .map(|(m, &p)| (m.transpose(), p))
        .collect();
    pairs.sort_by_key(|(m, _)| m.code());
    pairs.into_iter().unzip()
}

impl ModelParams<f64> {
    /// Fresh model for a partition config: Xavier-uniform weights, zero
    /// biases, PReLU slopes 0.25. One sub-network per predictable shape.
    pub fn init<R: Rng>(cfg: &PartitionConfig, rng: &mut R) -> Result<ModelParams<f64>> {
        let mut shapes: Vec<(CuShape, ModeSet)> = predictable_shapes(cfg)?
            .into_iter()
            .map(|s| (s, size_mode_set(s.w, s.h, cfg)))
            .collect();
        shapes.sort_by_key(|(s, _)| *s);
        let mut model = ModelParams::<f64>::zeros(&shapes)?;
        xavier_conv(&mut model.stem, rng);
        for u in model.units.iter_mut() {
            xavier_conv(&mut u.conv1, rng);
            xavier_conv(&mut u.conv2, rng);
        }
        let keys: Vec<CuShape> = model.subnets.keys().copied().collect();
        for shape in keys {
            let sub = model.subnets.get_mut(&shape).unwrap();
            for (conv, _) in sub.ladder.iter_mut() {
                xavier_conv(conv, rng);
            }
            xavier_conv(&mut sub.proj, rng);
            xavier_fc(&mut sub.fc1, rng);
            xavier_fc(&mut sub.fc2, rng);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelParams<f64>> {
        let bytes = std::fs::read(path)?;
        ModelParams::read_from(&mut bytes.as_slice())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        write_u32(w, MODEL_VERSION)?;
        write_u32(w, self.subnets.len() as u32)?;
        for (shape, sub) in &self.subnets {
            write_u32(w, shape.w)?;
            write_u32(w, shape.h)?;
            w.write_all(&[sub.modes.bits()])?;
        }
        let mut tensors: Vec<(String, Vec<f64>)> = Vec::new();
        self.visit_tensors(&mut |name, t| tensors.push((name.to_string(), t.to_vec())));
        write_u32(w, tensors.len() as u32)?;
        for (name, t) in tensors {
            write_u32(w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            write_u32(w, t.len() as u32)?;
            for v in t {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<ModelParams<f64>> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::format("not a model file (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != MODEL_VERSION {
            return Err(Error::format(format!("unsupported model version {version}")));
        }
        let n_shapes = read_u32(r)? as usize;
        if n_shapes > 256 {
            return Err(Error::format(format!("implausible shape count {n_shapes}")));
        }
        let mut shapes = Vec::with_capacity(n_shapes);
        for _ in 0..n_shapes {
            let w = read_u32(r)?;
            let h = read_u32(r)?;
            let mut bits = [0u8; 1];
            r.read_exact(&mut bits)?;
            if w < h {
                return Err(Error::format(format!("shape {w}x{h} not canonical")));
            }
            shapes.push((CuShape { w, h }, ModeSet::from_bits(bits[0])?));
        }
        let mut model = ModelParams::<f64>::zeros(&shapes)?;
        let n_tensors = read_u32(r)? as usize;
        let mut stored = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name_len = read_u32(r)? as usize;
            if name_len > 256 {
                return Err(Error::format(format!("implausible tensor name length {name_len}")));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::format("tensor name not utf-8"))?;
            let len = read_u32(r)? as usize;
            let mut t = Vec::with_capacity(len);
            let mut b = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut b)?;
                t.push(f64::from_le_bytes(b));
            }
            stored.push((name, t));
        }
        let mut idx = 0usize;
        let mut mismatch: Option<String> = None;
        model.visit_tensors_mut(&mut |name, t| {
            if mismatch.is_some() {
                return;
            }
            match stored.get(idx) {
                Some((sname, sdata)) if sname == name && sdata.len() == t.len() => {
                    t.copy_from_slice(sdata);
                }
                Some((sname, sdata)) => {
                    mismatch = Some(format!(
                        "tensor {idx}: expected {name} ({}), file has {sname} ({})",
                        t.len(),
                        sdata.len()
                    ));
                }
                None => mismatch = Some(format!("file is missing tensor {name}")),
            }
            idx += 1;
        });
        if let Some(m) = mismatch {
            return Err(Error::format(m));
        }
        if idx != stored.len() {
            return Err(Error::format(format!(
                "file has {} tensors, model needs {idx}",
                stored.len()
            )));
        }
        Ok(model)
    }
}

const MODEL_MAGIC: &[u8; 8] = b"CUNETv01";
const MODEL_VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
