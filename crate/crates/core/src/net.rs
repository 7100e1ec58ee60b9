//! Direction-conditioned dynamic convolution encoder feeding a U-Net that
//! regresses the six tensor elements.
//!
//! Each diffusion-weighted image is summarized by row-band pooling, joined
//! with its gradient direction, and mapped by a small generator network to
//! the weights of a three-layer 3-channel convolution. That convolution is
//! applied to the image itself; the resulting feature maps from all
//! directions, padded to a fixed budget by cyclic repetition, are stacked
//! with the b=0 image and passed through the U-Net.

use rand::seq::SliceRandom;
use rand::RngExt;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, Array4, Graph, NodeId, ParamStore, Real};
use crate::phantom::{synthesize_dwi, DwiVolume, TensorField};
use crate::rng;
use crate::scheme::{sample_subset, sample_subset_with, GradientScheme, MIN_DIRECTIONS};
use crate::tensor::{DiffusionTensor6, UnitDirection};

/// Values produced by the kernel generator per direction.
pub const DYN_PARAMS: usize = 198;
/// `(weights, biases)` of the three generated layers.
pub const DYN_LAYERS: [(usize, usize); 3] = [(27, 3), (81, 3), (81, 3)];
pub const FEATURE_CHANNELS: usize = 3;
/// Network outputs are tensor elements in units of 10⁻³ mm²/s.
pub const TARGET_SCALE: f64 = 1000.0;
pub const INPUT_CLIP: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub n_max: usize,
    pub gap_len: usize,
    pub depth: usize,
    pub width: usize,
    pub psi_channels: usize,
    pub psi_hidden: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            n_max: 20,
            gap_len: 10,
            depth: 3,
            width: 16,
            psi_channels: 4,
            psi_hidden: 64,
            lr: 1e-3,
            lr_decay: 0.1,
            decay_every: 80,
            epochs: 100,
            batch: 16,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadConfig(m.to_string()));
        if self.n_max < MIN_DIRECTIONS {
            return bad("n_max must be at least 6");
        }
        if self.gap_len == 0 {
            return bad("gap_len must be at least 1");
        }
        if self.width < 4 {
            return bad("width must be at least 4");
        }
        if self.depth == 0 || self.depth > 8 {
            return bad("depth must be in 1..=8");
        }
        if self.psi_channels == 0 || self.psi_hidden == 0 {
            return bad("generator widths must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if self.decay_every == 0 {
            return bad("decay_every must be at least 1");
        }
        Ok(())
    }

    /// Channels of the U-Net input: b=0 plus three per direction slot.
    pub fn input_channels(&self) -> usize {
        FEATURE_CHANNELS * self.n_max + 1
    }

    /// Step-decayed learning rate for 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Generated kernels for one direction, laid out as
/// `[w1 (3,1,3,3), b1 (3), w2 (3,3,3,3), b2 (3), w3 (3,3,3,3), b3 (3)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynKernelParams<T> {
    values: Vec<T>,
}

impl<T: Real> DynKernelParams<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.len() != DYN_PARAMS {
            return Err(Error::ShapeMismatch(format!("{DYN_PARAMS} kernel values needed, got {}", values.len())));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Weights and biases of generated layer `i` (0..3).
    pub fn layer(&self, i: usize) -> (&[T], &[T]) {
        let start: usize = DYN_LAYERS[..i].iter().map(|(w, b)| w + b).sum();
        let (nw, nb) = DYN_LAYERS[i];
        (&self.values[start..start + nw], &self.values[start + nw..start + nw + nb])
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zero,
    Normal(f64),
    /// Generator output bias: a He-scaled random kernel set, zero biases.
    KernelPrior,
}

fn he(fan_in: usize) -> Init {
    Init::Normal((2.0 / fan_in as f64).sqrt())
}

fn conv_entries(out: &mut Vec<(String, [usize; 4], Init)>, name: &str, cout: usize, cin: usize) {
    out.push((format!("{name}.w"), [cout, cin, 3, 3], he(9 * cin)));
    out.push((format!("{name}.b"), [1, 1, 1, cout], Init::Zero));
}

/// Parameter names, shapes and initializers in store order. Names under
/// `psi.` belong to the kernel generator, `unet.` to the U-Net.
fn layout(cfg: &NetConfig) -> Vec<(String, [usize; 4], Init)> {
    let (c, hid, len) = (cfg.psi_channels, cfg.psi_hidden, cfg.gap_len + 3);
    let mut v = vec![
        ("psi.conv.w".to_string(), [c, 1, 1, 3], he(3)),
        ("psi.conv.b".to_string(), [1, 1, 1, c], Init::Zero),
        ("psi.fc1.w".to_string(), [1, 1, hid, c * len], he(c * len)),
        ("psi.fc1.b".to_string(), [1, 1, 1, hid], Init::Zero),
        ("psi.fc2.w".to_string(), [1, 1, DYN_PARAMS, hid], Init::Normal(0.1 / (hid as f64).sqrt())),
        ("psi.fc2.b".to_string(), [1, 1, 1, DYN_PARAMS], Init::KernelPrior),
    ];
    let ch = |l: usize| cfg.width << l;
    for l in 0..cfg.depth {
        let cin = if l == 0 { cfg.input_channels() } else { ch(l - 1) };
        conv_entries(&mut v, &format!("unet.enc{l}.c1"), ch(l), cin);
        conv_entries(&mut v, &format!("unet.enc{l}.c2"), ch(l), ch(l));
    }
    conv_entries(&mut v, "unet.mid.c1", ch(cfg.depth), ch(cfg.depth - 1));
    conv_entries(&mut v, "unet.mid.c2", ch(cfg.depth), ch(cfg.depth));
    for l in (0..cfg.depth).rev() {
        conv_entries(&mut v, &format!("unet.dec{l}.up"), ch(l), ch(l + 1));
        conv_entries(&mut v, &format!("unet.dec{l}.c1"), ch(l), 2 * ch(l));
        conv_entries(&mut v, &format!("unet.dec{l}.c2"), ch(l), ch(l));
    }
    conv_entries(&mut v, "unet.out", 6, ch(0));
    v
}

fn init_values(init: Init, len: usize, r: &mut rng::Rng) -> Vec<f64> {
    match init {
        Init::Zero => vec![0.0; len],
        Init::Normal(std) => {
            let d = Normal::new(0.0, std).expect("finite std");
            (0..len).map(|_| d.sample(r)).collect()
        }
        Init::KernelPrior => {
            let mut out = Vec::with_capacity(len);
            for (i, (nw, nb)) in DYN_LAYERS.iter().enumerate() {
                let cin = if i == 0 { 1 } else { FEATURE_CHANNELS };
                let d = Normal::new(0.0, (2.0 / (9 * cin) as f64).sqrt()).expect("finite std");
                out.extend((0..*nw).map(|_| d.sample(r)));
                out.extend(std::iter::repeat_n(0.0, *nb));
            }
            out
        }
    }
}

/// One slice prepared for the network: normalized mean b=0 image and one
/// normalized image per direction, each `(1, 1, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput<T> {
    pub b0: Array4<T>,
    pub dwi: Vec<Array4<T>>,
    pub directions: Vec<UnitDirection>,
}

impl<T: Real> NetInput<T> {
    /// Builds the input from a single-slice volume.
    pub fn from_volume(v: &DwiVolume) -> Result<Self> {
        if v.nz != 1 {
            return Err(Error::ShapeMismatch(format!("network input is one slice, got {}", v.nz)));
        }
        let planes = normalize_inputs(v)?;
        let shape = [1, 1, v.ny, v.nx];
        let to = |p: &[f64]| Array4::from_vec(shape, p.iter().map(|&x| T::from_f64(x)).collect());
        Ok(Self {
            b0: to(&planes.mean_b0())?,
            dwi: planes.dwi.iter().map(|p| to(p)).collect::<Result<_>>()?,
            directions: v.scheme.directions().to_vec(),
        })
    }
}

/// Intensity-normalized planes and the divisor that was applied.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedPlanes {
    pub b0: Vec<Vec<f64>>,
    pub dwi: Vec<Vec<f64>>,
    pub scale: f64,
}

impl NormalizedPlanes {
    pub fn mean_b0(&self) -> Vec<f64> {
        let n = self.b0.len() as f64;
        let len = self.b0.first().map_or(0, Vec::len);
        (0..len).map(|i| self.b0.iter().map(|p| p[i]).sum::<f64>() / n).collect()
    }
}

/// Divides every plane by the mean b=0 intensity over the mask and clips to
/// `[0, INPUT_CLIP]`.
pub fn normalize_inputs(v: &DwiVolume) -> Result<NormalizedPlanes> {
    let mean = v.mean_b0();
    let (mut sum, mut count) = (0.0, 0usize);
    for (m, s) in v.mask.iter().zip(&mean) {
        if *m {
            sum += s;
            count += 1;
        }
    }
    if count == 0 || !(sum > 0.0) {
        return Err(Error::ZeroB0Mean);
    }
    let scale = sum / count as f64;
    let norm = |p: &Vec<f64>| p.iter().map(|x| (x / scale).clamp(0.0, INPUT_CLIP)).collect();
    Ok(NormalizedPlanes { b0: v.b0.iter().map(norm).collect(), dwi: v.dwi.iter().map(norm).collect(), scale })
}

/// Stacks `b0` and the direction features, repeating the features
/// cyclically until `n_max` slots are filled.
pub fn assemble_input<T: Real>(features: &[Array4<T>], b0: &Array4<T>, n_max: usize) -> Result<Array4<T>> {
    let mut g = Graph::new();
    let b0 = g.input(b0.clone());
    let f: Vec<NodeId> = features.iter().map(|x| g.input(x.clone())).collect();
    let out = assemble_node(&mut g, b0, &f, n_max)?;
    Ok(g.value(out).clone())
}

fn assemble_node<T: Real>(g: &mut Graph<T>, b0: NodeId, features: &[NodeId], n_max: usize) -> Result<NodeId> {
    let d = features.len();
    if d < MIN_DIRECTIONS {
        return Err(Error::TooFewDirections { n: d, min: MIN_DIRECTIONS });
    }
    if d > n_max {
        return Err(Error::TooManyDirections { n: d, max: n_max });
    }
    let mut parts = Vec::with_capacity(n_max + 1);
    parts.push(b0);
    parts.extend((0..n_max).map(|slot| features[slot % d]));
    g.concat_channels(&parts)
}

/// Applies generated kernels to one image: conv → ReLU → conv → ReLU → conv.
pub fn dyn_conv_apply<T: Real>(dw: &Array4<T>, k: &DynKernelParams<T>) -> Result<Array4<T>> {
    let mut g = Graph::new();
    let x = g.input(dw.clone());
    let kn = g.input(Array4::vector(k.values().to_vec()));
    let out = dyn_conv_node(&mut g, x, kn)?;
    Ok(g.value(out).clone())
}

fn dyn_conv_node<T: Real>(g: &mut Graph<T>, dw: NodeId, k: NodeId) -> Result<NodeId> {
    let mut x = dw;
    let mut off = 0;
    for (i, (nw, nb)) in DYN_LAYERS.iter().enumerate() {
        let cin = if i == 0 { 1 } else { FEATURE_CHANNELS };
        let w = g.slice(k, off, *nw)?;
        let w = g.reshape(w, [FEATURE_CHANNELS, cin, 3, 3])?;
        let b = g.slice(k, off + nw, *nb)?;
        x = g.conv2d(x, w, b)?;
        if i + 1 < DYN_LAYERS.len() {
            x = g.relu(x)?;
        }
        off += nw + nb;
    }
    Ok(x)
}

/// The full model: kernel generator parameters and U-Net parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FlexNet<T> {
    cfg: NetConfig,
    params: ParamStore<T>,
}

impl<T: Real> FlexNet<T> {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(cfg.seed, 0x1417);
        let mut params = ParamStore::new();
        for (name, shape, init) in layout(&cfg) {
            let vals = init_values(init, shape.iter().product(), &mut r);
            params.add(name, Array4::from_vec(shape, vals.into_iter().map(T::from_f64).collect())?)?;
        }
        Ok(Self { cfg, params })
    }

    /// Wraps existing parameters, checking names and shapes against `cfg`.
    pub fn from_params(cfg: NetConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let expected = Self::manifest(&cfg);
        let got: Vec<(String, [usize; 4])> = params.iter().map(|(n, a)| (n.to_string(), a.shape())).collect();
        if got != expected {
            let first = expected.iter().zip(&got).find(|(a, b)| a != b);
            return Err(Error::ManifestShapeMismatch(match first {
                Some((e, g)) => format!("expected {} {:?}, found {} {:?}", e.0, e.1, g.0, g.1),
                None => format!("expected {} parameters, found {}", expected.len(), got.len()),
            }));
        }
        Ok(Self { cfg, params })
    }

    /// Parameter names and shapes implied by `cfg`, in store order.
    pub fn manifest(cfg: &NetConfig) -> Vec<(String, [usize; 4])> {
        layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> FlexNet<U> {
        FlexNet { cfg: self.cfg.clone(), params: self.params.cast() }
    }

    fn p(&self, g: &mut Graph<T>, name: &str) -> NodeId {
        let id = self.params.id(name).unwrap_or_else(|| panic!("parameter {name} missing"));
        g.param(&self.params, id)
    }

    fn conv(&self, g: &mut Graph<T>, x: NodeId, name: &str) -> Result<NodeId> {
        let w = self.p(g, &format!("{name}.w"));
        let b = self.p(g, &format!("{name}.b"));
        g.conv2d(x, w, b)
    }

    fn conv_relu(&self, g: &mut Graph<T>, x: NodeId, name: &str) -> Result<NodeId> {
        let y = self.conv(g, x, name)?;
        g.relu(y)
    }

    /// Generator output `(1, 1, 1, 198)` for image node `dw` and direction `dir`.
    pub fn psi_node(&self, g: &mut Graph<T>, dw: NodeId, dir: &UnitDirection) -> Result<NodeId> {
        let gap = g.band_gap(dw, self.cfg.gap_len)?;
        let v = g.input(Array4::vector(dir.to_array().iter().map(|&c| T::from_f64(c)).collect()));
        let cat = g.concat(&[gap, v], 3)?;
        let (w, b) = (self.p(g, "psi.conv.w"), self.p(g, "psi.conv.b"));
        let c = g.conv1d(cat, w, b)?;
        let c = g.relu(c)?;
        let flat = g.reshape(c, [1, 1, 1, self.cfg.psi_channels * (self.cfg.gap_len + 3)])?;
        let (w, b) = (self.p(g, "psi.fc1.w"), self.p(g, "psi.fc1.b"));
        let h = g.dense(flat, w, b)?;
        let h = g.relu(h)?;
        let (w, b) = (self.p(g, "psi.fc2.w"), self.p(g, "psi.fc2.b"));
        g.dense(h, w, b)
    }

    /// Kernel parameters generated for one image and direction.
    pub fn generate_dyn_params(&self, dw: &Array4<T>, dir: &UnitDirection) -> Result<DynKernelParams<T>> {
        let mut g = Graph::new();
        let x = g.input(dw.clone());
        let out = self.psi_node(&mut g, x, dir)?;
        DynKernelParams::new(g.value(out).data().to_vec())
    }

    /// U-Net over a stacked input; output has six channels.
    pub fn unet_node(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let [_, c, h, w] = g.shape(x);
        if c != self.cfg.input_channels() {
            return Err(Error::ShapeMismatch(format!("U-Net expects {} channels, got {c}", self.cfg.input_channels())));
        }
        let factor = 1 << self.cfg.depth;
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::OddSpatialDims { h, w, factor });
        }
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut x = x;
        for l in 0..self.cfg.depth {
            x = self.conv_relu(g, x, &format!("unet.enc{l}.c1"))?;
            x = self.conv_relu(g, x, &format!("unet.enc{l}.c2"))?;
            skips.push(x);
            x = g.maxpool2(x)?;
        }
        x = self.conv_relu(g, x, "unet.mid.c1")?;
        x = self.conv_relu(g, x, "unet.mid.c2")?;
        for l in (0..self.cfg.depth).rev() {
            x = g.upsample2(x)?;
            x = self.conv_relu(g, x, &format!("unet.dec{l}.up"))?;
            x = g.concat_channels(&[skips[l], x])?;
            x = self.conv_relu(g, x, &format!("unet.dec{l}.c1"))?;
            x = self.conv_relu(g, x, &format!("unet.dec{l}.c2"))?;
        }
        self.conv(g, x, "unet.out")
    }

    /// U-Net forward on a precomputed feature stack.
    pub fn forward(&self, stack: &Array4<T>) -> Result<Array4<T>> {
        let mut g = Graph::new();
        let x = g.input(stack.clone());
        let out = self.unet_node(&mut g, x)?;
        Ok(g.value(out).clone())
    }

    /// Feature stack node for one slice.
    pub fn stack_node(&self, g: &mut Graph<T>, input: &NetInput<T>) -> Result<NodeId> {
        let d = input.dwi.len();
        if d < MIN_DIRECTIONS {
            return Err(Error::TooFewDirections { n: d, min: MIN_DIRECTIONS });
        }
        if d > self.cfg.n_max {
            return Err(Error::TooManyDirections { n: d, max: self.cfg.n_max });
        }
        let mut features = Vec::with_capacity(d);
        for (img, dir) in input.dwi.iter().zip(&input.directions) {
            let x = g.input(img.clone());
            let k = self.psi_node(g, x, dir)?;
            features.push(dyn_conv_node(g, x, k)?);
        }
        let b0 = g.input(input.b0.clone());
        assemble_node(g, b0, &features, self.cfg.n_max)
    }

    /// Scaled six-channel prediction node for a batch of slices.
    pub fn predict_node(&self, g: &mut Graph<T>, inputs: &[NetInput<T>]) -> Result<NodeId> {
        let stacks = inputs.iter().map(|i| self.stack_node(g, i)).collect::<Result<Vec<_>>>()?;
        let x = if stacks.len() == 1 { stacks[0] } else { g.concat(&stacks, 0)? };
        self.unet_node(g, x)
    }

    /// Scaled six-channel prediction `(1, 6, h, w)` for one slice.
    pub fn predict(&self, input: &NetInput<T>) -> Result<Array4<T>> {
        let mut g = Graph::new();
        let out = self.predict_node(&mut g, std::slice::from_ref(input))?;
        Ok(g.value(out).clone())
    }

    /// Masked MSE between the batch prediction and scaled targets.
    pub fn loss_node(&self, g: &mut Graph<T>, batch: &[Sample<T>]) -> Result<NodeId> {
        let inputs: Vec<NetInput<T>> = batch.iter().map(|s| s.input.clone()).collect();
        let pred = self.predict_node(g, &inputs)?;
        let [_, _, h, w] = g.shape(pred);
        let mut target = Vec::with_capacity(batch.len() * 6 * h * w);
        let mut mask = Vec::with_capacity(batch.len() * h * w);
        for s in batch {
            target.extend_from_slice(s.target.data());
            mask.extend_from_slice(s.mask.data());
        }
        let t = g.input(Array4::from_vec([batch.len(), 6, h, w], target)?);
        g.masked_mse_loss(pred, t, Array4::from_vec([batch.len(), 1, h, w], mask)?)
    }
}

/// Scaled `(1, 6, h, w)` target maps for one slice of `tf`; zero outside the mask.
pub fn target_maps<T: Real>(tf: &TensorField, z: usize) -> (Array4<T>, Array4<T>) {
    let (h, w) = (tf.ny, tf.nx);
    let hw = h * w;
    let mut target = Array4::zeros([1, 6, h, w]);
    let mut mask = Array4::zeros([1, 1, h, w]);
    for i in 0..hw {
        let v = z * hw + i;
        if tf.mask[v] {
            mask.data_mut()[i] = T::one();
            for (c, e) in tf.tensors[v].to_array().iter().enumerate() {
                target.data_mut()[c * hw + i] = T::from_f64(e * TARGET_SCALE);
            }
        }
    }
    (target, mask)
}

/// Inverts the target scaling of a `(1, 6, h, w)` prediction into a
/// single-slice field; voxels outside `mask` are zero.
pub fn unscale_prediction<T: Real>(pred: &Array4<T>, mask: &[bool], nx: usize, ny: usize) -> TensorField {
    let hw = nx * ny;
    let mut tf = TensorField::zeros(nx, ny, 1);
    tf.mask = mask.to_vec();
    for i in 0..hw {
        if mask[i] {
            let mut e = [0.0; 6];
            for (c, v) in e.iter_mut().enumerate() {
                *v = pred.data()[c * hw + i].as_f64() / TARGET_SCALE;
            }
            tf.tensors[i] = DiffusionTensor6::from_array(e);
        }
    }
    tf
}

/// One training example.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub input: NetInput<T>,
    pub target: Array4<T>,
    pub mask: Array4<T>,
}

/// Ground-truth slices plus the acquisition used to synthesize noisy
/// training inputs on demand.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSet<'a> {
    pub truth: &'a TensorField,
    /// Full scheme; subsets are drawn from `pool` (indices into it).
    pub scheme: &'a GradientScheme,
    pub pool: &'a [usize],
    pub s0: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl TrainingSet<'_> {
    fn max_directions(&self, n_max: usize) -> Result<usize> {
        if self.truth.nz == 0 {
            return Err(Error::EmptyDataset);
        }
        if self.pool.len() < MIN_DIRECTIONS {
            return Err(Error::SubsetTooLarge { k: MIN_DIRECTIONS, pool: self.pool.len() });
        }
        Ok(n_max.min(self.pool.len()))
    }

    /// Noisy example for slice `z` acquired with `subset`; `key` selects the noise draw.
    pub fn sample<T: Real>(&self, z: usize, subset: &[usize], key: u64) -> Result<Sample<T>> {
        let tf = self.truth.slice(z);
        let scheme = self.scheme.subset(subset)?;
        let v = synthesize_dwi(&tf, &scheme, self.s0, self.sigma, rng::mix64(self.seed ^ rng::mix64(key)))?;
        let (target, mask) = target_maps(self.truth, z);
        Ok(Sample { input: NetInput::from_volume(&v)?, target, mask })
    }

    /// The fixed example used for slice `z` when this set serves as validation.
    fn fixed_sample<T: Real>(&self, z: usize, dmax: usize) -> Result<Sample<T>> {
        let d = MIN_DIRECTIONS + z % (dmax - MIN_DIRECTIONS + 1);
        let subset = sample_subset(self.pool, d, rng::mix64(self.seed ^ z as u64))?;
        self.sample(z, &subset, z as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Trained parameters with their configuration and loss history.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: FlexNet<f32>,
    pub history: Vec<EpochLog>,
}

/// Mean masked loss over the fixed validation examples of `set`.
pub fn validation_loss(net: &FlexNet<f32>, set: &TrainingSet) -> Result<f64> {
    let dmax = set.max_directions(net.cfg.n_max)?;
    let mut total = 0.0;
    for z in 0..set.truth.nz {
        let s = set.fixed_sample::<f32>(z, dmax)?;
        let mut g = Graph::new();
        let l = net.loss_node(&mut g, std::slice::from_ref(&s))?;
        total += g.value(l).item().as_f64();
    }
    Ok(total / set.truth.nz as f64)
}

/// Trains from scratch. Each batch draws a direction count uniformly from
/// `6..=n_max` and one subset of the training pool shared by the batch;
/// noise is redrawn every epoch. `progress` sees each finished epoch.
pub fn train(
    cfg: &NetConfig,
    data: &TrainingSet,
    val: Option<&TrainingSet>,
    mut progress: impl FnMut(&EpochLog),
) -> Result<Checkpoint> {
    let mut net = FlexNet::<f32>::new(cfg.clone())?;
    let dmax = data.max_directions(cfg.n_max)?;
    let mut adam = Adam::new(&net.params);
    let mut order: Vec<usize> = (0..data.truth.nz).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut last_finite = f64::NAN;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut r = rng::stream(cfg.seed, 0xe90c_0000 + epoch as u64);
        order.shuffle(&mut r);
        let (mut sum, mut seen) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
            let d = r.random_range(MIN_DIRECTIONS..=dmax);
            let subset = sample_subset_with(data.pool, d, &mut r)?;
            let batch = chunk
                .iter()
                .map(|&z| data.sample(z, &subset, ((epoch as u64) << 32) | z as u64))
                .collect::<Result<Vec<Sample<f32>>>>()?;
            let nonfinite = || Error::NonFiniteLoss { epoch, batch: bi, last_finite };
            let mut g = Graph::new();
            let loss = match net.loss_node(&mut g, &batch) {
                Err(Error::NonFinite { .. }) => return Err(nonfinite()),
                other => other?,
            };
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(nonfinite());
            }
            let grads = g.backward(loss)?;
            let mut acc = net.params.zeros_like();
            grads.accumulate_into(&mut acc);
            if acc.iter().any(|a| !a.is_finite()) {
                return Err(nonfinite());
            }
            adam.step(&mut net.params, &acc, lr);
            last_finite = value;
            sum += value * chunk.len() as f64;
            seen += chunk.len();
        }
        let log = EpochLog {
            epoch: epoch + 1,
            lr,
            train_loss: sum / seen as f64,
            val_loss: val.map(|v| validation_loss(&net, v)).transpose()?,
        };
        progress(&log);
        history.push(log);
    }
    Ok(Checkpoint { net, history })
}

/// Tensor field predicted from the directions `subset` of `v`.
pub fn infer(v: &DwiVolume, subset: &[usize], net: &FlexNet<f32>) -> Result<TensorField> {
    let k = subset.len();
    if k < MIN_DIRECTIONS || k > net.cfg.n_max {
        return Err(Error::SubsetOutOfRange { k, min: MIN_DIRECTIONS, max: net.cfg.n_max });
    }
    if let Some(&bad) = subset.iter().find(|&&i| i >= v.dwi.len()) {
        return Err(Error::SubsetTooLarge { k: bad + 1, pool: v.dwi.len() });
    }
    let mut slices = Vec::with_capacity(v.nz);
    for z in 0..v.nz {
        let s = v.slice(z).select(subset)?;
        if !s.mask.iter().any(|m| *m) {
            slices.push(TensorField::zeros(v.nx, v.ny, 1));
            continue;
        }
        let pred = net.predict(&NetInput::from_volume(&s)?)?;
        slices.push(unscale_prediction(&pred, &s.mask, v.nx, v.ny));
    }
    TensorField::stack(&slices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{make_tensor_field, Layout, PhantomSpec};
    use crate::scheme::generate_uniform;
    use crate::tensor::BValue;

    fn small_cfg() -> NetConfig {
        NetConfig { n_max: 8, width: 4, depth: 2, ..Default::default() }
    }

    fn image(h: usize, w: usize, seed: u64) -> Array4<f64> {
        let d = (0..h * w).map(|i| (0.5 + 0.2 * rng::normal_pair(seed, 1, i as u64).0).abs()).collect();
        Array4::from_vec([1, 1, h, w], d).unwrap()
    }

    #[test]
    fn kernel_layout_is_30_84_84() {
        let k = DynKernelParams::new((0..DYN_PARAMS).map(|i| i as f64).collect()).unwrap();
        let sizes: Vec<usize> = (0..3).map(|i| k.layer(i).0.len() + k.layer(i).1.len()).collect();
        assert_eq!(sizes, vec![30, 84, 84]);
        assert_eq!(k.layer(1).0[0], 30.0);
        assert!(DynKernelParams::<f64>::new(vec![0.0; 197]).is_err());
    }

    #[test]
    fn generator_collapses_to_final_bias() {
        let mut net = FlexNet::<f64>::new(small_cfg()).unwrap();
        let beta: Vec<f64> = (0..DYN_PARAMS).map(|i| (i as f64).sin()).collect();
        for id in net.params.ids().collect::<Vec<_>>() {
            if net.params.name(id).starts_with("psi.") {
                net.params.data_mut(id).fill(0.0);
            }
        }
        let id = net.params.id("psi.fc2.b").unwrap();
        net.params.data_mut(id).copy_from_slice(&beta);
        let dir = UnitDirection::new(0.0, 0.0, 1.0).unwrap();
        let k = net.generate_dyn_params(&Array4::zeros([1, 1, 16, 16]), &dir).unwrap();
        assert_eq!(k.values(), &beta[..]);
    }

    #[test]
    fn generator_depends_on_direction() {
        let net = FlexNet::<f64>::new(small_cfg()).unwrap();
        let img = image(16, 16, 3);
        let a = net.generate_dyn_params(&img, &UnitDirection::X).unwrap();
        let b = net.generate_dyn_params(&img, &UnitDirection::Y).unwrap();
        let diff = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn dyn_conv_zero_and_identity() {
        let img = image(8, 8, 4);
        let zero = dyn_conv_apply(&img, &DynKernelParams::new(vec![0.0; DYN_PARAMS]).unwrap()).unwrap();
        assert_eq!(zero.shape(), [1, 3, 8, 8]);
        assert!(zero.data().iter().all(|v| *v == 0.0));

        // centre taps route channel 0 straight through all three layers
        let mut v = vec![0.0; DYN_PARAMS];
        v[4] = 1.0;
        v[30 + 4] = 1.0;
        v[114 + 4] = 1.0;
        let out = dyn_conv_apply(&img, &DynKernelParams::new(v).unwrap()).unwrap();
        assert_eq!(&out.data()[..64], img.data());
    }

    #[test]
    fn assemble_fills_cyclically() {
        let b0 = Array4::filled([1, 1, 2, 2], -1.0);
        let feats: Vec<Array4<f64>> = (0..6).map(|i| Array4::filled([1, 3, 2, 2], i as f64)).collect();
        let s = assemble_input(&feats, &b0, 20).unwrap();
        assert_eq!(s.shape(), [1, 61, 2, 2]);
        assert_eq!(s.at(0, 0, 0, 0), -1.0);
        // slot k (1-based) occupies channels 3k-2..=3k
        let slot = |k: usize| s.at(0, 3 * k - 2, 0, 0);
        let got: Vec<f64> = (1..=20).map(slot).collect();
        let want: Vec<f64> = (0..20).map(|k| (k % 6) as f64).collect();
        assert_eq!(got, want);

        let full: Vec<Array4<f64>> = (0..8).map(|i| Array4::filled([1, 3, 2, 2], i as f64)).collect();
        let s = assemble_input(&full, &b0, 8).unwrap();
        assert_eq!(
            (1..=8).map(|k| s.at(0, 3 * k, 1, 1)).collect::<Vec<_>>(),
            (0..8).map(|k| k as f64).collect::<Vec<_>>()
        );
        assert!(matches!(assemble_input(&feats[..5], &b0, 20), Err(Error::TooFewDirections { .. })));
        assert!(matches!(assemble_input(&full, &b0, 7), Err(Error::TooManyDirections { .. })));
    }

    #[test]
    fn unet_shapes_and_constant_output() {
        let mut net = FlexNet::<f64>::new(small_cfg()).unwrap();
        let stack = Array4::filled([1, 25, 16, 16], 0.3);
        let out = net.forward(&stack).unwrap();
        assert_eq!(out.shape(), [1, 6, 16, 16]);
        for id in net.params.ids().collect::<Vec<_>>() {
            if net.params.name(id).starts_with("unet.") {
                net.params.data_mut(id).fill(0.0);
            }
        }
        let id = net.params.id("unet.out.b").unwrap();
        net.params.data_mut(id).copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = net.forward(&stack).unwrap();
        for c in 0..6 {
            assert!((0..256).all(|i| out.data()[c * 256 + i] == (c + 1) as f64));
        }
        assert!(matches!(net.forward(&Array4::zeros([1, 25, 14, 14])), Err(Error::OddSpatialDims { .. })));
    }

    #[test]
    fn normalization() {
        let spec = PhantomSpec::new(32, 32, Layout::Mixed, 2);
        let tf = make_tensor_field(&spec).unwrap();
        let scheme = GradientScheme::new(BValue::new(1000.0).unwrap(), generate_uniform(6, 1).unwrap(), 2).unwrap();
        let v = synthesize_dwi(&tf, &scheme, 250.0, 0.0, 1).unwrap();
        let p = normalize_inputs(&v).unwrap();
        assert!((p.scale - 250.0).abs() < 1e-9);
        for (i, m) in v.mask.iter().enumerate() {
            if *m {
                assert!((p.b0[0][i] - 1.0).abs() < 1e-12);
                assert!((p.dwi[3][i] / p.b0[1][i] - v.dwi[3][i] / v.b0[1][i]).abs() < 1e-12);
            }
        }
        let mut empty = v.clone();
        empty.mask.fill(false);
        assert!(matches!(normalize_inputs(&empty), Err(Error::ZeroB0Mean)));
    }

    #[test]
    fn scaling_round_trips() {
        let spec = PhantomSpec::new(32, 32, Layout::Rings, 5);
        let tf = make_tensor_field(&spec).unwrap();
        let (t, _) = target_maps::<f32>(&tf, 0);
        let back = unscale_prediction(&t, &tf.mask, 32, 32);
        for (a, b) in back.tensors.iter().zip(&tf.tensors) {
            for (x, y) in a.to_array().iter().zip(b.to_array()) {
                assert!((x - y).abs() <= 4e-3 * f32::EPSILON as f64);
            }
        }
    }

    fn tiny_set(tf: &TensorField, scheme: &GradientScheme, pool: &[usize]) -> Checkpoint {
        let cfg = NetConfig { n_max: 8, width: 4, depth: 2, epochs: 3, batch: 2, seed: 9, ..Default::default() };
        let set = TrainingSet { truth: tf, scheme, pool, s0: 1.0, sigma: 0.05, seed: 3 };
        train(&cfg, &set, Some(&set), |_| {}).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_infers_any_count() {
        let spec = PhantomSpec::new(32, 32, Layout::Mixed, 1).with_slices(4);
        let tf = make_tensor_field(&spec).unwrap();
        let scheme = GradientScheme::new(BValue::new(1000.0).unwrap(), generate_uniform(20, 1).unwrap(), 1).unwrap();
        let pool: Vec<usize> = (0..12).collect();
        let a = tiny_set(&tf, &scheme, &pool);
        let b = tiny_set(&tf, &scheme, &pool);
        assert_eq!(a.history, b.history);
        assert_eq!(a.net, b.net);
        assert!(a.history.iter().all(|h| h.val_loss.is_some_and(f64::is_finite)));

        let v = synthesize_dwi(&tf, &scheme, 1.0, 0.05, 11).unwrap();
        for d in [6, 7, 8] {
            let subset: Vec<usize> = (12..12 + d).collect();
            let out = infer(&v, &subset, &a.net).unwrap();
            assert_eq!(out.voxels(), v.voxels());
            assert!(out.tensors.iter().all(DiffusionTensor6::is_finite));
            for (t, m) in out.tensors.iter().zip(&out.mask) {
                if !m {
                    assert_eq!(*t, DiffusionTensor6::ZERO);
                }
            }
        }
        let nine: Vec<usize> = (0..9).collect();
        assert!(matches!(infer(&v, &nine, &a.net), Err(Error::SubsetOutOfRange { k: 9, .. })));
    }

    #[test]
    fn empty_dataset_rejected() {
        let tf = TensorField::zeros(32, 32, 0);
        let scheme = GradientScheme::new(BValue::new(1000.0).unwrap(), generate_uniform(10, 1).unwrap(), 1).unwrap();
        let pool: Vec<usize> = (0..10).collect();
        let set = TrainingSet { truth: &tf, scheme: &scheme, pool: &pool, s0: 1.0, sigma: 0.0, seed: 0 };
        assert!(matches!(train(&small_cfg(), &set, None, |_| {}), Err(Error::EmptyDataset)));
    }

    #[test]
    fn lr_schedule() {
        let cfg = NetConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert_eq!(cfg.lr_at(79), 1e-3);
        assert!((cfg.lr_at(80) - 1e-4).abs() < 1e-18);
        assert!(NetConfig { n_max: 5, ..cfg.clone() }.validate().is_err());
        assert!(NetConfig { width: 3, ..cfg }.validate().is_err());
    }
}
