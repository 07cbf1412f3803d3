//! Generators, patch discriminators and the two-scale grid detector.
//!
//! A [`NetworkHandle`] owns a flat parameter list laid out by
//! [`param_shapes`]. Forward passes record onto a [`Tape`] after the
//! parameters are bound with [`NetworkHandle::bind`].

mod checkpoint;
mod detect;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ProvenanceRecord, RngState, CHECKPOINT_FORMAT_VERSION};
pub use detect::{decode_detections, nms, Detection, DetectionGrid, GridScale};
pub(crate) use detect::sigmoid as decode_sigmoid;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tape::{ConvSpec, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Generator,
    Discriminator,
    Detector,
}

/// Residual encoder-decoder: two stride-2 downsamplings, `res_blocks` residual
/// blocks, two nearest-upsample + conv stages, tanh output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub width: usize,
    pub res_blocks: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { width: 16, res_blocks: 3 }
    }
}

impl GeneratorConfig {
    /// 9 residual blocks, base width 64.
    pub fn full_scale() -> Self {
        Self { width: 64, res_blocks: 9 }
    }
}

/// Patch discriminator: `downsamples` stride-2 4x4 convs, then a stride-1
/// 4x4 conv and a 1-channel stride-1 4x4 output conv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub width: usize,
    pub downsamples: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { width: 16, downsamples: 3 }
    }
}

/// Two-scale grid/anchor detector. The fine scale has stride
/// `2^stem_downsamples`, the coarse scale twice that.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub width: usize,
    pub stem_downsamples: usize,
    pub num_classes: usize,
    /// Anchor `(w, h)` fractions: `anchors[0]` coarse scale, `anchors[1]` fine scale.
    pub anchors: [Vec<[f64; 2]>; 2],
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            width: 16,
            stem_downsamples: 3,
            num_classes: 1,
            anchors: default_anchors(),
        }
    }
}

/// Fallback anchors for scenes whose objects span roughly 5-40% of the canvas.
pub fn default_anchors() -> [Vec<[f64; 2]>; 2] {
    [
        vec![[0.24, 0.30], [0.32, 0.40], [0.42, 0.50]],
        vec![[0.10, 0.12], [0.14, 0.18], [0.18, 0.24]],
    ]
}

impl DetectorConfig {
    pub fn anchors_per_scale(&self) -> usize {
        self.anchors[0].len()
    }

    pub fn channels_per_anchor(&self) -> usize {
        5 + self.num_classes
    }

    /// Fine-scale grid side for an input of side `size`.
    pub fn fine_grid(&self, size: usize) -> usize {
        size >> self.stem_downsamples
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchConfig {
    Generator(GeneratorConfig),
    Discriminator(DiscriminatorConfig),
    Detector(DetectorConfig),
}

impl ArchConfig {
    pub fn kind(&self) -> NetKind {
        match self {
            ArchConfig::Generator(_) => NetKind::Generator,
            ArchConfig::Discriminator(_) => NetKind::Discriminator,
            ArchConfig::Detector(_) => NetKind::Detector,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Zero-mean Gaussian with the given std.
    Normal(f64),
    /// Zero-mean Gaussian with std `sqrt(2 / fan_in)`.
    He,
    Const(f64),
}

struct ParamSpec {
    shape: Vec<usize>,
    init: Init,
}

const GAN_STD: f64 = 0.02;
const DETECTOR_SLOPE: f64 = 0.1;
const DISCRIMINATOR_SLOPE: f64 = 0.2;
/// Initial objectness bias, so an untrained detector starts near background.
const OBJECTNESS_BIAS_INIT: f64 = -4.0;

fn conv_w(cout: usize, cin: usize, k: usize, init: Init) -> ParamSpec {
    ParamSpec { shape: vec![cout, cin, k, k], init }
}

fn bias(n: usize) -> ParamSpec {
    ParamSpec { shape: vec![n], init: Init::Const(0.0) }
}

fn disc_channels(cfg: &DiscriminatorConfig) -> Vec<usize> {
    // widths of the downsampling convs followed by the stride-1 conv
    (0..=cfg.downsamples).map(|i| cfg.width * (1usize << i.min(3))).collect()
}

fn det_channels(cfg: &DetectorConfig) -> Vec<usize> {
    (0..=cfg.stem_downsamples).map(|i| cfg.width << i.saturating_sub(1)).collect()
}

fn param_specs(arch: &ArchConfig) -> Vec<ParamSpec> {
    let mut p = Vec::new();
    match arch {
        ArchConfig::Generator(g) => {
            let w = g.width;
            let gan = Init::Normal(GAN_STD);
            p.push(conv_w(w, 3, 7, gan));
            p.push(conv_w(2 * w, w, 3, gan));
            p.push(conv_w(4 * w, 2 * w, 3, gan));
            for _ in 0..g.res_blocks {
                p.push(conv_w(4 * w, 4 * w, 3, gan));
                p.push(conv_w(4 * w, 4 * w, 3, gan));
            }
            p.push(conv_w(2 * w, 4 * w, 3, gan));
            p.push(conv_w(w, 2 * w, 3, gan));
            p.push(conv_w(3, w, 7, gan));
            p.push(bias(3));
        }
        ArchConfig::Discriminator(d) => {
            let gan = Init::Normal(GAN_STD);
            let ch = disc_channels(d);
            p.push(conv_w(ch[0], 3, 4, gan));
            p.push(bias(ch[0]));
            for i in 1..ch.len() {
                p.push(conv_w(ch[i], ch[i - 1], 4, gan));
            }
            p.push(conv_w(1, *ch.last().unwrap(), 4, gan));
            p.push(bias(1));
        }
        ArchConfig::Detector(t) => {
            let ch = det_channels(t);
            let out = t.anchors_per_scale() * t.channels_per_anchor();
            let cf = *ch.last().unwrap();
            let cc = 2 * cf;
            let lat = (cf / 2).max(1);
            p.push(conv_w(ch[0], 3, 3, Init::He));
            p.push(bias(ch[0]));
            for i in 1..ch.len() {
                p.push(conv_w(ch[i], ch[i - 1], 3, Init::He));
                p.push(bias(ch[i]));
            }
            p.push(conv_w(cc, cf, 3, Init::He));
            p.push(bias(cc));
            p.push(conv_w(cc, cc, 3, Init::He));
            p.push(bias(cc));
            p.push(conv_w(out, cc, 1, Init::Normal(0.01)));
            p.push(head_bias(t));
            p.push(conv_w(lat, cc, 1, Init::He));
            p.push(bias(lat));
            p.push(conv_w(cf, cf + lat, 3, Init::He));
            p.push(bias(cf));
            p.push(conv_w(out, cf, 1, Init::Normal(0.01)));
            p.push(head_bias(t));
        }
    }
    p
}

fn head_bias(t: &DetectorConfig) -> ParamSpec {
    // special-cased in init: objectness channels get OBJECTNESS_BIAS_INIT
    ParamSpec { shape: vec![t.anchors_per_scale() * t.channels_per_anchor()], init: Init::Const(f64::NAN) }
}

/// Shapes of every parameter array for `arch`, in binding order.
pub fn param_shapes(arch: &ArchConfig) -> Vec<Vec<usize>> {
    param_specs(arch).into_iter().map(|s| s.shape).collect()
}

/// A parameterized network plus its trainability flag and lineage.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkHandle<T> {
    pub arch: ArchConfig,
    pub params: Vec<Tensor<T>>,
    pub trainable: bool,
    /// Stage lineage, oldest first.
    pub provenance: Vec<ProvenanceRecord>,
}

/// Parameters placed on a tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps tape variables holding a network's parameters, in
    /// [`NetworkHandle::params`] order.
    pub fn from_vars(vars: &[Var]) -> Self {
        Self { vars: vars.to_vec() }
    }

    /// Tape variables of the parameters, in [`NetworkHandle::params`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }
}

impl<T: Scalar> NetworkHandle<T> {
    /// Seeded initialization.
    pub fn init(arch: ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors_cpa = match &arch {
            ArchConfig::Detector(t) => Some(t.channels_per_anchor()),
            _ => None,
        };
        let params = param_specs(&arch)
            .into_iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let data: Vec<T> = match spec.init {
                    Init::Normal(std) => {
                        let d = Normal::new(0.0, std).unwrap();
                        (0..n).map(|_| cast(d.sample(&mut rng))).collect()
                    }
                    Init::He => {
                        let fan_in: usize = spec.shape[1..].iter().product();
                        let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                        (0..n).map(|_| cast(d.sample(&mut rng))).collect()
                    }
                    Init::Const(c) if c.is_nan() => {
                        let cpa = anchors_cpa.expect("head bias only in detectors");
                        (0..n).map(|i| cast(if i % cpa == 4 { OBJECTNESS_BIAS_INIT } else { 0.0 })).collect()
                    }
                    Init::Const(c) => vec![cast(c); n],
                };
                Tensor::from_vec(&spec.shape, data)
            })
            .collect();
        Self { arch, params, trainable: true, provenance: Vec::new() }
    }

    pub fn kind(&self) -> NetKind {
        self.arch.kind()
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Places the parameters on `tape`. Asking for gradients of a frozen
    /// handle is a contract violation.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Result<Bound> {
        if requires_grad && !self.trainable {
            return Err(Error::Contract("gradients requested for a frozen network".into()));
        }
        let vars = self.params.iter().map(|p| tape.leaf(p.clone(), requires_grad)).collect();
        Ok(Bound { vars })
    }

    /// SHA-256 over parameter shapes and values, independent of scalar width.
    pub fn params_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            for &d in p.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.data() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        hex_digest(h)
    }

    fn expect_kind(&self, kind: NetKind) -> Result<()> {
        if self.kind() != kind {
            return Err(Error::validation("network", format!("expected a {kind:?}, got a {:?}", self.kind())));
        }
        Ok(())
    }

    fn check_image(&self, tape: &Tape<T>, x: Var, multiple: usize) -> Result<(usize, usize)> {
        let shape = tape.value(x).shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!("expected [N, 3, H, W] input, got {shape:?}")));
        }
        let (h, w) = (shape[2], shape[3]);
        if h != w || h == 0 || h % multiple != 0 {
            return Err(Error::Shape(format!("input side {h}x{w} must be square and a multiple of {multiple}")));
        }
        Ok((shape[0], h))
    }

    /// Generator forward on a tape. Output has the input's shape, values in `[-1, 1]`.
    pub fn generator_forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        self.expect_kind(NetKind::Generator)?;
        let ArchConfig::Generator(cfg) = &self.arch else { unreachable!() };
        self.check_image(tape, x, 4)?;
        let mut c = Cursor { vars: &p.vars, pos: 0 };
        let s1 = |pad| ConvSpec { stride: 1, pad };
        let s2 = ConvSpec { stride: 2, pad: 1 };

        let h = tape.conv2d(x, c.next(), None, s1(3));
        let h = tape.instance_norm(h);
        let mut h = tape.relu(h);
        for _ in 0..2 {
            let y = tape.conv2d(h, c.next(), None, s2);
            let y = tape.instance_norm(y);
            h = tape.relu(y);
        }
        for _ in 0..cfg.res_blocks {
            let r = tape.conv2d(h, c.next(), None, s1(1));
            let r = tape.instance_norm(r);
            let r = tape.relu(r);
            let r = tape.conv2d(r, c.next(), None, s1(1));
            let r = tape.instance_norm(r);
            h = tape.add(h, r);
        }
        for _ in 0..2 {
            let u = tape.upsample2x(h);
            let u = tape.conv2d(u, c.next(), None, s1(1));
            let u = tape.instance_norm(u);
            h = tape.relu(u);
        }
        let (w, b) = (c.next(), c.next());
        let out = tape.conv2d(h, w, Some(b), s1(3));
        debug_assert_eq!(c.pos, p.vars.len());
        Ok(tape.tanh(out))
    }

    /// Patch discriminator forward: raw per-patch scores `[N, 1, S, S]`.
    pub fn discriminator_forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        self.expect_kind(NetKind::Discriminator)?;
        let ArchConfig::Discriminator(cfg) = &self.arch else { unreachable!() };
        let (_, size) = self.check_image(tape, x, 1)?;
        if discriminator_output_side(cfg, size).is_none() {
            return Err(Error::Shape(format!("input side {size} too small for {} downsamplings", cfg.downsamples)));
        }
        let mut c = Cursor { vars: &p.vars, pos: 0 };
        let s2 = ConvSpec { stride: 2, pad: 1 };
        let s1 = ConvSpec { stride: 1, pad: 1 };
        let (w, b) = (c.next(), c.next());
        let h = tape.conv2d(x, w, Some(b), s2);
        let mut h = tape.leaky_relu(h, DISCRIMINATOR_SLOPE);
        for i in 1..=cfg.downsamples {
            let spec = if i < cfg.downsamples { s2 } else { s1 };
            let y = tape.conv2d(h, c.next(), None, spec);
            let y = tape.instance_norm(y);
            h = tape.leaky_relu(y, DISCRIMINATOR_SLOPE);
        }
        let (w, b) = (c.next(), c.next());
        Ok(tape.conv2d(h, w, Some(b), s1))
    }

    /// Detector forward: raw `(coarse, fine)` prediction maps, each
    /// `[N, A * (5 + C), S, S]`.
    pub fn detector_forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        self.expect_kind(NetKind::Detector)?;
        let ArchConfig::Detector(cfg) = &self.arch else { unreachable!() };
        self.check_image(tape, x, 1 << (cfg.stem_downsamples + 1))?;
        let mut c = Cursor { vars: &p.vars, pos: 0 };
        let s1 = ConvSpec { stride: 1, pad: 1 };
        let s2 = ConvSpec { stride: 2, pad: 1 };
        let p1x1 = ConvSpec { stride: 1, pad: 0 };
        let mut conv = |tape: &mut Tape<T>, h: Var, spec: ConvSpec, act: bool| {
            let (w, b) = (c.next(), c.next());
            let y = tape.conv2d(h, w, Some(b), spec);
            if act {
                tape.leaky_relu(y, DETECTOR_SLOPE)
            } else {
                y
            }
        };
        let mut h = conv(tape, x, s1, true);
        for _ in 0..cfg.stem_downsamples {
            h = conv(tape, h, s2, true);
        }
        let fine_feat = h;
        let h = conv(tape, fine_feat, s2, true);
        let coarse_feat = conv(tape, h, s1, true);
        let coarse = conv(tape, coarse_feat, p1x1, false);
        let lat = conv(tape, coarse_feat, p1x1, true);
        let lat = tape.upsample2x(lat);
        let merged = tape.concat_channels(fine_feat, lat);
        let merged = conv(tape, merged, s1, true);
        let fine = conv(tape, merged, p1x1, false);
        Ok((coarse, fine))
    }

    /// Inference helper: generator applied to a `[N, 3, H, W]` batch.
    pub fn generate(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false)?;
        let x = tape.leaf(images.clone(), false);
        let y = self.generator_forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }

    /// Inference helper: discriminator patch scores.
    pub fn discriminate(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false)?;
        let x = tape.leaf(images.clone(), false);
        let y = self.discriminator_forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }

    /// Inference helper: raw detection grid for a batch.
    pub fn detect_grid(&self, images: &Tensor<T>) -> Result<DetectionGrid<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false)?;
        let x = tape.leaf(images.clone(), false);
        let (coarse, fine) = self.detector_forward(&mut tape, &p, x)?;
        let cfg = self.detector_config()?;
        Ok(DetectionGrid::new(cfg, tape.value(coarse).clone(), tape.value(fine).clone()))
    }

    pub fn detector_config(&self) -> Result<&DetectorConfig> {
        match &self.arch {
            ArchConfig::Detector(c) => Ok(c),
            _ => Err(Error::validation("network", "not a detector")),
        }
    }
}

/// Score-map side of the patch discriminator for a square input.
pub fn discriminator_output_side(cfg: &DiscriminatorConfig, size: usize) -> Option<usize> {
    let s2 = ConvSpec { stride: 2, pad: 1 };
    let s1 = ConvSpec { stride: 1, pad: 1 };
    let mut s = crate::tape::conv_out(size, 4, s2)?;
    for i in 1..=cfg.downsamples {
        s = crate::tape::conv_out(s, 4, if i < cfg.downsamples { s2 } else { s1 })?;
    }
    let s = crate::tape::conv_out(s, 4, s1)?;
    (s > 0).then_some(s)
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
