//! The C-SSM block and the dual-path amplitude/phase network.
//!
//! Weight containers are generic over their leaf type: `P = Tensor` holds
//! values, `P = Var` holds the same parameters bound to a [`Graph`]. Both
//! enumerate parameters in one fixed order, which is also the checkpoint order.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::spectral;
use crate::ssm::SsmParams;
use crate::tensor::{Graph, Tensor, Var, LAYER_NORM_EPS};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    Full,
    /// Blocks never exchange attention maps across paths.
    NoCrossAttention,
    /// The selective scan is replaced by a `C -> C` linear layer.
    NoSsm,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::NoCrossAttention, Ablation::NoSsm];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoCrossAttention => "no_cross_attention",
            Ablation::NoSsm => "no_ssm",
        }
    }

    pub fn cross_attention(self) -> bool {
        self != Ablation::NoCrossAttention
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}` (expected full, no_cross_attention or no_ssm)")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Feature width `C`.
    pub channels: usize,
    pub blocks_per_path: usize,
    pub ssm_state_dim: usize,
    /// Side of the square grid the flattened stage runs at.
    pub ssm_fixed_hw: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 32,
            blocks_per_path: 8,
            ssm_state_dim: crate::ssm::DEFAULT_STATE_DIM,
            ssm_fixed_hw: 64,
            ablation: Ablation::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 1 {
            return Err(Error::Config("channels must be >= 1".into()));
        }
        if self.blocks_per_path < 1 {
            return Err(Error::Config("blocks_per_path must be >= 1".into()));
        }
        if self.ssm_state_dim < 1 {
            return Err(Error::Config("ssm_state_dim must be >= 1".into()));
        }
        if self.ssm_fixed_hw < 8 {
            return Err(Error::Config("ssm_fixed_hw must be >= 8".into()));
        }
        Ok(())
    }

    /// Sequence length of the flattened stage.
    pub fn fixed_len(&self) -> usize {
        self.ssm_fixed_hw * self.ssm_fixed_hw
    }
}

/// Returns `cfg` rewired for the named ablation (`full`, `no_cross_attention`, `no_ssm`).
pub fn apply_ablation(cfg: &ModelConfig, tag: &str) -> Result<ModelConfig> {
    Ok(ModelConfig { ablation: tag.parse()?, ..cfg.clone() })
}

// ---------------------------------------------------------------------------
// parameter containers

#[derive(Clone, Debug, PartialEq)]
pub struct Affine<P = Tensor> {
    pub weight: P,
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<P = Tensor> {
    pub gamma: P,
    pub beta: P,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mixer<P = Tensor> {
    Ssm(SsmParams<P>),
    Linear(Affine<P>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CssmBlockWeights<P = Tensor> {
    /// 3x3 conv, `[C, C, 3, 3]` + `[C]`.
    pub conv_in: Affine<P>,
    pub norm: NormParams<P>,
    /// Depthwise 1x3 before the mixer, `[C, 3]` + `[C]`.
    pub conv_branch1: Affine<P>,
    pub mixer: Mixer<P>,
    /// Depthwise 1x3 before the attention softmax.
    pub conv_branch2: Affine<P>,
    /// Depthwise 1x3 re-extracting the attention map sent to the other path.
    pub conv_cross: Option<Affine<P>>,
    /// `[C, C]` + `[C]`.
    pub proj_out: Affine<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathWeights<P = Tensor> {
    pub lift: Affine<P>,
    pub blocks: Vec<CssmBlockWeights<P>>,
    pub head: Affine<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<P = Tensor> {
    pub config: ModelConfig,
    pub amp: PathWeights<P>,
    pub phase: PathWeights<P>,
}

impl<P> Affine<P> {
    fn map_ref<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Affine<Q> {
        Affine { weight: f(&self.weight), bias: f(&self.bias) }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut P)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl<P> CssmBlockWeights<P> {
    fn map_ref<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> CssmBlockWeights<Q> {
        let conv_in = self.conv_in.map_ref(f);
        let norm = NormParams { gamma: f(&self.norm.gamma), beta: f(&self.norm.beta) };
        let conv_branch1 = self.conv_branch1.map_ref(f);
        let mixer = match &self.mixer {
            Mixer::Ssm(p) => Mixer::Ssm(p.map_ref(&mut *f)),
            Mixer::Linear(a) => Mixer::Linear(a.map_ref(f)),
        };
        let conv_branch2 = self.conv_branch2.map_ref(f);
        let conv_cross = self.conv_cross.as_ref().map(|a| a.map_ref(f));
        let proj_out = self.proj_out.map_ref(f);
        CssmBlockWeights { conv_in, norm, conv_branch1, mixer, conv_branch2, conv_cross, proj_out }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        self.conv_in.visit(&format!("{prefix}.conv_in"), f);
        f(format!("{prefix}.norm.gamma"), &self.norm.gamma);
        f(format!("{prefix}.norm.beta"), &self.norm.beta);
        self.conv_branch1.visit(&format!("{prefix}.conv_branch1"), f);
        match &self.mixer {
            Mixer::Ssm(p) => {
                for (name, t) in SsmParams::<P>::NAMES.iter().zip(p.iter()) {
                    f(format!("{prefix}.ssm.{name}"), t);
                }
            }
            Mixer::Linear(a) => a.visit(&format!("{prefix}.mixer"), f),
        }
        self.conv_branch2.visit(&format!("{prefix}.conv_branch2"), f);
        if let Some(a) = &self.conv_cross {
            a.visit(&format!("{prefix}.conv_cross"), f);
        }
        self.proj_out.visit(&format!("{prefix}.proj_out"), f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut P)) {
        self.conv_in.visit_mut(f);
        f(&mut self.norm.gamma);
        f(&mut self.norm.beta);
        self.conv_branch1.visit_mut(f);
        match &mut self.mixer {
            Mixer::Ssm(p) => p.iter_mut().for_each(&mut *f),
            Mixer::Linear(a) => a.visit_mut(f),
        }
        self.conv_branch2.visit_mut(f);
        if let Some(a) = &mut self.conv_cross {
            a.visit_mut(f);
        }
        self.proj_out.visit_mut(f);
    }
}

impl<P> PathWeights<P> {
    fn map_ref<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> PathWeights<Q> {
        let lift = self.lift.map_ref(f);
        let blocks = self.blocks.iter().map(|b| b.map_ref(f)).collect();
        let head = self.head.map_ref(f);
        PathWeights { lift, blocks, head }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        self.lift.visit(&format!("{prefix}.lift"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.blocks.{i}"), f);
        }
        self.head.visit(&format!("{prefix}.head"), f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut P)) {
        self.lift.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

impl<P> ModelWeights<P> {
    pub fn map_ref<Q>(&self, mut f: impl FnMut(&P) -> Q) -> ModelWeights<Q> {
        let amp = self.amp.map_ref(&mut f);
        let phase = self.phase.map_ref(&mut f);
        ModelWeights { config: self.config.clone(), amp, phase }
    }

    /// Every parameter with its dotted name, in canonical order.
    pub fn named_params(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.amp.visit("amp", &mut |n, p| out.push((n, p)));
        self.phase.visit("phase", &mut |n, p| out.push((n, p)));
        out
    }

    /// Mutable parameters in the same order as [`named_params`](Self::named_params).
    pub fn params_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        self.amp.visit_mut(&mut |p| out.push(p));
        self.phase.visit_mut(&mut |p| out.push(p));
        out
    }
}

impl ModelWeights<Tensor> {
    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> ModelWeights<Var> {
        self.map_ref(|t| g.param(t.clone()))
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_constant(&self, g: &mut Graph) -> ModelWeights<Var> {
        self.map_ref(|t| g.constant(t.clone()))
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Parameter group a named parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Lift,
    Conv,
    LayerNorm,
    Ssm,
    Mixer,
    Projection,
    Head,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        let part = |p: &str| name.split('.').any(|s| s == p);
        if part("lift") {
            ParamGroup::Lift
        } else if part("head") {
            ParamGroup::Head
        } else if part("norm") {
            ParamGroup::LayerNorm
        } else if part("ssm") {
            ParamGroup::Ssm
        } else if part("mixer") {
            ParamGroup::Mixer
        } else if part("proj_out") {
            ParamGroup::Projection
        } else {
            ParamGroup::Conv
        }
    }
}

// ---------------------------------------------------------------------------
// construction

fn kaiming_uniform(dims: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(dims, |_| rng.random_range(-bound..bound))
}

fn conv3x3(cin: usize, cout: usize, rng: &mut impl Rng) -> Affine {
    Affine { weight: kaiming_uniform(&[cout, cin, 3, 3], cin * 9, rng), bias: Tensor::zeros([cout]) }
}

fn zero_conv3x3(cin: usize, cout: usize) -> Affine {
    Affine { weight: Tensor::zeros([cout, cin, 3, 3]), bias: Tensor::zeros([cout]) }
}

fn depthwise(c: usize, rng: &mut impl Rng) -> Affine {
    Affine { weight: kaiming_uniform(&[c, 3], 3, rng), bias: Tensor::zeros([c]) }
}

fn build_block(cfg: &ModelConfig, rng: &mut impl Rng) -> CssmBlockWeights {
    let c = cfg.channels;
    let conv_in = conv3x3(c, c, rng);
    let norm = NormParams { gamma: Tensor::ones([c]), beta: Tensor::zeros([c]) };
    let conv_branch1 = depthwise(c, rng);
    let mixer = match cfg.ablation {
        Ablation::NoSsm => Mixer::Linear(Affine { weight: kaiming_uniform(&[c, c], c, rng), bias: Tensor::zeros([c]) }),
        _ => Mixer::Ssm(SsmParams::init(c, cfg.ssm_state_dim, rng)),
    };
    let conv_branch2 = depthwise(c, rng);
    let conv_cross = cfg.ablation.cross_attention().then(|| depthwise(c, rng));
    let proj_out = Affine { weight: Tensor::zeros([c, c]), bias: Tensor::zeros([c]) };
    CssmBlockWeights { conv_in, norm, conv_branch1, mixer, conv_branch2, conv_cross, proj_out }
}

fn build_path(cfg: &ModelConfig, rng: &mut impl Rng) -> PathWeights {
    let lift = conv3x3(IMAGE_CHANNELS, cfg.channels, rng);
    let blocks = (0..cfg.blocks_per_path).map(|_| build_block(cfg, rng)).collect();
    PathWeights { lift, blocks, head: zero_conv3x3(cfg.channels, IMAGE_CHANNELS) }
}

/// Fresh weights: Kaiming-uniform convs and linears, zero biases, and zero
/// `proj_out` and heads so the network starts as the identity map.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut rng = rng::substream(seed, rng::INIT);
    let amp = build_path(cfg, &mut rng);
    let phase = build_path(cfg, &mut rng);
    Ok(ModelWeights { config: cfg.clone(), amp, phase })
}

/// Closed-form parameter count for a configuration.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let (c, n) = (cfg.channels, cfg.ssm_state_dim);
    let conv = |cin: usize, cout: usize| cout * cin * 9 + cout;
    let depthwise = 4 * c;
    let linear = c * c + c;
    let mixer = match cfg.ablation {
        Ablation::NoSsm => linear,
        _ => 3 * c * n + 2 * c + 1,
    };
    let cross = if cfg.ablation.cross_attention() { depthwise } else { 0 };
    let block = conv(c, c) + 2 * c + mixer + 2 * depthwise + cross + linear;
    2 * (conv(IMAGE_CHANNELS, c) + conv(c, IMAGE_CHANNELS) + cfg.blocks_per_path * block)
}

// ---------------------------------------------------------------------------
// forward pass

/// First half of a block: everything up to the merge. The cross map depends
/// only on the block's own input, so both paths can exchange before merging.
pub struct BlockFront {
    f_in: Var,
    height: usize,
    width: usize,
    gated: Var,
    cross_out: Option<Var>,
}

impl BlockFront {
    pub fn cross_out(&self) -> Option<Var> {
        self.cross_out
    }
}

pub fn block_front(g: &mut Graph, w: &CssmBlockWeights<Var>, cfg: &ModelConfig, f_in: Var) -> Result<BlockFront> {
    let [b, c, h, wd]: [usize; 4] = g
        .value(f_in)
        .dims()
        .try_into()
        .map_err(|_| Error::shape("cssm_block", format!("input must be (B, C, H, W), got {:?}", g.value(f_in).dims())))?;
    if c != cfg.channels {
        return Err(Error::shape("cssm_block", format!("input has {c} channels, block expects {}", cfg.channels)));
    }
    let s = cfg.ssm_fixed_hw;

    let x = g.conv2d(f_in, w.conv_in.weight, w.conv_in.bias)?;
    let x = g.relu(x);
    let x = g.bilinear_resize(x, s, s)?;
    let x = g.reshape(x, &[b, c, s * s])?;
    let seq = g.permute(x, &[0, 2, 1])?;
    let seq = g.layer_norm(seq, w.norm.gamma, w.norm.beta, LAYER_NORM_EPS)?;

    let b1 = g.conv1d_depthwise(seq, w.conv_branch1.weight, w.conv_branch1.bias)?;
    let b1 = match &w.mixer {
        Mixer::Ssm(p) => g.selective_scan(b1, p)?,
        Mixer::Linear(a) => g.linear(b1, a.weight, a.bias)?,
    };
    let b2 = g.conv1d_depthwise(seq, w.conv_branch2.weight, w.conv_branch2.bias)?;
    let attention = g.softmax(b2, 2)?;
    let gated = g.hadamard(b1, attention)?;

    let cross_out = match (&w.conv_cross, cfg.ablation.cross_attention()) {
        (Some(a), true) => {
            let m = g.conv1d_depthwise(attention, a.weight, a.bias)?;
            Some(g.softmax(m, 2)?)
        }
        _ => None,
    };
    Ok(BlockFront { f_in, height: h, width: wd, gated, cross_out })
}

pub fn block_back(
    g: &mut Graph,
    w: &CssmBlockWeights<Var>,
    cfg: &ModelConfig,
    front: &BlockFront,
    cross_in: Option<Var>,
) -> Result<Var> {
    let merged = match cross_in {
        Some(cross) => {
            if g.value(cross).dims() != g.value(front.gated).dims() {
                return Err(Error::shape(
                    "cssm_block",
                    format!("cross input {:?} does not match {:?}", g.value(cross).dims(), g.value(front.gated).dims()),
                ));
            }
            g.hadamard(front.gated, cross)?
        }
        None => front.gated,
    };
    let p = g.linear(merged, w.proj_out.weight, w.proj_out.bias)?;
    let [b, l, c]: [usize; 3] = g.value(p).dims().try_into().unwrap();
    debug_assert_eq!(l, cfg.fixed_len());
    let p = g.permute(p, &[0, 2, 1])?;
    let p = g.reshape(p, &[b, c, cfg.ssm_fixed_hw, cfg.ssm_fixed_hw])?;
    let p = g.bilinear_resize(p, front.height, front.width)?;
    g.add(p, front.f_in)
}

/// One C-SSM block: returns the block output and the cross map for the partner path.
pub fn cssm_block(
    g: &mut Graph,
    w: &CssmBlockWeights<Var>,
    cfg: &ModelConfig,
    f_in: Var,
    cross_in: Option<Var>,
) -> Result<(Var, Option<Var>)> {
    let front = block_front(g, w, cfg, f_in)?;
    let out = block_back(g, w, cfg, &front, cross_in)?;
    Ok((out, front.cross_out))
}

/// Records both paths on `g` and returns the predicted (log-compressed
/// amplitude, `pi`-normalized phase) spectra.
pub fn fdvm_spectra(g: &mut Graph, w: &ModelWeights<Var>, img: &Tensor) -> Result<(Var, Var)> {
    let cfg = &w.config;
    match img.dims() {
        [_, c, h, wd] if *c == IMAGE_CHANNELS && *h >= 1 && *wd >= 1 => {}
        d => return Err(Error::shape("fdvm_forward", format!("expected (B, 3, H, W), got {d:?}"))),
    }
    if w.amp.blocks.len() != w.phase.blocks.len() {
        return Err(Error::Contract("amplitude and phase paths differ in block count".into()));
    }
    let pair = spectral::analyze(img)?;
    let amp_in = g.constant(pair.amplitude);
    let phase_in = g.constant(pair.phase);

    let mut fa = g.conv2d(amp_in, w.amp.lift.weight, w.amp.lift.bias)?;
    let mut fp = g.conv2d(phase_in, w.phase.lift.weight, w.phase.lift.bias)?;
    for (ba, bp) in w.amp.blocks.iter().zip(&w.phase.blocks) {
        let front_a = block_front(g, ba, cfg, fa)?;
        let front_p = block_front(g, bp, cfg, fp)?;
        fa = block_back(g, ba, cfg, &front_a, front_p.cross_out)?;
        fp = block_back(g, bp, cfg, &front_p, front_a.cross_out)?;
    }
    let ha = g.conv2d(fa, w.amp.head.weight, w.amp.head.bias)?;
    let hp = g.conv2d(fp, w.phase.head.weight, w.phase.head.bias)?;
    Ok((g.add(amp_in, ha)?, g.add(phase_in, hp)?))
}

/// Records the full network on `g` for a `(B, 3, H, W)` image batch and
/// returns the reconstructed image.
pub fn fdvm_forward(g: &mut Graph, w: &ModelWeights<Var>, img: &Tensor) -> Result<Var> {
    let (amp, phase) = fdvm_spectra(g, w, img)?;
    let amp = g.expm1(amp);
    let phase = g.scale(phase, PI);
    g.polar_inverse_fft(amp, phase)
}

/// Inference without gradient tracking.
pub fn infer(weights: &ModelWeights, img: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let w = weights.bind_constant(&mut g);
    let out = fdvm_forward(&mut g, &w, img)?;
    let y = g.value(out).clone();
    if !y.all_finite() {
        return Err(Error::Numeric("network output is not finite".into()));
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn small_cfg() -> ModelConfig {
        ModelConfig { channels: 4, blocks_per_path: 2, ssm_state_dim: 2, ssm_fixed_hw: 8, ablation: Ablation::Full }
    }

    fn random_image(dims: [usize; 4], seed: u64) -> Tensor {
        let mut r = substream(seed, "image");
        Tensor::from_fn(dims, |_| r.random_range(0.0..1.0))
    }

    fn randomize(w: &mut ModelWeights, seed: u64) {
        let mut r = substream(seed, "perturb");
        for p in w.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.05..0.05));
        }
    }

    #[test]
    fn closed_form_count_matches_built_weights() {
        let cfg = ModelConfig { channels: 16, ssm_state_dim: 16, blocks_per_path: 8, ..ModelConfig::default() };
        assert_eq!(param_count(&cfg), 59_638);
        for ablation in Ablation::ALL {
            let cfg = ModelConfig { ablation, ..cfg.clone() };
            assert_eq!(build_model(&cfg, 0).unwrap().param_count(), param_count(&cfg), "{ablation}");
        }
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let w = build_model(&small_cfg(), 1).unwrap();
        let names: Vec<String> = w.named_params().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert_eq!(names[0], "amp.lift.weight");
        assert!(names.contains(&"phase.blocks.1.ssm.a_log".to_string()));
        let mut w2 = w.clone();
        let ptrs: Vec<Vec<usize>> = w2.params_mut().into_iter().map(|p| p.dims().to_vec()).collect();
        let dims: Vec<Vec<usize>> = w.named_params().into_iter().map(|(_, p)| p.dims().to_vec()).collect();
        assert_eq!(ptrs, dims);
    }

    #[test]
    fn seeded_build_is_reproducible() {
        let a = build_model(&small_cfg(), 3).unwrap();
        assert_eq!(a, build_model(&small_cfg(), 3).unwrap());
        assert_ne!(a, build_model(&small_cfg(), 4).unwrap());
    }

    #[test]
    fn ablation_tags() {
        let cfg = small_cfg();
        assert_eq!(apply_ablation(&cfg, "no_ssm").unwrap().ablation, Ablation::NoSsm);
        assert!(matches!(apply_ablation(&cfg, "no_conv"), Err(Error::Config(_))));
        let w = build_model(&apply_ablation(&cfg, "no_cross_attention").unwrap(), 0).unwrap();
        assert!(w.amp.blocks.iter().all(|b| b.conv_cross.is_none()));
        let w = build_model(&apply_ablation(&cfg, "no_ssm").unwrap(), 0).unwrap();
        assert!(w.amp.blocks.iter().all(|b| matches!(b.mixer, Mixer::Linear(_))));
    }

    #[test]
    fn block_preserves_shape_and_normalizes_cross_map() {
        let cfg = ModelConfig { channels: 8, ..small_cfg() };
        let mut w = build_model(&cfg, 2).unwrap();
        randomize(&mut w, 2);
        let mut g = Graph::new();
        let vars = w.bind_constant(&mut g);
        let f = g.constant(random_image([2, 8, 20, 24], 5));
        let (out, cross) = cssm_block(&mut g, &vars.amp.blocks[0], &cfg, f, None).unwrap();
        assert_eq!(g.value(out).dims(), &[2, 8, 20, 24]);
        let cross = g.value(cross.unwrap());
        assert_eq!(cross.dims(), &[2, 64, 8]);
        for row in cross.data().chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_projection_block_is_exact_shortcut() {
        let cfg = small_cfg();
        let w = build_model(&cfg, 2).unwrap();
        let mut g = Graph::new();
        let vars = w.bind_constant(&mut g);
        let x = random_image([1, 4, 11, 9], 6);
        let f = g.constant(x.clone());
        let cross = g.constant(Tensor::full([1, 64, 4], 0.25));
        let (out, _) = cssm_block(&mut g, &vars.amp.blocks[0], &cfg, f, Some(cross)).unwrap();
        assert_eq!(g.value(out), &x);
    }

    #[test]
    fn cross_shape_mismatch_is_rejected() {
        let cfg = small_cfg();
        let w = build_model(&cfg, 2).unwrap();
        let mut g = Graph::new();
        let vars = w.bind_constant(&mut g);
        let f = g.constant(random_image([1, 4, 8, 8], 6));
        let cross = g.constant(Tensor::full([1, 32, 4], 0.25));
        assert!(matches!(cssm_block(&mut g, &vars.amp.blocks[0], &cfg, f, Some(cross)), Err(Error::Shape { .. })));
    }

    #[test]
    fn fresh_model_is_identity() {
        let w = build_model(&small_cfg(), 0).unwrap();
        let x = random_image([2, 3, 12, 10], 1);
        assert!(infer(&w, &x).unwrap().max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn forward_is_deterministic_and_shape_preserving() {
        let mut w = build_model(&small_cfg(), 0).unwrap();
        randomize(&mut w, 9);
        for dims in [[1, 3, 13, 8], [2, 3, 9, 17]] {
            let x = random_image(dims, 2);
            let a = infer(&w, &x).unwrap();
            assert_eq!(a.dims(), &dims);
            assert_eq!(a, infer(&w, &x).unwrap());
        }
        assert!(matches!(infer(&w, &Tensor::zeros([1, 1, 8, 8])), Err(Error::Shape { .. })));
    }

    #[test]
    fn param_groups() {
        assert_eq!(ParamGroup::of("amp.lift.weight"), ParamGroup::Lift);
        assert_eq!(ParamGroup::of("amp.blocks.0.norm.gamma"), ParamGroup::LayerNorm);
        assert_eq!(ParamGroup::of("amp.blocks.0.ssm.w_b"), ParamGroup::Ssm);
        assert_eq!(ParamGroup::of("phase.blocks.1.proj_out.bias"), ParamGroup::Projection);
        assert_eq!(ParamGroup::of("phase.blocks.1.conv_cross.weight"), ParamGroup::Conv);
        assert_eq!(ParamGroup::of("phase.head.weight"), ParamGroup::Head);
    }
}
