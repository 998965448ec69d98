//! Miniature joint text–image diffusion transformer and its source-image
//! conditioning variants.
//!
//! Text tokens and image patch tokens are concatenated and processed by
//! shared joint-attention blocks with adaptive layer norm driven by the
//! timestep embedding. Control-branch variants keep a frozen copy of the base
//! network ("base.*") and train a per-layer control stack ("ctrl.*") whose
//! output projections start at zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use shapeedit_numerics::{Graph, NodeId, Scalar, SeededRng, Tensor};

use crate::error::{Error, Result};
use crate::instruction::{SEQ_LEN, VOCAB_SIZE};
use crate::microworld::{AspectBucket, PATCH};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    Editnet,
    Controlnet,
    ControlnetTextcontrol,
    ChannelConcat,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Base, Variant::Editnet, Variant::Controlnet, Variant::ControlnetTextcontrol, Variant::ChannelConcat];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Editnet => "editnet",
            Variant::Controlnet => "controlnet",
            Variant::ControlnetTextcontrol => "controlnet_textcontrol",
            Variant::ChannelConcat => "channel_concat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown variant `{s}`")))
    }

    pub fn has_control(self) -> bool {
        matches!(self, Variant::Editnet | Variant::Controlnet | Variant::ControlnetTextcontrol)
    }

    /// Whether the control branch adds deltas to the base text tokens.
    pub fn updates_text(self) -> bool {
        matches!(self, Variant::Editnet | Variant::ControlnetTextcontrol)
    }

    /// Parallel control stacks run on their own token streams.
    fn parallel(self) -> bool {
        matches!(self, Variant::Controlnet | Variant::ControlnetTextcontrol)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub patch: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub temb_dim: usize,
    pub mlp_ratio: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            hidden: 96,
            heads: 4,
            patch: PATCH,
            vocab: VOCAB_SIZE,
            seq_len: SEQ_LEN,
            temb_dim: 32,
            mlp_ratio: 2,
            variant: Variant::Editnet,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(&self, variant: Variant) -> Self {
        Self { variant, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.layers == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("layers, heads and mlp_ratio must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        // 2-D sinusoidal positions need four equal quarters.
        if self.hidden % 4 != 0 || self.temb_dim % 2 != 0 || self.temb_dim == 0 {
            return bad("hidden must be a multiple of 4 and temb_dim a positive even number".into());
        }
        if self.patch == 0 {
            return bad("patch must be positive".into());
        }
        for b in AspectBucket::ALL {
            let (w, h) = b.dims();
            if w % self.patch != 0 || h % self.patch != 0 {
                return bad(format!("patch {} does not divide bucket {} ({w}x{h})", self.patch, b.name()));
            }
        }
        if self.seq_len == 0 || self.vocab == 0 {
            return bad("seq_len and vocab must be positive".into());
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        if self.variant == Variant::ChannelConcat {
            6
        } else {
            3
        }
    }

    fn patch_dim(&self, channels: usize) -> usize {
        self.patch * self.patch * channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zero,
    /// Normal with this standard deviation.
    Normal(f64),
}

/// Shapes of the base tree for `cfg` (patch embedder sized for the variant's
/// input channels).
fn base_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.hidden;
    let lin = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
    let ada = Init::Normal(0.1 / (d as f64).sqrt());
    let mut v = vec![
        ("base.patch_embed.w".to_string(), vec![cfg.patch_dim(cfg.in_channels()), d], lin(cfg.patch_dim(3))),
        ("base.patch_embed.b".into(), vec![d], Init::Zero),
        ("base.text_embed".into(), vec![cfg.vocab, d], Init::Normal(0.5)),
        ("base.text_pos".into(), vec![cfg.seq_len, d], Init::Normal(0.1)),
        ("base.t_mlp.0.w".into(), vec![cfg.temb_dim, d], lin(cfg.temb_dim)),
        ("base.t_mlp.0.b".into(), vec![d], Init::Zero),
        ("base.t_mlp.1.w".into(), vec![d, d], lin(d)),
        ("base.t_mlp.1.b".into(), vec![d], Init::Zero),
    ];
    for i in 0..cfg.layers {
        v.extend(block_shapes(cfg, &format!("base.layers.{i:02}")));
    }
    v.extend([
        ("base.final.ada.w".into(), vec![d, 2 * d], ada),
        ("base.final.ada.b".into(), vec![2 * d], Init::Zero),
        ("base.final.w".into(), vec![d, cfg.patch_dim(3)], lin(d)),
        ("base.final.b".into(), vec![cfg.patch_dim(3)], Init::Zero),
    ]);
    v
}

fn block_shapes(cfg: &ModelConfig, prefix: &str) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.hidden;
    let m = cfg.mlp_ratio * d;
    let lin = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
    vec![
        (format!("{prefix}.ada.w"), vec![d, 6 * d], Init::Normal(0.1 / (d as f64).sqrt())),
        (format!("{prefix}.ada.b"), vec![6 * d], Init::Zero),
        (format!("{prefix}.qkv.w"), vec![d, 3 * d], lin(d)),
        (format!("{prefix}.qkv.b"), vec![3 * d], Init::Zero),
        (format!("{prefix}.proj.w"), vec![d, d], lin(d)),
        (format!("{prefix}.proj.b"), vec![d], Init::Zero),
        (format!("{prefix}.mlp.0.w"), vec![d, m], lin(d)),
        (format!("{prefix}.mlp.0.b"), vec![m], Init::Zero),
        (format!("{prefix}.mlp.1.w"), vec![m, d], lin(m)),
        (format!("{prefix}.mlp.1.b"), vec![d], Init::Zero),
    ]
}

/// Control tree: `(name, shape, base tensor to copy or None for zero)`.
fn ctrl_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Option<String>)> {
    let d = cfg.hidden;
    let mut v = vec![
        ("ctrl.src_embed.w".to_string(), vec![cfg.patch_dim(3), d], Some("base.patch_embed.w".to_string())),
        ("ctrl.src_embed.b".into(), vec![d], Some("base.patch_embed.b".into())),
    ];
    if cfg.variant.parallel() {
        for n in ["text_embed", "text_pos", "t_mlp.0.w", "t_mlp.0.b", "t_mlp.1.w", "t_mlp.1.b"] {
            let shape = base_shapes(cfg).into_iter().find(|(b, _, _)| *b == format!("base.{n}")).unwrap().1;
            v.push((format!("ctrl.{n}"), shape, Some(format!("base.{n}"))));
        }
    }
    for i in 0..cfg.layers {
        let base = format!("base.layers.{i:02}");
        let ctrl = format!("ctrl.layers.{i:02}");
        for (name, shape, _) in block_shapes(cfg, &ctrl) {
            let src = name.replacen(&ctrl, &base, 1);
            v.push((name, shape, Some(src)));
        }
        v.push((format!("{ctrl}.out_img.w"), vec![d, d], None));
        v.push((format!("{ctrl}.out_img.b"), vec![d], None));
        if cfg.variant.updates_text() {
            v.push((format!("{ctrl}.out_txt.w"), vec![d, d], None));
            v.push((format!("{ctrl}.out_txt.b"), vec![d], None));
        }
    }
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S: Scalar = f32> {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("{} model has no parameter `{name}`", self.config.variant)))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Frozen parameters stay fixed during training: the whole base tree for
    /// control-branch variants, nothing otherwise.
    pub fn is_trainable(&self, name: &str) -> bool {
        !(self.config.variant.has_control() && name.starts_with("base."))
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// SHA-256 over the names and bytes of every parameter under `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors.range(prefix.to_string()..).take_while(|(n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            h.update(t.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks that names and shapes match what `config` requires.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let mut want: BTreeMap<String, Vec<usize>> =
            base_shapes(&self.config).into_iter().map(|(n, s, _)| (n, s)).collect();
        if self.config.variant.has_control() {
            want.extend(ctrl_shapes(&self.config).into_iter().map(|(n, s, _)| (n, s)));
        }
        for (name, shape) in &want {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Invalid(format!("parameter `{name}` has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !want.contains_key(*k)) {
            return Err(Error::Invalid(format!("unexpected parameter `{extra}` for {}", self.config.variant)));
        }
        Ok(())
    }
}

fn sample_init<S: Scalar>(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor<S> {
    match init {
        Init::Zero => Tensor::zeros(shape),
        Init::Normal(std) => {
            let mut rng = SeededRng::labeled(seed, &format!("init/{name}"));
            Tensor::from_fn(shape, |_| S::from_f64(std * rng.normal()))
        }
    }
}

/// Builds parameters for `config`. The base tree comes from `base` when
/// given (it must be a trained `Base` model with matching dimensions),
/// otherwise from `seed`; each tensor draws from its own labelled stream, so
/// base weights agree across variants for one seed. Control layers start as
/// copies of the base layers, control output projections at zero. For
/// `channel_concat` the extra source channels of the patch embedder start at
/// zero.
pub fn init_model<S: Scalar>(config: &ModelConfig, seed: u64, base: Option<&ModelParams<S>>) -> Result<ModelParams<S>> {
    config.validate()?;
    let base_cfg = config.with_variant(Variant::Base);
    if let Some(b) = base {
        if b.config != base_cfg {
            return Err(Error::Checkpoint(format!(
                "base checkpoint config {:?} does not match requested model {:?}",
                b.config, base_cfg
            )));
        }
        b.validate()?;
    }
    let mut tensors = BTreeMap::new();
    for (name, shape, init) in base_shapes(&base_cfg) {
        let t = match base {
            Some(b) => b.get(&name)?.clone(),
            None => sample_init(seed, &name, &shape, init),
        };
        tensors.insert(name, t);
    }
    if config.variant == Variant::ChannelConcat {
        let w3 = &tensors["base.patch_embed.w"];
        let d = config.hidden;
        let pp = config.patch * config.patch;
        let mut w6 = Tensor::zeros(&[pp * 6, d]);
        for k in 0..pp {
            for c in 0..3 {
                let (from, to) = ((k * 3 + c) * d, (k * 6 + c) * d);
                w6.data_mut()[to..to + d].copy_from_slice(&w3.data()[from..from + d]);
            }
        }
        tensors.insert("base.patch_embed.w".into(), w6);
    }
    if config.variant.has_control() {
        for (name, shape, src) in ctrl_shapes(config) {
            let t = match src {
                Some(s) => tensors[&s].clone(),
                None => Tensor::zeros(&shape),
            };
            tensors.insert(name, t);
        }
    }
    let params = ModelParams { config: config.clone(), tensors };
    params.validate()?;
    Ok(params)
}

/// Registers every parameter on `g`: trainable ones as gradient leaves,
/// frozen ones (or all, when `frozen_all`) as constants.
pub fn bind<S: Scalar>(g: &mut Graph<S>, params: &ModelParams<S>, frozen_all: bool) -> BTreeMap<String, NodeId> {
    params
        .tensors
        .iter()
        .map(|(name, t)| {
            let id = if !frozen_all && params.is_trainable(name) { g.param(t.clone()) } else { g.constant(t.clone()) };
            (name.clone(), id)
        })
        .collect()
}

/// One denoising batch. Images are `[B, H, W, 3]` in data space; `tokens`
/// holds `B · seq_len` ids; `t` one timestep per sample.
pub struct Batch<'a, S: Scalar> {
    pub x_t: &'a Tensor<S>,
    pub x_src: &'a Tensor<S>,
    pub tokens: &'a [usize],
    pub t: &'a [usize],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Base,
    Control,
}

/// Tokens entering and leaving one layer.
#[derive(Clone, Debug)]
pub struct TraceEntry<S: Scalar> {
    pub branch: Branch,
    pub layer: usize,
    pub img_in: Tensor<S>,
    pub txt_in: Tensor<S>,
    pub img_out: Tensor<S>,
    pub txt_out: Tensor<S>,
}

/// Receives the base `(image, text)` tokens a control layer is about to
/// read and returns additive perturbations for that view only.
pub type ControlViewHook<'a, S> = dyn FnMut(usize, &Tensor<S>, &Tensor<S>) -> (Tensor<S>, Tensor<S>) + 'a;

#[derive(Default)]
pub struct ForwardOptions<'a, S: Scalar> {
    pub trace: bool,
    pub control_view: Option<&'a mut ControlViewHook<'a, S>>,
}

pub struct ForwardOutput<S: Scalar> {
    /// ε-prediction node, `[B, H, W, 3]`.
    pub eps: NodeId,
    pub trace: Vec<TraceEntry<S>>,
}

struct Net<'g, S: Scalar> {
    g: &'g mut Graph<S>,
    p: &'g BTreeMap<String, NodeId>,
    cfg: &'g ModelConfig,
}

impl<S: Scalar> Net<'_, S> {
    fn w(&self, name: &str) -> Result<NodeId> {
        self.p
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("{} forward needs parameter `{name}`", self.cfg.variant)))
    }

    /// `x · W + b` over the last axis.
    fn linear(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let (w, b) = (self.w(&format!("{prefix}.w"))?, self.w(&format!("{prefix}.b"))?);
        let shape = self.g.shape(x).to_vec();
        let din = *shape.last().unwrap();
        let dout = self.g.shape(w)[1];
        let rows = shape[..shape.len() - 1].iter().product();
        let x2 = self.g.reshape(x, &[rows, din]);
        let y = self.g.matmul(x2, w);
        let y = self.g.add(y, b);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = dout;
        Ok(self.g.reshape(y, &out_shape))
    }

    fn const_t(&mut self, t: Tensor<S>) -> NodeId {
        self.g.constant(t)
    }

    /// `[B, H, W, C] → [B, P, p·p·C]`.
    fn patchify(&mut self, x: NodeId) -> NodeId {
        let s = self.g.shape(x).to_vec();
        let (b, h, w, c, p) = (s[0], s[1], s[2], s[3], self.cfg.patch);
        let r = self.g.reshape(x, &[b, h / p, p, w / p, p, c]);
        let r = self.g.transpose(r, &[0, 1, 3, 2, 4, 5]);
        self.g.reshape(r, &[b, (h / p) * (w / p), p * p * c])
    }

    fn unpatchify(&mut self, y: NodeId, h: usize, w: usize) -> NodeId {
        let b = self.g.shape(y)[0];
        let p = self.cfg.patch;
        let r = self.g.reshape(y, &[b, h / p, w / p, p, p, 3]);
        let r = self.g.transpose(r, &[0, 1, 3, 2, 4, 5]);
        self.g.reshape(r, &[b, h, w, 3])
    }

    fn embed_patches(&mut self, x: NodeId, prefix: &str, pos: NodeId) -> Result<NodeId> {
        let patches = self.patchify(x);
        let e = self.linear(patches, prefix)?;
        Ok(self.g.add(e, pos))
    }

    fn embed_text(&mut self, tokens: &[usize], prefix: &str) -> Result<NodeId> {
        let b = tokens.len() / self.cfg.seq_len;
        let table = self.w(&format!("{prefix}text_embed"))?;
        let pos = self.w(&format!("{prefix}text_pos"))?;
        let e = self.g.gather(table, tokens);
        let e = self.g.reshape(e, &[b, self.cfg.seq_len, self.cfg.hidden]);
        Ok(self.g.add(e, pos))
    }

    fn time_cond(&mut self, temb: NodeId, prefix: &str) -> Result<NodeId> {
        let h = self.linear(temb, &format!("{prefix}t_mlp.0"))?;
        let h = self.g.silu(h);
        self.linear(h, &format!("{prefix}t_mlp.1"))
    }

    /// Chunk `k` of a `[B, n·D]` modulation vector as `[B, 1, D]`.
    fn chunk(&mut self, m: NodeId, k: usize) -> NodeId {
        let (b, d) = (self.g.shape(m)[0], self.cfg.hidden);
        let s = self.g.slice(m, 1, k * d, d);
        self.g.reshape(s, &[b, 1, d])
    }

    /// `LN(x) · (1 + scale) + shift`.
    fn modulate(&mut self, x: NodeId, shift: NodeId, scale: NodeId) -> NodeId {
        let ones = self.const_t(Tensor::ones(&[self.cfg.hidden]));
        let s1 = self.g.add(scale, ones);
        let n = self.g.layernorm(x);
        let y = self.g.mul(n, s1);
        self.g.add(y, shift)
    }

    fn attention(&mut self, h: NodeId, prefix: &str) -> Result<NodeId> {
        let s = self.g.shape(h).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        let heads = self.cfg.heads;
        let dh = d / heads;
        let qkv = self.linear(h, &format!("{prefix}.qkv"))?;
        let split = |net: &mut Self, k: usize, perm: &[usize], out: [usize; 3]| {
            let x = net.g.slice(qkv, 2, k * d, d);
            let x = net.g.reshape(x, &[b, n, heads, dh]);
            let x = net.g.transpose(x, perm);
            net.g.reshape(x, &out)
        };
        let q = split(self, 0, &[0, 2, 1, 3], [b * heads, n, dh]);
        let kt = split(self, 1, &[0, 2, 3, 1], [b * heads, dh, n]);
        let v = split(self, 2, &[0, 2, 1, 3], [b * heads, n, dh]);
        let scores = self.g.matmul(q, kt);
        let scores = self.g.scale(scores, 1.0 / (dh as f64).sqrt());
        let a = self.g.softmax(scores);
        let o = self.g.matmul(a, v);
        let o = self.g.reshape(o, &[b, heads, n, dh]);
        let o = self.g.transpose(o, &[0, 2, 1, 3]);
        let o = self.g.reshape(o, &[b, n, d]);
        self.linear(o, &format!("{prefix}.proj"))
    }

    /// One joint block on `[txt ‖ img]`; returns the updated `(img, txt)`.
    fn block(&mut self, prefix: &str, img: NodeId, txt: NodeId, cond: NodeId) -> Result<(NodeId, NodeId)> {
        let l = self.g.shape(txt)[1];
        let p = self.g.shape(img)[1];
        let x = self.g.concat(&[txt, img], 1);
        let c = self.g.silu(cond);
        let m = self.linear(c, &format!("{prefix}.ada"))?;
        let [sh1, sc1, g1, sh2, sc2, g2] = std::array::from_fn(|k| self.chunk(m, k));

        let h = self.modulate(x, sh1, sc1);
        let a = self.attention(h, prefix)?;
        let a = self.g.mul(a, g1);
        let x = self.g.add(x, a);

        let h = self.modulate(x, sh2, sc2);
        let f = self.linear(h, &format!("{prefix}.mlp.0"))?;
        let f = self.g.gelu(f);
        let f = self.linear(f, &format!("{prefix}.mlp.1"))?;
        let f = self.g.mul(f, g2);
        let x = self.g.add(x, f);

        let txt = self.g.slice(x, 1, 0, l);
        let img = self.g.slice(x, 1, l, p);
        Ok((img, txt))
    }

    fn head(&mut self, img: NodeId, cond: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let c = self.g.silu(cond);
        let m = self.linear(c, "base.final.ada")?;
        let (shift, scale) = (self.chunk(m, 0), self.chunk(m, 1));
        let y = self.modulate(img, shift, scale);
        let y = self.linear(y, "base.final")?;
        Ok(self.unpatchify(y, h, w))
    }
}

/// Sinusoidal timestep features, `[B, dim]`.
pub fn timestep_features<S: Scalar>(t: &[usize], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let freqs = (0..half).map(|i| (-(10_000f64).ln() * i as f64 / half as f64).exp() * step as f64);
        let f: Vec<f64> = freqs.collect();
        out.extend(f.iter().map(|a| S::from_f64(a.sin())));
        out.extend(f.iter().map(|a| S::from_f64(a.cos())));
    }
    Tensor::new(vec![t.len(), dim], out).expect("finite features")
}

/// Fixed 2-D sinusoidal position table for a `gh × gw` patch grid, `[P, D]`.
pub fn grid_positions<S: Scalar>(gh: usize, gw: usize, d: usize) -> Tensor<S> {
    let q = d / 4;
    let mut out = Vec::with_capacity(gh * gw * d);
    for y in 0..gh {
        for x in 0..gw {
            for coord in [y, x] {
                let f: Vec<f64> =
                    (0..q).map(|i| coord as f64 / (10_000f64).powf(i as f64 / q as f64)).collect();
                out.extend(f.iter().map(|a| S::from_f64(a.sin())));
                out.extend(f.iter().map(|a| S::from_f64(a.cos())));
            }
        }
    }
    Tensor::new(vec![gh * gw, d], out).expect("finite positions")
}

/// Builds the ε-prediction for `batch` on `g` using bound parameters.
pub fn forward<S: Scalar>(
    g: &mut Graph<S>,
    config: &ModelConfig,
    params: &BTreeMap<String, NodeId>,
    batch: &Batch<'_, S>,
    opts: ForwardOptions<'_, S>,
) -> Result<ForwardOutput<S>> {
    let s = batch.x_t.shape().to_vec();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::Invalid(format!("x_t must be [B, H, W, 3], got {s:?}")));
    }
    if batch.x_src.shape() != s.as_slice() {
        return Err(Error::Invalid(format!("x_src {:?} does not match x_t {s:?}", batch.x_src.shape())));
    }
    let (b, h, w) = (s[0], s[1], s[2]);
    if h % config.patch != 0 || w % config.patch != 0 {
        return Err(Error::Invalid(format!("{w}x{h} is not aligned to patch {}", config.patch)));
    }
    if batch.tokens.len() != b * config.seq_len || batch.t.len() != b {
        return Err(Error::Invalid(format!(
            "batch of {b} needs {} tokens and {b} timesteps, got {} and {}",
            b * config.seq_len,
            batch.tokens.len(),
            batch.t.len()
        )));
    }
    if let Some(&bad) = batch.tokens.iter().find(|&&id| id >= config.vocab) {
        return Err(Error::Invalid(format!("token id {bad} outside vocabulary of {}", config.vocab)));
    }

    let ForwardOptions { trace: want_trace, mut control_view } = opts;
    let mut trace = Vec::new();
    let mut net = Net { g, p: params, cfg: config };
    let variant = config.variant;

    let pos = net.const_t(grid_positions(h / config.patch, w / config.patch, config.hidden));
    let temb = net.const_t(timestep_features(batch.t, config.temb_dim));
    let x_t = net.const_t(batch.x_t.clone());
    let x_src = net.const_t(batch.x_src.clone());

    let input = if variant == Variant::ChannelConcat { net.g.concat(&[x_t, x_src], 3) } else { x_t };
    let mut img = net.embed_patches(input, "base.patch_embed", pos)?;
    let mut txt = net.embed_text(batch.tokens, "base.")?;
    let cond = net.time_cond(temb, "base.")?;

    let src = if variant.has_control() { Some(net.embed_patches(x_src, "ctrl.src_embed", pos)?) } else { None };
    let mut par = if variant.parallel() {
        let ctxt = net.embed_text(batch.tokens, "ctrl.")?;
        let ccond = net.time_cond(temb, "ctrl.")?;
        Some((src.unwrap(), ctxt, ccond))
    } else {
        None
    };

    let snap = |net: &Net<'_, S>, n: NodeId| net.g.value(n).clone();
    for i in 0..config.layers {
        let ctrl = format!("ctrl.layers.{i:02}");
        if variant.has_control() {
            let (ci_in, ct_in, ci, ct) = if let Some((cimg, ctxt, ccond)) = par.as_mut() {
                let (ni, nt) = net.block(&ctrl, *cimg, *ctxt, *ccond)?;
                let io = (*cimg, *ctxt, ni, nt);
                *cimg = ni;
                *ctxt = nt;
                io
            } else {
                let (mut vi, mut vt) = (img, txt);
                if let Some(hook) = control_view.as_mut() {
                    let (di, dt) = hook(i, net.g.value(img), net.g.value(txt));
                    let (di, dt) = (net.const_t(di), net.const_t(dt));
                    vi = net.g.add(vi, di);
                    vt = net.g.add(vt, dt);
                }
                let ci_in = net.g.add(vi, src.unwrap());
                let (ni, nt) = net.block(&ctrl, ci_in, vt, cond)?;
                (ci_in, vt, ni, nt)
            };
            if want_trace {
                trace.push(TraceEntry {
                    branch: Branch::Control,
                    layer: i,
                    img_in: snap(&net, ci_in),
                    txt_in: snap(&net, ct_in),
                    img_out: snap(&net, ci),
                    txt_out: snap(&net, ct),
                });
            }
            let di = net.linear(ci, &format!("{ctrl}.out_img"))?;
            img = net.g.add(img, di);
            if variant.updates_text() {
                let dt = net.linear(ct, &format!("{ctrl}.out_txt"))?;
                txt = net.g.add(txt, dt);
            }
        }
        let (img_in, txt_in) = (img, txt);
        let (ni, nt) = net.block(&format!("base.layers.{i:02}"), img, txt, cond)?;
        img = ni;
        txt = nt;
        if want_trace {
            trace.push(TraceEntry {
                branch: Branch::Base,
                layer: i,
                img_in: snap(&net, img_in),
                txt_in: snap(&net, txt_in),
                img_out: snap(&net, img),
                txt_out: snap(&net, txt),
            });
        }
    }
    let eps = net.head(img, cond, h, w)?;
    Ok(ForwardOutput { eps, trace })
}

/// Stacks single images `[H, W, 3]` into `[B, H, W, 3]`.
pub fn stack<S: Scalar>(items: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let first = items.first().ok_or_else(|| Error::Invalid("empty batch".into()))?.shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        if t.shape() != first.as_slice() {
            return Err(Error::Invalid(format!("batch mixes shapes {first:?} and {:?}", t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend(first);
    Ok(Tensor::new(shape, data)?)
}

/// Inference-only ε-prediction for one sample `[H, W, 3]`.
pub fn predict<S: Scalar>(
    params: &ModelParams<S>,
    x_t: &Tensor<S>,
    x_src: &Tensor<S>,
    tokens: &[usize],
    t: usize,
) -> Result<Tensor<S>> {
    predict_traced(params, x_t, x_src, tokens, t, ForwardOptions::default()).map(|(e, _)| e)
}

/// [`predict`] with tracing and hooks.
pub fn predict_traced<S: Scalar>(
    params: &ModelParams<S>,
    x_t: &Tensor<S>,
    x_src: &Tensor<S>,
    tokens: &[usize],
    t: usize,
    opts: ForwardOptions<'_, S>,
) -> Result<(Tensor<S>, Vec<TraceEntry<S>>)> {
    let mut g = Graph::new();
    let bound = bind(&mut g, params, true);
    let (xb, sb) = (stack(&[x_t])?, stack(&[x_src])?);
    let out = forward(&mut g, &params.config, &bound, &Batch { x_t: &xb, x_src: &sb, tokens, t: &[t] }, opts)?;
    let eps = g.value(out.eps).reshaped(x_t.shape())?;
    if !eps.all_finite() {
        return Err(Error::Numerics(shapeedit_numerics::NumericsError::NonFinite { op: "editnet forward" }));
    }
    Ok((eps, out.trace))
}
