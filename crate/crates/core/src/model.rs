//! The dual-stream TIR-D tracking network.
//!
//! Per stream: a 1→3 channel adaptation layer (conv3×3, ReLU, conv1×1) and a
//! strided conv backbone. Template and search features of every stream are
//! flattened into one token sequence, tagged with positional and source
//! embeddings, and run through a pre-norm transformer encoder. A single
//! learned query cross-attends to the encoded sequence; its similarity with
//! the search tokens modulates them before a five-layer conv head predicts
//! top-left and bottom-right corner logit maps. Boxes are decoded by
//! soft-argmax over those maps.
//!
//! Parameter names follow `<component>.<layer>.<tensor>`; in the dual layout
//! the per-stream components are `tir_adapter`, `depth_adapter`,
//! `tir_backbone` and `depth_backbone`, in the single (thermal-only) layout
//! they are `adapter` and `backbone`. Shared components are `fusion.*` and
//! `head.*`.

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::params::{fans, xavier_uniform, Bound, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub adapter_mid_channels: usize,
    /// Per-stage widths; stages past the end of the list reuse the last width.
    pub backbone_channels: Vec<usize>,
    /// Total downsampling; must be a power of two.
    pub backbone_stride: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_fusion_layers: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub head_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            adapter_mid_channels: 16,
            backbone_channels: vec![16, 32, 64],
            backbone_stride: 16,
            d_model: 64,
            n_heads: 4,
            n_fusion_layers: 2,
            template_size: 64,
            search_size: 128,
            head_channels: 32,
        }
    }
}

pub const MLP_RATIO: usize = 4;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("adapter_mid_channels", self.adapter_mid_channels),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_fusion_layers", self.n_fusion_layers),
            ("head_channels", self.head_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return Err(Error::Config("model.backbone_channels must be non-empty and positive".into()));
        }
        if self.backbone_stride < 2 || !self.backbone_stride.is_power_of_two() {
            return Err(Error::Config(format!(
                "model.backbone_stride must be a power of two ≥ 2, got {}",
                self.backbone_stride
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model {} is not divisible by model.n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        for (name, size) in [("template_size", self.template_size), ("search_size", self.search_size)] {
            if size == 0 || size % self.backbone_stride != 0 {
                return Err(Error::Config(format!(
                    "model.{name} {size} is not divisible by backbone stride {}",
                    self.backbone_stride
                )));
            }
        }
        Ok(())
    }

    pub fn n_stages(&self) -> usize {
        self.backbone_stride.trailing_zeros() as usize
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        let last = self.backbone_channels.len() - 1;
        self.backbone_channels[stage.min(last)]
    }

    /// Side of the template feature grid.
    pub fn template_grid(&self) -> usize {
        self.template_size / self.backbone_stride
    }

    /// Side of the search feature grid (and of the corner maps).
    pub fn search_grid(&self) -> usize {
        self.search_size / self.backbone_stride
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let channels = self
            .backbone_channels
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("model.adapter_mid_channels".into(), self.adapter_mid_channels.to_string()),
            ("model.backbone_channels".into(), channels),
            ("model.backbone_stride".into(), self.backbone_stride.to_string()),
            ("model.d_model".into(), self.d_model.to_string()),
            ("model.n_heads".into(), self.n_heads.to_string()),
            ("model.n_fusion_layers".into(), self.n_fusion_layers.to_string()),
            ("model.template_size".into(), self.template_size.to_string()),
            ("model.search_size".into(), self.search_size.to_string()),
            ("model.head_channels".into(), self.head_channels.to_string()),
        ]
    }

    /// Applies one `model.*` key; returns `false` for keys outside this section.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        let Some(field) = key.strip_prefix("model.") else {
            return Ok(false);
        };
        let int = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got `{v}`")))
        };
        match field {
            "adapter_mid_channels" => self.adapter_mid_channels = int(value)?,
            "backbone_channels" => {
                self.backbone_channels = value.split(',').map(int).collect::<Result<_>>()?;
            }
            "backbone_stride" => self.backbone_stride = int(value)?,
            "d_model" => self.d_model = int(value)?,
            "n_heads" => self.n_heads = int(value)?,
            "n_fusion_layers" => self.n_fusion_layers = int(value)?,
            "template_size" => self.template_size = int(value)?,
            "search_size" => self.search_size = int(value)?,
            "head_channels" => self.head_channels = int(value)?,
            "streams" => {}
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(true)
    }
}

/// Which input streams a net consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Streams {
    /// Thermal only; the source-domain network of the transfer procedure.
    Single,
    /// Thermal + depth.
    Dual,
}

impl Streams {
    pub fn count(self) -> usize {
        match self {
            Streams::Single => 1,
            Streams::Dual => 2,
        }
    }

    pub fn adapter_prefixes(self) -> &'static [&'static str] {
        match self {
            Streams::Single => &["adapter"],
            Streams::Dual => &["tir_adapter", "depth_adapter"],
        }
    }

    pub fn backbone_prefixes(self) -> &'static [&'static str] {
        match self {
            Streams::Single => &["backbone"],
            Streams::Dual => &["tir_backbone", "depth_backbone"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Streams::Single => "single",
            Streams::Dual => "dual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "single" | "thermal" => Ok(Streams::Single),
            "dual" | "tird" => Ok(Streams::Dual),
            other => Err(Error::Config(format!("unknown stream layout `{other}`"))),
        }
    }
}

/// Corner logits over the search feature grid, each `h×w`.
#[derive(Clone, Debug, PartialEq)]
pub struct CornerMaps {
    pub tl: Tensor,
    pub br: Tensor,
}

/// Template and search crops, one `1×S×S` tensor per stream.
#[derive(Clone, Debug)]
pub struct NetInput {
    pub template: Vec<Tensor>,
    pub search: Vec<Tensor>,
}

/// Tape handles produced by one forward pass.
pub struct NetOutput {
    /// `2×h×w` logits, channel 0 top-left, channel 1 bottom-right.
    pub maps: Var,
    /// `[x, y, w, h]` in search-crop pixels, before the minimum-size clamp.
    pub raw_box: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerNet {
    config: ModelConfig,
    streams: Streams,
    params: ParamStore,
}

/// Alias used where the two-stream layout is implied.
pub type DualStreamNet = TrackerNet;

impl TrackerNet {
    pub fn new(config: ModelConfig, streams: Streams, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::derived(seed, 0x6d6f_6465_6c);
        let params = build_params(&config, streams, &mut rng)?;
        Ok(Self {
            config,
            streams,
            params,
        })
    }

    pub fn dual(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, Streams::Dual, seed)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn streams(&self) -> Streams {
        self.streams
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.names().map(String::from).collect()
    }

    /// Records the full forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: &NetInput) -> Result<NetOutput> {
        self.forward_traced(tape, bound, input, None)
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: &NetInput,
        attention: Option<&mut Vec<Var>>,
    ) -> Result<NetOutput> {
        let n = self.streams.count();
        if input.template.len() != n || input.search.len() != n {
            return Err(Error::Usage(format!(
                "{} layout needs {n} template and {n} search crops, got {} and {}",
                self.streams.name(),
                input.template.len(),
                input.search.len()
            )));
        }
        let cfg = &self.config;
        let mut z_feats = Vec::with_capacity(n);
        let mut x_feats = Vec::with_capacity(n);
        for s in 0..n {
            let adapter = self.streams.adapter_prefixes()[s];
            let backbone = self.streams.backbone_prefixes()[s];
            for (crop, size, out) in [
                (&input.template[s], cfg.template_size, &mut z_feats),
                (&input.search[s], cfg.search_size, &mut x_feats),
            ] {
                if crop.shape() != [1, size, size] {
                    return Err(Error::Usage(format!(
                        "expected a 1×{size}×{size} crop, got {:?}",
                        crop.shape()
                    )));
                }
                let x = tape.constant(crop.clone());
                let a = adapt(tape, bound, adapter, x)?;
                out.push(backbone_forward(tape, bound, backbone, cfg, a)?);
            }
        }
        let (tokens, query) = fuse(tape, bound, cfg, &z_feats, &x_feats, attention)?;
        let maps = corner_head(tape, bound, cfg, tokens, query)?;
        let raw_box = decode_box_on_tape(tape, maps, cfg.search_size, cfg.backbone_stride)?;
        Ok(NetOutput { maps, raw_box })
    }

    /// Inference: predicted box in search-crop pixels and the corner logits.
    pub fn predict(&self, input: &NetInput) -> Result<(BBox, CornerMaps)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, input)?;
        let maps = split_maps(tape.value(out.maps))?;
        let bbox = decode_box(&maps, self.config.search_size, self.config.backbone_stride);
        if !bbox.is_valid() {
            return Err(Error::Numeric("non-finite box prediction".into()));
        }
        Ok((bbox, maps))
    }
}

fn split_maps(maps: &Tensor) -> Result<CornerMaps> {
    let [2, h, w] = maps.shape() else {
        return Err(Error::Dimension(format!("corner maps must be 2×h×w, got {:?}", maps.shape())));
    };
    let n = h * w;
    Ok(CornerMaps {
        tl: Tensor::new(vec![*h, *w], maps.data()[..n].to_vec())?,
        br: Tensor::new(vec![*h, *w], maps.data()[n..].to_vec())?,
    })
}

struct ParamBuilder<'a> {
    store: ParamStore,
    rng: &'a mut SeededRng,
}

impl ParamBuilder<'_> {
    fn weight(&mut self, name: String, shape: &[usize]) -> Result<()> {
        let (fi, fo) = fans(shape);
        let t = xavier_uniform(shape, fi, fo, self.rng);
        self.store.insert(name, t)
    }

    fn zeros(&mut self, name: String, n: usize) -> Result<()> {
        self.store.insert(name, Tensor::zeros(&[n]))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.store.insert(format!("{prefix}.gamma"), Tensor::ones(&[d]))?;
        self.store.insert(format!("{prefix}.beta"), Tensor::zeros(&[d]))
    }

    fn linear(&mut self, prefix: &str, w: &str, b: &str, d_in: usize, d_out: usize) -> Result<()> {
        self.weight(format!("{prefix}.{w}"), &[d_in, d_out])?;
        self.zeros(format!("{prefix}.{b}"), d_out)
    }

    /// Attention + MLP block; `cross` blocks normalize query and memory separately.
    fn block(&mut self, prefix: &str, d: usize, cross: bool) -> Result<()> {
        if cross {
            self.norm(&format!("{prefix}.norm_q"), d)?;
            self.norm(&format!("{prefix}.norm_mem"), d)?;
        } else {
            self.norm(&format!("{prefix}.norm1"), d)?;
        }
        for proj in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.attn"), &format!("w{proj}"), &format!("b{proj}"), d, d)?;
        }
        self.norm(&format!("{prefix}.norm2"), d)?;
        self.linear(&format!("{prefix}.mlp"), "fc1.weight", "fc1.bias", d, MLP_RATIO * d)?;
        self.linear(&format!("{prefix}.mlp"), "fc2.weight", "fc2.bias", MLP_RATIO * d, d)
    }
}

fn build_params(cfg: &ModelConfig, streams: Streams, rng: &mut SeededRng) -> Result<ParamStore> {
    let mut b = ParamBuilder {
        store: ParamStore::new(),
        rng,
    };
    let d = cfg.d_model;

    for s in 0..streams.count() {
        let a = streams.adapter_prefixes()[s];
        let m = cfg.adapter_mid_channels;
        b.weight(format!("{a}.conv1.weight"), &[m, 1, 3, 3])?;
        b.zeros(format!("{a}.conv1.bias"), m)?;
        b.weight(format!("{a}.conv2.weight"), &[3, m, 1, 1])?;
        b.zeros(format!("{a}.conv2.bias"), 3)?;

        let bb = streams.backbone_prefixes()[s];
        let mut c_prev = 3;
        for stage in 0..cfg.n_stages() {
            let c = cfg.stage_channels(stage);
            b.weight(format!("{bb}.stage{stage}.weight"), &[c, c_prev, 3, 3])?;
            b.zeros(format!("{bb}.stage{stage}.bias"), c)?;
            c_prev = c;
        }
        b.weight(format!("{bb}.proj.weight"), &[d, c_prev, 1, 1])?;
        b.zeros(format!("{bb}.proj.bias"), d)?;
    }

    let gz = cfg.template_grid();
    let gx = cfg.search_grid();
    b.weight("fusion.pos_template".into(), &[gz * gz, d])?;
    b.weight("fusion.pos_search".into(), &[gx * gx, d])?;
    b.weight("fusion.source_embed".into(), &[2 * streams.count(), d])?;
    for layer in 0..cfg.n_fusion_layers {
        b.block(&format!("fusion.encoder.{layer}"), d, false)?;
    }
    b.weight("fusion.decoder.query".into(), &[1, d])?;
    b.block("fusion.decoder", d, true)?;

    let mut c_prev = d;
    for layer in 0..5 {
        let c = if layer == 4 { 2 } else { cfg.head_channels };
        b.weight(format!("head.conv{layer}.weight"), &[c, c_prev, 3, 3])?;
        b.zeros(format!("head.conv{layer}.bias"), c)?;
        c_prev = c;
    }
    Ok(b.store)
}

/// Adaptation layer: conv3×3 (1→mid, padding 1), ReLU, conv1×1 (mid→3).
pub fn adapt(tape: &mut Tape, bound: &Bound, prefix: &str, input: Var) -> Result<Var> {
    let shape = tape.value(input).shape().to_vec();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::Usage(format!(
            "adaptation layer expects a single-channel 1×H×W input, got {shape:?}"
        )));
    }
    let h = tape.conv2d(input, bound.var(&format!("{prefix}.conv1.weight"))?, 1, 1)?;
    let h = tape.add_channel_bias(h, bound.var(&format!("{prefix}.conv1.bias"))?)?;
    let h = tape.relu(h);
    let out = tape.conv2d(h, bound.var(&format!("{prefix}.conv2.weight"))?, 1, 0)?;
    tape.add_channel_bias(out, bound.var(&format!("{prefix}.conv2.bias"))?)
}

/// Strided conv stack: `log2(stride)` stages of conv3×3 stride 2 + ReLU,
/// then a 1×1 projection to `d_model` channels.
pub fn backbone_forward(tape: &mut Tape, bound: &Bound, prefix: &str, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let [_, h, w] = shape[..] else {
        return Err(Error::Usage(format!("backbone expects C×H×W, got {shape:?}")));
    };
    if h % cfg.backbone_stride != 0 || w % cfg.backbone_stride != 0 {
        return Err(Error::Config(format!(
            "backbone input {h}×{w} is not divisible by stride {}",
            cfg.backbone_stride
        )));
    }
    let mut x = x;
    for stage in 0..cfg.n_stages() {
        let wt = bound.var(&format!("{prefix}.stage{stage}.weight"))?;
        x = tape.conv2d_padded(x, wt, 2, 0, 1)?;
        x = tape.add_channel_bias(x, bound.var(&format!("{prefix}.stage{stage}.bias"))?)?;
        x = tape.relu(x);
    }
    let x = tape.conv2d(x, bound.var(&format!("{prefix}.proj.weight"))?, 1, 0)?;
    tape.add_channel_bias(x, bound.var(&format!("{prefix}.proj.bias"))?)
}

fn linear(tape: &mut Tape, bound: &Bound, x: Var, w: &str, b: &str) -> Result<Var> {
    let y = tape.matmul(x, bound.var(w)?)?;
    tape.add_bias(y, bound.var(b)?)
}

fn layer_norm(tape: &mut Tape, bound: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let g = bound.var(&format!("{prefix}.gamma"))?;
    let b = bound.var(&format!("{prefix}.beta"))?;
    tape.layer_norm(x, g, b)
}

/// Multi-head attention of `queries` (n_q×C) over `memory` (n_k×C).
pub fn multi_head_attention(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    queries: Var,
    memory: Var,
    n_heads: usize,
    mut attention: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let q = linear(tape, bound, queries, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
    let k = linear(tape, bound, memory, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
    let v = linear(tape, bound, memory, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
    let d = tape.value(q).shape()[1];
    let dh = d / n_heads;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = tape.softmax(scores, 1)?;
        if let Some(log) = attention.as_deref_mut() {
            log.push(probs);
        }
        heads.push(tape.matmul(probs, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    linear(tape, bound, cat, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
}

fn mlp(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, bound, x, &format!("{prefix}.fc1.weight"), &format!("{prefix}.fc1.bias"))?;
    let h = tape.relu(h);
    linear(tape, bound, h, &format!("{prefix}.fc2.weight"), &format!("{prefix}.fc2.bias"))
}

/// Pre-norm self-attention block with residual connections.
pub fn encoder_block(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: Var,
    n_heads: usize,
    attention: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let h = layer_norm(tape, bound, x, &format!("{prefix}.norm1"))?;
    let a = multi_head_attention(tape, bound, &format!("{prefix}.attn"), h, h, n_heads, attention)?;
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, bound, x, &format!("{prefix}.norm2"))?;
    let m = mlp(tape, bound, &format!("{prefix}.mlp"), h)?;
    tape.add(x, m)
}

/// Runs the encoder blocks over a token sequence.
pub fn encode(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    tokens: Var,
    mut attention: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let mut x = tokens;
    for layer in 0..cfg.n_fusion_layers {
        x = encoder_block(
            tape,
            bound,
            &format!("fusion.encoder.{layer}"),
            x,
            cfg.n_heads,
            attention.as_deref_mut(),
        )?;
    }
    Ok(x)
}

fn feature_tokens(tape: &mut Tape, feat: Var, d_model: usize) -> Result<Var> {
    let shape = tape.value(feat).shape().to_vec();
    let [c, h, w] = shape[..] else {
        return Err(Error::Usage(format!("feature map must be C×h×w, got {shape:?}")));
    };
    if c != d_model {
        return Err(Error::Usage(format!(
            "feature map has {c} channels, fusion expects d_model = {d_model}"
        )));
    }
    let flat = tape.reshape(feat, &[c, h * w])?;
    tape.transpose(flat)
}

/// Builds the joint token sequence `[templates..., searches...]`, encodes it
/// and decodes the target query.
///
/// Returns the search-region tokens (the per-stream search segments summed
/// elementwise, `N_x×C`) and the decoder output (`1×C`).
pub fn fuse(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    template_feats: &[Var],
    search_feats: &[Var],
    mut attention: Option<&mut Vec<Var>>,
) -> Result<(Var, Var)> {
    if template_feats.len() != search_feats.len() || template_feats.is_empty() {
        return Err(Error::Usage("fuse needs one template and one search map per stream".into()));
    }
    let d = cfg.d_model;
    let source = bound.var("fusion.source_embed")?;
    let n_sources = tape.value(source).shape()[0];
    if n_sources != 2 * template_feats.len() {
        return Err(Error::Usage(format!(
            "{} streams supplied to a fusion module built for {}",
            template_feats.len(),
            n_sources / 2
        )));
    }
    let pos_z = bound.var("fusion.pos_template")?;
    let pos_x = bound.var("fusion.pos_search")?;

    let mut segments = Vec::with_capacity(n_sources);
    let mut segment_len = Vec::with_capacity(n_sources);
    for (i, &feat) in template_feats.iter().chain(search_feats).enumerate() {
        let t = feature_tokens(tape, feat, d)?;
        let pos = if i < template_feats.len() { pos_z } else { pos_x };
        if tape.value(t).shape() != tape.value(pos).shape() {
            return Err(Error::Usage(format!(
                "feature grid {:?} does not match positional table {:?}",
                tape.value(t).shape(),
                tape.value(pos).shape()
            )));
        }
        let t = tape.add(t, pos)?;
        let tag = tape.slice_rows(source, i, i + 1)?;
        let t = tape.add_bias(t, tag)?;
        segment_len.push(tape.value(t).shape()[0]);
        segments.push(t);
    }
    let sequence = tape.concat_rows(&segments)?;
    let encoded = encode(tape, bound, cfg, sequence, attention.as_deref_mut())?;

    let mut start: usize = segment_len[..template_feats.len()].iter().sum();
    let mut search_tokens: Option<Var> = None;
    for &len in &segment_len[template_feats.len()..] {
        let seg = tape.slice_rows(encoded, start, start + len)?;
        search_tokens = Some(match search_tokens {
            None => seg,
            Some(acc) => tape.add(acc, seg)?,
        });
        start += len;
    }
    let search_tokens = search_tokens.expect("at least one search segment");

    let query = bound.var("fusion.decoder.query")?;
    let q = layer_norm(tape, bound, query, "fusion.decoder.norm_q")?;
    let mem = layer_norm(tape, bound, encoded, "fusion.decoder.norm_mem")?;
    let a = multi_head_attention(tape, bound, "fusion.decoder.attn", q, mem, cfg.n_heads, attention)?;
    let q = tape.add(query, a)?;
    let h = layer_norm(tape, bound, q, "fusion.decoder.norm2")?;
    let m = mlp(tape, bound, "fusion.decoder.mlp", h)?;
    let q = tape.add(q, m)?;
    Ok((search_tokens, q))
}

/// Query-modulated search tokens through a five-layer conv stack; returns
/// `2×h×w` corner logits.
pub fn corner_head(tape: &mut Tape, bound: &Bound, cfg: &ModelConfig, tokens: Var, query: Var) -> Result<Var> {
    let g = cfg.search_grid();
    let d = cfg.d_model;
    if tape.value(tokens).shape() != [g * g, d] {
        return Err(Error::Usage(format!(
            "corner head expects {}×{d} search tokens, got {:?}",
            g * g,
            tape.value(tokens).shape()
        )));
    }
    let qt = tape.transpose(query)?;
    let sim = tape.matmul(tokens, qt)?;
    let sim = tape.scale(sim, 1.0 / (d as f64).sqrt());
    let ones = tape.constant(Tensor::ones(&[1, d]));
    let gate = tape.matmul(sim, ones)?;
    let modulated = tape.mul(tokens, gate)?;
    let chw = tape.transpose(modulated)?;
    let mut x = tape.reshape(chw, &[d, g, g])?;
    for layer in 0..5 {
        x = tape.conv2d(x, bound.var(&format!("head.conv{layer}.weight"))?, 1, 1)?;
        x = tape.add_channel_bias(x, bound.var(&format!("head.conv{layer}.bias"))?)?;
        if layer < 4 {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

/// Cell-center coordinates `(j + 0.5)·stride` of a `g×g` grid as an `N×2`
/// table of `(x, y)`.
fn cell_centers(g: usize, stride: usize) -> Tensor {
    let mut data = Vec::with_capacity(g * g * 2);
    for i in 0..g {
        for j in 0..g {
            data.push((j as f64 + 0.5) * stride as f64);
            data.push((i as f64 + 0.5) * stride as f64);
        }
    }
    Tensor::new(vec![g * g, 2], data).expect("grid table shape")
}

/// Soft-argmax of both maps, returned as an unclamped center-format box.
pub fn decode_box_on_tape(tape: &mut Tape, maps: Var, search_size: usize, stride: usize) -> Result<Var> {
    let shape = tape.value(maps).shape().to_vec();
    let [2, g, g2] = shape[..] else {
        return Err(Error::Dimension(format!("corner maps must be 2×g×g, got {shape:?}")));
    };
    if g != g2 || g * stride != search_size {
        return Err(Error::Dimension(format!(
            "{g}×{g2} corner grid does not tile a {search_size} px search region at stride {stride}"
        )));
    }
    let flat = tape.reshape(maps, &[2, g * g])?;
    let probs = tape.softmax(flat, 1)?;
    let centers = tape.constant(cell_centers(g, stride));
    // rows: (x_tl, y_tl), (x_br, y_br)
    let corners = tape.matmul(probs, centers)?;
    let corners = tape.reshape(corners, &[4, 1])?;
    #[rustfmt::skip]
    let to_center = Tensor::matrix(4, 4, vec![
        0.5, 0.0, 0.5, 0.0,
        0.0, 0.5, 0.0, 0.5,
        -1.0, 0.0, 1.0, 0.0,
        0.0, -1.0, 0.0, 1.0,
    ])?;
    let m = tape.constant(to_center);
    let b = tape.matmul(m, corners)?;
    tape.reshape(b, &[4])
}

/// Minimum decoded width and height, in pixels.
pub const MIN_BOX_SIZE: f64 = 1.0;

fn expectation(logits: &Tensor, stride: usize) -> (f64, f64) {
    let w = logits.shape()[1];
    let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.data().iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let (mut x, mut y) = (0.0, 0.0);
    for (idx, p) in e.iter().enumerate() {
        let (i, j) = (idx / w, idx % w);
        x += p / z * (j as f64 + 0.5) * stride as f64;
        y += p / z * (i as f64 + 0.5) * stride as f64;
    }
    (x, y)
}

/// Soft-argmax corner decoding with cell-center coordinates; width and
/// height are clamped to at least [`MIN_BOX_SIZE`].
pub fn decode_box(maps: &CornerMaps, _search_size: usize, stride: usize) -> BBox {
    let (x1, y1) = expectation(&maps.tl, stride);
    let (x2, y2) = expectation(&maps.br, stride);
    BBox::new(
        (x1 + x2) / 2.0,
        (y1 + y2) / 2.0,
        (x2 - x1).max(MIN_BOX_SIZE),
        (y2 - y1).max(MIN_BOX_SIZE),
    )
}
