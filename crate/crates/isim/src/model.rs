//! Encoder-decoder segmentation model with an injected classification
//! branch (GAP + bias-free 1x1 conv), CAM extraction, and the on-disk
//! checkpoint container.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::camops::CamStack;
use crate::error::{IsimError, Result};
use crate::numcore::kernels as k;
use crate::numcore::{Activation, Graph, NodeId, Tensor};

pub const CHECKPOINT_MAGIC: &str = "ISIM-CKPT v1";

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    /// Replace the final stride-2 with a dilation-2 conv, doubling the
    /// feature-map extent relative to the strided configuration.
    pub last_block_dilated: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            widths: vec![16, 32, 64, 128],
            strides: vec![1, 2, 2, 2],
            last_block_dilated: true,
        }
    }
}

impl EncoderConfig {
    /// Narrow variant used by the desk-scale experiment runs.
    pub fn desk_small() -> Self {
        EncoderConfig {
            widths: vec![8, 16, 24, 32],
            strides: vec![1, 2, 2, 2],
            last_block_dilated: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(IsimError::Config("encoder needs at least 2 blocks".into()));
        }
        if self.widths.len() != self.strides.len() {
            return Err(IsimError::Config(
                "encoder widths and strides must have equal length".into(),
            ));
        }
        if self.widths.iter().any(|&w| w == 0) || self.strides.iter().any(|&s| s == 0) {
            return Err(IsimError::Config("encoder widths/strides must be >= 1".into()));
        }
        Ok(())
    }

    /// Per-block (stride, dilation, padding) after the last-block rewrite.
    fn block_geometry(&self) -> Vec<(usize, usize, usize)> {
        let n = self.strides.len();
        self.strides
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                if self.last_block_dilated && i == n - 1 {
                    (1, 2, 2)
                } else {
                    (s, 1, 1)
                }
            })
            .collect()
    }

    /// Cumulative downsampling factor after each block.
    fn cumulative_strides(&self) -> Vec<usize> {
        let mut cs = 1;
        self.block_geometry()
            .iter()
            .map(|&(s, _, _)| {
                cs *= s;
                cs
            })
            .collect()
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    BilinearUnet,
    TransposedUnet,
    AsppLite,
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DecoderKind::BilinearUnet => "bilinear_unet",
            DecoderKind::TransposedUnet => "transposed_unet",
            DecoderKind::AsppLite => "aspp_lite",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for DecoderKind {
    type Err = IsimError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear_unet" => Ok(DecoderKind::BilinearUnet),
            "transposed_unet" => Ok(DecoderKind::TransposedUnet),
            "aspp_lite" => Ok(DecoderKind::AsppLite),
            other => Err(IsimError::Parse {
                what: "decoder kind".into(),
                detail: format!("unknown kind '{other}'"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub use_skip_connections: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            kind: DecoderKind::AsppLite,
            use_skip_connections: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Classifier,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
    /// Momentum buffer, owned here so optimizer state survives checkpointing.
    pub velocity: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub num_classes: usize,
    pub seed: u64,
    pub params: Vec<Param>,
}

/// One decoder up-stage as planned at build time.
#[derive(Debug, Clone)]
struct UpStage {
    /// Index of the encoder block whose output is the skip source, if any.
    skip_block: Option<usize>,
    in_channels: usize,
    out_channels: usize,
}

impl ModelParams {
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn param(&self, name: &str) -> &Param {
        self.params
            .iter()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// Concatenated raw values of every parameter in a group, in declaration
    /// order. Used for untouched-group assertions.
    pub fn group_data(&self, group: ParamGroup) -> Vec<f64> {
        let mut out = Vec::new();
        for p in &self.params {
            if p.group == group {
                out.extend_from_slice(p.tensor.data());
            }
        }
        out
    }

    /// FNV-1a over the exact parameter bits of a group.
    pub fn group_checksum(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in &self.params {
            if p.group != group {
                continue;
            }
            for v in p.tensor.data() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    fn decoder_plan(&self) -> Vec<UpStage> {
        decoder_plan(&self.encoder, &self.decoder)
    }
}

fn decoder_plan(enc: &EncoderConfig, dec: &DecoderConfig) -> Vec<UpStage> {
    let cs = enc.cumulative_strides();
    let total = *cs.last().unwrap();
    let mut stages = Vec::new();
    let mut cur = enc.out_channels();
    let mut factor = total;
    while factor > 1 {
        factor /= 2;
        let skip_block = if dec.use_skip_connections {
            // deepest encoder block that already sits at the target extent
            cs.iter().rposition(|&c| c == factor)
        } else {
            None
        };
        let skip_ch = skip_block.map(|b| enc.widths[b]).unwrap_or(0);
        let out = (cur / 2).max(4);
        stages.push(UpStage {
            skip_block,
            in_channels: cur + skip_ch,
            out_channels: out,
        });
        cur = out;
    }
    stages
}

fn he_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let numel: usize = shape.iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Tensor::new(shape, data).expect("consistent shape")
}

fn push_param(params: &mut Vec<Param>, name: &str, group: ParamGroup, tensor: Tensor) {
    let velocity = vec![0.0; tensor.numel()];
    params.push(Param {
        name: name.to_string(),
        group,
        tensor: tensor.with_grad(),
        velocity,
    });
}

/// Deterministic seeded construction of all model parameters.
pub fn build_model(
    enc: EncoderConfig,
    dec: DecoderConfig,
    num_classes: usize,
    seed: u64,
) -> Result<ModelParams> {
    enc.validate()?;
    if num_classes == 0 {
        return Err(IsimError::Config("num_classes must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();

    // encoder: 3x3 conv + bias + relu per block
    let mut cin = 3;
    for (i, &w) in enc.widths.iter().enumerate() {
        let fan_in = cin * 9;
        push_param(
            &mut params,
            &format!("enc.block{i}.w"),
            ParamGroup::Encoder,
            he_tensor(&mut rng, vec![w, cin, 3, 3], fan_in),
        );
        push_param(
            &mut params,
            &format!("enc.block{i}.b"),
            ParamGroup::Encoder,
            Tensor::zeros(vec![w]),
        );
        cin = w;
    }

    // classification branch: bias-free 1x1 conv on pooled features
    let kf = enc.out_channels();
    push_param(
        &mut params,
        "cls.w",
        ParamGroup::Classifier,
        he_tensor(&mut rng, vec![num_classes, kf, 1, 1], kf),
    );

    // decoder
    let l = num_classes + 1;
    match dec.kind {
        DecoderKind::AsppLite => {
            let mid = (kf / 2).max(4);
            for (tag, _dil) in [("d1", 1usize), ("d2", 2usize)] {
                push_param(
                    &mut params,
                    &format!("dec.aspp.{tag}.w"),
                    ParamGroup::Decoder,
                    he_tensor(&mut rng, vec![mid, kf, 3, 3], kf * 9),
                );
                push_param(
                    &mut params,
                    &format!("dec.aspp.{tag}.b"),
                    ParamGroup::Decoder,
                    Tensor::zeros(vec![mid]),
                );
            }
            push_param(
                &mut params,
                "dec.head.w",
                ParamGroup::Decoder,
                he_tensor(&mut rng, vec![l, 2 * mid, 1, 1], 2 * mid),
            );
            push_param(
                &mut params,
                "dec.head.b",
                ParamGroup::Decoder,
                Tensor::zeros(vec![l]),
            );
        }
        DecoderKind::BilinearUnet | DecoderKind::TransposedUnet => {
            let plan = decoder_plan(&enc, &dec);
            let mut cur = kf;
            for (i, st) in plan.iter().enumerate() {
                if dec.kind == DecoderKind::TransposedUnet {
                    // learnable 2x upsampling
                    push_param(
                        &mut params,
                        &format!("dec.up{i}.w"),
                        ParamGroup::Decoder,
                        he_tensor(&mut rng, vec![cur, cur, 2, 2], cur * 4),
                    );
                }
                push_param(
                    &mut params,
                    &format!("dec.stage{i}.w"),
                    ParamGroup::Decoder,
                    he_tensor(&mut rng, vec![st.out_channels, st.in_channels, 3, 3], st.in_channels * 9),
                );
                push_param(
                    &mut params,
                    &format!("dec.stage{i}.b"),
                    ParamGroup::Decoder,
                    Tensor::zeros(vec![st.out_channels]),
                );
                cur = st.out_channels;
            }
            push_param(
                &mut params,
                "dec.head.w",
                ParamGroup::Decoder,
                he_tensor(&mut rng, vec![l, cur, 1, 1], cur),
            );
            push_param(
                &mut params,
                "dec.head.b",
                ParamGroup::Decoder,
                Tensor::zeros(vec![l]),
            );
        }
    }

    Ok(ModelParams {
        encoder: enc,
        decoder: dec,
        num_classes,
        seed,
        params,
    })
}

pub struct ForwardOutputs {
    pub graph: Graph,
    /// Per-sample class logits, shape (N, C).
    pub class_logits: NodeId,
    /// Per-pixel logits over C+1 labels at input extent, if the decoder ran.
    pub pixel_logits: Option<NodeId>,
    /// Final encoder feature map, shared by both heads.
    pub encoder_features: NodeId,
    /// Leaf node of every parameter, aligned with `ModelParams::params`.
    pub param_nodes: Vec<NodeId>,
}

/// Full forward pass (encoder + classification branch + decoder).
pub fn forward(params: &ModelParams, batch: &Tensor) -> Result<ForwardOutputs> {
    forward_opts(params, batch, true)
}

/// Forward pass with the decoder optionally skipped (classification-only
/// warmup trains strictly the encoder+classifier path).
pub fn forward_opts(
    params: &ModelParams,
    batch: &Tensor,
    with_decoder: bool,
) -> Result<ForwardOutputs> {
    let (_, c, h, w) = batch.dims4("model::forward")?;
    if c != 3 {
        return Err(IsimError::shape(
            "model::forward",
            format!("expected 3 input channels, got {c}"),
        ));
    }
    let mut g = Graph::new();
    let param_nodes: Vec<NodeId> = params
        .params
        .iter()
        .map(|p| g.leaf(p.tensor.clone()))
        .collect();
    let node = |name: &str| param_nodes[params.param_index(name).expect("param exists")];

    // encoder
    let geom = params.encoder.block_geometry();
    let mut x = g.leaf(batch.clone());
    let mut block_outputs = Vec::new();
    for (i, &(stride, dil, pad)) in geom.iter().enumerate() {
        let wn = node(&format!("enc.block{i}.w"));
        let bn = node(&format!("enc.block{i}.b"));
        let conv = g.conv2d(x, wn, bn, stride, pad, dil)?;
        x = g.elementwise(conv, Activation::Relu)?;
        block_outputs.push(x);
    }
    let features = x;

    // classification branch: GAP, then the bias-free 1x1 conv applied as a
    // conv2d over the pooled (N, K, 1, 1) view
    let pooled = g.global_average_pool(features)?; // (N, K)
    let n = g.value(pooled).shape()[0];
    let kf = params.encoder.out_channels();
    let reshaped = g.reshape(pooled, vec![n, kf, 1, 1])?;
    let wn = node("cls.w");
    let zb = g.leaf(Tensor::zeros(vec![params.num_classes]));
    let conv = g.conv2d(reshaped, wn, zb, 1, 0, 1)?;
    let class_logits = g.reshape(conv, vec![n, params.num_classes])?;

    let pixel_logits = if with_decoder {
        Some(run_decoder(params, &mut g, &param_nodes, &block_outputs, h, w)?)
    } else {
        None
    };

    Ok(ForwardOutputs {
        graph: g,
        class_logits,
        pixel_logits,
        encoder_features: features,
        param_nodes,
    })
}

fn run_decoder(
    params: &ModelParams,
    g: &mut Graph,
    param_nodes: &[NodeId],
    block_outputs: &[NodeId],
    in_h: usize,
    in_w: usize,
) -> Result<NodeId> {
    let node = |name: &str| param_nodes[params.param_index(name).expect("param exists")];
    let features = *block_outputs.last().unwrap();
    match params.decoder.kind {
        DecoderKind::AsppLite => {
            let mut branches = Vec::new();
            for (tag, dil) in [("d1", 1usize), ("d2", 2usize)] {
                let wn = node(&format!("dec.aspp.{tag}.w"));
                let bn = node(&format!("dec.aspp.{tag}.b"));
                let conv = g.conv2d(features, wn, bn, 1, dil, dil)?;
                branches.push(g.elementwise(conv, Activation::Relu)?);
            }
            let cat = g.concat_channels(&branches)?;
            let head = g.conv2d(cat, node("dec.head.w"), node("dec.head.b"), 1, 0, 1)?;
            g.upsample_bilinear(head, in_h, in_w)
        }
        DecoderKind::BilinearUnet | DecoderKind::TransposedUnet => {
            let plan = params.decoder_plan();
            let mut x = features;
            for (i, st) in plan.iter().enumerate() {
                let cur_shape = g.value(x).shape().to_vec();
                let (th, tw) = match st.skip_block {
                    Some(b) => {
                        let s = g.value(block_outputs[b]).shape();
                        (s[2], s[3])
                    }
                    // without a skip reference, double toward the input extent
                    None => ((cur_shape[2] * 2).min(in_h), (cur_shape[3] * 2).min(in_w)),
                };
                x = match params.decoder.kind {
                    DecoderKind::TransposedUnet => {
                        let up = g.conv_transpose2d(x, node(&format!("dec.up{i}.w")), 2)?;
                        let us = g.value(up).shape();
                        if us[2] != th || us[3] != tw {
                            return Err(IsimError::shape(
                                "decoder",
                                format!(
                                    "transposed upsample produced {}x{}, expected {th}x{tw}",
                                    us[2], us[3]
                                ),
                            ));
                        }
                        up
                    }
                    _ => g.upsample_bilinear(x, th, tw)?,
                };
                if let Some(b) = st.skip_block {
                    x = g.concat_channels(&[x, block_outputs[b]])?;
                }
                let conv = g.conv2d(
                    x,
                    node(&format!("dec.stage{i}.w")),
                    node(&format!("dec.stage{i}.b")),
                    1,
                    1,
                    1,
                )?;
                x = g.elementwise(conv, Activation::Relu)?;
            }
            let head = g.conv2d(x, node("dec.head.w"), node("dec.head.b"), 1, 0, 1)?;
            let hs = g.value(head).shape();
            if hs[2] != in_h || hs[3] != in_w {
                let (oh, ow) = (in_h, in_w);
                return g.upsample_bilinear(head, oh, ow);
            }
            Ok(head)
        }
    }
}

/// Inference-only encoder + classifier pass (no tape, borrowed parameters).
/// Used by the CAM generation path where gradients are never needed.
pub fn infer_features(params: &ModelParams, batch: &Tensor) -> Result<(Tensor, Tensor)> {
    let geom = params.encoder.block_geometry();
    let mut x = batch.clone();
    for (i, &(stride, dil, pad)) in geom.iter().enumerate() {
        let w = &params.param(&format!("enc.block{i}.w")).tensor;
        let b = &params.param(&format!("enc.block{i}.b")).tensor;
        let conv = k::conv2d_fwd(&x, w, b, stride, pad, dil)?;
        x = k::relu_fwd(&conv);
    }
    let pooled = k::global_average_pool_fwd(&x)?;
    let (n, kf) = pooled.dims2("infer_features")?;
    let wcls = &params.param("cls.w").tensor;
    let c = wcls.shape()[0];
    let mut logits = vec![0.0f64; n * c];
    for ni in 0..n {
        for cc in 0..c {
            let mut acc = 0.0;
            for kk in 0..kf {
                acc += wcls.data()[cc * kf + kk] * pooled.data()[ni * kf + kk];
            }
            logits[ni * c + cc] = acc;
        }
    }
    Ok((x, Tensor::new(vec![n, c], logits)?))
}

/// CAM_c(x,y) = relu(sum_k w_ck f_k(x,y)), max-normalized to [0,1] per
/// present class; absent classes are identically zero.
pub fn compute_cam(
    params: &ModelParams,
    encoder_features: &Tensor,
    present_classes: &[usize],
) -> Result<CamStack> {
    let (n, kf, h, w) = encoder_features.dims4("compute_cam")?;
    if n != 1 {
        return Err(IsimError::shape(
            "compute_cam",
            format!("expected a single image, got batch of {n}"),
        ));
    }
    let c = params.num_classes;
    for &pc in present_classes {
        if pc == 0 || pc > c {
            return Err(IsimError::Config(format!(
                "present class {pc} outside 1..={c}"
            )));
        }
    }
    let wcls = &params.param("cls.w").tensor;
    let fd = encoder_features.data();
    let mut maps = vec![0.0f64; c * h * w];
    for &pc in present_classes {
        let cc = pc - 1;
        let mbase = cc * h * w;
        for kk in 0..kf {
            let wv = wcls.data()[cc * kf + kk];
            let fbase = kk * h * w;
            for s in 0..h * w {
                maps[mbase + s] += wv * fd[fbase + s];
            }
        }
        let mut maxv: f64 = 0.0;
        for v in &mut maps[mbase..mbase + h * w] {
            *v = v.max(0.0);
            maxv = maxv.max(*v);
        }
        if maxv > 0.0 {
            for v in &mut maps[mbase..mbase + h * w] {
                *v /= maxv;
            }
        }
    }
    CamStack::new(
        Tensor::new(vec![c, h, w], maps)?,
        present_classes.to_vec(),
        String::new(),
    )
}

// ---------------------------------------------------------------------------
// checkpoint container
// ---------------------------------------------------------------------------

/// Named f64 arrays plus a plain-text header; round-trips bit-exactly.
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub arrays: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{CHECKPOINT_MAGIC}")?;
        for (k, v) in &self.meta {
            writeln!(f, "{k} = {v}")?;
        }
        writeln!(f, "arrays = {}", self.arrays.len())?;
        for (name, shape, data) in &self.arrays {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            writeln!(f, "{name} {} {}", dims.join(","), data.len())?;
        }
        writeln!(f, "BINARY")?;
        for (_, _, data) in &self.arrays {
            for v in data {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != CHECKPOINT_MAGIC {
            return Err(IsimError::Checkpoint(format!(
                "bad magic line {:?}",
                line.trim_end()
            )));
        }
        let mut meta = Vec::new();
        let n_arrays: Option<usize>;
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(IsimError::Checkpoint("truncated header".into()));
            }
            let l = line.trim_end();
            if let Some(rest) = l.strip_prefix("arrays = ") {
                n_arrays = Some(rest.parse::<usize>().map_err(|e| {
                    IsimError::Checkpoint(format!("bad array count: {e}"))
                })?);
                break;
            }
            match l.split_once(" = ") {
                Some((k, v)) => meta.push((k.to_string(), v.to_string())),
                None => return Err(IsimError::Checkpoint(format!("bad meta line {l:?}"))),
            }
        }
        let n_arrays = n_arrays.unwrap();
        let mut dir = Vec::new();
        for _ in 0..n_arrays {
            line.clear();
            r.read_line(&mut line)?;
            let parts: Vec<&str> = line.trim_end().split(' ').collect();
            if parts.len() != 3 {
                return Err(IsimError::Checkpoint(format!(
                    "bad array directory line {:?}",
                    line.trim_end()
                )));
            }
            let shape: Vec<usize> = parts[1]
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| IsimError::Checkpoint(format!("bad shape: {e}")))?;
            let len: usize = parts[2]
                .parse()
                .map_err(|e| IsimError::Checkpoint(format!("bad length: {e}")))?;
            dir.push((parts[0].to_string(), shape, len));
        }
        line.clear();
        r.read_line(&mut line)?;
        if line.trim_end() != "BINARY" {
            return Err(IsimError::Checkpoint("missing BINARY marker".into()));
        }
        let mut arrays = Vec::new();
        for (name, shape, len) in dir {
            let mut buf = vec![0u8; len * 8];
            r.read_exact(&mut buf)?;
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((name, shape, data));
        }
        Ok(Checkpoint { meta, arrays })
    }
}

fn usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|d| {
            d.trim().parse::<usize>().map_err(|e| IsimError::Checkpoint(format!(
                "bad integer list entry {d:?}: {e}"
            )))
        })
        .collect()
}

pub fn model_meta(params: &ModelParams) -> Vec<(String, String)> {
    vec![
        ("format".into(), "1".into()),
        (
            "encoder.widths".into(),
            params
                .encoder
                .widths
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
        (
            "encoder.strides".into(),
            params
                .encoder
                .strides
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
        (
            "encoder.last_block_dilated".into(),
            params.encoder.last_block_dilated.to_string(),
        ),
        ("decoder.kind".into(), params.decoder.kind.to_string()),
        (
            "decoder.use_skip_connections".into(),
            params.decoder.use_skip_connections.to_string(),
        ),
        ("num_classes".into(), params.num_classes.to_string()),
        ("seed".into(), params.seed.to_string()),
    ]
}

/// Serialize model parameters (plus any caller-supplied extra arrays, e.g.
/// optimizer state) into one checkpoint file.
pub fn save_model(
    params: &ModelParams,
    extra: &[(String, Vec<usize>, Vec<f64>)],
    path: &Path,
) -> Result<()> {
    let mut arrays: Vec<(String, Vec<usize>, Vec<f64>)> = params
        .params
        .iter()
        .map(|p| (p.name.clone(), p.tensor.shape().to_vec(), p.tensor.data().to_vec()))
        .collect();
    arrays.extend_from_slice(extra);
    Checkpoint {
        meta: model_meta(params),
        arrays,
    }
    .write(path)
}

/// Inverse of `save_model`; returns the rebuilt model and any extra arrays.
pub fn load_model(path: &Path) -> Result<(ModelParams, Vec<(String, Vec<usize>, Vec<f64>)>)> {
    let ckpt = Checkpoint::read(path)?;
    let need = |key: &str| -> Result<&str> {
        ckpt.meta_value(key)
            .ok_or_else(|| IsimError::Checkpoint(format!("missing meta key {key}")))
    };
    let enc = EncoderConfig {
        widths: usize_list(need("encoder.widths")?)?,
        strides: usize_list(need("encoder.strides")?)?,
        last_block_dilated: need("encoder.last_block_dilated")? == "true",
    };
    let dec = DecoderConfig {
        kind: need("decoder.kind")?.parse()?,
        use_skip_connections: need("decoder.use_skip_connections")? == "true",
    };
    let num_classes: usize = need("num_classes")?
        .parse()
        .map_err(|e| IsimError::Checkpoint(format!("bad num_classes: {e}")))?;
    let seed: u64 = need("seed")?
        .parse()
        .map_err(|e| IsimError::Checkpoint(format!("bad seed: {e}")))?;

    let mut model = build_model(enc, dec, num_classes, seed)?;
    let mut extra = Vec::new();
    for (name, shape, data) in ckpt.arrays {
        match model.param_index(&name) {
            Some(i) => {
                if model.params[i].tensor.shape() != shape.as_slice() {
                    return Err(IsimError::Checkpoint(format!(
                        "parameter {name} shape {:?} != expected {:?}",
                        shape,
                        model.params[i].tensor.shape()
                    )));
                }
                model.params[i].tensor = Tensor::new(shape, data)?.with_grad();
            }
            None => extra.push((name, shape, data)),
        }
    }
    Ok((model, extra))
}
