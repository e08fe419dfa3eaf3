//! Multi-view relative pose regressor.
//!
//! Each frame becomes a token sequence `[g, r, f]`: one camera token, a few
//! register tokens and one patch token per feature-map cell. Reference frames
//! carry their known pose through `g = l + y`, where `y` is an MLP encoding of
//! the flattened pose. The trunk alternates attention within each frame and
//! across all frames, adding `y` back onto the camera tokens after every
//! frame-attention step. A small attention head maps the final camera tokens
//! to a quaternion, a translation and two focal lengths per frame.
//!
//! Frame order is `[ref_1, ..., ref_k, query]`; all outputs are expressed
//! relative to `ref_1` at the normalized scale of the reference poses.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::FeatureMap;
use crate::error::{Error, Result};
use crate::geom::{flatten_pose, Pose, Quaternion};
use crate::nn::{Graph, Mat, Var};

pub const WEIGHTS_SCHEMA: &str = "mlk-weights/1";
/// Width of the raw head output: quaternion, translation, focal lengths.
pub const HEAD_OUT: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    /// `g = l + y` for every reference.
    AllLearnable,
    /// References use `y` alone; only the query slot keeps a learnable token.
    LastOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub token_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    /// `(P_h, P_w)`.
    pub patch_grid: (usize, usize),
    pub feature_channels: usize,
    pub num_register_tokens: usize,
    pub token_mode: TokenMode,
    pub seed: u64,
    /// Number of learnable camera-token slots, i.e. the largest `k + 1`.
    pub max_frames: usize,
    pub ff_mult: usize,
    pub head_layers: usize,
    /// When false, reference poses are not encoded: `y = 0` everywhere.
    pub pose_guidance: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            token_dim: 64,
            num_blocks: 4,
            num_heads: 4,
            patch_grid: (8, 8),
            feature_channels: 8,
            num_register_tokens: 4,
            token_mode: TokenMode::AllLearnable,
            seed: 0,
            max_frames: 16,
            ff_mult: 4,
            head_layers: 4,
            pose_guidance: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.token_dim == 0 || self.num_heads == 0 || self.token_dim % self.num_heads != 0 {
            return bad("token_dim must be a positive multiple of num_heads");
        }
        if self.num_blocks == 0 {
            return bad("num_blocks must be at least 1");
        }
        if self.patch_grid.0 == 0 || self.patch_grid.1 == 0 || self.feature_channels == 0 {
            return bad("patch grid and feature channels must be positive");
        }
        if self.max_frames < 1 || self.ff_mult == 0 {
            return bad("max_frames and ff_mult must be positive");
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.patch_grid.0 * self.patch_grid.1
    }

    /// Tokens per frame: camera, registers, patches.
    pub fn tokens_per_frame(&self) -> usize {
        1 + self.num_register_tokens + self.num_patches()
    }
}

/// Regressed camera for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraOutput {
    pub q: Quaternion,
    /// World-to-camera translation relative to the first frame, normalized scale.
    pub c: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
}

impl CameraOutput {
    pub fn pose(&self) -> Result<Pose> {
        Pose::new(self.q, self.c)
    }
}

/// Token matrices before the trunk; rows are frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    /// `(k+1) × d`.
    pub pose_tokens: Mat,
    /// `(k+1)·R × d`.
    pub register_tokens: Mat,
    /// `(k+1)·P × d`.
    pub patch_tokens: Mat,
}

impl TokenSet {
    pub fn num_frames(&self) -> usize {
        self.pose_tokens.rows
    }

    pub fn is_finite(&self) -> bool {
        self.pose_tokens.is_finite() && self.register_tokens.is_finite() && self.patch_tokens.is_finite()
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

fn layout(cfg: &ModelConfig) -> Vec<(String, (usize, usize), Init)> {
    let d = cfg.token_dim;
    let h = d * cfg.ff_mult;
    let depth = (2 * cfg.num_blocks) as f64;
    let mut v = Vec::new();
    let mut push = |name: String, shape, init| v.push((name, shape, init));
    push("pose_mlp.w1".into(), (12, d), Init::Normal(1.0 / 12f64.sqrt()));
    push("pose_mlp.b1".into(), (1, d), Init::Zeros);
    push("pose_mlp.w2".into(), (d, d), Init::Normal(1.0 / (d as f64).sqrt()));
    push("pose_mlp.b2".into(), (1, d), Init::Zeros);
    push("patch.proj".into(), (cfg.feature_channels, d), Init::Normal(1.0 / (cfg.feature_channels as f64).sqrt()));
    push("patch.pos".into(), (cfg.num_patches(), d), Init::Normal(0.1));
    push("tokens.camera".into(), (cfg.max_frames, d), Init::Normal(0.1));
    if cfg.num_register_tokens > 0 {
        push("tokens.register".into(), (cfg.num_register_tokens, d), Init::Normal(0.1));
    }
    let mut sublayer = |prefix: String, out_scale: f64| {
        push(format!("{prefix}.ln1.g"), (1, d), Init::Ones);
        push(format!("{prefix}.ln1.b"), (1, d), Init::Zeros);
        push(format!("{prefix}.attn.wqkv"), (d, 3 * d), Init::Normal(1.0 / (d as f64).sqrt()));
        push(format!("{prefix}.attn.bqkv"), (1, 3 * d), Init::Zeros);
        push(format!("{prefix}.attn.wo"), (d, d), Init::Normal(out_scale / (d as f64).sqrt()));
        push(format!("{prefix}.attn.bo"), (1, d), Init::Zeros);
        push(format!("{prefix}.ln2.g"), (1, d), Init::Ones);
        push(format!("{prefix}.ln2.b"), (1, d), Init::Zeros);
        push(format!("{prefix}.ff.w1"), (d, h), Init::Normal(1.0 / (d as f64).sqrt()));
        push(format!("{prefix}.ff.b1"), (1, h), Init::Zeros);
        push(format!("{prefix}.ff.w2"), (h, d), Init::Normal(out_scale / (h as f64).sqrt()));
        push(format!("{prefix}.ff.b2"), (1, d), Init::Zeros);
    };
    for i in 0..cfg.num_blocks {
        sublayer(format!("blocks.{i}.frame"), 1.0 / depth.sqrt());
        sublayer(format!("blocks.{i}.global"), 1.0 / depth.sqrt());
    }
    for j in 0..cfg.head_layers {
        sublayer(format!("head.{j}"), 1.0 / ((2 * cfg.head_layers.max(1)) as f64).sqrt());
    }
    v.push(("head.ln.g".into(), (1, d), Init::Ones));
    v.push(("head.ln.b".into(), (1, d), Init::Zeros));
    v.push(("head.out.w".into(), (d, HEAD_OUT), Init::Normal(0.01)));
    v.push(("head.out.b".into(), (1, HEAD_OUT), Init::Zeros));
    v.push(("uncertainty".into(), (1, 3), Init::Zeros));
    v
}

/// Named parameter tensors for one [`ModelConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl Weights {
    /// Seeded initialization; equal configs give bit-identical weights.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let entries = layout(config)
            .into_iter()
            .map(|(name, (r, c), init)| {
                let m = match init {
                    Init::Zeros => Mat::zeros(r, c),
                    Init::Ones => Mat::filled(r, c, 1.0),
                    Init::Normal(std) => Mat::from_vec(
                        r,
                        c,
                        (0..r * c).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
                    ),
                };
                (name, m)
            })
            .collect();
        Ok(Self::from_entries(config.clone(), entries))
    }

    /// Every tensor zero, including layer-norm gains.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let entries = layout(config)
            .into_iter()
            .map(|(name, (r, c), _)| (name, Mat::zeros(r, c)))
            .collect();
        Ok(Self::from_entries(config.clone(), entries))
    }

    fn from_entries(config: ModelConfig, entries: Vec<(String, Mat)>) -> Self {
        let (names, params): (Vec<String>, Vec<Mat>) = entries.into_iter().unzip();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            config,
            names,
            params,
            index,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Same tensors with reference-pose encoding switched on or off.
    pub fn with_pose_guidance(mut self, on: bool) -> Self {
        self.config.pose_guidance = on;
        self
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Mat] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Mat] {
        &mut self.params
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.position(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.position(name).map(move |i| &mut self.params[i])
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Mat) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Mat::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Mat::is_finite)
    }

    /// `(s_c, s_q, s_f)`.
    pub fn uncertainty(&self) -> [f64; 3] {
        let u = self.get("uncertainty").expect("uncertainty is always present");
        [u.data[0], u.data[1], u.data[2]]
    }

    pub fn to_json(&self) -> Result<String> {
        let file = WeightsFile {
            schema: WEIGHTS_SCHEMA.to_string(),
            seed: self.config.seed,
            config: self.config.clone(),
            params: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(n, m)| TensorRecord {
                    name: n.clone(),
                    shape: [m.rows, m.cols],
                    data: m.data.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    /// Parses a checkpoint and checks every tensor against the layout its config implies.
    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            schema: Option<String>,
        }
        let probe: Probe = serde_json::from_str(text)?;
        if probe.schema.as_deref() != Some(WEIGHTS_SCHEMA) {
            return Err(Error::Version {
                found: probe.schema.unwrap_or_else(|| "<missing>".into()),
                expected: WEIGHTS_SCHEMA.into(),
            });
        }
        let file: WeightsFile = serde_json::from_str(text)?;
        file.config.validate()?;
        let expected = layout(&file.config);
        if expected.len() != file.params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, config implies {}",
                file.params.len(),
                expected.len()
            )));
        }
        let mut entries = Vec::with_capacity(expected.len());
        for ((name, shape, _), rec) in expected.into_iter().zip(file.params) {
            if rec.name != name {
                return Err(Error::Shape(format!("expected tensor {name}, found {}", rec.name)));
            }
            if (rec.shape[0], rec.shape[1]) != shape || rec.data.len() != shape.0 * shape.1 {
                return Err(Error::Shape(format!(
                    "{name}: expected {shape:?}, found {:?} with {} values",
                    rec.shape,
                    rec.data.len()
                )));
            }
            entries.push((name, Mat::from_vec(shape.0, shape.1, rec.data)));
        }
        let w = Self::from_entries(file.config, entries);
        if !w.is_finite() {
            return Err(Error::NonFinite("checkpoint tensors".into()));
        }
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    schema: String,
    seed: u64,
    config: ModelConfig,
    params: Vec<TensorRecord>,
}

/// Weights placed on a graph tape.
pub(crate) struct Net<'w> {
    pub w: &'w Weights,
    pub vars: Vec<Var>,
}

impl<'w> Net<'w> {
    /// Registers every tensor; `trainable` decides whether they collect gradients.
    pub fn bind(g: &mut Graph, w: &'w Weights, trainable: bool) -> Self {
        let vars = w
            .params
            .iter()
            .map(|m| if trainable { g.param(m.clone()) } else { g.constant(m.clone()) })
            .collect();
        Self { w, vars }
    }

    pub fn p(&self, name: &str) -> Var {
        self.vars[self.w.position(name).unwrap_or_else(|| panic!("missing parameter {name}"))]
    }

    fn cfg(&self) -> &ModelConfig {
        &self.w.config
    }
}

/// One forward input: `k + 1` feature maps and the `k` normalized reference poses.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub images: &'a [FeatureMap],
    pub ref_poses: &'a [Pose],
}

/// Graph handles for a batch of samples; output rows are frame-major across the batch.
pub(crate) struct ForwardVars {
    pub q: Var,
    pub c: Var,
    pub f: Var,
    /// First output row of each sample.
    pub offsets: Vec<usize>,
}

fn check_sample(cfg: &ModelConfig, s: &Sample) -> Result<()> {
    if s.images.len() != s.ref_poses.len() + 1 {
        return Err(Error::precondition(format!(
            "{} feature maps for {} reference poses; expected k + 1 maps",
            s.images.len(),
            s.ref_poses.len()
        )));
    }
    if s.images.len() > cfg.max_frames {
        return Err(Error::precondition(format!(
            "{} frames exceed max_frames = {}",
            s.images.len(),
            cfg.max_frames
        )));
    }
    for fm in s.images {
        check_map(cfg, fm)?;
    }
    if s.ref_poses.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("reference pose".into()));
    }
    Ok(())
}

fn check_map(cfg: &ModelConfig, fm: &FeatureMap) -> Result<()> {
    let want = (cfg.patch_grid.0, cfg.patch_grid.1, cfg.feature_channels);
    if (fm.height, fm.width, fm.channels) != want || fm.data.len() != want.0 * want.1 * want.2 {
        return Err(Error::Shape(format!(
            "feature map {}x{}x{} does not match model grid {:?}",
            fm.height, fm.width, fm.channels, want
        )));
    }
    Ok(())
}

fn pose_rows(poses: &[&Pose]) -> Mat {
    let mut m = Mat::zeros(poses.len(), 12);
    for (i, p) in poses.iter().enumerate() {
        m.row_mut(i).copy_from_slice(&flatten_pose(p));
    }
    m
}

fn pose_mlp(g: &mut Graph, net: &Net, x: Var) -> Var {
    let h = g.linear(x, net.p("pose_mlp.w1"), net.p("pose_mlp.b1"));
    let h = g.gelu(h);
    g.linear(h, net.p("pose_mlp.w2"), net.p("pose_mlp.b2"))
}

fn patch_embed(g: &mut Graph, net: &Net, maps: &[&FeatureMap]) -> Var {
    let cfg = net.cfg();
    let p = cfg.num_patches();
    let mut data = Vec::with_capacity(maps.len() * p * cfg.feature_channels);
    for fm in maps {
        data.extend_from_slice(&fm.data);
    }
    let x = g.constant(Mat::from_vec(maps.len() * p, cfg.feature_channels, data));
    let proj = g.matmul(x, net.p("patch.proj"));
    let pos = g.gather_rows(net.p("patch.pos"), (0..maps.len()).flat_map(|_| 0..p).collect());
    g.add(proj, pos)
}

/// Pre-norm attention and feed-forward sublayers with residuals.
fn attn_ff(g: &mut Graph, net: &Net, x: Var, prefix: &str, groups: &[(usize, usize)]) -> Var {
    let p = |s: &str| net.p(&format!("{prefix}.{s}"));
    let h = g.layer_norm(x, p("ln1.g"), p("ln1.b"));
    let qkv = g.linear(h, p("attn.wqkv"), p("attn.bqkv"));
    let a = g.attention(qkv, net.cfg().num_heads, groups.to_vec());
    let a = g.linear(a, p("attn.wo"), p("attn.bo"));
    let x = g.add(x, a);
    let h = g.layer_norm(x, p("ln2.g"), p("ln2.b"));
    let h = g.linear(h, p("ff.w1"), p("ff.b1"));
    let h = g.gelu(h);
    let h = g.linear(h, p("ff.w2"), p("ff.b2"));
    g.add(x, h)
}

/// Row layout of a batch inside the token matrix.
struct Layout {
    /// `(first frame, frame count)` per sample.
    samples: Vec<(usize, usize)>,
    num_frames: usize,
    /// Global frame index of every reference, in pose-encoding order.
    ref_frames: Vec<usize>,
}

impl Layout {
    fn new(samples: &[Sample]) -> Self {
        let mut out = Vec::new();
        let mut ref_frames = Vec::new();
        let mut n = 0;
        for s in samples {
            out.push((n, s.images.len()));
            ref_frames.extend(n..n + s.ref_poses.len());
            n += s.images.len();
        }
        Self {
            samples: out,
            num_frames: n,
            ref_frames,
        }
    }

    fn frame_groups(&self, t: usize) -> Vec<(usize, usize)> {
        (0..self.num_frames).map(|f| (f * t, (f + 1) * t)).collect()
    }

    fn sample_groups(&self, t: usize) -> Vec<(usize, usize)> {
        self.samples.iter().map(|&(s, n)| (s * t, (s + n) * t)).collect()
    }
}

/// Camera tokens `g` for every frame, and the pose encodings `y` of the references.
fn camera_tokens(g: &mut Graph, net: &Net, samples: &[Sample], lay: &Layout) -> (Var, Option<Var>) {
    let cfg = net.cfg();
    let d = cfg.token_dim;
    let refs: Vec<&Pose> = samples.iter().flat_map(|s| s.ref_poses.iter()).collect();
    let y = if cfg.pose_guidance && !refs.is_empty() {
        let x = g.constant(pose_rows(&refs));
        Some(pose_mlp(g, net, x))
    } else {
        None
    };
    let slots: Vec<usize> = lay.samples.iter().flat_map(|&(_, n)| 0..n).collect();
    let camera = net.p("tokens.camera");
    let gtok = match cfg.token_mode {
        TokenMode::AllLearnable => {
            let l = g.gather_rows(camera, slots);
            match y {
                Some(y) => g.add_rows(l, y, lay.ref_frames.clone()),
                None => l,
            }
        }
        TokenMode::LastOnly => {
            let query_slots: Vec<usize> = lay.samples.iter().map(|&(_, n)| n - 1).collect();
            let lq = g.gather_rows(camera, query_slots);
            let yv = match y {
                Some(y) => y,
                None => g.constant(Mat::zeros(lay.ref_frames.len(), d)),
            };
            // Source rows: all reference encodings, then one query token per sample.
            let src = g.concat_rows(vec![yv, lq]);
            let mut order = Vec::with_capacity(lay.num_frames);
            let mut r = 0;
            for (si, &(_, n)) in lay.samples.iter().enumerate() {
                for _ in 0..n - 1 {
                    order.push(r);
                    r += 1;
                }
                order.push(lay.ref_frames.len() + si);
            }
            g.gather_rows(src, order)
        }
    };
    (gtok, y)
}

/// Frame-major token matrix `[g_i, r, f_i]` for every frame.
fn assemble(g: &mut Graph, net: &Net, gtok: Var, patches: Var, num_frames: usize) -> Var {
    let cfg = net.cfg();
    let (r, p) = (cfg.num_register_tokens, cfg.num_patches());
    let mut parts = vec![gtok];
    if r > 0 {
        parts.push(net.p("tokens.register"));
    }
    parts.push(patches);
    let src = g.concat_rows(parts);
    let mut order = Vec::with_capacity(num_frames * cfg.tokens_per_frame());
    for f in 0..num_frames {
        order.push(f);
        order.extend(num_frames..num_frames + r);
        order.extend((0..p).map(|j| num_frames + r + f * p + j));
    }
    g.gather_rows(src, order)
}

fn trunk_block(
    g: &mut Graph,
    net: &Net,
    x: Var,
    y: Option<Var>,
    block: usize,
    lay: &Layout,
    t: usize,
) -> Var {
    let x = attn_ff(g, net, x, &format!("blocks.{block}.frame"), &lay.frame_groups(t));
    let x = match y {
        Some(y) => g.add_rows(x, y, lay.ref_frames.iter().map(|f| f * t).collect()),
        None => x,
    };
    attn_ff(g, net, x, &format!("blocks.{block}.global"), &lay.sample_groups(t))
}

fn head(g: &mut Graph, net: &Net, rows: Var, groups: &[(usize, usize)]) -> (Var, Var, Var) {
    let mut h = rows;
    for j in 0..net.cfg().head_layers {
        h = attn_ff(g, net, h, &format!("head.{j}"), groups);
    }
    let h = g.layer_norm(h, net.p("head.ln.g"), net.p("head.ln.b"));
    let raw = g.linear(h, net.p("head.out.w"), net.p("head.out.b"));
    let q = g.slice_cols(raw, 0, 4);
    let unit = g.constant(Mat::from_vec(1, 4, vec![1.0, 0.0, 0.0, 0.0]));
    let q = g.add_bias(q, unit);
    let q = g.normalize_rows(q);
    let c = g.slice_cols(raw, 4, 3);
    let f = g.slice_cols(raw, 7, 2);
    let f = g.softplus(f);
    (q, c, f)
}

pub(crate) fn forward_graph(g: &mut Graph, net: &Net, samples: &[Sample]) -> Result<ForwardVars> {
    let cfg = net.cfg();
    if samples.is_empty() {
        return Err(Error::precondition("forward needs at least one sample"));
    }
    for s in samples {
        check_sample(cfg, s)?;
    }
    let lay = Layout::new(samples);
    let t = cfg.tokens_per_frame();
    let maps: Vec<&FeatureMap> = samples.iter().flat_map(|s| s.images.iter()).collect();
    let patches = patch_embed(g, net, &maps);
    let (gtok, y) = camera_tokens(g, net, samples, &lay);
    let mut x = assemble(g, net, gtok, patches, lay.num_frames);
    for b in 0..cfg.num_blocks {
        x = trunk_block(g, net, x, y, b, &lay, t);
    }
    let rows = g.gather_rows(x, (0..lay.num_frames).map(|f| f * t).collect());
    let (q, c, f) = head(g, net, rows, &lay.sample_groups(1));
    Ok(ForwardVars {
        q,
        c,
        f,
        offsets: lay.samples.iter().map(|&(s, _)| s).collect(),
    })
}

pub(crate) fn read_outputs(g: &Graph, vars: &ForwardVars, range: std::ops::Range<usize>) -> Vec<CameraOutput> {
    let (q, c, f) = (g.value(vars.q), g.value(vars.c), g.value(vars.f));
    range
        .map(|i| {
            let qr = q.row(i);
            let quat = if qr.iter().all(|v| *v == 0.0) {
                Quaternion::IDENTITY
            } else {
                Quaternion::new(qr[0], qr[1], qr[2], qr[3])
            };
            let cr = c.row(i);
            CameraOutput {
                q: quat,
                c: Vector3::new(cr[0], cr[1], cr[2]),
                fx: f.get(i, 0),
                fy: f.get(i, 1),
            }
        })
        .collect()
}

/// Runs several independent samples through one batched pass.
pub fn forward_batch(samples: &[Sample], weights: &Weights) -> Result<Vec<Vec<CameraOutput>>> {
    let mut g = Graph::new();
    let net = Net::bind(&mut g, weights, false);
    let vars = forward_graph(&mut g, &net, samples)?;
    let out = samples
        .iter()
        .zip(&vars.offsets)
        .map(|(s, &o)| read_outputs(&g, &vars, o..o + s.images.len()))
        .collect();
    Ok(out)
}

/// Per-frame cameras for `[ref_1, ..., ref_k, query]`.
pub fn forward(images: &[FeatureMap], ref_poses: &[Pose], weights: &Weights) -> Result<Vec<CameraOutput>> {
    Ok(forward_batch(&[Sample { images, ref_poses }], weights)?.remove(0))
}

/// `y = MLP(flatten(p))`.
pub fn encode_pose_token(pose: &Pose, weights: &Weights) -> Result<Vec<f64>> {
    if !weights.config().pose_guidance {
        return Err(Error::precondition("pose guidance is disabled for this model"));
    }
    if !pose.is_finite() {
        return Err(Error::NonFinite("pose".into()));
    }
    let mut g = Graph::new();
    let net = Net::bind(&mut g, weights, false);
    let x = g.constant(pose_rows(&[pose]));
    let y = pose_mlp(&mut g, &net, x);
    Ok(g.value(y).data.clone())
}

/// `(P_h·P_w) × d` patch tokens: linear projection of each cell plus its positional row.
pub fn embed_patches(feature_map: &FeatureMap, weights: &Weights) -> Result<Mat> {
    check_map(weights.config(), feature_map)?;
    let mut g = Graph::new();
    let net = Net::bind(&mut g, weights, false);
    let v = patch_embed(&mut g, &net, &[feature_map]);
    Ok(g.value(v).clone())
}

pub fn build_tokens(images: &[FeatureMap], ref_poses: &[Pose], weights: &Weights) -> Result<TokenSet> {
    let cfg = weights.config();
    let sample = Sample { images, ref_poses };
    check_sample(cfg, &sample)?;
    let mut g = Graph::new();
    let net = Net::bind(&mut g, weights, false);
    let lay = Layout::new(&[sample]);
    let patches = patch_embed(&mut g, &net, &images.iter().collect::<Vec<_>>());
    let (gtok, _) = camera_tokens(&mut g, &net, &[sample], &lay);
    let n = images.len();
    let r = cfg.num_register_tokens;
    let mut register_tokens = Mat::zeros(n * r, cfg.token_dim);
    if r > 0 {
        let reg = weights.get("tokens.register").expect("register tokens");
        for f in 0..n {
            register_tokens.data[f * r * cfg.token_dim..(f + 1) * r * cfg.token_dim].copy_from_slice(&reg.data);
        }
    }
    Ok(TokenSet {
        pose_tokens: g.value(gtok).clone(),
        register_tokens,
        patch_tokens: g.value(patches).clone(),
    })
}

fn check_tokens(cfg: &ModelConfig, t: &TokenSet) -> Result<()> {
    let n = t.num_frames();
    let d = cfg.token_dim;
    if n == 0
        || t.pose_tokens.cols != d
        || t.register_tokens.shape() != (n * cfg.num_register_tokens, d)
        || t.patch_tokens.shape() != (n * cfg.num_patches(), d)
    {
        return Err(Error::Shape("token set does not match the model configuration".into()));
    }
    Ok(())
}

/// One trunk block: frame attention, re-injection of `y` on reference camera
/// rows (the last frame is the query and gets nothing), then global attention.
pub fn aa_block(tokens: &TokenSet, y: &Mat, weights: &Weights, block: usize) -> Result<TokenSet> {
    let cfg = weights.config();
    check_tokens(cfg, tokens)?;
    let n = tokens.num_frames();
    if y.shape() != (n, cfg.token_dim) {
        return Err(Error::Shape(format!("y is {:?}, expected ({n}, {})", y.shape(), cfg.token_dim)));
    }
    if block >= cfg.num_blocks {
        return Err(Error::precondition(format!("block {block} out of range")));
    }
    let (r, p, d, t) = (cfg.num_register_tokens, cfg.num_patches(), cfg.token_dim, cfg.tokens_per_frame());
    let mut x = Mat::zeros(n * t, d);
    for f in 0..n {
        x.row_mut(f * t).copy_from_slice(tokens.pose_tokens.row(f));
        for j in 0..r {
            x.row_mut(f * t + 1 + j).copy_from_slice(tokens.register_tokens.row(f * r + j));
        }
        for j in 0..p {
            x.row_mut(f * t + 1 + r + j).copy_from_slice(tokens.patch_tokens.row(f * p + j));
        }
    }
    let mut g = Graph::new();
    let net = Net::bind(&mut g, weights, false);
    let xv = g.constant(x);
    let yref = Mat::from_vec(n - 1, d, y.data[..(n - 1) * d].to_vec());
    let yv = g.constant(yref);
    let lay = Layout {
        samples: vec![(0, n)],
        num_frames: n,
        ref_frames: (0..n - 1).collect(),
    };
    let out = trunk_block(&mut g, &net, xv, Some(yv), block, &lay, t);
    let o = g.value(out);
    let mut res = TokenSet {
        pose_tokens: Mat::zeros(n, d),
        register_tokens: Mat::zeros(n * r, d),
        patch_tokens: Mat::zeros(n * p, d),
    };
    for f in 0..n {
        res.pose_tokens.row_mut(f).copy_from_slice(o.row(f * t));
        for j in 0..r {
            res.register_tokens.row_mut(f * r + j).copy_from_slice(o.row(f * t + 1 + j));
        }
        for j in 0..p {
            res.patch_tokens.row_mut(f * p + j).copy_from_slice(o.row(f * t + 1 + r + j));
        }
    }
    Ok(res)
}

/// Attention head over camera-token rows of a single sample.
pub fn camera_head(pose_token_rows: &Mat, weights: &Weights) -> Result<Vec<CameraOutput>> {
    let cfg = weights.config();
    if pose_token_rows.rows == 0 || pose_token_rows.cols != cfg.token_dim {
        return Err(Error::Shape(format!(
            "camera head needs n x {} rows, got {:?}",
            cfg.token_dim,
            pose_token_rows.shape()
        )));
    }
    let n = pose_token_rows.rows;
    let mut g = Graph::new();
    let net = Net::bind(&mut g, weights, false);
    let x = g.constant(pose_token_rows.clone());
    let (q, c, f) = head(&mut g, &net, x, &[(0, n)]);
    let vars = ForwardVars {
        q,
        c,
        f,
        offsets: vec![0],
    };
    Ok(read_outputs(&g, &vars, 0..n))
}
