//! Supervised training of the regressor with learned task weighting.
//!
//! Each step draws scenes, picks a query and its most co-visible database
//! frames as references, and supervises all `k + 1` regressed cameras with a
//! per-component L1 loss. The three component losses are combined as
//! `Σ loss_x · exp(−s_x) + s_x`, with `s_x` trained alongside the network.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{generate_scene, FeatureMap, Scene, SceneGenConfig};
use crate::error::{Error, Result};
use crate::geom::{normalize_poses, relative_pose, scale_poses, Pose, SCALE_EPS};
use crate::nn::{Grads, Graph, Mat, Var};
use crate::regressor::{forward_graph, CameraOutput, ForwardVars, Net, Sample, TokenMode, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayShape {
    Cosine,
    Linear,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_lr: f64,
    pub shape: DecayShape,
}

impl LrSchedule {
    /// Learning rate at `step` of a run with `steps` steps.
    pub fn at(&self, step: usize, steps: usize) -> f64 {
        let frac = if steps <= 1 {
            0.0
        } else {
            step.min(steps - 1) as f64 / (steps - 1) as f64
        };
        let span = self.initial - self.final_lr;
        match self.shape {
            DecayShape::Constant => self.initial,
            DecayShape::Linear => self.initial - span * frac,
            DecayShape::Cosine => self.final_lr + 0.5 * span * (1.0 + (std::f64::consts::PI * frac).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: LrSchedule,
    pub steps: usize,
    pub batch_size: usize,
    /// Inclusive range of reference counts drawn per sample.
    pub k_range: (usize, usize),
    pub seed: u64,
    pub token_mode: TokenMode,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: LrSchedule {
                initial: 3e-4,
                final_lr: 3e-6,
                shape: DecayShape::Cosine,
            },
            steps: 5000,
            batch_size: 4,
            k_range: (2, 4),
            seed: 0,
            token_mode: TokenMode::AllLearnable,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = &self.learning_rate;
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(lr.final_lr > 0.0 && lr.initial >= lr.final_lr) && !(lr.initial == 0.0 && lr.final_lr == 0.0) {
            return bad("learning rate must satisfy initial >= final > 0");
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be at least 1");
        }
        if self.k_range.0 == 0 || self.k_range.1 < self.k_range.0 {
            return bad("k_range must satisfy 1 <= min <= max");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("AdamW moments must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_c: f64,
    pub loss_q: f64,
    pub loss_f: f64,
    pub s_c: f64,
    pub s_q: f64,
    pub s_f: f64,
    pub total: f64,
}

/// Mean absolute error per component over frames and entries.
///
/// Each ground-truth quaternion is sign-flipped onto the prediction's
/// hemisphere first, so `q` and `−q` cost the same.
pub fn component_loss(pred: &[CameraOutput], gt: &[CameraOutput]) -> Result<(f64, f64, f64)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::precondition(format!(
            "{} predictions for {} targets",
            pred.len(),
            gt.len()
        )));
    }
    let (mut lc, mut lq, mut lf) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(gt) {
        let tq = if p.q.dot(&t.q) < 0.0 { t.q.neg() } else { t.q };
        lq += p.q.to_array().iter().zip(tq.to_array()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        lc += (p.c - t.c).abs().sum();
        lf += (p.fx - t.fx).abs() + (p.fy - t.fy).abs();
    }
    let n = pred.len() as f64;
    Ok((lc / (3.0 * n), lq / (4.0 * n), lf / (2.0 * n)))
}

/// `Σ_x loss_x · e^{−s_x} + s_x` over `x ∈ {c, q, f}`.
pub fn homoscedastic_total(losses: (f64, f64, f64), s: [f64; 3]) -> LossBreakdown {
    let (lc, lq, lf) = losses;
    let total = lc * (-s[0]).exp() + s[0] + lq * (-s[1]).exp() + s[1] + lf * (-s[2]).exp() + s[2];
    LossBreakdown {
        loss_c: lc,
        loss_q: lq,
        loss_f: lf,
        s_c: s[0],
        s_q: s[1],
        s_f: s[2],
        total,
    }
}

/// One supervised example: inputs for the network plus ground truth in the
/// normalized frame of the first reference.
#[derive(Debug, Clone)]
pub struct Example {
    /// `[ref_1, ..., ref_k, query]`.
    pub images: Vec<FeatureMap>,
    /// Reference poses relative to `ref_1`, divided by `scale`.
    pub ref_poses: Vec<Pose>,
    pub scale: f64,
    /// Ground truth for every frame, same order as `images`.
    pub targets: Vec<CameraOutput>,
    /// Absolute pose of `ref_1`.
    pub anchor: Pose,
}

impl Example {
    pub fn sample(&self) -> Sample<'_> {
        Sample {
            images: &self.images,
            ref_poses: &self.ref_poses,
        }
    }
}

/// Builds an example from scene frame indices.
///
/// The scale is the mean camera-center distance of the references from
/// `ref_1`. With a single reference that is undefined; when
/// `query_scale_fallback` is set the query's distance is used instead, so
/// pairwise training sees unit-length translations.
pub fn build_example(scene: &Scene, refs: &[usize], query: usize, query_scale_fallback: bool) -> Result<Example> {
    if refs.is_empty() {
        return Err(Error::precondition("an example needs at least one reference"));
    }
    let anchor = scene.frames[refs[0]].pose;
    // The anchor is the coordinate frame, so it is exactly the identity.
    let rel: Vec<Pose> = std::iter::once(Pose::identity())
        .chain(refs[1..].iter().map(|&i| relative_pose(&anchor, &scene.frames[i].pose)))
        .collect();
    let query_rel = relative_pose(&anchor, &scene.frames[query].pose);
    let (mut ref_poses, mut scale) = normalize_poses(&rel)?;
    if refs.len() == 1 && query_scale_fallback {
        let d = query_rel.center().norm();
        if d > SCALE_EPS {
            scale = d;
            ref_poses = scale_poses(&rel, 1.0 / d);
        }
    }
    let (gh, gw) = scene.meta.grid;
    let target = |frame: usize, p: &Pose| {
        let k = scene.frames[frame].intrinsics;
        CameraOutput {
            q: p.rotation.canonical(),
            c: p.translation / scale,
            fx: k.fx / gw as f64,
            fy: k.fy / gh as f64,
        }
    };
    let mut targets: Vec<CameraOutput> = refs.iter().zip(&rel).map(|(&i, p)| target(i, p)).collect();
    targets.push(target(query, &query_rel));
    let images = refs
        .iter()
        .chain(std::iter::once(&query))
        .map(|&i| scene.frames[i].feature_map.clone())
        .collect();
    Ok(Example {
        images,
        ref_poses,
        scale,
        targets,
        anchor,
    })
}

/// Scenes plus the co-visibility tables used to pick references.
pub struct TrainingSet {
    scenes: Vec<Scene>,
    /// `covis[s][a][b]` over all frames of scene `s`.
    covis: Vec<Vec<Vec<f64>>>,
}

impl TrainingSet {
    pub fn new(scenes: Vec<Scene>) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::precondition("training needs at least one scene"));
        }
        let covis = scenes
            .iter()
            .map(|s| {
                let vis: Vec<Vec<usize>> = s.frames.iter().map(|f| s.visible(f)).collect();
                let ids: Vec<&str> = s.frames.iter().map(|f| f.id.as_str()).collect();
                (0..ids.len())
                    .map(|a| {
                        (0..ids.len())
                            .map(|b| {
                                let shared = vis[a].iter().filter(|i| vis[b].binary_search(i).is_ok()).count();
                                shared as f64 / vis[a].len().max(1) as f64
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self { scenes, covis })
    }

    /// `count` scenes from `base` with consecutive seeds starting at `seed`.
    pub fn generate(base: &SceneGenConfig, count: usize, seed: u64) -> Result<Self> {
        let scenes = (0..count as u64)
            .map(|i| {
                generate_scene(&SceneGenConfig {
                    seed: seed.wrapping_add(i),
                    ..base.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(scenes)
    }

    pub fn scenes(&self) -> &[Scene] {
        &self.scenes
    }

    /// Database frames other than `query`, best co-visibility first, ties by id.
    pub fn ranked_references(&self, scene: usize, query: usize) -> Vec<usize> {
        let s = &self.scenes[scene];
        let mut cands: Vec<usize> = s.database_indices().into_iter().filter(|&i| i != query).collect();
        let row = &self.covis[scene][query];
        cands.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| s.frames[a].id.cmp(&s.frames[b].id))
        });
        cands
    }

    /// Random scene and query frame, the top-`k` references, and the example built from them.
    pub fn draw(&self, k: usize, pairwise: bool, rng: &mut ChaCha8Rng) -> Result<Example> {
        let si = rng.gen_range(0..self.scenes.len());
        let scene = &self.scenes[si];
        let query = rng.gen_range(0..scene.frames.len());
        let refs = self.ranked_references(si, query);
        if refs.len() < k {
            return Err(Error::precondition(format!(
                "scene {si} has {} candidate references, k = {k}",
                refs.len()
            )));
        }
        build_example(scene, &refs[..k], query, pairwise)
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    decay: Vec<bool>,
    t: u64,
}

impl AdamW {
    /// Weight decay applies to projection matrices only, not to biases, norms, tokens or `s`.
    pub fn new(weights: &Weights, cfg: &TrainConfig) -> Self {
        let zeros = |w: &Weights| w.params().iter().map(|m| Mat::zeros(m.rows, m.cols)).collect::<Vec<_>>();
        let decay = weights
            .names()
            .iter()
            .map(|n| n.ends_with(".w") || n.ends_with(".w1") || n.ends_with(".w2") || n.ends_with("wqkv") || n.ends_with("wo") || n == "patch.proj")
            .collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            m: zeros(weights),
            v: zeros(weights),
            decay,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let wd = if self.decay[i] { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p.data[j] -= lr * (mhat / (vhat.sqrt() + self.eps) + wd * p.data[j]);
            }
        }
    }
}

/// Loss handles on a tape.
pub(crate) struct LossVars {
    pub total: Var,
    pub parts: [Var; 3],
    pub s: Var,
}

/// Eq.-2 loss over every frame of a batch.
pub(crate) fn loss_graph(g: &mut Graph, net: &Net, fv: &ForwardVars, targets: &[CameraOutput]) -> LossVars {
    let n = targets.len();
    let qp = g.value(fv.q).clone();
    let mut tq = Mat::zeros(n, 4);
    let mut tc = Mat::zeros(n, 3);
    let mut tf = Mat::zeros(n, 2);
    for (i, t) in targets.iter().enumerate() {
        let q = t.q.to_array();
        let dot: f64 = qp.row(i).iter().zip(&q).map(|(a, b)| a * b).sum();
        let sign = if dot < 0.0 { -1.0 } else { 1.0 };
        tq.row_mut(i).iter_mut().zip(q).for_each(|(o, v)| *o = sign * v);
        tc.row_mut(i).copy_from_slice(t.c.as_slice());
        tf.row_mut(i).copy_from_slice(&[t.fx, t.fy]);
    }
    let lc = g.l1_loss(fv.c, tc);
    let lq = g.l1_loss(fv.q, tq);
    let lf = g.l1_loss(fv.f, tf);
    let u = net.p("uncertainty");
    let mut total = None;
    for (i, l) in [lc, lq, lf].into_iter().enumerate() {
        let s = g.slice_cols(u, i, 1);
        let neg = g.scale(s, -1.0);
        let w = g.exp(neg);
        let wl = g.mul(l, w);
        let term = g.add(wl, s);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term),
        });
    }
    LossVars {
        total: total.expect("three terms"),
        parts: [lc, lq, lf],
        s: u,
    }
}

/// Builds the batch graph and returns `(graph, bound vars, loss vars)`.
pub(crate) fn batch_loss<'w>(weights: &'w Weights, batch: &[Example]) -> Result<(Graph, Net<'w>, LossVars)> {
    let mut g = Graph::new();
    let net = Net::bind(&mut g, weights, true);
    let samples: Vec<Sample> = batch.iter().map(Example::sample).collect();
    let fv = forward_graph(&mut g, &net, &samples)?;
    let targets: Vec<CameraOutput> = batch.iter().flat_map(|e| e.targets.iter().copied()).collect();
    let lv = loss_graph(&mut g, &net, &fv, &targets);
    Ok((g, net, lv))
}

fn breakdown(g: &Graph, lv: &LossVars) -> LossBreakdown {
    let s = g.value(lv.s);
    let v = |x: Var| g.value(x).data[0];
    LossBreakdown {
        loss_c: v(lv.parts[0]),
        loss_q: v(lv.parts[1]),
        loss_f: v(lv.parts[2]),
        s_c: s.data[0],
        s_q: s.data[1],
        s_f: s.data[2],
        total: v(lv.total),
    }
}

fn collect_grads(mut grads: Grads, net: &Net) -> Vec<Mat> {
    net.vars
        .iter()
        .zip(net.w.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Mat::zeros(p.rows, p.cols)))
        .collect()
}

/// Loss and per-parameter gradients for one batch.
pub fn loss_and_grads(weights: &Weights, batch: &[Example]) -> Result<(LossBreakdown, Vec<Mat>)> {
    let (g, net, lv) = batch_loss(weights, batch)?;
    let b = breakdown(&g, &lv);
    let grads = collect_grads(g.backward(lv.total), &net);
    Ok((b, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_c: f64,
    pub loss_q: f64,
    pub loss_f: f64,
    pub s_c: f64,
    pub s_q: f64,
    pub s_f: f64,
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepRecord {
    fn new(step: usize, b: LossBreakdown, grad_norm: f64) -> Self {
        Self {
            step,
            loss_c: b.loss_c,
            loss_q: b.loss_q,
            loss_f: b.loss_f,
            s_c: b.s_c,
            s_q: b.s_q,
            s_f: b.s_f,
            total: b.total,
            grad_norm,
        }
    }
}

fn train_impl(
    mut weights: Weights,
    data: &TrainingSet,
    cfg: &TrainConfig,
    pairwise: bool,
    mut progress: impl FnMut(&StepRecord),
) -> Result<(Weights, Vec<StepRecord>)> {
    cfg.validate()?;
    if cfg.token_mode != weights.config().token_mode {
        return Err(Error::InvalidConfig(
            "training token_mode differs from the model's token_mode".into(),
        ));
    }
    if cfg.k_range.1 + 1 > weights.config().max_frames {
        return Err(Error::InvalidConfig(format!(
            "k up to {} needs {} camera-token slots, model has {}",
            cfg.k_range.1,
            cfg.k_range.1 + 1,
            weights.config().max_frames
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&weights, cfg);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| {
                let k = rng.gen_range(cfg.k_range.0..=cfg.k_range.1);
                data.draw(k, pairwise, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let (b, mut grads) = loss_and_grads(&weights, &batch)?;
        let norms: Vec<f64> = grads.iter().map(|g| g.norm_squared().sqrt()).collect();
        let grad_norm = norms.iter().map(|n| n * n).sum::<f64>().sqrt();
        if !b.total.is_finite() || !grad_norm.is_finite() {
            let worst = weights
                .names()
                .iter()
                .zip(&norms)
                .filter(|(_, n)| !n.is_finite() || **n > 0.0)
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Greater))
                .map(|(n, v)| format!("{n}={v:e}"))
                .unwrap_or_default();
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "loss_c={:e} loss_q={:e} loss_f={:e} total={:e} grad_norm={grad_norm:e} largest={worst}",
                    b.loss_c, b.loss_q, b.loss_f, b.total
                ),
            });
        }
        if let Some(clip) = cfg.grad_clip {
            if grad_norm > clip {
                let f = clip / grad_norm;
                grads.iter_mut().for_each(|g| g.data.iter_mut().for_each(|v| *v *= f));
            }
        }
        opt.step(weights.params_mut(), &grads, cfg.learning_rate.at(step, cfg.steps));
        let rec = StepRecord::new(step, b, grad_norm);
        progress(&rec);
        curve.push(rec);
    }
    Ok((weights, curve))
}

/// Trains all parameters, including the uncertainty scalars.
pub fn train(weights: Weights, data: &TrainingSet, cfg: &TrainConfig) -> Result<(Weights, Vec<StepRecord>)> {
    train_impl(weights, data, cfg, false, |_| {})
}

/// [`train`] with a per-step callback.
pub fn train_with_progress(
    weights: Weights,
    data: &TrainingSet,
    cfg: &TrainConfig,
    progress: impl FnMut(&StepRecord),
) -> Result<(Weights, Vec<StepRecord>)> {
    train_impl(weights, data, cfg, false, progress)
}

/// Pair-only ablation: one reference per sample and no pose encoding.
pub fn pairwise_baseline(weights: Weights, data: &TrainingSet, cfg: &TrainConfig) -> Result<(Weights, Vec<StepRecord>)> {
    pairwise_with_progress(weights, data, cfg, |_| {})
}

pub fn pairwise_with_progress(
    weights: Weights,
    data: &TrainingSet,
    cfg: &TrainConfig,
    progress: impl FnMut(&StepRecord),
) -> Result<(Weights, Vec<StepRecord>)> {
    let weights = weights.with_pose_guidance(false);
    let cfg = TrainConfig {
        k_range: (1, 1),
        ..cfg.clone()
    };
    train_impl(weights, data, &cfg, true, progress)
}

pub fn write_loss_csv(records: &[StepRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_loss_csv(records: &[StepRecord], path: impl AsRef<Path>) -> Result<()> {
    write_loss_csv(records, std::fs::File::create(path)?)
}

/// Trailing moving average of the total loss, `window` steps wide.
pub fn smoothed_total(records: &[StepRecord], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(records.len());
    let mut acc = 0.0;
    for (i, r) in records.iter().enumerate() {
        acc += r.total;
        if i >= window {
            acc -= records[i - window].total;
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Largest gradient norm divided by the median gradient norm of a run.
pub fn spike_statistic(records: &[StepRecord]) -> f64 {
    let mut norms: Vec<f64> = records.iter().map(|r| r.grad_norm).collect();
    if norms.is_empty() {
        return f64::NAN;
    }
    norms.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = norms.len();
    let median = if n % 2 == 1 {
        norms[n / 2]
    } else {
        0.5 * (norms[n / 2 - 1] + norms[n / 2])
    };
    norms[n - 1] / median
}
