//! Metrics, end-to-end localization and the benchmark harness.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::geom::{
    inverse, relative_pose, rotation_angle_error, translation_angle_error, Pose, Quaternion,
};
use crate::regressor::{forward, forward_batch, Sample, Weights};
use crate::retrieval::{covis_score, retrieve, RetrievalResult, Strategy};
use crate::scale_recovery::{absolute_pose_motion_avg, absolute_pose_umeyama, AbsolutePoseEstimate, ScaleMethod};
use crate::training::build_example;

pub const REPORT_SCHEMA: &str = "mlk-report/1";
/// AUC and recall thresholds reported per cell, in degrees.
pub const THRESHOLDS: [f64; 3] = [5.0, 10.0, 20.0];

/// Angular error of one relative pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    #[serde(with = "lenient_f64")]
    pub rot_deg: f64,
    #[serde(with = "lenient_f64")]
    pub trans_deg: f64,
    #[serde(with = "lenient_f64")]
    pub combined: f64,
}

impl PairError {
    pub fn new(rot_deg: f64, trans_deg: f64) -> Self {
        Self {
            rot_deg,
            trans_deg,
            combined: rot_deg.max(trans_deg),
        }
    }

    /// Failure marker: infinite error in both components.
    pub fn failure() -> Self {
        Self::new(f64::INFINITY, f64::INFINITY)
    }

    /// Rotation angle and translation-direction angle between two relative poses.
    pub fn between(estimate: &Pose, truth: &Pose) -> Self {
        Self::new(
            rotation_angle_error(&estimate.rotation_matrix(), &truth.rotation_matrix()),
            translation_angle_error(&estimate.translation, &truth.translation),
        )
    }
}

fn check_thresholds(errors: &[PairError], thresholds: &[f64]) -> Result<()> {
    if errors.is_empty() {
        return Err(Error::precondition("no errors to summarize"));
    }
    if thresholds.iter().any(|t| !(*t > 0.0)) || thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::precondition("thresholds must be positive and ascending"));
    }
    Ok(())
}

/// Normalized area under the recall curve up to each threshold.
///
/// With the step recall `r(e) = #{combined ≤ e} / n`, the integral
/// `∫₀^θ r(e) de` equals `Σ max(0, θ − eᵢ) / n`.
pub fn pose_auc(errors: &[PairError], thresholds: &[f64]) -> Result<Vec<f64>> {
    check_thresholds(errors, thresholds)?;
    let n = errors.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| errors.iter().map(|e| (t - e.combined).max(0.0)).sum::<f64>() / (n * t))
        .collect())
}

/// Share of pairs with combined error at most each threshold.
pub fn recall_at(errors: &[PairError], thresholds: &[f64]) -> Result<Vec<f64>> {
    check_thresholds(errors, thresholds)?;
    let n = errors.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| errors.iter().filter(|e| e.combined <= t).count() as f64 / n)
        .collect())
}

/// Median with the mean of the middle pair for even counts; `+∞` sorts last.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::precondition("median of an empty list"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("median input".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// `(median translation error, median rotation error)`.
pub fn median_errors(records: &[QueryRecord]) -> Result<(f64, f64)> {
    let t: Vec<f64> = records.iter().map(|r| r.trans_err_units).collect();
    let r: Vec<f64> = records.iter().map(|r| r.rot_err_deg).collect();
    Ok((median(&t)?, median(&r)?))
}

/// Noise injected by the noisy oracle.
///
/// Each relative pose gets rotation noise `exp(ω)`, `ω ~ N(0, σ_r² I)`, and its
/// query-center direction is turned by an independent rotation with
/// `σ_d`. Both standard deviations grow by `overlap_penalty_deg · (1 − covis)`,
/// so poorly overlapping references yield worse estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub rot_sigma_deg: f64,
    pub dir_sigma_deg: f64,
    pub overlap_penalty_deg: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            rot_sigma_deg: 2.0,
            dir_sigma_deg: 2.0,
            overlap_penalty_deg: 0.0,
            seed: 0,
        }
    }
}

/// Source of relative poses `o_{i,q}` for the localization pipeline.
#[derive(Debug, Clone, Copy)]
pub enum Estimator<'a> {
    /// Multi-view regressor: one pass over all references and the query.
    Network(&'a Weights),
    /// One regressor pass per (reference, query) pair.
    Pairwise(&'a Weights),
    /// Ground-truth relative poses.
    Oracle,
    /// Ground truth perturbed by a [`NoiseModel`].
    NoisyOracle(NoiseModel),
}

impl Estimator<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Network(_) => "network",
            Estimator::Pairwise(_) => "pairwise",
            Estimator::Oracle => "oracle",
            Estimator::NoisyOracle(_) => "noisy_oracle",
        }
    }
}

/// Relative estimates for one query.
#[derive(Debug, Clone)]
pub struct RelativeEstimates {
    /// Query pose in each reference's camera frame, arbitrary scale.
    pub query_relative: Vec<Pose>,
    /// References and query in one common frame, if the estimator provides it.
    pub frame_poses: Option<(Vec<Pose>, Pose)>,
}

impl RelativeEstimates {
    /// Common-frame poses; without explicit ones the query frame is used, with
    /// each reference at `o_{i,q}⁻¹`.
    pub fn common_frame(&self) -> (Vec<Pose>, Pose) {
        match &self.frame_poses {
            Some(fp) => fp.clone(),
            None => (self.query_relative.iter().map(inverse).collect(), Pose::identity()),
        }
    }
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts.
    let mut h = 0x243f_6a88_85a3_08d3u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

fn perturb(rel: &Pose, rot_sigma: f64, dir_sigma: f64, rng: &mut ChaCha8Rng) -> Result<Pose> {
    let sample = |sigma: f64, rng: &mut ChaCha8Rng| {
        if sigma > 0.0 {
            let n = Normal::new(0.0, sigma).expect("positive sigma");
            Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
        } else {
            Vector3::zeros()
        }
    };
    let w_rot = sample(rot_sigma.to_radians(), rng);
    let w_dir = sample(dir_sigma.to_radians(), rng);
    let r = Quaternion::from_rotation_vector(&w_rot).to_rotation_matrix()? * rel.rotation_matrix();
    let c = Quaternion::from_rotation_vector(&w_dir).to_rotation_matrix()? * rel.center();
    Pose::from_center(&r, &c)
}

/// Relative poses of `query` with respect to each frame in `refs`.
pub fn estimate_relative(estimator: &Estimator, scene: &Scene, refs: &[usize], query: usize) -> Result<RelativeEstimates> {
    let qpose = scene.frames[query].pose;
    match estimator {
        Estimator::Oracle => Ok(RelativeEstimates {
            query_relative: refs
                .iter()
                .map(|&i| relative_pose(&scene.frames[i].pose, &qpose))
                .collect(),
            frame_poses: None,
        }),
        Estimator::NoisyOracle(noise) => {
            let qid = &scene.frames[query].id;
            let query_relative = refs
                .iter()
                .map(|&i| {
                    let f = &scene.frames[i];
                    let covis = covis_score(scene, qid, &f.id)?;
                    let extra = noise.overlap_penalty_deg * (1.0 - covis);
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[noise.seed, query as u64, i as u64]));
                    perturb(
                        &relative_pose(&f.pose, &qpose),
                        noise.rot_sigma_deg + extra,
                        noise.dir_sigma_deg + extra,
                        &mut rng,
                    )
                })
                .collect::<Result<_>>()?;
            Ok(RelativeEstimates {
                query_relative,
                frame_poses: None,
            })
        }
        Estimator::Network(w) => {
            let ex = build_example(scene, refs, query, false)?;
            let out = forward(&ex.images, &ex.ref_poses, w)?;
            let mut poses = out
                .iter()
                .map(|o| Pose::new(o.q, o.c * ex.scale))
                .collect::<Result<Vec<_>>>()?;
            let pq = poses.pop().expect("query output");
            let query_relative = poses.iter().map(|p| relative_pose(p, &pq)).collect();
            Ok(RelativeEstimates {
                query_relative,
                frame_poses: Some((poses, pq)),
            })
        }
        Estimator::Pairwise(w) => {
            let w = (*w).clone().with_pose_guidance(false);
            let examples = refs
                .iter()
                .map(|&i| build_example(scene, &[i], query, false))
                .collect::<Result<Vec<_>>>()?;
            let samples: Vec<Sample> = examples.iter().map(|e| e.sample()).collect();
            let outs = forward_batch(&samples, &w)?;
            let query_relative = outs
                .iter()
                .map(|o| Ok(relative_pose(&o[0].pose()?, &o[1].pose()?)))
                .collect::<Result<_>>()?;
            Ok(RelativeEstimates {
                query_relative,
                frame_poses: None,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizeConfig {
    pub k: usize,
    pub retrieval: Strategy,
    pub method: ScaleMethod,
}

#[derive(Debug, Clone)]
pub struct Localization {
    pub pose: Pose,
    pub retrieval: RetrievalResult,
    pub estimate: AbsolutePoseEstimate,
    pub retrieval_ms: f64,
    pub inference_ms: f64,
    pub recovery_ms: f64,
}

/// Retrieval, relative estimation and scale recovery for one query frame.
pub fn localize_query(scene: &Scene, query: &str, estimator: &Estimator, cfg: &LocalizeConfig) -> Result<Localization> {
    let min = cfg.method.min_references();
    if cfg.k < min {
        return Err(Error::degenerate(format!(
            "query {query}: {} needs k >= {min}, got {}",
            cfg.method.as_str(),
            cfg.k
        )));
    }
    let qi = scene.frame_index(query)?;
    let t0 = Instant::now();
    let retrieval = retrieve(scene, query, cfg.k, cfg.retrieval)?;
    let refs = retrieval
        .frame_ids
        .iter()
        .map(|id| scene.frame_index(id))
        .collect::<Result<Vec<_>>>()?;
    let t1 = Instant::now();
    let est = estimate_relative(estimator, scene, &refs, qi)?;
    let t2 = Instant::now();
    let ref_poses: Vec<Pose> = refs.iter().map(|&i| scene.frames[i].pose).collect();
    let estimate = match cfg.method {
        ScaleMethod::MotionAveraging => absolute_pose_motion_avg(&ref_poses, &est.query_relative),
        ScaleMethod::Umeyama => {
            let (pred_refs, pred_query) = est.common_frame();
            absolute_pose_umeyama(&ref_poses, &pred_refs, &pred_query)
        }
    }
    .map_err(|e| match e {
        Error::DegenerateGeometry(m) => Error::DegenerateGeometry(format!("query {query}: {m}")),
        other => other,
    })?;
    let t3 = Instant::now();
    let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
    Ok(Localization {
        pose: estimate.pose,
        retrieval,
        retrieval_ms: ms(t0, t1),
        inference_ms: ms(t1, t2),
        recovery_ms: ms(t2, t3),
        estimate,
    })
}

/// Per-query outcome within one benchmark cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub estimator: String,
    pub method: ScaleMethod,
    pub k: usize,
    pub retrieval: Strategy,
    #[serde(with = "lenient_f64")]
    pub trans_err_units: f64,
    #[serde(with = "lenient_f64")]
    pub rot_err_deg: f64,
    /// Errors of the estimated query pose relative to the first retrieved frame.
    #[serde(with = "lenient_f64")]
    pub pair_rot_deg: f64,
    #[serde(with = "lenient_f64")]
    pub pair_trans_deg: f64,
    pub wall_time_ms: f64,
    pub failure: Option<String>,
}

impl QueryRecord {
    pub fn pair_error(&self) -> PairError {
        PairError::new(self.pair_rot_deg, self.pair_trans_deg)
    }
}

/// Aggregates for one `(estimator, method, k, retrieval)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub estimator: String,
    pub method: ScaleMethod,
    pub k: usize,
    pub retrieval: Strategy,
    pub queries: usize,
    pub failures: usize,
    #[serde(with = "lenient_f64")]
    pub median_trans: f64,
    #[serde(with = "lenient_f64")]
    pub median_rot: f64,
    /// Integrated recall at 5°, 10°, 20°.
    pub auc: Vec<f64>,
    /// Plain recall at the same thresholds.
    pub recall: Vec<f64>,
    pub mean_wall_ms: f64,
}

/// Cells evaluated by [`run_benchmark`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkGrid {
    pub ks: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub methods: Vec<ScaleMethod>,
    /// When false every wall time is written as 0 so reports are byte-stable.
    pub timing: bool,
}

impl Default for BenchmarkGrid {
    fn default() -> Self {
        Self {
            ks: vec![10],
            strategies: vec![Strategy::CovisOracle],
            methods: vec![ScaleMethod::MotionAveraging],
            timing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub records: Vec<QueryRecord>,
    pub cells: Vec<CellSummary>,
}

fn evaluate_query(scene: &Scene, qi: usize, estimator: &Estimator, cfg: &LocalizeConfig, timing: bool) -> QueryRecord {
    let f = &scene.frames[qi];
    let start = Instant::now();
    let result = localize_query(scene, &f.id, estimator, cfg);
    let wall = if timing { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
    let mut rec = QueryRecord {
        query_id: f.id.clone(),
        estimator: estimator.name().to_string(),
        method: cfg.method,
        k: cfg.k,
        retrieval: cfg.retrieval,
        trans_err_units: f64::INFINITY,
        rot_err_deg: f64::INFINITY,
        pair_rot_deg: f64::INFINITY,
        pair_trans_deg: f64::INFINITY,
        wall_time_ms: wall,
        failure: None,
    };
    match result {
        Ok(loc) => {
            let gt = f.pose;
            rec.trans_err_units = (loc.pose.center() - gt.center()).norm();
            rec.rot_err_deg = rotation_angle_error(&loc.pose.rotation_matrix(), &gt.rotation_matrix());
            let anchor = scene.frame(&loc.retrieval.frame_ids[0]).map(|a| a.pose).unwrap_or(gt);
            let pe = PairError::between(&relative_pose(&anchor, &loc.pose), &relative_pose(&anchor, &gt));
            rec.pair_rot_deg = pe.rot_deg;
            rec.pair_trans_deg = pe.trans_deg;
        }
        Err(e) => rec.failure = Some(e.to_string()),
    }
    rec
}

/// Summaries per cell in order of first appearance.
pub fn summarize(records: &[QueryRecord]) -> Result<Vec<CellSummary>> {
    type Key = (String, ScaleMethod, usize, Strategy);
    let mut order: Vec<Key> = Vec::new();
    let mut groups: HashMap<Key, Vec<&QueryRecord>> = HashMap::new();
    for r in records {
        let key = (r.estimator.clone(), r.method, r.k, r.retrieval);
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let owned: Vec<QueryRecord> = g.iter().map(|r| (*r).clone()).collect();
            let (median_trans, median_rot) = median_errors(&owned)?;
            let pe: Vec<PairError> = g.iter().map(|r| r.pair_error()).collect();
            Ok(CellSummary {
                estimator: key.0,
                method: key.1,
                k: key.2,
                retrieval: key.3,
                queries: g.len(),
                failures: g.iter().filter(|r| r.failure.is_some()).count(),
                median_trans,
                median_rot,
                auc: pose_auc(&pe, &THRESHOLDS)?,
                recall: recall_at(&pe, &THRESHOLDS)?,
                mean_wall_ms: g.iter().map(|r| r.wall_time_ms).sum::<f64>() / g.len() as f64,
            })
        })
        .collect()
}

/// Every query frame of `scene` under every grid cell.
pub fn run_benchmark(scene: &Scene, estimator: &Estimator, grid: &BenchmarkGrid, seed: u64) -> Result<EvalReport> {
    run_benchmark_queries(scene, &scene.query_indices(), estimator, grid, seed)
}

/// [`run_benchmark`] restricted to the given frame indices.
pub fn run_benchmark_queries(
    scene: &Scene,
    queries: &[usize],
    estimator: &Estimator,
    grid: &BenchmarkGrid,
    seed: u64,
) -> Result<EvalReport> {
    if grid.ks.is_empty() || grid.strategies.is_empty() || grid.methods.is_empty() {
        return Err(Error::InvalidConfig("benchmark grid has an empty axis".into()));
    }
    if queries.is_empty() {
        return Err(Error::precondition("scene has no query frames"));
    }
    let mut cells = Vec::new();
    for &method in &grid.methods {
        for &retrieval in &grid.strategies {
            for &k in &grid.ks {
                cells.push(LocalizeConfig { k, retrieval, method });
            }
        }
    }
    let jobs: Vec<(LocalizeConfig, usize)> = cells
        .iter()
        .flat_map(|c| queries.iter().map(move |&q| (*c, q)))
        .collect();
    let records: Vec<QueryRecord> = jobs
        .par_iter()
        .map(|(cfg, q)| evaluate_query(scene, *q, estimator, cfg, grid.timing))
        .collect();
    let summaries = summarize(&records)?;
    let mut config = serde_json::json!({
        "estimator": estimator.name(),
        "grid": grid,
        "scene_seed": scene.meta.seed,
    });
    match estimator {
        Estimator::NoisyOracle(n) => config["noise"] = serde_json::to_value(n)?,
        Estimator::Network(w) | Estimator::Pairwise(w) => config["model"] = serde_json::to_value(w.config())?,
        Estimator::Oracle => {}
    }
    Ok(EvalReport {
        schema: REPORT_SCHEMA.to_string(),
        seed,
        config,
        records,
        cells: summaries,
    })
}

impl EvalReport {
    /// Recomputes the cell summaries from the records and compares.
    pub fn verify(&self) -> Result<()> {
        let again = summarize(&self.records)?;
        if again != self.cells {
            return Err(Error::InvalidConfig(
                "report aggregates do not match its per-query records".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            schema: Option<String>,
        }
        let probe: Probe = serde_json::from_str(text)?;
        if probe.schema.as_deref() != Some(REPORT_SCHEMA) {
            return Err(Error::Version {
                found: probe.schema.unwrap_or_else(|| "<missing>".into()),
                expected: REPORT_SCHEMA.into(),
            });
        }
        let r: Self = serde_json::from_str(text)?;
        r.verify()?;
        Ok(r)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(CsvRow::from(r))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn save(&self, json_path: impl AsRef<Path>) -> Result<()> {
        let json_path = json_path.as_ref();
        std::fs::write(json_path, self.to_json()?)?;
        self.write_csv(std::fs::File::create(json_path.with_extension("csv"))?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn cell(&self, estimator: &str, method: ScaleMethod, k: usize, retrieval: Strategy) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.estimator == estimator && c.method == method && c.k == k && c.retrieval == retrieval)
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    query_id: &'a str,
    estimator: &'a str,
    method: &'static str,
    k: usize,
    retrieval: &'static str,
    trans_err_units: f64,
    rot_err_deg: f64,
    pair_rot_deg: f64,
    pair_trans_deg: f64,
    wall_time_ms: f64,
    failure: &'a str,
}

impl<'a> From<&'a QueryRecord> for CsvRow<'a> {
    fn from(r: &'a QueryRecord) -> Self {
        Self {
            query_id: &r.query_id,
            estimator: &r.estimator,
            method: r.method.as_str(),
            k: r.k,
            retrieval: r.retrieval.as_str(),
            trans_err_units: r.trans_err_units,
            rot_err_deg: r.rot_err_deg,
            pair_rot_deg: r.pair_rot_deg,
            pair_trans_deg: r.pair_trans_deg,
            wall_time_ms: r.wall_time_ms,
            failure: r.failure.as_deref().unwrap_or(""),
        }
    }
}

/// One row of a sweep over the number of references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    pub k: usize,
    pub median_trans: f64,
    pub median_rot: f64,
    /// Mean per-query localization time in milliseconds.
    pub wall_ms: f64,
}

/// Median errors of the noisy oracle for each `k`, plus per-query wall time.
///
/// When `timing_weights` is given, wall time is measured on the regressor
/// pipeline (best of `repeats` passes over the queries), otherwise on the noisy
/// oracle itself.
pub fn k_sweep(
    scene: &Scene,
    noise: NoiseModel,
    ks: &[usize],
    method: ScaleMethod,
    timing_weights: Option<&Weights>,
    repeats: usize,
) -> Result<Vec<KSweepRow>> {
    let grid = BenchmarkGrid {
        ks: ks.to_vec(),
        strategies: vec![Strategy::CovisOracle],
        methods: vec![method],
        timing: timing_weights.is_none(),
    };
    let report = run_benchmark(scene, &Estimator::NoisyOracle(noise), &grid, noise.seed)?;
    let queries = scene.query_indices();
    ks.iter()
        .map(|&k| {
            let cell = report
                .cell("noisy_oracle", method, k, Strategy::CovisOracle)
                .expect("cell for every k");
            let wall_ms = match timing_weights {
                None => cell.mean_wall_ms,
                Some(w) => {
                    let cfg = LocalizeConfig {
                        k,
                        retrieval: Strategy::CovisOracle,
                        method,
                    };
                    let mut best = f64::INFINITY;
                    for _ in 0..repeats.max(1) {
                        let start = Instant::now();
                        for &q in &queries {
                            localize_query(scene, &scene.frames[q].id, &Estimator::Network(w), &cfg)?;
                        }
                        best = best.min(start.elapsed().as_secs_f64() * 1e3 / queries.len() as f64);
                    }
                    best
                }
            };
            Ok(KSweepRow {
                k,
                median_trans: cell.median_trans,
                median_rot: cell.median_rot,
                wall_ms,
            })
        })
        .collect()
}

/// One-sided exact sign test of `a < b` over paired samples; ties are dropped.
///
/// Returns `P(X ≥ wins)` for `X ~ Binomial(n, ½)`.
pub fn sign_test_less(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::precondition("sign test needs paired samples"));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let n = wins + losses;
    if n == 0 {
        return Ok(1.0);
    }
    // Sum binomial terms in log space to avoid underflow of 2^-n.
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    let mut ln_c = 0.0; // ln C(n, 0)
    let mut terms = Vec::with_capacity(n + 1);
    for i in 0..=n {
        if i > 0 {
            ln_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        if i >= wins {
            terms.push(ln_c + ln_half_n);
        }
    }
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()).exp().min(1.0))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            r[t] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::precondition("spearman needs two equal-length series of length >= 2"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

/// JSON has no infinities; non-finite values are written as strings.
mod lenient_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneGenConfig};
    use rand::Rng;

    fn errs(v: &[f64]) -> Vec<PairError> {
        v.iter().map(|&e| PairError::new(e, 0.0)).collect()
    }

    #[test]
    fn auc_closed_forms() {
        assert_eq!(pose_auc(&errs(&[0.0, 0.0]), &THRESHOLDS).unwrap(), vec![1.0; 3]);
        let a = pose_auc(&errs(&[2.0]), &[10.0]).unwrap()[0];
        assert!((a - 0.8).abs() < 1e-15);
        assert!(pose_auc(&[], &[5.0]).is_err());
        assert!(pose_auc(&errs(&[1.0]), &[10.0, 5.0]).is_err());
        assert_eq!(pose_auc(&[PairError::failure()], &[5.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn auc_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let e: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..30.0)).collect();
            let pe = errs(&e);
            let exact = pose_auc(&pe, &THRESHOLDS).unwrap();
            for (ti, &t) in THRESHOLDS.iter().enumerate() {
                let n = 1_000_000;
                let mut acc = 0usize;
                for _ in 0..n {
                    let x = rng.gen_range(0.0..t);
                    acc += e.iter().filter(|&&v| v <= x).count();
                }
                let mc = acc as f64 / (n as f64 * e.len() as f64);
                assert!((mc - exact[ti]).abs() < 1e-3, "θ={t}: {mc} vs {}", exact[ti]);
            }
        }
    }

    #[test]
    fn auc_monotone_and_bounded_by_recall() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..40.0)).collect();
        let th: Vec<f64> = (1..60).map(|i| i as f64 * 0.5).collect();
        let auc = pose_auc(&errs(&e), &th).unwrap();
        let rec = recall_at(&errs(&e), &th).unwrap();
        assert!(auc.windows(2).all(|w| w[0] <= w[1]));
        assert!(auc.iter().zip(&rec).all(|(a, r)| a <= r));
    }

    #[test]
    fn pair_error_combined_is_max() {
        let p = PairError::new(3.0, 7.5);
        assert_eq!(p.combined, 7.5);
    }

    #[test]
    fn median_rules() {
        assert_eq!(median(&[4.0]).unwrap(), 4.0);
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.5);
        assert_eq!(median(&[1.0, f64::INFINITY, 2.0]).unwrap(), 2.0);
        assert!(median(&[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
        let mut s = v.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(median(&v).unwrap(), 0.5 * (s[4999] + s[5000]));
    }

    #[test]
    fn sign_test_and_spearman() {
        // 8 wins of 8: p = 2^-8.
        let a = vec![0.0; 8];
        let b = vec![1.0; 8];
        let p = sign_test_less(&a, &b).unwrap(); assert!((p * 256.0 - 1.0).abs() < 1e-12, "{p}");
        // 1 win of 2: p = 3/4.
        assert!((sign_test_less(&[0.0, 2.0], &[1.0, 1.0]).unwrap() - 0.75).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    }

    fn scene(seed: u64) -> Scene {
        generate_scene(&SceneGenConfig {
            num_database_frames: 32,
            num_queries: 6,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn oracle_localization_is_exact() {
        let s = scene(1);
        for method in [ScaleMethod::MotionAveraging, ScaleMethod::Umeyama] {
            for q in s.query_indices() {
                let cfg = LocalizeConfig {
                    k: 5,
                    retrieval: Strategy::CovisOracle,
                    method,
                };
                let loc = localize_query(&s, &s.frames[q].id, &Estimator::Oracle, &cfg).unwrap();
                let gt = s.frames[q].pose;
                assert!((loc.pose.center() - gt.center()).norm() < 1e-6);
                assert!(rotation_angle_error(&loc.pose.rotation_matrix(), &gt.rotation_matrix()) < 1e-6);
            }
        }
    }

    #[test]
    fn k_below_minimum_is_rejected() {
        let s = scene(2);
        let q = &s.frames[s.query_indices()[0]].id;
        for (k, method) in [(1, ScaleMethod::MotionAveraging), (2, ScaleMethod::Umeyama)] {
            let cfg = LocalizeConfig {
                k,
                retrieval: Strategy::CovisOracle,
                method,
            };
            assert!(matches!(
                localize_query(&s, q, &Estimator::Oracle, &cfg),
                Err(Error::DegenerateGeometry(_))
            ));
        }
    }

    #[test]
    fn benchmark_report_round_trip() {
        let s = scene(3);
        let grid = BenchmarkGrid {
            ks: vec![3, 6],
            strategies: vec![Strategy::CovisOracle, Strategy::VprProxy],
            methods: vec![ScaleMethod::MotionAveraging, ScaleMethod::Umeyama],
            timing: false,
        };
        let noise = NoiseModel {
            overlap_penalty_deg: 10.0,
            seed: 9,
            ..Default::default()
        };
        let r = run_benchmark(&s, &Estimator::NoisyOracle(noise), &grid, 7).unwrap();
        assert_eq!(r.cells.len(), 8);
        r.verify().unwrap();
        let text = r.to_json().unwrap();
        let back = EvalReport::from_json(&text).unwrap();
        assert_eq!(back, r);
        let again = run_benchmark(&s, &Estimator::NoisyOracle(noise), &grid, 7).unwrap();
        assert_eq!(again.to_json().unwrap(), text);

        let mut tampered = r.clone();
        tampered.cells[0].median_rot += 1.0;
        assert!(tampered.verify().is_err());

        let oracle = run_benchmark(
            &s,
            &Estimator::Oracle,
            &BenchmarkGrid {
                ks: vec![4],
                timing: false,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        assert!(oracle.cells[0].median_trans < 1e-6 && oracle.cells[0].median_rot < 1e-6);

        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert_eq!(csv.lines().count(), r.records.len() + 1);
        assert!(csv.starts_with("query_id,estimator,method,k,retrieval,"));
    }

    #[test]
    fn failures_count_as_infinite() {
        let rec = |id: &str, t: f64| QueryRecord {
            query_id: id.into(),
            estimator: "oracle".into(),
            method: ScaleMethod::MotionAveraging,
            k: 2,
            retrieval: Strategy::CovisOracle,
            trans_err_units: t,
            rot_err_deg: t,
            pair_rot_deg: t,
            pair_trans_deg: t,
            wall_time_ms: 0.0,
            failure: if t.is_finite() { None } else { Some("degenerate".into()) },
        };
        let recs = vec![rec("a", 1.0), rec("b", f64::INFINITY), rec("c", f64::INFINITY)];
        let cells = summarize(&recs).unwrap();
        assert_eq!(cells[0].failures, 2);
        assert_eq!(cells[0].median_trans, f64::INFINITY);
        let report = EvalReport {
            schema: REPORT_SCHEMA.into(),
            seed: 0,
            config: serde_json::Value::Null,
            records: recs,
            cells,
        };
        let back = EvalReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(back.records[1].trans_err_units, f64::INFINITY);
    }
}
