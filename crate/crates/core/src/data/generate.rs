use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{embed_visibility, render, visible_landmarks, Frame, Intrinsics, Scene, SceneMeta, Split};
use crate::error::{Error, Result};
use crate::geom::{Pose, Quaternion};

pub const GENERATOR_VERSION: &str = "mlk-scenegen/1";
const MAX_ATTEMPTS: usize = 100;
/// A query must share at least this much co-visibility with some database frame.
pub const MIN_QUERY_COVIS: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneGenConfig {
    pub num_landmarks: usize,
    pub num_database_frames: usize,
    pub num_queries: usize,
    pub camera_radius_range: (f64, f64),
    pub fov_degrees: f64,
    pub descriptor_dim: usize,
    pub grid: (usize, usize),
    /// Fraction of queries that get a co-located, opposite-facing database frame.
    pub trap_fraction: f64,
    pub seed: u64,
    /// Radius of the central landmark ball.
    pub object_radius: f64,
    /// Share of landmarks placed on the distant background sphere.
    pub background_fraction: f64,
    pub background_radius: f64,
    pub elevation_range_deg: (f64, f64),
    /// Standard deviation of the look-at target around the origin.
    pub look_jitter: f64,
    pub roll_jitter_deg: f64,
    pub embedding_dim: usize,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            num_landmarks: 400,
            num_database_frames: 32,
            num_queries: 8,
            camera_radius_range: (3.5, 5.5),
            fov_degrees: 60.0,
            descriptor_dim: 7,
            grid: (8, 8),
            trap_fraction: 0.0,
            seed: 0,
            object_radius: 2.5,
            background_fraction: 0.25,
            background_radius: 12.0,
            elevation_range_deg: (-20.0, 40.0),
            look_jitter: 0.3,
            roll_jitter_deg: 5.0,
            embedding_dim: 32,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_landmarks == 0 || self.num_database_frames == 0 || self.num_queries == 0 {
            return bad("landmark, database and query counts must be at least 1");
        }
        if self.descriptor_dim == 0 || self.embedding_dim == 0 || self.grid.0 == 0 || self.grid.1 == 0 {
            return bad("descriptor, embedding and grid sizes must be at least 1");
        }
        if !(self.fov_degrees > 10.0 && self.fov_degrees < 170.0) {
            return bad("fov_degrees must lie in (10, 170)");
        }
        if !(0.0..=1.0).contains(&self.trap_fraction) || !(0.0..=1.0).contains(&self.background_fraction) {
            return bad("trap_fraction and background_fraction must lie in [0, 1]");
        }
        let (lo, hi) = self.camera_radius_range;
        if !(lo > 0.0 && hi >= lo) {
            return bad("camera_radius_range must satisfy 0 < lo <= hi");
        }
        let (elo, ehi) = self.elevation_range_deg;
        if !(elo > -85.0 && ehi < 85.0 && ehi >= elo) {
            return bad("elevation_range_deg must lie within (-85, 85)");
        }
        if self.object_radius < 0.0 || self.background_radius <= 0.0 || self.look_jitter < 0.0 {
            return bad("radii and jitter must be non-negative");
        }
        Ok(())
    }
}

/// World-to-camera rotation looking from `center` toward `target` (camera y points down).
pub(crate) fn look_at_rotation(center: &Vector3<f64>, target: &Vector3<f64>) -> Matrix3<f64> {
    let z = (target - center).normalize();
    let down = Vector3::new(0.0, -1.0, 0.0);
    let x = down.cross(&z).normalize();
    let y = z.cross(&x);
    Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

fn gaussian3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
}

fn unit_sphere(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = gaussian3(rng);
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn sample_camera(cfg: &SceneGenConfig, rng: &mut ChaCha8Rng) -> Result<Pose> {
    let az = rng.gen_range(0.0..std::f64::consts::TAU);
    let (elo, ehi) = cfg.elevation_range_deg;
    let el = if ehi > elo { rng.gen_range(elo..=ehi) } else { elo }.to_radians();
    let (rlo, rhi) = cfg.camera_radius_range;
    let r = if rhi > rlo { rng.gen_range(rlo..=rhi) } else { rlo };
    let center = r * Vector3::new(el.cos() * az.cos(), el.sin(), el.cos() * az.sin());
    let target = gaussian3(rng) * cfg.look_jitter;
    let roll = Quaternion::from_axis_angle(
        &Vector3::z(),
        rng.sample::<f64, _>(StandardNormal) * cfg.roll_jitter_deg.to_radians(),
    )?;
    let rot = roll.to_rotation_matrix()? * look_at_rotation(&center, &target);
    Pose::from_center(&rot, &center)
}

/// Same spot as `query` (up to a small offset), facing roughly the other way.
/// The heading jitter widens with `attempt` so sparse backgrounds still get hit.
fn sample_trap(query: &Pose, attempt: usize, rng: &mut ChaCha8Rng) -> Result<Pose> {
    let center = query.center() + gaussian3(rng) * 0.05;
    let flip = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, -1.0));
    let spread = (3.0 + attempt as f64).to_radians();
    let wobble = Quaternion::from_rotation_vector(&(gaussian3(rng) * spread));
    let rot = wobble.to_rotation_matrix()? * flip * query.rotation_matrix();
    Pose::from_center(&rot, &center)
}

fn covis(a: &[usize], b: &[usize]) -> f64 {
    let shared = a.iter().filter(|i| b.binary_search(i).is_ok()).count();
    shared as f64 / a.len().max(1) as f64
}

/// Generates a scene deterministically from `cfg.seed`.
pub fn generate_scene(cfg: &SceneGenConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = cfg.num_landmarks;
    let n_bg = ((m as f64) * cfg.background_fraction).round() as usize;
    let n_bg = n_bg.min(m.saturating_sub(1));
    let mut landmarks = Vec::with_capacity(m);
    for _ in 0..m - n_bg {
        let u: f64 = rng.gen_range(0.0..1.0);
        landmarks.push(unit_sphere(&mut rng) * cfg.object_radius * u.cbrt());
    }
    for _ in 0..n_bg {
        landmarks.push(unit_sphere(&mut rng) * cfg.background_radius);
    }
    let descriptors: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..cfg.descriptor_dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();

    let k = Intrinsics::from_fov(cfg.grid, cfg.fov_degrees);
    let visible = |pose: &Pose| visible_landmarks(&landmarks, pose, &k, cfg.grid);

    let mut db: Vec<(Pose, Vec<usize>)> = Vec::new();
    for i in 0..cfg.num_database_frames {
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let pose = sample_camera(cfg, &mut rng)?;
            let vis = visible(&pose);
            if !vis.is_empty() {
                found = Some((pose, vis));
                break;
            }
        }
        db.push(found.ok_or_else(|| {
            Error::InvalidConfig(format!("database frame {i} sees no landmark after {MAX_ATTEMPTS} attempts"))
        })?);
    }

    let mut queries: Vec<(Pose, Vec<usize>)> = Vec::new();
    for i in 0..cfg.num_queries {
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let pose = sample_camera(cfg, &mut rng)?;
            let vis = visible(&pose);
            if !vis.is_empty() && db.iter().any(|(_, dv)| covis(&vis, dv) > MIN_QUERY_COVIS) {
                found = Some((pose, vis));
                break;
            }
        }
        queries.push(found.ok_or_else(|| {
            Error::InvalidConfig(format!("query {i} could not be placed after {MAX_ATTEMPTS} attempts"))
        })?);
    }

    let n_traps = ((cfg.num_queries as f64) * cfg.trap_fraction).round() as usize;
    for (qi, (qpose, _)) in queries.iter().take(n_traps).enumerate() {
        let mut found = None;
        for attempt in 0..MAX_ATTEMPTS {
            let pose = sample_trap(qpose, attempt, &mut rng)?;
            let vis = visible(&pose);
            if !vis.is_empty() {
                found = Some((pose, vis));
                break;
            }
        }
        db.push(found.ok_or_else(|| {
            Error::InvalidConfig(format!("trap frame for query {qi} sees no landmark"))
        })?);
    }

    let make = |id: String, split: Split, pose: Pose, vis: &[usize]| Frame {
        id,
        split,
        pose,
        intrinsics: k,
        feature_map: render(&landmarks, &descriptors, &pose, &k, cfg.grid),
        embedding: embed_visibility(vis, m, cfg.embedding_dim, cfg.seed),
    };
    let mut frames = Vec::with_capacity(db.len() + queries.len());
    for (i, (pose, vis)) in db.iter().enumerate() {
        frames.push(make(format!("db{i:03}"), Split::Database, *pose, vis));
    }
    for (i, (pose, vis)) in queries.iter().enumerate() {
        frames.push(make(format!("q{i:03}"), Split::Query, *pose, vis));
    }

    let scene = Scene {
        landmarks,
        descriptors,
        frames,
        meta: SceneMeta {
            seed: cfg.seed,
            generator: GENERATOR_VERSION.to_string(),
            convention: "w2c".to_string(),
            grid: cfg.grid,
            config: Some(cfg.clone()),
        },
    };
    scene.validate()?;
    Ok(scene)
}
