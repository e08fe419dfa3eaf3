//! Synthetic scenes: landmarks with descriptors seen by posed pinhole frames.
//!
//! Frames carry a rendered feature map instead of pixels. Each visible
//! landmark is projected into a coarse grid and its descriptor is averaged
//! into the cell it lands in; the last channel holds the per-cell hit count
//! divided by the total landmark count.

mod generate;
mod io;

pub use generate::{generate_scene, SceneGenConfig};
pub use io::{load_scene, save_scene, scene_from_json, scene_to_json, SCENE_SCHEMA};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Pose;

/// Points closer than this along the optical axis are behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Database,
    Query,
}

/// Pinhole intrinsics in feature-grid cell units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Centered intrinsics for a `grid = (rows, cols)` with horizontal field of view `fov_deg`.
    pub fn from_fov(grid: (usize, usize), fov_deg: f64) -> Self {
        let f = 0.5 * grid.1 as f64 / (0.5 * fov_deg.to_radians()).tan();
        Self {
            fx: f,
            fy: f,
            cx: 0.5 * grid.1 as f64,
            cy: 0.5 * grid.0 as f64,
        }
    }
}

/// `height × width × channels` grid of features, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.width + j) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let o = (i * self.width + j) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Serialize, Deserialize)]
struct FeatureMapRepr {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl Serialize for FeatureMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        FeatureMapRepr {
            shape: [self.height, self.width, self.channels],
            data: self.data.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FeatureMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = FeatureMapRepr::deserialize(d)?;
        let [height, width, channels] = r.shape;
        if r.data.len() != height * width * channels {
            return Err(serde::de::Error::custom(format!(
                "feature map shape {:?} does not match {} values",
                r.shape,
                r.data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data: r.data,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub id: String,
    pub split: Split,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub feature_map: FeatureMap,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub generator: String,
    pub convention: String,
    /// Feature grid `(rows, cols)`.
    pub grid: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<SceneGenConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub landmarks: Vec<Vector3<f64>>,
    pub descriptors: Vec<Vec<f64>>,
    pub frames: Vec<Frame>,
    pub meta: SceneMeta,
}

impl Scene {
    pub fn frame_index(&self, id: &str) -> Result<usize> {
        self.frames
            .iter()
            .position(|f| f.id == id)
            .ok_or_else(|| Error::UnknownFrame(id.to_string()))
    }

    pub fn frame(&self, id: &str) -> Result<&Frame> {
        Ok(&self.frames[self.frame_index(id)?])
    }

    pub fn database_indices(&self) -> Vec<usize> {
        self.split_indices(Split::Database)
    }

    pub fn query_indices(&self) -> Vec<usize> {
        self.split_indices(Split::Query)
    }

    fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.frames.len())
            .filter(|&i| self.frames[i].split == split)
            .collect()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptors.first().map_or(0, Vec::len)
    }

    /// Sorted indices of landmarks visible from `frame`.
    pub fn visible(&self, frame: &Frame) -> Vec<usize> {
        visible_landmarks(&self.landmarks, &frame.pose, &frame.intrinsics, self.meta.grid)
    }

    /// Structural checks shared by the generator and the loader.
    pub fn validate(&self) -> Result<()> {
        if self.landmarks.is_empty() {
            return Err(Error::InvalidConfig("scene has no landmarks".into()));
        }
        if self.descriptors.len() != self.landmarks.len() {
            return Err(Error::InvalidConfig(format!(
                "{} descriptors for {} landmarks",
                self.descriptors.len(),
                self.landmarks.len()
            )));
        }
        let c = self.descriptor_dim();
        if self.descriptors.iter().any(|d| d.len() != c) {
            return Err(Error::InvalidConfig("descriptor rows differ in length".into()));
        }
        let mut ids: Vec<&str> = self.frames.iter().map(|f| f.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("duplicate frame ids".into()));
        }
        let (gh, gw) = self.meta.grid;
        for f in &self.frames {
            if !(f.intrinsics.fx > 0.0 && f.intrinsics.fy > 0.0) {
                return Err(Error::InvalidConfig(format!("frame {} has non-positive focal length", f.id)));
            }
            let fm = &f.feature_map;
            if (fm.height, fm.width, fm.channels) != (gh, gw, c + 1) {
                return Err(Error::InvalidConfig(format!(
                    "frame {} feature map is {}x{}x{}, expected {gh}x{gw}x{}",
                    f.id,
                    fm.height,
                    fm.width,
                    fm.channels,
                    c + 1
                )));
            }
            if !fm.is_finite() || !f.pose.is_finite() {
                return Err(Error::NonFinite(format!("frame {}", f.id)));
            }
        }
        Ok(())
    }
}

/// Grid cell `(row, col)` a world point projects into, if it is in front of the camera and inside the grid.
pub fn project_to_cell(
    point: &Vector3<f64>,
    pose: &Pose,
    k: &Intrinsics,
    grid: (usize, usize),
) -> Option<(usize, usize)> {
    let p = pose.transform_point(point);
    if !(p.z > MIN_DEPTH) {
        return None;
    }
    let u = k.fx * p.x / p.z + k.cx;
    let v = k.fy * p.y / p.z + k.cy;
    if u >= 0.0 && v >= 0.0 && u < grid.1 as f64 && v < grid.0 as f64 {
        Some((v as usize, u as usize))
    } else {
        None
    }
}

/// The visibility predicate used by rendering, embeddings and co-visibility.
pub fn visible_landmarks(
    landmarks: &[Vector3<f64>],
    pose: &Pose,
    k: &Intrinsics,
    grid: (usize, usize),
) -> Vec<usize> {
    landmarks
        .iter()
        .enumerate()
        .filter(|(_, p)| project_to_cell(p, pose, k, grid).is_some())
        .map(|(i, _)| i)
        .collect()
}

/// Splats visible landmark descriptors into the frame's grid.
pub fn render_feature_map(scene: &Scene, frame: &Frame) -> FeatureMap {
    render(
        &scene.landmarks,
        &scene.descriptors,
        &frame.pose,
        &frame.intrinsics,
        scene.meta.grid,
    )
}

pub(crate) fn render(
    landmarks: &[Vector3<f64>],
    descriptors: &[Vec<f64>],
    pose: &Pose,
    k: &Intrinsics,
    grid: (usize, usize),
) -> FeatureMap {
    let c = descriptors.first().map_or(0, Vec::len);
    let m = landmarks.len().max(1) as f64;
    let mut map = FeatureMap::zeros(grid.0, grid.1, c + 1);
    let mut counts = vec![0usize; grid.0 * grid.1];
    for (p, desc) in landmarks.iter().zip(descriptors) {
        if let Some((i, j)) = project_to_cell(p, pose, k, grid) {
            counts[i * grid.1 + j] += 1;
            for (acc, d) in map.cell_mut(i, j).iter_mut().zip(desc) {
                *acc += d;
            }
        }
    }
    for i in 0..grid.0 {
        for j in 0..grid.1 {
            let n = counts[i * grid.1 + j];
            if n == 0 {
                continue;
            }
            let cell = map.cell_mut(i, j);
            for v in &mut cell[..c] {
                *v /= n as f64;
            }
            cell[c] = n as f64 / m;
        }
    }
    map
}

/// Unit embedding: a fixed random projection of the visible-landmark indicator.
pub(crate) fn embed_visibility(visible: &[usize], num_landmarks: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let proj: Vec<f64> = (0..dim * num_landmarks)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let mut e = vec![0.0; dim];
    for &l in visible {
        for (r, v) in e.iter_mut().enumerate() {
            *v += proj[r * num_landmarks + l];
        }
    }
    let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        e.iter_mut().for_each(|v| *v /= n);
    }
    e
}
