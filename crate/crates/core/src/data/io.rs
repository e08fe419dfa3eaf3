use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{Frame, Scene, SceneMeta};
use crate::error::{Error, Result};

pub const SCENE_SCHEMA: &str = "mlk-scene/1";

#[derive(Serialize, Deserialize)]
struct SceneFile {
    schema: String,
    meta: SceneMeta,
    landmarks: Vec<[f64; 3]>,
    descriptors: Vec<Vec<f64>>,
    frames: Vec<Frame>,
}

#[derive(Deserialize)]
struct SchemaProbe {
    schema: Option<String>,
}

/// Pretty-printed JSON. Floats use shortest round-trip formatting, so reloading is bit-exact.
pub fn scene_to_json(scene: &Scene) -> Result<String> {
    let file = SceneFile {
        schema: SCENE_SCHEMA.to_string(),
        meta: scene.meta.clone(),
        landmarks: scene.landmarks.iter().map(|p| [p.x, p.y, p.z]).collect(),
        descriptors: scene.descriptors.clone(),
        frames: scene.frames.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file).map_err(Error::from)?;
    s.push('\n');
    Ok(s)
}

pub fn scene_from_json(text: &str) -> Result<Scene> {
    let probe: SchemaProbe = serde_json::from_str(text)?;
    match probe.schema.as_deref() {
        Some(SCENE_SCHEMA) => {}
        found => {
            return Err(Error::Version {
                found: found.unwrap_or("<missing>").to_string(),
                expected: SCENE_SCHEMA.to_string(),
            })
        }
    }
    let file: SceneFile = serde_json::from_str(text)?;
    let scene = Scene {
        landmarks: file.landmarks.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect(),
        descriptors: file.descriptors,
        frames: file.frames,
        meta: file.meta,
    };
    scene.validate()?;
    Ok(scene)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, scene_to_json(scene)?)?;
    Ok(())
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    scene_from_json(&std::fs::read_to_string(path)?)
}
