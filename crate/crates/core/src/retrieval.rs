//! Reference-view selection for a query frame.
//!
//! Three strategies share one ranking rule: higher score first, ties broken by
//! ascending frame id.

use std::cmp::Ordering;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::error::{Error, Result};

pub const EMBEDDING_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    CovisOracle,
    VprProxy,
    Embedding,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::CovisOracle => "covis_oracle",
            Strategy::VprProxy => "vpr_proxy",
            Strategy::Embedding => "embedding",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub frame_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub frame_id: String,
    pub embedding: Vec<f64>,
    pub center: Vector3<f64>,
}

/// Exhaustive cosine index over unit embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    entries: Vec<IndexEntry>,
    dim: usize,
}

impl EmbeddingIndex {
    pub fn new(entries: Vec<IndexEntry>) -> Result<Self> {
        let dim = entries.first().map_or(0, |e| e.embedding.len());
        let mut ids: Vec<&str> = entries.iter().map(|e| e.frame_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::precondition("embedding index has duplicate frame ids"));
        }
        for e in &entries {
            if e.embedding.len() != dim {
                return Err(Error::Shape(format!(
                    "embedding of {} has dimension {}, expected {dim}",
                    e.frame_id,
                    e.embedding.len()
                )));
            }
            let n = norm(&e.embedding);
            if (n - 1.0).abs() > EMBEDDING_TOLERANCE {
                return Err(Error::precondition(format!("embedding of {} has norm {n}", e.frame_id)));
            }
        }
        Ok(Self { entries, dim })
    }

    /// Index over the scene's database frames.
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        Self::new(
            scene
                .database_indices()
                .into_iter()
                .map(|i| {
                    let f = &scene.frames[i];
                    IndexEntry {
                        frame_id: f.id.clone(),
                        embedding: f.embedding.clone(),
                        center: f.pose.center(),
                    }
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Sorts by score (descending) then id, and keeps the first `k`.
fn top_k(mut scored: Vec<(String, f64)>, k: usize, strategy: Strategy) -> Result<RetrievalResult> {
    if k > scored.len() {
        return Err(Error::precondition(format!(
            "k = {k} exceeds the {} available frames",
            scored.len()
        )));
    }
    if scored.iter().any(|(_, s)| s.is_nan()) {
        return Err(Error::NonFinite("retrieval score".into()));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    let (frame_ids, scores) = scored.into_iter().unzip();
    Ok(RetrievalResult {
        frame_ids,
        scores,
        strategy,
    })
}

fn overlap(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut n) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n as f64 / a.len().max(1) as f64
}

/// Share of `a`'s visible landmarks that `b` also sees.
pub fn covis_score(scene: &Scene, frame_a: &str, frame_b: &str) -> Result<f64> {
    let a = scene.visible(scene.frame(frame_a)?);
    let b = scene.visible(scene.frame(frame_b)?);
    Ok(overlap(&a, &b))
}

pub fn retrieve_covis(scene: &Scene, query: &str, k: usize) -> Result<RetrievalResult> {
    let qv = scene.visible(scene.frame(query)?);
    let scored = scene
        .database_indices()
        .into_iter()
        .map(|i| {
            let f = &scene.frames[i];
            (f.id.clone(), overlap(&qv, &scene.visible(f)))
        })
        .collect();
    top_k(scored, k, Strategy::CovisOracle)
}

/// Ranks database frames by camera-center proximity, ignoring viewing direction.
pub fn retrieve_vpr_proxy(scene: &Scene, query: &str, k: usize) -> Result<RetrievalResult> {
    let qc = scene.frame(query)?.pose.center();
    let scored = scene
        .database_indices()
        .into_iter()
        .map(|i| {
            let f = &scene.frames[i];
            (f.id.clone(), -(f.pose.center() - qc).norm())
        })
        .collect();
    top_k(scored, k, Strategy::VprProxy)
}

pub fn retrieve_embedding(index: &EmbeddingIndex, query_embedding: &[f64], k: usize) -> Result<RetrievalResult> {
    if index.is_empty() {
        return Err(Error::precondition("embedding index is empty"));
    }
    if query_embedding.len() != index.dim {
        return Err(Error::Shape(format!(
            "query embedding has dimension {}, index has {}",
            query_embedding.len(),
            index.dim
        )));
    }
    let n = norm(query_embedding);
    if !(n > 0.0) {
        return Err(Error::precondition("query embedding has zero norm"));
    }
    let scored = index
        .entries
        .iter()
        .map(|e| {
            let dot: f64 = e.embedding.iter().zip(query_embedding).map(|(a, b)| a * b).sum();
            (e.frame_id.clone(), dot / n)
        })
        .collect();
    top_k(scored, k, Strategy::Embedding)
}

/// Dispatches on `strategy` for a query frame stored in `scene`.
pub fn retrieve(scene: &Scene, query: &str, k: usize, strategy: Strategy) -> Result<RetrievalResult> {
    match strategy {
        Strategy::CovisOracle => retrieve_covis(scene, query, k),
        Strategy::VprProxy => retrieve_vpr_proxy(scene, query, k),
        Strategy::Embedding => {
            let index = EmbeddingIndex::from_scene(scene)?;
            retrieve_embedding(&index, &scene.frame(query)?.embedding, k)
        }
    }
}
