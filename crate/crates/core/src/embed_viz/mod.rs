//! Visual + reward embeddings to a 2D map for labeling.

pub mod pca;
pub mod tsne;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use pca::{pca_reduce, Pca};
pub use tsne::{tsne, TsneConfig, TsneResult};

use crate::{Error, Result, StateId};

pub const THUMBNAIL_URL_TEMPLATE: &str = "/state/{id}/thumbnail";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotPoint {
    pub id: StateId,
    pub x: f64,
    pub y: f64,
}

/// The 2D map a labeler sees for one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSnapshot {
    pub iteration: usize,
    pub points: Vec<SnapshotPoint>,
    pub thumbnail_url_template: String,
}

impl EmbeddingSnapshot {
    pub fn new(iteration: usize, ids: &[StateId], coords: ArrayView2<f64>) -> Result<Self> {
        if coords.nrows() != ids.len() || coords.ncols() != 2 {
            return Err(Error::DimensionMismatch { expected: ids.len(), got: coords.nrows() });
        }
        let points = ids
            .iter()
            .zip(coords.rows())
            .map(|(&id, c)| SnapshotPoint { id, x: c[0], y: c[1] })
            .collect();
        Ok(Self { iteration, points, thumbnail_url_template: THUMBNAIL_URL_TEMPLATE.to_string() })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn ids(&self) -> Vec<StateId> {
        self.points.iter().map(|p| p.id).collect()
    }

    pub fn coords(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.points.len(), 2), |(i, k)| if k == 0 { self.points[i].x } else { self.points[i].y })
    }

    pub fn contains(&self, id: StateId) -> bool {
        self.points.iter().any(|p| p.id == id)
    }
}

/// Per-column zero mean / unit variance; constant columns become zeros.
pub fn standardize_columns(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut col in out.columns_mut() {
        let n = col.len() as f64;
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if var <= 1e-24 {
            col.fill(0.0);
        } else {
            let sd = var.sqrt();
            col.mapv_inplace(|v| (v - mean) / sd);
        }
    }
    out
}

/// Standardizes each block across the states, then appends the reward block
/// (when a reward model exists) to the visual one.
pub fn concat_embedding(visual: ArrayView2<f64>, reward: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
    let vis = standardize_columns(visual);
    match reward {
        None => Ok(vis),
        Some(r) => {
            if r.nrows() != visual.nrows() {
                return Err(Error::DimensionMismatch { expected: visual.nrows(), got: r.nrows() });
            }
            Ok(concatenate(Axis(1), &[vis.view(), standardize_columns(r).view()]).expect("row counts checked"))
        }
    }
}

/// Concatenation, PCA and t-SNE in one pass.
pub fn visualize<R: Rng + ?Sized>(
    visual: ArrayView2<f64>,
    reward: Option<ArrayView2<f64>>,
    pca_dim: usize,
    cfg: &TsneConfig,
    rng: &mut R,
) -> Result<TsneResult> {
    let joint = concat_embedding(visual, reward)?;
    let reduced = pca_reduce(joint.view(), pca_dim)?;
    tsne(reduced.view(), cfg, rng)
}
