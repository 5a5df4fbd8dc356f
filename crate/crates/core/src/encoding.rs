//! Per-point sincos + one-hot encoding of a local map view.

use std::f64::consts::PI;

use thiserror::Error;

use crate::scene::{resample_points, LocalView, Point, SceneError, SD_CLASS_COUNT};

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error("class {class_id} outside [0, {count})")]
    ClassOutOfRange { class_id: usize, count: usize },
    #[error("invalid encoding config: {0}")]
    Config(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodingConfig {
    pub k: usize,
    /// Base wavelength in meters.
    pub l: f64,
    pub c: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            k: 8,
            l: 100.0,
            c: SD_CLASS_COUNT,
        }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<(), EncodingError> {
        if self.k == 0 || !(self.l > 0.0) || self.c == 0 {
            return Err(EncodingError::Config(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn d_pos(&self) -> usize {
        4 * self.k
    }

    pub fn dim(&self) -> usize {
        4 * self.k + self.c
    }

    /// Angular frequencies `2^k·π/L`.
    pub fn freqs(&self) -> Vec<f64> {
        (0..self.k).map(|k| 2f64.powi(k as i32) * PI / self.l).collect()
    }
}

/// `[x: sin f0, cos f0, sin f1, …, y: sin f0, cos f0, …]`.
pub fn sincos_encode_point(p: Point, cfg: &EncodingConfig) -> Vec<f64> {
    let freqs = cfg.freqs();
    let mut out = Vec::with_capacity(cfg.d_pos());
    for a in p {
        for w in &freqs {
            let (s, c) = (w * a).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
    out
}

pub fn onehot_class(class_id: usize, count: usize) -> Result<Vec<f64>, EncodingError> {
    if class_id >= count {
        return Err(EncodingError::ClassOutOfRange { class_id, count });
    }
    let mut v = vec![0.0; count];
    v[class_id] = 1.0;
    Ok(v)
}

/// Dense `n_lines × n_points × dim` array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphVector {
    pub data: Vec<f64>,
    pub n_lines: usize,
    pub n_points: usize,
    pub dim: usize,
}

impl GraphVector {
    pub fn shape(&self) -> [usize; 3] {
        [self.n_lines, self.n_points, self.dim]
    }

    /// One line's flattened `n_points × dim` block.
    pub fn line(&self, i: usize) -> &[f64] {
        let w = self.n_points * self.dim;
        &self.data[i * w..(i + 1) * w]
    }

    pub fn line_width(&self) -> usize {
        self.n_points * self.dim
    }
}

pub fn build_graph_vector(view: &LocalView, cfg: &EncodingConfig, n_points: usize) -> Result<GraphVector, EncodingError> {
    cfg.validate()?;
    if n_points < 2 {
        return Err(EncodingError::Config(format!("n_points {n_points} < 2")));
    }
    let dim = cfg.dim();
    let mut data = Vec::with_capacity(view.lines.len() * n_points * dim);
    for line in &view.lines {
        let onehot = onehot_class(line.class_id, cfg.c)?;
        for p in resample_points(line.points(), n_points)? {
            data.extend(sincos_encode_point(p, cfg));
            data.extend_from_slice(&onehot);
        }
    }
    Ok(GraphVector {
        data,
        n_lines: view.lines.len(),
        n_points,
        dim,
    })
}
