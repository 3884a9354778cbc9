//! Convolution + per-region attention + pooling + dense softmax classifier.
//!
//! For each region size `h_i` a bank of `m` filters slides over the stacked
//! sentence matrices (one filter spans all embedding channels). The resulting
//! feature maps are column-stacked into `X_i` (positions x filters), scored by
//! a one-layer tanh perceptron against a content vector `u` shared by every
//! region, and the softmax of those scores reweights the rows of `X_i` before
//! pooling. Pooled vectors of all regions are concatenated, optionally
//! dropped out, and fed to a dense softmax layer.

mod checkpoint;
mod layers;
mod network;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{glorot_limit, Activation, Matrix, Rng};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, VocabMismatch, CHECKPOINT_VERSION,
};
pub(crate) use layers::window_offset;
pub use layers::{attend_region, conv_region, pool_region, window_count, Attended, Pooled};
pub use network::{
    accumulate_gradients, backward, forward, forward_with_mask, ForwardTrace, Gradients, Mode,
    RegionTrace,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// `h - 1` zero rows on each side; `s + h - 1` windows.
    Wide,
    /// No padding; `s - h + 1` windows.
    Narrow,
}

impl FromStr for Padding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "wide" => Ok(Padding::Wide),
            "narrow" => Ok(Padding::Narrow),
            other => Err(Error::Config(format!("unknown padding mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Average,
    Min,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "max" => Ok(Pooling::Max),
            "average" | "avg" | "mean" => Ok(Pooling::Average),
            "min" => Ok(Pooling::Min),
            other => Err(Error::Config(format!("unknown pooling strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub region_sizes: Vec<usize>,
    /// Filters per region size.
    pub filters: usize,
    pub embed_dim: usize,
    pub channels: usize,
    /// Attention hidden width; `None` ties it to `filters`.
    pub attn_dim: Option<usize>,
    pub classes: usize,
    pub activation: Activation,
    pub dropout: f64,
    pub padding: Padding,
    pub pooling: Pooling,
    pub s_max: usize,
}

impl ModelConfig {
    /// Regions (3,4,5), 512 filters, dropout 0.5, ReLU.
    pub fn baseline(embed_dim: usize, channels: usize, classes: usize, s_max: usize) -> Self {
        ModelConfig {
            region_sizes: vec![3, 4, 5],
            filters: 512,
            embed_dim,
            channels,
            attn_dim: None,
            classes,
            activation: Activation::Relu,
            dropout: 0.5,
            padding: Padding::Wide,
            pooling: Pooling::Max,
            s_max,
        }
    }

    /// Regions (4,5,6), 300 filters, dropout 0.6, ReLU.
    pub fn optimal(embed_dim: usize, channels: usize, classes: usize, s_max: usize) -> Self {
        ModelConfig {
            region_sizes: vec![4, 5, 6],
            filters: 300,
            dropout: 0.6,
            ..ModelConfig::baseline(embed_dim, channels, classes, s_max)
        }
    }

    pub fn attn_dim(&self) -> usize {
        self.attn_dim.unwrap_or(self.filters)
    }

    /// Length of the concatenated pooled vector.
    pub fn pooled_len(&self) -> usize {
        self.region_sizes.len() * self.filters
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.region_sizes.is_empty() {
            return bad("at least one region size is required".into());
        }
        if self.region_sizes.contains(&0) {
            return bad("region sizes must be positive".into());
        }
        if self.filters == 0 {
            return bad("filters per region must be positive".into());
        }
        if self.attn_dim() == 0 {
            return bad("attention dimension must be positive".into());
        }
        if self.embed_dim == 0 || self.channels == 0 {
            return bad("embedding dimension and channel count must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.s_max == 0 {
            return bad("s_max must be positive".into());
        }
        if self.padding == Padding::Narrow {
            if let Some(&h) = self.region_sizes.iter().find(|&&h| h > self.s_max) {
                return bad(format!(
                    "region size {h} exceeds s_max {} in narrow padding mode",
                    self.s_max
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionParams {
    /// `m x (K * h * d)`; row `j` holds filter `j` laid out as `[channel][row][dim]`.
    pub filters: Matrix,
    pub biases: Vec<f64>,
    /// `m x k_a`
    pub attn_w: Matrix,
    pub attn_b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub regions: Vec<RegionParams>,
    /// Content vector shared by all regions.
    pub context: Vec<f64>,
    /// `(M * m) x C`
    pub dense_w: Matrix,
    pub dense_b: Vec<f64>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, zero content vector.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (m, ka, k, d) = (cfg.filters, cfg.attn_dim(), cfg.channels, cfg.embed_dim);
        let regions = cfg
            .region_sizes
            .iter()
            .map(|&h| {
                let fan_in = k * h * d;
                RegionParams {
                    filters: Matrix::uniform(m, fan_in, glorot_limit(fan_in, m), rng),
                    biases: vec![0.0; m],
                    attn_w: Matrix::uniform(m, ka, glorot_limit(m, ka), rng),
                    attn_b: vec![0.0; ka],
                }
            })
            .collect();
        Ok(ModelParams {
            regions,
            context: vec![0.0; ka],
            dense_w: Self::init_dense_w(cfg, rng),
            dense_b: vec![0.0; cfg.classes],
        })
    }

    fn init_dense_w(cfg: &ModelConfig, rng: &mut Rng) -> Matrix {
        let n = cfg.pooled_len();
        Matrix::uniform(n, cfg.classes, glorot_limit(n, cfg.classes), rng)
    }

    /// Replaces only the dense layer with a freshly initialized one for
    /// `cfg.classes` outputs.
    pub fn reinit_head(&mut self, cfg: &ModelConfig, rng: &mut Rng) {
        self.dense_w = Self::init_dense_w(cfg, rng);
        self.dense_b = vec![0.0; cfg.classes];
    }

    /// All-zero parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (m, ka, k, d) = (cfg.filters, cfg.attn_dim(), cfg.channels, cfg.embed_dim);
        ModelParams {
            regions: cfg
                .region_sizes
                .iter()
                .map(|&h| RegionParams {
                    filters: Matrix::zeros(m, k * h * d),
                    biases: vec![0.0; m],
                    attn_w: Matrix::zeros(m, ka),
                    attn_b: vec![0.0; ka],
                })
                .collect(),
            context: vec![0.0; ka],
            dense_w: Matrix::zeros(cfg.pooled_len(), cfg.classes),
            dense_b: vec![0.0; cfg.classes],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }

    /// Named views over every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::with_capacity(self.regions.len() * 4 + 3);
        for (i, r) in self.regions.iter().enumerate() {
            out.push(TensorRef::matrix(format!("region{i}.filters"), &r.filters));
            out.push(TensorRef::vector(format!("region{i}.bias"), &r.biases));
            out.push(TensorRef::matrix(format!("region{i}.attn_w"), &r.attn_w));
            out.push(TensorRef::vector(format!("region{i}.attn_b"), &r.attn_b));
        }
        out.push(TensorRef::vector("context".into(), &self.context));
        out.push(TensorRef::matrix("dense_w".into(), &self.dense_w));
        out.push(TensorRef::vector("dense_b".into(), &self.dense_b));
        out
    }

    /// Mutable views in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::with_capacity(self.regions.len() * 4 + 3);
        for (i, r) in self.regions.iter_mut().enumerate() {
            out.push(TensorMut::new(
                format!("region{i}.filters"),
                r.filters.as_mut_slice(),
            ));
            out.push(TensorMut::new(format!("region{i}.bias"), &mut r.biases));
            out.push(TensorMut::new(
                format!("region{i}.attn_w"),
                r.attn_w.as_mut_slice(),
            ));
            out.push(TensorMut::new(format!("region{i}.attn_b"), &mut r.attn_b));
        }
        out.push(TensorMut::new("context".into(), &mut self.context));
        out.push(TensorMut::new(
            "dense_w".into(),
            self.dense_w.as_mut_slice(),
        ));
        out.push(TensorMut::new("dense_b".into(), &mut self.dense_b));
        out
    }

    /// Tensor names and shapes implied by `cfg`, in [`ModelParams::tensors`] order.
    pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (m, ka, k, d) = (cfg.filters, cfg.attn_dim(), cfg.channels, cfg.embed_dim);
        let mut out = Vec::with_capacity(cfg.region_sizes.len() * 4 + 3);
        for (i, &h) in cfg.region_sizes.iter().enumerate() {
            out.push((format!("region{i}.filters"), vec![m, k * h * d]));
            out.push((format!("region{i}.bias"), vec![m]));
            out.push((format!("region{i}.attn_w"), vec![m, ka]));
            out.push((format!("region{i}.attn_b"), vec![ka]));
        }
        out.push(("context".into(), vec![ka]));
        out.push(("dense_w".into(), vec![cfg.pooled_len(), cfg.classes]));
        out.push(("dense_b".into(), vec![cfg.classes]));
        out
    }

    /// Checks every tensor shape against `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let ours = self.tensors();
        let expected = Self::expected_shapes(cfg);
        if ours.len() != expected.len() {
            return Err(Error::Shape(format!(
                "parameters hold {} tensors, configuration implies {}",
                ours.len(),
                expected.len()
            )));
        }
        for (a, (_, shape)) in ours.iter().zip(&expected) {
            if &a.shape != shape {
                return Err(Error::Shape(format!(
                    "{}: shape {:?}, configuration implies {:?}",
                    a.name, a.shape, shape
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }
}

pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl<'a> TensorRef<'a> {
    fn matrix(name: String, m: &'a Matrix) -> Self {
        TensorRef {
            name,
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice(),
        }
    }

    fn vector(name: String, v: &'a [f64]) -> Self {
        TensorRef {
            name,
            shape: vec![v.len()],
            data: v,
        }
    }
}

pub struct TensorMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
}

impl<'a> TensorMut<'a> {
    fn new(name: String, data: &'a mut [f64]) -> Self {
        TensorMut { name, data }
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let regions: Vec<String> = self.region_sizes.iter().map(usize::to_string).collect();
        write!(
            f,
            "regions=({}) filters={} d={} K={} k_a={} C={} act={} dropout={} padding={:?} pooling={:?} s_max={}",
            regions.join(","),
            self.filters,
            self.embed_dim,
            self.channels,
            self.attn_dim(),
            self.classes,
            self.activation,
            self.dropout,
            self.padding,
            self.pooling,
            self.s_max
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            region_sizes: vec![2, 3],
            filters: 4,
            embed_dim: 5,
            channels: 2,
            attn_dim: Some(3),
            classes: 3,
            activation: Activation::Relu,
            dropout: 0.5,
            padding: Padding::Wide,
            pooling: Pooling::Max,
            s_max: 6,
        }
    }

    #[test]
    fn init_laws() {
        let c = cfg();
        let p = ModelParams::init(&c, &mut Rng::new(11)).unwrap();
        assert!(p.context.iter().all(|&x| x == 0.0));
        assert!(p.dense_b.iter().all(|&x| x == 0.0));
        for (r, &h) in p.regions.iter().zip(&c.region_sizes) {
            assert!(r.biases.iter().all(|&x| x == 0.0));
            assert!(r.attn_b.iter().all(|&x| x == 0.0));
            let fan_in = c.channels * h * c.embed_dim;
            let lim = (6.0 / (fan_in + c.filters) as f64).sqrt();
            assert!(r.filters.as_slice().iter().all(|x| x.abs() <= lim));
            assert!(r.filters.as_slice().iter().any(|&x| x != 0.0));
        }
        let lim = (6.0 / (8 + 3) as f64).sqrt();
        assert!(p.dense_w.as_slice().iter().all(|x| x.abs() <= lim));
        p.check_shapes(&c).unwrap();
    }

    #[test]
    fn validation() {
        let mut c = cfg();
        c.validate().unwrap();
        c.classes = 1;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.padding = Padding::Narrow;
        c.s_max = 2;
        assert!(c.validate().is_err());
        c.padding = Padding::Wide;
        c.validate().unwrap();
        let mut c = cfg();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.region_sizes.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn reinit_head_touches_only_dense() {
        let c = cfg();
        let mut p = ModelParams::init(&c, &mut Rng::new(1)).unwrap();
        let before = p.clone();
        let mut c2 = c.clone();
        c2.classes = 5;
        p.reinit_head(&c2, &mut Rng::new(2));
        assert_eq!(p.regions, before.regions);
        assert_eq!(p.context, before.context);
        assert_eq!(p.dense_w.shape(), (8, 5));
        p.check_shapes(&c2).unwrap();
        assert!(p.check_shapes(&c).is_err());
    }

    #[test]
    fn presets() {
        let b = ModelConfig::baseline(200, 1, 2, 30);
        assert_eq!(
            (b.region_sizes.clone(), b.filters, b.dropout),
            (vec![3, 4, 5], 512, 0.5)
        );
        assert_eq!(b.activation, Activation::Relu);
        let o = ModelConfig::optimal(200, 4, 2, 30);
        assert_eq!(
            (o.region_sizes.clone(), o.filters, o.dropout),
            (vec![4, 5, 6], 300, 0.6)
        );
        assert_eq!(o.attn_dim(), 300);
    }
}
