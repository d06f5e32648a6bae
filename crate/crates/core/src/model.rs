//! Feature extractor with GeM pooling and a growable linear classifier.
//!
//! The backbone is a fully connected network whose last layer emits
//! `grid_size × embed_dim` non-negative activations (softplus). Those slots
//! are pooled per embedding dimension with a generalized mean, and the pooled
//! vector feeds a linear classifier over the global label namespace.
//!
//! All parameters live in one flat vector. The backbone (`theta`) comes first,
//! layer by layer as `weights (out × in, row-major)` then `bias (out)`. The
//! classifier (`phi`) follows as one row per class, each row holding
//! `embed_dim` weights and then the class bias. Growing the classifier is
//! therefore a pure append, which keeps optimizer moments and the historical
//! model aligned by index.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which model produced an output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    Current,
    Historical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    /// Number of pooled feature slots.
    pub grid_size: usize,
    pub embed_dim: usize,
    pub gem_p: f64,
    /// Initial classifier size; grows over stages.
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden_dims: vec![64],
            grid_size: 4,
            embed_dim: 16,
            gem_p: 3.0,
            num_classes: 0,
        }
    }
}

impl ModelConfig {
    pub fn backbone_out(&self) -> usize {
        self.grid_size * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.grid_size == 0 || self.embed_dim == 0 {
            return Err(Error::Config(
                "input_dim, grid_size and embed_dim must be positive".into(),
            ));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if !(self.gem_p > 0.0) || !self.gem_p.is_finite() {
            return Err(Error::Config(format!("gem_p must be > 0, got {}", self.gem_p)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Softplus,
}

/// Location of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlice {
    pub name: String,
    pub offset: usize,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerSlice {
    pub fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    pub fn bias(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.inputs * self.outputs;
        start..start + self.outputs
    }

    pub fn len(&self) -> usize {
        (self.inputs + 1) * self.outputs
    }

    pub fn is_empty(&self) -> bool {
        self.outputs == 0
    }
}

/// Backbone and classifier parameters in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layers: Vec<LayerSlice>,
    theta_len: usize,
    num_classes: usize,
    values: Vec<f64>,
    role: Role,
}

fn layer_layout(config: &ModelConfig) -> (Vec<LayerSlice>, usize) {
    let mut dims = vec![config.input_dim];
    dims.extend(&config.hidden_dims);
    dims.push(config.backbone_out());
    let last = dims.len() - 2;
    let mut offset = 0;
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let slice = LayerSlice {
                name: format!("backbone.{i}"),
                offset,
                inputs: w[0],
                outputs: w[1],
                activation: if i == last {
                    Activation::Softplus
                } else {
                    Activation::Tanh
                },
            };
            offset += slice.len();
            slice
        })
        .collect();
    (layers, offset)
}

impl ModelParams {
    /// Seeded uniform initialization in `[-s, s]` with `s = 1/sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (layers, theta_len) = layer_layout(config);
        let mut values = Vec::with_capacity(theta_len);
        for layer in &layers {
            let s = 1.0 / (layer.inputs as f64).sqrt();
            for _ in 0..layer.len() {
                values.push(rng.random_range(-s..=s));
            }
        }
        let mut params = Self {
            config: config.clone(),
            layers,
            theta_len,
            num_classes: 0,
            values,
            role: Role::Current,
        };
        params.append_classes(config.num_classes, rng);
        Ok(params)
    }

    /// Rebuilds parameters from a flat vector and its layout.
    pub fn from_parts(config: ModelConfig, num_classes: usize, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (layers, theta_len) = layer_layout(&config);
        let expected = theta_len + num_classes * (config.embed_dim + 1);
        if values.len() != expected {
            return Err(Error::Config(format!(
                "parameter vector has {} entries, layout expects {expected}",
                values.len()
            )));
        }
        let params = Self {
            config,
            layers,
            theta_len,
            num_classes,
            values,
            role: Role::Current,
        };
        params.check_finite()?;
        Ok(params)
    }

    fn append_classes<R: Rng + ?Sized>(&mut self, count: usize, rng: &mut R) {
        let d = self.config.embed_dim;
        let s = 1.0 / (d as f64).sqrt();
        self.values.reserve(count * (d + 1));
        for _ in 0..count * (d + 1) {
            self.values.push(rng.random_range(-s..=s));
        }
        self.num_classes += count;
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerSlice] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn theta_len(&self) -> usize {
        self.theta_len
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn theta(&self) -> &[f64] {
        &self.values[..self.theta_len]
    }

    pub fn phi(&self) -> &[f64] {
        &self.values[self.theta_len..]
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// Copy tagged as the historical (teacher) model.
    pub fn to_historical(&self) -> Self {
        let mut h = self.clone();
        h.role = Role::Historical;
        h
    }

    /// Range of classifier row `c` (weights followed by bias).
    pub fn class_row(&self, c: usize) -> std::ops::Range<usize> {
        let w = self.config.embed_dim + 1;
        let start = self.theta_len + c * w;
        start..start + w
    }

    /// Returns a copy with the given flat values (same layout).
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::Protocol(format!(
                "parameter length mismatch: {} vs {}",
                values.len(),
                self.values.len()
            )));
        }
        let mut p = self.clone();
        p.values = values;
        Ok(p)
    }

    /// Names the slice that owns flat index `i`.
    pub fn slice_name(&self, i: usize) -> String {
        if i < self.theta_len {
            for layer in &self.layers {
                if layer.weights().contains(&i) {
                    return format!("{}.weight", layer.name);
                }
                if layer.bias().contains(&i) {
                    return format!("{}.bias", layer.name);
                }
            }
        }
        let row = (i - self.theta_len) / (self.config.embed_dim + 1);
        format!("classifier.row{row}")
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::numeric(
                self.slice_name(i),
                format!("non-finite parameter at index {i}"),
            )),
        }
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.config == other.config
            && self.num_classes == other.num_classes
            && self.values.len() == other.values.len()
    }
}

/// Pooled embedding of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub source: Role,
}

/// Classifier output of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub values: Vec<f64>,
    pub source: Role,
}

impl Logits {
    pub fn softmax(&self) -> Vec<f64> {
        softmax(&self.values)
    }
}

pub(crate) fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Backbone output, `grid_size` rows of `embed_dim`, row-major.
    pub grid: Vec<f64>,
    pub embedding: Embedding,
    pub logits: Logits,
}

impl ModelOutput {
    pub fn grid_row(&self, g: usize) -> &[f64] {
        let d = self.embedding.vector.len();
        &self.grid[g * d..(g + 1) * d]
    }
}

/// Intermediate values needed by [`backward_sample`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input followed by each layer's post-activation output.
    activations: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Generalized-mean pooling over the rows of a `G × D` grid.
///
/// Computes `((1/G) Σ_g v_gd^p)^(1/p)` per column, scaled by the column max so
/// large exponents do not overflow.
pub fn gem_pool(grid: &[f64], grid_size: usize, p: f64) -> Result<Vec<f64>> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::Config(format!("GeM exponent must be > 0, got {p}")));
    }
    if grid_size == 0 || grid.len() % grid_size != 0 {
        return Err(Error::Config(format!(
            "grid of {} values cannot be split into {grid_size} rows",
            grid.len()
        )));
    }
    let d = grid.len() / grid_size;
    if let Some(i) = grid.iter().position(|v| !(*v >= 0.0)) {
        return Err(Error::numeric(
            "gem_pool",
            format!("grid entry {i} is {} (must be >= 0)", grid[i]),
        ));
    }
    let mut out = vec![0.0; d];
    for (j, o) in out.iter_mut().enumerate() {
        let max = (0..grid_size).map(|g| grid[g * d + j]).fold(0.0, f64::max);
        if max == 0.0 {
            continue;
        }
        let mean: f64 = (0..grid_size)
            .map(|g| (grid[g * d + j] / max).powf(p))
            .sum::<f64>()
            / grid_size as f64;
        *o = max * mean.powf(1.0 / p);
    }
    Ok(out)
}

fn dense(params: &ModelParams, layer: &LayerSlice, input: &[f64]) -> Vec<f64> {
    let w = &params.values[layer.weights()];
    let b = &params.values[layer.bias()];
    (0..layer.outputs)
        .map(|o| {
            let row = &w[o * layer.inputs..(o + 1) * layer.inputs];
            b[o] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
        })
        .collect()
}

/// Forward pass returning outputs and the cache for backpropagation.
pub fn forward_cached(params: &ModelParams, x: &[f64]) -> Result<(ModelOutput, ForwardCache)> {
    let cfg = &params.config;
    if x.len() != cfg.input_dim {
        return Err(Error::Config(format!(
            "input has {} features, model expects {}",
            x.len(),
            cfg.input_dim
        )));
    }
    let mut activations = Vec::with_capacity(params.layers.len() + 1);
    let mut pre = Vec::with_capacity(params.layers.len());
    activations.push(x.to_vec());
    for (i, layer) in params.layers.iter().enumerate() {
        let z = dense(params, layer, activations.last().expect("input pushed"));
        let a: Vec<f64> = match layer.activation {
            Activation::Tanh => z.iter().map(|v| v.tanh()).collect(),
            Activation::Softplus => z.iter().map(|&v| softplus(v)).collect(),
        };
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(
                format!("layer {i}"),
                "non-finite activation in forward pass",
            ));
        }
        pre.push(z);
        activations.push(a);
    }
    let grid = activations.last().expect("at least one layer").clone();
    let embedding = gem_pool(&grid, cfg.grid_size, cfg.gem_p)?;
    let logits: Vec<f64> = (0..params.num_classes)
        .map(|c| {
            let row = &params.values[params.class_row(c)];
            let d = cfg.embed_dim;
            row[d] + row[..d].iter().zip(&embedding).map(|(w, e)| w * e).sum::<f64>()
        })
        .collect();
    if embedding.iter().chain(&logits).any(|v| !v.is_finite()) {
        return Err(Error::numeric(
            format!("layer {}", params.layers.len()),
            "non-finite embedding or logits",
        ));
    }
    let out = ModelOutput {
        grid,
        embedding: Embedding {
            vector: embedding,
            source: params.role,
        },
        logits: Logits {
            values: logits,
            source: params.role,
        },
    };
    Ok((out, ForwardCache { activations, pre }))
}

pub fn forward(params: &ModelParams, x: &[f64]) -> Result<ModelOutput> {
    forward_cached(params, x).map(|(out, _)| out)
}

/// Embeddings of many inputs; runs in parallel over inputs.
pub fn embed_all(params: &ModelParams, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    use rayon::prelude::*;
    inputs
        .par_iter()
        .map(|x| forward(params, x).map(|o| o.embedding.vector))
        .collect()
}

/// Accumulates into `grad` the parameter gradient of one sample, given the
/// upstream gradients on its embedding and logits.
pub fn backward_sample(
    params: &ModelParams,
    out: &ModelOutput,
    cache: &ForwardCache,
    d_embedding: &[f64],
    d_logits: Option<&[f64]>,
    grad: &mut [f64],
) {
    let cfg = &params.config;
    let d = cfg.embed_dim;
    let emb = &out.embedding.vector;
    let mut de = d_embedding.to_vec();
    if let Some(dl) = d_logits {
        for (c, &g) in dl.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = params.class_row(c);
            let w = &params.values[row.clone()];
            for j in 0..d {
                grad[row.start + j] += g * emb[j];
                de[j] += g * w[j];
            }
            grad[row.start + d] += g;
        }
    }

    // GeM: de/dv_g = (v_g / e)^(p-1) / G
    let grid = &out.grid;
    let gsize = cfg.grid_size;
    let p = cfg.gem_p;
    let mut upstream = vec![0.0; grid.len()];
    for j in 0..d {
        if emb[j] == 0.0 || de[j] == 0.0 {
            continue;
        }
        for g in 0..gsize {
            let v = grid[g * d + j];
            upstream[g * d + j] = de[j] * (v / emb[j]).powf(p - 1.0) / gsize as f64;
        }
    }

    for (li, layer) in params.layers.iter().enumerate().rev() {
        let z = &cache.pre[li];
        let a = &cache.activations[li + 1];
        let dz: Vec<f64> = match layer.activation {
            Activation::Tanh => upstream
                .iter()
                .zip(a)
                .map(|(g, a)| g * (1.0 - a * a))
                .collect(),
            Activation::Softplus => upstream
                .iter()
                .zip(z)
                .map(|(g, z)| g * sigmoid(*z))
                .collect(),
        };
        let input = &cache.activations[li];
        let wr = layer.weights();
        let br = layer.bias();
        let mut d_input = vec![0.0; layer.inputs];
        for (o, &g) in dz.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = wr.start + o * layer.inputs;
            for (k, &x) in input.iter().enumerate() {
                grad[row + k] += g * x;
                d_input[k] += g * params.values[row + k];
            }
            grad[br.start + o] += g;
        }
        upstream = d_input;
    }
}

/// Exponential moving average of parameters: `h' = β·h + (1-β)·c`.
pub fn ema_update(historical: &ModelParams, current: &ModelParams, beta: f64) -> Result<ModelParams> {
    let mut h = historical.clone();
    ema_update_in_place(&mut h, current, beta)?;
    Ok(h)
}

pub fn ema_update_in_place(historical: &mut ModelParams, current: &ModelParams, beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("EMA momentum must lie in [0,1], got {beta}")));
    }
    if !historical.same_shape(current) {
        return Err(Error::Config(format!(
            "historical model has {} classes / {} params, current has {} / {}; classifier growth was not synced",
            historical.num_classes,
            historical.values.len(),
            current.num_classes,
            current.values.len()
        )));
    }
    for (h, c) in historical.values.iter_mut().zip(&current.values) {
        *h = beta * *h + (1.0 - beta) * c;
    }
    Ok(())
}

/// Appends freshly initialized classifier rows to `current`; `historical`
/// receives copies of those same rows so both classifiers stay aligned.
pub fn grow_classifier<R: Rng + ?Sized>(
    current: &mut ModelParams,
    historical: Option<&mut ModelParams>,
    new_num_classes: usize,
    rng: &mut R,
) -> Result<()> {
    let old = current.num_classes;
    if new_num_classes < old {
        return Err(Error::Config(format!(
            "classifier cannot shrink from {old} to {new_num_classes} classes"
        )));
    }
    if let Some(h) = historical.as_deref() {
        if h.num_classes != old || h.config != current.config {
            return Err(Error::Config(format!(
                "historical classifier has {} classes, current has {old}",
                h.num_classes
            )));
        }
    }
    let start = current.values.len();
    current.append_classes(new_num_classes - old, rng);
    if let Some(h) = historical {
        h.values.extend_from_slice(&current.values[start..]);
        h.num_classes = new_num_classes;
    }
    Ok(())
}

/// Overwrites the rows of classes `first..first + rows.len()` with `scale * row`
/// and a zero bias, in `current` and (when given) `historical`.
pub fn set_class_rows(
    current: &mut ModelParams,
    historical: Option<&mut ModelParams>,
    first: usize,
    rows: &[Vec<f64>],
    scale: f64,
) -> Result<()> {
    let d = current.config.embed_dim;
    if first + rows.len() > current.num_classes {
        return Err(Error::Config(format!(
            "rows {first}..{} exceed {} classes",
            first + rows.len(),
            current.num_classes
        )));
    }
    for (c, row) in rows.iter().enumerate() {
        if row.len() != d {
            return Err(Error::Config(format!("class row has length {}, expected {d}", row.len())));
        }
        let r = current.class_row(first + c);
        let dst = &mut current.values[r];
        for (v, x) in dst.iter_mut().zip(row) {
            *v = scale * x;
        }
        dst[d] = 0.0;
    }
    if let Some(h) = historical {
        if h.num_classes != current.num_classes {
            return Err(Error::Config(format!(
                "historical classifier has {} classes, current has {}",
                h.num_classes, current.num_classes
            )));
        }
        let span = current.class_row(first).start..current.class_row(first + rows.len()).start;
        h.values[span.clone()].copy_from_slice(&current.values[span]);
    }
    Ok(())
}

/// Slicing metadata written next to the binary parameter blob.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub format: String,
    pub config: ModelConfig,
    pub layers: Vec<LayerSlice>,
    pub classifier_offset: usize,
    pub classifier_row_len: usize,
    pub num_classes: usize,
    pub total_len: usize,
}

fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

/// Writes `<stem>.bin` (little-endian f64) and `<stem>.json` (layout).
pub fn save_checkpoint(params: &ModelParams, stem: &Path) -> Result<()> {
    let (bin, json) = checkpoint_paths(stem);
    if let Some(dir) = bin.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut bytes = Vec::with_capacity(params.values.len() * 8);
    for v in &params.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin, bytes)?;
    let meta = CheckpointMeta {
        format: "f64-le".into(),
        config: params.config.clone(),
        layers: params.layers.clone(),
        classifier_offset: params.theta_len,
        classifier_row_len: params.config.embed_dim + 1,
        num_classes: params.num_classes,
        total_len: params.values.len(),
    };
    fs::write(&json, serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<ModelParams> {
    let (bin, json) = checkpoint_paths(stem);
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(&json)?)?;
    let bytes = fs::read(&bin)?;
    if bytes.len() != meta.total_len * 8 {
        return Err(Error::Config(format!(
            "{} holds {} bytes, sidecar declares {} values",
            bin.display(),
            bytes.len(),
            meta.total_len
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let params = ModelParams::from_parts(meta.config, meta.num_classes, values)?;
    if params.layers != meta.layers || params.theta_len != meta.classifier_offset {
        return Err(Error::Config("checkpoint layout does not match its config".into()));
    }
    Ok(params)
}
