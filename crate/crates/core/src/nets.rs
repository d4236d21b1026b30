//! Network definitions: the simplified three-block orientation CNN, the
//! U-Net backbone of the multi-task network, and the orientation head that
//! reads the image concatenated with the predicted masks.
//!
//! Parameter names are dotted paths so stages can freeze groups by prefix:
//! `conv.*` / `fc.*` for the simplified network, `encoder.*`, `decoder.*`
//! and `head.*` for the multi-task network.
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orient::{all_codes, OrientCode};
use crate::preprocess::{self, PreprocConfig, PreprocError};
use crate::tensor::{load_checkpoint, save_checkpoint, FlushSubnormals, Graph, ParamStore, Tensor, TensorError, Var};

pub const NUM_CODES: usize = 8;
pub const SEG_CHANNELS: usize = 4;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Preproc(#[from] PreprocError),
    #[error("expected input {expected:?}, got {got:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("expected {NUM_CODES} class scores, got {0}")]
    ScoreCount(usize),
    #[error("class scores contain NaN")]
    NanScores,
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("model card: {0}")]
    Card(String),
}

/// Output layer of an orientation classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Eight logits and a softmax.
    #[default]
    Softmax8,
    /// Three sigmoid outputs, one per code bit; the probability of a code
    /// is the product of its bit probabilities.
    Bits3,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Softmax8 => NUM_CODES,
            HeadKind::Bits3 => 3,
        }
    }
}

/// Argmax over the eight classes in code order; ties go to the lowest code.
pub fn predict_code(scores: &[f32]) -> Result<OrientCode, NetError> {
    if scores.len() != NUM_CODES {
        return Err(NetError::ScoreCount(scores.len()));
    }
    if scores.iter().any(|v| v.is_nan()) {
        return Err(NetError::NanScores);
    }
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    Ok(all_codes()[best])
}

fn he<R: rand::Rng>(store: &mut ParamStore<f32>, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) {
    store.insert_he(name, shape, fan_in, rng);
}

fn conv_params<R: rand::Rng>(store: &mut ParamStore<f32>, prefix: &str, cin: usize, cout: usize, k: usize, rng: &mut R) {
    he(store, &format!("{prefix}.w"), &[cout, cin, k, k], cin * k * k, rng);
    store.insert_zeros(&format!("{prefix}.b"), &[cout]);
}

fn conv(g: &mut Graph<f32>, store: &ParamStore<f32>, prefix: &str, x: Var, pad: usize) -> Result<Var, TensorError> {
    let w = g.param_by_name(store, &format!("{prefix}.w"))?;
    let b = g.param_by_name(store, &format!("{prefix}.b"))?;
    let y = g.conv2d(x, w, 1, pad)?;
    g.add_bias(y, b)
}

fn conv_relu(g: &mut Graph<f32>, store: &ParamStore<f32>, prefix: &str, x: Var) -> Result<Var, TensorError> {
    let y = conv(g, store, prefix, x, 1)?;
    Ok(g.relu(y))
}

/// Stacks `(C, H, W)` images into an `[N, C, H, W]` tensor.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Array3<f32>>) -> Result<Tensor<f32>, NetError> {
    let mut data = Vec::new();
    let mut dims: Option<(usize, usize, usize)> = None;
    let mut n = 0;
    for img in images {
        match dims {
            None => dims = Some(img.dim()),
            Some(d) if d != img.dim() => {
                return Err(NetError::InputShape { expected: vec![d.0, d.1, d.2], got: img.shape().to_vec() })
            }
            _ => {}
        }
        data.extend(img.iter().copied());
        n += 1;
    }
    let (c, h, w) = dims.ok_or_else(|| NetError::Config("empty batch".into()))?;
    Ok(Tensor::new(vec![n, c, h, w], data)?)
}

/// Three conv→relu→max-pool blocks followed by one fully connected layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub widths: [usize; 3],
    pub head: HeadKind,
}

impl ClassifierConfig {
    fn pooled_size(&self) -> usize {
        (0..3).fold(self.input_size, |s, _| s / 2)
    }

    fn validate(&self) -> Result<(), NetError> {
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(NetError::Config("channel counts must be positive".into()));
        }
        if self.pooled_size() == 0 {
            return Err(NetError::Config(format!("input size {} is below 8", self.input_size)));
        }
        Ok(())
    }

    fn init<R: rand::Rng>(&self, store: &mut ParamStore<f32>, prefix: &str, rng: &mut R) {
        let mut cin = self.in_channels;
        for (i, &w) in self.widths.iter().enumerate() {
            conv_params(store, &format!("{prefix}conv.{i}"), cin, w, 3, rng);
            cin = w;
        }
        let s = self.pooled_size();
        let fan_in = cin * s * s;
        // small output weights keep the untrained prediction close to uniform
        let std = 0.1 / (fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let outputs = self.head.outputs();
        let data = (0..fan_in * outputs).map(|_| normal.sample(rng) as f32).collect();
        store.insert(&format!("{prefix}fc.w"), Tensor::new(vec![fan_in, outputs], data).expect("sized"));
        store.insert_zeros(&format!("{prefix}fc.b"), &[outputs]);
    }

    /// Class probabilities `[N, 8]`.
    fn forward(&self, g: &mut Graph<f32>, store: &ParamStore<f32>, prefix: &str, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        for i in 0..3 {
            h = conv_relu(g, store, &format!("{prefix}conv.{i}"), h)?;
            h = g.max_pool2d(h, 2, 2)?;
        }
        let flat = g.flatten(h)?;
        let w = g.param_by_name(store, &format!("{prefix}fc.w"))?;
        let b = g.param_by_name(store, &format!("{prefix}fc.b"))?;
        let z = g.matmul(flat, w)?;
        let logits = g.add_bias(z, b)?;
        head_probs(g, self.head, logits)
    }
}

fn head_probs(g: &mut Graph<f32>, head: HeadKind, logits: Var) -> Result<Var, TensorError> {
    match head {
        HeadKind::Softmax8 => g.softmax(logits),
        HeadKind::Bits3 => {
            let p = g.sigmoid(logits);
            let q = g.affine(p, -1.0, 1.0);
            let both = g.concat(&[p, q], 1)?;
            let logs = g.log(both, 1e-30);
            // log P(code) = Σ_j log p_j or log (1 - p_j) depending on bit j
            let mut sel = vec![0.0f32; 6 * NUM_CODES];
            for c in 0..NUM_CODES {
                for j in 0..3 {
                    let bit = (c >> j) & 1;
                    sel[(if bit == 1 { j } else { 3 + j }) * NUM_CODES + c] = 1.0;
                }
            }
            let sel = g.input(Tensor::new(vec![6, NUM_CODES], sel)?);
            let lp = g.matmul(logs, sel)?;
            Ok(g.exp(lp))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimpleCnnConfig {
    pub input_size: usize,
    pub widths: [usize; 3],
    pub head: HeadKind,
    pub seed: u64,
}

impl Default for SimpleCnnConfig {
    fn default() -> Self {
        SimpleCnnConfig { input_size: 100, widths: [16, 32, 64], head: HeadKind::Softmax8, seed: 0 }
    }
}

impl SimpleCnnConfig {
    fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig { in_channels: 3, input_size: self.input_size, widths: self.widths, head: self.head }
    }
}

/// The simplified orientation network over three-channel inputs.
#[derive(Debug, Clone)]
pub struct SimpleCnn {
    pub config: SimpleCnnConfig,
    pub preprocess: PreprocConfig,
    pub params: ParamStore<f32>,
}

impl SimpleCnn {
    pub fn new(config: SimpleCnnConfig, mut preprocess: PreprocConfig) -> Result<Self, NetError> {
        config.classifier().validate()?;
        preprocess.simple_size = config.input_size;
        preprocess.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        config.classifier().init(&mut params, "", &mut rng);
        Ok(SimpleCnn { config, preprocess, params })
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), NetError> {
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1..] != [3, s, s] {
            return Err(NetError::InputShape { expected: vec![0, 3, s, s], got: shape.to_vec() });
        }
        Ok(())
    }

    /// Records the forward pass of `x: [N, 3, S, S]`; returns probabilities `[N, 8]`.
    pub fn forward(&self, g: &mut Graph<f32>, x: Var) -> Result<Var, NetError> {
        self.check_input(g.shape(x))?;
        Ok(self.config.classifier().forward(g, &self.params, "", x)?)
    }

    /// Reinitialises the fully connected layer.
    pub fn reinit_fc(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fresh = ParamStore::new();
        self.config.classifier().init(&mut fresh, "", &mut rng);
        for p in fresh.iter().filter(|p| p.name.starts_with("fc.")) {
            self.params.insert(&p.name, p.value.clone());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiTaskConfig {
    pub input_size: usize,
    pub base_width: usize,
    /// Number of resolution levels of the U-Net, bottleneck included.
    pub depth: usize,
    pub head_widths: [usize; 3],
    pub head: HeadKind,
    pub seed: u64,
}

impl Default for MultiTaskConfig {
    fn default() -> Self {
        MultiTaskConfig { input_size: 212, base_width: 16, depth: 4, head_widths: [16, 32, 64], head: HeadKind::Softmax8, seed: 0 }
    }
}

impl MultiTaskConfig {
    fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig {
            in_channels: 1 + SEG_CHANNELS,
            input_size: self.input_size,
            widths: self.head_widths,
            head: self.head,
        }
    }

    fn validate(&self) -> Result<(), NetError> {
        if self.depth == 0 || self.base_width == 0 {
            return Err(NetError::Config("depth and base width must be positive".into()));
        }
        if self.input_size >> (self.depth - 1) < 2 {
            return Err(NetError::Config(format!("input {} too small for depth {}", self.input_size, self.depth)));
        }
        self.classifier().validate()
    }
}

/// Outputs of one multi-task forward pass.
#[derive(Debug, Clone, Copy)]
pub struct MultiTaskOutput {
    /// Per-class sigmoid maps `[N, 4, S, S]`.
    pub seg: Var,
    /// Orientation probabilities `[N, 8]`.
    pub orient: Var,
}

/// U-Net encoder/decoder with the orientation head reading `[image, masks]`.
#[derive(Debug, Clone)]
pub struct MultiTaskNet {
    pub config: MultiTaskConfig,
    pub params: ParamStore<f32>,
}

impl MultiTaskNet {
    pub fn new(config: MultiTaskConfig) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let b = config.base_width;
        let mut cin = 1;
        for l in 0..config.depth {
            let c = b << l;
            conv_params(&mut params, &format!("encoder.{l}.conv1"), cin, c, 3, &mut rng);
            conv_params(&mut params, &format!("encoder.{l}.conv2"), c, c, 3, &mut rng);
            cin = c;
        }
        for l in (0..config.depth - 1).rev() {
            let c = b << l;
            conv_params(&mut params, &format!("decoder.{l}.up"), cin, c, 3, &mut rng);
            conv_params(&mut params, &format!("decoder.{l}.conv1"), 2 * c, c, 3, &mut rng);
            conv_params(&mut params, &format!("decoder.{l}.conv2"), c, c, 3, &mut rng);
            cin = c;
        }
        conv_params(&mut params, "decoder.out", cin, SEG_CHANNELS, 1, &mut rng);
        config.classifier().init(&mut params, "head.", &mut rng);
        Ok(MultiTaskNet { config, params })
    }

    /// Draws fresh orientation-head weights from `seed`.
    pub fn reinit_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fresh = ParamStore::new();
        self.config.classifier().init(&mut fresh, "head.", &mut rng);
        for p in fresh.iter() {
            let trainable = self.params.by_name(&p.name).map(|q| q.trainable).unwrap_or(true);
            let id = self.params.insert(&p.name, p.value.clone());
            self.params.get_mut(id).trainable = trainable;
        }
    }

    pub fn forward(&self, g: &mut Graph<f32>, x: Var) -> Result<MultiTaskOutput, NetError> {
        let seg = self.forward_segmentation(g, x)?;
        let head_in = g.concat(&[x, seg], 1)?;
        let orient = self.config.classifier().forward(g, &self.params, "head.", head_in)?;
        Ok(MultiTaskOutput { seg, orient })
    }

    /// Encoder and decoder only: per-class sigmoid maps `[N, 4, S, S]`.
    pub fn forward_segmentation(&self, g: &mut Graph<f32>, x: Var) -> Result<Var, NetError> {
        let s = self.config.input_size;
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1..] != [1, s, s] {
            return Err(NetError::InputShape { expected: vec![0, 1, s, s], got: shape.to_vec() });
        }
        let p = &self.params;
        let mut skips = Vec::new();
        let mut h = x;
        for l in 0..self.config.depth {
            if l > 0 {
                h = g.max_pool2d(h, 2, 2)?;
            }
            h = conv_relu(g, p, &format!("encoder.{l}.conv1"), h)?;
            h = conv_relu(g, p, &format!("encoder.{l}.conv2"), h)?;
            if l + 1 < self.config.depth {
                skips.push(h);
            }
        }
        for l in (0..self.config.depth - 1).rev() {
            let skip = skips[l];
            let (sh, sw) = (g.shape(skip)[2], g.shape(skip)[3]);
            h = g.upsample2d(h, 2)?;
            h = g.fit_spatial(h, sh, sw)?;
            h = conv_relu(g, p, &format!("decoder.{l}.up"), h)?;
            h = g.concat(&[skip, h], 1)?;
            h = conv_relu(g, p, &format!("decoder.{l}.conv1"), h)?;
            h = conv_relu(g, p, &format!("decoder.{l}.conv2"), h)?;
        }
        let logits = conv(g, p, "decoder.out", h, 0)?;
        Ok(g.sigmoid(logits))
    }
}

/// Per-pixel class map from the four sigmoid maps (argmax, lowest class on ties).
pub fn seg_argmax(maps: &[f32], h: usize, w: usize) -> Array2<u8> {
    let plane = h * w;
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut best = 0;
        for c in 1..SEG_CHANNELS {
            if maps[c * plane + i * w + j] > maps[best * plane + i * w + j] {
                best = c;
            }
        }
        best as u8
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Simple { config: SimpleCnnConfig, preprocess: PreprocConfig },
    MultiTask { config: MultiTaskConfig },
}

/// Human-readable description stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub architecture: Architecture,
    pub input_shape: Vec<usize>,
    pub head: HeadKind,
    pub class_order: Vec<OrientCode>,
    pub parameter_count: usize,
    #[serde(default)]
    pub notes: serde_json::Value,
}

/// Either orientation recognizer, as loaded from a checkpoint directory.
#[derive(Debug, Clone)]
pub enum Model {
    Simple(SimpleCnn),
    MultiTask(MultiTaskNet),
}

/// Slices per forward pass during inference.
const INFER_BATCH: usize = 16;

impl Model {
    pub fn params(&self) -> &ParamStore<f32> {
        match self {
            Model::Simple(m) => &m.params,
            Model::MultiTask(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        match self {
            Model::Simple(m) => &mut m.params,
            Model::MultiTask(m) => &mut m.params,
        }
    }

    /// Orientation probabilities `[N, 8]` for prepared inputs in `x`.
    pub fn forward_orientation(&self, g: &mut Graph<f32>, x: Var) -> Result<Var, NetError> {
        match self {
            Model::Simple(m) => m.forward(g, x),
            Model::MultiTask(m) => Ok(m.forward(g, x)?.orient),
        }
    }

    pub fn card(&self) -> ModelCard {
        let (architecture, input_shape, head) = match self {
            Model::Simple(m) => (
                Architecture::Simple { config: m.config.clone(), preprocess: m.preprocess.clone() },
                vec![3, m.config.input_size, m.config.input_size],
                m.config.head,
            ),
            Model::MultiTask(m) => (
                Architecture::MultiTask { config: m.config.clone() },
                vec![1, m.config.input_size, m.config.input_size],
                m.config.head,
            ),
        };
        ModelCard {
            architecture,
            input_shape,
            head,
            class_order: all_codes().to_vec(),
            parameter_count: self.params().count(),
            notes: serde_json::Value::Null,
        }
    }

    /// Writes `manifest.json`, `weights.bin` and `model_card.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), NetError> {
        let card = self.card();
        let meta = serde_json::to_value(&card).map_err(|e| NetError::Card(e.to_string()))?;
        save_checkpoint(dir, self.params(), meta)?;
        let path = dir.join("model_card.json");
        let text = serde_json::to_string_pretty(&card).map_err(|e| NetError::Card(e.to_string()))?;
        std::fs::write(&path, text).map_err(|source| TensorError::Io { path, source })?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Model, NetError> {
        let (store, manifest) = load_checkpoint::<f32>(dir)?;
        let card: ModelCard =
            serde_json::from_value(manifest.meta).map_err(|e| NetError::Card(format!("{}: {e}", dir.display())))?;
        let mut model = match card.architecture {
            Architecture::Simple { config, preprocess } => Model::Simple(SimpleCnn::new(config, preprocess)?),
            Architecture::MultiTask { config } => Model::MultiTask(MultiTaskNet::new(config)?),
        };
        let params = model.params_mut();
        if params.len() != store.len() {
            return Err(NetError::Card(format!("checkpoint has {} tensors, architecture needs {}", store.len(), params.len())));
        }
        params.load_from(&store)?;
        Ok(model)
    }

    /// Preprocesses one raw slice into this model's input.
    pub fn prepare(&self, slice: ArrayView2<'_, f32>) -> Result<Array3<f32>, NetError> {
        Ok(match self {
            Model::Simple(m) => preprocess::simple_input(slice, &m.preprocess)?,
            Model::MultiTask(m) => preprocess::multitask_input(slice, m.config.input_size)?,
        })
    }

    /// Orientation probabilities for prepared inputs.
    pub fn predict(&self, inputs: &[Array3<f32>]) -> Result<Vec<[f32; NUM_CODES]>, NetError> {
        let _ftz = FlushSubnormals::new();
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(INFER_BATCH) {
            let mut g = Graph::new();
            let x = g.input(stack_images(chunk)?);
            let probs = self.forward_orientation(&mut g, x)?;
            for row in g.value(probs).data().chunks(NUM_CODES) {
                out.push(row.try_into().expect("eight classes"));
            }
        }
        Ok(out)
    }

    /// Orientation probabilities for raw slices.
    pub fn predict_slices<'a>(&self, slices: impl IntoIterator<Item = ArrayView2<'a, f32>>) -> Result<Vec<[f32; NUM_CODES]>, NetError> {
        let inputs = slices.into_iter().map(|s| self.prepare(s)).collect::<Result<Vec<_>, _>>()?;
        self.predict(&inputs)
    }
}
