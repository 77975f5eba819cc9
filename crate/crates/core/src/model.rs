//! Dual CNN+LSTM network with a time-marker branch, and its ablation
//! variants.
//!
//! Layer names follow the reference layer table: `a_*` is the space
//! branch (sites as the sequence axis), `b_*` the time branch (history
//! slots as the sequence axis), `c_*` the time-marker branch and `d_*`
//! the fusion head.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, ChannelSet, Sample, MARKER_DIM};
use crate::error::{Error, Result};
use crate::layers::{self, Activation, LayerKind, LayerSpec, LstmWeights, NormMode};
use crate::tensor::{BatchStats, Graph, Tensor, Var};

/// Space-branch kernels, applied over (sites, slots).
pub const SPACE_KERNELS: [(usize, usize); 3] = [(2, 1), (4, 2), (8, 4)];
/// Time-branch kernels, applied over (slots, sites).
pub const TIME_KERNELS: [(usize, usize); 3] = [(2, 4), (2, 8), (4, 16)];
/// Name of the regression head that carries the L2 penalty.
pub const HEAD: &str = "d_1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Test a: full model.
    DclstmT,
    /// Test b: dense convolutions instead of separable ones.
    DclstmTConv2d,
    /// Test c: space branch and marker only.
    ClstmSpaceT,
    /// Test d: time branch and marker only.
    ClstmTimeT,
    /// Test e: both branches, no marker.
    DclstmNoMarker,
    /// Test f: convolutional branches without LSTMs, with marker.
    CnnT,
    /// Test j: speed channel only.
    SpeedOnly,
    /// Test k: flow channels only.
    FlowOnly,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::DclstmT,
        Variant::DclstmTConv2d,
        Variant::ClstmSpaceT,
        Variant::ClstmTimeT,
        Variant::DclstmNoMarker,
        Variant::CnnT,
        Variant::SpeedOnly,
        Variant::FlowOnly,
    ];

    pub fn test_id(self) -> &'static str {
        match self {
            Variant::DclstmT => "a",
            Variant::DclstmTConv2d => "b",
            Variant::ClstmSpaceT => "c",
            Variant::ClstmTimeT => "d",
            Variant::DclstmNoMarker => "e",
            Variant::CnnT => "f",
            Variant::SpeedOnly => "j",
            Variant::FlowOnly => "k",
        }
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            Variant::DclstmT => "dclstm-t",
            Variant::DclstmTConv2d => "dclstm-t-conv2d",
            Variant::ClstmSpaceT => "clstm-s-t",
            Variant::ClstmTimeT => "clstm-t-t",
            Variant::DclstmNoMarker => "dclstm",
            Variant::CnnT => "cnn-t",
            Variant::SpeedOnly => "speed-only",
            Variant::FlowOnly => "flow-only",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Variant::DclstmT => "Dual CNN+LSTM with time marker, separable conv",
            Variant::DclstmTConv2d => "Dual CNN+LSTM with time marker, dense conv",
            Variant::ClstmSpaceT => "Single CNN+LSTM (space sequence) with time marker",
            Variant::ClstmTimeT => "Single CNN+LSTM (time sequence) with time marker",
            Variant::DclstmNoMarker => "Dual CNN+LSTM without time marker",
            Variant::CnnT => "Convolutional branches only, with time marker",
            Variant::SpeedOnly => "Dual CNN+LSTM with time marker, speed input only",
            Variant::FlowOnly => "Dual CNN+LSTM with time marker, flow inputs only",
        }
    }

    pub fn from_cli_name(name: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.cli_name() == name || v.test_id() == name)
    }

    pub fn channel_set(self) -> ChannelSet {
        match self {
            Variant::SpeedOnly => ChannelSet::SpeedOnly,
            Variant::FlowOnly => ChannelSet::FlowOnly,
            _ => ChannelSet::All,
        }
    }

    pub fn has_space(self) -> bool {
        self != Variant::ClstmTimeT
    }

    pub fn has_time(self) -> bool {
        self != Variant::ClstmSpaceT
    }

    pub fn has_marker(self) -> bool {
        self != Variant::DclstmNoMarker
    }

    pub fn has_lstm(self) -> bool {
        self != Variant::CnnT
    }

    pub fn separable(self) -> bool {
        self != Variant::DclstmTConv2d
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

/// Where the activation sits relative to batch norm in each conv block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockOrder {
    ActivationThenNorm,
    NormThenActivation,
}

/// How the time branch's `[slots, sites]` output becomes `[sites, slots]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeRearrange {
    /// Axis swap: row `s` of the result is site `s`.
    Transpose,
    /// Reinterpret the row-major buffer with the new shape.
    RawReshape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    /// Corridor sites `p`.
    pub sites: usize,
    /// History slots `n`.
    pub window: usize,
    /// Input channels consumed by the variant.
    pub channels: usize,
    /// Predicted values per site (1 for direct forecasting).
    pub outputs: usize,
    pub marker_dim: usize,
    pub filters: [usize; 3],
    pub lstm_units: usize,
    pub block_order: BlockOrder,
    pub time_rearrange: TimeRearrange,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    /// L2 weight on the head's kernel.
    pub l2: f64,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn new(variant: Variant, sites: usize, window: usize) -> Self {
        Self {
            variant,
            sites,
            window,
            channels: variant.channel_set().indices().len(),
            outputs: 1,
            marker_dim: MARKER_DIM,
            filters: [32, 64, 128],
            lstm_units: 60,
            block_order: BlockOrder::ActivationThenNorm,
            time_rearrange: TimeRearrange::Transpose,
            bn_momentum: 0.99,
            bn_epsilon: 1e-3,
            l2: 0.0002,
            init_seed: 0,
        }
    }

    /// Sixty sites, four history slots, one output per site.
    pub fn canonical(variant: Variant) -> Self {
        Self::new(variant, 60, 4)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.sites,
            self.window,
            self.channels,
            self.outputs,
            self.marker_dim,
            self.lstm_units,
            self.filters[0],
            self.filters[1],
            self.filters[2],
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("model spec has a zero extent: {self:?}")));
        }
        if self.channels != self.variant.channel_set().indices().len() {
            return Err(Error::Config(format!(
                "variant {} consumes {} channels, spec says {}",
                self.variant,
                self.variant.channel_set().indices().len(),
                self.channels
            )));
        }
        if self.marker_dim != MARKER_DIM {
            return Err(Error::Config(format!(
                "marker width {} unsupported; encoder emits {MARKER_DIM}",
                self.marker_dim
            )));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_epsilon <= 0.0 || self.l2 < 0.0 {
            return Err(Error::Config("batch norm or l2 settings out of range".into()));
        }
        Ok(())
    }

    /// Width of the fused feature vector per site.
    pub fn fused_width(&self) -> usize {
        let v = self.variant;
        (if v.has_space() { self.channels } else { 0 })
            + (if v.has_time() { self.window } else { 0 })
            + usize::from(v.has_marker())
    }
}

/// One row of the layer table: spec plus per-sample output shape.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerInfo {
    pub spec: LayerSpec,
    pub output_shape: Vec<usize>,
}

impl LayerInfo {
    pub fn params(&self) -> usize {
        layers::param_count(&self.spec)
    }

    /// Human-readable kind with activation, e.g. `SeparableConv2D (relu)`.
    pub fn label(&self) -> String {
        let act = match &self.spec.kind {
            LayerKind::SeparableConv2D { activation, .. }
            | LayerKind::Conv2D { activation, .. } => Some(*activation),
            LayerKind::Lstm { .. } => Some(Activation::Tanh),
            _ => None,
        };
        match act {
            Some(Activation::Relu) => format!("{} (relu)", self.spec.kind.label()),
            Some(Activation::Tanh) => format!("{} (tanh)", self.spec.kind.label()),
            _ => self.spec.kind.label().to_string(),
        }
    }

    pub fn kernel(&self) -> Option<String> {
        match &self.spec.kind {
            LayerKind::SeparableConv2D { kernel, .. } | LayerKind::Conv2D { kernel, .. } => {
                Some(format!("({}, {})", kernel.0, kernel.1))
            }
            LayerKind::Conv1D { kernel, .. } => Some(format!("({kernel})")),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub layer: String,
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

impl ParamEntry {
    pub fn key(&self) -> String {
        format!("{}.{}", self.layer, self.name)
    }
}

/// Flat, ordered parameter storage keyed by `layer.param`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn push(&mut self, entry: ParamEntry) {
        self.index.insert(entry.key(), self.entries.len());
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn position(&self, layer: &str, name: &str) -> Option<usize> {
        self.index.get(&format!("{layer}.{name}")).copied()
    }

    pub fn get(&self, layer: &str, name: &str) -> Option<&Tensor> {
        self.position(layer, name).map(|i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, layer: &str, name: &str) -> Option<&mut Tensor> {
        self.position(layer, name).map(|i| &mut self.entries[i].value)
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore(&mut self, values: Vec<Tensor>) {
        for (e, v) in self.entries.iter_mut().zip(values) {
            e.value = v;
        }
    }
}

/// Result of building the forward graph for one batch.
pub struct Forward {
    /// `[batch, sites, outputs]`
    pub output: Var,
    /// Graph leaf per parameter entry; `None` for non-trainable entries.
    pub param_vars: Vec<Option<Var>>,
    /// Batch statistics per batch-norm layer (train mode only).
    pub bn_stats: Vec<(String, BatchStats)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<LayerInfo>,
    params: ParamStore,
    stats_ready: bool,
}

struct LayerListBuilder {
    rows: Vec<LayerInfo>,
}

impl LayerListBuilder {
    fn push(&mut self, name: &str, kind: LayerKind, shape: Vec<usize>) {
        self.rows.push(LayerInfo {
            spec: LayerSpec::new(name, kind),
            output_shape: shape,
        });
    }

    fn conv_branch(
        &mut self,
        prefix: &str,
        spec: &ModelSpec,
        kernels: &[(usize, usize); 3],
        height: usize,
        width: usize,
    ) {
        let c = spec.channels;
        self.push(
            &format!("{prefix}_0"),
            LayerKind::Input {
                shape: vec![height, width, c],
            },
            vec![height, width, c],
        );
        let mut cin = c;
        for (i, (&kernel, &cout)) in kernels.iter().zip(&spec.filters).enumerate() {
            let kind = if spec.variant.separable() {
                LayerKind::SeparableConv2D {
                    kernel,
                    in_channels: cin,
                    out_channels: cout,
                    activation: Activation::Relu,
                }
            } else {
                LayerKind::Conv2D {
                    kernel,
                    in_channels: cin,
                    out_channels: cout,
                    activation: Activation::Relu,
                }
            };
            self.push(&format!("{prefix}_{}", 2 * i + 1), kind, vec![height, width, cout]);
            self.push(
                &format!("{prefix}_{}", 2 * i + 2),
                LayerKind::BatchNorm { channels: cout },
                vec![height, width, cout],
            );
            cin = cout;
        }
        self.push(
            &format!("{prefix}_7"),
            LayerKind::TimeDistributedFlatten,
            vec![height, width * cin],
        );
    }
}

impl Model {
    /// Assemble the layer table and initialize parameters from
    /// `spec.init_seed`.
    pub fn build(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let (p, n, c) = (spec.sites, spec.window, spec.channels);
        let v = spec.variant;
        let f2 = spec.filters[2];
        let units = spec.lstm_units;
        let mut b = LayerListBuilder { rows: Vec::new() };
        let mut fused = Vec::new();

        if v.has_space() {
            b.conv_branch("a", &spec, &SPACE_KERNELS, p, n);
            let td = LayerKind::TimeDistributedDense {
                in_dim: n * f2,
                units: c,
                activation: Activation::Linear,
            };
            b.push("a_8", td, vec![p, c]);
            if v.has_lstm() {
                b.push("a_9", LayerKind::Lstm { input_dim: c, units }, vec![p, units]);
                b.push("a_10", LayerKind::Lstm { input_dim: units, units: c }, vec![p, c]);
            }
            fused.push(vec![p, c]);
        }
        if v.has_time() {
            b.conv_branch("b", &spec, &TIME_KERNELS, n, p);
            let td = LayerKind::TimeDistributedDense {
                in_dim: p * f2,
                units: p,
                activation: Activation::Linear,
            };
            b.push("b_8", td, vec![n, p]);
            if v.has_lstm() {
                b.push("b_9", LayerKind::Lstm { input_dim: p, units }, vec![n, units]);
                b.push("b_10", LayerKind::Lstm { input_dim: units, units: p }, vec![n, p]);
            }
            b.push("b_11", LayerKind::Reshape, vec![p, n]);
            fused.push(vec![p, n]);
        }
        if v.has_marker() {
            b.push(
                "c_0",
                LayerKind::Input {
                    shape: vec![p, spec.marker_dim],
                },
                vec![p, spec.marker_dim],
            );
            let conv = LayerKind::Conv1D {
                kernel: p,
                in_channels: spec.marker_dim,
                out_channels: 1,
                activation: Activation::Linear,
            };
            b.push("c_1", conv, vec![p, 1]);
            fused.push(vec![p, 1]);
        }
        if fused.iter().any(|s| s[0] != p) {
            return Err(Error::Config(format!("branch outputs disagree on the site axis: {fused:?}")));
        }
        let width: usize = fused.iter().map(|s| s[1]).sum();
        if width != spec.fused_width() {
            return Err(Error::Config(format!(
                "fused width {width} does not match expected {}",
                spec.fused_width()
            )));
        }
        b.push("d_0", LayerKind::Concat, vec![p, width]);
        b.push(
            HEAD,
            LayerKind::TimeDistributedDense {
                in_dim: width,
                units: spec.outputs,
                activation: Activation::Linear,
            },
            vec![p, spec.outputs],
        );
        if let Some(head) = b.rows.last_mut() {
            head.spec.l2 = spec.l2;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let mut params = ParamStore::default();
        for row in &b.rows {
            row.spec.validate()?;
            let shapes = row.spec.param_shapes();
            let values = row.spec.init_params(&mut rng);
            for (shape, value) in shapes.into_iter().zip(values) {
                params.push(ParamEntry {
                    layer: row.spec.name.clone(),
                    name: shape.name.to_string(),
                    value,
                    trainable: shape.trainable,
                });
            }
        }
        Ok(Self {
            spec,
            layers: b.rows,
            params,
            stats_ready: false,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerInfo> {
        self.layers.iter().find(|l| l.spec.name == name)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Trainable plus non-trainable parameter total.
    pub fn param_total(&self) -> usize {
        self.layers.iter().map(LayerInfo::params).sum()
    }

    /// Whether batch-norm moving statistics exist (at least one training
    /// step has run, or they were loaded from a checkpoint).
    pub fn is_trained(&self) -> bool {
        self.stats_ready || !self.layers.iter().any(|l| matches!(l.spec.kind, LayerKind::BatchNorm { .. }))
    }

    pub fn l2(&self) -> f64 {
        self.spec.l2
    }

    pub fn set_l2(&mut self, l2: f64) {
        self.spec.l2 = l2;
        if let Some(head) = self.layers.iter_mut().find(|l| l.spec.name == HEAD) {
            head.spec.l2 = l2;
        }
    }

    /// Fold a training step's batch statistics into the moving averages.
    pub fn update_batch_stats(&mut self, stats: &[(String, BatchStats)]) {
        let momentum = self.spec.bn_momentum;
        for (layer, s) in stats {
            if let Some(m) = self.params.get_mut(layer, "moving_mean") {
                layers::update_moving(m, &s.mean, momentum);
            }
            if let Some(m) = self.params.get_mut(layer, "moving_variance") {
                layers::update_moving(m, &s.variance, momentum);
            }
        }
        if !stats.is_empty() {
            self.stats_ready = true;
        }
    }

    /// Record the forward pass for `batch`. When `track_grads` is set the
    /// trainable parameters become differentiable leaves.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        batch: &Batch,
        mode: NormMode,
        track_grads: bool,
    ) -> Result<Forward> {
        if mode == NormMode::Infer && !self.is_trained() {
            return Err(Error::ModelState(
                "inference requested before any training step; batch-norm statistics undefined".into(),
            ));
        }
        self.check_batch(batch)?;
        let param_vars: Vec<Option<Var>> = self
            .params
            .entries()
            .iter()
            .map(|e| e.trainable.then(|| g.leaf(e.value.clone(), track_grads)))
            .collect();
        let mut ctx = Ctx {
            model: self,
            vars: &param_vars,
            mode,
            bn_stats: Vec::new(),
        };
        let spec = &self.spec;
        let bsz = batch.len();
        let mut parts = Vec::new();

        if spec.variant.has_space() {
            let x = g.constant(batch.space.clone());
            let x = select_channels(g, x, spec.variant.channel_set())?;
            let y = ctx.conv_branch(g, "a", x)?;
            let y = g.reshape(y, &[bsz, spec.sites, spec.window * spec.filters[2]])?;
            let mut y = ctx.dense(g, "a_8", y, Activation::Linear)?;
            if spec.variant.has_lstm() {
                y = ctx.lstm(g, "a_9", y)?;
                y = ctx.lstm(g, "a_10", y)?;
            }
            parts.push(y);
        }
        if spec.variant.has_time() {
            let x = g.constant(batch.time.clone());
            let x = select_channels(g, x, spec.variant.channel_set())?;
            let y = ctx.conv_branch(g, "b", x)?;
            let y = g.reshape(y, &[bsz, spec.window, spec.sites * spec.filters[2]])?;
            let mut y = ctx.dense(g, "b_8", y, Activation::Linear)?;
            if spec.variant.has_lstm() {
                y = ctx.lstm(g, "b_9", y)?;
                y = ctx.lstm(g, "b_10", y)?;
            }
            let y = match spec.time_rearrange {
                TimeRearrange::Transpose => g.transpose(y, 1, 2)?,
                TimeRearrange::RawReshape => g.reshape(y, &[bsz, spec.sites, spec.window])?,
            };
            parts.push(y);
        }
        if spec.variant.has_marker() {
            let m = g.constant(batch.marker.clone());
            let (k, b) = (ctx.var("c_1", "kernel")?, ctx.var("c_1", "bias")?);
            parts.push(layers::conv1d(g, m, k, b, Activation::Linear)?);
        }
        let fused = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 2)? };
        let output = ctx.dense(g, HEAD, fused, Activation::Linear)?;
        let bn_stats = ctx.bn_stats;
        Ok(Forward {
            output,
            param_vars,
            bn_stats,
        })
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let s = &self.spec;
        let b = batch.len();
        let want_space = [b, s.sites, s.window, crate::data::CHANNELS];
        if batch.space.shape() != want_space {
            return Err(Error::shape("model input (space)", batch.space.shape(), &want_space));
        }
        let want_time = [b, s.window, s.sites, crate::data::CHANNELS];
        if batch.time.shape() != want_time {
            return Err(Error::shape("model input (time)", batch.time.shape(), &want_time));
        }
        let want_marker = [b, s.sites, s.marker_dim];
        if batch.marker.shape() != want_marker {
            return Err(Error::shape("model input (marker)", batch.marker.shape(), &want_marker));
        }
        Ok(())
    }

    /// Inference on one sample: predicted normalized speeds `[sites, outputs]`.
    pub fn forward(&self, sample: &Sample) -> Result<Tensor> {
        let mut out = self.predict(std::slice::from_ref(sample))?;
        Ok(out.pop().expect("one sample in, one prediction out"))
    }

    /// Inference over many samples, returned in input order.
    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<Tensor>> {
        const CHUNK: usize = 32;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(CHUNK) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let batch = Batch::from_samples(&refs)?;
            let mut g = Graph::new();
            let fwd = self.forward_graph(&mut g, &batch, NormMode::Infer, false)?;
            let y = g.value(fwd.output);
            let per = self.spec.sites * self.spec.outputs;
            for i in 0..chunk.len() {
                let data = y.data()[i * per..(i + 1) * per].to_vec();
                out.push(Tensor::new(vec![self.spec.sites, self.spec.outputs], data)?);
            }
        }
        Ok(out)
    }

    /// Conv-layer parameter subtotal (separable or dense convolutions only).
    pub fn conv_param_total(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| {
                matches!(
                    l.spec.kind,
                    LayerKind::SeparableConv2D { .. } | LayerKind::Conv2D { .. }
                )
            })
            .map(LayerInfo::params)
            .sum()
    }

    /// Plain-text layer table: name, kind, output shape, kernel, params.
    pub fn summary(&self) -> String {
        let mut s = format!("{:<6} {:<26} {:<22} {:<10} {:>8}\n", "Layer", "Name", "Output shape", "Kernel", "Params");
        for l in &self.layers {
            let shape = format!(
                "(None, {})",
                l.output_shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
            );
            s.push_str(&format!(
                "{:<6} {:<26} {:<22} {:<10} {:>8}\n",
                l.spec.name,
                l.label(),
                shape,
                l.kernel().unwrap_or_default(),
                l.params()
            ));
        }
        s.push_str(&format!("Total parameters: {}\n", self.param_total()));
        s
    }

    pub(crate) fn from_parts(spec: ModelSpec, params: Vec<(String, Tensor)>, trained: bool) -> Result<Self> {
        let mut model = Self::build(spec)?;
        let mut seen = 0;
        for (key, value) in params {
            let Some(&i) = model.params.index.get(&key) else {
                return Err(Error::Container(format!("unknown parameter {key}")));
            };
            let entry = &mut model.params.entries[i];
            if entry.value.shape() != value.shape() {
                return Err(Error::shape("load parameter", entry.value.shape(), value.shape()));
            }
            entry.value = value;
            seen += 1;
        }
        if seen != model.params.entries.len() {
            return Err(Error::Container(format!(
                "expected {} parameter arrays, found {seen}",
                model.params.entries.len()
            )));
        }
        model.stats_ready = trained;
        Ok(model)
    }
}

fn select_channels(g: &mut Graph, x: Var, set: ChannelSet) -> Result<Var> {
    match set {
        ChannelSet::All => Ok(x),
        _ => {
            let idx = set.indices();
            g.slice(x, 3, idx.start, idx.len())
        }
    }
}

struct Ctx<'a> {
    model: &'a Model,
    vars: &'a [Option<Var>],
    mode: NormMode,
    bn_stats: Vec<(String, BatchStats)>,
}

impl Ctx<'_> {
    fn var(&self, layer: &str, name: &str) -> Result<Var> {
        self.model
            .params
            .position(layer, name)
            .and_then(|i| self.vars[i])
            .ok_or_else(|| Error::ModelState(format!("missing parameter {layer}.{name}")))
    }

    fn dense(&self, g: &mut Graph, layer: &str, x: Var, act: Activation) -> Result<Var> {
        layers::dense(g, x, self.var(layer, "kernel")?, self.var(layer, "bias")?, act)
    }

    fn lstm(&self, g: &mut Graph, layer: &str, x: Var) -> Result<Var> {
        let w = LstmWeights {
            kernel: self.var(layer, "kernel")?,
            recurrent: self.var(layer, "recurrent")?,
            bias: self.var(layer, "bias")?,
        };
        layers::lstm_sequence(g, x, &w)
    }

    fn conv_branch(&mut self, g: &mut Graph, prefix: &str, mut x: Var) -> Result<Var> {
        let spec = &self.model.spec;
        for i in 0..3 {
            let conv = format!("{prefix}_{}", 2 * i + 1);
            let norm = format!("{prefix}_{}", 2 * i + 2);
            let act_first = spec.block_order == BlockOrder::ActivationThenNorm;
            let act = if act_first { Activation::Relu } else { Activation::Linear };
            x = if spec.variant.separable() {
                layers::separable_conv2d(
                    g,
                    x,
                    self.var(&conv, "depthwise")?,
                    self.var(&conv, "pointwise")?,
                    self.var(&conv, "bias")?,
                    act,
                )?
            } else {
                layers::conv2d(g, x, self.var(&conv, "kernel")?, self.var(&conv, "bias")?, act)?
            };
            let params = &self.model.params;
            let (y, stats) = layers::batch_norm(
                g,
                x,
                self.var(&norm, "gamma")?,
                self.var(&norm, "beta")?,
                params.get(&norm, "moving_mean").expect("bn layer has moving mean"),
                params.get(&norm, "moving_variance").expect("bn layer has moving variance"),
                spec.bn_epsilon,
                self.mode,
            )?;
            if let Some(s) = stats {
                self.bn_stats.push((norm, s));
            }
            x = if act_first { y } else { layers::activate(g, y, Activation::Relu)? };
        }
        Ok(x)
    }
}
