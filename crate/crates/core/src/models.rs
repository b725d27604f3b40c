//! Network topologies over correlation features.
//!
//! - Model 1 (`TDEC_CNN`): two TDEC matrices (one per delay scale) through
//!   separate conv layers, channel-concatenated, one more conv, batch norm,
//!   max pool, dropout, flatten.
//! - Model 2 (`FVTC_CNN`): an M²×D FVTC map through four (1,3) convolutions
//!   dilated along the lag axis.
//! - `FUSION`: one video and one audio conv stack, flattened and concatenated.
//!
//! Every graph ends in a dense stack followed by a 2-way softmax.

use serde::{Deserialize, Serialize};

use crate::correlation::CoordConfig;
use crate::ingest::Modality;
use crate::tensor::{
    check_gradients, BufferId, Evaluation, GradCheckOptions, GradCheckReport, Mode, ParamId, ParamStore, Real, Tape, Tensor,
    Var,
};
use crate::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const N_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModelKind {
    TdecCnn,
    FvtcCnn,
    Fusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Arch {
    /// Model 1.
    Tdec,
    /// Model 2.
    Fvtc,
}

/// One input branch. Unset fields fall back to the modality defaults.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub modality: Modality,
    pub arch: Arch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_delays: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scales: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
}

impl BranchConfig {
    pub fn new(modality: Modality, arch: Arch) -> Self {
        BranchConfig {
            modality,
            arch,
            channels: None,
            n_delays: None,
            scales: None,
            d: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels.unwrap_or_else(|| self.modality.channel_count())
    }

    /// Embedding parameters for feature extraction.
    pub fn coord_config(&self) -> CoordConfig {
        let mut c = CoordConfig::for_modality(self.modality);
        if let Some(n) = self.n_delays {
            c.n_delays = n;
        }
        if let Some(s) = &self.scales {
            c.scales = s.clone();
        }
        if let Some(d) = self.d {
            c.fvtc_d = d;
        }
        c
    }

    /// Per-sample input tensors this branch consumes (without batch axis).
    pub fn input_shapes(&self) -> Vec<Vec<usize>> {
        let c = self.coord_config();
        let m = self.channels();
        match self.arch {
            Arch::Tdec => vec![vec![1, m * c.n_delays, m * c.n_delays]; 2],
            Arch::Fvtc => vec![vec![1, m * m, c.fvtc_d]],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.channels() == 0 {
            return Err(Error::Config("branch needs at least one channel".into()));
        }
        let c = self.coord_config();
        c.validate()?;
        if self.arch == Arch::Tdec && c.scales.len() != 2 {
            return Err(Error::Config(format!(
                "Model 1 takes exactly two delay scales, got {}",
                c.scales.len()
            )));
        }
        Ok(())
    }

    fn prefix(&self) -> String {
        let arch = match self.arch {
            Arch::Tdec => "m1",
            Arch::Fvtc => "m2",
        };
        format!("{}_{arch}", self.modality.to_string().to_lowercase())
    }
}

fn default_filters() -> usize {
    16
}

fn default_kernel() -> usize {
    3
}

fn default_dilations() -> Vec<usize> {
    vec![1, 3, 7, 15]
}

fn default_dropout() -> f64 {
    0.3
}

fn default_pool() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub branches: Vec<BranchConfig>,
    #[serde(default = "default_filters")]
    pub filters: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_dilations")]
    pub dilations: Vec<usize>,
    /// Hidden dense sizes before the 2-way output; defaults by kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fc: Option<Vec<usize>>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_pool")]
    pub pool: usize,
}

impl ModelConfig {
    fn with_branches(kind: ModelKind, branches: Vec<BranchConfig>) -> Self {
        ModelConfig {
            kind,
            branches,
            filters: default_filters(),
            kernel: default_kernel(),
            dilations: default_dilations(),
            fc: None,
            dropout: default_dropout(),
            pool: default_pool(),
        }
    }

    pub fn tdec_cnn(modality: Modality) -> Self {
        Self::with_branches(ModelKind::TdecCnn, vec![BranchConfig::new(modality, Arch::Tdec)])
    }

    pub fn fvtc_cnn(modality: Modality) -> Self {
        Self::with_branches(ModelKind::FvtcCnn, vec![BranchConfig::new(modality, Arch::Fvtc)])
    }

    pub fn fusion(video: BranchConfig, audio: BranchConfig) -> Self {
        Self::with_branches(ModelKind::Fusion, vec![video, audio])
    }

    /// Hidden dense sizes: Model 1 standalone `[64]`, otherwise `[64, 8]`.
    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.fc.clone().unwrap_or_else(|| match self.kind {
            ModelKind::TdecCnn => vec![64],
            _ => vec![64, 8],
        })
    }

    pub fn validate(&self) -> Result<()> {
        let want = match self.kind {
            ModelKind::TdecCnn | ModelKind::FvtcCnn => 1,
            ModelKind::Fusion => 2,
        };
        if self.branches.len() != want {
            return Err(Error::Config(format!(
                "{:?} takes {want} branch(es), got {}",
                self.kind,
                self.branches.len()
            )));
        }
        match self.kind {
            ModelKind::TdecCnn if self.branches[0].arch != Arch::Tdec => {
                return Err(Error::Config("TDEC_CNN branch must use arch TDEC".into()))
            }
            ModelKind::FvtcCnn if self.branches[0].arch != Arch::Fvtc => {
                return Err(Error::Config("FVTC_CNN branch must use arch FVTC".into()))
            }
            ModelKind::Fusion => {
                let (a, b) = (self.branches[0].modality, self.branches[1].modality);
                if a.is_video() == b.is_video() {
                    let side = if a.is_video() { "video" } else { "audio" };
                    return Err(Error::Config(format!("fusion needs one video and one audio branch, got two {side} branches ({a}, {b})")));
                }
            }
            _ => {}
        }
        for b in &self.branches {
            b.validate()?;
        }
        if self.filters == 0 || self.kernel == 0 || self.pool == 0 {
            return Err(Error::Config("filters, kernel and pool must be positive".into()));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::Config("dilations must be positive and nonempty".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidRate(self.dropout));
        }
        if self.hidden_sizes().contains(&0) {
            return Err(Error::Config("dense sizes must be positive".into()));
        }
        Ok(())
    }

    /// Per-sample input shapes in the order [`ModelGraph::forward`] expects them.
    pub fn input_shapes(&self) -> Vec<Vec<usize>> {
        self.branches.iter().flat_map(BranchConfig::input_shapes).collect()
    }
}

/// Dilations actually applied along a lag axis of length `len` with kernel `k`:
/// each scheduled value is reduced to the largest one that still leaves at
/// least one output position.
pub fn dilation_schedule(len: usize, kernel: usize, schedule: &[usize]) -> Result<(Vec<usize>, usize)> {
    let span = kernel.saturating_sub(1);
    let mut remaining = len;
    let mut applied = Vec::with_capacity(schedule.len());
    for &d in schedule {
        let fit = if span == 0 { d } else { remaining.saturating_sub(1) / span };
        if fit == 0 {
            return Err(Error::Shape(format!(
                "lag length {remaining} cannot fit kernel {kernel} (schedule {schedule:?} on D={len})"
            )));
        }
        let used = d.min(fit);
        remaining -= span * used;
        applied.push(used);
    }
    Ok((applied, remaining))
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
    dilation: (usize, usize),
}

#[derive(Debug, Clone, Copy)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: BufferId,
    var: BufferId,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
enum Stack {
    Tdec {
        conv_a: Conv,
        conv_b: Conv,
        conv_c: Conv,
        bn: BatchNorm,
    },
    Fvtc {
        convs: Vec<Conv>,
    },
}

/// A built network: configuration, parameters, and layer wiring.
#[derive(Debug, Clone)]
pub struct ModelGraph<T: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    stacks: Vec<Stack>,
    head: Vec<Dense>,
    flat_sizes: Vec<usize>,
    applied_dilations: Vec<Vec<usize>>,
}

struct Builder<'a, T: Real> {
    store: ParamStore<T>,
    rng: &'a mut rand_chacha::ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, kh: usize, kw: usize, dilation: (usize, usize)) -> Result<Conv> {
        let w = self.store.add_glorot(
            &format!("{name}.w"),
            &[cout, cin, kh, kw],
            cin * kh * kw,
            cout * kh * kw,
            self.rng,
        )?;
        let b = self.store.add(&format!("{name}.b"), Tensor::zeros(&[cout]))?;
        Ok(Conv { w, b, dilation })
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: self.store.add(&format!("{name}.gamma"), Tensor::filled(&[c], T::one()))?,
            beta: self.store.add(&format!("{name}.beta"), Tensor::zeros(&[c]))?,
            mean: self.store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[c]))?,
            var: self.store.add_buffer(&format!("{name}.running_var"), Tensor::filled(&[c], T::one()))?,
        })
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize) -> Result<Dense> {
        Ok(Dense {
            w: self.store.add_glorot(&format!("{name}.w"), &[fin, fout], fin, fout, self.rng)?,
            b: self.store.add(&format!("{name}.b"), Tensor::zeros(&[fout]))?,
        })
    }
}

impl<T: Real> ModelGraph<T> {
    /// Builds any configured topology with parameters drawn from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::tensor::init_rng(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let (f, k) = (config.filters, config.kernel);
        let mut stacks = Vec::new();
        let mut flat_sizes = Vec::new();
        let mut applied_dilations = Vec::new();
        for branch in &config.branches {
            let p = branch.prefix();
            let shapes = branch.input_shapes();
            match branch.arch {
                Arch::Tdec => {
                    let dim = shapes[0][1];
                    let after = dim
                        .checked_sub(2 * (k - 1))
                        .filter(|&s| s >= config.pool)
                        .ok_or_else(|| Error::Shape(format!("{dim}x{dim} TDEC input too small for two {k}x{k} convs and pooling")))?;
                    let pooled = after / config.pool;
                    stacks.push(Stack::Tdec {
                        conv_a: b.conv(&format!("{p}.conv_a"), 1, f, k, k, (1, 1))?,
                        conv_b: b.conv(&format!("{p}.conv_b"), 1, f, k, k, (1, 1))?,
                        conv_c: b.conv(&format!("{p}.conv_c"), 2 * f, f, k, k, (1, 1))?,
                        bn: b.bn(&format!("{p}.bn"), f)?,
                    });
                    flat_sizes.push(f * pooled * pooled);
                    applied_dilations.push(Vec::new());
                }
                Arch::Fvtc => {
                    let (rows, lags) = (shapes[0][1], shapes[0][2]);
                    let (applied, out_len) = dilation_schedule(lags, k, &config.dilations)?;
                    if applied != config.dilations {
                        log::info!(
                            "{p}: lag length {lags} cannot hold dilations {:?}; applied {:?}",
                            config.dilations,
                            applied
                        );
                    }
                    let mut convs = Vec::new();
                    let mut cin = 1;
                    for (i, &d) in applied.iter().enumerate() {
                        convs.push(b.conv(&format!("{p}.conv{}", i + 1), cin, f, 1, k, (1, d))?);
                        cin = f;
                    }
                    stacks.push(Stack::Fvtc { convs });
                    flat_sizes.push(f * rows * out_len);
                    applied_dilations.push(applied);
                }
            }
        }
        let mut head = Vec::new();
        let mut fin: usize = flat_sizes.iter().sum();
        for (i, &h) in config.hidden_sizes().iter().enumerate() {
            head.push(b.dense(&format!("head.fc{}", i + 1), fin, h)?);
            fin = h;
        }
        head.push(b.dense("head.out", fin, N_CLASSES)?);
        Ok(ModelGraph {
            config: config.clone(),
            store: b.store,
            stacks,
            head,
            flat_sizes,
            applied_dilations,
        })
    }

    /// Flattened feature size of each branch's conv stack.
    pub fn flat_sizes(&self) -> &[usize] {
        &self.flat_sizes
    }

    /// Dilations applied per branch (empty for Model 1 branches).
    pub fn applied_dilations(&self) -> &[Vec<usize>] {
        &self.applied_dilations
    }

    pub fn input_shapes(&self) -> Vec<Vec<usize>> {
        self.config.input_shapes()
    }

    /// Records the forward pass and returns the [B, 2] class probabilities.
    /// `inputs` holds one batched tensor per entry of [`Self::input_shapes`].
    pub fn forward(&self, tape: &mut Tape<'_, T>, inputs: &[Tensor<T>]) -> Result<Var> {
        let shapes = self.input_shapes();
        if inputs.len() != shapes.len() {
            return Err(Error::Shape(format!("model takes {} inputs, got {}", shapes.len(), inputs.len())));
        }
        let batch = inputs[0].shape().first().copied().unwrap_or(0);
        for (t, s) in inputs.iter().zip(&shapes) {
            if t.shape().len() != s.len() + 1 || t.shape()[0] != batch || t.shape()[1..] != s[..] {
                return Err(Error::Shape(format!(
                    "input {:?} does not match [{batch}, {}]",
                    t.shape(),
                    s.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
                )));
            }
        }
        let mut next = inputs.iter();
        let mut flats = Vec::with_capacity(self.stacks.len());
        for stack in &self.stacks {
            match stack {
                Stack::Tdec { conv_a, conv_b, conv_c, bn } => {
                    let xa = tape.input(next.next().expect("input").clone());
                    let xb = tape.input(next.next().expect("input").clone());
                    let a = tape.conv2d(xa, conv_a.w, conv_a.b, conv_a.dilation)?;
                    let a = tape.relu(a);
                    let b = tape.conv2d(xb, conv_b.w, conv_b.b, conv_b.dilation)?;
                    let b = tape.relu(b);
                    let cat = tape.concat(&[a, b])?;
                    let c = tape.conv2d(cat, conv_c.w, conv_c.b, conv_c.dilation)?;
                    let c = tape.relu(c);
                    let c = tape.batch_norm2d(c, bn.gamma, bn.beta, bn.mean, bn.var, BN_MOMENTUM, BN_EPS)?;
                    let c = tape.max_pool2d(c, self.config.pool)?;
                    let c = tape.dropout(c, self.config.dropout)?;
                    flats.push(tape.flatten(c));
                }
                Stack::Fvtc { convs } => {
                    let mut x = tape.input(next.next().expect("input").clone());
                    for conv in convs {
                        x = tape.conv2d(x, conv.w, conv.b, conv.dilation)?;
                        x = tape.relu(x);
                    }
                    flats.push(tape.flatten(x));
                }
            }
        }
        let mut x = if flats.len() == 1 { flats[0] } else { tape.concat(&flats)? };
        let (out, hidden) = self.head.split_last().expect("output layer");
        for layer in hidden {
            x = tape.dense(x, layer.w, layer.b)?;
            x = tape.relu(x);
        }
        let logits = tape.dense(x, out.w, out.b)?;
        tape.softmax(logits)
    }

    /// Eval-mode class probabilities, one `[p_S, p_H]` row per sample.
    pub fn predict(&self, inputs: &[Tensor<T>]) -> Result<Vec<[f64; 2]>> {
        let mut tape = Tape::new(&self.store, Mode::Eval, 0);
        let p = self.forward(&mut tape, inputs)?;
        Ok(tape
            .value(p)
            .data()
            .chunks_exact(N_CLASSES)
            .map(|r| [r[0].as_f64(), r[1].as_f64()])
            .collect())
    }

    /// Element-type conversion with identical wiring.
    pub fn cast<U: Real>(&self) -> ModelGraph<U> {
        ModelGraph {
            config: self.config.clone(),
            store: self.store.cast(),
            stacks: self.stacks.clone(),
            head: self.head.clone(),
            flat_sizes: self.flat_sizes.clone(),
            applied_dilations: self.applied_dilations.clone(),
        }
    }
}

pub fn build_tdec_cnn<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelGraph<T>> {
    if config.kind != ModelKind::TdecCnn {
        return Err(Error::Config("expected a TDEC_CNN config".into()));
    }
    ModelGraph::build(config, seed)
}

pub fn build_fvtc_cnn<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelGraph<T>> {
    if config.kind != ModelKind::FvtcCnn {
        return Err(Error::Config("expected a FVTC_CNN config".into()));
    }
    ModelGraph::build(config, seed)
}

pub fn build_fusion<T: Real>(video: BranchConfig, audio: BranchConfig, seed: u64) -> Result<ModelGraph<T>> {
    ModelGraph::build(&ModelConfig::fusion(video, audio), seed)
}

/// Finite-difference check of every parameter gradient of `graph` on one
/// train-mode batch. Dropout masks are fixed by `options.seed`.
pub fn grad_check(
    graph: &mut ModelGraph<f64>,
    inputs: &[Tensor<f64>],
    labels: &[usize],
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut store = std::mem::take(&mut graph.store);
    let wiring = &*graph;
    let report = check_gradients(&mut store, options, |s, want| {
        let mut tape = Tape::new(s, Mode::Train, options.seed);
        tape.track_kinks(true);
        let p = wiring.forward(&mut tape, inputs)?;
        let loss = tape.cross_entropy(p, labels, None)?;
        Ok(Evaluation {
            loss: tape.value(loss).data()[0],
            signature: tape.kink_signature(),
            grads: if want { Some(tape.backward(loss)?) } else { None },
        })
    });
    graph.store = store;
    report
}

/// Trainable scalar count predicted from the configuration alone.
pub fn analytic_param_count(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    let (f, k) = (config.filters, config.kernel);
    let conv = |cin: usize, kh: usize, kw: usize| f * cin * kh * kw + f;
    let mut total = 0;
    let mut flat = 0;
    for branch in &config.branches {
        let shapes = branch.input_shapes();
        match branch.arch {
            Arch::Tdec => {
                total += 2 * conv(1, k, k) + conv(2 * f, k, k) + 2 * f;
                let side = (shapes[0][1] - 2 * (k - 1)) / config.pool;
                flat += f * side * side;
            }
            Arch::Fvtc => {
                let (_, out_len) = dilation_schedule(shapes[0][2], k, &config.dilations)?;
                total += conv(1, 1, k) + (config.dilations.len() - 1) * conv(f, 1, k);
                flat += f * shapes[0][1] * out_len;
            }
        }
    }
    let mut fin = flat;
    for h in config.hidden_sizes().into_iter().chain([N_CLASSES]) {
        total += fin * h + h;
        fin = h;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model1_flatten_sizes() {
        let fau = ModelGraph::<f32>::build(&ModelConfig::tdec_cnn(Modality::Fau), 1).unwrap();
        assert_eq!(fau.flat_sizes(), &[85_264]);
        let tv = ModelGraph::<f32>::build(&ModelConfig::tdec_cnn(Modality::Tv), 1).unwrap();
        assert_eq!(tv.flat_sizes(), &[16 * 58 * 58]);
    }

    #[test]
    fn dilation_clamping() {
        assert_eq!(dilation_schedule(60, 3, &[1, 3, 7, 15]).unwrap(), (vec![1, 3, 7, 15], 8));
        assert_eq!(dilation_schedule(50, 3, &[1, 3, 7, 15]).unwrap(), (vec![1, 3, 7, 13], 2));
        assert_eq!(dilation_schedule(45, 3, &[1, 3, 7, 15]).unwrap(), (vec![1, 3, 7, 11], 1));
        assert!(matches!(dilation_schedule(4, 3, &[1, 3, 7, 15]), Err(Error::Shape(_))));
    }

    #[test]
    fn fusion_modalities() {
        let fau = BranchConfig::new(Modality::Fau, Arch::Tdec);
        let err = ModelGraph::<f32>::build(&ModelConfig::fusion(fau.clone(), fau.clone()), 0);
        assert!(matches!(err, Err(Error::Config(_))));
        let tv = BranchConfig::new(Modality::Tv, Arch::Fvtc);
        let mfcc = BranchConfig::new(Modality::Mfcc, Arch::Fvtc);
        assert!(matches!(ModelGraph::<f32>::build(&ModelConfig::fusion(tv, mfcc), 0), Err(Error::Config(_))));
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ModelConfig::fusion(
            BranchConfig::new(Modality::Fau, Arch::Tdec),
            BranchConfig::new(Modality::Tv, Arch::Fvtc),
        );
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"FUSION\"") && json.contains("\"TDEC\""));
        assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), cfg);
        let minimal: ModelConfig =
            serde_json::from_str(r#"{"kind":"FVTC_CNN","branches":[{"modality":"MFCC","arch":"FVTC"}]}"#).unwrap();
        assert_eq!(minimal.dilations, vec![1, 3, 7, 15]);
        assert_eq!(minimal.hidden_sizes(), vec![64, 8]);
    }
}
