//! Model assembly: embedding lookup, `L` stacked interaction layers with
//! layer-wise fusion and gated residuals, and the prediction head.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ExampleBatch, FeatureSchema};
use crate::error::{DlfError, Result};
use crate::naf::{self, AttentionRound, FusionMode, FusionParams, NafParams};
use crate::rli::{self, BilinearParams, DenseParams, Dropout, RliLayerParams};
use crate::rng;
use crate::tensor::{Gradients, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Component removals for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoGate,
    NoRli,
    NoNaf,
    NoRliNaf,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Full, Ablation::NoGate, Ablation::NoRli, Ablation::NoNaf, Ablation::NoRliNaf];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoGate => "no_gate",
            Ablation::NoRli => "no_rli",
            Ablation::NoNaf => "no_naf",
            Ablation::NoRliNaf => "no_rli_naf",
        }
    }

    pub fn uses_gate(self) -> bool {
        self != Ablation::NoGate
    }

    pub fn uses_rli(self) -> bool {
        !matches!(self, Ablation::NoRli | Ablation::NoRliNaf)
    }

    /// Whether every layer fuses; otherwise only the last one does.
    pub fn fuses_every_layer(self) -> bool {
        !matches!(self, Ablation::NoNaf | Ablation::NoRliNaf)
    }
}

impl std::str::FromStr for Ablation {
    type Err = DlfError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| DlfError::config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    pub layers: usize,
    /// Rank of the bilinear kernels.
    pub rank: usize,
    /// Gate floor.
    pub eps: f64,
    pub dropout: f64,
    pub fusion: FusionMode,
    pub attention_rounds: usize,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            layers: 3,
            rank: 32,
            eps: 0.01,
            dropout: 0.0,
            fusion: FusionMode::Naf,
            attention_rounds: 2,
            ablation: Ablation::Full,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.d < 2 {
            problems.push(format!("d = {} must be at least 2", self.d));
        }
        if !(1..=12).contains(&self.layers) {
            problems.push(format!("layers = {} must lie in 1..=12", self.layers));
        }
        if self.rank < 1 || self.rank > self.d {
            problems.push(format!("rank = {} must lie in 1..=d ({})", self.rank, self.d));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            problems.push(format!("eps = {} must be positive", self.eps));
        }
        if !(0.0..=0.9).contains(&self.dropout) {
            problems.push(format!("dropout = {} must lie in [0, 0.9]", self.dropout));
        }
        if self.attention_rounds < 1 {
            problems.push("attention_rounds must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DlfError::config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct LayerLayout {
    rli: RliLayerParams,
    /// `None` for layers that sum the three pathways instead of fusing them.
    fusion: Option<FusionParams>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    embedding: ParamId,
    layers: Vec<LayerLayout>,
    head_weight: ParamId,
    head_bias: ParamId,
}

type Make<'a> = dyn FnMut(&str, &[usize], Init) -> Result<ParamId> + 'a;

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Xavier,
    Zeros,
}

/// Declares every parameter in canonical order. `make` either creates or
/// looks up the named tensor.
fn declare(
    config: &ModelConfig,
    schema: &FeatureSchema,
    make: &mut Make<'_>,
) -> Result<Layout> {
    let d = config.d;
    let r = config.rank;
    let embedding = make("embedding", &[schema.total_vocab(), d], Init::Normal(1.0 / (d as f64).sqrt()))?;

    let dense = |make: &mut Make<'_>, name: &str, out: usize, inp: usize| {
        Ok::<_, DlfError>(DenseParams {
            weight: make(&format!("{name}.weight"), &[out, inp], Init::Xavier)?,
            bias: make(&format!("{name}.bias"), &[out], Init::Zeros)?,
        })
    };
    let bilinear = |make: &mut Make<'_>, name: &str| {
        Ok::<_, DlfError>(BilinearParams {
            inner: make(&format!("{name}.inner"), &[r, d], Init::Xavier)?,
            outer: make(&format!("{name}.outer"), &[d, d], Init::Xavier)?,
            bias: make(&format!("{name}.bias"), &[d], Init::Zeros)?,
        })
    };

    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let p = format!("layer{l}");
        let (low, low_dense) = if config.ablation.uses_rli() {
            (Some(bilinear(make, &format!("{p}.low"))?), None)
        } else {
            (None, Some(dense(make, &format!("{p}.low_dense"), d, d)?))
        };
        let high = bilinear(make, &format!("{p}.high"))?;
        let implicit = dense(make, &format!("{p}.implicit"), d, d)?;
        let gate = if config.ablation.uses_gate() { Some(make(&format!("{p}.gate"), &[d, d], Init::Xavier)?) } else { None };

        let fused = config.ablation.fuses_every_layer() || l + 1 == config.layers;
        let fusion = if fused {
            let f = format!("{p}.fusion");
            Some(match config.fusion {
                FusionMode::Naf | FusionMode::AttnPool => {
                    let mut rounds = Vec::with_capacity(config.attention_rounds);
                    for k in 0..config.attention_rounds {
                        let mut qkv = Vec::with_capacity(3);
                        let mut cross = Vec::with_capacity(3);
                        for block in ["low", "high", "implicit"] {
                            qkv.push(dense(make, &format!("{f}.round{k}.qkv_{block}"), 3 * d, d)?);
                            cross.push(dense(make, &format!("{f}.round{k}.cross_{block}"), d, 2 * d)?);
                        }
                        rounds.push(AttentionRound {
                            qkv: [qkv[0], qkv[1], qkv[2]],
                            cross: [cross[0], cross[1], cross[2]],
                        });
                    }
                    FusionParams::Naf(NafParams {
                        rounds,
                        fuse: dense(make, &format!("{f}.fuse"), d, 3 * d)?,
                        project: dense(make, &format!("{f}.project"), d, 4 * d)?,
                        self_attention: config.fusion == FusionMode::Naf,
                    })
                }
                FusionMode::ConcatLinear => FusionParams::ConcatLinear(dense(make, &format!("{f}.concat"), d, 3 * d)?),
                FusionMode::Mlp => FusionParams::Mlp {
                    hidden: dense(make, &format!("{f}.mlp_hidden"), 2 * d, 3 * d)?,
                    out: dense(make, &format!("{f}.mlp_out"), d, 2 * d)?,
                },
                FusionMode::GatePool => {
                    let mut g = Vec::with_capacity(3);
                    for block in ["low", "high", "implicit"] {
                        g.push(make(&format!("{f}.gate_{block}"), &[d], Init::Zeros)?);
                    }
                    FusionParams::GatePool([g[0], g[1], g[2]])
                }
            })
        } else {
            None
        };
        layers.push(LayerLayout { rli: RliLayerParams { low, low_dense, high, implicit, gate }, fusion });
    }
    let width = schema.n_fields() * d;
    let head_weight = make("head.weight", &[1, width], Init::Xavier)?;
    let head_bias = make("head.bias", &[1], Init::Zeros)?;
    Ok(Layout { embedding, layers, head_weight, head_bias })
}

fn init_tensor<T: Scalar>(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut rng = rng::stream(seed, "init", &[]);
    // one stream per parameter name so adding parameters never shifts others
    let mut rng = rng::stream(rng.random(), name, &[]);
    let data: Vec<T> = match init {
        Init::Zeros => vec![T::zero(); n],
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
        }
        Init::Xavier => {
            let (fan_out, fan_in) = (shape[0] as f64, shape[1..].iter().product::<usize>() as f64);
            let bound = (6.0 / (fan_in + fan_out)).sqrt();
            (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
        }
    };
    Tensor::new(shape, data).expect("shape matches generated length")
}

/// Training/evaluation switch plus the key of the dropout streams.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardMode {
    pub training: bool,
    pub seed: u64,
    pub step: u64,
}

impl ForwardMode {
    pub fn eval() -> Self {
        ForwardMode::default()
    }

    pub fn train(seed: u64, step: u64) -> Self {
        ForwardMode { training: true, seed, step }
    }
}

/// Tape handles captured during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    /// `E^(1) .. E^(L+1)`.
    pub states: Vec<Var>,
    /// Gate tensors `max(E W_Gate^T, eps)`, one per gated layer.
    pub gates: Vec<Var>,
    /// Pathway outputs per layer, before fusion.
    pub blocks: Vec<[Var; 3]>,
}

/// The full model: configuration, bound schema and parameters.
#[derive(Clone, Debug)]
pub struct DlfModel<T> {
    config: ModelConfig,
    schema: FeatureSchema,
    params: ParamStore<T>,
    layout: Layout,
    offsets: Vec<usize>,
}

impl<T: Scalar> DlfModel<T> {
    /// Fresh parameters, fully determined by `config.seed`.
    pub fn init(config: &ModelConfig, schema: &FeatureSchema) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        let mut params = ParamStore::new();
        let layout = declare(config, schema, &mut |name, shape, init| {
            params.insert(name, init_tensor(config.seed, name, shape, init))
        })?;
        Ok(DlfModel { config: config.clone(), schema: schema.clone(), params, layout, offsets: schema.offsets() })
    }

    /// Binds existing parameters, checking every expected name and shape.
    pub fn from_params(config: &ModelConfig, schema: &FeatureSchema, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        let mut expected = 0;
        let layout = declare(config, schema, &mut |name, shape, _| {
            expected += 1;
            let id = params.id(name).ok_or_else(|| DlfError::Format(format!("missing parameter {name}")))?;
            if params.get(id).shape() != shape {
                return Err(DlfError::Format(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    params.get(id).shape()
                )));
            }
            Ok(id)
        })?;
        if expected != params.len() {
            return Err(DlfError::Format(format!("expected {expected} parameters, found {}", params.len())));
        }
        Ok(DlfModel { config: config.clone(), schema: schema.clone(), params, layout, offsets: schema.offsets() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn embedding_id(&self) -> ParamId {
        self.layout.embedding
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> DlfModel<U> {
        DlfModel {
            config: self.config.clone(),
            schema: self.schema.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            offsets: self.offsets.clone(),
        }
    }

    fn global_ids(&self, batch: &ExampleBatch) -> Result<Vec<usize>> {
        let n = self.schema.n_fields();
        if batch.n_fields != n || batch.ids.len() != batch.len() * n {
            return Err(DlfError::shape(format!(
                "batch has {} fields per row, model expects {n}",
                batch.n_fields
            )));
        }
        batch
            .ids
            .iter()
            .enumerate()
            .map(|(pos, &id)| {
                let f = pos % n;
                let id = id as usize;
                if id >= self.schema.fields[f].vocab_size {
                    Err(DlfError::Index(format!(
                        "row {} field {:?}: id {id} outside vocabulary of {}",
                        pos / n,
                        self.schema.fields[f].name,
                        self.schema.fields[f].vocab_size
                    )))
                } else {
                    Ok(self.offsets[f] + id)
                }
            })
            .collect()
    }

    /// Records the forward pass and returns the `[B]` logits.
    pub fn forward_logits(
        &self,
        tape: &mut Tape<'_, T>,
        batch: &ExampleBatch,
        mode: ForwardMode,
        mut trace: Option<&mut Trace>,
    ) -> Result<Var> {
        let (b, n, d) = (batch.len(), self.schema.n_fields(), self.config.d);
        let ids = self.global_ids(batch)?;
        let table = tape.param(self.layout.embedding);
        let e1 = tape.gather(table, &ids, &[b, n])?;
        if let Some(t) = trace.as_deref_mut() {
            t.states.push(e1);
        }
        let mut state = e1;
        for (l, layer) in self.layout.layers.iter().enumerate() {
            let mut rng = rng::stream(mode.seed, "dropout", &[mode.step, l as u64]);
            let mut dropout = Dropout { rate: self.config.dropout, training: mode.training, rng: &mut rng };
            let blocks = rli::rli_layer(tape, e1, state, &layer.rli, &mut dropout)?.as_array();
            let z = match &layer.fusion {
                Some(f) => naf::fuse(tape, blocks, f)?,
                None => {
                    let s = tape.add(blocks[0], blocks[1])?;
                    tape.add(s, blocks[2])?
                }
            };
            state = match layer.rli.gate {
                Some(g) => {
                    let gate = tape.param(g);
                    let (next, g) = rli::gated_residual(tape, z, state, gate, self.config.eps)?;
                    if let Some(t) = trace.as_deref_mut() {
                        t.gates.push(g);
                    }
                    next
                }
                None => tape.add(z, state)?,
            };
            if let Some(t) = trace.as_deref_mut() {
                t.blocks.push(blocks);
                t.states.push(state);
            }
        }
        let flat = tape.reshape(state, &[b, n * d])?;
        let (w, bias) = (tape.param(self.layout.head_weight), tape.param(self.layout.head_bias));
        let logits = tape.linear(flat, w, Some(bias))?;
        tape.reshape(logits, &[b])
    }

    /// Click probabilities in evaluation mode.
    pub fn predict(&self, batch: &ExampleBatch) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new(&self.params);
        let logits = self.forward_logits(&mut tape, batch, ForwardMode::eval(), None)?;
        let probs = tape.sigmoid(logits);
        Ok(tape.value(probs).data().iter().map(|p| p.f64()).collect())
    }

    /// Mean BCE of the batch and its parameter gradients.
    pub fn loss_and_grads(&self, batch: &ExampleBatch, mode: ForwardMode) -> Result<(f64, Gradients<T>)> {
        let mut tape = Tape::new(&self.params);
        let logits = self.forward_logits(&mut tape, batch, mode, None)?;
        let labels: Vec<T> = batch.labels.iter().map(|&y| T::of(f64::from(y))).collect();
        let loss = tape.sigmoid_bce(logits, &labels)?;
        let value = tape.value(loss).data()[0].f64();
        let grads = tape.backward(loss)?.into_params();
        Ok((value, grads))
    }

    /// Mean BCE without gradients.
    pub fn loss(&self, batch: &ExampleBatch, mode: ForwardMode) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let logits = self.forward_logits(&mut tape, batch, mode, None)?;
        let labels: Vec<T> = batch.labels.iter().map(|&y| T::of(f64::from(y))).collect();
        let loss = tape.sigmoid_bce(logits, &labels)?;
        Ok(tape.value(loss).data()[0].f64())
    }
}

/// Mean binary cross-entropy of probabilities against labels.
pub fn bce_loss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    crate::metrics::clipped_bce(probs, labels)
}
