//! Adam optimization, the epoch loop with early stopping, and checkpoints.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, EncodedData, FeatureSchema, Splits};
use crate::error::{DlfError, Result};
use crate::metrics::EvalReport;
use crate::model::{DlfModel, ForwardMode, ModelConfig};
use crate::tensor::{Gradients, ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `l2 * theta` before the moment updates.
    pub l2: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, l2: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, l2 }
    }
}

/// First and second moments per parameter plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, _, p)| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        AdamState { m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, index: usize) -> &Tensor<T> {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &Tensor<T> {
        &self.v[index]
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(DlfError::Contract(format!(
            "optimizer state tracks {} parameters, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    let ids: Vec<_> = params.ids().collect();
    for &id in &ids {
        match grads.get(id) {
            Some(g) if g.shape() == params.get(id).shape() => {}
            Some(g) => {
                return Err(DlfError::Contract(format!(
                    "gradient for {} has shape {:?}, parameter has {:?}",
                    params.name(id),
                    g.shape(),
                    params.get(id).shape()
                )))
            }
            None => return Err(DlfError::Contract(format!("missing gradient for parameter {}", params.name(id)))),
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for id in ids {
        let g = grads.get(id).expect("checked above").data();
        let i = id.index();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let theta = params.get_mut(id).data_mut();
        for k in 0..theta.len() {
            let th = theta[k].f64();
            let gk = g[k].f64() + cfg.l2 * th;
            let mk = b1 * m[k].f64() + (1.0 - b1) * gk;
            let vk = b2 * v[k].f64() + (1.0 - b2) * gk * gk;
            m[k] = T::of(mk);
            v[k] = T::of(vk);
            theta[k] = T::of(th - cfg.lr * (mk / c1) / ((vk / c2).sqrt() + cfg.eps));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub l2: f64,
    pub batch_size: usize,
    /// Rows per forward/backward pass; gradients of a batch are accumulated
    /// over its micro-batches.
    pub micro_batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub repeats: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-3, l2: 0.0, batch_size: 4096, micro_batch: 1024, epochs: 20, patience: 2, seed: 0, repeats: 1 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr = {} must be positive", self.lr));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            problems.push(format!("l2 = {} must be non-negative", self.l2));
        }
        if self.batch_size < 1 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.micro_batch < 1 {
            problems.push("micro_batch must be at least 1".to_string());
        }
        if self.epochs < 1 {
            problems.push("epochs must be at least 1".to_string());
        }
        if self.patience < 1 {
            problems.push("patience must be at least 1".to_string());
        }
        if self.repeats < 1 {
            problems.push("repeats must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DlfError::config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_auc: f64,
    pub val_logloss: f64,
    pub seconds: f64,
}

/// Stops after `patience` epochs without an AUC gain above `MIN_GAIN`.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub const MIN_GAIN: f64 = 1e-6;

    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::NEG_INFINITY, stale: 0 }
    }

    /// Returns `(improved, stop)`.
    pub fn update(&mut self, auc: f64) -> (bool, bool) {
        if auc > self.best + Self::MIN_GAIN {
            self.best = auc;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Saved model: configuration, bound schema and `f32` parameters.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub schema_hash: u64,
    pub config: ModelConfig,
    pub schema: FeatureSchema,
    pub params: ParamStore<f32>,
    pub best_val_auc: f64,
    /// 1-based epoch the parameters come from.
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    schema: FeatureSchema,
    /// Absent for models that were never validated.
    best_val_auc: Option<f64>,
    epoch: usize,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DLFC";
const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_model(model: &DlfModel<f32>, schema_hash: u64, best_val_auc: f64, epoch: usize) -> Self {
        Checkpoint {
            schema_hash,
            config: model.config().clone(),
            schema: model.schema().clone(),
            params: model.params().clone(),
            best_val_auc,
            epoch,
        }
    }

    pub fn model(&self) -> Result<DlfModel<f32>> {
        DlfModel::from_params(&self.config, &self.schema, self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.schema_hash.to_le_bytes());
        let header = CheckpointHeader {
            model: self.config.clone(),
            schema: self.schema.clone(),
            best_val_auc: self.best_val_auc.is_finite().then_some(self.best_val_auc),
            epoch: self.epoch,
        };
        let json = serde_json::to_vec(&header).map_err(|e| DlfError::Format(e.to_string()))?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, name, t) in self.params.iter() {
            let name_len = u16::try_from(name.len()).map_err(|_| DlfError::Format(format!("parameter name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &dim in t.shape() {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(DlfError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(DlfError::Format(format!("unsupported checkpoint version {version}")));
        }
        let schema_hash = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let json_len = r.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(json_len)?).map_err(|e| DlfError::Format(format!("checkpoint header: {e}")))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| DlfError::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(Reader::truncated)?;
            let raw = r.take(n.checked_mul(4).ok_or_else(Reader::truncated)?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            params.insert(name, Tensor::new(&shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(DlfError::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            schema_hash,
            config: header.model,
            schema: header.schema,
            params,
            best_val_auc: header.best_val_auc.unwrap_or(f64::NAN),
            epoch: header.epoch,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn truncated() -> DlfError {
        DlfError::Format("truncated checkpoint".into())
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(Self::truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&checkpoint.to_bytes()?)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        DlfError::Format(msg) => DlfError::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Loads a checkpoint and rejects it unless it was trained on `expected_hash`.
pub fn load_checkpoint_for(path: &Path, expected_hash: u64) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.schema_hash != expected_hash {
        return Err(DlfError::SchemaMismatch { expected: expected_hash, found: ckpt.schema_hash });
    }
    Ok(ckpt)
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DlfError::Format(e.to_string()))?;
    for rec in history {
        w.serialize(rec).map_err(|e| DlfError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Evaluation-mode probabilities for every row, in order.
pub fn predict_all<T: Scalar>(model: &DlfModel<T>, data: &EncodedData, batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    for batch in data::batches(data, batch_size.max(1), false, 0, 0)? {
        out.extend(model.predict(&batch)?);
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(model: &DlfModel<T>, data: &EncodedData, batch_size: usize) -> Result<EvalReport> {
    let probs = predict_all(model, data, batch_size)?;
    let labels: Vec<f64> = data.labels().iter().map(|&y| f64::from(y)).collect();
    EvalReport::compute(&probs, &labels)
}

/// Mean loss and gradients of one batch, accumulated over micro-batches.
pub fn batch_gradients<T: Scalar>(
    model: &DlfModel<T>,
    batch: &data::ExampleBatch,
    micro_batch: usize,
    mode: ForwardMode,
) -> Result<(f64, Gradients<T>)> {
    let n = batch.len() as f64;
    let mut total = Gradients::empty(model.params().len());
    let mut loss = 0.0;
    for (k, chunk) in batch.chunks(micro_batch.max(1)).enumerate() {
        let w = chunk.len() as f64 / n;
        let mode = ForwardMode { step: mode.step.wrapping_mul(1 << 16).wrapping_add(k as u64), ..mode };
        let (l, g) = model.loss_and_grads(&chunk, mode)?;
        loss += w * l;
        total.accumulate(&g, T::of(w));
    }
    Ok((loss, total))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best: Checkpoint,
}

fn divergence<T: Scalar>(model: &DlfModel<T>, epoch: usize, batch: usize, loss: f64) -> DlfError {
    let mut norms: Vec<(String, f64)> = model
        .params()
        .iter()
        .map(|(_, name, t)| (name.to_string(), t.frobenius_norm()))
        .collect();
    norms.sort_by(|a, b| b.1.total_cmp(&a.1));
    let snapshot: Vec<String> = norms.iter().take(5).map(|(n, v)| format!("{n}={v:.4e}")).collect();
    DlfError::NonFinite(format!(
        "loss {loss} at epoch {epoch}, batch {batch}; largest parameter norms: {}",
        snapshot.join(", ")
    ))
}

/// Trains in place. `model` ends up holding the best-validation parameters.
pub fn train(
    model: &mut DlfModel<f32>,
    splits: &Splits,
    cfg: &TrainConfig,
    schema_hash: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    splits.train.validate(model.schema())?;
    splits.validation.validate(model.schema())?;
    let adam = AdamConfig::new(cfg.lr, cfg.l2);
    let mut state = AdamState::new(model.params());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let (mut loss_sum, mut rows) = (0.0, 0usize);
        for (b, batch) in data::batches(&splits.train, cfg.batch_size, true, cfg.seed, epoch as u64)?.enumerate() {
            let (loss, grads) = batch_gradients(model, &batch, cfg.micro_batch, ForwardMode::train(cfg.seed, step))?;
            if !loss.is_finite() {
                return Err(divergence(model, epoch, b + 1, loss));
            }
            adam_step(model.params_mut(), &grads, &mut state, &adam)?;
            loss_sum += loss * batch.len() as f64;
            rows += batch.len();
            step += 1;
        }
        let report = evaluate(model, &splits.validation, cfg.batch_size)?;
        if !report.auc.is_finite() || !report.logloss.is_finite() {
            return Err(divergence(model, epoch, 0, report.logloss));
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / rows.max(1) as f64,
            val_auc: report.auc,
            val_logloss: report.logloss,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);
        let (improved, stop) = stopper.update(report.auc);
        if improved {
            best = Some(Checkpoint::from_model(model, schema_hash, report.auc, epoch));
        }
        if stop {
            break;
        }
    }
    let best = best.ok_or_else(|| DlfError::Numeric("validation AUC never improved".into()))?;
    *model.params_mut() = best.params.clone();
    Ok(TrainOutcome { history, best })
}
