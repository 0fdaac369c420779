//! Training objective (log loss + L1 + entropy sparsity terms), the
//! model-agnostic trainer with minibatch Adam and early stopping, and the
//! gradient composition every model implements through [`CtrModel`].

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::EncodedDataset;
use crate::error::{Error, Result};
use crate::matrix::{Matrix, Scalar};
use crate::metrics;
use crate::model::{GradBuffer, KarseinModel, KarseinWorkspace};
use crate::optim::{adam_update, AdamState, ParamGrads};

/// `sum |w_ij|`.
pub fn l1_reg<F: Scalar>(w: &Matrix<F>) -> f64 {
    w.data().iter().map(|v| v.abs().to_f64_val()).sum()
}

/// Entropy of the L1-normalized magnitude distribution, `-sum p ln p` with
/// `p_ij = |w_ij| / sum |w|`. Zero-magnitude entries contribute nothing; an
/// all-zero matrix returns 0 by convention.
pub fn entropy_reg<F: Scalar>(w: &Matrix<F>) -> f64 {
    let total = l1_reg(w);
    if total <= 0.0 {
        return 0.0;
    }
    let mut h = 0.0;
    for v in w.data() {
        let p = v.abs().to_f64_val() / total;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

/// Entries with |w| below this are treated as exactly zero by the entropy
/// subgradient (which would otherwise blow up as -ln p).
const ENTROPY_ZERO: f64 = 1e-12;

/// Accumulates `lambda1 * d‖W‖₁/dw + lambda2 * dH(W)/dw` into `grad`.
///
/// For the entropy term, with `S = sum |w|`, `p_k = |w_k|/S` and `H` the
/// entropy, `dH/dw_k = sign(w_k) * (-ln p_k - H) / S`; the subgradient at
/// `w = 0` is defined as 0 for both terms.
pub fn reg_grad_accum<F: Scalar>(w: &Matrix<F>, lambda1: f64, lambda2: f64, grad: &mut Matrix<F>) {
    let total = l1_reg(w);
    let h = entropy_reg(w);
    for (g, v) in grad.data_mut().iter_mut().zip(w.data()) {
        let vv = v.to_f64_val();
        if vv.abs() <= ENTROPY_ZERO {
            continue;
        }
        let sign = if vv > 0.0 { 1.0 } else { -1.0 };
        let mut d = lambda1 * sign;
        if lambda2 != 0.0 && total > 0.0 {
            let p = vv.abs() / total;
            d += lambda2 * sign * (-p.ln() - h) / total;
        }
        *g += F::from_f64(d);
    }
}

/// A model trainable on encoded CTR records.
///
/// Implementations own their workspaces; the trainer only sees parameter
/// slots, prediction, and gradient accumulation.
pub trait CtrModel<F: Scalar>: ParamGrads<F> + Send + Sync {
    /// Appends `P(y=1)` for each record index to `out`.
    fn predict_records(&self, data: &EncodedDataset, idx: &[u32], out: &mut Vec<f64>) -> Result<()>;

    /// Forward + backward over the given records: accumulates
    /// `scale * d(sum of per-record log losses)/dθ` into `grads` and returns
    /// the sum of per-record log-loss terms (predictions clamped).
    fn train_chunk(
        &self,
        data: &EncodedDataset,
        idx: &[u32],
        scale: f64,
        grads: &mut GradBuffer<F>,
    ) -> Result<f64>;

    /// Parameter indices the L1 + entropy sparsity terms apply to.
    fn regularized_params(&self) -> Vec<usize>;

    /// Zeroes gradient entries of frozen coordinates. Default: none.
    fn mask_grads(&self, _grads: &mut GradBuffer<F>) {}
}

impl<F: Scalar> CtrModel<F> for KarseinModel<F> {
    fn predict_records(&self, data: &EncodedDataset, idx: &[u32], out: &mut Vec<f64>) -> Result<()> {
        let mut ws = KarseinWorkspace::default();
        for &i in idx {
            let head = self
                .forward_record(data.record(i), &mut ws, false)
                .map_err(|e| Error::non_finite(format!("record {i}: {e}")))?;
            out.push(head.y.to_f64_val());
        }
        Ok(())
    }

    fn train_chunk(
        &self,
        data: &EncodedDataset,
        idx: &[u32],
        scale: f64,
        grads: &mut GradBuffer<F>,
    ) -> Result<f64> {
        let mut ws = KarseinWorkspace::default();
        let mut loss_sum = 0.0f64;
        for &i in idx {
            let rec = data.record(i);
            let head = self
                .forward_record(rec, &mut ws, true)
                .map_err(|e| Error::non_finite(format!("record {i}: {e}")))?;
            let y = data.labels[i as usize];
            let yhat = head.y.to_f64_val();
            let (term, dl) = if y == 1 {
                (-yhat.ln(), -1.0 / yhat)
            } else {
                (-(1.0 - yhat).ln(), 1.0 / (1.0 - yhat))
            };
            loss_sum += term;
            self.backward_record(rec, &head, F::from_f64(scale * dl), &mut ws, grads)?;
        }
        Ok(loss_sum)
    }

    fn regularized_params(&self) -> Vec<usize> {
        self.combination_weight_indices()
    }

    fn mask_grads(&self, grads: &mut GradBuffer<F>) {
        self.apply_grad_masks(grads);
    }
}

/// `L_total = mean log loss + sum_L lambda1(|W_b|_1 + |W_s|_1)
///  + sum_L lambda2(H(W_b) + H(W_s))` over the given records.
pub fn total_loss<F: Scalar, M: CtrModel<F>>(
    model: &M,
    data: &EncodedDataset,
    idx: &[u32],
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::data("total_loss over empty batch".to_string()));
    }
    let mut preds = Vec::with_capacity(idx.len());
    model.predict_records(data, idx, &mut preds)?;
    let labels: Vec<u8> = idx.iter().map(|&i| data.labels[i as usize]).collect();
    let mut loss = metrics::logloss(&preds, &labels)?;
    for p in model.regularized_params() {
        let w = &model.param(p).value;
        loss += lambda1 * l1_reg(w) + lambda2 * entropy_reg(w);
    }
    Ok(loss)
}

/// Exact gradients of [`total_loss`] written into the model's grad slots.
pub fn backward<F: Scalar, M: CtrModel<F>>(
    model: &mut M,
    data: &EncodedDataset,
    idx: &[u32],
    lambda1: f64,
    lambda2: f64,
) -> Result<()> {
    let mut grads = GradBuffer::zeros_like(model);
    let scale = 1.0 / idx.len() as f64;
    model.train_chunk(data, idx, scale, &mut grads)?;
    for p in model.regularized_params() {
        let w = model.param(p).value.clone();
        reg_grad_accum(&w, lambda1, lambda2, &mut grads.mats[p]);
    }
    model.mask_grads(&mut grads);
    for i in 0..model.param_count() {
        if !grads.mats[i].all_finite() {
            return Err(Error::non_finite(format!(
                "gradient of '{}' over batch of {} records",
                model.param_name(i),
                idx.len()
            )));
        }
        let slot = model.param_mut(i);
        slot.zero_grad();
        slot.grad.add_scaled(&grads.mats[i], F::one());
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    /// worker threads for batch-level data parallelism; 0 = KARSEIN_THREADS
    /// env var, falling back to the machine's available parallelism
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 512,
            max_epochs: 20,
            patience: 2,
            lambda1: 1e-2,
            lambda2: 1e-4,
            seed: 42,
            threads: 0,
        }
    }
}

pub fn effective_threads(configured: usize) -> usize {
    if configured > 0 {
        return configured;
    }
    if let Ok(s) = std::env::var("KARSEIN_THREADS") {
        if let Ok(n) = s.parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub val_logloss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRow>,
    pub best_epoch: Option<usize>,
    pub best_val_auc: f64,
    pub stopping_reason: String,
    pub best_checkpoint: Option<String>,
    pub test_auc: Option<f64>,
    pub test_logloss: Option<f64>,
    pub wall_seconds: f64,
}

/// Metrics CSV header matching [`write_metrics_row`].
pub const METRICS_CSV_HEADER: &str = "epoch,train_loss,val_auc,val_logloss,seconds";

pub fn metrics_csv_row(row: &EpochRow) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.3}",
        row.epoch, row.train_loss, row.val_auc, row.val_logloss, row.seconds
    )
}

/// Chunked parallel prediction over a split (chunk order preserved).
pub fn predict_split<F: Scalar, M: CtrModel<F>>(
    model: &M,
    data: &EncodedDataset,
    idx: &[u32],
    threads: usize,
) -> Result<Vec<f64>> {
    if idx.is_empty() {
        return Ok(Vec::new());
    }
    let threads = threads.max(1).min(idx.len());
    if threads == 1 {
        let mut out = Vec::with_capacity(idx.len());
        model.predict_records(data, idx, &mut out)?;
        return Ok(out);
    }
    let chunk_size = idx.len().div_ceil(threads);
    let chunks: Vec<&[u32]> = idx.chunks(chunk_size).collect();
    let mut parts: Vec<Result<Vec<f64>>> = Vec::with_capacity(chunks.len());
    for _ in 0..chunks.len() {
        parts.push(Ok(Vec::new()));
    }
    std::thread::scope(|s| {
        for (chunk, part) in chunks.iter().zip(parts.iter_mut()) {
            s.spawn(move || {
                let mut out = Vec::with_capacity(chunk.len());
                *part = model.predict_records(data, chunk, &mut out).map(|_| out);
            });
        }
    });
    let mut out = Vec::with_capacity(idx.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// AUC and log loss of `model` on the given split.
pub fn evaluate<F: Scalar, M: CtrModel<F>>(
    model: &M,
    data: &EncodedDataset,
    idx: &[u32],
    threads: usize,
) -> Result<(f64, f64)> {
    let preds = predict_split(model, data, idx, threads)?;
    let labels: Vec<u8> = idx.iter().map(|&i| data.labels[i as usize]).collect();
    Ok((metrics::auc(&preds, &labels)?, metrics::logloss(&preds, &labels)?))
}

/// Minibatch Adam on the total objective with per-epoch validation and
/// early stopping on validation AUC. The best-validation parameters are
/// restored into the model before returning.
pub fn train<F: Scalar, M: CtrModel<F>>(
    model: &mut M,
    data: &EncodedDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<TrainReport> {
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1".to_string()));
    }
    if cfg.lambda1 < 0.0 || cfg.lambda2 < 0.0 {
        return Err(Error::config("regularization weights must be >= 0".to_string()));
    }
    let threads = effective_threads(cfg.threads);
    let started = Instant::now();

    let mut adam: Vec<AdamState<F>> = (0..model.param_count())
        .map(|i| {
            let p = &model.param(i).value;
            AdamState::new(p.rows(), p.cols(), cfg.lr)
        })
        .collect();
    let reg_params = model.regularized_params();

    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: None,
        best_val_auc: f64::NEG_INFINITY,
        stopping_reason: "max_epochs".to_string(),
        best_checkpoint: None,
        test_auc: None,
        test_logloss: None,
        wall_seconds: 0.0,
    };
    let mut best_params: Option<Vec<Matrix<F>>> = None;
    let mut since_best = 0usize;

    let mut merged = GradBuffer::zeros_like(model);

    'epochs: for epoch in 0..cfg.max_epochs {
        let epoch_start = Instant::now();
        let order = data.epoch_order(&data.train_idx, cfg.seed, epoch as u64);
        let mut loss_acc = 0.0f64;
        let mut loss_batches = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let n_workers = threads.min(batch.len());
            merged.zero();
            let mut pred_loss_sum = 0.0f64;

            if n_workers <= 1 {
                pred_loss_sum = model.train_chunk(data, batch, scale, &mut merged)?;
            } else {
                let chunk_size = batch.len().div_ceil(n_workers);
                let chunks: Vec<&[u32]> = batch.chunks(chunk_size).collect();
                let mut results: Vec<Result<(GradBuffer<F>, f64)>> = Vec::new();
                for _ in 0..chunks.len() {
                    results.push(Err(Error::config("worker did not run".to_string())));
                }
                let model_ref: &M = model;
                std::thread::scope(|s| {
                    for (chunk, slot) in chunks.iter().zip(results.iter_mut()) {
                        s.spawn(move || {
                            let mut buf = GradBuffer::zeros_like(model_ref);
                            *slot = model_ref
                                .train_chunk(data, chunk, scale, &mut buf)
                                .map(|l| (buf, l));
                        });
                    }
                });
                // serialized accumulation in chunk order
                for r in results {
                    let (buf, l) = r?;
                    merged.add(&buf);
                    pred_loss_sum += l;
                }
            }

            let mut batch_loss = pred_loss_sum * scale;
            for &p in &reg_params {
                let w = &model.param(p).value;
                batch_loss += cfg.lambda1 * l1_reg(w) + cfg.lambda2 * entropy_reg(w);
            }
            if !batch_loss.is_finite() {
                restore_params(model, &best_params);
                report.stopping_reason = "diverged".to_string();
                report.wall_seconds = started.elapsed().as_secs_f64();
                return Ok(report);
            }

            for &p in &reg_params {
                let w = model.param(p).value.clone();
                reg_grad_accum(&w, cfg.lambda1, cfg.lambda2, &mut merged.mats[p]);
            }
            model.mask_grads(&mut merged);

            for i in 0..model.param_count() {
                let name = model.param_name(i);
                {
                    let slot = model.param_mut(i);
                    slot.zero_grad();
                }
                model.param_mut(i).grad.add_scaled(&merged.mats[i], F::one());
                let slot = model.param_mut(i);
                if let Err(e) = adam_update(&name, slot, &mut adam[i]) {
                    // non-finite gradient: abort with the last good params
                    restore_params(model, &best_params);
                    report.stopping_reason = format!("diverged: {e}");
                    report.wall_seconds = started.elapsed().as_secs_f64();
                    return Ok(report);
                }
            }

            loss_acc += batch_loss;
            loss_batches += 1;
        }

        let (val_auc, val_logloss) = evaluate(model, data, &data.val_idx, threads)?;
        let row = EpochRow {
            epoch,
            train_loss: loss_acc / loss_batches.max(1) as f64,
            val_auc,
            val_logloss,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        report.epochs.push(row);

        if val_auc > report.best_val_auc {
            report.best_val_auc = val_auc;
            report.best_epoch = Some(epoch);
            best_params = Some(snapshot_params(model));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                report.stopping_reason = "early_stop".to_string();
                break 'epochs;
            }
        }
    }

    restore_params(model, &best_params);
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

fn snapshot_params<F: Scalar, M: ParamGrads<F>>(model: &M) -> Vec<Matrix<F>> {
    (0..model.param_count()).map(|i| model.param(i).value.clone()).collect()
}

fn restore_params<F: Scalar, M: ParamGrads<F>>(model: &mut M, params: &Option<Vec<Matrix<F>>>) {
    if let Some(params) = params {
        for (i, p) in params.iter().enumerate() {
            let slot = model.param_mut(i);
            slot.value.data_mut().copy_from_slice(p.data());
        }
    }
}
