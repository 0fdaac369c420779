//! Reference networks: a vanilla KAN with one learnable activation per edge,
//! a plain MLP, the synthetic multiplicative-fit experiments, and
//! connection-magnitude pruning of trained KANs.

use serde::{Deserialize, Serialize};

use crate::data::EncodedDataset;
use crate::error::{Error, Result};
use crate::matrix::{sigmoid, silu_grad_from_sigmoid, Matrix, Scalar};
use crate::model::{EmbeddingTable, GradBuffer, PRED_EPS};
use crate::optim::{adam_update, AdamState, GradSlot, ParamGrads};
use crate::spline::{BSplineBasis, EdgeActivation};
use crate::training::CtrModel;

/// Default spline window for the reference nets; wider than the embedding
/// domain because hidden sums range further than raw inputs.
pub const KAN_DOMAIN: f64 = 3.0;

/// One KAN layer: an `out_dim x in_dim` grid of edge activations sharing a
/// basis. Edge `(j, i)` holds scale `w_phi[j,i]` and the coefficient row
/// `j*in_dim + i`.
#[derive(Debug, Clone)]
pub struct KanLayer<F: Scalar> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub basis: BSplineBasis,
    pub w_phi: GradSlot<F>,
    pub coeffs: GradSlot<F>,
}

impl<F: Scalar> KanLayer<F> {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        basis: BSplineBasis,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let nb = basis.num_basis();
        let coeff_std = 0.1 / (nb as f64).sqrt();
        let mut w_phi = Matrix::zeros(out_dim, in_dim);
        w_phi.fill(F::one());
        KanLayer {
            in_dim,
            out_dim,
            basis,
            w_phi: GradSlot::new(w_phi),
            coeffs: GradSlot::new(crate::rng::normal_matrix(rng, out_dim * in_dim, nb, coeff_std)),
        }
    }

    /// Borrowed view of edge `(out, in)` as an [`EdgeActivation`].
    pub fn edge(&self, out: usize, input: usize) -> EdgeActivation<F> {
        EdgeActivation {
            w_phi: self.w_phi.value.get(out, input),
            coeffs: self.coeffs.value.row(out * self.in_dim + input).to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct KanLayerTrace<F: Scalar> {
    x_in: Vec<F>,
    spans: Vec<u32>,
    bvals: Vec<F>,
    bgrads: Vec<F>,
    sigma: Vec<F>,
    silu_x: Vec<F>,
    out: Vec<F>,
    g_in: Vec<F>,
}

const OUT_OF_DOMAIN: u32 = u32::MAX;

/// Stacked KAN layers; the final layer has a single output neuron.
#[derive(Debug, Clone)]
pub struct KanNetwork<F: Scalar> {
    pub layers: Vec<KanLayer<F>>,
    pub widths: Vec<usize>,
}

/// Reusable per-sample buffers.
#[derive(Debug, Clone, Default)]
pub struct KanWorkspace<F: Scalar> {
    layers: Vec<KanLayerTrace<F>>,
}

impl<F: Scalar> KanNetwork<F> {
    /// Builds a network with the given widths; `widths[0]` is the input
    /// dimension and the final width must be 1 for scalar heads.
    pub fn new(widths: &[usize], basis: &BSplineBasis, seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("need at least input and output widths".to_string()));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::config("zero-width KAN layer".to_string()));
        }
        let mut rng = crate::rng::seeded(seed, 2);
        let layers = (0..widths.len() - 1)
            .map(|l| KanLayer::new(widths[l], widths[l + 1], basis.clone(), &mut rng))
            .collect();
        Ok(KanNetwork {
            layers,
            widths: widths.to_vec(),
        })
    }

    /// Forward pass caching everything backward needs.
    pub fn forward_trace(
        &self,
        x: &[F],
        ws: &mut KanWorkspace<F>,
        want_grads: bool,
    ) -> Result<F> {
        if x.len() != self.widths[0] {
            return Err(Error::config(format!(
                "input length {} does not match width {}",
                x.len(),
                self.widths[0]
            )));
        }
        ws.layers.resize_with(self.layers.len(), KanLayerTrace::default);
        let mut cur: Vec<F> = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let trace = &mut ws.layers[l];
            let k1 = layer.basis.order() + 1;
            let n_in = layer.in_dim;
            trace.x_in.clear();
            trace.x_in.extend_from_slice(&cur);
            trace.spans.resize(n_in, 0);
            trace.bvals.resize(n_in * k1, F::zero());
            trace.bgrads.resize(n_in * k1, F::zero());
            trace.sigma.resize(n_in, F::zero());
            trace.silu_x.resize(n_in, F::zero());
            trace.g_in.resize(n_in, F::zero());

            for i in 0..n_in {
                let xi = cur[i];
                let s = sigmoid(xi);
                trace.sigma[i] = s;
                trace.silu_x[i] = xi * s;
                let xf = xi.to_f64_val();
                if want_grads {
                    match layer.basis.eval_span_with_grad(xf) {
                        Some((vals, grads)) => {
                            trace.spans[i] = vals.start as u32;
                            for t in 0..k1 {
                                trace.bvals[i * k1 + t] = F::from_f64(vals.values[t]);
                                trace.bgrads[i * k1 + t] = F::from_f64(grads.values[t]);
                            }
                        }
                        None => trace.spans[i] = OUT_OF_DOMAIN,
                    }
                } else {
                    match layer.basis.eval_span(xf) {
                        Some(vals) => {
                            trace.spans[i] = vals.start as u32;
                            for t in 0..k1 {
                                trace.bvals[i * k1 + t] = F::from_f64(vals.values[t]);
                            }
                        }
                        None => trace.spans[i] = OUT_OF_DOMAIN,
                    }
                }
            }

            let mut out = vec![F::zero(); layer.out_dim];
            let nb = layer.basis.num_basis();
            for (j, out_j) in out.iter_mut().enumerate() {
                let mut acc = F::zero();
                for i in 0..n_in {
                    let w = layer.w_phi.value.get(j, i);
                    let mut b = F::zero();
                    if trace.spans[i] != OUT_OF_DOMAIN {
                        let start = trace.spans[i] as usize;
                        let c_row = layer.coeffs.value.row(j * n_in + i);
                        for t in 0..k1 {
                            b += c_row[start + t] * trace.bvals[i * k1 + t];
                        }
                    }
                    acc += w * (b + trace.silu_x[i]);
                }
                *out_j = acc;
                let _ = nb;
            }
            trace.out.clear();
            trace.out.extend_from_slice(&out);
            cur = out;
        }
        Ok(cur[0])
    }

    /// Convenience scalar forward for a fresh workspace.
    pub fn forward(&self, x: &[F]) -> Result<F> {
        let mut ws = KanWorkspace::default();
        self.forward_trace(x, &mut ws, false)
    }

    /// Backward from `d loss / d out` (scalar head), accumulating parameter
    /// gradients into `grads` (layer order: w_phi then coeffs per layer,
    /// starting at `base`). Returns nothing; `ws.layers[0].g_in` holds the
    /// input gradient afterwards.
    pub fn backward_trace(
        &self,
        ws: &mut KanWorkspace<F>,
        dl_dout: F,
        grads: &mut [Matrix<F>],
        base: usize,
    ) {
        let mut g_out: Vec<F> = vec![dl_dout];
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let trace = &mut ws.layers[l];
            let k1 = layer.basis.order() + 1;
            let n_in = layer.in_dim;
            let gw = &mut grads[base + 2 * l];
            for g in trace.g_in.iter_mut() {
                *g = F::zero();
            }
            for (j, &gj) in g_out.iter().enumerate() {
                for i in 0..n_in {
                    let w = layer.w_phi.value.get(j, i);
                    let row = j * n_in + i;
                    let mut b = F::zero();
                    let mut db = F::zero();
                    if trace.spans[i] != OUT_OF_DOMAIN {
                        let start = trace.spans[i] as usize;
                        let c_row = layer.coeffs.value.row(row);
                        for t in 0..k1 {
                            b += c_row[start + t] * trace.bvals[i * k1 + t];
                            db += c_row[start + t] * trace.bgrads[i * k1 + t];
                        }
                    }
                    gw.set(j, i, gw.get(j, i) + gj * (b + trace.silu_x[i]));
                    let silu_d = silu_grad_from_sigmoid(trace.x_in[i], trace.sigma[i]);
                    trace.g_in[i] += gj * w * (db + silu_d);
                }
            }
            // coefficient gradients in a second pass (separate buffer borrow)
            let gc = &mut grads[base + 2 * l + 1];
            for (j, &gj) in g_out.iter().enumerate() {
                for i in 0..n_in {
                    if trace.spans[i] == OUT_OF_DOMAIN {
                        continue;
                    }
                    let w = layer.w_phi.value.get(j, i);
                    let start = trace.spans[i] as usize;
                    let row = j * n_in + i;
                    let gc_base = row * gc.cols();
                    for t in 0..k1 {
                        gc.data_mut()[gc_base + start + t] += gj * w * trace.bvals[i * k1 + t];
                    }
                }
            }
            g_out = trace.g_in.clone();
        }
    }
}

impl<F: Scalar> ParamGrads<F> for KanNetwork<F> {
    fn param_count(&self) -> usize {
        2 * self.layers.len()
    }

    fn param_name(&self, idx: usize) -> String {
        let part = if idx % 2 == 0 { "w_phi" } else { "coeffs" };
        format!("layer.{}.{}", idx / 2, part)
    }

    fn param(&self, idx: usize) -> &GradSlot<F> {
        let layer = &self.layers[idx / 2];
        if idx % 2 == 0 {
            &layer.w_phi
        } else {
            &layer.coeffs
        }
    }

    fn param_mut(&mut self, idx: usize) -> &mut GradSlot<F> {
        let layer = &mut self.layers[idx / 2];
        if idx % 2 == 0 {
            &mut layer.w_phi
        } else {
            &mut layer.coeffs
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic multiplicative-relationship fits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTarget {
    ASquared,
    BSquared,
    Ab,
}

impl SyntheticTarget {
    pub fn eval(self, a: f64, b: f64) -> f64 {
        match self {
            SyntheticTarget::ASquared => a * a,
            SyntheticTarget::BSquared => b * b,
            SyntheticTarget::Ab => a * b,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SyntheticTarget::ASquared => "a^2",
            SyntheticTarget::BSquared => "b^2",
            SyntheticTarget::Ab => "ab",
        }
    }
}

/// Outcome of one synthetic fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticRun {
    pub target: String,
    pub widths: Vec<usize>,
    pub reg: f64,
    pub lr: f64,
    pub seed: u64,
    #[serde(rename = "steps_to_rmse_0.05")]
    pub steps_to_target: StepsOutcome,
    pub final_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepsOutcome {
    Converged(usize),
    Failed(String),
}

impl StepsOutcome {
    pub fn converged(&self) -> Option<usize> {
        match self {
            StepsOutcome::Converged(s) => Some(*s),
            StepsOutcome::Failed(_) => None,
        }
    }
}

pub const SYNTHETIC_RMSE_TARGET: f64 = 0.05;

/// RMSE of the network against the target on a fixed 64x32 lattice.
fn grid_rmse<F: Scalar>(
    net: &KanNetwork<F>,
    target: SyntheticTarget,
    ws: &mut KanWorkspace<F>,
) -> Result<f64> {
    let (na, nb) = (64usize, 32usize);
    let mut se = 0.0f64;
    for ia in 0..na {
        let a = -1.0 + 2.0 * (ia as f64 + 0.5) / na as f64;
        for ib in 0..nb {
            let b = -1.0 + 2.0 * (ib as f64 + 0.5) / nb as f64;
            let x = [F::from_f64(a), F::from_f64(b)];
            let pred = net.forward_trace(&x, ws, false)?.to_f64_val();
            let err = pred - target.eval(a, b);
            se += err * err;
        }
    }
    Ok((se / (na * nb) as f64).sqrt())
}

/// Trains a KAN on one synthetic target with Adam and reports the first
/// optimizer step at which the held-out RMSE reaches 0.05.
///
/// Protocol: 10,000 fresh uniform samples per epoch, minibatch 256,
/// `reg` applied as both the L1 and entropy weight on the `w_phi` matrices.
/// Failure to converge within `max_steps` is a valid outcome.
pub fn fit_synthetic(
    target: SyntheticTarget,
    widths: &[usize],
    reg: f64,
    lr: f64,
    max_steps: usize,
    seed: u64,
) -> Result<SyntheticRun> {
    if widths.first() != Some(&2) || widths.last() != Some(&1) {
        return Err(Error::config(format!(
            "synthetic fits use 2 inputs and 1 output, got {widths:?}"
        )));
    }
    let basis = BSplineBasis::uniform(5, 3, -KAN_DOMAIN, KAN_DOMAIN)?;
    let mut net = KanNetwork::<f64>::new(widths, &basis, seed)?;
    let mut adam: Vec<AdamState<f64>> = (0..net.param_count())
        .map(|i| {
            let p = &net.param(i).value;
            AdamState::new(p.rows(), p.cols(), lr)
        })
        .collect();
    let w_phi_params: Vec<usize> = (0..net.param_count()).filter(|i| i % 2 == 0).collect();

    let mut rng = crate::rng::seeded(seed, 3);
    let mut ws = KanWorkspace::default();
    let batch = 256usize;
    let per_epoch = 10_000usize;
    let mut steps = 0usize;
    let mut converged_at: Option<usize> = None;
    let mut rmse = grid_rmse(&net, target, &mut ws)?;
    if rmse <= SYNTHETIC_RMSE_TARGET {
        converged_at = Some(0);
    }

    'outer: while converged_at.is_none() {
        // fresh uniform resampling each epoch
        use rand::Rng;
        let samples: Vec<(f64, f64)> = (0..per_epoch)
            .map(|_| (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)))
            .collect();
        for chunk in samples.chunks(batch) {
            steps += 1;
            let scale = 1.0 / chunk.len() as f64;
            let mut grads = GradBuffer::zeros_like(&net);
            for &(a, b) in chunk {
                let x = [a, b];
                let pred = net.forward_trace(&x, &mut ws, true)?;
                let dl = 2.0 * (pred - target.eval(a, b)) * scale;
                net.backward_trace(&mut ws, dl, &mut grads.mats, 0);
            }
            for &p in &w_phi_params {
                let w = net.param(p).value.clone();
                crate::training::reg_grad_accum(&w, reg, reg, &mut grads.mats[p]);
            }
            for i in 0..net.param_count() {
                let name = net.param_name(i);
                {
                    let slot = net.param_mut(i);
                    slot.zero_grad();
                    slot.grad.add_scaled(&grads.mats[i], 1.0);
                }
                adam_update(&name, net.param_mut(i), &mut adam[i])?;
            }
            rmse = grid_rmse(&net, target, &mut ws)?;
            if rmse <= SYNTHETIC_RMSE_TARGET {
                converged_at = Some(steps);
                break 'outer;
            }
            if steps >= max_steps {
                break 'outer;
            }
        }
    }

    Ok(SyntheticRun {
        target: target.label().to_string(),
        widths: widths.to_vec(),
        reg,
        lr,
        seed,
        steps_to_target: match converged_at {
            Some(s) => StepsOutcome::Converged(s),
            None => StepsOutcome::Failed("failed".to_string()),
        },
        final_rmse: rmse,
    })
}

// ---------------------------------------------------------------------------
// Pruning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneReport {
    pub threshold: f64,
    pub original_widths: Vec<usize>,
    pub surviving_widths: Vec<usize>,
}

/// Removes hidden nodes whose incoming or outgoing `|w_phi|` never exceeds
/// `threshold`. Input and output widths are preserved; pruning the output
/// node (or an entire hidden layer) is an error.
pub fn kan_prune<F: Scalar>(net: &KanNetwork<F>, threshold: f64) -> Result<(KanNetwork<F>, PruneReport)> {
    if threshold < 0.0 {
        return Err(Error::config("prune threshold must be >= 0".to_string()));
    }
    let widths = &net.widths;
    let depth = widths.len();
    // keep[k] = surviving node indices at width level k
    let mut keep: Vec<Vec<usize>> = Vec::with_capacity(depth);
    keep.push((0..widths[0]).collect());
    for level in 1..depth - 1 {
        let incoming = &net.layers[level - 1].w_phi.value; // widths[level] x widths[level-1]
        let outgoing = &net.layers[level].w_phi.value; // widths[level+1] x widths[level]
        let mut kept = Vec::new();
        for node in 0..widths[level] {
            let max_in = (0..widths[level - 1])
                .map(|i| incoming.get(node, i).abs().to_f64_val())
                .fold(0.0f64, f64::max);
            let max_out = (0..widths[level + 1])
                .map(|o| outgoing.get(o, node).abs().to_f64_val())
                .fold(0.0f64, f64::max);
            if max_in > threshold && max_out > threshold {
                kept.push(node);
            }
        }
        if kept.is_empty() {
            return Err(Error::config(format!(
                "prune threshold {threshold} removes every node of hidden layer {level}"
            )));
        }
        keep.push(kept);
    }
    // output layer must stay reachable
    {
        let incoming = &net.layers[depth - 2].w_phi.value;
        for node in 0..widths[depth - 1] {
            let max_in = (0..widths[depth - 2])
                .map(|i| incoming.get(node, i).abs().to_f64_val())
                .fold(0.0f64, f64::max);
            if max_in <= threshold {
                return Err(Error::config(format!(
                    "prune threshold {threshold} would remove output node {node}"
                )));
            }
        }
    }
    keep.push((0..widths[depth - 1]).collect());

    let surviving: Vec<usize> = keep.iter().map(|k| k.len()).collect();
    let mut layers = Vec::with_capacity(net.layers.len());
    for (l, layer) in net.layers.iter().enumerate() {
        let rows = &keep[l + 1];
        let cols = &keep[l];
        let nb = layer.basis.num_basis();
        let mut w_phi = Matrix::zeros(rows.len(), cols.len());
        let mut coeffs = Matrix::zeros(rows.len() * cols.len(), nb);
        for (jn, &j) in rows.iter().enumerate() {
            for (in_, &i) in cols.iter().enumerate() {
                w_phi.set(jn, in_, layer.w_phi.value.get(j, i));
                let src = layer.coeffs.value.row(j * layer.in_dim + i).to_vec();
                coeffs.row_mut(jn * cols.len() + in_).copy_from_slice(&src);
            }
        }
        layers.push(KanLayer {
            in_dim: cols.len(),
            out_dim: rows.len(),
            basis: layer.basis.clone(),
            w_phi: GradSlot::new(w_phi),
            coeffs: GradSlot::new(coeffs),
        });
    }
    Ok((
        KanNetwork {
            layers,
            widths: surviving.clone(),
        },
        PruneReport {
            threshold,
            original_widths: widths.clone(),
            surviving_widths: surviving,
        },
    ))
}

// ---------------------------------------------------------------------------
// Vanilla KAN for CTR
// ---------------------------------------------------------------------------

/// Wide-concatenated-embedding KAN with a sigmoid head.
#[derive(Debug, Clone)]
pub struct KanCtrModel<F: Scalar> {
    pub embedding: EmbeddingTable<F>,
    pub net: KanNetwork<F>,
}

impl<F: Scalar> KanCtrModel<F> {
    /// Widths are the hidden sizes; input is `m * embed_dim`, output 1.
    pub fn new(
        vocab_sizes: &[usize],
        embed_dim: usize,
        hidden: &[usize],
        grid: usize,
        kappa: usize,
        seed: u64,
    ) -> Result<Self> {
        let m = vocab_sizes.len();
        let mut widths = vec![m * embed_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let basis = BSplineBasis::uniform(grid, kappa, -KAN_DOMAIN, KAN_DOMAIN)?;
        let mut rng = crate::rng::seeded(seed, 4);
        let total: usize = vocab_sizes.iter().sum();
        let weights = crate::rng::normal_matrix(&mut rng, total, embed_dim, 0.05);
        Ok(KanCtrModel {
            embedding: EmbeddingTable::new(vocab_sizes, embed_dim, weights)?,
            net: KanNetwork::new(&widths, &basis, seed)?,
        })
    }

    fn embed(&self, rec: &[u32], e: &mut Vec<F>) -> Result<()> {
        let d = self.embedding.dim();
        e.clear();
        for (f, &v) in rec.iter().enumerate() {
            let row = self.embedding.row_index(f, v)?;
            let base = row * d;
            e.extend_from_slice(&self.embedding.weights.value.data()[base..base + d]);
        }
        Ok(())
    }
}

impl<F: Scalar> ParamGrads<F> for KanCtrModel<F> {
    fn param_count(&self) -> usize {
        1 + self.net.param_count()
    }
    fn param_name(&self, idx: usize) -> String {
        if idx == 0 {
            "embedding".to_string()
        } else {
            self.net.param_name(idx - 1)
        }
    }
    fn param(&self, idx: usize) -> &GradSlot<F> {
        if idx == 0 {
            &self.embedding.weights
        } else {
            self.net.param(idx - 1)
        }
    }
    fn param_mut(&mut self, idx: usize) -> &mut GradSlot<F> {
        if idx == 0 {
            &mut self.embedding.weights
        } else {
            self.net.param_mut(idx - 1)
        }
    }
}

impl<F: Scalar> CtrModel<F> for KanCtrModel<F> {
    fn predict_records(&self, data: &EncodedDataset, idx: &[u32], out: &mut Vec<f64>) -> Result<()> {
        let mut ws = KanWorkspace::default();
        let mut e = Vec::new();
        for &i in idx {
            self.embed(data.record(i), &mut e)?;
            let logit = self.net.forward_trace(&e, &mut ws, false)?;
            out.push(sigmoid(logit).to_f64_val().clamp(PRED_EPS, 1.0 - PRED_EPS));
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
        let mut ws = KanWorkspace::default();
        let mut e = Vec::new();
        let d = self.embedding.dim();
        let mut loss_sum = 0.0;
        for &i in idx {
            let rec = data.record(i);
            self.embed(rec, &mut e)?;
            let logit = self.net.forward_trace(&e, &mut ws, true)?;
            let yhat = sigmoid(logit).to_f64_val().clamp(PRED_EPS, 1.0 - PRED_EPS);
            let y = data.labels[i as usize];
            let (term, dl_dy) = if y == 1 {
                (-yhat.ln(), -1.0 / yhat)
            } else {
                (-(1.0 - yhat).ln(), 1.0 / (1.0 - yhat))
            };
            loss_sum += term;
            let d_logit = F::from_f64(scale * dl_dy * yhat * (1.0 - yhat));
            self.net.backward_trace(&mut ws, d_logit, &mut grads.mats[1..], 0);
            // scatter input gradient into embedding rows
            let g_e = &ws.layers[0].g_in;
            for (f, &v) in rec.iter().enumerate() {
                let row = self.embedding.row_index(f, v)?;
                let base = row * d;
                for c in 0..d {
                    grads.mats[0].data_mut()[base + c] += g_e[f * d + c];
                }
            }
        }
        Ok(loss_sum)
    }

    fn regularized_params(&self) -> Vec<usize> {
        // w_phi matrices only
        (0..self.net.param_count())
            .filter(|i| i % 2 == 0)
            .map(|i| i + 1)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Plain MLP
// ---------------------------------------------------------------------------

/// Affine stack with ReLU between layers and a linear final layer.
#[derive(Debug, Clone)]
pub struct MlpNetwork<F: Scalar> {
    pub widths: Vec<usize>,
    /// per layer: weight (out x in) and bias (out x 1)
    pub layers: Vec<(GradSlot<F>, GradSlot<F>)>,
}

#[derive(Debug, Clone, Default)]
pub struct MlpWorkspace<F: Scalar> {
    /// post-activation values per level (level 0 = input)
    acts: Vec<Vec<F>>,
    /// pre-activation values per layer
    pre: Vec<Vec<F>>,
    g: Vec<F>,
}

impl<F: Scalar> MlpNetwork<F> {
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("need at least input and output widths".to_string()));
        }
        let mut rng = crate::rng::seeded(seed, 5);
        let layers = (0..widths.len() - 1)
            .map(|l| {
                (
                    GradSlot::new(crate::rng::xavier_matrix(&mut rng, widths[l + 1], widths[l])),
                    GradSlot::new(Matrix::zeros(widths[l + 1], 1)),
                )
            })
            .collect();
        Ok(MlpNetwork {
            widths: widths.to_vec(),
            layers,
        })
    }

    pub fn forward_trace(&self, x: &[F], ws: &mut MlpWorkspace<F>) -> Result<F> {
        if x.len() != self.widths[0] {
            return Err(Error::config(format!(
                "input length {} does not match width {}",
                x.len(),
                self.widths[0]
            )));
        }
        ws.acts.resize(self.layers.len() + 1, Vec::new());
        ws.pre.resize(self.layers.len(), Vec::new());
        ws.acts[0].clear();
        ws.acts[0].extend_from_slice(x);
        for (l, (w, b)) in self.layers.iter().enumerate() {
            let n_out = w.value.rows();
            let n_in = w.value.cols();
            let last = l == self.layers.len() - 1;
            let (prev, pre) = (&ws.acts[l], &mut ws.pre[l]);
            pre.resize(n_out, F::zero());
            for j in 0..n_out {
                let mut acc = b.value.get(j, 0);
                let w_row = w.value.row(j);
                for i in 0..n_in {
                    acc += w_row[i] * prev[i];
                }
                pre[j] = acc;
            }
            let pre_copy = ws.pre[l].clone();
            let act = &mut ws.acts[l + 1];
            act.clear();
            if last {
                act.extend_from_slice(&pre_copy);
            } else {
                act.extend(pre_copy.iter().map(|&v| if v > F::zero() { v } else { F::zero() }));
            }
        }
        Ok(ws.acts[self.layers.len()][0])
    }

    pub fn forward(&self, x: &[F]) -> Result<F> {
        let mut ws = MlpWorkspace::default();
        self.forward_trace(x, &mut ws)
    }

    /// Backward from the scalar head; grads layout per layer: w then b.
    pub fn backward_trace(
        &self,
        ws: &mut MlpWorkspace<F>,
        dl_dout: F,
        grads: &mut [Matrix<F>],
        base: usize,
    ) {
        let mut g: Vec<F> = vec![dl_dout];
        for l in (0..self.layers.len()).rev() {
            let (w, _) = &self.layers[l];
            let n_out = w.value.rows();
            let n_in = w.value.cols();
            // gradient w.r.t. pre-activation of this layer
            if l < self.layers.len() - 1 {
                for (j, gj) in g.iter_mut().enumerate() {
                    if ws.pre[l][j] <= F::zero() {
                        *gj = F::zero();
                    }
                }
            }
            let gw = &mut grads[base + 2 * l];
            for j in 0..n_out {
                let gj = g[j];
                let gw_base = j * n_in;
                for i in 0..n_in {
                    gw.data_mut()[gw_base + i] += gj * ws.acts[l][i];
                }
            }
            let gb = &mut grads[base + 2 * l + 1];
            for j in 0..n_out {
                gb.set(j, 0, gb.get(j, 0) + g[j]);
            }
            ws.g.resize(n_in, F::zero());
            for i in 0..n_in {
                let mut acc = F::zero();
                for j in 0..n_out {
                    acc += w.value.get(j, i) * g[j];
                }
                ws.g[i] = acc;
            }
            g = ws.g.clone();
        }
        ws.g = g;
    }
}

impl<F: Scalar> ParamGrads<F> for MlpNetwork<F> {
    fn param_count(&self) -> usize {
        2 * self.layers.len()
    }
    fn param_name(&self, idx: usize) -> String {
        let part = if idx % 2 == 0 { "w" } else { "b" };
        format!("mlp.{}.{}", idx / 2, part)
    }
    fn param(&self, idx: usize) -> &GradSlot<F> {
        let (w, b) = &self.layers[idx / 2];
        if idx % 2 == 0 {
            w
        } else {
            b
        }
    }
    fn param_mut(&mut self, idx: usize) -> &mut GradSlot<F> {
        let (w, b) = &mut self.layers[idx / 2];
        if idx % 2 == 0 {
            w
        } else {
            b
        }
    }
}

/// Embedding + MLP with a sigmoid head (the DNN baseline).
#[derive(Debug, Clone)]
pub struct MlpCtrModel<F: Scalar> {
    pub embedding: EmbeddingTable<F>,
    pub net: MlpNetwork<F>,
}

impl<F: Scalar> MlpCtrModel<F> {
    pub fn new(vocab_sizes: &[usize], embed_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let m = vocab_sizes.len();
        let mut widths = vec![m * embed_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let mut rng = crate::rng::seeded(seed, 6);
        let total: usize = vocab_sizes.iter().sum();
        let weights = crate::rng::normal_matrix(&mut rng, total, embed_dim, 0.05);
        Ok(MlpCtrModel {
            embedding: EmbeddingTable::new(vocab_sizes, embed_dim, weights)?,
            net: MlpNetwork::new(&widths, seed)?,
        })
    }

    fn embed(&self, rec: &[u32], e: &mut Vec<F>) -> Result<()> {
        let d = self.embedding.dim();
        e.clear();
        for (f, &v) in rec.iter().enumerate() {
            let row = self.embedding.row_index(f, v)?;
            let base = row * d;
            e.extend_from_slice(&self.embedding.weights.value.data()[base..base + d]);
        }
        Ok(())
    }
}

impl<F: Scalar> ParamGrads<F> for MlpCtrModel<F> {
    fn param_count(&self) -> usize {
        1 + self.net.param_count()
    }
    fn param_name(&self, idx: usize) -> String {
        if idx == 0 {
            "embedding".to_string()
        } else {
            self.net.param_name(idx - 1)
        }
    }
    fn param(&self, idx: usize) -> &GradSlot<F> {
        if idx == 0 {
            &self.embedding.weights
        } else {
            self.net.param(idx - 1)
        }
    }
    fn param_mut(&mut self, idx: usize) -> &mut GradSlot<F> {
        if idx == 0 {
            &mut self.embedding.weights
        } else {
            self.net.param_mut(idx - 1)
        }
    }
}

impl<F: Scalar> CtrModel<F> for MlpCtrModel<F> {
    fn predict_records(&self, data: &EncodedDataset, idx: &[u32], out: &mut Vec<f64>) -> Result<()> {
        let mut ws = MlpWorkspace::default();
        let mut e = Vec::new();
        for &i in idx {
            self.embed(data.record(i), &mut e)?;
            let logit = self.net.forward_trace(&e, &mut ws)?;
            out.push(sigmoid(logit).to_f64_val().clamp(PRED_EPS, 1.0 - PRED_EPS));
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
        let mut ws = MlpWorkspace::default();
        let mut e = Vec::new();
        let d = self.embedding.dim();
        let mut loss_sum = 0.0;
        for &i in idx {
            let rec = data.record(i);
            self.embed(rec, &mut e)?;
            let logit = self.net.forward_trace(&e, &mut ws)?;
            let yhat = sigmoid(logit).to_f64_val().clamp(PRED_EPS, 1.0 - PRED_EPS);
            let y = data.labels[i as usize];
            let (term, dl_dy) = if y == 1 {
                (-yhat.ln(), -1.0 / yhat)
            } else {
                (-(1.0 - yhat).ln(), 1.0 / (1.0 - yhat))
            };
            loss_sum += term;
            let d_logit = F::from_f64(scale * dl_dy * yhat * (1.0 - yhat));
            self.net.backward_trace(&mut ws, d_logit, &mut grads.mats[1..], 0);
            for (f, &v) in rec.iter().enumerate() {
                let row = self.embedding.row_index(f, v)?;
                let base = row * d;
                for c in 0..d {
                    grads.mats[0].data_mut()[base + c] += ws.g[f * d + c];
                }
            }
        }
        Ok(loss_sum)
    }

    fn regularized_params(&self) -> Vec<usize> {
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::silu;
    use approx::assert_relative_eq;

    fn test_basis() -> BSplineBasis {
        BSplineBasis::uniform(5, 3, -KAN_DOMAIN, KAN_DOMAIN).unwrap()
    }

    /// Least-squares coefficients making one edge realize `f` (cancels SiLU).
    fn fit_edge_coeffs(basis: &BSplineBasis, f: impl Fn(f64) -> f64) -> Vec<f64> {
        crate::spline::fit_coeffs(basis, |x| f(x) - silu(x), 600)
    }

    #[test]
    fn zero_scale_network_outputs_zero() {
        let basis = test_basis();
        let mut net = KanNetwork::<f64>::new(&[3, 2, 1], &basis, 1).unwrap();
        for layer in &mut net.layers {
            layer.w_phi.value.fill(0.0);
        }
        assert_eq!(net.forward(&[0.3, -0.4, 0.9]).unwrap(), 0.0);
    }

    #[test]
    fn identity_edge_reproduces_input() {
        let basis = test_basis();
        let mut net = KanNetwork::<f64>::new(&[1, 1], &basis, 1).unwrap();
        let coeffs = fit_edge_coeffs(&basis, |x| x);
        net.layers[0].coeffs.value.row_mut(0).copy_from_slice(&coeffs);
        net.layers[0].w_phi.value.set(0, 0, 1.0);
        for x in [-0.9, -0.3, 0.0, 0.42, 0.97] {
            let y = net.forward(&[x]).unwrap();
            assert!((y - x).abs() < 0.01, "identity fit at {x}: {y}");
        }
    }

    #[test]
    fn hand_built_2_2_1_realizes_product() {
        // h1 = x1 + x2, h2 = x1^2 + x2^2, out = (h1^2 - h2) / 2 = x1*x2
        let basis = test_basis();
        let mut net = KanNetwork::<f64>::new(&[2, 2, 1], &basis, 1).unwrap();
        let ident = fit_edge_coeffs(&basis, |x| x);
        let square = fit_edge_coeffs(&basis, |x| x * x);
        let half_square = fit_edge_coeffs(&basis, |x| 0.5 * x * x);
        let neg_half = fit_edge_coeffs(&basis, |x| -0.5 * x);
        let l0 = &mut net.layers[0];
        l0.w_phi.value.fill(1.0);
        // edge rows: (out j, in i) -> j*2+i
        l0.coeffs.value.row_mut(0).copy_from_slice(&ident); // h1 <- x1
        l0.coeffs.value.row_mut(1).copy_from_slice(&ident); // h1 <- x2
        l0.coeffs.value.row_mut(2).copy_from_slice(&square); // h2 <- x1
        l0.coeffs.value.row_mut(3).copy_from_slice(&square); // h2 <- x2
        let l1 = &mut net.layers[1];
        l1.w_phi.value.fill(1.0);
        l1.coeffs.value.row_mut(0).copy_from_slice(&half_square);
        l1.coeffs.value.row_mut(1).copy_from_slice(&neg_half);

        let mut max_err = 0.0f64;
        for ia in 0..=20 {
            for ib in 0..=20 {
                let a = -1.0 + ia as f64 * 0.1;
                let b = -1.0 + ib as f64 * 0.1;
                let y = net.forward(&[a, b]).unwrap();
                max_err = max_err.max((y - a * b).abs());
            }
        }
        assert!(max_err <= 0.05, "max err {max_err}");
    }

    #[test]
    fn layer_output_is_additive_over_edges() {
        let basis = test_basis();
        let net = KanNetwork::<f64>::new(&[3, 1], &basis, 9).unwrap();
        let x = [0.4, -0.2, 0.7];
        let full = net.forward(&x).unwrap();
        // zeroing edge (0, 1) changes the output by exactly its contribution
        let mut cut = net.clone();
        cut.layers[0].w_phi.value.set(0, 1, 0.0);
        let without = cut.forward(&x).unwrap();
        let edge = net.layers[0].edge(0, 1);
        let contribution =
            crate::spline::edge_activate(&edge, &net.layers[0].basis, x[1]);
        assert_relative_eq!(full - without, contribution, epsilon = 1e-12);
    }

    #[test]
    fn kan_gradients_match_finite_differences() {
        let basis = BSplineBasis::uniform(4, 2, -KAN_DOMAIN, KAN_DOMAIN).unwrap();
        let mut net = KanNetwork::<f64>::new(&[2, 3, 1], &basis, 17).unwrap();
        let x = [0.3, -0.6];
        // loss = forward^2, dl/dout = 2 * out
        let mut ws = KanWorkspace::default();
        let out = net.forward_trace(&x, &mut ws, true).unwrap();
        let mut grads = GradBuffer::zeros_like(&net);
        net.backward_trace(&mut ws, 2.0 * out, &mut grads.mats, 0);
        for i in 0..net.param_count() {
            let g = grads.mats[i].clone();
            let slot = net.param_mut(i);
            slot.zero_grad();
            slot.grad.add_scaled(&g, 1.0);
        }
        let report = crate::optim::finite_diff_check(
            &mut net,
            |n| Ok(n.forward(&x)?.powi(2)),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn fit_synthetic_reaches_quadratic_quickly() {
        let run = fit_synthetic(SyntheticTarget::ASquared, &[2, 1], 0.0, 1e-2, 1500, 5).unwrap();
        assert!(
            run.steps_to_target.converged().is_some(),
            "a^2 with an ideal structure should converge: {run:?}"
        );
    }

    #[test]
    fn fit_synthetic_is_reproducible() {
        let a = fit_synthetic(SyntheticTarget::BSquared, &[2, 1], 0.01, 5e-3, 300, 7).unwrap();
        let b = fit_synthetic(SyntheticTarget::BSquared, &[2, 1], 0.01, 5e-3, 300, 7).unwrap();
        assert_eq!(a.steps_to_target, b.steps_to_target);
        assert_eq!(a.final_rmse, b.final_rmse);
    }

    #[test]
    fn prune_zero_threshold_keeps_everything() {
        let basis = test_basis();
        let net = KanNetwork::<f64>::new(&[3, 4, 1], &basis, 3).unwrap();
        let (pruned, report) = kan_prune(&net, 0.0).unwrap();
        assert_eq!(report.surviving_widths, vec![3, 4, 1]);
        let x = [0.1, 0.2, 0.3];
        assert_relative_eq!(
            pruned.forward(&x).unwrap(),
            net.forward(&x).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn prune_removes_dead_node_without_changing_output() {
        let basis = test_basis();
        let mut net = KanNetwork::<f64>::new(&[2, 3, 1], &basis, 4).unwrap();
        // node 1 of the hidden layer has all edges at 1e-6
        for i in 0..2 {
            net.layers[0].w_phi.value.set(1, i, 1e-6);
        }
        net.layers[1].w_phi.value.set(0, 1, 1e-6);
        // kill its spline coefficients as well so its contribution is ~0
        let nb = basis.num_basis();
        for i in 0..2 {
            for t in 0..nb {
                net.layers[0].coeffs.value.set(1 * 2 + i, t, 0.0);
            }
        }
        for t in 0..nb {
            net.layers[1].coeffs.value.set(1, t, 0.0);
        }
        let (pruned, report) = kan_prune(&net, 0.003).unwrap();
        assert_eq!(report.surviving_widths, vec![2, 2, 1]);
        let x = [0.37, -0.21];
        let before = net.forward(&x).unwrap();
        let after = pruned.forward(&x).unwrap();
        assert!((before - after).abs() < 1e-5, "{before} vs {after}");
    }

    #[test]
    fn prune_rejects_killing_the_output() {
        let basis = test_basis();
        let mut net = KanNetwork::<f64>::new(&[2, 2, 1], &basis, 5).unwrap();
        for i in 0..2 {
            net.layers[1].w_phi.value.set(0, i, 1e-9);
        }
        assert!(kan_prune(&net, 0.003).is_err());
    }

    #[test]
    fn mlp_zero_weights_outputs_zero() {
        let mut net = MlpNetwork::<f64>::new(&[3, 4, 1], 1).unwrap();
        for (w, b) in &mut net.layers {
            w.value.fill(0.0);
            b.value.fill(0.0);
        }
        assert_eq!(net.forward(&[0.5, -0.5, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn single_linear_layer_matches_matmul() {
        let net = MlpNetwork::<f64>::new(&[4, 1], 7).unwrap();
        let mut rng = crate::rng::seeded(8, 0);
        let x = crate::rng::random_matrix::<f64>(&mut rng, 4, 1, 1.0);
        let expect = net.layers[0].0.value.matmul(&x).unwrap().get(0, 0)
            + net.layers[0].1.value.get(0, 0);
        let got = net.forward(x.data()).unwrap();
        assert_relative_eq!(got, expect, epsilon = 1e-12);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut net = MlpNetwork::<f64>::new(&[3, 4, 1], 11).unwrap();
        let x = [0.3, -0.2, 0.8];
        let mut ws = MlpWorkspace::default();
        let out = net.forward_trace(&x, &mut ws).unwrap();
        let mut grads = GradBuffer::zeros_like(&net);
        net.backward_trace(&mut ws, 2.0 * out, &mut grads.mats, 0);
        for i in 0..net.param_count() {
            let g = grads.mats[i].clone();
            let slot = net.param_mut(i);
            slot.zero_grad();
            slot.grad.add_scaled(&g, 1.0);
        }
        let report = crate::optim::finite_diff_check(
            &mut net,
            |n| Ok(n.forward(&x)?.powi(2)),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn ctr_wrappers_pass_finite_differences() {
        use crate::data::{DatasetSchema, EncodedDataset};
        let rows: Vec<Vec<String>> = (0..80)
            .map(|i| {
                vec![
                    format!("u{}", i % 5),
                    format!("i{}", i % 7),
                    if i % 3 == 0 { "5" } else { "1" }.to_string(),
                ]
            })
            .collect();
        let data = EncodedDataset::encode(&rows, &DatasetSchema::douban(), 3).unwrap();
        let idx: Vec<u32> = (0..12).collect();

        let mut kan = KanCtrModel::<f64>::new(&data.vocab_sizes(), 3, &[4], 3, 1, 9).unwrap();
        crate::training::backward(&mut kan, &data, &idx, 0.01, 1e-4).unwrap();
        let report = crate::optim::finite_diff_check(
            &mut kan,
            |m| crate::training::total_loss(m, &data, &idx, 0.01, 1e-4),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "kan ctr rel err {}", report.max_rel_err);

        let mut mlp = MlpCtrModel::<f64>::new(&data.vocab_sizes(), 3, &[4], 13).unwrap();
        crate::training::backward(&mut mlp, &data, &idx, 0.0, 0.0).unwrap();
        let report = crate::optim::finite_diff_check(
            &mut mlp,
            |m| crate::training::total_loss(m, &data, &idx, 0.0, 0.0),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "mlp ctr rel err {}", report.max_rel_err);
    }
}
