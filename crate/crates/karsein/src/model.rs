//! The interaction-network model: embedding lookup, stacked interaction
//! layers (optional pairwise multiplication, per-row spline activation,
//! linear combination with a SiLU residual), a vector-wise explicit tower,
//! a bit-wise implicit tower, and the prediction head.
//!
//! Backward passes are hand-derived; everything that allocates per record is
//! kept in a reusable [`KarseinWorkspace`].

use crate::error::{Error, Result};
use crate::matrix::{
    matmul_a_bt_accum, matmul_at_b_accum, matmul_into, sigmoid, silu_grad_from_sigmoid, Matrix,
    Scalar,
};
use crate::optim::{GradSlot, ParamGrads};
use crate::spline::BSplineBasis;
use serde::{Deserialize, Serialize};

pub const PRED_EPS: f64 = 1e-7;

/// How the explicit and implicit tower outputs combine into a probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Mean of the two sigmoids; default, keeps the output in (0,1).
    Mean,
    /// Literal sum of the two sigmoids, clamped into (0,1) for loss validity.
    PaperSum,
}

/// Which towers are active (full model or single-tower ablations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TowerSet {
    Both,
    ExplicitOnly,
    ImplicitOnly,
}

/// Model hyperparameters; defaults are the desk-scale MovieLens settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KarseinHyper {
    pub embed_dim: usize,
    pub kappa: usize,
    pub grid: usize,
    /// spline domain is the symmetric interval [-spline_range, spline_range]
    pub spline_range: f64,
    /// hidden widths of the explicit tower (a final width-1 layer is appended)
    pub explicit_hidden: Vec<usize>,
    /// hidden widths of the implicit tower (a final width-1 layer is appended)
    pub implicit_hidden: Vec<usize>,
    /// 1-based explicit-tower layer indices that apply pairwise multiplication
    pub pairwise_layers: Vec<usize>,
    pub head_mode: HeadMode,
    pub towers: TowerSet,
}

impl Default for KarseinHyper {
    fn default() -> Self {
        KarseinHyper {
            embed_dim: 16,
            kappa: 3,
            grid: 10,
            spline_range: 1.0,
            explicit_hidden: vec![8, 8],
            implicit_hidden: vec![32, 32],
            pairwise_layers: vec![1, 2],
            head_mode: HeadMode::Mean,
            towers: TowerSet::Both,
        }
    }
}

/// Per-field embedding table; field vocabularies occupy disjoint row blocks.
#[derive(Debug, Clone)]
pub struct EmbeddingTable<F: Scalar> {
    dim: usize,
    vocab_sizes: Vec<usize>,
    offsets: Vec<usize>,
    pub weights: GradSlot<F>,
}

impl<F: Scalar> EmbeddingTable<F> {
    pub fn new(vocab_sizes: &[usize], dim: usize, weights: Matrix<F>) -> Result<Self> {
        let total: usize = vocab_sizes.iter().sum();
        if weights.rows() != total || weights.cols() != dim {
            return Err(Error::config(format!(
                "embedding weights {}x{} do not match total vocab {total} x dim {dim}",
                weights.rows(),
                weights.cols()
            )));
        }
        let mut offsets = Vec::with_capacity(vocab_sizes.len());
        let mut acc = 0;
        for &v in vocab_sizes {
            offsets.push(acc);
            acc += v;
        }
        Ok(EmbeddingTable {
            dim,
            vocab_sizes: vocab_sizes.to_vec(),
            offsets,
            weights: GradSlot::new(weights),
        })
    }

    pub fn num_fields(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_sizes(&self) -> &[usize] {
        &self.vocab_sizes
    }

    /// Global row index of `value` in field `field`.
    pub fn row_index(&self, field: usize, value: u32) -> Result<usize> {
        let v = value as usize;
        if v >= self.vocab_sizes[field] {
            return Err(Error::data(format!(
                "field {field}: index {v} out of vocab bound {}",
                self.vocab_sizes[field]
            )));
        }
        Ok(self.offsets[field] + v)
    }

    /// Stacks the record's embedding rows into `out` (m x D, schema order).
    pub fn lookup_into(&self, record: &[u32], out: &mut Matrix<F>) -> Result<()> {
        if record.len() != self.num_fields() {
            return Err(Error::data(format!(
                "record has {} fields, embedding table expects {}",
                record.len(),
                self.num_fields()
            )));
        }
        debug_assert_eq!(out.rows(), self.num_fields());
        debug_assert_eq!(out.cols(), self.dim);
        let d = self.dim;
        for (f, &v) in record.iter().enumerate() {
            let src = self.row_index(f, v)?;
            let (dst, srcrow) = (f * d, src * d);
            let w = &self.weights.value.data()[srcrow..srcrow + d];
            out.data_mut()[dst..dst + d].copy_from_slice(w);
        }
        Ok(())
    }
}

/// Pairwise Hadamard products of `x` rows against base rows, concatenated
/// after the originals: output row `h` is `x[h]` for `h < H`, and row
/// `H + i*m + j` is `x[i] ⊙ x0[j]` (input row outer, base row inner).
pub fn pairwise_multiply<F: Scalar>(x: &Matrix<F>, x0: &Matrix<F>) -> Result<Matrix<F>> {
    if x.cols() != x0.cols() {
        return Err(Error::DimMismatch {
            op: "pairwise_multiply",
            lhs_rows: x.rows(),
            lhs_cols: x.cols(),
            rhs_rows: x0.rows(),
            rhs_cols: x0.cols(),
        });
    }
    let mut out = Matrix::zeros(x.rows() * (1 + x0.rows()), x.cols());
    pairwise_multiply_into(x, x0, &mut out);
    Ok(out)
}

fn pairwise_multiply_into<F: Scalar>(x: &Matrix<F>, x0: &Matrix<F>, out: &mut Matrix<F>) {
    let h = x.rows();
    let m = x0.rows();
    let d = x.cols();
    debug_assert_eq!(out.rows(), h * (1 + m));
    out.data_mut()[..h * d].copy_from_slice(x.data());
    for i in 0..h {
        for j in 0..m {
            let base = (h + i * m + j) * d;
            for c in 0..d {
                out.data_mut()[base + c] = x.data()[i * d + c] * x0.data()[j * d + c];
            }
        }
    }
}

/// Reference activation transform: `out[h,d] = sum_i N_i(x[h,d]) * coeffs[h,i]`.
///
/// One spline per input row, shared across the embedding columns. The layer
/// hot path computes the same values through the non-zero span window; this
/// dense form is the public contract and the oracle target.
pub fn activation_transform<F: Scalar>(
    x: &Matrix<F>,
    coeffs: &Matrix<F>,
    basis: &BSplineBasis,
) -> Result<Matrix<F>> {
    if coeffs.rows() != x.rows() || coeffs.cols() != basis.num_basis() {
        return Err(Error::DimMismatch {
            op: "activation_transform",
            lhs_rows: x.rows(),
            lhs_cols: x.cols(),
            rhs_rows: coeffs.rows(),
            rhs_cols: coeffs.cols(),
        });
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for h in 0..x.rows() {
        let c_row = coeffs.row(h);
        for d in 0..x.cols() {
            out.set(h, d, basis.spline_value(c_row, x.get(h, d).to_f64_val()));
        }
    }
    Ok(out)
}

/// One interaction layer.
///
/// With pairwise multiplication enabled the effective input is
/// `in_rows * (1 + m)` rows. Each effective row owns one spline coefficient
/// vector shared across the embedding columns (single activation per feature).
#[derive(Debug, Clone)]
pub struct KarseinLayer<F: Scalar> {
    pub in_rows: usize,
    pub out_rows: usize,
    pub pairwise: bool,
    pub eff_in: usize,
    /// spline coefficients, eff_in x (g + kappa)
    pub coeffs: GradSlot<F>,
    /// combination weights for the activated path, out_rows x eff_in
    pub w_b: GradSlot<F>,
    /// combination weights for the SiLU residual path, out_rows x eff_in
    pub w_s: GradSlot<F>,
    /// frozen input rows (de-redundancy masking); empty = no mask
    pub mask: Vec<bool>,
}

const OUT_OF_DOMAIN: u32 = u32::MAX;

/// Cached intermediates for one layer's forward pass on one record.
#[derive(Debug, Clone, Default)]
pub struct LayerTrace<F: Scalar> {
    pub x_eff: Matrix<F>,
    pub x_b: Matrix<F>,
    sigma: Matrix<F>,
    silu_x: Matrix<F>,
    pub x_out: Matrix<F>,
    spans: Vec<u32>,
    bvals: Vec<F>,
    bgrads: Vec<F>,
    g_xb: Matrix<F>,
    g_silu: Matrix<F>,
    g_eff: Matrix<F>,
    pub g_in: Matrix<F>,
}

impl<F: Scalar> LayerTrace<F> {
    fn ensure(&mut self, eff: usize, d: usize, in_rows: usize, out_rows: usize, k1: usize) {
        if self.x_eff.rows() != eff || self.x_eff.cols() != d {
            self.x_eff = Matrix::zeros(eff, d);
            self.x_b = Matrix::zeros(eff, d);
            self.sigma = Matrix::zeros(eff, d);
            self.silu_x = Matrix::zeros(eff, d);
            self.spans = vec![0; eff * d];
            self.bvals = vec![F::zero(); eff * d * k1];
            self.bgrads = vec![F::zero(); eff * d * k1];
            self.g_xb = Matrix::zeros(eff, d);
            self.g_silu = Matrix::zeros(eff, d);
            self.g_eff = Matrix::zeros(eff, d);
        }
        if self.x_out.rows() != out_rows || self.x_out.cols() != d {
            self.x_out = Matrix::zeros(out_rows, d);
        }
        if self.g_in.rows() != in_rows || self.g_in.cols() != d {
            self.g_in = Matrix::zeros(in_rows, d);
        }
    }
}

impl<F: Scalar> KarseinLayer<F> {
    pub fn new(
        in_rows: usize,
        out_rows: usize,
        pairwise: bool,
        m: usize,
        num_basis: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let eff_in = if pairwise { in_rows * (1 + m) } else { in_rows };
        let coeff_std = 0.1 / (num_basis as f64).sqrt();
        KarseinLayer {
            in_rows,
            out_rows,
            pairwise,
            eff_in,
            coeffs: GradSlot::new(crate::rng::normal_matrix(rng, eff_in, num_basis, coeff_std)),
            w_b: GradSlot::new(crate::rng::xavier_matrix(rng, out_rows, eff_in)),
            w_s: GradSlot::new(crate::rng::xavier_matrix(rng, out_rows, eff_in)),
            mask: Vec::new(),
        }
    }

    pub fn is_masked(&self, row: usize) -> bool {
        self.mask.get(row).copied().unwrap_or(false)
    }

    /// `X_out = W_b * X_b + W_s * SiLU(X_eff)` where `X_eff` is the input
    /// after optional pairwise multiplication and `X_b` the spline transform.
    ///
    /// `x0` must be provided iff pairwise is on. With `want_grads` the basis
    /// derivatives are cached for [`backward_trace`](Self::backward_trace).
    pub fn forward_trace(
        &self,
        layer_idx: usize,
        basis: &BSplineBasis,
        x_in: &Matrix<F>,
        x0: Option<&Matrix<F>>,
        trace: &mut LayerTrace<F>,
        want_grads: bool,
    ) -> Result<()> {
        if x_in.rows() != self.in_rows {
            return Err(Error::config(format!(
                "layer {layer_idx}: input has {} rows, expected {}",
                x_in.rows(),
                self.in_rows
            )));
        }
        let d = x_in.cols();
        let k1 = basis.order() + 1;
        trace.ensure(self.eff_in, d, self.in_rows, self.out_rows, k1);

        if self.pairwise {
            let x0 = x0.ok_or_else(|| {
                Error::config(format!(
                    "layer {layer_idx}: pairwise enabled but no base features given"
                ))
            })?;
            if x0.cols() != d || self.in_rows * (1 + x0.rows()) != self.eff_in {
                return Err(Error::DimMismatch {
                    op: "pairwise_multiply",
                    lhs_rows: x_in.rows(),
                    lhs_cols: d,
                    rhs_rows: x0.rows(),
                    rhs_cols: x0.cols(),
                });
            }
            pairwise_multiply_into(x_in, x0, &mut trace.x_eff);
        } else {
            trace.x_eff.data_mut().copy_from_slice(x_in.data());
        }

        for h in 0..self.eff_in {
            let c_row = self.coeffs.value.row(h);
            for c in 0..d {
                let e = h * d + c;
                let x = trace.x_eff.data()[e];
                let s = sigmoid(x);
                trace.sigma.data_mut()[e] = s;
                trace.silu_x.data_mut()[e] = x * s;
                let xf = x.to_f64_val();
                if want_grads {
                    match basis.eval_span_with_grad(xf) {
                        Some((vals, grads)) => {
                            trace.spans[e] = vals.start as u32;
                            let mut acc = F::zero();
                            for j in 0..k1 {
                                let v = F::from_f64(vals.values[j]);
                                trace.bvals[e * k1 + j] = v;
                                trace.bgrads[e * k1 + j] = F::from_f64(grads.values[j]);
                                acc += c_row[vals.start + j] * v;
                            }
                            trace.x_b.data_mut()[e] = acc;
                        }
                        None => {
                            trace.spans[e] = OUT_OF_DOMAIN;
                            trace.x_b.data_mut()[e] = F::zero();
                        }
                    }
                } else {
                    match basis.eval_span(xf) {
                        Some(vals) => {
                            trace.spans[e] = vals.start as u32;
                            let mut acc = F::zero();
                            for j in 0..k1 {
                                let v = F::from_f64(vals.values[j]);
                                trace.bvals[e * k1 + j] = v;
                                acc += c_row[vals.start + j] * v;
                            }
                            trace.x_b.data_mut()[e] = acc;
                        }
                        None => {
                            trace.spans[e] = OUT_OF_DOMAIN;
                            trace.x_b.data_mut()[e] = F::zero();
                        }
                    }
                }
            }
        }

        matmul_into(&self.w_b.value, &trace.x_b, &mut trace.x_out);
        matmul_accum(&self.w_s.value, &trace.silu_x, &mut trace.x_out);
        Ok(())
    }

    /// Backward through the layer given `g_out = dL/dX_out`.
    ///
    /// Parameter gradients are accumulated into the provided buffers;
    /// `trace.g_in` receives `dL/dX_in`, and when pairwise is on the extra
    /// gradient w.r.t. the base features is accumulated into `g_x0`.
    /// `x0` must be the same base matrix used in the forward pass.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_trace(
        &self,
        basis: &BSplineBasis,
        trace: &mut LayerTrace<F>,
        x0: Option<&Matrix<F>>,
        g_out: &Matrix<F>,
        g_coeffs: &mut Matrix<F>,
        g_w_b: &mut Matrix<F>,
        g_w_s: &mut Matrix<F>,
        mut g_x0: Option<&mut Matrix<F>>,
    ) {
        let d = trace.x_eff.cols();
        let k1 = basis.order() + 1;

        matmul_a_bt_accum(g_out, &trace.x_b, g_w_b);
        matmul_a_bt_accum(g_out, &trace.silu_x, g_w_s);

        trace.g_xb.fill(F::zero());
        matmul_at_b_accum(&self.w_b.value, g_out, &mut trace.g_xb);
        trace.g_silu.fill(F::zero());
        matmul_at_b_accum(&self.w_s.value, g_out, &mut trace.g_silu);

        for h in 0..self.eff_in {
            let c_row = self.coeffs.value.row(h);
            let gc_base = h * g_coeffs.cols();
            for c in 0..d {
                let e = h * d + c;
                let gxb = trace.g_xb.data()[e];
                let gsl = trace.g_silu.data()[e];
                let x = trace.x_eff.data()[e];
                let s = trace.sigma.data()[e];
                let mut gx = gsl * silu_grad_from_sigmoid(x, s);
                let span = trace.spans[e];
                if span != OUT_OF_DOMAIN {
                    let start = span as usize;
                    let mut deriv = F::zero();
                    for j in 0..k1 {
                        g_coeffs.data_mut()[gc_base + start + j] += gxb * trace.bvals[e * k1 + j];
                        deriv += c_row[start + j] * trace.bgrads[e * k1 + j];
                    }
                    gx += gxb * deriv;
                }
                trace.g_eff.data_mut()[e] = gx;
            }
        }

        trace.g_in.fill(F::zero());
        let h_rows = self.in_rows;
        let gin_len = h_rows * d;
        {
            let (src, dst) = (&trace.g_eff.data()[..gin_len], trace.g_in.data_mut());
            dst.copy_from_slice(src);
        }
        if self.pairwise {
            let x0 = x0.expect("pairwise layer backward requires base features");
            let m = self.eff_in / self.in_rows - 1;
            for i in 0..h_rows {
                for j in 0..m {
                    let prod = (h_rows + i * m + j) * d;
                    for c in 0..d {
                        let g = trace.g_eff.data()[prod + c];
                        let xi = trace.x_eff.data()[i * d + c];
                        let x0jc = x0.data()[j * d + c];
                        trace.g_in.data_mut()[i * d + c] += g * x0jc;
                        if let Some(gx0) = g_x0.as_deref_mut() {
                            gx0.data_mut()[j * d + c] += g * xi;
                        }
                    }
                }
            }
        }
    }
}

/// `out += a * b` (row-major accumulation, no zeroing).
fn matmul_accum<F: Scalar>(a: &Matrix<F>, b: &Matrix<F>, out: &mut Matrix<F>) {
    debug_assert_eq!(a.cols(), b.rows());
    let n = b.cols();
    for i in 0..a.rows() {
        let a_row = a.row(i);
        for (k, &aik) in a_row.iter().enumerate() {
            let b_base = k * n;
            let out_base = i * n;
            for j in 0..n {
                out.data_mut()[out_base + j] += aik * b.data()[b_base + j];
            }
        }
    }
}

/// Head outputs for one record: probability plus the raw tower logits.
#[derive(Debug, Clone, Copy)]
pub struct HeadOut<F: Scalar> {
    pub y: F,
    pub explicit_logit: Option<F>,
    pub implicit_logit: Option<F>,
}

/// Reusable per-record buffers for forward and backward passes.
#[derive(Debug, Clone, Default)]
pub struct KarseinWorkspace<F: Scalar> {
    x0: Matrix<F>,
    e: Matrix<F>,
    explicit: Vec<LayerTrace<F>>,
    implicit: Vec<LayerTrace<F>>,
    g_head_explicit: Matrix<F>,
    g_head_implicit: Matrix<F>,
    g_x0: Matrix<F>,
}

/// Gradient accumulation buffer aligned with a model's parameter order.
#[derive(Debug, Clone)]
pub struct GradBuffer<F: Scalar> {
    pub mats: Vec<Matrix<F>>,
}

impl<F: Scalar> GradBuffer<F> {
    pub fn zeros_like<M: ParamGrads<F>>(model: &M) -> Self {
        let mats = (0..model.param_count())
            .map(|i| {
                let p = &model.param(i).value;
                Matrix::zeros(p.rows(), p.cols())
            })
            .collect();
        GradBuffer { mats }
    }

    pub fn zero(&mut self) {
        for m in &mut self.mats {
            m.fill(F::zero());
        }
    }

    pub fn add(&mut self, other: &GradBuffer<F>) {
        for (a, b) in self.mats.iter_mut().zip(other.mats.iter()) {
            a.add_scaled(b, F::one());
        }
    }
}

/// The full model.
#[derive(Debug, Clone)]
pub struct KarseinModel<F: Scalar> {
    pub hyper: KarseinHyper,
    pub basis: BSplineBasis,
    pub embedding: EmbeddingTable<F>,
    pub explicit_tower: Vec<KarseinLayer<F>>,
    pub implicit_tower: Vec<KarseinLayer<F>>,
    /// regression weights of the explicit head, D x 1 (absent without it)
    pub w_o: Option<GradSlot<F>>,
}

impl<F: Scalar> KarseinModel<F> {
    pub fn new(hyper: KarseinHyper, vocab_sizes: &[usize], seed: u64) -> Result<Self> {
        let m = vocab_sizes.len();
        if m == 0 {
            return Err(Error::config("at least one feature field required".to_string()));
        }
        let d = hyper.embed_dim;
        if d == 0 {
            return Err(Error::config("embedding dimension must be >= 1".to_string()));
        }
        let basis =
            BSplineBasis::uniform(hyper.grid, hyper.kappa, -hyper.spline_range, hyper.spline_range)?;
        let nb = basis.num_basis();

        let mut rng = crate::rng::seeded(seed, 0);
        let total_vocab: usize = vocab_sizes.iter().sum();
        let emb_weights = crate::rng::normal_matrix(&mut rng, total_vocab, d, 0.05);
        let embedding = EmbeddingTable::new(vocab_sizes, d, emb_weights)?;

        let use_explicit = hyper.towers != TowerSet::ImplicitOnly;
        let use_implicit = hyper.towers != TowerSet::ExplicitOnly;

        let mut explicit_tower = Vec::new();
        if use_explicit {
            let mut widths = vec![m];
            widths.extend_from_slice(&hyper.explicit_hidden);
            widths.push(1);
            for l in 0..widths.len() - 1 {
                let pairwise = hyper.pairwise_layers.contains(&(l + 1));
                explicit_tower.push(KarseinLayer::new(
                    widths[l],
                    widths[l + 1],
                    pairwise,
                    m,
                    nb,
                    &mut rng,
                ));
            }
        }

        let mut implicit_tower = Vec::new();
        if use_implicit {
            let mut widths = vec![m * d];
            widths.extend_from_slice(&hyper.implicit_hidden);
            widths.push(1);
            for l in 0..widths.len() - 1 {
                implicit_tower.push(KarseinLayer::new(
                    widths[l],
                    widths[l + 1],
                    false,
                    m,
                    nb,
                    &mut rng,
                ));
            }
        }

        let w_o = if use_explicit {
            let bound = 1.0 / (d as f64).sqrt();
            Some(GradSlot::new(crate::rng::random_matrix(&mut rng, d, 1, bound)))
        } else {
            None
        };

        Ok(KarseinModel {
            hyper,
            basis,
            embedding,
            explicit_tower,
            implicit_tower,
            w_o,
        })
    }

    pub fn num_fields(&self) -> usize {
        self.embedding.num_fields()
    }

    /// Trainable parameter count excluding the embedding table (the cost
    /// statistic reported for interaction networks).
    pub fn non_embedding_params(&self) -> usize {
        let mut n = 0;
        for l in self.explicit_tower.iter().chain(self.implicit_tower.iter()) {
            n += l.coeffs.value.len() + l.w_b.value.len() + l.w_s.value.len();
        }
        if let Some(w) = &self.w_o {
            n += w.value.len();
        }
        n
    }

    /// Forward pass for one record. Traces stay in `ws` for a following
    /// [`backward_record`](Self::backward_record) call.
    pub fn forward_record(
        &self,
        record: &[u32],
        ws: &mut KarseinWorkspace<F>,
        want_grads: bool,
    ) -> Result<HeadOut<F>> {
        let m = self.num_fields();
        let d = self.embedding.dim();
        if ws.x0.rows() != m || ws.x0.cols() != d {
            ws.x0 = Matrix::zeros(m, d);
            ws.e = Matrix::zeros(m * d, 1);
            ws.g_x0 = Matrix::zeros(m, d);
            ws.g_head_explicit = Matrix::zeros(1, d);
            ws.g_head_implicit = Matrix::zeros(1, 1);
        }
        self.embedding.lookup_into(record, &mut ws.x0)?;

        let mut explicit_logit = None;
        if !self.explicit_tower.is_empty() {
            ws.explicit.resize_with(self.explicit_tower.len(), LayerTrace::default);
            for (l, layer) in self.explicit_tower.iter().enumerate() {
                let x0_opt = layer.pairwise.then_some(&ws.x0);
                if l == 0 {
                    let (input, trace) = (&ws.x0, &mut ws.explicit[0]);
                    layer.forward_trace(l, &self.basis, input, x0_opt, trace, want_grads)?;
                } else {
                    let (head, tail) = ws.explicit.split_at_mut(l);
                    let input = &head[l - 1].x_out;
                    layer.forward_trace(l, &self.basis, input, x0_opt, &mut tail[0], want_grads)?;
                }
            }
            let last = &ws.explicit[self.explicit_tower.len() - 1].x_out;
            let w_o = self.w_o.as_ref().expect("explicit tower implies w_o");
            let mut a = F::zero();
            for c in 0..d {
                a += last.get(0, c) * w_o.value.get(c, 0);
            }
            explicit_logit = Some(a);
        }

        let mut implicit_logit = None;
        if !self.implicit_tower.is_empty() {
            // flatten X^0 row-major into an mD x 1 column
            ws.e.data_mut().copy_from_slice(ws.x0.data());
            ws.implicit.resize_with(self.implicit_tower.len(), LayerTrace::default);
            for (l, layer) in self.implicit_tower.iter().enumerate() {
                if l == 0 {
                    let (input, trace) = (&ws.e, &mut ws.implicit[0]);
                    layer.forward_trace(l, &self.basis, input, None, trace, want_grads)?;
                } else {
                    let (head, tail) = ws.implicit.split_at_mut(l);
                    let input = &head[l - 1].x_out;
                    layer.forward_trace(l, &self.basis, input, None, &mut tail[0], want_grads)?;
                }
            }
            implicit_logit = Some(ws.implicit[self.implicit_tower.len() - 1].x_out.get(0, 0));
        }

        let y = self.head(explicit_logit, implicit_logit)?;
        Ok(HeadOut {
            y,
            explicit_logit,
            implicit_logit,
        })
    }

    /// Combines tower logits into a probability in (0, 1).
    fn head(&self, a: Option<F>, b: Option<F>) -> Result<F> {
        let eps = F::from_f64(PRED_EPS);
        let one = F::one();
        let y = match (a, b) {
            (Some(a), Some(b)) => {
                if !a.is_finite() || !b.is_finite() {
                    return Err(Error::non_finite("head logits".to_string()));
                }
                match self.hyper.head_mode {
                    HeadMode::Mean => (sigmoid(a) + sigmoid(b)) / F::from_f64(2.0),
                    HeadMode::PaperSum => sigmoid(a) + sigmoid(b),
                }
            }
            (Some(a), None) => {
                if !a.is_finite() {
                    return Err(Error::non_finite("explicit head logit".to_string()));
                }
                sigmoid(a)
            }
            (None, Some(b)) => {
                if !b.is_finite() {
                    return Err(Error::non_finite("implicit head logit".to_string()));
                }
                sigmoid(b)
            }
            (None, None) => return Err(Error::config("model has no active tower".to_string())),
        };
        Ok(y.max(eps).min(one - eps))
    }

    /// dy/da and dy/db of the head at the given logits.
    fn head_grads(&self, a: Option<F>, b: Option<F>) -> (F, F) {
        let half = F::from_f64(0.5);
        match (a, b) {
            (Some(a), Some(b)) => {
                let sa = sigmoid(a);
                let sb = sigmoid(b);
                match self.hyper.head_mode {
                    HeadMode::Mean => (sa * (F::one() - sa) * half, sb * (F::one() - sb) * half),
                    HeadMode::PaperSum => {
                        let sum = sa + sb;
                        if sum.to_f64_val() >= 1.0 - PRED_EPS {
                            (F::zero(), F::zero())
                        } else {
                            (sa * (F::one() - sa), sb * (F::one() - sb))
                        }
                    }
                }
            }
            (Some(a), None) => {
                let sa = sigmoid(a);
                (sa * (F::one() - sa), F::zero())
            }
            (None, Some(b)) => {
                let sb = sigmoid(b);
                (F::zero(), sb * (F::one() - sb))
            }
            (None, None) => (F::zero(), F::zero()),
        }
    }

    /// Backward pass for one record using the traces left by
    /// [`forward_record`](Self::forward_record) with `want_grads = true`.
    /// Accumulates `dl_dy * dy/dθ` into `grads` (same parameter order as
    /// [`ParamGrads`]).
    pub fn backward_record(
        &self,
        record: &[u32],
        head: &HeadOut<F>,
        dl_dy: F,
        ws: &mut KarseinWorkspace<F>,
        grads: &mut GradBuffer<F>,
    ) -> Result<()> {
        let d = self.embedding.dim();
        let (dy_da, dy_db) = self.head_grads(head.explicit_logit, head.implicit_logit);
        ws.g_x0.fill(F::zero());

        // explicit tower
        if !self.explicit_tower.is_empty() {
            let dl_da = dl_dy * dy_da;
            let w_o = self.w_o.as_ref().expect("explicit tower implies w_o");
            let w_o_idx = self.param_count() - 1;
            let last_idx = self.explicit_tower.len() - 1;
            // head: a = X^T . w_o
            {
                let x_t = &ws.explicit[last_idx].x_out;
                let g_wo = &mut grads.mats[w_o_idx];
                for c in 0..d {
                    let g = g_wo.get(c, 0) + dl_da * x_t.get(0, c);
                    g_wo.set(c, 0, g);
                    ws.g_head_explicit.set(0, c, dl_da * w_o.value.get(c, 0));
                }
            }
            for l in (0..self.explicit_tower.len()).rev() {
                let layer = &self.explicit_tower[l];
                let base = self.explicit_param_base(l);
                let x0_opt = layer.pairwise.then_some(&ws.x0);
                // split the gradient buffer to borrow three matrices at once
                let (gc, gwb, gws) = three_mut(&mut grads.mats, base);
                if l == last_idx {
                    layer.backward_trace(
                        &self.basis,
                        &mut ws.explicit[l],
                        x0_opt,
                        &ws.g_head_explicit,
                        gc,
                        gwb,
                        gws,
                        Some(&mut ws.g_x0),
                    );
                } else {
                    let (head_traces, tail) = ws.explicit.split_at_mut(l + 1);
                    let g_out = &tail[0].g_in;
                    layer.backward_trace(
                        &self.basis,
                        &mut head_traces[l],
                        x0_opt,
                        g_out,
                        gc,
                        gwb,
                        gws,
                        Some(&mut ws.g_x0),
                    );
                }
            }
            // layer 0's input is X^0 itself
            ws.g_x0.add_scaled(&ws.explicit[0].g_in, F::one());
        }

        // implicit tower
        if !self.implicit_tower.is_empty() {
            let dl_db = dl_dy * dy_db;
            ws.g_head_implicit.set(0, 0, dl_db);
            let last_idx = self.implicit_tower.len() - 1;
            for l in (0..self.implicit_tower.len()).rev() {
                let layer = &self.implicit_tower[l];
                let base = self.implicit_param_base(l);
                let (gc, gwb, gws) = three_mut(&mut grads.mats, base);
                if l == last_idx {
                    layer.backward_trace(
                        &self.basis,
                        &mut ws.implicit[l],
                        None,
                        &ws.g_head_implicit,
                        gc,
                        gwb,
                        gws,
                        None,
                    );
                } else {
                    let (head_traces, tail) = ws.implicit.split_at_mut(l + 1);
                    let g_out = &tail[0].g_in;
                    layer.backward_trace(
                        &self.basis,
                        &mut head_traces[l],
                        None,
                        g_out,
                        gc,
                        gwb,
                        gws,
                        None,
                    );
                }
            }
            // fold the mD x 1 gradient back into X^0 layout
            let g_e = &ws.implicit[0].g_in;
            for i in 0..ws.g_x0.len() {
                let v = ws.g_x0.data()[i] + g_e.data()[i];
                ws.g_x0.data_mut()[i] = v;
            }
        }

        // embedding rows
        let g_emb = &mut grads.mats[0];
        for (f, &v) in record.iter().enumerate() {
            let row = self.embedding.row_index(f, v)?;
            let dst = row * d;
            let src = f * d;
            for c in 0..d {
                g_emb.data_mut()[dst + c] += ws.g_x0.data()[src + c];
            }
        }
        Ok(())
    }

    fn explicit_param_base(&self, layer: usize) -> usize {
        1 + 3 * layer
    }

    fn implicit_param_base(&self, layer: usize) -> usize {
        1 + 3 * self.explicit_tower.len() + 3 * layer
    }

    /// Zeroes gradient entries belonging to masked (frozen) input rows.
    pub fn apply_grad_masks(&self, grads: &mut GradBuffer<F>) {
        for (tower, base_of) in [
            (&self.explicit_tower, true),
            (&self.implicit_tower, false),
        ] {
            for (l, layer) in tower.iter().enumerate() {
                if layer.mask.is_empty() {
                    continue;
                }
                let base = if base_of {
                    self.explicit_param_base(l)
                } else {
                    self.implicit_param_base(l)
                };
                let nb = layer.coeffs.value.cols();
                for (row, &masked) in layer.mask.iter().enumerate() {
                    if !masked {
                        continue;
                    }
                    // C row
                    grads.mats[base].data_mut()[row * nb..(row + 1) * nb].fill(F::zero());
                    // W_b / W_s columns
                    for offset in [1, 2] {
                        let mat = &mut grads.mats[base + offset];
                        for out in 0..layer.out_rows {
                            mat.set(out, row, F::zero());
                        }
                    }
                }
            }
        }
    }

    /// The W_b/W_s parameter indices (the ones sparsity regularization hits).
    pub fn combination_weight_indices(&self) -> Vec<usize> {
        let mut idx = Vec::new();
        for l in 0..self.explicit_tower.len() {
            let base = self.explicit_param_base(l);
            idx.push(base + 1);
            idx.push(base + 2);
        }
        for l in 0..self.implicit_tower.len() {
            let base = self.implicit_param_base(l);
            idx.push(base + 1);
            idx.push(base + 2);
        }
        idx
    }
}

/// Disjoint `&mut` to three consecutive matrices of a gradient buffer.
fn three_mut<F: Scalar>(
    mats: &mut [Matrix<F>],
    base: usize,
) -> (&mut Matrix<F>, &mut Matrix<F>, &mut Matrix<F>) {
    let (a, rest) = mats[base..].split_first_mut().expect("param index in range");
    let (b, rest) = rest.split_first_mut().expect("param index in range");
    let (c, _) = rest.split_first_mut().expect("param index in range");
    (a, b, c)
}

impl<F: Scalar> ParamGrads<F> for KarseinModel<F> {
    fn param_count(&self) -> usize {
        1 + 3 * (self.explicit_tower.len() + self.implicit_tower.len())
            + usize::from(self.w_o.is_some())
    }

    fn param_name(&self, idx: usize) -> String {
        if idx == 0 {
            return "embedding".to_string();
        }
        let i = idx - 1;
        let ne = 3 * self.explicit_tower.len();
        let part = ["C", "W_b", "W_s"];
        if i < ne {
            return format!("explicit.{}.{}", i / 3, part[i % 3]);
        }
        let i = i - ne;
        let ni = 3 * self.implicit_tower.len();
        if i < ni {
            return format!("implicit.{}.{}", i / 3, part[i % 3]);
        }
        "W_o".to_string()
    }

    fn param(&self, idx: usize) -> &GradSlot<F> {
        if idx == 0 {
            return &self.embedding.weights;
        }
        let i = idx - 1;
        let ne = 3 * self.explicit_tower.len();
        if i < ne {
            let layer = &self.explicit_tower[i / 3];
            return [&layer.coeffs, &layer.w_b, &layer.w_s][i % 3];
        }
        let i = i - ne;
        let ni = 3 * self.implicit_tower.len();
        if i < ni {
            let layer = &self.implicit_tower[i / 3];
            return [&layer.coeffs, &layer.w_b, &layer.w_s][i % 3];
        }
        self.w_o.as_ref().expect("index validated by param_count")
    }

    fn param_mut(&mut self, idx: usize) -> &mut GradSlot<F> {
        if idx == 0 {
            return &mut self.embedding.weights;
        }
        let i = idx - 1;
        let ne = 3 * self.explicit_tower.len();
        if i < ne {
            let layer = &mut self.explicit_tower[i / 3];
            return [&mut layer.coeffs, &mut layer.w_b, &mut layer.w_s]
                .into_iter()
                .nth(i % 3)
                .unwrap();
        }
        let i = i - ne;
        let ni = 3 * self.implicit_tower.len();
        if i < ni {
            let layer = &mut self.implicit_tower[i / 3];
            return [&mut layer.coeffs, &mut layer.w_b, &mut layer.w_s]
                .into_iter()
                .nth(i % 3)
                .unwrap();
        }
        self.w_o.as_mut().expect("index validated by param_count")
    }
}

impl<F: Scalar> KarseinModel<F> {
    /// Same model re-instantiated at a different precision.
    pub fn cast<G: Scalar>(&self) -> KarseinModel<G> {
        KarseinModel {
            hyper: self.hyper.clone(),
            basis: self.basis.clone(),
            embedding: EmbeddingTable {
                dim: self.embedding.dim,
                vocab_sizes: self.embedding.vocab_sizes.clone(),
                offsets: self.embedding.offsets.clone(),
                weights: self.embedding.weights.cast(),
            },
            explicit_tower: self.explicit_tower.iter().map(cast_layer).collect(),
            implicit_tower: self.implicit_tower.iter().map(cast_layer).collect(),
            w_o: self.w_o.as_ref().map(|w| w.cast()),
        }
    }
}

fn cast_layer<F: Scalar, G: Scalar>(l: &KarseinLayer<F>) -> KarseinLayer<G> {
    KarseinLayer {
        in_rows: l.in_rows,
        out_rows: l.out_rows,
        pairwise: l.pairwise,
        eff_in: l.eff_in,
        coeffs: l.coeffs.cast(),
        w_b: l.w_b.cast(),
        w_s: l.w_s.cast(),
        mask: l.mask.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_model(seed: u64) -> KarseinModel<f64> {
        let hyper = KarseinHyper {
            embed_dim: 4,
            kappa: 2,
            grid: 5,
            explicit_hidden: vec![4],
            implicit_hidden: vec![4],
            ..KarseinHyper::default()
        };
        KarseinModel::new(hyper, &[3, 4, 2], seed).unwrap()
    }

    #[test]
    fn lookup_shape_and_determinism() {
        let model = tiny_model(1);
        let mut a = Matrix::zeros(3, 4);
        let mut b = Matrix::zeros(3, 4);
        model.embedding.lookup_into(&[1, 2, 0], &mut a).unwrap();
        model.embedding.lookup_into(&[1, 2, 0], &mut b).unwrap();
        assert_eq!(a, b);
        assert!(model.embedding.lookup_into(&[0, 0], &mut a).is_err());
    }

    #[test]
    fn oov_lookup_uses_reserved_rows() {
        let model = tiny_model(2);
        let mut x = Matrix::zeros(3, 4);
        model.embedding.lookup_into(&[0, 0, 0], &mut x).unwrap();
        for f in 0..3 {
            let row0 = model.embedding.row_index(f, 0).unwrap();
            for c in 0..4 {
                assert_eq!(x.get(f, c), model.embedding.weights.value.get(row0, c));
            }
        }
    }

    #[test]
    fn pairwise_count_and_identity() {
        let x = Matrix::from_rows(&[
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![5.0, 6.0],
            vec![7.0, 8.0],
        ])
        .unwrap();
        let x0 = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let out = pairwise_multiply(&x, &x0).unwrap();
        assert_eq!(out.rows(), 16); // 4 * (1 + 3)
        for i in 0..4 {
            for j in 0..3 {
                assert_eq!(out.row(4 + i * 3 + j), x.row(i), "all-ones base row");
            }
        }
    }

    #[test]
    fn pairwise_golden_ordering() {
        // distinguishable entries so the (i outer, j inner) order is pinned
        let x = Matrix::from_rows(&[vec![2.0], vec![3.0]]).unwrap();
        let x0 = Matrix::from_rows(&[vec![5.0], vec![7.0]]).unwrap();
        let out = pairwise_multiply(&x, &x0).unwrap();
        let got: Vec<f64> = out.data().to_vec();
        assert_eq!(got, vec![2.0, 3.0, 10.0, 14.0, 15.0, 21.0]);
    }

    #[test]
    fn pairwise_dim_mismatch() {
        let x = Matrix::<f64>::zeros(2, 3);
        let x0 = Matrix::<f64>::zeros(2, 4);
        assert!(pairwise_multiply(&x, &x0).is_err());
    }

    #[test]
    fn first_layer_products_cover_all_second_order_pairs() {
        let mut rng = crate::rng::seeded(4, 0);
        let x0 = crate::rng::random_matrix::<f64>(&mut rng, 3, 4, 1.0);
        let out = pairwise_multiply(&x0, &x0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let row = out.row(3 + i * 3 + j);
                for c in 0..4 {
                    assert_relative_eq!(row[c], x0.get(i, c) * x0.get(j, c));
                }
            }
        }
    }

    #[test]
    fn activation_transform_matches_naive_loops() {
        let basis = BSplineBasis::uniform(5, 2, -1.0, 1.0).unwrap();
        let mut rng = crate::rng::seeded(8, 0);
        let x = crate::rng::random_matrix::<f64>(&mut rng, 3, 4, 1.2); // some out-of-domain
        let coeffs = crate::rng::random_matrix::<f64>(&mut rng, 3, basis.num_basis(), 1.0);
        let fast = activation_transform(&x, &coeffs, &basis).unwrap();
        for h in 0..3 {
            for d in 0..4 {
                let dense = basis.eval(x.get(h, d));
                let mut acc = 0.0;
                for (i, b) in dense.iter().enumerate() {
                    acc += coeffs.get(h, i) * b;
                }
                assert_relative_eq!(fast.get(h, d), acc, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn activation_transform_zero_coeffs() {
        let basis = BSplineBasis::uniform(5, 2, -1.0, 1.0).unwrap();
        let x = Matrix::from_rows(&[vec![0.3, -0.2]]).unwrap();
        let coeffs = Matrix::zeros(1, basis.num_basis());
        let out = activation_transform(&x, &coeffs, &basis).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn column_locality_of_spline_rows() {
        // perturbing C[h,:] must only change row h of the transform
        let basis = BSplineBasis::uniform(5, 2, -1.0, 1.0).unwrap();
        let mut rng = crate::rng::seeded(12, 0);
        let x = crate::rng::random_matrix::<f64>(&mut rng, 4, 3, 0.9);
        let mut coeffs = crate::rng::random_matrix::<f64>(&mut rng, 4, basis.num_basis(), 1.0);
        let before = activation_transform(&x, &coeffs, &basis).unwrap();
        for c in 0..basis.num_basis() {
            coeffs.set(2, c, coeffs.get(2, c) + 0.5);
        }
        let after = activation_transform(&x, &coeffs, &basis).unwrap();
        for h in 0..4 {
            for d in 0..3 {
                if h == 2 {
                    continue;
                }
                assert_eq!(before.get(h, d), after.get(h, d));
            }
        }
    }

    /// Naive reference for a full layer forward.
    fn layer_forward_oracle(
        layer: &KarseinLayer<f64>,
        basis: &BSplineBasis,
        x_in: &Matrix<f64>,
        x0: Option<&Matrix<f64>>,
    ) -> Matrix<f64> {
        let x_eff = if layer.pairwise {
            pairwise_multiply(x_in, x0.unwrap()).unwrap()
        } else {
            x_in.clone()
        };
        let x_b = activation_transform(&x_eff, &layer.coeffs.value, basis).unwrap();
        let silu_x = x_eff.map(crate::matrix::silu);
        let mut out = layer.w_b.value.matmul(&x_b).unwrap();
        let res = layer.w_s.value.matmul(&silu_x).unwrap();
        out.add_scaled(&res, 1.0);
        out
    }

    #[test]
    fn layer_forward_matches_oracle() {
        let basis = BSplineBasis::uniform(5, 2, -1.0, 1.0).unwrap();
        let mut rng = crate::rng::seeded(21, 0);
        for case in 0..20 {
            let pairwise = case % 2 == 0;
            let layer = KarseinLayer::<f64>::new(3, 2, pairwise, 2, basis.num_basis(), &mut rng);
            let x_in = crate::rng::random_matrix::<f64>(&mut rng, 3, 4, 1.1);
            let x0 = crate::rng::random_matrix::<f64>(&mut rng, 2, 4, 1.1);
            let mut trace = LayerTrace::default();
            layer
                .forward_trace(0, &basis, &x_in, pairwise.then_some(&x0), &mut trace, false)
                .unwrap();
            let oracle = layer_forward_oracle(&layer, &basis, &x_in, pairwise.then_some(&x0));
            for (a, b) in trace.x_out.data().iter().zip(oracle.data()) {
                assert_relative_eq!(a, b, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn layer_zero_weights_zero_output() {
        let basis = BSplineBasis::uniform(5, 2, -1.0, 1.0).unwrap();
        let mut rng = crate::rng::seeded(22, 0);
        let mut layer = KarseinLayer::<f64>::new(3, 2, false, 3, basis.num_basis(), &mut rng);
        layer.w_b.value.fill(0.0);
        layer.w_s.value.fill(0.0);
        let x = crate::rng::random_matrix::<f64>(&mut rng, 3, 4, 1.0);
        let mut trace = LayerTrace::default();
        layer.forward_trace(0, &basis, &x, None, &mut trace, false).unwrap();
        assert!(trace.x_out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_identity_residual_is_silu() {
        let basis = BSplineBasis::uniform(5, 2, -1.0, 1.0).unwrap();
        let mut rng = crate::rng::seeded(23, 0);
        let mut layer = KarseinLayer::<f64>::new(3, 3, false, 3, basis.num_basis(), &mut rng);
        layer.w_b.value.fill(0.0);
        let mut id = Matrix::identity(3);
        std::mem::swap(&mut layer.w_s.value, &mut id);
        let x = crate::rng::random_matrix::<f64>(&mut rng, 3, 2, 1.0);
        let mut trace = LayerTrace::default();
        layer.forward_trace(0, &basis, &x, None, &mut trace, false).unwrap();
        for (o, i) in trace.x_out.data().iter().zip(x.data()) {
            assert_relative_eq!(o, &crate::matrix::silu(*i), epsilon = 1e-12);
        }
    }

    #[test]
    fn selector_weights_pick_one_product_row() {
        // explicit first layer, m=2, weights selecting the e1⊙e2 row: the
        // output must equal that row's spline image (W_s = 0 kills SiLU)
        let basis = BSplineBasis::uniform(5, 2, -1.0, 1.0).unwrap();
        let mut rng = crate::rng::seeded(24, 0);
        let mut layer = KarseinLayer::<f64>::new(2, 1, true, 2, basis.num_basis(), &mut rng);
        layer.w_s.value.fill(0.0);
        layer.w_b.value.fill(0.0);
        // rows: [e1, e2, e1⊙e1, e1⊙e2, e2⊙e1, e2⊙e2]; select index 3
        layer.w_b.value.set(0, 3, 1.0);
        let x0 = crate::rng::random_matrix::<f64>(&mut rng, 2, 3, 0.7);
        let mut trace = LayerTrace::default();
        layer.forward_trace(0, &basis, &x0, Some(&x0), &mut trace, false).unwrap();
        let c_row = layer.coeffs.value.row(3);
        for c in 0..3 {
            let prod = x0.get(0, c) * x0.get(1, c);
            let expect: f64 = basis.spline_value(c_row, prod);
            assert_relative_eq!(trace.x_out.get(0, c), expect, epsilon = 1e-9);
        }
    }

    #[test]
    fn tower_composition_matches_chained_oracles() {
        let model = tiny_model(31);
        let mut ws = KarseinWorkspace::default();
        let rec = [1u32, 2, 1];
        let head = model.forward_record(&rec, &mut ws, false).unwrap();

        // independent recomputation layer by layer
        let mut x0 = Matrix::zeros(3, 4);
        model.embedding.lookup_into(&rec, &mut x0).unwrap();
        let mut x = x0.clone();
        for layer in &model.explicit_tower {
            let x0_opt = layer.pairwise.then_some(&x0);
            x = layer_forward_oracle(layer, &model.basis, &x, x0_opt);
        }
        let mut a = 0.0;
        for c in 0..4 {
            a += x.get(0, c) * model.w_o.as_ref().unwrap().value.get(c, 0);
        }
        assert_relative_eq!(head.explicit_logit.unwrap(), a, epsilon = 1e-6);

        let mut e = x0.clone();
        e.reshape(12, 1).unwrap();
        let mut z = e;
        for layer in &model.implicit_tower {
            z = layer_forward_oracle(layer, &model.basis, &z, None);
        }
        assert_relative_eq!(head.implicit_logit.unwrap(), z.get(0, 0), epsilon = 1e-6);
    }

    #[test]
    fn implicit_first_layer_width_is_m_times_d() {
        let hyper = KarseinHyper::default();
        let model = KarseinModel::<f32>::new(hyper, &[10, 10, 2, 7, 21, 18], 3).unwrap();
        assert_eq!(model.implicit_tower[0].in_rows, 6 * 16);
        // explicit default 8-8 tower ends in a single 1 x D interaction
        assert_eq!(model.explicit_tower.last().unwrap().out_rows, 1);
    }

    #[test]
    fn head_modes() {
        let mut model = tiny_model(40);
        model.hyper.head_mode = HeadMode::Mean;
        assert_relative_eq!(model.head(Some(0.0), Some(0.0)).unwrap(), 0.5);
        model.hyper.head_mode = HeadMode::PaperSum;
        let y = model.head(Some(0.0), Some(0.0)).unwrap();
        assert_relative_eq!(y, 1.0 - PRED_EPS, epsilon = 1e-12);
        // mean mode limit: b -> -inf leaves sigmoid(a)/2
        model.hyper.head_mode = HeadMode::Mean;
        let y = model.head(Some(1.0), Some(-60.0)).unwrap();
        assert_relative_eq!(y, sigmoid(1.0f64) / 2.0, epsilon = 1e-9);
    }

    #[test]
    fn head_rejects_non_finite_logits() {
        let model = tiny_model(41);
        assert!(model.head(Some(f64::NAN), Some(0.0)).is_err());
    }

    #[test]
    fn predictions_stay_in_open_unit_interval() {
        for seed in 0..3u64 {
            let mut model = tiny_model(100 + seed);
            for mode in [HeadMode::Mean, HeadMode::PaperSum] {
                model.hyper.head_mode = mode;
                let mut ws = KarseinWorkspace::default();
                for rec in [[0u32, 0, 0], [1, 2, 1], [2, 3, 1]] {
                    let head = model.forward_record(&rec, &mut ws, false).unwrap();
                    assert!(head.y > 0.0 && head.y < 1.0, "y = {}", head.y);
                }
            }
        }
    }

    #[test]
    fn param_names_cover_all_slots() {
        let model = tiny_model(50);
        let names: Vec<String> =
            (0..model.param_count()).map(|i| model.param_name(i)).collect();
        assert_eq!(names[0], "embedding");
        assert!(names.contains(&"explicit.0.C".to_string()));
        assert!(names.contains(&"explicit.1.W_s".to_string()));
        assert!(names.contains(&"implicit.0.W_b".to_string()));
        assert_eq!(names.last().unwrap(), "W_o");
        assert_eq!(names.len(), 1 + 3 * 2 + 3 * 2 + 1);
    }

    #[test]
    fn batch_independence_of_predictions() {
        let model = tiny_model(60);
        let recs: Vec<[u32; 3]> = vec![[0, 1, 0], [1, 2, 1], [2, 0, 1], [1, 3, 0]];
        let mut ws = KarseinWorkspace::default();
        let together: Vec<f64> = recs
            .iter()
            .map(|r| model.forward_record(r, &mut ws, false).unwrap().y)
            .collect();
        for (i, r) in recs.iter().enumerate() {
            let mut fresh = KarseinWorkspace::default();
            let alone = model.forward_record(r, &mut fresh, false).unwrap().y;
            assert_eq!(together[i], alone);
        }
    }

    #[test]
    fn degenerates_to_silu_linear_network() {
        // pairwise off everywhere, C = 0: each layer is W_s * SiLU(x), which
        // an MLP oracle with SiLU activations must reproduce
        let hyper = KarseinHyper {
            embed_dim: 3,
            explicit_hidden: vec![4],
            implicit_hidden: vec![],
            pairwise_layers: vec![],
            towers: TowerSet::ExplicitOnly,
            kappa: 2,
            grid: 5,
            ..KarseinHyper::default()
        };
        let mut model = KarseinModel::<f64>::new(hyper, &[3, 3], 7).unwrap();
        for layer in &mut model.explicit_tower {
            layer.coeffs.value.fill(0.0);
        }
        let rec = [1u32, 2];
        let mut ws = KarseinWorkspace::default();
        let head = model.forward_record(&rec, &mut ws, false).unwrap();

        let mut x = Matrix::zeros(2, 3);
        model.embedding.lookup_into(&rec, &mut x).unwrap();
        let mut cur = x;
        for layer in &model.explicit_tower {
            let act = cur.map(crate::matrix::silu);
            cur = layer.w_s.value.matmul(&act).unwrap();
        }
        let mut a = 0.0;
        for c in 0..3 {
            a += cur.get(0, c) * model.w_o.as_ref().unwrap().value.get(c, 0);
        }
        assert_relative_eq!(head.explicit_logit.unwrap(), a, epsilon = 1e-6);
    }
}
