//! Post-training interpretation: connection-strength maps, redundant-feature
//! detection with masked fine-tuning, activation-curve sampling, and cubic
//! least-squares fits of learned activations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::EncodedDataset;
use crate::error::{Error, Result};
use crate::matrix::{Matrix, Scalar};
use crate::model::KarseinModel;
use crate::training::{evaluate, train, TrainConfig, TrainReport};

/// Connection strength of one layer: `S[out, in] = |W_b| + |W_s|`.
#[derive(Debug, Clone)]
pub struct LayerMap {
    pub tower: String,
    pub layer: usize,
    pub strength: Matrix<f64>,
}

pub fn connection_map<F: Scalar>(model: &KarseinModel<F>) -> Vec<LayerMap> {
    let mut maps = Vec::new();
    for (tower, layers) in [
        ("explicit", &model.explicit_tower),
        ("implicit", &model.implicit_tower),
    ] {
        for (l, layer) in layers.iter().enumerate() {
            let mut s = Matrix::zeros(layer.out_rows, layer.eff_in);
            for o in 0..layer.out_rows {
                for i in 0..layer.eff_in {
                    let v = layer.w_b.value.get(o, i).abs().to_f64_val()
                        + layer.w_s.value.get(o, i).abs().to_f64_val();
                    s.set(o, i, v);
                }
            }
            maps.push(LayerMap {
                tower: tower.to_string(),
                layer: l,
                strength: s,
            });
        }
    }
    maps
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRedundancy {
    pub tower: String,
    pub layer: usize,
    pub eff_in: usize,
    pub redundant_rows: Vec<usize>,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RedundancyReport {
    pub threshold: f64,
    pub layers: Vec<LayerRedundancy>,
}

impl RedundancyReport {
    pub fn total_redundant(&self) -> usize {
        self.layers.iter().map(|l| l.redundant_rows.len()).sum()
    }
}

/// An input row is redundant when its strongest connection to any output is
/// at or below the threshold.
pub fn find_redundant(maps: &[LayerMap], threshold: f64) -> RedundancyReport {
    let mut layers = Vec::new();
    for map in maps {
        let s = &map.strength;
        let mut redundant = Vec::new();
        for i in 0..s.cols() {
            let max_out = (0..s.rows()).map(|o| s.get(o, i)).fold(0.0f64, f64::max);
            if max_out <= threshold {
                redundant.push(i);
            }
        }
        layers.push(LayerRedundancy {
            tower: map.tower.clone(),
            layer: map.layer,
            eff_in: s.cols(),
            ratio: redundant.len() as f64 / s.cols() as f64,
            redundant_rows: redundant,
        });
    }
    RedundancyReport { threshold, layers }
}

#[derive(Debug)]
pub struct MaskOutcome<F: Scalar> {
    pub model: KarseinModel<F>,
    pub before_test_auc: f64,
    pub after_test_auc: f64,
    pub finetune_report: Option<TrainReport>,
}

/// Freezes the redundant input rows at zero (their W_b/W_s columns and C
/// rows) and fine-tunes for a few epochs. An empty report is an exact no-op.
pub fn mask_and_finetune<F: Scalar>(
    model: &KarseinModel<F>,
    report: &RedundancyReport,
    data: &EncodedDataset,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<MaskOutcome<F>> {
    let threads = crate::training::effective_threads(cfg.threads);
    let (before_test_auc, _) = evaluate(model, data, &data.test_idx, threads)?;
    let mut masked = model.clone();

    if report.total_redundant() == 0 {
        return Ok(MaskOutcome {
            model: masked,
            before_test_auc,
            after_test_auc: before_test_auc,
            finetune_report: None,
        });
    }

    for entry in &report.layers {
        let layers = match entry.tower.as_str() {
            "explicit" => &mut masked.explicit_tower,
            "implicit" => &mut masked.implicit_tower,
            other => return Err(Error::config(format!("unknown tower '{other}'"))),
        };
        let layer = layers.get_mut(entry.layer).ok_or_else(|| {
            Error::config(format!("layer {} out of range for {}", entry.layer, entry.tower))
        })?;
        if entry.redundant_rows.len() >= layer.eff_in {
            return Err(Error::config(format!(
                "masking all {} inputs of {} layer {}",
                layer.eff_in, entry.tower, entry.layer
            )));
        }
        layer.mask = vec![false; layer.eff_in];
        let nb = layer.coeffs.value.cols();
        for &row in &entry.redundant_rows {
            layer.mask[row] = true;
            layer.coeffs.value.data_mut()[row * nb..(row + 1) * nb].fill(F::zero());
            for out in 0..layer.out_rows {
                layer.w_b.value.set(out, row, F::zero());
                layer.w_s.value.set(out, row, F::zero());
            }
        }
    }

    let finetune_cfg = TrainConfig {
        max_epochs: epochs,
        patience: epochs.max(1),
        ..cfg.clone()
    };
    let finetune_report = train(&mut masked, data, &finetune_cfg, |_| {})?;
    let (after_test_auc, _) = evaluate(&masked, data, &data.test_idx, threads)?;
    Ok(MaskOutcome {
        model: masked,
        before_test_auc,
        after_test_auc,
        finetune_report: Some(finetune_report),
    })
}

/// Samples the spline component of one learned activation:
/// `ys[k] = sum_i N_i(xs[k]) * C[row, i]`.
pub fn sample_activation<F: Scalar>(
    model: &KarseinModel<F>,
    tower: &str,
    layer: usize,
    row: usize,
    xs: &[f64],
) -> Result<Vec<f64>> {
    let layers = match tower {
        "explicit" => &model.explicit_tower,
        "implicit" => &model.implicit_tower,
        other => return Err(Error::config(format!("unknown tower '{other}'"))),
    };
    let l = layers
        .get(layer)
        .ok_or_else(|| Error::config(format!("layer {layer} out of range for {tower}")))?;
    if row >= l.eff_in {
        return Err(Error::config(format!(
            "input row {row} out of range (eff_in = {})",
            l.eff_in
        )));
    }
    let coeffs: Vec<f64> = l.coeffs.value.row(row).iter().map(|v| v.to_f64_val()).collect();
    Ok(xs.iter().map(|&x| model.basis.spline_value(&coeffs, x)).collect())
}

/// Least-squares cubic fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CubicFit {
    /// a0 + a1 x + a2 x^2 + a3 x^3
    pub coeffs: [f64; 4],
    pub r2: f64,
    pub domain: (f64, f64),
}

impl CubicFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs[0] + x * (self.coeffs[1] + x * (self.coeffs[2] + x * self.coeffs[3]))
    }
}

/// Solves `A x = b` in place by Gaussian elimination with partial pivoting;
/// the solution replaces `b`. `a` is n x n row-major and is destroyed.
pub(crate) fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Result<()> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[pivot * n + col].abs() {
                pivot = r;
            }
        }
        if a[pivot * n + col].abs() < 1e-12 {
            return Err(Error::config("singular system (degenerate inputs)".to_string()));
        }
        if pivot != col {
            for c in 0..n {
                a.swap(col * n + c, pivot * n + c);
            }
            b.swap(col, pivot);
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let factor = a[r * n + col] / d;
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                a[r * n + c] -= factor * a[col * n + c];
            }
            b[r] -= factor * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = b[col];
        for c in col + 1..n {
            acc -= a[col * n + c] * b[c];
        }
        b[col] = acc / a[col * n + col];
    }
    Ok(())
}

/// Degree-3 least squares via the normal equations.
///
/// Needs at least 8 samples. `R^2 = 1 - SS_res / SS_tot`; for constant `ys`
/// (`SS_tot = 0`) the convention is 1 when the residual is zero, else 0.
pub fn fit_cubic(xs: &[f64], ys: &[f64]) -> Result<CubicFit> {
    if xs.len() != ys.len() {
        return Err(Error::data(format!("{} xs vs {} ys", xs.len(), ys.len())));
    }
    if xs.len() < 8 {
        return Err(Error::data(format!("need >= 8 samples, got {}", xs.len())));
    }
    let n = 4usize;
    let mut ata = vec![0.0f64; n * n];
    let mut atb = vec![0.0f64; n];
    for (&x, &y) in xs.iter().zip(ys) {
        let powers = [1.0, x, x * x, x * x * x];
        for i in 0..n {
            atb[i] += powers[i] * y;
            for j in 0..n {
                ata[i * n + j] += powers[i] * powers[j];
            }
        }
    }
    solve_dense(&mut ata, &mut atb, n)?;
    let coeffs = [atb[0], atb[1], atb[2], atb[3]];
    let fit = CubicFit {
        coeffs,
        r2: 0.0,
        domain: (
            xs.iter().cloned().fold(f64::INFINITY, f64::min),
            xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        ),
    };
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        ss_res += (y - fit.eval(x)).powi(2);
        ss_tot += (y - mean).powi(2);
    }
    let r2 = if ss_tot == 0.0 {
        if ss_res <= 1e-18 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(CubicFit { r2, ..fit })
}

// ---------------------------------------------------------------------------
// CSV / SVG export
// ---------------------------------------------------------------------------

pub fn write_xy_csv(path: &Path, xs: &[f64], ys: &[f64]) -> Result<()> {
    let mut s = String::from("x,y\n");
    for (x, y) in xs.iter().zip(ys) {
        s.push_str(&format!("{x},{y}\n"));
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_matrix_csv(path: &Path, m: &Matrix<f64>) -> Result<()> {
    let mut s = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Matrix<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|e| Error::data(format!("bad csv number: {e}")))?);
    }
    Matrix::from_rows(&rows)
}

/// Self-contained polyline plot.
pub fn write_svg_curve(path: &Path, xs: &[f64], ys: &[f64], title: &str) -> Result<()> {
    let (w, h, margin) = (480.0, 320.0, 40.0);
    let (x_min, x_max) = bounds(xs);
    let (y_min, y_max) = bounds(ys);
    let x_span = (x_max - x_min).max(1e-12);
    let y_span = (y_max - y_min).max(1e-12);
    let sx = |x: f64| margin + (x - x_min) / x_span * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - y_min) / y_span * (h - 2.0 * margin);
    let points: Vec<String> = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
        .collect();
    let svg = format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\" ",
            "font-family=\"sans-serif\">{title}</text>\n",
            "<line x1=\"{m}\" y1=\"{ybase}\" x2=\"{xr}\" y2=\"{ybase}\" stroke=\"#999\"/>\n",
            "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{ybase}\" stroke=\"#999\"/>\n",
            "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"{pts}\"/>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        tx = w / 2.0,
        title = title,
        m = margin,
        ybase = h - margin,
        xr = w - margin,
        pts = points.join(" ")
    );
    std::fs::write(path, svg)?;
    Ok(())
}

/// Self-contained heat map; cell intensity is the normalized magnitude.
pub fn write_svg_heatmap(path: &Path, m: &Matrix<f64>, title: &str) -> Result<()> {
    let cell = (600.0 / m.cols().max(1) as f64).min(24.0).max(2.0);
    let (w, h, top) = (
        m.cols() as f64 * cell + 20.0,
        m.rows() as f64 * cell + 40.0,
        30.0,
    );
    let max = m.data().iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let mut rects = String::new();
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            let v = (m.get(r, c) / max).clamp(0.0, 1.0);
            let shade = (255.0 * (1.0 - v)) as u8;
            rects.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"rgb({sh},{sh},255)\"/>\n",
                10.0 + c as f64 * cell,
                top + r as f64 * cell,
                cell,
                cell,
                sh = shade
            ));
        }
    }
    let svg = format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"18\" text-anchor=\"middle\" font-size=\"12\" ",
            "font-family=\"sans-serif\">{title}</text>\n",
            "{rects}</svg>\n"
        ),
        w = w,
        h = h,
        tx = w / 2.0,
        title = title,
        rects = rects
    );
    std::fs::write(path, svg)?;
    Ok(())
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}
