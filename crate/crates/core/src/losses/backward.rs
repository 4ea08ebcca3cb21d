//! Forward pass plus hand-derived backward pass for every variant.
//!
//! Gradients are taken with respect to the raw (pre-normalization) rows:
//! upstream gradients flow through softmax, the per-variant logit
//! transform, arccos, the inner products and finally the row
//! normalizations. In full-gradient mode the InterFace margin `f` is also
//! differentiated, through `gamma = theta_y / d` and `t = a + b / d`, and for
//! the measured-distance variants through `d = arccos(<W_y, W_j>)` as well.

use crate::error::{Error, Result};
use crate::geometry::{
    clamp_cos, d_arccos, dot, inside_clamp, normalize, raw_cosines, ClassWeights, EmbeddingBatch,
    Matrix,
};

use super::logits::{check_labels, interface_margins, row_nll, InterAngles};
use super::{additive_target, aml_target, GradientMode, MarginConfig, Variant};

/// Loss value, logits and gradients of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub loss: f64,
    /// Post-margin, pre-scale logits.
    pub modified_logits: Matrix,
    /// Margin applied to each entry (target: added to the angle,
    /// non-target: subtracted from it).
    pub margins: Matrix,
    pub grad_embeddings: Matrix,
    pub grad_weights: Matrix,
}

enum MarginSource<'a> {
    Dynamic,
    Fixed(&'a Matrix),
}

/// Loss and gradients for an already normalized batch and weights.
pub fn loss_and_grad(
    batch: &EmbeddingBatch,
    weights: &ClassWeights,
    cfg: &MarginConfig,
) -> Result<LossResult> {
    evaluate(batch.embeddings(), batch.labels(), weights.matrix(), cfg, MarginSource::Dynamic)
}

/// Loss and gradients with respect to unnormalized embedding and weight rows.
pub fn loss_and_grad_raw(
    embeddings: &Matrix,
    labels: &[usize],
    weights: &Matrix,
    cfg: &MarginConfig,
) -> Result<LossResult> {
    evaluate(embeddings, labels, weights, cfg, MarginSource::Dynamic)
}

/// Same objective with the non-target InterFace margins pinned to `margins`
/// (an `N x C` matrix as returned in [`LossResult::margins`]). This is the
/// surrogate whose gradient frozen-margin mode computes.
pub fn loss_and_grad_with_margins(
    embeddings: &Matrix,
    labels: &[usize],
    weights: &Matrix,
    cfg: &MarginConfig,
    margins: &Matrix,
) -> Result<LossResult> {
    if margins.shape() != (embeddings.rows(), weights.rows()) {
        return Err(Error::ShapeMismatch {
            left: margins.shape(),
            right: (embeddings.rows(), weights.rows()),
        });
    }
    evaluate(embeddings, labels, weights, cfg, MarginSource::Fixed(margins))
}

fn normalize_keep_norms(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    let mut norms = Vec::with_capacity(m.rows());
    for (i, row) in m.iter_rows().enumerate() {
        let u = normalize(row)?;
        norms.push(crate::geometry::norm(row));
        out.row_mut(i).copy_from_slice(u.as_slice());
    }
    Ok((out, norms))
}

/// Pulls a gradient on `u = v / |v|` back to `v`.
fn through_normalization(grad: &mut Matrix, unit: &Matrix, norms: &[f64]) {
    for (i, &n) in norms.iter().enumerate() {
        let u = unit.row(i);
        let proj = dot(u, grad.row(i));
        for (g, &uk) in grad.row_mut(i).iter_mut().zip(u) {
            *g = (*g - uk * proj) / n;
        }
    }
}

fn evaluate(
    emb_raw: &Matrix,
    labels: &[usize],
    w_raw: &Matrix,
    cfg: &MarginConfig,
    source: MarginSource<'_>,
) -> Result<LossResult> {
    cfg.validate()?;
    if emb_raw.cols() != w_raw.cols() {
        return Err(Error::DimensionMismatch { expected: w_raw.cols(), found: emb_raw.cols() });
    }
    let (x, x_norms) = normalize_keep_norms(emb_raw)?;
    let (w, w_norms) = normalize_keep_norms(w_raw)?;
    let cos = raw_cosines(&x, &w)?;
    check_labels(&cos, labels)?;
    let (n, c) = cos.shape();
    let thetas = cos.map(|v| clamp_cos(v).acos());

    let interface = cfg.variant.is_interface();
    let inter = if interface {
        Some(InterAngles::for_config(&ClassWeights::from_normalized(w.clone()), cfg)?)
    } else {
        None
    };
    let margins = match (&source, &inter) {
        (MarginSource::Fixed(m), _) => (*m).clone(),
        (MarginSource::Dynamic, Some(inter)) => interface_margins(&thetas, labels, inter, cfg)?,
        (MarginSource::Dynamic, None) => constant_margins(cfg, labels, n, c),
    };
    let chain_margins = interface
        && matches!(source, MarginSource::Dynamic)
        && cfg.gradient_mode == GradientMode::FullGradient;

    let mut logits = Matrix::zeros(n, c);
    let mut d_direct = Matrix::zeros(n, c); // dz / dcos, bypassing arccos
    let mut d_theta = Matrix::zeros(n, c); // dz / dtheta
    let mut d_margin = Matrix::zeros(n, c); // dz / dmu for non-target InterFace entries

    for (i, &y) in labels.iter().enumerate() {
        for j in 0..c {
            let raw = cos.get(i, j);
            let theta = thetas.get(i, j);
            let direct = |z: &mut Matrix, dd: &mut Matrix| {
                z.set(i, j, clamp_cos(raw));
                dd.set(i, j, if inside_clamp(raw) { 1.0 } else { 0.0 });
            };
            match (cfg.variant, j == y) {
                (Variant::Softmax, _) | (Variant::Aml, false) => direct(&mut logits, &mut d_direct),
                (Variant::Aml, true) => {
                    let (v, dv) = aml_target(theta, cfg.m1_mult, cfg.m2_add, cfg.m3_sub);
                    logits.set(i, j, v);
                    d_theta.set(i, j, dv);
                }
                (Variant::RArc, true) => {
                    let (v, dv) = additive_target(theta, cfg.m_split_1);
                    logits.set(i, j, v);
                    d_theta.set(i, j, dv);
                }
                (_, true) => {
                    let (v, dv) = additive_target(theta, cfg.m);
                    logits.set(i, j, v);
                    d_theta.set(i, j, dv);
                }
                (_, false) => {
                    let mu = if cfg.variant == Variant::RArc { cfg.m_split_2 } else { margins.get(i, j) };
                    let arg = theta - mu;
                    logits.set(i, j, arg.cos());
                    d_theta.set(i, j, -arg.sin());
                    d_margin.set(i, j, arg.sin());
                }
            }
        }
    }

    let scale = cfg.s;
    let inv_n = 1.0 / n.max(1) as f64;
    let mut loss = 0.0;
    let mut grad_cos = Matrix::zeros(n, c);
    let mut grad_theta = Matrix::zeros(n, c);
    let mut grad_inter = Matrix::zeros(c, c);

    for (i, &y) in labels.iter().enumerate() {
        let scaled: Vec<f64> = logits.row(i).iter().map(|&z| scale * z).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scaled.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += row_nll(&scaled, y);

        let theta_y = thetas.get(i, y);
        for j in 0..c {
            let p = exps[j] / sum;
            let gz = scale * (p - if j == y { 1.0 } else { 0.0 }) * inv_n;
            grad_cos.add_at(i, j, gz * d_direct.get(i, j));
            grad_theta.add_at(i, j, gz * d_theta.get(i, j));
            if chain_margins && j != y {
                let inter = inter.as_ref().expect("interface variants carry inter-class angles");
                let d = inter.get(y, j)?;
                let gamma = theta_y / d;
                let t = cfg.a + cfg.b / d;
                let df_dgamma = -cfg.alpha * (-gamma).exp();
                let df_dt = cfg.alpha * (-t).exp();
                let g_mu = gz * d_margin.get(i, j);
                grad_theta.add_at(i, y, g_mu * df_dgamma / d);
                if let InterAngles::Measured { .. } = inter {
                    let dd = df_dgamma * (-theta_y / (d * d)) + df_dt * (-cfg.b / (d * d));
                    grad_inter.add_at(y, j, g_mu * dd);
                }
            }
        }
    }
    loss *= inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFiniteValue("loss"));
    }

    for i in 0..n {
        for j in 0..c {
            let g = grad_theta.get(i, j);
            if g != 0.0 {
                grad_cos.add_at(i, j, g * d_arccos(cos.get(i, j)));
            }
        }
    }

    let d = x.cols();
    let mut grad_x = Matrix::zeros(n, d);
    let mut grad_w = Matrix::zeros(c, d);
    for i in 0..n {
        for j in 0..c {
            let g = grad_cos.get(i, j);
            if g == 0.0 {
                continue;
            }
            for k in 0..d {
                grad_x.add_at(i, k, g * w.get(j, k));
                grad_w.add_at(j, k, g * x.get(i, k));
            }
        }
    }
    for a in 0..c {
        for b in 0..c {
            let g = grad_inter.get(a, b);
            if g == 0.0 {
                continue;
            }
            let k = g * d_arccos(dot(w.row(a), w.row(b)));
            for col in 0..d {
                let wa = w.get(a, col);
                let wb = w.get(b, col);
                grad_w.add_at(a, col, k * wb);
                grad_w.add_at(b, col, k * wa);
            }
        }
    }
    through_normalization(&mut grad_x, &x, &x_norms);
    through_normalization(&mut grad_w, &w, &w_norms);

    Ok(LossResult { loss, modified_logits: logits, margins, grad_embeddings: grad_x, grad_weights: grad_w })
}

fn constant_margins(cfg: &MarginConfig, labels: &[usize], n: usize, c: usize) -> Matrix {
    let (target, other) = match cfg.variant {
        Variant::Aml => (cfg.m2_add, 0.0),
        Variant::RArc => (cfg.m_split_1, cfg.m_split_2),
        _ => (0.0, 0.0),
    };
    let mut m = Matrix::zeros(n, c);
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..c {
            m.set(i, j, if j == y { target } else { other });
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{cross_entropy, variant_logits};

    fn instance() -> (Matrix, Vec<usize>, Matrix) {
        let x = Matrix::from_rows(&[
            [0.3, -0.8, 0.5],
            [-0.6, 0.2, 0.7],
            [0.9, 0.4, -0.1],
        ])
        .unwrap();
        let w = Matrix::from_rows(&[
            [1.0, 0.2, -0.3],
            [-0.4, 1.0, 0.1],
            [0.2, -0.5, 1.0],
            [-0.7, -0.6, -0.2],
        ])
        .unwrap();
        (x, vec![0, 2, 3], w)
    }

    #[test]
    fn loss_matches_logit_path() {
        let (x, labels, w) = instance();
        let batch = EmbeddingBatch::new(&x, labels.clone(), 4).unwrap();
        let weights = ClassWeights::new(&w).unwrap();
        let cos = crate::geometry::cosine_matrix(&batch, &weights).unwrap();
        for v in Variant::ALL {
            let cfg = MarginConfig::for_variant(v);
            let (scaled, _) = variant_logits(&cos, &labels, &weights, &cfg).unwrap();
            let expected = cross_entropy(&scaled, &labels);
            let got = loss_and_grad(&batch, &weights, &cfg).unwrap();
            assert!((got.loss - expected).abs() < 1e-10, "{v}: {} vs {expected}", got.loss);
            assert_eq!(got.grad_embeddings.shape(), (3, 3));
            assert_eq!(got.grad_weights.shape(), (4, 3));
        }
    }

    #[test]
    fn softmax_on_center() {
        let x = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let w = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let cfg = MarginConfig::softmax().with_scale(1.0);
        let r = loss_and_grad_raw(&x, &[0], &w, &cfg).unwrap();
        let onehot = Matrix::from_rows(&[[1.0 - 1e-7, 0.0]]).unwrap();
        assert!((r.loss - cross_entropy(&onehot, &[0])).abs() < 1e-15);
    }

    #[test]
    fn frozen_mode_equals_pinned_margins() {
        let (x, labels, w) = instance();
        let cfg = MarginConfig::interface_did_dt();
        let frozen = loss_and_grad_raw(&x, &labels, &w, &cfg).unwrap();
        let pinned = loss_and_grad_with_margins(&x, &labels, &w, &cfg, &frozen.margins).unwrap();
        assert_eq!(frozen, pinned);
    }

    #[test]
    fn full_and_frozen_share_the_loss() {
        let (x, labels, w) = instance();
        let frozen = loss_and_grad_raw(&x, &labels, &w, &MarginConfig::interface_did_ct()).unwrap();
        let full = loss_and_grad_raw(
            &x,
            &labels,
            &w,
            &MarginConfig::interface_did_ct().with_mode(GradientMode::FullGradient),
        )
        .unwrap();
        assert_eq!(frozen.loss, full.loss);
        assert!(frozen.grad_weights.max_abs_diff(&full.grad_weights) > 0.0);
    }

    #[test]
    fn rejects_shape_errors() {
        let (x, labels, w) = instance();
        let cfg = MarginConfig::arcface(0.5);
        let narrow = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(loss_and_grad_raw(&x, &labels, &narrow, &cfg).is_err());
        assert!(loss_and_grad_raw(&x, &[0, 1], &w, &cfg).is_err());
        assert!(loss_and_grad_raw(&x, &[0, 1, 9], &w, &cfg).is_err());
        let bad = Matrix::zeros(2, 2);
        assert!(loss_and_grad_with_margins(&x, &labels, &w, &cfg, &bad).is_err());
    }
}
