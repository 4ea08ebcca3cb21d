use crate::error::{Error, Result};
use crate::geometry::{clamp_cos, dot, inter_class_angles, ClassWeights, Matrix};

use super::{
    additive_target, aml_target, check_split, margin_f, threshold_t, MarginConfig, Variant,
    MIN_INTER_ANGLE,
};

pub(crate) fn check_labels(cosines: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != cosines.rows() {
        return Err(Error::DimensionMismatch { expected: cosines.rows(), found: labels.len() });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= cosines.cols()) {
        return Err(Error::LabelOutOfRange { label, classes: cosines.cols() });
    }
    Ok(())
}

/// `s * cos(theta)` for every entry.
pub fn softmax_logits(cosines: &Matrix, s: f64) -> Matrix {
    cosines.map(|c| s * clamp_cos(c))
}

/// Target entries become `cos(m1 theta + m2) - m3`; everything is scaled by `s`.
pub fn aml_logits(cosines: &Matrix, labels: &[usize], cfg: &MarginConfig) -> Result<Matrix> {
    check_labels(cosines, labels)?;
    let mut out = softmax_logits(cosines, 1.0);
    for (i, &y) in labels.iter().enumerate() {
        let theta = clamp_cos(cosines.get(i, y)).acos();
        out.set(i, y, aml_target(theta, cfg.m1_mult, cfg.m2_add, cfg.m3_sub).0);
    }
    Ok(out.map(|z| cfg.s * z))
}

/// Target entries `cos(theta_y + m_split_1)`, non-target entries
/// `cos(theta_j - m_split_2)`, scaled by `s`.
pub fn rarc_logits(cosines: &Matrix, labels: &[usize], cfg: &MarginConfig) -> Result<Matrix> {
    check_labels(cosines, labels)?;
    check_split(cfg)?;
    let mut out = Matrix::zeros(cosines.rows(), cosines.cols());
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..cosines.cols() {
            let theta = clamp_cos(cosines.get(i, j)).acos();
            let z = if j == y {
                additive_target(theta, cfg.m_split_1).0
            } else {
                (theta - cfg.m_split_2).cos()
            };
            out.set(i, j, cfg.s * z);
        }
    }
    Ok(out)
}

/// Inter-class angle seen by sample class `y` against class `j`.
pub(crate) enum InterAngles {
    Fixed(f64),
    /// Clamped angles used by the loss, plus unclamped ones for the
    /// coincidence check (the clamp alone keeps every angle above 4e-4).
    Measured { clamped: Matrix, exact: Matrix },
}

impl InterAngles {
    pub(crate) fn for_config(weights: &ClassWeights, cfg: &MarginConfig) -> Result<Self> {
        if cfg.variant.uses_dynamic_inter_angle() {
            let clamped = inter_class_angles(weights)?;
            let w = weights.matrix();
            let mut exact = Matrix::zeros(w.rows(), w.rows());
            for a in 0..w.rows() {
                for b in 0..w.rows() {
                    exact.set(a, b, dot(w.row(a), w.row(b)).clamp(-1.0, 1.0).acos());
                }
            }
            Ok(InterAngles::Measured { clamped, exact })
        } else {
            Ok(InterAngles::Fixed(cfg.fixed_d_inter))
        }
    }

    pub(crate) fn get(&self, y: usize, j: usize) -> Result<f64> {
        match self {
            InterAngles::Fixed(d) if *d >= MIN_INTER_ANGLE => Ok(*d),
            InterAngles::Fixed(d) => Err(Error::DegenerateCenter { a: y, b: j, angle: *d }),
            InterAngles::Measured { clamped, exact } => {
                let d = exact.get(y, j);
                if !(d >= MIN_INTER_ANGLE) {
                    return Err(Error::DegenerateCenter { a: y, b: j, angle: d });
                }
                Ok(clamped.get(y, j))
            }
        }
    }
}

/// Margin matrix of an InterFace config: `m` on target entries and
/// `f(gamma, t)` on the others.
pub(crate) fn interface_margins(
    thetas: &Matrix,
    labels: &[usize],
    inter: &InterAngles,
    cfg: &MarginConfig,
) -> Result<Matrix> {
    let mut margins = Matrix::zeros(thetas.rows(), thetas.cols());
    for (i, &y) in labels.iter().enumerate() {
        let theta_y = thetas.get(i, y);
        for j in 0..thetas.cols() {
            if j == y {
                margins.set(i, j, cfg.m);
                continue;
            }
            let d = inter.get(y, j)?;
            let gamma = theta_y / d;
            let t = threshold_t(d, cfg.a, cfg.b)?;
            margins.set(i, j, margin_f(gamma, t, cfg.alpha));
        }
    }
    Ok(margins)
}

/// InterFace logits (scaled by `s`) and the margin applied to each entry.
pub fn interface_logits(
    cosines: &Matrix,
    labels: &[usize],
    weights: &ClassWeights,
    cfg: &MarginConfig,
) -> Result<(Matrix, Matrix)> {
    check_labels(cosines, labels)?;
    if !cfg.variant.is_interface() {
        return Err(Error::InvalidMarginConfig(format!(
            "interface_logits called with variant {}",
            cfg.variant
        )));
    }
    if weights.num_classes() != cosines.cols() {
        return Err(Error::DimensionMismatch { expected: cosines.cols(), found: weights.num_classes() });
    }
    let thetas = cosines.map(|c| clamp_cos(c).acos());
    let inter = InterAngles::for_config(weights, cfg)?;
    let margins = interface_margins(&thetas, labels, &inter, cfg)?;
    let mut out = Matrix::zeros(cosines.rows(), cosines.cols());
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..cosines.cols() {
            let theta = thetas.get(i, j);
            let z = if j == y {
                additive_target(theta, cfg.m).0
            } else {
                (theta - margins.get(i, j)).cos()
            };
            out.set(i, j, cfg.s * z);
        }
    }
    Ok((out, margins))
}

/// Scaled logits and margin matrix for any variant.
pub fn variant_logits(
    cosines: &Matrix,
    labels: &[usize],
    weights: &ClassWeights,
    cfg: &MarginConfig,
) -> Result<(Matrix, Matrix)> {
    check_labels(cosines, labels)?;
    let (rows, cols) = cosines.shape();
    let fill = |target: f64, other: f64| {
        let mut m = Matrix::zeros(rows, cols);
        for (i, &y) in labels.iter().enumerate() {
            for j in 0..cols {
                m.set(i, j, if j == y { target } else { other });
            }
        }
        m
    };
    match cfg.variant {
        Variant::Softmax => Ok((softmax_logits(cosines, cfg.s), fill(0.0, 0.0))),
        Variant::Aml => Ok((aml_logits(cosines, labels, cfg)?, fill(cfg.m2_add, 0.0))),
        Variant::RArc => Ok((rarc_logits(cosines, labels, cfg)?, fill(cfg.m_split_1, cfg.m_split_2))),
        _ => interface_logits(cosines, labels, weights, cfg),
    }
}

/// `-log softmax(row)[y]`, computed from the logit gaps `row[j] - row[y]` so
/// that a confidently classified row does not lose precision to
/// cancellation.
pub(crate) fn row_nll(row: &[f64], y: usize) -> f64 {
    let target = row[y];
    let top = row.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z - target));
    if top <= 0.0 {
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != y)
            .map(|(_, &z)| (z - target).exp())
            .sum();
        rest.ln_1p()
    } else {
        top + row.iter().map(|&z| (z - target - top).exp()).sum::<f64>().ln()
    }
}

/// Mean softmax cross-entropy of scaled logits, using max-subtraction.
pub fn cross_entropy(scaled_logits: &Matrix, labels: &[usize]) -> f64 {
    let n = labels.len();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| row_nll(scaled_logits.row(i), y))
        .sum();
    total / n as f64
}
