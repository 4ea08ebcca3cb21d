//! Central finite differences and the comparison harness used to certify the
//! analytic gradients of every loss variant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{clamp_cos, dot, Matrix};
use crate::losses::{
    loss_and_grad_raw, loss_and_grad_with_margins, GradientMode, MarginConfig, Variant,
};

/// Errors at or below this absolute size always pass.
pub const ABS_FLOOR: f64 = 1e-9;
pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_REL_TOL: f64 = 1e-5;
/// Random instances keep every |cos| below `1 - CLAMP_MARGIN`.
pub const CLAMP_MARGIN: f64 = 1e-4;
/// Logit scale used by [`suite_configs`]. The gradient is linear in `s`, but
/// at `s = 64` the f64 loss carries rounding of about `ulp(64) / 2h ~ 4e-9`
/// and the `h^2 s^3` truncation term reaches 1e-8, both above [`ABS_FLOOR`].
pub const SUITE_SCALE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Tensor name and flat index of the worst relative error.
    pub argmax_location: (String, usize),
    pub pass: bool,
}

/// Central differences of `objective` at `point`, one coordinate at a time.
pub fn finite_diff<F>(objective: F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for k in 0..point.len() {
        let orig = x[k];
        x[k] = orig + h;
        let plus = objective(&x);
        x[k] = orig - h;
        let minus = objective(&x);
        x[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteObjective { index: k });
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Compares two gradient vectors; relative error per coordinate is
/// `|a - n| / max(|a|, |n|, 1e-9)`.
pub fn compare(analytic: &[f64], numeric: &[f64], rel_tol: f64) -> Result<GradReport> {
    compare_tensors(&[("x", analytic, numeric)], rel_tol)
}

/// [`compare`] over several named tensors, aggregated into one report.
pub fn compare_tensors(tensors: &[(&str, &[f64], &[f64])], rel_tol: f64) -> Result<GradReport> {
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut loc = (tensors.first().map_or("", |t| t.0).to_string(), 0);
    for &(name, a, n) in tensors {
        if a.len() != n.len() {
            return Err(Error::LengthMismatch { left: a.len(), right: n.len() });
        }
        for (k, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let abs = (av - nv).abs();
            let rel = abs / av.abs().max(nv.abs()).max(ABS_FLOOR);
            max_abs = max_abs.max(abs);
            if rel > max_rel {
                max_rel = rel;
                loc = (name.to_string(), k);
            }
        }
    }
    Ok(GradReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        argmax_location: loc,
        pass: max_rel <= rel_tol || max_abs <= ABS_FLOOR,
    })
}

impl GradReport {
    /// Worst-case merge of two reports.
    pub fn merge(self, other: GradReport) -> GradReport {
        let loc = if other.max_rel_error > self.max_rel_error {
            other.argmax_location
        } else {
            self.argmax_location
        };
        GradReport {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            max_abs_error: self.max_abs_error.max(other.max_abs_error),
            argmax_location: loc,
            pass: self.pass && other.pass,
        }
    }
}

/// A random loss evaluation point: raw embedding rows, labels, raw weight rows.
#[derive(Debug, Clone)]
pub struct Instance {
    pub embeddings: Matrix,
    pub labels: Vec<usize>,
    pub weights: Matrix,
}

fn gaussian_unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let row = m.row_mut(i);
        loop {
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let n = dot(row, row).sqrt();
            if n > 1e-3 {
                row.iter_mut().for_each(|v| *v /= n);
                break;
            }
        }
    }
    m
}

/// Whether an instance sits in the smooth region of `cfg`'s loss: away
/// from the cosine clamp and from the kink where the target angle plus
/// margin reaches pi.
fn smooth_region(inst: &Instance, cfg: &MarginConfig) -> bool {
    let x = &inst.embeddings;
    let w = &inst.weights;
    let limit = 1.0 - CLAMP_MARGIN;
    for i in 0..x.rows() {
        for j in 0..w.rows() {
            let c = dot(x.row(i), w.row(j));
            if c.abs() > limit {
                return false;
            }
            if j == inst.labels[i] {
                let theta = clamp_cos(c).acos();
                let phi = match cfg.variant {
                    Variant::Aml => cfg.m1_mult * theta + cfg.m2_add,
                    Variant::RArc => theta + cfg.m_split_1,
                    Variant::Softmax => 0.0,
                    _ => theta + cfg.m,
                };
                if (phi - std::f64::consts::PI).abs() < 1e-3 {
                    return false;
                }
            }
        }
    }
    for a in 0..w.rows() {
        for b in (a + 1)..w.rows() {
            if dot(w.row(a), w.row(b)).abs() > limit {
                return false;
            }
        }
    }
    true
}

/// Draws `N <= 4`, `C <= 5`, `d <= 6` instances with uniform labels and
/// normalized Gaussian rows, resampling until the point is smooth for `cfg`.
pub fn random_instance(rng: &mut ChaCha8Rng, cfg: &MarginConfig) -> Instance {
    loop {
        let n = rng.random_range(1..=4);
        let c = rng.random_range(2..=5);
        let d = rng.random_range(2..=6);
        let inst = Instance {
            embeddings: gaussian_unit_rows(rng, n, d),
            labels: (0..n).map(|_| rng.random_range(0..c)).collect(),
            weights: gaussian_unit_rows(rng, c, d),
        };
        if smooth_region(&inst, cfg) {
            return inst;
        }
    }
}

fn split_point(point: &[f64], inst: &Instance) -> (Matrix, Matrix) {
    let ne = inst.embeddings.rows() * inst.embeddings.cols();
    let e = Matrix::from_vec(inst.embeddings.rows(), inst.embeddings.cols(), point[..ne].to_vec())
        .expect("embedding block length");
    let w = Matrix::from_vec(inst.weights.rows(), inst.weights.cols(), point[ne..].to_vec())
        .expect("weight block length");
    (e, w)
}

/// Checks the analytic gradient of `cfg` at `inst` against central
/// differences over the flattened (embeddings, weights) vector. In
/// frozen-margin mode the reference objective is the loss with margins
/// pinned to their values at `inst`.
pub fn check_instance(inst: &Instance, cfg: &MarginConfig, h: f64, rel_tol: f64) -> Result<GradReport> {
    let analytic = loss_and_grad_raw(&inst.embeddings, &inst.labels, &inst.weights, cfg)?;
    let mut point = inst.embeddings.as_slice().to_vec();
    point.extend_from_slice(inst.weights.as_slice());

    let numeric = match cfg.gradient_mode {
        GradientMode::FullGradient => finite_diff(
            |p| {
                let (e, w) = split_point(p, inst);
                loss_and_grad_raw(&e, &inst.labels, &w, cfg).map_or(f64::NAN, |r| r.loss)
            },
            &point,
            h,
        )?,
        GradientMode::FrozenMargin => {
            let pinned = analytic.margins.clone();
            finite_diff(
                |p| {
                    let (e, w) = split_point(p, inst);
                    loss_and_grad_with_margins(&e, &inst.labels, &w, cfg, &pinned)
                        .map_or(f64::NAN, |r| r.loss)
                },
                &point,
                h,
            )?
        }
    };
    let ne = point.len() - inst.weights.as_slice().len();
    compare_tensors(
        &[
            ("embeddings", analytic.grad_embeddings.as_slice(), &numeric[..ne]),
            ("weights", analytic.grad_weights.as_slice(), &numeric[ne..]),
        ],
        rel_tol,
    )
}

/// Named configurations covered by the gradient suite: every variant, with
/// the three classic AML margin settings, all at [`SUITE_SCALE`].
pub fn suite_configs() -> Vec<(&'static str, MarginConfig)> {
    let configs = vec![
        ("softmax", MarginConfig::softmax()),
        ("aml-arcface", MarginConfig::arcface(0.5)),
        ("aml-cosface", MarginConfig::cosface(0.35)),
        ("aml-combined", MarginConfig::aml(1.2, 0.3, 0.1)),
        ("rarc", MarginConfig::rarc(0.3, 0.2)),
        ("interface-cid-ct", MarginConfig::interface_cid_ct()),
        ("interface-did-ct", MarginConfig::interface_did_ct()),
        ("interface-did-dt", MarginConfig::interface_did_dt()),
    ];
    configs.into_iter().map(|(n, c)| (n, c.with_scale(SUITE_SCALE))).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteRow {
    pub name: String,
    pub mode: &'static str,
    pub instances: usize,
    pub report: GradReport,
}

/// Runs `instances` random checks for each named config in both gradient
/// modes. Each (config, mode) pair draws from its own stream derived from
/// `seed`, so rows are independent of which other rows are run.
pub fn run_suite(
    configs: &[(&str, MarginConfig)],
    seed: u64,
    instances: usize,
    h: f64,
    rel_tol: f64,
) -> Result<Vec<SuiteRow>> {
    let mut rows = Vec::new();
    for (name, base) in configs {
        for mode in [GradientMode::FullGradient, GradientMode::FrozenMargin] {
            let cfg = base.with_mode(mode);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_id(name));
            let mut report: Option<GradReport> = None;
            for _ in 0..instances {
                let inst = random_instance(&mut rng, &cfg);
                let r = check_instance(&inst, &cfg, h, rel_tol)?;
                report = Some(match report {
                    Some(acc) => acc.merge(r),
                    None => r,
                });
            }
            let report = report.unwrap_or(GradReport {
                max_rel_error: 0.0,
                max_abs_error: 0.0,
                argmax_location: (String::new(), 0),
                pass: true,
            });
            rows.push(SuiteRow { name: name.to_string(), mode: mode.name(), instances, report });
        }
    }
    Ok(rows)
}

fn stream_id(name: &str) -> u64 {
    // FNV-1a, stable across platforms and releases.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_constant_and_quadratic() {
        let g = finite_diff(|_| 3.0, &[1.0, -2.0], 1e-6).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        let g = finite_diff(|x| 0.5 * dot(x, x), &[1.0, 2.0], 1e-6).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9);
        assert!((g[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn finite_diff_flags_non_finite() {
        let r = finite_diff(|x| if x[0] > 0.0 { f64::NAN } else { 0.0 }, &[0.0], 1e-6);
        assert!(matches!(r, Err(Error::NonFiniteObjective { index: 0 })));
    }

    #[test]
    fn truncation_error_is_second_order() {
        // f = cos(x0) cos(2 x1); exact gradient known in closed form.
        let f = |x: &[f64]| x[0].cos() * (2.0 * x[1]).cos();
        let p = [0.7, -0.4];
        let exact = [-(0.7f64).sin() * (-0.8f64).cos(), -2.0 * (0.7f64).cos() * (-0.8f64).sin()];
        let err = |h: f64| {
            let g = finite_diff(f, &p, h).unwrap();
            g.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let (e1, e2) = (err(1e-2), err(5e-3));
        assert!(e1 / e2 >= 3.0, "{e1} / {e2}");
        let q = |x: &[f64]| x[0] * x[0] * x[0] + x[1] * x[1];
        let g1 = finite_diff(q, &[1.0, 0.0], 1e-2).unwrap()[0] - 3.0;
        let g2 = finite_diff(q, &[1.0, 0.0], 5e-3).unwrap()[0] - 3.0;
        assert!(g1.abs() / g2.abs() >= 3.0);
    }

    #[test]
    fn compare_examples() {
        let r = compare(&[1.0, 2.0], &[1.0, 2.0], 1e-5).unwrap();
        assert!(r.pass);
        assert_eq!(r.max_rel_error, 0.0);

        let r = compare(&[1.0], &[1.1], 1e-5).unwrap();
        assert!(!r.pass);
        assert!((r.max_rel_error - 0.1 / 1.1).abs() < 1e-12);

        let r = compare(&[0.0], &[1e-12], 1e-5).unwrap();
        assert!(r.pass);

        assert!(matches!(compare(&[0.0], &[0.0, 1.0], 1e-5), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn interface_full_gradient_seed_7() {
        // N = 3, C = 4, d = 5 with the measured-distance dynamic-threshold loss.
        let cfg = MarginConfig::interface_did_dt().with_mode(GradientMode::FullGradient);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inst = loop {
            let inst = Instance {
                embeddings: gaussian_unit_rows(&mut rng, 3, 5),
                labels: (0..3).map(|_| rng.random_range(0..4)).collect(),
                weights: gaussian_unit_rows(&mut rng, 4, 5),
            };
            if smooth_region(&inst, &cfg) {
                break inst;
            }
        };
        let r = check_instance(&inst, &cfg, DEFAULT_STEP, DEFAULT_REL_TOL).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn full_scale_agrees_within_rounding() {
        // At s = 64 use a per-coordinate bound sized to the f64 noise floor.
        for (name, cfg) in suite_configs() {
            for mode in [GradientMode::FullGradient, GradientMode::FrozenMargin] {
                let cfg = cfg.with_scale(64.0).with_mode(mode);
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                for _ in 0..20 {
                    let inst = random_instance(&mut rng, &cfg);
                    let a = loss_and_grad_raw(&inst.embeddings, &inst.labels, &inst.weights, &cfg)
                        .unwrap();
                    let r = check_instance(&inst, &cfg, DEFAULT_STEP, DEFAULT_REL_TOL).unwrap();
                    let scale = a
                        .grad_embeddings
                        .as_slice()
                        .iter()
                        .chain(a.grad_weights.as_slice())
                        .fold(0.0f64, |m, v| m.max(v.abs()));
                    assert!(r.max_abs_error <= 1e-5 * scale + 1e-7, "{name} {mode:?}: {r:?}");
                }
            }
        }
    }

    #[test]
    fn small_suite_passes() {
        let rows = run_suite(&suite_configs(), 11, 5, DEFAULT_STEP, DEFAULT_REL_TOL).unwrap();
        for row in rows {
            assert!(row.report.pass, "{} {}: {:?}", row.name, row.mode, row.report);
        }
    }
}
