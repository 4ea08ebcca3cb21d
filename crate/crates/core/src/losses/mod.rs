//! The angular-margin loss family: normalized softmax, the unified
//! multiplicative/additive/cosine margin (AML), the split additive margin
//! (RArc), and InterFace with per-class dynamic margins.
//!
//! Every variant is expressed as a transform of the cosine matrix into
//! logits, followed by softmax cross-entropy. [`loss_and_grad`] returns the
//! loss together with its exact gradients with respect to the
//! pre-normalization embeddings and class weights.

mod backward;
mod logits;

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backward::{
    loss_and_grad, loss_and_grad_raw, loss_and_grad_with_margins, LossResult,
};
pub use logits::{
    aml_logits, cross_entropy, interface_logits, rarc_logits, softmax_logits, variant_logits,
};

/// Inter-class angles below this mean two centers coincide.
pub const MIN_INTER_ANGLE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Softmax,
    Aml,
    #[serde(rename = "rarc")]
    RArc,
    InterfaceCidCt,
    InterfaceDidCt,
    InterfaceDidDt,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Softmax,
        Variant::Aml,
        Variant::RArc,
        Variant::InterfaceCidCt,
        Variant::InterfaceDidCt,
        Variant::InterfaceDidDt,
    ];

    pub fn is_interface(self) -> bool {
        matches!(self, Variant::InterfaceCidCt | Variant::InterfaceDidCt | Variant::InterfaceDidDt)
    }

    /// Uses the measured angle between class centers rather than a constant.
    pub fn uses_dynamic_inter_angle(self) -> bool {
        matches!(self, Variant::InterfaceDidCt | Variant::InterfaceDidDt)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Softmax => "softmax",
            Variant::Aml => "aml",
            Variant::RArc => "rarc",
            Variant::InterfaceCidCt => "interface-cid-ct",
            Variant::InterfaceDidCt => "interface-did-ct",
            Variant::InterfaceDidDt => "interface-did-dt",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// Differentiate through every margin, including `f` and the
    /// inter-class angles.
    FullGradient,
    /// Margins are recomputed each forward pass but held constant in the
    /// backward pass.
    FrozenMargin,
}

impl GradientMode {
    pub fn name(self) -> &'static str {
        match self {
            GradientMode::FullGradient => "full",
            GradientMode::FrozenMargin => "frozen",
        }
    }
}

impl FromStr for GradientMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "full-gradient" => Ok(GradientMode::FullGradient),
            "frozen" | "frozen-margin" => Ok(GradientMode::FrozenMargin),
            other => Err(Error::InvalidMarginConfig(format!("unknown gradient mode {other:?}"))),
        }
    }
}

/// Loss selector plus every scalar hyperparameter of the family.
///
/// Fields that a variant does not use are carried along untouched, so a
/// single config can be swept over any of them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub variant: Variant,
    /// Logit scale.
    pub s: f64,
    /// AML multiplicative angular margin.
    pub m1_mult: f64,
    /// AML additive angular margin.
    pub m2_add: f64,
    /// AML additive cosine margin.
    pub m3_sub: f64,
    /// RArc margin added to the target angle.
    pub m_split_1: f64,
    /// RArc margin subtracted from every non-target angle.
    pub m_split_2: f64,
    /// Target additive margin for RArc (as the split total) and InterFace.
    pub m: f64,
    pub alpha: f64,
    pub a: f64,
    pub b: f64,
    /// Inter-class angle used by the constant-distance variant.
    pub fixed_d_inter: f64,
    pub gradient_mode: GradientMode,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self::arcface(0.5)
    }
}

impl MarginConfig {
    fn base(variant: Variant) -> Self {
        Self {
            variant,
            s: 64.0,
            m1_mult: 1.0,
            m2_add: 0.0,
            m3_sub: 0.0,
            m_split_1: 0.5,
            m_split_2: 0.0,
            m: 0.5,
            alpha: 0.1,
            a: 0.0,
            b: 0.0,
            fixed_d_inter: FRAC_PI_2,
            gradient_mode: GradientMode::FrozenMargin,
        }
    }

    /// Normalized softmax: logits are `s cos(theta)` with no margin.
    pub fn softmax() -> Self {
        Self::base(Variant::Softmax)
    }

    pub fn aml(m1_mult: f64, m2_add: f64, m3_sub: f64) -> Self {
        Self { m1_mult, m2_add, m3_sub, ..Self::base(Variant::Aml) }
    }

    pub fn arcface(m: f64) -> Self {
        Self { m, ..Self::aml(1.0, m, 0.0) }
    }

    pub fn cosface(m3: f64) -> Self {
        Self::aml(1.0, 0.0, m3)
    }

    pub fn sphereface(m1: f64) -> Self {
        Self::aml(m1, 0.0, 0.0)
    }

    pub fn rarc(m_split_1: f64, m_split_2: f64) -> Self {
        Self { m_split_1, m_split_2, m: m_split_1 + m_split_2, ..Self::base(Variant::RArc) }
    }

    /// Constant inter-class distance and constant threshold.
    pub fn interface_cid_ct() -> Self {
        Self { a: 0.2, b: 0.0, alpha: 0.1, fixed_d_inter: FRAC_PI_2, ..Self::base(Variant::InterfaceCidCt) }
    }

    /// Measured inter-class distance, constant threshold.
    pub fn interface_did_ct() -> Self {
        Self { a: 0.3, b: 0.0, alpha: 0.1, ..Self::base(Variant::InterfaceDidCt) }
    }

    /// Measured inter-class distance, distance-dependent threshold.
    pub fn interface_did_dt() -> Self {
        Self { a: 0.0, b: 10.0, alpha: 0.1, ..Self::base(Variant::InterfaceDidDt) }
    }

    /// Default config for a variant.
    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::Softmax => Self::softmax(),
            Variant::Aml => Self::arcface(0.5),
            Variant::RArc => Self::rarc(0.3, 0.2),
            Variant::InterfaceCidCt => Self::interface_cid_ct(),
            Variant::InterfaceDidCt => Self::interface_did_ct(),
            Variant::InterfaceDidDt => Self::interface_did_dt(),
        }
    }

    /// Resolves a loss name, accepting the AML presets `arcface`, `cosface`
    /// and `sphereface` on top of the variant names.
    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "softmax" => Self::softmax(),
            "aml" | "arcface" => Self::arcface(0.5),
            "cosface" => Self::cosface(0.35),
            "sphereface" => Self::sphereface(1.35),
            "rarc" => Self::rarc(0.3, 0.2),
            "interface-cid-ct" => Self::interface_cid_ct(),
            "interface-did-ct" => Self::interface_did_ct(),
            "interface-did-dt" => Self::interface_did_dt(),
            other => return Err(Error::InvalidMarginConfig(format!("unknown loss {other:?}"))),
        };
        Ok(cfg)
    }

    pub fn with_mode(self, gradient_mode: GradientMode) -> Self {
        Self { gradient_mode, ..self }
    }

    pub fn with_scale(self, s: f64) -> Self {
        Self { s, ..self }
    }

    /// Sets one scalar field by name. For AML, `m` also sets `m2_add`
    /// (the ArcFace margin); for RArc, changing either split part keeps `m`
    /// equal to their sum. Does not validate.
    pub fn with_param(self, name: &str, value: f64) -> Result<Self> {
        let mut c = self;
        match name {
            "s" => c.s = value,
            "m1_mult" => c.m1_mult = value,
            "m2_add" => c.m2_add = value,
            "m3_sub" => c.m3_sub = value,
            "m_split_1" => c.m_split_1 = value,
            "m_split_2" => c.m_split_2 = value,
            "m" => c.m = value,
            "alpha" => c.alpha = value,
            "a" => c.a = value,
            "b" => c.b = value,
            "fixed_d_inter" => c.fixed_d_inter = value,
            other => return Err(Error::InvalidMarginConfig(format!("unknown margin parameter {other:?}"))),
        }
        match (c.variant, name) {
            (Variant::Aml, "m") => c.m2_add = value,
            (Variant::RArc, "m_split_1" | "m_split_2") => c.m = c.m_split_1 + c.m_split_2,
            _ => {}
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidMarginConfig(msg));
        let finite = [
            self.s, self.m1_mult, self.m2_add, self.m3_sub, self.m_split_1, self.m_split_2,
            self.m, self.alpha, self.a, self.b, self.fixed_d_inter,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("all margin parameters must be finite".into());
        }
        if self.s <= 0.0 {
            return bad(format!("s must be positive, got {}", self.s));
        }
        if !(self.fixed_d_inter > 0.0 && self.fixed_d_inter <= PI) {
            return bad(format!("fixed_d_inter must lie in (0, pi], got {}", self.fixed_d_inter));
        }
        match self.variant {
            Variant::Aml => {
                if self.m1_mult < 1.0 {
                    return bad(format!("m1 must be >= 1, got {}", self.m1_mult));
                }
                if !(0.0..1.0).contains(&self.m2_add) || !(0.0..1.0).contains(&self.m3_sub) {
                    return bad(format!(
                        "m2 and m3 must lie in [0, 1), got {} and {}",
                        self.m2_add, self.m3_sub
                    ));
                }
            }
            Variant::RArc => check_split(self)?,
            v if v.is_interface() => {
                if self.alpha < 0.0 || self.a < 0.0 || self.b < 0.0 {
                    return bad("alpha, a and b must be non-negative".into());
                }
            }
            _ => {}
        }
        Ok(())
    }
}

pub(crate) fn check_split(cfg: &MarginConfig) -> Result<()> {
    if (cfg.m_split_1 + cfg.m_split_2 - cfg.m).abs() > 1e-12 {
        return Err(Error::SplitMismatch { first: cfg.m_split_1, second: cfg.m_split_2, total: cfg.m });
    }
    Ok(())
}

/// `cos(theta + m)` while `theta + m <= pi`, continued linearly with slope
/// `-sin(m)` beyond so the target logit keeps decreasing. Returns the value
/// and its derivative in `theta`.
pub(crate) fn additive_target(theta: f64, m: f64) -> (f64, f64) {
    let phi = theta + m;
    if phi <= PI {
        (phi.cos(), -phi.sin())
    } else {
        let slope = m.sin();
        (-1.0 - (phi - PI) * slope, -slope)
    }
}

/// AML target transform in angle space, with its derivative in `theta`.
pub(crate) fn aml_target(theta: f64, m1: f64, m2: f64, m3: f64) -> (f64, f64) {
    let phi = m1 * theta + m2;
    if phi <= PI {
        (phi.cos() - m3, -m1 * phi.sin())
    } else {
        // m2 = 0 only overflows for m1 > 1; keep a unit slope there.
        let slope = if m2 > 0.0 { m2.sin() } else { 1.0 };
        (-1.0 - (phi - PI) * slope - m3, -m1 * slope)
    }
}

/// `cos(m1 * arccos(cos_theta) + m2) - m3`, with the monotone continuation
/// past `pi`.
pub fn aml_target_logit(cos_theta: f64, m1_mult: f64, m2_add: f64, m3_sub: f64) -> f64 {
    let theta = cos_theta.clamp(-1.0, 1.0).acos();
    aml_target(theta, m1_mult, m2_add, m3_sub).0
}

/// Sample-to-center over inter-class angle ratio for each non-target class.
pub fn sir_gamma(theta_target: f64, d_inter_row: &[f64]) -> Result<Vec<f64>> {
    d_inter_row
        .iter()
        .enumerate()
        .map(|(j, &d)| {
            if !(d >= MIN_INTER_ANGLE) {
                return Err(Error::DegenerateCenter { a: usize::MAX, b: j, angle: d });
            }
            Ok(theta_target / d)
        })
        .collect()
}

/// `a + b / d_inter`.
pub fn threshold_t(d_inter: f64, a: f64, b: f64) -> Result<f64> {
    if !(d_inter >= MIN_INTER_ANGLE) {
        return Err(Error::DegenerateCenter { a: usize::MAX, b: usize::MAX, angle: d_inter });
    }
    Ok(a + b / d_inter)
}

/// `alpha * (exp(-gamma) - exp(-t))`: positive when the sample sits tighter
/// than the threshold, negative otherwise.
pub fn margin_f(gamma: f64, t: f64, alpha: f64) -> f64 {
    alpha * ((-gamma).exp() - (-t).exp())
}

/// One sample of the unscaled two-class decision function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundaryPoint {
    pub theta_y: f64,
    pub theta_j: f64,
    /// Extra non-target margin (InterFace `f`, RArc `m_split_2`, else 0).
    pub margin_f: f64,
    pub target_logit: f64,
    pub nontarget_logit: f64,
    /// Sign of `target_logit - nontarget_logit`: 1 when the target wins.
    pub sign: i8,
}

/// Target and non-target logits of `cfg` at angles `(theta_y, theta_j)`.
/// `d_inter` is the inter-class angle used by the measured-distance
/// variants; the constant-distance variant uses `cfg.fixed_d_inter`.
pub fn decision_point(cfg: &MarginConfig, theta_y: f64, theta_j: f64, d_inter: f64) -> Result<BoundaryPoint> {
    let (target, nontarget, f) = match cfg.variant {
        Variant::Softmax => (theta_y.cos(), theta_j.cos(), 0.0),
        Variant::Aml => (aml_target(theta_y, cfg.m1_mult, cfg.m2_add, cfg.m3_sub).0, theta_j.cos(), 0.0),
        Variant::RArc => {
            check_split(cfg)?;
            let f = cfg.m_split_2;
            (additive_target(theta_y, cfg.m_split_1).0, (theta_j - f).cos(), f)
        }
        Variant::InterfaceCidCt | Variant::InterfaceDidCt | Variant::InterfaceDidDt => {
            let d = if cfg.variant == Variant::InterfaceCidCt { cfg.fixed_d_inter } else { d_inter };
            let gamma = sir_gamma(theta_y, &[d])?[0];
            let f = margin_f(gamma, threshold_t(d, cfg.a, cfg.b)?, cfg.alpha);
            (additive_target(theta_y, cfg.m).0, (theta_j - f).cos(), f)
        }
    };
    let diff = target - nontarget;
    let sign = if diff > 0.0 {
        1
    } else if diff < 0.0 {
        -1
    } else {
        0
    };
    Ok(BoundaryPoint { theta_y, theta_j, margin_f: f, target_logit: target, nontarget_logit: nontarget, sign })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // cos(arccos(0.5) + 0.5) = cos(pi/3 + 0.5), evaluated independently.
    const ARC_HALF: f64 = 0.023_596_585_290_909_477;

    #[test]
    fn aml_target_logit_examples() {
        assert!((aml_target_logit(0.5, 1.0, 0.0, 0.0) - 0.5).abs() < 1e-15);
        assert!((aml_target_logit(0.5, 1.0, 0.0, 0.35) - 0.15).abs() < 1e-15);
        assert!((aml_target_logit(0.5, 1.0, 0.5, 0.0) - ARC_HALF).abs() < 1e-15);
    }

    #[test]
    fn target_overflow_is_monotone_and_continuous() {
        let m = 0.5;
        let at_pi = additive_target(PI - m, m).0;
        assert!((at_pi + 1.0).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for k in 0..=400 {
            let theta = k as f64 * PI / 400.0;
            let v = additive_target(theta, m).0;
            assert!(v < prev, "not decreasing at {theta}");
            prev = v;
        }
        let mut prev = f64::INFINITY;
        for k in 0..=400 {
            let theta = k as f64 * PI / 400.0;
            let v = aml_target(theta, 1.35, 0.0, 0.1).0;
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn sir_gamma_examples() {
        assert_eq!(sir_gamma(PI / 4.0, &[PI / 2.0]).unwrap(), vec![0.5]);
        assert_eq!(sir_gamma(0.0, &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        let g = sir_gamma(0.3, &[1.2, 0.9]).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-15);
        assert!((g[1] - 0.333_333_333_333_333_3).abs() < 1e-15);
        assert!(matches!(sir_gamma(0.3, &[1e-7]), Err(Error::DegenerateCenter { .. })));
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(threshold_t(2.0, 0.2, 0.0).unwrap(), 0.2);
        // 10 / (pi/2) = 20/pi = 6.366197723675814
        assert!((threshold_t(FRAC_PI_2, 0.0, 10.0).unwrap() - 6.366_197_723_675_814).abs() < 1e-14);
        assert_eq!(threshold_t(1.0, 0.3, 0.0).unwrap(), 0.3);
        assert!(threshold_t(0.0, 0.3, 0.0).is_err());
    }

    #[test]
    fn margin_f_examples() {
        assert_eq!(margin_f(0.7, 0.7, 0.1), 0.0);
        assert_eq!(margin_f(0.5, 0.2, 0.0), 0.0);
        // 0.1 * (exp(-0.5) - exp(-0.2)) = 0.1 * (0.6065306597 - 0.8187307531)
        assert!((margin_f(0.5, 0.2, 0.1) + 0.021_220_009_336_534_844).abs() < 1e-15);
    }

    #[test]
    fn presets_match_selected_parameters() {
        let c = MarginConfig::interface_cid_ct();
        assert_eq!((c.a, c.b, c.alpha, c.fixed_d_inter), (0.2, 0.0, 0.1, FRAC_PI_2));
        let c = MarginConfig::interface_did_ct();
        assert_eq!((c.a, c.b, c.alpha), (0.3, 0.0, 0.1));
        let c = MarginConfig::interface_did_dt();
        assert_eq!((c.a, c.b, c.alpha), (0.0, 10.0, 0.1));
        assert_eq!(MarginConfig::default().s, 64.0);
        for v in Variant::ALL {
            MarginConfig::for_variant(v).validate().unwrap();
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        assert!(MarginConfig { s: 0.0, ..MarginConfig::default() }.validate().is_err());
        assert!(MarginConfig { fixed_d_inter: 4.0, ..MarginConfig::interface_cid_ct() }
            .validate()
            .is_err());
        assert!(matches!(
            MarginConfig { m: 0.6, ..MarginConfig::rarc(0.3, 0.2) }.validate(),
            Err(Error::SplitMismatch { .. })
        ));
        assert!(MarginConfig::aml(0.5, 0.0, 0.0).validate().is_err());
        assert!(MarginConfig { alpha: -0.1, ..MarginConfig::interface_did_dt() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn margin_f_sign_law(gamma in 0.0f64..5.0, t in 0.0f64..5.0, alpha in 1e-3f64..1.0) {
            let f = margin_f(gamma, t, alpha);
            if gamma < t - 1e-9 {
                prop_assert!(f > 0.0);
            } else if gamma > t + 1e-9 {
                prop_assert!(f < 0.0);
            }
            prop_assert!(margin_f(gamma + 0.01, t, alpha) < f);
        }
    }

    #[test]
    fn arcface_boundary_sits_at_margin() {
        let cfg = MarginConfig::arcface(0.5);
        for theta_y in [0.1, 0.7, 1.9] {
            let below = decision_point(&cfg, theta_y, theta_y + 0.5 - 1e-9, 0.0).unwrap();
            let above = decision_point(&cfg, theta_y, theta_y + 0.5 + 1e-9, 0.0).unwrap();
            assert_eq!((below.sign, above.sign), (-1, 1));
        }
    }

    #[test]
    fn interface_boundary_offset_at_zero_target_angle() {
        // m + f(0, 0.2) with f = 0.1 (1 - exp(-0.2)), evaluated independently.
        const OFFSET: f64 = 0.5 + 0.018_126_924_692_201_814;
        let cfg = MarginConfig::interface_cid_ct();
        let p = decision_point(&cfg, 0.0, OFFSET, 0.0).unwrap();
        assert!((p.margin_f - 0.018_126_924_692_201_814).abs() < 1e-15);
        assert!((p.target_logit - p.nontarget_logit).abs() < 1e-15);
        assert_eq!(decision_point(&cfg, 0.0, OFFSET - 1e-9, 0.0).unwrap().sign, -1);
        assert_eq!(decision_point(&cfg, 0.0, OFFSET + 1e-9, 0.0).unwrap().sign, 1);
    }

    #[test]
    fn interface_without_alpha_has_the_arcface_boundary() {
        let inter = MarginConfig { alpha: 0.0, ..MarginConfig::interface_did_dt() };
        let arc = MarginConfig::arcface(0.5);
        for (ty, tj) in [(0.2, 0.9), (1.0, 1.3), (2.5, 0.4)] {
            let a = decision_point(&inter, ty, tj, 1.1).unwrap();
            let b = decision_point(&arc, ty, tj, 1.1).unwrap();
            assert_eq!((a.target_logit, a.nontarget_logit), (b.target_logit, b.nontarget_logit));
        }
    }
}
