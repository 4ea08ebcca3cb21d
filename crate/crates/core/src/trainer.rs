//! Minibatch SGD with momentum, step-decay schedules and the toy
//! hypersphere models (a free embedding table or a small tanh perceptron)
//! trained against any loss variant.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot, norm, normalize, EmbeddingBatch, Matrix};
use crate::losses::{loss_and_grad_raw, MarginConfig};

/// Piecewise-constant learning rate: `base_lr * decay^(#milestones <= step)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, milestones: Vec<usize>, decay_factor: f64, total_steps: usize) -> Result<Self> {
        let s = Self { base_lr, milestones, decay_factor, total_steps };
        s.validate()?;
        Ok(s)
    }

    /// Large-scale recipe: lr 0.1 divided by 10 at 80k, 140k, 210k and 280k.
    pub fn large_scale_default() -> Self {
        Self {
            base_lr: 0.1,
            milestones: vec![80_000, 140_000, 210_000, 280_000],
            decay_factor: 0.1,
            total_steps: 295_000,
        }
    }

    /// Milestones placed at the given fractions of `total_steps`.
    pub fn fractional(base_lr: f64, fractions: &[f64], decay_factor: f64, total_steps: usize) -> Result<Self> {
        if fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
            return Err(Error::InvalidSchedule(format!("milestone fractions must lie in [0, 1): {fractions:?}")));
        }
        let milestones = fractions.iter().map(|f| (f * total_steps as f64).floor() as usize).collect();
        Self::new(base_lr, milestones, decay_factor, total_steps)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSchedule(m));
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be finite and >= 0, got {}", self.base_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return bad(format!("decay_factor must be positive, got {}", self.decay_factor));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones must be strictly ascending: {:?}", self.milestones));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.total_steps) {
            return bad(format!("milestones must be below total_steps = {}", self.total_steps));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::StepOutOfRange { step, total: self.total_steps });
        }
        let passed = self.milestones.iter().filter(|&&m| m <= step).count();
        Ok(self.base_lr * self.decay_factor.powi(passed as i32))
    }
}

/// A trainable tensor. Rows of `unit_rows` parameters are projected back
/// onto the unit sphere after every update.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Matrix,
    pub unit_rows: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Matrix>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub step_count: usize,
}

impl OptimizerState {
    /// Zero velocity for each parameter. A zero learning rate is accepted
    /// and makes every step a no-op on the parameters.
    pub fn new(params: &[Parameter], learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidSchedule(m));
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {learning_rate}"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return bad(format!("momentum must lie in [0, 1), got {momentum}"));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return bad(format!("weight_decay must be finite and >= 0, got {weight_decay}"));
        }
        let velocity = params.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        Ok(Self { velocity, learning_rate, momentum, weight_decay, step_count: 0 })
    }
}

/// `v <- momentum v + (g + wd p)`, `p <- p - lr v`, then unit-row projection
/// of every row that moved.
pub fn sgd_step(params: &mut [Parameter], grads: &[Matrix], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::LengthMismatch { left: params.len(), right: grads.len() });
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if p.value.shape() != g.shape() || p.value.shape() != v.shape() {
            return Err(Error::ShapeMismatch { left: p.value.shape(), right: g.shape() });
        }
    }
    let (lr, mu, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        let cols = p.value.cols();
        for r in 0..p.value.rows() {
            let mut moved = false;
            for c in 0..cols {
                let k = r * cols + c;
                let pv = p.value.as_slice()[k];
                let vel = mu * v.as_slice()[k] + (g.as_slice()[k] + wd * pv);
                v.as_mut_slice()[k] = vel;
                let step = lr * vel;
                if step != 0.0 {
                    p.value.as_mut_slice()[k] = pv - step;
                    moved = true;
                }
            }
            if p.unit_rows && moved {
                let row = p.value.row_mut(r);
                let unit = normalize(row)?;
                row.copy_from_slice(unit.as_slice());
            }
        }
    }
    state.step_count += 1;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// One free embedding row per training sample.
    #[default]
    Table,
    /// `W2 tanh(W1 x + b1) + b2`.
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Table(Matrix),
    Mlp { w1: Matrix, b1: Matrix, w2: Matrix, b2: Matrix },
}

/// Encoder plus unit-norm class centers.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub encoder: Encoder,
    pub weights: Matrix,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        let z: f64 = StandardNormal.sample(rng);
        *v = scale * z;
    }
    m
}

impl ToyModel {
    /// Table models start from the data vectors themselves; perceptrons use
    /// `N(0, 1/fan_in)` weights and zero biases. Class centers are random
    /// unit rows. All draws come from `seed`.
    pub fn init(
        kind: ModelKind,
        data: &EmbeddingBatch,
        num_classes: usize,
        embed_dim: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(20);
        let encoder = match kind {
            ModelKind::Table => {
                if data.dim() != embed_dim {
                    return Err(Error::DimensionMismatch { expected: embed_dim, found: data.dim() });
                }
                Encoder::Table(data.embeddings().clone())
            }
            ModelKind::Mlp => {
                if hidden == 0 {
                    return Err(Error::InvalidDataSpec("hidden width must be positive".into()));
                }
                let d_in = data.dim();
                Encoder::Mlp {
                    w1: gaussian(&mut rng, hidden, d_in, 1.0 / (d_in as f64).sqrt()),
                    b1: Matrix::zeros(1, hidden),
                    w2: gaussian(&mut rng, embed_dim, hidden, 1.0 / (hidden as f64).sqrt()),
                    b2: Matrix::zeros(1, embed_dim),
                }
            }
        };
        let mut weights = gaussian(&mut rng, num_classes, embed_dim, 1.0);
        for r in 0..num_classes {
            let unit = normalize(weights.row(r))?;
            weights.row_mut(r).copy_from_slice(unit.as_slice());
        }
        Ok(Self { encoder, weights })
    }

    pub fn embed_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn kind(&self) -> ModelKind {
        match self.encoder {
            Encoder::Table(_) => ModelKind::Table,
            Encoder::Mlp { .. } => ModelKind::Mlp,
        }
    }

    /// Raw (unnormalized) embeddings of rows `idx` of `inputs`, plus the
    /// hidden activations for the perceptron.
    fn forward(&self, inputs: &Matrix, idx: &[usize]) -> (Matrix, Option<Matrix>) {
        match &self.encoder {
            Encoder::Table(t) => (t.select_rows(idx), None),
            Encoder::Mlp { w1, b1, w2, b2 } => {
                let h_dim = w1.rows();
                let d = w2.rows();
                let mut hidden = Matrix::zeros(idx.len(), h_dim);
                let mut out = Matrix::zeros(idx.len(), d);
                for (n, &i) in idx.iter().enumerate() {
                    let x = inputs.row(i);
                    for k in 0..h_dim {
                        hidden.set(n, k, (dot(w1.row(k), x) + b1.get(0, k)).tanh());
                    }
                    for k in 0..d {
                        out.set(n, k, dot(w2.row(k), hidden.row(n)) + b2.get(0, k));
                    }
                }
                (out, Some(hidden))
            }
        }
    }

    /// Normalized embeddings of every row of `inputs`.
    pub fn embed(&self, inputs: &EmbeddingBatch) -> Result<EmbeddingBatch> {
        let idx: Vec<usize> = (0..inputs.len()).collect();
        if let Encoder::Table(t) = &self.encoder {
            if t.rows() != inputs.len() {
                return Err(Error::LengthMismatch { left: t.rows(), right: inputs.len() });
            }
        }
        let (raw, _) = self.forward(inputs.embeddings(), &idx);
        EmbeddingBatch::new(&raw, inputs.labels().to_vec(), self.weights.rows())
    }

    fn into_params(self) -> Vec<Parameter> {
        let unit = |value| Parameter { value, unit_rows: true };
        let free = |value| Parameter { value, unit_rows: false };
        match self.encoder {
            Encoder::Table(t) => vec![unit(t), unit(self.weights)],
            Encoder::Mlp { w1, b1, w2, b2 } => {
                vec![free(w1), free(b1), free(w2), free(b2), unit(self.weights)]
            }
        }
    }

    fn from_params(kind: ModelKind, mut p: Vec<Parameter>) -> Self {
        let weights = p.pop().expect("weights parameter").value;
        let mut it = p.into_iter().map(|p| p.value);
        let mut next = || it.next().expect("encoder parameter");
        let encoder = match kind {
            ModelKind::Table => Encoder::Table(next()),
            ModelKind::Mlp => Encoder::Mlp { w1: next(), b1: next(), w2: next(), b2: next() },
        };
        Self { encoder, weights }
    }
}

/// Gradients of every parameter (in `into_params` order) from the gradient
/// with respect to the raw embeddings of batch rows `idx`.
fn encoder_grads(
    model: &ToyModel,
    inputs: &Matrix,
    idx: &[usize],
    hidden: Option<&Matrix>,
    grad_emb: &Matrix,
) -> Vec<Matrix> {
    match &model.encoder {
        Encoder::Table(t) => {
            let mut g = Matrix::zeros(t.rows(), t.cols());
            for (n, &i) in idx.iter().enumerate() {
                for (k, &v) in grad_emb.row(n).iter().enumerate() {
                    g.add_at(i, k, v);
                }
            }
            vec![g]
        }
        Encoder::Mlp { w1, w2, .. } => {
            let h = hidden.expect("perceptron forward keeps hidden activations");
            let (h_dim, d_in, d) = (w1.rows(), w1.cols(), w2.rows());
            let mut gw1 = Matrix::zeros(h_dim, d_in);
            let mut gb1 = Matrix::zeros(1, h_dim);
            let mut gw2 = Matrix::zeros(d, h_dim);
            let mut gb2 = Matrix::zeros(1, d);
            for (n, &i) in idx.iter().enumerate() {
                let ge = grad_emb.row(n);
                let hn = h.row(n);
                for k in 0..d {
                    gb2.add_at(0, k, ge[k]);
                    for j in 0..h_dim {
                        gw2.add_at(k, j, ge[k] * hn[j]);
                    }
                }
                let x = inputs.row(i);
                for j in 0..h_dim {
                    let back: f64 = (0..d).map(|k| ge[k] * w2.get(k, j)).sum();
                    let gh = back * (1.0 - hn[j] * hn[j]);
                    gb1.add_at(0, j, gh);
                    for (c, &xv) in x.iter().enumerate() {
                        gw1.add_at(j, c, gh * xv);
                    }
                }
            }
            vec![gw1, gb1, gw2, gb2]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Milestones as fractions of the total step count.
    pub milestone_fractions: Vec<f64>,
    pub decay_factor: f64,
    pub seed: u64,
    pub model: ModelKind,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestone_fractions: vec![0.6, 0.85],
            decay_factor: 0.1,
            seed: 0,
            model: ModelKind::Table,
            hidden: 32,
            embed_dim: 2,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size.max(1))
    }

    pub fn schedule(&self, samples: usize) -> Result<Schedule> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidSchedule("epochs and batch_size must be positive".into()));
        }
        let total = self.epochs * self.steps_per_epoch(samples);
        Schedule::fractional(self.base_lr, &self.milestone_fractions, self.decay_factor, total)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the minibatch losses seen during the epoch.
    pub loss: f64,
    /// Mean angle between each sample and its own class center, after the
    /// epoch.
    pub mean_target_angle: f64,
    /// Standard deviation of adjacent-center gaps; 2-D models only.
    pub gap_std: Option<f64>,
    pub per_class_std: Vec<f64>,
}

fn angle(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0).acos()
}

fn population_std(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Angle of every sample to its own center, grouped by class.
fn target_angles(emb: &EmbeddingBatch, weights: &Matrix) -> Vec<Vec<f64>> {
    let mut by_class = vec![Vec::new(); weights.rows()];
    for (x, &l) in emb.embeddings().iter_rows().zip(emb.labels()) {
        by_class[l].push(angle(x, weights.row(l)));
    }
    by_class
}

fn epoch_record(epoch: usize, loss: f64, emb: &EmbeddingBatch, weights: &Matrix) -> EpochRecord {
    let by_class = target_angles(emb, weights);
    let all: Vec<f64> = by_class.iter().flatten().copied().collect();
    let gap_std = (weights.cols() == 2).then(|| population_std(&center_gaps(weights).1));
    EpochRecord {
        epoch,
        loss,
        mean_target_angle: all.iter().sum::<f64>() / all.len().max(1) as f64,
        gap_std,
        per_class_std: by_class.iter().map(|a| population_std(a)).collect(),
    }
}

/// Minibatch SGD over `data` (whose rows are the model inputs). Each epoch
/// visits a fresh permutation drawn from `tc.seed`; the last batch of an
/// epoch may be short.
pub fn train(
    data: &EmbeddingBatch,
    model: ToyModel,
    cfg: &MarginConfig,
    tc: &TrainConfig,
) -> Result<(ToyModel, Vec<EpochRecord>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidDataSpec("training set is empty".into()));
    }
    let schedule = tc.schedule(data.len())?;
    let kind = model.kind();
    let inputs = data.embeddings().clone();
    let mut params = model.into_params();
    let mut state = OptimizerState::new(&params, tc.base_lr, tc.momentum, tc.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(21);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(tc.epochs);
    let mut last_loss = f64::NAN;
    let mut step = 0;

    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let lr = schedule.lr_at(step)?;
            let model = ToyModel::from_params(kind, params);
            let (raw, hidden) = model.forward(&inputs, batch);
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
            let out = match loss_and_grad_raw(&raw, &labels, &model.weights, cfg) {
                Ok(out) if out.loss.is_finite() => out,
                Ok(_) | Err(Error::NonFiniteValue(_)) => {
                    return Err(Error::NonFiniteLoss { epoch, step, lr, last_loss });
                }
                Err(e) => return Err(e),
            };
            let mut grads = encoder_grads(&model, &inputs, batch, hidden.as_ref(), &out.grad_embeddings);
            grads.push(out.grad_weights);
            params = model.into_params();
            state.learning_rate = lr;
            sgd_step(&mut params, &grads, &mut state)?;
            loss_sum += out.loss * batch.len() as f64;
            last_loss = out.loss;
            step += 1;
        }
        let model = ToyModel::from_params(kind, params);
        let emb = model.embed(data)?;
        log.push(epoch_record(epoch, loss_sum / data.len() as f64, &emb, &model.weights));
        params = model.into_params();
    }
    Ok((ToyModel::from_params(kind, params), log))
}

/// Polar angles of the centers in ascending order (with their class ids)
/// and the gaps between consecutive ones, the last gap wrapping around.
fn center_gaps(weights: &Matrix) -> (Vec<(usize, f64)>, Vec<f64>) {
    let mut polar: Vec<(usize, f64)> = weights
        .iter_rows()
        .enumerate()
        .map(|(c, w)| (c, w[1].atan2(w[0]).rem_euclid(TAU)))
        .collect();
    polar.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let n = polar.len();
    let gaps = (0..n)
        .map(|k| if k + 1 < n { polar[k + 1].1 - polar[k].1 } else { TAU - (polar[k].1 - polar[0].1) })
        .collect();
    (polar, gaps)
}

/// Geometry of a trained 2-D model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToySummary {
    /// Class ids in ascending polar angle.
    pub sorted_classes: Vec<usize>,
    /// Polar angles of the centers, same order.
    pub center_angles: Vec<f64>,
    /// Gap from each sorted center to the next, wrapping; sums to 2 pi.
    pub gaps: Vec<f64>,
    pub gap_std: f64,
    /// Per class id: standard deviation of sample-to-own-center angles.
    pub per_class_std: Vec<f64>,
    /// Per class id: smallest `min_{j != y} theta_j - theta_y` over the
    /// class's samples (negative when a sample is misclassified).
    pub per_class_margin: Vec<f64>,
}

pub fn toy_summary(weights: &Matrix, embeddings: &EmbeddingBatch) -> Result<ToySummary> {
    if weights.cols() != 2 || embeddings.dim() != 2 {
        return Err(Error::NotToyShape { dim: weights.cols().max(embeddings.dim()) });
    }
    let c = weights.rows();
    if let Some(&l) = embeddings.labels().iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label: l, classes: c });
    }
    let (polar, gaps) = center_gaps(weights);
    let mut margin = vec![f64::INFINITY; c];
    for (x, &y) in embeddings.embeddings().iter_rows().zip(embeddings.labels()) {
        let own = angle(x, weights.row(y));
        let nearest = (0..c).filter(|&j| j != y).map(|j| angle(x, weights.row(j))).fold(f64::INFINITY, f64::min);
        margin[y] = margin[y].min(nearest - own);
    }
    let per_class_std = target_angles(embeddings, weights).iter().map(|a| population_std(a)).collect();
    Ok(ToySummary {
        sorted_classes: polar.iter().map(|p| p.0).collect(),
        center_angles: polar.iter().map(|p| p.1).collect(),
        gap_std: population_std(&gaps),
        gaps,
        per_class_std,
        per_class_margin: margin.into_iter().map(|m| if m.is_finite() { m } else { 0.0 }).collect(),
    })
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Norm of a row, exposed for invariant checks on trained models.
pub fn row_norms(m: &Matrix) -> Vec<f64> {
    m.iter_rows().map(norm).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SphereMixtureSpec};
    use crate::losses::GradientMode;

    fn scalar(v: f64) -> Vec<Parameter> {
        vec![Parameter { value: Matrix::from_vec(1, 1, vec![v]).unwrap(), unit_rows: false }]
    }

    fn grad(v: f64) -> Vec<Matrix> {
        vec![Matrix::from_vec(1, 1, vec![v]).unwrap()]
    }

    #[test]
    fn vanilla_step_subtracts_the_gradient() {
        let mut p = scalar(0.25);
        let mut s = OptimizerState::new(&p, 1.0, 0.0, 0.0).unwrap();
        sgd_step(&mut p, &grad(0.75), &mut s).unwrap();
        assert_eq!(p[0].value.get(0, 0), -0.5);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn zero_gradient_decays_velocity_only() {
        let mut p = scalar(1.0);
        let mut s = OptimizerState::new(&p, 0.1, 0.9, 0.0).unwrap();
        s.velocity[0].set(0, 0, 2.0);
        sgd_step(&mut p, &grad(0.0), &mut s).unwrap();
        assert_eq!(s.velocity[0].get(0, 0), 1.8);
        let mut p2 = scalar(1.0);
        let mut s2 = OptimizerState::new(&p2, 0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut p2, &grad(0.0), &mut s2).unwrap();
        assert_eq!(p2[0].value.get(0, 0), 1.0);
    }

    #[test]
    fn momentum_recurrence_on_a_quadratic() {
        // f = x^2 / 2 from x = 1: v1 = 1, x1 = 0.9; v2 = 0.9 + 0.9, x2 = 0.72.
        let mut p = scalar(1.0);
        let mut s = OptimizerState::new(&p, 0.1, 0.9, 0.0).unwrap();
        for expected in [0.9, 0.72] {
            let g = grad(p[0].value.get(0, 0));
            sgd_step(&mut p, &g, &mut s).unwrap();
            assert!((p[0].value.get(0, 0) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = scalar(1.0);
        let mut s = OptimizerState::new(&p, 0.1, 0.0, 0.0).unwrap();
        let g = vec![Matrix::zeros(2, 1)];
        assert!(matches!(sgd_step(&mut p, &g, &mut s), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn unit_rows_stay_normalized() {
        let m = Matrix::from_rows(&[[0.6, 0.8], [1.0, 0.0]]).unwrap();
        let mut p = vec![Parameter { value: m, unit_rows: true }];
        let mut s = OptimizerState::new(&p, 0.5, 0.9, 5e-4).unwrap();
        let g = vec![Matrix::from_rows(&[[0.3, -1.0], [2.0, 0.5]]).unwrap()];
        for _ in 0..5 {
            sgd_step(&mut p, &g, &mut s).unwrap();
            for n in row_norms(&p[0].value) {
                assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn schedule_examples() {
        let s = Schedule::large_scale_default();
        assert_eq!(s.lr_at(0).unwrap(), 0.1);
        let s2 = Schedule::new(0.1, vec![80_000, 140_000], 0.1, 200_000).unwrap();
        assert!((s2.lr_at(80_000).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(s2.lr_at(79_999).unwrap(), 0.1);
        let toy = Schedule::new(0.1, vec![600, 900], 0.1, 1001).unwrap();
        assert!((toy.lr_at(1000).unwrap() - 0.001).abs() < 1e-15);
        assert!(matches!(toy.lr_at(1001), Err(Error::StepOutOfRange { .. })));
        assert!(Schedule::new(0.1, vec![5, 5], 0.1, 10).is_err());
        assert!(Schedule::new(0.1, vec![10], 0.1, 10).is_err());
    }

    fn toy_data(seed: u64) -> EmbeddingBatch {
        generate(&SphereMixtureSpec { samples_per_class: 20, seed, ..Default::default() }).unwrap()
    }

    #[test]
    fn zero_lr_leaves_the_model_unchanged() {
        let data = toy_data(1);
        let model = ToyModel::init(ModelKind::Table, &data, 8, 2, 0, 1).unwrap();
        let tc = TrainConfig { epochs: 2, base_lr: 0.0, ..Default::default() };
        let (trained, log) = train(&data, model.clone(), &MarginConfig::arcface(0.5), &tc).unwrap();
        assert_eq!(trained, model);
        // Shuffled batches only change the summation order.
        assert!((log[0].loss - log[1].loss).abs() <= 1e-12 * log[0].loss);
    }

    #[test]
    fn equal_seeds_give_equal_runs() {
        let data = toy_data(2);
        for kind in [ModelKind::Table, ModelKind::Mlp] {
            let tc = TrainConfig { epochs: 3, model: kind, seed: 4, ..Default::default() };
            let run = || {
                let m = ToyModel::init(kind, &data, 8, 2, 16, 4).unwrap();
                train(&data, m, &MarginConfig::interface_cid_ct(), &tc).unwrap()
            };
            let (a, la) = run();
            let (b, lb) = run();
            assert_eq!(a, b);
            assert_eq!(la, lb);
        }
    }

    #[test]
    fn perceptron_gradients_match_finite_differences() {
        let data = toy_data(3);
        let model = ToyModel::init(ModelKind::Mlp, &data, 8, 2, 5, 3).unwrap();
        let cfg = MarginConfig::arcface(0.5).with_scale(1.0);
        let idx: Vec<usize> = (0..12).map(|k| k * 13).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
        let inputs = data.embeddings();
        let loss = |m: &ToyModel| {
            let (raw, _) = m.forward(inputs, &idx);
            loss_and_grad_raw(&raw, &labels, &m.weights, &cfg).unwrap()
        };
        let (raw, hidden) = model.forward(inputs, &idx);
        let out = loss_and_grad_raw(&raw, &labels, &model.weights, &cfg).unwrap();
        let grads = encoder_grads(&model, inputs, &idx, hidden.as_ref(), &out.grad_embeddings);
        let h = 1e-6;
        for (p, g) in grads.iter().enumerate() {
            for k in 0..g.as_slice().len() {
                let bump = |delta: f64| {
                    let mut ps = model.clone().into_params();
                    ps[p].value.as_mut_slice()[k] += delta;
                    loss(&ToyModel::from_params(ModelKind::Mlp, ps)).loss
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let analytic = g.as_slice()[k];
                assert!((numeric - analytic).abs() <= 1e-6 * analytic.abs().max(1.0), "{p} {k}");
            }
        }
    }

    #[test]
    fn a_small_full_batch_step_decreases_the_frozen_loss() {
        let data = toy_data(5);
        let model = ToyModel::init(ModelKind::Table, &data, 8, 2, 0, 5).unwrap();
        let cfg = MarginConfig::interface_did_ct().with_mode(GradientMode::FrozenMargin);
        let all: Vec<usize> = (0..data.len()).collect();
        let (raw, _) = model.forward(data.embeddings(), &all);
        let base = loss_and_grad_raw(&raw, data.labels(), &model.weights, &cfg).unwrap();
        let decreased = [1e-2, 1e-3, 1e-4].iter().any(|&lr| {
            let mut params = model.clone().into_params();
            let mut grads = encoder_grads(&model, data.embeddings(), &all, None, &base.grad_embeddings);
            grads.push(base.grad_weights.clone());
            let mut st = OptimizerState::new(&params, lr, 0.0, 0.0).unwrap();
            sgd_step(&mut params, &grads, &mut st).unwrap();
            let m = ToyModel::from_params(ModelKind::Table, params);
            let (raw, _) = m.forward(data.embeddings(), &all);
            loss_and_grad_raw(&raw, data.labels(), &m.weights, &cfg).unwrap().loss < base.loss
        });
        assert!(decreased);
    }

    #[test]
    fn toy_summary_examples() {
        let uniform: Vec<[f64; 2]> =
            (0..8).map(|k| [(k as f64 * TAU / 8.0).cos(), (k as f64 * TAU / 8.0).sin()]).collect();
        let w = Matrix::from_rows(&uniform).unwrap();
        let emb = EmbeddingBatch::new(&w, (0..8).collect(), 8).unwrap();
        let s = toy_summary(&w, &emb).unwrap();
        for g in &s.gaps {
            assert!((g - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        }
        assert!(s.gap_std < 1e-12);
        assert!(s.per_class_margin.iter().all(|m| (m - std::f64::consts::FRAC_PI_4).abs() < 1e-7));

        let w4 = Matrix::from_rows(&[[0.0, -1.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]).unwrap();
        let e4 = EmbeddingBatch::new(&w4, vec![0, 1, 2, 3], 4).unwrap();
        let s4 = toy_summary(&w4, &e4).unwrap();
        assert_eq!(s4.sorted_classes, vec![1, 3, 2, 0]);
        for g in &s4.gaps {
            assert!((g - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        }

        let w3 = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let e3 = EmbeddingBatch::new(&w3, vec![0, 1], 2).unwrap();
        assert!(matches!(toy_summary(&w3, &e3), Err(Error::NotToyShape { dim: 3 })));
    }

    #[test]
    fn smoothing_is_a_trailing_mean() {
        assert_eq!(smooth(&[3.0, 1.0, 2.0, 6.0], 2), vec![3.0, 2.0, 1.5, 4.0]);
    }
}
