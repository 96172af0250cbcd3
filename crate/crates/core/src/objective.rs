//! Training losses.
//!
//! All losses are recorded on a [`Tape`] over `(B, 3, H, W)` batches and
//! reduce to a one-element tensor. Distances are computed per sample and the
//! hinge of each triplet is applied per sample before averaging over the
//! batch.

use crate::error::{Error, Result};
use crate::flow::WrongRecoveryMode;
use crate::imageio::Image;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// A differentiable image distance returning one value per sample.
pub trait PerceptualDistance {
    fn distance<T: Scalar>(&self, tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var>;
}

/// Average of the mean absolute difference at full, half and quarter
/// resolution, plus the mean absolute Sobel response of the difference.
///
/// For two constant images `d` equals their absolute difference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PyramidGradient {
    pub levels: usize,
}

impl Default for PyramidGradient {
    fn default() -> Self {
        Self { levels: 3 }
    }
}

impl PerceptualDistance for PyramidGradient {
    fn distance<T: Scalar>(&self, tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
        if self.levels == 0 {
            return Err(Error::InvalidConfig("pyramid needs at least one level".into()));
        }
        let diff = tape.sub(a, b)?;
        let edges = tape.sobel(diff)?;
        let edges = tape.abs(edges);
        let mut total = tape.mean_per_sample(edges)?;
        let mut level = diff;
        let inv = 1.0 / self.levels as f64;
        for i in 0..self.levels {
            if i > 0 {
                level = tape.avg_pool2(level)?;
            }
            let l1 = tape.abs(level);
            let l1 = tape.mean_per_sample(l1)?;
            let l1 = tape.scale(l1, inv);
            total = tape.add(total, l1)?;
        }
        Ok(total)
    }
}

/// Per-sample mean absolute difference.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanL1;

impl PerceptualDistance for MeanL1 {
    fn distance<T: Scalar>(&self, tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
        let diff = tape.sub(a, b)?;
        let abs = tape.abs(diff);
        tape.mean_per_sample(abs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda_p: f64,
    pub lambda_r: f64,
    pub lambda_wr: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 5.0,
            lambda_p: 1.0,
            lambda_r: 1.0,
            lambda_wr: 1.0,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.beta, self.lambda_p, self.lambda_r, self.lambda_wr, self.margin];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Mean absolute difference over every element.
pub fn mean_l1<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let abs = tape.abs(diff);
    tape.mean(abs)
}

/// Batch mean of a perceptual distance.
pub fn perceptual_loss<T: Scalar, D: PerceptualDistance>(tape: &mut Tape<T>, dist: &D, a: Var, b: Var) -> Result<Var> {
    let d = dist.distance(tape, a, b)?;
    tape.mean(d)
}

/// `beta * d(protected, template) + L1(protected, template)`.
pub fn protection_loss<T: Scalar, D: PerceptualDistance>(
    tape: &mut Tape<T>,
    dist: &D,
    protected: Var,
    template: Var,
    beta: f64,
) -> Result<Var> {
    let p = perceptual_loss(tape, dist, protected, template)?;
    let p = tape.scale(p, beta);
    let l1 = mean_l1(tape, protected, template)?;
    tape.add(p, l1)
}

pub fn recovery_loss<T: Scalar>(tape: &mut Tape<T>, recovered: Var, original: Var) -> Result<Var> {
    mean_l1(tape, recovered, original)
}

/// `mean_b max(d(A, P) - d(A, N) + margin, 0)`.
pub fn triplet_loss<T: Scalar, D: PerceptualDistance>(
    tape: &mut Tape<T>,
    dist: &D,
    anchor: Var,
    positive: Var,
    negative: Var,
    margin: f64,
) -> Result<Var> {
    let ap = dist.distance(tape, anchor, positive)?;
    let an = dist.distance(tape, anchor, negative)?;
    let gap = tape.sub(ap, an)?;
    let gap = tape.offset(gap, margin);
    let hinge = tape.relu(gap);
    tape.mean(hinge)
}

/// Images taking part in the wrong-recovery loss.
#[derive(Clone, Copy, Debug)]
pub struct RecoveryTriple {
    pub original: Var,
    pub template: Var,
    pub recovered: Var,
    pub wrong: Var,
}

pub fn wrong_recovery_loss<T: Scalar, D: PerceptualDistance>(
    tape: &mut Tape<T>,
    dist: &D,
    mode: WrongRecoveryMode,
    v: RecoveryTriple,
    margin: f64,
) -> Result<Var> {
    match mode {
        WrongRecoveryMode::Randomized => {
            let perc = triplet_loss(tape, dist, v.original, v.recovered, v.wrong, margin)?;
            let l1 = triplet_loss(tape, &MeanL1, v.original, v.recovered, v.wrong, margin)?;
            tape.add(perc, l1)
        }
        WrongRecoveryMode::Obfuscated => {
            let l1 = mean_l1(tape, v.wrong, v.template)?;
            let stay = triplet_loss(tape, dist, v.wrong, v.template, v.original, margin)?;
            let apart = triplet_loss(tape, dist, v.recovered, v.original, v.template, margin)?;
            let s = tape.add(l1, stay)?;
            tape.add(s, apart)
        }
    }
}

pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, lp: Var, lr: Var, lwr: Var, w: &LossWeights) -> Result<Var> {
    let a = tape.scale(lp, w.lambda_p);
    let b = tape.scale(lr, w.lambda_r);
    let c = tape.scale(lwr, w.lambda_wr);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

/// Proxy distance between two images.
pub fn perceptual_distance(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_size(b) {
        return Err(Error::shape("perceptual_distance", "images differ in size"));
    }
    let mut tape = Tape::<f32>::new();
    let av = tape.constant(Tensor::stack(&[a.tensor()])?);
    let bv = tape.constant(Tensor::stack(&[b.tensor()])?);
    let d = PyramidGradient::default().distance(&mut tape, av, bv)?;
    Ok(tape.value(d).data()[0] as f64)
}
