//! Training objective: L1 reconstruction plus two triplet losses on domain codes.

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::extractor::{code_distance, DomainCode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            lambda: 0.01,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// The four codes of one image triplet.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeQuadruple<T> {
    /// Composite foreground.
    pub composite_fg: DomainCode<T>,
    /// Background.
    pub background: DomainCode<T>,
    /// Real foreground.
    pub real_fg: DomainCode<T>,
    /// Harmonized foreground.
    pub harmonized_fg: DomainCode<T>,
}

impl<T: Scalar> CodeQuadruple<T> {
    pub fn new(
        composite_fg: DomainCode<T>,
        background: DomainCode<T>,
        real_fg: DomainCode<T>,
        harmonized_fg: DomainCode<T>,
    ) -> Result<Self> {
        let d = composite_fg.dim();
        if [&background, &real_fg, &harmonized_fg].iter().any(|c| c.dim() != d) {
            return Err(shape_err("code_quadruple", "codes differ in dimension"));
        }
        Ok(Self {
            composite_fg,
            background,
            real_fg,
            harmonized_fg,
        })
    }
}

/// Batched codes on the tape, each (N, L).
#[derive(Clone, Copy, Debug)]
pub struct CodeVars {
    pub composite_fg: Var,
    pub background: Var,
    pub real_fg: Var,
    pub harmonized_fg: Var,
}

/// Individual terms of the objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub reconstruction: Var,
    /// Real foreground anchored: pulls harmonized fg, pushes composite fg.
    pub real_harmonized: Var,
    /// Harmonized foreground anchored: pulls background, pushes composite fg.
    pub harmonized_background: Var,
    pub total: Var,
}

/// Mean absolute difference over every element.
pub fn reconstruction_loss<T: Scalar>(g: &mut Graph<T>, output: Var, real: Var) -> Result<Var> {
    let d = g.sub(output, real)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Row-wise Euclidean distances of two (N, L) code batches, giving (N).
pub fn code_distances<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a).len() != 2 {
        return Err(shape_err("code_distances", format!("expected (N, L), got {:?}", g.shape(a))));
    }
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    let s = g.sum_last(sq)?;
    Ok(g.sqrt(s))
}

/// Batch mean of `max(d(anchor, positive) - d(anchor, negative) + margin, 0)`.
pub fn triplet_loss<T: Scalar>(g: &mut Graph<T>, anchor: Var, positive: Var, negative: Var, margin: f64) -> Result<Var> {
    if !(margin > 0.0) {
        return Err(Error::Config(format!("margin must be positive, got {margin}")));
    }
    let dp = code_distances(g, anchor, positive)?;
    let dn = code_distances(g, anchor, negative)?;
    let diff = g.sub(dp, dn)?;
    let m = g.constant(Tensor::full(g.shape(diff).to_vec(), T::of(margin)));
    let shifted = g.add(diff, m)?;
    let hinge = g.relu(shifted);
    Ok(g.mean(hinge))
}

/// `L_rec + lambda * (L_real_harmonized + L_harmonized_background)`.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, output: Var, real: Var, codes: &CodeVars, cfg: &LossConfig) -> Result<LossTerms> {
    cfg.validate()?;
    let reconstruction = reconstruction_loss(g, output, real)?;
    let real_harmonized = triplet_loss(g, codes.real_fg, codes.harmonized_fg, codes.composite_fg, cfg.margin)?;
    let harmonized_background = triplet_loss(g, codes.harmonized_fg, codes.background, codes.composite_fg, cfg.margin)?;
    let tri = g.add(real_harmonized, harmonized_background)?;
    let weighted = g.scale(tri, T::of(cfg.lambda));
    let total = g.add(reconstruction, weighted)?;
    Ok(LossTerms {
        reconstruction,
        real_harmonized,
        harmonized_background,
        total,
    })
}

/// Triplet hinge on plain codes.
pub fn triplet_value<T: Scalar>(anchor: &DomainCode<T>, positive: &DomainCode<T>, negative: &DomainCode<T>, margin: T) -> Result<T> {
    let v = code_distance(anchor, positive)? - code_distance(anchor, negative)? + margin;
    Ok(v.max(T::zero()))
}
