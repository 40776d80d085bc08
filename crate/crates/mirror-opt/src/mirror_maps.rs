//! Mirror potentials with exact forward/inverse gradient maps.
//!
//! A mirror map is the gradient ∇ψ of an α-strongly convex potential ψ. It
//! sends primal points x to dual points y = ∇ψ(x); the inverse map is the
//! gradient of the convex conjugate, ∇ψ* = (∇ψ)⁻¹. All three map kinds here
//! have *exact* inverses by construction, so the forward-backward
//! inconsistency ‖(∇ψ* ∘ ∇ψ − I)(x)‖ is zero up to rounding:
//!
//! - `Euclidean`: ψ(x) = ½‖x‖², the identity map (α = 1).
//! - `DiagonalQuadratic`: ψ(x) = ½xᵀdiag(d)x with d > 0 (α = min dᵢ). With
//!   d = 1 mirror descent reduces exactly to gradient descent.
//! - `SplineElementwise`: ψ(x) = Σᵢ ∫₀^{xᵢ} σ(t)dt for a strictly increasing
//!   piecewise-linear σ on 41 equispaced knots over [−1, 1], extrapolated by
//!   its terminal slopes (α = min slope). Monotonicity is enforced by
//!   construction: knot increments are exp of unconstrained parameters plus a
//!   floor, so gradients with respect to the parameters flow smoothly.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the primal space 𝒳.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalVector(pub Array1<f64>);

/// A point in the dual space 𝒳*.
#[derive(Debug, Clone, PartialEq)]
pub struct DualVector(pub Array1<f64>);

impl PrimalVector {
    pub fn from_vec(v: Vec<f64>) -> Self {
        PrimalVector(Array1::from_vec(v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("contiguous")
    }
}

impl DualVector {
    pub fn from_vec(v: Vec<f64>) -> Self {
        DualVector(Array1::from_vec(v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("contiguous")
    }
}

/// Number of spline knots.
pub const SPLINE_KNOTS: usize = 41;
/// Number of knot-to-knot increments (= learnable parameters per spline).
pub const SPLINE_INCREMENTS: usize = SPLINE_KNOTS - 1;
/// Uniform knot spacing; knots are tᵢ = 0.05·i for i = −20..20.
pub const SPLINE_KNOT_GAP: f64 = 0.05;
/// Leftmost knot t₋₂₀ = −1.
pub const SPLINE_KNOT_MIN: f64 = -1.0;
/// Floor added to exp(uⱼ) so every increment stays ≥ 1e-6.
pub const SPLINE_MIN_INCREMENT: f64 = 1e-6;
/// Index of the center knot t = 0, where σ(0) = 0 is anchored.
const SPLINE_CENTER: usize = 20;

/// A strictly increasing piecewise-linear scalar map σ and its integrated
/// potential, applied elementwise by the spline mirror-map kind.
///
/// Knot values cᵢ = σ(tᵢ) are derived from 40 unconstrained parameters uⱼ via
/// increments cᵢ₊₁ − cᵢ = exp(uⱼ) + 1e-6, anchored at σ(0) = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineMap {
    increment_params: Vec<f64>,
    values: Vec<f64>,
    /// ∫₀^{tᵢ} σ(t)dt at each knot, for the analytic potential.
    knot_integrals: Vec<f64>,
}

impl SplineMap {
    /// Builds the spline from its 40 unconstrained increment parameters.
    pub fn from_increment_params(u: &[f64]) -> Result<Self> {
        if u.len() != SPLINE_INCREMENTS {
            return Err(Error::DimensionMismatch {
                expected: SPLINE_INCREMENTS,
                got: u.len(),
            });
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "spline increment parameters",
            });
        }
        // Knot values are cumulative sums of increments exp(uⱼ) + floor,
        // anchored at the center so that σ(0) = 0.
        let mut values = vec![0.0; SPLINE_KNOTS];
        for j in SPLINE_CENTER..SPLINE_INCREMENTS {
            values[j + 1] = values[j] + (u[j].exp() + SPLINE_MIN_INCREMENT);
        }
        for j in (0..SPLINE_CENTER).rev() {
            values[j] = values[j + 1] - (u[j].exp() + SPLINE_MIN_INCREMENT);
        }

        let mut knot_integrals = vec![0.0; SPLINE_KNOTS];
        for i in SPLINE_CENTER..SPLINE_KNOTS - 1 {
            knot_integrals[i + 1] =
                knot_integrals[i] + SPLINE_KNOT_GAP * (values[i] + values[i + 1]) / 2.0;
        }
        for i in (0..SPLINE_CENTER).rev() {
            knot_integrals[i] =
                knot_integrals[i + 1] - SPLINE_KNOT_GAP * (values[i] + values[i + 1]) / 2.0;
        }
        Ok(SplineMap {
            increment_params: u.to_vec(),
            values,
            knot_integrals,
        })
    }

    /// The identity-initialized spline: σ(tᵢ) = tᵢ, so the map starts as the
    /// Euclidean one and untrained spline-LMD equals GD.
    pub fn identity() -> Self {
        let u = vec![(SPLINE_KNOT_GAP - SPLINE_MIN_INCREMENT).ln(); SPLINE_INCREMENTS];
        SplineMap::from_increment_params(&u).expect("identity parameters are valid")
    }

    /// Unconstrained increment parameters (the learnable representation).
    pub fn increment_params(&self) -> &[f64] {
        &self.increment_params
    }

    /// Knot values cᵢ = σ(tᵢ).
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Knot locations tᵢ = 0.05·i for i = −20..20.
    pub fn knots() -> Vec<f64> {
        (0..SPLINE_KNOTS)
            .map(|i| SPLINE_KNOT_MIN + SPLINE_KNOT_GAP * i as f64)
            .collect()
    }

    /// Index of the linear piece containing x (clamped so that the terminal
    /// pieces extend beyond [−1, 1]).
    fn piece_index(x: f64) -> usize {
        let raw = ((x - SPLINE_KNOT_MIN) / SPLINE_KNOT_GAP).floor();
        (raw.max(0.0) as usize).min(SPLINE_INCREMENTS - 1)
    }

    /// σ(x): linear interpolation inside [−1, 1], terminal slopes outside.
    pub fn value_at(&self, x: f64) -> f64 {
        let i = Self::piece_index(x);
        let ti = SPLINE_KNOT_MIN + SPLINE_KNOT_GAP * i as f64;
        let s = (x - ti) / SPLINE_KNOT_GAP;
        self.values[i] * (1.0 - s) + self.values[i + 1] * s
    }

    /// σ⁻¹(y): locates the bracketing value interval [cⱼ, cⱼ₊₁] and inverts
    /// the linear piece; terminal pieces invert the extrapolated slopes.
    pub fn inverse_at(&self, y: f64) -> f64 {
        // partition_point returns the first index with c[idx] > y, so j is the
        // last knot with cⱼ ≤ y; clamping keeps terminal pieces for outside y.
        let j = self
            .values
            .partition_point(|&c| c <= y)
            .saturating_sub(1)
            .min(SPLINE_INCREMENTS - 1);
        let tj = SPLINE_KNOT_MIN + SPLINE_KNOT_GAP * j as f64;
        let s = (y - self.values[j]) / (self.values[j + 1] - self.values[j]);
        tj + s * SPLINE_KNOT_GAP
    }

    /// ψ_s(x) = ∫₀ˣ σ(t)dt, integrated analytically over the linear pieces.
    pub fn potential_at(&self, x: f64) -> f64 {
        let i = Self::piece_index(x);
        let ti = SPLINE_KNOT_MIN + SPLINE_KNOT_GAP * i as f64;
        let dx = x - ti;
        let slope = (self.values[i + 1] - self.values[i]) / SPLINE_KNOT_GAP;
        self.knot_integrals[i] + self.values[i] * dx + 0.5 * slope * dx * dx
    }

    /// ψ_s*(y) = x·y − ψ_s(x) evaluated at x = σ⁻¹(y).
    pub fn conjugate_at(&self, y: f64) -> f64 {
        let x = self.inverse_at(y);
        x * y - self.potential_at(x)
    }

    /// Minimum slope of σ = strong-convexity constant of the scalar potential.
    pub fn min_slope(&self) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..SPLINE_INCREMENTS {
            m = m.min((self.values[i + 1] - self.values[i]) / SPLINE_KNOT_GAP);
        }
        m
    }
}

/// A mirror map ∇ψ with exact inverse ∇ψ* and strong-convexity constant α.
#[derive(Debug, Clone, PartialEq)]
pub enum MirrorMap {
    /// ψ(x) = ½‖x‖²; forward and inverse are the identity.
    Euclidean { dim: usize },
    /// ψ(x) = ½xᵀdiag(d)x; forward multiplies by d, inverse divides.
    DiagonalQuadratic { d: Array1<f64> },
    /// ψ(x) = Σᵢ ψ_s(xᵢ) with the same scalar spline on every coordinate.
    SplineElementwise { spline: SplineMap, dim: usize },
}

impl MirrorMap {
    pub fn euclidean(dim: usize) -> Self {
        MirrorMap::Euclidean { dim }
    }

    /// Diagonal quadratic map; every weight must be strictly positive.
    pub fn diagonal(d: Vec<f64>) -> Result<Self> {
        if d.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(
                "diagonal map weights must be finite and > 0".into(),
            ));
        }
        Ok(MirrorMap::DiagonalQuadratic {
            d: Array1::from_vec(d),
        })
    }

    pub fn spline(spline: SplineMap, dim: usize) -> Self {
        MirrorMap::SplineElementwise { spline, dim }
    }

    /// Identity-initialized spline map (equals the Euclidean map pointwise on
    /// [−1, 1] and by terminal-slope extension outside).
    pub fn spline_identity(dim: usize) -> Self {
        MirrorMap::SplineElementwise {
            spline: SplineMap::identity(),
            dim,
        }
    }

    pub fn dimension(&self) -> usize {
        match self {
            MirrorMap::Euclidean { dim } => *dim,
            MirrorMap::DiagonalQuadratic { d } => d.len(),
            MirrorMap::SplineElementwise { dim, .. } => *dim,
        }
    }

    /// Strong-convexity constant α of ψ.
    /// Stable kind name used in documents and trace metadata.
    pub fn kind_name(&self) -> &'static str {
        match self {
            MirrorMap::Euclidean { .. } => "euclidean",
            MirrorMap::DiagonalQuadratic { .. } => "diagonal_quadratic",
            MirrorMap::SplineElementwise { .. } => "spline_elementwise",
        }
    }

    pub fn alpha(&self) -> f64 {
        match self {
            MirrorMap::Euclidean { .. } => 1.0,
            MirrorMap::DiagonalQuadratic { d } => d.iter().cloned().fold(f64::INFINITY, f64::min),
            MirrorMap::SplineElementwise { spline, .. } => spline.min_slope(),
        }
    }

    /// Smoothness constant of ψ* (Lipschitz constant of ∇ψ*) when computable.
    pub fn dual_smoothness(&self) -> Option<f64> {
        match self {
            MirrorMap::Euclidean { .. } => Some(1.0),
            MirrorMap::DiagonalQuadratic { d } => {
                Some(1.0 / d.iter().cloned().fold(f64::INFINITY, f64::min))
            }
            MirrorMap::SplineElementwise { spline, .. } => Some(1.0 / spline.min_slope()),
        }
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dimension() {
            return Err(Error::DimensionMismatch {
                expected: self.dimension(),
                got: len,
            });
        }
        Ok(())
    }

    /// Forward map y = ∇ψ(x), primal → dual.
    pub fn forward(&self, x: &PrimalVector) -> Result<DualVector> {
        self.check_dim(x.len())?;
        if x.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "forward input",
            });
        }
        Ok(DualVector(match self {
            MirrorMap::Euclidean { .. } => x.0.clone(),
            MirrorMap::DiagonalQuadratic { d } => &x.0 * d,
            MirrorMap::SplineElementwise { spline, .. } => x.0.mapv(|v| spline.value_at(v)),
        }))
    }

    /// Inverse map x = ∇ψ*(y), dual → primal; the exact functional inverse of
    /// [`MirrorMap::forward`].
    pub fn inverse(&self, y: &DualVector) -> Result<PrimalVector> {
        self.check_dim(y.len())?;
        if y.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "inverse input",
            });
        }
        Ok(PrimalVector(match self {
            MirrorMap::Euclidean { .. } => y.0.clone(),
            MirrorMap::DiagonalQuadratic { d } => &y.0 / d,
            MirrorMap::SplineElementwise { spline, .. } => y.0.mapv(|v| spline.inverse_at(v)),
        }))
    }

    /// The potential value ψ(x).
    pub fn potential(&self, x: &PrimalVector) -> Result<f64> {
        self.check_dim(x.len())?;
        Ok(match self {
            MirrorMap::Euclidean { .. } => 0.5 * x.0.dot(&x.0),
            MirrorMap::DiagonalQuadratic { d } => 0.5 * (&x.0 * &x.0).dot(d),
            MirrorMap::SplineElementwise { spline, .. } => {
                x.0.iter().map(|&v| spline.potential_at(v)).sum()
            }
        })
    }

    /// The conjugate value ψ*(y) = ⟨∇ψ*(y), y⟩ − ψ(∇ψ*(y)).
    pub fn conjugate(&self, y: &DualVector) -> Result<f64> {
        self.check_dim(y.len())?;
        Ok(match self {
            MirrorMap::Euclidean { .. } => 0.5 * y.0.dot(&y.0),
            MirrorMap::DiagonalQuadratic { d } => 0.5 * (&y.0 * &y.0 / d).sum(),
            MirrorMap::SplineElementwise { spline, .. } => {
                y.0.iter().map(|&v| spline.conjugate_at(v)).sum()
            }
        })
    }

    /// Bregman divergence B_ψ(x, y) = ψ(x) − ψ(y) − ⟨∇ψ(y), x − y⟩ ≥ (α/2)‖x−y‖².
    pub fn bregman(&self, x: &PrimalVector, y: &PrimalVector) -> Result<f64> {
        self.check_dim(x.len())?;
        self.check_dim(y.len())?;
        Ok(match self {
            MirrorMap::Euclidean { .. } => {
                let diff = &x.0 - &y.0;
                0.5 * diff.dot(&diff)
            }
            MirrorMap::DiagonalQuadratic { d } => {
                let diff = &x.0 - &y.0;
                0.5 * (&diff * &diff).dot(d)
            }
            MirrorMap::SplineElementwise { spline, .. } => x
                .0
                .iter()
                .zip(y.0.iter())
                .map(|(&a, &b)| {
                    spline.potential_at(a) - spline.potential_at(b) - spline.value_at(b) * (a - b)
                })
                .sum(),
        })
    }

    /// Dual Bregman divergence B_{ψ*}(u, v) = ψ*(u) − ψ*(v) − ⟨∇ψ*(v), u − v⟩.
    pub fn bregman_dual(&self, u: &DualVector, v: &DualVector) -> Result<f64> {
        self.check_dim(u.len())?;
        self.check_dim(v.len())?;
        Ok(match self {
            MirrorMap::Euclidean { .. } => {
                let diff = &u.0 - &v.0;
                0.5 * diff.dot(&diff)
            }
            MirrorMap::DiagonalQuadratic { d } => {
                let diff = &u.0 - &v.0;
                0.5 * (&diff * &diff / d).sum()
            }
            MirrorMap::SplineElementwise { spline, .. } => u
                .0
                .iter()
                .zip(v.0.iter())
                .map(|(&a, &b)| {
                    spline.conjugate_at(a) - spline.conjugate_at(b) - spline.inverse_at(b) * (a - b)
                })
                .sum(),
        })
    }

    /// Prox-mapping P_x(y) = argmin_{x'} {⟨y, x'⟩ + B_ψ(x', x)}. For exact
    /// conjugate pairs this equals ∇ψ*(∇ψ(x) − y).
    pub fn prox_mapping(&self, x: &PrimalVector, y: &DualVector) -> Result<PrimalVector> {
        let fwd = self.forward(x)?;
        self.inverse(&DualVector(&fwd.0 - &y.0))
    }

    /// Forward-backward inconsistency ‖∇ψ*(∇ψ(x)) − x‖₂. Identically tiny for
    /// the exact map kinds here; recorded in traces so inexact kinds plug in.
    pub fn consistency_error(&self, x: &PrimalVector) -> Result<f64> {
        let back = self.inverse(&self.forward(x)?)?;
        let diff = &back.0 - &x.0;
        Ok(diff.dot(&diff).sqrt())
    }

    /// Serializable document form.
    pub fn to_document(&self) -> MapDocument {
        let (kind, params) = match self {
            MirrorMap::Euclidean { .. } => ("euclidean".to_string(), Vec::new()),
            MirrorMap::DiagonalQuadratic { d } => ("diagonal_quadratic".to_string(), d.to_vec()),
            MirrorMap::SplineElementwise { spline, .. } => (
                "spline_elementwise".to_string(),
                spline.increment_params().to_vec(),
            ),
        };
        MapDocument {
            kind,
            dimension: self.dimension(),
            params,
            alpha: self.alpha(),
        }
    }

    /// Reconstructs a map from its document form, validating parameter counts,
    /// positivity, and the stored α against the derived one.
    pub fn from_document(doc: &MapDocument) -> Result<Self> {
        let map = match doc.kind.as_str() {
            "euclidean" => {
                if !doc.params.is_empty() {
                    return Err(Error::Config("euclidean map takes no parameters".into()));
                }
                MirrorMap::euclidean(doc.dimension)
            }
            "diagonal_quadratic" => {
                if doc.params.len() != doc.dimension {
                    return Err(Error::DimensionMismatch {
                        expected: doc.dimension,
                        got: doc.params.len(),
                    });
                }
                MirrorMap::diagonal(doc.params.clone())?
            }
            "spline_elementwise" => MirrorMap::spline(
                SplineMap::from_increment_params(&doc.params)?,
                doc.dimension,
            ),
            other => return Err(Error::Config(format!("unknown map kind '{other}'"))),
        };
        let derived = map.alpha();
        if !(doc.alpha > 0.0) || (doc.alpha - derived).abs() > 1e-9 * derived.max(1.0) {
            return Err(Error::Config(format!(
                "stored alpha {} disagrees with derived alpha {}",
                doc.alpha, derived
            )));
        }
        Ok(map)
    }
}

/// Serialized mirror-map form: {kind, dimension, params, alpha}, written as
/// JSON with 17-significant-digit decimals for value-exact round-trips.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MapDocument {
    pub kind: String,
    pub dimension: usize,
    pub params: Vec<f64>,
    pub alpha: f64,
}
