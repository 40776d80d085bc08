//! Permutation symmetries of network parameters and equivariant tying.
//!
//! Hidden units of a dense network can be permuted without changing the
//! network's function: ρ acting on layer l reindexes the columns of A_l, the
//! entries of b_l, and the rows of A_{l+1} simultaneously. An optimizer that
//! commutes with every such action cannot distinguish coordinates inside one
//! orbit of the group, so a learned diagonal weighting D restricted to the
//! equivariant subspace is constant on each orbit. This module builds those
//! orbit partitions (tying schemas), expands/contracts tied parameter
//! vectors, samples concrete group elements, and measures how far a step map
//! or a trained weighting is from exact equivariance:
//!
//! - a 2–h–1 dense net ties its 2h + 2h + 1 weights into 5 orbits (one per
//!   input coordinate for the first layer, one per remaining block);
//! - per-tensor tying assigns one orbit to every weight matrix and bias;
//! - the small convolutional classifier ties kernels across channels
//!   (kernel-position orbits plus one bias orbit) and its dense layer across
//!   pooled features, an imposed rather than symmetry-induced choice that
//!   the schema labels flag explicitly.

use crate::error::{Error, Result};
use crate::mirror_maps::PrimalVector;
use crate::problems::{CnnClassify, Problem};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Architecture descriptor a tying schema is derived from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Architecture {
    /// Dense net with symmetry-derived tying: first-layer weights split per
    /// input coordinate, every later weight matrix and every bias one block.
    Dense { layers: Vec<usize> },
    /// Dense net with one orbit per parameter tensor.
    DenseTensorTied { layers: Vec<usize> },
    /// The 3×3-conv(8) → pool → dense 288→10 classifier, channel-tied.
    ConvClassifier,
}

impl Architecture {
    /// Symmetry-derived descriptor for a network problem.
    pub fn from_problem(problem: &Problem) -> Result<Architecture> {
        match problem {
            Problem::BinaryMlp(p) => Ok(Architecture::Dense {
                layers: vec![2, p.hidden, 1],
            }),
            Problem::MlpClassify(p) => Ok(Architecture::Dense {
                layers: p.layers.clone(),
            }),
            Problem::CnnClassify(_) => Ok(Architecture::ConvClassifier),
            other => Err(Error::UnsupportedArchitecture(format!(
                "{} has no network symmetry group",
                other.kind_name()
            ))),
        }
    }

    /// Layer sizes of the dense variants.
    pub fn layers(&self) -> Option<&[usize]> {
        match self {
            Architecture::Dense { layers } | Architecture::DenseTensorTied { layers } => {
                Some(layers)
            }
            Architecture::ConvClassifier => None,
        }
    }
}

/// Parameter shapes of a dense net, in packing order (Aₗ then bₗ).
fn dense_param_shapes(layers: &[usize]) -> Vec<(usize, usize)> {
    let mut shapes = Vec::new();
    for win in layers.windows(2) {
        shapes.push((win[0], win[1]));
        shapes.push((1, win[1]));
    }
    shapes
}

fn check_dense_layers(layers: &[usize], need_hidden: bool) -> Result<()> {
    let min_len = if need_hidden { 3 } else { 2 };
    if layers.len() < min_len {
        return Err(Error::UnsupportedArchitecture(format!(
            "dense net needs at least {min_len} layer sizes, got {}",
            layers.len()
        )));
    }
    if layers.iter().any(|&d| d == 0) {
        return Err(Error::UnsupportedArchitecture(
            "layer sizes must be positive".into(),
        ));
    }
    Ok(())
}

/// A partition of the flat parameter indices into tied orbits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TyingSchema {
    /// Flat parameter dimension the orbits cover.
    pub total_dim: usize,
    /// Disjoint index groups in a stable (packing) order.
    pub orbits: Vec<Vec<usize>>,
    /// Human-readable per-orbit names, parallel to `orbits`.
    pub labels: Vec<String>,
}

impl TyingSchema {
    /// Number of tied parameters.
    pub fn orbit_count(&self) -> usize {
        self.orbits.len()
    }

    /// Checks that the orbits are non-empty, disjoint, in range, and cover
    /// every index, and that each orbit has a label.
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.orbits.len() {
            return Err(Error::Config(format!(
                "{} labels for {} orbits",
                self.labels.len(),
                self.orbits.len()
            )));
        }
        let mut seen = vec![false; self.total_dim];
        for orbit in &self.orbits {
            if orbit.is_empty() {
                return Err(Error::Config("empty orbit".into()));
            }
            for &i in orbit {
                if i >= self.total_dim {
                    return Err(Error::Config(format!(
                        "orbit index {i} out of range {}",
                        self.total_dim
                    )));
                }
                if seen[i] {
                    return Err(Error::Config(format!("index {i} in two orbits")));
                }
                seen[i] = true;
            }
        }
        if let Some(miss) = seen.iter().position(|&s| !s) {
            return Err(Error::Config(format!("index {miss} not covered")));
        }
        Ok(())
    }
}

/// Builds the orbit partition of an architecture's flat parameter vector.
pub fn build_tying_schema(arch: &Architecture) -> Result<TyingSchema> {
    let mut orbits: Vec<Vec<usize>> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    let total_dim;
    match arch {
        Architecture::Dense { layers } => {
            check_dense_layers(layers, true)?;
            let shapes = dense_param_shapes(layers);
            total_dim = shapes.iter().map(|(r, c)| r * c).sum();
            let mut off = 0;
            for (t, &(rows, cols)) in shapes.iter().enumerate() {
                let layer = t / 2 + 1;
                if t % 2 == 0 {
                    if t == 0 {
                        // First-layer weights: one orbit per input coordinate.
                        for p in 0..rows {
                            orbits.push((0..cols).map(|q| off + p * cols + q).collect());
                            labels.push(format!("A1 row-block input-dim {p}"));
                        }
                    } else {
                        orbits.push((off..off + rows * cols).collect());
                        labels.push(format!("A{layer}"));
                    }
                } else {
                    orbits.push((off..off + cols).collect());
                    labels.push(format!("b{layer}"));
                }
                off += rows * cols;
            }
        }
        Architecture::DenseTensorTied { layers } => {
            check_dense_layers(layers, false)?;
            let shapes = dense_param_shapes(layers);
            total_dim = shapes.iter().map(|(r, c)| r * c).sum();
            let mut off = 0;
            for (t, &(rows, cols)) in shapes.iter().enumerate() {
                let layer = t / 2 + 1;
                orbits.push((off..off + rows * cols).collect());
                labels.push(if t % 2 == 0 {
                    format!("A{layer}")
                } else {
                    format!("b{layer}")
                });
                off += rows * cols;
            }
        }
        Architecture::ConvClassifier => {
            let conv = CnnClassify::CONV;
            let kernel_len = conv.in_ch * conv.k * conv.k;
            // Dense input features after the 2×2 pool of the conv maps.
            let pool = CnnClassify::POOL;
            let feat = pool.ch * (pool.h / pool.window) * (pool.w / pool.window);
            let shapes = [(conv.out_ch, kernel_len), (1, conv.out_ch), (feat, 10), (1, 10)];
            total_dim = shapes.iter().map(|(r, c)| r * c).sum();
            let mut off = 0;
            // Kernels tied across output channels: one orbit per position.
            for j in 0..kernel_len {
                orbits.push((0..conv.out_ch).map(|c| off + c * kernel_len + j).collect());
                labels.push(format!("conv kernel position {j} (tied across channels)"));
            }
            off += conv.out_ch * kernel_len;
            orbits.push((off..off + conv.out_ch).collect());
            labels.push("conv bias (tied across channels)".into());
            off += conv.out_ch;
            // Dense weights tied across pooled input features, per output.
            // Channel permutations only induce tying across the channel
            // blocks; the full across-feature tying is imposed, not induced.
            for o in 0..10 {
                orbits.push((0..feat).map(|f| off + f * 10 + o).collect());
                labels.push(format!(
                    "W2 out {o} (tied across pooled features; imposed, not induced)"
                ));
            }
            off += feat * 10;
            for o in 0..10 {
                orbits.push(vec![off + o]);
                labels.push(format!("b2 out {o}"));
            }
        }
    }
    let schema = TyingSchema {
        total_dim,
        orbits,
        labels,
    };
    schema.validate()?;
    Ok(schema)
}

/// Fills every index of an orbit with that orbit's tied value.
pub fn expand_tied(schema: &TyingSchema, tied: &[f64]) -> Result<PrimalVector> {
    if tied.len() != schema.orbits.len() {
        return Err(Error::DimensionMismatch {
            expected: schema.orbits.len(),
            got: tied.len(),
        });
    }
    let mut full = vec![0.0; schema.total_dim];
    for (orbit, &v) in schema.orbits.iter().zip(tied) {
        for &i in orbit {
            full[i] = v;
        }
    }
    Ok(PrimalVector::from_vec(full))
}

/// Reduction used when contracting a full vector onto its orbits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContractMode {
    /// Orbit mean: the ℓ₂ projection onto the equivariant subspace.
    #[default]
    Mean,
    /// First element of each orbit.
    First,
}

/// Contracts a full parameter vector to one value per orbit.
pub fn contract_tied(
    schema: &TyingSchema,
    full: &PrimalVector,
    mode: ContractMode,
) -> Result<Vec<f64>> {
    if full.len() != schema.total_dim {
        return Err(Error::DimensionMismatch {
            expected: schema.total_dim,
            got: full.len(),
        });
    }
    schema
        .orbits
        .iter()
        .map(|orbit| {
            if orbit.is_empty() {
                return Err(Error::Config("empty orbit".into()));
            }
            Ok(match mode {
                ContractMode::Mean => {
                    orbit.iter().map(|&i| full.0[i]).sum::<f64>() / orbit.len() as f64
                }
                ContractMode::First => full.0[orbit[0]],
            })
        })
        .collect()
}

/// A hidden-unit permutation symmetry and its action on flat parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupElement {
    /// ρ_l for each hidden layer l = 1..L−1 (input/output stay fixed).
    pub layer_perms: Vec<Vec<usize>>,
    /// Induced flat-index permutation: (g·z)[i] = z[index_perm[i]].
    pub index_perm: Vec<usize>,
}

impl GroupElement {
    /// Builds the induced parameter action from per-hidden-layer
    /// permutations: weights pick up ρ on both sides, biases on their layer.
    pub fn from_layer_perms(layers: &[usize], layer_perms: Vec<Vec<usize>>) -> Result<Self> {
        check_dense_layers(layers, true)?;
        let hidden = layers.len() - 2;
        if layer_perms.len() != hidden {
            return Err(Error::DimensionMismatch {
                expected: hidden,
                got: layer_perms.len(),
            });
        }
        for (h, perm) in layer_perms.iter().enumerate() {
            let d = layers[h + 1];
            if perm.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: perm.len(),
                });
            }
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            if sorted.iter().enumerate().any(|(i, &v)| i != v) {
                return Err(Error::Config(format!(
                    "layer {} permutation is not a bijection",
                    h + 1
                )));
            }
        }
        // ρ for every layer 0..=L with the identity at input and output.
        let rho = |layer: usize, i: usize| -> usize {
            if layer == 0 || layer == layers.len() - 1 {
                i
            } else {
                layer_perms[layer - 1][i]
            }
        };
        let shapes = dense_param_shapes(layers);
        let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
        let mut index_perm = vec![0usize; total];
        let mut off = 0;
        for (t, &(rows, cols)) in shapes.iter().enumerate() {
            let layer = t / 2 + 1;
            if t % 2 == 0 {
                for i in 0..rows {
                    let pi = rho(layer - 1, i);
                    for j in 0..cols {
                        index_perm[off + i * cols + j] = off + pi * cols + rho(layer, j);
                    }
                }
            } else {
                for j in 0..cols {
                    index_perm[off + j] = off + rho(layer, j);
                }
            }
            off += rows * cols;
        }
        Ok(GroupElement {
            layer_perms,
            index_perm,
        })
    }

    /// Samples uniform random permutations for every hidden layer.
    pub fn sample(layers: &[usize], seed: u64) -> Result<Self> {
        check_dense_layers(layers, true)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perms = layers[1..layers.len() - 1]
            .iter()
            .map(|&d| {
                let mut p: Vec<usize> = (0..d).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        GroupElement::from_layer_perms(layers, perms)
    }

    /// Applies the parameter action g·z.
    pub fn apply(&self, z: &PrimalVector) -> Result<PrimalVector> {
        if z.len() != self.index_perm.len() {
            return Err(Error::DimensionMismatch {
                expected: self.index_perm.len(),
                got: z.len(),
            });
        }
        Ok(PrimalVector::from_vec(
            self.index_perm.iter().map(|&i| z.0[i]).collect(),
        ))
    }
}

/// Sup-norm commutation residual ‖step(g·z) − g·step(z)‖∞ of a step map.
pub fn check_equivariance<F>(step_map: F, g: &GroupElement, z: &PrimalVector) -> Result<f64>
where
    F: Fn(&PrimalVector) -> Result<PrimalVector>,
{
    let gz = g.apply(z)?;
    let left = step_map(&gz)?;
    let right = g.apply(&step_map(z)?)?;
    if left.len() != right.len() {
        return Err(Error::DimensionMismatch {
            expected: right.len(),
            got: left.len(),
        });
    }
    Ok(left
        .0
        .iter()
        .zip(right.0.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Per-orbit grouping summary of a full parameter vector.
#[derive(Debug, Clone)]
pub struct GroupingReport {
    /// (mean, population std) for each orbit, in schema order.
    pub per_orbit: Vec<(f64, f64)>,
    /// max(within-orbit std) / std(orbit means); 0 when all orbits are
    /// exactly tied, infinite when orbits scatter but their means agree.
    pub ratio: f64,
}

/// Measures how strongly a vector groups along the schema's orbits.
pub fn grouping_statistic(schema: &TyingSchema, full: &PrimalVector) -> Result<GroupingReport> {
    schema.validate()?;
    if full.len() != schema.total_dim {
        return Err(Error::DimensionMismatch {
            expected: schema.total_dim,
            got: full.len(),
        });
    }
    let per_orbit: Vec<(f64, f64)> = schema
        .orbits
        .iter()
        .map(|orbit| {
            let n = orbit.len() as f64;
            let mean = orbit.iter().map(|&i| full.0[i]).sum::<f64>() / n;
            let var = orbit.iter().map(|&i| (full.0[i] - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect();
    let max_within = per_orbit.iter().map(|&(_, s)| s).fold(0.0, f64::max);
    let m = per_orbit.len() as f64;
    let grand = per_orbit.iter().map(|&(mu, _)| mu).sum::<f64>() / m;
    let between = (per_orbit
        .iter()
        .map(|&(mu, _)| (mu - grand).powi(2))
        .sum::<f64>()
        / m)
        .sqrt();
    let ratio = if max_within == 0.0 {
        0.0
    } else {
        max_within / between
    };
    Ok(GroupingReport { per_orbit, ratio })
}
