//! Objective families with deterministic and stochastic gradient oracles.
//!
//! Each problem exposes its loss *and* its hand-written gradient as
//! operations on a [`Tape`](crate::tape::Tape), so the same code path serves
//! three uses: plain objective/gradient evaluation (read the node values),
//! stochastic oracles (same on a minibatch), and unrolled meta-training
//! (record the ops across iterations, then reverse once). Parameters are kept
//! per-tensor on the tape; a flat packed vector form is used everywhere else.
//!
//! Kinds: `quadratic` ½xᵀdiag(d)x + bᵀx; `denoise_tv`/`inpaint_tv`
//! ‖Z∘(x−y)‖² + λΣ√((∇x)² + ε²); `svm_hinge` ½‖w‖² + (C/m)Σmax(0, 1−yᵢ(wᵀφᵢ+b));
//! `mlp_classify` / `cnn_classify` mean cross-entropy; `binary_mlp` a 2–50–1
//! logistic classifier for the permutation-structure demonstrations.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::mirror_maps::{DualVector, PrimalVector};
use crate::tape::{ConvShape, NodeId, PoolShape, Tape};

/// Smoothing width of the absolute value inside total variation.
pub const TV_EPS: f64 = 1e-8;
/// Default total-variation regularization weight.
pub const TV_LAMBDA: f64 = 0.15;
/// Default hinge weight for the SVM objective.
pub const SVM_C: f64 = 1.0;
/// Fully connected classifier layer sizes.
pub const MLP_LAYERS: [usize; 6] = [784, 50, 40, 30, 20, 10];

/// ½xᵀdiag(d)x + bᵀx with closed-form minimizer −b/d.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub d: Array1<f64>,
    pub b: Array1<f64>,
}

impl Quadratic {
    pub fn new(d: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if d.len() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: d.len(),
                got: b.len(),
            });
        }
        if d.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Config("quadratic diagonal must be > 0".into()));
        }
        Ok(Quadratic {
            d: Array1::from_vec(d),
            b: Array1::from_vec(b),
        })
    }

    /// The unique minimizer −diag(d)⁻¹b.
    pub fn minimizer(&self) -> PrimalVector {
        PrimalVector((-&self.b) / &self.d)
    }

    /// f(x*) = −½ bᵀdiag(d)⁻¹b.
    pub fn min_value(&self) -> f64 {
        -0.5 * (&self.b * &self.b / &self.d).sum()
    }
}

/// Total-variation restoration: ‖Z∘(x−y)‖² + λΣ√((∇x)² + ε²).
/// Without a mask this is denoising; with a binary mask, inpainting.
#[derive(Debug, Clone)]
pub struct TvRestore {
    /// Observed image, H×W.
    pub y: Array2<f64>,
    pub lambda: f64,
    pub eps: f64,
    /// 1 = observed pixel; None means all pixels observed.
    pub mask: Option<Array2<f64>>,
}

impl TvRestore {
    pub fn denoise(y: Array2<f64>, lambda: f64) -> Result<Self> {
        let (h, w) = y.dim();
        if h < 2 || w < 2 {
            return Err(Error::Config("TV image must be at least 2×2".into()));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config("TV lambda must be finite and ≥ 0".into()));
        }
        Ok(TvRestore {
            y,
            lambda,
            eps: TV_EPS,
            mask: None,
        })
    }

    pub fn inpaint(y: Array2<f64>, mask: Array2<f64>, lambda: f64) -> Result<Self> {
        if mask.dim() != y.dim() {
            return Err(Error::DimensionMismatch {
                expected: y.len(),
                got: mask.len(),
            });
        }
        if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Config("inpainting mask must be binary".into()));
        }
        let mut p = TvRestore::denoise(y, lambda)?;
        p.mask = Some(mask);
        Ok(p)
    }
}

/// Soft-margin SVM on fixed feature vectors.
#[derive(Debug, Clone)]
pub struct SvmHinge {
    /// m×50 feature matrix.
    pub features: Array2<f64>,
    /// Labels in {−1, +1}.
    pub labels: Vec<f64>,
    pub c: f64,
}

impl SvmHinge {
    pub fn new(features: Array2<f64>, labels: Vec<f64>, c: f64) -> Result<Self> {
        if features.nrows() != labels.len() || features.nrows() == 0 {
            return Err(Error::DimensionMismatch {
                expected: features.nrows(),
                got: labels.len(),
            });
        }
        if labels.iter().any(|&y| y != -1.0 && y != 1.0) {
            return Err(Error::Config("SVM labels must be ±1".into()));
        }
        Ok(SvmHinge { features, labels, c })
    }
}

/// Multiclass fully connected ReLU classifier with a cross-entropy loss.
#[derive(Debug, Clone)]
pub struct MlpClassify {
    /// n×784 images.
    pub data: Array2<f64>,
    pub labels: Vec<usize>,
    pub layers: Vec<usize>,
}

/// Small convolutional classifier: 3×3 conv to 8 channels on 14×14 inputs,
/// ReLU, 2×2 max-pool, dense 288→10, cross-entropy.
#[derive(Debug, Clone)]
pub struct CnnClassify {
    /// n×196 images (14×14).
    pub data: Array2<f64>,
    pub labels: Vec<usize>,
}

impl CnnClassify {
    pub const CONV: ConvShape = ConvShape {
        h: 14,
        w: 14,
        in_ch: 1,
        out_ch: 8,
        k: 3,
    };
    pub const POOL: PoolShape = PoolShape {
        ch: 8,
        h: 12,
        w: 12,
        window: 2,
    };
}

/// Two-input binary classifier 2–50–1 with ReLU hidden layer and logistic
/// loss, labels in {−1, +1}.
#[derive(Debug, Clone)]
pub struct BinaryMlp {
    /// n×2 points.
    pub data: Array2<f64>,
    pub labels: Vec<f64>,
    pub hidden: usize,
}

/// An optimization problem with tape-expressible loss and gradient.
#[derive(Debug, Clone)]
pub enum Problem {
    Quadratic(Quadratic),
    TvRestore(TvRestore),
    SvmHinge(SvmHinge),
    MlpClassify(MlpClassify),
    CnnClassify(CnnClassify),
    BinaryMlp(BinaryMlp),
}

impl Problem {
    /// Stable kind name used in configs and trace metadata.
    pub fn kind_name(&self) -> &'static str {
        match self {
            Problem::Quadratic(_) => "quadratic",
            Problem::TvRestore(p) => {
                if p.mask.is_some() {
                    "inpaint_tv"
                } else {
                    "denoise_tv"
                }
            }
            Problem::SvmHinge(_) => "svm_hinge",
            Problem::MlpClassify(_) => "mlp_classify",
            Problem::CnnClassify(_) => "cnn_classify",
            Problem::BinaryMlp(_) => "binary_mlp",
        }
    }

    /// Row-major shapes of the parameter tensors, in packing order.
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        match self {
            Problem::Quadratic(p) => vec![(p.d.len(), 1)],
            Problem::TvRestore(p) => vec![(p.y.len(), 1)],
            Problem::SvmHinge(p) => vec![(p.features.ncols(), 1), (1, 1)],
            Problem::MlpClassify(p) => {
                let mut shapes = Vec::new();
                for win in p.layers.windows(2) {
                    shapes.push((win[0], win[1]));
                    shapes.push((1, win[1]));
                }
                shapes
            }
            Problem::CnnClassify(_) => {
                let c = CnnClassify::CONV;
                let pool = CnnClassify::POOL;
                let feat = pool.ch * (pool.h / pool.window) * (pool.w / pool.window);
                vec![
                    (c.out_ch, c.in_ch * c.k * c.k),
                    (1, c.out_ch),
                    (feat, 10),
                    (1, 10),
                ]
            }
            Problem::BinaryMlp(p) => {
                vec![(2, p.hidden), (1, p.hidden), (p.hidden, 1), (1, 1)]
            }
        }
    }

    /// Total flat parameter dimension.
    pub fn dim(&self) -> usize {
        self.param_shapes().iter().map(|(r, c)| r * c).sum()
    }

    /// Number of data examples for minibatch oracles (None for problems
    /// without a sum-over-examples structure).
    pub fn num_examples(&self) -> Option<usize> {
        match self {
            Problem::Quadratic(_) | Problem::TvRestore(_) => None,
            Problem::SvmHinge(p) => Some(p.labels.len()),
            Problem::MlpClassify(p) => Some(p.labels.len()),
            Problem::CnnClassify(p) => Some(p.labels.len()),
            Problem::BinaryMlp(p) => Some(p.labels.len()),
        }
    }

    /// Splits a flat vector into parameter tensors.
    pub fn unpack(&self, x: &PrimalVector) -> Result<Vec<Array2<f64>>> {
        let shapes = self.param_shapes();
        let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
        if x.len() != total {
            return Err(Error::DimensionMismatch {
                expected: total,
                got: x.len(),
            });
        }
        let slice = x.as_slice();
        let mut out = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for (r, c) in shapes {
            out.push(
                Array2::from_shape_vec((r, c), slice[offset..offset + r * c].to_vec())
                    .expect("shape product checked"),
            );
            offset += r * c;
        }
        Ok(out)
    }

    /// Concatenates parameter tensors into the flat row-major vector.
    pub fn pack(&self, tensors: &[Array2<f64>]) -> PrimalVector {
        let mut flat = Vec::with_capacity(self.dim());
        for t in tensors {
            flat.extend(t.iter().cloned());
        }
        PrimalVector::from_vec(flat)
    }

    /// Builds the objective value as a tape node from per-tensor parameter
    /// nodes, optionally restricted to the given example indices.
    pub fn loss_node(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        batch: Option<&[usize]>,
    ) -> Result<NodeId> {
        self.check_params(tape, params)?;
        Ok(match self {
            Problem::Quadratic(p) => {
                if batch.is_some() {
                    return Err(Error::Config("quadratic has no minibatch structure".into()));
                }
                let x = params[0];
                let dk = tape.leaf_col(p.d.as_slice().unwrap());
                let bk = tape.leaf_col(p.b.as_slice().unwrap());
                let dx = tape.mul_elem(dk, x);
                let quad = tape.dot(dx, x);
                let half = tape.mul_k(quad, 0.5);
                let lin = tape.dot(bk, x);
                tape.add(half, lin)
            }
            Problem::TvRestore(p) => {
                if batch.is_some() {
                    return Err(Error::Config(
                        "TV restoration has no minibatch structure".into(),
                    ));
                }
                let (h, w) = p.y.dim();
                let x = params[0];
                let yk = tape.leaf_col(p.y.as_slice().unwrap());
                let r = tape.sub(x, yk);
                let r = match &p.mask {
                    Some(m) => {
                        let mk = tape.leaf_col(m.as_slice().unwrap());
                        tape.mul_elem(mk, r)
                    }
                    None => r,
                };
                let data = tape.dot(r, r);
                let dh = tape.diff_h(x, h, w);
                let dv = tape.diff_v(x, h, w);
                let th = tape.smooth_abs_sum(dh, p.eps);
                let tv = tape.smooth_abs_sum(dv, p.eps);
                let t = tape.add(th, tv);
                let reg = tape.mul_k(t, p.lambda);
                tape.add(data, reg)
            }
            Problem::SvmHinge(p) => {
                let (phi, y, mb) = svm_batch(p, batch);
                let (w, b) = (params[0], params[1]);
                let phik = tape.leaf(phi);
                let yk = tape.leaf(y);
                let z = tape.matmul(phik, w);
                let zb = tape.add_row(z, b);
                let yz = tape.mul_elem(yk, zb);
                let neg = tape.neg(yz);
                let margins = tape.add_const(neg, 1.0);
                let hinge = tape.relu(margins);
                let total = tape.sum_all(hinge);
                let data = tape.mul_k(total, p.c / mb as f64);
                let ww = tape.dot(w, w);
                let reg = tape.mul_k(ww, 0.5);
                tape.add(reg, data)
            }
            Problem::MlpClassify(p) => {
                let (x, labels) = select_rows_usize(&p.data, &p.labels, batch);
                let mut a = tape.leaf(x);
                let nl = p.layers.len() - 1;
                for l in 0..nl {
                    let z = tape.matmul(a, params[2 * l]);
                    let zb = tape.add_row(z, params[2 * l + 1]);
                    a = if l + 1 < nl { tape.relu(zb) } else { zb };
                }
                tape.ce_logits(a, &labels)
            }
            Problem::CnnClassify(p) => {
                let (x, labels) = select_rows_usize(&p.data, &p.labels, batch);
                let xk = tape.leaf(x);
                let nodes = cnn_forward(tape, xk, params);
                tape.ce_logits(nodes.logits, &labels)
            }
            Problem::BinaryMlp(p) => {
                let (x, labels) = select_rows_f64(&p.data, &p.labels, batch);
                let xk = tape.leaf(x);
                let z1 = tape.matmul(xk, params[0]);
                let z1b = tape.add_row(z1, params[1]);
                let a1 = tape.relu(z1b);
                let z2 = tape.matmul(a1, params[2]);
                let z2b = tape.add_row(z2, params[3]);
                tape.logistic_loss(z2b, &labels)
            }
        })
    }

    /// Builds the gradient (one node per parameter tensor) as tape
    /// operations — hand-written backpropagation that later reverse sweeps
    /// can differentiate again.
    pub fn grad_nodes(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        batch: Option<&[usize]>,
    ) -> Result<Vec<NodeId>> {
        self.check_params(tape, params)?;
        Ok(match self {
            Problem::Quadratic(p) => {
                if batch.is_some() {
                    return Err(Error::Config("quadratic has no minibatch structure".into()));
                }
                let x = params[0];
                let dk = tape.leaf_col(p.d.as_slice().unwrap());
                let bk = tape.leaf_col(p.b.as_slice().unwrap());
                let dx = tape.mul_elem(dk, x);
                vec![tape.add(dx, bk)]
            }
            Problem::TvRestore(p) => {
                if batch.is_some() {
                    return Err(Error::Config(
                        "TV restoration has no minibatch structure".into(),
                    ));
                }
                let (h, w) = p.y.dim();
                let x = params[0];
                let yk = tape.leaf_col(p.y.as_slice().unwrap());
                let r = tape.sub(x, yk);
                let r = match &p.mask {
                    Some(m) => {
                        let mk = tape.leaf_col(m.as_slice().unwrap());
                        tape.mul_elem(mk, r)
                    }
                    None => r,
                };
                let gdata = tape.mul_k(r, 2.0);
                let dh = tape.diff_h(x, h, w);
                let dv = tape.diff_v(x, h, w);
                let sh = tape.smooth_sign(dh, p.eps);
                let sv = tape.smooth_sign(dv, p.eps);
                let gh = tape.diff_ht(sh, h, w);
                let gv = tape.diff_vt(sv, h, w);
                let gsum = tape.add(gh, gv);
                let greg = tape.mul_k(gsum, p.lambda);
                vec![tape.add(gdata, greg)]
            }
            Problem::SvmHinge(p) => {
                let (phi, y, mb) = svm_batch(p, batch);
                let (w, b) = (params[0], params[1]);
                let phik = tape.leaf(phi);
                let yk = tape.leaf(y);
                let z = tape.matmul(phik, w);
                let zb = tape.add_row(z, b);
                let yz = tape.mul_elem(yk, zb);
                let neg = tape.neg(yz);
                let margins = tape.add_const(neg, 1.0);
                let active = tape.step(margins);
                let yact = tape.mul_elem(yk, active);
                let phit = tape.tr(phik);
                let corr = tape.matmul(phit, yact);
                let scaled = tape.mul_k(corr, -p.c / mb as f64);
                let gw = tape.add(params[0], scaled);
                let ysum = tape.sum_all(yact);
                let gb = tape.mul_k(ysum, -p.c / mb as f64);
                vec![gw, gb]
            }
            Problem::MlpClassify(p) => {
                let (x, labels) = select_rows_usize(&p.data, &p.labels, batch);
                let m = labels.len();
                let mut acts = Vec::new(); // post-activation inputs to each layer
                let mut pre = Vec::new(); // pre-activation outputs
                let mut a = tape.leaf(x);
                acts.push(a);
                let nl = p.layers.len() - 1;
                for l in 0..nl {
                    let z = tape.matmul(a, params[2 * l]);
                    let zb = tape.add_row(z, params[2 * l + 1]);
                    pre.push(zb);
                    if l + 1 < nl {
                        a = tape.relu(zb);
                        acts.push(a);
                    }
                }
                let onehot = tape.leaf(one_hot(&labels, *p.layers.last().unwrap()));
                let sm = tape.softmax(pre[nl - 1]);
                let diff = tape.sub(sm, onehot);
                let mut delta = tape.mul_k(diff, 1.0 / m as f64);
                let mut grads = vec![0usize; 2 * nl];
                for l in (0..nl).rev() {
                    let at = tape.tr(acts[l]);
                    grads[2 * l] = tape.matmul(at, delta);
                    grads[2 * l + 1] = tape.collapse_rows(delta);
                    if l > 0 {
                        let wt = tape.tr(params[2 * l]);
                        let da = tape.matmul(delta, wt);
                        let gate = tape.step(pre[l - 1]);
                        delta = tape.mul_elem(da, gate);
                    }
                }
                grads
            }
            Problem::CnnClassify(p) => {
                let (x, labels) = select_rows_usize(&p.data, &p.labels, batch);
                let m = labels.len();
                let xk = tape.leaf(x);
                let nodes = cnn_forward(tape, xk, params);
                let onehot = tape.leaf(one_hot(&labels, 10));
                let sm = tape.softmax(nodes.logits);
                let diff = tape.sub(sm, onehot);
                let dz = tape.mul_k(diff, 1.0 / m as f64);
                let pt = tape.tr(nodes.pooled);
                let g_dense = tape.matmul(pt, dz);
                let g_dense_b = tape.collapse_rows(dz);
                let wt = tape.tr(params[2]);
                let dpool = tape.matmul(dz, wt);
                let dact = tape.max_unpool(dpool, nodes.activated, CnnClassify::POOL);
                let gate = tape.step(nodes.biased);
                let dconv = tape.mul_elem(dact, gate);
                let g_kernel = tape.conv_w_grad(xk, dconv, CnnClassify::CONV);
                let cols = tape.collapse_rows(dconv);
                let expand_t = tape.tr(nodes.bias_expand);
                let g_conv_b = tape.matmul(cols, expand_t);
                vec![g_kernel, g_conv_b, g_dense, g_dense_b]
            }
            Problem::BinaryMlp(p) => {
                let (x, labels) = select_rows_f64(&p.data, &p.labels, batch);
                let m = labels.len();
                let xk = tape.leaf(x);
                let z1 = tape.matmul(xk, params[0]);
                let z1b = tape.add_row(z1, params[1]);
                let a1 = tape.relu(z1b);
                let z2 = tape.matmul(a1, params[2]);
                let z2b = tape.add_row(z2, params[3]);
                let yk = tape.leaf(Array2::from_shape_vec((m, 1), labels.clone()).unwrap());
                let yz = tape.mul_elem(yk, z2b);
                let nyz = tape.neg(yz);
                let sig = tape.sigmoid(nyz);
                let ys = tape.mul_elem(yk, sig);
                let dz2 = tape.mul_k(ys, -1.0 / m as f64);
                let a1t = tape.tr(a1);
                let ga2 = tape.matmul(a1t, dz2);
                let gb2 = tape.collapse_rows(dz2);
                let a2t = tape.tr(params[2]);
                let da1 = tape.matmul(dz2, a2t);
                let gate = tape.step(z1b);
                let dz1 = tape.mul_elem(da1, gate);
                let xt = tape.tr(xk);
                let ga1 = tape.matmul(xt, dz1);
                let gb1 = tape.collapse_rows(dz1);
                vec![ga1, gb1, ga2, gb2]
            }
        })
    }

    fn check_params(&self, tape: &Tape, params: &[NodeId]) -> Result<()> {
        let shapes = self.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::DimensionMismatch {
                expected: shapes.len(),
                got: params.len(),
            });
        }
        for (id, shape) in params.iter().zip(shapes.iter()) {
            if tape.value(*id).dim() != *shape {
                return Err(Error::DimensionMismatch {
                    expected: shape.0 * shape.1,
                    got: tape.value(*id).len(),
                });
            }
        }
        Ok(())
    }

    /// Objective value at a flat parameter vector.
    pub fn objective(&self, x: &PrimalVector) -> Result<f64> {
        self.objective_batch(x, None)
    }

    /// Objective restricted to a minibatch of examples.
    pub fn objective_batch(&self, x: &PrimalVector, batch: Option<&[usize]>) -> Result<f64> {
        let mut tape = Tape::new();
        let params = self.leaves_from_flat(&mut tape, x)?;
        let loss = self.loss_node(&mut tape, &params, batch)?;
        Ok(tape.value(loss)[(0, 0)])
    }

    /// Full gradient at a flat parameter vector, as a dual-space vector.
    pub fn gradient(&self, x: &PrimalVector) -> Result<DualVector> {
        self.gradient_batch(x, None)
    }

    /// Gradient of the unbiased minibatch objective.
    pub fn gradient_batch(&self, x: &PrimalVector, batch: Option<&[usize]>) -> Result<DualVector> {
        let mut tape = Tape::new();
        let params = self.leaves_from_flat(&mut tape, x)?;
        let grads = self.grad_nodes(&mut tape, &params, batch)?;
        let mut flat = Vec::with_capacity(self.dim());
        for g in grads {
            flat.extend(tape.value(g).iter().cloned());
        }
        Ok(DualVector::from_vec(flat))
    }

    /// Creates per-tensor leaves holding the entries of a flat vector.
    pub fn leaves_from_flat(&self, tape: &mut Tape, x: &PrimalVector) -> Result<Vec<NodeId>> {
        Ok(self
            .unpack(x)?
            .into_iter()
            .map(|t| tape.leaf(t))
            .collect())
    }

    /// A deterministic initial point in the problem's customary
    /// initialization distribution.
    pub fn initial_point(&self, seed: u64) -> PrimalVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            Problem::Quadratic(p) => PrimalVector(Array1::ones(p.d.len())),
            Problem::TvRestore(p) => {
                PrimalVector::from_vec(p.y.iter().cloned().collect::<Vec<f64>>())
            }
            Problem::SvmHinge(_) => {
                let n = self.dim();
                let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                PrimalVector::from_vec(v)
            }
            Problem::MlpClassify(_) | Problem::CnnClassify(_) | Problem::BinaryMlp(_) => {
                let mut flat = Vec::with_capacity(self.dim());
                for (r, c) in self.param_shapes() {
                    // Fan-in scaled uniform init; biases use their layer's
                    // fan-in (stored just before the bias in packing order).
                    let fan_in = if r == 1 { last_fan_in(self, &flat) } else { r };
                    let bound = 1.0 / fan_in as f64;
                    for _ in 0..r * c {
                        flat.push(rng.gen_range(-bound..bound));
                    }
                }
                PrimalVector::from_vec(flat)
            }
        }
    }
}

/// Fan-in for bias rows: recovered from the preceding weight tensor shape.
fn last_fan_in(problem: &Problem, _flat: &[f64]) -> usize {
    // Bias tensors always directly follow their weight tensor; use the
    // weight tensor's row count.
    let shapes = problem.param_shapes();
    let mut fan = 1usize;
    let mut seen = 0usize;
    let filled = _flat.len();
    for (r, c) in shapes {
        if seen == filled {
            break;
        }
        if r != 1 {
            fan = r;
        }
        seen += r * c;
    }
    fan
}

struct CnnNodes {
    bias_expand: NodeId,
    biased: NodeId,
    activated: NodeId,
    pooled: NodeId,
    logits: NodeId,
}

/// Shared convolutional forward pass; returns the intermediate nodes needed
/// by the hand-written backward pass.
fn cnn_forward(tape: &mut Tape, x: NodeId, params: &[NodeId]) -> CnnNodes {
    let conv_sh = CnnClassify::CONV;
    let pool_sh = CnnClassify::POOL;
    let spatial = conv_sh.h - conv_sh.k + 1;
    let positions = spatial * spatial;
    let conv = tape.conv(x, params[0], conv_sh);
    // Per-channel bias broadcast over spatial positions, expressed with a
    // constant expansion matrix so its adjoint is ordinary linear algebra.
    let mut expand = Array2::zeros((conv_sh.out_ch, conv_sh.out_ch * positions));
    for ch in 0..conv_sh.out_ch {
        for p in 0..positions {
            expand[(ch, ch * positions + p)] = 1.0;
        }
    }
    let bias_expand = tape.leaf(expand);
    let brow = tape.matmul(params[1], bias_expand);
    let biased = tape.add_row(conv, brow);
    let activated = tape.relu(biased);
    let pooled = tape.max_pool(activated, pool_sh);
    let z = tape.matmul(pooled, params[2]);
    let logits = tape.add_row(z, params[3]);
    CnnNodes {
        bias_expand,
        biased,
        activated,
        pooled,
        logits,
    }
}

fn svm_batch(p: &SvmHinge, batch: Option<&[usize]>) -> (Array2<f64>, Array2<f64>, usize) {
    match batch {
        None => {
            let m = p.labels.len();
            let y = Array2::from_shape_vec((m, 1), p.labels.clone()).unwrap();
            (p.features.clone(), y, m)
        }
        Some(idx) => {
            let mb = idx.len();
            let mut phi = Array2::zeros((mb, p.features.ncols()));
            let mut y = Array2::zeros((mb, 1));
            for (r, &i) in idx.iter().enumerate() {
                phi.row_mut(r).assign(&p.features.row(i));
                y[(r, 0)] = p.labels[i];
            }
            (phi, y, mb)
        }
    }
}

fn select_rows_usize(
    data: &Array2<f64>,
    labels: &[usize],
    batch: Option<&[usize]>,
) -> (Array2<f64>, Vec<usize>) {
    match batch {
        None => (data.clone(), labels.to_vec()),
        Some(idx) => {
            let mut x = Array2::zeros((idx.len(), data.ncols()));
            let mut l = Vec::with_capacity(idx.len());
            for (r, &i) in idx.iter().enumerate() {
                x.row_mut(r).assign(&data.row(i));
                l.push(labels[i]);
            }
            (x, l)
        }
    }
}

fn select_rows_f64(
    data: &Array2<f64>,
    labels: &[f64],
    batch: Option<&[usize]>,
) -> (Array2<f64>, Vec<f64>) {
    match batch {
        None => (data.clone(), labels.to_vec()),
        Some(idx) => {
            let mut x = Array2::zeros((idx.len(), data.ncols()));
            let mut l = Vec::with_capacity(idx.len());
            for (r, &i) in idx.iter().enumerate() {
                x.row_mut(r).assign(&data.row(i));
                l.push(labels[i]);
            }
            (x, l)
        }
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), classes));
    for (r, &l) in labels.iter().enumerate() {
        out[(r, l)] = 1.0;
    }
    out
}

/// Stochastic gradient noise models.
#[derive(Debug, Clone)]
pub enum NoiseKind {
    /// G(x) = ∇f(x) + σξ with ξ ~ 𝒩(0, I).
    GaussianAdditive { sigma: f64 },
    /// Gradient of a uniformly subsampled (without replacement), unbiasedly
    /// rescaled batch objective.
    Minibatch { batch_size: usize },
}

/// A reproducible stochastic first-order oracle.
///
/// Draws are functions of (seed, draw_index) only, so trajectories replay
/// bit-identically. `dual_error` injects a constant deterministic offset for
/// testing bound terms that account for inexact map computations; it is zero
/// (None) for the exact maps in this crate.
#[derive(Debug, Clone)]
pub struct StochasticOracle {
    pub noise: NoiseKind,
    pub seed: u64,
    pub dual_error: Option<Array1<f64>>,
}

impl StochasticOracle {
    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        StochasticOracle {
            noise: NoiseKind::GaussianAdditive { sigma },
            seed,
            dual_error: None,
        }
    }

    pub fn minibatch(batch_size: usize, seed: u64) -> Self {
        StochasticOracle {
            noise: NoiseKind::Minibatch { batch_size },
            seed,
            dual_error: None,
        }
    }

    fn rng(&self, draw_index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(draw_index);
        rng
    }

    /// Example indices drawn for a minibatch oracle at a draw index.
    pub fn batch_indices(&self, problem: &Problem, draw_index: u64) -> Result<Vec<usize>> {
        let NoiseKind::Minibatch { batch_size } = self.noise else {
            return Err(Error::Config("not a minibatch oracle".into()));
        };
        let m = problem
            .num_examples()
            .ok_or_else(|| Error::Config("problem has no examples to subsample".into()))?;
        if batch_size == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        if batch_size > m {
            return Err(Error::Config(format!(
                "batch size {batch_size} exceeds dataset size {m}"
            )));
        }
        let mut rng = self.rng(draw_index);
        Ok(rand::seq::index::sample(&mut rng, m, batch_size).into_vec())
    }

    /// The stochastic gradient G(x, ξ_draw).
    pub fn gradient(
        &self,
        problem: &Problem,
        x: &PrimalVector,
        draw_index: u64,
    ) -> Result<DualVector> {
        let mut g = match &self.noise {
            NoiseKind::GaussianAdditive { sigma } => {
                let mut g = problem.gradient(x)?;
                if *sigma > 0.0 {
                    let mut rng = self.rng(draw_index);
                    for v in g.0.iter_mut() {
                        let n: f64 = rng.sample(StandardNormal);
                        *v += sigma * n;
                    }
                }
                g
            }
            NoiseKind::Minibatch { .. } => {
                let idx = self.batch_indices(problem, draw_index)?;
                problem.gradient_batch(x, Some(&idx))?
            }
        };
        if let Some(u) = &self.dual_error {
            if u.len() != g.len() {
                return Err(Error::DimensionMismatch {
                    expected: g.len(),
                    got: u.len(),
                });
            }
            g.0 += u;
        }
        Ok(g)
    }
}

/// Specification of a synthetic overlapping-ellipse image.
#[derive(Debug, Clone)]
pub struct EllipsePhantomSpec {
    pub height: usize,
    pub width: usize,
    pub min_ellipses: usize,
    pub max_ellipses: usize,
    pub min_intensity: f64,
    pub max_intensity: f64,
    /// Additive Gaussian noise standard deviation (fraction of the maximum
    /// representable intensity 1.0).
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for EllipsePhantomSpec {
    fn default() -> Self {
        EllipsePhantomSpec {
            height: 128,
            width: 128,
            min_ellipses: 4,
            max_ellipses: 8,
            min_intensity: 0.2,
            max_intensity: 0.9,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

/// Renders a clean overlapping-ellipse image and a noisy copy
/// (clip(clean + 𝒩(0, std²)) to [0, 1]).
pub fn generate_ellipse_phantom(spec: &EllipsePhantomSpec) -> Result<(Array2<f64>, Array2<f64>)> {
    if spec.height == 0 || spec.width == 0 {
        return Err(Error::Config("phantom image size must be positive".into()));
    }
    if spec.min_ellipses > spec.max_ellipses {
        return Err(Error::Config("phantom ellipse count range is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let count = rng.gen_range(spec.min_ellipses..=spec.max_ellipses);
    let mut clean = Array2::<f64>::zeros((spec.height, spec.width));
    for _ in 0..count {
        let cy = rng.gen_range(0.2..0.8) * spec.height as f64;
        let cx = rng.gen_range(0.2..0.8) * spec.width as f64;
        let ry = rng.gen_range(0.05..0.3) * spec.height as f64;
        let rx = rng.gen_range(0.05..0.3) * spec.width as f64;
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let intensity = rng.gen_range(spec.min_intensity..spec.max_intensity);
        let (sin, cos) = theta.sin_cos();
        for i in 0..spec.height {
            for j in 0..spec.width {
                let dy = i as f64 + 0.5 - cy;
                let dx = j as f64 + 0.5 - cx;
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                    clean[(i, j)] += intensity;
                }
            }
        }
    }
    clean.mapv_inplace(|v| v.clamp(0.0, 1.0));
    let mut noisy = clean.clone();
    if spec.noise_std > 0.0 {
        for v in noisy.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v = (*v + spec.noise_std * n).clamp(0.0, 1.0);
        }
    }
    Ok((clean, noisy))
}

/// A deterministic binary mask with approximately the given missing fraction
/// (entry 0 = missing).
pub fn random_mask(height: usize, width: usize, missing_fraction: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((height, width), |_| {
        if rng.gen::<f64>() < missing_fraction {
            0.0
        } else {
            1.0
        }
    })
}

/// Two interleaved half-circle clusters ("moons") with labels in {−1, +1}.
pub fn make_moons(n: usize, noise: f64, seed: u64) -> (Array2<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_out = n / 2;
    let n_in = n - n_out;
    let mut data = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_out {
        let t = std::f64::consts::PI * i as f64 / (n_out.max(2) - 1) as f64;
        data[(i, 0)] = t.cos();
        data[(i, 1)] = t.sin();
        labels.push(-1.0);
    }
    for i in 0..n_in {
        let t = std::f64::consts::PI * i as f64 / (n_in.max(2) - 1) as f64;
        data[(n_out + i, 0)] = 1.0 - t.cos();
        data[(n_out + i, 1)] = 0.5 - t.sin();
        labels.push(1.0);
    }
    if noise > 0.0 {
        for v in data.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += noise * e;
        }
    }
    (data, labels)
}

/// An MNIST-style dataset split.
#[derive(Debug, Clone)]
pub struct IdxDataset {
    pub train_images: Array2<f64>,
    pub train_labels: Vec<u8>,
    pub test_images: Array2<f64>,
    pub test_labels: Vec<u8>,
}

/// Loads the four standard IDX files from a directory
/// (train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-images-idx3-ubyte,
/// t10k-labels-idx1-ubyte).
pub fn load_mnist_idx(dir: &Path) -> Result<IdxDataset> {
    let train_images = crate::io::read_idx_images(&dir.join("train-images-idx3-ubyte"))?;
    let train_labels = crate::io::read_idx_labels(&dir.join("train-labels-idx1-ubyte"))?;
    let test_images = crate::io::read_idx_images(&dir.join("t10k-images-idx3-ubyte"))?;
    let test_labels = crate::io::read_idx_labels(&dir.join("t10k-labels-idx1-ubyte"))?;
    if train_images.nrows() != train_labels.len() || test_images.nrows() != test_labels.len() {
        return Err(Error::Format("image/label counts disagree".into()));
    }
    Ok(IdxDataset {
        train_images,
        train_labels,
        test_images,
        test_labels,
    })
}

/// Keeps only two digit classes and maps them to labels {−1, +1}.
pub fn filter_two_classes(
    images: &Array2<f64>,
    labels: &[u8],
    negative: u8,
    positive: u8,
) -> (Array2<f64>, Vec<f64>) {
    let keep: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == negative || l == positive)
        .map(|(i, _)| i)
        .collect();
    let mut out = Array2::zeros((keep.len(), images.ncols()));
    let mut y = Vec::with_capacity(keep.len());
    for (r, &i) in keep.iter().enumerate() {
        out.row_mut(r).assign(&images.row(i));
        y.push(if labels[i] == negative { -1.0 } else { 1.0 });
    }
    (out, y)
}

/// Feature dimension produced by [`make_svm_features`].
pub const SVM_FEATURE_DIM: usize = 50;

/// Maps flattened 28×28 images to 50-dimensional features through a fixed
/// seeded random projection followed by tanh (a stand-in for a pretrained
/// feature extractor; deterministic under the seed).
pub fn make_svm_features(images: &Array2<f64>, seed: u64) -> Array2<f64> {
    let d_in = images.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (d_in as f64).sqrt();
    let w = Array2::from_shape_fn((d_in, SVM_FEATURE_DIM), |_| {
        let n: f64 = rng.sample(StandardNormal);
        n * scale
    });
    let bias = Array1::from_shape_fn(SVM_FEATURE_DIM, |_| {
        let n: f64 = rng.sample(StandardNormal);
        n * 0.5
    });
    let mut out = images.dot(&w);
    for mut row in out.rows_mut() {
        row += &bias;
    }
    out.mapv_inplace(f64::tanh);
    out
}

/// Downscales n×(2h·2w) images to n×(h·w) by 2×2 average pooling.
pub fn downscale_2x(images: &Array2<f64>, h: usize, w: usize) -> Result<Array2<f64>> {
    if images.ncols() != 4 * h * w {
        return Err(Error::DimensionMismatch {
            expected: 4 * h * w,
            got: images.ncols(),
        });
    }
    let n = images.nrows();
    let mut out = Array2::zeros((n, h * w));
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for di in 0..2 {
                    for dj in 0..2 {
                        s += images[(b, (2 * i + di) * (2 * w) + 2 * j + dj)];
                    }
                }
                out[(b, i * w + j)] = s / 4.0;
            }
        }
    }
    Ok(out)
}

/// Draws a quadratic instance with the given shared diagonal and a random
/// linear term b ~ 𝒩(0, I); the minimizer −diag⁻¹b is known in closed form.
pub fn sample_quadratic_family(shared_diag: &[f64], seed: u64) -> Result<Quadratic> {
    if shared_diag.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Config("family diagonal must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b: Vec<f64> = (0..shared_diag.len())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Quadratic::new(shared_diag.to_vec(), b)
}
