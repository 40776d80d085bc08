//! Reverse-mode automatic differentiation on an explicit operation tape.
//!
//! Values are eagerly computed `Array2<f64>` tensors (columns for vectors,
//! 1×1 for scalars). Unrolled optimizer trajectories are recorded as one flat
//! tape; a single reverse sweep from a scalar root then yields exact
//! gradients with respect to every leaf (map parameters, step parameters).
//!
//! Gradients of inner objectives are themselves built *as tape operations*
//! (hand-written backprop), so differentiating an unrolled trajectory
//! automatically produces the required second-order terms. To keep that
//! closed, every operation's vector–Jacobian products are expressible with
//! operations from the same set: convolution forms a bilinear family with
//! its two adjoints, and max-pooling routes adjoints via the deterministic
//! argmax (first maximum in row-major window order) recomputed from the
//! pre-pool values. Kink derivatives use the subgradient-zero convention
//! (step(0) = 0), matching relu'(0) = 0.

use ndarray::{Array2, Axis};

/// Index of a node on the tape.
pub type NodeId = usize;

/// Shape metadata for image (convolution / pooling) operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvShape {
    /// Image rows.
    pub h: usize,
    /// Image columns.
    pub w: usize,
    /// Input channels.
    pub in_ch: usize,
    /// Output channels.
    pub out_ch: usize,
    /// Kernel rows and columns (square kernels only).
    pub k: usize,
}

impl ConvShape {
    fn out_h(&self) -> usize {
        self.h - self.k + 1
    }
    fn out_w(&self) -> usize {
        self.w - self.k + 1
    }
}

/// Pooling metadata: channel count, input height/width, window (= stride).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolShape {
    pub ch: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
}

impl PoolShape {
    fn out_h(&self) -> usize {
        self.h / self.window
    }
    fn out_w(&self) -> usize {
        self.w / self.window
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a + b (same shape).
    Add(NodeId, NodeId),
    /// a − b (same shape).
    Sub(NodeId, NodeId),
    /// −a.
    Neg(NodeId),
    /// a ∘ b elementwise.
    MulElem(NodeId, NodeId),
    /// a / b elementwise.
    Div(NodeId, NodeId),
    /// s · a where s is a 1×1 node.
    Scale(NodeId, NodeId),
    /// c · a for a constant c.
    MulK(NodeId, f64),
    /// a + c for a constant c.
    AddConst(NodeId, #[allow(dead_code)] f64),
    /// a (m×n) + row (1×n) broadcast over rows.
    AddRow(NodeId, NodeId),
    /// Column-sum to a 1×n row (adjoint of the AddRow broadcast).
    CollapseRows(NodeId),
    /// Matrix product a·b.
    MatMul(NodeId, NodeId),
    /// Transpose.
    Tr(NodeId),
    /// Σ aᵢⱼbᵢⱼ as 1×1.
    Dot(NodeId, NodeId),
    /// Σ aᵢⱼ as 1×1.
    SumAll(NodeId),
    /// exp elementwise.
    Exp(NodeId),
    /// max(0, a) elementwise.
    Relu(NodeId),
    /// 1 if a > 0 else 0 (derivative treated as zero everywhere).
    Step(#[allow(dead_code)] NodeId),
    /// Logistic function elementwise.
    Sigmoid(NodeId),
    /// Row-wise softmax.
    Softmax(NodeId),
    /// Mean cross-entropy of row logits against integer class labels.
    CeLogits(NodeId, Vec<usize>),
    /// Mean of log(1 + exp(−y∘z)) for labels y ∈ {−1, +1}.
    LogisticLoss(NodeId, Vec<f64>),
    /// Σ √(aᵢ² + ε²) as 1×1.
    SmoothAbsSum(NodeId, f64),
    /// a/√(a² + ε²) elementwise.
    SmoothSign(NodeId, f64),
    /// Horizontal forward difference of an h×w image in a column node.
    DiffH(NodeId, usize, usize),
    /// Vertical forward difference.
    DiffV(NodeId, usize, usize),
    /// Adjoint of DiffH.
    DiffHT(NodeId, usize, usize),
    /// Adjoint of DiffV.
    DiffVT(NodeId, usize, usize),
    /// Piecewise-linear interpolation out = σ_c(x); x any shape, c a column
    /// of knot values.
    SplineFwd(NodeId, NodeId, Vec<f64>),
    /// Piecewise-linear inversion out = σ_c⁻¹(y).
    SplineInv(NodeId, NodeId, Vec<f64>),
    /// Valid cross-correlation of row-major images against a kernel bank.
    Conv(NodeId, NodeId, ConvShape),
    /// Adjoint of Conv in its image argument.
    ConvInGrad(NodeId, NodeId, ConvShape),
    /// Adjoint of Conv in its kernel argument.
    ConvWGrad(NodeId, NodeId, ConvShape),
    /// Non-overlapping max pooling (first-max argmax).
    MaxPool(NodeId, PoolShape),
    /// Scatter pooled values to the argmax positions of x: (g, x).
    MaxUnpool(NodeId, NodeId, PoolShape),
    /// Gather values at the argmax positions of x: (a, x).
    PoolSelect(NodeId, NodeId, PoolShape),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Adjoints produced by a reverse sweep.
pub struct Gradients {
    adj: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// The gradient with respect to a leaf (None if the root does not depend
    /// on it).
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.adj.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient or zeros of the given shape.
    pub fn get_or_zero(&self, id: NodeId, shape: (usize, usize)) -> Array2<f64> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}

/// An eager-evaluation operation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn spline_piece(knot_min: f64, gap: f64, pieces: usize, x: f64) -> usize {
    let raw = ((x - knot_min) / gap).floor();
    (raw.max(0.0) as usize).min(pieces - 1)
}

fn spline_value_piece(values: &[f64], y: f64) -> usize {
    values
        .partition_point(|&c| c <= y)
        .saturating_sub(1)
        .min(values.len() - 2)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The current value of a node.
    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// A differentiable input (parameter or data) node.
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A column-vector leaf.
    pub fn leaf_col(&mut self, v: &[f64]) -> NodeId {
        let n = v.len();
        self.leaf(Array2::from_shape_vec((n, 1), v.to_vec()).expect("shape"))
    }

    /// A 1×1 scalar leaf.
    pub fn leaf_scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim());
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim());
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -&self.nodes[a].value;
        self.push(v, Op::Neg(a))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim());
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::MulElem(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim());
        let v = &self.nodes[a].value / &self.nodes[b].value;
        self.push(v, Op::Div(a, b))
    }

    /// s·a for a 1×1 node s.
    pub fn scale(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.nodes[s].value.dim(), (1, 1));
        let sv = self.nodes[s].value[(0, 0)];
        let v = &self.nodes[a].value * sv;
        self.push(v, Op::Scale(a, s))
    }

    pub fn mul_k(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        self.push(v, Op::MulK(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value + c;
        self.push(v, Op::AddConst(a, c))
    }

    /// Broadcast row addition: a (m×n) + row (1×n).
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (_, n) = self.nodes[a].value.dim();
        assert_eq!(self.nodes[row].value.dim(), (1, n));
        let v = &self.nodes[a].value + &self.nodes[row].value;
        self.push(v, Op::AddRow(a, row))
    }

    /// Column sums as a 1×n row.
    pub fn collapse_rows(&mut self, a: NodeId) -> NodeId {
        let v = self
            .nodes[a]
            .value
            .sum_axis(Axis(0))
            .insert_axis(Axis(0));
        self.push(v, Op::CollapseRows(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn tr(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.t().to_owned();
        self.push(v, Op::Tr(a))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim());
        let s = (&self.nodes[a].value * &self.nodes[b].value).sum();
        self.push(Array2::from_elem((1, 1), s), Op::Dot(a, b))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Heaviside step with step(0) = 0; its own derivative is treated as zero.
    pub fn step(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(v, Op::Step(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    /// Row-wise softmax with max-shift stabilization.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.push(v, Op::Softmax(a))
    }

    /// Mean cross-entropy −(1/m)Σ log softmax(logits)ᵢ[labelᵢ].
    pub fn ce_logits(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let z = &self.nodes[logits].value;
        assert_eq!(z.nrows(), labels.len());
        let mut total = 0.0;
        for (row, &lbl) in z.rows().into_iter().zip(labels.iter()) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[lbl];
        }
        let v = Array2::from_elem((1, 1), total / labels.len() as f64);
        self.push(v, Op::CeLogits(logits, labels.to_vec()))
    }

    /// Mean logistic loss (1/m)Σ log(1 + exp(−yᵢzᵢ)) for yᵢ ∈ {−1, +1}.
    pub fn logistic_loss(&mut self, z: NodeId, labels: &[f64]) -> NodeId {
        let zs = &self.nodes[z].value;
        assert_eq!(zs.dim(), (labels.len(), 1));
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let t = -y * zs[(i, 0)];
            // log(1+e^t) computed stably for both signs of t.
            total += if t > 0.0 {
                t + (-t).exp().ln_1p()
            } else {
                t.exp().ln_1p()
            };
        }
        let v = Array2::from_elem((1, 1), total / labels.len() as f64);
        self.push(v, Op::LogisticLoss(z, labels.to_vec()))
    }

    /// Σ √(aᵢ² + ε²), the smoothed l1 norm.
    pub fn smooth_abs_sum(&mut self, a: NodeId, eps: f64) -> NodeId {
        let s = self.nodes[a]
            .value
            .iter()
            .map(|&x| (x * x + eps * eps).sqrt())
            .sum();
        self.push(Array2::from_elem((1, 1), s), Op::SmoothAbsSum(a, eps))
    }

    /// a/√(a² + ε²), the derivative of the smoothed absolute value.
    pub fn smooth_sign(&mut self, a: NodeId, eps: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x / (x * x + eps * eps).sqrt());
        self.push(v, Op::SmoothSign(a, eps))
    }

    /// Horizontal forward differences of an h×w image stored as an h·w column;
    /// the final column is zero (replicating boundary).
    pub fn diff_h(&mut self, a: NodeId, h: usize, w: usize) -> NodeId {
        let v = apply_diff_h(&self.nodes[a].value, h, w);
        self.push(v, Op::DiffH(a, h, w))
    }

    /// Vertical forward differences with a zero final row.
    pub fn diff_v(&mut self, a: NodeId, h: usize, w: usize) -> NodeId {
        let v = apply_diff_v(&self.nodes[a].value, h, w);
        self.push(v, Op::DiffV(a, h, w))
    }

    /// Adjoint of `diff_h` (a negative horizontal divergence).
    pub fn diff_ht(&mut self, a: NodeId, h: usize, w: usize) -> NodeId {
        let v = apply_diff_ht(&self.nodes[a].value, h, w);
        self.push(v, Op::DiffHT(a, h, w))
    }

    /// Adjoint of `diff_v`.
    pub fn diff_vt(&mut self, a: NodeId, h: usize, w: usize) -> NodeId {
        let v = apply_diff_vt(&self.nodes[a].value, h, w);
        self.push(v, Op::DiffVT(a, h, w))
    }

    /// Elementwise piecewise-linear map with knot values c (a column node)
    /// over `knots` (constant locations).
    pub fn spline_fwd(&mut self, x: NodeId, c: NodeId, knots: &[f64]) -> NodeId {
        let cv = &self.nodes[c].value;
        assert_eq!(cv.dim(), (knots.len(), 1));
        let gap = knots[1] - knots[0];
        let pieces = knots.len() - 1;
        let v = self.nodes[x].value.mapv(|xi| {
            let i = spline_piece(knots[0], gap, pieces, xi);
            let s = (xi - knots[i]) / gap;
            cv[(i, 0)] * (1.0 - s) + cv[(i + 1, 0)] * s
        });
        self.push(v, Op::SplineFwd(x, c, knots.to_vec()))
    }

    /// Elementwise inverse of the piecewise-linear map.
    pub fn spline_inv(&mut self, y: NodeId, c: NodeId, knots: &[f64]) -> NodeId {
        let cv = &self.nodes[c].value;
        assert_eq!(cv.dim(), (knots.len(), 1));
        let gap = knots[1] - knots[0];
        let cslice: Vec<f64> = cv.column(0).to_vec();
        let v = self.nodes[y].value.mapv(|yi| {
            let j = spline_value_piece(&cslice, yi);
            let s = (yi - cslice[j]) / (cslice[j + 1] - cslice[j]);
            knots[j] + s * gap
        });
        self.push(v, Op::SplineInv(y, c, knots.to_vec()))
    }

    /// Valid cross-correlation: rows of `x` are images (in_ch·h·w), rows of
    /// the output are feature maps (out_ch·oh·ow); `k` is out_ch×(in_ch·k²).
    pub fn conv(&mut self, x: NodeId, k: NodeId, sh: ConvShape) -> NodeId {
        let v = apply_conv(&self.nodes[x].value, &self.nodes[k].value, sh);
        self.push(v, Op::Conv(x, k, sh))
    }

    /// Adjoint of `conv` with respect to the image argument: g is feature-map
    /// shaped, result is image shaped.
    pub fn conv_in_grad(&mut self, g: NodeId, k: NodeId, sh: ConvShape) -> NodeId {
        let v = apply_conv_in_grad(&self.nodes[g].value, &self.nodes[k].value, sh);
        self.push(v, Op::ConvInGrad(g, k, sh))
    }

    /// Adjoint of `conv` with respect to the kernel argument.
    pub fn conv_w_grad(&mut self, x: NodeId, g: NodeId, sh: ConvShape) -> NodeId {
        let v = apply_conv_w_grad(&self.nodes[x].value, &self.nodes[g].value, sh);
        self.push(v, Op::ConvWGrad(x, g, sh))
    }

    /// Non-overlapping window max pooling over each channel.
    pub fn max_pool(&mut self, x: NodeId, sh: PoolShape) -> NodeId {
        let v = apply_max_pool(&self.nodes[x].value, sh);
        self.push(v, Op::MaxPool(x, sh))
    }

    /// Scatters pooled-shaped g to the argmax positions of x (zero elsewhere).
    pub fn max_unpool(&mut self, g: NodeId, x: NodeId, sh: PoolShape) -> NodeId {
        let v = apply_max_unpool(&self.nodes[g].value, &self.nodes[x].value, sh);
        self.push(v, Op::MaxUnpool(g, x, sh))
    }

    /// Gathers image-shaped a at the argmax positions of x.
    pub fn pool_select(&mut self, a: NodeId, x: NodeId, sh: PoolShape) -> NodeId {
        let v = apply_pool_select(&self.nodes[a].value, &self.nodes[x].value, sh);
        self.push(v, Op::PoolSelect(a, x, sh))
    }

    /// Reverse sweep from a 1×1 root; returns adjoints for every node the
    /// root depends on.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[root].value.dim(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        adj[root] = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..=root).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, -g);
                }
                Op::Neg(a) => acc(&mut adj, *a, -g),
                Op::MulElem(a, b) => {
                    acc(&mut adj, *a, &g * &self.nodes[*b].value);
                    acc(&mut adj, *b, &g * &self.nodes[*a].value);
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[*b].value;
                    acc(&mut adj, *a, &g / bv);
                    let av = &self.nodes[*a].value;
                    acc(&mut adj, *b, -(&(&g * av) / &(bv * bv)));
                }
                Op::Scale(a, s) => {
                    let sv = self.nodes[*s].value[(0, 0)];
                    acc(&mut adj, *a, &g * sv);
                    let ds = (&g * &self.nodes[*a].value).sum();
                    acc(&mut adj, *s, Array2::from_elem((1, 1), ds));
                }
                Op::MulK(a, c) => acc(&mut adj, *a, &g * *c),
                Op::AddConst(a, _) => acc(&mut adj, *a, g),
                Op::AddRow(a, row) => {
                    acc(&mut adj, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut adj, *a, g);
                }
                Op::CollapseRows(a) => {
                    let bcast =
                        Array2::from_shape_fn(self.nodes[*a].value.dim(), |(_, j)| g[(0, j)]);
                    acc(&mut adj, *a, bcast);
                }
                Op::MatMul(a, b) => {
                    acc(&mut adj, *a, g.dot(&self.nodes[*b].value.t()));
                    acc(&mut adj, *b, self.nodes[*a].value.t().dot(&g));
                }
                Op::Tr(a) => acc(&mut adj, *a, g.t().to_owned()),
                Op::Dot(a, b) => {
                    let s = g[(0, 0)];
                    acc(&mut adj, *a, &self.nodes[*b].value * s);
                    acc(&mut adj, *b, &self.nodes[*a].value * s);
                }
                Op::SumAll(a) => {
                    let s = g[(0, 0)];
                    acc(
                        &mut adj,
                        *a,
                        Array2::from_elem(self.nodes[*a].value.dim(), s),
                    );
                }
                Op::Exp(a) => acc(&mut adj, *a, &g * &self.nodes[i].value),
                Op::Relu(a) => {
                    let mask = self.nodes[*a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut adj, *a, &g * &mask);
                }
                Op::Step(_) => {}
                Op::Sigmoid(a) => {
                    let s = &self.nodes[i].value;
                    acc(&mut adj, *a, &g * &(s * &(1.0 - s)));
                }
                Op::Softmax(a) => {
                    let s = &self.nodes[i].value;
                    let mut out = Array2::zeros(s.dim());
                    for (r, (srow, grow)) in
                        s.rows().into_iter().zip(g.rows().into_iter()).enumerate()
                    {
                        let dot: f64 = srow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
                        for (c, (&sv, &gv)) in srow.iter().zip(grow.iter()).enumerate() {
                            out[(r, c)] = sv * (gv - dot);
                        }
                    }
                    acc(&mut adj, *a, out);
                }
                Op::CeLogits(logits, labels) => {
                    let z = &self.nodes[*logits].value;
                    let m = labels.len() as f64;
                    let scale = g[(0, 0)] / m;
                    let mut out = Array2::zeros(z.dim());
                    for (r, (row, &lbl)) in
                        z.rows().into_iter().zip(labels.iter()).enumerate()
                    {
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
                        for (c, &x) in row.iter().enumerate() {
                            let p = (x - mx).exp() / denom;
                            out[(r, c)] = scale * (p - if c == lbl { 1.0 } else { 0.0 });
                        }
                    }
                    acc(&mut adj, *logits, out);
                }
                Op::LogisticLoss(z, labels) => {
                    let zs = &self.nodes[*z].value;
                    let m = labels.len() as f64;
                    let scale = g[(0, 0)] / m;
                    let mut out = Array2::zeros(zs.dim());
                    for (r, &y) in labels.iter().enumerate() {
                        let t = -y * zs[(r, 0)];
                        let sig = 1.0 / (1.0 + (-t).exp());
                        out[(r, 0)] = scale * (-y) * sig;
                    }
                    acc(&mut adj, *z, out);
                }
                Op::SmoothAbsSum(a, eps) => {
                    let s = g[(0, 0)];
                    let d = self.nodes[*a]
                        .value
                        .mapv(|x| s * x / (x * x + eps * eps).sqrt());
                    acc(&mut adj, *a, d);
                }
                Op::SmoothSign(a, eps) => {
                    let e2 = eps * eps;
                    let d = self.nodes[*a].value.mapv(|x| {
                        let q = x * x + e2;
                        e2 / (q * q.sqrt())
                    });
                    acc(&mut adj, *a, &g * &d);
                }
                Op::DiffH(a, h, w) => acc(&mut adj, *a, apply_diff_ht(&g, *h, *w)),
                Op::DiffV(a, h, w) => acc(&mut adj, *a, apply_diff_vt(&g, *h, *w)),
                Op::DiffHT(a, h, w) => acc(&mut adj, *a, apply_diff_h(&g, *h, *w)),
                Op::DiffVT(a, h, w) => acc(&mut adj, *a, apply_diff_v(&g, *h, *w)),
                Op::SplineFwd(x, c, knots) => {
                    let gap = knots[1] - knots[0];
                    let pieces = knots.len() - 1;
                    let xv = &self.nodes[*x].value;
                    let cv = &self.nodes[*c].value;
                    let mut gx = Array2::zeros(xv.dim());
                    let mut gc = Array2::zeros(cv.dim());
                    let (_, cols) = xv.dim();
                    for (idx, (&xi, gi)) in xv.iter().zip(g.iter()).enumerate() {
                        let p = spline_piece(knots[0], gap, pieces, xi);
                        let s = (xi - knots[p]) / gap;
                        let slope = (cv[(p + 1, 0)] - cv[(p, 0)]) / gap;
                        // Iteration over values is row-major, matching gx.
                        gx[(idx / cols, idx % cols)] = gi * slope;
                        gc[(p, 0)] += gi * (1.0 - s);
                        gc[(p + 1, 0)] += gi * s;
                    }
                    acc(&mut adj, *x, gx);
                    acc(&mut adj, *c, gc);
                }
                Op::SplineInv(y, c, knots) => {
                    let gap = knots[1] - knots[0];
                    let yv = &self.nodes[*y].value;
                    let cv = &self.nodes[*c].value;
                    let cslice: Vec<f64> = cv.column(0).to_vec();
                    let mut gy = Array2::zeros(yv.dim());
                    let mut gc = Array2::zeros(cv.dim());
                    let (_, cols) = yv.dim();
                    for (idx, (&yi, gi)) in yv.iter().zip(g.iter()).enumerate() {
                        let j = spline_value_piece(&cslice, yi);
                        let e = cslice[j + 1] - cslice[j];
                        gy[(idx / cols, idx % cols)] = gi * gap / e;
                        gc[(j, 0)] += gi * gap * (yi - cslice[j + 1]) / (e * e);
                        gc[(j + 1, 0)] += gi * (-gap) * (yi - cslice[j]) / (e * e);
                    }
                    acc(&mut adj, *y, gy);
                    acc(&mut adj, *c, gc);
                }
                Op::Conv(x, k, sh) => {
                    acc(&mut adj, *x, apply_conv_in_grad(&g, &self.nodes[*k].value, *sh));
                    acc(&mut adj, *k, apply_conv_w_grad(&self.nodes[*x].value, &g, *sh));
                }
                Op::ConvInGrad(gn, k, sh) => {
                    acc(&mut adj, *gn, apply_conv(&g, &self.nodes[*k].value, *sh));
                    acc(&mut adj, *k, apply_conv_w_grad(&g, &self.nodes[*gn].value, *sh));
                }
                Op::ConvWGrad(x, gn, sh) => {
                    acc(&mut adj, *x, apply_conv_in_grad(&self.nodes[*gn].value, &g, *sh));
                    acc(&mut adj, *gn, apply_conv(&self.nodes[*x].value, &g, *sh));
                }
                Op::MaxPool(x, sh) => {
                    acc(&mut adj, *x, apply_max_unpool(&g, &self.nodes[*x].value, *sh));
                }
                Op::MaxUnpool(gn, x, sh) => {
                    // Routing indices depend on x only through a piecewise
                    // constant argmax, so x receives no adjoint.
                    acc(&mut adj, *gn, apply_pool_select(&g, &self.nodes[*x].value, *sh));
                }
                Op::PoolSelect(a, x, sh) => {
                    acc(&mut adj, *a, apply_max_unpool(&g, &self.nodes[*x].value, *sh));
                }
            }
        }
        Gradients { adj }
    }
}

fn acc(adj: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
    match &mut adj[id] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn apply_diff_h(a: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    assert_eq!(a.dim(), (h * w, 1));
    let mut out = Array2::zeros((h * w, 1));
    for r in 0..h {
        for c in 0..w - 1 {
            out[(r * w + c, 0)] = a[(r * w + c + 1, 0)] - a[(r * w + c, 0)];
        }
    }
    out
}

fn apply_diff_v(a: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    assert_eq!(a.dim(), (h * w, 1));
    let mut out = Array2::zeros((h * w, 1));
    for r in 0..h - 1 {
        for c in 0..w {
            out[(r * w + c, 0)] = a[((r + 1) * w + c, 0)] - a[(r * w + c, 0)];
        }
    }
    out
}

fn apply_diff_ht(a: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    assert_eq!(a.dim(), (h * w, 1));
    let mut out = Array2::zeros((h * w, 1));
    for r in 0..h {
        for c in 0..w - 1 {
            let v = a[(r * w + c, 0)];
            out[(r * w + c + 1, 0)] += v;
            out[(r * w + c, 0)] -= v;
        }
    }
    out
}

fn apply_diff_vt(a: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    assert_eq!(a.dim(), (h * w, 1));
    let mut out = Array2::zeros((h * w, 1));
    for r in 0..h - 1 {
        for c in 0..w {
            let v = a[(r * w + c, 0)];
            out[((r + 1) * w + c, 0)] += v;
            out[(r * w + c, 0)] -= v;
        }
    }
    out
}

fn apply_conv(x: &Array2<f64>, k: &Array2<f64>, sh: ConvShape) -> Array2<f64> {
    let m = x.nrows();
    assert_eq!(x.ncols(), sh.in_ch * sh.h * sh.w);
    assert_eq!(k.dim(), (sh.out_ch, sh.in_ch * sh.k * sh.k));
    let (oh, ow) = (sh.out_h(), sh.out_w());
    let mut out = Array2::zeros((m, sh.out_ch * oh * ow));
    for b in 0..m {
        for oc in 0..sh.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ic in 0..sh.in_ch {
                        for ky in 0..sh.k {
                            for kx in 0..sh.k {
                                let xi = ic * sh.h * sh.w + (oy + ky) * sh.w + (ox + kx);
                                let ki = ic * sh.k * sh.k + ky * sh.k + kx;
                                s += x[(b, xi)] * k[(oc, ki)];
                            }
                        }
                    }
                    out[(b, oc * oh * ow + oy * ow + ox)] = s;
                }
            }
        }
    }
    out
}

fn apply_conv_in_grad(g: &Array2<f64>, k: &Array2<f64>, sh: ConvShape) -> Array2<f64> {
    let m = g.nrows();
    let (oh, ow) = (sh.out_h(), sh.out_w());
    assert_eq!(g.ncols(), sh.out_ch * oh * ow);
    assert_eq!(k.dim(), (sh.out_ch, sh.in_ch * sh.k * sh.k));
    let mut out = Array2::zeros((m, sh.in_ch * sh.h * sh.w));
    for b in 0..m {
        for oc in 0..sh.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g[(b, oc * oh * ow + oy * ow + ox)];
                    if gv == 0.0 {
                        continue;
                    }
                    for ic in 0..sh.in_ch {
                        for ky in 0..sh.k {
                            for kx in 0..sh.k {
                                let xi = ic * sh.h * sh.w + (oy + ky) * sh.w + (ox + kx);
                                let ki = ic * sh.k * sh.k + ky * sh.k + kx;
                                out[(b, xi)] += gv * k[(oc, ki)];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn apply_conv_w_grad(x: &Array2<f64>, g: &Array2<f64>, sh: ConvShape) -> Array2<f64> {
    let m = x.nrows();
    let (oh, ow) = (sh.out_h(), sh.out_w());
    assert_eq!(x.ncols(), sh.in_ch * sh.h * sh.w);
    assert_eq!(g.ncols(), sh.out_ch * oh * ow);
    assert_eq!(g.nrows(), m);
    let mut out = Array2::zeros((sh.out_ch, sh.in_ch * sh.k * sh.k));
    for b in 0..m {
        for oc in 0..sh.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g[(b, oc * oh * ow + oy * ow + ox)];
                    if gv == 0.0 {
                        continue;
                    }
                    for ic in 0..sh.in_ch {
                        for ky in 0..sh.k {
                            for kx in 0..sh.k {
                                let xi = ic * sh.h * sh.w + (oy + ky) * sh.w + (ox + kx);
                                let ki = ic * sh.k * sh.k + ky * sh.k + kx;
                                out[(oc, ki)] += gv * x[(b, xi)];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Argmax (first maximum, row-major window scan) for one pooling window.
fn window_argmax(
    x: &Array2<f64>,
    b: usize,
    c: usize,
    py: usize,
    px: usize,
    sh: PoolShape,
) -> usize {
    let mut best_idx = 0usize;
    let mut best = f64::NEG_INFINITY;
    for wy in 0..sh.window {
        for wx in 0..sh.window {
            let y = py * sh.window + wy;
            let xcol = px * sh.window + wx;
            let idx = c * sh.h * sh.w + y * sh.w + xcol;
            let v = x[(b, idx)];
            if v > best {
                best = v;
                best_idx = idx;
            }
        }
    }
    best_idx
}

fn apply_max_pool(x: &Array2<f64>, sh: PoolShape) -> Array2<f64> {
    let m = x.nrows();
    assert_eq!(x.ncols(), sh.ch * sh.h * sh.w);
    let (oh, ow) = (sh.out_h(), sh.out_w());
    let mut out = Array2::zeros((m, sh.ch * oh * ow));
    for b in 0..m {
        for c in 0..sh.ch {
            for py in 0..oh {
                for px in 0..ow {
                    let idx = window_argmax(x, b, c, py, px, sh);
                    out[(b, c * oh * ow + py * ow + px)] = x[(b, idx)];
                }
            }
        }
    }
    out
}

fn apply_max_unpool(g: &Array2<f64>, x: &Array2<f64>, sh: PoolShape) -> Array2<f64> {
    let m = x.nrows();
    let (oh, ow) = (sh.out_h(), sh.out_w());
    assert_eq!(g.dim(), (m, sh.ch * oh * ow));
    let mut out = Array2::zeros(x.dim());
    for b in 0..m {
        for c in 0..sh.ch {
            for py in 0..oh {
                for px in 0..ow {
                    let idx = window_argmax(x, b, c, py, px, sh);
                    out[(b, idx)] += g[(b, c * oh * ow + py * ow + px)];
                }
            }
        }
    }
    out
}

fn apply_pool_select(a: &Array2<f64>, x: &Array2<f64>, sh: PoolShape) -> Array2<f64> {
    let m = x.nrows();
    assert_eq!(a.dim(), x.dim());
    let (oh, ow) = (sh.out_h(), sh.out_w());
    let mut out = Array2::zeros((m, sh.ch * oh * ow));
    for b in 0..m {
        for c in 0..sh.ch {
            for py in 0..oh {
                for px in 0..ow {
                    let idx = window_argmax(x, b, c, py, px, sh);
                    out[(b, c * oh * ow + py * ow + px)] = a[(b, idx)];
                }
            }
        }
    }
    out
}
