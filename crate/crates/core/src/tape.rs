//! Reverse-mode automatic differentiation on a growable tape.
//!
//! Values are dense row-major `f64` matrices; scalars are 1x1. Every
//! operation eagerly computes its value when it is recorded, so a node's
//! value can be read back at any time. `Tape::backward` emits the whole
//! gradient computation as *new tape nodes*, which makes gradients
//! first-class: calling `backward` again on a scalar built from gradient
//! nodes yields second-order derivatives. This is what lets a training
//! objective constrain the model's own input gradients.
//!
//! Non-smooth operations (`relu`, `abs`, `clamp`, `max_all`) capture their
//! branch decision as a constant mask at record time; their derivatives are
//! correct almost everywhere and zero across the kink, which is the usual
//! convention for subgradient training.

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Neg(NodeId),
    Mul(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Div(NodeId, NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumCols(NodeId),
    SumRows(NodeId),
    SubCol(NodeId, NodeId),
    DivCol(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    BroadcastScalar(NodeId),
    BroadcastCol(NodeId),
    BroadcastRow(NodeId),
    Gather(NodeId, Vec<usize>),
    /// Scatter-add rows of the source into a zero matrix with `rows` rows.
    ScatterRows(NodeId, Vec<usize>),
    StackRows(Vec<NodeId>),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    PadCols(NodeId, usize),
    Relu(NodeId, Vec<f64>),
    Abs(NodeId, Vec<f64>),
    Clamp(NodeId, Vec<f64>),
    MulMask(NodeId, Vec<f64>),
    MaxAll(NodeId, usize),
    Pick(NodeId, usize, usize),
    PadOne(NodeId, usize, usize),
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
}

/// Gradient nodes produced by one `backward` pass, indexed by source node.
pub struct Gradients {
    grads: Vec<Option<NodeId>>,
}

impl Gradients {
    /// Gradient node for `id`, or `None` if the root does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<NodeId> {
        self.grads.get(id.0).copied().flatten()
    }
}

/// Growable computation tape. See the module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Shape of a node as (rows, cols).
    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    /// Eagerly computed value of a node, row-major.
    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let n = &self.nodes[id.0];
        assert!(n.rows == 1 && n.cols == 1, "scalar() on a {}x{} node", n.rows, n.cols);
        n.value[0]
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { op, rows, cols, value });
        NodeId(self.nodes.len() - 1)
    }

    /// New leaf holding `value` with the given shape. Leaves are inputs:
    /// parameters, data, or detached constants.
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        assert_eq!(value.len(), rows * cols, "leaf value length mismatch");
        self.push(Op::Leaf, rows, cols, value)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> NodeId {
        self.leaf(1, 1, vec![v])
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> NodeId {
        self.leaf(rows, cols, vec![0.0; rows * cols])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "add shape mismatch");
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), r, c, v)
    }

    /// `a + v` with `v` a 1 x cols row vector broadcast over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(v), (1, c), "add_row: v must be 1x{c}");
        let mut out = self.value(a).to_vec();
        let row = self.value(v);
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += row[j];
            }
        }
        self.push(Op::AddRow(a, v), r, c, out)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| -x).collect();
        self.push(Op::Neg(a), r, c, v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "mul shape mismatch");
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), r, c, v)
    }

    /// Elementwise product with a 1x1 node broadcast over `a`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(s), (1, 1), "mul_scalar: s must be 1x1");
        let k = self.scalar(s);
        let v = self.value(a).iter().map(|x| x * k).collect();
        self.push(Op::MulScalar(a, s), r, c, v)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| x * k).collect();
        self.push(Op::Scale(a, k), r, c, v)
    }

    pub fn add_const(&mut self, a: NodeId, k: f64) -> NodeId {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| x + k).collect();
        self.push(Op::AddConst(a), r, c, v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ca, rb, "matmul inner dims: {ra}x{ca} * {rb}x{cb}");
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; ra * cb];
        for i in 0..ra {
            for k in 0..ca {
                let aik = av[i * ca + k];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..cb {
                    out[i * cb + j] += aik * bv[k * cb + j];
                }
            }
        }
        self.push(Op::MatMul(a, b), ra, cb, out)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        self.push(Op::Transpose(a), c, r, out)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a), r, c, v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| sigmoid(*x)).collect();
        self.push(Op::Sigmoid(a), r, c, v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| x.exp()).collect();
        self.push(Op::Exp(a), r, c, v)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| x.ln()).collect();
        self.push(Op::Ln(a), r, c, v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "div shape mismatch");
        let v = zip_map(self.value(a), self.value(b), |x, y| x / y);
        self.push(Op::Div(a, b), r, c, v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().sum();
        self.push(Op::SumAll(a), 1, 1, vec![v])
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let v = self.value(a).iter().sum::<f64>() / n;
        self.push(Op::MeanAll(a), 1, 1, vec![v])
    }

    /// Row sums: r x c -> r x 1.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let out = (0..r).map(|i| av[i * c..(i + 1) * c].iter().sum()).collect();
        self.push(Op::SumCols(a), r, 1, out)
    }

    /// Column sums: r x c -> 1 x c.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += av[i * c + j];
            }
        }
        self.push(Op::SumRows(a), 1, c, out)
    }

    /// `a - v` with `v` an r x 1 column broadcast across the columns of `a`.
    pub fn sub_col(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(v), (r, 1), "sub_col: v must be {r}x1");
        let col = self.value(v).to_vec();
        let mut out = self.value(a).to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] -= col[i];
            }
        }
        self.push(Op::SubCol(a, v), r, c, out)
    }

    /// `a / v` with `v` an r x 1 column broadcast across the columns of `a`.
    pub fn div_col(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(v), (r, 1), "div_col: v must be {r}x1");
        let col = self.value(v).to_vec();
        let mut out = self.value(a).to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] /= col[i];
            }
        }
        self.push(Op::DivCol(a, v), r, c, out)
    }

    /// `a * v` with `v` an r x 1 column broadcast across the columns of `a`.
    pub fn mul_col(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(v), (r, 1), "mul_col: v must be {r}x1");
        let col = self.value(v).to_vec();
        let mut out = self.value(a).to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] *= col[i];
            }
        }
        self.push(Op::MulCol(a, v), r, c, out)
    }

    pub fn broadcast_scalar(&mut self, s: NodeId, rows: usize, cols: usize) -> NodeId {
        assert_eq!(self.shape(s), (1, 1));
        let v = vec![self.scalar(s); rows * cols];
        self.push(Op::BroadcastScalar(s), rows, cols, v)
    }

    /// r x 1 -> r x cols by repeating the column.
    pub fn broadcast_col(&mut self, v: NodeId, cols: usize) -> NodeId {
        let (r, one) = self.shape(v);
        assert_eq!(one, 1, "broadcast_col expects a column vector");
        let col = self.value(v);
        let mut out = vec![0.0; r * cols];
        for i in 0..r {
            for j in 0..cols {
                out[i * cols + j] = col[i];
            }
        }
        self.push(Op::BroadcastCol(v), r, cols, out)
    }

    /// 1 x c -> rows x c by repeating the row.
    pub fn broadcast_row(&mut self, v: NodeId, rows: usize) -> NodeId {
        let (one, c) = self.shape(v);
        assert_eq!(one, 1, "broadcast_row expects a row vector");
        let row = self.value(v);
        let mut out = vec![0.0; rows * c];
        for i in 0..rows {
            out[i * c..(i + 1) * c].copy_from_slice(row);
        }
        self.push(Op::BroadcastRow(v), rows, c, out)
    }

    /// Select rows of `a` by index; duplicates allowed.
    pub fn gather(&mut self, a: NodeId, ids: &[usize]) -> NodeId {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            assert!(i < r, "gather row {i} out of {r}");
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        self.push(Op::Gather(a, ids.to_vec()), ids.len(), c, out)
    }

    /// Scatter-add the rows of `src` into a `rows` x cols zero matrix.
    pub fn scatter_rows(&mut self, src: NodeId, ids: &[usize], rows: usize) -> NodeId {
        let (rs, c) = self.shape(src);
        assert_eq!(rs, ids.len(), "scatter_rows: one id per source row");
        let sv = self.value(src).to_vec();
        let mut out = vec![0.0; rows * c];
        for (k, &i) in ids.iter().enumerate() {
            assert!(i < rows, "scatter row {i} out of {rows}");
            for j in 0..c {
                out[i * c + j] += sv[k * c + j];
            }
        }
        self.push(Op::ScatterRows(src, ids.to_vec()), rows, c, out)
    }

    /// Stack 1 x c rows into an n x c matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> NodeId {
        assert!(!rows.is_empty(), "stack_rows of nothing");
        let (_, c) = self.shape(rows[0]);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            assert_eq!(self.shape(r), (1, c), "stack_rows: all rows must be 1x{c}");
            out.extend_from_slice(self.value(r));
        }
        self.push(Op::StackRows(rows.to_vec()), rows.len(), c, out)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(r, rb, "concat_cols row mismatch");
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        self.push(Op::ConcatCols(a, b), r, ca + cb, out)
    }

    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> NodeId {
        let (r, c) = self.shape(a);
        assert!(lo < hi && hi <= c, "slice_cols {lo}..{hi} of {c}");
        let av = self.value(a);
        let w = hi - lo;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + lo..i * c + hi]);
        }
        self.push(Op::SliceCols(a, lo, hi), r, w, out)
    }

    /// Place `a` into a wider zero matrix starting at column `lo`.
    pub fn pad_cols(&mut self, a: NodeId, lo: usize, out_cols: usize) -> NodeId {
        let (r, c) = self.shape(a);
        assert!(lo + c <= out_cols, "pad_cols overflow");
        let av = self.value(a);
        let mut out = vec![0.0; r * out_cols];
        for i in 0..r {
            out[i * out_cols + lo..i * out_cols + lo + c].copy_from_slice(&av[i * c..(i + 1) * c]);
        }
        self.push(Op::PadCols(a, lo), r, out_cols, out)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let mask: Vec<f64> = self.value(a).iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
        let v = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(Op::Relu(a, mask), r, c, v)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let mask: Vec<f64> = self.value(a).iter().map(|&x| if x >= 0.0 { 1.0 } else { -1.0 }).collect();
        let v = self.value(a).iter().map(|&x| x.abs()).collect();
        self.push(Op::Abs(a, mask), r, c, v)
    }

    /// Clamp into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let (r, c) = self.shape(a);
        let mask: Vec<f64> = self
            .value(a)
            .iter()
            .map(|&x| if x > lo && x < hi { 1.0 } else { 0.0 })
            .collect();
        let v = self.value(a).iter().map(|&x| x.clamp(lo, hi)).collect();
        self.push(Op::Clamp(a, mask), r, c, v)
    }

    /// Elementwise product with a constant mask (no gradient into the mask).
    pub fn mul_mask(&mut self, a: NodeId, mask: &[f64]) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(mask.len(), r * c, "mul_mask length mismatch");
        let v = zip_map(self.value(a), mask, |x, m| x * m);
        self.push(Op::MulMask(a, mask.to_vec()), r, c, v)
    }

    /// Maximum entry; gradient flows to the first argmax only.
    pub fn max_all(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut arg = 0;
        let mut best = f64::NEG_INFINITY;
        for (i, &x) in av.iter().enumerate() {
            if x > best {
                best = x;
                arg = i;
            }
        }
        self.push(Op::MaxAll(a, arg), 1, 1, vec![best])
    }

    /// Single element (i, j) as a 1x1 node.
    pub fn pick(&mut self, a: NodeId, i: usize, j: usize) -> NodeId {
        let (r, c) = self.shape(a);
        assert!(i < r && j < c, "pick ({i},{j}) out of {r}x{c}");
        let v = self.value(a)[i * c + j];
        self.push(Op::Pick(a, i, j), 1, 1, vec![v])
    }

    /// Place a scalar at (i, j) of an otherwise-zero r x c matrix.
    pub fn pad_one(&mut self, s: NodeId, i: usize, j: usize, rows: usize, cols: usize) -> NodeId {
        assert_eq!(self.shape(s), (1, 1));
        assert!(i < rows && j < cols);
        let mut out = vec![0.0; rows * cols];
        out[i * cols + j] = self.scalar(s);
        self.push(Op::PadOne(s, i, j), rows, cols, out)
    }

    // ------------------------------------------------------------------
    // Composite helpers
    // ------------------------------------------------------------------

    /// Row-wise softmax. The row max is subtracted as a detached constant,
    /// which leaves the gradient exact because softmax is shift invariant.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r, _c) = self.shape(a);
        let shifted = self.sub_row_max_detached(a);
        let e = self.exp(shifted);
        let s = self.sum_cols(e);
        let _ = r;
        self.div_col(e, s)
    }

    /// Row-wise log-softmax, numerically stable.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let shifted = self.sub_row_max_detached(a);
        let e = self.exp(shifted);
        let s = self.sum_cols(e);
        let ls = self.ln(s);
        self.sub_col(shifted, ls)
    }

    fn sub_row_max_detached(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let maxes: Vec<f64> = (0..r)
            .map(|i| av[i * c..(i + 1) * c].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let m = self.leaf(r, 1, maxes);
        self.sub_col(a, m)
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse-mode sweep from a scalar `root`. Gradient nodes are appended
    /// to the tape, so they may be combined into new objectives and
    /// differentiated again.
    pub fn backward(&mut self, root: NodeId) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<NodeId>> = vec![None; root.0 + 1];
        let seed = self.scalar_leaf(1.0);
        grads[root.0] = Some(seed);

        for id in (0..=root.0).rev() {
            let g = match grads[id] {
                Some(g) => g,
                None => continue,
            };
            // Clone the op descriptor; VJP emission needs &mut self.
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accum(&mut grads, a, g);
                    self.accum(&mut grads, b, g);
                }
                Op::AddRow(a, v) => {
                    self.accum(&mut grads, a, g);
                    let gv = self.sum_rows(g);
                    self.accum(&mut grads, v, gv);
                }
                Op::Neg(a) => {
                    let ga = self.neg(g);
                    self.accum(&mut grads, a, ga);
                }
                Op::Mul(a, b) => {
                    let ga = self.mul(g, b);
                    self.accum(&mut grads, a, ga);
                    let gb = self.mul(g, a);
                    self.accum(&mut grads, b, gb);
                }
                Op::MulScalar(a, s) => {
                    let ga = self.mul_scalar(g, s);
                    self.accum(&mut grads, a, ga);
                    let prod = self.mul(g, a);
                    let gs = self.sum_all(prod);
                    self.accum(&mut grads, s, gs);
                }
                Op::Scale(a, k) => {
                    let ga = self.scale(g, k);
                    self.accum(&mut grads, a, ga);
                }
                Op::AddConst(a) => {
                    self.accum(&mut grads, a, g);
                }
                Op::MatMul(a, b) => {
                    let bt = self.transpose(b);
                    let ga = self.matmul(g, bt);
                    self.accum(&mut grads, a, ga);
                    let at = self.transpose(a);
                    let gb = self.matmul(at, g);
                    self.accum(&mut grads, b, gb);
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(g);
                    self.accum(&mut grads, a, ga);
                }
                Op::Tanh(a) => {
                    // d tanh = 1 - tanh^2, rebuilt from the output node.
                    let y = NodeId(id);
                    let y2 = self.mul(y, y);
                    let ny2 = self.neg(y2);
                    let d = self.add_const(ny2, 1.0);
                    let ga = self.mul(g, d);
                    self.accum(&mut grads, a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = NodeId(id);
                    let ny = self.neg(y);
                    let om = self.add_const(ny, 1.0);
                    let d = self.mul(y, om);
                    let ga = self.mul(g, d);
                    self.accum(&mut grads, a, ga);
                }
                Op::Exp(a) => {
                    let y = NodeId(id);
                    let ga = self.mul(g, y);
                    self.accum(&mut grads, a, ga);
                }
                Op::Ln(a) => {
                    let ga = self.div(g, a);
                    self.accum(&mut grads, a, ga);
                }
                Op::Div(a, b) => {
                    let ga = self.div(g, b);
                    self.accum(&mut grads, a, ga);
                    let gn = self.mul(g, a);
                    let b2 = self.mul(b, b);
                    let q = self.div(gn, b2);
                    let gb = self.neg(q);
                    self.accum(&mut grads, b, gb);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.shape(a);
                    let ga = self.broadcast_scalar(g, r, c);
                    self.accum(&mut grads, a, ga);
                }
                Op::MeanAll(a) => {
                    let (r, c) = self.shape(a);
                    let b = self.broadcast_scalar(g, r, c);
                    let ga = self.scale(b, 1.0 / (r * c) as f64);
                    self.accum(&mut grads, a, ga);
                }
                Op::SumCols(a) => {
                    let (_, c) = self.shape(a);
                    let ga = self.broadcast_col(g, c);
                    self.accum(&mut grads, a, ga);
                }
                Op::SumRows(a) => {
                    let (r, _) = self.shape(a);
                    let ga = self.broadcast_row(g, r);
                    self.accum(&mut grads, a, ga);
                }
                Op::SubCol(a, v) => {
                    self.accum(&mut grads, a, g);
                    let s = self.sum_cols(g);
                    let gv = self.neg(s);
                    self.accum(&mut grads, v, gv);
                }
                Op::DivCol(a, v) => {
                    let ga = self.div_col(g, v);
                    self.accum(&mut grads, a, ga);
                    let prod = self.mul(g, a);
                    let s = self.sum_cols(prod);
                    let v2 = self.mul(v, v);
                    let q = self.div(s, v2);
                    let gv = self.neg(q);
                    self.accum(&mut grads, v, gv);
                }
                Op::MulCol(a, v) => {
                    let ga = self.mul_col(g, v);
                    self.accum(&mut grads, a, ga);
                    let prod = self.mul(g, a);
                    let gv = self.sum_cols(prod);
                    self.accum(&mut grads, v, gv);
                }
                Op::BroadcastScalar(s) => {
                    let gs = self.sum_all(g);
                    self.accum(&mut grads, s, gs);
                }
                Op::BroadcastCol(v) => {
                    let gv = self.sum_cols(g);
                    self.accum(&mut grads, v, gv);
                }
                Op::BroadcastRow(v) => {
                    let gv = self.sum_rows(g);
                    self.accum(&mut grads, v, gv);
                }
                Op::Gather(a, ids) => {
                    let (r, _) = self.shape(a);
                    let ga = self.scatter_rows(g, &ids, r);
                    self.accum(&mut grads, a, ga);
                }
                Op::ScatterRows(src, ids) => {
                    let gs = self.gather(g, &ids);
                    self.accum(&mut grads, src, gs);
                }
                Op::StackRows(rows) => {
                    for (i, &r) in rows.iter().enumerate() {
                        let gi = self.gather(g, &[i]);
                        self.accum(&mut grads, r, gi);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (_, ca) = self.shape(a);
                    let (_, cb) = self.shape(b);
                    let ga = self.slice_cols(g, 0, ca);
                    self.accum(&mut grads, a, ga);
                    let gb = self.slice_cols(g, ca, ca + cb);
                    self.accum(&mut grads, b, gb);
                }
                Op::SliceCols(a, lo, _hi) => {
                    let (_, c) = self.shape(a);
                    let ga = self.pad_cols(g, lo, c);
                    self.accum(&mut grads, a, ga);
                }
                Op::PadCols(a, lo) => {
                    let (_, c) = self.shape(a);
                    let ga = self.slice_cols(g, lo, lo + c);
                    self.accum(&mut grads, a, ga);
                }
                Op::Relu(a, mask) | Op::Clamp(a, mask) | Op::Abs(a, mask) => {
                    let ga = self.mul_mask(g, &mask);
                    self.accum(&mut grads, a, ga);
                }
                Op::MulMask(a, mask) => {
                    let ga = self.mul_mask(g, &mask);
                    self.accum(&mut grads, a, ga);
                }
                Op::MaxAll(a, arg) => {
                    let (r, c) = self.shape(a);
                    let b = self.broadcast_scalar(g, r, c);
                    let mut mask = vec![0.0; r * c];
                    mask[arg] = 1.0;
                    let ga = self.mul_mask(b, &mask);
                    self.accum(&mut grads, a, ga);
                }
                Op::Pick(a, i, j) => {
                    let (r, c) = self.shape(a);
                    let ga = self.pad_one(g, i, j, r, c);
                    self.accum(&mut grads, a, ga);
                }
                Op::PadOne(s, i, j) => {
                    let gs = self.pick(g, i, j);
                    self.accum(&mut grads, s, gs);
                }
            }
        }
        Gradients { grads }
    }

    fn accum(&mut self, grads: &mut [Option<NodeId>], target: NodeId, g: NodeId) {
        match grads[target.0] {
            Some(prev) => grads[target.0] = Some(self.add(prev, g)),
            None => grads[target.0] = Some(g),
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite difference of `f` at `x`, one entry at a time.
    fn fd_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut pert = x.to_vec();
        for i in 0..x.len() {
            pert[i] = x[i] + h;
            let up = f(&pert);
            pert[i] = x[i] - h;
            let dn = f(&pert);
            pert[i] = x[i];
            g[i] = (up - dn) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!(
                (x - y).abs() / denom <= tol,
                "{what}[{i}]: {x} vs {y}"
            );
        }
    }

    /// Checks the tape gradient of a scalar-valued builder against finite
    /// differences over a single leaf input.
    fn gradcheck(rows: usize, cols: usize, x: &[f64], build: impl Fn(&mut Tape, NodeId) -> NodeId) {
        let mut t = Tape::new();
        let leaf = t.leaf(rows, cols, x.to_vec());
        let out = build(&mut t, leaf);
        let grads = t.backward(out);
        let got = t.value(grads.get(leaf).expect("no grad")).to_vec();
        let want = fd_grad(x, 1e-5, |xs| {
            let mut t2 = Tape::new();
            let l = t2.leaf(rows, cols, xs.to_vec());
            let o = build(&mut t2, l);
            t2.scalar(o)
        });
        assert_close(&got, &want, 1e-6, "grad");
    }

    #[test]
    fn elementwise_grads_match_fd() {
        let x = [0.3, -1.2, 2.0, 0.01, -0.5, 1.5];
        gradcheck(2, 3, &x, |t, a| {
            let y = t.tanh(a);
            t.sum_all(y)
        });
        gradcheck(2, 3, &x, |t, a| {
            let y = t.sigmoid(a);
            let z = t.mul(y, a);
            t.sum_all(z)
        });
        gradcheck(2, 3, &x, |t, a| {
            let y = t.exp(a);
            t.mean_all(y)
        });
        gradcheck(2, 3, &x, |t, a| {
            let s = t.scale(a, 0.5);
            let y = t.add_const(s, 3.0);
            let l = t.ln(y);
            t.sum_all(l)
        });
        gradcheck(2, 3, &x, |t, a| {
            let y = t.relu(a);
            t.sum_all(y)
        });
        gradcheck(2, 3, &x, |t, a| {
            let y = t.abs(a);
            t.sum_all(y)
        });
    }

    #[test]
    fn matrix_grads_match_fd() {
        let x = [0.5, -0.3, 0.8, 0.1, -0.2, 0.9];
        // matmul with a constant on either side
        gradcheck(2, 3, &x, |t, a| {
            let w = t.leaf(3, 2, vec![0.2, -0.4, 0.7, 0.1, -0.9, 0.3]);
            let y = t.matmul(a, w);
            let z = t.tanh(y);
            t.sum_all(z)
        });
        gradcheck(2, 3, &x, |t, a| {
            let w = t.leaf(4, 3, vec![0.2, -0.4, 0.7, 0.1, -0.9, 0.3, 0.5, -0.5, 0.6, -0.1, 0.8, 0.2]);
            let at = t.transpose(a);
            let y = t.matmul(w, at);
            t.mean_all(y)
        });
        gradcheck(2, 3, &x, |t, a| {
            let b = t.leaf(2, 3, vec![1.5, 0.4, -0.6, 2.0, 0.7, 1.1]);
            let y = t.div(a, b);
            t.sum_all(y)
        });
    }

    #[test]
    fn broadcast_and_reduce_grads_match_fd() {
        let x = [0.5, -0.3, 0.8, 0.1, -0.2, 0.9];
        gradcheck(2, 3, &x, |t, a| {
            let v = t.leaf(1, 3, vec![0.3, -0.1, 0.6]);
            let y = t.add_row(a, v);
            let z = t.sigmoid(y);
            t.sum_all(z)
        });
        gradcheck(2, 3, &x, |t, a| {
            let s = t.sum_cols(a);
            let y = t.div_col(a, s);
            let z = t.mul(y, y);
            t.sum_all(z)
        });
        gradcheck(2, 3, &x, |t, a| {
            let s = t.sum_rows(a);
            let y = t.broadcast_row(s, 2);
            let z = t.mul(a, y);
            t.sum_all(z)
        });
        gradcheck(2, 3, &x, |t, a| {
            let m = t.mean_all(a);
            let y = t.broadcast_scalar(m, 2, 3);
            let d = t.sub(a, y);
            let sq = t.mul(d, d);
            t.sum_all(sq)
        });
        // sub_col / mul_col through a column built from the input itself
        gradcheck(2, 3, &x, |t, a| {
            let s = t.sum_cols(a);
            let y = t.sub_col(a, s);
            let z = t.mul_col(y, s);
            t.sum_all(z)
        });
    }

    #[test]
    fn gather_scatter_stack_grads_match_fd() {
        let x = [0.5, -0.3, 0.8, 0.1, -0.2, 0.9];
        gradcheck(3, 2, &x, |t, a| {
            // duplicate index exercises scatter-add accumulation
            let g = t.gather(a, &[0, 2, 0]);
            let y = t.tanh(g);
            t.sum_all(y)
        });
        gradcheck(3, 2, &x, |t, a| {
            let g = t.scatter_rows(a, &[1, 0, 1], 2);
            let y = t.mul(g, g);
            t.sum_all(y)
        });
        gradcheck(3, 2, &x, |t, a| {
            let r0 = t.gather(a, &[0]);
            let r2 = t.gather(a, &[2]);
            let s = t.stack_rows(&[r0, r2, r0]);
            let y = t.sigmoid(s);
            t.sum_all(y)
        });
        gradcheck(2, 3, &x, |t, a| {
            let l = t.slice_cols(a, 0, 2);
            let r = t.slice_cols(a, 1, 3);
            let c = t.concat_cols(l, r);
            let y = t.tanh(c);
            t.sum_all(y)
        });
    }

    #[test]
    fn pick_max_clamp_grads_match_fd() {
        let x = [0.5, -0.3, 0.8, 0.1, -0.2, 0.9];
        gradcheck(2, 3, &x, |t, a| {
            let p = t.pick(a, 1, 2);
            let q = t.pick(a, 0, 0);
            let y = t.mul(p, q);
            let z = t.pad_one(y, 0, 1, 2, 2);
            t.sum_all(z)
        });
        gradcheck(2, 3, &x, |t, a| t.max_all(a));
        gradcheck(2, 3, &x, |t, a| {
            let y = t.clamp(a, -0.25, 0.85);
            let z = t.mul(y, y);
            t.sum_all(z)
        });
        gradcheck(2, 3, &x, |t, a| {
            let s = t.mean_all(a);
            let y = t.mul_scalar(a, s);
            t.sum_all(y)
        });
    }

    #[test]
    fn softmax_matches_hand_computation() {
        let mut t = Tape::new();
        let a = t.leaf(1, 3, vec![1.0, 2.0, 3.0]);
        let p = t.softmax_rows(a);
        let v = t.value(p);
        let z: f64 = (1.0f64).exp() + (2.0f64).exp() + (3.0f64).exp();
        assert_close(v, &[1.0f64.exp() / z, 2.0f64.exp() / z, 3.0f64.exp() / z], 1e-12, "softmax");
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_and_log_softmax_grads_match_fd() {
        let x = [1.0, -2.0, 0.5, 3.0, 0.0, -1.0];
        gradcheck(2, 3, &x, |t, a| {
            let p = t.softmax_rows(a);
            let q = t.pick(p, 0, 1);
            let r = t.pick(p, 1, 2);
            let y = t.mul(q, r);
            t.scale(y, 10.0)
        });
        gradcheck(2, 3, &x, |t, a| {
            let lp = t.log_softmax_rows(a);
            let q = t.pick(lp, 0, 0);
            let r = t.pick(lp, 1, 1);
            t.add(q, r)
        });
    }

    #[test]
    fn second_order_grads_match_fd_of_first_order() {
        // L(x) = sum_i (d/dx_i sum(tanh(x)))^2 = sum_i sech(x_i)^4.
        // dL/dx_j = -4 tanh(x_j) sech(x_j)^4  (hand derivative).
        let x = vec![0.3, -0.7, 1.1];
        let mut t = Tape::new();
        let leaf = t.leaf(1, 3, x.clone());
        let y = t.tanh(leaf);
        let f = t.sum_all(y);
        let grads = t.backward(f);
        let gx = grads.get(leaf).unwrap();
        let sq = t.mul(gx, gx);
        let loss = t.sum_all(sq);
        let grads2 = t.backward(loss);
        let got = t.value(grads2.get(leaf).unwrap()).to_vec();

        let want: Vec<f64> = x
            .iter()
            .map(|&v| {
                let th = v.tanh();
                let sech2 = 1.0 - th * th;
                -4.0 * th * sech2 * sech2
            })
            .collect();
        assert_close(&got, &want, 1e-9, "second-order");
    }

    #[test]
    fn second_order_through_matmul_chain() {
        // L = || d/dx mean(sigmoid(x W)) ||^2 checked against FD of the
        // first-order gradient computed by the tape itself.
        let x = vec![0.2, -0.4, 0.6, 0.1];
        let w = vec![0.5, -0.3, 0.8, 0.2, -0.6, 0.4, 0.1, 0.9, -0.2, 0.7, 0.3, -0.5];

        let first_grad = |xs: &[f64]| -> Vec<f64> {
            let mut t = Tape::new();
            let l = t.leaf(1, 4, xs.to_vec());
            let wn = t.leaf(4, 3, w.clone());
            let h = t.matmul(l, wn);
            let s = t.sigmoid(h);
            let m = t.mean_all(s);
            let g = t.backward(m);
            t.value(g.get(l).unwrap()).to_vec()
        };

        let mut t = Tape::new();
        let l = t.leaf(1, 4, x.clone());
        let wn = t.leaf(4, 3, w.clone());
        let h = t.matmul(l, wn);
        let s = t.sigmoid(h);
        let m = t.mean_all(s);
        let g = t.backward(m);
        let gx = g.get(l).unwrap();
        let sq = t.mul(gx, gx);
        let loss = t.sum_all(sq);
        let g2 = t.backward(loss);
        let got = t.value(g2.get(l).unwrap()).to_vec();

        let want = fd_grad(&x, 1e-5, |xs| {
            first_grad(xs).iter().map(|v| v * v).sum::<f64>()
        });
        assert_close(&got, &want, 1e-5, "second-order-matmul");
    }

    #[test]
    fn backward_ignores_unrelated_nodes() {
        let mut t = Tape::new();
        let a = t.scalar_leaf(2.0);
        let b = t.scalar_leaf(5.0);
        let y = t.mul(a, a);
        let _unused = t.tanh(b);
        let g = t.backward(y);
        assert_eq!(t.value(g.get(a).unwrap()), &[4.0]);
        assert!(g.get(b).is_none());
    }
}
