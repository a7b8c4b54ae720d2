//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! The encoder and the losses are written once, as graph builders over a
//! [`Tape`]. Evaluating a builder with constant leaves gives the plain
//! forward value; calling [`Tape::backward`] on a scalar node yields the
//! gradient of every leaf.
//!
//! Gathers, scatters, neighbor means and segment sums are all expressed as
//! products with a constant [`Sparse`] matrix, which keeps the op set small.

use std::rc::Rc;

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row-compressed constant matrix.
#[derive(Debug, Clone, Default)]
pub struct Sparse {
    cols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl Sparse {
    pub fn new(rows: usize, cols: usize) -> Self {
        Sparse {
            cols,
            rows: vec![Vec::new(); rows],
        }
    }

    /// One-hot rows: row `i` selects input row `indices[i]`.
    pub fn gather(indices: &[usize], cols: usize) -> Self {
        Sparse {
            cols,
            rows: indices.iter().map(|&j| vec![(j, 1.0)]).collect(),
        }
    }

    /// Row `i` is the uniform mean of input rows `groups[i]` (zero row if empty).
    pub fn mean_rows(groups: &[Vec<usize>], cols: usize) -> Self {
        let rows = groups
            .iter()
            .map(|g| {
                let w = 1.0 / g.len().max(1) as f64;
                g.iter().map(|&j| (j, w)).collect()
            })
            .collect();
        Sparse { cols, rows }
    }

    pub fn push(&mut self, row: usize, col: usize, weight: f64) {
        debug_assert!(col < self.cols);
        self.rows[row].push((col, weight));
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn mul(&self, x: &Mat) -> Mat {
        assert_eq!(self.cols, x.nrows(), "sparse product shape");
        let mut out = Mat::zeros((self.rows.len(), x.ncols()));
        for (i, row) in self.rows.iter().enumerate() {
            let mut o = out.row_mut(i);
            for &(j, w) in row {
                o.scaled_add(w, &x.row(j));
            }
        }
        out
    }

    /// `selfᵀ · g`
    pub fn mul_transposed(&self, g: &Mat) -> Mat {
        assert_eq!(self.rows.len(), g.nrows(), "sparse transpose product shape");
        let mut out = Mat::zeros((self.cols, g.ncols()));
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out.row_mut(j).scaled_add(w, &g.row(i));
            }
        }
        out
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Spmm(Rc<Sparse>, Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(f64, Var),
    Abs(Var),
    Relu(Var),
    LeakyRelu(f64, Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    /// Row `i` of the matrix scaled by entry `i` of the column.
    MulCol(Var, Var),
    SegmentSoftmax(Rc<Vec<Vec<usize>>>, Var),
    RowCosine(Var, Var),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient for the leaf `v`, or `None` if it does not influence the
    /// output. Interior gradients are released during the sweep.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    zero_norm_rows: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on a non-scalar node");
        m[[0, 0]]
    }

    /// Number of zero-norm rows met by cosine nodes so far.
    pub fn zero_norm_rows(&self) -> usize {
        self.zero_norm_rows
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn spmm(&mut self, m: Rc<Sparse>, x: Var) -> Var {
        let v = m.mul(self.value(x));
        self.push(v, Op::Spmm(m, x))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat row counts");
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Left fold of `add` over a nonempty list.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let (&first, rest) = terms.split_first().expect("add_all on empty list");
        rest.iter().fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn scale(&mut self, c: f64, x: Var) -> Var {
        let v = self.value(x) * c;
        self.push(v, Op::Scale(c, x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::abs);
        self.push(v, Op::Abs(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, slope: f64, x: Var) -> Var {
        let v = self.value(x).mapv(|a| if a > 0.0 { a } else { slope * a });
        self.push(v, Op::LeakyRelu(slope, x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::ln);
        self.push(v, Op::Log(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    /// Mean of all entries (0 for an empty node).
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(1.0 / n as f64, s)
    }

    pub fn mul_col(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(wv.dim(), (xv.nrows(), 1), "mul_col weight shape");
        let v = xv * wv;
        self.push(v, Op::MulCol(x, w))
    }

    /// Softmax of a column vector within each index group.
    pub fn segment_softmax(&mut self, groups: Rc<Vec<Vec<usize>>>, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ncols(), 1, "segment_softmax expects a column");
        let mut out = Mat::zeros(xv.dim());
        for g in groups.iter() {
            let max = g
                .iter()
                .map(|&i| xv[[i, 0]])
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = g.iter().map(|&i| (xv[[i, 0]] - max).exp()).sum();
            for &i in g {
                out[[i, 0]] = (xv[[i, 0]] - max).exp() / z;
            }
        }
        self.push(out, Op::SegmentSoftmax(groups, x))
    }

    /// Row-wise cosine similarity; a zero-norm row yields 0 and no gradient.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.dim(), bv.dim(), "row_cosine shapes");
        let mut out = Mat::zeros((av.nrows(), 1));
        let mut zero = 0;
        for (i, (ra, rb)) in av.outer_iter().zip(bv.outer_iter()).enumerate() {
            let na = ra.dot(&ra).sqrt();
            let nb = rb.dot(&rb).sqrt();
            if na == 0.0 || nb == 0.0 {
                zero += 1;
            } else {
                out[[i, 0]] = ra.dot(&rb) / (na * nb);
            }
        }
        self.zero_norm_rows += zero;
        self.push(out, Op::RowCosine(a, b))
    }

    /// Sign pattern of every activation input on the tape. Two evaluations
    /// with equal signatures lie on the same smooth piece of the function.
    pub fn activation_signature(&self) -> Vec<i8> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) | Op::LeakyRelu(_, x) | Op::Abs(x) = node.op {
                sig.extend(
                    self.value(x)
                        .iter()
                        .map(|&a| a.partial_cmp(&0.0).map_or(0, |o| o as i8)),
                );
            }
        }
        sig
    }

    /// Back-propagate from the scalar node `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(
            self.shape(output),
            (1, 1),
            "backward from a non-scalar node"
        );
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Spmm(m, x) => accumulate(&mut grads, *x, m.mul_transposed(&g)),
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        accumulate(
                            &mut grads,
                            p,
                            g.slice(s![.., offset..offset + w]).to_owned(),
                        );
                        offset += w;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(c, x) => accumulate(&mut grads, *x, g * *c),
                Op::Abs(x) => {
                    let d = self.value(*x).mapv(|a| {
                        if a > 0.0 {
                            1.0
                        } else if a < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *x, g * d);
                }
                Op::Relu(x) => {
                    let d = self.value(*x).mapv(|a| if a > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *x, g * d);
                }
                Op::LeakyRelu(slope, x) => {
                    let d = self.value(*x).mapv(|a| if a > 0.0 { 1.0 } else { *slope });
                    accumulate(&mut grads, *x, g * d);
                }
                Op::Exp(x) => accumulate(&mut grads, *x, g * &node.value),
                Op::Log(x) => accumulate(&mut grads, *x, g / self.value(*x)),
                Op::Sum(x) => {
                    let gx = Mat::from_elem(self.shape(*x), g[[0, 0]]);
                    accumulate(&mut grads, *x, gx);
                }
                Op::MulCol(x, w) => {
                    let gx = &g * self.value(*w);
                    let gw = (&g * self.value(*x)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                }
                Op::SegmentSoftmax(groups, x) => {
                    let y = &node.value;
                    let mut gx = Mat::zeros(y.dim());
                    for grp in groups.iter() {
                        let dot: f64 = grp.iter().map(|&i| y[[i, 0]] * g[[i, 0]]).sum();
                        for &i in grp {
                            gx[[i, 0]] = y[[i, 0]] * (g[[i, 0]] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::RowCosine(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Mat::zeros(av.dim());
                    let mut gb = Mat::zeros(bv.dim());
                    for i in 0..av.nrows() {
                        let (ra, rb) = (av.row(i), bv.row(i));
                        let na = ra.dot(&ra).sqrt();
                        let nb = rb.dot(&rb).sqrt();
                        if na == 0.0 || nb == 0.0 {
                            continue;
                        }
                        let c = node.value[[i, 0]];
                        let gi = g[[i, 0]];
                        let inv = 1.0 / (na * nb);
                        ga.row_mut(i)
                            .assign(&((&rb * inv - &ra * (c / (na * na))) * gi));
                        gb.row_mut(i)
                            .assign(&((&ra * inv - &rb * (c / (nb * nb))) * gi));
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}
