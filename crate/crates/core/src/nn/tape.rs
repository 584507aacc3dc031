//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! through [`Tape::param`]; after [`Tape::backward`] their gradients are
//! collected by name with [`Tape::param_grads`].

use std::collections::{BTreeMap, HashMap, HashSet};

use super::params::ParameterStore;
use super::tensor::{matmul, matmul_a_bt_into, matmul_at_b_into, ConvGeom, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    MulRowsConst(Var, Vec<f64>),
    MulRowsVar(Var, Var),
    AddConst(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, Vec<f64>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    GlobalMaxPool(Var, Vec<usize>),
    GlobalAvgPool(Var),
    ColumnMean(Var, usize),
    Reshape(Var),
    Sum(Var),
    Custom(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    frozen: Vec<String>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters whose names start with any of `prefixes` enter as
    /// constants and receive no gradient.
    pub fn with_frozen(prefixes: &[String]) -> Self {
        Self {
            frozen: prefixes.to_vec(),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let grad = match &op {
            Op::Leaf => false,
            _ => self.parents(&op).iter().any(|p| self.nodes[p.0].grad),
        };
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow(a, b) | Op::MulRow(a, b) | Op::MulRowsVar(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::SliceCols(a, ..)
            | Op::SliceRows(a, ..)
            | Op::MulRowsConst(a, _)
            | Op::AddConst(a)
            | Op::SoftmaxRows(a)
            | Op::LayerNormRows(a, _)
            | Op::GlobalMaxPool(a, _)
            | Op::GlobalAvgPool(a)
            | Op::ColumnMean(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Custom(a, _) => vec![*a],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => vec![*x, *w, *b],
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// A trainable input that is not a named parameter (used by gradient
    /// checks on loss inputs).
    pub fn input(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf);
        self.nodes[v.0].grad = true;
        v
    }

    /// Named parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let t = store
            .tensor(name)
            .unwrap_or_else(|| panic!("parameter {name:?} missing from store"));
        let v = self.push(t, Op::Leaf);
        let frozen = self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        self.nodes[v.0].grad = !frozen;
        self.params.insert(name.to_string(), v);
        v
    }

    // ---- arithmetic -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} x {sb:?}");
        let out = matmul(&self.value(a).data, &self.value(b).data, sa[0], sa[1], sb[1]);
        self.push(Tensor::new(vec![sa[0], sb[1]], out), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = (t.shape[0], t.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], out), Op::Transpose(a))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape.clone();
        self.push(Tensor::new(shape, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[m,n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tb.len();
        assert_eq!(tx.cols(), n, "add_row width");
        let mut data = tx.data.clone();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(&tb.data) {
                *v += bv;
            }
        }
        let shape = tx.shape.clone();
        self.push(Tensor::new(shape, data), Op::AddRow(x, b))
    }

    /// `x[m,n] * g[n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let (tx, tg) = (self.value(x), self.value(g));
        let n = tg.len();
        assert_eq!(tx.cols(), n, "mul_row width");
        let mut data = tx.data.clone();
        for row in data.chunks_mut(n) {
            for (v, gv) in row.iter_mut().zip(&tg.data) {
                *v *= gv;
            }
        }
        let shape = tx.shape.clone();
        self.push(Tensor::new(shape, data), Op::MulRow(x, g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|v| v * c).collect());
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|v| v + c).collect());
        self.push(out, Op::AddScalar(a))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_scalar(n, 1.0)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|&v| f(v)).collect());
        self.push(out, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |v| v.max(0.0), Op::Relu(a))
    }

    // ---- layout -----------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.value(p).rows(), m, "concat_cols rows");
                self.value(p).cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(Tensor::new(vec![m, total], data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        let m = t.rows();
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        self.push(Tensor::new(vec![m, end - start], data), Op::SliceCols(a, start, end))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), n, "concat_rows width");
            m += t.rows();
            data.extend_from_slice(&t.data);
        }
        self.push(Tensor::new(vec![m, n], data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let data = t.data[start * n..end * n].to_vec();
        self.push(Tensor::new(vec![end - start, n], data), Op::SliceRows(a, start))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a);
        let out = Tensor::new(shape.to_vec(), t.data.clone());
        self.push(out, Op::Reshape(a))
    }

    /// Scales row `i` by the constant `coef[i]`.
    pub fn mul_rows_const(&mut self, a: Var, coef: Vec<f64>) -> Var {
        let t = self.value(a);
        let n = t.cols();
        assert_eq!(coef.len(), t.rows());
        let mut data = t.data.clone();
        for (row, &c) in data.chunks_mut(n).zip(&coef) {
            row.iter_mut().for_each(|v| *v *= c);
        }
        let shape = t.shape.clone();
        self.push(Tensor::new(shape, data), Op::MulRowsConst(a, coef))
    }

    /// Scales row `i` of `a[m,n]` by `s[i,0]`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Var {
        let (t, ts) = (self.value(a), self.value(s));
        let n = t.cols();
        assert_eq!(ts.len(), t.rows(), "mul_rows scale length");
        let mut data = t.data.clone();
        for (row, &c) in data.chunks_mut(n).zip(&ts.data) {
            row.iter_mut().for_each(|v| *v *= c);
        }
        let shape = t.shape.clone();
        self.push(Tensor::new(shape, data), Op::MulRowsVar(a, s))
    }

    /// `mask * new + (1 - mask) * old`, row-wise with a constant 0/1 mask.
    pub fn blend_rows(&mut self, new: Var, old: Var, mask: &[f64]) -> Var {
        if mask.iter().all(|&m| m == 1.0) {
            return new;
        }
        let a = self.mul_rows_const(new, mask.to_vec());
        let b = self.mul_rows_const(old, mask.iter().map(|m| 1.0 - m).collect());
        self.add(a, b)
    }

    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape, c.shape);
        let data = t.data.iter().zip(&c.data).map(|(x, y)| x + y).collect();
        let shape = t.shape.clone();
        self.push(Tensor::new(shape, data), Op::AddConst(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let mut data = t.data.clone();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = t.shape.clone();
        self.push(Tensor::new(shape, data), Op::SoftmaxRows(a))
    }

    /// Row-wise standardization without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let mut data = t.data.clone();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let shape = t.shape.clone();
        self.push(Tensor::new(shape, data), Op::LayerNormRows(a, inv_std))
    }

    // ---- convolution ------------------------------------------------

    /// `x[B,C,H,W] * w[O,C,k,k] + b[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(sx.len() == 4 && sw.len() == 4 && sx[1] == sw[1], "conv2d {sx:?} * {sw:?}");
        let (bsz, o, k) = (sx[0], sw[0], sw[2]);
        let geom = ConvGeom::conv(sx[1], sx[2], sx[3], k, stride, pad);
        let (rows, pos) = (geom.rows(), geom.positions());
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let img = sx[1] * sx[2] * sx[3];
        let mut out = Vec::with_capacity(bsz * o * pos);
        for bi in 0..bsz {
            let cols = geom.im2col(&tx.data[bi * img..(bi + 1) * img]);
            let mut y = matmul(&tw.data, &cols, o, rows, pos);
            for (oc, chunk) in y.chunks_mut(pos).enumerate() {
                chunk.iter_mut().for_each(|v| *v += tb.data[oc]);
            }
            out.extend(y);
        }
        let shape = vec![bsz, o, geom.out_h, geom.out_w];
        self.push(Tensor::new(shape, out), Op::Conv2d { x, w, b, geom })
    }

    /// Fractionally strided convolution: `x[B,C,H,W]`, `w[C,O,k,k]`, `b[O]`;
    /// output side `(H - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(sx.len() == 4 && sw.len() == 4 && sx[1] == sw[0], "conv_t {sx:?} * {sw:?}");
        let (bsz, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[1], sw[2]);
        let out_h = (h - 1) * stride + k - 2 * pad;
        let out_w = (wd - 1) * stride + k - 2 * pad;
        // Same geometry as the convolution whose input is our output.
        let geom = ConvGeom {
            channels: o,
            in_h: out_h,
            in_w: out_w,
            kernel: k,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        };
        assert_eq!(ConvGeom::conv(o, out_h, out_w, k, stride, pad).positions(), h * wd);
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (rows, pos, plane) = (geom.rows(), h * wd, out_h * out_w);
        let mut out = vec![0.0; bsz * o * plane];
        for bi in 0..bsz {
            let mut cols = vec![0.0; rows * pos];
            matmul_at_b_into(&mut cols, &tw.data, &tx.data[bi * c * pos..(bi + 1) * c * pos], rows, c, pos);
            let dst = &mut out[bi * o * plane..(bi + 1) * o * plane];
            geom.col2im_add(&cols, dst);
            for (oc, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += tb.data[oc]);
            }
        }
        let shape = vec![bsz, o, out_h, out_w];
        self.push(Tensor::new(shape, out), Op::ConvTranspose2d { x, w, b, geom })
    }

    /// `[B,C,H,W] -> [B,C]`, maximum over space; ties pick the first cell.
    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (b, c) = (t.shape[0], t.shape[1]);
        let plane = t.shape[2] * t.shape[3];
        let mut vals = Vec::with_capacity(b * c);
        let mut idx = Vec::with_capacity(b * c);
        for chunk in t.data.chunks(plane) {
            let mut best = 0;
            for (i, &v) in chunk.iter().enumerate() {
                if v > chunk[best] {
                    best = i;
                }
            }
            vals.push(chunk[best]);
            idx.push(best);
        }
        self.push(Tensor::new(vec![b, c], vals), Op::GlobalMaxPool(x, idx))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (b, c) = (t.shape[0], t.shape[1]);
        let plane = t.shape[2] * t.shape[3];
        let vals = t
            .data
            .chunks(plane)
            .map(|ch| ch.iter().sum::<f64>() / plane as f64)
            .collect();
        self.push(Tensor::new(vec![b, c], vals), Op::GlobalAvgPool(x))
    }

    /// `[B,C,H,W] -> [B,C]`: mean over the height axis at column `col`.
    pub fn column_mean(&mut self, x: Var, col: usize) -> Var {
        let t = self.value(x);
        let (b, c, h, w) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
        let mut vals = Vec::with_capacity(b * c);
        for plane in t.data.chunks(h * w) {
            vals.push((0..h).map(|r| plane[r * w + col]).sum::<f64>() / h as f64);
        }
        self.push(Tensor::new(vec![b, c], vals), Op::ColumnMean(x, col))
    }

    // ---- reductions -------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Scalar node with a precomputed value and gradient with respect to
    /// `input`; used to splice closed-form losses into the graph.
    pub fn custom_scalar(&mut self, input: Var, value: f64, grad: Tensor) -> Var {
        assert_eq!(grad.shape, self.value(input).shape, "custom gradient shape");
        self.push(Tensor::scalar(value), Op::Custom(input, grad))
    }

    // ---- backward ---------------------------------------------------

    /// Back-propagates from the scalar `root`.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (p, pg) in self.local_grads(i, &g) {
                if !self.nodes[p.0].grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        self.grads = grads;
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every trainable parameter touched by the pass.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].grad)
            .map(|(name, &v)| {
                let g = self
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn param_names(&self) -> HashSet<String> {
        self.params.keys().cloned().collect()
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &self.nodes[i].value;
        let like = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape.clone(), data);
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                let mut ga = vec![0.0; m * k];
                matmul_a_bt_into(&mut ga, &g.data, &tb.data, m, n, k);
                let mut gb = vec![0.0; k * n];
                matmul_at_b_into(&mut gb, &ta.data, &g.data, k, m, n);
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape[0], out.shape[1]);
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        ga[c * m + r] = g.data[r * n + c];
                    }
                }
                vec![(*a, like(*a, ga))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, like(*b, g.data.iter().map(|v| -v).collect()))],
            Op::Mul(a, b) => {
                let ga = g.data.iter().zip(&val(*b).data).map(|(x, y)| x * y).collect();
                let gb = g.data.iter().zip(&val(*a).data).map(|(x, y)| x * y).collect();
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::AddRow(x, b) => {
                let n = val(*b).len();
                let mut gb = vec![0.0; n];
                for row in g.data.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                vec![(*x, g.clone()), (*b, like(*b, gb))]
            }
            Op::MulRow(x, w) => {
                let tw = val(*w);
                let n = tw.len();
                let mut gx = g.data.clone();
                let mut gw = vec![0.0; n];
                for (r, (grow, xrow)) in gx.chunks_mut(n).zip(val(*x).data.chunks(n)).enumerate() {
                    let _ = r;
                    for j in 0..n {
                        gw[j] += grow[j] * xrow[j];
                        grow[j] *= tw.data[j];
                    }
                }
                vec![(*x, like(*x, gx)), (*w, like(*w, gw))]
            }
            Op::Scale(a, c) => vec![(*a, like(*a, g.data.iter().map(|v| v * c).collect()))],
            Op::AddScalar(a) | Op::AddConst(a) | Op::Reshape(a) => vec![(*a, like(*a, g.data.clone()))],
            Op::Sigmoid(a) => {
                let d = g.data.iter().zip(&out.data).map(|(g, y)| g * y * (1.0 - y)).collect();
                vec![(*a, like(*a, d))]
            }
            Op::Tanh(a) => {
                let d = g.data.iter().zip(&out.data).map(|(g, y)| g * (1.0 - y * y)).collect();
                vec![(*a, like(*a, d))]
            }
            Op::Relu(a) => {
                let d = g
                    .data
                    .iter()
                    .zip(&val(*a).data)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*a, like(*a, d))]
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut off = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let w = val(p).cols();
                        let d = g
                            .data
                            .chunks(total)
                            .flat_map(|row| row[off..off + w].iter().copied())
                            .collect();
                        off += w;
                        (p, like(p, d))
                    })
                    .collect()
            }
            Op::SliceCols(a, start, end) => {
                let n = val(*a).cols();
                let w = end - start;
                let mut d = vec![0.0; val(*a).len()];
                for (row, grow) in d.chunks_mut(n).zip(g.data.chunks(w)) {
                    row[*start..*end].copy_from_slice(grow);
                }
                vec![(*a, like(*a, d))]
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = val(p).len();
                        let d = g.data[off..off + len].to_vec();
                        off += len;
                        (p, like(p, d))
                    })
                    .collect()
            }
            Op::SliceRows(a, start) => {
                let n = val(*a).cols();
                let mut d = vec![0.0; val(*a).len()];
                d[start * n..start * n + g.len()].copy_from_slice(&g.data);
                vec![(*a, like(*a, d))]
            }
            Op::MulRowsConst(a, coef) => {
                let n = out.cols();
                let mut d = g.data.clone();
                for (row, c) in d.chunks_mut(n).zip(coef) {
                    row.iter_mut().for_each(|v| *v *= c);
                }
                vec![(*a, like(*a, d))]
            }
            Op::MulRowsVar(a, s) => {
                let (ta, ts) = (val(*a), val(*s));
                let n = ta.cols();
                let mut ga = g.data.clone();
                let mut gs = vec![0.0; ts.len()];
                for (r, (grow, arow)) in ga.chunks_mut(n).zip(ta.data.chunks(n)).enumerate() {
                    gs[r] = grow.iter().zip(arow).map(|(x, y)| x * y).sum();
                    grow.iter_mut().for_each(|v| *v *= ts.data[r]);
                }
                vec![(*a, like(*a, ga)), (*s, like(*s, gs))]
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let mut d = vec![0.0; out.len()];
                for ((drow, yrow), grow) in d.chunks_mut(n).zip(out.data.chunks(n)).zip(g.data.chunks(n)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                vec![(*a, like(*a, d))]
            }
            Op::LayerNormRows(a, inv_std) => {
                let n = out.cols();
                let mut d = vec![0.0; out.len()];
                for (r, ((drow, yrow), grow)) in d
                    .chunks_mut(n)
                    .zip(out.data.chunks(n))
                    .zip(g.data.chunks(n))
                    .enumerate()
                {
                    let mg = grow.iter().sum::<f64>() / n as f64;
                    let mgy = grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                    for j in 0..n {
                        drow[j] = inv_std[r] * (grow[j] - mg - yrow[j] * mgy);
                    }
                }
                vec![(*a, like(*a, d))]
            }
            Op::Conv2d { x, w, b, geom } => {
                let (tx, tw) = (val(*x), val(*w));
                let bsz = tx.shape[0];
                let o = tw.shape[0];
                let (rows, pos) = (geom.rows(), geom.positions());
                let img = geom.channels * geom.in_h * geom.in_w;
                let mut gx = vec![0.0; tx.len()];
                let mut gw = vec![0.0; tw.len()];
                let mut gb = vec![0.0; o];
                for bi in 0..bsz {
                    let go = &g.data[bi * o * pos..(bi + 1) * o * pos];
                    let cols = geom.im2col(&tx.data[bi * img..(bi + 1) * img]);
                    matmul_a_bt_into(&mut gw, go, &cols, o, pos, rows);
                    let mut gcols = vec![0.0; rows * pos];
                    matmul_at_b_into(&mut gcols, &tw.data, go, rows, o, pos);
                    geom.col2im_add(&gcols, &mut gx[bi * img..(bi + 1) * img]);
                    for (oc, chunk) in go.chunks(pos).enumerate() {
                        gb[oc] += chunk.iter().sum::<f64>();
                    }
                }
                vec![(*x, like(*x, gx)), (*w, like(*w, gw)), (*b, like(*b, gb))]
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (tx, tw) = (val(*x), val(*w));
                let (bsz, c) = (tx.shape[0], tx.shape[1]);
                let o = geom.channels;
                let (rows, pos) = (geom.rows(), geom.positions());
                let plane = geom.in_h * geom.in_w;
                let mut gx = vec![0.0; tx.len()];
                let mut gw = vec![0.0; tw.len()];
                let mut gb = vec![0.0; o];
                for bi in 0..bsz {
                    let go = &g.data[bi * o * plane..(bi + 1) * o * plane];
                    let gcols = geom.im2col(go);
                    let xb = &tx.data[bi * c * pos..(bi + 1) * c * pos];
                    let gxb = matmul(&tw.data, &gcols, c, rows, pos);
                    gx[bi * c * pos..(bi + 1) * c * pos].copy_from_slice(&gxb);
                    matmul_a_bt_into(&mut gw, xb, &gcols, c, pos, rows);
                    for (oc, chunk) in go.chunks(plane).enumerate() {
                        gb[oc] += chunk.iter().sum::<f64>();
                    }
                }
                vec![(*x, like(*x, gx)), (*w, like(*w, gw)), (*b, like(*b, gb))]
            }
            Op::GlobalMaxPool(x, idx) => {
                let tx = val(*x);
                let plane = tx.shape[2] * tx.shape[3];
                let mut d = vec![0.0; tx.len()];
                for (j, &k) in idx.iter().enumerate() {
                    d[j * plane + k] = g.data[j];
                }
                vec![(*x, like(*x, d))]
            }
            Op::GlobalAvgPool(x) => {
                let tx = val(*x);
                let plane = tx.shape[2] * tx.shape[3];
                let d = (0..tx.len()).map(|i| g.data[i / plane] / plane as f64).collect();
                vec![(*x, like(*x, d))]
            }
            Op::ColumnMean(x, col) => {
                let tx = val(*x);
                let (h, w) = (tx.shape[2], tx.shape[3]);
                let mut d = vec![0.0; tx.len()];
                for (j, plane) in d.chunks_mut(h * w).enumerate() {
                    for r in 0..h {
                        plane[r * w + col] = g.data[j] / h as f64;
                    }
                }
                vec![(*x, like(*x, d))]
            }
            Op::Sum(a) => vec![(*a, like(*a, vec![g.item(); val(*a).len()]))],
            Op::Custom(a, grad) => {
                let s = g.item();
                vec![(*a, like(*a, grad.data.iter().map(|v| v * s).collect()))]
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::max_input_grad_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Weighted sum so every output element matters.
    fn probe(tape: &mut Tape, y: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_tensor(&mut rng, tape.shape(y));
        let wv = tape.constant(w);
        let p = tape.mul(y, wv);
        tape.sum(p)
    }

    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let err = max_input_grad_error(&inputs, 1e-5, |tape, vars| {
            let y = f(tape, vars);
            probe(tape, y, 99)
        });
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn elementwise_and_matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        check(vec![a.clone(), b], |t, v| t.matmul(v[0], v[1]));
        let c = rand_tensor(&mut rng, &[3, 4]);
        check(vec![a.clone(), c.clone()], |t, v| {
            let m = t.mul(v[0], v[1]);
            let s = t.sub(m, v[1]);
            let q = t.tanh(s);
            let r = t.sigmoid(q);
            t.add(r, v[0])
        });
        check(vec![a.clone()], |t, v| t.transpose(v[0]));
        check(vec![a.clone()], |t, v| t.softmax_rows(v[0]));
        check(vec![a.clone()], |t, v| t.layer_norm_rows(v[0], 1e-5));
        let row = rand_tensor(&mut rng, &[4]);
        check(vec![a.clone(), row.clone()], |t, v| {
            let x = t.add_row(v[0], v[1]);
            t.mul_row(x, v[1])
        });
        let s = rand_tensor(&mut rng, &[3, 1]);
        check(vec![a.clone(), s], |t, v| t.mul_rows(v[0], v[1]));
        check(vec![a.clone(), c], |t, v| {
            let x = t.concat_cols(&[v[0], v[1]]);
            let y = t.slice_cols(x, 2, 7);
            let z = t.concat_rows(&[y, y]);
            let z = t.slice_rows(z, 1, 5);
            let z = t.mul_rows_const(z, vec![1.0, 0.5, 0.0, 2.0]);
            t.one_minus(z)
        });
    }

    #[test]
    fn conv_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[2, 2, 5, 5]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        check(vec![x.clone(), w, b.clone()], |t, v| t.conv2d(v[0], v[1], v[2], 2, 1));
        let wt = rand_tensor(&mut rng, &[2, 3, 4, 4]);
        check(vec![x.clone(), wt, b], |t, v| t.conv_transpose2d(v[0], v[1], v[2], 2, 1));
        check(vec![x.clone()], |t, v| t.global_avg_pool(v[0]));
        check(vec![x.clone()], |t, v| t.global_max_pool(v[0]));
        check(vec![x], |t, v| t.column_mean(v[0], 3));
    }

    #[test]
    fn transpose_conv_doubles_resolution() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = t.constant(Tensor::zeros(&[2, 3, 4, 4]));
        let b = t.constant(Tensor::full(&[3], 0.25));
        let y = t.conv_transpose2d(x, w, b, 2, 1);
        assert_eq!(t.shape(y), &[1, 3, 8, 8]);
        assert!(t.value(y).data.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        let w = rand_tensor(&mut rng, &[1, 2, 3, 3]);
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
        let bv = t.constant(Tensor::zeros(&[1]));
        let y = t.conv2d(xv, wv, bv, 1, 1);
        let at = |c: usize, i: isize, j: isize| {
            if (0..4).contains(&i) && (0..4).contains(&j) {
                x.data[(c * 4 + i as usize) * 4 + j as usize]
            } else {
                0.0
            }
        };
        for oy in 0..4 {
            for ox in 0..4 {
                let mut s = 0.0;
                for c in 0..2 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            s += w.data[(c * 3 + ki) * 3 + kj] * at(c, oy + ki as isize - 1, ox + kj as isize - 1);
                        }
                    }
                }
                let got = t.value(y).data[(oy * 4 + ox) as usize];
                assert!((got - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParameterStore::new();
        store
            .insert("w", Tensor::new(vec![1, 1], vec![3.0]), crate::nn::DType::F64)
            .unwrap();
        let mut t = Tape::new();
        let a = t.param(&store, "w");
        let b = t.param(&store, "w");
        assert_eq!(a, b);
        let p = t.mul(a, b);
        let s = t.sum(p);
        t.backward(s);
        assert_eq!(t.param_grads()["w"].data, vec![6.0]);
    }

    #[test]
    fn frozen_params_have_no_grad() {
        let mut store = ParameterStore::new();
        store.insert("enc.w", Tensor::scalar(2.0), crate::nn::DType::F64).unwrap();
        store.insert("head.w", Tensor::scalar(5.0), crate::nn::DType::F64).unwrap();
        let mut t = Tape::with_frozen(&["enc.".to_string()]);
        let a = t.param(&store, "enc.w");
        let b = t.param(&store, "head.w");
        let p = t.mul(a, b);
        t.backward(p);
        let g = t.param_grads();
        assert!(!g.contains_key("enc.w"));
        assert_eq!(g["head.w"].data, vec![2.0]);
    }
}
