//! A small reverse-mode automatic differentiation tape over dense row-major
//! matrices. Only the operations the encoders, heads and losses need are
//! provided.

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data does not match shape");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    MeanRows(Var),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    PairwiseDist(Var, Var),
    TileExpand(Var, usize),
    FrobDiff(Var, Var),
    MinedHinge {
        dist: Var,
        picks: Vec<Option<(usize, usize)>>,
    },
    SoftmaxCe(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    // distance to the nearest non-differentiable point, for gradient checks
    kink: f64,
}

/// Records operations in evaluation order; `backward` walks them in reverse.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.push_kink(op, value, f64::INFINITY)
    }

    fn push_kink(&mut self, op: Op, value: Tensor, kink: f64) -> Var {
        self.nodes.push(Node { op, value, kink });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Copies a value into a fresh leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance of any recorded kink argument (rectifier input,
    /// hinge argument, mining tie) from its switching point.
    pub fn kink_margin(&self) -> f64 {
        self.nodes.iter().map(|n| n.kink).fold(f64::INFINITY, f64::min)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.rows, "matmul shape");
        let mut out = Tensor::zeros(x.rows, y.cols);
        for i in 0..x.rows {
            for k in 0..x.cols {
                let xv = x.data[i * x.cols + k];
                if xv == 0.0 {
                    continue;
                }
                let yrow = &y.data[k * y.cols..(k + 1) * y.cols];
                let orow = &mut out.data[i * y.cols..(i + 1) * y.cols];
                for (o, yv) in orow.iter_mut().zip(yrow) {
                    *o += xv * yv;
                }
            }
        }
        self.push(Op::MatMul(a, b), out)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.cols, "matmul_t shape");
        let mut out = Tensor::zeros(x.rows, y.rows);
        for i in 0..x.rows {
            for j in 0..y.rows {
                out.data[i * y.rows + j] = x.row(i).iter().zip(y.row(j)).map(|(p, q)| p * q).sum();
            }
        }
        self.push(Op::MatMulT(a, b), out)
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        assert_eq!((b.rows, b.cols), (1, x.cols), "bias shape");
        let mut out = x.clone();
        for row in out.data.chunks_mut(x.cols) {
            for (o, bv) in row.iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        self.push(Op::AddRowBias(a, bias), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "add shape");
        let mut out = x.clone();
        out.add_assign(y);
        self.push(Op::Add(a, b), out)
    }

    pub fn sum(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        self.push(Op::Scale(a, s), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let kink = x.data.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
        let out = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|&v| v.max(0.0)).collect());
        self.push_kink(Op::Relu(a), out, kink)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let row = crate::features::softmax(x.row(r));
            out.data[r * x.cols..(r + 1) * x.cols].copy_from_slice(&row);
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(1, x.cols);
        for row in x.data.chunks(x.cols) {
            for (o, v) in out.data.iter_mut().zip(row) {
                *o += v;
            }
        }
        let n = x.rows as f64;
        out.data.iter_mut().for_each(|v| *v /= n);
        self.push(Op::MeanRows(a), out)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let out = Tensor::from_vec(len, x.cols, x.data[start * x.cols..(start + len) * x.cols].to_vec());
        self.push(Op::SliceRows(a, start), out)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * x.cols);
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        let out = Tensor::from_vec(idx.len(), x.cols, data);
        self.push(Op::GatherRows(a, idx.to_vec()), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows width");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::from_vec(rows, cols, data))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.rows, y.rows, "concat_cols height");
        let cols = x.cols + y.cols;
        let mut data = Vec::with_capacity(x.rows * cols);
        for r in 0..x.rows {
            data.extend_from_slice(x.row(r));
            data.extend_from_slice(y.row(r));
        }
        self.push(Op::ConcatCols(a, b), Tensor::from_vec(x.rows, cols, data))
    }

    /// Euclidean distances between the rows of `a` and the rows of `b`.
    pub fn pairwise_dist(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.cols, "pairwise_dist width");
        let mut out = Tensor::zeros(x.rows, y.rows);
        for i in 0..x.rows {
            for j in 0..y.rows {
                out.data[i * y.rows + j] = crate::features::euclidean(x.row(i), y.row(j));
            }
        }
        self.push(Op::PairwiseDist(a, b), out)
    }

    /// Expands an `n x n` matrix into `nt x nt` with constant `t x t` tiles.
    pub fn tile_expand(&mut self, a: Var, t: usize) -> Var {
        let x = self.value(a);
        let size = x.rows * t;
        let mut out = Tensor::zeros(size, x.cols * t);
        for g in 0..size {
            for h in 0..x.cols * t {
                out.data[g * out.cols + h] = x.at(g / t, h / t);
            }
        }
        self.push(Op::TileExpand(a, t), out)
    }

    /// `sqrt(sum (a - b)^2)` as a 1x1 tensor.
    pub fn frob_diff(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "frob_diff shape");
        let v = x.data.iter().zip(&y.data).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        self.push(Op::FrobDiff(a, b), Tensor::scalar(v))
    }

    /// Sum over anchor rows of `max(0, max_pos d - min_neg d + margin)`.
    /// `positive(i, j)` says whether column `j` shares row `i`'s identity.
    /// Rows lacking a positive or a negative contribute nothing.
    pub fn mined_hinge(&mut self, dist: Var, positive: impl Fn(usize, usize) -> bool, margin: f64) -> Var {
        let d = self.value(dist);
        let mut total = 0.0;
        let mut kink = f64::INFINITY;
        let mut picks = Vec::with_capacity(d.rows);
        for i in 0..d.rows {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            let (mut pos2, mut neg2) = (f64::NEG_INFINITY, f64::INFINITY);
            for j in 0..d.cols {
                let v = d.at(i, j);
                if positive(i, j) {
                    match pos {
                        Some(p) if v <= d.at(i, p) => pos2 = pos2.max(v),
                        Some(p) => {
                            pos2 = pos2.max(d.at(i, p));
                            pos = Some(j);
                        }
                        None => pos = Some(j),
                    }
                } else {
                    match neg {
                        Some(n) if v >= d.at(i, n) => neg2 = neg2.min(v),
                        Some(n) => {
                            neg2 = neg2.min(d.at(i, n));
                            neg = Some(j);
                        }
                        None => neg = Some(j),
                    }
                }
            }
            let pick = match (pos, neg) {
                (Some(p), Some(n)) => {
                    let arg = d.at(i, p) - d.at(i, n) + margin;
                    kink = kink.min(arg.abs());
                    if arg > 0.0 {
                        // ties only matter while the hinge is active
                        kink = kink.min(d.at(i, p) - pos2).min(neg2 - d.at(i, n));
                        total += arg;
                        Some((p, n))
                    } else {
                        None
                    }
                }
                _ => None,
            };
            picks.push(pick);
        }
        self.push_kink(Op::MinedHinge { dist, picks }, Tensor::scalar(total), kink)
    }

    /// Mean softmax cross-entropy of `logits` rows against class `labels`.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.rows, labels.len(), "softmax_ce rows");
        let mut total = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = z.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[l];
        }
        let v = total / labels.len() as f64;
        self.push(Op::SoftmaxCe(logits, labels.to_vec()), Tensor::scalar(v))
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let out = self.value(output);
        grads[output.0] = Some(Tensor::from_vec(out.rows, out.cols, vec![1.0; out.data.len()]));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let val = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    // dA = G B^T, dB = A^T G
                    let mut da = Tensor::zeros(x.rows, x.cols);
                    for i in 0..x.rows {
                        for k in 0..x.cols {
                            da.data[i * x.cols + k] = g.row(i).iter().zip(y.row(k)).map(|(p, q)| p * q).sum();
                        }
                    }
                    let mut db = Tensor::zeros(y.rows, y.cols);
                    for i in 0..x.rows {
                        for k in 0..x.cols {
                            let xv = x.data[i * x.cols + k];
                            if xv == 0.0 {
                                continue;
                            }
                            for (o, gv) in db.data[k * y.cols..(k + 1) * y.cols].iter_mut().zip(g.row(i)) {
                                *o += xv * gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    // out = A B^T: dA = G B, dB = G^T A
                    let mut da = Tensor::zeros(x.rows, x.cols);
                    let mut db = Tensor::zeros(y.rows, y.cols);
                    for i in 0..x.rows {
                        for j in 0..y.rows {
                            let gv = g.at(i, j);
                            if gv == 0.0 {
                                continue;
                            }
                            for c in 0..x.cols {
                                da.data[i * x.cols + c] += gv * y.at(j, c);
                                db.data[j * y.cols + c] += gv * x.at(i, c);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRowBias(a, bias) => {
                    let mut db = Tensor::zeros(1, g.cols);
                    for row in g.data.chunks(g.cols) {
                        for (o, v) in db.data.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *bias, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Scale(a, s) => {
                    let mut d = g;
                    d.data.iter_mut().for_each(|v| *v *= s);
                    accumulate(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut d = g;
                    for (dv, xv) in d.data.iter_mut().zip(&x.data) {
                        if *xv <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let mut d = Tensor::zeros(val.rows, val.cols);
                    for r in 0..val.rows {
                        let y = val.row(r);
                        let gr = g.row(r);
                        let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..val.cols {
                            d.data[r * val.cols + c] = y[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let n = x.rows as f64;
                    let mut d = Tensor::zeros(x.rows, x.cols);
                    for row in d.data.chunks_mut(x.cols) {
                        for (o, gv) in row.iter_mut().zip(&g.data) {
                            *o = gv / n;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SliceRows(a, start) => {
                    let x = self.value(*a);
                    let mut d = Tensor::zeros(x.rows, x.cols);
                    d.data[start * x.cols..(start + g.rows) * x.cols].copy_from_slice(&g.data);
                    accumulate(&mut grads, *a, d);
                }
                Op::GatherRows(a, idx) => {
                    let x = self.value(*a);
                    let mut d = Tensor::zeros(x.rows, x.cols);
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, gv) in d.data[i * x.cols..(i + 1) * x.cols].iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let t = self.value(p);
                        let n = t.rows * t.cols;
                        let d = Tensor::from_vec(t.rows, t.cols, g.data[offset..offset + n].to_vec());
                        offset += n;
                        accumulate(&mut grads, p, d);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let mut da = Tensor::zeros(x.rows, x.cols);
                    let mut db = Tensor::zeros(y.rows, y.cols);
                    for r in 0..x.rows {
                        let gr = g.row(r);
                        da.data[r * x.cols..(r + 1) * x.cols].copy_from_slice(&gr[..x.cols]);
                        db.data[r * y.cols..(r + 1) * y.cols].copy_from_slice(&gr[x.cols..]);
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::PairwiseDist(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let mut da = Tensor::zeros(x.rows, x.cols);
                    let mut db = Tensor::zeros(y.rows, y.cols);
                    for i in 0..x.rows {
                        for j in 0..y.rows {
                            let dist = val.at(i, j);
                            let gv = g.at(i, j);
                            if dist == 0.0 || gv == 0.0 {
                                continue;
                            }
                            let s = gv / dist;
                            for c in 0..x.cols {
                                let diff = x.at(i, c) - y.at(j, c);
                                da.data[i * x.cols + c] += s * diff;
                                db.data[j * y.cols + c] -= s * diff;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::TileExpand(a, t) => {
                    let x = self.value(*a);
                    let mut d = Tensor::zeros(x.rows, x.cols);
                    for gr in 0..g.rows {
                        for hc in 0..g.cols {
                            d.data[(gr / t) * x.cols + hc / t] += g.at(gr, hc);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::FrobDiff(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let f = val.item();
                    let mut da = Tensor::zeros(x.rows, x.cols);
                    let mut db = Tensor::zeros(y.rows, y.cols);
                    if f > 0.0 {
                        let s = g.item() / f;
                        for k in 0..x.data.len() {
                            let diff = x.data[k] - y.data[k];
                            da.data[k] = s * diff;
                            db.data[k] = -s * diff;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MinedHinge { dist, picks } => {
                    let d = self.value(*dist);
                    let mut dd = Tensor::zeros(d.rows, d.cols);
                    let gv = g.item();
                    for (i, pick) in picks.iter().enumerate() {
                        if let Some((p, n)) = pick {
                            dd.data[i * d.cols + p] += gv;
                            dd.data[i * d.cols + n] -= gv;
                        }
                    }
                    accumulate(&mut grads, *dist, dd);
                }
                Op::SoftmaxCe(logits, labels) => {
                    let z = self.value(*logits);
                    let n = labels.len() as f64;
                    let gv = g.item();
                    let mut d = Tensor::zeros(z.rows, z.cols);
                    for (r, &l) in labels.iter().enumerate() {
                        let p = crate::features::softmax(z.row(r));
                        for c in 0..z.cols {
                            let target = if c == l { 1.0 } else { 0.0 };
                            d.data[r * z.cols + c] = gv * (p[c] - target) / n;
                        }
                    }
                    accumulate(&mut grads, *logits, d);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, d: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf; zeros when the output does not depend on it.
    /// Interior-node gradients are consumed during the pass.
    pub fn of(&self, v: Var, like: &Tensor) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(like.rows, like.cols))
    }
}
