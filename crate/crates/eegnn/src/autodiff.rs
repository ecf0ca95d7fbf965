//! Reverse-mode automatic differentiation over dynamically shaped `f64` tensors.
//!
//! A [`Tape`] records primitive operations as they execute; [`Tape::backward`]
//! replays the recording once in reverse to accumulate gradients. The op set is
//! deliberately small: exactly what the model forward passes and losses need.
//! Everything runs in 64-bit so gradients can be validated against central
//! finite differences at tight tolerances.

use ndarray::{concatenate, Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

use crate::error::{Error, Result};

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    /// `x [.., n] + b [n]`, bias broadcast over leading axes.
    AddBias(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    AddConst(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    /// `a [m,k] . b [k,n]`.
    Matmul(Var, Var),
    /// `a [n,n] . x [B,n,k]`, shared left operand across the batch.
    BmmLeft(Var, Var),
    /// `x [B,m,k] . w [k,n]`, shared right operand across the batch.
    BmmRight(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Powf(Var, f64),
    /// Sum of all entries, producing a 0-d tensor.
    Sum(Var),
    /// Row sums of a matrix: `[m,n] -> [m]`.
    SumAxis1(Var),
    /// `out_ij = x_ij * s_i` for `x [m,n]`, `s [m]`.
    ScaleRows(Var, Var),
    /// `out_ij = x_ij * s_j` for `x [m,n]`, `s [n]`.
    ScaleCols(Var, Var),
    Reshape(Var),
    /// `x [B,m,k] -> [B,m]` picking index `i` on the last axis.
    SelectLast(Var, usize),
    /// Stack two matrices with equal column counts along axis 0.
    ConcatRows(Var, Var),
    /// Softmax over a 1-d tensor.
    SoftmaxVec(Var),
    /// `sum_m w_m * mats[m]` for a 1-d weight vector.
    MixMats(Var, Vec<Array2<f64>>),
    /// Mean cross-entropy of logits `[B,C]` against integer labels.
    CrossEntropyMean(Var, Vec<usize>),
    /// Mean KL(target || softmax(logits)) for constant target rows.
    KlDivMean(Var, Array2<f64>),
    /// Mean binary cross-entropy of logits `[N]` against 0/1 targets.
    BceLogitsMean(Var, Vec<f64>),
    /// Identity forward; backward multiplies the gradient by `-beta`.
    GradReverse(Var, f64),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zero tensor if `v` did not
    /// participate in the computation.
    pub fn wrt(&self, v: Var, shape: &[usize]) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn as2(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

fn as3(t: &Tensor) -> ndarray::ArrayView3<'_, f64> {
    t.view().into_dimensionality::<Ix3>().expect("rank-3 tensor")
}

fn as1(t: &Tensor) -> ndarray::ArrayView1<'_, f64> {
    t.view().into_dimensionality::<Ix1>().expect("rank-1 tensor")
}

/// Reshape that tolerates non-standard layouts by copying in logical order.
fn reshape_any(t: &Tensor, dims: &[usize]) -> Tensor {
    let flat: Vec<f64> = t.iter().copied().collect();
    ArrayD::from_shape_vec(IxDyn(dims), flat).expect("element count preserved by reshape")
}

fn softmax_rows(logits: &ndarray::ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - m).exp());
        let s: f64 = row.sum();
        row.mapv_inplace(|e| e / s);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        *t.iter().next().expect("scalar node")
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf2(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn leaf1(&mut self, value: Array1<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let bias = as1(self.value(b)).to_owned();
        let mut v = self.value(x).clone();
        let n = bias.len();
        debug_assert_eq!(*v.shape().last().expect("nonempty shape"), n);
        for mut lane in v.rows_mut() {
            lane += &bias;
        }
        self.push(v, Op::AddBias(x, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddConst(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a) * -1.0;
        self.push(v, Op::Neg(a))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = as2(self.value(a)).dot(&as2(self.value(b)));
        self.push(v.into_dyn(), Op::Matmul(a, b))
    }

    pub fn bmm_left(&mut self, a: Var, x: Var) -> Var {
        let am = as2(self.value(a)).to_owned();
        let xb = as3(self.value(x));
        let (bsz, m, k) = xb.dim();
        let mut out = ndarray::Array3::<f64>::zeros((bsz, m, k));
        for b in 0..bsz {
            out.index_axis_mut(Axis(0), b)
                .assign(&am.dot(&xb.index_axis(Axis(0), b)));
        }
        self.push(out.into_dyn(), Op::BmmLeft(a, x))
    }

    pub fn bmm_right(&mut self, x: Var, w: Var) -> Var {
        let wm = as2(self.value(w)).to_owned();
        let xb = as3(self.value(x));
        let (bsz, m, _k) = xb.dim();
        let n = wm.ncols();
        let mut out = ndarray::Array3::<f64>::zeros((bsz, m, n));
        for b in 0..bsz {
            out.index_axis_mut(Axis(0), b)
                .assign(&xb.index_axis(Axis(0), b).dot(&wm));
        }
        self.push(out.into_dyn(), Op::BmmRight(x, w))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).mapv(|x| x.powf(p));
        self.push(v, Op::Powf(a, p))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            Op::Sum(a),
        )
    }

    pub fn sum_axis1(&mut self, a: Var) -> Var {
        let v = as2(self.value(a)).sum_axis(Axis(1));
        self.push(v.into_dyn(), Op::SumAxis1(a))
    }

    pub fn scale_rows(&mut self, x: Var, s: Var) -> Var {
        let sv = as1(self.value(s)).to_owned();
        let xm = as2(self.value(x));
        let mut out = xm.to_owned();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| v * sv[i]);
        }
        self.push(out.into_dyn(), Op::ScaleRows(x, s))
    }

    pub fn scale_cols(&mut self, x: Var, s: Var) -> Var {
        let sv = as1(self.value(s)).to_owned();
        let xm = as2(self.value(x));
        let mut out = xm.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v *= sv[j];
            }
        }
        self.push(out.into_dyn(), Op::ScaleCols(x, s))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Var {
        let v = reshape_any(self.value(a), dims);
        self.push(v, Op::Reshape(a))
    }

    pub fn select_last(&mut self, a: Var, i: usize) -> Var {
        let v = as3(self.value(a)).index_axis(Axis(2), i).to_owned();
        self.push(v.into_dyn(), Op::SelectLast(a, i))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let v = concatenate(Axis(0), &[as2(self.value(a)), as2(self.value(b))])
            .expect("column counts match");
        self.push(v.into_dyn(), Op::ConcatRows(a, b))
    }

    pub fn softmax_vec(&mut self, a: Var) -> Var {
        let x = as1(self.value(a));
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = x.mapv(|z| (z - m).exp());
        let s: f64 = e.sum();
        self.push((e / s).into_dyn(), Op::SoftmaxVec(a))
    }

    pub fn mix_mats(&mut self, w: Var, mats: Vec<Array2<f64>>) -> Var {
        let wv = as1(self.value(w));
        debug_assert_eq!(wv.len(), mats.len());
        let n = mats[0].nrows();
        let mut out = Array2::<f64>::zeros((n, n));
        for (wm, m) in wv.iter().zip(mats.iter()) {
            out.scaled_add(*wm, m);
        }
        self.push(out.into_dyn(), Op::MixMats(w, mats))
    }

    /// Mean negative log softmax probability of the true class.
    ///
    /// Errors if a label is out of range for the logit width.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let z = as2(self.value(logits));
        let (bsz, c) = z.dim();
        if labels.len() != bsz {
            return Err(Error::Shape(format!(
                "{} labels for a batch of {}",
                labels.len(),
                bsz
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut total = 0.0;
        for (row, &y) in z.rows().into_iter().zip(labels.iter()) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let v = ArrayD::from_elem(IxDyn(&[]), total / bsz as f64);
        Ok(self.push(v, Op::CrossEntropyMean(logits, labels)))
    }

    /// Mean KL(targets || softmax(logits)); target rows are constants.
    pub fn kl_div_mean(&mut self, logits: Var, targets: Array2<f64>) -> Result<Var> {
        let z = as2(self.value(logits));
        if z.dim() != targets.dim() {
            return Err(Error::Shape(format!(
                "logits {:?} vs targets {:?}",
                z.dim(),
                targets.dim()
            )));
        }
        let mut total = 0.0;
        for (row, trow) in z.rows().into_iter().zip(targets.rows()) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            for (&zv, &t) in row.iter().zip(trow.iter()) {
                if t > 0.0 {
                    total += t * (t.ln() - (zv - lse));
                }
            }
        }
        let v = ArrayD::from_elem(IxDyn(&[]), total / z.nrows() as f64);
        Ok(self.push(v, Op::KlDivMean(logits, targets)))
    }

    /// Mean binary cross-entropy with logits, computed in the stable
    /// `softplus(z) - y*z` form.
    pub fn bce_logits_mean(&mut self, z: Var, targets: Vec<f64>) -> Result<Var> {
        let zv = as1(self.value(z));
        if zv.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} logits vs {} targets",
                zv.len(),
                targets.len()
            )));
        }
        let mut total = 0.0;
        for (&x, &y) in zv.iter().zip(targets.iter()) {
            let softplus = x.max(0.0) + (-x.abs()).exp().ln_1p();
            total += softplus - y * x;
        }
        let v = ArrayD::from_elem(IxDyn(&[]), total / zv.len() as f64);
        Ok(self.push(v, Op::BceLogitsMean(z, targets)))
    }

    /// Gradient-reversal layer: identity on values, `-beta` on gradients.
    pub fn grad_reverse(&mut self, a: Var, beta: f64) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::GradReverse(a, beta))
    }

    /// Accumulate gradients of `root` (a scalar node) with respect to every
    /// node on the tape.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), 1.0));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, delta: Tensor| {
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddBias(x, b) => {
                acc(grads, *x, g.clone());
                let n = self.nodes[b.0].value.len();
                let mut gb = Array1::<f64>::zeros(n);
                for lane in g.rows() {
                    gb += &lane;
                }
                acc(grads, *b, gb.into_dyn());
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g * &self.nodes[b.0].value);
                acc(grads, *b, g * &self.nodes[a.0].value);
            }
            Op::MulConst(a, c) => acc(grads, *a, g * c),
            Op::AddConst(a) => acc(grads, *a, g.clone()),
            Op::Scale(a, k) => acc(grads, *a, g * *k),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Neg(a) => acc(grads, *a, g * -1.0),
            Op::Matmul(a, b) => {
                let gm = as2(g);
                let am = as2(&self.nodes[a.0].value);
                let bm = as2(&self.nodes[b.0].value);
                acc(grads, *a, gm.dot(&bm.t()).into_dyn());
                acc(grads, *b, am.t().dot(&gm).into_dyn());
            }
            Op::BmmLeft(a, x) => {
                let gb = as3(g);
                let am = as2(&self.nodes[a.0].value);
                let xb = as3(&self.nodes[x.0].value);
                let (bsz, m, k) = xb.dim();
                let mut ga = Array2::<f64>::zeros((am.nrows(), am.ncols()));
                let mut gx = ndarray::Array3::<f64>::zeros((bsz, m, k));
                for b in 0..bsz {
                    let gslice = gb.index_axis(Axis(0), b);
                    ga += &gslice.dot(&xb.index_axis(Axis(0), b).t());
                    gx.index_axis_mut(Axis(0), b)
                        .assign(&am.t().dot(&gslice));
                }
                acc(grads, *a, ga.into_dyn());
                acc(grads, *x, gx.into_dyn());
            }
            Op::BmmRight(x, w) => {
                let gb = as3(g);
                let wm = as2(&self.nodes[w.0].value);
                let xb = as3(&self.nodes[x.0].value);
                let (bsz, m, k) = xb.dim();
                let mut gx = ndarray::Array3::<f64>::zeros((bsz, m, k));
                let mut gw = Array2::<f64>::zeros((wm.nrows(), wm.ncols()));
                for b in 0..bsz {
                    let gslice = gb.index_axis(Axis(0), b);
                    gx.index_axis_mut(Axis(0), b)
                        .assign(&gslice.dot(&wm.t()));
                    gw += &xb.index_axis(Axis(0), b).t().dot(&gslice);
                }
                acc(grads, *x, gx.into_dyn());
                acc(grads, *w, gw.into_dyn());
            }
            Op::Relu(a) => {
                let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(grads, *a, g * &mask);
            }
            Op::Sigmoid(a) => {
                let s = &self.nodes[i].value;
                acc(grads, *a, g * &(s * &s.mapv(|v| 1.0 - v)));
            }
            Op::Tanh(a) => {
                let t = &self.nodes[i].value;
                acc(grads, *a, g * &t.mapv(|v| 1.0 - v * v));
            }
            Op::Abs(a) => {
                let sign = self.nodes[a.0].value.mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                acc(grads, *a, g * &sign);
            }
            Op::Powf(a, p) => {
                let d = self.nodes[a.0].value.mapv(|x| p * x.powf(p - 1.0));
                acc(grads, *a, g * &d);
            }
            Op::Sum(a) => {
                let gs = *g.iter().next().expect("scalar gradient");
                acc(
                    grads,
                    *a,
                    ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gs),
                );
            }
            Op::SumAxis1(a) => {
                let gv = as1(g);
                let (m, n) = as2(&self.nodes[a.0].value).dim();
                let mut ga = Array2::<f64>::zeros((m, n));
                for (i_row, mut row) in ga.rows_mut().into_iter().enumerate() {
                    row.fill(gv[i_row]);
                }
                acc(grads, *a, ga.into_dyn());
            }
            Op::ScaleRows(x, s) => {
                let gm = as2(g);
                let xm = as2(&self.nodes[x.0].value);
                let sv = as1(&self.nodes[s.0].value);
                let mut gx = gm.to_owned();
                for (i_row, mut row) in gx.rows_mut().into_iter().enumerate() {
                    row.mapv_inplace(|v| v * sv[i_row]);
                }
                let gs: Array1<f64> = gm
                    .rows()
                    .into_iter()
                    .zip(xm.rows())
                    .map(|(gr, xr)| gr.dot(&xr))
                    .collect();
                acc(grads, *x, gx.into_dyn());
                acc(grads, *s, gs.into_dyn());
            }
            Op::ScaleCols(x, s) => {
                let gm = as2(g);
                let xm = as2(&self.nodes[x.0].value);
                let sv = as1(&self.nodes[s.0].value);
                let mut gx = gm.to_owned();
                for mut row in gx.rows_mut() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v *= sv[j];
                    }
                }
                let mut gs = Array1::<f64>::zeros(sv.len());
                for (gr, xr) in gm.rows().into_iter().zip(xm.rows()) {
                    for (j, (gv, xv)) in gr.iter().zip(xr.iter()).enumerate() {
                        gs[j] += gv * xv;
                    }
                }
                acc(grads, *x, gx.into_dyn());
                acc(grads, *s, gs.into_dyn());
            }
            Op::Reshape(a) => {
                let orig = self.nodes[a.0].value.shape().to_vec();
                acc(grads, *a, reshape_any(g, &orig));
            }
            Op::SelectLast(a, idx) => {
                let mut ga = ArrayD::<f64>::zeros(self.nodes[a.0].value.raw_dim());
                ga.view_mut()
                    .into_dimensionality::<Ix3>()
                    .expect("rank-3 tensor")
                    .index_axis_mut(Axis(2), *idx)
                    .assign(&as2(g));
                acc(grads, *a, ga);
            }
            Op::ConcatRows(a, b) => {
                let ra = as2(&self.nodes[a.0].value).nrows();
                let gm = as2(g);
                let ga = gm.slice(ndarray::s![..ra, ..]).to_owned();
                let gb = gm.slice(ndarray::s![ra.., ..]).to_owned();
                acc(grads, *a, ga.into_dyn());
                acc(grads, *b, gb.into_dyn());
            }
            Op::SoftmaxVec(a) => {
                let s = as1(&self.nodes[i].value);
                let gv = as1(g);
                let dot: f64 = gv.dot(&s);
                let ga: Array1<f64> = s
                    .iter()
                    .zip(gv.iter())
                    .map(|(&si, &gi)| si * (gi - dot))
                    .collect();
                acc(grads, *a, ga.into_dyn());
            }
            Op::MixMats(w, mats) => {
                let gm = as2(g);
                let gw: Array1<f64> = mats
                    .iter()
                    .map(|m| (&gm * &m.view()).sum())
                    .collect();
                acc(grads, *w, gw.into_dyn());
            }
            Op::CrossEntropyMean(logits, labels) => {
                let z = as2(&self.nodes[logits.0].value);
                let gs = *g.iter().next().expect("scalar gradient");
                let mut soft = softmax_rows(&z);
                for (b, &y) in labels.iter().enumerate() {
                    soft[[b, y]] -= 1.0;
                }
                soft.mapv_inplace(|v| v * gs / labels.len() as f64);
                acc(grads, *logits, soft.into_dyn());
            }
            Op::KlDivMean(logits, targets) => {
                let z = as2(&self.nodes[logits.0].value);
                let gs = *g.iter().next().expect("scalar gradient");
                let mut soft = softmax_rows(&z);
                soft -= targets;
                soft.mapv_inplace(|v| v * gs / z.nrows() as f64);
                acc(grads, *logits, soft.into_dyn());
            }
            Op::BceLogitsMean(z, targets) => {
                let zv = as1(&self.nodes[z.0].value);
                let gs = *g.iter().next().expect("scalar gradient");
                let n = zv.len() as f64;
                let gz: Array1<f64> = zv
                    .iter()
                    .zip(targets.iter())
                    .map(|(&x, &y)| gs * (1.0 / (1.0 + (-x).exp()) - y) / n)
                    .collect();
                acc(grads, *z, gz.into_dyn());
            }
            Op::GradReverse(a, beta) => {
                acc(grads, *a, g * (-beta));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array3};

    /// Central-difference gradient of `f` with respect to `x`, one entry at a time.
    fn numeric_grad(x: &Tensor, f: &mut dyn FnMut(&Tensor) -> f64) -> Tensor {
        let mut g = ArrayD::<f64>::zeros(x.raw_dim());
        let h = 1e-6;
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let orig = xp.as_slice_mut().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + h;
            let fp = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig - h;
            let fm = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!(
                ((x - y) / denom).abs() < tol,
                "gradient mismatch: {x} vs {y}"
            );
        }
    }

    /// A composite expression touching matmul, bmm, normalization-style
    /// scaling, activations and reductions, checked against finite differences.
    #[test]
    fn composite_expression_matches_finite_differences() {
        let a0 = arr2(&[[1.2, 0.4], [0.3, 2.0]]).into_dyn();
        let x0 = Array3::from_shape_vec((2, 2, 3), (0..12).map(|i| 0.1 * i as f64 + 0.05).collect())
            .unwrap()
            .into_dyn();
        let w0 = arr2(&[[0.5, -0.2], [0.1, 0.7], [-0.4, 0.3]]).into_dyn();

        let eval = |a: &Tensor, x: &Tensor, w: &Tensor| -> (f64, Tensor, Tensor, Tensor) {
            let mut t = Tape::new();
            let av = t.leaf(a.clone());
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let d = t.sum_axis1(av);
            let dabs = t.abs(d);
            let s = t.powf(dabs, -0.5);
            let ar = t.scale_rows(av, s);
            let ahat = t.scale_cols(ar, s);
            let h = t.bmm_left(ahat, xv);
            let hw = t.bmm_right(h, wv);
            let r = t.tanh(hw);
            let r2 = t.relu(r);
            let loss = t.sum(r2);
            let grads = t.backward(loss);
            (
                t.scalar_value(loss),
                grads.wrt(av, a.shape()),
                grads.wrt(xv, x.shape()),
                grads.wrt(wv, w.shape()),
            )
        };

        let (_, ga, gx, gw) = eval(&a0, &x0, &w0);
        let na = numeric_grad(&a0, &mut |a| eval(a, &x0, &w0).0);
        let nx = numeric_grad(&x0, &mut |x| eval(&a0, x, &w0).0);
        let nw = numeric_grad(&w0, &mut |w| eval(&a0, &x0, w).0);
        assert_close(&ga, &na, 1e-6);
        assert_close(&gx, &nx, 1e-6);
        assert_close(&gw, &nw, 1e-6);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let z0 = arr2(&[[0.2, -0.4, 1.1], [0.9, 0.3, -0.2]]).into_dyn();
        let labels = vec![2usize, 0usize];
        let eval = |z: &Tensor| -> (f64, Tensor) {
            let mut t = Tape::new();
            let zv = t.leaf(z.clone());
            let loss = t.cross_entropy_mean(zv, labels.clone()).unwrap();
            let grads = t.backward(loss);
            (t.scalar_value(loss), grads.wrt(zv, z.shape()))
        };
        let (_, g) = eval(&z0);
        let n = numeric_grad(&z0, &mut |z| eval(z).0);
        assert_close(&g, &n, 1e-6);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_n_classes() {
        let mut t = Tape::new();
        let z = t.leaf2(arr2(&[[0.0, 0.0], [0.0, 0.0]]));
        let loss = t.cross_entropy_mean(z, vec![0, 1]).unwrap();
        assert!((t.scalar_value(loss) - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_and_bce_gradients_match_finite_differences() {
        let z0 = arr2(&[[0.4, -0.6], [0.1, 0.9]]).into_dyn();
        let targets = arr2(&[[0.9, 0.1], [0.3, 0.7]]);
        let eval = |z: &Tensor| -> (f64, Tensor) {
            let mut t = Tape::new();
            let zv = t.leaf(z.clone());
            let loss = t.kl_div_mean(zv, targets.clone()).unwrap();
            let g = t.backward(loss);
            (t.scalar_value(loss), g.wrt(zv, z.shape()))
        };
        let (_, g) = eval(&z0);
        assert_close(&g, &numeric_grad(&z0, &mut |z| eval(z).0), 1e-6);

        let b0 = arr1(&[0.3, -1.2, 2.0]).into_dyn();
        let y = vec![1.0, 0.0, 1.0];
        let eval_b = |z: &Tensor| -> (f64, Tensor) {
            let mut t = Tape::new();
            let zv = t.leaf(z.clone());
            let loss = t.bce_logits_mean(zv, y.clone()).unwrap();
            let g = t.backward(loss);
            (t.scalar_value(loss), g.wrt(zv, z.shape()))
        };
        let (_, gb) = eval_b(&b0);
        assert_close(&gb, &numeric_grad(&b0, &mut |z| eval_b(z).0), 1e-6);
    }

    #[test]
    fn softmax_mix_and_gru_style_ops_match_finite_differences() {
        let w0 = arr1(&[0.2, -0.5, 0.9]).into_dyn();
        let mats = vec![
            arr2(&[[1.0, 0.0], [0.0, 1.0]]),
            arr2(&[[1.0, 1.0], [1.0, 1.0]]),
            arr2(&[[0.0, 2.0], [2.0, 0.0]]),
        ];
        let x0 = Array3::from_shape_vec((2, 2, 2), vec![0.3, -0.1, 0.8, 0.4, -0.6, 0.2, 0.9, 0.1])
            .unwrap()
            .into_dyn();

        let eval = |w: &Tensor, x: &Tensor| -> (f64, Tensor, Tensor) {
            let mut t = Tape::new();
            let wv = t.leaf(w.clone());
            let xv = t.leaf(x.clone());
            let sm = t.softmax_vec(wv);
            let mixed = t.mix_mats(sm, mats.clone());
            let h = t.bmm_left(mixed, xv);
            let step0 = t.select_last(h, 0);
            let step1 = t.select_last(h, 1);
            let gate = t.sigmoid(step0);
            let cand = t.tanh(step1);
            let prod = t.mul(gate, cand);
            let flat = t.reshape(prod, &[4, 1]);
            let rev = t.grad_reverse(flat, -1.0); // -beta = 1: plain pass-through
            let loss = t.sum(rev);
            let grads = t.backward(loss);
            (
                t.scalar_value(loss),
                grads.wrt(wv, w.shape()),
                grads.wrt(xv, x.shape()),
            )
        };
        let (_, gw, gx) = eval(&w0, &x0);
        assert_close(&gw, &numeric_grad(&w0, &mut |w| eval(w, &x0).0), 1e-6);
        assert_close(&gx, &numeric_grad(&x0, &mut |x| eval(&w0, x).0), 1e-6);
    }

    #[test]
    fn grad_reverse_scales_and_flips_gradient() {
        let x0 = arr1(&[1.0, -2.0]).into_dyn();
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let r = t.grad_reverse(x, 0.5);
        let loss = t.sum(r);
        let g = t.backward(loss).wrt(x, x0.shape());
        for v in g.iter() {
            assert!((v + 0.5).abs() < 1e-15);
        }
    }
}
