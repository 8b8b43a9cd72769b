use std::cell::RefCell;
use std::rc::Rc;

use super::{DenseArray, NumericsError};

/// Backward rule for an operation defined outside this module.
///
/// `inputs` are the parent values in the order they were recorded; the
/// returned vector must hold one gradient per input with matching shapes.
pub trait CustomBackward {
    fn backward(
        &self,
        inputs: &[&DenseArray],
        output: &DenseArray,
        grad_output: &DenseArray,
    ) -> Vec<DenseArray>;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    MatMul(usize, usize),
    Reshape(usize),
    Relu(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MaskMul(usize, Rc<Vec<f64>>),
    ClampMax(usize, f64),
    GraphMix(usize, Rc<DenseArray>),
    TemporalConv { x: usize, w: usize, stride: usize },
    MeanAxis1(usize),
    ConcatCols(usize, usize),
    CrossEntropy { logits: usize, probs: Vec<f64>, targets: Vec<usize> },
    SoftLogSumExp { logits: usize, seen: usize, weights: Vec<f64> },
    SquaredHinge(usize, f64),
    Mean(usize),
    Custom(Vec<usize>, Box<dyn CustomBackward>),
}

struct Node {
    value: Rc<DenseArray>,
    op: Op,
}

/// Dynamically recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<DenseArray> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&DenseArray> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<DenseArray> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

fn shape_err(msg: String) -> NumericsError {
    NumericsError::Argument(msg)
}

/// `c = a * b (+ beta * c)` for row-major operands, optionally transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // Stored a is [m,k] or (transposed) [k,m]; likewise for b.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are exactly the sizes implied by (m, k, n) and the
    // strides index only within them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value_of(&self, id: usize) -> Rc<DenseArray> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn push(&self, value: DenseArray, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an input or parameter.
    pub fn leaf(&self, value: DenseArray) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn add(&self, a: Var<'_>, b: Var<'_>) -> Result<Var<'_>, NumericsError> {
        let (va, vb) = (a.value(), b.value());
        if va.shape() != vb.shape() {
            return Err(shape_err(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = DenseArray::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a.id, b.id)))
    }

    pub fn mul(&self, a: Var<'_>, b: Var<'_>) -> Result<Var<'_>, NumericsError> {
        let (va, vb) = (a.value(), b.value());
        if va.shape() != vb.shape() {
            return Err(shape_err(format!(
                "mul: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = DenseArray::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a.id, b.id)))
    }

    /// Adds `bias` (length n) along the last axis of `x`.
    pub fn add_bias(&self, x: Var<'_>, bias: Var<'_>) -> Result<Var<'_>, NumericsError> {
        let (vx, vb) = (x.value(), bias.value());
        let n = *vx.shape().last().unwrap_or(&0);
        if vb.len() != n || n == 0 {
            return Err(shape_err(format!(
                "add_bias: bias of {} for last axis {n}",
                vb.len()
            )));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            row.iter_mut().zip(vb.data()).for_each(|(r, b)| *r += b);
        }
        let out = DenseArray::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(x.id, bias.id)))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, a: Var<'_>, b: Var<'_>) -> Result<Var<'_>, NumericsError> {
        let (va, vb) = (a.value(), b.value());
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut data, 0.0);
        let out = DenseArray::new(vec![m, n], data)?;
        Ok(self.push(out, Op::MatMul(a.id, b.id)))
    }

    pub fn reshape(&self, x: Var<'_>, shape: &[usize]) -> Result<Var<'_>, NumericsError> {
        let out = (*x.value()).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x.id)))
    }

    pub fn relu(&self, x: Var<'_>) -> Var<'_> {
        let vx = x.value();
        let data = vx.data().iter().map(|&v| v.max(0.0)).collect();
        let out = DenseArray::new(vx.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Relu(x.id))
    }

    pub fn scale(&self, x: Var<'_>, factor: f64) -> Var<'_> {
        let vx = x.value();
        let data = vx.data().iter().map(|&v| v * factor).collect();
        let out = DenseArray::new(vx.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(x.id, factor))
    }

    pub fn add_scalar(&self, x: Var<'_>, c: f64) -> Var<'_> {
        let vx = x.value();
        let data = vx.data().iter().map(|&v| v + c).collect();
        let out = DenseArray::new(vx.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::AddScalar(x.id))
    }

    /// Elementwise product with a constant multiplier (dropout masks).
    pub fn mask_mul(&self, x: Var<'_>, mask: Vec<f64>) -> Result<Var<'_>, NumericsError> {
        let vx = x.value();
        if mask.len() != vx.len() {
            return Err(shape_err(format!(
                "mask_mul: mask of {} for {} values",
                mask.len(),
                vx.len()
            )));
        }
        let data = vx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = DenseArray::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MaskMul(x.id, Rc::new(mask))))
    }

    /// Elementwise `min(x, c)`.
    pub fn clamp_max(&self, x: Var<'_>, c: f64) -> Var<'_> {
        let vx = x.value();
        let data = vx.data().iter().map(|&v| v.min(c)).collect();
        let out = DenseArray::new(vx.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::ClampMax(x.id, c))
    }

    /// Mixes `x` of shape `[N, T, V, C]` along the joint axis:
    /// `out[n,t,i,c] = sum_j adj[i][j] * x[n,t,j,c]`.
    pub fn graph_mix(
        &self,
        x: Var<'_>,
        adj: Rc<DenseArray>,
    ) -> Result<Var<'_>, NumericsError> {
        let vx = x.value();
        let s = vx.shape();
        if s.len() != 4 || adj.shape() != [s[2], s[2]] {
            return Err(shape_err(format!(
                "graph_mix: input {s:?} with adjacency {:?}",
                adj.shape()
            )));
        }
        let (v, c) = (s[2], s[3]);
        let mut data = vec![0.0; vx.len()];
        for (src, dst) in vx.data().chunks_exact(v * c).zip(data.chunks_exact_mut(v * c)) {
            mix_block(adj.data(), v, c, src, dst, false);
        }
        let out = DenseArray::new(s.to_vec(), data)?;
        Ok(self.push(out, Op::GraphMix(x.id, adj)))
    }

    /// Depthwise convolution along the frame axis of `x: [N, T, V, C]` with
    /// per-channel kernels `w: [C, K]`, symmetric zero padding `(K-1)/2`.
    pub fn temporal_conv(
        &self,
        x: Var<'_>,
        w: Var<'_>,
        stride: usize,
    ) -> Result<Var<'_>, NumericsError> {
        let (vx, vw) = (x.value(), w.value());
        let s = vx.shape();
        let sw = vw.shape();
        if s.len() != 4 || sw.len() != 2 || sw[0] != s[3] {
            return Err(shape_err(format!(
                "temporal_conv: input {s:?} with kernel {sw:?}"
            )));
        }
        let kernel = sw[1];
        if kernel % 2 == 0 {
            return Err(NumericsError::Argument(format!(
                "temporal kernel must be odd, got {kernel}"
            )));
        }
        if stride == 0 {
            return Err(NumericsError::Argument("temporal stride must be positive".into()));
        }
        let (n, t, v, c) = (s[0], s[1], s[2], s[3]);
        let t_out = t.div_ceil(stride);
        let pad = (kernel - 1) / 2;
        let wt = transpose(vw.data(), c, kernel);
        let frame = v * c;
        let mut data = vec![0.0; n * t_out * frame];
        for ni in 0..n {
            let xs = &vx.data()[ni * t * frame..(ni + 1) * t * frame];
            let ys = &mut data[ni * t_out * frame..(ni + 1) * t_out * frame];
            for to in 0..t_out {
                let y = &mut ys[to * frame..(to + 1) * frame];
                for kk in 0..kernel {
                    let Some(ti) = (to * stride + kk).checked_sub(pad).filter(|&ti| ti < t) else {
                        continue;
                    };
                    let xf = &xs[ti * frame..(ti + 1) * frame];
                    let wk = &wt[kk * c..(kk + 1) * c];
                    for (yv, xv) in y.chunks_exact_mut(c).zip(xf.chunks_exact(c)) {
                        for ((yo, xi), wi) in yv.iter_mut().zip(xv).zip(wk) {
                            *yo += wi * xi;
                        }
                    }
                }
            }
        }
        let out = DenseArray::new(vec![n, t_out, v, c], data)?;
        Ok(self.push(out, Op::TemporalConv { x: x.id, w: w.id, stride }))
    }

    /// Mean over the middle axis of a `[a, b, c]` array, giving `[a, c]`.
    pub fn mean_axis1(&self, x: Var<'_>) -> Result<Var<'_>, NumericsError> {
        let vx = x.value();
        let s = vx.shape();
        if s.len() != 3 || s[1] == 0 {
            return Err(shape_err(format!("mean_axis1: input {s:?}")));
        }
        let (a, b, c) = (s[0], s[1], s[2]);
        let mut data = vec![0.0; a * c];
        for (ai, out) in data.chunks_exact_mut(c).enumerate() {
            for row in vx.data()[ai * b * c..(ai + 1) * b * c].chunks_exact(c) {
                out.iter_mut().zip(row).for_each(|(o, r)| *o += r);
            }
            out.iter_mut().for_each(|o| *o /= b as f64);
        }
        let out = DenseArray::new(vec![a, c], data)?;
        Ok(self.push(out, Op::MeanAxis1(x.id)))
    }

    /// Concatenates two `[B, m]` and `[B, n]` arrays into `[B, m + n]`.
    pub fn concat_cols(&self, a: Var<'_>, b: Var<'_>) -> Result<Var<'_>, NumericsError> {
        let (va, vb) = (a.value(), b.value());
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(shape_err(format!("concat_cols: {sa:?} and {sb:?}")));
        }
        let (rows, m, n) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(rows * (m + n));
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * m..(r + 1) * m]);
            data.extend_from_slice(&vb.data()[r * n..(r + 1) * n]);
        }
        let out = DenseArray::new(vec![rows, m + n], data)?;
        Ok(self.push(out, Op::ConcatCols(a.id, b.id)))
    }

    /// Batch-mean softmax cross-entropy of `logits: [B, L]` against class ids.
    pub fn cross_entropy(
        &self,
        logits: Var<'_>,
        targets: &[usize],
    ) -> Result<Var<'_>, NumericsError> {
        let vl = logits.value();
        let s = vl.shape();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(shape_err(format!(
                "cross_entropy: logits {s:?} with {} targets",
                targets.len()
            )));
        }
        let (b, l) = (s[0], s[1]);
        let mut probs = Vec::with_capacity(b * l);
        let mut total = 0.0;
        for (row, &t) in vl.data().chunks_exact(l).zip(targets) {
            total += super::softmax_cross_entropy(row, t)?;
            probs.extend(super::softmax(row));
        }
        let out = DenseArray::scalar(total / b as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits: logits.id,
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Row-wise `epsilon * logsumexp(logits[.., ..seen] / epsilon)`, shape `[B]`.
    /// This is the negated free energy over the first `seen` slots.
    pub fn soft_logsumexp(
        &self,
        logits: Var<'_>,
        seen: usize,
        epsilon: f64,
    ) -> Result<Var<'_>, NumericsError> {
        let vl = logits.value();
        let s = vl.shape();
        if s.len() != 2 || seen == 0 || seen > s[1] {
            return Err(shape_err(format!(
                "soft_logsumexp: logits {s:?} over {seen} slots"
            )));
        }
        let (b, l) = (s[0], s[1]);
        let mut data = Vec::with_capacity(b);
        let mut weights = vec![0.0; b * l];
        for (row, w) in vl.data().chunks_exact(l).zip(weights.chunks_exact_mut(l)) {
            let head = &row[..seen];
            data.push(super::logsumexp(head, epsilon)?);
            let scaled: Vec<f64> = head.iter().map(|x| x / epsilon).collect();
            w[..seen].copy_from_slice(&super::softmax(&scaled));
        }
        let out = DenseArray::new(vec![b], data)?;
        Ok(self.push(
            out,
            Op::SoftLogSumExp {
                logits: logits.id,
                seen,
                weights,
            },
        ))
    }

    /// Elementwise `max(0, x - margin)^2`.
    pub fn squared_hinge(&self, x: Var<'_>, margin: f64) -> Var<'_> {
        let vx = x.value();
        let data = vx
            .data()
            .iter()
            .map(|&v| {
                let h = (v - margin).max(0.0);
                h * h
            })
            .collect();
        let out = DenseArray::new(vx.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::SquaredHinge(x.id, margin))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self, x: Var<'_>) -> Var<'_> {
        let vx = x.value();
        let out = DenseArray::scalar(vx.data().iter().sum::<f64>() / vx.len() as f64);
        self.push(out, Op::Mean(x.id))
    }

    /// Records an externally computed value with its own backward rule.
    pub fn custom<'a>(
        &'a self,
        inputs: &[Var<'a>],
        value: DenseArray,
        rule: Box<dyn CustomBackward>,
    ) -> Var<'a> {
        let ids = inputs.iter().map(|v| v.id).collect();
        self.push(value, Op::Custom(ids, rule))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, NumericsError> {
        let nodes = self.nodes.borrow();
        if !nodes[root.id].value.is_scalar() {
            return Err(NumericsError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<DenseArray>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(DenseArray::new(
            nodes[root.id].value.shape().to_vec(),
            vec![1.0],
        )?);

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let gd = g.data();
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, val(*a), *a, gd.to_vec());
                    accumulate(&mut grads, val(*b), *b, gd.to_vec());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let ga = gd.iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                    let gb = gd.iter().zip(va.data()).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads, va, *a, ga);
                    accumulate(&mut grads, vb, *b, gb);
                }
                Op::AddBias(x, bias) => {
                    let n = val(*bias).len();
                    let mut gb = vec![0.0; n];
                    for row in gd.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    accumulate(&mut grads, val(*x), *x, gd.to_vec());
                    accumulate(&mut grads, val(*bias), *bias, gb);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, vb.data(), true, &mut ga, 0.0);
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, gd, false, &mut gb, 0.0);
                    accumulate(&mut grads, va, *a, ga);
                    accumulate(&mut grads, vb, *b, gb);
                }
                Op::Reshape(x) => accumulate(&mut grads, val(*x), *x, gd.to_vec()),
                Op::Relu(x) => {
                    let vx = val(*x);
                    let gx = gd
                        .iter()
                        .zip(vx.data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, vx, *x, gx);
                }
                Op::Scale(x, f) => {
                    let gx = gd.iter().map(|g| g * f).collect();
                    accumulate(&mut grads, val(*x), *x, gx);
                }
                Op::AddScalar(x) => accumulate(&mut grads, val(*x), *x, gd.to_vec()),
                Op::MaskMul(x, mask) => {
                    let gx = gd.iter().zip(mask.iter()).map(|(g, m)| g * m).collect();
                    accumulate(&mut grads, val(*x), *x, gx);
                }
                Op::ClampMax(x, c) => {
                    let vx = val(*x);
                    let gx = gd
                        .iter()
                        .zip(vx.data())
                        .map(|(g, &v)| if v < *c { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, vx, *x, gx);
                }
                Op::GraphMix(x, adj) => {
                    let vx = val(*x);
                    let (v, c) = (vx.shape()[2], vx.shape()[3]);
                    let mut gx = vec![0.0; vx.len()];
                    for (src, dst) in gd.chunks_exact(v * c).zip(gx.chunks_exact_mut(v * c)) {
                        mix_block(adj.data(), v, c, src, dst, true);
                    }
                    accumulate(&mut grads, vx, *x, gx);
                }
                Op::TemporalConv { x, w, stride } => {
                    let (vx, vw) = (val(*x), val(*w));
                    let (gx, gw) = temporal_conv_backward(vx, vw, *stride, gd);
                    accumulate(&mut grads, vx, *x, gx);
                    accumulate(&mut grads, vw, *w, gw);
                }
                Op::MeanAxis1(x) => {
                    let vx = val(*x);
                    let (b, c) = (vx.shape()[1], vx.shape()[2]);
                    let mut gx = Vec::with_capacity(vx.len());
                    for row in gd.chunks_exact(c) {
                        for _ in 0..b {
                            gx.extend(row.iter().map(|g| g / b as f64));
                        }
                    }
                    accumulate(&mut grads, vx, *x, gx);
                }
                Op::ConcatCols(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (m, n) = (va.shape()[1], vb.shape()[1]);
                    let mut ga = Vec::with_capacity(va.len());
                    let mut gb = Vec::with_capacity(vb.len());
                    for row in gd.chunks_exact(m + n) {
                        ga.extend_from_slice(&row[..m]);
                        gb.extend_from_slice(&row[m..]);
                    }
                    accumulate(&mut grads, va, *a, ga);
                    accumulate(&mut grads, vb, *b, gb);
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    targets,
                } => {
                    let vl = val(*logits);
                    let (b, l) = (vl.shape()[0], vl.shape()[1]);
                    let scale = gd[0] / b as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * l + t] -= scale;
                    }
                    accumulate(&mut grads, vl, *logits, gl);
                }
                Op::SoftLogSumExp {
                    logits,
                    seen,
                    weights,
                } => {
                    let vl = val(*logits);
                    let l = vl.shape()[1];
                    let mut gl = weights.clone();
                    for (row, g) in gl.chunks_exact_mut(l).zip(gd) {
                        row[..*seen].iter_mut().for_each(|w| *w *= g);
                    }
                    accumulate(&mut grads, vl, *logits, gl);
                }
                Op::SquaredHinge(x, margin) => {
                    let vx = val(*x);
                    let gx = gd
                        .iter()
                        .zip(vx.data())
                        .map(|(g, &v)| g * 2.0 * (v - margin).max(0.0))
                        .collect();
                    accumulate(&mut grads, vx, *x, gx);
                }
                Op::Mean(x) => {
                    let vx = val(*x);
                    let gx = vec![gd[0] / vx.len() as f64; vx.len()];
                    accumulate(&mut grads, vx, *x, gx);
                }
                Op::Custom(inputs, rule) => {
                    let ins: Vec<&DenseArray> = inputs.iter().map(|&i| &**val(i)).collect();
                    let parts = rule.backward(&ins, &node.value, &g);
                    assert_eq!(parts.len(), inputs.len(), "custom backward arity");
                    for (&i, part) in inputs.iter().zip(parts) {
                        accumulate(&mut grads, val(i), i, part.into_data());
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<DenseArray>], like: &DenseArray, id: usize, g: Vec<f64>) {
    debug_assert_eq!(like.len(), g.len());
    match &mut grads[id] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(&g)
            .for_each(|(e, v)| *e += v),
        slot @ None => {
            *slot = Some(DenseArray::new(like.shape().to_vec(), g).expect("gradient shape"));
        }
    }
}

/// `dst = adj * src` (or `adj^T * src`) for one `[V, C]` block.
fn mix_block(adj: &[f64], v: usize, c: usize, src: &[f64], dst: &mut [f64], transpose: bool) {
    for i in 0..v {
        for j in 0..v {
            let a = if transpose { adj[j * v + i] } else { adj[i * v + j] };
            if a == 0.0 {
                continue;
            }
            let s = &src[j * c..(j + 1) * c];
            let d = &mut dst[i * c..(i + 1) * c];
            d.iter_mut().zip(s).for_each(|(d, s)| *d += a * s);
        }
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn temporal_conv_backward(
    x: &DenseArray,
    w: &DenseArray,
    stride: usize,
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (n, t, v, c) = (s[0], s[1], s[2], s[3]);
    let kernel = w.shape()[1];
    let t_out = t.div_ceil(stride);
    let pad = (kernel - 1) / 2;
    let frame = v * c;
    let wt = transpose(w.data(), c, kernel);
    let mut gx = vec![0.0; x.len()];
    // Accumulated as [K, C] then transposed back to [C, K].
    let mut gwt = vec![0.0; kernel * c];
    for ni in 0..n {
        let xs = &x.data()[ni * t * frame..(ni + 1) * t * frame];
        let gxs = &mut gx[ni * t * frame..(ni + 1) * t * frame];
        let gs = &grad[ni * t_out * frame..(ni + 1) * t_out * frame];
        for to in 0..t_out {
            let gy = &gs[to * frame..(to + 1) * frame];
            for kk in 0..kernel {
                let Some(ti) = (to * stride + kk).checked_sub(pad).filter(|&ti| ti < t) else {
                    continue;
                };
                let wk = &wt[kk * c..(kk + 1) * c];
                let gwk = &mut gwt[kk * c..(kk + 1) * c];
                let xf = &xs[ti * frame..(ti + 1) * frame];
                let gxf = &mut gxs[ti * frame..(ti + 1) * frame];
                for ((gyv, xv), gxv) in gy
                    .chunks_exact(c)
                    .zip(xf.chunks_exact(c))
                    .zip(gxf.chunks_exact_mut(c))
                {
                    for ci in 0..c {
                        gxv[ci] += wk[ci] * gyv[ci];
                        gwk[ci] += xv[ci] * gyv[ci];
                    }
                }
            }
        }
    }
    (gx, transpose(&gwt, kernel, c))
}
