//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the node list is
//! already a topological order and the backward pass is a single reverse sweep.
//! Leaves created with [`Graph::constant`] never receive gradients; that is how
//! teacher outputs are kept out of every backward pass.

use crate::error::{Error, Result};
use crate::tensor::{col2im, gemm, im2col, ConvGeom, Tensor};

/// Lower clamp on probabilities entering a logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    NchwToRows {
        x: NodeId,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    MatMulNt {
        a: NodeId,
        b: NodeId,
    },
    AddBias {
        x: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    Sigmoid {
        x: NodeId,
    },
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
    },
    SoftmaxRows {
        x: NodeId,
    },
    Mse {
        x: NodeId,
        target: Tensor,
    },
    Bce {
        p: NodeId,
        target: Tensor,
        row_weight: Option<Vec<f64>>,
    },
    BceLogits {
        x: NodeId,
        target: Tensor,
        denom: f64,
    },
    L1 {
        x: NodeId,
        target: Tensor,
        denom: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by node; `None` for nodes not on a path to the loss.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// `x: [N, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::Shape(format!("conv2d input {xs:?} weight {ws:?}")));
        }
        if self.value(b).len() != ws[0] {
            return Err(Error::Shape(format!("conv2d bias for {} outputs", ws[0])));
        }
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        let (n, o) = (xs[0], ws[0]);
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let rows = geom.col_rows();
        let plane = ho * wo;
        let in_size = xs[1] * xs[2] * xs[3];
        let mut cols = vec![0.0; n * rows * plane];
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            let od = out.data_mut();
            for i in 0..n {
                let c = &mut cols[i * rows * plane..(i + 1) * rows * plane];
                im2col(&xv[i * in_size..(i + 1) * in_size], &geom, c);
                let dst = &mut od[i * o * plane..(i + 1) * o * plane];
                for (ch, bias) in bv.iter().enumerate() {
                    dst[ch * plane..(ch + 1) * plane]
                        .iter_mut()
                        .for_each(|v| *v = *bias);
                }
                gemm(o, rows, plane, wv, false, c, false, dst, true);
            }
        }
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            needs,
        ))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let needs = self.needs(&[x]);
        self.push(out, Op::LeakyRelu { x, slope }, needs)
    }

    /// `[N, C, H, W]` to `[N·H·W, C]`: one row per spatial cell, raster order per image.
    pub fn nchw_to_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("nchw_to_rows on {s:?}")));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * plane];
        for i in 0..n {
            for ch in 0..c {
                let sp = &src[(i * c + ch) * plane..][..plane];
                for (p, v) in sp.iter().enumerate() {
                    out[(i * plane + p) * c + ch] = *v;
                }
            }
        }
        let out = Tensor::from_vec(&[n * plane, c], out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::NchwToRows { x }, needs))
    }

    /// `a: [m, k] · b: [k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            out.data_mut(),
            false,
        );
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b }, needs))
    }

    /// `a: [m, k] · bᵀ` with `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Shape(format!("matmul_nt {sa:?} x {sb:?}ᵀ")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            out.data_mut(),
            false,
        );
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMulNt { a, b }, needs))
    }

    /// Adds `b: [n]` to every row of `x: [m, n]`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape();
        let n = self.value(b).len();
        if sx.len() != 2 || sx[1] != n {
            return Err(Error::Shape(format!("add_bias {sx:?} + [{n}]")));
        }
        let mut out = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(&bv) {
                *v += bb;
            }
        }
        let needs = self.needs(&[x, b]);
        Ok(self.push(out, Op::AddBias { x, b }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).map(|v| v * c);
        let needs = self.needs(&[x]);
        self.push(out, Op::Scale { x, c }, needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(sigmoid);
        let needs = self.needs(&[x]);
        self.push(out, Op::Sigmoid { x }, needs)
    }

    /// Rows of a 2-D tensor, in the order given (repeats allowed).
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("gather_rows on {s:?}")));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Shape(format!("row {bad} out of range {}", s[0])));
        }
        let out = self.value(x).select_outer(idx);
        let needs = self.needs(&[x]);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    /// Scales rows to unit L2 norm; zero rows stay zero.
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("normalize_rows on {s:?}")));
        }
        let cols = s[1];
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(s[0]);
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::NormalizeRows { x, norms }, needs))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("softmax_rows on {s:?}")));
        }
        let cols = s[1];
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::SoftmaxRows { x }, needs))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: NodeId, target: Tensor) -> Result<NodeId> {
        if self.value(x).shape() != target.shape() {
            return Err(Error::Shape(format!(
                "mse {:?} vs {:?}",
                self.value(x).shape(),
                target.shape()
            )));
        }
        let n = target.len().max(1) as f64;
        let v: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Mse { x, target }, needs))
    }

    /// Binary cross entropy between probabilities `p: [N, C]` and constant soft
    /// targets, averaged over all `N·C` entries. With `row_weight`, entry `(i, c)`
    /// is scaled by `row_weight[i]` (the average stays over `N·C`). Probabilities
    /// are clamped to `[PROB_EPS, 1 − PROB_EPS]` before the logarithms.
    pub fn bce(
        &mut self,
        p: NodeId,
        target: Tensor,
        row_weight: Option<Vec<f64>>,
    ) -> Result<NodeId> {
        let s = self.value(p).shape().to_vec();
        if s != target.shape() || s.len() != 2 {
            return Err(Error::Shape(format!("bce {:?} vs {:?}", s, target.shape())));
        }
        if let Some(w) = &row_weight {
            if w.len() != s[0] {
                return Err(Error::Shape(format!(
                    "bce weights {} rows {}",
                    w.len(),
                    s[0]
                )));
            }
        }
        let v = bce_value(self.value(p), &target, row_weight.as_deref());
        let needs = self.needs(&[p]);
        Ok(self.push(
            Tensor::scalar(v),
            Op::Bce {
                p,
                target,
                row_weight,
            },
            needs,
        ))
    }

    /// Numerically stable BCE on logits, summed and divided by `denom`.
    pub fn bce_logits(&mut self, x: NodeId, target: Tensor, denom: f64) -> Result<NodeId> {
        if self.value(x).shape() != target.shape() {
            return Err(Error::Shape(format!(
                "bce_logits {:?} vs {:?}",
                self.value(x).shape(),
                target.shape()
            )));
        }
        let v: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / denom;
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::BceLogits { x, target, denom }, needs))
    }

    /// Sum of absolute differences divided by `denom`.
    pub fn l1(&mut self, x: NodeId, target: Tensor, denom: f64) -> Result<NodeId> {
        if self.value(x).shape() != target.shape() {
            return Err(Error::Shape(format!(
                "l1 {:?} vs {:?}",
                self.value(x).shape(),
                target.shape()
            )));
        }
        let v: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / denom;
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::L1 { x, target, denom }, needs))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let want = |id: &NodeId| self.nodes[id.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gout);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    let xs = self.value(*x).shape();
                    let ws = self.value(*w).shape();
                    let (n, o) = (xs[0], ws[0]);
                    let plane = geom.out_height() * geom.out_width();
                    let rows = geom.col_rows();
                    let gd = gout.data();
                    if want(b) {
                        let mut gb = vec![0.0; o];
                        for i in 0..n {
                            for (ch, g) in gb.iter_mut().enumerate() {
                                *g += gd[(i * o + ch) * plane..][..plane].iter().sum::<f64>();
                            }
                        }
                        acc(&mut grads, *b, Tensor::from_vec(&[o], gb).unwrap());
                    }
                    if want(w) {
                        let mut gw = Tensor::zeros(ws);
                        for i in 0..n {
                            gemm(
                                o,
                                plane,
                                rows,
                                &gd[i * o * plane..(i + 1) * o * plane],
                                false,
                                &cols[i * rows * plane..(i + 1) * rows * plane],
                                true,
                                gw.data_mut(),
                                true,
                            );
                        }
                        acc(&mut grads, *w, gw);
                    }
                    if want(x) {
                        let mut gx = Tensor::zeros(xs);
                        let in_size = xs[1] * xs[2] * xs[3];
                        let mut gcols = vec![0.0; rows * plane];
                        let wv = self.value(*w).data();
                        for i in 0..n {
                            gemm(
                                rows,
                                o,
                                plane,
                                wv,
                                true,
                                &gd[i * o * plane..(i + 1) * o * plane],
                                false,
                                &mut gcols,
                                false,
                            );
                            col2im(
                                &gcols,
                                geom,
                                &mut gx.data_mut()[i * in_size..(i + 1) * in_size],
                            );
                        }
                        acc(&mut grads, *x, gx);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x).data();
                    let mut g = gout;
                    for (gv, &v) in g.data_mut().iter_mut().zip(xv) {
                        if v <= 0.0 {
                            *gv *= slope;
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::NchwToRows { x } => {
                    let s = self.value(*x).shape();
                    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                    let mut g = Tensor::zeros(s);
                    let gd = gout.data();
                    let dst = g.data_mut();
                    for i in 0..n {
                        for ch in 0..c {
                            for p in 0..plane {
                                dst[(i * c + ch) * plane + p] = gd[(i * plane + p) * c + ch];
                            }
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (self.value(*a).dim(0), self.value(*a).dim(1));
                    let n = self.value(*b).dim(1);
                    if want(a) {
                        let mut ga = Tensor::zeros(&[m, k]);
                        gemm(
                            m,
                            n,
                            k,
                            gout.data(),
                            false,
                            self.value(*b).data(),
                            true,
                            ga.data_mut(),
                            false,
                        );
                        acc(&mut grads, *a, ga);
                    }
                    if want(b) {
                        let mut gb = Tensor::zeros(&[k, n]);
                        gemm(
                            k,
                            m,
                            n,
                            self.value(*a).data(),
                            true,
                            gout.data(),
                            false,
                            gb.data_mut(),
                            false,
                        );
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::MatMulNt { a, b } => {
                    // out = a · bᵀ, a: [m, k], b: [n, k]
                    let (m, k) = (self.value(*a).dim(0), self.value(*a).dim(1));
                    let n = self.value(*b).dim(0);
                    if want(a) {
                        let mut ga = Tensor::zeros(&[m, k]);
                        gemm(
                            m,
                            n,
                            k,
                            gout.data(),
                            false,
                            self.value(*b).data(),
                            false,
                            ga.data_mut(),
                            false,
                        );
                        acc(&mut grads, *a, ga);
                    }
                    if want(b) {
                        let mut gb = Tensor::zeros(&[n, k]);
                        gemm(
                            n,
                            m,
                            k,
                            gout.data(),
                            true,
                            self.value(*a).data(),
                            false,
                            gb.data_mut(),
                            false,
                        );
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::AddBias { x, b } => {
                    if want(b) {
                        let n = self.value(*b).len();
                        let mut gb = vec![0.0; n];
                        for row in gout.data().chunks(n) {
                            for (g, v) in gb.iter_mut().zip(row) {
                                *g += v;
                            }
                        }
                        acc(
                            &mut grads,
                            *b,
                            Tensor::from_vec(self.value(*b).shape(), gb).unwrap(),
                        );
                    }
                    if want(x) {
                        acc(&mut grads, *x, gout);
                    }
                }
                Op::Add { a, b } => {
                    if want(a) {
                        acc(&mut grads, *a, gout.clone());
                    }
                    if want(b) {
                        acc(&mut grads, *b, gout);
                    }
                }
                Op::Scale { x, c } => {
                    acc(&mut grads, *x, gout.map(|v| v * c));
                }
                Op::Sigmoid { x } => {
                    let y = node.value.data();
                    let mut g = gout;
                    for (gv, &s) in g.data_mut().iter_mut().zip(y) {
                        *gv *= s * (1.0 - s);
                    }
                    acc(&mut grads, *x, g);
                }
                Op::GatherRows { x, idx } => {
                    let s = self.value(*x).shape();
                    let cols = s[1];
                    let mut g = Tensor::zeros(s);
                    let gd = gout.data();
                    let dst = g.data_mut();
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            dst[i * cols + c] += gd[r * cols + c];
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::NormalizeRows { x, norms } => {
                    let cols = self.value(*x).dim(1);
                    let y = node.value.data();
                    let mut g = gout;
                    for (r, gr) in g.data_mut().chunks_mut(cols.max(1)).enumerate() {
                        let n = norms[r];
                        if n <= 0.0 {
                            gr.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let yr = &y[r * cols..(r + 1) * cols];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = (*gv - yv * dot) / n;
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::SoftmaxRows { x } => {
                    let cols = self.value(*x).dim(1);
                    let y = node.value.data();
                    let mut g = gout;
                    for (r, gr) in g.data_mut().chunks_mut(cols.max(1)).enumerate() {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::Mse { x, target } => {
                    let go = gout.item();
                    let n = target.len().max(1) as f64;
                    let g = Tensor::from_vec(
                        target.shape(),
                        self.value(*x)
                            .data()
                            .iter()
                            .zip(target.data())
                            .map(|(a, b)| go * 2.0 * (a - b) / n)
                            .collect(),
                    )
                    .unwrap();
                    acc(&mut grads, *x, g);
                }
                Op::Bce {
                    p,
                    target,
                    row_weight,
                } => {
                    let go = gout.item();
                    let s = target.shape();
                    let (rows, cols) = (s[0], s[1]);
                    let n = (rows * cols).max(1) as f64;
                    let pv = self.value(*p).data();
                    let tv = target.data();
                    let mut g = Tensor::zeros(s);
                    for (i, gv) in g.data_mut().iter_mut().enumerate() {
                        let raw = pv[i];
                        // the clamp is flat outside its range
                        if raw < PROB_EPS || raw > 1.0 - PROB_EPS {
                            continue;
                        }
                        let w = row_weight.as_ref().map_or(1.0, |w| w[i / cols]);
                        let t = tv[i];
                        *gv = -go * w * (t / raw - (1.0 - t) / (1.0 - raw)) / n;
                    }
                    acc(&mut grads, *p, g);
                }
                Op::BceLogits { x, target, denom } => {
                    let go = gout.item();
                    let g = Tensor::from_vec(
                        target.shape(),
                        self.value(*x)
                            .data()
                            .iter()
                            .zip(target.data())
                            .map(|(&z, &t)| go * (sigmoid(z) - t) / denom)
                            .collect(),
                    )
                    .unwrap();
                    acc(&mut grads, *x, g);
                }
                Op::L1 { x, target, denom } => {
                    let go = gout.item();
                    let g = Tensor::from_vec(
                        target.shape(),
                        self.value(*x)
                            .data()
                            .iter()
                            .zip(target.data())
                            .map(|(a, b)| {
                                let d = a - b;
                                if d > 0.0 {
                                    go / denom
                                } else if d < 0.0 {
                                    -go / denom
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    )
                    .unwrap();
                    acc(&mut grads, *x, g);
                }
            }
        }
        Gradients { grads }
    }
}

/// Value of [`Graph::bce`] on plain tensors.
pub fn bce_value(p: &Tensor, target: &Tensor, row_weight: Option<&[f64]>) -> f64 {
    let cols = p.shape().get(1).copied().unwrap_or(1).max(1);
    let n = p.len().max(1) as f64;
    let mut total = 0.0;
    for (i, (&raw, &t)) in p.data().iter().zip(target.data()).enumerate() {
        let q = clamp_prob(raw);
        let w = row_weight.map_or(1.0, |w| w[i / cols]);
        total -= w * (t * q.ln() + (1.0 - t) * (1.0 - q).ln());
    }
    total / n
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}
