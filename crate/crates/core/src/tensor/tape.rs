use super::kernels::{self, ConvGeom};
use super::{Elem, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`]. Ids grow in recording order,
/// so inputs always precede their consumers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Elem),
    Relu(Var),
    Abs(Var),
    Squash(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom, cols: Option<Vec<Elem>> },
    InstanceNorm { x: Var, gain: Var, shift: Var, xhat: Vec<Elem>, inv_std: Vec<Elem> },
    Upsample { x: Var, factor: usize },
    Gram(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of a forward computation. Build one per forward
/// pass; a tape is not shared between threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output, keyed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<Elem>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when `var` does not influence the output.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape matches node"),
            None => Tensor::zeros(shape),
        }
    }

    /// `true` when some path connects `var` to the output.
    pub fn is_connected(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: operand shapes differ ({:?} vs {:?})",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<Elem>>, len: usize) -> &mut Vec<Elem> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    /// Records a leaf that gradients are tracked for.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(Elem) -> Elem) -> Var {
        let src = &self.nodes[x.0].value;
        let out = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())
            .expect("elementwise map keeps shape");
        let rg = self.any_grad(&[x]);
        self.push(out, op, rg)
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, op: Op, f: impl Fn(Elem, Elem) -> Elem) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&mut self, x: Var, s: Elem) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    /// `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    /// `0.5·(tanh(x) + 1)`, mapping onto `(0, 1)`.
    pub fn squash(&mut self, x: Var) -> Var {
        self.unary(x, Op::Squash(x), |v| 0.5 * (v.tanh() + 1.0))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().map(|&v| v as f64).sum::<f64>();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s as Elem), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let s = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s as Elem), Op::Mean(x), rg)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Zero-padded cross-correlation of a C×H×W input with an O×C×Kh×Kw
    /// kernel. Output size is `⌊(H + 2·pad − Kh) / stride⌋ + 1`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let k = &self.nodes[kernel.0].value;
        let b = &self.nodes[bias.0].value;
        let (c, h, w) = x.chw()?;
        let [o, kc, kh, kw] = k.shape()[..] else {
            return Err(Error::shape(format!("conv2d: kernel must be O×C×Kh×Kw, got {:?}", k.shape())));
        };
        if kc != c {
            return Err(Error::shape(format!(
                "conv2d: input has {c} channels but kernel expects {kc}"
            )));
        }
        if b.shape() != [o] {
            return Err(Error::shape(format!("conv2d: bias must be [{o}], got {:?}", b.shape())));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Config(format!(
                "conv2d: kernel {kh}×{kw} does not fit {h}×{w} input with pad {pad}"
            )));
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let keep_cols = self.nodes[kernel.0].requires_grad;
        let (out, cols) = kernels::conv2d_forward(&geom, x.data(), k.data(), b.data(), keep_cols);
        let out = Tensor::new(vec![o, geom.ho, geom.wo], out)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(out, Op::Conv2d { input, kernel, bias, geom, cols }, rg))
    }

    /// Per-channel normalization over spatial positions followed by an
    /// affine `gain`/`shift`.
    pub fn instance_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (c, h, w) = t.chw()?;
        for (name, v) in [("gain", gain), ("shift", shift)] {
            let s = self.nodes[v.0].value.shape();
            if s != [c] {
                return Err(Error::shape(format!("instance_norm: {name} must be [{c}], got {s:?}")));
            }
        }
        let (out, xhat, inv_std) = kernels::instance_norm_forward(
            t.data(),
            c,
            self.nodes[gain.0].value.data(),
            self.nodes[shift.0].value.data(),
            eps,
        );
        let out = Tensor::new(vec![c, h, w], out)?;
        let rg = self.any_grad(&[x, gain, shift]);
        let (xhat, inv_std) = if rg { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(out, Op::InstanceNorm { x, gain, shift, xhat, inv_std }, rg))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Config("upsample factor must be positive".into()));
        }
        let t = &self.nodes[x.0].value;
        let (c, h, w) = t.chw()?;
        let out = kernels::upsample_forward(t.data(), c, h, w, factor);
        let out = Tensor::new(vec![c, h * factor, w * factor], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Upsample { x, factor }, rg))
    }

    /// Channel Gram matrix `G[i][j] = Σ F[i]·F[j] / (C·H·W)`.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (c, h, w) = t.chw()?;
        let g = kernels::gram_forward(t.data(), c, h * w);
        let out = Tensor::new(vec![c, c], g)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Gram(x), rg))
    }

    /// Sign pattern of every relu/abs input on the tape. Two evaluations
    /// with equal patterns lie in the same smooth piece of the function.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) | Op::Abs(x) => {
                    pattern.extend(self.nodes[x.0].value.data().iter().map(|&v| v > 0.0))
                }
                _ => {}
            }
        }
        pattern
    }

    /// Reverse sweep from a scalar `output`. Every node is visited at most
    /// once, in reverse recording order.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if !out.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<Elem>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[Elem], grads: &mut [Option<Vec<Elem>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        // Applies `f(index, upstream)` into the gradient slot of `v`.
        let elementwise = |v: Var, grads: &mut [Option<Vec<Elem>>], f: &dyn Fn(usize, Elem) -> Elem| {
            if wants(v) {
                let dst = accumulate(&mut grads[v.0], g.len());
                for (i, (d, &u)) in dst.iter_mut().zip(g).enumerate() {
                    *d += f(i, u);
                }
            }
        };
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                elementwise(a, grads, &|_, u| u);
                elementwise(b, grads, &|_, u| u);
            }
            Op::Sub(a, b) => {
                elementwise(a, grads, &|_, u| u);
                elementwise(b, grads, &|_, u| -u);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                elementwise(a, grads, &|i, u| u * vb[i]);
                elementwise(b, grads, &|i, u| u * va[i]);
            }
            Op::Scale(x, s) => elementwise(x, grads, &|_, u| u * s),
            Op::Relu(x) => {
                let vx = val(x);
                elementwise(x, grads, &|i, u| if vx[i] > 0.0 { u } else { 0.0 });
            }
            Op::Abs(x) => {
                let vx = val(x);
                elementwise(x, grads, &|i, u| {
                    if vx[i] > 0.0 {
                        u
                    } else if vx[i] < 0.0 {
                        -u
                    } else {
                        0.0
                    }
                });
            }
            Op::Squash(x) => {
                let y = node.value.data();
                elementwise(x, grads, &|i, u| u * 2.0 * y[i] * (1.0 - y[i]));
            }
            Op::Square(x) => {
                let vx = val(x);
                elementwise(x, grads, &|i, u| u * 2.0 * vx[i]);
            }
            Op::Sum(x) => {
                if wants(x) {
                    let n = self.nodes[x.0].value.len();
                    accumulate(&mut grads[x.0], n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if wants(x) {
                    let n = self.nodes[x.0].value.len();
                    let u = g[0] / n as Elem;
                    accumulate(&mut grads[x.0], n).iter_mut().for_each(|d| *d += u);
                }
            }
            Op::Conv2d { input, kernel, bias, geom, ref cols } => {
                let (gi, gk, gb) = split3(grads, input, kernel, bias, |v| (wants(v), self.nodes[v.0].value.len()));
                kernels::conv2d_backward(&geom, val(input), val(kernel), cols.as_deref(), g, gi, gk, gb);
            }
            Op::InstanceNorm { x, gain, shift, ref xhat, ref inv_std } => {
                let (gx, gg, gs) = split3(grads, x, gain, shift, |v| (wants(v), self.nodes[v.0].value.len()));
                kernels::instance_norm_backward(g, xhat, inv_std, val(gain), gx, gg, gs);
            }
            Op::Upsample { x, factor } => {
                if wants(x) {
                    let (c, h, w) = self.nodes[x.0].value.chw().expect("recorded as C×H×W");
                    let dst = accumulate(&mut grads[x.0], c * h * w);
                    kernels::upsample_backward(g, c, h, w, factor, dst);
                }
            }
            Op::Gram(x) => {
                if wants(x) {
                    let (c, h, w) = self.nodes[x.0].value.chw().expect("recorded as C×H×W");
                    let dst = accumulate(&mut grads[x.0], c * h * w);
                    kernels::gram_backward(val(x), c, h * w, g, dst);
                }
            }
        }
    }
}

/// Disjoint mutable gradient slots for three distinct nodes; `None` for
/// nodes that do not track gradients.
fn split3<'a>(
    grads: &'a mut [Option<Vec<Elem>>],
    a: Var,
    b: Var,
    c: Var,
    info: impl Fn(Var) -> (bool, usize),
) -> (Option<&'a mut [Elem]>, Option<&'a mut [Elem]>, Option<&'a mut [Elem]>) {
    assert!(a != b && b != c && a != c, "operands must be distinct nodes");
    for v in [a, b, c] {
        let (wants, len) = info(v);
        if wants {
            accumulate(&mut grads[v.0], len);
        }
    }
    let mut slots: [Option<&'a mut [Elem]>; 3] = [None, None, None];
    let order = [a.0, b.0, c.0];
    for (i, slot) in grads.iter_mut().enumerate() {
        if let Some(pos) = order.iter().position(|&o| o == i) {
            if info(Var(i)).0 {
                slots[pos] = slot.as_deref_mut();
            }
        }
    }
    let [x, y, z] = slots;
    (x, y, z)
}
