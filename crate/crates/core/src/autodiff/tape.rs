use super::gemm::{gemm_acc, gemm_nt_acc, gemm_set, transpose};
use super::tensor::{image_dims, image_shape};
use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial padding applied before a convolution.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero(usize),
    Reflect(usize),
}

impl Padding {
    fn amount(self) -> usize {
        match self {
            Padding::Zero(p) | Padding::Reflect(p) => p,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        padding: Padding,
        stride: usize,
        padded: Vec<f64>,
    },
    AvgPool(Var, usize),
    Upsample(Var, usize),
    GlobalAvgPool(Var),
    Mean(Var),
    Sum(Var),
    Reshape(Var),
    ConcatChannels(Vec<Var>),
    LogSoftmax(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Every operation appends one node whose inputs are earlier nodes, so the
/// graph is acyclic and [`Tape::backward`] is a single reverse sweep. A tape is
/// built fresh for every forward pass and may be swept backward any number of
/// times from different scalar roots.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::from_parts(shape.clone(), g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    /// Raw gradient slice, or `None` when no gradient reached `var`.
    pub fn data(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<(), AutodiffError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite { op })
    }
}

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var, AutodiffError> {
        check_finite(name, &data)?;
        Ok(self.push(Tensor::from_parts(shape, data), op, requires_grad))
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked(name, ta.shape().to_vec(), data, op, rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, AutodiffError> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let rg = self.requires_grad(a);
        self.push_checked(name, ta.shape().to_vec(), data, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("sigmoid", a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "matmul",
                    left: sa,
                    right: sb,
                })
            }
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = da[i * k + p];
                for (o, &y) in row.iter_mut().zip(&db[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked("matmul", vec![m, n], out, Op::MatMul(a, b), rg)
    }

    /// Adds a length-`n` bias to every row of an `[m×n]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        let n = match (sx.as_slice(), sb.as_slice()) {
            ([_, n], [nb]) if n == nb => *n,
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "add_row_bias",
                    left: sx,
                    right: sb,
                })
            }
        };
        let db = self.value(bias).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + db[i % n])
            .collect();
        let rg = self.requires_grad(x) || self.requires_grad(bias);
        self.push_checked("add_row_bias", sx, data, Op::AddRowBias(x, bias), rg)
    }

    /// Cross-correlation of a `C_in×H×W` (or batched `N×C_in×H×W`) input with a
    /// `C_out×C_in×k×k` kernel plus per-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        padding: Padding,
        stride: usize,
    ) -> Result<Var, AutodiffError> {
        const OP: &str = "conv2d";
        let in_shape = self.shape(input).to_vec();
        let (n, ci, h, w) = image_dims(OP, &in_shape)?;
        let (co, k) = match *self.shape(kernel) {
            [co, ci2, k1, k2] if ci2 == ci && k1 == k2 => (co, k1),
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: OP,
                    left: in_shape,
                    right: self.shape(kernel).to_vec(),
                })
            }
        };
        if self.shape(bias) != [co] {
            return Err(AutodiffError::ShapeMismatch {
                op: OP,
                left: vec![co],
                right: self.shape(bias).to_vec(),
            });
        }
        if k % 2 == 0 {
            return Err(AutodiffError::invalid(OP, format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(AutodiffError::invalid(OP, "stride must be positive"));
        }
        let p = padding.amount();
        if matches!(padding, Padding::Reflect(_)) && (p >= h || p >= w) {
            return Err(AutodiffError::invalid(
                OP,
                "reflect padding must be smaller than the image",
            ));
        }
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        if hp < k || wp < k {
            return Err(AutodiffError::invalid(OP, "padded input smaller than kernel"));
        }
        if (hp - k) % stride != 0 || (wp - k) % stride != 0 {
            return Err(AutodiffError::invalid(
                OP,
                "output size is not an integer for this stride",
            ));
        }
        let (ho, wo) = ((hp - k) / stride + 1, (wp - k) / stride + 1);

        let x = self.value(input).data();
        let mut padded = vec![0.0; n * ci * hp * wp];
        for plane in 0..n * ci {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let dst = &mut padded[plane * hp * wp..(plane + 1) * hp * wp];
            for py in 0..hp {
                let sy = py as isize - p as isize;
                let row_src = match padding {
                    Padding::Zero(_) if sy < 0 || sy >= h as isize => continue,
                    _ => reflect_index(sy, h),
                };
                for px in 0..wp {
                    let sx = px as isize - p as isize;
                    dst[py * wp + px] = match padding {
                        Padding::Zero(_) if sx < 0 || sx >= w as isize => 0.0,
                        _ => src[row_src * w + reflect_index(sx, w)],
                    };
                }
            }
        }

        let geom = ConvGeometry {
            ci,
            hp,
            wp,
            k,
            stride,
            ho,
            wo,
        };
        let (rk, npix) = (geom.taps(), ho * wo);
        let kd = self.value(kernel).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; n * co * npix];
        let mut cols = vec![0.0; rk * npix];
        for b in 0..n {
            geom.im2col(&padded[b * ci * hp * wp..(b + 1) * ci * hp * wp], &mut cols);
            let out_b = &mut out[b * co * npix..(b + 1) * co * npix];
            for (o, row) in out_b.chunks_exact_mut(npix).enumerate() {
                row.fill(bd[o]);
            }
            gemm_acc(co, rk, npix, kd, &cols, out_b);
        }
        let rg = self.requires_grad(input) || self.requires_grad(kernel) || self.requires_grad(bias);
        let shape = image_shape(&in_shape, n, co, ho, wo);
        self.push_checked(
            OP,
            shape,
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
                stride,
                padded,
            },
            rg,
        )
    }

    /// Averages non-overlapping `factor×factor` blocks.
    pub fn avgpool(&mut self, input: Var, factor: usize) -> Result<Var, AutodiffError> {
        const OP: &str = "avgpool";
        let shape = self.shape(input).to_vec();
        let (n, c, h, w) = image_dims(OP, &shape)?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(AutodiffError::invalid(
                OP,
                format!("{h}×{w} is not divisible by factor {factor}"),
            ));
        }
        let (ho, wo) = (h / factor, w / factor);
        let inv = 1.0 / (factor * factor) as f64;
        let x = self.value(input).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            let src = &x[plane * h * w..];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for y in 0..h {
                for xx in 0..w {
                    dst[(y / factor) * wo + xx / factor] += src[y * w + xx];
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.requires_grad(input);
        self.push_checked(
            OP,
            image_shape(&shape, n, c, ho, wo),
            out,
            Op::AvgPool(input, factor),
            rg,
        )
    }

    /// Replicates every pixel into a `factor×factor` block.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var, AutodiffError> {
        const OP: &str = "upsample_nearest";
        let shape = self.shape(input).to_vec();
        let (n, c, h, w) = image_dims(OP, &shape)?;
        if factor == 0 {
            return Err(AutodiffError::invalid(OP, "factor must be positive"));
        }
        let (ho, wo) = (h * factor, w * factor);
        let x = self.value(input).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            let src = &x[plane * h * w..];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = src[(y / factor) * w + xx / factor];
                }
            }
        }
        let rg = self.requires_grad(input);
        self.push_checked(
            OP,
            image_shape(&shape, n, c, ho, wo),
            out,
            Op::Upsample(input, factor),
            rg,
        )
    }

    /// Mean over H×W per channel; output is `N×C×1×1` (or `C×1×1`).
    pub fn global_avgpool(&mut self, input: Var) -> Result<Var, AutodiffError> {
        const OP: &str = "global_avgpool";
        let shape = self.shape(input).to_vec();
        let (n, c, h, w) = image_dims(OP, &shape)?;
        let x = self.value(input).data();
        let inv = 1.0 / (h * w) as f64;
        let out = (0..n * c)
            .map(|plane| x[plane * h * w..(plane + 1) * h * w].iter().sum::<f64>() * inv)
            .collect();
        let rg = self.requires_grad(input);
        self.push_checked(OP, image_shape(&shape, n, c, 1, 1), out, Op::GlobalAvgPool(input), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.requires_grad(a);
        self.push_checked("mean", vec![], vec![m], Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.value(a).data().iter().sum::<f64>();
        let rg = self.requires_grad(a);
        self.push_checked("sum", vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let n: usize = shape.iter().product();
        if n != t.numel() || shape.contains(&0) {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                left: t.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let data = t.data().to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape(a), rg))
    }

    /// Concatenates images along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var, AutodiffError> {
        const OP: &str = "concat_channels";
        let first = *inputs.first().ok_or_else(|| AutodiffError::invalid(OP, "no inputs"))?;
        let like = self.shape(first).to_vec();
        let (n, _, h, w) = image_dims(OP, &like)?;
        let mut total_c = 0;
        for &v in inputs {
            let s = self.shape(v);
            let (n2, c2, h2, w2) = image_dims(OP, s)?;
            if s.len() != like.len() || (n2, h2, w2) != (n, h, w) {
                return Err(AutodiffError::ShapeMismatch {
                    op: OP,
                    left: like,
                    right: s.to_vec(),
                });
            }
            total_c += c2;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let c = t.numel() / (n * plane);
                out.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(
            Tensor::from_parts(image_shape(&like, n, total_c, h, w), out),
            Op::ConcatChannels(inputs.to_vec()),
            rg,
        ))
    }

    /// Numerically stabilized log-softmax along `axis`.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        const OP: &str = "log_softmax";
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::invalid(
                OP,
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let len = shape[axis];
        if len < 2 {
            return Err(AutodiffError::invalid(OP, "need at least two classes"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |j: usize| base + j * inner;
                let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = (0..len).map(|j| (x[idx(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[idx(j)] = x[idx(j)] - max - lse;
                }
            }
        }
        let rg = self.requires_grad(a);
        self.push_checked(OP, shape, out, Op::LogSoftmax(a, axis), rg)
    }

    /// Sign pattern of every relu/abs input on the tape. Two evaluations with
    /// equal patterns lie on the same smooth piece of the function.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) | Op::Abs(a) => {
                    pattern.extend(self.nodes[a.0].value.data().iter().map(|&v| v > 0.0));
                    if matches!(node.op, Op::Abs(_)) {
                        pattern.extend(self.nodes[a.0].value.data().iter().map(|&v| v < 0.0));
                    }
                }
                _ => {}
            }
        }
        pattern
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let len = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(a) {
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s)
                    });
                }
                if rg(b) {
                    accumulate(&mut grads[b.0], g.len(), |gb| {
                        gb.iter_mut().zip(g).for_each(|(d, &s)| *d += sign * s)
                    });
                }
            }
            &Op::Mul(a, b) => {
                if rg(a) {
                    let vb = val(b);
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        for ((d, &s), &y) in ga.iter_mut().zip(g).zip(vb) {
                            *d += s * y;
                        }
                    });
                }
                if rg(b) {
                    let va = val(a);
                    accumulate(&mut grads[b.0], g.len(), |gb| {
                        for ((d, &s), &x) in gb.iter_mut().zip(g).zip(va) {
                            *d += s * x;
                        }
                    });
                }
            }
            &Op::Scale(a, c) => accumulate(&mut grads[a.0], g.len(), |ga| {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += c * s)
            }),
            &Op::AddScalar(a) | &Op::Reshape(a) => accumulate(&mut grads[a.0], g.len(), |ga| {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s)
            }),
            &Op::Relu(a) => {
                let x = val(a);
                accumulate(&mut grads[a.0], g.len(), |ga| {
                    for ((d, &s), &xi) in ga.iter_mut().zip(g).zip(x) {
                        if xi > 0.0 {
                            *d += s;
                        }
                    }
                })
            }
            &Op::Abs(a) => {
                let x = val(a);
                accumulate(&mut grads[a.0], g.len(), |ga| {
                    for ((d, &s), &xi) in ga.iter_mut().zip(g).zip(x) {
                        if xi > 0.0 {
                            *d += s;
                        } else if xi < 0.0 {
                            *d -= s;
                        }
                    }
                })
            }
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                accumulate(&mut grads[a.0], g.len(), |ga| {
                    for ((d, &s), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *d += s * yi * (1.0 - yi);
                    }
                })
            }
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if rg(a) {
                    let vb = val(b);
                    accumulate(&mut grads[a.0], m * k, |ga| {
                        for i in 0..m {
                            for p in 0..k {
                                let row_b = &vb[p * n..(p + 1) * n];
                                let row_g = &g[i * n..(i + 1) * n];
                                ga[i * k + p] += row_g.iter().zip(row_b).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                }
                if rg(b) {
                    let va = val(a);
                    accumulate(&mut grads[b.0], k * n, |gb| {
                        for i in 0..m {
                            for p in 0..k {
                                let x = va[i * k + p];
                                for (d, &s) in gb[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                    *d += x * s;
                                }
                            }
                        }
                    });
                }
            }
            &Op::AddRowBias(x, bias) => {
                if rg(x) {
                    accumulate(&mut grads[x.0], g.len(), |gx| {
                        gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s)
                    });
                }
                if rg(bias) {
                    let n = len(bias);
                    accumulate(&mut grads[bias.0], n, |gb| {
                        for (i, &s) in g.iter().enumerate() {
                            gb[i % n] += s;
                        }
                    });
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
                stride,
                padded,
            } => self.conv2d_backward(node, g, *input, *kernel, *bias, *padding, *stride, padded, grads),
            &Op::AvgPool(a, f) => {
                let (n, c, h, w) = image_dims("avgpool", self.nodes[a.0].value.shape()).expect("validated");
                let (ho, wo) = (h / f, w / f);
                let inv = 1.0 / (f * f) as f64;
                accumulate(&mut grads[a.0], n * c * h * w, |ga| {
                    for plane in 0..n * c {
                        for y in 0..h {
                            for x in 0..w {
                                ga[plane * h * w + y * w + x] += g[plane * ho * wo + (y / f) * wo + x / f] * inv;
                            }
                        }
                    }
                });
            }
            &Op::Upsample(a, f) => {
                let (n, c, h, w) = image_dims("upsample", self.nodes[a.0].value.shape()).expect("validated");
                let (ho, wo) = (h * f, w * f);
                accumulate(&mut grads[a.0], n * c * h * w, |ga| {
                    for plane in 0..n * c {
                        for y in 0..ho {
                            for x in 0..wo {
                                ga[plane * h * w + (y / f) * w + x / f] += g[plane * ho * wo + y * wo + x];
                            }
                        }
                    }
                });
            }
            &Op::GlobalAvgPool(a) => {
                let (n, c, h, w) = image_dims("global_avgpool", self.nodes[a.0].value.shape()).expect("validated");
                let inv = 1.0 / (h * w) as f64;
                accumulate(&mut grads[a.0], n * c * h * w, |ga| {
                    for plane in 0..n * c {
                        let s = g[plane] * inv;
                        ga[plane * h * w..(plane + 1) * h * w].iter_mut().for_each(|d| *d += s);
                    }
                });
            }
            &Op::Mean(a) => {
                let n = len(a);
                let s = g[0] / n as f64;
                accumulate(&mut grads[a.0], n, |ga| ga.iter_mut().for_each(|d| *d += s));
            }
            &Op::Sum(a) => {
                let n = len(a);
                accumulate(&mut grads[a.0], n, |ga| ga.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::ConcatChannels(inputs) => {
                let (n, total_c, h, w) = image_dims("concat_channels", node.value.shape()).expect("validated");
                let plane = h * w;
                let mut offset = 0;
                for &v in inputs {
                    let c = len(v) / (n * plane);
                    if rg(v) {
                        accumulate(&mut grads[v.0], n * c * plane, |gv| {
                            for b in 0..n {
                                let src = &g[(b * total_c + offset) * plane..(b * total_c + offset + c) * plane];
                                for (d, &s) in gv[b * c * plane..(b + 1) * c * plane].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        });
                    }
                    offset += c;
                }
            }
            &Op::LogSoftmax(a, axis) => {
                let shape = node.value.shape();
                let len_axis = shape[axis];
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let y = node.value.data();
                accumulate(&mut grads[a.0], y.len(), |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len_axis * inner + i;
                            let gsum: f64 = (0..len_axis).map(|j| g[base + j * inner]).sum();
                            for j in 0..len_axis {
                                let at = base + j * inner;
                                ga[at] += g[at] - y[at].exp() * gsum;
                            }
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        node: &Node,
        g: &[f64],
        input: Var,
        kernel: Var,
        bias: Var,
        padding: Padding,
        stride: usize,
        padded: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let in_shape = self.nodes[input.0].value.shape();
        let (n, ci, h, w) = image_dims("conv2d", in_shape).expect("validated");
        let (_, co, ho, wo) = image_dims("conv2d", node.value.shape()).expect("validated");
        let k = self.nodes[kernel.0].value.shape()[2];
        let p = padding.amount();
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        let geom = ConvGeometry {
            ci,
            hp,
            wp,
            k,
            stride,
            ho,
            wo,
        };
        let (rk, npix) = (geom.taps(), ho * wo);
        let plane_in = ci * hp * wp;

        if self.nodes[bias.0].requires_grad {
            accumulate(&mut grads[bias.0], co, |gb| {
                for b in 0..n {
                    for (o, d) in gb.iter_mut().enumerate() {
                        *d += g[(b * co + o) * npix..(b * co + o + 1) * npix].iter().sum::<f64>();
                    }
                }
            });
        }

        if self.nodes[kernel.0].requires_grad {
            let mut cols = vec![0.0; rk * npix];
            accumulate(&mut grads[kernel.0], co * rk, |gk| {
                for b in 0..n {
                    geom.im2col(&padded[b * plane_in..(b + 1) * plane_in], &mut cols);
                    gemm_nt_acc(co, npix, rk, &g[b * co * npix..(b + 1) * co * npix], &cols, gk);
                }
            });
        }

        if self.nodes[input.0].requires_grad {
            let kd_t = transpose(co, rk, self.nodes[kernel.0].value.data());
            let mut gcols = vec![0.0; rk * npix];
            let mut gpad = vec![0.0; plane_in];
            accumulate(&mut grads[input.0], n * ci * h * w, |gi| {
                for b in 0..n {
                    gemm_set(rk, co, npix, &kd_t, &g[b * co * npix..(b + 1) * co * npix], &mut gcols);
                    gpad.fill(0.0);
                    geom.col2im(&gcols, &mut gpad);
                    for c in 0..ci {
                        let src = &gpad[c * hp * wp..(c + 1) * hp * wp];
                        let dst = &mut gi[(b * ci + c) * h * w..(b * ci + c + 1) * h * w];
                        for py in 0..hp {
                            let sy = py as isize - p as isize;
                            if matches!(padding, Padding::Zero(_)) && (sy < 0 || sy >= h as isize) {
                                continue;
                            }
                            let y = reflect_index(sy, h);
                            for px in 0..wp {
                                let sx = px as isize - p as isize;
                                if matches!(padding, Padding::Zero(_)) && (sx < 0 || sx >= w as isize) {
                                    continue;
                                }
                                dst[y * w + reflect_index(sx, w)] += src[py * wp + px];
                            }
                        }
                    }
                }
            });
        }
    }
}

/// Index bookkeeping between one padded image and its im2col matrix: one row
/// per `(c, ki, kj)` tap, one column per output pixel.
struct ConvGeometry {
    ci: usize,
    hp: usize,
    wp: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn taps(&self) -> usize {
        self.ci * self.k * self.k
    }

    /// Calls `f(row, pixel_offset, source_offset)` for every output row of
    /// every tap.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.k;
        for c in 0..self.ci {
            for ki in 0..k {
                for kj in 0..k {
                    let r = (c * k + ki) * k + kj;
                    for oy in 0..self.ho {
                        let src = c * self.hp * self.wp + (oy * self.stride + ki) * self.wp + kj;
                        f(r, oy * self.wo, src);
                    }
                }
            }
        }
    }

    /// `cols[taps × pixels]`.
    fn im2col(&self, padded: &[f64], cols: &mut [f64]) {
        let (wo, s, npix) = (self.wo, self.stride, self.ho * self.wo);
        self.for_each_row(|r, pix, src| {
            let dst = &mut cols[r * npix + pix..r * npix + pix + wo];
            if s == 1 {
                dst.copy_from_slice(&padded[src..src + wo]);
            } else {
                for (ox, d) in dst.iter_mut().enumerate() {
                    *d = padded[src + ox * s];
                }
            }
        });
    }

    /// Scatters `cols[taps × pixels]` back onto a padded image, summing
    /// overlaps.
    fn col2im(&self, cols: &[f64], padded: &mut [f64]) {
        let (wo, s, npix) = (self.wo, self.stride, self.ho * self.wo);
        self.for_each_row(|r, pix, dst| {
            let src = &cols[r * npix + pix..r * npix + pix + wo];
            if s == 1 {
                for (d, &v) in padded[dst..dst + wo].iter_mut().zip(src) {
                    *d += v;
                }
            } else {
                for (ox, &v) in src.iter().enumerate() {
                    padded[dst + ox * s] += v;
                }
            }
        });
    }
}
