use super::kernels::{col2im_add, gemm, im2col, ConvGeom, Layout};
use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel running mean and (biased) variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        batch: usize,
        c_out: usize,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        mode: BnMode,
        batch: usize,
        channels: usize,
        spatial: usize,
    },
    Gram {
        input: Var,
        batch: usize,
        c: usize,
        m: usize,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
        batch: usize,
        d_in: usize,
        d_out: usize,
    },
    Relu {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Row {
        input: Var,
        index: usize,
    },
    Stack {
        inputs: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f32,
    },
    AddScalar {
        input: Var,
    },
    Sum {
        input: Var,
    },
    SumSquares {
        input: Var,
    },
    Sqrt {
        input: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A tape of recorded operations. Node order is insertion order, which is
/// always a topological order because every op's inputs already exist.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Records an input. Gradients flow to it iff `requires_grad` is set.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.grad = None;
        let needs_grad = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated at `v` by [`Graph::backward`], if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.nodes[v.0].value.take_grad()
    }

    /// Hash of every piecewise choice on the tape: which relu inputs are
    /// positive and which element each max-pool window picked. Two
    /// evaluations with equal signatures lie in the same linear piece.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu { input } => {
                    i.hash(&mut h);
                    for x in self.data(*input) {
                        (*x > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    /// 2-D convolution over `[C_in,H,W]` or `[B,C_in,H,W]` input with a
    /// `[C_out,C_in,kH,kW]` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x_shape = self.shape(input).to_vec();
        let (batch, c_in, h, w, batched) = match x_shape.as_slice() {
            &[c, h, w] => (1, c, h, w, false),
            &[b, c, h, w] => (b, c, h, w, true),
            s => return Err(Error::dim(format!("conv2d input must be rank 3 or 4, got {s:?}"))),
        };
        let (c_out, kh, kw) = match *self.shape(weight) {
            [o, ci, kh, kw] if ci == c_in => (o, kh, kw),
            [_, ci, _, _] => {
                return Err(Error::dim(format!(
                    "conv2d weight expects {ci} input channels, input has {c_in}"
                )))
            }
            ref s => return Err(Error::dim(format!("conv2d weight must be rank 4, got {s:?}"))),
        };
        if self.shape(bias) != [c_out] {
            return Err(Error::dim(format!(
                "conv2d bias shape {:?}, expected [{c_out}]",
                self.shape(bias)
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be at least 1"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            h_out: (h + 2 * padding - kh) / stride + 1,
            w_out: (w + 2 * padding - kw) / stride + 1,
        };
        let plane = geom.out_plane();
        let k = geom.patch();
        let mut out = vec![0.0f32; batch * c_out * plane];
        let mut cols = vec![0.0f32; k * plane];
        {
            let x = self.data(input);
            let wt = self.data(weight);
            let b = self.data(bias);
            for bi in 0..batch {
                im2col(&geom, &x[bi * c_in * h * w..][..c_in * h * w], &mut cols);
                let y = &mut out[bi * c_out * plane..][..c_out * plane];
                for (o, row) in y.chunks_mut(plane).enumerate() {
                    row.fill(b[o]);
                }
                gemm(
                    c_out,
                    k,
                    plane,
                    wt,
                    Layout::rows(k),
                    &cols,
                    Layout::rows(plane),
                    1.0,
                    y,
                );
            }
        }
        let shape = if batched {
            vec![batch, c_out, geom.h_out, geom.w_out]
        } else {
            vec![c_out, geom.h_out, geom.w_out]
        };
        let needs = self.needs(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
                c_out,
            },
            needs,
        ))
    }

    /// 2x2 max pooling with stride 2 over `[C,H,W]` or `[B,C,H,W]`.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let r = shape.len();
        if r != 3 && r != 4 {
            return Err(Error::dim(format!("maxpool2 input must be rank 3 or 4, got {shape:?}")));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("maxpool2 needs even height and width, got {h}x{w}")));
        }
        let planes: usize = shape[..r - 2].iter().product();
        let (ho, wo) = (h / 2, w / 2);
        let x = self.data(input);
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        // strict comparison keeps the first maximum in row-major order
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let mut out_shape = shape[..r - 2].to_vec();
        out_shape.extend([ho, wo]);
        let needs = self.needs(&[input]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MaxPool2 { input, argmax }, needs))
    }

    /// Batch normalization over `[B,C,...]`, per channel across batch and
    /// trailing dims. Train mode normalizes with biased batch statistics and
    /// folds them into `running` with the given momentum.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats,
        mode: BnMode,
        eps: f32,
        momentum: f32,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(format!("batchnorm input must be [B,C,...], got {shape:?}")));
        }
        let (batch, channels) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::dim(format!(
                "batchnorm gamma/beta must be [{channels}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if running.channels() != channels {
            return Err(Error::dim(format!(
                "running stats track {} channels, input has {channels}",
                running.channels()
            )));
        }
        if eps.is_nan() || eps <= 0.0 || !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Contract(format!(
                "batchnorm needs eps > 0 and momentum in [0,1], got {eps} and {momentum}"
            )));
        }
        if mode == BnMode::Train && batch < 2 {
            return Err(Error::DegenerateBatch(format!(
                "train-mode batchnorm needs at least 2 samples, got {batch}"
            )));
        }
        let x = self.data(input);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let count = (batch * spatial) as f64;
        let mut inv_std = vec![0.0f32; channels];
        let mut mean = vec![0.0f32; channels];
        for c in 0..channels {
            let (mu, var) = match mode {
                BnMode::Train => {
                    let mut s = 0.0f64;
                    for b in 0..batch {
                        for v in &x[(b * channels + c) * spatial..][..spatial] {
                            s += *v as f64;
                        }
                    }
                    let mu = s / count;
                    let mut ss = 0.0f64;
                    for b in 0..batch {
                        for v in &x[(b * channels + c) * spatial..][..spatial] {
                            let d = *v as f64 - mu;
                            ss += d * d;
                        }
                    }
                    (mu, ss / count)
                }
                BnMode::Eval => (running.mean[c] as f64, running.var[c] as f64),
            };
            mean[c] = mu as f32;
            inv_std[c] = (1.0 / (var + eps as f64).sqrt()) as f32;
            if mode == BnMode::Train {
                running.mean[c] = (1.0 - momentum) * running.mean[c] + momentum * mu as f32;
                running.var[c] = (1.0 - momentum) * running.var[c] + momentum * var as f32;
            }
        }
        let mut xhat = vec![0.0f32; x.len()];
        let mut out = vec![0.0f32; x.len()];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * spatial;
                for i in off..off + spatial {
                    let xh = (x[i] - mean[c]) * inv_std[c];
                    xhat[i] = xh;
                    out[i] = g[c] * xh + bt[c];
                }
            }
        }
        let needs = self.needs(&[input, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
                batch,
                channels,
                spatial,
            },
            needs,
        ))
    }

    /// Channel inner-product matrix `G[i][j] = sum_k F[i][k] F[j][k]`.
    ///
    /// Accepts `[C,m]` (giving `[C,C]`), `[B,C,m]` or `[B,C,H,W]` (giving
    /// `[B,C,C]`). The lower triangle is mirrored from the upper one, so the
    /// result is exactly symmetric.
    pub fn gram_matrix(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (batch, c, m, batched) = match shape.as_slice() {
            &[c, m] => (1, c, m, false),
            &[b, c, m] => (b, c, m, true),
            &[b, c, h, w] => (b, c, h * w, true),
            s => return Err(Error::dim(format!("gram_matrix input must be rank 2-4, got {s:?}"))),
        };
        let x = self.data(input);
        let mut out = vec![0.0f32; batch * c * c];
        for b in 0..batch {
            let f = &x[b * c * m..][..c * m];
            let g = &mut out[b * c * c..][..c * c];
            gemm(c, m, c, f, Layout::rows(m), f, Layout::transposed(m), 0.0, g);
            mirror_upper(g, c);
        }
        let out_shape = if batched { vec![batch, c, c] } else { vec![c, c] };
        let needs = self.needs(&[input]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Gram { input, batch, c, m }, needs))
    }

    /// Affine map `x W^T + b` over `[D_in]` or `[B,D_in]` rows.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (batch, d_in, batched) = match shape.as_slice() {
            &[d] => (1, d, false),
            &[b, d] => (b, d, true),
            s => return Err(Error::dim(format!("dense input must be rank 1 or 2, got {s:?}"))),
        };
        let d_out = match *self.shape(weight) {
            [o, i] if i == d_in => o,
            ref s => {
                return Err(Error::dim(format!(
                    "dense weight {s:?} does not accept input width {d_in}"
                )))
            }
        };
        if self.shape(bias) != [d_out] {
            return Err(Error::dim(format!(
                "dense bias shape {:?}, expected [{d_out}]",
                self.shape(bias)
            )));
        }
        let mut out = vec![0.0f32; batch * d_out];
        {
            let b = self.data(bias);
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(b);
            }
            gemm(
                batch,
                d_in,
                d_out,
                self.data(input),
                Layout::rows(d_in),
                self.data(weight),
                Layout::transposed(d_in),
                1.0,
                &mut out,
            );
        }
        let out_shape = if batched { vec![batch, d_out] } else { vec![d_out] };
        let needs = self.needs(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Dense {
                input,
                weight,
                bias,
                batch,
                d_in,
                d_out,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let out = t.data().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let needs = self.needs(&[input]);
        Ok(self.push(t, Op::Relu { input }, needs))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(input).clone().reshape(shape)?;
        let needs = self.needs(&[input]);
        Ok(self.push(t, Op::Reshape { input }, needs))
    }

    /// Slice `index` along the leading axis, dropping that axis.
    pub fn row(&mut self, input: Var, index: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 || index >= shape[0] {
            return Err(Error::dim(format!("row {index} out of range for shape {shape:?}")));
        }
        let width: usize = shape[1..].iter().product();
        let data = self.data(input)[index * width..][..width].to_vec();
        let needs = self.needs(&[input]);
        Ok(self.push(Tensor::new(shape[1..].to_vec(), data)?, Op::Row { input, index }, needs))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::dim("stack of zero tensors"))?;
        let inner = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(inputs.len() * self.value(*first).numel());
        for v in inputs {
            if self.shape(*v) != inner.as_slice() {
                return Err(Error::dim(format!(
                    "stack shape mismatch: {:?} vs {inner:?}",
                    self.shape(*v)
                )));
            }
            data.extend_from_slice(self.data(*v));
        }
        let mut shape = vec![inputs.len()];
        shape.extend(&inner);
        let needs = self.needs(inputs);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Stack {
                inputs: inputs.to_vec(),
            },
            needs,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(t, Op::Sub { a, b }, needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Result<Var> {
        let t = self.value(input);
        let t = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * factor).collect())?;
        let needs = self.needs(&[input]);
        Ok(self.push(t, Op::Scale { input, factor }, needs))
    }

    pub fn add_scalar(&mut self, input: Var, value: f32) -> Result<Var> {
        let t = self.value(input);
        let t = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x + value).collect())?;
        let needs = self.needs(&[input]);
        Ok(self.push(t, Op::AddScalar { input }, needs))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s: f64 = self.data(input).iter().map(|x| *x as f64).sum();
        let needs = self.needs(&[input]);
        Ok(self.push(Tensor::scalar(s as f32), Op::Sum { input }, needs))
    }

    /// Sum of squared elements, as a one-element tensor.
    pub fn sum_squares(&mut self, input: Var) -> Result<Var> {
        let s: f64 = self
            .data(input)
            .iter()
            .map(|x| (*x as f64) * (*x as f64))
            .sum();
        let needs = self.needs(&[input]);
        Ok(self.push(Tensor::scalar(s as f32), Op::SumSquares { input }, needs))
    }

    /// Elementwise `sqrt(x + eps)`.
    pub fn sqrt(&mut self, input: Var, eps: f32) -> Result<Var> {
        let t = self.value(input);
        let out = t.data().iter().map(|x| (x + eps).sqrt()).collect();
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let needs = self.needs(&[input]);
        Ok(self.push(t, Op::Sqrt { input }, needs))
    }

    /// Reverse-mode sweep from a one-element output. Gradients are added to
    /// whatever the buffers already hold.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        if !self.nodes[output.0].needs_grad {
            return Ok(());
        }
        self.nodes[output.0].value.grad_mut()[0] += 1.0;
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = self.nodes[i].value.take_grad() else {
                continue;
            };
            let contributions = self.local_grads(i, &gy);
            self.nodes[i].value.grad = Some(gy);
            for (v, g) in contributions {
                let slot = self.nodes[v.0].value.grad_mut();
                for (s, x) in slot.iter_mut().zip(&g) {
                    *s += x;
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient contributions of node `i` to its inputs, given its output
    /// gradient `gy`.
    fn local_grads(&self, i: usize, gy: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let mut res = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
                c_out,
            } => {
                let x = self.data(input);
                let wt = self.data(weight);
                let plane = geom.out_plane();
                let k = geom.patch();
                let img = geom.c_in * geom.h * geom.w;
                let want_x = self.wants(input);
                let want_w = self.wants(weight);
                let mut dx = if want_x { vec![0.0f32; x.len()] } else { Vec::new() };
                let mut dw = if want_w { vec![0.0f32; wt.len()] } else { Vec::new() };
                let mut cols = vec![0.0f32; k * plane];
                for b in 0..batch {
                    let dy = &gy[b * c_out * plane..][..c_out * plane];
                    if want_w {
                        im2col(&geom, &x[b * img..][..img], &mut cols);
                        gemm(
                            c_out,
                            plane,
                            k,
                            dy,
                            Layout::rows(plane),
                            &cols,
                            Layout::transposed(plane),
                            1.0,
                            &mut dw,
                        );
                    }
                    if want_x {
                        gemm(
                            k,
                            c_out,
                            plane,
                            wt,
                            Layout::transposed(k),
                            dy,
                            Layout::rows(plane),
                            0.0,
                            &mut cols,
                        );
                        col2im_add(&geom, &cols, &mut dx[b * img..][..img]);
                    }
                }
                if self.wants(bias) {
                    let mut db = vec![0.0f32; c_out];
                    for b in 0..batch {
                        for (o, d) in db.iter_mut().enumerate() {
                            let s: f64 = gy[(b * c_out + o) * plane..][..plane]
                                .iter()
                                .map(|v| *v as f64)
                                .sum();
                            *d += s as f32;
                        }
                    }
                    res.push((bias, db));
                }
                if want_x {
                    res.push((input, dx));
                }
                if want_w {
                    res.push((weight, dw));
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = vec![0.0f32; self.value(*input).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src as usize] += gy[o];
                }
                res.push((*input, dx));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
                batch,
                channels,
                spatial,
            } => {
                let (batch, channels, spatial) = (*batch, *channels, *spatial);
                let g = self.data(*gamma);
                let mut dgamma = vec![0.0f32; channels];
                let mut dbeta = vec![0.0f32; channels];
                let mut dx = vec![0.0f32; gy.len()];
                let count = (batch * spatial) as f64;
                for c in 0..channels {
                    let idx = |b: usize| (b * channels + c) * spatial;
                    let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
                    for b in 0..batch {
                        for j in idx(b)..idx(b) + spatial {
                            sum_dy += gy[j] as f64;
                            sum_dy_xhat += (gy[j] * xhat[j]) as f64;
                        }
                    }
                    dgamma[c] = sum_dy_xhat as f32;
                    dbeta[c] = sum_dy as f32;
                    match mode {
                        BnMode::Train => {
                            let mean_dy = (sum_dy / count) as f32;
                            let mean_dy_xhat = (sum_dy_xhat / count) as f32;
                            let k = g[c] * inv_std[c];
                            for b in 0..batch {
                                for j in idx(b)..idx(b) + spatial {
                                    dx[j] = k * (gy[j] - mean_dy - xhat[j] * mean_dy_xhat);
                                }
                            }
                        }
                        BnMode::Eval => {
                            let k = g[c] * inv_std[c];
                            for b in 0..batch {
                                for j in idx(b)..idx(b) + spatial {
                                    dx[j] = k * gy[j];
                                }
                            }
                        }
                    }
                }
                if self.wants(*input) {
                    res.push((*input, dx));
                }
                if self.wants(*gamma) {
                    res.push((*gamma, dgamma));
                }
                if self.wants(*beta) {
                    res.push((*beta, dbeta));
                }
            }
            &Op::Gram { input, batch, c, m } => {
                let x = self.data(input);
                let mut dx = vec![0.0f32; x.len()];
                let mut sym = vec![0.0f32; c * c];
                for b in 0..batch {
                    let dg = &gy[b * c * c..][..c * c];
                    for r in 0..c {
                        for s in 0..c {
                            sym[r * c + s] = dg[r * c + s] + dg[s * c + r];
                        }
                    }
                    gemm(
                        c,
                        c,
                        m,
                        &sym,
                        Layout::rows(c),
                        &x[b * c * m..][..c * m],
                        Layout::rows(m),
                        0.0,
                        &mut dx[b * c * m..][..c * m],
                    );
                }
                res.push((input, dx));
            }
            &Op::Dense {
                input,
                weight,
                bias,
                batch,
                d_in,
                d_out,
            } => {
                if self.wants(input) {
                    let mut dx = vec![0.0f32; batch * d_in];
                    gemm(
                        batch,
                        d_out,
                        d_in,
                        gy,
                        Layout::rows(d_out),
                        self.data(weight),
                        Layout::rows(d_in),
                        0.0,
                        &mut dx,
                    );
                    res.push((input, dx));
                }
                if self.wants(weight) {
                    let mut dw = vec![0.0f32; d_out * d_in];
                    gemm(
                        d_out,
                        batch,
                        d_in,
                        gy,
                        Layout::transposed(d_out),
                        self.data(input),
                        Layout::rows(d_in),
                        0.0,
                        &mut dw,
                    );
                    res.push((weight, dw));
                }
                if self.wants(bias) {
                    let mut db = vec![0.0f32; d_out];
                    for row in gy.chunks(d_out) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    res.push((bias, db));
                }
            }
            &Op::Relu { input } => {
                let dx = self
                    .data(input)
                    .iter()
                    .zip(gy)
                    .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                res.push((input, dx));
            }
            &Op::Reshape { input } => res.push((input, gy.to_vec())),
            &Op::Row { input, index } => {
                let mut dx = vec![0.0f32; self.value(input).numel()];
                dx[index * gy.len()..][..gy.len()].copy_from_slice(gy);
                res.push((input, dx));
            }
            Op::Stack { inputs } => {
                let w = gy.len() / inputs.len();
                for (j, v) in inputs.iter().enumerate() {
                    if self.wants(*v) {
                        res.push((*v, gy[j * w..][..w].to_vec()));
                    }
                }
            }
            &Op::Add { a, b } => {
                if self.wants(a) {
                    res.push((a, gy.to_vec()));
                }
                if self.wants(b) {
                    res.push((b, gy.to_vec()));
                }
            }
            &Op::Sub { a, b } => {
                if self.wants(a) {
                    res.push((a, gy.to_vec()));
                }
                if self.wants(b) {
                    res.push((b, gy.iter().map(|g| -g).collect()));
                }
            }
            &Op::Mul { a, b } => {
                if self.wants(a) {
                    res.push((a, gy.iter().zip(self.data(b)).map(|(g, y)| g * y).collect()));
                }
                if self.wants(b) {
                    res.push((b, gy.iter().zip(self.data(a)).map(|(g, x)| g * x).collect()));
                }
            }
            &Op::Scale { input, factor } => {
                res.push((input, gy.iter().map(|g| g * factor).collect()));
            }
            &Op::AddScalar { input } => res.push((input, gy.to_vec())),
            &Op::Sum { input } => {
                res.push((input, vec![gy[0]; self.value(input).numel()]));
            }
            &Op::SumSquares { input } => {
                let dx = self.data(input).iter().map(|x| 2.0 * x * gy[0]).collect();
                res.push((input, dx));
            }
            &Op::Sqrt { input } => {
                let y = self.nodes[i].value.data();
                let dx = y.iter().zip(gy).map(|(y, g)| g / (2.0 * y)).collect();
                res.push((input, dx));
            }
        }
        res
    }
}

fn mirror_upper(g: &mut [f32], c: usize) {
    for r in 0..c {
        for s in 0..r {
            g[r * c + s] = g[s * c + r];
        }
    }
}
