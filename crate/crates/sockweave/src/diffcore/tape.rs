//! Define-by-run gradient tape.
//!
//! Forward ops append nodes to a flat arena; the arena index order is a
//! topological order, so `backward` is a single reverse sweep. Gradients
//! for leaf (parameter) nodes accumulate across repeated `backward` calls;
//! internal node gradients are reset per call.

use super::linalg::{
    col2im_1d_acc, col2im_batch_acc, conv_out_extent, im2col_1d, im2col_batch_into, mm,
    mm_a_bt_acc, mm_acc, mm_at_b_acc,
};
use super::tensor::{ParamSet, Tensor};
use super::{DiffError, DiffResult, Real};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        in_c: usize,
        batch: usize,
        h: usize,
        w: usize,
        out_c: usize,
        ksize: usize,
        stride: usize,
        out_h: usize,
        out_w: usize,
    },
    ConvT2d {
        input: usize,
        weight: usize,
        bias: usize,
        in_c: usize,
        batch: usize,
        h: usize,
        w: usize,
        out_c: usize,
        ksize: usize,
        stride: usize,
        out_h: usize,
        out_w: usize,
    },
    Conv1d {
        input: usize,
        weight: usize,
        bias: usize,
        in_c: usize,
        n: usize,
        out_c: usize,
        ksize: usize,
    },
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    SoftmaxRows {
        input: usize,
        rows: usize,
        cols: usize,
    },
    GlobalAvgPool {
        input: usize,
        ch: usize,
        len: usize,
    },
    Concat0(Vec<usize>),
    Slice {
        input: usize,
        offset: usize,
        len: usize,
    },
    SliceCols {
        input: usize,
        rows: usize,
        cols: usize,
        c0: usize,
        c1: usize,
    },
    ScaleRows {
        mat: usize,
        scales: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(usize),
    PermuteRows {
        input: usize,
        rows: usize,
        cols: usize,
        perm: std::sync::Arc<Vec<usize>>,
    },
    Transpose2d {
        input: usize,
        rows: usize,
        cols: usize,
    },
    Mse(usize, usize),
    MeanAll(usize),
    GaussHeatmap {
        keypoints: usize,
        ch: usize,
        h: usize,
        w: usize,
        sigma: f64,
    },
}

struct Node<R: Real> {
    data: Vec<R>,
    shape: Vec<usize>,
    grad: Vec<R>,
    needs_grad: bool,
    op: Op,
}

/// Flat arena of forward nodes plus leaf-gradient accumulators.
pub struct Tape<R: Real = f32> {
    nodes: Vec<Node<R>>,
    /// (node index, accumulated gradient) for leaves created via `leaf`.
    leaf_accum: Vec<(usize, Vec<R>)>,
    /// (node index, parameter name) for leaves loaded from a `ParamSet`.
    param_leaves: Vec<(usize, String)>,
    /// Reusable scratch for convolution lowering (im2col patch matrices).
    scratch: Vec<R>,
    scratch2: Vec<R>,
    /// When set, `backward` accumulates per-op-kind elapsed seconds.
    pub profile: Option<std::collections::HashMap<&'static str, (u64, f64)>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_accum: Vec::new(),
            param_leaves: Vec::new(),
            scratch: Vec::new(),
            scratch2: Vec::new(),
            profile: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[R] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar payload of a `[1]`-shaped node.
    pub fn scalar(&self, v: Var) -> R {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Gradient of a node after `backward`. For leaves this is the
    /// accumulated gradient across all `backward` calls on this tape.
    pub fn grad(&self, v: Var) -> &[R] {
        if let Some((_, acc)) = self.leaf_accum.iter().find(|(i, _)| *i == v.0) {
            return acc;
        }
        &self.nodes[v.0].grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<R>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            data,
            shape,
            grad: Vec::new(),
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf node from a tensor; tracked for gradients iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<R>) -> Var {
        let v = self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf);
        if t.requires_grad {
            self.leaf_accum.push((v.0, vec![R::zero(); t.numel()]));
        }
        v
    }

    /// Non-differentiable input node.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<R>) -> Var {
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, v: R) -> Var {
        self.constant(vec![1], vec![v])
    }

    /// Loads every parameter of `params` as a tracked leaf. Returns them in
    /// set order; look up by name with [`LoadedParams::var`].
    pub fn load_params(&mut self, params: &ParamSet<R>) -> LoadedParams {
        let mut map = std::collections::HashMap::new();
        for (name, t) in params.iter() {
            let v = self.leaf(t);
            self.param_leaves.push((v.0, name.to_string()));
            map.insert(name.to_string(), v);
        }
        LoadedParams { map }
    }

    /// Adds this tape's accumulated leaf gradients into `params`.
    pub fn harvest_grads(&self, params: &mut ParamSet<R>) {
        for (idx, name) in &self.param_leaves {
            let acc = &self
                .leaf_accum
                .iter()
                .find(|(i, _)| i == idx)
                .expect("param leaf has accumulator")
                .1;
            params.get_mut(name).accumulate_grad(acc);
        }
    }

    // ── Elementwise and scalar ops ───────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> DiffResult<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| *x + *y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, ng, Op::Add(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> DiffResult<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| *x * *y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, ng, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cc = R::from_f64(c);
        let data = self.nodes[a.0].data.iter().map(|x| *x * cc).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), data, ng, Op::Scale(a.0, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let one = R::one();
        let two = R::from_f64(2.0);
        // tanh(x) = 2 sigmoid(2x) - 1; exp is markedly cheaper than libm tanh
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|x| two / (one + (-two * *x).exp()) - one)
            .collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), data, ng, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = R::one();
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|x| one / (one + (-*x).exp()))
            .collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), data, ng, Op::Sigmoid(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let z = R::zero();
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|x| if *x > z { *x } else { z })
            .collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), data, ng, Op::Relu(a.0))
    }

    // ── Linear algebra ───────────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`, or matrix-vector `[m,k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> DiffResult<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k) = match sa.as_slice() {
            [m, k] => (*m, *k),
            _ => {
                return Err(DiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        let (kb, n, out_shape) = match sb.as_slice() {
            [kb, n] => (*kb, *n, vec![m, *n]),
            [kb] => (*kb, 1, vec![m]),
            _ => {
                return Err(DiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        if k != kb {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let data = mm(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out_shape, data, ng, Op::Matmul { a: a.0, b: b.0, m, k, n }))
    }

    /// Same-padded strided 2-D convolution. Accepts a single image
    /// `[in_c, h, w]` or a channel-major batch `[in_c, batch, h, w]`.
    /// `weight [out_c, in_c*k*k]`, `bias [out_c]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, ksize: usize, stride: usize) -> DiffResult<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        let (in_c, batch, h, w) = match si.as_slice() {
            [c, h, w] => (*c, 1usize, *h, *w),
            [c, b, h, w] => (*c, *b, *h, *w),
            _ => {
                return Err(DiffError::ShapeMismatch {
                    op: "conv2d",
                    lhs: si,
                    rhs: sw,
                })
            }
        };
        if ksize % 2 == 0 {
            return Err(DiffError::InvalidArg {
                op: "conv2d",
                msg: format!("kernel extent must be odd, got {ksize}"),
            });
        }
        let out_c = match sw.as_slice() {
            [oc, cols] if *cols == in_c * ksize * ksize => *oc,
            _ => {
                return Err(DiffError::ShapeMismatch {
                    op: "conv2d",
                    lhs: si,
                    rhs: sw,
                })
            }
        };
        if self.shape(bias) != [out_c] {
            return Err(DiffError::ShapeMismatch {
                op: "conv2d",
                lhs: vec![out_c],
                rhs: self.shape(bias).to_vec(),
            });
        }
        let (out_h, out_w) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
        let mut cols = std::mem::take(&mut self.scratch);
        im2col_batch_into(
            &self.nodes[input.0].data,
            in_c,
            batch,
            h,
            w,
            ksize,
            stride,
            out_h,
            out_w,
            &mut cols,
        );
        let p = batch * out_h * out_w;
        let mut data = mm(
            &self.nodes[weight.0].data,
            &cols,
            out_c,
            in_c * ksize * ksize,
            p,
        );
        self.scratch = cols;
        for oc in 0..out_c {
            let b = self.nodes[bias.0].data[oc];
            for v in &mut data[oc * p..(oc + 1) * p] {
                *v = *v + b;
            }
        }
        let out_shape = if batch == 1 {
            vec![out_c, out_h, out_w]
        } else {
            vec![out_c, batch, out_h, out_w]
        };
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            out_shape,
            data,
            ng,
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                in_c,
                batch,
                h,
                w,
                out_c,
                ksize,
                stride,
                out_h,
                out_w,
            },
        ))
    }

    /// Transposed 2-D convolution upsampling by `stride` exactly.
    /// `input [in_c,h,w]`, `weight [in_c, out_c*k*k]`, `bias [out_c]`.
    pub fn conv2d_transpose(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        ksize: usize,
        stride: usize,
    ) -> DiffResult<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        let (in_c, batch, h, w) = match si.as_slice() {
            [c, h, w] => (*c, 1usize, *h, *w),
            [c, b, h, w] => (*c, *b, *h, *w),
            _ => {
                return Err(DiffError::ShapeMismatch {
                    op: "conv2d_transpose",
                    lhs: si,
                    rhs: sw,
                })
            }
        };
        if ksize % 2 == 0 {
            return Err(DiffError::InvalidArg {
                op: "conv2d_transpose",
                msg: format!("kernel extent must be odd, got {ksize}"),
            });
        }
        let out_c = match sw.as_slice() {
            [ic, cols] if *ic == in_c && cols % (ksize * ksize) == 0 => cols / (ksize * ksize),
            _ => {
                return Err(DiffError::ShapeMismatch {
                    op: "conv2d_transpose",
                    lhs: si,
                    rhs: sw,
                })
            }
        };
        if self.shape(bias) != [out_c] {
            return Err(DiffError::ShapeMismatch {
                op: "conv2d_transpose",
                lhs: vec![out_c],
                rhs: self.shape(bias).to_vec(),
            });
        }
        let (out_h, out_w) = (h * stride, w * stride);
        let p_in = batch * h * w;
        let okk = out_c * ksize * ksize;
        // tmp[okk, batch*p] = weight^T x input; input is already channel-major
        let mut tmp = std::mem::take(&mut self.scratch);
        tmp.clear();
        tmp.resize(okk * p_in, R::zero());
        mm_at_b_acc(
            &self.nodes[weight.0].data,
            &self.nodes[input.0].data,
            okk,
            in_c,
            p_in,
            &mut tmp,
        );
        let mut data = vec![R::zero(); out_c * batch * out_h * out_w];
        // the adjoint samples the *output*-sized image at the input grid
        col2im_batch_acc(&tmp, out_c, batch, out_h, out_w, ksize, stride, h, w, &mut data);
        self.scratch = tmp;
        let hw = batch * out_h * out_w;
        for oc in 0..out_c {
            let b = self.nodes[bias.0].data[oc];
            for v in &mut data[oc * hw..(oc + 1) * hw] {
                *v = *v + b;
            }
        }
        let out_shape = if batch == 1 {
            vec![out_c, out_h, out_w]
        } else {
            vec![out_c, batch, out_h, out_w]
        };
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            out_shape,
            data,
            ng,
            Op::ConvT2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                in_c,
                batch,
                h,
                w,
                out_c,
                ksize,
                stride,
                out_h,
                out_w,
            },
        ))
    }

    /// Same-padded stride-1 1-D convolution.
    /// `input [in_c,n]`, `weight [out_c, in_c*k]`, `bias [out_c]`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, ksize: usize) -> DiffResult<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        let (in_c, n) = match si.as_slice() {
            [c, n] => (*c, *n),
            _ => {
                return Err(DiffError::ShapeMismatch {
                    op: "conv1d",
                    lhs: si,
                    rhs: sw,
                })
            }
        };
        if ksize % 2 == 0 {
            return Err(DiffError::InvalidArg {
                op: "conv1d",
                msg: format!("kernel extent must be odd, got {ksize}"),
            });
        }
        let out_c = match sw.as_slice() {
            [oc, cols] if *cols == in_c * ksize => *oc,
            _ => {
                return Err(DiffError::ShapeMismatch {
                    op: "conv1d",
                    lhs: si,
                    rhs: sw,
                })
            }
        };
        if self.shape(bias) != [out_c] {
            return Err(DiffError::ShapeMismatch {
                op: "conv1d",
                lhs: vec![out_c],
                rhs: self.shape(bias).to_vec(),
            });
        }
        let cols = im2col_1d(&self.nodes[input.0].data, in_c, n, ksize);
        let mut data = mm(&self.nodes[weight.0].data, &cols, out_c, in_c * ksize, n);
        for oc in 0..out_c {
            let b = self.nodes[bias.0].data[oc];
            for v in &mut data[oc * n..(oc + 1) * n] {
                *v = *v + b;
            }
        }
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            vec![out_c, n],
            data,
            ng,
            Op::Conv1d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                in_c,
                n,
                out_c,
                ksize,
            },
        ))
    }

    // ── Softmax, pooling, reductions ─────────────────────────────────────

    /// Row-wise stabilized softmax over a `[rows, cols]` view of the input.
    pub fn softmax_rows(&mut self, input: Var, rows: usize, cols: usize) -> DiffResult<Var> {
        if rows * cols != self.nodes[input.0].data.len() {
            return Err(DiffError::ShapeMismatch {
                op: "softmax",
                lhs: self.shape(input).to_vec(),
                rhs: vec![rows, cols],
            });
        }
        let mut data = vec![R::zero(); rows * cols];
        for r in 0..rows {
            let src = &self.nodes[input.0].data[r * cols..(r + 1) * cols];
            let max = src.iter().cloned().fold(R::neg_infinity(), R::max);
            let dst = &mut data[r * cols..(r + 1) * cols];
            let mut sum = R::zero();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (*s - max).exp();
                sum = sum + *d;
            }
            for d in dst.iter_mut() {
                *d = *d / sum;
            }
        }
        let ng = self.needs(input);
        Ok(self.push(
            vec![rows, cols],
            data,
            ng,
            Op::SoftmaxRows {
                input: input.0,
                rows,
                cols,
            },
        ))
    }

    /// Mean over the trailing axis of a `[ch, len]` view: output `[ch]`.
    pub fn global_avg_pool(&mut self, input: Var, ch: usize, len: usize) -> DiffResult<Var> {
        if ch * len != self.nodes[input.0].data.len() {
            return Err(DiffError::ShapeMismatch {
                op: "global_avg_pool",
                lhs: self.shape(input).to_vec(),
                rhs: vec![ch, len],
            });
        }
        let inv = R::from_f64(1.0 / len as f64);
        let data = (0..ch)
            .map(|c| {
                let mut s = R::zero();
                for v in &self.nodes[input.0].data[c * len..(c + 1) * len] {
                    s = s + *v;
                }
                s * inv
            })
            .collect();
        let ng = self.needs(input);
        Ok(self.push(
            vec![ch],
            data,
            ng,
            Op::GlobalAvgPool {
                input: input.0,
                ch,
                len,
            },
        ))
    }

    pub fn mean_all(&mut self, input: Var) -> Var {
        let n = self.nodes[input.0].data.len();
        let inv = R::from_f64(1.0 / n as f64);
        let mut s = R::zero();
        for v in &self.nodes[input.0].data {
            s = s + *v;
        }
        let ng = self.needs(input);
        self.push(vec![1], vec![s * inv], ng, Op::MeanAll(input.0))
    }

    /// Mean squared error over all elements: scalar output.
    pub fn mse(&mut self, a: Var, b: Var) -> DiffResult<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::ShapeMismatch {
                op: "mse",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let n = self.nodes[a.0].data.len();
        let mut s = R::zero();
        for (x, y) in self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data) {
            let d = *x - *y;
            s = s + d * d;
        }
        let data = vec![s * R::from_f64(1.0 / n as f64)];
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![1], data, ng, Op::Mse(a.0, b.0)))
    }

    // ── Shape surgery ────────────────────────────────────────────────────

    /// Concatenation along axis 0. Inputs must share trailing dimensions.
    pub fn concat0(&mut self, inputs: &[Var]) -> DiffResult<Var> {
        if inputs.is_empty() {
            return Err(DiffError::InvalidArg {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let tail = self.shape(inputs[0])[1..].to_vec();
        let mut lead = 0usize;
        for v in inputs {
            if self.shape(*v)[1..] != tail[..] {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(inputs[0]).to_vec(),
                    rhs: self.shape(*v).to_vec(),
                });
            }
            lead += self.shape(*v)[0];
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let mut data = Vec::with_capacity(shape.iter().product());
        for v in inputs {
            data.extend_from_slice(&self.nodes[v.0].data);
        }
        let ng = inputs.iter().any(|v| self.needs(*v));
        Ok(self.push(shape, data, ng, Op::Concat0(inputs.iter().map(|v| v.0).collect())))
    }

    /// Contiguous range `[offset, offset+len)` of the flattened input,
    /// reshaped to `out_shape`.
    pub fn slice(&mut self, input: Var, offset: usize, len: usize, out_shape: Vec<usize>) -> DiffResult<Var> {
        if offset + len > self.nodes[input.0].data.len()
            || out_shape.iter().product::<usize>() != len
        {
            return Err(DiffError::InvalidArg {
                op: "slice",
                msg: format!(
                    "range {offset}..{} out of bounds for {:?} or mismatched {:?}",
                    offset + len,
                    self.shape(input),
                    out_shape
                ),
            });
        }
        let data = self.nodes[input.0].data[offset..offset + len].to_vec();
        let ng = self.needs(input);
        Ok(self.push(
            out_shape,
            data,
            ng,
            Op::Slice {
                input: input.0,
                offset,
                len,
            },
        ))
    }

    /// Column range `[c0, c1)` of a `[rows, cols]` view: output `[rows, c1-c0]`.
    pub fn slice_cols(&mut self, input: Var, rows: usize, cols: usize, c0: usize, c1: usize) -> DiffResult<Var> {
        if rows * cols != self.nodes[input.0].data.len() || c1 > cols || c0 >= c1 {
            return Err(DiffError::InvalidArg {
                op: "slice_cols",
                msg: format!("cols {c0}..{c1} invalid for view [{rows},{cols}]"),
            });
        }
        let width = c1 - c0;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&self.nodes[input.0].data[r * cols + c0..r * cols + c1]);
        }
        let ng = self.needs(input);
        Ok(self.push(
            vec![rows, width],
            data,
            ng,
            Op::SliceCols {
                input: input.0,
                rows,
                cols,
                c0,
                c1,
            },
        ))
    }

    /// Per-row scaling of a `[rows, cols]` matrix by a `[rows]` vector.
    pub fn scale_rows(&mut self, mat: Var, scales: Var) -> DiffResult<Var> {
        let sm = self.shape(mat).to_vec();
        let (rows, cols) = match sm.as_slice() {
            [r, c] => (*r, *c),
            _ => {
                return Err(DiffError::ShapeMismatch {
                    op: "scale_rows",
                    lhs: sm,
                    rhs: self.shape(scales).to_vec(),
                })
            }
        };
        if self.shape(scales) != [rows] {
            return Err(DiffError::ShapeMismatch {
                op: "scale_rows",
                lhs: sm,
                rhs: self.shape(scales).to_vec(),
            });
        }
        let mut data = vec![R::zero(); rows * cols];
        for r in 0..rows {
            let s = self.nodes[scales.0].data[r];
            for c in 0..cols {
                data[r * cols + c] = self.nodes[mat.0].data[r * cols + c] * s;
            }
        }
        let ng = self.needs(mat) || self.needs(scales);
        Ok(self.push(
            vec![rows, cols],
            data,
            ng,
            Op::ScaleRows {
                mat: mat.0,
                scales: scales.0,
                rows,
                cols,
            },
        ))
    }

    /// Row gather of a `[rows, cols]` view: output row r is input row
    /// `perm[r]`. `perm` must be a permutation of `0..rows`.
    pub fn permute_rows(&mut self, input: Var, perm: std::sync::Arc<Vec<usize>>) -> DiffResult<Var> {
        let si = self.shape(input).to_vec();
        let (rows, cols) = match si.as_slice() {
            [r, c] => (*r, *c),
            _ => {
                return Err(DiffError::ShapeMismatch {
                    op: "permute_rows",
                    lhs: si,
                    rhs: vec![],
                })
            }
        };
        if perm.len() != rows {
            return Err(DiffError::InvalidArg {
                op: "permute_rows",
                msg: format!("perm length {} != rows {rows}", perm.len()),
            });
        }
        let src = &self.nodes[input.0].data;
        let mut data = vec![R::zero(); rows * cols];
        for (r, &p) in perm.iter().enumerate() {
            data[r * cols..(r + 1) * cols].copy_from_slice(&src[p * cols..(p + 1) * cols]);
        }
        let ng = self.needs(input);
        Ok(self.push(
            vec![rows, cols],
            data,
            ng,
            Op::PermuteRows {
                input: input.0,
                rows,
                cols,
                perm,
            },
        ))
    }

    /// Transpose of a `[rows, cols]` view: output `[cols, rows]`.
    pub fn transpose2d(&mut self, input: Var) -> DiffResult<Var> {
        let si = self.shape(input).to_vec();
        let (rows, cols) = match si.as_slice() {
            [r, c] => (*r, *c),
            _ => {
                return Err(DiffError::ShapeMismatch {
                    op: "transpose2d",
                    lhs: si,
                    rhs: vec![],
                })
            }
        };
        let src = &self.nodes[input.0].data;
        let mut data = vec![R::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = src[r * cols + c];
            }
        }
        let ng = self.needs(input);
        Ok(self.push(
            vec![cols, rows],
            data,
            ng,
            Op::Transpose2d {
                input: input.0,
                rows,
                cols,
            },
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> DiffResult<Var> {
        if shape.iter().product::<usize>() != self.nodes[input.0].data.len() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(input).to_vec(),
                rhs: shape,
            });
        }
        let data = self.nodes[input.0].data.clone();
        let ng = self.needs(input);
        Ok(self.push(shape, data, ng, Op::Reshape(input.0)))
    }

    /// Per-keypoint isotropic Gaussian bump with peak 1 at `(x, y)`.
    /// `keypoints [ch, 2]` in `[-1,1]` coordinates; output `[ch, h, w]`.
    pub fn gauss_heatmap(&mut self, keypoints: Var, h: usize, w: usize, sigma: f64) -> DiffResult<Var> {
        let sk = self.shape(keypoints).to_vec();
        let ch = match sk.as_slice() {
            [c, 2] => *c,
            _ => {
                return Err(DiffError::ShapeMismatch {
                    op: "gauss_heatmap",
                    lhs: sk,
                    rhs: vec![0, 2],
                })
            }
        };
        if sigma <= 0.0 {
            return Err(DiffError::InvalidArg {
                op: "gauss_heatmap",
                msg: format!("sigma must be positive, got {sigma}"),
            });
        }
        let inv2s2 = R::from_f64(1.0 / (2.0 * sigma * sigma));
        let mut data = vec![R::zero(); ch * h * w];
        for c in 0..ch {
            let kx = self.nodes[keypoints.0].data[c * 2];
            let ky = self.nodes[keypoints.0].data[c * 2 + 1];
            for i in 0..h {
                let gy = grid_coord::<R>(i, h);
                for j in 0..w {
                    let gx = grid_coord::<R>(j, w);
                    let dx = gx - kx;
                    let dy = gy - ky;
                    data[c * h * w + i * w + j] = (-(dx * dx + dy * dy) * inv2s2).exp();
                }
            }
        }
        let ng = self.needs(keypoints);
        Ok(self.push(
            vec![ch, h, w],
            data,
            ng,
            Op::GaussHeatmap {
                keypoints: keypoints.0,
                ch,
                h,
                w,
                sigma,
            },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
    /// calls; internal gradients are reset each call.
    pub fn backward(&mut self, loss: Var) -> DiffResult<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(DiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for node in &mut self.nodes {
            if node.needs_grad {
                if node.grad.len() != node.data.len() {
                    node.grad = vec![R::zero(); node.data.len()];
                } else {
                    node.grad.iter_mut().for_each(|g| *g = R::zero());
                }
            }
        }
        if !self.nodes[loss.0].needs_grad {
            // Loss does not depend on any tracked leaf; nothing to propagate.
            return Ok(());
        }
        self.nodes[loss.0].grad[0] = R::one();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if self.profile.is_some() {
                let t0 = std::time::Instant::now();
                let name = op_name(&op);
                self.backprop_node(i, &op);
                let dt = t0.elapsed().as_secs_f64();
                let map = self.profile.as_mut().unwrap();
                let e = map.entry(name).or_insert((0, 0.0));
                e.0 += 1;
                e.1 += dt;
            } else {
                self.backprop_node(i, &op);
            }
        }

        for (idx, acc) in &mut self.leaf_accum {
            let node = &self.nodes[*idx];
            for (a, g) in acc.iter_mut().zip(&node.grad) {
                *a = *a + *g;
            }
        }
        Ok(())
    }

    /// Adds `delta` elementwise into the gradient buffer of node `target`.
    fn add_grad(&mut self, target: usize, delta: &[R]) {
        let node = &mut self.nodes[target];
        if !node.needs_grad {
            return;
        }
        debug_assert_eq!(node.grad.len(), delta.len());
        for (g, d) in node.grad.iter_mut().zip(delta) {
            *g = *g + *d;
        }
    }

    fn backprop_node(&mut self, i: usize, op: &Op) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let g = self.nodes[i].grad.clone();
                self.add_grad(*a, &g);
                self.add_grad(*b, &g);
            }
            Op::Mul(a, b) => {
                let g = self.nodes[i].grad.clone();
                let da: Vec<R> = self.nodes[*b]
                    .data
                    .iter()
                    .zip(&g)
                    .map(|(x, gg)| *x * *gg)
                    .collect();
                let db: Vec<R> = self.nodes[*a]
                    .data
                    .iter()
                    .zip(&g)
                    .map(|(x, gg)| *x * *gg)
                    .collect();
                self.add_grad(*a, &da);
                self.add_grad(*b, &db);
            }
            Op::Scale(a, c) => {
                let cc = R::from_f64(*c);
                let da: Vec<R> = self.nodes[i].grad.iter().map(|g| *g * cc).collect();
                self.add_grad(*a, &da);
            }
            Op::Matmul { a, b, m, k, n } => {
                let g = self.nodes[i].grad.clone();
                if self.nodes[*a].needs_grad {
                    // dA = G x B^T : [m,n] x [k,n]^T
                    let mut da = vec![R::zero(); m * k];
                    mm_a_bt_acc(&g, &self.nodes[*b].data, *m, *n, *k, &mut da);
                    self.add_grad(*a, &da);
                }
                if self.nodes[*b].needs_grad {
                    // dB = A^T x G : [m,k]^T x [m,n]
                    let mut db = vec![R::zero(); k * n];
                    mm_at_b_acc(&self.nodes[*a].data, &g, *k, *m, *n, &mut db);
                    self.add_grad(*b, &db);
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                in_c,
                batch,
                h,
                w,
                out_c,
                ksize,
                stride,
                out_h,
                out_w,
            } => {
                let p = batch * out_h * out_w;
                let ck2 = in_c * ksize * ksize;
                let _t_clone = std::time::Instant::now();
                let g = self.nodes[i].grad.clone();
                eprintln!("conv2d bwd clone: {:.1} ms ({} els)", _t_clone.elapsed().as_secs_f64()*1e3, g.len());
                if self.nodes[*bias].needs_grad {
                    let _t = std::time::Instant::now();
                    let mut db = vec![R::zero(); *out_c];
                    for oc in 0..*out_c {
                        for v in &g[oc * p..(oc + 1) * p] {
                            db[oc] = db[oc] + *v;
                        }
                    }
                    self.add_grad(*bias, &db);
                    eprintln!("conv2d bwd bias: {:.1} ms", _t.elapsed().as_secs_f64()*1e3);
                }
                if self.nodes[*weight].needs_grad {
                    let _t = std::time::Instant::now();
                    let mut cols = std::mem::take(&mut self.scratch);
                    im2col_batch_into(
                        &self.nodes[*input].data,
                        *in_c,
                        *batch,
                        *h,
                        *w,
                        *ksize,
                        *stride,
                        *out_h,
                        *out_w,
                        &mut cols,
                    );
                    let mut dw = vec![R::zero(); out_c * ck2];
                    let _t2 = std::time::Instant::now();
                    mm_a_bt_acc(&g, &cols, *out_c, p, ck2, &mut dw);
                    eprintln!("conv2d bwd im2col+dW: {:.1} + {:.1} ms", (_t2 - _t).as_secs_f64()*1e3, _t2.elapsed().as_secs_f64()*1e3);
                    self.scratch = cols;
                    self.add_grad(*weight, &dw);
                }
                if self.nodes[*input].needs_grad {
                    let _t = std::time::Instant::now();
                    let mut dcols = std::mem::take(&mut self.scratch2);
                    dcols.clear();
                    dcols.resize(ck2 * p, R::zero());
                    mm_at_b_acc(&self.nodes[*weight].data, &g, ck2, *out_c, p, &mut dcols);
                    let _t2 = std::time::Instant::now();
                    let mut din = vec![R::zero(); in_c * batch * h * w];
                    col2im_batch_acc(
                        &dcols, *in_c, *batch, *h, *w, *ksize, *stride, *out_h, *out_w, &mut din,
                    );
                    self.scratch2 = dcols;
                    let _t3 = std::time::Instant::now();
                    self.add_grad(*input, &din);
                    eprintln!("conv2d bwd dcols/col2im/addgrad: {:.1} / {:.1} / {:.1} ms", (_t2-_t).as_secs_f64()*1e3, (_t3-_t2).as_secs_f64()*1e3, _t3.elapsed().as_secs_f64()*1e3);
                }
            }
            Op::ConvT2d {
                input,
                weight,
                bias,
                in_c,
                batch,
                h,
                w,
                out_c,
                ksize,
                stride,
                out_h,
                out_w,
            } => {
                let p_in = batch * h * w;
                let okk = out_c * ksize * ksize;
                let hw = batch * out_h * out_w;
                let g = self.nodes[i].grad.clone();
                if self.nodes[*bias].needs_grad {
                    let mut db = vec![R::zero(); *out_c];
                    for oc in 0..*out_c {
                        for v in &g[oc * hw..(oc + 1) * hw] {
                            db[oc] = db[oc] + *v;
                        }
                    }
                    self.add_grad(*bias, &db);
                }
                // dtmp = im2col over the output-sized gradient image
                let mut dtmp = std::mem::take(&mut self.scratch);
                im2col_batch_into(
                    &g, *out_c, *batch, *out_h, *out_w, *ksize, *stride, *h, *w, &mut dtmp,
                );
                if self.nodes[*input].needs_grad {
                    let mut din = vec![R::zero(); in_c * p_in];
                    mm_acc(&self.nodes[*weight].data, &dtmp, *in_c, okk, p_in, &mut din);
                    self.add_grad(*input, &din);
                }
                if self.nodes[*weight].needs_grad {
                    let mut dw = vec![R::zero(); in_c * okk];
                    mm_a_bt_acc(&self.nodes[*input].data, &dtmp, *in_c, p_in, okk, &mut dw);
                    self.add_grad(*weight, &dw);
                }
                self.scratch = dtmp;
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                in_c,
                n,
                out_c,
                ksize,
            } => {
                let ck = in_c * ksize;
                let g = self.nodes[i].grad.clone();
                if self.nodes[*bias].needs_grad {
                    let mut db = vec![R::zero(); *out_c];
                    for oc in 0..*out_c {
                        for v in &g[oc * n..(oc + 1) * n] {
                            db[oc] = db[oc] + *v;
                        }
                    }
                    self.add_grad(*bias, &db);
                }
                if self.nodes[*weight].needs_grad {
                    let cols = im2col_1d(&self.nodes[*input].data, *in_c, *n, *ksize);
                    let mut dw = vec![R::zero(); out_c * ck];
                    mm_a_bt_acc(&g, &cols, *out_c, *n, ck, &mut dw);
                    self.add_grad(*weight, &dw);
                }
                if self.nodes[*input].needs_grad {
                    let mut dcols = vec![R::zero(); ck * n];
                    mm_at_b_acc(&self.nodes[*weight].data, &g, ck, *out_c, *n, &mut dcols);
                    let mut din = vec![R::zero(); in_c * n];
                    col2im_1d_acc(&dcols, *in_c, *n, *ksize, &mut din);
                    self.add_grad(*input, &din);
                }
            }
            Op::Tanh(a) => {
                let da: Vec<R> = self.nodes[i]
                    .data
                    .iter()
                    .zip(&self.nodes[i].grad)
                    .map(|(y, g)| (R::one() - *y * *y) * *g)
                    .collect();
                self.add_grad(*a, &da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<R> = self.nodes[i]
                    .data
                    .iter()
                    .zip(&self.nodes[i].grad)
                    .map(|(y, g)| *y * (R::one() - *y) * *g)
                    .collect();
                self.add_grad(*a, &da);
            }
            Op::Relu(a) => {
                let z = R::zero();
                let da: Vec<R> = self.nodes[*a]
                    .data
                    .iter()
                    .zip(&self.nodes[i].grad)
                    .map(|(x, g)| if *x > z { *g } else { z })
                    .collect();
                self.add_grad(*a, &da);
            }
            Op::SoftmaxRows { input, rows, cols } => {
                let mut da = vec![R::zero(); rows * cols];
                for r in 0..*rows {
                    let y = &self.nodes[i].data[r * cols..(r + 1) * cols];
                    let g = &self.nodes[i].grad[r * cols..(r + 1) * cols];
                    let mut dot = R::zero();
                    for (yy, gg) in y.iter().zip(g) {
                        dot = dot + *yy * *gg;
                    }
                    let dst = &mut da[r * cols..(r + 1) * cols];
                    for ((d, yy), gg) in dst.iter_mut().zip(y).zip(g) {
                        *d = *yy * (*gg - dot);
                    }
                }
                self.add_grad(*input, &da);
            }
            Op::GlobalAvgPool { input, ch, len } => {
                let inv = R::from_f64(1.0 / *len as f64);
                let mut da = vec![R::zero(); ch * len];
                for c in 0..*ch {
                    let g = self.nodes[i].grad[c] * inv;
                    for d in &mut da[c * len..(c + 1) * len] {
                        *d = g;
                    }
                }
                self.add_grad(*input, &da);
            }
            Op::Concat0(inputs) => {
                let mut offset = 0usize;
                let g = self.nodes[i].grad.clone();
                for a in inputs {
                    let len = self.nodes[*a].data.len();
                    let part = g[offset..offset + len].to_vec();
                    self.add_grad(*a, &part);
                    offset += len;
                }
            }
            Op::Slice { input, offset, len } => {
                let mut da = vec![R::zero(); self.nodes[*input].data.len()];
                da[*offset..offset + len].copy_from_slice(&self.nodes[i].grad);
                self.add_grad(*input, &da);
            }
            Op::SliceCols {
                input,
                rows,
                cols,
                c0,
                c1,
            } => {
                let width = c1 - c0;
                let mut da = vec![R::zero(); rows * cols];
                for r in 0..*rows {
                    for c in 0..width {
                        da[r * cols + c0 + c] = self.nodes[i].grad[r * width + c];
                    }
                }
                self.add_grad(*input, &da);
            }
            Op::ScaleRows {
                mat,
                scales,
                rows,
                cols,
            } => {
                let g = self.nodes[i].grad.clone();
                if self.nodes[*mat].needs_grad {
                    let mut dm = vec![R::zero(); rows * cols];
                    for r in 0..*rows {
                        let s = self.nodes[*scales].data[r];
                        for c in 0..*cols {
                            dm[r * cols + c] = s * g[r * cols + c];
                        }
                    }
                    self.add_grad(*mat, &dm);
                }
                if self.nodes[*scales].needs_grad {
                    let mut ds = vec![R::zero(); *rows];
                    for r in 0..*rows {
                        let mut s = R::zero();
                        for c in 0..*cols {
                            s = s + self.nodes[*mat].data[r * cols + c] * g[r * cols + c];
                        }
                        ds[r] = s;
                    }
                    self.add_grad(*scales, &ds);
                }
            }
            Op::Reshape(a) => {
                let g = self.nodes[i].grad.clone();
                self.add_grad(*a, &g);
            }
            Op::PermuteRows {
                input,
                rows,
                cols,
                perm,
            } => {
                let g = &self.nodes[i].grad;
                let mut da = vec![R::zero(); rows * cols];
                for (r, &p) in perm.iter().enumerate() {
                    for c in 0..*cols {
                        da[p * cols + c] = da[p * cols + c] + g[r * cols + c];
                    }
                }
                self.add_grad(*input, &da);
            }
            Op::Transpose2d { input, rows, cols } => {
                let g = &self.nodes[i].grad;
                let mut da = vec![R::zero(); rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        da[r * cols + c] = g[c * rows + r];
                    }
                }
                self.add_grad(*input, &da);
            }
            Op::Mse(a, b) => {
                let n = self.nodes[*a].data.len();
                let scale = self.nodes[i].grad[0] * R::from_f64(2.0 / n as f64);
                if self.nodes[*a].needs_grad {
                    let da: Vec<R> = self.nodes[*a]
                        .data
                        .iter()
                        .zip(&self.nodes[*b].data)
                        .map(|(x, y)| (*x - *y) * scale)
                        .collect();
                    self.add_grad(*a, &da);
                }
                if self.nodes[*b].needs_grad {
                    let db: Vec<R> = self.nodes[*a]
                        .data
                        .iter()
                        .zip(&self.nodes[*b].data)
                        .map(|(x, y)| (*y - *x) * scale)
                        .collect();
                    self.add_grad(*b, &db);
                }
            }
            Op::MeanAll(a) => {
                let n = self.nodes[*a].data.len();
                let g = self.nodes[i].grad[0] * R::from_f64(1.0 / n as f64);
                let da = vec![g; n];
                self.add_grad(*a, &da);
            }
            Op::GaussHeatmap {
                keypoints,
                ch,
                h,
                w,
                sigma,
            } => {
                let inv_s2 = R::from_f64(1.0 / (sigma * sigma));
                let mut dk = vec![R::zero(); ch * 2];
                for c in 0..*ch {
                    let kx = self.nodes[*keypoints].data[c * 2];
                    let ky = self.nodes[*keypoints].data[c * 2 + 1];
                    let mut sx = R::zero();
                    let mut sy = R::zero();
                    for i2 in 0..*h {
                        let gy = grid_coord::<R>(i2, *h);
                        for j in 0..*w {
                            let gx = grid_coord::<R>(j, *w);
                            let y = self.nodes[i].data[c * h * w + i2 * w + j];
                            let g = self.nodes[i].grad[c * h * w + i2 * w + j];
                            sx = sx + y * (gx - kx) * inv_s2 * g;
                            sy = sy + y * (gy - ky) * inv_s2 * g;
                        }
                    }
                    dk[c * 2] = sx;
                    dk[c * 2 + 1] = sy;
                }
                self.add_grad(*keypoints, &dk);
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "Leaf",
        Op::Add(..) => "Add",
        Op::Mul(..) => "Mul",
        Op::Scale(..) => "Scale",
        Op::Matmul { .. } => "Matmul",
        Op::Conv2d { .. } => "Conv2d",
        Op::ConvT2d { .. } => "ConvT2d",
        Op::Conv1d { .. } => "Conv1d",
        Op::Tanh(..) => "Tanh",
        Op::Sigmoid(..) => "Sigmoid",
        Op::Relu(..) => "Relu",
        Op::SoftmaxRows { .. } => "SoftmaxRows",
        Op::GlobalAvgPool { .. } => "GlobalAvgPool",
        Op::Concat0(..) => "Concat0",
        Op::Slice { .. } => "Slice",
        Op::SliceCols { .. } => "SliceCols",
        Op::ScaleRows { .. } => "ScaleRows",
        Op::Reshape(..) => "Reshape",
        Op::PermuteRows { .. } => "PermuteRows",
        Op::Transpose2d { .. } => "Transpose2d",
        Op::Mse(..) => "Mse",
        Op::MeanAll(..) => "MeanAll",
        Op::GaussHeatmap { .. } => "GaussHeatmap",
    }
}

/// Endpoint-inclusive coordinate grid over `[-1, 1]` with `n` samples.
#[inline]
pub fn grid_coord<R: Real>(i: usize, n: usize) -> R {
    if n <= 1 {
        R::zero()
    } else {
        R::from_f64(-1.0 + 2.0 * i as f64 / (n - 1) as f64)
    }
}

/// Parameter-name to tape-variable lookup produced by [`Tape::load_params`].
pub struct LoadedParams {
    map: std::collections::HashMap<String, Var>,
}

impl LoadedParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not loaded on tape"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data)
    }

    /// Deterministic pseudo-target so op outputs see a non-uniform gradient.
    fn target_like(tape: &mut Tape<f64>, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| ((i as f64) * 0.7).sin() * 0.5).collect();
        tape.constant(shape.to_vec(), data)
    }

    /// FD-checks every tracked parameter of `params` against reverse mode.
    fn check_grads<F>(params: &ParamSet<f64>, build: F)
    where
        F: Fn(&mut Tape<f64>, &LoadedParams) -> Var + Sync,
    {
        let loss_fn = |p: &ParamSet<f64>| {
            let mut tape = Tape::new();
            let lp = tape.load_params(p);
            let v = build(&mut tape, &lp);
            tape.scalar(v)
        };
        let mut analytic = params.clone();
        {
            let mut tape = Tape::new();
            let lp = tape.load_params(params);
            let v = build(&mut tape, &lp);
            tape.backward(v).unwrap();
            tape.harvest_grads(&mut analytic);
        }
        let report = finite_diff_check(params, &analytic, 1e-4, loss_fn);
        assert!(report.checked > 0, "no gradients above floor");
        assert!(report.max_rel_err < 1e-4, "{report}");
    }

    fn params_from(pairs: &[(&str, Tensor<f64>)]) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        for (name, t) in pairs {
            ps.insert(name, t.clone());
        }
        ps
    }

    // ── Forward value oracles ────────────────────────────────────────────

    /// Direct-summation same-padded conv2d used as an independent oracle.
    #[allow(clippy::too_many_arguments)]
    fn conv2d_bruteforce(
        input: &[f64],
        weight: &[f64],
        bias: &[f64],
        in_c: usize,
        h: usize,
        w: usize,
        out_c: usize,
        k: usize,
        stride: usize,
    ) -> Vec<f64> {
        let (oh, ow) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; out_c * oh * ow];
        for oc in 0..out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias[oc];
                    for ic in 0..in_c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * stride) as isize + ki as isize - pad;
                                let ix = (ox * stride) as isize + kj as isize - pad;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    s += input[ic * h * w + iy as usize * w + ix as usize]
                                        * weight[oc * in_c * k * k + ic * k * k + ki * k + kj];
                                }
                            }
                        }
                    }
                    out[oc * oh * ow + oy * ow + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_all_ones_center_is_nine() {
        let mut tape = Tape::<f64>::new();
        let img = tape.constant(vec![1, 3, 3], vec![1.0; 9]);
        let w = tape.constant(vec![1, 9], vec![1.0; 9]);
        let b = tape.constant(vec![1], vec![0.0]);
        let out = tape.conv2d(img, w, b, 3, 1).unwrap();
        assert_eq!(tape.value(out)[4], 9.0);
        // full map against the direct-summation oracle
        let oracle = conv2d_bruteforce(&[1.0; 9], &[1.0; 9], &[0.0], 1, 3, 3, 1, 3, 1);
        assert_eq!(tape.value(out), &oracle[..]);
    }

    #[test]
    fn conv2d_matches_bruteforce_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &stride in &[1usize, 2] {
            let (in_c, h, w, out_c, k) = (3, 6, 5, 4, 3);
            let input = rand_tensor(&[in_c, h, w], &mut rng);
            let weight = rand_tensor(&[out_c, in_c * k * k], &mut rng);
            let bias = rand_tensor(&[out_c], &mut rng);
            let mut tape = Tape::new();
            let iv = tape.constant(input.shape.clone(), input.data.clone());
            let wv = tape.constant(weight.shape.clone(), weight.data.clone());
            let bv = tape.constant(bias.shape.clone(), bias.data.clone());
            let out = tape.conv2d(iv, wv, bv, k, stride).unwrap();
            let oracle = conv2d_bruteforce(
                &input.data, &weight.data, &bias.data, in_c, h, w, out_c, k, stride,
            );
            for (a, b) in tape.value(out).iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_transpose_matches_direct_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (in_c, h, w, out_c, k, s) = (2, 3, 4, 3, 3, 2);
        let input = rand_tensor(&[in_c, h, w], &mut rng);
        let weight = rand_tensor(&[in_c, out_c * k * k], &mut rng);
        let bias = rand_tensor(&[out_c], &mut rng);
        let (oh, ow) = (h * s, w * s);
        let pad = (k / 2) as isize;
        let mut oracle = vec![0.0; out_c * oh * ow];
        for oc in 0..out_c {
            for v in &mut oracle[oc * oh * ow..(oc + 1) * oh * ow] {
                *v = bias.data[oc];
            }
        }
        for ic in 0..in_c {
            for iy in 0..h {
                for ix in 0..w {
                    for oc in 0..out_c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let y = (iy * s) as isize + ki as isize - pad;
                                let x = (ix * s) as isize + kj as isize - pad;
                                if y >= 0 && y < oh as isize && x >= 0 && x < ow as isize {
                                    oracle[oc * oh * ow + y as usize * ow + x as usize] +=
                                        input.data[ic * h * w + iy * w + ix]
                                            * weight.data
                                                [ic * out_c * k * k + oc * k * k + ki * k + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut tape = Tape::new();
        let iv = tape.constant(input.shape.clone(), input.data.clone());
        let wv = tape.constant(weight.shape.clone(), weight.data.clone());
        let bv = tape.constant(bias.shape.clone(), bias.data.clone());
        let out = tape.conv2d_transpose(iv, wv, bv, k, s).unwrap();
        for (a, b) in tape.value(out).iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_input_gives_uniform_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1, 4], vec![2.5; 4]);
        let s = tape.softmax_rows(x, 1, 4).unwrap();
        for v in tape.value(s) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_concentrates_on_dominant_logit() {
        let mut tape = Tape::<f64>::new();
        let mut data = vec![0.0; 8];
        data[3] = 50.0;
        let x = tape.constant(vec![1, 8], data);
        let s = tape.softmax_rows(x, 1, 8).unwrap();
        // weight exceeds 1 - 1e-20: check via the complementary mass, which
        // stays representable where 1 - 1e-20 itself rounds to 1.0
        let rest: f64 = tape.value(s).iter().enumerate().filter(|(i, _)| *i != 3).map(|(_, v)| v).sum();
        assert!(rest < 1e-20, "rest = {rest}");
        assert!((1.0 - tape.value(s)[3]) < 1e-20);
    }

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![5], vec![0.3, -0.7, 1.1, 0.0, 9.4]);
        let y = tape.constant(vec![5], vec![0.3, -0.7, 1.1, 0.0, 9.4]);
        let l = tape.mse(x, y).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    // ── Backward basics ──────────────────────────────────────────────────

    #[test]
    fn quadratic_gradient_is_two_w() {
        let ps = params_from(&[("w", Tensor::new(vec![2], vec![1.0, 2.0]))]);
        let mut tape = Tape::new();
        let lp = tape.load_params(&ps);
        let w = lp.var("w");
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.mean_all(sq);
        let loss = tape.scale(loss, 2.0); // sum = 2 * mean for len-2
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w), &[2.0, 4.0]);
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let ps = params_from(&[("w", Tensor::new(vec![1], vec![0.0]))]);
        let mut tape = Tape::new();
        let lp = tape.load_params(&ps);
        let y = tape.tanh(lp.var("w"));
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(lp.var("w")), &[1.0]);
    }

    #[test]
    fn repeated_backward_accumulates_exactly_twice() {
        let ps = params_from(&[("w", Tensor::new(vec![2], vec![0.4, -1.2]))]);
        let mut tape = Tape::new();
        let lp = tape.load_params(&ps);
        let w = lp.var("w");
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.mean_all(sq);
        tape.backward(loss).unwrap();
        let once: Vec<f64> = tape.grad(w).to_vec();
        tape.backward(loss).unwrap();
        let twice: Vec<f64> = tape.grad(w).to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let ps = params_from(&[("w", Tensor::new(vec![2], vec![1.0, 2.0]))]);
        let mut tape = Tape::new();
        let lp = tape.load_params(&ps);
        let w = lp.var("w");
        assert!(matches!(
            tape.backward(w),
            Err(crate::diffcore::DiffError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn shape_mismatch_diagnostic_names_op_and_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(vec![2], vec![0.0; 2]);
        let b = tape.constant(vec![3], vec![0.0; 3]);
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    // ── Finite-difference checks per op kind ─────────────────────────────

    #[test]
    fn fd_elementwise_and_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // keep relu inputs away from the kink
        let mut a = rand_tensor(&[6], &mut rng);
        for v in &mut a.data {
            *v = v.signum() * (v.abs() + 0.1);
        }
        let b = rand_tensor(&[6], &mut rng);
        let ps = params_from(&[("a", a), ("b", b)]);
        check_grads(&ps, |tape, lp| {
            let a = lp.var("a");
            let b = lp.var("b");
            let sum = tape.add(a, b).unwrap();
            let prod = tape.mul(sum, a).unwrap();
            let sc = tape.scale(prod, 0.7);
            let t = tape.tanh(sc);
            let s = tape.sigmoid(t);
            let r = tape.relu(a);
            let both = tape.add(s, r).unwrap();
            let tgt = target_like(tape, &[6]);
            tape.mse(both, tgt).unwrap()
        });
    }

    #[test]
    fn fd_matmul_matrix_and_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let ps = params_from(&[
            ("a", rand_tensor(&[3, 4], &mut rng)),
            ("b", rand_tensor(&[4, 2], &mut rng)),
            ("x", rand_tensor(&[4], &mut rng)),
        ]);
        check_grads(&ps, |tape, lp| {
            let m = tape.matmul(lp.var("a"), lp.var("b")).unwrap();
            let v = tape.matmul(lp.var("a"), lp.var("x")).unwrap();
            let lm = {
                let tgt = target_like(tape, &[3, 2]);
                tape.mse(m, tgt).unwrap()
            };
            let lv = {
                let tgt = target_like(tape, &[3]);
                tape.mse(v, tgt).unwrap()
            };
            tape.add(lm, lv).unwrap()
        });
    }

    #[test]
    fn fd_conv2d_strides() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for &stride in &[1usize, 2] {
            let (in_c, h, w, out_c, k) = (2, 6, 6, 3, 3);
            let ps = params_from(&[
                ("x", rand_tensor(&[in_c, h, w], &mut rng)),
                ("w", rand_tensor(&[out_c, in_c * k * k], &mut rng)),
                ("b", rand_tensor(&[out_c], &mut rng)),
            ]);
            check_grads(&ps, move |tape, lp| {
                let y = tape
                    .conv2d(lp.var("x"), lp.var("w"), lp.var("b"), k, stride)
                    .unwrap();
                let sh = tape.shape(y).to_vec();
                let tgt = target_like(tape, &sh);
                tape.mse(y, tgt).unwrap()
            });
        }
    }

    #[test]
    fn fd_conv2d_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let (in_c, h, w, out_c, k, s) = (3, 4, 4, 2, 3, 2);
        let ps = params_from(&[
            ("x", rand_tensor(&[in_c, h, w], &mut rng)),
            ("w", rand_tensor(&[in_c, out_c * k * k], &mut rng)),
            ("b", rand_tensor(&[out_c], &mut rng)),
        ]);
        check_grads(&ps, move |tape, lp| {
            let y = tape
                .conv2d_transpose(lp.var("x"), lp.var("w"), lp.var("b"), k, s)
                .unwrap();
            let sh = tape.shape(y).to_vec();
            let tgt = target_like(tape, &sh);
            tape.mse(y, tgt).unwrap()
        });
    }

    #[test]
    fn fd_conv1d_including_short_signals() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for &(n, k) in &[(9usize, 3usize), (9, 5), (2, 5)] {
            let (in_c, out_c) = (2, 3);
            let ps = params_from(&[
                ("x", rand_tensor(&[in_c, n], &mut rng)),
                ("w", rand_tensor(&[out_c, in_c * k], &mut rng)),
                ("b", rand_tensor(&[out_c], &mut rng)),
            ]);
            check_grads(&ps, move |tape, lp| {
                let y = tape.conv1d(lp.var("x"), lp.var("w"), lp.var("b"), k).unwrap();
                let sh = tape.shape(y).to_vec();
                let tgt = target_like(tape, &sh);
                tape.mse(y, tgt).unwrap()
            });
        }
    }

    #[test]
    fn fd_softmax_pool_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let ps = params_from(&[("x", rand_tensor(&[3, 5], &mut rng))]);
        check_grads(&ps, |tape, lp| {
            let sm = tape.softmax_rows(lp.var("x"), 3, 5).unwrap();
            let gap = tape.global_avg_pool(lp.var("x"), 3, 5).unwrap();
            let l1 = {
                let tgt = target_like(tape, &[3, 5]);
                tape.mse(sm, tgt).unwrap()
            };
            let l2 = {
                let tgt = target_like(tape, &[3]);
                tape.mse(gap, tgt).unwrap()
            };
            let l3 = tape.mean_all(sm);
            let a = tape.add(l1, l2).unwrap();
            tape.add(a, l3).unwrap()
        });
    }

    #[test]
    fn fd_shape_surgery_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let ps = params_from(&[
            ("x", rand_tensor(&[4, 3], &mut rng)),
            ("y", rand_tensor(&[2, 3], &mut rng)),
            ("s", rand_tensor(&[6], &mut rng)),
        ]);
        check_grads(&ps, |tape, lp| {
            let cat = tape.concat0(&[lp.var("x"), lp.var("y")]).unwrap();
            let sl = tape.slice(cat, 3, 12, vec![4, 3]).unwrap();
            let sc = tape.slice_cols(cat, 6, 3, 1, 3).unwrap();
            let rs = tape.reshape(sc, vec![6, 2]).unwrap();
            let tp = tape.transpose2d(rs).unwrap();
            let back = tape.transpose2d(tp).unwrap();
            let scaled = tape.scale_rows(back, lp.var("s")).unwrap();
            let l1 = {
                let tgt = target_like(tape, &[4, 3]);
                tape.mse(sl, tgt).unwrap()
            };
            let l2 = {
                let tgt = target_like(tape, &[6, 2]);
                tape.mse(scaled, tgt).unwrap()
            };
            tape.add(l1, l2).unwrap()
        });
    }

    #[test]
    fn fd_batched_convs_and_permute() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let (in_c, b, h, w, out_c, k) = (2, 3, 6, 6, 4, 3);
        let ps = params_from(&[
            ("x", rand_tensor(&[in_c, b, h, w], &mut rng)),
            ("w", rand_tensor(&[out_c, in_c * k * k], &mut rng)),
            ("bb", rand_tensor(&[out_c], &mut rng)),
            ("wt", rand_tensor(&[out_c, 2 * k * k], &mut rng)),
            ("bt", rand_tensor(&[2], &mut rng)),
        ]);
        let perm: std::sync::Arc<Vec<usize>> = std::sync::Arc::new(
            // interleave (c, b) -> (b, c) for the conv output rows
            (0..out_c * b)
                .map(|r| {
                    let (bb, cc) = (r / out_c, r % out_c);
                    cc * b + bb
                })
                .collect(),
        );
        check_grads(&ps, move |tape, lp| {
            let y = tape
                .conv2d(lp.var("x"), lp.var("w"), lp.var("bb"), k, 2)
                .unwrap();
            let yt = tape
                .conv2d_transpose(y, lp.var("wt"), lp.var("bt"), k, 2)
                .unwrap();
            let sh = tape.shape(yt).to_vec();
            let l1 = {
                let tgt = target_like(tape, &sh);
                tape.mse(yt, tgt).unwrap()
            };
            let (oh, ow) = (3, 3);
            let yv = tape.reshape(y, vec![out_c * b, oh * ow]).unwrap();
            let pr = tape.permute_rows(yv, perm.clone()).unwrap();
            let l2 = {
                let tgt = target_like(tape, &[out_c * b, oh * ow]);
                tape.mse(pr, tgt).unwrap()
            };
            tape.add(l1, l2).unwrap()
        });
    }

    #[test]
    fn batched_conv_matches_per_frame_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (in_c, b, h, w, out_c, k, s) = (2, 4, 6, 5, 3, 3, 2);
        let x = rand_tensor(&[in_c, b, h, w], &mut rng);
        let wt = rand_tensor(&[out_c, in_c * k * k], &mut rng);
        let bias = rand_tensor(&[out_c], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.shape.clone(), x.data.clone());
        let wv = tape.constant(wt.shape.clone(), wt.data.clone());
        let bv = tape.constant(bias.shape.clone(), bias.data.clone());
        let batched = tape.conv2d(xv, wv, bv, k, s).unwrap();
        let (oh, ow) = (conv_out_extent(h, s), conv_out_extent(w, s));
        for frame in 0..b {
            let mut single = vec![0.0; in_c * h * w];
            for c in 0..in_c {
                let src = (c * b + frame) * h * w;
                single[c * h * w..(c + 1) * h * w]
                    .copy_from_slice(&x.data[src..src + h * w]);
            }
            let sv = tape.constant(vec![in_c, h, w], single);
            let sout = tape.conv2d(sv, wv, bv, k, s).unwrap();
            for oc in 0..out_c {
                for q in 0..oh * ow {
                    let batched_v = tape.value(batched)[(oc * b + frame) * oh * ow + q];
                    let single_v = tape.value(sout)[oc * oh * ow + q];
                    assert_eq!(batched_v, single_v);
                }
            }
        }
    }

    #[test]
    fn fd_gauss_heatmap() {
        let ps = params_from(&[(
            "kp",
            Tensor::new(vec![2, 2], vec![0.2, -0.3, -0.6, 0.5]),
        )]);
        check_grads(&ps, |tape, lp| {
            let hm = tape.gauss_heatmap(lp.var("kp"), 8, 8, 0.3).unwrap();
            let tgt = target_like(tape, &[2, 8, 8]);
            tape.mse(hm, tgt).unwrap()
        });
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let x = rand_tensor(&[2, 8, 8], &mut rng);
            let w = rand_tensor(&[4, 2 * 9], &mut rng);
            let b = rand_tensor(&[4], &mut rng);
            let mut tape = Tape::new();
            let xv = tape.constant(x.shape.clone(), x.data.clone());
            let wv = tape.constant(w.shape.clone(), w.data.clone());
            let bv = tape.constant(b.shape.clone(), b.data.clone());
            let y = tape.conv2d(xv, wv, bv, 3, 2).unwrap();
            let t = tape.tanh(y);
            tape.value(t).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
