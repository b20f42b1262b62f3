//! Operation kinds, forward kernels and their vector-Jacobian products.
//!
//! `eval_op` is the single forward path: both op construction and record
//! replay run through it, so replayed values cannot drift from stored ones.

use std::cell::Ref;

use super::{Recipe, Result, Tensor, TensorError};

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    /// `[m,k] x [k,n] -> [m,n]`, or `[m,k] x [k] -> [m]`.
    MatMul,
    /// Input `[W,H,Cin]`, kernel `[k,k,Cin,Cout]`, stride 1, zero padding
    /// `(k-1)/2`, odd k. Output `[W,H,Cout]`.
    Conv2d,
    Relu,
    Sigmoid,
    Exp,
    Log,
    /// `[W,H,C] -> [C]`, mean over the spatial grid.
    GlobalAvgPool,
    /// Row-major flatten to rank 1.
    Flatten,
    /// Flatten every input and concatenate into one vector.
    Concat,
    /// `[n] . [n] -> scalar`.
    InnerProduct,
    ReduceSum,
    ReduceMean,
    /// 2x2 window, stride 2; spatial dims must be even.
    MaxPool2,
    /// `[C] -> [W,H,C]`, replicating each channel over the spatial grid.
    BroadcastChannel { w: usize, h: usize },
    /// Stable `-log softmax(x)[label]`, `[K] -> scalar`.
    SoftmaxCrossEntropy { label: usize },
    /// Stable `log(1 + sum_j exp(x_j))`, `[n] -> scalar`.
    LogOnePlusSumExp,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "subtract",
            Op::Mul => "elementwise_multiply",
            Op::ScalarMul(_) => "scalar_multiply",
            Op::MatMul => "matmul",
            Op::Conv2d => "conv2d",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::GlobalAvgPool => "global_average_pool",
            Op::Flatten => "flatten",
            Op::Concat => "concat",
            Op::InnerProduct => "inner_product",
            Op::ReduceSum => "reduce_sum",
            Op::ReduceMean => "reduce_mean",
            Op::MaxPool2 => "max_pool",
            Op::BroadcastChannel { .. } => "broadcast_channel",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::LogOnePlusSumExp => "log1p_sum_exp",
        }
    }
}

fn mismatch(op: &Op, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op: op.name(), detail }
}

fn want_inputs(op: &Op, inputs: &[(&[usize], &[f64])], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(mismatch(op, format!("expected {} inputs, got {}", n, inputs.len())));
    }
    Ok(())
}

fn same_shape(op: &Op, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(mismatch(op, format!("operand shapes {:?} and {:?} differ", a, b)));
    }
    Ok(())
}

/// Sigmoid via the numerically tame split form.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Forward kernel for one op. Validates shapes, computes the output, and
/// rejects non-finite results.
pub(crate) fn eval_op(op: &Op, inputs: &[(&[usize], &[f64])]) -> Result<(Vec<usize>, Vec<f64>)> {
    let (shape, data): (Vec<usize>, Vec<f64>) = match op {
        Op::Add | Op::Sub | Op::Mul => {
            want_inputs(op, inputs, 2)?;
            let (sa, a) = inputs[0];
            let (sb, b) = inputs[1];
            same_shape(op, sa, sb)?;
            let data = a
                .iter()
                .zip(b)
                .map(|(x, y)| match op {
                    Op::Add => x + y,
                    Op::Sub => x - y,
                    _ => x * y,
                })
                .collect();
            (sa.to_vec(), data)
        }
        Op::ScalarMul(s) => {
            want_inputs(op, inputs, 1)?;
            let (sa, a) = inputs[0];
            (sa.to_vec(), a.iter().map(|x| s * x).collect())
        }
        Op::MatMul => {
            want_inputs(op, inputs, 2)?;
            let (sa, a) = inputs[0];
            let (sb, b) = inputs[1];
            let (m, k) = match sa {
                [m, k] => (*m, *k),
                _ => return Err(mismatch(op, format!("left operand must be a matrix, got {:?}", sa))),
            };
            let (kb, n, vec_rhs) = match sb {
                [k2, n] => (*k2, *n, false),
                [k2] => (*k2, 1, true),
                _ => return Err(mismatch(op, format!("right operand must be rank 1 or 2, got {:?}", sb))),
            };
            if k != kb {
                return Err(mismatch(op, format!("inner dims {} vs {}", k, kb)));
            }
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        out[i * n + j] += av * b[p * n + j];
                    }
                }
            }
            let shape = if vec_rhs { vec![m] } else { vec![m, n] };
            (shape, out)
        }
        Op::Conv2d => {
            want_inputs(op, inputs, 2)?;
            let (si, input) = inputs[0];
            let (sk, kernel) = inputs[1];
            let [w, h, cin] = *si else {
                return Err(mismatch(op, format!("input must be [W,H,C], got {:?}", si)));
            };
            let [kw, kh, kci, cout] = *sk else {
                return Err(mismatch(op, format!("kernel must be [k,k,Cin,Cout], got {:?}", sk)));
            };
            if kw != kh || kw % 2 == 0 {
                return Err(mismatch(op, format!("kernel must be square with odd side, got {}x{}", kw, kh)));
            }
            if kci != cin {
                return Err(mismatch(op, format!("kernel Cin {} vs input C {}", kci, cin)));
            }
            if kw > w || kh > h {
                return Err(mismatch(op, format!("kernel {}x{} exceeds input {}x{}", kw, kh, w, h)));
            }
            let pad = (kw - 1) / 2;
            let mut out = vec![0.0; w * h * cout];
            for ow in 0..w {
                for oh in 0..h {
                    for dw in 0..kw {
                        let iw = ow + dw;
                        if iw < pad || iw - pad >= w {
                            continue;
                        }
                        let iw = iw - pad;
                        for dh in 0..kh {
                            let ih = oh + dh;
                            if ih < pad || ih - pad >= h {
                                continue;
                            }
                            let ih = ih - pad;
                            let in_base = (iw * h + ih) * cin;
                            let k_base = (dw * kh + dh) * cin;
                            let out_base = (ow * h + oh) * cout;
                            for ci in 0..cin {
                                let iv = input[in_base + ci];
                                if iv == 0.0 {
                                    continue;
                                }
                                let kb = (k_base + ci) * cout;
                                for co in 0..cout {
                                    out[out_base + co] += iv * kernel[kb + co];
                                }
                            }
                        }
                    }
                }
            }
            (vec![w, h, cout], out)
        }
        Op::Relu => {
            want_inputs(op, inputs, 1)?;
            let (sa, a) = inputs[0];
            (sa.to_vec(), a.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect())
        }
        Op::Sigmoid => {
            want_inputs(op, inputs, 1)?;
            let (sa, a) = inputs[0];
            (sa.to_vec(), a.iter().map(|&x| sigmoid(x)).collect())
        }
        Op::Exp => {
            want_inputs(op, inputs, 1)?;
            let (sa, a) = inputs[0];
            (sa.to_vec(), a.iter().map(|x| x.exp()).collect())
        }
        Op::Log => {
            want_inputs(op, inputs, 1)?;
            let (sa, a) = inputs[0];
            (sa.to_vec(), a.iter().map(|x| x.ln()).collect())
        }
        Op::GlobalAvgPool => {
            want_inputs(op, inputs, 1)?;
            let (sa, a) = inputs[0];
            let [w, h, c] = *sa else {
                return Err(mismatch(op, format!("input must be [W,H,C], got {:?}", sa)));
            };
            let mut out = vec![0.0; c];
            for cell in 0..w * h {
                for ci in 0..c {
                    out[ci] += a[cell * c + ci];
                }
            }
            let norm = 1.0 / (w * h) as f64;
            for v in &mut out {
                *v *= norm;
            }
            (vec![c], out)
        }
        Op::Flatten => {
            want_inputs(op, inputs, 1)?;
            let (_, a) = inputs[0];
            (vec![a.len()], a.to_vec())
        }
        Op::Concat => {
            if inputs.is_empty() {
                return Err(mismatch(op, "needs at least one input".into()));
            }
            let mut out = Vec::new();
            for (_, a) in inputs {
                out.extend_from_slice(a);
            }
            (vec![out.len()], out)
        }
        Op::InnerProduct => {
            want_inputs(op, inputs, 2)?;
            let (sa, a) = inputs[0];
            let (sb, b) = inputs[1];
            if sa.len() != 1 || sb.len() != 1 || sa != sb {
                return Err(mismatch(op, format!("needs equal-length vectors, got {:?} and {:?}", sa, sb)));
            }
            let dot = a.iter().zip(b).map(|(x, y)| x * y).sum();
            (vec![], vec![dot])
        }
        Op::ReduceSum => {
            want_inputs(op, inputs, 1)?;
            let (_, a) = inputs[0];
            (vec![], vec![a.iter().sum()])
        }
        Op::ReduceMean => {
            want_inputs(op, inputs, 1)?;
            let (_, a) = inputs[0];
            (vec![], vec![a.iter().sum::<f64>() / a.len() as f64])
        }
        Op::MaxPool2 => {
            want_inputs(op, inputs, 1)?;
            let (sa, a) = inputs[0];
            let [w, h, c] = *sa else {
                return Err(mismatch(op, format!("input must be [W,H,C], got {:?}", sa)));
            };
            if w % 2 != 0 || h % 2 != 0 {
                return Err(mismatch(op, format!("spatial dims must be even, got {}x{}", w, h)));
            }
            let (ow, oh) = (w / 2, h / 2);
            let mut out = vec![0.0; ow * oh * c];
            for pw in 0..ow {
                for ph in 0..oh {
                    for ci in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        for dw in 0..2 {
                            for dh in 0..2 {
                                let v = a[((2 * pw + dw) * h + 2 * ph + dh) * c + ci];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        out[(pw * oh + ph) * c + ci] = best;
                    }
                }
            }
            (vec![ow, oh, c], out)
        }
        Op::BroadcastChannel { w, h } => {
            want_inputs(op, inputs, 1)?;
            let (sa, a) = inputs[0];
            let [c] = *sa else {
                return Err(mismatch(op, format!("input must be [C], got {:?}", sa)));
            };
            let mut out = vec![0.0; w * h * c];
            for cell in 0..w * h {
                out[cell * c..(cell + 1) * c].copy_from_slice(a);
            }
            (vec![*w, *h, c], out)
        }
        Op::SoftmaxCrossEntropy { label } => {
            want_inputs(op, inputs, 1)?;
            let (sa, a) = inputs[0];
            if sa.len() != 1 || sa[0] < 2 {
                return Err(mismatch(op, format!("logits must be a vector of at least 2, got {:?}", sa)));
            }
            if *label >= a.len() {
                return Err(TensorError::LabelOutOfRange { label: *label, classes: a.len() });
            }
            let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + a.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            (vec![], vec![lse - a[*label]])
        }
        Op::LogOnePlusSumExp => {
            want_inputs(op, inputs, 1)?;
            let (sa, a) = inputs[0];
            if sa.len() != 1 {
                return Err(mismatch(op, format!("input must be a vector, got {:?}", sa)));
            }
            // log(1 + sum exp(x)) = m + log(exp(-m) + sum exp(x - m)), m >= 0
            let m = a.iter().cloned().fold(0.0, f64::max);
            let s = (-m).exp() + a.iter().map(|x| (x - m).exp()).sum::<f64>();
            (vec![], vec![m + s.ln()])
        }
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NumericOverflow { op: op.name() });
    }
    Ok((shape, data))
}

/// Per-input gradients for one recorded op. `None` marks an input whose
/// gradient the caller will not use (untracked inputs are skipped upstream,
/// but kernels here compute every slot; the Option keeps the interface open).
pub(crate) fn backward_op(
    op: &Op,
    inputs: &[Tensor],
    output: &Tensor,
    upstream: &[f64],
) -> Vec<Option<Vec<f64>>> {
    match op {
        Op::Add => vec![Some(upstream.to_vec()), Some(upstream.to_vec())],
        Op::Sub => vec![
            Some(upstream.to_vec()),
            Some(upstream.iter().map(|g| -g).collect()),
        ],
        Op::Mul => {
            let a = inputs[0].data();
            let b = inputs[1].data();
            vec![
                Some(upstream.iter().zip(b.iter()).map(|(g, y)| g * y).collect()),
                Some(upstream.iter().zip(a.iter()).map(|(g, x)| g * x).collect()),
            ]
        }
        Op::ScalarMul(s) => vec![Some(upstream.iter().map(|g| s * g).collect())],
        Op::MatMul => {
            let a = inputs[0].data();
            let b = inputs[1].data();
            let (m, k) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let n = if inputs[1].shape().len() == 2 { inputs[1].shape()[1] } else { 1 };
            // dA = G B^T, dB = A^T G
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += upstream[i * n + j] * b[p * n + j];
                    }
                    da[i * k + p] = acc;
                }
            }
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        db[p * n + j] += av * upstream[i * n + j];
                    }
                }
            }
            vec![Some(da), Some(db)]
        }
        Op::Conv2d => {
            let input = inputs[0].data();
            let kernel = inputs[1].data();
            let [w, h, cin] = *inputs[0].shape() else { unreachable!() };
            let [kw, kh, _, cout] = *inputs[1].shape() else { unreachable!() };
            let pad = (kw - 1) / 2;
            let mut din = vec![0.0; input.len()];
            let mut dk = vec![0.0; kernel.len()];
            for ow in 0..w {
                for oh in 0..h {
                    let out_base = (ow * h + oh) * cout;
                    for dw in 0..kw {
                        let iw = ow + dw;
                        if iw < pad || iw - pad >= w {
                            continue;
                        }
                        let iw = iw - pad;
                        for dh in 0..kh {
                            let ih = oh + dh;
                            if ih < pad || ih - pad >= h {
                                continue;
                            }
                            let ih = ih - pad;
                            let in_base = (iw * h + ih) * cin;
                            let k_base = (dw * kh + dh) * cin;
                            for ci in 0..cin {
                                let kb = (k_base + ci) * cout;
                                let iv = input[in_base + ci];
                                let mut din_acc = 0.0;
                                for co in 0..cout {
                                    let g = upstream[out_base + co];
                                    din_acc += g * kernel[kb + co];
                                    dk[kb + co] += g * iv;
                                }
                                din[in_base + ci] += din_acc;
                            }
                        }
                    }
                }
            }
            vec![Some(din), Some(dk)]
        }
        Op::Relu => {
            let x = inputs[0].data();
            vec![Some(
                upstream
                    .iter()
                    .zip(x.iter())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
            )]
        }
        Op::Sigmoid => {
            let y = output.data();
            vec![Some(upstream.iter().zip(y.iter()).map(|(g, &s)| g * s * (1.0 - s)).collect())]
        }
        Op::Exp => {
            let y = output.data();
            vec![Some(upstream.iter().zip(y.iter()).map(|(g, &e)| g * e).collect())]
        }
        Op::Log => {
            let x = inputs[0].data();
            vec![Some(upstream.iter().zip(x.iter()).map(|(g, &v)| g / v).collect())]
        }
        Op::GlobalAvgPool => {
            let [w, h, c] = *inputs[0].shape() else { unreachable!() };
            let norm = 1.0 / (w * h) as f64;
            let mut dx = vec![0.0; w * h * c];
            for cell in 0..w * h {
                for ci in 0..c {
                    dx[cell * c + ci] = upstream[ci] * norm;
                }
            }
            vec![Some(dx)]
        }
        Op::Flatten => vec![Some(upstream.to_vec())],
        Op::Concat => {
            let mut grads = Vec::with_capacity(inputs.len());
            let mut offset = 0;
            for inp in inputs {
                let n = inp.numel();
                grads.push(Some(upstream[offset..offset + n].to_vec()));
                offset += n;
            }
            grads
        }
        Op::InnerProduct => {
            let a = inputs[0].data();
            let b = inputs[1].data();
            let g = upstream[0];
            vec![
                Some(b.iter().map(|y| g * y).collect()),
                Some(a.iter().map(|x| g * x).collect()),
            ]
        }
        Op::ReduceSum => {
            let n = inputs[0].numel();
            vec![Some(vec![upstream[0]; n])]
        }
        Op::ReduceMean => {
            let n = inputs[0].numel();
            vec![Some(vec![upstream[0] / n as f64; n])]
        }
        Op::MaxPool2 => {
            let a = inputs[0].data();
            let [w, h, c] = *inputs[0].shape() else { unreachable!() };
            let (ow, oh) = (w / 2, h / 2);
            let mut dx = vec![0.0; a.len()];
            for pw in 0..ow {
                for ph in 0..oh {
                    for ci in 0..c {
                        // First maximum in scan order wins, matching forward.
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for dw in 0..2 {
                            for dh in 0..2 {
                                let idx = ((2 * pw + dw) * h + 2 * ph + dh) * c + ci;
                                if a[idx] > best {
                                    best = a[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        dx[best_idx] += upstream[(pw * oh + ph) * c + ci];
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::BroadcastChannel { w, h } => {
            let c = inputs[0].numel();
            let mut dc = vec![0.0; c];
            for cell in 0..w * h {
                for ci in 0..c {
                    dc[ci] += upstream[cell * c + ci];
                }
            }
            vec![Some(dc)]
        }
        Op::SoftmaxCrossEntropy { label } => {
            let x = inputs[0].data();
            let g = upstream[0];
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = x.iter().map(|v| (v - m).exp()).sum();
            let mut dx: Vec<f64> = x.iter().map(|v| g * (v - m).exp() / denom).collect();
            dx[*label] -= g;
            vec![Some(dx)]
        }
        Op::LogOnePlusSumExp => {
            let x = inputs[0].data();
            let g = upstream[0];
            let m = x.iter().cloned().fold(0.0, f64::max);
            let denom = (-m).exp() + x.iter().map(|v| (v - m).exp()).sum::<f64>();
            vec![Some(x.iter().map(|v| g * (v - m).exp() / denom).collect())]
        }
    }
}

fn apply(op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let guards: Vec<Ref<'_, Vec<f64>>> = inputs.iter().map(|t| t.data()).collect();
    let views: Vec<(&[usize], &[f64])> = inputs
        .iter()
        .zip(&guards)
        .map(|(t, g)| (t.shape(), g.as_slice()))
        .collect();
    let (shape, data) = eval_op(&op, &views)?;
    drop(views);
    drop(guards);
    let tracked = inputs.iter().any(|t| t.is_tracked());
    let recipe = tracked.then(|| Recipe { op, inputs: inputs.iter().map(|&t| t.clone()).collect() });
    Ok(Tensor::make(shape, data, false, recipe))
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        apply(Op::Add, &[self, rhs])
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        apply(Op::Sub, &[self, rhs])
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        apply(Op::Mul, &[self, rhs])
    }

    pub fn scalar_mul(&self, s: f64) -> Result<Tensor> {
        apply(Op::ScalarMul(s), &[self])
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        apply(Op::MatMul, &[self, rhs])
    }

    /// Stride-1 zero-padded convolution; kernel layout `[k,k,Cin,Cout]`.
    pub fn conv2d(&self, kernel: &Tensor) -> Result<Tensor> {
        apply(Op::Conv2d, &[self, kernel])
    }

    pub fn relu(&self) -> Result<Tensor> {
        apply(Op::Relu, &[self])
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        apply(Op::Sigmoid, &[self])
    }

    pub fn exp(&self) -> Result<Tensor> {
        apply(Op::Exp, &[self])
    }

    pub fn log(&self) -> Result<Tensor> {
        apply(Op::Log, &[self])
    }

    pub fn global_avg_pool(&self) -> Result<Tensor> {
        apply(Op::GlobalAvgPool, &[self])
    }

    pub fn flatten(&self) -> Result<Tensor> {
        apply(Op::Flatten, &[self])
    }

    pub fn inner_product(&self, rhs: &Tensor) -> Result<Tensor> {
        apply(Op::InnerProduct, &[self, rhs])
    }

    pub fn reduce_sum(&self) -> Result<Tensor> {
        apply(Op::ReduceSum, &[self])
    }

    pub fn reduce_mean(&self) -> Result<Tensor> {
        apply(Op::ReduceMean, &[self])
    }

    pub fn max_pool2(&self) -> Result<Tensor> {
        apply(Op::MaxPool2, &[self])
    }

    /// Replicate a channel vector over a `w x h` spatial grid.
    pub fn broadcast_channel(&self, w: usize, h: usize) -> Result<Tensor> {
        apply(Op::BroadcastChannel { w, h }, &[self])
    }

    /// `-log softmax(logits)[label]` with the log-sum-exp guard.
    pub fn softmax_cross_entropy(&self, label: usize) -> Result<Tensor> {
        apply(Op::SoftmaxCrossEntropy { label }, &[self])
    }

    /// `log(1 + sum_j exp(x_j))` with the max-shift overflow guard.
    pub fn log1p_sum_exp(&self) -> Result<Tensor> {
        apply(Op::LogOnePlusSumExp, &[self])
    }
}

/// Concatenate tensors (flattened row-major) into one vector.
pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = parts.iter().collect();
    apply(Op::Concat, &refs)
}
