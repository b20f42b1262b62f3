//! Finite-difference oracle for recorded gradients.
//!
//! The checker never trusts `backward`: it re-evaluates the loss from
//! scratch at nudged points and compares central differences against the
//! accumulated analytic gradient, coordinate by coordinate.

use super::{Tensor, TensorError};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// One coordinate's analytic/numeric comparison.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    /// Entry attaining `max_rel_error`.
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Largest relative error among entries of one parameter.
    pub fn max_for(&self, param: &str) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.param == param)
            .map(|e| e.rel_error)
            .fold(0.0, f64::max)
    }
}

/// Deliberate analytic-gradient corruption, used as a negative control to
/// prove the checker can fail.
#[derive(Debug, Clone, Copy)]
pub struct Corruption {
    /// Position in the `params` slice.
    pub param: usize,
    /// Coordinate within that parameter.
    pub index: usize,
    /// Added to the analytic value before comparison.
    pub delta: f64,
}

/// Compare backward-pass gradients of `loss` against central differences
/// `(f(x+h) - f(x-h)) / 2h` at every coordinate of every listed parameter.
///
/// `loss` must rebuild the graph from the current parameter values on each
/// call and must be deterministic; two evaluations at the same point are
/// compared bit for bit before any differencing. Relative error per
/// coordinate is `|a - n| / max(1e-8, |a| + |n|)`. The closure may use any
/// error type that tensor errors convert into.
pub fn grad_check<F, E>(
    mut loss: F,
    params: &[(String, Tensor)],
    step: f64,
) -> std::result::Result<GradCheckReport, E>
where
    F: FnMut() -> std::result::Result<Tensor, E>,
    E: From<TensorError>,
{
    grad_check_corrupted(&mut loss, params, step, None)
}

/// `grad_check` with an optional injected analytic error. `grad_check`
/// itself is this with no corruption.
pub fn grad_check_corrupted<F, E>(
    loss: &mut F,
    params: &[(String, Tensor)],
    step: f64,
    corruption: Option<Corruption>,
) -> std::result::Result<GradCheckReport, E>
where
    F: FnMut() -> std::result::Result<Tensor, E>,
    E: From<TensorError>,
{
    assert!(step > 0.0, "step must be positive");
    let first = scalar_loss(loss)?;
    let second = scalar_loss(loss)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministicLoss { first, second }.into());
    }

    for (_, p) in params {
        p.zero_grad();
    }
    loss()?.backward()?;
    let mut analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    if let Some(c) = corruption {
        analytic[c.param][c.index] += c.delta;
    }

    let mut report = GradCheckReport::default();
    for (pi, (name, p)) in params.iter().enumerate() {
        for i in 0..p.numel() {
            p.nudge(i, step);
            let plus = scalar_loss(loss)?;
            p.nudge(i, -2.0 * step);
            let minus = scalar_loss(loss)?;
            p.nudge(i, step);
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi][i];
            let rel_error = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            if rel_error > report.max_rel_error {
                report.max_rel_error = rel_error;
            }
            report.entries.push(GradCheckEntry {
                param: name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_error,
            });
        }
    }
    Ok(report)
}

fn scalar_loss<F, E>(loss: &mut F) -> std::result::Result<f64, E>
where
    F: FnMut() -> std::result::Result<Tensor, E>,
    E: From<TensorError>,
{
    let t = loss()?;
    if !t.is_scalar() {
        return Err(TensorError::NotScalar { shape: t.shape().to_vec() }.into());
    }
    Ok(t.item())
}

/// One op's result from `op_gradient_sweep`.
#[derive(Debug, Clone)]
pub struct OpSweepRow {
    pub op: &'static str,
    pub max_rel_error: f64,
}

/// Gradient-check every differentiable op on small inputs drawn from `seed`.
/// Non-scalar outputs are folded through an inner product with a random
/// cotangent so every output element feeds the loss. Relu inputs are kept
/// away from the kink; all other draws are safe at any seed.
pub fn op_gradient_sweep(seed: u64) -> std::result::Result<Vec<OpSweepRow>, TensorError> {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rv = move |n: usize, lo: f64, hi: f64| -> Vec<f64> {
        (0..n).map(|_| lo + (hi - lo) * r.gen::<f64>()).collect()
    };
    let named = |pairs: &[(&str, &Tensor)]| -> Vec<(String, Tensor)> {
        pairs.iter().map(|(n, t)| (n.to_string(), (*t).clone())).collect()
    };
    fn push_row<F>(
        rows: &mut Vec<OpSweepRow>,
        op: &'static str,
        params: &[(String, Tensor)],
        mut f: F,
    ) -> std::result::Result<(), TensorError>
    where
        F: FnMut() -> std::result::Result<Tensor, TensorError>,
    {
        let report = grad_check_corrupted(&mut f, params, DEFAULT_STEP, None)?;
        rows.push(OpSweepRow { op, max_rel_error: report.max_rel_error });
        Ok(())
    }
    let mut rows: Vec<OpSweepRow> = Vec::new();

    let a = Tensor::param(vec![2, 3], rv(6, -1.0, 1.0))?;
    let b = Tensor::param(vec![2, 3], rv(6, -1.0, 1.0))?;
    let cot6 = Tensor::vector(rv(6, -1.0, 1.0))?;
    let ab = named(&[("a", &a), ("b", &b)]);
    push_row(&mut rows, "add", &ab, || a.add(&b)?.flatten()?.inner_product(&cot6))?;
    push_row(&mut rows, "subtract", &ab, || a.sub(&b)?.flatten()?.inner_product(&cot6))?;
    push_row(&mut rows, "elementwise_multiply", &ab, || {
        a.mul(&b)?.flatten()?.inner_product(&cot6)
    })?;
    push_row(&mut rows, "scalar_multiply", &named(&[("a", &a)]), || {
        a.scalar_mul(1.7)?.flatten()?.inner_product(&cot6)
    })?;

    let m1 = Tensor::param(vec![3, 4], rv(12, -1.0, 1.0))?;
    let m2 = Tensor::param(vec![4, 2], rv(8, -1.0, 1.0))?;
    let cot_mm = Tensor::vector(rv(6, -1.0, 1.0))?;
    push_row(&mut rows, "matmul", &named(&[("m1", &m1), ("m2", &m2)]), || {
        m1.matmul(&m2)?.flatten()?.inner_product(&cot_mm)
    })?;
    let v = Tensor::param(vec![4], rv(4, -1.0, 1.0))?;
    let cot_mv = Tensor::vector(rv(3, -1.0, 1.0))?;
    push_row(&mut rows, "matmul_vector", &named(&[("m1", &m1), ("v", &v)]), || {
        m1.matmul(&v)?.inner_product(&cot_mv)
    })?;

    let img = Tensor::param(vec![4, 4, 2], rv(32, -1.0, 1.0))?;
    let ker = Tensor::param(vec![3, 3, 2, 2], rv(36, -1.0, 1.0))?;
    let cot_conv = Tensor::vector(rv(32, -1.0, 1.0))?;
    push_row(&mut rows, "conv2d", &named(&[("img", &img), ("ker", &ker)]), || {
        img.conv2d(&ker)?.flatten()?.inner_product(&cot_conv)
    })?;

    // Magnitudes in [0.2, 1.0] with random signs: bounded away from the kink
    // so the difference quotient is valid.
    let off_kink: Vec<f64> = rv(6, 0.2, 1.0)
        .into_iter()
        .zip(rv(6, 0.0, 1.0))
        .map(|(v, s)| if s < 0.5 { -v } else { v })
        .collect();
    let rk = Tensor::param(vec![6], off_kink)?;
    push_row(&mut rows, "relu", &named(&[("rk", &rk)]), || {
        rk.relu()?.inner_product(&cot6)
    })?;

    let s = Tensor::param(vec![6], rv(6, -1.0, 1.0))?;
    push_row(&mut rows, "sigmoid", &named(&[("s", &s)]), || {
        s.sigmoid()?.inner_product(&cot6)
    })?;
    push_row(&mut rows, "exp", &named(&[("s", &s)]), || {
        s.exp()?.inner_product(&cot6)
    })?;
    let pos = Tensor::param(vec![6], rv(6, 0.5, 1.5))?;
    push_row(&mut rows, "log", &named(&[("pos", &pos)]), || {
        pos.log()?.inner_product(&cot6)
    })?;

    let fm = Tensor::param(vec![3, 3, 2], rv(18, -1.0, 1.0))?;
    let cot_c = Tensor::vector(rv(2, -1.0, 1.0))?;
    push_row(&mut rows, "global_average_pool", &named(&[("fm", &fm)]), || {
        fm.global_avg_pool()?.inner_product(&cot_c)
    })?;
    let cot_18 = Tensor::vector(rv(18, -1.0, 1.0))?;
    push_row(&mut rows, "flatten", &named(&[("fm", &fm)]), || {
        fm.flatten()?.inner_product(&cot_18)
    })?;

    let c1 = Tensor::param(vec![3], rv(3, -1.0, 1.0))?;
    let c2 = Tensor::param(vec![2, 2], rv(4, -1.0, 1.0))?;
    let cot7 = Tensor::vector(rv(7, -1.0, 1.0))?;
    push_row(&mut rows, "concat", &named(&[("c1", &c1), ("c2", &c2)]), || {
        super::concat(&[c1.clone(), c2.clone()])?.inner_product(&cot7)
    })?;

    let u = Tensor::param(vec![5], rv(5, -1.0, 1.0))?;
    let w = Tensor::param(vec![5], rv(5, -1.0, 1.0))?;
    push_row(&mut rows, "inner_product", &named(&[("u", &u), ("w", &w)]), || {
        u.inner_product(&w)
    })?;
    push_row(&mut rows, "reduce_sum", &named(&[("u", &u)]), || u.reduce_sum())?;
    push_row(&mut rows, "reduce_mean", &named(&[("u", &u)]), || u.reduce_mean())?;

    let mp = Tensor::param(vec![4, 4, 2], rv(32, -1.0, 1.0))?;
    let cot_mp = Tensor::vector(rv(8, -1.0, 1.0))?;
    push_row(&mut rows, "max_pool", &named(&[("mp", &mp)]), || {
        mp.max_pool2()?.flatten()?.inner_product(&cot_mp)
    })?;

    let bc = Tensor::param(vec![3], rv(3, -1.0, 1.0))?;
    let cot_bc = Tensor::vector(rv(12, -1.0, 1.0))?;
    push_row(&mut rows, "broadcast_channel", &named(&[("bc", &bc)]), || {
        bc.broadcast_channel(2, 2)?.flatten()?.inner_product(&cot_bc)
    })?;

    let logits = Tensor::param(vec![4], rv(4, -1.0, 1.0))?;
    push_row(&mut rows, "softmax_cross_entropy", &named(&[("logits", &logits)]), || {
        logits.softmax_cross_entropy(1)
    })?;
    let z = Tensor::param(vec![5], rv(5, -1.0, 1.0))?;
    push_row(&mut rows, "log1p_sum_exp", &named(&[("z", &z)]), || z.log1p_sum_exp())?;

    Ok(rows)
}
