//! Small deterministic numerics layer: flat parameter buffers, dense kernels
//! for the networks, Adam, a counter-based RNG and a finite-difference oracle.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat `f32` storage with a logical shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBuffer {
    values: Vec<f32>,
    shape: Vec<usize>,
}

impl ParamBuffer {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            values: vec![0.0; n],
            shape: shape.to_vec(),
        }
    }

    pub fn from_vec(values: Vec<f32>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::shape(format!("{shape:?} ({n} values)"), values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::OutOfRange {
                what: "parameter",
                detail: format!("non-finite value at index {i}"),
            });
        }
        Ok(Self {
            values,
            shape: shape.to_vec(),
        })
    }

    /// One-dimensional buffer.
    pub fn from_flat(values: Vec<f32>) -> Result<Self> {
        let n = values.len();
        Self::from_vec(values, &[n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.values
    }
}

/// `W·x + b` for a weight buffer of shape `[out, in]`.
pub fn linear_forward(x: &[f32], weight: &ParamBuffer, bias: &[f32]) -> Result<Vec<f32>> {
    let &[out, inp] = weight.shape() else {
        return Err(Error::shape("rank-2 weight", format!("{:?}", weight.shape())));
    };
    if x.len() != inp {
        return Err(Error::shape(format!("input of length {inp}"), x.len()));
    }
    if bias.len() != out {
        return Err(Error::shape(format!("bias of length {out}"), bias.len()));
    }
    let w = weight.as_slice();
    Ok((0..out)
        .map(|r| {
            let row = &w[r * inp..(r + 1) * inp];
            row.iter().zip(x).fold(bias[r], |acc, (a, b)| acc + a * b)
        })
        .collect())
}

/// `Y = X·Wᵀ + b` for a row-major batch `X` (`rows × inner`) and a weight
/// matrix `W` (`out × inner`).
pub(crate) fn batch_affine(
    x: &[f32],
    rows: usize,
    inner: usize,
    w: &[f32],
    b: &[f32],
    out: usize,
    y: &mut [f32],
) {
    debug_assert_eq!(x.len(), rows * inner);
    debug_assert_eq!(w.len(), out * inner);
    debug_assert_eq!(y.len(), rows * out);
    for row in y.chunks_exact_mut(out) {
        row.copy_from_slice(b);
    }
    if rows == 0 || out == 0 || inner == 0 {
        return;
    }
    // SAFETY: slice lengths checked above; strides describe exactly those slices.
    unsafe {
        matrixmultiply::sgemm(
            rows,
            inner,
            out,
            1.0,
            x.as_ptr(),
            inner as isize,
            1,
            w.as_ptr(),
            1,
            inner as isize,
            1.0,
            y.as_mut_ptr(),
            out as isize,
            1,
        );
    }
}

/// Accumulates `dW += dYᵀ·X` and `db += Σ_rows dY`.
pub(crate) fn batch_affine_grad_params(
    dy: &[f32],
    x: &[f32],
    rows: usize,
    inner: usize,
    out: usize,
    dw: &mut [f32],
    db: &mut [f32],
) {
    debug_assert_eq!(dy.len(), rows * out);
    debug_assert_eq!(x.len(), rows * inner);
    debug_assert_eq!(dw.len(), out * inner);
    for row in dy.chunks_exact(out) {
        for (acc, g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    if rows == 0 || out == 0 || inner == 0 {
        return;
    }
    // SAFETY: see batch_affine.
    unsafe {
        matrixmultiply::sgemm(
            out,
            rows,
            inner,
            1.0,
            dy.as_ptr(),
            1,
            out as isize,
            x.as_ptr(),
            inner as isize,
            1,
            1.0,
            dw.as_mut_ptr(),
            inner as isize,
            1,
        );
    }
}

/// `dX = dY·W` (overwrites `dx`).
pub(crate) fn batch_affine_grad_input(
    dy: &[f32],
    w: &[f32],
    rows: usize,
    inner: usize,
    out: usize,
    dx: &mut [f32],
) {
    debug_assert_eq!(dx.len(), rows * inner);
    if rows == 0 || inner == 0 {
        return;
    }
    if out == 0 {
        dx.fill(0.0);
        return;
    }
    // SAFETY: see batch_affine.
    unsafe {
        matrixmultiply::sgemm(
            rows,
            out,
            inner,
            1.0,
            dy.as_ptr(),
            out as isize,
            1,
            w.as_ptr(),
            inner as isize,
            1,
            0.0,
            dx.as_mut_ptr(),
            inner as isize,
            1,
        );
    }
}

/// First/second moment state for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub lr: f32,
}

impl AdamState {
    pub fn new(len: usize, lr: f32, beta1: f32, beta2: f32, eps: f32) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1,
            beta2,
            eps,
            lr,
        }
    }

    /// HyperINR optimizer settings (lr 1e-3, eps 1e-10).
    pub fn hyperinr(len: usize) -> Self {
        Self::new(len, 1e-3, 0.9, 0.999, 1e-10)
    }

    /// Teacher optimizer settings (lr 1e-5, eps 1e-8).
    pub fn teacher(len: usize) -> Self {
        Self::new(len, 1e-5, 0.9, 0.999, 1e-8)
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One bias-corrected Adam update. `weight_decay` is added to the gradient
/// as an L2 term. A non-finite gradient leaves params and state untouched.
pub fn adam_step(
    params: &mut [f32],
    grads: &[f32],
    state: &mut AdamState,
    weight_decay: f32,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::shape(
            format!("{} params/grads/moments", params.len()),
            format!("{} grads, {} moments", grads.len(), state.len()),
        ));
    }
    if !(state.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", state.lr)));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            step: state.step,
            reason: format!("non-finite gradient at index {i}"),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - (b1 as f64).powi(t);
    let bc2 = 1.0 - (b2 as f64).powi(t);
    let step_size = (state.lr as f64 / bc1) as f32;
    let bc2_sqrt = bc2.sqrt() as f32;
    let eps = state.eps;
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let g = g + weight_decay * *p;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
    }
    Ok(())
}

/// Central finite differences of `f` at `params`, in 64-bit precision.
pub fn finite_diff_grad<F>(f: F, params: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Counter-based seeded generator (ChaCha8). Independent streams of the same
/// seed never overlap.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A fresh generator on another stream of the same seed.
    pub fn fork(&self, stream: u64) -> Self {
        Self::with_stream(self.seed, stream)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lo + (hi - lo) * u
    }

    /// Uniform integer in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        use rand::Rng as _;
        self.inner.gen_range(0..n)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        use rand_distr::Distribution;
        rand_distr::StandardNormal.sample(&mut self.inner)
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// Relative error used by gradient checks; falls back to absolute error
/// when both values are tiny.
pub fn relative_error(analytic: f64, reference: f64) -> f64 {
    let scale = analytic.abs().max(reference.abs());
    if scale < 1e-6 {
        (analytic - reference).abs()
    } else {
        (analytic - reference).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_and_hand_matrix() {
        let eye = ParamBuffer::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        assert_eq!(linear_forward(&[3.0, 4.0], &eye, &[0.0, 0.0]).unwrap(), vec![3.0, 4.0]);

        let w = ParamBuffer::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(linear_forward(&[1.0, 1.0], &w, &[1.0, 1.0]).unwrap(), vec![4.0, 8.0]);

        let zeros = ParamBuffer::zeros(&[1, 3]);
        assert_eq!(linear_forward(&[7.0, -2.0, 9.0], &zeros, &[5.0]).unwrap(), vec![5.0]);
    }

    #[test]
    fn linear_rejects_bad_dims() {
        let w = ParamBuffer::zeros(&[2, 3]);
        assert!(matches!(linear_forward(&[1.0; 2], &w, &[0.0; 2]), Err(Error::Shape { .. })));
        assert!(matches!(linear_forward(&[1.0; 3], &w, &[0.0; 3]), Err(Error::Shape { .. })));
    }

    #[test]
    fn param_buffer_invariants() {
        assert!(ParamBuffer::from_vec(vec![0.0; 5], &[2, 3]).is_err());
        assert!(ParamBuffer::from_vec(vec![f32::NAN], &[1]).is_err());
        assert_eq!(ParamBuffer::zeros(&[2, 3]).len(), 6);
    }

    #[test]
    fn batch_affine_matches_linear_forward() {
        let mut rng = Rng::new(3);
        let (rows, inner, out) = (5, 7, 3);
        let x: Vec<f32> = (0..rows * inner).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let w: Vec<f32> = (0..out * inner).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let b: Vec<f32> = (0..out).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let mut y = vec![0.0; rows * out];
        batch_affine(&x, rows, inner, &w, &b, out, &mut y);
        let wb = ParamBuffer::from_vec(w.clone(), &[out, inner]).unwrap();
        for r in 0..rows {
            let single = linear_forward(&x[r * inner..(r + 1) * inner], &wb, &b).unwrap();
            for (a, e) in y[r * out..(r + 1) * out].iter().zip(&single) {
                assert!((a - e).abs() < 1e-5);
            }
        }

        // dW = dYᵀX, dX = dY·W against explicit loops.
        let dy: Vec<f32> = (0..rows * out).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let mut dw = vec![0.0; out * inner];
        let mut db = vec![0.0; out];
        batch_affine_grad_params(&dy, &x, rows, inner, out, &mut dw, &mut db);
        let mut dx = vec![0.0; rows * inner];
        batch_affine_grad_input(&dy, &w, rows, inner, out, &mut dx);
        for o in 0..out {
            let expect_b: f32 = (0..rows).map(|r| dy[r * out + o]).sum();
            assert!((db[o] - expect_b).abs() < 1e-5);
            for i in 0..inner {
                let e: f32 = (0..rows).map(|r| dy[r * out + o] * x[r * inner + i]).sum();
                assert!((dw[o * inner + i] - e).abs() < 1e-5);
            }
        }
        for r in 0..rows {
            for i in 0..inner {
                let e: f32 = (0..out).map(|o| dy[r * out + o] * w[o * inner + i]).sum();
                assert!((dx[r * inner + i] - e).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![0.3, -1.2, 4.0];
        let before = p.clone();
        let mut st = AdamState::hyperinr(3);
        adam_step(&mut p, &[0.0; 3], &mut st, 0.0).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = vec![1.0f32];
        let mut st = AdamState::hyperinr(1);
        adam_step(&mut p, &[1.0], &mut st, 0.0).unwrap();
        let expected = 1.0 - 1e-3 * 1.0 / (1.0 + 1e-10);
        assert!((p[0] as f64 - expected).abs() < 1e-7, "{}", p[0]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = vec![0.5f32, -0.25, 2.0];
            let mut st = AdamState::teacher(3);
            for k in 0..10 {
                let g = [k as f32 * 0.1, -0.3, 1e-3];
                adam_step(&mut p, &g, &mut st, 1e-6).unwrap();
            }
            (p, st)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(sa, sb);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = vec![1.0f32, 2.0];
        let mut st = AdamState::hyperinr(2);
        let err = adam_step(&mut p, &[0.1, f32::INFINITY], &mut st, 0.0).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn adam_weight_decay_pulls_toward_zero() {
        let mut p = vec![2.0f32];
        let mut st = AdamState::teacher(1);
        adam_step(&mut p, &[0.0], &mut st, 1e-6).unwrap();
        assert!(p[0] < 2.0);
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-4);
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, 2.0], 1e-4);
        assert_eq!(g, vec![0.0, 0.0]);
        let g = finite_diff_grad(|p| p.iter().sum(), &[1.0, -2.0, 0.5], 1e-4);
        for v in g {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rng_streams() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        let mut c = Rng::new(8);
        let sa: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let sb: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        let sc: Vec<u64> = (0..16).map(|_| c.next_u64()).collect();
        assert_eq!(sa, sb);
        assert_ne!(sa, sc);
        let mut f1 = a.fork(1);
        let mut f2 = a.fork(2);
        assert_ne!(f1.next_u64(), f2.next_u64());
        for _ in 0..1000 {
            let u = a.uniform(-2.0, 3.0);
            assert!((-2.0..3.0).contains(&u));
        }
    }
}
