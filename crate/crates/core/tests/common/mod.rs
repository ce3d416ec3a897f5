//! Shared test utilities: deterministic value streams and the central
//! finite-difference gradient oracle.

#![allow(dead_code)]

use neurovit::Tensor;

/// Small deterministic value stream for fixtures (splitmix-style).
pub struct ValueStream {
    state: u64,
}

impl ValueStream {
    pub fn new(seed: u64) -> Self {
        ValueStream {
            state: seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.unit() * (hi - lo)
    }

    pub fn tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| self.range(lo, hi)).collect()).unwrap()
    }

    pub fn index(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}

/// Central finite-difference step used throughout the gradient suite.
pub const FD_STEP: f64 = 1e-5;
/// Required relative error between analytic and finite-difference grads.
pub const FD_REL_TOL: f64 = 1e-4;

/// Verifies analytic gradients of a scalar function against central finite
/// differences on a sampled subset of coordinates of each input tensor.
///
/// `eval` recomputes the scalar from scratch; `analytic[i]` is the claimed
/// gradient w.r.t. `inputs[i]`. At most `max_coords` coordinates per tensor
/// are probed (deterministically, from `seed`).
pub fn check_gradients(
    label: &str,
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    eval: impl Fn(&[Tensor<f64>]) -> f64,
    max_coords: usize,
    seed: u64,
) {
    assert_eq!(inputs.len(), analytic.len());
    let mut stream = ValueStream::new(seed);
    for (ti, (input, grad)) in inputs.iter().zip(analytic).enumerate() {
        assert_eq!(
            input.shape(),
            grad.shape(),
            "{label}: gradient {ti} shape mismatch"
        );
        let n = input.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| stream.index(n)).collect()
        };
        for c in coords {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[c] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[c] -= FD_STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let an = grad.data()[c];
            let denom = fd.abs().max(an.abs()).max(1e-3);
            let rel = (fd - an).abs() / denom;
            assert!(
                rel <= FD_REL_TOL,
                "{label}: tensor {ti} coord {c}: analytic {an:.9e} vs fd {fd:.9e} (rel {rel:.3e})"
            );
        }
    }
}
