//! Minimal dense tensor storage and the row-major kernels the encoder uses.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

/// Floating-point element type. Training runs in `f32`; gradient checks
/// run the same code in `f64`.
pub trait Real: Float + Sum + Default + Debug + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Option<Self> {
        (shape.iter().product::<usize>() == data.len()).then(|| Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[F] {
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let w = self.shape[1];
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::of(x.f64())).collect(),
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: F, other: &Tensor<F>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: F) {
        for a in &mut self.data {
            *a = *a * alpha;
        }
    }

    pub fn sum_squares(&self) -> F {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `out[n×m] = x[n×k] · w[k×m] + b[m]`
pub(crate) fn linear<F: Real>(x: &[F], w: &[F], b: &[F], n: usize, k: usize, m: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(b);
    }
    for i in 0..n {
        let xi = &x[i * k..(i + 1) * k];
        let oi = &mut out[i * m..(i + 1) * m];
        for (a, &xa) in xi.iter().enumerate() {
            if xa == F::zero() {
                continue;
            }
            let wa = &w[a * m..(a + 1) * m];
            for (o, &wv) in oi.iter_mut().zip(wa) {
                *o = *o + xa * wv;
            }
        }
    }
    out
}

/// Backward of [`linear`]: accumulates into `dw`, `db`, and (when given) `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<F: Real>(
    x: &[F],
    w: &[F],
    dy: &[F],
    n: usize,
    k: usize,
    m: usize,
    dw: &mut [F],
    db: &mut [F],
    mut dx: Option<&mut [F]>,
) {
    for i in 0..n {
        let dyi = &dy[i * m..(i + 1) * m];
        for (d, &g) in db.iter_mut().zip(dyi) {
            *d = *d + g;
        }
        let xi = &x[i * k..(i + 1) * k];
        for a in 0..k {
            let wa = &w[a * m..(a + 1) * m];
            let dwa = &mut dw[a * m..(a + 1) * m];
            let xa = xi[a];
            for (dwv, &g) in dwa.iter_mut().zip(dyi) {
                *dwv = *dwv + xa * g;
            }
            if let Some(dx) = dx.as_deref_mut() {
                dx[i * k + a] = dx[i * k + a] + dot(wa, dyi);
            }
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [F::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + x * y;
    }
    let s4 = [lanes[0] + lanes[4], lanes[1] + lanes[5], lanes[2] + lanes[6], lanes[3] + lanes[7]];
    (s4[0] + s4[2]) + (s4[1] + s4[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_hand_product() {
        // [1 2] · [[1 0 2], [0 1 3]] + [1 1 1] = [2 3 9]
        let y = linear(&[1.0f64, 2.0], &[1.0, 0.0, 2.0, 0.0, 1.0, 3.0], &[1.0; 3], 1, 2, 3);
        assert_eq!(y, vec![2.0, 3.0, 9.0]);
    }

    #[test]
    fn linear_backward_matches_transpose_products() {
        let x = [1.0f64, 2.0];
        let w = [1.0, 0.0, 2.0, 0.0, 1.0, 3.0];
        let dy = [1.0, -1.0, 0.5];
        let mut dw = [0.0; 6];
        let mut db = [0.0; 3];
        let mut dx = [0.0; 2];
        linear_backward(&x, &w, &dy, 1, 2, 3, &mut dw, &mut db, Some(&mut dx));
        assert_eq!(db, dy);
        assert_eq!(dw, [1.0, -1.0, 0.5, 2.0, -2.0, 1.0]);
        assert_eq!(dx, [2.0, 0.5]);
    }
}
