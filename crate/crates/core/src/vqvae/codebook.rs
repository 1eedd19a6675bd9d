use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Scalar, Tensor};

/// Assignment placeholder for PAD positions.
pub const NO_CODE: u32 = u32::MAX;

/// Laplace smoothing constant for the EMA counts.
pub const EMA_EPS: f64 = 1e-5;

/// `K x D` code vectors maintained by exponential moving averages.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T = f32> {
    pub vectors: Tensor<T>,
    pub ema_counts: Vec<T>,
    pub ema_sums: Tensor<T>,
    pub decay: f64,
}

/// Output of [`Codebook::quantize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized<T = f32> {
    /// Selected code rows at valid positions, zeros at PAD.
    pub z_q: Tensor<T>,
    /// Code index per row, [`NO_CODE`] at PAD.
    pub assignments: Vec<u32>,
}

/// Squared Euclidean distance with eight independent partial sums.
#[inline]
fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            let d = x[i] - y[i];
            acc[i] = acc[i] + d * d;
        }
    }
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        let d = *x - *y;
        tail = tail + d * d;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

impl<T: Scalar> Codebook<T> {
    /// Entries i.i.d. normal with std `1/sqrt(D)`; counts start at 1 and sums
    /// at the vectors themselves.
    pub fn new<R: Rng + ?Sized>(size: usize, dim: usize, decay: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).unwrap();
        let data = (0..size * dim).map(|_| T::lit(dist.sample(rng))).collect();
        Self::from_vectors(Tensor::from_vec(&[size, dim], data).unwrap(), decay)
    }

    pub fn from_vectors(vectors: Tensor<T>, decay: f64) -> Self {
        Codebook { ema_counts: vec![T::one(); vectors.rows()], ema_sums: vectors.clone(), vectors, decay }
    }

    pub fn size(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Index of the nearest code; ties go to the lowest index.
    pub fn nearest(&self, z: &[T]) -> u32 {
        let mut best = 0u32;
        let mut best_d = T::infinity();
        for k in 0..self.size() {
            let d = sq_dist(z, self.vectors.row(k));
            if d < best_d {
                best_d = d;
                best = k as u32;
            }
        }
        best
    }

    pub fn quantize(&self, z_e: &Tensor<T>, valid: &[bool]) -> Quantized<T> {
        assert_eq!(z_e.rows(), valid.len());
        assert_eq!(z_e.cols(), self.dim());
        let mut z_q = Tensor::zeros(z_e.shape());
        let assignments = (0..z_e.rows())
            .map(|r| {
                if !valid[r] {
                    return NO_CODE;
                }
                let k = self.nearest(z_e.row(r));
                z_q.row_mut(r).copy_from_slice(self.vectors.row(k as usize));
                k
            })
            .collect();
        Quantized { z_q, assignments }
    }

    /// One EMA step over a batch: counts and sums decay by `gamma` and absorb
    /// this batch's assignments; vectors become sums over Laplace-smoothed counts.
    pub fn ema_update(&mut self, z_e: &Tensor<T>, assignments: &[u32]) {
        let (k, d) = (self.size(), self.dim());
        let mut counts = vec![0f64; k];
        let mut sums = vec![0f64; k * d];
        for (r, &a) in assignments.iter().enumerate() {
            if a == NO_CODE {
                continue;
            }
            let a = a as usize;
            counts[a] += 1.0;
            for (s, &v) in sums[a * d..(a + 1) * d].iter_mut().zip(z_e.row(r)) {
                *s += v.to_f64().unwrap();
            }
        }
        let g = self.decay;
        for (c, &n) in self.ema_counts.iter_mut().zip(&counts) {
            *c = T::lit(g * c.to_f64().unwrap() + (1.0 - g) * n);
        }
        for (m, &s) in self.ema_sums.data_mut().iter_mut().zip(&sums) {
            *m = T::lit(g * m.to_f64().unwrap() + (1.0 - g) * s);
        }
        let total: f64 = self.ema_counts.iter().map(|c| c.to_f64().unwrap()).sum();
        let denom = total + k as f64 * EMA_EPS;
        for j in 0..k {
            let smoothed = (self.ema_counts[j].to_f64().unwrap() + EMA_EPS) / denom * total;
            if smoothed <= 0.0 {
                continue;
            }
            let sum_row = self.ema_sums.row(j).to_vec();
            for (v, m) in self.vectors.row_mut(j).iter_mut().zip(sum_row) {
                *v = T::lit(m.to_f64().unwrap() / smoothed);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Codebook<U> {
        Codebook {
            vectors: self.vectors.cast(),
            ema_counts: self.ema_counts.iter().map(|c| U::lit(c.to_f64().unwrap())).collect(),
            ema_sums: self.ema_sums.cast(),
            decay: self.decay,
        }
    }
}

/// Straight-through estimator, forward half: the decoder sees `z_q`.
pub fn straight_through<T: Scalar>(z_e: &Tensor<T>, z_q: &Tensor<T>) -> Tensor<T> {
    assert_eq!(z_e.shape(), z_q.shape());
    z_q.clone()
}

/// Straight-through estimator, backward half: the gradient reaching `z_q`
/// is copied unchanged to `z_e` at quantized (valid) rows.
pub fn straight_through_backward<T: Scalar>(dz_q: &Tensor<T>, valid: &[bool]) -> Tensor<T> {
    let mut dz_e = dz_q.clone();
    for (r, _) in valid.iter().enumerate().filter(|(_, &v)| !v) {
        dz_e.row_mut(r).fill(T::zero());
    }
    dz_e
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn book(rows: &[&[f64]]) -> Codebook<f64> {
        let d = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Codebook::from_vectors(Tensor::from_vec(&[rows.len(), d], data).unwrap(), 0.95)
    }

    fn z(rows: &[&[f64]]) -> Tensor<f64> {
        let d = rows[0].len();
        Tensor::from_vec(&[rows.len(), d], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn nearest_code_small_case() {
        // distances 0.05 vs 1.45
        let b = book(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let q = b.quantize(&z(&[&[0.1, 0.2]]), &[true]);
        assert_eq!(q.assignments, vec![0]);
        assert_eq!(q.z_q.data(), &[0.0, 0.0]);
    }

    #[test]
    fn exact_match_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Codebook::<f64>::new(10, 4, 0.95, &mut rng);
        let row7 = b.vectors.row(7).to_vec();
        let q = b.quantize(&Tensor::from_vec(&[1, 4], row7.clone()).unwrap(), &[true]);
        assert_eq!(q.assignments, vec![7]);
        assert_eq!(q.z_q.data(), &row7[..]);

        let mut t = book(&[&[9.0, 9.0], &[9.0, 9.0], &[1.0, 0.0], &[9.0, 9.0], &[9.0, 9.0], &[-1.0, 0.0]]);
        t.vectors.row_mut(0).copy_from_slice(&[50.0, 50.0]);
        let q = t.quantize(&z(&[&[0.0, 0.0]]), &[true]);
        assert_eq!(q.assignments, vec![2]);
    }

    #[test]
    fn pad_rows_get_sentinel() {
        let b = book(&[&[0.0], &[1.0]]);
        let q = b.quantize(&z(&[&[0.9], &[0.1]]), &[true, false]);
        assert_eq!(q.assignments, vec![1, NO_CODE]);
        assert_eq!(q.z_q.data(), &[1.0, 0.0]);
    }

    #[test]
    fn ema_count_update() {
        let mut b = book(&[&[0.0], &[5.0]]);
        b.ema_counts = vec![10.0, 0.0];
        b.ema_update(&z(&[&[0.1], &[0.2]]), &[0, 0]);
        // 0.95 * 10 + 0.05 * 2
        assert!((b.ema_counts[0] - 9.6).abs() < 1e-12);
    }

    #[test]
    fn unassigned_code_keeps_direction() {
        let mut b = book(&[&[0.0, 0.0], &[3.0, -4.0]]);
        b.ema_update(&z(&[&[0.5, 0.5]]), &[0]);
        let v = b.vectors.row(1);
        // ratio m/N is unchanged; only the smoothing factor differs from 1
        assert!((v[0] / v[1] + 0.75).abs() < 1e-12);
        assert!((v[0] - 3.0).abs() < 1e-3);
        assert!(b.vectors.is_finite());

        let mut dead = book(&[&[0.0], &[2.0]]);
        dead.ema_counts = vec![0.0, 0.0];
        dead.ema_sums.fill(0.0);
        dead.ema_update(&z(&[&[1.0]]), &[NO_CODE]);
        assert!(dead.vectors.is_finite());
    }

    #[test]
    fn ema_converges_geometrically() {
        // m_t = g^t m_0 + (1 - g^t) mu n, N_t = g^t N_0 + (1 - g^t) n
        let (mu, n, g) = (2.5, 4.0, 0.95);
        let mut b = book(&[&[0.0]]);
        let batch = z(&[&[mu], &[mu], &[mu], &[mu]]);
        for t in 1..=60 {
            b.ema_update(&batch, &[0, 0, 0, 0]);
            let gt = f64::powi(g, t);
            let expect = ((1.0 - gt) * mu * n) / (gt + (1.0 - gt) * n);
            assert!((b.vectors.data()[0] - expect).abs() < 1e-9, "t={t}");
        }
    }

    #[test]
    fn straight_through_passes_values_and_gradients() {
        let ze = z(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let zq = z(&[&[0.0, 1.0], &[0.0, 0.0]]);
        assert_eq!(straight_through(&ze, &zq), zq);
        let g = z(&[&[0.5, -1.0], &[2.0, 2.0]]);
        assert_eq!(straight_through_backward(&g, &[true, true]), g);
        assert_eq!(straight_through_backward(&g, &[true, false]).data(), &[0.5, -1.0, 0.0, 0.0]);
    }
}
