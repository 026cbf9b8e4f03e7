//! Seeded random streams and the sampling distributions used by the
//! initializers, data generators and Mixup.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution as _, StandardNormal};

use crate::error::{FixupError, Result};
use crate::tensor::Tensor;

/// ChaCha8 stream keyed by a 64-bit seed. The stream is portable, so a seed
/// reproduces the same draws on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream, e.g. one per network or per epoch.
    pub fn fork(&mut self, tag: u64) -> Rng {
        let s = self.inner.random::<u64>() ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Rng::new(s)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn beta(&mut self, a: f64, b: f64) -> Result<f64> {
        let d = Beta::new(a, b).map_err(|e| FixupError::Domain(format!("beta({a}, {b}): {e}")))?;
        Ok(d.sample(&mut self.inner))
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.random_range(0..=i);
            p.swap(i, j);
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Distribution {
    Normal { mean: f64, std: f64 },
    Uniform { low: f64, high: f64 },
    /// Rows (or columns, whichever is fewer) orthonormal, times `gain`.
    Orthogonal { gain: f64 },
}

pub fn sample(dist: &Distribution, shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    match *dist {
        Distribution::Normal { mean, std } => {
            if !(std >= 0.0) {
                return Err(FixupError::Domain(format!("normal std must be >= 0, got {std}")));
            }
            let data = (0..n).map(|_| mean + std * rng.normal()).collect();
            Tensor::new(shape.to_vec(), data)
        }
        Distribution::Uniform { low, high } => {
            if !(low <= high) {
                return Err(FixupError::Domain(format!("uniform bounds {low} > {high}")));
            }
            let data = (0..n).map(|_| low + (high - low) * rng.uniform()).collect();
            Tensor::new(shape.to_vec(), data)
        }
        Distribution::Orthogonal { gain } => {
            let &[rows, cols] = shape else {
                return Err(FixupError::UnsupportedShape(format!(
                    "orthogonal sampling needs a 2-D shape, got {shape:?}; fold trailing axes first"
                )));
            };
            let q = orthogonal(rows, cols, rng)?;
            Ok(q.scale(gain))
        }
    }
}

/// Orthonormal `rows × cols` matrix from the QR factor of a Gaussian matrix,
/// with `R`'s diagonal made positive.
fn orthogonal(rows: usize, cols: usize, rng: &mut Rng) -> Result<Tensor> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let g: Vec<f64> = (0..tall * short).map(|_| rng.normal()).collect();
    // Columns of the tall×short matrix `g`, orthonormalised by Gram-Schmidt
    // with one reorthogonalisation pass. Dividing by the positive norm is the
    // sign-fixed QR convention.
    let mut q: Vec<Vec<f64>> = (0..short).map(|j| (0..tall).map(|i| g[i * short + j]).collect()).collect();
    for j in 0..short {
        for _ in 0..2 {
            for p in 0..j {
                let (prev, cur) = q.split_at_mut(j);
                let d: f64 = prev[p].iter().zip(cur[0].iter()).map(|(a, b)| a * b).sum();
                for (c, a) in cur[0].iter_mut().zip(prev[p].iter()) {
                    *c -= d * a;
                }
            }
        }
        let norm = q[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(FixupError::Domain("degenerate Gaussian draw in orthogonal sampling".into()));
        }
        q[j].iter_mut().for_each(|v| *v /= norm);
    }
    let mut out = Tensor::zeros(&[rows, cols]);
    let d = out.data_mut();
    for (j, col) in q.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            if rows >= cols {
                d[i * cols + j] = v;
            } else {
                d[j * cols + i] = v;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, matmul_nt, matmul_tn};

    #[test]
    fn normal_zero_std_is_zero() {
        let t = sample(&Distribution::Normal { mean: 0.0, std: 0.0 }, &[3, 4], &mut Rng::new(0)).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn orthogonal_square_and_rectangular() {
        let mut rng = Rng::new(42);
        let q = sample(&Distribution::Orthogonal { gain: 1.0 }, &[4, 4], &mut rng).unwrap();
        let qtq = matmul_tn(&q, &q).unwrap();
        assert!(qtq.sub(&Tensor::eye(4)).unwrap().max_abs() <= 1e-10);

        let tall = sample(&Distribution::Orthogonal { gain: 1.0 }, &[7, 3], &mut rng).unwrap();
        assert!(matmul_tn(&tall, &tall).unwrap().sub(&Tensor::eye(3)).unwrap().max_abs() <= 1e-10);
        let wide = sample(&Distribution::Orthogonal { gain: 1.0 }, &[3, 7], &mut rng).unwrap();
        assert!(matmul_nt(&wide, &wide).unwrap().sub(&Tensor::eye(3)).unwrap().max_abs() <= 1e-10);
        let _ = matmul(&wide, &tall).unwrap();
    }

    #[test]
    fn orthogonal_rejects_higher_rank() {
        let err = sample(&Distribution::Orthogonal { gain: 1.0 }, &[2, 2, 3], &mut Rng::new(1));
        assert!(matches!(err, Err(FixupError::UnsupportedShape(_))));
    }

    #[test]
    fn normal_moments() {
        let t = sample(&Distribution::Normal { mean: 0.0, std: 1.0 }, &[100_000], &mut Rng::new(7)).unwrap();
        let n = t.len() as f64;
        let m = t.sum() / n;
        let v = t.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        assert!(m.abs() <= 0.02, "{m}");
        assert!((0.98..=1.02).contains(&v), "{v}");
    }

    #[test]
    fn same_seed_same_stream() {
        let d = Distribution::Uniform { low: -1.0, high: 2.0 };
        let a = sample(&d, &[64], &mut Rng::new(9)).unwrap();
        let b = sample(&d, &[64], &mut Rng::new(9)).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&v| (-1.0..2.0).contains(&v)));
    }

    #[test]
    fn invalid_parameters() {
        let mut rng = Rng::new(0);
        assert!(sample(&Distribution::Normal { mean: 0.0, std: -1.0 }, &[2], &mut rng).is_err());
        assert!(sample(&Distribution::Uniform { low: 1.0, high: 0.0 }, &[2], &mut rng).is_err());
    }
}
