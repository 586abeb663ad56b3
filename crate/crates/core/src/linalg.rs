//! Banded symmetric positive-definite solver used by the diffusion operator,
//! with a conjugate-gradient fallback.
//!
//! The 5-point stencil on the disk interior, ordered row-major, has bandwidth
//! about one grid row, so a dense-band Cholesky factors in O(n * bw^2) and
//! each of the 32 per-gradient solves is a cheap band substitution.

/// Symmetric matrix stored as its lower band: entry (i, j) with
/// `i - bw <= j <= i` lives at `data[i * (bw + 1) + (i - j)]`.
#[derive(Debug, Clone)]
pub struct BandedMatrix {
    pub n: usize,
    pub bw: usize,
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (i - j)
    }

    /// Set the lower-triangle entry (i, j), j <= i.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.data[s] = v;
    }

    /// Symmetric lookup; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        if hi - lo > self.bw {
            0.0
        } else {
            self.data[hi * (self.bw + 1) + (hi - lo)]
        }
    }

    /// y = A x using the symmetric band.
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        let w = self.bw + 1;
        y.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            let row = &self.data[i * w..i * w + (i - lo) + 1];
            let mut acc = row[0] * x[i];
            for j in lo..i {
                let a = row[i - j];
                acc += a * x[j];
                y[j] += a * x[i];
            }
            y[i] += acc;
        }
    }

    /// In-place Cholesky: returns the factor, or None if a pivot is not
    /// strictly positive (matrix not SPD to working precision).
    pub fn cholesky(&self) -> Option<BandedCholesky> {
        let n = self.n;
        let bw = self.bw;
        let w = bw + 1;
        let mut l = self.data.clone();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                // dot of band rows i and j over columns [max(lo, j-bw), j)
                let klo = lo.max(j.saturating_sub(bw));
                let mut s = l[i * w + (i - j)];
                for k in klo..j {
                    s -= l[i * w + (i - k)] * l[j * w + (j - k)];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return None;
                    }
                    l[i * w] = s.sqrt();
                } else {
                    l[i * w + (i - j)] = s / l[j * w];
                }
            }
        }
        Some(BandedCholesky { n, bw, l })
    }
}

/// Lower-triangular Cholesky factor in band storage.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandedCholesky {
    /// Solve A x = b via forward/back substitution.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        let mut x = b.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = x[i];
            for k in lo..i {
                s -= self.l[i * w + (i - k)] * x[k];
            }
            x[i] = s / self.l[i * w];
        }
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            let mut s = x[i];
            for j in i + 1..=hi {
                s -= self.l[j * w + (j - i)] * x[j];
            }
            x[i] = s / self.l[i * w];
        }
        x
    }
}

/// Jacobi-preconditioned conjugate gradient; fallback path when the banded
/// factorization rejects the system. Returns the solution and iteration
/// count, or None if the relative residual never reaches `tol`.
pub fn conjugate_gradient(
    a: &BandedMatrix,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Option<(Vec<f64>, usize)> {
    let n = a.n;
    let diag: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    if diag.iter().any(|&d| !(d > 0.0)) {
        return None;
    }
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if bnorm == 0.0 {
        return Some((vec![0.0; n], 0));
    }
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        a.mul_vec(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            return None;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm <= tol * bnorm {
            return Some((x, it + 1));
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::GaussianStream;

    /// Random diagonally dominant symmetric band matrix (hence SPD).
    fn random_spd(n: usize, bw: usize, seed: u64) -> BandedMatrix {
        let mut rng = GaussianStream::new(seed);
        let mut a = BandedMatrix::zeros(n, bw);
        let mut row_sums = vec![0.0; n];
        for i in 0..n {
            for j in i.saturating_sub(bw)..i {
                let v = rng.next_normal() * 0.3;
                a.set(i, j, v);
                row_sums[i] += v.abs();
                row_sums[j] += v.abs();
            }
        }
        for i in 0..n {
            a.set(i, i, row_sums[i] + 1.0 + rng.next_normal().abs());
        }
        a
    }

    #[test]
    fn cholesky_solves_to_small_residual() {
        let a = random_spd(120, 9, 1);
        let mut rng = GaussianStream::new(2);
        let b: Vec<f64> = (0..120).map(|_| rng.next_normal()).collect();
        let chol = a.cholesky().expect("SPD");
        let x = chol.solve(&b);
        let mut ax = vec![0.0; 120];
        a.mul_vec(&x, &mut ax);
        let res: f64 = ax
            .iter()
            .zip(&b)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        let bn: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(res < 1e-12 * bn, "residual {res}");
    }

    #[test]
    fn cg_agrees_with_cholesky() {
        let a = random_spd(90, 7, 3);
        let mut rng = GaussianStream::new(4);
        let b: Vec<f64> = (0..90).map(|_| rng.next_normal()).collect();
        let xd = a.cholesky().unwrap().solve(&b);
        let (xi, iters) = conjugate_gradient(&a, &b, 1e-12, 2000).unwrap();
        assert!(iters > 0);
        for (p, q) in xd.iter().zip(&xi) {
            assert!((p - q).abs() < 1e-8 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut a = BandedMatrix::zeros(3, 1);
        a.set(0, 0, 1.0);
        a.set(1, 1, -1.0);
        a.set(2, 2, 1.0);
        assert!(a.cholesky().is_none());
    }

    #[test]
    fn symmetric_lookup_matches_both_orders() {
        let a = random_spd(20, 4, 9);
        for i in 0..20 {
            for j in 0..20 {
                assert_eq!(a.get(i, j), a.get(j, i));
            }
        }
    }
}
