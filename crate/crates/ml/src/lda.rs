//! Linear discriminant analysis with a pooled, diagonally-shrunk covariance.

use serde::{Deserialize, Serialize};

use crate::{softmax, MlError, Result};

/// Diagonal shrinkage added to the pooled covariance.
pub const SHRINKAGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaModel {
    pub dim: usize,
    pub n_classes: usize,
    pub class_means: Vec<Vec<f64>>,
    /// Pooled covariance after shrinkage, row-major dim x dim.
    pub pooled_cov: Vec<f64>,
    pub priors: Vec<f64>,
    pub format_version: u32,
}

/// Cholesky factorization (lower), or None if not positive definite.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i * n + j] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solves A x = b given the Cholesky factor of A.
fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0f64; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * n + k] * y[k];
        }
        y[i] = sum / l[i * n + i];
    }
    let mut x = vec![0.0f64; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k * n + i] * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    x
}

/// Trains pooled-covariance LDA. Rows are flat row-major; every class needs
/// at least two rows.
pub fn lda_train(
    data: &[f64],
    dim: usize,
    labels: &[usize],
    n_classes: usize,
) -> Result<LdaModel> {
    if labels.is_empty() || dim == 0 {
        return Err(MlError::EmptyInput("lda_train data"));
    }
    let n = labels.len();
    if data.len() != n * dim {
        return Err(MlError::DimensionMismatch {
            expected: n * dim,
            got: data.len(),
        });
    }
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        if y >= n_classes {
            return Err(MlError::DimensionMismatch {
                expected: n_classes,
                got: y,
            });
        }
        counts[y] += 1;
    }
    for (class, &c) in counts.iter().enumerate() {
        if c < 2 {
            return Err(MlError::ClassTooSmall {
                class,
                needed: 2,
                found: c,
            });
        }
    }

    let mut means = vec![vec![0.0f64; dim]; n_classes];
    for (i, &y) in labels.iter().enumerate() {
        for k in 0..dim {
            means[y][k] += data[i * dim + k];
        }
    }
    for (class, mean) in means.iter_mut().enumerate() {
        for v in mean.iter_mut() {
            *v /= counts[class] as f64;
        }
    }

    let mut cov = vec![0.0f64; dim * dim];
    for (i, &y) in labels.iter().enumerate() {
        let row = &data[i * dim..(i + 1) * dim];
        for a in 0..dim {
            let da = row[a] - means[y][a];
            for b in a..dim {
                let db = row[b] - means[y][b];
                cov[a * dim + b] += da * db;
            }
        }
    }
    let denom = (n - n_classes).max(1) as f64;
    for a in 0..dim {
        for b in a..dim {
            cov[a * dim + b] /= denom;
            cov[b * dim + a] = cov[a * dim + b];
        }
        cov[a * dim + a] += SHRINKAGE;
    }

    if cholesky(&cov, dim).is_none() {
        return Err(MlError::SingularCovariance);
    }

    Ok(LdaModel {
        dim,
        n_classes,
        class_means: means,
        pooled_cov: cov,
        priors: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        format_version: 1,
    })
}

impl LdaModel {
    /// Gaussian discriminant values per class.
    fn discriminants(&self, row: &[f64]) -> Vec<f64> {
        let l = cholesky(&self.pooled_cov, self.dim).expect("validated at training time");
        (0..self.n_classes)
            .map(|k| {
                let mu = &self.class_means[k];
                let sinv_mu = chol_solve(&l, self.dim, mu);
                let xw: f64 = row.iter().zip(&sinv_mu).map(|(a, b)| a * b).sum();
                let mw: f64 = mu.iter().zip(&sinv_mu).map(|(a, b)| a * b).sum();
                xw - 0.5 * mw + self.priors[k].max(1e-300).ln()
            })
            .collect()
    }

    /// Predicted class and normalized posteriors. Ties break toward the
    /// lowest class index.
    pub fn predict(&self, row: &[f64]) -> Result<(usize, Vec<f64>)> {
        if row.len() != self.dim {
            return Err(MlError::DimensionMismatch {
                expected: self.dim,
                got: row.len(),
            });
        }
        let d = self.discriminants(row);
        let posteriors = softmax(&d);
        let mut best = 0usize;
        for k in 1..self.n_classes {
            if posteriors[k] > posteriors[best] {
                best = k;
            }
        }
        Ok((best, posteriors))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn spherical(seed: u64, dim: usize, mu: &[f64], n: usize) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n * dim);
        for _ in 0..n {
            for k in 0..dim {
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                out.push(mu[k] + z);
            }
        }
        out
    }

    #[test]
    fn boundary_near_midpoint_hyperplane() {
        let dim = 6;
        let mu_a = vec![1.0, 0.5, -0.5, 0.0, 2.0, -1.0];
        let mu_b: Vec<f64> = mu_a.iter().map(|v| v + 2.0).collect();
        let n = 400;
        let mut data = spherical(1, dim, &mu_a, n);
        data.extend(spherical(2, dim, &mu_b, n));
        let labels: Vec<usize> = (0..2 * n).map(|i| usize::from(i >= n)).collect();
        let model = lda_train(&data, dim, &labels, 2).unwrap();

        // Distance from the midpoint to the decision boundary along the
        // discriminant normal, relative to the class separation.
        let mid: Vec<f64> = mu_a.iter().zip(&mu_b).map(|(a, b)| 0.5 * (a + b)).collect();
        let d = model.discriminants(&mid);
        // Linear discriminant difference: w.x + c; recover w via probes.
        let mut w = vec![0.0f64; dim];
        for k in 0..dim {
            let mut probe = mid.clone();
            probe[k] += 1.0;
            let dp = model.discriminants(&probe);
            w[k] = (dp[0] - dp[1]) - (d[0] - d[1]);
        }
        let wnorm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dist = (d[0] - d[1]).abs() / wnorm.max(1e-12);
        let sep = (0..dim)
            .map(|k| (mu_b[k] - mu_a[k]).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(
            dist <= 0.05 * sep,
            "boundary offset {dist} vs separation {sep}"
        );
    }

    #[test]
    fn duplicated_column_still_solvable() {
        let dim = 4;
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let base: f64 = rng.gen_range(-1.0..1.0) + if i % 2 == 0 { 2.0 } else { -2.0 };
            let other: f64 = rng.gen_range(-1.0..1.0);
            data.extend_from_slice(&[base, base, other, rng.gen_range(-1.0..1.0)]);
            labels.push(i % 2);
        }
        let model = lda_train(&data, dim, &labels, 2).unwrap();
        let (_, p) = model.predict(&[2.0, 2.0, 0.0, 0.0]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_row_class_rejected() {
        let data = vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0];
        let labels = vec![0, 0, 1];
        assert!(matches!(
            lda_train(&data, 2, &labels, 2),
            Err(MlError::ClassTooSmall { class: 1, .. })
        ));
    }

    #[test]
    fn class_mean_classifies_to_class_and_tie_breaks_low() {
        let dim = 2;
        // Symmetric classes around the origin, equal priors.
        let data = vec![
            -1.0, 0.0, -1.2, 0.1, -0.8, -0.1, // class 0
            1.0, 0.0, 1.2, -0.1, 0.8, 0.1, // class 1
        ];
        let labels = vec![0, 0, 0, 1, 1, 1];
        let model = lda_train(&data, dim, &labels, 2).unwrap();
        let (c0, _) = model.predict(&model.class_means[0].clone()).unwrap();
        assert_eq!(c0, 0);
        let (c1, _) = model.predict(&model.class_means[1].clone()).unwrap();
        assert_eq!(c1, 1);

        // A row equidistant from both means: posterior tie, argmax takes the
        // lowest class index.
        let mid: Vec<f64> = model.class_means[0]
            .iter()
            .zip(&model.class_means[1])
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        let (c, p) = model.predict(&mid).unwrap();
        assert!((p[0] - p[1]).abs() < 1e-9);
        assert_eq!(c, 0);
    }

    #[test]
    fn posteriors_sum_to_one_on_random_rows() {
        let dim = 6;
        let mut data = spherical(7, dim, &[0.0; 6], 50);
        data.extend(spherical(8, dim, &[3.0; 6], 50));
        data.extend(spherical(9, dim, &[-3.0; 6], 50));
        let labels: Vec<usize> = (0..150).map(|i| i / 50).collect();
        let model = lda_train(&data, dim, &labels, 3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        for _ in 0..30 {
            let row: Vec<f64> = (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let (_, p) = model.predict(&row).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
