use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{shape_err, Error, Result};

/// `M × D` feature matrix from one extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: DMatrix<f64>,
    pub extractor_id: String,
}

impl FeatureSet {
    pub fn from_rows(rows: &[Vec<f64>], extractor_id: impl Into<String>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(shape_err!("feature rows of unequal length"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature values".into()));
        }
        Ok(Self {
            features: DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]),
            extractor_id: extractor_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.features.row(i).iter().copied().collect()
    }

    /// Mean and unbiased (`1/(M−1)`) covariance.
    pub fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let m = self.len();
        if m < 2 {
            return Err(Error::InvalidArgument(format!(
                "moments need at least 2 features, got {m}"
            )));
        }
        let mean = self.features.row_mean().transpose();
        let mut centered = self.features.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (m as f64 - 1.0);
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature moments".into()));
        }
        Ok((mean, cov))
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2(Σa^{1/2} Σb Σa^{1/2})^{1/2})`.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(shape_err!("feature dims {} and {}", a.dim(), b.dim()));
    }
    let (mu_a, cov_a) = a.moments()?;
    let (mu_b, cov_b) = b.moments()?;
    let root_a = psd_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let fid = (&mu_a - &mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross;
    if !fid.is_finite() {
        return Err(Error::NonFinite("frechet distance".into()));
    }
    Ok(fid.max(0.0))
}

/// Distance from each point to its `k`-th nearest other point of the set.
pub fn knn_radii(set: &FeatureSet, k: usize) -> Result<Vec<f64>> {
    let m = set.len();
    if k == 0 || k >= m {
        return Err(Error::InvalidArgument(format!(
            "k = {k} needs 1 <= k < {m}"
        )));
    }
    let rows: Vec<Vec<f64>> = (0..m).map(|i| set.row(i)).collect();
    let mut radii = Vec::with_capacity(m);
    let mut dists = Vec::with_capacity(m - 1);
    for i in 0..m {
        dists.clear();
        dists.extend(
            (0..m)
                .filter(|&j| j != i)
                .map(|j| euclidean(&rows[i], &rows[j])),
        );
        let (_, kth, _) = dists.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
        radii.push(*kth);
    }
    Ok(radii)
}

/// Fraction of `query` points inside some ball `(manifold[j], radii[j])`.
fn coverage(query: &FeatureSet, manifold: &FeatureSet, radii: &[f64]) -> f64 {
    let mrows: Vec<Vec<f64>> = (0..manifold.len()).map(|j| manifold.row(j)).collect();
    let inside = (0..query.len())
        .filter(|&i| {
            let q = query.row(i);
            mrows.iter().zip(radii).any(|(m, &r)| euclidean(&q, m) <= r)
        })
        .count();
    inside as f64 / query.len() as f64
}

/// k-NN manifold precision and recall.
///
/// Precision: share of generated points inside the real manifold. Recall:
/// share of real points inside the generated manifold. Radii exclude the
/// point itself.
pub fn knn_precision_recall(real: &FeatureSet, gen: &FeatureSet, k: usize) -> Result<(f64, f64)> {
    if real.dim() != gen.dim() {
        return Err(shape_err!("feature dims {} and {}", real.dim(), gen.dim()));
    }
    let real_radii = knn_radii(real, k)?;
    let gen_radii = knn_radii(gen, k)?;
    Ok((
        coverage(gen, real, &real_radii),
        coverage(real, gen, &gen_radii),
    ))
}

/// Mean pairwise distance within a group; zero for fewer than two points.
pub fn mean_pairwise_distance(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += euclidean(&rows[i], &rows[j]);
        }
    }
    total / (n * (n - 1) / 2) as f64
}
