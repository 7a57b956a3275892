//! Independent reference implementations used as test oracles.

/// Brute-force k-NN precision/recall: full distance matrices and full sorts.
pub fn knn_precision_recall(real: &[Vec<f64>], gen: &[Vec<f64>], k: usize) -> (f64, f64) {
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let radii = |set: &[Vec<f64>]| -> Vec<f64> {
        (0..set.len())
            .map(|i| {
                let mut d: Vec<f64> = (0..set.len())
                    .filter(|&j| j != i)
                    .map(|j| dist(&set[i], &set[j]))
                    .collect();
                d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                d[k - 1]
            })
            .collect()
    };
    let covered = |query: &[Vec<f64>], manifold: &[Vec<f64>], r: &[f64]| -> f64 {
        let mut hits = 0usize;
        for q in query {
            let mut inside = false;
            for (m, &rad) in manifold.iter().zip(r) {
                if dist(q, m) <= rad {
                    inside = true;
                }
            }
            hits += inside as usize;
        }
        hits as f64 / query.len() as f64
    };
    let (rr, rg) = (radii(real), radii(gen));
    (covered(gen, real, &rr), covered(real, gen, &rg))
}

/// Fréchet distance of two 1-D samples with unbiased variances.
pub fn fid_1d(a: &[f64], b: &[f64]) -> f64 {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (
            m,
            x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0),
        )
    };
    let ((ma, va), (mb, vb)) = (stats(a), stats(b));
    (ma - mb).powi(2) + va + vb - 2.0 * (va * vb).sqrt()
}

/// Linear scan of the inclusive band predicate.
pub fn count_in_band(sims: &[f32], low: f64, high: f64) -> usize {
    let mut n = 0;
    for &s in sims {
        let s = s as f64;
        if s >= low && s <= high {
            n += 1;
        }
    }
    n
}

/// Textbook bias-corrected Adam on one parameter vector.
pub struct RefAdam {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl RefAdam {
    pub fn new(n: usize, lr: f64, b1: f64, b2: f64, eps: f64) -> Self {
        Self {
            lr,
            b1,
            b2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        for i in 0..theta.len() {
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * grad[i];
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * grad[i] * grad[i];
            let m_hat = self.m[i] / (1.0 - self.b1.powi(self.t));
            let v_hat = self.v[i] / (1.0 - self.b2.powi(self.t));
            theta[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
