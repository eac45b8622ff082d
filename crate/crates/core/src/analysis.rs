//! Diagnostics of an embedding space: neighbours, spectra and cluster
//! separation.

use scl_autodiff::Tensor;

use crate::error::config;
use crate::{Error, Result};

/// Off-diagonal magnitude at which Jacobi sweeps stop.
pub const JACOBI_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

/// Unit-norm feature rows with their labels and source images.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    /// `[n, d]`
    pub rows: Tensor,
    pub labels: Vec<usize>,
    pub sources: Vec<usize>,
}

impl EmbeddingMatrix {
    /// Normalises each row of `features`.
    pub fn new(features: &Tensor, labels: Vec<usize>, sources: Vec<usize>) -> Result<Self> {
        let n = check_matrix(features)?.0;
        if labels.len() != n || sources.len() != n {
            return Err(config(format!(
                "{n} rows but {} labels and {} sources",
                labels.len(),
                sources.len()
            )));
        }
        Ok(Self {
            rows: normalized(features),
            labels,
            sources,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_matrix(m: &Tensor) -> Result<(usize, usize)> {
    if m.rank() != 2 {
        return Err(config(format!(
            "expected a matrix, got shape {:?}",
            m.shape()
        )));
    }
    if !m.is_finite() {
        return Err(Error::Domain("matrix contains non-finite values".into()));
    }
    Ok((m.shape()[0], m.shape()[1]))
}

fn normalized(m: &Tensor) -> Tensor {
    let d = m.shape()[1];
    let mut out = m.clone();
    for row in out.data_mut().chunks_mut(d.max(1)) {
        let n = row
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(scl_autodiff::NORM_EPS);
        for v in row {
            *v /= n;
        }
    }
    out
}

/// The `k` rows most cosine-similar to row `query`, excluding it, best first.
/// Ties go to the lower index.
pub fn knn(m: &Tensor, query: usize, k: usize) -> Result<Vec<usize>> {
    let (n, _) = check_matrix(m)?;
    if k == 0 || k >= n {
        return Err(config(format!("k must be in 1..{n}, got {k}")));
    }
    if query >= n {
        return Err(config(format!(
            "query row {query} out of range for {n} rows"
        )));
    }
    let u = normalized(m);
    let q = u.row(query);
    let mut scored: Vec<(f64, usize)> = (0..n)
        .filter(|&i| i != query)
        .map(|i| (u.row(i).iter().zip(q).map(|(a, b)| a * b).sum(), i))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Eigenvalues (descending) and column eigenvectors of the symmetric `n × n`
/// matrix `a`, by cyclic Jacobi rotations.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n, "matrix size");
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = a
        .iter()
        .map(|x| x.abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off.sqrt() <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &i) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + col] = v[k * n + i];
        }
    }
    (values, vectors)
}

/// `Xᵀ X` of the `[n, d]` matrix `x`.
fn gram(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut g = vec![0.0; d * d];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        for i in 0..d {
            for j in i..d {
                g[i * d + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            g[i * d + j] = g[j * d + i];
        }
    }
    g
}

/// Cumulative fraction of variance captured by the leading principal
/// components of the centred rows.
pub fn explained_variance(m: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = check_matrix(m)?;
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "explained variance needs at least 2 rows, got {n}"
        )));
    }
    let mut x = m.data().to_vec();
    for j in 0..d {
        let mean = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            x[i * d + j] -= mean;
        }
    }
    let cov: Vec<f64> = gram(&x, n, d)
        .into_iter()
        .map(|v| v / (n - 1) as f64)
        .collect();
    let (values, _) = symmetric_eigen(&cov, d);
    let values: Vec<f64> = values.into_iter().map(|v| v.max(0.0)).collect();
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("all rows coincide".into()));
    }
    let mut acc = 0.0;
    let mut curve: Vec<f64> = values
        .iter()
        .map(|v| {
            acc += v;
            (acc / total).min(1.0)
        })
        .collect();
    *curve.last_mut().expect("d > 0") = 1.0;
    Ok(curve)
}

/// Singular values of `A / sqrt(n)` for the uncentred `[n, d]` matrix `A`,
/// descending.
pub fn singular_spectrum(m: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = check_matrix(m)?;
    if n == 0 || d == 0 {
        return Err(Error::Degenerate(format!("empty matrix {:?}", m.shape())));
    }
    let g: Vec<f64> = gram(m.data(), n, d)
        .into_iter()
        .map(|v| v / n as f64)
        .collect();
    let (values, _) = symmetric_eigen(&g, d);
    Ok(values.into_iter().map(|v| v.max(0.0).sqrt()).collect())
}

/// [`singular_spectrum`] divided by its largest value.
pub fn singular_values(m: &Tensor) -> Result<Vec<f64>> {
    let sigma = singular_spectrum(m)?;
    let top = sigma[0];
    if top <= 0.0 {
        return Err(Error::Degenerate("matrix is zero".into()));
    }
    Ok(sigma.into_iter().map(|s| s / top).collect())
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Davies-Bouldin index of the labelled rows, on unit-normalised rows when
/// `normalize` is set. Coincident centroids give infinity.
pub fn davies_bouldin(m: &Tensor, labels: &[usize], normalize: bool) -> Result<f64> {
    let (n, d) = check_matrix(m)?;
    if labels.len() != n {
        return Err(config(format!("{} labels for {n} rows", labels.len())));
    }
    let x = if normalize { normalized(m) } else { m.clone() };
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let k = classes.len();
    if k < 2 {
        return Err(Error::Domain(format!(
            "Davies-Bouldin needs at least 2 classes, got {k}"
        )));
    }
    let slot = |y: usize| classes.binary_search(&y).expect("label present");
    let mut centroids = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (i, &y) in labels.iter().enumerate() {
        let c = slot(y);
        counts[c] += 1;
        for (acc, v) in centroids[c * d..(c + 1) * d].iter_mut().zip(x.row(i)) {
            *acc += v;
        }
    }
    for c in 0..k {
        for v in &mut centroids[c * d..(c + 1) * d] {
            *v /= counts[c] as f64;
        }
    }
    let mut scatter = vec![0.0; k];
    for (i, &y) in labels.iter().enumerate() {
        let c = slot(y);
        scatter[c] += distance(x.row(i), &centroids[c * d..(c + 1) * d]) / counts[c] as f64;
    }
    let mut total = 0.0;
    for a in 0..k {
        let mut worst = 0.0f64;
        for b in (0..k).filter(|&b| b != a) {
            let sep = distance(
                &centroids[a * d..(a + 1) * d],
                &centroids[b * d..(b + 1) * d],
            );
            if sep == 0.0 {
                log::warn!(
                    "classes {} and {} have coincident centroids",
                    classes[a],
                    classes[b]
                );
                return Ok(f64::INFINITY);
            }
            worst = worst.max((scatter[a] + scatter[b]) / sep);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// `component,value` rows numbered from 1.
pub fn curve_csv(values: &[f64]) -> String {
    let mut out = String::from("component,value\n");
    for (i, v) in values.iter().enumerate() {
        out.push_str(&format!("{},{v}\n", i + 1));
    }
    out
}
