//! Two-component PCA for embedding inspection.
//!
//! Pooled classifier embeddings are low-dimensional, so the top two
//! principal directions are found by plain power iteration on the
//! population covariance, with the second direction obtained after
//! deflating the first. The start vector and the sign convention (largest
//! magnitude entry is positive) are fixed, so a given embedding cloud
//! always produces the identical projection — a requirement for
//! byte-stable dump files.

use std::io::Write;

use crate::data::Label;
use crate::error::{Error, Result};

const POWER_TOL: f64 = 1e-9;
const POWER_MAX_ITERS: usize = 100_000;

/// A fitted two-component projection.
#[derive(Clone, Debug)]
pub struct Pca2 {
    mean: Vec<f64>,
    components: [Vec<f64>; 2],
    eigenvalues: [f64; 2],
}

impl Pca2 {
    /// Fits mean and top-2 components on rows of equal dimension.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let (mean, cov, d) = mean_and_covariance(rows)?;
        let (v1, l1) = power_iterate(&cov, d)?;
        let (v2, l2) = power_iterate(&deflate(&cov, &v1, l1), d)?;
        Ok(Pca2 {
            mean,
            components: [v1, v2],
            eigenvalues: [l1, l2],
        })
    }

    /// Like `fit`, but rank deficiency degrades instead of erroring: a
    /// zero-variance cloud gets two zero components (all projections become
    /// (0, 0)) and a rank-1 cloud gets a zero second component (pc2 column
    /// all zero). The flag reports full degeneracy (no variance at all).
    pub fn fit_or_degenerate(rows: &[Vec<f64>]) -> Result<(Self, bool)> {
        let (mean, cov, d) = mean_and_covariance(rows)?;
        let Ok((v1, l1)) = power_iterate(&cov, d) else {
            let pca = Pca2 {
                mean,
                components: [vec![0.0; d], vec![0.0; d]],
                eigenvalues: [0.0, 0.0],
            };
            return Ok((pca, true));
        };
        let (v2, l2) =
            power_iterate(&deflate(&cov, &v1, l1), d).unwrap_or((vec![0.0; d], 0.0));
        Ok((
            Pca2 {
                mean,
                components: [v1, v2],
                eigenvalues: [l1, l2],
            },
            false,
        ))
    }

    pub fn components(&self) -> (&[f64], &[f64]) {
        (&self.components[0], &self.components[1])
    }

    pub fn eigenvalues(&self) -> (f64, f64) {
        (self.eigenvalues[0], self.eigenvalues[1])
    }

    /// Projects one row onto (pc1, pc2).
    pub fn project(&self, row: &[f64]) -> Result<(f64, f64)> {
        if row.len() != self.mean.len() {
            return Err(Error::shape(
                "pca_project",
                format!("[{}]", self.mean.len()),
                format!("[{}]", row.len()),
            ));
        }
        let mut out = [0.0; 2];
        for (k, comp) in self.components.iter().enumerate() {
            out[k] = row
                .iter()
                .zip(&self.mean)
                .zip(comp)
                .map(|((x, m), c)| (x - m) * c)
                .sum();
        }
        Ok((out[0], out[1]))
    }
}

fn mean_and_covariance(rows: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    if rows.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "PCA needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    let d = rows[0].len();
    if d < 2 {
        return Err(Error::InvalidConfig(format!(
            "PCA needs at least 2 dimensions, got {d}"
        )));
    }
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape("pca_fit", format!("[{d}]"), "ragged rows"));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    // Population covariance.
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            let ci = r[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += ci * (r[j] - mean[j]) / n;
            }
        }
    }
    Ok((mean, cov, d))
}

/// Removes the found direction so the second pass finds the next component.
fn deflate(cov: &[f64], v: &[f64], lambda: f64) -> Vec<f64> {
    let d = v.len();
    let mut out = cov.to_vec();
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] -= lambda * v[i] * v[j];
        }
    }
    out
}

/// Dominant eigenpair of a symmetric PSD matrix by power iteration with a
/// deterministic start: the basis vector of the largest diagonal entry.
fn power_iterate(mat: &[f64], d: usize) -> Result<(Vec<f64>, f64)> {
    let start = (0..d)
        .max_by(|&a, &b| {
            mat[a * d + a]
                .partial_cmp(&mat[b * d + b])
                .expect("finite covariance")
        })
        .unwrap_or(0);
    if mat[start * d + start] <= 0.0 {
        return Err(Error::InvalidConfig(
            "PCA input has no variance left in any direction".into(),
        ));
    }
    let mut v = vec![0.0; d];
    v[start] = 1.0;
    for _ in 0..POWER_MAX_ITERS {
        let mut next = vec![0.0; d];
        for i in 0..d {
            for j in 0..d {
                next[i] += mat[i * d + j] * v[j];
            }
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidConfig(
                "power iteration collapsed to the zero vector".into(),
            ));
        }
        for x in &mut next {
            *x /= norm;
        }
        let delta: f64 = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        v = next;
        if delta < POWER_TOL {
            break;
        }
    }
    // Sign convention: the entry of largest magnitude is positive; the
    // lowest index wins among ties.
    let lead = (0..d)
        .max_by(|&a, &b| {
            v[a].abs()
                .partial_cmp(&v[b].abs())
                .expect("finite component")
                .then(b.cmp(&a))
        })
        .unwrap_or(0);
    if v[lead] < 0.0 {
        for x in &mut v {
            *x = -*x;
        }
    }
    let mut mv = vec![0.0; d];
    for i in 0..d {
        for j in 0..d {
            mv[i] += mat[i * d + j] * v[j];
        }
    }
    let lambda: f64 = mv.iter().zip(&v).map(|(a, b)| a * b).sum();
    Ok((v, lambda))
}

/// Euclidean distance between the centroids of two embedding clouds.
pub fn centroid_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("centroid_distance"));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|r| r.len() != d) {
        return Err(Error::shape("centroid_distance", format!("[{d}]"), "ragged rows"));
    }
    let centroid = |rows: &[Vec<f64>]| -> Vec<f64> {
        let n = rows.len() as f64;
        let mut c = vec![0.0; d];
        for r in rows {
            for (ci, v) in c.iter_mut().zip(r) {
                *ci += v / n;
            }
        }
        c
    };
    let ca = centroid(a);
    let cb = centroid(b);
    Ok(ca
        .iter()
        .zip(&cb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// One row of an embedding dump.
#[derive(Clone, Debug)]
pub struct EmbeddingRow {
    pub utt_id: usize,
    pub domain_id: usize,
    pub label: Label,
    pub attack_id: u32,
    pub pc1: f64,
    pub pc2: f64,
}

/// Writes rows as CSV with a fixed header; float formatting is Rust's
/// shortest-roundtrip form, so identical inputs give identical bytes.
pub fn write_embedding_csv<W: Write>(w: &mut W, rows: &[EmbeddingRow]) -> Result<()> {
    writeln!(w, "id,domain,label,attack,pc1,pc2")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.utt_id,
            r.domain_id,
            r.label.name(),
            r.attack_id,
            r.pc1,
            r.pc2
        )?;
    }
    Ok(())
}
