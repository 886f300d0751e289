//! Two-component PCA for plotting embeddings.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::contrastive::Features;
use crate::seed;
use crate::synthgen::StyleId;
use crate::{Error, Result};

const POWER_TOL: f64 = 1e-8;
const POWER_MAX_ITERS: usize = 20_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Projection2d {
    pub coords: Vec<[f64; 2]>,
    /// Top two covariance eigenvalues.
    pub eigenvalues: [f64; 2],
    /// Share of total variance captured by the two components.
    pub explained: f64,
    /// True when the corpus has no variance and all coordinates are zero.
    pub degenerate: bool,
}

fn covariance(f: &Features) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (f.rows, f.cols);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(f.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut cov = vec![0.0; d * d];
    let mut c = vec![0.0; d];
    for i in 0..n {
        for ((x, v), m) in c.iter_mut().zip(f.row(i)).zip(&mean) {
            *x = v - m;
        }
        for a in 0..d {
            if c[a] == 0.0 {
                continue;
            }
            for b in 0..d {
                cov[a * d + b] += c[a] * c[b] / n as f64;
            }
        }
    }
    (mean, cov)
}

fn matvec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for (a, o) in out.iter_mut().enumerate() {
        *o = m[a * d..(a + 1) * d].iter().zip(v).map(|(x, y)| x * y).sum();
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Leading eigenpair of a symmetric PSD matrix by power iteration.
fn power_iteration(m: &[f64], d: usize, seed: u64) -> (f64, Vec<f64>) {
    let mut rng = seed::rng(seed);
    let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut v);
    let mut w = vec![0.0; d];
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        matvec(m, &v, &mut w);
        let next = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        if normalize(&mut w) == 0.0 {
            return (0.0, v);
        }
        let delta = v.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut v, &mut w);
        let done = (next - lambda).abs() <= POWER_TOL * next.abs().max(1e-300) && delta <= POWER_TOL;
        lambda = next;
        if done {
            break;
        }
    }
    matvec(m, &v, &mut w);
    (v.iter().zip(&w).map(|(a, b)| a * b).sum(), v)
}

pub fn embed_project(features: &Features) -> Result<Projection2d> {
    if features.rows < 3 {
        return Err(Error::Eval(format!("projection needs at least 3 samples, got {}", features.rows)));
    }
    let d = features.cols;
    let (mean, mut cov) = covariance(features);
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if trace <= 1e-24 {
        log::warn!("all {} embeddings are identical; projection is zero", features.rows);
        return Ok(Projection2d {
            coords: vec![[0.0, 0.0]; features.rows],
            eigenvalues: [0.0, 0.0],
            explained: 0.0,
            degenerate: true,
        });
    }
    let (l1, v1) = power_iteration(&cov, d, 1);
    for a in 0..d {
        for b in 0..d {
            cov[a * d + b] -= l1 * v1[a] * v1[b];
        }
    }
    let (l2, v2) = if d > 1 { power_iteration(&cov, d, 2) } else { (0.0, vec![0.0; d]) };
    let l2 = l2.max(0.0);
    let coords = (0..features.rows)
        .map(|i| {
            let r = features.row(i);
            let p = |v: &[f64]| r.iter().zip(&mean).zip(v).map(|((x, m), e)| (x - m) * e).sum::<f64>();
            [p(&v1), p(&v2)]
        })
        .collect();
    Ok(Projection2d {
        coords,
        eigenvalues: [l1, l2],
        explained: (l1 + l2) / trace,
        degenerate: false,
    })
}

/// CSV `x,y,domain,subject_id`.
pub fn write_projection_csv(path: &Path, p: &Projection2d, domains: &[StyleId], subject_ids: &[u64]) -> Result<()> {
    if domains.len() != p.coords.len() || subject_ids.len() != p.coords.len() {
        return Err(Error::Eval("projection labels do not match coordinates".into()));
    }
    let mut out = String::from("x,y,domain,subject_id\n");
    for ((c, d), s) in p.coords.iter().zip(domains).zip(subject_ids) {
        out.push_str(&format!("{},{},{d},{s}\n", c[0], c[1]));
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, SymmetricEigen};

    fn feats(rows: usize, cols: usize, data: Vec<f64>) -> Features {
        Features { rows, cols, data }
    }

    #[test]
    fn variance_share_matches_full_eigendecomposition() {
        for s in 0..10u64 {
            let mut rng = seed::rng(s);
            let (n, d) = (12, 5);
            let scales = [3.0, 2.0, 1.0, 0.5, 0.2];
            let data: Vec<f64> = (0..n * d).map(|i| rng.random_range(-1.0..1.0) * scales[i % d]).collect();
            let f = feats(n, d, data.clone());
            let p = embed_project(&f).unwrap();

            let m = DMatrix::from_row_slice(n, d, &data);
            let mean = m.row_mean();
            let mut c = m.clone();
            for mut r in c.row_iter_mut() {
                r -= &mean;
            }
            let cov = c.transpose() * &c / n as f64;
            let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().cloned().collect();
            ev.sort_by(|a, b| b.total_cmp(a));
            let share = (ev[0] + ev[1]) / ev.iter().sum::<f64>();
            assert!((p.explained - share).abs() < 1e-6, "{} vs {share}", p.explained);
        }
    }

    #[test]
    fn axis_aligned_data_is_recovered() {
        let base = [[3.0, 0.0], [-3.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let data: Vec<f64> = base.iter().cycle().take(20).flatten().cloned().collect();
        let p = embed_project(&feats(20, 2, data.clone())).unwrap();
        assert!((p.explained - 1.0).abs() < 1e-9);
        for (c, r) in p.coords.iter().zip(data.chunks(2)) {
            assert!((c[0].abs() - r[0].abs()).abs() < 1e-6);
            assert!((c[1].abs() - r[1].abs()).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_rows_project_to_zero() {
        let p = embed_project(&feats(4, 3, [1.0, 2.0, 3.0].repeat(4))).unwrap();
        assert!(p.degenerate);
        assert!(p.coords.iter().all(|c| *c == [0.0, 0.0]));
        assert!(embed_project(&feats(2, 3, vec![0.0; 6])).is_err());
    }
}
