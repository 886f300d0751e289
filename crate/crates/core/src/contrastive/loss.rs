//! NT-Xent with dot-product similarity over unit-norm embeddings.

use crate::{Error, Result};

/// Tolerance on `|‖z‖ - 1|` accepted by [`EmbeddingSet::new`].
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    z: Vec<f64>,
    dim: usize,
    positive_map: Vec<usize>,
}

impl EmbeddingSet {
    /// `z` is row-major `[positive_map.len(), dim]`; every row must be unit-norm.
    pub fn new(z: Vec<f64>, dim: usize, positive_map: Vec<usize>) -> Result<Self> {
        let set = Self::unchecked(z, dim, positive_map)?;
        for (i, row) in set.z.chunks(dim).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Shape(format!("embedding {i} has norm {norm}")));
            }
        }
        Ok(set)
    }

    /// Like [`EmbeddingSet::new`] without the unit-norm check. Used when
    /// differentiating through raw vectors.
    pub fn unchecked(z: Vec<f64>, dim: usize, positive_map: Vec<usize>) -> Result<Self> {
        let n = positive_map.len();
        if dim == 0 || z.len() != n * dim {
            return Err(Error::Shape(format!("{} values for {n} embeddings of dim {dim}", z.len())));
        }
        if n < 2 || !n.is_multiple_of(2) {
            return Err(Error::Shape(format!("need an even number of embeddings >= 2, got {n}")));
        }
        for (i, &j) in positive_map.iter().enumerate() {
            if j >= n || j == i || positive_map[j] != i {
                return Err(Error::Pairing(format!("positive_map is not an involution at {i}")));
            }
        }
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding value {i}")));
        }
        Ok(Self { z, dim, positive_map })
    }

    pub fn len(&self) -> usize {
        self.positive_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positive_map.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.z[i * self.dim..(i + 1) * self.dim]
    }

    pub fn positive_map(&self) -> &[usize] {
        &self.positive_map
    }
}

#[derive(Clone, Debug)]
pub struct NtXent {
    pub loss: f64,
    /// Gradient of `loss` with respect to `z`, same layout.
    pub grad: Vec<f64>,
}

/// Mean over all anchors `i` of
/// `-log( exp(z_i·z_p(i)/τ) / Σ_{k≠i} exp(z_i·z_k/τ) )`.
pub fn nt_xent(emb: &EmbeddingSet, temperature: f64) -> Result<NtXent> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let n = emb.len();
    let inv_t = 1.0 / temperature;
    let scale = 1.0 / n as f64;

    // g[i][k] = dL/ds_ik with s_ik = z_i·z_k / τ.
    let mut g = vec![0.0; n * n];
    let mut loss = 0.0;
    let mut logits = vec![0.0; n];
    for i in 0..n {
        let zi = emb.row(i);
        let mut max = f64::NEG_INFINITY;
        for (k, l) in logits.iter_mut().enumerate() {
            if k == i {
                continue;
            }
            *l = dot(zi, emb.row(k)) * inv_t;
            max = max.max(*l);
        }
        let mut denom = 0.0;
        for (k, &l) in logits.iter().enumerate() {
            if k != i {
                denom += (l - max).exp();
            }
        }
        let lse = max + denom.ln();
        let p = emb.positive_map[i];
        loss += lse - logits[p];
        for (k, &l) in logits.iter().enumerate() {
            if k != i {
                g[i * n + k] = scale * (l - lse).exp();
            }
        }
        g[i * n + p] -= scale;
    }
    loss *= scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite("nt_xent loss".into()));
    }

    let d = emb.dim;
    let mut grad = vec![0.0; n * d];
    for i in 0..n {
        let out = &mut grad[i * d..(i + 1) * d];
        for k in 0..n {
            let c = (g[i * n + k] + g[k * n + i]) * inv_t;
            if c != 0.0 {
                for (o, &zk) in out.iter_mut().zip(emb.row(k)) {
                    *o += c * zk;
                }
            }
        }
    }
    Ok(NtXent { loss, grad })
}

/// Analytic minimum of the loss for `2N` samples: positives aligned and every
/// negative anti-aligned.
pub fn nt_xent_lower_bound(n_samples: usize, temperature: f64) -> f64 {
    let a = 1.0 / temperature;
    // -ln(e^a / (e^a + (2N-2) e^-a)) = ln(1 + (2N-2) e^{-2a})
    ((n_samples as f64 - 2.0) * (-2.0 * a).exp()).ln_1p()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
