//! Linear domain probe: how well can the style be read off frozen features?

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::contrastive::Features;
use crate::seed;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub n_folds: usize,
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n_folds: 5,
            iterations: 300,
            lr: 0.5,
            l2: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// `confusion[true][predicted]`, summed over folds.
    pub confusion: Vec<Vec<usize>>,
    pub n_folds: usize,
}

/// Softmax regression weights `[dim + 1, classes]`, bias in the last row.
struct Linear {
    w: Vec<f64>,
    dim: usize,
    classes: usize,
}

impl Linear {
    fn logits(&self, x: &[f64], out: &mut [f64]) {
        let bias = &self.w[self.dim * self.classes..];
        out.copy_from_slice(bias);
        for (j, &v) in x.iter().enumerate() {
            if v != 0.0 {
                let row = &self.w[j * self.classes..(j + 1) * self.classes];
                for (o, &w) in out.iter_mut().zip(row) {
                    *o += v * w;
                }
            }
        }
    }

    fn predict(&self, x: &[f64]) -> usize {
        let mut l = vec![0.0; self.classes];
        self.logits(x, &mut l);
        // first maximum wins
        l.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }
}

fn softmax_in_place(l: &mut [f64]) {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in l.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    l.iter_mut().for_each(|v| *v /= s);
}

fn train(x: &[Vec<f64>], y: &[usize], classes: usize, cfg: &ProbeConfig) -> Linear {
    let dim = x[0].len();
    let mut model = Linear {
        w: vec![0.0; (dim + 1) * classes],
        dim,
        classes,
    };
    let n = x.len() as f64;
    let mut grad = vec![0.0; model.w.len()];
    let mut p = vec![0.0; classes];
    for _ in 0..cfg.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (xi, &yi) in x.iter().zip(y) {
            model.logits(xi, &mut p);
            softmax_in_place(&mut p);
            p[yi] -= 1.0;
            for (j, &v) in xi.iter().enumerate() {
                let row = &mut grad[j * classes..(j + 1) * classes];
                for (g, &pc) in row.iter_mut().zip(&p) {
                    *g += v * pc;
                }
            }
            for (g, &pc) in grad[dim * classes..].iter_mut().zip(&p) {
                *g += pc;
            }
        }
        for (i, (w, g)) in model.w.iter_mut().zip(&grad).enumerate() {
            let decay = if i < dim * classes { cfg.l2 * *w } else { 0.0 };
            *w -= cfg.lr * (g / n + decay);
        }
    }
    model
}

/// Standardizes with statistics of `fit`; constant features become 0.
fn standardize(fit: &[&[f64]], all: &[&[f64]]) -> Vec<Vec<f64>> {
    let dim = fit[0].len();
    let n = fit.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in fit {
        for (m, v) in mean.iter_mut().zip(*r) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; dim];
    for r in fit {
        for ((s, v), m) in sd.iter_mut().zip(*r).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(f64::sqrt).collect();
    all.iter()
        .map(|r| {
            r.iter()
                .zip(&mean)
                .zip(&sd)
                .map(|((v, m), s)| if *s > 1e-12 { (v - m) / s } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Stratified k-fold cross-validated accuracy of a multinomial linear
/// classifier predicting `labels` (0-based domain indices) from `features`.
pub fn domain_probe(features: &Features, labels: &[usize], cfg: &ProbeConfig) -> Result<ProbeResult> {
    if labels.len() != features.rows {
        return Err(Error::Eval(format!("{} labels for {} feature rows", labels.len(), features.rows)));
    }
    if cfg.n_folds < 2 {
        return Err(Error::Config("domain probe needs at least 2 folds".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    if classes < 2 || by_class.iter().filter(|c| !c.is_empty()).count() < 2 {
        return Err(Error::Eval("domain probe needs at least two domains".into()));
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < cfg.n_folds {
            return Err(Error::Eval(format!(
                "domain {c} has {} samples, fewer than {} folds",
                members.len(),
                cfg.n_folds
            )));
        }
        if members.len() < 30 {
            log::warn!("domain {c} has only {} probe samples", members.len());
        }
    }

    let mut rng = seed::rng(seed::derive(cfg.seed, &[seed::tag("probe")]));
    let mut fold = vec![0usize; labels.len()];
    for members in &mut by_class {
        members.shuffle(&mut rng);
        for (k, &i) in members.iter().enumerate() {
            fold[i] = k % cfg.n_folds;
        }
    }

    let mut confusion = vec![vec![0usize; classes]; classes];
    for f in 0..cfg.n_folds {
        let train_idx: Vec<usize> = (0..labels.len()).filter(|&i| fold[i] != f).collect();
        let test_idx: Vec<usize> = (0..labels.len()).filter(|&i| fold[i] == f).collect();
        let fit_rows: Vec<&[f64]> = train_idx.iter().map(|&i| features.row(i)).collect();
        let all_rows: Vec<&[f64]> = train_idx.iter().chain(&test_idx).map(|&i| features.row(i)).collect();
        let z = standardize(&fit_rows, &all_rows);
        let (ztrain, ztest) = z.split_at(train_idx.len());
        let ytrain: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
        let model = train(ztrain, &ytrain, classes, cfg);
        for (x, &i) in ztest.iter().zip(&test_idx) {
            confusion[labels[i]][model.predict(x)] += 1;
        }
    }
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(ProbeResult {
        accuracy: correct as f64 / total as f64,
        confusion,
        n_folds: cfg.n_folds,
    })
}
