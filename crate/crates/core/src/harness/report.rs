//! Multi-seed results table in the layout of the paper's ablation table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::Method;
use crate::metrics::{EvalReport, ProbeResult};
use crate::synthgen::StyleId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    /// Per-seed values in [`Report::columns`] order.
    pub per_seed: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Domain-probe accuracy per seed.
    pub probe: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seeds: Vec<u64>,
    pub seen: Vec<StyleId>,
    pub unseen: Vec<StyleId>,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl Report {
    /// `evals[i][k]` and `probes[i][k]` belong to `methods[i]` and `seeds[k]`.
    pub fn assemble(
        methods: &[Method],
        seeds: &[u64],
        seen: &[StyleId],
        unseen: &[StyleId],
        evals: &[Vec<EvalReport>],
        probes: &[Vec<ProbeResult>],
    ) -> Self {
        let header = EvalReport::csv_header(seen, unseen);
        let columns = header[1..].to_vec();
        let (ns, nu) = (seen.len(), unseen.len());
        let rows = methods
            .iter()
            .zip(evals)
            .zip(probes)
            .map(|((&method, runs), pr)| {
                let per_seed: Vec<Vec<f64>> = runs.iter().map(|r| r.csv_values()).collect();
                let col = |j: usize| per_seed.iter().map(|v| v[j]).collect::<Vec<f64>>();
                let fold = |f: fn(f64, f64) -> f64, init: f64| {
                    (0..columns.len()).map(|j| col(j).into_iter().fold(init, f)).collect::<Vec<f64>>()
                };
                let mut m: Vec<f64> = (0..columns.len()).map(|j| mean(&col(j))).collect();
                // averages of the mean cells, so the table is internally consistent
                m[ns] = mean(&m[..ns]);
                m[ns + 1 + nu] = mean(&m[ns + 1..ns + 1 + nu]);
                ReportRow {
                    method,
                    mean: m,
                    min: fold(f64::min, f64::INFINITY),
                    max: fold(f64::max, f64::NEG_INFINITY),
                    per_seed,
                    probe: pr.iter().map(|p| p.accuracy).collect(),
                }
            })
            .collect();
        Self {
            seeds: seeds.to_vec(),
            seen: seen.to_vec(),
            unseen: unseen.to_vec(),
            columns,
            rows,
        }
    }

    pub fn row(&self, m: Method) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == m)
    }

    /// Column index of the unseen average.
    pub fn unseen_avg_col(&self) -> usize {
        self.columns.len() - 1
    }

    pub fn seen_avg_col(&self) -> usize {
        self.seen.len()
    }

    /// Means over seeds: `method` plus one column per [`Report::columns`].
    pub fn mean_csv(&self) -> String {
        let mut out = format!("method,{}\n", self.columns.join(","));
        for r in &self.rows {
            let cells: Vec<String> = r.mean.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "{},{}", r.method, cells.join(","));
        }
        out
    }

    /// Long format: one line per (method, column) with mean, min and max.
    pub fn range_csv(&self) -> String {
        let mut out = String::from("method,column,mean,min,max,n_seeds\n");
        for r in &self.rows {
            for (j, c) in self.columns.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{c},{:.6},{:.6},{:.6},{}",
                    r.method,
                    r.mean[j],
                    r.min[j],
                    r.max[j],
                    r.per_seed.len()
                );
            }
        }
        out
    }

    pub fn probe_csv(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(|s| format!("seed_{s}")).collect();
        let mut out = format!("method,mean,{}\n", seeds.join(","));
        for r in &self.rows {
            let cells: Vec<String> = r.probe.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "{},{:.6},{}", r.method, mean(&r.probe), cells.join(","));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ClassAps;
    use crate::pairing::Scheme;
    use std::collections::BTreeMap;

    fn eval(vals: [f64; 5]) -> EvalReport {
        EvalReport {
            method: "m".into(),
            per_style: StyleId::ALL
                .into_iter()
                .zip(vals)
                .map(|(s, v)| {
                    (
                        s,
                        ClassAps {
                            ap: BTreeMap::new(),
                            map: v,
                        },
                    )
                })
                .collect(),
            seen: vec![StyleId::A, StyleId::B, StyleId::C],
            unseen: vec![StyleId::D, StyleId::E],
        }
    }

    fn probe(a: f64) -> ProbeResult {
        ProbeResult {
            accuracy: a,
            confusion: vec![],
            n_folds: 5,
        }
    }

    #[test]
    fn layout_and_averages() {
        let methods = [Method::Random, Method::Pretrained(Scheme::SimClr), Method::Pretrained(Scheme::Msvcl)];
        let evals: Vec<Vec<EvalReport>> = (0..3)
            .map(|m| (0..3).map(|s| eval([0.1 * m as f64, 0.2, 0.3 + 0.01 * s as f64, 0.4, 0.5])).collect())
            .collect();
        let probes = vec![vec![probe(0.5), probe(0.6), probe(0.7)]; 3];
        let r = Report::assemble(
            &methods,
            &[0, 1, 2],
            &[StyleId::A, StyleId::B, StyleId::C],
            &[StyleId::D, StyleId::E],
            &evals,
            &probes,
        );
        let csv = r.mean_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|l| l.split(',').count() == 8));
        assert_eq!(lines[0], "method,style_A,style_B,style_C,seen_avg,style_D,style_E,unseen_avg");
        for row in &r.rows {
            let m = &row.mean;
            assert!((m[3] - (m[0] + m[1] + m[2]) / 3.0).abs() < 1e-12);
            assert!((m[6] - (m[4] + m[5]) / 2.0).abs() < 1e-12);
            assert!(row.min[2] <= row.mean[2] && row.mean[2] <= row.max[2]);
        }
        assert!((r.rows[1].min[2] - 0.3).abs() < 1e-12 && (r.rows[1].max[2] - 0.32).abs() < 1e-12);
    }
}
