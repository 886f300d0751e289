//! Acceptance criteria A1 to A8. Every test writes one `A<n> PASS|FAIL` line
//! to stdout (bypassing the test harness capture) before asserting.
//!
//! A3 and A4 train the full desk matrix (5 methods x 3 seeds) and share one
//! run. It starts from an empty directory unless `MSVCL_ACCEPT_REUSE` is set,
//! in which case stages already in the ledger are reused.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use msvcl_core::contrastive::{nt_xent, random_checkpoint, EmbeddingSet};
use msvcl_core::detect::{evaluate, finetune, DetectConfig, Detection};
use msvcl_core::harness::gradcheck::{run_suite, tolerance, SuiteOptions};
use msvcl_core::harness::{threads_from_env, ExperimentConfig, Method, Report, Runner};
use msvcl_core::metrics::{mean_ap, GroundTruth};
use msvcl_core::pairing::{count_possible_positives, Scheme};
use msvcl_core::synthgen::{
    build_dataset, render_subject, Dataset, DatasetManifest, LabeledImage, LesionClass, Split, StyleMapper,
};

fn verdict(id: &str, ok: bool, detail: &str) {
    let line = format!("\n{id} {}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(ok, "{id} failed: {detail}");
}

fn scratch(name: &str) -> PathBuf {
    let p = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    if p.exists() {
        std::fs::remove_dir_all(&p).unwrap();
    }
    std::fs::create_dir_all(&p).unwrap();
    p
}

// ---------------------------------------------------------------- A1

#[test]
fn a1_gradient_correctness() {
    let t = Instant::now();
    let reports = run_suite::<f64>(&SuiteOptions { configs: 20, seed: 0, corrupt: false }).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let tol = tolerance::<f64>();
    let worst = reports
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .unwrap();
    let failing: Vec<&str> = reports.iter().filter(|r| !r.passes(tol)).map(|r| r.op.as_str()).collect();
    let ok = failing.is_empty() && reports.iter().all(|r| r.configs >= 20) && secs < 120.0;
    verdict(
        "A1",
        ok,
        &format!(
            "{} ops x 20 configs, worst {} at {:.2e} (tol {tol:e}), failing {failing:?}, {secs:.1}s",
            reports.len(),
            worst.op,
            worst.report.max_rel_error
        ),
    );
}

// ---------------------------------------------------------------- A2

fn unit_rows(rows: &[&[f64]]) -> Vec<f64> {
    rows.iter().flat_map(|r| r.iter().copied()).collect()
}

#[test]
fn a2_loss_and_combinatorics_oracles() {
    let pairs = vec![1, 0, 3, 2];
    let e = std::f64::consts::E;

    let single = EmbeddingSet::new(unit_rows(&[&[0.6, 0.8], &[1.0, 0.0]]), 2, vec![1, 0]).unwrap();
    let l0 = nt_xent(&single, 0.3).unwrap().loss;

    let same = EmbeddingSet::new(unit_rows(&[&[1.0, 0.0][..]; 4]), 2, pairs.clone()).unwrap();
    let l1 = nt_xent(&same, 1.0).unwrap().loss;

    let two = EmbeddingSet::new(unit_rows(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]), 2, pairs).unwrap();
    let l2 = nt_xent(&two, 1.0).unwrap().loss;

    let errs = [l0.abs(), (l1 - 3f64.ln()).abs(), (l2 - ((e + 2.0) / e).ln()).abs()];
    let loss_ok = errs.iter().all(|&d| d <= 1e-9);

    // Enumerate every unordered pair of style renderings that share a source.
    let mut mismatches = Vec::new();
    for m in 2u64..=6 {
        for n in 1u64..=16 {
            let renderings: Vec<(u64, u64)> = (0..n).flat_map(|s| (0..m).map(move |st| (s, st))).collect();
            let mut count = 0u64;
            for i in 0..renderings.len() {
                for j in i + 1..renderings.len() {
                    if renderings[i].0 == renderings[j].0 {
                        count += 1;
                    }
                }
            }
            if count_possible_positives(n, m).unwrap() != count {
                mismatches.push((n, m));
            }
        }
    }
    verdict(
        "A2",
        loss_ok && mismatches.is_empty(),
        &format!(
            "nt_xent errors {:.1e}/{:.1e}/{:.1e} (tol 1e-9); N*C(M,2) mismatches over M 2..=6, N 1..=16: {}",
            errs[0],
            errs[1],
            errs[2],
            mismatches.len()
        ),
    );
}

// ---------------------------------------------------------------- A3 / A4

struct Matrix {
    report: Report,
    runtime_secs: u64,
}

fn desk_matrix() -> &'static Matrix {
    static M: OnceLock<Matrix> = OnceLock::new();
    M.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk");
        if std::env::var_os("MSVCL_ACCEPT_REUSE").is_none() && dir.exists() {
            std::fs::remove_dir_all(&dir).unwrap();
        }
        let cfg = ExperimentConfig {
            output_dir: dir,
            ..ExperimentConfig::default()
        };
        let runner = Runner::new(cfg, false);
        let report = runner.run_all(threads_from_env().unwrap()).unwrap();
        // span of the ledger, so a reused run still reports its original cost
        let recs = runner.ledger().records().unwrap();
        let start = recs.iter().map(|r| r.started_unix).min().unwrap();
        let end = recs.iter().map(|r| r.finished_unix).max().unwrap();
        Matrix {
            report,
            runtime_secs: end - start,
        }
    })
}

fn unseen(r: &Report, m: Method) -> (f64, Vec<f64>) {
    let row = r.row(m).unwrap();
    let c = r.unseen_avg_col();
    (row.mean[c], row.per_seed.iter().map(|s| s[c]).collect())
}

#[test]
fn a3_pretraining_ordering() {
    let mx = desk_matrix();
    let r = &mx.report;
    let (random, _) = unseen(r, Method::Random);
    let (simclr, simclr_seeds) = unseen(r, Method::Pretrained(Scheme::SimClr));
    let (mscl, _) = unseen(r, Method::Pretrained(Scheme::Mscl));
    let (mvcl, _) = unseen(r, Method::Pretrained(Scheme::Mvcl));
    let (msvcl, msvcl_seeds) = unseen(r, Method::Pretrained(Scheme::Msvcl));
    let wins = msvcl_seeds.iter().zip(&simclr_seeds).filter(|(a, b)| a >= b).count();

    let checks = [
        ("msvcl>simclr", msvcl > simclr),
        ("simclr>random", simclr > random),
        ("msvcl-random>=0.05", msvcl - random >= 0.05),
        ("msvcl>=simclr in 2/3 seeds", wins >= 2),
        ("mscl>=simclr", mscl >= simclr),
        ("mvcl>=simclr", mvcl >= simclr),
        ("runtime<=4h", mx.runtime_secs <= 4 * 3600),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict(
        "A3",
        failed.is_empty(),
        &format!(
            "unseen mAP random {random:.3} simclr {simclr:.3} mscl {mscl:.3} mvcl {mvcl:.3} msvcl {msvcl:.3}; \
             msvcl>=simclr in {wins}/{} seeds; matrix {}s; failed {failed:?}",
            msvcl_seeds.len(),
            mx.runtime_secs
        ),
    );
}

#[test]
fn a4_domain_invariance() {
    let r = &desk_matrix().report;
    let probe = |m: Method| r.row(m).unwrap().probe.clone();
    let rand = probe(Method::Random);
    let ms = probe(Method::Pretrained(Scheme::Msvcl));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gap = mean(&rand) - mean(&ms);
    verdict(
        "A4",
        gap >= 0.10 && ms.len() == 3,
        &format!(
            "5-fold domain probe, random {:.3} {rand:.3?} vs msvcl {:.3} {ms:.3?}; gap {gap:.3} (need >= 0.10)",
            mean(&rand),
            mean(&ms)
        ),
    );
}

// ---------------------------------------------------------------- A5

/// Exact fraction with a positive denominator.
#[derive(Clone, Copy, Debug)]
struct Frac(i64, i64);

impl Frac {
    fn ge(self, o: Frac) -> bool {
        self.0 * o.1 >= o.0 * self.1
    }
    fn gt(self, o: Frac) -> bool {
        self.0 * o.1 > o.0 * self.1
    }
    fn add(self, o: Frac) -> Frac {
        let g = gcd(self.1 * o.1, self.0 * o.1 + o.0 * self.1);
        Frac((self.0 * o.1 + o.0 * self.1) / g, self.1 * o.1 / g)
    }
    fn mul(self, o: Frac) -> Frac {
        let (n, d) = (self.0 * o.0, self.1 * o.1);
        let g = gcd(d, n);
        Frac(n / g, d / g)
    }
    fn f64(self) -> f64 {
        self.0 as f64 / self.1 as f64
    }
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs().max(1)
    } else {
        gcd(b, a % b)
    }
}

type IBox = [i64; 4];

fn exact_iou(a: &IBox, b: &IBox) -> Frac {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0);
    let inter = w * h;
    let area = |x: &IBox| (x[2] - x[0]) * (x[3] - x[1]);
    Frac(inter, area(a) + area(b) - inter)
}

/// Brute force: walk detections from the highest rank, give each the best
/// still-free ground truth at IoU >= 1/2, then integrate the interpolated
/// precision as the sum over true positives of max precision at or after them.
fn oracle_map(dets: &[(usize, IBox)], gts: &[(usize, IBox)]) -> f64 {
    let half = Frac(1, 2);
    let mut total = Frac(0, 1);
    let mut classes = 0;
    for c in 0..2 {
        let g: Vec<&IBox> = gts.iter().filter(|x| x.0 == c).map(|x| &x.1).collect();
        if g.is_empty() {
            continue;
        }
        classes += 1;
        let mut taken = vec![false; g.len()];
        let mut tp_flags = Vec::new();
        for d in dets.iter().filter(|x| x.0 == c) {
            let mut best: Option<(usize, Frac)> = None;
            for (k, gb) in g.iter().enumerate() {
                let v = exact_iou(&d.1, gb);
                if !taken[k] && v.ge(half) && best.is_none_or(|b| v.gt(b.1)) {
                    best = Some((k, v));
                }
            }
            if let Some((k, _)) = best {
                taken[k] = true;
            }
            tp_flags.push(best.is_some());
        }
        let prec: Vec<Frac> = (0..tp_flags.len())
            .map(|i| Frac(tp_flags[..=i].iter().filter(|&&t| t).count() as i64, i as i64 + 1))
            .collect();
        let mut ap = Frac(0, 1);
        for i in 0..tp_flags.len() {
            if tp_flags[i] {
                let best = prec[i..].iter().copied().fold(Frac(0, 1), |a, b| if b.gt(a) { b } else { a });
                ap = ap.add(best.mul(Frac(1, g.len() as i64)));
            }
        }
        total = total.add(ap);
    }
    total.mul(Frac(1, classes)).f64()
}

#[test]
fn a5_map_oracle() {
    let gt_palette: [IBox; 3] = [[0, 0, 4, 4], [2, 0, 6, 4], [0, 4, 4, 8]];
    // exact matches, IoU 0.6 with two truths, IoU exactly 0.5, and a miss
    let det_palette: [IBox; 5] = [[0, 0, 4, 4], [1, 0, 5, 4], [0, 0, 4, 2], [4, 4, 8, 8], [0, 4, 4, 8]];
    let gt_opts: Vec<(usize, IBox)> = (0..2).flat_map(|c| gt_palette.iter().map(move |b| (c, *b))).collect();
    let det_opts: Vec<(usize, IBox)> = (0..2).flat_map(|c| det_palette.iter().map(move |b| (c, *b))).collect();

    let mut gt_sets: Vec<Vec<usize>> = Vec::new();
    for a in 0..gt_opts.len() {
        gt_sets.push(vec![a]);
        for b in a..gt_opts.len() {
            gt_sets.push(vec![a, b]);
            for c in b..gt_opts.len() {
                gt_sets.push(vec![a, b, c]);
            }
        }
    }
    let mut det_seqs: Vec<Vec<usize>> = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..4 {
        frontier = frontier
            .iter()
            .flat_map(|s: &Vec<usize>| {
                (0..det_opts.len()).map(move |k| {
                    let mut t = s.clone();
                    t.push(k);
                    t
                })
            })
            .collect();
        det_seqs.extend(frontier.iter().cloned());
    }

    let to_f = |b: &IBox| [b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64];
    let (mut cases, mut exact, mut worst) = (0usize, 0usize, 0.0f64);
    for gs in &gt_sets {
        let gts: Vec<(usize, IBox)> = gs.iter().map(|&i| gt_opts[i]).collect();
        let g: Vec<GroundTruth> = gts
            .iter()
            .map(|(c, b)| GroundTruth { image_id: 0, class: LesionClass::ALL[*c], bbox: to_f(b) })
            .collect();
        for seq in &det_seqs {
            let ds: Vec<(usize, IBox)> = seq.iter().map(|&i| det_opts[i]).collect();
            let want = oracle_map(&ds, &gts);
            // strictly decreasing scores, and all-equal scores (input order decides)
            for tied in [false, true] {
                let d: Vec<Detection> = ds
                    .iter()
                    .enumerate()
                    .map(|(k, (c, b))| Detection {
                        image_id: 0,
                        class: LesionClass::ALL[*c],
                        score: if tied { 0.5 } else { 1.0 - k as f64 / 8.0 },
                        bbox: to_f(b),
                    })
                    .collect();
                let got = mean_ap(&d, &g, &LesionClass::ALL, 0.5).unwrap().map;
                cases += 1;
                exact += usize::from(got == want);
                worst = worst.max((got - want).abs());
            }
        }
    }

    let hand_gt = vec![
        GroundTruth { image_id: 0, class: LesionClass::Mass, bbox: [0.0, 0.0, 10.0, 10.0] },
        GroundTruth { image_id: 0, class: LesionClass::Mass, bbox: [20.0, 20.0, 30.0, 30.0] },
    ];
    let det = |s: f64, b: [f64; 4]| Detection { image_id: 0, class: LesionClass::Mass, score: s, bbox: b };
    let hand = vec![
        det(0.9, [0.0, 0.0, 10.0, 10.0]),
        det(0.8, [40.0, 40.0, 50.0, 50.0]),
        det(0.7, [20.0, 20.0, 30.0, 30.0]),
    ];
    let hand_ap = mean_ap(&hand, &hand_gt, &[LesionClass::Mass], 0.5).unwrap().map;
    let hand_err = (hand_ap - (0.5 + 0.5 * 2.0 / 3.0)).abs();

    verdict(
        "A5",
        worst <= 1e-12 && hand_err <= 1e-9,
        &format!(
            "{cases} instances vs exact-fraction oracle: {exact} bit-equal, max |diff| {worst:.1e}; \
             hand case AP {hand_ap:.6} (err {hand_err:.1e})"
        ),
    );
}

// ---------------------------------------------------------------- A6

#[test]
fn a6_mapper_cycle_consistency() {
    let dir = scratch("acceptance-a6");
    let manifest = DatasetManifest::default();
    build_dataset(&manifest, &dir).unwrap();
    let ds = Dataset::open(&dir).unwrap();

    let mut cycle: BTreeMap<String, f64> = BTreeMap::new();
    for &a in &manifest.seen_styles {
        // held out: the mappers were fitted on pretrain images only
        let held: Vec<_> = ds.records_for(a, Split::DetectTest).map(|r| ds.read_image(r).unwrap()).collect();
        for &b in &manifest.seen_styles {
            if a == b {
                continue;
            }
            let (ab, ba) = (ds.mapper(a, b).unwrap(), ds.mapper(b, a).unwrap());
            let (mut sum, mut n) = (0.0, 0usize);
            for img in &held {
                for &p in img.pixels() {
                    sum += (ba.apply(ab.apply(p as f64)) - p as f64).abs();
                    n += 1;
                }
            }
            cycle.insert(format!("{a}->{b}->{a}"), sum / n as f64);
        }
    }
    let worst_cycle = cycle.values().copied().fold(0.0, f64::max);

    let mut worst_identity = 0.0f64;
    for &s in &manifest.seen_styles {
        let imgs: Vec<_> = ds.records_for(s, Split::Pretrain).take(100).map(|r| ds.read_image(r).unwrap()).collect();
        let m = StyleMapper::fit(s, &imgs, s, &imgs).unwrap();
        for img in &imgs {
            for &p in img.pixels() {
                worst_identity = worst_identity.max((m.apply(p as f64) - p as f64).abs());
            }
        }
    }
    verdict(
        "A6",
        worst_cycle < 0.03 && worst_identity < 0.02,
        &format!("worst cycle mean |error| {worst_cycle:.2e} over {} pairs (< 0.03); identity fit max deviation {worst_identity:.2e} (< 0.02)", cycle.len()),
    );
}

// ---------------------------------------------------------------- A7

const SMALL: &str = r#"
seeds = [0, 1]

[dataset]
resolution = 32
mapper_fit_subjects = 25

[dataset.seen_counts]
pretrain_unlabeled = 40
detect_train = 8
detect_val = 4
detect_test = 6

[dataset.unseen_counts]
pretrain_unlabeled = 0
detect_train = 0
detect_val = 0
detect_test = 6

[pretrain]
steps = 6
batch_n_sources = 8

[detect]
epochs = 2
batch_size = 4
"#;

fn artifacts(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else if p.file_name().unwrap() != "ledger.jsonl" {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn a7_determinism() {
    let base = scratch("acceptance-a7");
    let run = |name: &str, threads: usize| {
        let mut cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
        cfg.output_dir = base.join(name);
        Runner::new(cfg, false).run_all(threads).unwrap();
        artifacts(&base.join(name))
    };
    let first = run("one", 1);
    let second = run("two", 2);
    let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
    let same_set = first.len() == second.len();

    // forced re-run of single commands in place
    let mut cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
    cfg.output_dir = base.join("one");
    let forced = Runner::new(cfg, true);
    forced.pretrain(Method::Pretrained(Scheme::Msvcl), 1).unwrap();
    forced.finetune(Method::Pretrained(Scheme::Msvcl), 1).unwrap();
    forced.eval(Method::Pretrained(Scheme::Msvcl), 1).unwrap();
    forced.probe(Method::Random, 0).unwrap();
    forced.report().unwrap();
    let third = artifacts(&base.join("one"));
    let changed: Vec<&String> = first.keys().filter(|k| first.get(*k) != third.get(*k)).collect();

    let ckpts = first.keys().filter(|k| k.ends_with(".ckpt")).count();
    verdict(
        "A7",
        same_set && differing.is_empty() && changed.is_empty() && ckpts == 20,
        &format!(
            "{} artifacts ({ckpts} checkpoints): separate runs (1 vs 2 threads) differ in {differing:?}, forced re-runs changed {changed:?}",
            first.len()
        ),
    );
}

// ---------------------------------------------------------------- A8

#[test]
fn a8_single_image_overfit() {
    let manifest = DatasetManifest::default();
    let subject = (0..)
        .map(|i| render_subject(&manifest, manifest.seen_styles[0], Split::DetectTrain, i).unwrap())
        .find(|s| !s.cc_boxes.is_empty())
        .unwrap();
    let img = LabeledImage {
        id: 0,
        style: subject.style,
        image: subject.cc.clone(),
        boxes: subject.cc_boxes.clone(),
    };
    let cfg = DetectConfig {
        epochs: 500,
        batch_size: 1,
        hflip: false,
        ..DetectConfig::default()
    };
    let ckpt = random_checkpoint(&Default::default(), 0, "overfit").unwrap();
    let data = std::slice::from_ref(&img);
    let out = finetune(&ckpt, data, data, &cfg, 0).unwrap();
    let first_perfect = out.val_map.iter().position(|&m| m == 1.0);
    let (aps, _) = evaluate(&out.detector, data, &cfg.infer(), 0.5).unwrap();
    verdict(
        "A8",
        aps.map == 1.0,
        &format!(
            "{} boxes; mAP@0.5 of the selected detector {:.4}; first step at 1.0: {}",
            img.boxes.len(),
            aps.map,
            first_perfect.map_or("never".into(), |s| (s + 1).to_string())
        ),
    );
}
