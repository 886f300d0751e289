//! Finite-difference checks of every differentiable operation and both losses.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::contrastive::{nt_xent, EmbeddingSet};
use crate::detect::{assign_targets, detect_loss, FocalParams, Grid, HeadOutputs, NUM_CLASSES};
use crate::nn::{
    grad_check, BatchNormIds, Encoder, EncoderConfig, GradCheckOptions, GradCheckReport, Graph, Mode, ParamSet, Scalar,
    Tensor, ValueId,
};
use crate::seed;
use crate::synthgen::{BoxLabel, LesionClass};
use crate::Result;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    /// Random configurations per operation.
    pub configs: usize,
    pub seed: u64,
    /// Scales the NT-Xent gradient by 1.01, for negative-control tests.
    pub corrupt: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            configs: 20,
            seed: 0,
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OpReport {
    pub op: String,
    pub configs: usize,
    pub report: GradCheckReport,
}

impl OpReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.report.passes(tol)
    }
}

/// Pass threshold on the max relative error: strict in f64, informational in f32.
pub fn tolerance<T: Scalar>() -> f64 {
    if T::NAME == "f64" {
        1e-5
    } else {
        1e-2
    }
}

fn randn<T: Scalar>(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(-1.0..1.0) * scale)).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

fn weights<T: Scalar>(n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    (0..n).map(|_| T::from_f64(rng.random_range(-1.0..1.0))).collect()
}

fn reduce<T: Scalar>(g: &mut Graph<T>, y: ValueId, w: &[T]) -> Result<ValueId> {
    g.weighted_sum(y, w.to_vec())
}

type Build<T> = Box<dyn Fn(&mut Graph<T>, &ParamSet<T>, &[ValueId]) -> Result<ValueId>>;

struct Case<T> {
    params: ParamSet<T>,
    inputs: Vec<Tensor<T>>,
    mode: Mode,
    build: Build<T>,
}

fn bn_params<T: Scalar>(c: usize, rng: &mut ChaCha8Rng) -> Result<(ParamSet<T>, BatchNormIds)> {
    let mut p = ParamSet::new();
    let gamma: Tensor<T> = Tensor::from_vec(
        &[c],
        (0..c).map(|_| T::from_f64(rng.random_range(0.5..1.5))).collect(),
    )?;
    let ids = BatchNormIds {
        gamma: p.add("bn.gamma", gamma, true)?,
        beta: p.add("bn.beta", randn(&[c], 0.5, rng), true)?,
        running_mean: p.add("bn.running_mean", randn(&[c], 0.3, rng), false)?,
        running_var: p.add(
            "bn.running_var",
            Tensor::from_vec(&[c], (0..c).map(|_| T::from_f64(rng.random_range(0.5..2.0))).collect())?,
            false,
        )?,
    };
    Ok((p, ids))
}

fn conv_case<T: Scalar>(rng: &mut ChaCha8Rng) -> Result<Case<T>> {
    let k = [1, 3][rng.random_range(0..2)];
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=k / 2);
    let (h, w, cin, cout) = (rng.random_range(4..7), rng.random_range(4..7), rng.random_range(1..4), rng.random_range(1..4));
    let with_bias = rng.random::<bool>();
    let x = randn::<T>(&[2, h, w, cin], 1.0, rng);
    let wt = randn::<T>(&[k, k, cin, cout], 0.5, rng);
    let b = randn::<T>(&[cout], 0.5, rng);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let wsum = weights::<T>(2 * oh * ow * cout, rng);
    Ok(Case {
        params: ParamSet::new(),
        inputs: vec![x, wt, b],
        mode: Mode::Train,
        build: Box::new(move |g, _, ids| {
            let bias = with_bias.then_some(ids[2]);
            let y = g.conv2d(ids[0], ids[1], bias, stride, pad)?;
            let s = if with_bias { y } else { g.sum(ids[2]) };
            if with_bias {
                reduce(g, s, &wsum)
            } else {
                // keep the unused bias input in the graph with zero weight
                let r = reduce(g, y, &wsum)?;
                let _ = s;
                Ok(r)
            }
        }),
    })
}

fn batch_norm_case<T: Scalar>(mode: Mode, rng: &mut ChaCha8Rng) -> Result<Case<T>> {
    let c = rng.random_range(1..4);
    let (n, h, w) = (rng.random_range(2..4), rng.random_range(1..4), rng.random_range(2..4));
    let (params, ids) = bn_params::<T>(c, rng)?;
    let x = randn::<T>(&[n, h, w, c], 1.5, rng);
    let wsum = weights::<T>(n * h * w * c, rng);
    Ok(Case {
        params,
        inputs: vec![x],
        mode,
        build: Box::new(move |g, p, v| {
            let y = g.batch_norm(p, v[0], &ids)?;
            reduce(g, y, &wsum)
        }),
    })
}

fn unary_case<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: Vec<usize>,
    out_len: usize,
    op: fn(&mut Graph<T>, ValueId) -> Result<ValueId>,
) -> Case<T> {
    let x = randn::<T>(&shape, 1.0, rng);
    let wsum = weights::<T>(out_len, rng);
    Case {
        params: ParamSet::new(),
        inputs: vec![x],
        mode: Mode::Train,
        build: Box::new(move |g, _, v| {
            let y = op(g, v[0])?;
            reduce(g, y, &wsum)
        }),
    }
}

fn dense_case<T: Scalar>(rng: &mut ChaCha8Rng) -> Case<T> {
    let (n, i, o) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..5));
    let wsum = weights::<T>(n * o, rng);
    Case {
        params: ParamSet::new(),
        inputs: vec![randn(&[n, i], 1.0, rng), randn(&[i, o], 1.0, rng), randn(&[o], 1.0, rng)],
        mode: Mode::Train,
        build: Box::new(move |g, _, v| {
            let y = g.dense(v[0], v[1], v[2])?;
            reduce(g, y, &wsum)
        }),
    }
}

fn encoder_case<T: Scalar>(rng: &mut ChaCha8Rng) -> Result<Case<T>> {
    let cfg = EncoderConfig {
        in_channels: 1,
        widths: vec![2, 3],
        projection_hidden: 4,
        projection_dim: 3,
    };
    let mut params = ParamSet::new();
    let enc = Encoder::init(&cfg, &mut params, rng)?;
    // zero-initialized biases can leave a projected row at the origin,
    // where normalization is not differentiable
    for name in ["proj.fc1.bias", "proj.fc2.bias"] {
        let shape = params.by_name(name).expect("encoder parameter").value.shape().to_vec();
        params.assign(name, &randn(&shape, 0.5, rng))?;
    }
    let x = randn::<T>(&[2, 8, 8, 1], 1.0, rng);
    let wsum = weights::<T>(2 * 3, rng);
    Ok(Case {
        params,
        inputs: vec![x],
        mode: Mode::Train,
        build: Box::new(move |g, p, v| {
            let f = enc.features(g, p, v[0])?;
            let z = enc.project(g, p, f)?;
            reduce(g, z, &wsum)
        }),
    })
}

fn nt_xent_case<T: Scalar>(rng: &mut ChaCha8Rng, corrupt: bool) -> Case<T> {
    let n = 2 * rng.random_range(1..5);
    let d = rng.random_range(2..6);
    let tau = rng.random_range(0.2..1.0);
    let map: Vec<usize> = (0..n).map(|i| i ^ 1).collect();
    Case {
        params: ParamSet::new(),
        inputs: vec![randn(&[n, d], 1.0, rng)],
        mode: Mode::Train,
        build: Box::new(move |g, _, v| {
            let z = g.l2_normalize(v[0]);
            let emb = EmbeddingSet::unchecked(g.value(z).to_f64_vec(), d, map.clone())?;
            let out = nt_xent(&emb, tau)?;
            let scale = if corrupt { 1.01 } else { 1.0 };
            let grad: Vec<f64> = out.grad.iter().map(|x| x * scale).collect();
            let grad = Tensor::from_f64_slice(&[n, d], &grad)?;
            g.fused_loss(&[z], T::from_f64(out.loss), vec![grad])
        }),
    }
}

fn detect_loss_case<T: Scalar>(rng: &mut ChaCha8Rng) -> Result<Case<T>> {
    let grid = Grid::for_image(32, 32, 8)?;
    let mut boxes = Vec::new();
    for _ in 0..rng.random_range(0..3) {
        let (x, y) = (rng.random_range(0.0..20.0), rng.random_range(0.0..20.0));
        let (w, h) = (rng.random_range(6.0..12.0), rng.random_range(6.0..12.0));
        boxes.push(BoxLabel {
            class: LesionClass::from_index(rng.random_range(0..2)).expect("index"),
            x_min: x,
            y_min: y,
            x_max: x + w,
            y_max: y + h,
        });
    }
    let targets = vec![assign_targets(&boxes, grid)];
    let l = grid.len();
    let shapes = [[1, 4, 4, NUM_CLASSES], [1, 4, 4, 4], [1, 4, 4, 1]];
    Ok(Case {
        params: ParamSet::new(),
        inputs: shapes.iter().map(|s| randn(s, 1.5, rng)).collect(),
        mode: Mode::Train,
        build: Box::new(move |g, _, v| {
            let (c, b, z) = (g.value(v[0]).to_f64_vec(), g.value(v[1]).to_f64_vec(), g.value(v[2]).to_f64_vec());
            debug_assert_eq!(z.len(), l);
            let out = detect_loss(
                HeadOutputs {
                    class_logits: &c,
                    box_raw: &b,
                    centerness_logits: &z,
                },
                &targets,
                FocalParams::default(),
            )?;
            let grads = vec![
                Tensor::from_f64_slice(&shapes[0], &out.grad_class)?,
                Tensor::from_f64_slice(&shapes[1], &out.grad_box)?,
                Tensor::from_f64_slice(&shapes[2], &out.grad_centerness)?,
            ];
            g.fused_loss(&[v[0], v[1], v[2]], T::from_f64(out.total), grads)
        }),
    })
}

pub const SUITE_OPS: [&str; 13] = [
    "conv2d",
    "batch_norm_train",
    "batch_norm_eval",
    "relu",
    "max_pool2",
    "global_avg_pool",
    "dense",
    "l2_normalize",
    "sum",
    "half_sum_squares",
    "encoder",
    "nt_xent",
    "detect_loss",
];

fn make_case<T: Scalar>(op: &str, rng: &mut ChaCha8Rng, corrupt: bool) -> Result<Case<T>> {
    let r = rng.random_range(2..5);
    let c = rng.random_range(1..4);
    Ok(match op {
        "conv2d" => conv_case(rng)?,
        "batch_norm_train" => batch_norm_case(Mode::Train, rng)?,
        "batch_norm_eval" => batch_norm_case(Mode::Eval, rng)?,
        "relu" => unary_case(rng, vec![r, c], r * c, |g, x| Ok(g.relu(x))),
        "max_pool2" => unary_case(rng, vec![2, 2 * r, 4, c], 2 * r * 2 * c, |g, x| g.max_pool2(x)),
        "global_avg_pool" => unary_case(rng, vec![2, r, 3, c], 2 * c, |g, x| g.global_avg_pool(x)),
        "dense" => dense_case(rng),
        "l2_normalize" => unary_case(rng, vec![r, c + 1], r * (c + 1), |g, x| Ok(g.l2_normalize(x))),
        "sum" => unary_case(rng, vec![r, c], 1, |g, x| Ok(g.sum(x))),
        "half_sum_squares" => unary_case(rng, vec![r, c], 1, |g, x| Ok(g.half_sum_squares(x))),
        "encoder" => encoder_case(rng)?,
        "nt_xent" => nt_xent_case(rng, corrupt),
        "detect_loss" => detect_loss_case(rng)?,
        other => unreachable!("unknown op {other}"),
    })
}

/// Runs `opts.configs` random configurations of every operation in [`SUITE_OPS`].
pub fn run_suite<T: Scalar>(opts: &SuiteOptions) -> Result<Vec<OpReport>> {
    let mut out = Vec::new();
    for op in SUITE_OPS {
        let mut rng = seed::rng(seed::derive(opts.seed, &[seed::tag(op)]));
        let mut total: Option<GradCheckReport> = None;
        for k in 0..opts.configs {
            let mut case = make_case::<T>(op, &mut rng, opts.corrupt)?;
            let mut go = GradCheckOptions {
                seed: seed::derive(opts.seed, &[seed::tag(op), k as u64]),
                ..GradCheckOptions::default()
            };
            if T::NAME != "f64" {
                // single precision cannot resolve a 1e-4 step
                go.eps = 1e-2;
                go.floor = 1e-3;
            }
            let r = grad_check(&mut case.params, &case.inputs, case.mode, &go, &case.build)?;
            match &mut total {
                None => total = Some(r),
                Some(t) => t.merge(&r),
            }
        }
        out.push(OpReport {
            op: op.to_string(),
            configs: opts.configs,
            report: total.expect("at least one configuration"),
        });
    }
    Ok(out)
}
