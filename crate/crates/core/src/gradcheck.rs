//! Finite-difference verification of analytic gradients at 64-bit.
//!
//! Each check reduces the output to a scalar with fixed random weights,
//! runs backward once, then compares every sampled input coordinate with a
//! central difference. Points where the one-sided differences disagree
//! (a ReLU or max-pool switch inside the step) are retried with smaller
//! steps; if the disagreement persists the point is counted as a kink and
//! left out of the error.

use rand::seq::index::sample;
use rand::Rng;

use crate::backbone::{build_model, ArchConfig, Mode, MotionConfig};
use crate::motion::{motion_filter, shift, DirectionSet, Displacement, FusionVariant, MotionBlock, MotionBlockSpec};
use crate::nn::{Init, BN_EPSILON, BN_MOMENTUM};
use crate::tensor::ops::{self, BatchNormMode};
use crate::tensor::{no_grad, ParamRegistry, Tensor};
use crate::error::{Error, Result};
use crate::util::rng_for;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const GRAPH_TOLERANCE: f64 = 1e-3;

// One-sided differences disagreeing by more than this at every step size
// mark a non-differentiable point.
const KINK_SPREAD: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckSettings {
    pub step: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub seeds: usize,
    /// Coordinates sampled per input tensor.
    pub max_elements: usize,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        GradcheckSettings {
            step: 1e-5,
            floor: 1e-6,
            seeds: 20,
            max_elements: 64,
        }
    }
}

/// Result of one check over a set of inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CheckOutcome {
    pub worst: f64,
    pub checked: usize,
    pub kinks: usize,
}

impl CheckOutcome {
    fn merge(&mut self, other: CheckOutcome) {
        self.worst = self.worst.max(other.worst);
        self.checked += other.checked;
        self.kinks += other.kinks;
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn weighted_sum(out: &Tensor<f64>, weights: &[f64]) -> f64 {
    out.data().iter().zip(weights).map(|(a, b)| a * b).sum()
}

/// Checks `d/d inputs` of `f` by central differences. `f` must be
/// deterministic and read the inputs through the tensors passed here.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    f: F,
    settings: &GradcheckSettings,
    seed: u64,
) -> Result<CheckOutcome>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    let mut rng = rng_for(seed, &[0x6c]);
    for t in inputs {
        t.zero_grad();
    }
    let out = f()?;
    let weights: Vec<f64> = (0..out.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = Tensor::new(weights.clone(), out.shape())?;
    ops::sum(&ops::mul(&out, &w)?)?.backward()?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    for t in inputs {
        t.zero_grad();
    }

    let _guard = no_grad();
    let eval = || -> Result<f64> { Ok(weighted_sum(&f()?, &weights)) };
    let mut outcome = CheckOutcome::default();
    for (t, grad) in inputs.iter().zip(&analytic) {
        let n = t.numel();
        let picks: Vec<usize> = if n <= settings.max_elements {
            (0..n).collect()
        } else {
            sample(&mut rng, n, settings.max_elements).into_vec()
        };
        for i in picks {
            let original = t.data()[i];
            let at = |x: f64| -> Result<f64> {
                t.data_mut()[i] = x;
                let v = eval();
                t.data_mut()[i] = original;
                v
            };
            let center = eval()?;
            // (error, one-sided spread) per step size
            let mut attempts = Vec::with_capacity(3);
            let mut h = settings.step;
            for _ in 0..3 {
                let (plus, minus) = (at(original + h)?, at(original - h)?);
                let (fwd, bwd) = ((plus - center) / h, (center - minus) / h);
                let err = relative_error(grad[i], (plus - minus) / (2.0 * h), settings.floor);
                attempts.push((err, relative_error(fwd, bwd, settings.floor)));
                if err <= OP_TOLERANCE * 0.1 {
                    break;
                }
                h *= 0.1;
            }
            let last = attempts[attempts.len() - 1];
            if last.0 > OP_TOLERANCE * 0.1 && attempts.iter().all(|a| a.1 > KINK_SPREAD) {
                outcome.kinks += 1;
                continue;
            }
            let err = if last.0 <= OP_TOLERANCE * 0.1 {
                last.0
            } else {
                attempts.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0
            };
            outcome.worst = outcome.worst.max(err);
            outcome.checked += 1;
        }
    }
    Ok(outcome)
}

/// Worst error for one op across all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: String,
    pub tolerance: f64,
    pub outcome: CheckOutcome,
    pub worst_seed: u64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.outcome.worst <= self.tolerance && self.outcome.checked > 0
    }
}

fn rand_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn leaf<R: Rng>(rng: &mut R, shape: &[usize]) -> Result<Tensor<f64>> {
    Tensor::leaf(rand_vec(rng, shape.iter().product()), shape, true)
}

/// Random `(B, C, H, W)` with at most `max` elements.
fn shape4<R: Rng>(rng: &mut R, max: usize) -> [usize; 4] {
    loop {
        let s = [
            rng.random_range(1..=2),
            rng.random_range(1..=3),
            rng.random_range(1..=5),
            rng.random_range(1..=5),
        ];
        if s.iter().product::<usize>() <= max {
            return s;
        }
    }
}

type Case = (Vec<Tensor<f64>>, Box<dyn Fn() -> Result<Tensor<f64>>>);

fn op_case(op: &str, seed: u64, max: usize) -> Result<Case> {
    let mut rng = rng_for(seed, &[crate::util::fnv1a64(op.as_bytes())]);
    let r = &mut rng;
    let case: Case = match op {
        "add" | "sub" | "mul" => {
            let s = shape4(r, max);
            let (a, b) = (leaf(r, &s)?, leaf(r, &s)?);
            let (a2, b2) = (a.clone(), b.clone());
            let f: Box<dyn Fn() -> Result<Tensor<f64>>> = match op {
                "add" => Box::new(move || ops::add(&a2, &b2)),
                "sub" => Box::new(move || ops::sub(&a2, &b2)),
                _ => Box::new(move || ops::mul(&a2, &b2)),
            };
            (vec![a, b], f)
        }
        "scale" => {
            let s = shape4(r, max);
            let a = leaf(r, &s)?;
            let k: f64 = r.random_range(-2.0..2.0);
            let a2 = a.clone();
            (vec![a], Box::new(move || ops::scale(&a2, k)))
        }
        "relu" => {
            let s = shape4(r, max);
            let a = leaf(r, &s)?;
            let a2 = a.clone();
            (vec![a], Box::new(move || ops::relu(&a2)))
        }
        "sum" => {
            let s = shape4(r, max);
            let a = leaf(r, &s)?;
            let a2 = a.clone();
            (vec![a], Box::new(move || ops::sum(&a2)))
        }
        "reshape" => {
            let s = shape4(r, max);
            let a = leaf(r, &s)?;
            let a2 = a.clone();
            (vec![a], Box::new(move || ops::reshape(&a2, &[s[0] * s[1], s[2] * s[3]])))
        }
        "concat_channels" | "concat_batch" => {
            let s = shape4(r, max / 2);
            let mut t = s;
            if op == "concat_channels" {
                t[1] = r.random_range(1..=2);
            } else {
                t[0] = r.random_range(1..=2);
            }
            let (a, b) = (leaf(r, &s)?, leaf(r, &t)?);
            let (a2, b2) = (a.clone(), b.clone());
            let f: Box<dyn Fn() -> Result<Tensor<f64>>> = if op == "concat_channels" {
                Box::new(move || ops::concat_channels(&[&a2, &b2]))
            } else {
                Box::new(move || ops::concat_batch(&[&a2, &b2]))
            };
            (vec![a, b], f)
        }
        "gather_rows" => {
            let mut s = shape4(r, max);
            s[0] = 2.min(s[0] + 1);
            let a = leaf(r, &s)?;
            let rows: Vec<Option<usize>> = (0..3)
                .map(|_| r.random_bool(0.75).then(|| r.random_range(0..s[0])))
                .collect();
            let a2 = a.clone();
            (vec![a], Box::new(move || ops::gather_rows(&a2, &rows)))
        }
        "global_avg_pool" => {
            let s = shape4(r, max);
            let a = leaf(r, &s)?;
            let a2 = a.clone();
            (vec![a], Box::new(move || ops::global_avg_pool(&a2)))
        }
        "linear" => {
            let (b, i, o) = (r.random_range(1..=4), r.random_range(1..=6), r.random_range(1..=5));
            let (x, w, bias) = (leaf(r, &[b, i])?, leaf(r, &[o, i])?, leaf(r, &[o])?);
            let (x2, w2, b2) = (x.clone(), w.clone(), bias.clone());
            (vec![x, w, bias], Box::new(move || ops::linear(&x2, &w2, Some(&b2))))
        }
        "dropout" => {
            let s = shape4(r, max);
            let a = leaf(r, &s)?;
            let a2 = a.clone();
            let mask_seed = r.random();
            (
                vec![a],
                Box::new(move || ops::dropout(&a2, 0.6, true, &mut rng_for(mask_seed, &[]))),
            )
        }
        "group_mean" => {
            let (g, b, c) = (r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=5));
            let a = leaf(r, &[g * b, c])?;
            let a2 = a.clone();
            (vec![a], Box::new(move || ops::group_mean(&a2, g)))
        }
        "softmax_cross_entropy" => {
            let (b, c) = (r.random_range(1..=4), r.random_range(2..=6));
            let logits = Tensor::leaf((0..b * c).map(|_| r.random_range(-3.0..3.0)).collect(), &[b, c], true)?;
            let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
            let l2 = logits.clone();
            (vec![logits], Box::new(move || ops::softmax_cross_entropy(&l2, &labels)))
        }
        "conv2d" => {
            let k = r.random_range(1..=3);
            let stride = r.random_range(1..=2);
            let pad = r.random_range(0..=k / 2);
            let (cin, cout) = (r.random_range(1..=2), r.random_range(1..=3));
            let (h, w) = (r.random_range(k..=5), r.random_range(k..=5));
            let b = r.random_range(1..=2);
            let x = leaf(r, &[b, cin, h, w])?;
            let wt = leaf(r, &[cout, cin, k, k])?;
            let bias = leaf(r, &[cout])?;
            let (x2, w2, b2) = (x.clone(), wt.clone(), bias.clone());
            (vec![x, wt, bias], Box::new(move || ops::conv2d(&x2, &w2, Some(&b2), stride, pad)))
        }
        "max_pool2d" => {
            let k = r.random_range(2..=3);
            let stride = r.random_range(1..=2);
            let pad = r.random_range(0..=k / 2);
            let mut s = shape4(r, max);
            s[2] = s[2].max(k);
            s[3] = s[3].max(k);
            s[1] = 1;
            let a = leaf(r, &s)?;
            let a2 = a.clone();
            (vec![a], Box::new(move || ops::max_pool2d(&a2, k, stride, pad)))
        }
        "batch_norm2d_train" | "batch_norm2d_eval" => {
            let mut s = shape4(r, max);
            if s[0] * s[2] * s[3] < 3 {
                s[2] = 3;
            }
            let c = s[1];
            let (x, g, b) = (leaf(r, &s)?, leaf(r, &[c])?, leaf(r, &[c])?);
            let mean = Tensor::new(rand_vec(r, c), &[c])?;
            let var = Tensor::new((0..c).map(|_| r.random_range(0.5..2.0)).collect(), &[c])?;
            let mode = if op.ends_with("train") { BatchNormMode::Train } else { BatchNormMode::Eval };
            let (x2, g2, b2) = (x.clone(), g.clone(), b.clone());
            (
                vec![x, g, b],
                Box::new(move || ops::batch_norm2d(&x2, &g2, &b2, &mean, &var, mode, BN_MOMENTUM, BN_EPSILON)),
            )
        }
        "shift" => {
            let s = shape4(r, max);
            let a = leaf(r, &s)?;
            let dirs = DirectionSet::default();
            let d: Displacement = dirs.as_slice()[r.random_range(0..dirs.len())];
            let a2 = a.clone();
            (vec![a], Box::new(move || shift(&a2, d)))
        }
        "motion_filter" => {
            let s = shape4(r, max / 2);
            let (a, b) = (leaf(r, &s)?, leaf(r, &s)?);
            let (a2, b2) = (a.clone(), b.clone());
            (
                vec![a, b],
                Box::new(move || motion_filter(&a2, &b2, &DirectionSet::default())),
            )
        }
        _ => return Err(Error::Usage(format!("no gradient check for op '{op}'"))),
    };
    Ok(case)
}

pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sum",
    "reshape",
    "concat_channels",
    "concat_batch",
    "gather_rows",
    "global_avg_pool",
    "linear",
    "dropout",
    "group_mean",
    "softmax_cross_entropy",
    "conv2d",
    "max_pool2d",
    "batch_norm2d_train",
    "batch_norm2d_eval",
    "shift",
    "motion_filter",
];

/// Runs one op's suite over `settings.seeds` randomized cases.
pub fn check_op(op: &str, settings: &GradcheckSettings, base_seed: u64) -> Result<OpReport> {
    let mut total = CheckOutcome::default();
    let mut worst_seed = base_seed;
    for s in 0..settings.seeds as u64 {
        let seed = base_seed.wrapping_add(s);
        let (inputs, f) = op_case(op, seed, settings.max_elements)?;
        let outcome = check_gradients(&inputs, f, settings, seed)?;
        if outcome.worst > total.worst {
            worst_seed = seed;
        }
        total.merge(outcome);
    }
    Ok(OpReport {
        op: op.to_string(),
        tolerance: OP_TOLERANCE,
        outcome: total,
        worst_seed,
    })
}

/// Tiny architecture used for whole-graph checks.
pub fn toy_arch(variant: Option<FusionVariant>, seed: u64) -> ArchConfig {
    let motion = match variant {
        Some(v) => MotionConfig::all(v, 2),
        None => MotionConfig::off(),
    };
    ArchConfig {
        image_height: 24,
        image_width: 24,
        stem_channels: 2,
        stage_channels: [2, 3, 4, 4],
        num_classes: 3,
        dropout_keep: 0.75,
        motion,
        seed,
        ..ArchConfig::default()
    }
}

/// Motion block alone on a `(2·B, C, H, W)` folded pair batch.
pub fn check_motion_block(variant: FusionVariant, settings: &GradcheckSettings, seed: u64) -> Result<CheckOutcome> {
    let mut rng = rng_for(seed, &[0x4d]);
    let mut registry = ParamRegistry::<f64>::new();
    let spec = MotionBlockSpec::new(variant, 2, DirectionSet::default(), 3)?;
    let block = MotionBlock::new(&mut registry, "m", spec, Init { seed })?;
    let x = leaf(&mut rng, &[4, 3, 3, 3])?;
    let mut inputs = vec![x.clone()];
    inputs.extend(registry.params().iter().map(|p| p.tensor.clone()));
    check_gradients(&inputs, move || block.forward_folded(&x, 2, BatchNormMode::Train), settings, seed)
}

/// Every parameter and the input frames of a toy model with `K = 2`,
/// through snippet consensus and cross-entropy.
pub fn check_full_graph(variant: Option<FusionVariant>, settings: &GradcheckSettings, seed: u64) -> Result<CheckOutcome> {
    let config = toy_arch(variant, seed);
    let model = build_model::<f64>(&config)?;
    let mut rng = rng_for(seed, &[0x46]);
    let (b, k) = (2, 2);
    let frames = leaf(&mut rng, &[b, k, 3, config.image_height, config.image_width])?;
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..config.num_classes)).collect();
    let params: Vec<Tensor<f64>> = model.registry.params().iter().map(|p| p.tensor.clone()).collect();
    let classes = config.num_classes;
    let input = frames.clone();
    let f = move || {
        let mut drop_rng = rng_for(seed, &[0x44]);
        let logits = model.forward_snippets(&input, Mode::Train, &mut drop_rng)?;
        let video = ops::group_mean(&ops::reshape(&logits, &[b * k, classes])?, k)?;
        ops::softmax_cross_entropy(&video, &labels)
    };
    // every parameter coordinate, a sample of input pixels
    let exhaustive = GradcheckSettings { max_elements: usize::MAX, ..*settings };
    let mut outcome = check_gradients(&params, &f, &exhaustive, seed)?;
    outcome.merge(check_gradients(&[frames], &f, settings, seed)?);
    Ok(outcome)
}

/// All op suites followed by the motion blocks and full graphs.
pub fn run_all(settings: &GradcheckSettings, seed: u64) -> Result<Vec<OpReport>> {
    let mut reports = Vec::new();
    for op in OPS {
        reports.push(check_op(op, settings, seed)?);
    }
    for variant in [FusionVariant::Sum, FusionVariant::Concat] {
        let mut total = CheckOutcome::default();
        for s in 0..4 {
            total.merge(check_motion_block(variant, settings, seed.wrapping_add(s))?);
        }
        reports.push(OpReport {
            op: format!("motion_block_{variant}"),
            tolerance: GRAPH_TOLERANCE,
            outcome: total,
            worst_seed: seed,
        });
    }
    for variant in [None, Some(FusionVariant::Sum), Some(FusionVariant::Concat)] {
        let name = variant.map_or("baseline".to_string(), |v| v.to_string());
        reports.push(OpReport {
            op: format!("full_graph_{name}"),
            tolerance: GRAPH_TOLERANCE,
            outcome: check_full_graph(variant, settings, seed)?,
            worst_seed: seed,
        });
    }
    Ok(reports)
}
