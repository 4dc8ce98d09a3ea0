//! Finite-difference gradient suite: every differentiable tape op on small
//! random operands, plus the full toy dual-head training loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, NormStats, Tape, Var};
use crate::error::Result;
use crate::model::{ForwardOptions, HeadKind, Model, ModelConfig, LN_EPS};
use crate::ops::NormMode;
use crate::tensor::Tensor;
use crate::train::{total_loss, LossConfig, BCE_CLAMP};

/// Parameter entries sampled from the full model.
pub const MODEL_ENTRIES: usize = 50;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteRow {
    pub name: String,
    pub checked: usize,
    pub kinked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl SuiteRow {
    fn new(name: &str, r: &GradCheckReport) -> Self {
        Self {
            name: name.to_string(),
            checked: r.entries.len(),
            kinked: r.kinked.len(),
            max_rel_error: r.max_rel_error,
            tolerance: r.tolerance,
            passed: r.passed && !r.entries.is_empty(),
        }
    }
}

type LossFn = Box<dyn for<'a> Fn(&mut Tape<'a, f64>, &'a Vec<Tensor<f64>>) -> Result<Var>>;

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    loss: LossFn,
}

/// Projects `y` onto a fixed random tensor so every output element carries
/// a distinct weight.
fn project<'a>(tape: &mut Tape<'a, f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn vars<'a>(tape: &mut Tape<'a, f64>, p: &'a [Tensor<f64>]) -> Vec<Var> {
    p.iter().enumerate().map(|(i, t)| tape.param(i, t)).collect()
}

fn cases() -> Vec<Case> {
    let case = |name, shapes: &[&[usize]], loss: LossFn| Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        loss,
    };
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], Box::new(|t, p| {
            let v = vars(t, p);
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 1)
        })),
        case("linear", &[&[2, 3, 4], &[4, 5], &[5]], Box::new(|t, p| {
            let v = vars(t, p);
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, y, 2)
        })),
        case("add", &[&[2, 3], &[2, 3]], Box::new(|t, p| {
            let v = vars(t, p);
            let y = t.add(v[0], v[1])?;
            project(t, y, 3)
        })),
        case("add_broadcast", &[&[2, 3, 4], &[3, 4]], Box::new(|t, p| {
            let v = vars(t, p);
            let y = t.add_broadcast(v[0], v[1])?;
            project(t, y, 4)
        })),
        case("mul", &[&[2, 3], &[2, 3]], Box::new(|t, p| {
            let v = vars(t, p);
            let y = t.mul(v[0], v[1])?;
            project(t, y, 5)
        })),
        case("scale", &[&[5]], Box::new(|t, p| {
            let v = vars(t, p);
            let y = t.scale(v[0], -1.7)?;
            project(t, y, 6)
        })),
        case("relu", &[&[4, 5]], Box::new(|t, p| {
            let v = vars(t, p);
            let y = t.relu(v[0])?;
            project(t, y, 7)
        })),
        case("gelu", &[&[4, 5]], Box::new(|t, p| {
            let v = vars(t, p);
            let y = t.gelu(v[0])?;
            project(t, y, 8)
        })),
        case("sigmoid", &[&[4, 5]], Box::new(|t, p| {
            let v = vars(t, p);
            let y = t.sigmoid(v[0])?;
            project(t, y, 9)
        })),
        case("conv2d", &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]], Box::new(|t, p| {
            let v = vars(t, p);
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            project(t, y, 10)
        })),
        case("conv_transpose2d", &[&[2, 3, 3, 3], &[3, 2, 2, 2], &[2]], Box::new(|t, p| {
            let v = vars(t, p);
            let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 0)?;
            project(t, y, 11)
        })),
        case("batch_norm2d", &[&[3, 2, 3, 3], &[2], &[2]], Box::new(|t, p| {
            let v = vars(t, p);
            let (y, _) = t.batch_norm2d(v[0], v[1], v[2], NormStats::Batch, 1e-5)?;
            project(t, y, 12)
        })),
        case("layer_norm", &[&[2, 3, 6], &[6], &[6]], Box::new(|t, p| {
            let v = vars(t, p);
            let y = t.layer_norm(v[0], v[1], v[2], LN_EPS)?;
            project(t, y, 13)
        })),
        case("attention", &[&[2, 3, 4], &[2, 3, 4], &[2, 3, 4]], Box::new(|t, p| {
            let v = vars(t, p);
            let y = t.attention(v[0], v[1], v[2], 2)?;
            project(t, y, 14)
        })),
        case("mean_tokens", &[&[2, 5, 3]], Box::new(|t, p| {
            let v = vars(t, p);
            let y = t.mean_tokens(v[0])?;
            project(t, y, 15)
        })),
        case("tokens_from_map", &[&[2, 3, 2, 2]], Box::new(|t, p| {
            let v = vars(t, p);
            let y = t.tokens_from_map(v[0])?;
            project(t, y, 16)
        })),
        case("reshape", &[&[2, 6]], Box::new(|t, p| {
            let v = vars(t, p);
            let y = t.reshape(v[0], &[3, 4])?;
            project(t, y, 17)
        })),
        case("concat_channels", &[&[2, 1, 2, 2], &[2, 3, 2, 2]], Box::new(|t, p| {
            let v = vars(t, p);
            let y = t.concat_channels(v[0], v[1])?;
            project(t, y, 18)
        })),
        case("mean", &[&[3, 4]], Box::new(|t, p| {
            let v = vars(t, p);
            let y = t.mul(v[0], v[0])?;
            t.mean(y)
        })),
        case("bce", &[&[2, 1, 3, 3]], Box::new(|t, p| {
            let v = vars(t, p);
            let prob = t.sigmoid(v[0])?;
            let target = Tensor::from_fn(vec![2, 1, 3, 3], |i| (i % 3 == 0) as u8 as f64);
            t.bce(prob, &target, BCE_CLAMP)
        })),
    ]
}

fn op_options(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        seed,
        skip_kinks: true,
        ..GradCheckOptions::default()
    }
}

/// Checks every differentiable op in 64-bit.
pub fn op_suite(seed: u64) -> Result<Vec<SuiteRow>> {
    let mut rows = Vec::new();
    for (k, c) in cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64) << 8);
        let mut params: Vec<Tensor<f64>> = c.shapes.iter().map(|s| Tensor::randn(s.clone(), 1.0, &mut rng).with_requires_grad()).collect();
        let report = grad_check(&mut params, &*c.loss, &op_options(seed))?;
        rows.push(SuiteRow::new(c.name, &report));
    }
    Ok(rows)
}

/// Checks the full toy dual-head loss (`lambda_a * bce_a + lambda_o *
/// bce_o`, train-mode batch norm) on `MODEL_ENTRIES` sampled parameters.
pub fn model_check(seed: u64) -> Result<(SuiteRow, GradCheckReport)> {
    let mut model: Model<f64> = Model::new(ModelConfig::toy(HeadKind::Dual).with_seed(seed))?;
    let side = model.config().image_side;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let x = Tensor::rand_uniform(vec![2, 4, side, side], -1.0, 1.0, &mut rng);
    let ya = Tensor::from_fn(vec![2, 1, side, side], |i| ((i / side + i % side) % 3 == 0) as u8 as f64);
    let yo = Tensor::from_fn(vec![2, 1, side, side], |i| ((i / 7) % 2) as f64);
    let loss_cfg = LossConfig::default();
    let opts = GradCheckOptions {
        max_entries: Some(MODEL_ENTRIES),
        ..op_options(seed.wrapping_add(2))
    };
    let report = grad_check(
        &mut model,
        |tape, m| {
            let xv = tape.constant(x.clone());
            let out = m.forward(tape, xv, NormMode::Train, ForwardOptions::default())?;
            Ok(total_loss(tape, out.amodal, out.occluded, &ya, Some(&yo), &loss_cfg)?.total)
        },
        &opts,
    )?;
    Ok((SuiteRow::new("toy_dual_model", &report), report))
}

/// Op suite followed by the full-model row.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteRow>> {
    let mut rows = op_suite(seed)?;
    rows.push(model_check(seed)?.0);
    Ok(rows)
}
