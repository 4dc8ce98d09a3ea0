//! Mask IoU metrics, occlusion-stratified reports, and the inference-time
//! harness.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{RoISample, RoITargets};
use crate::error::{contract_err, Result};
use crate::model::{HeadKind, Model, Prediction};
use crate::raster::Mask;
use crate::scalar::Scalar;
use crate::scenegen::OcclusionBin;
use crate::tensor::Tensor;
use crate::train::{fit, FitConfig, TrainSample};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const WARMUP_SAMPLES: usize = 3;

/// `|a & b| / |a | b|`; 1.0 when both are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return contract_err(format!("iou of {}x{} and {}x{} masks", a.width, a.height, b.width, b.height));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Pixels `>= thr` are set.
pub fn threshold_mask<T: Scalar>(prob: &[T], width: usize, height: usize, thr: f64) -> Result<Mask> {
    if prob.len() != width * height {
        return contract_err(format!("{} values for a {width}x{height} mask", prob.len()));
    }
    let thr = T::lit(thr);
    Ok(Mask {
        width,
        height,
        data: prob.iter().map(|&p| p >= thr).collect(),
    })
}

/// Thresholded model output for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryPrediction {
    pub amodal: Mask,
    /// Present for the dual head only.
    pub occluded: Option<Mask>,
}

impl BinaryPrediction {
    /// Splits a batched prediction into per-instance binary masks.
    pub fn from_batch<T: Scalar>(pred: &Prediction<T>, thr: f64) -> Result<Vec<Self>> {
        let shape = pred.amodal.shape();
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        (0..n)
            .map(|i| {
                Ok(Self {
                    amodal: threshold_mask(pred.amodal.batch_item(i), w, h, thr)?,
                    occluded: match &pred.occluded {
                        Some(o) => Some(threshold_mask(o.batch_item(i), w, h, thr)?),
                        None => None,
                    },
                })
            })
            .collect()
    }
}

/// Visible prediction: `amodal & !occluded` with an occluded output,
/// otherwise `amodal & input_visible`.
pub fn derive_visible(pred: &BinaryPrediction, input_visible: &Mask) -> Result<Mask> {
    match &pred.occluded {
        Some(o) => pred.amodal.and_not(o),
        None => pred.amodal.and(input_visible),
    }
}

/// Occluded prediction: the occluded output when present, otherwise
/// `amodal & !input_visible`.
pub fn derive_occluded(pred: &BinaryPrediction, input_visible: &Mask) -> Result<Mask> {
    match &pred.occluded {
        Some(o) => Ok(o.clone()),
        None => pred.amodal.and_not(input_visible),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub scene_id: String,
    pub instance_id: usize,
    pub occ_bin: OcclusionBin,
    pub iou_a: f64,
    pub iou_v: f64,
    pub iou_o: f64,
}

pub fn score_instance(sample: &RoISample, pred: &BinaryPrediction) -> Result<InstanceScore> {
    let RoITargets { amodal, visible, occluded } = &sample.targets;
    let input_visible = &sample.roi.visible;
    Ok(InstanceScore {
        scene_id: sample.scene_id.clone(),
        instance_id: sample.instance_id,
        occ_bin: sample.occ_bin,
        iou_a: iou(&pred.amodal, amodal)?,
        iou_v: iou(&derive_visible(pred, input_visible)?, visible)?,
        iou_o: iou(&derive_occluded(pred, input_visible)?, occluded)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinScore {
    pub bin: OcclusionBin,
    pub count: usize,
    /// `None` when the bin is empty.
    pub miou_o: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub miou_a: f64,
    pub miou_v: f64,
    pub miou_o: f64,
    pub per_bin: Vec<BinScore>,
    pub n_samples: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Means of per-instance IoUs, overall and per occlusion bin.
pub fn aggregate(scores: &[InstanceScore]) -> Result<Metrics> {
    if scores.is_empty() {
        return contract_err("no instances to aggregate");
    }
    let per_bin = OcclusionBin::ALL
        .iter()
        .map(|&bin| BinScore {
            bin,
            count: scores.iter().filter(|s| s.occ_bin == bin).count(),
            miou_o: mean(scores.iter().filter(|s| s.occ_bin == bin).map(|s| s.iou_o)),
        })
        .collect();
    Ok(Metrics {
        miou_a: mean(scores.iter().map(|s| s.iou_a)).unwrap_or(0.0),
        miou_v: mean(scores.iter().map(|s| s.iou_v)).unwrap_or(0.0),
        miou_o: mean(scores.iter().map(|s| s.iou_o)).unwrap_or(0.0),
        per_bin,
        n_samples: scores.len(),
    })
}

/// Scores predictions against their samples, pairwise.
pub fn score_predictions(samples: &[RoISample], preds: &[BinaryPrediction]) -> Result<Vec<InstanceScore>> {
    if samples.len() != preds.len() {
        return contract_err(format!("{} samples but {} predictions", samples.len(), preds.len()));
    }
    samples.iter().zip(preds).map(|(s, p)| score_instance(s, p)).collect()
}

/// Mean and sample standard deviation of per-sample forward time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub t_inf_ms: f64,
    pub t_inf_std_ms: f64,
    pub warmup: usize,
    pub timed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub head: HeadKind,
    pub threshold: f64,
    #[serde(flatten)]
    pub metrics: Metrics,
    #[serde(flatten)]
    pub timing: Timing,
    pub config_fingerprint: String,
    pub scores: Vec<InstanceScore>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub threshold: f64,
    pub warmup: usize,
    /// Shuffles the timing order; metrics do not depend on it.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            warmup: WARMUP_SAMPLES,
            seed: 0,
        }
    }
}

fn single_input<T: Scalar>(sample: &RoISample) -> Result<Tensor<T>> {
    let s = sample.roi.side;
    Tensor::new(vec![1, 4, s, s], sample.roi.to_input())
}

/// Runs the model on every sample one at a time, timing only the forward
/// pass, and scores the outputs in RoI space.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[RoISample], opts: &EvalOptions) -> Result<EvalReport> {
    if samples.is_empty() {
        return contract_err("evaluation split is empty");
    }
    let side = model.config().image_side;
    if let Some(s) = samples.iter().find(|s| s.roi.side != side) {
        return contract_err(format!("RoI side {} does not match model side {side}", s.roi.side));
    }
    let inputs: Vec<Tensor<T>> = samples.iter().map(single_input).collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));

    for i in 0..opts.warmup {
        model.predict(&inputs[order[i % order.len()]])?;
    }
    let mut preds: Vec<Option<BinaryPrediction>> = vec![None; samples.len()];
    let mut times = Vec::with_capacity(samples.len());
    for &i in &order {
        let start = Instant::now();
        let pred = model.predict(&inputs[i])?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        preds[i] = BinaryPrediction::from_batch(&pred, opts.threshold)?.pop();
    }
    let preds: Vec<BinaryPrediction> = preds.into_iter().map(|p| p.expect("every sample predicted")).collect();
    let scores = score_predictions(samples, &preds)?;
    let t_mean = mean(times.iter().copied()).unwrap_or(0.0);
    let t_std = if times.len() > 1 {
        (times.iter().map(|t| (t - t_mean).powi(2)).sum::<f64>() / (times.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(EvalReport {
        head: model.config().head_kind,
        threshold: opts.threshold,
        metrics: aggregate(&scores)?,
        timing: Timing {
            t_inf_ms: t_mean,
            t_inf_std_ms: t_std,
            warmup: opts.warmup,
            timed: times.len(),
        },
        config_fingerprint: model.config().fingerprint(),
        scores,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_o: f64,
    pub miou_a: f64,
    pub miou_v: f64,
    pub miou_o: f64,
}

pub const SWEEP_CSV_HEADER: &str = "lambda_o,miou_a,miou_v,miou_o";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.lambda_o, r.miou_a, r.miou_v, r.miou_o));
    }
    out
}

/// Trains one model per `lambda_o` (each from `build()`, with the same fit
/// seed) and evaluates it on `eval_samples`.
pub fn lambda_sweep<T: Scalar>(
    build: impl Fn() -> Result<Model<T>>,
    train: &[TrainSample<T>],
    eval_samples: &[RoISample],
    lambdas: &[f64],
    fit_cfg: &FitConfig,
    eval_opts: &EvalOptions,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda_o in lambdas {
        let mut model = build()?;
        if model.config().head_kind != HeadKind::Dual {
            return contract_err("lambda sweep needs the dual head");
        }
        let mut cfg = fit_cfg.clone();
        cfg.loss = crate::train::LossConfig::new(cfg.loss.lambda_a, lambda_o)?;
        fit(&mut model, train, &cfg)?;
        let m = evaluate(&model, eval_samples, eval_opts)?.metrics;
        rows.push(SweepRow {
            lambda_o,
            miou_a: m.miou_a,
            miou_v: m.miou_v,
            miou_o: m.miou_o,
        });
    }
    Ok(rows)
}
