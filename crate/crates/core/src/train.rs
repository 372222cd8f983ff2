//! Training loop (BCE + AdamW + cosine schedule), macro-averaged metrics,
//! and the baseline battery: single-view, per-view mean ensemble, pooled
//! embedding vectors, vanilla self-attention, and the full divided-attention
//! model.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Annotation, Dataset};
use crate::encoder::{BoundingBox, ROI_SIZE};
use crate::error::{Error, Result};
use crate::model::{forward, init_params, CoopMode, DropoutCtx, ModelConfig};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Elem, Tape, Tensor, Var};

/// Classes with fewer positive evaluation instances are excluded from the
/// macro averages.
pub const MIN_CLASS_SUPPORT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub seed: u64,
    pub threshold: f64,
    /// Decoupled decay, applied to projection weights only.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 10,
            lr0: 1e-4,
            lr_min: 1e-6,
            seed: 0,
            threshold: 0.5,
            weight_decay: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > self.lr_min && self.lr_min > 0.0) {
            return Err(Error::Config(format!(
                "need lr0 > lr_min > 0, got {} and {}",
                self.lr0, self.lr_min
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy over all (person, class) cells, with
/// probabilities clamped to [1e-7, 1-1e-7].
pub fn bce_loss<T: Elem>(probs: &Var<T>, targets: &Tensor<T>) -> Result<Var<T>> {
    if probs.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            op: "bce_loss",
            lhs: probs.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let tape = probs.tape();
    let n = probs.numel();
    let eps = T::from_f64(1e-7);
    let p = probs.clamp(eps, T::one() - eps);
    let y = tape.leaf(targets);
    let ones = tape.leaf(&Tensor::full(targets.shape().to_vec(), T::one()));
    let pos = y.mul(&p.ln())?;
    let neg = ones.sub(&y)?.mul(&ones.sub(&p)?.ln())?;
    Ok(pos
        .add(&neg)?
        .sum_all()
        .scale(T::from_f64(-1.0 / n as f64)))
}

/// AdamW moment buffers, per parameter, in name order.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Elem> {
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Elem> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros = |p: &ParamStore<T>| {
            p.iter()
                .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape().to_vec())))
                .collect()
        };
        OptimizerState {
            m: zeros(params),
            v: zeros(params),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Biases, LayerNorm affine parameters, and view embeddings are exempt
/// from weight decay.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias")
        || name.ends_with(".gamma")
        || name.ends_with(".beta")
        || name.starts_with("ve."))
}

/// One decoupled-decay AdamW step:
/// θ ← θ − lr·(m̂/(√v̂ + eps) + λθ) with bias-corrected moments.
pub fn adamw_step<T: Elem>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in &names {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("no gradient for {name}")))?;
        let p = params.get_mut(name)?;
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let m = state.m.get_mut(name).expect("state matches params");
        let v = state.v.get_mut(name).expect("state matches params");
        let lambda = if decays(name) { state.weight_decay } else { 0.0 };
        for i in 0..p.numel() {
            let gi = g.data()[i].to_f64();
            let mi = state.beta1 * m.data()[i].to_f64() + (1.0 - state.beta1) * gi;
            let vi = state.beta2 * v.data()[i].to_f64() + (1.0 - state.beta2) * gi * gi;
            m.data_mut()[i] = T::from_f64(mi);
            v.data_mut()[i] = T::from_f64(vi);
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let theta = p.data()[i].to_f64();
            p.data_mut()[i] =
                T::from_f64(theta - lr * (m_hat / (v_hat.sqrt() + state.eps) + lambda * theta));
        }
    }
    Ok(())
}

/// `lr_min + 0.5(lr0 − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::Contract(format!(
            "cosine schedule step {step} out of range 0..={total_steps}"
        )));
    }
    if step == 0 {
        return Ok(lr0);
    }
    if step == total_steps {
        return Ok(lr_min);
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos()))
}

/// One training/evaluation unit: a person at one keyframe, with its box per
/// view and binary label vector.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub clip: String,
    pub keyframe: usize,
    pub person: usize,
    pub boxes: Vec<Option<BoundingBox>>,
    pub labels: Vec<bool>,
}

/// Groups annotation rows into per-(clip, keyframe, person) samples.
pub fn build_samples(annotations: &[Annotation], views: usize, classes: usize) -> Vec<TrainSample> {
    let mut map: BTreeMap<(String, usize, usize), TrainSample> = BTreeMap::new();
    for a in annotations {
        let key = (a.clip.clone(), a.keyframe, a.person);
        let entry = map.entry(key).or_insert_with(|| {
            let mut labels = vec![false; classes];
            for &l in &a.labels {
                if l < classes {
                    labels[l] = true;
                }
            }
            TrainSample {
                clip: a.clip.clone(),
                keyframe: a.keyframe,
                person: a.person,
                boxes: vec![None; views],
                labels,
            }
        });
        if a.view < views {
            entry.boxes[a.view] = a.bbox;
        }
    }
    map.into_values().collect()
}

/// Keeps a single view's box (and expects single-view videos).
pub fn restrict_to_view(samples: &[TrainSample], view: usize) -> Vec<TrainSample> {
    samples
        .iter()
        .map(|s| TrainSample {
            boxes: vec![s.boxes[view]],
            ..s.clone()
        })
        .collect()
}

/// View videos per clip id, converted to the training element type.
pub type ClipMap<T> = BTreeMap<String, Vec<Tensor<T>>>;

pub fn load_clips<T: Elem>(dataset: &Dataset, samples: &[TrainSample]) -> Result<ClipMap<T>> {
    let mut out = BTreeMap::new();
    for s in samples {
        if !out.contains_key(&s.clip) {
            let clip = dataset.load_clip(&s.clip)?;
            out.insert(
                s.clip.clone(),
                clip.views.iter().map(|v| v.convert()).collect(),
            );
        }
    }
    Ok(out)
}

pub fn select_view<T: Elem>(clips: &ClipMap<T>, view: usize) -> ClipMap<T> {
    clips
        .iter()
        .map(|(k, v)| (k.clone(), vec![v[view].clone()]))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn log_to_lines(records: &[LogRecord]) -> String {
    let mut s = String::from("epoch,batch,lr,loss\n");
    for r in records {
        let _ = writeln!(s, "{},{},{:.9e},{:.6}", r.epoch, r.batch, r.lr, r.loss);
    }
    s
}

/// Forward pass for a batch of samples on one tape, encoding each clip's
/// views once, returning stacked `[n, cls]` probabilities in sample order.
fn batch_probs<T: Elem>(
    tape: &Tape<T>,
    bound: &Bound<T>,
    model: &ModelConfig,
    clips: &ClipMap<T>,
    samples: &[&TrainSample],
    mut dropout: Option<DropoutCtx<'_>>,
) -> Result<Var<T>> {
    let mut by_clip: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_clip.entry(&s.clip).or_default().push(i);
    }
    let mut probs: Vec<Option<Var<T>>> = vec![None; samples.len()];
    for (clip, idxs) in by_clip {
        let videos = clips
            .get(clip)
            .ok_or_else(|| Error::Lookup(format!("no clip {clip} loaded")))?;
        let boxes: Vec<Vec<Option<BoundingBox>>> =
            idxs.iter().map(|&i| samples[i].boxes.clone()).collect();
        let fw = forward(
            tape,
            bound,
            model,
            videos,
            &boxes,
            false,
            dropout.as_mut().map(|d| DropoutCtx {
                rng: d.rng,
                rate: d.rate,
            }),
        )?;
        for (&i, pf) in idxs.iter().zip(fw) {
            probs[i] = Some(pf.probs.reshape(vec![1, model.classes])?);
        }
    }
    let rows: Vec<Var<T>> = probs.into_iter().map(|p| p.expect("all filled")).collect();
    let refs: Vec<&Var<T>> = rows.iter().collect();
    tape.concat(&refs, 0)
}

fn targets_of<T: Elem>(samples: &[&TrainSample], classes: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(samples.len() * classes);
    for s in samples {
        for &l in &s.labels {
            data.push(if l { T::one() } else { T::zero() });
        }
    }
    Tensor::new(vec![samples.len(), classes], data).expect("shape matches")
}

/// Trains from a fresh initialization. Deterministic in (cfg.seed, data):
/// two runs produce bit-identical parameters.
pub fn train(
    clips: &ClipMap<f32>,
    samples: &[TrainSample],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ParamStore<f32>, Vec<LogRecord>)> {
    cfg.validate()?;
    model.validate()?;
    if samples.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let mut params = init_params::<f32>(model, cfg.seed)?;
    let mut state = OptimizerState::new(&params, cfg.weight_decay);
    let batches_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut log = Vec::new();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d40b);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * batches_per_epoch + batch;
            let lr = cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min)?;
            let batch_samples: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();

            let tape = Tape::new();
            let bound = params.bind(&tape);
            let dropout = (model.dropout > 0.0).then(|| DropoutCtx {
                rng: &mut dropout_rng,
                rate: model.dropout,
            });
            let probs = batch_probs(&tape, &bound, model, clips, &batch_samples, dropout)?;
            let targets = targets_of::<f32>(&batch_samples, model.classes);
            let loss = bce_loss(&probs, &targets)?;
            let loss_value = loss.item().to_f64();
            if !loss_value.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss {loss_value} at epoch {epoch} batch {batch}"
                )));
            }
            tape.backward(&loss)?;
            let grads = bound.grads();
            adamw_step(&mut params, &grads, &mut state, lr)?;
            log.push(LogRecord {
                epoch,
                batch,
                lr,
                loss: loss_value,
            });
        }
    }
    Ok((params, log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub classes: Vec<ClassMetrics>,
    pub excluded: Vec<usize>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f: f64,
}

impl MetricReport {
    /// Builds the report from per-class counts over all classes; classes
    /// with fewer than `min_support` positive instances are excluded from
    /// the macro averages.
    pub fn from_counts(counts: &[(usize, usize, usize)], min_support: usize) -> Result<Self> {
        let mut classes = Vec::new();
        let mut excluded = Vec::new();
        for (cls, &(tp, fp, fn_)) in counts.iter().enumerate() {
            if tp + fn_ < min_support {
                excluded.push(cls);
                continue;
            }
            let precision = if tp + fp > 0 {
                tp as f64 / (tp + fp) as f64
            } else {
                0.0
            };
            let recall = if tp + fn_ > 0 {
                tp as f64 / (tp + fn_) as f64
            } else {
                0.0
            };
            let f = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            classes.push(ClassMetrics {
                class: cls,
                tp,
                fp,
                fn_,
                precision,
                recall,
                f,
            });
        }
        if classes.is_empty() {
            return Err(Error::Eval(format!(
                "every class is below the support threshold {min_support}"
            )));
        }
        let n = classes.len() as f64;
        Ok(MetricReport {
            macro_precision: classes.iter().map(|c| c.precision).sum::<f64>() / n,
            macro_recall: classes.iter().map(|c| c.recall).sum::<f64>() / n,
            macro_f: classes.iter().map(|c| c.f).sum::<f64>() / n,
            classes,
            excluded,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,tp,fp,fn,precision,recall,f\n");
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.6},{:.6}",
                c.class, c.tp, c.fp, c.fn_, c.precision, c.recall, c.f
            );
        }
        let _ = writeln!(
            s,
            "macro,,,,{:.6},{:.6},{:.6}",
            self.macro_precision, self.macro_recall, self.macro_f
        );
        if !self.excluded.is_empty() {
            let list = self
                .excluded
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(";");
            let _ = writeln!(s, "excluded,{list},,,,,");
        }
        s
    }
}

/// Per-sample class probabilities under a trained model.
pub fn predict_probs(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    clips: &ClipMap<f32>,
    samples: &[TrainSample],
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    // chunked so one tape never holds more than a few clips
    for chunk in samples.chunks(16) {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let refs: Vec<&TrainSample> = chunk.iter().collect();
        let probs = batch_probs(&tape, &bound, model, clips, &refs, None)?;
        let t = probs.value();
        for i in 0..chunk.len() {
            out.push(t.data()[i * model.classes..(i + 1) * model.classes].to_vec());
        }
    }
    Ok(out)
}

/// Thresholds probabilities and accumulates per-class counts.
pub fn metrics_from_probs(
    probs: &[Vec<f32>],
    samples: &[TrainSample],
    classes: usize,
    threshold: f64,
    min_support: usize,
) -> Result<MetricReport> {
    if probs.len() != samples.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} samples",
            probs.len(),
            samples.len()
        )));
    }
    let mut counts = vec![(0usize, 0usize, 0usize); classes];
    for (p, s) in probs.iter().zip(samples) {
        for cls in 0..classes {
            let pred = p[cls] as f64 >= threshold;
            let actual = s.labels[cls];
            match (pred, actual) {
                (true, true) => counts[cls].0 += 1,
                (true, false) => counts[cls].1 += 1,
                (false, true) => counts[cls].2 += 1,
                (false, false) => {}
            }
        }
    }
    MetricReport::from_counts(&counts, min_support)
}

/// Evaluates a checkpoint on a split. Pure: same inputs, same report.
pub fn evaluate(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    clips: &ClipMap<f32>,
    samples: &[TrainSample],
    threshold: f64,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation split is empty".into()));
    }
    let probs = predict_probs(params, model, clips, samples)?;
    metrics_from_probs(&probs, samples, model.classes, threshold, MIN_CLASS_SUPPORT)
}

/// Static multiply-add estimate for one person-sample forward pass.
pub fn flops_estimate(model: &ModelConfig, frames: usize, height: usize, width: usize) -> u64 {
    let c = model.channels as u64;
    let views = model.views as u64;
    let p = model.patch as u64;
    let (gh, gw) = (height as u64 / p, width as u64 / p);
    let grid = gh * gw;
    let encoder_per_view =
        frames as u64 * grid * (p * p * 3) * c * 2 + grid * (c * 4 * c) * 2 * 2;
    let tokens_per_view = match model.mode {
        CoopMode::PooledVector => 1,
        _ => (ROI_SIZE * ROI_SIZE) as u64,
    };
    let n = views * tokens_per_view;
    let roi = views * tokens_per_view * 4 * 4 * c;
    let sublayers = match model.mode {
        CoopMode::SvaDva => 2,
        _ => 1,
    } as u64;
    let attention = sublayers * (4 * n * c * c * 2 + 2 * n * n * c * 2);
    let ffn = n * 8 * c * c * 2;
    let per_layer = attention + ffn;
    encoder_per_view * views + roi + model.layers as u64 * per_layer + 2 * c * model.classes as u64
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: String,
    pub report: MetricReport,
    pub flops: u64,
}

pub fn comparison_to_csv(results: &[MethodResult]) -> String {
    let mut s = String::from("method,precision,recall,f,flops_estimate\n");
    for r in results {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{}",
            r.method, r.report.macro_precision, r.report.macro_recall, r.report.macro_f, r.flops
        );
    }
    s
}

/// Everything the baseline battery needs: loaded multi-view clips and the
/// train/eval sample splits.
pub struct BaselineData {
    pub clips: ClipMap<f32>,
    pub train: Vec<TrainSample>,
    pub eval: Vec<TrainSample>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

/// Trains and evaluates the five Table-1 methods with identical seeds and
/// budgets: (a) single fixed view, (b) per-view mean ensemble,
/// (c) pooled-vector cooperation, (d) vanilla self-attention,
/// (e) full SVA/DVA.
pub fn run_baselines(
    data: &BaselineData,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Vec<MethodResult>> {
    let views = model.views;
    if views < 2 {
        return Err(Error::Contract("baselines need at least 2 views".into()));
    }
    let mut results = Vec::new();

    let single_cfg = ModelConfig {
        views: 1,
        mode: CoopMode::VanillaSelf,
        ..*model
    };
    let train_view =
        |v: usize| -> Result<(ParamStore<f32>, ClipMap<f32>, Vec<TrainSample>)> {
            let clips = select_view(&data.clips, v);
            let tr = restrict_to_view(&data.train, v);
            let (params, _) = train(&clips, &tr, &single_cfg, cfg)?;
            Ok((params, clips, restrict_to_view(&data.eval, v)))
        };

    // (a) single view: view 0 only
    {
        let (params, clips, ev) = train_view(0)?;
        let report = evaluate(&params, &single_cfg, &clips, &ev, cfg.threshold)?;
        results.push(MethodResult {
            method: "single_view".into(),
            report,
            flops: flops_estimate(&single_cfg, data.frames, data.height, data.width),
        });
    }

    // (b) mean ensemble of per-view single-view models
    {
        let mut summed: Vec<Vec<f32>> = vec![vec![0.0; model.classes]; data.eval.len()];
        for v in 0..views {
            let (params, clips, ev) = train_view(v)?;
            let probs = predict_probs(&params, &single_cfg, &clips, &ev)?;
            for (acc, p) in summed.iter_mut().zip(&probs) {
                for (a, &x) in acc.iter_mut().zip(p) {
                    *a += x / views as f32;
                }
            }
        }
        let report = metrics_from_probs(
            &summed,
            &data.eval,
            model.classes,
            cfg.threshold,
            MIN_CLASS_SUPPORT,
        )?;
        results.push(MethodResult {
            method: "ensemble".into(),
            report,
            flops: views as u64
                * flops_estimate(&single_cfg, data.frames, data.height, data.width),
        });
    }

    // (c)-(e) multi-view cooperation variants
    for (name, mode) in [
        ("pooled", CoopMode::PooledVector),
        ("vanilla", CoopMode::VanillaSelf),
        ("sva_dva", CoopMode::SvaDva),
    ] {
        let mcfg = ModelConfig { mode, ..*model };
        let (params, _) = train(&data.clips, &data.train, &mcfg, cfg)?;
        let report = evaluate(&params, &mcfg, &data.clips, &data.eval, cfg.threshold)?;
        results.push(MethodResult {
            method: name.into(),
            report,
            flops: flops_estimate(&mcfg, data.frames, data.height, data.width),
        });
    }
    Ok(results)
}
