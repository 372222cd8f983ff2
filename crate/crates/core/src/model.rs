//! The full multi-view action recognition head: per-view RoIAlign features
//! are flattened, given fixed sinusoidal position embeddings and learnable
//! view embeddings, cooperated across views by a transformer whose
//! self-attention is divided into same-view (SVA) and different-view (DVA)
//! sublayers, max-pooled into one joint vector per person, and classified
//! with an independent sigmoid per action class.
//!
//! The vanilla-self-attention and pooled-embedding-vector variants used as
//! baselines live behind `CoopMode`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{
    roi_align_var, toy_video_encode, BoundingBox, EncoderConfig, ROI_SAMPLES, ROI_SIZE,
};
use crate::error::{Error, Result};
use crate::nn::{
    build_attention_mask, ffn, multi_head_attention, AttentionMask, AttentionRecord, AttnVars,
    MaskKind,
};
use crate::params::{init_uniform, Bound, ParamStore};
use crate::tensor::{Elem, Tape, Tensor, Var};

/// Fixed sinusoidal 2D position embedding table, shared by every person
/// and view.
#[derive(Debug, Clone)]
pub struct PositionEmbedding<T: Elem> {
    pub table: Tensor<T>,
}

/// Builds the `[tokens, channels]` table: half the channels encode the grid
/// row, half the column, alternating sin/cos with frequency
/// `10000^(2i/(c/2))`. `tokens` must be a perfect square and `channels`
/// divisible by 4.
pub fn sinusoidal_position_embeddings<T: Elem>(
    tokens: usize,
    channels: usize,
) -> Result<PositionEmbedding<T>> {
    if channels % 4 != 0 {
        return Err(Error::Config(format!(
            "position embedding needs channels divisible by 4, got {channels}"
        )));
    }
    let side = (tokens as f64).sqrt().round() as usize;
    if side * side != tokens {
        return Err(Error::Config(format!(
            "position embedding needs a square token grid, got {tokens}"
        )));
    }
    let half = channels / 2;
    let pairs = half / 2;
    let mut data = vec![T::zero(); tokens * channels];
    for pos in 0..tokens {
        let row = (pos / side) as f64;
        let col = (pos % side) as f64;
        for i in 0..pairs {
            let divisor = 10000f64.powf(2.0 * i as f64 / half as f64);
            let base = pos * channels;
            data[base + 2 * i] = T::from_f64((row / divisor).sin());
            data[base + 2 * i + 1] = T::from_f64((row / divisor).cos());
            data[base + half + 2 * i] = T::from_f64((col / divisor).sin());
            data[base + half + 2 * i + 1] = T::from_f64((col / divisor).cos());
        }
    }
    Ok(PositionEmbedding {
        table: Tensor::new(vec![tokens, channels], data)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoopMode {
    /// Divided attention: SVA and DVA sublayers (the full model).
    SvaDva,
    /// Single full-mask self-attention sublayer per layer.
    VanillaSelf,
    /// Each view pooled to one embedding vector before the transformer.
    PooledVector,
}

impl CoopMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CoopMode::SvaDva => "sva_dva",
            CoopMode::VanillaSelf => "vanilla",
            CoopMode::PooledVector => "pooled",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sva_dva" => Ok(CoopMode::SvaDva),
            "vanilla" => Ok(CoopMode::VanillaSelf),
            "pooled" => Ok(CoopMode::PooledVector),
            other => Err(Error::Config(format!("unknown cooperation mode {other}"))),
        }
    }
}

/// How the SVA and DVA sublayers combine inside one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SublayerCombo {
    /// `y = LN(x + SVA(x) + DVA(x))` - both attend to the layer input.
    ParallelSum,
    /// `y = LN(x + SVA(x)); y' = LN(y + DVA(y))`.
    Sequential,
}

impl SublayerCombo {
    pub fn as_str(self) -> &'static str {
        match self {
            SublayerCombo::ParallelSum => "parallel",
            SublayerCombo::Sequential => "sequential",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(SublayerCombo::ParallelSum),
            "sequential" => Ok(SublayerCombo::Sequential),
            other => Err(Error::Config(format!("unknown sublayer combination {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub views: usize,
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub classes: usize,
    pub mode: CoopMode,
    pub combo: SublayerCombo,
    pub dropout: f64,
    pub patch: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            views: 4,
            channels: 64,
            layers: 4,
            heads: 4,
            classes: 8,
            mode: CoopMode::SvaDva,
            combo: SublayerCombo::ParallelSum,
            dropout: 0.0,
            patch: 16,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            patch: self.patch,
            channels: self.channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.channels % 4 != 0 {
            return Err(Error::Config("channels must be divisible by 4".into()));
        }
        if self.views < 1 || self.classes < 1 {
            return Err(Error::Config("views and classes must be >= 1".into()));
        }
        Ok(())
    }

    fn attention_sublayers(&self) -> &'static [&'static str] {
        match self.mode {
            CoopMode::SvaDva => &["sva", "dva"],
            CoopMode::VanillaSelf | CoopMode::PooledVector => &["self"],
        }
    }

    fn norms_per_layer(&self) -> usize {
        match (self.mode, self.combo) {
            (CoopMode::SvaDva, SublayerCombo::Sequential) => 3,
            _ => 2,
        }
    }
}

/// Initializes all trainable parameters. Projection weights and biases use
/// uniform(-1/sqrt(in), 1/sqrt(in)); view embeddings start at zero so the
/// view-permutation symmetry holds exactly at initialization; LayerNorm
/// starts at identity.
pub fn init_params<T: Elem>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.channels;
    let mut store = ParamStore::new();

    let linear = |store: &mut ParamStore<T>, name: &str, fan_in: usize, out: usize,
                      rng: &mut ChaCha8Rng| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        store.insert(format!("{name}.weight"), init_uniform(vec![fan_in, out], bound, rng));
        store.insert(format!("{name}.bias"), init_uniform(vec![out], bound, rng));
    };

    let patch_len = cfg.patch * cfg.patch * 3;
    linear(&mut store, "encoder.patch", patch_len, c, &mut rng);
    linear(&mut store, "encoder.ffn.fc1", c, 4 * c, &mut rng);
    linear(&mut store, "encoder.ffn.fc2", 4 * c, c, &mut rng);

    for m in 0..cfg.views {
        store.insert(format!("ve.{m}"), Tensor::zeros(vec![c]));
    }

    for l in 0..cfg.layers {
        for sub in cfg.attention_sublayers() {
            for proj in ["q", "k", "v", "out"] {
                linear(&mut store, &format!("layer{l}.{sub}.{proj}"), c, c, &mut rng);
            }
        }
        for n in 1..=cfg.norms_per_layer() {
            store.insert(format!("layer{l}.norm{n}.gamma"), Tensor::full(vec![c], T::one()));
            store.insert(format!("layer{l}.norm{n}.beta"), Tensor::zeros(vec![c]));
        }
        linear(&mut store, &format!("layer{l}.ffn.fc1"), c, 4 * c, &mut rng);
        linear(&mut store, &format!("layer{l}.ffn.fc2"), 4 * c, c, &mut rng);
    }

    linear(&mut store, "classifier", c, cfg.classes, &mut rng);
    Ok(store)
}

/// Inverted dropout applied during training forward passes.
pub struct DropoutCtx<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub rate: f64,
}

fn apply_dropout<T: Elem>(x: Var<T>, ctx: &mut Option<DropoutCtx<'_>>) -> Result<Var<T>> {
    let Some(ctx) = ctx.as_mut() else {
        return Ok(x);
    };
    if ctx.rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - ctx.rate;
    let scale = T::from_f64(1.0 / keep);
    let mut mask = Tensor::zeros(x.shape().to_vec());
    for v in mask.data_mut() {
        if ctx.rng.gen::<f64>() < keep {
            *v = scale;
        }
    }
    let m = x.tape().leaf(&mask);
    x.mul(&m)
}

struct LayerNormVars<T: Elem> {
    gamma: Var<T>,
    beta: Var<T>,
}

impl<T: Elem> LayerNormVars<T> {
    fn get(bound: &Bound<T>, name: &str) -> Result<Self> {
        Ok(LayerNormVars {
            gamma: bound.get(&format!("{name}.gamma"))?.clone(),
            beta: bound.get(&format!("{name}.beta"))?.clone(),
        })
    }

    fn apply(&self, x: &Var<T>, eps: T) -> Result<Var<T>> {
        x.layer_norm(&self.gamma, &self.beta, eps)
    }
}

/// Output of the cooperation transformer for one person.
pub struct CooperationOutput<T: Elem> {
    pub tokens: Var<T>,
    pub records: Vec<AttentionRecord<T>>,
    /// True when DVA rows were all-masked (the M = 1 degeneracy); their
    /// contribution is exactly zero.
    pub dva_degenerate: bool,
}

/// Runs the L-layer cooperation transformer over per-view token blocks.
/// `features` holds one `[t, c]` block per view, already carrying position
/// and view embeddings.
pub fn cooperation_forward<T: Elem>(
    tape: &Tape<T>,
    bound: &Bound<T>,
    cfg: &ModelConfig,
    features: &[Var<T>],
    record: bool,
    mut dropout: Option<DropoutCtx<'_>>,
) -> Result<CooperationOutput<T>> {
    if features.len() != cfg.views {
        return Err(Error::Contract(format!(
            "expected {} view blocks, got {}",
            cfg.views,
            features.len()
        )));
    }
    let t = features[0].shape()[0];
    let refs: Vec<&Var<T>> = features.iter().collect();
    let mut x = tape.concat(&refs, 0)?;

    let eps = T::from_f64(cfg.ln_eps);
    let sva_mask: AttentionMask<T> = build_attention_mask(MaskKind::Sva, cfg.views, t);
    let dva_mask: AttentionMask<T> = build_attention_mask(MaskKind::Dva, cfg.views, t);
    let full_mask: AttentionMask<T> = build_attention_mask(MaskKind::Full, cfg.views, t);

    let mut records = Vec::new();
    let mut dva_degenerate = false;
    let push_records = |records: &mut Vec<AttentionRecord<T>>,
                            layer: usize,
                            kind: MaskKind,
                            weights: Option<Vec<Tensor<T>>>| {
        if let Some(ws) = weights {
            for (head, w) in ws.into_iter().enumerate() {
                records.push(AttentionRecord {
                    layer,
                    head,
                    kind,
                    weights: w,
                    views: cfg.views,
                    tokens_per_view: t,
                });
            }
        }
    };

    for l in 0..cfg.layers {
        match cfg.mode {
            CoopMode::SvaDva => {
                let sva = AttnVars::from_bound(bound, &format!("layer{l}.sva"), cfg.heads)?;
                let dva = AttnVars::from_bound(bound, &format!("layer{l}.dva"), cfg.heads)?;
                match cfg.combo {
                    SublayerCombo::ParallelSum => {
                        let s = multi_head_attention(&x, &x, Some(&sva_mask), &sva, record)?;
                        let d = multi_head_attention(&x, &x, Some(&dva_mask), &dva, record)?;
                        dva_degenerate |= !d.all_masked_rows.is_empty();
                        push_records(&mut records, l, MaskKind::Sva, s.head_weights);
                        push_records(&mut records, l, MaskKind::Dva, d.head_weights);
                        let s_out = apply_dropout(s.out, &mut dropout)?;
                        let d_out = apply_dropout(d.out, &mut dropout)?;
                        let summed = x.add(&s_out)?.add(&d_out)?;
                        let y = LayerNormVars::get(bound, &format!("layer{l}.norm1"))?
                            .apply(&summed, eps)?;
                        let f = ffn_layer(bound, l, &y)?;
                        let f = apply_dropout(f, &mut dropout)?;
                        x = LayerNormVars::get(bound, &format!("layer{l}.norm2"))?
                            .apply(&y.add(&f)?, eps)?;
                    }
                    SublayerCombo::Sequential => {
                        let s = multi_head_attention(&x, &x, Some(&sva_mask), &sva, record)?;
                        push_records(&mut records, l, MaskKind::Sva, s.head_weights);
                        let s_out = apply_dropout(s.out, &mut dropout)?;
                        let y = LayerNormVars::get(bound, &format!("layer{l}.norm1"))?
                            .apply(&x.add(&s_out)?, eps)?;
                        let d = multi_head_attention(&y, &y, Some(&dva_mask), &dva, record)?;
                        dva_degenerate |= !d.all_masked_rows.is_empty();
                        push_records(&mut records, l, MaskKind::Dva, d.head_weights);
                        let d_out = apply_dropout(d.out, &mut dropout)?;
                        let y2 = LayerNormVars::get(bound, &format!("layer{l}.norm2"))?
                            .apply(&y.add(&d_out)?, eps)?;
                        let f = ffn_layer(bound, l, &y2)?;
                        let f = apply_dropout(f, &mut dropout)?;
                        x = LayerNormVars::get(bound, &format!("layer{l}.norm3"))?
                            .apply(&y2.add(&f)?, eps)?;
                    }
                }
            }
            CoopMode::VanillaSelf | CoopMode::PooledVector => {
                let attn = AttnVars::from_bound(bound, &format!("layer{l}.self"), cfg.heads)?;
                let a = multi_head_attention(&x, &x, Some(&full_mask), &attn, record)?;
                push_records(&mut records, l, MaskKind::Full, a.head_weights);
                let a_out = apply_dropout(a.out, &mut dropout)?;
                let y = LayerNormVars::get(bound, &format!("layer{l}.norm1"))?
                    .apply(&x.add(&a_out)?, eps)?;
                let f = ffn_layer(bound, l, &y)?;
                let f = apply_dropout(f, &mut dropout)?;
                x = LayerNormVars::get(bound, &format!("layer{l}.norm2"))?
                    .apply(&y.add(&f)?, eps)?;
            }
        }
    }
    Ok(CooperationOutput {
        tokens: x,
        records,
        dva_degenerate,
    })
}

fn ffn_layer<T: Elem>(bound: &Bound<T>, layer: usize, x: &Var<T>) -> Result<Var<T>> {
    ffn(
        x,
        bound.get(&format!("layer{layer}.ffn.fc1.weight"))?,
        bound.get(&format!("layer{layer}.ffn.fc1.bias"))?,
        bound.get(&format!("layer{layer}.ffn.fc2.weight"))?,
        bound.get(&format!("layer{layer}.ffn.fc2.bias"))?,
    )
}

/// Adds position and view embeddings to one view's flattened features:
/// `F_flat + PE + VE_m` (PE broadcast is elementwise, VE over tokens).
pub fn add_embeddings<T: Elem>(
    flat: &Var<T>,
    pe: &Var<T>,
    ve: &Var<T>,
) -> Result<Var<T>> {
    flat.add(pe)?.add_row(ve)
}

/// Channelwise max over all tokens: the per-person joint representation.
pub fn joint_representation<T: Elem>(tokens: &Var<T>) -> Result<Var<T>> {
    if tokens.numel() == 0 {
        return Err(Error::Contract("joint representation of no tokens".into()));
    }
    tokens.max_axis(0)
}

/// `sigmoid(linear(f_joint))` per class; multi-label, no normalization
/// across classes.
pub fn classify<T: Elem>(
    f_joint: &Var<T>,
    bound: &Bound<T>,
) -> Result<Var<T>> {
    let c = f_joint.shape()[0];
    let x = f_joint.reshape(vec![1, c])?;
    let logits = x
        .matmul(bound.get("classifier.weight")?)?
        .add_row(bound.get("classifier.bias")?)?;
    let cls = logits.shape()[1];
    Ok(logits.sigmoid().reshape(vec![cls])?)
}

/// Thresholded multi-label prediction for one person.
#[derive(Debug, Clone)]
pub struct ActionPrediction<T: Elem> {
    pub probabilities: Tensor<T>,
    pub labels: Vec<bool>,
}

impl<T: Elem> ActionPrediction<T> {
    pub fn from_probs(probabilities: Tensor<T>, threshold: f64) -> Self {
        let labels = probabilities
            .data()
            .iter()
            .map(|&p| Elem::to_f64(p) >= threshold)
            .collect();
        ActionPrediction {
            probabilities,
            labels,
        }
    }
}

/// Differentiable per-person forward output.
pub struct PersonForward<T: Elem> {
    pub probs: Var<T>,
    pub records: Vec<AttentionRecord<T>>,
}

/// Full pipeline on one tape: encode each view once (shared weights),
/// RoIAlign per person and view (missing views are zero-padded but still
/// receive PE + VE and participate in attention), cooperate, max-pool,
/// classify. Persons are processed independently.
pub fn forward<T: Elem>(
    tape: &Tape<T>,
    bound: &Bound<T>,
    cfg: &ModelConfig,
    videos: &[Tensor<T>],
    boxes_per_person: &[Vec<Option<BoundingBox>>],
    record: bool,
    mut dropout: Option<DropoutCtx<'_>>,
) -> Result<Vec<PersonForward<T>>> {
    if videos.len() != cfg.views {
        return Err(Error::Contract(format!(
            "model expects {} views, got {} videos",
            cfg.views,
            videos.len()
        )));
    }
    let enc_cfg = cfg.encoder();
    let maps: Vec<Var<T>> = videos
        .iter()
        .map(|v| toy_video_encode(tape, bound, v, &enc_cfg))
        .collect::<Result<_>>()?;
    let c = cfg.channels;
    let tokens = ROI_SIZE * ROI_SIZE;
    let pe = match cfg.mode {
        CoopMode::PooledVector => None,
        _ => Some(tape.leaf(&sinusoidal_position_embeddings::<T>(tokens, c)?.table)),
    };

    let mut out = Vec::with_capacity(boxes_per_person.len());
    for person_boxes in boxes_per_person {
        if person_boxes.len() != cfg.views {
            return Err(Error::Contract(format!(
                "person has {} boxes for {} views",
                person_boxes.len(),
                cfg.views
            )));
        }
        let mut blocks = Vec::with_capacity(cfg.views);
        for (m, b) in person_boxes.iter().enumerate() {
            let feat = match b {
                Some(bbox) => roi_align_var(&maps[m], bbox, ROI_SIZE, ROI_SAMPLES)?,
                None => tape.zeros(vec![ROI_SIZE, ROI_SIZE, c]),
            };
            let ve = bound.get(&format!("ve.{m}"))?;
            let block = match cfg.mode {
                CoopMode::PooledVector => {
                    // global-average each crop to one [c] vector per view
                    feat.reshape(vec![tokens, c])?.mean_axis(0)?
                        .reshape(vec![1, c])?
                        .add_row(ve)?
                }
                _ => {
                    let flat = feat.reshape(vec![tokens, c])?;
                    add_embeddings(&flat, pe.as_ref().expect("pe built"), ve)?
                }
            };
            blocks.push(block);
        }
        let coop = cooperation_forward(
            tape,
            bound,
            cfg,
            &blocks,
            record,
            dropout.as_mut().map(|d| DropoutCtx {
                rng: d.rng,
                rate: d.rate,
            }),
        )?;
        let joint = joint_representation(&coop.tokens)?;
        let probs = classify(&joint, bound)?;
        out.push(PersonForward {
            probs,
            records: coop.records,
        });
    }
    Ok(out)
}

/// Non-tape convenience wrapper: thresholded predictions per person.
pub fn predict<T: Elem>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    videos: &[Tensor<T>],
    boxes_per_person: &[Vec<Option<BoundingBox>>],
    threshold: f64,
) -> Result<Vec<ActionPrediction<T>>> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let fw = forward(&tape, &bound, cfg, videos, boxes_per_person, false, None)?;
    Ok(fw
        .into_iter()
        .map(|p| ActionPrediction::from_probs(p.probs.value(), threshold))
        .collect())
}
