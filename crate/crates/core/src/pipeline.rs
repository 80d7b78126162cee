//! Two-stage training and Monte-Carlo dropout inference.
//!
//! Stage 1 fits the generator to scribbles with the four-term objective.
//! Its averaged label predictions, merged with the scribbles, become dense
//! pseudo-labels for stage 2, which trains the dropout U-Net with
//! cross-entropy. Inference averages `T` dropout-active passes and reports
//! per-pixel entropy.

use std::str::FromStr;

use bws_tensor::{FlushDenormals, Real, Rng, Tape, Tensor};

use crate::dataio::{fmt_f64, Csv, Sample};
use crate::error::{Error, Result};
use crate::losses::{ce_term, crf_term, elbo_term, kl_term, pce_term, recon_term, CrfConfig, ElboTerms, LossComponents, LossWeights};
use crate::maps::{Image, LabelMap, ProbMap, ScribbleMap};
use crate::metrics::{evaluate, hd95, ClassMetrics, MeanMetrics};
use crate::networks::{images_to_tensor, GeneratorConfig, GeneratorParams, SegParams, UNetConfig};
use crate::optim::{collect_grads, OptimConfig, Optimizer, OptimizerKind};
use crate::parallel::map_indexed;
use crate::weak_labels::{merge_labels, unlabeled_mask};

const STREAM_GEN_INIT: u64 = 10;
const STREAM_GEN_SHUFFLE: u64 = 11;
const STREAM_GEN_STEP: u64 = 12;
const STREAM_SEG_INIT: u64 = 20;
const STREAM_SEG_SHUFFLE: u64 = 21;
const STREAM_SEG_STEP: u64 = 22;
const STREAM_PSEUDO: u64 = 30;
const STREAM_INFER: u64 = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(Error::config(format!("unknown precision {other:?}; expected f32 or f64"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub weights: LossWeights,
    /// Latent draws per pseudo-label.
    pub n_samples: usize,
    /// Dropout passes per inference.
    pub t_infer: usize,
    pub latent_dim: usize,
    pub dropout: f64,
    pub seed: u64,
    pub crf: CrfConfig,
    pub optimizer: OptimizerKind,
    pub normalize_pce: bool,
    /// Draw pseudo-label latents from the prior instead of `q(z|x)`.
    pub prior_z: bool,
    pub base_width: usize,
    pub depth: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            epochs: 100,
            batch: 8,
            weights: LossWeights::default(),
            n_samples: 3,
            t_infer: 15,
            latent_dim: 16,
            dropout: 0.1,
            seed: 0,
            crf: CrfConfig::default(),
            optimizer: OptimizerKind::Adam,
            normalize_pce: false,
            prior_z: false,
            base_width: 8,
            depth: 2,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight decay must be finite and non-negative"));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::config("epochs and batch size must be at least 1"));
        }
        if self.n_samples == 0 || self.t_infer == 0 {
            return Err(Error::config("sample count N and inference count T must be at least 1"));
        }
        self.weights.validate()?;
        self.crf.validate()?;
        self.unet(2).validate()
    }

    pub fn unet(&self, classes: usize) -> UNetConfig {
        UNetConfig { in_channels: 1, classes, base_width: self.base_width, depth: self.depth, dropout: self.dropout }
    }

    fn optim(&self, steps: u64) -> OptimConfig {
        match self.optimizer {
            OptimizerKind::Adam => OptimConfig::adam(self.lr, self.weight_decay),
            OptimizerKind::SgdPoly => OptimConfig::sgd_poly(self.lr, self.weight_decay, steps),
        }
    }
}

/// Stage-1 telemetry for one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Row {
    pub step: usize,
    pub epoch: usize,
    pub components: LossComponents,
    pub total: f64,
}

/// Stage-2 telemetry for one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2Row {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

pub fn stage1_csv(rows: &[Stage1Row]) -> Csv {
    let mut csv = Csv::new(&["step", "l_pce", "l_kl", "l_recon", "l_crf", "total"]);
    for r in rows {
        let c = r.components;
        csv.push(vec![r.step.to_string(), fmt_f64(c.pce), fmt_f64(c.kl), fmt_f64(c.recon), fmt_f64(c.crf), fmt_f64(r.total)]);
    }
    csv
}

pub fn stage2_csv(rows: &[Stage2Row], column: &str) -> Csv {
    let mut csv = Csv::new(&["step", column]);
    for r in rows {
        csv.push(vec![r.step.to_string(), fmt_f64(r.loss)]);
    }
    csv
}

/// Mean of `value` per epoch.
pub fn epoch_means<R>(rows: &[R], epoch: impl Fn(&R) -> usize, value: impl Fn(&R) -> f64) -> Vec<f64> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for r in rows {
        let e = epoch(r);
        if sums.len() <= e {
            sums.resize(e + 1, (0.0, 0));
        }
        sums[e].0 += value(r);
        sums[e].1 += 1;
    }
    sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn common_extent(images: &[&Image], depth: usize) -> Result<(usize, usize)> {
    let first = images.first().ok_or_else(|| Error::contract("training set is empty"))?;
    for (i, img) in images.iter().enumerate() {
        if img.channels != 1 {
            return Err(Error::contract(format!("image {i} has {} channels; grayscale input expected", img.channels)));
        }
        if (img.height, img.width) != (first.height, first.width) {
            return Err(Error::contract(format!(
                "image {i} is {}x{} but image 0 is {}x{}; training images must share an extent",
                img.height, img.width, first.height, first.width
            )));
        }
    }
    let m = 1 << depth;
    if first.height % m != 0 || first.width % m != 0 {
        return Err(Error::contract(format!(
            "training extent {}x{} is not divisible by 2^depth = {m}",
            first.height, first.width
        )));
    }
    Ok((first.height, first.width))
}

fn non_finite(step: usize, what: String) -> Error {
    Error::NonFinite { step, components: what }
}

/// Generator weights before the first stage-1 step.
pub fn init_generator<T: Real>(classes: usize, height: usize, width: usize, cfg: &TrainConfig) -> Result<GeneratorParams<T>> {
    let gcfg = GeneratorConfig { unet: cfg.unet(classes), latent_dim: cfg.latent_dim, height, width };
    GeneratorParams::init(gcfg, &mut Rng::keyed(cfg.seed, STREAM_GEN_INIT, 0))
}

/// Segmentation weights before the first stage-2 step.
pub fn init_segmenter<T: Real>(classes: usize, cfg: &TrainConfig) -> Result<SegParams<T>> {
    SegParams::init(cfg.unet(classes), &mut Rng::keyed(cfg.seed, STREAM_SEG_INIT, 0))
}

/// Stage 1: fit `e1, d1, e2, d2` to images and scribbles.
pub fn train_stage1<T: Real>(
    data: &[(&Image, &ScribbleMap)],
    classes: usize,
    cfg: &TrainConfig,
) -> Result<(GeneratorParams<T>, Vec<Stage1Row>)> {
    cfg.validate()?;
    let _ftz = FlushDenormals::enable();
    let images: Vec<&Image> = data.iter().map(|d| d.0).collect();
    let (height, width) = common_extent(&images, cfg.depth)?;
    for (i, (_, s)) in data.iter().enumerate() {
        if !s.same_extent(height, width) {
            return Err(Error::contract(format!("scribble map {i} does not match its image extent")));
        }
        s.validate(classes)?;
    }
    let mut gen = init_generator::<T>(classes, height, width, cfg)?;
    let steps_per_epoch = data.len().div_ceil(cfg.batch);
    let mut opt = Optimizer::new(cfg.optim((cfg.epochs * steps_per_epoch) as u64), &gen.store)?;
    let w = cfg.weights;
    let mut log = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in shuffled_batches(data.len(), cfg.batch, &mut Rng::keyed(cfg.seed, STREAM_GEN_SHUFFLE, epoch as u64)) {
            let mut rng = Rng::keyed(cfg.seed, STREAM_GEN_STEP, step as u64);
            let imgs: Vec<&Image> = batch.iter().map(|&i| data[i].0).collect();
            let scribbles: Vec<&ScribbleMap> = batch.iter().map(|&i| data[i].1).collect();
            let tape = Tape::new();
            let p = gen.store.bind(&tape);
            let x = tape.constant(images_to_tensor::<T>(&imgs)?);
            let eps: Tensor<T> = rng.normal_tensor(&[batch.len(), cfg.latent_dim]);
            let out = gen.forward(&p, x, &eps, w.beta > 0.0)?;
            let terms = ElboTerms {
                pce: pce_term(out.probs, &scribbles, cfg.normalize_pce)?,
                kl: if w.alpha > 0.0 { Some(kl_term(out.mean, out.log_var)?) } else { None },
                recon: out.reconstruction.map(|r| recon_term(r, x)).transpose()?,
                crf: if w.gamma > 0.0 { Some(crf_term(out.probs, &imgs, &cfg.crf, &mut rng)?) } else { None },
            };
            let (total, components) = elbo_term(&terms, &w)?;
            let total_value = total.item().as_f64();
            if !total_value.is_finite() || !components.all_finite() {
                return Err(non_finite(step, format!("{components:?}, total {total_value}")));
            }
            let grads = collect_grads(&tape.backward(total)?, &p);
            drop(p);
            drop(tape);
            opt.step(&mut gen.store, &grads)?;
            if !gen.store.all_finite() {
                return Err(non_finite(step, "generator parameters became non-finite".into()));
            }
            log.push(Stage1Row { step, epoch, components, total: total_value });
            step += 1;
        }
    }
    Ok((gen, log))
}

/// Stage-2 targets.
#[derive(Clone, Copy, Debug)]
pub enum Supervision<'a> {
    /// Dense labels trained with cross-entropy.
    Dense(&'a [&'a LabelMap]),
    /// Scribbles trained with partial cross-entropy (the baseline).
    Scribbles(&'a [&'a ScribbleMap]),
}

impl Supervision<'_> {
    fn len(&self) -> usize {
        match self {
            Supervision::Dense(l) => l.len(),
            Supervision::Scribbles(s) => s.len(),
        }
    }

    /// Loss column name in the stage-2 log.
    pub fn column(&self) -> &'static str {
        match self {
            Supervision::Dense(_) => "l_ce",
            Supervision::Scribbles(_) => "l_pce",
        }
    }
}

/// Stage 2: train the dropout U-Net.
pub fn train_stage2<T: Real>(
    images: &[&Image],
    targets: Supervision<'_>,
    classes: usize,
    cfg: &TrainConfig,
) -> Result<(SegParams<T>, Vec<Stage2Row>)> {
    cfg.validate()?;
    let _ftz = FlushDenormals::enable();
    if targets.len() != images.len() {
        return Err(Error::contract(format!("{} images but {} targets", images.len(), targets.len())));
    }
    let (height, width) = common_extent(images, cfg.depth)?;
    match targets {
        Supervision::Dense(labels) => {
            for l in labels {
                if !l.same_extent(height, width) {
                    return Err(Error::contract("label map does not match its image extent"));
                }
                l.validate(classes)?;
            }
        }
        Supervision::Scribbles(s) => {
            for m in s {
                if !m.same_extent(height, width) {
                    return Err(Error::contract("scribble map does not match its image extent"));
                }
                m.validate(classes)?;
            }
        }
    }
    let mut seg = init_segmenter::<T>(classes, cfg)?;
    let steps_per_epoch = images.len().div_ceil(cfg.batch);
    let mut opt = Optimizer::new(cfg.optim((cfg.epochs * steps_per_epoch) as u64), &seg.store)?;
    let mut log = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in shuffled_batches(images.len(), cfg.batch, &mut Rng::keyed(cfg.seed, STREAM_SEG_SHUFFLE, epoch as u64)) {
            let mut rng = Rng::keyed(cfg.seed, STREAM_SEG_STEP, step as u64);
            let imgs: Vec<&Image> = batch.iter().map(|&i| images[i]).collect();
            let tape = Tape::new();
            let p = seg.store.bind(&tape);
            let x = tape.constant(images_to_tensor::<T>(&imgs)?);
            let probs = seg.forward(&p, x, Some(&mut rng))?;
            let loss = match targets {
                Supervision::Dense(labels) => ce_term(probs, &batch.iter().map(|&i| labels[i]).collect::<Vec<_>>())?,
                Supervision::Scribbles(s) => {
                    pce_term(probs, &batch.iter().map(|&i| s[i]).collect::<Vec<_>>(), cfg.normalize_pce)?
                }
            };
            let value = loss.item().as_f64();
            if !value.is_finite() {
                return Err(non_finite(step, format!("{} = {value}", targets.column())));
            }
            let grads = collect_grads(&tape.backward(loss)?, &p);
            drop(p);
            drop(tape);
            opt.step(&mut seg.store, &grads)?;
            if !seg.store.all_finite() {
                return Err(non_finite(step, "segmentation parameters became non-finite".into()));
            }
            log.push(Stage2Row { step, epoch, loss: value });
            step += 1;
        }
    }
    Ok((seg, log))
}

/// Mean of `d2(e2(x), z_i)` over `n` latent draws.
pub fn pseudo_label_probs<T: Real>(gen: &GeneratorParams<T>, image: &Image, n: usize, rng: &mut Rng, prior_z: bool) -> Result<ProbMap> {
    if n == 0 {
        return Err(Error::contract("sample count N must be at least 1"));
    }
    let zs: Vec<Vec<f64>> = if prior_z {
        (0..n).map(|_| (0..gen.latent_dim()).map(|_| rng.normal()).collect()).collect()
    } else {
        let q = gen.encode(image)?;
        (0..n).map(|_| q.sample(rng)).collect()
    };
    let _ftz = FlushDenormals::enable();
    let maps = gen.label_probs(image, &zs)?;
    average_maps(&maps)
}

fn average_maps(maps: &[ProbMap]) -> Result<ProbMap> {
    let first = maps.first().ok_or_else(|| Error::contract("nothing to average"))?;
    let mut data = vec![0.0; first.data.len()];
    for m in maps {
        data.iter_mut().zip(&m.data).for_each(|(a, b)| *a += b);
    }
    let k = maps.len() as f64;
    data.iter_mut().for_each(|v| *v /= k);
    let avg = ProbMap::new(first.classes, first.height, first.width, data)?;
    let dev = avg.simplex_deviation();
    if dev > 1e-9 {
        return Err(Error::contract(format!("averaged probability map leaves the simplex by {dev:e}")));
    }
    Ok(avg)
}

/// Averaged generator prediction, arg-maxed and merged with the scribbles.
pub fn generate_pseudo_labels<T: Real>(
    gen: &GeneratorParams<T>,
    image: &Image,
    scribbles: &ScribbleMap,
    n: usize,
    rng: &mut Rng,
    prior_z: bool,
) -> Result<LabelMap> {
    let pseudo = pseudo_label_probs(gen, image, n, rng, prior_z)?.argmax();
    merge_labels(scribbles, &pseudo, &unlabeled_mask(scribbles))
}

/// Pseudo-labels for a whole training set; image `i` draws from its own stream.
pub fn pseudo_label_set<T: Real>(
    gen: &GeneratorParams<T>,
    data: &[(&Image, &ScribbleMap)],
    n: usize,
    seed: u64,
    prior_z: bool,
    workers: usize,
) -> Result<Vec<LabelMap>> {
    map_indexed(data.len(), workers, |i| {
        let mut rng = Rng::keyed(seed, STREAM_PSEUDO, i as u64);
        generate_pseudo_labels(gen, data[i].0, data[i].1, n, &mut rng, prior_z)
    })
}

/// Per-pixel entropy in nats, within `[0, ln C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl UncertaintyMap {
    pub fn from_probs(p: &ProbMap) -> Self {
        let cap = (p.classes as f64).ln();
        Self {
            classes: p.classes,
            height: p.height,
            width: p.width,
            data: p.entropy().into_iter().map(|h| h.clamp(0.0, cap)).collect(),
        }
    }

    pub fn max_entropy(&self) -> f64 {
        (self.classes as f64).ln()
    }

    pub fn in_bounds(&self) -> bool {
        let cap = self.max_entropy();
        self.data.iter().all(|&u| (0.0..=cap).contains(&u))
    }

    /// 8-bit view scaled so `ln C` maps to 255.
    pub fn to_bytes(&self) -> Vec<u8> {
        let cap = self.max_entropy();
        self.data.iter().map(|&u| crate::dataio::pgm::quantize(u / cap)).collect()
    }
}

fn pad_to_multiple(image: &Image, m: usize) -> Image {
    let h = image.height.div_ceil(m) * m;
    let w = image.width.div_ceil(m) * m;
    if (h, w) == (image.height, image.width) {
        return image.clone();
    }
    let mut data = Vec::with_capacity(image.channels * h * w);
    for c in 0..image.channels {
        for y in 0..h {
            for x in 0..w {
                data.push(image.at(c, y.min(image.height - 1), x.min(image.width - 1)));
            }
        }
    }
    Image::new(image.channels, h, w, data).expect("extent matches")
}

fn crop_probs(p: &ProbMap, h: usize, w: usize) -> ProbMap {
    if (p.height, p.width) == (h, w) {
        return p.clone();
    }
    let mut data = Vec::with_capacity(p.classes * h * w);
    for c in 0..p.classes {
        for y in 0..h {
            let row = (c * p.height + y) * p.width;
            data.extend_from_slice(&p.data[row..row + w]);
        }
    }
    ProbMap::new(p.classes, h, w, data).expect("extent matches")
}

/// Mean of `t` dropout-active passes and its entropy. With dropout rate 0
/// a single deterministic pass is returned.
pub fn mc_dropout_infer<T: Real>(seg: &SegParams<T>, image: &Image, t: usize, rng: &mut Rng) -> Result<(ProbMap, UncertaintyMap)> {
    if t == 0 {
        return Err(Error::contract("inference count T must be at least 1"));
    }
    let _ftz = FlushDenormals::enable();
    let padded = pad_to_multiple(image, 1 << seg.config().depth);
    let mean = if seg.config().dropout == 0.0 {
        seg.predict(&padded, false, rng)?
    } else {
        let copies = vec![&padded; t];
        average_maps(&seg.predict_batch(&copies, true, rng)?)?
    };
    let mean = crop_probs(&mean, image.height, image.width);
    let u = UncertaintyMap::from_probs(&mean);
    Ok((mean, u))
}

/// Single deterministic pass (dropout off).
pub fn single_pass_infer<T: Real>(seg: &SegParams<T>, image: &Image) -> Result<(ProbMap, UncertaintyMap)> {
    let padded = pad_to_multiple(image, 1 << seg.config().depth);
    let p = crop_probs(&seg.predict(&padded, false, &mut Rng::new(0))?, image.height, image.width);
    let u = UncertaintyMap::from_probs(&p);
    Ok((p, u))
}

/// MC-dropout inference over a set; image `i` draws from its own stream.
pub fn infer_set<T: Real>(
    seg: &SegParams<T>,
    images: &[&Image],
    t: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<(ProbMap, UncertaintyMap)>> {
    map_indexed(images.len(), workers, |i| mc_dropout_infer(seg, images[i], t, &mut Rng::keyed(seed, STREAM_INFER, i as u64)))
}

/// One row of the evaluation table.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub metrics: ClassMetrics,
    pub hd95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: usize,
    pub rows: Vec<EvalRow>,
    pub per_image: Vec<(String, MeanMetrics)>,
    /// Mean over images of each image's class macro-mean.
    pub mean: MeanMetrics,
}

pub fn evaluate_set(
    ids: &[String],
    preds: &[LabelMap],
    gts: &[&LabelMap],
    classes: usize,
    include_background: bool,
) -> Result<EvalReport> {
    if preds.len() != gts.len() || ids.len() != gts.len() {
        return Err(Error::contract(format!("{} ids, {} predictions, {} ground truths", ids.len(), preds.len(), gts.len())));
    }
    let mut rows = Vec::new();
    let mut per_image = Vec::new();
    for ((id, pred), gt) in ids.iter().zip(preds).zip(gts) {
        let (per, mean) = evaluate(pred, gt, classes, include_background)?;
        for m in per {
            let in_pred = pred.data.contains(&(m.class as u8));
            if !(m.present || in_pred) {
                continue;
            }
            let d = hd95(&pred.class_mask(m.class as u8), &gt.class_mask(m.class as u8), (1.0, 1.0))?;
            rows.push(EvalRow { id: id.clone(), metrics: m, hd95: d });
        }
        per_image.push((id.clone(), mean));
    }
    let means: Vec<MeanMetrics> = per_image.iter().map(|(_, m)| *m).collect();
    Ok(EvalReport { classes, rows, mean: MeanMetrics::average(&means), per_image })
}

impl EvalReport {
    /// Per-image rows, then per-class means (`mean`, class id) and the
    /// overall mean (`mean`, `all`). HD95 means skip undefined entries.
    pub fn to_csv(&self) -> Csv {
        let mut csv = Csv::new(&["image", "class", "dc", "ja", "se", "sp", "hd95"]);
        let hd = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), fmt_f64);
        for r in &self.rows {
            let m = &r.metrics;
            csv.push(vec![
                r.id.clone(),
                m.class.to_string(),
                fmt_f64(m.dice.value),
                fmt_f64(m.jaccard.value),
                fmt_f64(m.sensitivity.value),
                fmt_f64(m.specificity.value),
                hd(r.hd95),
            ]);
        }
        let mut all_hd = Vec::new();
        for class in 0..self.classes {
            let present: Vec<&EvalRow> = self.rows.iter().filter(|r| r.metrics.class == class && r.metrics.present).collect();
            if present.is_empty() {
                continue;
            }
            let n = present.len() as f64;
            let avg = |f: fn(&ClassMetrics) -> f64| present.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
            let hds: Vec<f64> = present.iter().filter_map(|r| r.hd95).collect();
            let mean_hd = (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64);
            all_hd.extend(hds);
            csv.push(vec![
                "mean".into(),
                class.to_string(),
                fmt_f64(avg(|m| m.dice.value)),
                fmt_f64(avg(|m| m.jaccard.value)),
                fmt_f64(avg(|m| m.sensitivity.value)),
                fmt_f64(avg(|m| m.specificity.value)),
                hd(mean_hd),
            ]);
        }
        let m = &self.mean;
        let mean_hd = (!all_hd.is_empty()).then(|| all_hd.iter().sum::<f64>() / all_hd.len() as f64);
        csv.push(vec![
            "mean".into(),
            "all".into(),
            fmt_f64(m.dice),
            fmt_f64(m.jaccard),
            fmt_f64(m.sensitivity),
            fmt_f64(m.specificity),
            hd(mean_hd),
        ]);
        csv
    }
}

/// Everything produced by one end-to-end run.
pub struct PipelineRun<T: Real> {
    pub generator: GeneratorParams<T>,
    pub stage1_log: Vec<Stage1Row>,
    pub pseudo_labels: Vec<LabelMap>,
    pub segmenter: SegParams<T>,
    pub stage2_log: Vec<Stage2Row>,
}

/// Stage 1, pseudo-labelling and stage 2 on `train`.
pub fn run_training<T: Real>(train: &[Sample], classes: usize, cfg: &TrainConfig, workers: usize) -> Result<PipelineRun<T>> {
    let pairs: Vec<(&Image, &ScribbleMap)> = train.iter().map(|s| (&s.image, &s.scribbles)).collect();
    let (generator, stage1_log) = train_stage1::<T>(&pairs, classes, cfg)?;
    let pseudo_labels = pseudo_label_set(&generator, &pairs, cfg.n_samples, cfg.seed, cfg.prior_z, workers)?;
    let images: Vec<&Image> = train.iter().map(|s| &s.image).collect();
    let refs: Vec<&LabelMap> = pseudo_labels.iter().collect();
    let (segmenter, stage2_log) = train_stage2::<T>(&images, Supervision::Dense(&refs), classes, cfg)?;
    Ok(PipelineRun { generator, stage1_log, pseudo_labels, segmenter, stage2_log })
}

/// MC-dropout predictions for `test`, evaluated against its labels.
pub fn evaluate_segmenter<T: Real>(
    seg: &SegParams<T>,
    test: &[Sample],
    classes: usize,
    t: usize,
    seed: u64,
    workers: usize,
) -> Result<(EvalReport, Vec<(ProbMap, UncertaintyMap)>)> {
    let images: Vec<&Image> = test.iter().map(|s| &s.image).collect();
    let outputs = infer_set(seg, &images, t, seed, workers)?;
    let preds: Vec<LabelMap> = outputs.iter().map(|(p, _)| p.argmax()).collect();
    let ids: Vec<String> = test.iter().map(|s| s.id.clone()).collect();
    let gts: Vec<&LabelMap> = test.iter().map(|s| &s.labels).collect();
    Ok((evaluate_set(&ids, &preds, &gts, classes, true)?, outputs))
}

#[derive(Clone, Debug, PartialEq)]
pub enum AblationAxis {
    /// `{pce}`, `{pce,kl}`, `{pce,kl,recon}`, all four; `N = T = 1`.
    Losses,
    /// Pseudo-label sample counts with `T = 1`.
    Samples(Vec<usize>),
    /// Inference counts with the configured `N`.
    Inference(Vec<usize>),
}

impl AblationAxis {
    pub fn samples_default() -> Self {
        Self::Samples(vec![1, 3, 5, 7])
    }

    pub fn inference_default() -> Self {
        Self::Inference(vec![1, 5, 10, 15, 20])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub metrics: MeanMetrics,
}

pub fn ablation_csv(axis_name: &str, rows: &[AblationRow]) -> Csv {
    let mut csv = Csv::new(&[axis_name, "dc", "ja", "se", "sp"]);
    for r in rows {
        let m = &r.metrics;
        csv.push(vec![r.label.clone(), fmt_f64(m.dice), fmt_f64(m.jaccard), fmt_f64(m.sensitivity), fmt_f64(m.specificity)]);
    }
    csv
}

/// Grid runner; every cell uses the same seed.
pub fn run_ablation<T: Real>(
    train: &[Sample],
    test: &[Sample],
    classes: usize,
    axis: &AblationAxis,
    cfg: &TrainConfig,
    workers: usize,
) -> Result<Vec<AblationRow>> {
    let pairs: Vec<(&Image, &ScribbleMap)> = train.iter().map(|s| (&s.image, &s.scribbles)).collect();
    let images: Vec<&Image> = train.iter().map(|s| &s.image).collect();
    let stage2 = |labels: &[LabelMap]| {
        let refs: Vec<&LabelMap> = labels.iter().collect();
        train_stage2::<T>(&images, Supervision::Dense(&refs), classes, cfg).map(|(s, _)| s)
    };
    let score = |seg: &SegParams<T>, t: usize| evaluate_segmenter(seg, test, classes, t, cfg.seed, workers).map(|(r, _)| r.mean);
    let mut rows = Vec::new();
    match axis {
        AblationAxis::Losses => {
            let w = cfg.weights;
            let cells = [
                ("pce", LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0 }),
                ("pce+kl", LossWeights { beta: 0.0, gamma: 0.0, ..w }),
                ("pce+kl+recon", LossWeights { gamma: 0.0, ..w }),
                ("pce+kl+recon+crf", w),
            ];
            for (label, weights) in cells {
                let cell = TrainConfig { weights, ..cfg.clone() };
                let (gen, _) = train_stage1::<T>(&pairs, classes, &cell)?;
                let labels = pseudo_label_set(&gen, &pairs, 1, cfg.seed, cfg.prior_z, workers)?;
                rows.push(AblationRow { label: label.into(), metrics: score(&stage2(&labels)?, 1)? });
            }
        }
        AblationAxis::Samples(grid) => {
            let (gen, _) = train_stage1::<T>(&pairs, classes, cfg)?;
            for &n in grid {
                let labels = pseudo_label_set(&gen, &pairs, n, cfg.seed, cfg.prior_z, workers)?;
                rows.push(AblationRow { label: n.to_string(), metrics: score(&stage2(&labels)?, 1)? });
            }
        }
        AblationAxis::Inference(grid) => {
            let (gen, _) = train_stage1::<T>(&pairs, classes, cfg)?;
            let labels = pseudo_label_set(&gen, &pairs, cfg.n_samples, cfg.seed, cfg.prior_z, workers)?;
            let seg = stage2(&labels)?;
            for &t in grid {
                rows.push(AblationRow { label: t.to_string(), metrics: score(&seg, t)? });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synthetic::{generate_synthetic, SyntheticSpec};

    fn tiny() -> (Vec<Sample>, Vec<Sample>) {
        let spec = SyntheticSpec {
            height: 16,
            width: 16,
            min_radius: 2.5,
            max_radius: 4.0,
            min_shapes: 1,
            max_shapes: 2,
            train: 4,
            val: 0,
            test: 2,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec, 1).unwrap();
        (ds.train, ds.test)
    }

    fn quick() -> TrainConfig {
        TrainConfig { epochs: 2, batch: 2, lr: 1e-3, latent_dim: 4, base_width: 4, ..Default::default() }
    }

    #[test]
    fn zero_learning_rate_keeps_initial_parameters() {
        let (train, _) = tiny();
        let pairs: Vec<_> = train.iter().map(|s| (&s.image, &s.scribbles)).collect();
        let cfg = TrainConfig { lr: 0.0, epochs: 1, ..quick() };
        let (gen, log) = train_stage1::<f64>(&pairs[..1], 4, &cfg).unwrap();
        let fresh = GeneratorParams::<f64>::init(gen.config().clone(), &mut Rng::keyed(cfg.seed, STREAM_GEN_INIT, 0)).unwrap();
        assert_eq!(gen.store, fresh.store);
        assert_eq!(log.len(), 1);
        let imgs: Vec<&Image> = train.iter().map(|s| &s.image).collect();
        let labels: Vec<&LabelMap> = train.iter().map(|s| &s.labels).collect();
        let (seg, _) = train_stage2::<f64>(&imgs, Supervision::Dense(&labels), 4, &cfg).unwrap();
        let fresh = SegParams::<f64>::init(cfg.unet(4), &mut Rng::keyed(cfg.seed, STREAM_SEG_INIT, 0)).unwrap();
        assert_eq!(seg.store, fresh.store);
    }

    #[test]
    fn zero_weights_log_only_pce() {
        let (train, _) = tiny();
        let pairs: Vec<_> = train.iter().map(|s| (&s.image, &s.scribbles)).collect();
        let cfg = TrainConfig { weights: LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0 }, ..quick() };
        let (_, log) = train_stage1::<f64>(&pairs, 4, &cfg).unwrap();
        assert!(log.iter().all(|r| r.components.kl == 0.0 && r.components.recon == 0.0 && r.components.crf == 0.0));
        assert!(log.iter().all(|r| r.total == r.components.pce));
    }

    #[test]
    fn pseudo_labels_keep_scribbles_and_are_reproducible() {
        let (train, _) = tiny();
        let pairs: Vec<_> = train.iter().map(|s| (&s.image, &s.scribbles)).collect();
        let (gen, _) = train_stage1::<f64>(&pairs, 4, &quick()).unwrap();
        let a = pseudo_label_set(&gen, &pairs, 3, 5, false, 1).unwrap();
        let b = pseudo_label_set(&gen, &pairs, 3, 5, false, 2).unwrap();
        assert_eq!(a, b);
        for (l, s) in a.iter().zip(&train) {
            l.validate(4).unwrap();
            for (p, &v) in s.scribbles.data.iter().enumerate() {
                if v != crate::UNLABELED {
                    assert_eq!(l.data[p], v);
                }
            }
        }
    }

    #[test]
    fn dropout_free_inference_is_deterministic() {
        let (train, test) = tiny();
        let imgs: Vec<&Image> = train.iter().map(|s| &s.image).collect();
        let labels: Vec<&LabelMap> = train.iter().map(|s| &s.labels).collect();
        let cfg = TrainConfig { dropout: 0.0, ..quick() };
        let (seg, _) = train_stage2::<f64>(&imgs, Supervision::Dense(&labels), 4, &cfg).unwrap();
        let (mc, u) = mc_dropout_infer(&seg, &test[0].image, 5, &mut Rng::new(1)).unwrap();
        let (single, _) = single_pass_infer(&seg, &test[0].image).unwrap();
        assert_eq!(mc, single);
        assert!(u.in_bounds());
    }

    #[test]
    fn mc_inference_is_simplex_and_bounded() {
        let (train, test) = tiny();
        let imgs: Vec<&Image> = train.iter().map(|s| &s.image).collect();
        let scribbles: Vec<&ScribbleMap> = train.iter().map(|s| &s.scribbles).collect();
        let cfg = TrainConfig { dropout: 0.5, ..quick() };
        let (seg, log) = train_stage2::<f32>(&imgs, Supervision::Scribbles(&scribbles), 4, &cfg).unwrap();
        assert_eq!(log.len(), 4);
        let out = infer_set(&seg, &[&test[0].image, &test[1].image], 7, 3, 1).unwrap();
        for (p, u) in &out {
            assert!(p.simplex_deviation() <= 1e-9);
            assert!(u.in_bounds());
        }
        assert_eq!(out, infer_set(&seg, &[&test[0].image, &test[1].image], 7, 3, 2).unwrap());
    }

    #[test]
    fn odd_extents_are_padded_for_inference() {
        let mut rng = Rng::new(2);
        let seg = SegParams::<f64>::init(TrainConfig::default().unet(3), &mut rng).unwrap();
        let img = Image::gray(10, 13, (0..130).map(|i| i as f64 / 130.0).collect()).unwrap();
        let (p, u) = mc_dropout_infer(&seg, &img, 2, &mut rng).unwrap();
        assert_eq!((p.height, p.width, u.data.len()), (10, 13, 130));
    }

    #[test]
    fn uniform_prediction_has_maximal_entropy() {
        let p = ProbMap::new(4, 1, 1, vec![0.25; 4]).unwrap();
        let u = UncertaintyMap::from_probs(&p);
        assert!((u.data[0] - 1.386294).abs() < 1e-6);
        assert_eq!(u.to_bytes(), vec![255]);
    }

    #[test]
    fn evaluation_csv_has_aggregate_rows() {
        let gt = LabelMap::from_vec(2, 2, vec![0, 1, 1, 1]).unwrap();
        let pred = LabelMap::from_vec(2, 2, vec![0, 1, 1, 0]).unwrap();
        let r = evaluate_set(&["a".into()], &[pred], &[&gt], 2, true).unwrap();
        let text = r.to_csv().render();
        assert!(text.starts_with("image,class,dc,ja,se,sp,hd95\na,0,"));
        assert!(text.lines().last().unwrap().starts_with("mean,all,"));
        assert_eq!(r.per_image.len(), 1);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { n_samples: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: f64::NAN, ..Default::default() }.validate().is_err());
        assert_eq!("f32".parse::<Precision>().unwrap(), Precision::F32);
    }
}
