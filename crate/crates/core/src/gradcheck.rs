//! Finite-difference oracle suite for every loss and a full stage-1 pass.
//!
//! Each seed draws one small 64-bit instance (batch 2, 8×8 maps, latent
//! dimension ≤ 8). Errors are norm-wise relative errors
//! `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` between tape and central-difference gradients,
//! taken per input tensor, and the largest is reported.

use bws_tensor::{relative_error, Rng, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::losses::{ce_term, crf_term, elbo_term, kl_term, pce_term, recon_term, CrfConfig, ElboTerms, LossWeights};
use crate::maps::{Image, LabelMap, ScribbleMap, UNLABELED};
use crate::networks::{images_to_tensor, GeneratorConfig, GeneratorParams, UNetConfig};
use crate::params::ParamStore;

pub const TOLERANCE: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-6;
/// Coordinates probed per tensor.
const MAX_COORDS: usize = 12;
const STREAM_GRADCHECK: u64 = 50;

pub const CHECKS: [&str; 7] = ["pce", "kl", "recon", "crf", "ce", "elbo", "stage1"];

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub instances: usize,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

struct Instance {
    classes: usize,
    latent: usize,
    logits: Tensor,
    mean: Tensor,
    log_var: Tensor,
    recon: Tensor,
    images: Vec<Image>,
    labels: Vec<LabelMap>,
    scribbles: Vec<ScribbleMap>,
    weights: LossWeights,
}

const BATCH: usize = 2;
const SIDE: usize = 8;

impl Instance {
    fn draw(rng: &mut Rng) -> Result<Self> {
        let classes = rng.range_inclusive(2, 4);
        let latent = rng.range_inclusive(2, 8);
        let n = SIDE * SIDE;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut scribbles = Vec::new();
        for _ in 0..BATCH {
            images.push(Image::gray(SIDE, SIDE, (0..n).map(|_| rng.uniform()).collect())?);
            labels.push(LabelMap::from_vec(SIDE, SIDE, (0..n).map(|_| rng.below(classes) as u8).collect())?);
            let mut s: Vec<u8> = (0..n).map(|_| if rng.bernoulli(0.3) { rng.below(classes) as u8 } else { UNLABELED }).collect();
            s[rng.below(n)] = rng.below(classes) as u8;
            scribbles.push(ScribbleMap::from_vec(SIDE, SIDE, s)?);
        }
        let mut normal = |shape: &[usize], scale: f64| rng.normal_tensor::<f64>(shape).map(|v| v * scale);
        let logits = normal(&[BATCH, classes, SIDE, SIDE], 1.5);
        let mean = normal(&[BATCH, latent], 1.0);
        let log_var = normal(&[BATCH, latent], 0.5);
        let recon = normal(&[BATCH, 1, SIDE, SIDE], 0.3).map(|v| v + 0.5);
        let weights = LossWeights { alpha: rng.uniform_range(0.1, 1.0), beta: rng.uniform_range(0.1, 1.0), gamma: rng.uniform_range(0.01, 0.1) };
        Ok(Self { classes, latent, logits, mean, log_var, recon, images, labels, scribbles, weights })
    }

    fn image_refs(&self) -> Vec<&Image> {
        self.images.iter().collect()
    }
}

/// Tape gradients versus central differences of `build` at `inputs`.
fn check_inputs(inputs: &[Tensor], build: impl for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get_or_zeros(*var);
        let idx = probe_indices(input.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &j in &idx {
            let eval = |delta: f64| -> Result<f64> {
                let tape = Tape::new();
                let vars: Vec<_> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let mut t = t.clone();
                        if k == i {
                            t.data_mut()[j] += delta;
                        }
                        tape.param(t)
                    })
                    .collect();
                Ok(build(&tape, &vars)?.item())
            };
            numeric.push((eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP));
        }
        let picked: Vec<f64> = idx.iter().map(|&j| analytic.data()[j]).collect();
        worst = worst.max(relative_error(&picked, &numeric));
    }
    Ok(worst)
}

/// Same as [`check_inputs`] but over every tensor of a parameter store.
fn check_store(store: &ParamStore<f64>, build: impl for<'t> Fn(&crate::params::Bound<'t, f64>) -> Result<Var<'t, f64>>) -> Result<f64> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let loss = build(&bound)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = bound.vars().iter().map(|v| grads.get_or_zeros(*v)).collect();
    drop(bound);
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for (k, id) in store.ids().enumerate() {
        let idx = probe_indices(store.get(id).len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &j in &idx {
            let orig = probe.get(id).data()[j];
            let eval = |v: f64, probe: &mut ParamStore<f64>| -> Result<f64> {
                probe.get_mut(id).data_mut()[j] = v;
                let tape = Tape::new();
                let bound = probe.bind(&tape);
                Ok(build(&bound)?.item())
            };
            let up = eval(orig + FD_STEP, &mut probe)?;
            let down = eval(orig - FD_STEP, &mut probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        let picked: Vec<f64> = idx.iter().map(|&j| analytic[k].data()[j]).collect();
        worst = worst.max(relative_error(&picked, &numeric));
    }
    Ok(worst)
}

fn probe_indices(len: usize) -> Vec<usize> {
    if len <= MAX_COORDS {
        (0..len).collect()
    } else {
        (0..MAX_COORDS).map(|k| k * len / MAX_COORDS + k % (len / MAX_COORDS)).collect()
    }
}

fn crf_config() -> CrfConfig {
    CrfConfig { crop: None, ..CrfConfig::default() }
}

/// Largest relative error of one check on the instance drawn for `seed`.
pub fn check_one(name: &str, seed: u64) -> Result<f64> {
    let mut rng = Rng::keyed(seed, STREAM_GRADCHECK, 0);
    let inst = Instance::draw(&mut rng)?;
    let scribbles: Vec<&ScribbleMap> = inst.scribbles.iter().collect();
    let labels: Vec<&LabelMap> = inst.labels.iter().collect();
    let images = inst.image_refs();
    let image_t: Tensor = images_to_tensor(&images)?;
    match name {
        "pce" => check_inputs(&[inst.logits.clone()], |_, v| pce_term(v[0].softmax_channels()?, &scribbles, false)),
        "kl" => check_inputs(&[inst.mean.clone(), inst.log_var.clone()], |_, v| kl_term(v[0], v[1])),
        "recon" => check_inputs(&[inst.recon.clone(), image_t.clone()], |_, v| recon_term(v[0], v[1])),
        "crf" => check_inputs(&[inst.logits.clone()], |_, v| {
            crf_term(v[0].softmax_channels()?, &images, &crf_config(), &mut Rng::new(0))
        }),
        "ce" => check_inputs(&[inst.logits.clone()], |_, v| ce_term(v[0].softmax_channels()?, &labels)),
        "elbo" => check_inputs(&[inst.logits.clone(), inst.mean.clone(), inst.log_var.clone(), inst.recon.clone()], |t, v| {
            let probs = v[0].softmax_channels()?;
            let terms = ElboTerms {
                pce: pce_term(probs, &scribbles, false)?,
                kl: Some(kl_term(v[1], v[2])?),
                recon: Some(recon_term(v[3], t.constant(image_t.clone()))?),
                crf: Some(crf_term(probs, &images, &crf_config(), &mut Rng::new(0))?),
            };
            Ok(elbo_term(&terms, &inst.weights)?.0)
        }),
        "stage1" => {
            let cfg = GeneratorConfig {
                unet: UNetConfig { in_channels: 1, classes: inst.classes, base_width: 4, depth: 2, dropout: 0.0 },
                latent_dim: inst.latent,
                height: SIDE,
                width: SIDE,
            };
            let mut gen = GeneratorParams::<f64>::init(cfg, &mut rng)?;
            // Move off the zero-initialised heads so every gradient is non-trivial.
            let ids: Vec<_> = gen.store.ids().collect();
            for id in ids {
                gen.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += 0.1 * rng.normal());
            }
            let eps: Tensor = rng.normal_tensor(&[BATCH, inst.latent]);
            check_store(&gen.store, |p| {
                let x = p.vars()[0].tape().constant(image_t.clone());
                let out = gen.forward(p, x, &eps, true)?;
                let terms = ElboTerms {
                    pce: pce_term(out.probs, &scribbles, false)?,
                    kl: Some(kl_term(out.mean, out.log_var)?),
                    recon: out.reconstruction.map(|r| recon_term(r, x)).transpose()?,
                    crf: Some(crf_term(out.probs, &images, &crf_config(), &mut Rng::new(0))?),
                };
                Ok(elbo_term(&terms, &inst.weights)?.0)
            })
        }
        other => Err(Error::contract(format!("unknown gradient check {other:?}; expected one of {CHECKS:?}"))),
    }
}

/// All checks over `seeds`, reporting the worst instance per check.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<GradcheckRow>> {
    CHECKS
        .iter()
        .map(|&name| {
            let mut worst = 0.0f64;
            for &s in seeds {
                let e = check_one(name, s)?;
                if !e.is_finite() {
                    return Err(Error::NonFinite { step: 0, components: format!("{name} gradient check, seed {s}") });
                }
                worst = worst.max(e);
            }
            Ok(GradcheckRow { name, max_rel_error: worst, instances: seeds.len() })
        })
        .collect()
}
