use std::path::{Path, PathBuf};

use bws_core::dataio::layout::{list_ids, map_path, read_images, read_split, write_dataset, DatasetInfo, INFO_FILE};
use bws_core::dataio::manifest::RunManifest;
use bws_core::dataio::pgm::{encode_pgm, read_labels, write_f64_raw, write_labels};
use bws_core::dataio::synthetic::{generate_synthetic, SyntheticSpec};
use bws_core::dataio::{read_file, write_atomic, Csv, Sample};
use bws_core::gradcheck::{run_suite, TOLERANCE};
use bws_core::networks::{GeneratorParams, SegParams};
use bws_core::parallel::worker_count;
use bws_core::params::ParamStore;
use bws_core::pipeline::{
    ablation_csv, evaluate_set, infer_set, pseudo_label_set, run_ablation, stage1_csv, stage2_csv, train_stage1, train_stage2,
    AblationAxis, Precision, Supervision, TrainConfig,
};
use bws_core::{Error, Image, LabelMap, Result, ScribbleMap};
use bws_tensor::Real;

use crate::args::{AblateArgs, EvalArgs, GradcheckArgs, InferArgs, PseudoLabelArgs, SimulateArgs, TrainGenArgs, TrainSegArgs};
use crate::settings::{manifest_path, Resolver, TRAIN_KEYS};

/// Process exit status for a completed command.
pub type Status = u8;

fn keys(extra: &[&'static str]) -> Vec<&'static str> {
    TRAIN_KEYS.iter().copied().chain(extra.iter().copied()).collect()
}

/// Manifest written at start with inputs, rewritten at the end with artifacts.
struct Run {
    manifest: RunManifest,
    out: PathBuf,
}

impl Run {
    fn start(r: &Resolver, command: &str, seed: u64, out: PathBuf, inputs: &[PathBuf]) -> Result<Self> {
        let mut manifest = r.manifest(command, seed);
        for p in inputs {
            manifest.input(p)?;
        }
        manifest.write(&manifest_path(&out))?;
        Ok(Self { manifest, out })
    }

    fn artifact(&mut self, p: &Path) -> Result<()> {
        self.manifest.artifact(p)
    }

    fn finish(self) -> Result<Status> {
        self.manifest.write(&manifest_path(&self.out))?;
        Ok(0)
    }
}

fn sample_inputs(root: &Path, split: &str, samples: &[Sample], kinds: &[&str]) -> Vec<PathBuf> {
    let mut v = vec![root.join(INFO_FILE)];
    for s in samples {
        v.extend(kinds.iter().map(|k| map_path(root, split, k, &s.id)));
    }
    v
}

fn load_store<T: Real>(path: &Path) -> Result<ParamStore<T>> {
    ParamStore::from_checkpoint_bytes(&read_file(path)?, path)
}

fn pairs(samples: &[Sample]) -> Vec<(&Image, &ScribbleMap)> {
    samples.iter().map(|s| (&s.image, &s.scribbles)).collect()
}

pub fn simulate(a: &SimulateArgs) -> Result<Status> {
    let mut r = Resolver::new(&a.common, &["seed", "train", "val", "test", "height", "width", "noise", "jitter"])?;
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        seed: r.get("seed", a.common.seed, d.seed)?,
        train: r.get("train", a.train, d.train)?,
        val: r.get("val", a.val, d.val)?,
        test: r.get("test", a.test, d.test)?,
        height: r.get("height", a.height, d.height)?,
        width: r.get("width", a.width, d.width)?,
        noise_sigma: r.get("noise", a.noise, d.noise_sigma)?,
        scribble_jitter: r.switch("jitter", a.jitter)?,
        ..d
    };
    spec.validate()?;
    let out = r.out_dir(&a.common)?;
    let mut run = Run::start(&r, "simulate", spec.seed, out.clone(), &[])?;
    let ds = generate_synthetic(&spec, worker_count()?)?;
    for p in write_dataset(&out, &spec, &ds)? {
        run.artifact(&p)?;
    }
    println!("wrote {} train, {} val, {} test samples to {}", spec.train, spec.val, spec.test, out.display());
    run.finish()
}

pub fn train_gen(a: &TrainGenArgs) -> Result<Status> {
    let mut r = Resolver::new(&a.common, &keys(&["data"]))?;
    let cfg = r.train_config(&a.common, &a.opts)?;
    let data = r.path("data", &a.data)?;
    let out = r.out_dir(&a.common)?;
    match cfg.precision {
        Precision::F32 => train_gen_with::<f32>(&r, &cfg, &data, out),
        Precision::F64 => train_gen_with::<f64>(&r, &cfg, &data, out),
    }
}

fn train_gen_with<T: Real>(r: &Resolver, cfg: &TrainConfig, data: &Path, out: PathBuf) -> Result<Status> {
    let info = DatasetInfo::load(data)?;
    let train = read_split(data, "train")?;
    let mut run = Run::start(r, "train-gen", cfg.seed, out.clone(), &sample_inputs(data, "train", &train, &["images", "scribbles"]))?;
    let (gen, log) = train_stage1::<T>(&pairs(&train), info.classes, cfg)?;
    let ckpt = out.join("generator.ckpt");
    write_atomic(&ckpt, &gen.to_checkpoint_bytes())?;
    let log_path = out.join("stage1_log.csv");
    stage1_csv(&log).write(&log_path)?;
    run.artifact(&ckpt)?;
    run.artifact(&log_path)?;
    if let Some(last) = log.last() {
        println!("stage 1: {} steps, final objective {:.6}", last.step + 1, last.total);
    }
    run.finish()
}

pub fn pseudo_label(a: &PseudoLabelArgs) -> Result<Status> {
    let mut r = Resolver::new(&a.common, &keys(&["data", "model", "split"]))?;
    let cfg = r.train_config(&a.common, &a.opts)?;
    let data = r.path("data", &a.data)?;
    let model = r.path("model", &a.model)?;
    let split = r.get("split", a.split.clone(), "train".to_string())?;
    let out = r.out_dir(&a.common)?;
    match cfg.precision {
        Precision::F32 => pseudo_label_with::<f32>(&r, &cfg, &data, &model, &split, out),
        Precision::F64 => pseudo_label_with::<f64>(&r, &cfg, &data, &model, &split, out),
    }
}

fn pseudo_label_with<T: Real>(r: &Resolver, cfg: &TrainConfig, data: &Path, model: &Path, split: &str, out: PathBuf) -> Result<Status> {
    let samples = read_split(data, split)?;
    let mut inputs = sample_inputs(data, split, &samples, &["images", "scribbles"]);
    inputs.push(model.to_path_buf());
    let mut run = Run::start(r, "pseudo-label", cfg.seed, out.clone(), &inputs)?;
    let gen = GeneratorParams::<T>::from_store(load_store(model)?)?;
    let labels = pseudo_label_set(&gen, &pairs(&samples), cfg.n_samples, cfg.seed, cfg.prior_z, worker_count()?)?;
    for (s, l) in samples.iter().zip(&labels) {
        let p = out.join("pseudo").join(format!("{}.pgm", s.id));
        write_labels(&p, l)?;
        run.artifact(&p)?;
    }
    println!("wrote {} pseudo-labels to {}", labels.len(), out.join("pseudo").display());
    run.finish()
}

pub fn train_seg(a: &TrainSegArgs) -> Result<Status> {
    let mut r = Resolver::new(&a.common, &keys(&["data", "supervision", "labels"]))?;
    let cfg = r.train_config(&a.common, &a.opts)?;
    let data = r.path("data", &a.data)?;
    let supervision = r.get("supervision", a.supervision.clone(), "pseudo".to_string())?;
    let labels = r.optional_path("labels", &a.labels)?;
    let out = r.out_dir(&a.common)?;
    match cfg.precision {
        Precision::F32 => train_seg_with::<f32>(&r, &cfg, &data, &supervision, labels.as_deref(), out),
        Precision::F64 => train_seg_with::<f64>(&r, &cfg, &data, &supervision, labels.as_deref(), out),
    }
}

fn train_seg_with<T: Real>(
    r: &Resolver,
    cfg: &TrainConfig,
    data: &Path,
    supervision: &str,
    labels_dir: Option<&Path>,
    out: PathBuf,
) -> Result<Status> {
    let info = DatasetInfo::load(data)?;
    let train = read_split(data, "train")?;
    let mut inputs = sample_inputs(data, "train", &train, &["images"]);
    let pseudo: Vec<LabelMap> = match supervision {
        "pseudo" => {
            let dir = labels_dir.ok_or_else(|| Error::config("--supervision pseudo needs --labels"))?;
            let paths: Vec<PathBuf> = train.iter().map(|s| dir.join(format!("{}.pgm", s.id))).collect();
            let maps = paths.iter().map(|p| read_labels(p)).collect::<Result<Vec<_>>>()?;
            inputs.extend(paths);
            maps
        }
        "dense" => {
            inputs.extend(train.iter().map(|s| map_path(data, "train", "labels", &s.id)));
            Vec::new()
        }
        "scribbles" => {
            inputs.extend(train.iter().map(|s| map_path(data, "train", "scribbles", &s.id)));
            Vec::new()
        }
        other => return Err(Error::config(format!("unknown supervision {other:?}; expected pseudo, dense or scribbles"))),
    };
    let mut run = Run::start(r, "train-seg", cfg.seed, out.clone(), &inputs)?;
    let images: Vec<&Image> = train.iter().map(|s| &s.image).collect();
    let dense: Vec<&LabelMap> = match supervision {
        "pseudo" => pseudo.iter().collect(),
        _ => train.iter().map(|s| &s.labels).collect(),
    };
    let scribbles: Vec<&ScribbleMap> = train.iter().map(|s| &s.scribbles).collect();
    let sup = if supervision == "scribbles" { Supervision::Scribbles(&scribbles) } else { Supervision::Dense(&dense) };
    let (seg, log) = train_stage2::<T>(&images, sup, info.classes, cfg)?;
    let ckpt = out.join("segmenter.ckpt");
    write_atomic(&ckpt, &seg.store.to_checkpoint_bytes())?;
    let log_path = out.join("stage2_log.csv");
    stage2_csv(&log, sup.column()).write(&log_path)?;
    run.artifact(&ckpt)?;
    run.artifact(&log_path)?;
    if let Some(last) = log.last() {
        println!("stage 2: {} steps, final loss {:.6}", last.step + 1, last.loss);
    }
    run.finish()
}

pub fn infer(a: &InferArgs) -> Result<Status> {
    let mut r = Resolver::new(&a.common, &keys(&["data", "model", "split"]))?;
    let cfg = r.train_config(&a.common, &a.opts)?;
    let data = r.path("data", &a.data)?;
    let model = r.path("model", &a.model)?;
    let split = r.get("split", a.split.clone(), "test".to_string())?;
    let out = r.out_dir(&a.common)?;
    match cfg.precision {
        Precision::F32 => infer_with::<f32>(&r, &cfg, &data, &model, &split, out),
        Precision::F64 => infer_with::<f64>(&r, &cfg, &data, &model, &split, out),
    }
}

fn infer_with<T: Real>(r: &Resolver, cfg: &TrainConfig, data: &Path, model: &Path, split: &str, out: PathBuf) -> Result<Status> {
    let images = read_images(data, split)?;
    let mut inputs: Vec<PathBuf> = images.iter().map(|(id, _)| map_path(data, split, "images", id)).collect();
    inputs.push(model.to_path_buf());
    let mut run = Run::start(r, "infer", cfg.seed, out.clone(), &inputs)?;
    let seg = SegParams::<T>::from_store(load_store(model)?, cfg.dropout)?;
    let refs: Vec<&Image> = images.iter().map(|(_, i)| i).collect();
    let outputs = infer_set(&seg, &refs, cfg.t_infer, cfg.seed, worker_count()?)?;
    for ((id, _), (probs, unc)) in images.iter().zip(&outputs) {
        let pred = out.join("pred").join(format!("{id}.pgm"));
        write_labels(&pred, &probs.argmax())?;
        let unc_pgm = out.join("uncertainty").join(format!("{id}.pgm"));
        write_atomic(&unc_pgm, &encode_pgm(unc.width, unc.height, &unc.to_bytes()))?;
        let unc_raw = out.join("uncertainty").join(format!("{id}.f64"));
        write_f64_raw(&unc_raw, &unc.data)?;
        for p in [pred, unc_pgm, unc_raw] {
            run.artifact(&p)?;
        }
    }
    println!("wrote {} predictions and entropy maps to {}", outputs.len(), out.display());
    run.finish()
}

pub fn eval(a: &EvalArgs) -> Result<Status> {
    let mut r = Resolver::new(&a.common, &["seed", "data", "pred", "split", "exclude-background"])?;
    let seed = r.get("seed", a.common.seed, 0)?;
    let data = r.path("data", &a.data)?;
    let pred_dir = r.path("pred", &a.pred)?;
    let split = r.get("split", a.split.clone(), "test".to_string())?;
    let exclude = r.switch("exclude-background", a.exclude_background)?;
    let out = r.out_dir(&a.common)?;
    let info = DatasetInfo::load(&data)?;
    let ids = list_ids(&data.join(&split).join("labels"))?;
    let gt_paths: Vec<PathBuf> = ids.iter().map(|id| map_path(&data, &split, "labels", id)).collect();
    let pred_paths: Vec<PathBuf> = ids.iter().map(|id| pred_dir.join(format!("{id}.pgm"))).collect();
    let inputs: Vec<PathBuf> = gt_paths.iter().chain(&pred_paths).cloned().collect();
    let mut run = Run::start(&r, "eval", seed, out.clone(), &inputs)?;
    let gts = gt_paths.iter().map(|p| read_labels(p)).collect::<Result<Vec<_>>>()?;
    let preds = pred_paths.iter().map(|p| read_labels(p)).collect::<Result<Vec<_>>>()?;
    let gt_refs: Vec<&LabelMap> = gts.iter().collect();
    let report = evaluate_set(&ids, &preds, &gt_refs, info.classes, !exclude)?;
    let path = out.join("metrics.csv");
    report.to_csv().write(&path)?;
    run.artifact(&path)?;
    let m = report.mean;
    println!("DC {:.2}  JA {:.2}  SE {:.2}  SP {:.2}  ({} images)", m.dice, m.jaccard, m.sensitivity, m.specificity, ids.len());
    run.finish()
}

fn parse_grid(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|e| Error::config(format!("grid value {v:?}: {e}"))))
        .collect()
}

pub fn ablate(a: &AblateArgs) -> Result<Status> {
    let mut r = Resolver::new(&a.common, &keys(&["data", "axis", "grid"]))?;
    let cfg = r.train_config(&a.common, &a.opts)?;
    let data = r.path("data", &a.data)?;
    let axis_name = r.get("axis", a.axis.clone(), "losses".to_string())?;
    let grid = match a.grid.clone() {
        Some(g) => Some(g),
        None => r.get("grid", None, String::new()).map(|g| (!g.is_empty()).then_some(g))?,
    };
    let axis = match (axis_name.as_str(), grid) {
        ("losses", None) => AblationAxis::Losses,
        ("losses", Some(_)) => return Err(Error::config("the losses axis takes no --grid")),
        ("n", None) => AblationAxis::samples_default(),
        ("n", Some(g)) => AblationAxis::Samples(parse_grid(&g)?),
        ("t", None) => AblationAxis::inference_default(),
        ("t", Some(g)) => AblationAxis::Inference(parse_grid(&g)?),
        (other, _) => return Err(Error::config(format!("unknown axis {other:?}; expected losses, n or t"))),
    };
    let out = r.out_dir(&a.common)?;
    match cfg.precision {
        Precision::F32 => ablate_with::<f32>(&r, &cfg, &data, &axis_name, &axis, out),
        Precision::F64 => ablate_with::<f64>(&r, &cfg, &data, &axis_name, &axis, out),
    }
}

fn ablate_with<T: Real>(r: &Resolver, cfg: &TrainConfig, data: &Path, name: &str, axis: &AblationAxis, out: PathBuf) -> Result<Status> {
    let info = DatasetInfo::load(data)?;
    let train = read_split(data, "train")?;
    let test = read_split(data, "test")?;
    let mut inputs = sample_inputs(data, "train", &train, &["images", "scribbles"]);
    inputs.extend(sample_inputs(data, "test", &test, &["images", "labels"]).into_iter().skip(1));
    let mut run = Run::start(r, "ablate", cfg.seed, out.clone(), &inputs)?;
    let rows = run_ablation::<T>(&train, &test, info.classes, axis, cfg, worker_count()?)?;
    let csv = ablation_csv(name, &rows);
    let path = out.join(format!("ablation_{name}.csv"));
    csv.write(&path)?;
    run.artifact(&path)?;
    print!("{}", csv.render());
    run.finish()
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<Status> {
    let mut r = Resolver::new(&a.common, &["seed", "instances"])?;
    let seed = r.get("seed", a.common.seed, 0)?;
    let instances = r.get("instances", a.instances, 10)?;
    if instances == 0 {
        return Err(Error::config("--instances must be at least 1"));
    }
    let out = r.out_dir(&a.common)?;
    let mut run = Run::start(&r, "gradcheck", seed, out.clone(), &[])?;
    let seeds: Vec<u64> = (seed..seed + instances as u64).collect();
    let rows = run_suite(&seeds)?;
    let mut csv = Csv::new(&["check", "max_rel_error", "instances", "status"]);
    for row in &rows {
        let status = if row.passed() { "pass" } else { "FAIL" };
        csv.push(vec![row.name.into(), format!("{:.3e}", row.max_rel_error), row.instances.to_string(), status.into()]);
    }
    print!("{}", csv.render());
    let path = out.join("gradcheck.csv");
    csv.write(&path)?;
    run.artifact(&path)?;
    run.finish()?;
    if rows.iter().all(|r| r.passed()) {
        Ok(0)
    } else {
        eprintln!("bws: error: numeric: gradient check exceeded relative error {TOLERANCE:e}");
        Ok(crate::EXIT_NUMERIC)
    }
}
