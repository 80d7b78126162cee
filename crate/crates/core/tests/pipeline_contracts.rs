use std::sync::OnceLock;

use bws_core::dataio::synthetic::{generate_synthetic, SyntheticDataset, SyntheticSpec};
use bws_core::losses::CrfConfig;
use bws_core::maps::{Image, LabelMap, ScribbleMap};
use bws_core::networks::GeneratorParams;
use bws_core::pipeline::*;

const CLASSES: usize = 4;

fn data() -> &'static SyntheticDataset {
    static DATA: OnceLock<SyntheticDataset> = OnceLock::new();
    DATA.get_or_init(|| generate_synthetic(&SyntheticSpec { train: 8, val: 0, test: 0, seed: 5, ..Default::default() }, 1).unwrap())
}

fn pairs() -> Vec<(&'static Image, &'static ScribbleMap)> {
    data().train.iter().map(|s| (&s.image, &s.scribbles)).collect()
}

fn images() -> Vec<&'static Image> {
    data().train.iter().map(|s| &s.image).collect()
}

/// Default hyperparameters with a cropped CRF window to keep steps cheap.
fn base_config() -> TrainConfig {
    TrainConfig { precision: Precision::F32, crf: CrfConfig { crop: Some(16), ..Default::default() }, ..Default::default() }
}

/// One full-length stage-1 run on the toy set, shared by the tests below.
fn trained() -> &'static (GeneratorParams<f32>, Vec<Stage1Row>) {
    static RUN: OnceLock<(GeneratorParams<f32>, Vec<Stage1Row>)> = OnceLock::new();
    RUN.get_or_init(|| train_stage1::<f32>(&pairs(), CLASSES, &base_config()).unwrap())
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cfg = TrainConfig { lr: 0.0, epochs: 1, ..base_config() };
    let one = &pairs()[..1];
    let (gen, _) = train_stage1::<f64>(one, CLASSES, &cfg).unwrap();
    let init = init_generator::<f64>(CLASSES, 64, 64, &cfg).unwrap();
    assert_eq!(gen.store.to_checkpoint_bytes(), init.store.to_checkpoint_bytes());

    let labels: Vec<&LabelMap> = data().train.iter().map(|s| &s.labels).collect();
    let (seg, _) = train_stage2::<f64>(&images(), Supervision::Dense(&labels), CLASSES, &cfg).unwrap();
    assert_eq!(seg.store.to_checkpoint_bytes(), init_segmenter::<f64>(CLASSES, &cfg).unwrap().store.to_checkpoint_bytes());
}

#[test]
fn hundred_epochs_halve_partial_cross_entropy() {
    let (_, log) = trained();
    let pce = epoch_means(log, |r| r.epoch, |r| r.components.pce);
    let total = epoch_means(log, |r| r.epoch, |r| r.total);
    assert_eq!(pce.len(), 100);
    assert!(pce[99] < 0.5 * pce[0], "pCE {} -> {}", pce[0], pce[99]);
    assert!(total[99] <= total[0]);
}

#[test]
fn pseudo_labels_stabilise_as_n_grows() {
    let (gen, _) = trained();
    let a = pseudo_label_set(gen, &pairs(), 32, 1, false, 2).unwrap();
    let b = pseudo_label_set(gen, &pairs(), 64, 2, false, 2).unwrap();
    let (mut differ, mut total) = (0usize, 0usize);
    for (x, y) in a.iter().zip(&b) {
        differ += x.data.iter().zip(&y.data).filter(|(p, q)| p != q).count();
        total += x.len();
    }
    assert!((differ as f64) < 0.02 * total as f64, "{differ} of {total} pixels differ");
    for (l, s) in a.iter().zip(&data().train) {
        for (p, &v) in s.scribbles.data.iter().enumerate() {
            if v != bws_core::UNLABELED {
                assert_eq!(l.data[p], v);
            }
        }
    }
}

#[test]
fn stage2_cross_entropy_trends_down() {
    let cfg = TrainConfig { epochs: 12, lr: 1e-3, ..base_config() };
    let labels: Vec<&LabelMap> = data().train.iter().map(|s| &s.labels).collect();
    let (_, log) = train_stage2::<f32>(&images(), Supervision::Dense(&labels), CLASSES, &cfg).unwrap();
    let ce = epoch_means(&log, |r| r.epoch, |r| r.loss);
    let windows: Vec<f64> = ce.chunks(3).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for w in windows.windows(2) {
        assert!(w[1] < w[0], "window means {windows:?}");
    }
}
