use bws_core::maps::{Image, ProbMap};
use bws_tensor::Rng;

pub fn random_probs(rng: &mut Rng, classes: usize, h: usize, w: usize) -> ProbMap {
    let n = h * w;
    let mut data = vec![0.0; classes * n];
    for p in 0..n {
        let raw: Vec<f64> = (0..classes).map(|_| rng.uniform() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        for c in 0..classes {
            data[c * n + p] = raw[c] / s;
        }
    }
    ProbMap::new(classes, h, w, data).unwrap()
}

pub fn brute_kernel(img: &Image, sxy: f64, sint: f64) -> Vec<Vec<f64>> {
    let (h, w) = (img.height, img.width);
    let n = h * w;
    let mut k = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let dy = (a / w) as f64 - (b / w) as f64;
            let dx = (a % w) as f64 - (b % w) as f64;
            let di = img.data[a] - img.data[b];
            k[a][b] = (-(dy * dy + dx * dx) / (2.0 * sxy * sxy) - di * di / (2.0 * sint * sint)).exp();
        }
    }
    k
}

pub fn brute_crf(p: &ProbMap, k: &[Vec<f64>]) -> f64 {
    let n = p.pixels();
    let mut total = 0.0;
    for c in 0..p.classes {
        for a in 0..n {
            for b in 0..n {
                total += p.prob(c, a) * k[a][b] * (1.0 - p.prob(c, b));
            }
        }
    }
    total
}

pub fn instance(rng: &mut Rng) -> (Image, ProbMap) {
    let h = rng.range_inclusive(1, 8);
    let w = rng.range_inclusive(1, 64 / h);
    let c = rng.range_inclusive(2, 5);
    let img = Image::gray(h, w, (0..h * w).map(|_| rng.uniform()).collect()).unwrap();
    (img, random_probs(rng, c, h, w))
}
