//! Training objectives.
//!
//! Each loss exists twice: a tape term over a batch (`*_term`), used for
//! training, and a detached single-image `f64` function that evaluates the
//! same formula directly. Batch terms average the per-image values.

use bws_tensor::{Real, Rng, Tensor, Var, LOG_FLOOR};

use crate::error::{Error, Result};
use crate::maps::{Image, LabelMap, ProbMap, ScribbleMap, UNLABELED};
use crate::networks::LatentGaussian;

/// Weights of the KL, reconstruction and CRF terms relative to pCE.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1e-3, beta: 1e-1, gamma: 1e-8 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("loss weight {name} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Unweighted values of the four objective terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub pce: f64,
    pub kl: f64,
    pub recon: f64,
    pub crf: f64,
}

impl LossComponents {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.pce + w.alpha * self.kl + w.beta * self.recon + w.gamma * self.crf
    }

    pub fn all_finite(&self) -> bool {
        [self.pce, self.kl, self.recon, self.crf].iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrfConfig {
    pub sigma_xy: f64,
    pub sigma_int: f64,
    /// Largest pixel count for which a dense kernel is built.
    pub max_pixels: usize,
    /// Evaluate on a random `crop × crop` window per image and step.
    pub crop: Option<usize>,
}

impl Default for CrfConfig {
    fn default() -> Self {
        Self { sigma_xy: 5.0, sigma_int: 0.1, max_pixels: 4096, crop: None }
    }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_xy > 0.0 && self.sigma_xy.is_finite()) || !(self.sigma_int > 0.0) {
            return Err(Error::config("CRF bandwidths must be positive"));
        }
        if self.crop == Some(0) {
            return Err(Error::config("CRF crop size must be positive"));
        }
        Ok(())
    }
}

/// Dense symmetric pairwise kernel with zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    n: usize,
    data: Vec<f64>,
}

impl KernelMatrix {
    /// Checked constructor: square, symmetric within 1e-12, entries in
    /// `[0, 1]`, zero diagonal.
    pub fn from_data(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::contract(format!("{} kernel entries for n = {n}", data.len())));
        }
        for a in 0..n {
            if data[a * n + a] != 0.0 {
                return Err(Error::contract(format!("kernel diagonal entry {a} is not zero")));
            }
            for b in 0..n {
                let v = data[a * n + b];
                if !(0.0..=1.0).contains(&v) || (v - data[b * n + a]).abs() > 1e-12 {
                    return Err(Error::contract(format!("kernel entry ({a}, {b}) = {v} breaks symmetry or [0, 1]")));
                }
            }
        }
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.n + b]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(vec![self.n, self.n], self.data.iter().map(|&v| T::of(v)).collect()).expect("n*n entries")
    }
}

/// `k_ab = exp(-|p_a - p_b|² / 2σ_xy² - |I_a - I_b|² / 2σ_int²)`, `k_aa = 0`.
pub fn gaussian_kernel(image: &Image, sigma_xy: f64, sigma_int: f64, max_pixels: usize) -> Result<KernelMatrix> {
    let n = image.pixels();
    if n > max_pixels {
        return Err(Error::Resource(format!(
            "dense CRF kernel over {n} pixels exceeds the cap of {max_pixels}; use a random crop (--crf-crop) to subsample"
        )));
    }
    if !(sigma_xy > 0.0) || !(sigma_int > 0.0) {
        return Err(Error::contract("kernel bandwidths must be positive"));
    }
    let mut data = vec![0.0; n * n];
    fill_kernel(image, sigma_xy, sigma_int, &mut data);
    Ok(KernelMatrix { n, data })
}

/// Writes the zero-diagonal bilateral kernel of `image` into `out` (`n × n`).
fn fill_kernel<T: Real>(image: &Image, sigma_xy: f64, sigma_int: f64, out: &mut [T]) {
    let (h, w, c) = (image.height, image.width, image.channels);
    let n = h * w;
    debug_assert_eq!(out.len(), n * n);
    let sxy = 1.0 / (2.0 * sigma_xy * sigma_xy);
    let sint = 1.0 / (2.0 * sigma_int * sigma_int);
    // Separable spatial factor indexed by |dy| and |dx|.
    let fy: Vec<f64> = (0..h).map(|d| (-((d * d) as f64) * sxy).exp()).collect();
    let fx: Vec<f64> = (0..w).map(|d| (-((d * d) as f64) * sxy).exp()).collect();
    let px = &image.data;
    for a in 0..n {
        let (ya, xa) = (a / w, a % w);
        let row = &mut out[a * n..(a + 1) * n];
        row[a] = T::zero();
        for yb in ya..h {
            let sy = fy[yb - ya];
            let start = if yb == ya { xa + 1 } else { 0 };
            for xb in start..w {
                let b = yb * w + xb;
                let d2 = if c == 1 {
                    let diff = px[a] - px[b];
                    diff * diff
                } else {
                    (0..c).map(|ch| px[ch * n + a] - px[ch * n + b]).map(|d| d * d).sum()
                };
                row[b] = T::of(sy * fx[xa.abs_diff(xb)]) * T::of(-d2 * sint).exp();
            }
        }
    }
    // Mirror the upper triangle in cache-sized blocks.
    const BLOCK: usize = 32;
    for i0 in (0..n).step_by(BLOCK) {
        for j0 in (0..=i0).step_by(BLOCK) {
            for i in i0..(i0 + BLOCK).min(n) {
                for j in j0..(j0 + BLOCK).min(i) {
                    out[i * n + j] = out[j * n + i];
                }
            }
        }
    }
}

/// [`gaussian_kernel`] built directly as an `n × n` tensor.
pub fn gaussian_kernel_tensor<T: Real>(image: &Image, sigma_xy: f64, sigma_int: f64, max_pixels: usize) -> Result<Tensor<T>> {
    let n = image.pixels();
    if n > max_pixels {
        return Err(Error::Resource(format!(
            "dense CRF kernel over {n} pixels exceeds the cap of {max_pixels}; use a random crop (--crf-crop) to subsample"
        )));
    }
    if !(sigma_xy > 0.0) || !(sigma_int > 0.0) {
        return Err(Error::contract("kernel bandwidths must be positive"));
    }
    let mut data = vec![T::zero(); n * n];
    fill_kernel(image, sigma_xy, sigma_int, &mut data);
    Ok(Tensor::new(vec![n, n], data).expect("n*n entries"))
}

fn check_prob_extent(probs: &ProbMap, h: usize, w: usize) -> Result<()> {
    if (probs.height, probs.width) != (h, w) {
        return Err(Error::contract(format!(
            "probability map is {}x{}, labels are {h}x{w}",
            probs.height, probs.width
        )));
    }
    Ok(())
}

/// `-Σ_{p ∈ Ωˢ} log ỹ_{y(p)}(p)`, optionally divided by `|Ωˢ|`.
pub fn pce_loss(probs: &ProbMap, scribbles: &ScribbleMap, normalize: bool) -> Result<f64> {
    check_prob_extent(probs, scribbles.height, scribbles.width)?;
    scribbles.validate(probs.classes)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, &c) in scribbles.data.iter().enumerate() {
        if c != UNLABELED {
            total -= probs.prob(c as usize, p).max(LOG_FLOOR).ln();
            count += 1;
        }
    }
    Ok(if normalize && count > 0 { total / count as f64 } else { total })
}

/// Closed-form `KL(q || N(0, I))`.
pub fn kl_loss(q: &LatentGaussian) -> f64 {
    0.5 * q.mean.iter().zip(&q.log_var).map(|(m, lv)| m * m + lv.exp() - lv - 1.0).sum::<f64>()
}

pub fn recon_loss(reconstruction: &Image, image: &Image) -> Result<f64> {
    if (reconstruction.channels, reconstruction.height, reconstruction.width) != (image.channels, image.height, image.width) {
        return Err(Error::contract("reconstruction and image extents differ"));
    }
    let n = image.data.len() as f64;
    Ok(reconstruction.data.iter().zip(&image.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// `Σ_c ŷ_cᵀ K (1 - ŷ_c)`.
pub fn dense_crf_loss(probs: &ProbMap, kernel: &KernelMatrix) -> Result<f64> {
    let n = probs.pixels();
    if kernel.n != n {
        return Err(Error::contract(format!("kernel dimension {} differs from pixel count {n}", kernel.n)));
    }
    let mut total = 0.0;
    for c in 0..probs.classes {
        let y = &probs.data[c * n..(c + 1) * n];
        for a in 0..n {
            let row = &kernel.data[a * n..(a + 1) * n];
            let ky: f64 = row.iter().zip(y).map(|(k, yb)| k * (1.0 - yb)).sum();
            total += y[a] * ky;
        }
    }
    Ok(total)
}

/// Mean over pixels of `-log y̌` at the true class. Labels must be dense.
pub fn ce_loss(probs: &ProbMap, labels: &LabelMap) -> Result<f64> {
    check_prob_extent(probs, labels.height, labels.width)?;
    labels.validate(probs.classes)?;
    let n = labels.data.len();
    let total: f64 = labels.data.iter().enumerate().map(|(p, &c)| -probs.prob(c as usize, p).max(LOG_FLOOR).ln()).sum();
    Ok(total / n as f64)
}

/// `L_pce + α L_kl + β L_recon + γ L_crf` from precomputed components.
pub fn elbo_objective(components: &LossComponents, weights: &LossWeights) -> f64 {
    components.total(weights)
}

fn batch_extent<T: Real>(probs: Var<'_, T>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    Ok(probs.value().dims4(op)?)
}

fn check_batch(got: usize, n: usize, what: &str) -> Result<()> {
    if got != n {
        return Err(Error::contract(format!("{what}: {got} maps for a batch of {n}")));
    }
    Ok(())
}

/// Batch mean of per-image pCE.
pub fn pce_term<'t, T: Real>(probs: Var<'t, T>, scribbles: &[&ScribbleMap], normalize: bool) -> Result<Var<'t, T>> {
    let (n, c, h, w) = batch_extent(probs, "pce")?;
    check_batch(scribbles.len(), n, "pce")?;
    let hw = h * w;
    let mut weights = vec![T::zero(); n * c * hw];
    for (i, s) in scribbles.iter().enumerate() {
        if !s.same_extent(h, w) {
            return Err(Error::contract(format!("scribble map {i} is {}x{}, batch is {h}x{w}", s.height, s.width)));
        }
        s.validate(c)?;
        let count = s.labeled_count();
        let scale = if normalize && count > 0 { 1.0 / count as f64 } else { 1.0 } / n as f64;
        for (p, &cls) in s.data.iter().enumerate() {
            if cls != UNLABELED {
                weights[(i * c + cls as usize) * hw + p] = T::of(-scale);
            }
        }
    }
    let wt = probs.tape().constant(Tensor::new(vec![n, c, h, w], weights)?);
    Ok(probs.log().mul(wt)?.sum())
}

/// Batch mean of `½ Σ (μ² + σ² - log σ² - 1)` for `[N, d]` inputs.
pub fn kl_term<'t, T: Real>(mean: Var<'t, T>, log_var: Var<'t, T>) -> Result<Var<'t, T>> {
    let n = mean.shape()[0];
    let inner = mean.mul(mean)?.add(log_var.exp())?.sub(log_var)?;
    let d = mean.value().len();
    Ok(inner.sum().add_scalar(T::of(-(d as f64))).scale(T::of(0.5 / n as f64)))
}

/// Mean squared error over all elements.
pub fn recon_term<'t, T: Real>(reconstruction: Var<'t, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(reconstruction.sq_diff_mean(image)?)
}

/// Batch mean of per-image dense CRF energy. With `cfg.crop`, each image
/// contributes a random window drawn from `rng`.
pub fn crf_term<'t, T: Real>(probs: Var<'t, T>, images: &[&Image], cfg: &CrfConfig, rng: &mut Rng) -> Result<Var<'t, T>> {
    let (n, c, h, w) = batch_extent(probs, "crf")?;
    check_batch(images.len(), n, "crf")?;
    let tape = probs.tape();
    let mut total: Option<Var<'t, T>> = None;
    for (i, img) in images.iter().enumerate() {
        if (img.height, img.width) != (h, w) {
            return Err(Error::contract(format!("image {i} is {}x{}, batch is {h}x{w}", img.height, img.width)));
        }
        let (wh, ww) = match cfg.crop {
            Some(s) => (s.min(h), s.min(w)),
            None => (h, w),
        };
        let (y0, x0) = if (wh, ww) == (h, w) { (0, 0) } else { (rng.below(h - wh + 1), rng.below(w - ww + 1)) };
        let kernel = gaussian_kernel_tensor::<T>(&img.window(y0, x0, wh, ww), cfg.sigma_xy, cfg.sigma_int, cfg.max_pixels)?;
        let mut y = probs.select_batch(i)?;
        if (wh, ww) != (h, w) {
            y = y.crop2d(y0, x0, wh, ww)?;
        }
        let y = y.reshape(&[c, wh * ww])?;
        let k = tape.constant(kernel);
        let energy = y.matmul(k)?.mul(y.scale(T::of(-1.0)).add_scalar(T::one()))?.sum();
        total = Some(match total {
            Some(t) => t.add(energy)?,
            None => energy,
        });
    }
    Ok(total.expect("non-empty batch").scale(T::of(1.0 / n as f64)))
}

/// Batch mean of per-image dense cross-entropy.
pub fn ce_term<'t, T: Real>(probs: Var<'t, T>, labels: &[&LabelMap]) -> Result<Var<'t, T>> {
    let (n, c, h, w) = batch_extent(probs, "ce")?;
    check_batch(labels.len(), n, "ce")?;
    let hw = h * w;
    let scale = T::of(-1.0 / (n * hw) as f64);
    let mut weights = vec![T::zero(); n * c * hw];
    for (i, l) in labels.iter().enumerate() {
        if !l.same_extent(h, w) {
            return Err(Error::contract(format!("label map {i} is {}x{}, batch is {h}x{w}", l.height, l.width)));
        }
        l.validate(c)?;
        for (p, &cls) in l.data.iter().enumerate() {
            weights[(i * c + cls as usize) * hw + p] = scale;
        }
    }
    let wt = probs.tape().constant(Tensor::new(vec![n, c, h, w], weights)?);
    Ok(probs.log().mul(wt)?.sum())
}

/// Tape terms of one stage-1 step; absent terms count as zero.
pub struct ElboTerms<'t, T: Real> {
    pub pce: Var<'t, T>,
    pub kl: Option<Var<'t, T>>,
    pub recon: Option<Var<'t, T>>,
    pub crf: Option<Var<'t, T>>,
}

/// Weighted total and the unweighted component values.
pub fn elbo_term<'t, T: Real>(terms: &ElboTerms<'t, T>, weights: &LossWeights) -> Result<(Var<'t, T>, LossComponents)> {
    let value = |v: &Option<Var<'t, T>>| v.map_or(0.0, |v| v.item().as_f64());
    let components = LossComponents {
        pce: terms.pce.item().as_f64(),
        kl: value(&terms.kl),
        recon: value(&terms.recon),
        crf: value(&terms.crf),
    };
    let mut total = terms.pce;
    for (term, weight) in [(terms.kl, weights.alpha), (terms.recon, weights.beta), (terms.crf, weights.gamma)] {
        if let Some(t) = term {
            total = total.add(t.scale(T::of(weight)))?;
        }
    }
    Ok((total, components))
}

#[cfg(test)]
mod tests {
    use super::*;
    use bws_tensor::Tape;

    fn probmap(classes: usize, h: usize, w: usize, v: &[f64]) -> ProbMap {
        ProbMap::new(classes, h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn pce_examples() {
        let s = ScribbleMap::from_vec(1, 2, vec![1, UNLABELED]).unwrap();
        let perfect = probmap(2, 1, 2, &[0.0, 0.5, 1.0, 0.5]);
        assert!(pce_loss(&perfect, &s, false).unwrap().abs() < 1e-15);
        let half = probmap(2, 1, 2, &[0.5, 0.5, 0.5, 0.5]);
        assert!((pce_loss(&half, &s, false).unwrap() - 0.693147).abs() < 1e-6);
        assert_eq!(pce_loss(&half, &ScribbleMap::unlabeled(1, 2), false).unwrap(), 0.0);
        let bad = ScribbleMap::from_vec(1, 2, vec![2, UNLABELED]).unwrap();
        assert!(pce_loss(&half, &bad, false).is_err());
    }

    #[test]
    fn pce_sum_versus_normalized() {
        let s = ScribbleMap::from_vec(1, 3, vec![0, 0, UNLABELED]).unwrap();
        let p = probmap(2, 1, 3, &[0.5, 0.25, 0.5, 0.5, 0.75, 0.5]);
        let sum = pce_loss(&p, &s, false).unwrap();
        assert!((sum - (2f64.ln() + 4f64.ln())).abs() < 1e-12);
        assert!((pce_loss(&p, &s, true).unwrap() - sum / 2.0).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let q = |m: Vec<f64>, v: Vec<f64>| LatentGaussian::new(m, v.into_iter().map(f64::ln).collect()).unwrap();
        assert_eq!(kl_loss(&q(vec![0.0; 3], vec![1.0; 3])), 0.0);
        assert!((kl_loss(&q(vec![1.0], vec![1.0])) - 0.5).abs() < 1e-15);
        let e = std::f64::consts::E;
        assert!((kl_loss(&q(vec![0.0, 0.0], vec![e, e])) - 0.718282).abs() < 1e-6);
    }

    #[test]
    fn recon_examples() {
        let x = Image::gray(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(recon_loss(&x, &x).unwrap(), 0.0);
        let shifted = Image::gray(1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(recon_loss(&shifted, &x).unwrap(), 1.0);
        let swapped = Image::gray(1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(recon_loss(&swapped, &x).unwrap(), 1.0);
    }

    #[test]
    fn kernel_examples() {
        let two = Image::gray(1, 6, vec![0.3, 0.0, 0.0, 0.0, 0.0, 0.3]).unwrap();
        let k = gaussian_kernel(&two, 5.0, 0.1, 4096).unwrap();
        assert!((k.get(0, 5) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((0..6).all(|a| k.get(a, a) == 0.0));
        let gap = Image::gray(1, 2, vec![0.0, 1.0]).unwrap();
        let wide = gaussian_kernel(&gap, 2.0, 1e12, 4096).unwrap();
        assert!((wide.get(0, 1) - (-1.0f64 / 8.0).exp()).abs() < 1e-15);
        let big = Image::gray(65, 64, vec![0.0; 65 * 64]).unwrap();
        assert!(matches!(gaussian_kernel(&big, 5.0, 0.1, 4096), Err(Error::Resource(_))));
    }

    #[test]
    fn crf_examples() {
        let single = gaussian_kernel(&Image::gray(1, 1, vec![0.4]).unwrap(), 5.0, 0.1, 10).unwrap();
        assert_eq!(dense_crf_loss(&probmap(2, 1, 1, &[0.3, 0.7]), &single).unwrap(), 0.0);
        let pair = gaussian_kernel(&Image::gray(1, 2, vec![0.1, 0.15]).unwrap(), 3.0, 0.2, 10).unwrap();
        let k = pair.get(0, 1);
        assert!((dense_crf_loss(&probmap(2, 1, 2, &[0.5; 4]), &pair).unwrap() - k).abs() < 1e-15);
        assert_eq!(dense_crf_loss(&probmap(2, 1, 2, &[1.0, 1.0, 0.0, 0.0]), &pair).unwrap(), 0.0);
    }

    #[test]
    fn ce_examples() {
        let labels = LabelMap::from_vec(1, 2, vec![0, 1]).unwrap();
        assert!(ce_loss(&probmap(2, 1, 2, &[1.0, 0.0, 0.0, 1.0]), &labels).unwrap() <= 1e-11);
        let uniform = probmap(4, 1, 2, &[0.25; 8]);
        assert!((ce_loss(&uniform, &labels).unwrap() - 1.386294).abs() < 1e-6);
        let with_hole = LabelMap::from_vec(1, 2, vec![0, UNLABELED]).unwrap();
        let err = ce_loss(&uniform, &with_hole).unwrap_err();
        assert!(err.to_string().contains("unlabeled"), "{err}");
    }

    #[test]
    fn elbo_degenerate_weights() {
        let c = LossComponents { pce: 2.0, kl: 3.0, recon: 5.0, crf: 7.0 };
        let zero = LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0 };
        assert_eq!(elbo_objective(&c, &zero), 2.0);
        assert_eq!(elbo_objective(&LossComponents::default(), &LossWeights::default()), 0.0);
        assert_eq!(LossWeights::default(), LossWeights { alpha: 1e-3, beta: 1e-1, gamma: 1e-8 });
        assert!(LossWeights { alpha: -1.0, ..zero }.validate().is_err());
    }

    #[test]
    fn tape_terms_match_detached_values() {
        let mut rng = Rng::new(21);
        let (n, c, h, w) = (2, 3, 4, 5);
        let raw: Tensor = rng.normal_tensor(&[n, c, h, w]);
        let tape = Tape::new();
        let probs = tape.constant(raw).softmax_channels().unwrap();
        let maps = crate::networks::tensor_to_probmaps(&probs.value()).unwrap();
        let scribbles: Vec<ScribbleMap> = (0..n)
            .map(|_| {
                let data = (0..h * w).map(|_| if rng.bernoulli(0.4) { rng.below(c) as u8 } else { UNLABELED }).collect();
                ScribbleMap::from_vec(h, w, data).unwrap()
            })
            .collect();
        let labels: Vec<LabelMap> =
            (0..n).map(|_| LabelMap::from_vec(h, w, (0..h * w).map(|_| rng.below(c) as u8).collect()).unwrap()).collect();
        let images: Vec<Image> = (0..n).map(|_| Image::gray(h, w, (0..h * w).map(|_| rng.uniform()).collect()).unwrap()).collect();
        let mean = |f: &dyn Fn(usize) -> f64| (0..n).map(f).sum::<f64>() / n as f64;

        for normalize in [false, true] {
            let got = pce_term(probs, &scribbles.iter().collect::<Vec<_>>(), normalize).unwrap().item();
            let want = mean(&|i| pce_loss(&maps[i], &scribbles[i], normalize).unwrap());
            assert!((got - want).abs() < 1e-12);
        }
        let got = ce_term(probs, &labels.iter().collect::<Vec<_>>()).unwrap().item();
        assert!((got - mean(&|i| ce_loss(&maps[i], &labels[i]).unwrap())).abs() < 1e-12);

        let cfg = CrfConfig { sigma_xy: 2.0, sigma_int: 0.3, ..Default::default() };
        let got = crf_term(probs, &images.iter().collect::<Vec<_>>(), &cfg, &mut rng).unwrap().item();
        let want = mean(&|i| dense_crf_loss(&maps[i], &gaussian_kernel(&images[i], 2.0, 0.3, 4096).unwrap()).unwrap());
        assert!((got - want).abs() < 1e-12);

        let m: Tensor = rng.normal_tensor(&[n, 4]);
        let lv: Tensor = rng.normal_tensor(&[n, 4]);
        let got = kl_term(tape.constant(m.clone()), tape.constant(lv.clone())).unwrap().item();
        let want = mean(&|i| {
            kl_loss(&LatentGaussian::new(m.data()[i * 4..i * 4 + 4].to_vec(), lv.data()[i * 4..i * 4 + 4].to_vec()).unwrap())
        });
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn crop_window_stays_inside_the_image() {
        let mut rng = Rng::new(2);
        let tape = Tape::new();
        let probs = tape.constant(Tensor::full(&[1, 2, 12, 10], 0.5));
        let img = Image::gray(12, 10, vec![0.2; 120]).unwrap();
        let cfg = CrfConfig { crop: Some(4), ..Default::default() };
        let small = crf_term(probs, &[&img], &cfg, &mut rng).unwrap().item();
        let direct = dense_crf_loss(
            &ProbMap::new(2, 4, 4, vec![0.5; 32]).unwrap(),
            &gaussian_kernel(&Image::gray(4, 4, vec![0.2; 16]).unwrap(), 5.0, 0.1, 4096).unwrap(),
        )
        .unwrap();
        assert!((small - direct).abs() < 1e-12);
    }
}
