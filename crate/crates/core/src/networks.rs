//! The segmentation backbone and the latent-variable generator.
//!
//! All networks are small U-Net variants built from 3×3 double-convolution
//! blocks, 2×2 max pooling and nearest-neighbour upsampling.
//!
//! * [`SegParams`]: full U-Net with dropout after every decoder block.
//! * [`GeneratorParams`]: four sub-networks sharing one latent `z`.
//!   `e1` maps an image to a diagonal Gaussian `q(z|x)`; `d1` maps `z`
//!   back to an image through a dense projection onto the bottleneck grid;
//!   `e2` extracts U-Net encoder features; `d2` decodes those features with
//!   `z` broadcast over the bottleneck plane and concatenated as extra
//!   channels, producing per-pixel class probabilities.

use bws_tensor::{Real, Rng, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::maps::{Image, ProbMap};
use crate::params::{init_tensor, Bound, Init, ParamId, ParamStore};

/// Lower bound applied to `log σ²` before sampling.
pub const LOG_VAR_FLOOR: f64 = -20.0;

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub base_width: usize,
    /// Number of pooling stages.
    pub depth: usize,
    pub dropout: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { in_channels: 1, classes: 4, base_width: 8, depth: 2, dropout: 0.1 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::config("depth must be at least 1"));
        }
        if self.base_width < 4 {
            return Err(Error::config("base width must be at least 4"));
        }
        if self.classes < 2 {
            return Err(Error::config("class count must be at least 2"));
        }
        if self.in_channels < 1 {
            return Err(Error::config("input channel count must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn check_extent(&self, height: usize, width: usize) -> Result<()> {
        let m = 1 << self.depth;
        if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
            return Err(Error::contract(format!(
                "input extent {height}x{width} is not a positive multiple of 2^depth = {m}"
            )));
        }
        Ok(())
    }

    fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, cin: usize, cout: usize, k: usize, init: Init) -> Self {
        let w = store.add(format!("{name}.weight"), init_tensor(&[cout, cin, k, k], cin * k * k, init, rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b }
    }

    fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.conv2d(p[self.w], p[self.b])?)
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, fin: usize, fout: usize, init: Init) -> Self {
        let w = store.add(format!("{name}.weight"), init_tensor(&[fout, fin], fin, init, rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fout]));
        Self { w, b }
    }

    fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.linear(p[self.w], p[self.b])?)
    }
}

/// Fixed input affine mapping intensities in `[0, 1]` onto `[-2, 2]`.
const INPUT_CENTER: f64 = 0.5;
const INPUT_SCALE: f64 = 4.0;

const KAIMING: Init = Init::FanIn { gain: 2.0 };
const LECUN: Init = Init::FanIn { gain: 1.0 };

#[derive(Clone, Debug)]
struct DoubleConv {
    first: Conv,
    second: Conv,
}

impl DoubleConv {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, cin: usize, cout: usize) -> Self {
        let first = Conv::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, KAIMING);
        let second = Conv::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, KAIMING);
        Self { first, second }
    }

    fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.first.forward(p, x)?.relu();
        Ok(self.second.forward(p, h)?.relu())
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    blocks: Vec<DoubleConv>,
}

impl Encoder {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut Rng, prefix: &str, cfg: &UNetConfig) -> Self {
        let mut blocks = Vec::with_capacity(cfg.depth + 1);
        let mut cin = cfg.in_channels;
        for level in 0..=cfg.depth {
            let name = format!("{prefix}enc{level}");
            blocks.push(DoubleConv::new(store, rng, &name, cin, cfg.width_at(level)));
            cin = cfg.width_at(level);
        }
        Self { blocks }
    }

    /// Returns the pre-pooling activation of every level above the
    /// bottleneck, then the bottleneck itself.
    fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<(Vec<Var<'t, T>>, Var<'t, T>)> {
        let mut skips = Vec::with_capacity(self.blocks.len() - 1);
        let mut h = x.add_scalar(T::of(-INPUT_CENTER)).scale(T::of(INPUT_SCALE));
        for (level, block) in self.blocks.iter().enumerate() {
            h = block.forward(p, h)?;
            if level + 1 < self.blocks.len() {
                skips.push(h);
                h = h.max_pool2()?;
            }
        }
        Ok((skips, h))
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    /// Ordered from the level just above the bottleneck down to level 0.
    blocks: Vec<DoubleConv>,
    head: Conv,
}

impl Decoder {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        cfg: &UNetConfig,
        with_skips: bool,
        out_channels: usize,
        head_init: Init,
    ) -> Self {
        let blocks = (0..cfg.depth)
            .rev()
            .map(|level| {
                let cin = cfg.width_at(level + 1) + if with_skips { cfg.width_at(level) } else { 0 };
                DoubleConv::new(store, rng, &format!("{prefix}dec{level}"), cin, cfg.width_at(level))
            })
            .collect();
        let head = Conv::new(store, rng, &format!("{prefix}head"), cfg.base_width, out_channels, 1, head_init);
        Self { blocks, head }
    }

    fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        bottom: Var<'t, T>,
        skips: Option<&[Var<'t, T>]>,
        mut dropout: Option<(f64, &mut Rng)>,
    ) -> Result<Var<'t, T>> {
        let tape = bottom.tape();
        let mut h = bottom;
        for (i, block) in self.blocks.iter().enumerate() {
            h = h.upsample2()?;
            if let Some(skips) = skips {
                let skip = skips[skips.len() - 1 - i];
                h = tape.concat_channels(&[h, skip])?;
            }
            h = block.forward(p, h)?;
            if let Some((rate, rng)) = dropout.as_mut() {
                if *rate > 0.0 {
                    h = h.dropout(*rate, rng)?;
                }
            }
        }
        self.head.forward(p, h)
    }
}

/// Stack images into an `[N, C, H, W]` tensor.
pub fn images_to_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::contract("empty image batch"))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if (img.channels, img.height, img.width) != (first.channels, first.height, first.width) {
            return Err(Error::contract(format!(
                "batch mixes extents {}x{}x{} and {}x{}x{}",
                first.channels, first.height, first.width, img.channels, img.height, img.width
            )));
        }
        data.extend(img.data.iter().map(|&v| T::of(v)));
    }
    Ok(Tensor::new(vec![images.len(), first.channels, first.height, first.width], data)?)
}

/// Split an `[N, C, H, W]` probability tensor into per-sample maps,
/// renormalising each pixel in `f64` so reduced-precision outputs still sum
/// to one within `1e-9`.
pub fn tensor_to_probmaps<T: Real>(t: &Tensor<T>) -> Result<Vec<ProbMap>> {
    let (n, c, h, w) = t.dims4("probmap")?;
    let hw = h * w;
    let per = c * hw;
    (0..n)
        .map(|i| {
            let mut data: Vec<f64> = t.data()[i * per..(i + 1) * per].iter().map(|v| v.as_f64()).collect();
            for p in 0..hw {
                let total: f64 = (0..c).map(|k| data[k * hw + p]).sum();
                if total > 0.0 && total != 1.0 {
                    (0..c).for_each(|k| data[k * hw + p] /= total);
                }
            }
            ProbMap::new(c, h, w, data)
        })
        .collect()
}

fn check_input(cfg: &UNetConfig, image: &Image) -> Result<()> {
    if image.channels != cfg.in_channels {
        return Err(Error::contract(format!(
            "image has {} channels, network expects {}",
            image.channels, cfg.in_channels
        )));
    }
    cfg.check_extent(image.height, image.width)
}

#[derive(Clone, Debug)]
struct UNet {
    encoder: Encoder,
    decoder: Decoder,
}

/// Parameters and layout of the segmentation backbone.
#[derive(Clone, Debug)]
pub struct SegParams<T: Real = f64> {
    config: UNetConfig,
    net: UNet,
    pub store: ParamStore<T>,
}

impl<T: Real> SegParams<T> {
    pub fn init(config: UNetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, rng, "", &config);
        let decoder = Decoder::new(&mut store, rng, "", &config, true, config.classes, Init::Zeros);
        Ok(Self { config, net: UNet { encoder, decoder }, store })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn set_dropout(&mut self, rate: f64) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.dropout = rate;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    /// Rebuild from a stored parameter table, recovering the architecture
    /// from tensor names and shapes.
    pub fn from_store(store: ParamStore<T>, dropout: f64) -> Result<Self> {
        let first = store.by_name("enc0.conv1.weight").ok_or_else(|| Error::contract("missing enc0.conv1.weight"))?;
        let head = store.by_name("head.weight").ok_or_else(|| Error::contract("missing head.weight"))?;
        let depth = (0..).take_while(|l| store.by_name(&format!("enc{l}.conv1.weight")).is_some()).count() - 1;
        let config = UNetConfig {
            in_channels: first.shape()[1],
            classes: head.shape()[0],
            base_width: first.shape()[0],
            depth,
            dropout,
        };
        let mut fresh = Self::init(config, &mut Rng::new(0))?;
        fresh.store.load_from(&store)?;
        Ok(fresh)
    }

    /// Class probabilities `[N, classes, H, W]`. Dropout is applied after
    /// each decoder block when `dropout_rng` is given.
    pub fn forward<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>, dropout_rng: Option<&mut Rng>) -> Result<Var<'t, T>> {
        let (skips, bottom) = self.net.encoder.forward(p, x)?;
        let dropout = dropout_rng.map(|rng| (self.config.dropout, rng));
        let logits = self.net.decoder.forward(p, bottom, Some(&skips), dropout)?;
        Ok(logits.softmax_channels()?)
    }

    /// Probability map for one image on a private tape.
    pub fn predict(&self, image: &Image, dropout_active: bool, rng: &mut Rng) -> Result<ProbMap> {
        Ok(self.predict_batch(&[image], dropout_active, rng)?.remove(0))
    }

    pub fn predict_batch(&self, images: &[&Image], dropout_active: bool, rng: &mut Rng) -> Result<Vec<ProbMap>> {
        for img in images {
            check_input(&self.config, img)?;
        }
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let x = tape.constant(images_to_tensor::<T>(images)?);
        let y = self.forward(&p, x, dropout_active.then_some(rng))?;
        tensor_to_probmaps(&y.value())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    /// Shared backbone shape; `dropout` is ignored and reset to zero.
    pub unet: UNetConfig,
    pub latent_dim: usize,
    pub height: usize,
    pub width: usize,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.unet.check_extent(self.height, self.width)?;
        if self.latent_dim == 0 {
            return Err(Error::config("latent dimension must be positive"));
        }
        Ok(())
    }

    fn bottleneck(&self) -> (usize, usize, usize) {
        let d = self.unet.depth;
        (self.unet.width_at(d), self.height >> d, self.width >> d)
    }
}

/// Diagonal Gaussian `q(z|x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::contract(format!(
                "latent mean has dimension {}, log-variance {}",
                mean.len(),
                log_var.len()
            )));
        }
        Ok(Self { mean, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }

    /// `z = μ + σ ⊙ ε` for a given standard-normal draw `ε`.
    pub fn sample_with(&self, eps: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv.max(LOG_VAR_FLOOR)).exp() * e)
            .collect()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.dim()).map(|_| rng.normal()).collect();
        self.sample_with(&eps)
    }
}

/// Reparameterised draw `z = μ + exp(½ max(log σ², -20)) ⊙ ε`; `ε` is a constant.
pub fn sample_z<'t, T: Real>(mean: Var<'t, T>, log_var: Var<'t, T>, eps: &Tensor<T>) -> Result<Var<'t, T>> {
    let tape = mean.tape();
    let std = log_var.clamp_min(T::of(LOG_VAR_FLOOR)).scale(T::of(0.5)).exp();
    let noise = tape.constant(eps.clone());
    Ok(mean.add(std.mul(noise)?)?)
}

#[derive(Clone, Debug)]
struct Generator {
    e1: Encoder,
    mean_head: Dense,
    log_var_head: Dense,
    d1_proj: Dense,
    d1: Decoder,
    e2: Encoder,
    fuse: Conv,
    d2: Decoder,
}

/// `e2` activations consumed by `d2`.
pub struct E2Features<'t, T: Real> {
    skips: Vec<Var<'t, T>>,
    bottom: Var<'t, T>,
}

/// Everything one stage-1 forward pass produces.
pub struct GeneratorOutputs<'t, T: Real> {
    pub mean: Var<'t, T>,
    pub log_var: Var<'t, T>,
    pub z: Var<'t, T>,
    /// `None` when reconstruction was skipped.
    pub reconstruction: Option<Var<'t, T>>,
    pub probs: Var<'t, T>,
}

const EXTENT_KEY: &str = "meta.input_extent";

/// Parameters and layout of `e1`, `d1`, `e2`, `d2`.
#[derive(Clone, Debug)]
pub struct GeneratorParams<T: Real = f64> {
    config: GeneratorConfig,
    net: Generator,
    pub store: ParamStore<T>,
}

impl<T: Real> GeneratorParams<T> {
    pub fn init(mut config: GeneratorConfig, rng: &mut Rng) -> Result<Self> {
        config.unet.dropout = 0.0;
        config.validate()?;
        let u = &config.unet;
        let (bc, bh, bw) = config.bottleneck();
        let flat = bc * bh * bw;
        let d = config.latent_dim;
        let mut s = ParamStore::new();
        let e1 = Encoder::new(&mut s, rng, "e1.", u);
        let mean_head = Dense::new(&mut s, rng, "e1.mean", flat, d, LECUN);
        let log_var_head = Dense::new(&mut s, rng, "e1.log_var", flat, d, Init::Zeros);
        let d1_proj = Dense::new(&mut s, rng, "d1.proj", d, flat, KAIMING);
        let d1 = Decoder::new(&mut s, rng, "d1.", u, false, u.in_channels, LECUN);
        let e2 = Encoder::new(&mut s, rng, "e2.", u);
        let fuse = Conv::new(&mut s, rng, "d2.fuse", bc + d, bc, 3, KAIMING);
        let d2 = Decoder::new(&mut s, rng, "d2.", u, true, u.classes, Init::Zeros);
        let net = Generator { e1, mean_head, log_var_head, d1_proj, d1, e2, fuse, d2 };
        Ok(Self { config, net, store: s })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Checkpoint bytes; the input extent is stored as an extra
    /// `meta.input_extent` entry so the layout can be rebuilt.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut s = self.store.clone();
        s.add(EXTENT_KEY, Tensor::from_f64(vec![2], &[self.config.height as f64, self.config.width as f64]).expect("2 values"));
        s.to_checkpoint_bytes()
    }

    pub fn from_store(mut store: ParamStore<T>) -> Result<Self> {
        let missing = |n: &str| Error::contract(format!("generator checkpoint is missing {n}"));
        let extent = store.by_name(EXTENT_KEY).ok_or_else(|| missing(EXTENT_KEY))?.clone();
        let first = store.by_name("e1.enc0.conv1.weight").ok_or_else(|| missing("e1.enc0.conv1.weight"))?;
        let head = store.by_name("d2.head.weight").ok_or_else(|| missing("d2.head.weight"))?;
        let mean = store.by_name("e1.mean.weight").ok_or_else(|| missing("e1.mean.weight"))?;
        let depth = (0..).take_while(|l| store.by_name(&format!("e1.enc{l}.conv1.weight")).is_some()).count() - 1;
        let config = GeneratorConfig {
            unet: UNetConfig {
                in_channels: first.shape()[1],
                classes: head.shape()[0],
                base_width: first.shape()[0],
                depth,
                dropout: 0.0,
            },
            latent_dim: mean.shape()[0],
            height: extent.data()[0].as_f64() as usize,
            width: extent.data()[1].as_f64() as usize,
        };
        let mut trimmed = ParamStore::new();
        for (name, t) in store.iter() {
            if name != EXTENT_KEY {
                trimmed.add(name, t.clone());
            }
        }
        store = trimmed;
        let mut fresh = Self::init(config, &mut Rng::new(0))?;
        fresh.store.load_from(&store)?;
        Ok(fresh)
    }

    fn check(&self, image: &Image) -> Result<()> {
        check_input(&self.config.unet, image)?;
        if (image.height, image.width) != (self.config.height, self.config.width) {
            return Err(Error::contract(format!(
                "generator was built for {}x{} inputs, got {}x{}",
                self.config.height, self.config.width, image.height, image.width
            )));
        }
        Ok(())
    }

    /// `e1`: image batch → (mean, log-variance), each `[N, d]`.
    pub fn encode_e1<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (_, bottom) = self.net.e1.forward(p, x)?;
        let n = bottom.shape()[0];
        let flat = bottom.reshape(&[n, bottom.value().len() / n])?;
        Ok((self.net.mean_head.forward(p, flat)?, self.net.log_var_head.forward(p, flat)?))
    }

    /// `d1`: latent `[N, d]` → reconstruction `[N, C_in, H, W]`.
    pub fn decode_d1<'t>(&self, p: &Bound<'t, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let (bc, bh, bw) = self.config.bottleneck();
        let n = z.shape()[0];
        let plane = self.net.d1_proj.forward(p, z)?.relu().reshape(&[n, bc, bh, bw])?;
        self.net.d1.forward(p, plane, None, None)
    }

    pub fn encode_e2<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<E2Features<'t, T>> {
        let (skips, bottom) = self.net.e2.forward(p, x)?;
        Ok(E2Features { skips, bottom })
    }

    /// `d2`: features and latent → class probabilities `[N, classes, H, W]`.
    pub fn decode_d2<'t>(&self, p: &Bound<'t, T>, feats: &E2Features<'t, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = feats.bottom.shape();
        if z.shape() != [shape[0], self.config.latent_dim] {
            return Err(Error::contract(format!(
                "latent batch {:?} does not match features {:?} with d = {}",
                z.shape(),
                shape,
                self.config.latent_dim
            )));
        }
        let zplane = z.broadcast_spatial(shape[2], shape[3])?;
        let joined = z.tape().concat_channels(&[feats.bottom, zplane])?;
        let fused = self.net.fuse.forward(p, joined)?.relu();
        let logits = self.net.d2.forward(p, fused, Some(&feats.skips), None)?;
        Ok(logits.softmax_channels()?)
    }

    /// Full stage-1 pass with a caller-supplied `ε` of shape `[N, d]`.
    pub fn forward<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>, eps: &Tensor<T>, reconstruct: bool) -> Result<GeneratorOutputs<'t, T>> {
        let (mean, log_var) = self.encode_e1(p, x)?;
        let z = sample_z(mean, log_var, eps)?;
        let reconstruction = if reconstruct { Some(self.decode_d1(p, z)?) } else { None };
        let feats = self.encode_e2(p, x)?;
        let probs = self.decode_d2(p, &feats, z)?;
        Ok(GeneratorOutputs { mean, log_var, z, reconstruction, probs })
    }

    /// `q(z|x)` for one image.
    pub fn encode(&self, image: &Image) -> Result<LatentGaussian> {
        self.check(image)?;
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let x = tape.constant(images_to_tensor::<T>(&[image])?);
        let (m, lv) = self.encode_e1(&p, x)?;
        let f = |v: Var<'_, T>| v.value().data().iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        LatentGaussian::new(f(m), f(lv))
    }

    pub fn reconstruct(&self, z: &[f64]) -> Result<Image> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let zt = tape.constant(self.latent_batch(&[z])?);
        let out = self.decode_d1(&p, zt)?.value();
        let (_, c, h, w) = out.dims4("reconstruct")?;
        Image::new(c, h, w, out.data().iter().map(|v| v.as_f64()).collect())
    }

    /// `d2(e2(x), z_i)` for every latent in `zs`.
    pub fn label_probs(&self, image: &Image, zs: &[Vec<f64>]) -> Result<Vec<ProbMap>> {
        self.check(image)?;
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let copies: Vec<&Image> = vec![image; zs.len()];
        let x = tape.constant(images_to_tensor::<T>(&copies)?);
        let feats = self.encode_e2(&p, x)?;
        let refs: Vec<&[f64]> = zs.iter().map(Vec::as_slice).collect();
        let z = tape.constant(self.latent_batch(&refs)?);
        tensor_to_probmaps(&self.decode_d2(&p, &feats, z)?.value())
    }

    fn latent_batch(&self, zs: &[&[f64]]) -> Result<Tensor<T>> {
        let d = self.config.latent_dim;
        if zs.is_empty() || zs.iter().any(|z| z.len() != d) {
            return Err(Error::contract(format!("latent vectors must be non-empty with dimension {d}")));
        }
        Ok(Tensor::new(vec![zs.len(), d], zs.iter().flat_map(|z| z.iter().map(|&v| T::of(v))).collect())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen_cfg(size: usize, d: usize) -> GeneratorConfig {
        GeneratorConfig { unet: UNetConfig::default(), latent_dim: d, height: size, width: size }
    }

    fn test_image(rng: &mut Rng, size: usize) -> Image {
        Image::gray(size, size, (0..size * size).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn config_invariants() {
        assert!(UNetConfig::default().validate().is_ok());
        assert!(UNetConfig { depth: 0, ..Default::default() }.validate().is_err());
        assert!(UNetConfig { base_width: 3, ..Default::default() }.validate().is_err());
        assert!(UNetConfig { classes: 1, ..Default::default() }.validate().is_err());
        assert!(UNetConfig::default().check_extent(64, 62).is_err());
        assert!(UNetConfig::default().check_extent(64, 32).is_ok());
    }

    #[test]
    fn encoder_outputs_have_latent_dimension() {
        let mut rng = Rng::new(1);
        let g = GeneratorParams::<f64>::init(gen_cfg(64, 16), &mut rng).unwrap();
        let x = test_image(&mut rng, 64);
        let q = g.encode(&x).unwrap();
        assert_eq!(q.dim(), 16);
        assert!(q.mean.iter().chain(&q.log_var).all(|v| v.is_finite()));
        assert_eq!(g.encode(&x).unwrap(), q);
    }

    #[test]
    fn decoders_have_expected_shapes() {
        let mut rng = Rng::new(2);
        let g = GeneratorParams::<f64>::init(gen_cfg(64, 16), &mut rng).unwrap();
        let z: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let xr = g.reconstruct(&z).unwrap();
        assert_eq!((xr.channels, xr.height, xr.width), (1, 64, 64));
        assert_eq!(g.reconstruct(&z).unwrap(), xr);
        let x = test_image(&mut rng, 64);
        let maps = g.label_probs(&x, &[z.clone()]).unwrap();
        assert_eq!((maps[0].classes, maps[0].height, maps[0].width), (4, 64, 64));
        assert!(maps[0].simplex_deviation() <= 1e-9);
    }

    #[test]
    fn reparameterisation_examples() {
        let q = LatentGaussian::new(vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(q.sample_with(&[1.0, -1.0]), vec![1.0, -1.0]);
        let degenerate = LatentGaussian::new(vec![0.3, -2.0], vec![-1e9, -50.0]).unwrap();
        let z = degenerate.sample_with(&[3.0, -3.0]);
        assert!((z[0] - 0.3).abs() < 1e-3 && (z[1] + 2.0).abs() < 1e-3);
    }

    #[test]
    fn reparameterised_sample_mean() {
        let q = LatentGaussian::new(vec![1.5, -0.5], vec![0.4f64.ln(), 2.0f64.ln()]).unwrap();
        let mut rng = Rng::new(11);
        let n = 100_000;
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let z = q.sample(&mut rng);
            acc[0] += z[0];
            acc[1] += z[1];
        }
        for i in 0..2 {
            let sd = q.variance()[i].sqrt();
            assert!((acc[i] / n as f64 - q.mean[i]).abs() < 3.0 * sd / (n as f64).sqrt());
        }
    }

    #[test]
    fn untrained_segmenter_is_uniform_and_dropout_free_when_rate_zero() {
        let mut rng = Rng::new(3);
        let cfg = UNetConfig { dropout: 0.0, ..Default::default() };
        let seg = SegParams::<f64>::init(cfg, &mut rng).unwrap();
        let x = test_image(&mut rng, 16);
        let p = seg.predict(&x, false, &mut rng).unwrap();
        assert!(p.data.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let mut perturbed = seg.clone();
        let head = perturbed.store.id_of("head.weight").unwrap();
        perturbed.store.get_mut(head).data_mut().iter_mut().for_each(|v| *v = 0.3);
        let a = perturbed.predict(&x, false, &mut Rng::new(5)).unwrap();
        let b = perturbed.predict(&x, true, &mut Rng::new(6)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeded_dropout_is_reproducible() {
        let mut rng = Rng::new(3);
        let mut seg = SegParams::<f64>::init(UNetConfig { dropout: 0.5, ..Default::default() }, &mut rng).unwrap();
        let head = seg.store.id_of("head.weight").unwrap();
        let w = rng.normal_tensor(&[4, 8, 1, 1]);
        *seg.store.get_mut(head) = w;
        let x = test_image(&mut rng, 16);
        let a = seg.predict(&x, true, &mut Rng::new(9)).unwrap();
        let b = seg.predict(&x, true, &mut Rng::new(9)).unwrap();
        let c = seg.predict(&x, true, &mut Rng::new(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.simplex_deviation() <= 1e-9);
    }

    #[test]
    fn layouts_round_trip_through_checkpoints() {
        let mut rng = Rng::new(8);
        let seg = SegParams::<f64>::init(UNetConfig { depth: 3, base_width: 4, classes: 3, ..Default::default() }, &mut rng).unwrap();
        let bytes = seg.store.to_checkpoint_bytes();
        let back = SegParams::from_store(ParamStore::from_checkpoint_bytes(&bytes, "m".as_ref()).unwrap(), 0.1).unwrap();
        assert_eq!(back.config(), seg.config());
        assert_eq!(back.store, seg.store);

        let g = GeneratorParams::<f64>::init(GeneratorConfig { height: 32, width: 16, ..gen_cfg(32, 5) }, &mut rng).unwrap();
        let bytes = g.to_checkpoint_bytes();
        let back = GeneratorParams::from_store(ParamStore::from_checkpoint_bytes(&bytes, "m".as_ref()).unwrap()).unwrap();
        assert_eq!(back.config(), g.config());
        assert_eq!(back.store, g.store);
    }

    #[test]
    fn wrong_extent_is_rejected() {
        let mut rng = Rng::new(8);
        let g = GeneratorParams::<f64>::init(gen_cfg(16, 4), &mut rng).unwrap();
        assert!(g.encode(&test_image(&mut rng, 32)).is_err());
        let seg = SegParams::<f64>::init(UNetConfig::default(), &mut rng).unwrap();
        assert!(seg.predict(&Image::gray(6, 6, vec![0.0; 36]).unwrap(), false, &mut rng).is_err());
    }
}
