//! Toy segmentation data: non-overlapping ellipses, rectangles and annuli on
//! a noisy background, one intensity band per class.

use bws_tensor::Rng;

use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::maps::{BinaryMask, Image, LabelMap};
use crate::weak_labels::{simulate_scribbles, ScribbleOptions};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Smallest and largest shape radius in pixels.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Mean intensity per class, background first.
    pub class_mean: Vec<f64>,
    /// Standard deviation of each object's (or background's) base intensity.
    pub class_sigma: Vec<f64>,
    /// Per-pixel Gaussian noise.
    pub noise_sigma: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub scribble_jitter: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            classes: 4,
            min_shapes: 3,
            max_shapes: 5,
            min_radius: 5.0,
            max_radius: 12.0,
            class_mean: vec![0.2, 0.45, 0.65, 0.85],
            class_sigma: vec![0.05, 0.05, 0.05, 0.05],
            noise_sigma: 0.08,
            train: 200,
            val: 50,
            test: 50,
            seed: 0,
            scribble_jitter: false,
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::config(format!("class count {} must be in 2..=255", self.classes)));
        }
        if self.class_mean.len() != self.classes || self.class_sigma.len() != self.classes {
            return Err(Error::config("class_mean and class_sigma need one entry per class"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("image extent must be positive"));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::config("min_shapes exceeds max_shapes"));
        }
        if !(self.min_radius >= 1.0 && self.min_radius <= self.max_radius) {
            return Err(Error::config("shape radii must satisfy 1 <= min_radius <= max_radius"));
        }
        if !(self.noise_sigma >= 0.0) || self.class_sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::config("noise and intensity deviations must be non-negative"));
        }
        if 2.0 * self.max_radius + 2.0 > self.height.min(self.width) as f64 {
            return Err(Error::config(format!(
                "max_radius {} does not fit a {}x{} image",
                self.max_radius, self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { cy: f64, cx: f64, a: f64, b: f64, theta: f64 },
    Rectangle { cy: f64, cx: f64, a: f64, b: f64, theta: f64 },
    Annulus { cy: f64, cx: f64, outer: f64, inner: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        let local = |cy: f64, cx: f64, theta: f64| {
            let (dy, dx) = (y - cy, x - cx);
            let (s, c) = theta.sin_cos();
            (dx * c + dy * s, -dx * s + dy * c)
        };
        match *self {
            Shape::Ellipse { cy, cx, a, b, theta } => {
                let (u, v) = local(cy, cx, theta);
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Rectangle { cy, cx, a, b, theta } => {
                let (u, v) = local(cy, cx, theta);
                u.abs() <= a && v.abs() <= b
            }
            Shape::Annulus { cy, cx, outer, inner } => {
                let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                d2 <= outer * outer && d2 > inner * inner
            }
        }
    }

    fn random(rng: &mut Rng, spec: &SyntheticSpec) -> Shape {
        let r = rng.uniform_range(spec.min_radius, spec.max_radius);
        let cy = rng.uniform_range(r + 1.0, spec.height as f64 - r - 1.0);
        let cx = rng.uniform_range(r + 1.0, spec.width as f64 - r - 1.0);
        let theta = rng.uniform_range(0.0, std::f64::consts::PI);
        let aspect = rng.uniform_range(0.55, 1.0);
        match rng.below(3) {
            0 => Shape::Ellipse { cy, cx, a: r, b: r * aspect, theta },
            1 => Shape::Rectangle { cy, cx, a: r * 0.85, b: r * 0.85 * aspect, theta },
            _ => Shape::Annulus { cy, cx, outer: r, inner: r * rng.uniform_range(0.4, 0.55) },
        }
    }

    fn rasterize(&self, h: usize, w: usize) -> BinaryMask {
        let mut m = BinaryMask::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                if self.contains(y as f64, x as f64) {
                    m.set(y, x, true);
                }
            }
        }
        m
    }
}

/// One rendered image: 8-bit pixels and dense labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub pixels: Vec<u8>,
    pub labels: LabelMap,
}

impl Rendered {
    pub fn image(&self, height: usize, width: usize) -> Image {
        Image::gray(height, width, self.pixels.iter().map(|&p| p as f64 / 255.0).collect()).expect("extent matches")
    }
}

/// Render one image from its own random stream.
pub fn render(spec: &SyntheticSpec, rng: &mut Rng) -> Result<Rendered> {
    let (h, w) = (spec.height, spec.width);
    let count = spec.min_shapes + rng.below(spec.max_shapes - spec.min_shapes + 1);
    let mut fg: Vec<u8> = (1..spec.classes as u8).collect();
    rng.shuffle(&mut fg);
    let mut classes: Vec<u8> = fg.iter().copied().cycle().take(count.min(fg.len())).collect();
    while classes.len() < count {
        classes.push(1 + rng.below(spec.classes - 1) as u8);
    }
    let mut labels = LabelMap::filled(h, w, 0);
    let mut occupied = BinaryMask::empty(h, w);
    let mut objects = Vec::with_capacity(count);
    for (k, &class) in classes.iter().enumerate() {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let shape = Shape::random(rng, spec);
            let mask = shape.rasterize(h, w);
            if mask.count() == 0 || mask.data.iter().zip(&occupied.data).any(|(&a, &b)| a && b) {
                continue;
            }
            for y in 0..h {
                for x in 0..w {
                    if mask.get(y, x) {
                        labels.set(y, x, class);
                        for (dy, dx) in [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)] {
                            let (ny, nx) = (y as isize + dy, x as isize + dx);
                            if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                                occupied.set(ny as usize, nx as usize, true);
                            }
                        }
                    }
                }
            }
            objects.push((mask, class));
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::config(format!(
                "could not place shape {} of {count} without overlap in a {h}x{w} image after {PLACEMENT_ATTEMPTS} attempts; \
                 lower max_shapes or max_radius",
                k + 1
            )));
        }
    }
    let base = |rng: &mut Rng, c: usize| spec.class_mean[c] + spec.class_sigma[c] * rng.normal();
    let mut level = vec![base(rng, 0); h * w];
    for (mask, class) in &objects {
        let v = base(rng, *class as usize);
        for (p, &on) in mask.data.iter().enumerate() {
            if on {
                level[p] = v;
            }
        }
    }
    let pixels = level
        .iter()
        .map(|&v| {
            let noisy = v + spec.noise_sigma * rng.normal();
            (noisy.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    Ok(Rendered { pixels, labels })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SyntheticDataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SyntheticDataset {
    pub fn split(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Sample `index` of `split`; independent of every other sample.
pub fn generate_sample(spec: &SyntheticSpec, split: Split, index: usize) -> Result<Sample> {
    let mut rng = Rng::keyed(spec.seed, split.stream(), index as u64);
    let r = render(spec, &mut rng)?;
    let scribbles = simulate_scribbles(&r.labels, spec.classes, &mut rng, ScribbleOptions { jitter: spec.scribble_jitter })?;
    Ok(Sample {
        id: format!("{}_{index:04}", split.name()),
        image: r.image(spec.height, spec.width),
        labels: r.labels,
        scribbles,
    })
}

pub fn generate_synthetic(spec: &SyntheticSpec, workers: usize) -> Result<SyntheticDataset> {
    spec.validate()?;
    let make = |split: Split, n: usize| crate::parallel::map_indexed(n, workers, |i| generate_sample(spec, split, i));
    Ok(SyntheticDataset { train: make(Split::Train, spec.train)?, val: make(Split::Val, spec.val)?, test: make(Split::Test, spec.test)? })
}
