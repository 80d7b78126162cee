//! Scribble simulation by Zhang–Suen thinning and the Γ-mask label merge.

use std::collections::VecDeque;

use bws_tensor::Rng;

use crate::error::{Error, Result};
use crate::maps::{BinaryMask, LabelMap, ScribbleMap, UnlabeledMask, UNLABELED};

/// Neighbour offsets P2..P9, clockwise from north.
const RING: [(isize, isize); 8] = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)];

/// Zhang–Suen thinning iterated to a fixpoint. Out-of-frame pixels count as
/// background.
///
/// Plain Zhang–Suen erases some components entirely (any that shrink to a
/// 2×2 block). Such a component keeps the pixel nearest its centroid, first
/// in raster order on ties, so the 8-connected component count is preserved.
pub fn skeletonize(mask: &BinaryMask) -> BinaryMask {
    let mut img = mask.clone();
    let mut marked = Vec::new();
    loop {
        let mut changed = false;
        for first in [true, false] {
            marked.clear();
            for y in 0..img.height {
                for x in 0..img.width {
                    if img.get(y, x) && deletable(&img, y as isize, x as isize, first) {
                        marked.push((y, x));
                    }
                }
            }
            for &(y, x) in &marked {
                img.set(y, x, false);
            }
            changed |= !marked.is_empty();
        }
        if !changed {
            break;
        }
    }
    restore_vanished(mask, &mut img);
    img
}

fn restore_vanished(mask: &BinaryMask, skeleton: &mut BinaryMask) {
    let w = mask.width;
    let (comp, n) = connected_components(mask);
    let mut covered = vec![false; n + 1];
    for (p, &on) in skeleton.data.iter().enumerate() {
        if on {
            covered[comp[p]] = true;
        }
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
    for (p, &id) in comp.iter().enumerate() {
        if id != 0 && !covered[id] {
            members[id].push(p);
        }
    }
    for pixels in members.iter().filter(|m| !m.is_empty()) {
        let cy = pixels.iter().map(|&p| (p / w) as f64).sum::<f64>() / pixels.len() as f64;
        let cx = pixels.iter().map(|&p| (p % w) as f64).sum::<f64>() / pixels.len() as f64;
        let dist = |p: usize| ((p / w) as f64 - cy).powi(2) + ((p % w) as f64 - cx).powi(2);
        let best = pixels.iter().copied().min_by(|&a, &b| dist(a).total_cmp(&dist(b))).expect("non-empty component");
        skeleton.data[best] = true;
    }
}

fn deletable(img: &BinaryMask, y: isize, x: isize, first: bool) -> bool {
    let p: [bool; 8] = RING.map(|(dy, dx)| img.at(y + dy, x + dx));
    let b = p.iter().filter(|&&v| v).count();
    if !(2..=6).contains(&b) {
        return false;
    }
    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
    if a != 1 {
        return false;
    }
    let [p2, _, p4, _, p6, _, p8, _] = p;
    if first {
        !(p2 && p4 && p6) && !(p4 && p6 && p8)
    } else {
        !(p2 && p4 && p8) && !(p2 && p6 && p8)
    }
}

/// 8-connected component labels (0 = background, components numbered from
/// 1 in raster order of their first pixel) and the component count.
pub fn connected_components(mask: &BinaryMask) -> (Vec<usize>, usize) {
    let (h, w) = (mask.height, mask.width);
    let mut labels = vec![0usize; h * w];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.data[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for (dy, dx) in RING {
                let (ny, nx) = (y + dy, x + dx);
                if mask.at(ny, nx) {
                    let q = ny as usize * w + nx as usize;
                    if labels[q] == 0 {
                        labels[q] = count;
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    (labels, count)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScribbleOptions {
    /// Move each scribble pixel by one random 8-neighbour step when the
    /// target carries the same ground-truth class.
    pub jitter: bool,
}

/// Skeleton scribbles for every class present in `labels`; every
/// connected component receives at least one scribble pixel.
pub fn simulate_scribbles(labels: &LabelMap, classes: usize, rng: &mut Rng, opts: ScribbleOptions) -> Result<ScribbleMap> {
    labels.validate(classes)?;
    let mut out = ScribbleMap::unlabeled(labels.height, labels.width);
    for class in 0..classes as u8 {
        let mask = labels.class_mask(class);
        if mask.count() == 0 {
            continue;
        }
        for (p, &on) in skeletonize(&mask).data.iter().enumerate() {
            if on {
                out.data[p] = class;
            }
        }
    }
    if opts.jitter {
        out = jitter(&out, labels, rng);
    }
    Ok(out)
}

fn jitter(scribbles: &ScribbleMap, labels: &LabelMap, rng: &mut Rng) -> ScribbleMap {
    let (h, w) = (scribbles.height, scribbles.width);
    let mut out = ScribbleMap::unlabeled(h, w);
    for (p, &c) in scribbles.data.iter().enumerate() {
        if c == UNLABELED {
            continue;
        }
        let (dy, dx) = RING[rng.below(8)];
        let (ny, nx) = ((p / w) as isize + dy, (p % w) as isize + dx);
        let inside = ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w;
        let target = if inside && labels.get(ny as usize, nx as usize) == c { ny as usize * w + nx as usize } else { p };
        out.data[target] = c;
    }
    out
}

/// Γ: 0 on scribbled pixels, 1 elsewhere.
pub fn unlabeled_mask(scribbles: &ScribbleMap) -> UnlabeledMask {
    UnlabeledMask {
        height: scribbles.height,
        width: scribbles.width,
        data: scribbles.data.iter().map(|&v| u8::from(v == UNLABELED)).collect(),
    }
}

/// `y = (1 - Γ) ⊙ yˢ + Γ ⊙ pseudo`.
pub fn merge_labels(scribbles: &ScribbleMap, pseudo: &LabelMap, gamma: &UnlabeledMask) -> Result<LabelMap> {
    let (h, w) = (scribbles.height, scribbles.width);
    if !pseudo.same_extent(h, w) || !gamma.same_extent(h, w) {
        return Err(Error::contract(format!(
            "merge extents differ: scribbles {h}x{w}, pseudo-labels {}x{}, mask {}x{}",
            pseudo.height, pseudo.width, gamma.height, gamma.width
        )));
    }
    let mut data = Vec::with_capacity(h * w);
    for (p, ((&s, &y), &g)) in scribbles.data.iter().zip(&pseudo.data).zip(&gamma.data).enumerate() {
        let consistent = match g {
            0 => s != UNLABELED,
            1 => s == UNLABELED,
            _ => false,
        };
        if !consistent {
            return Err(Error::contract(format!(
                "unlabeled mask value {g} at pixel {p} is inconsistent with scribble value {s}"
            )));
        }
        data.push(if g == 0 { s } else { y });
    }
    LabelMap::from_vec(h, w, data)
}
