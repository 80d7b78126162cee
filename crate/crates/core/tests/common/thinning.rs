use bws_core::maps::BinaryMask;
use bws_tensor::Rng;

/// Reference Zhang–Suen thinning on a zero-padded integer grid.
pub fn reference_thinning(mask: &BinaryMask) -> Vec<Vec<u8>> {
    let (h, w) = (mask.height, mask.width);
    let mut g = vec![vec![0u8; w + 2]; h + 2];
    for y in 0..h {
        for x in 0..w {
            g[y + 1][x + 1] = mask.get(y, x) as u8;
        }
    }
    loop {
        let mut removed = 0;
        for step in 0..2 {
            let mut kill = Vec::new();
            for i in 1..=h {
                for j in 1..=w {
                    if g[i][j] == 0 {
                        continue;
                    }
                    let n = [
                        g[i - 1][j],
                        g[i - 1][j + 1],
                        g[i][j + 1],
                        g[i + 1][j + 1],
                        g[i + 1][j],
                        g[i + 1][j - 1],
                        g[i][j - 1],
                        g[i - 1][j - 1],
                    ];
                    let b: u8 = n.iter().sum();
                    let a = (0..8).filter(|&k| n[k] == 0 && n[(k + 1) % 8] == 1).count();
                    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                    let cond = if step == 0 {
                        p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0
                    } else {
                        p2 * p4 * p8 == 0 && p2 * p6 * p8 == 0
                    };
                    if (2..=6).contains(&b) && a == 1 && cond {
                        kill.push((i, j));
                    }
                }
            }
            removed += kill.len();
            for (i, j) in kill {
                g[i][j] = 0;
            }
        }
        if removed == 0 {
            break;
        }
    }
    g[1..=h].iter().map(|r| r[1..=w].to_vec()).collect()
}

/// 8-connected components of a grid by breadth-first flood fill.
pub fn components(g: &[Vec<u8>]) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (g.len(), g.first().map_or(0, Vec::len));
    let mut seen = vec![vec![false; w]; h];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if g[y][x] == 0 || seen[y][x] {
                continue;
            }
            seen[y][x] = true;
            let mut queue = std::collections::VecDeque::from([(y, x)]);
            let mut comp = Vec::new();
            while let Some((cy, cx)) = queue.pop_front() {
                comp.push((cy, cx));
                for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                    for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                        if g[ny][nx] == 1 && !seen[ny][nx] {
                            seen[ny][nx] = true;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            out.push(comp);
        }
    }
    out
}

/// Reference thinning plus one pixel for every component it erased: the
/// one nearest the component centroid, first in raster order on ties.
pub fn reference_skeleton(mask: &BinaryMask) -> Vec<Vec<u8>> {
    let mut s = reference_thinning(mask);
    for mut comp in components(&as_grid(mask)) {
        if comp.iter().any(|&(y, x)| s[y][x] == 1) {
            continue;
        }
        comp.sort();
        let n = comp.len() as f64;
        let cy = comp.iter().map(|p| p.0 as f64).sum::<f64>() / n;
        let cx = comp.iter().map(|p| p.1 as f64).sum::<f64>() / n;
        let d = |p: &(usize, usize)| (p.0 as f64 - cy).powi(2) + (p.1 as f64 - cx).powi(2);
        let mut best = comp[0];
        for p in &comp {
            if d(p) < d(&best) {
                best = *p;
            }
        }
        s[best.0][best.1] = 1;
    }
    s
}

pub fn as_grid(m: &BinaryMask) -> Vec<Vec<u8>> {
    (0..m.height).map(|y| (0..m.width).map(|x| m.get(y, x) as u8).collect()).collect()
}

/// Union of two overlapping ellipses: connected and simply connected.
pub fn random_blob(rng: &mut Rng) -> BinaryMask {
    let (h, w) = (32, 32);
    let cy = rng.uniform_range(12.0, 20.0);
    let cx = rng.uniform_range(12.0, 20.0);
    let mut m = BinaryMask::empty(h, w);
    let parts = [(cy, cx), (cy + rng.uniform_range(-4.0, 4.0), cx + rng.uniform_range(-4.0, 4.0))];
    let radii: Vec<(f64, f64, f64)> =
        (0..2).map(|_| (rng.uniform_range(3.0, 9.0), rng.uniform_range(3.0, 9.0), rng.uniform_range(0.0, 3.14))).collect();
    for y in 0..h {
        for x in 0..w {
            let inside = parts.iter().zip(&radii).any(|(&(py, px), &(ry, rx, t))| {
                let (dy, dx) = (y as f64 - py, x as f64 - px);
                let (u, v) = (dy * t.cos() + dx * t.sin(), -dy * t.sin() + dx * t.cos());
                (u / ry).powi(2) + (v / rx).powi(2) <= 1.0
            });
            m.set(y, x, inside);
        }
    }
    m
}
