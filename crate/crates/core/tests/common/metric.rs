use bws_core::maps::{BinaryMask, LabelMap};
use bws_tensor::Rng;

pub fn grid(rows: [&str; 4]) -> LabelMap {
    let data = rows.iter().flat_map(|r| r.bytes().map(|b| b - b'0')).collect();
    LabelMap::from_vec(4, 4, data).unwrap()
}

/// (gt, pred, hand-counted class-1 TP, FP, FN, TN).
pub const CASES: [([&str; 4], [&str; 4], [u64; 4]); 10] = [
    (["1111", "1111", "1111", "1111"], ["1111", "1111", "1111", "1111"], [16, 0, 0, 0]),
    (["1111", "0000", "0000", "0000"], ["1111", "0000", "0000", "0000"], [4, 0, 0, 12]),
    (["1111", "0000", "0000", "0000"], ["1111", "1111", "0000", "0000"], [4, 4, 0, 8]),
    (["1111", "1111", "0000", "0000"], ["1111", "0000", "0000", "0000"], [4, 0, 4, 8]),
    (["1111", "0000", "0000", "0000"], ["0000", "0000", "0000", "1111"], [0, 4, 4, 8]),
    (["1000", "1000", "1000", "1000"], ["1111", "0000", "0000", "0000"], [1, 3, 3, 9]),
    (["1000", "0100", "0010", "0001"], ["0000", "0000", "0000", "0000"], [0, 0, 4, 12]),
    (["0000", "0110", "0110", "0000"], ["1000", "0110", "0110", "0000"], [4, 1, 0, 11]),
    (["1010", "0101", "1010", "0101"], ["1111", "1111", "1111", "1111"], [8, 8, 0, 0]),
    (["1110", "1110", "1110", "0000"], ["0000", "0111", "0111", "0111"], [4, 5, 5, 2]),
];

pub fn expected(num: u64, den: u64, scale: f64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (scale * num as f64 / den as f64, false)
    }
}

pub fn brute_boundary(m: &BinaryMask) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for y in 0..m.height as isize {
        for x in 0..m.width as isize {
            if m.at(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| !m.at(y + dy, x + dx)) {
                out.push((y as f64, x as f64));
            }
        }
    }
    out
}

pub fn brute_directed(a: &[(f64, f64)], b: &[(f64, f64)], s: (f64, f64)) -> f64 {
    let mut d: Vec<f64> = a
        .iter()
        .map(|p| b.iter().map(|q| ((s.0 * (p.0 - q.0)).powi(2) + (s.1 * (p.1 - q.1)).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
        .collect();
    d.sort_by(f64::total_cmp);
    let r = 0.95 * (d.len() - 1) as f64;
    let (lo, hi) = (r.floor() as usize, r.ceil() as usize);
    d[lo] + (d[hi] - d[lo]) * (r - lo as f64)
}

pub fn random_mask(rng: &mut Rng, h: usize, w: usize) -> BinaryMask {
    let mut m = BinaryMask::empty(h, w);
    for _ in 0..rng.range_inclusive(1, 3) {
        let (cy, cx) = (rng.uniform_range(0.0, h as f64), rng.uniform_range(0.0, w as f64));
        let r = rng.uniform_range(1.0, 6.0);
        for y in 0..h {
            for x in 0..w {
                if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r {
                    m.set(y, x, true);
                }
            }
        }
    }
    if m.count() == 0 {
        m.set(0, 0, true);
    }
    m
}
