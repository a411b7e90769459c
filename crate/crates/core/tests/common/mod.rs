#![allow(dead_code)]

use hfn_core::{Coord, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Min distance from every pixel to any click, by double loop.
pub fn brute_distance(clicks: &[Coord], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut best = f64::INFINITY;
            for q in clicks {
                let dr = r as f64 - q.0 as f64;
                let dc = c as f64 - q.1 as f64;
                best = best.min((dr * dr + dc * dc).sqrt());
            }
            out.push(best);
        }
    }
    out
}

/// Distance from each pixel to the nearest pixel of the other class.
pub fn brute_boundary_distance(mask: &Mask) -> Vec<f64> {
    let (h, w) = mask.dims();
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                fg.push(Coord(r, c));
            } else {
                bg.push(Coord(r, c));
            }
        }
    }
    let to_fg = brute_distance(&fg, h, w);
    let to_bg = brute_distance(&bg, h, w);
    (0..h * w).map(|i| if mask.values()[i] == 1 { to_bg[i] } else { to_fg[i] }).collect()
}

/// Union of a few random ellipses; guaranteed to leave both classes
/// with at least `min_each` pixels.
pub fn random_blob(h: usize, w: usize, seed: u64, min_each: usize) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let k = rng.random_range(1..=3);
        let blobs: Vec<(f64, f64, f64, f64)> = (0..k)
            .map(|_| {
                (
                    rng.random_range(0.25..0.75) * h as f64,
                    rng.random_range(0.25..0.75) * w as f64,
                    rng.random_range(0.1..0.3) * h as f64,
                    rng.random_range(0.1..0.3) * w as f64,
                )
            })
            .collect();
        let m = Mask::from_fn(h, w, |r, c| {
            blobs.iter().any(|&(cy, cx, ry, rx)| {
                let dy = (r as f64 - cy) / ry;
                let dx = (c as f64 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            })
        });
        if m.count_foreground() >= min_each && m.count_background() >= min_each {
            return m;
        }
    }
}

pub fn random_clicks(h: usize, w: usize, k: usize, rng: &mut impl Rng) -> Vec<Coord> {
    let mut out: Vec<Coord> = Vec::new();
    while out.len() < k {
        let c = Coord(rng.random_range(0..h), rng.random_range(0..w));
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out
}
