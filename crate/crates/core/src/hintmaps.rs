//! Click sets and the Euclidean distance fields ("hint maps") derived from them.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HfnError, Result};

/// Integer pixel coordinate `(row, col)`; serializes as `[row, col]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord(pub usize, pub usize);

impl Coord {
    pub fn row(self) -> usize {
        self.0
    }

    pub fn col(self) -> usize {
        self.1
    }

    /// Nearest pixel to a sub-pixel position; `None` when it falls before the origin.
    pub fn from_subpixel(row: f64, col: f64) -> Option<Coord> {
        let (r, c) = (row.round(), col.round());
        (r >= 0.0 && c >= 0.0 && r.is_finite() && c.is_finite()).then_some(Coord(r as usize, c as usize))
    }

    pub fn distance(self, other: Coord) -> f64 {
        let dr = self.0 as f64 - other.0 as f64;
        let dc = self.1 as f64 - other.1 as f64;
        (dr * dr + dc * dc).sqrt()
    }
}

/// Foreground and background clicks, in arrival order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickSet {
    pub foreground: Vec<Coord>,
    pub background: Vec<Coord>,
}

impl ClickSet {
    pub fn new(foreground: Vec<Coord>, background: Vec<Coord>) -> Self {
        ClickSet { foreground, background }
    }

    pub fn is_empty(&self) -> bool {
        self.foreground.is_empty() && self.background.is_empty()
    }

    pub fn counts(&self) -> (usize, usize) {
        (self.foreground.len(), self.background.len())
    }

    /// Check bounds, in-list duplicates and cross-list overlap.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let mut fg = HashSet::new();
        for &c in &self.foreground {
            check_bounds(c, height, width)?;
            if !fg.insert(c) {
                return Err(HfnError::DuplicateClick { row: c.0, col: c.1 });
            }
        }
        let mut bg = HashSet::new();
        for &c in &self.background {
            check_bounds(c, height, width)?;
            if !bg.insert(c) {
                return Err(HfnError::DuplicateClick { row: c.0, col: c.1 });
            }
            if fg.contains(&c) {
                return Err(HfnError::ConflictingClick { row: c.0, col: c.1 });
            }
        }
        Ok(())
    }

    /// Both sides must be populated before the network can run.
    pub fn require_both_sides(&self) -> Result<()> {
        if self.foreground.is_empty() {
            return Err(HfnError::MissingClicks { side: "foreground" });
        }
        if self.background.is_empty() {
            return Err(HfnError::MissingClicks { side: "background" });
        }
        Ok(())
    }
}

fn check_bounds(c: Coord, height: usize, width: usize) -> Result<()> {
    if c.0 >= height || c.1 >= width {
        return Err(HfnError::ClickOutOfBounds { row: c.0, col: c.1, height, width });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HintKind {
    Foreground,
    Background,
}

/// Per-pixel distance (in pixels) to the nearest click of one kind.
#[derive(Clone, Debug, PartialEq)]
pub struct HintMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub kind: HintKind,
}

impl HintMap {
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

pub fn diagonal(height: usize, width: usize) -> f64 {
    ((height * height + width * width) as f64).sqrt()
}

/// Minimum Euclidean distance from every pixel to the given clicks.
pub fn compute_hint_map(clicks: &[Coord], height: usize, width: usize, kind: HintKind) -> Result<HintMap> {
    if clicks.is_empty() {
        return Err(HfnError::EmptyClicks);
    }
    let mut seeds = vec![false; height * width];
    for &c in clicks {
        check_bounds(c, height, width)?;
        seeds[c.0 * width + c.1] = true;
    }
    let values = euclidean_distance_transform(&seeds, height, width);
    Ok(HintMap { height, width, values, kind })
}

/// Foreground and background maps for a validated click set.
pub fn compute_hint_maps(clicks: &ClickSet, height: usize, width: usize) -> Result<(HintMap, HintMap)> {
    clicks.validate(height, width)?;
    Ok((
        compute_hint_map(&clicks.foreground, height, width, HintKind::Foreground)?,
        compute_hint_map(&clicks.background, height, width, HintKind::Background)?,
    ))
}

/// Divide by the image diagonal and clip to `[0, 1]`.
pub fn normalize_hint_map(map: &HintMap) -> Vec<f64> {
    let d = diagonal(map.height, map.width);
    if d == 0.0 {
        return vec![0.0; map.values.len()];
    }
    map.values.iter().map(|&v| (v / d).clamp(0.0, 1.0)).collect()
}

/// Exact Euclidean distance to the nearest `true` cell (`f64::INFINITY` when
/// there is none), via the separable lower-envelope algorithm of
/// Felzenszwalb and Huttenlocher on squared distances.
pub fn euclidean_distance_transform(seeds: &[bool], height: usize, width: usize) -> Vec<f64> {
    assert_eq!(seeds.len(), height * width, "seed grid size");
    let inf = f64::INFINITY;
    // Column pass: squared vertical distance to the nearest seed in the column.
    let mut sq = vec![inf; height * width];
    let mut col = vec![inf; height];
    let mut out = vec![0.0; height.max(width)];
    for c in 0..width {
        for r in 0..height {
            col[r] = if seeds[r * width + c] { 0.0 } else { inf };
        }
        lower_envelope_1d(&col, &mut out[..height]);
        for r in 0..height {
            sq[r * width + c] = out[r];
        }
    }
    // Row pass.
    let mut row = vec![inf; width];
    for r in 0..height {
        row.copy_from_slice(&sq[r * width..(r + 1) * width]);
        lower_envelope_1d(&row, &mut out[..width]);
        for c in 0..width {
            sq[r * width + c] = out[c].sqrt();
        }
    }
    sq
}

/// `d[q] = min_p (q - p)^2 + f[p]` over finite `f[p]`.
fn lower_envelope_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                    if s <= *z.last().expect("boundary per parabola") {
                        v.pop();
                        z.pop();
                        if v.is_empty() {
                            continue;
                        }
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        d.iter_mut().for_each(|x| *x = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        // Re-evaluate the best of the neighbouring parabolas exactly.
        let mut best = f64::INFINITY;
        for &p in &v[k.saturating_sub(1)..(k + 2).min(v.len())] {
            let dq = q as f64 - p as f64;
            best = best.min(dq * dq + f[p]);
        }
        *out = best;
    }
}

/// On-disk click file: `{"image": ..., "foreground": [[r,c],...], "background": [...], "seed": n|null}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickFile {
    pub image: String,
    pub foreground: Vec<Coord>,
    pub background: Vec<Coord>,
    pub seed: Option<u64>,
}

impl ClickFile {
    pub fn clicks(&self) -> ClickSet {
        ClickSet::new(self.foreground.clone(), self.background.clone())
    }

    pub fn load(path: &Path) -> Result<ClickFile> {
        let text = std::fs::read_to_string(path).map_err(|e| HfnError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("click file serializes")
    }
}
