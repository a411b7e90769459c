//! Simulated user clicks sampled from ground-truth masks.
//!
//! Clean clicks are spread over equal-population bands of distance to the
//! lesion boundary so no two clicks of one region come from the same band.
//! Noisy clicks land on the wrong side of the boundary, 5 to 10 pixels away.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HfnError, Result};
use crate::hintmaps::{euclidean_distance_transform, ClickSet, Coord};
use crate::mask::Mask;

pub type GroundTruthMask = Mask;

/// Largest accumulated click budget per region.
pub const MAX_BUDGET: usize = 6;

/// Boundary-distance window for noisy clicks, in pixels.
pub const NOISY_DISTANCE: (f64, f64) = (5.0, 10.0);

/// Evaluation default: three clicks per region.
pub const DEFAULT_EVAL_BUDGET: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Fg,
    Bg,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::Fg => "foreground",
            Region::Bg => "background",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Region::Fg => 0x6667,
            Region::Bg => 0x6267,
        }
    }
}

/// Number of clicks per region, `1..=6`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct ClickBudget(usize);

impl ClickBudget {
    pub fn new(n: usize) -> Result<Self> {
        if (1..=MAX_BUDGET).contains(&n) {
            Ok(ClickBudget(n))
        } else {
            Err(HfnError::InvalidBudget(n))
        }
    }

    pub fn get(self) -> usize {
        self.0
    }

    pub fn all() -> impl Iterator<Item = ClickBudget> {
        (1..=MAX_BUDGET).map(ClickBudget)
    }
}

impl TryFrom<usize> for ClickBudget {
    type Error = HfnError;
    fn try_from(n: usize) -> Result<Self> {
        ClickBudget::new(n)
    }
}

impl From<ClickBudget> for usize {
    fn from(b: ClickBudget) -> usize {
        b.0
    }
}

/// Distance from every pixel to the nearest pixel of the opposite class.
/// Lesion pixels get their distance to the background and vice versa.
pub fn boundary_distance(mask: &Mask) -> Vec<f64> {
    let (h, w) = mask.dims();
    let fg: Vec<bool> = mask.values().iter().map(|&v| v == 1).collect();
    let bg: Vec<bool> = fg.iter().map(|&v| !v).collect();
    let to_fg = euclidean_distance_transform(&fg, h, w);
    let to_bg = euclidean_distance_transform(&bg, h, w);
    fg.iter().enumerate().map(|(i, &inside)| if inside { to_bg[i] } else { to_fg[i] }).collect()
}

/// Region pixels (flat indices) sorted by boundary distance, ties by index.
fn sorted_region(mask: &Mask, region: Region, dist: &[f64]) -> Vec<usize> {
    let want = matches!(region, Region::Fg) as u8;
    let mut px: Vec<usize> = (0..mask.values().len()).filter(|&i| mask.values()[i] == want).collect();
    px.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    px
}

/// Band of the `rank`-th pixel among `len` when split into `bands` equal slices.
#[inline]
fn band_of(rank: usize, len: usize, bands: usize) -> usize {
    // Slice k covers ranks [k*len/bands, (k+1)*len/bands).
    ((rank + 1) * bands - 1) / len
}

#[inline]
fn band_start(k: usize, len: usize, bands: usize) -> usize {
    k * len / bands
}

/// Split a region into `n_bands` disjoint sets of approximately equal size,
/// ordered from nearest to farthest from the boundary.
pub fn distance_bands(mask: &Mask, region: Region, n_bands: usize) -> Result<Vec<Vec<Coord>>> {
    let dist = boundary_distance(mask);
    let sorted = sorted_region(mask, region, &dist);
    if n_bands == 0 || n_bands > sorted.len() {
        return Err(HfnError::RegionTooSmall { region: region.name(), pixels: sorted.len(), bands: n_bands });
    }
    let w = mask.width();
    let len = sorted.len();
    Ok((0..n_bands)
        .map(|k| {
            sorted[k * len / n_bands..(k + 1) * len / n_bands]
                .iter()
                .map(|&i| Coord(i / w, i % w))
                .collect()
        })
        .collect())
}

/// Ranks (into the sorted region) of an accumulated sequence of `MAX_BUDGET`
/// clicks such that for every `n`, the first `n` ranks fall in distinct bands
/// of the `n`-band split.
///
/// Band boundaries of all splits `1..=MAX_BUDGET` cut the ranks into a few
/// cells whose members agree on every band index, so the search runs over
/// cells and a rank is drawn uniformly inside each chosen cell.
fn accumulated_ranks(len: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    struct Cell {
        lo: usize,
        hi: usize,
        bands: [usize; MAX_BUDGET],
    }

    fn extend(chosen: &mut Vec<usize>, cells: &[Cell], rng: &mut ChaCha8Rng) -> bool {
        let k = chosen.len();
        if k == MAX_BUDGET {
            return true;
        }
        let mut cands: Vec<usize> = (0..cells.len())
            .filter(|&c| {
                (k..MAX_BUDGET).all(|m| chosen.iter().all(|&o| cells[o].bands[m] != cells[c].bands[m]))
            })
            .collect();
        while !cands.is_empty() {
            // Weighted by cell size so ranks stay close to uniform.
            let total: usize = cands.iter().map(|&c| cells[c].hi - cells[c].lo).sum();
            let mut t = rng.random_range(0..total);
            let mut i = 0;
            while t >= cells[cands[i]].hi - cells[cands[i]].lo {
                t -= cells[cands[i]].hi - cells[cands[i]].lo;
                i += 1;
            }
            let c = cands.swap_remove(i);
            chosen.push(c);
            if extend(chosen, cells, rng) {
                return true;
            }
            chosen.pop();
        }
        false
    }

    if len < MAX_BUDGET {
        return None;
    }
    let mut cuts: Vec<usize> = (1..=MAX_BUDGET).flat_map(|m| (0..=m).map(move |k| band_start(k, len, m))).collect();
    cuts.sort_unstable();
    cuts.dedup();
    let cells: Vec<Cell> = cuts
        .windows(2)
        .map(|w| Cell {
            lo: w[0],
            hi: w[1],
            bands: std::array::from_fn(|m| band_of(w[0], len, m + 1)),
        })
        .collect();
    let mut chosen = Vec::with_capacity(MAX_BUDGET);
    if !extend(&mut chosen, &cells, rng) {
        return None;
    }
    Some(chosen.into_iter().map(|c| rng.random_range(cells[c].lo..cells[c].hi)).collect())
}

fn region_rng(seed: u64, region: Region) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ region.tag().rotate_left(48))
}

fn require_both_classes(mask: &Mask) -> Result<()> {
    if mask.count_foreground() == 0 {
        return Err(HfnError::RegionTooSmall { region: Region::Fg.name(), pixels: 0, bands: 1 });
    }
    if mask.count_background() == 0 {
        return Err(HfnError::RegionTooSmall { region: Region::Bg.name(), pixels: 0, bands: 1 });
    }
    Ok(())
}

/// The full accumulated six-click sequence for one region.
pub fn accumulated_clicks(mask: &Mask, region: Region, seed: u64) -> Result<Vec<Coord>> {
    let dist = boundary_distance(mask);
    accumulated_clicks_with(mask, region, seed, &dist)
}

fn accumulated_clicks_with(mask: &Mask, region: Region, seed: u64, dist: &[f64]) -> Result<Vec<Coord>> {
    let sorted = sorted_region(mask, region, dist);
    let mut rng = region_rng(seed, region);
    let ranks = accumulated_ranks(sorted.len(), &mut rng).ok_or(HfnError::RegionTooSmall {
        region: region.name(),
        pixels: sorted.len(),
        bands: MAX_BUDGET,
    })?;
    let w = mask.width();
    Ok(ranks.into_iter().map(|r| Coord(sorted[r] / w, sorted[r] % w)).collect())
}

/// `n` clean clicks per region. Budgets are accumulated: the clicks for `n`
/// are the first `n` clicks for `n + 1` under the same seed.
pub fn simulate_clicks(mask: &GroundTruthMask, n: ClickBudget, seed: u64) -> Result<ClickSet> {
    require_both_classes(mask)?;
    let dist = boundary_distance(mask);
    let mut fg = accumulated_clicks_with(mask, Region::Fg, seed, &dist)?;
    let mut bg = accumulated_clicks_with(mask, Region::Bg, seed, &dist)?;
    fg.truncate(n.get());
    bg.truncate(n.get());
    Ok(ClickSet::new(fg, bg))
}

/// All six accumulated combinations (budgets 1..=6) for one image.
pub fn click_combinations(mask: &GroundTruthMask, seed: u64) -> Result<Vec<ClickSet>> {
    let full = simulate_clicks(mask, ClickBudget(MAX_BUDGET), seed)?;
    Ok((1..=MAX_BUDGET)
        .map(|n| ClickSet::new(full.foreground[..n].to_vec(), full.background[..n].to_vec()))
        .collect())
}

fn noisy_candidates(mask: &Mask, dist: &[f64], inside: bool, exclude: &[Coord]) -> Vec<usize> {
    let w = mask.width();
    let (lo, hi) = NOISY_DISTANCE;
    (0..dist.len())
        .filter(|&i| (mask.values()[i] == 1) == inside && dist[i] >= lo && dist[i] <= hi)
        .filter(|&i| !exclude.contains(&Coord(i / w, i % w)))
        .collect()
}

fn sample_noisy(
    mask: &Mask,
    dist: &[f64],
    region: Region,
    count: usize,
    exclude: &[Coord],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Coord>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    // A noisy foreground click sits outside the lesion and vice versa.
    let inside = matches!(region, Region::Bg);
    let mut cands = noisy_candidates(mask, dist, inside, exclude);
    if cands.len() < count {
        return Err(HfnError::NoNoisyCandidate { region: region.name() });
    }
    let (picked, _) = cands.partial_shuffle(rng, count);
    let w = mask.width();
    Ok(picked.iter().map(|&i| Coord(i / w, i % w)).collect())
}

/// Noisy clicks only: foreground clicks outside the lesion and background
/// clicks inside it, each 5-10 pixels from the boundary.
pub fn simulate_noisy_clicks(mask: &GroundTruthMask, n_fg_noisy: usize, n_bg_noisy: usize, seed: u64) -> Result<ClickSet> {
    if n_fg_noisy == 0 && n_bg_noisy == 0 {
        return Ok(ClickSet::default());
    }
    require_both_classes(mask)?;
    let dist = boundary_distance(mask);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f697379);
    let fg = sample_noisy(mask, &dist, Region::Fg, n_fg_noisy, &[], &mut rng)?;
    let bg = sample_noisy(mask, &dist, Region::Bg, n_bg_noisy, &[], &mut rng)?;
    Ok(ClickSet::new(fg, bg))
}

/// Evaluation clicks with noise: `total` clicks per region, the last
/// `n_fg_noisy` / `n_bg_noisy` of the clean accumulated sequence replaced by
/// noisy clicks. With zero noise this equals [`simulate_clicks`].
pub fn noisy_replacement_clicks(
    mask: &GroundTruthMask,
    total: ClickBudget,
    n_fg_noisy: usize,
    n_bg_noisy: usize,
    seed: u64,
) -> Result<ClickSet> {
    let total_n = total.get();
    if n_fg_noisy > total_n || n_bg_noisy > total_n {
        return Err(HfnError::InvalidBudget(n_fg_noisy.max(n_bg_noisy)));
    }
    let clean = simulate_clicks(mask, total, seed)?;
    if n_fg_noisy == 0 && n_bg_noisy == 0 {
        return Ok(clean);
    }
    let dist = boundary_distance(mask);
    let mut fg = clean.foreground[..total_n - n_fg_noisy].to_vec();
    let mut bg = clean.background[..total_n - n_bg_noisy].to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f697379);
    // Noisy fg clicks live outside the lesion, where clean bg clicks are.
    let nf = sample_noisy(mask, &dist, Region::Fg, n_fg_noisy, &bg, &mut rng)?;
    let nb = sample_noisy(mask, &dist, Region::Bg, n_bg_noisy, &fg, &mut rng)?;
    fg.extend(nf);
    bg.extend(nb);
    Ok(ClickSet::new(fg, bg))
}
