//! Regional maxima, watershed regions and part-vote rectification.

use crate::image::HeatMap;
use serde::Serialize;
use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

/// A regional maximum of a heat map and the watershed basin it owns.
#[derive(Debug, Clone, PartialEq)]
pub struct Peak {
    /// plateau centroid in pixel-index coordinates
    pub x: f64,
    pub y: f64,
    pub value: f64,
    /// pixel indices of the basin, ascending
    pub region: Vec<usize>,
}

const NEIGHBORS: [(i64, i64); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

fn neighbors(i: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = ((i % w) as i64, (i / w) as i64);
    NEIGHBORS.iter().filter_map(move |(dx, dy)| {
        let (nx, ny) = (x + dx, y + dy);
        (nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64).then(|| ny as usize * w + nx as usize)
    })
}

/// Plateaus (8-connected, equal value) with every outside neighbor strictly
/// lower. Returned as pixel lists in order of first raster pixel.
pub fn regional_maxima(map: &HeatMap) -> Vec<Vec<usize>> {
    let (w, h) = (map.width(), map.height());
    let v = map.values();
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if seen[start] {
            continue;
        }
        let level = v[start];
        let mut plateau = Vec::new();
        let mut is_max = true;
        seen[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            plateau.push(p);
            for n in neighbors(p, w, h) {
                if v[n] > level {
                    is_max = false;
                } else if v[n] == level && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        if is_max {
            plateau.sort_unstable();
            out.push(plateau);
        }
    }
    out
}

#[derive(PartialEq)]
struct Flood {
    value: f64,
    order: u64,
    pixel: usize,
}

impl Eq for Flood {}

impl PartialOrd for Flood {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Flood {
    // highest value first, then first pushed
    fn cmp(&self, other: &Self) -> Ordering {
        self.value.total_cmp(&other.value).then(other.order.cmp(&self.order))
    }
}

/// Regional maxima at or above `ratio * max`, each with its watershed basin.
///
/// Basins come from a priority flood seeded only by the surviving maxima,
/// so together they partition the whole map. Peaks are ordered by
/// descending value, then by first plateau pixel.
pub fn find_peaks(map: &HeatMap, ratio: f64) -> Vec<Peak> {
    let global = map.max();
    if !(global > 0.0) {
        return Vec::new();
    }
    let (w, h) = (map.width(), map.height());
    let v = map.values();
    let mut plateaus: Vec<Vec<usize>> = regional_maxima(map)
        .into_iter()
        .filter(|p| v[p[0]] >= ratio * global)
        .collect();
    plateaus.sort_by(|a, b| v[b[0]].total_cmp(&v[a[0]]).then(a[0].cmp(&b[0])));

    const NONE: usize = usize::MAX;
    let mut label = vec![NONE; w * h];
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    let mut queued = vec![false; w * h];
    for (l, p) in plateaus.iter().enumerate() {
        for &i in p {
            label[i] = l;
            queued[i] = true;
        }
    }
    for p in &plateaus {
        for &i in p {
            for n in neighbors(i, w, h) {
                if !queued[n] {
                    queued[n] = true;
                    heap.push(Flood { value: v[n], order, pixel: n });
                    order += 1;
                }
            }
        }
    }
    while let Some(Flood { pixel, .. }) = heap.pop() {
        // join the basin of the highest labeled neighbor
        let mut best: Option<(f64, usize)> = None;
        for n in neighbors(pixel, w, h) {
            if label[n] != NONE {
                let cand = (v[n], label[n]);
                best = match best {
                    Some(b) if b.0 > cand.0 || (b.0 == cand.0 && b.1 <= cand.1) => Some(b),
                    _ => Some(cand),
                };
            }
        }
        label[pixel] = best.expect("flooded from a labeled pixel").1;
        for n in neighbors(pixel, w, h) {
            if !queued[n] {
                queued[n] = true;
                heap.push(Flood { value: v[n], order, pixel: n });
                order += 1;
            }
        }
    }
    let mut regions: Vec<Vec<usize>> = vec![Vec::new(); plateaus.len()];
    for (i, &l) in label.iter().enumerate() {
        if l != NONE {
            regions[l].push(i);
        }
    }
    plateaus
        .into_iter()
        .zip(regions)
        .map(|(p, region)| {
            let k = p.len() as f64;
            Peak {
                x: p.iter().map(|&i| (i % w) as f64).sum::<f64>() / k,
                y: p.iter().map(|&i| (i / w) as f64).sum::<f64>() / k,
                value: v[p[0]],
                region,
            }
        })
        .collect()
}

/// Outcome of part-vote rectification, with the quantities worth logging.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rectification {
    #[serde(skip)]
    pub map: HeatMap,
    /// surviving holistic peaks
    pub holistic_peaks: usize,
    /// part maps with exactly one peak
    pub valid_parts: usize,
    pub fired: bool,
    /// mean distance from each holistic peak to the valid part peaks
    pub distances: Vec<f64>,
    pub kept: Option<(f64, f64)>,
}

/// When the holistic map has several peaks, keeps only the basin of the
/// peak closest on average to the single-peaked part maps' peaks.
pub fn rectify_holistic(mh: &HeatMap, parts: &[HeatMap], ratio: f64, min_peaks: usize) -> Rectification {
    let peaks = find_peaks(mh, ratio);
    rectify_with_peaks(mh, &peaks, parts, ratio, min_peaks)
}

/// As [`rectify_holistic`] with precomputed holistic peaks.
pub fn rectify_with_peaks(mh: &HeatMap, peaks: &[Peak], parts: &[HeatMap], ratio: f64, min_peaks: usize) -> Rectification {
    let mut out = Rectification {
        map: mh.clone(),
        holistic_peaks: peaks.len(),
        valid_parts: 0,
        fired: false,
        distances: Vec::new(),
        kept: None,
    };
    if peaks.len() < min_peaks {
        return out;
    }
    let votes: Vec<(f64, f64)> = parts
        .iter()
        .filter_map(|p| {
            let pk = find_peaks(p, ratio);
            (pk.len() == 1).then(|| (pk[0].x, pk[0].y))
        })
        .collect();
    out.valid_parts = votes.len();
    let winner = if votes.is_empty() {
        0
    } else {
        out.distances = peaks
            .iter()
            .map(|pk| votes.iter().map(|(x, y)| (pk.x - x).hypot(pk.y - y)).sum::<f64>() / votes.len() as f64)
            .collect();
        (0..peaks.len()).min_by(|&a, &b| out.distances[a].total_cmp(&out.distances[b]).then(a.cmp(&b))).unwrap()
    };
    let mut values = vec![0.0; mh.values().len()];
    for &i in &peaks[winner].region {
        values[i] = mh.values()[i];
    }
    out.map = HeatMap::new(mh.width(), mh.height(), values).expect("finite");
    out.fired = true;
    out.kept = Some((peaks[winner].x, peaks[winner].y));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bump(w: usize, h: usize, bumps: &[(f64, f64, f64, f64)]) -> HeatMap {
        HeatMap::from_fn(w, h, |x, y| {
            bumps
                .iter()
                .map(|&(cx, cy, s, a)| a * (-((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (2.0 * s * s)).exp())
                .fold(0.0, f64::max)
        })
    }

    #[test]
    fn single_bump_single_peak() {
        let m = bump(46, 46, &[(20.0, 25.0, 4.0, 1.0)]);
        let p = find_peaks(&m, 0.8);
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].x, p[0].y), (20.0, 25.0));
        assert_eq!(p[0].region.len(), 46 * 46);
    }

    #[test]
    fn weak_bump_is_gated() {
        let m = bump(46, 46, &[(10.0, 10.0, 3.0, 1.0), (35.0, 35.0, 3.0, 0.7)]);
        assert_eq!(find_peaks(&m, 0.8).len(), 1);
        assert_eq!(find_peaks(&m, 0.6).len(), 2);
        assert!(find_peaks(&HeatMap::zeros(5, 5), 0.8).is_empty());
    }

    #[test]
    fn plateau_gives_centroid() {
        let mut m = HeatMap::zeros(9, 9);
        for (x, y) in [(3, 3), (4, 3), (5, 3), (4, 4)] {
            m.set(x, y, 1.0);
        }
        let p = find_peaks(&m, 0.8);
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].x, p[0].y), (4.0, 3.25));
    }

    #[test]
    fn constructed_two_peak_case() {
        let mh = bump(46, 46, &[(10.0, 10.0, 3.0, 1.0), (35.0, 35.0, 3.0, 0.95)]);
        let parts = [
            bump(46, 46, &[(34.0, 36.0, 3.0, 1.0)]),
            bump(46, 46, &[(36.0, 34.0, 3.0, 1.0)]),
            bump(46, 46, &[(5.0, 40.0, 3.0, 1.0), (40.0, 5.0, 3.0, 1.0)]),
            bump(46, 46, &[(5.0, 5.0, 3.0, 1.0), (40.0, 40.0, 3.0, 1.0)]),
        ];
        let r = rectify_holistic(&mh, &parts, 0.8, 2);
        assert!(r.fired);
        assert_eq!((r.holistic_peaks, r.valid_parts), (2, 2));
        assert!((r.distances[1] - 2f64.sqrt()).abs() < 1e-12);
        let d1 = ((24.0f64.powi(2) + 26.0f64.powi(2)).sqrt() + (26.0f64.powi(2) + 24.0f64.powi(2)).sqrt()) / 2.0;
        assert!((r.distances[0] - d1).abs() < 1e-12);
        assert_eq!(r.map.get(10, 10), 0.0);
        assert_eq!(r.map.get(35, 35), mh.get(35, 35));
        for (a, b) in r.map.values().iter().zip(mh.values()) {
            assert!(a <= b);
        }
    }

    #[test]
    fn single_peak_passes_through() {
        let mh = bump(46, 46, &[(20.0, 20.0, 5.0, 0.9)]);
        let parts = vec![HeatMap::zeros(46, 46); 4];
        let r = rectify_holistic(&mh, &parts, 0.8, 2);
        assert!(!r.fired);
        assert_eq!(r.map, mh);
    }

    #[test]
    fn no_valid_parts_keeps_strongest() {
        let mh = bump(46, 46, &[(10.0, 10.0, 3.0, 0.9), (35.0, 35.0, 3.0, 1.0)]);
        let multi = bump(46, 46, &[(5.0, 5.0, 3.0, 1.0), (40.0, 40.0, 3.0, 1.0)]);
        let r = rectify_holistic(&mh, &vec![multi; 4], 0.8, 2);
        assert_eq!(r.valid_parts, 0);
        assert_eq!(r.kept, Some((35.0, 35.0)));
        assert_eq!(r.map.get(10, 10), 0.0);
    }

    /// Exhaustive oracle: a pixel is a candidate if no neighbor exceeds it;
    /// an equal-valued connected plateau is a maximum iff all its pixels are
    /// candidates.
    fn oracle(map: &HeatMap, ratio: f64) -> Vec<(f64, f64, f64)> {
        let (w, h) = (map.width() as i64, map.height() as i64);
        let at = |x: i64, y: i64| map.get(x as usize, y as usize);
        let mut candidate = vec![false; (w * h) as usize];
        for y in 0..h {
            for x in 0..w {
                let mut ok = true;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if (dx, dy) != (0, 0) && nx >= 0 && ny >= 0 && nx < w && ny < h && at(nx, ny) > at(x, y) {
                            ok = false;
                        }
                    }
                }
                candidate[(y * w + x) as usize] = ok;
            }
        }
        fn fill(map: &HeatMap, x: i64, y: i64, level: f64, seen: &mut Vec<bool>, out: &mut Vec<(i64, i64)>) {
            let (w, h) = (map.width() as i64, map.height() as i64);
            if x < 0 || y < 0 || x >= w || y >= h || seen[(y * w + x) as usize] || map.get(x as usize, y as usize) != level {
                return;
            }
            seen[(y * w + x) as usize] = true;
            out.push((x, y));
            for dy in -1..=1 {
                for dx in -1..=1 {
                    fill(map, x + dx, y + dy, level, seen, out);
                }
            }
        }
        let global = map.max();
        if !(global > 0.0) {
            return Vec::new();
        }
        let mut seen = vec![false; (w * h) as usize];
        let mut peaks = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if seen[(y * w + x) as usize] {
                    continue;
                }
                let mut plateau = Vec::new();
                fill(map, x, y, at(x, y), &mut seen, &mut plateau);
                if plateau.iter().all(|&(px, py)| candidate[(py * w + px) as usize]) && at(x, y) >= ratio * global {
                    let k = plateau.len() as f64;
                    let cx = plateau.iter().map(|p| p.0 as f64).sum::<f64>() / k;
                    let cy = plateau.iter().map(|p| p.1 as f64).sum::<f64>() / k;
                    peaks.push((cx, cy, at(x, y)));
                }
            }
        }
        peaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        peaks
    }

    fn smooth_random(seed: u64, w: usize, h: usize, quantize: bool) -> HeatMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bumps: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(1..6))
            .map(|_| (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64), rng.gen_range(1.5..6.0), rng.gen_range(0.2..1.0)))
            .collect();
        HeatMap::from_fn(w, h, |x, y| {
            let v: f64 = bumps
                .iter()
                .map(|&(cx, cy, s, a)| a * (-((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (2.0 * s * s)).exp())
                .sum();
            if quantize {
                (v * 8.0).round() / 8.0
            } else {
                v
            }
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(120))]
        #[test]
        fn peaks_match_oracle(seed in any::<u64>(), quantize in any::<bool>(), ratio in 0.3f64..1.0) {
            let m = smooth_random(seed, 30, 24, quantize);
            let mut got: Vec<(f64, f64, f64)> = find_peaks(&m, ratio).iter().map(|p| (p.x, p.y, p.value)).collect();
            got.sort_by(|a, b| a.partial_cmp(b).unwrap());
            prop_assert_eq!(got, oracle(&m, ratio));
        }

        #[test]
        fn basins_partition_and_peak_dominates(seed in any::<u64>()) {
            let m = smooth_random(seed, 30, 24, false);
            let peaks = find_peaks(&m, 0.5);
            let mut count = vec![0u8; 30 * 24];
            for p in &peaks {
                for &i in &p.region {
                    count[i] += 1;
                    prop_assert!(m.values()[i] <= p.value);
                }
            }
            prop_assert!(count.iter().all(|&c| c == 1));
        }
    }
}
