//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use musicdiff::autodiff::Tensor;
use musicdiff::metrics::SelfSimilarityMatrix;
use musicdiff::midi::{GridNote, QuantizedScore, TimeSignature};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_vec(rows, cols, uniform_vec(rng, rows * cols, -scale, scale))
}

/// `1 - SSIM` from explicit first and second moments.
pub fn ssim_oracle(a: &[f64], b: &[f64]) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let n = a.len() as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sa += x;
        sb += y;
    }
    let (ma, mb) = (sa / n, sb / n);
    for (&x, &y) in a.iter().zip(b) {
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
        sab += (x - ma) * (y - mb);
    }
    let (va, vb, cov) = (saa / n, sbb / n, sab / n);
    let ssim = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma.powi(2) + mb.powi(2) + c1) * (va + vb + c2));
    1.0 - ssim
}

/// Direct quadratic evaluation of the decayed causal average. Inputs are
/// row-major `len × decay.len()`.
pub fn wkv_oracle(decay: &[f64], keys: &[f64], values: &[f64], len: usize) -> Vec<f64> {
    let d = decay.len();
    let mut out = vec![0.0; len * d];
    for c in 0..d {
        for t in 0..len {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..=t {
                let w = (decay[c] * (t - i) as f64 + keys[i * d + c]).exp();
                num += w * values[i * d + c];
                den += w;
            }
            out[t * d + c] = num / den;
        }
    }
    out
}

/// Central finite difference of `f` along coordinate `i` of `x`.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] = x[i] + h;
    let up = f(&p);
    p[i] = x[i] - h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

/// Largest relative error between `analytic` and central differences of `f`
/// over `probes` random coordinates.
pub fn max_fd_error(f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], probes: usize, rng: &mut impl Rng) -> f64 {
    assert_eq!(x.len(), analytic.len());
    (0..probes)
        .map(|_| {
            let i = rng.random_range(0..x.len());
            let numeric = central_difference(f, x, i, 1e-5);
            let scale = numeric.abs().max(analytic[i].abs()).max(1e-6);
            (numeric - analytic[i]).abs() / scale
        })
        .fold(0.0, f64::max)
}

/// Minimum of `w^T M w` over a regular simplex grid of resolution `steps`.
pub fn simplex_grid_min(gram: &[Vec<f64>], steps: usize) -> f64 {
    assert_eq!(gram.len(), 3);
    let mut best = f64::INFINITY;
    for i in 0..=steps {
        for j in 0..=steps - i {
            let w = [i as f64 / steps as f64, j as f64 / steps as f64, (steps - i - j) as f64 / steps as f64];
            let v: f64 = (0..3).flat_map(|a| (0..3).map(move |b| (a, b))).map(|(a, b)| w[a] * w[b] * gram[a][b]).sum();
            best = best.min(v);
        }
    }
    best
}

/// A random 4/4 score of `1..=max_bars` bars in which some bars copy an
/// earlier one, often at a fixed lag so that multi-bar segments repeat.
/// Durations stay within the 64-step token range.
pub fn random_score(rng: &mut impl Rng, max_bars: usize) -> QuantizedScore {
    let bars = rng.random_range(1..=max_bars);
    let lag = rng.random_range(4..=8);
    let mut per_bar: Vec<Vec<(u32, u8, u32, u8)>> = Vec::with_capacity(bars);
    for b in 0..bars {
        if b >= lag && rng.random_bool(0.6) {
            let src = per_bar[b - lag].clone();
            per_bar.push(src);
            continue;
        }
        if b > 0 && rng.random_bool(0.3) {
            let src = per_bar[rng.random_range(0..b)].clone();
            per_bar.push(src);
            continue;
        }
        let count = if rng.random_bool(0.1) { 0 } else { rng.random_range(1..8) };
        let notes = (0..count)
            .map(|_| (rng.random_range(0..16), rng.random_range(36..96), rng.random_range(1..=8), rng.random_range(1..128)))
            .collect();
        per_bar.push(notes);
    }
    if per_bar.iter().all(Vec::is_empty) {
        per_bar[0].push((0, 60, 4, 90));
    }
    let notes = per_bar
        .iter()
        .enumerate()
        .flat_map(|(b, ns)| {
            ns.iter().map(move |&(pos, pitch, duration, velocity)| GridNote { pitch, onset: b as u32 * 16 + pos, duration, velocity })
        })
        .collect();
    within_token_range(QuantizedScore::from_notes_with_bars(TimeSignature::COMMON, notes, bars), bars)
}

/// A score whose notes may extend past the last onset bar and use the whole
/// duration range.
pub fn random_wide_score(rng: &mut impl Rng) -> QuantizedScore {
    let bars = rng.random_range(1..=8u32);
    let count = rng.random_range(1..24);
    let notes = (0..count)
        .map(|_| GridNote {
            pitch: rng.random_range(0..128),
            onset: rng.random_range(0..bars * 16),
            duration: *[1u32, 2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64].choose(rng).unwrap(),
            velocity: rng.random_range(1..128),
        })
        .collect();
    within_token_range(QuantizedScore::from_notes(TimeSignature::COMMON, notes), 0)
}

/// Cap durations produced by same-pitch merging at the longest duration token.
fn within_token_range(q: QuantizedScore, bars: usize) -> QuantizedScore {
    let notes = q.notes().iter().map(|n| GridNote { duration: n.duration.min(64), ..*n }).collect();
    QuantizedScore::from_notes_with_bars(TimeSignature::COMMON, notes, bars.max(q.num_bars()))
}

/// Brute-force metric twins. Notes are regrouped from scratch rather than
/// read through the per-bar accessors.
pub mod twins {
    use super::*;

    fn notes_by_bar(q: &QuantizedScore) -> Vec<Vec<GridNote>> {
        let spb = q.semiquavers_per_bar;
        let mut out = vec![Vec::new(); q.num_bars()];
        for n in q.notes() {
            out[(n.onset / spb) as usize].push(*n);
        }
        out
    }

    pub fn pcu_tup_pr(q: &QuantizedScore) -> (f64, f64, f64) {
        let mut totals = (0usize, 0usize, 0usize, 0usize);
        for bar in notes_by_bar(q).into_iter().filter(|b| !b.is_empty()) {
            let classes: BTreeSet<u8> = bar.iter().map(|n| n.pitch % 12).collect();
            let pitches: BTreeSet<u8> = bar.iter().map(|n| n.pitch).collect();
            totals.0 += classes.len();
            totals.1 += pitches.len();
            totals.2 += (pitches.last().unwrap() - pitches.first().unwrap()) as usize;
            totals.3 += 1;
        }
        let n = totals.3 as f64;
        (totals.0 as f64 / n, totals.1 as f64 / n, totals.2 as f64 / n)
    }

    pub fn aps(q: &QuantizedScore) -> f64 {
        let mut seq: Vec<(u32, u8)> = q.notes().iter().map(|n| (n.onset, n.pitch)).collect();
        seq.sort();
        if seq.len() < 2 {
            return 0.0;
        }
        let mut total = 0u64;
        for i in 1..seq.len() {
            total += (seq[i].1 as i64 - seq[i - 1].1 as i64).unsigned_abs();
        }
        total as f64 / (seq.len() - 1) as f64
    }

    pub fn isr(q: &QuantizedScore) -> f64 {
        let total = q.num_bars() as u32 * q.semiquavers_per_bar;
        let covered = (0..total).filter(|&s| q.notes().iter().any(|n| n.onset <= s && s < n.onset + n.duration)).count();
        covered as f64 / total as f64
    }

    pub fn prs(q: &QuantizedScore) -> f64 {
        q.notes().iter().filter(|n| n.duration >= 5).count() as f64 / q.notes().len() as f64
    }

    pub fn ioi(q: &QuantizedScore) -> f64 {
        let onsets: BTreeSet<u32> = q.notes().iter().map(|n| n.onset).collect();
        if onsets.len() < 2 {
            return 0.0;
        }
        let span = onsets.last().unwrap() - onsets.first().unwrap();
        span as f64 / (onsets.len() - 1) as f64 / 4.0
    }

    fn onset_positions(q: &QuantizedScore, bar: &[GridNote]) -> BTreeSet<u32> {
        bar.iter().map(|n| n.onset % q.semiquavers_per_bar).collect()
    }

    pub fn gs(q: &QuantizedScore) -> f64 {
        let bars = notes_by_bar(q);
        if bars.len() < 2 {
            return 0.0;
        }
        let spb = q.semiquavers_per_bar as f64;
        let mut sum = 0.0;
        for pair in bars.windows(2) {
            let (a, b) = (onset_positions(q, &pair[0]), onset_positions(q, &pair[1]));
            sum += 1.0 - a.symmetric_difference(&b).count() as f64 / spb;
        }
        sum / (bars.len() - 1) as f64
    }

    fn entropy(hist: &[u64; 12]) -> f64 {
        let total: u64 = hist.iter().sum();
        let mut h = 0.0;
        for &c in hist {
            if c > 0 {
                let p = c as f64 / total as f64;
                h += -p * p.log2();
            }
        }
        h
    }

    pub fn pch(q: &QuantizedScore) -> f64 {
        let bars = notes_by_bar(q);
        let (mut total, mut windows) = (0.0, 0usize);
        for chunk in bars.chunks(4) {
            let mut hist = [0u64; 12];
            for n in chunk.iter().flatten() {
                hist[(n.pitch % 12) as usize] += 1;
            }
            if hist.iter().sum::<u64>() > 0 {
                total += entropy(&hist);
                windows += 1;
            }
        }
        if windows == 0 {
            0.0
        } else {
            total / windows as f64
        }
    }

    pub fn cpi(chords: &[u8]) -> f64 {
        if chords.len() < 2 {
            return 0.0;
        }
        let pairs: Vec<(u8, u8)> = (1..chords.len()).map(|i| (chords[i - 1], chords[i])).collect();
        let mut counts: BTreeMap<(u8, u8), usize> = BTreeMap::new();
        for p in &pairs {
            *counts.entry(*p).or_default() += 1;
        }
        pairs.iter().filter(|p| counts[p] == 1).count() as f64 / pairs.len() as f64
    }

    pub fn features(q: &QuantizedScore, bar: &[GridNote]) -> Vec<f64> {
        let spb = q.semiquavers_per_bar as usize;
        let mut f = vec![0.0; 12 + spb];
        if bar.is_empty() {
            return f;
        }
        let positions = onset_positions(q, bar);
        for n in bar {
            f[(n.pitch % 12) as usize] += 1.0;
        }
        for &p in &positions {
            f[12 + p as usize] = 1.0 / positions.len() as f64;
        }
        for x in &mut f[..12] {
            *x /= bar.len() as f64;
        }
        f
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        if a == b {
            return 1.0;
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (na, nb) = (norm(a), norm(b));
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        (dot / (na * nb)).clamp(0.0, 1.0)
    }

    /// Full matrix, every entry computed directly.
    pub fn ssm(q: &QuantizedScore) -> Vec<Vec<f64>> {
        let feats: Vec<Vec<f64>> = notes_by_bar(q).iter().map(|b| features(q, b)).collect();
        let n = feats.len();
        (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { cosine(&feats[i], &feats[j]) }).collect()).collect()
    }

    fn seg_mean(m: &[Vec<f64>], a: usize, b: usize, len: usize) -> f64 {
        let mut s = 0.0;
        for k in 0..len {
            s += m[a + k][b + k];
        }
        s / len as f64
    }

    /// A bar is covered when it lies inside a pair of disjoint repeated
    /// segments of at least four bars.
    pub fn si(m: &[Vec<f64>]) -> f64 {
        let n = m.len();
        if n == 0 {
            return 0.0;
        }
        let covered = (0..n)
            .filter(|&bar| {
                (4..=n / 2).any(|len| {
                    (0..n).any(|a| {
                        (0..n).any(|b| {
                            a + len <= b
                                && b + len <= n
                                && (a..a + len).chain(b..b + len).any(|k| k == bar)
                                && seg_mean(m, a, b, len) >= 0.95
                        })
                    })
                })
            })
            .count();
        covered as f64 / n as f64
    }

    /// `grid[len - 1][start]`, zero outside the valid triangle.
    pub fn fitness(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = m.len();
        let mut grid = vec![vec![0.0; n]; n];
        for len in 1..=n {
            for start in 0..=n - len {
                let mut best = 0.0f64;
                for other in 0..=n - len {
                    let disjoint = other >= start + len || start >= other + len;
                    if disjoint {
                        best = best.max(seg_mean(m, start, other, len));
                    }
                }
                grid[len - 1][start] = best;
            }
        }
        grid
    }

    pub fn ppl(log_probs: &[Vec<f64>]) -> f64 {
        let mut nll = 0.0;
        let mut count = 0.0;
        for lp in log_probs.iter().flatten() {
            nll -= lp;
            count += 1.0;
        }
        (nll / count).exp()
    }

    pub fn matrix_of(ssm: &SelfSimilarityMatrix) -> Vec<Vec<f64>> {
        (0..ssm.len()).map(|i| (0..ssm.len()).map(|j| ssm.get(i, j)).collect()).collect()
    }
}
