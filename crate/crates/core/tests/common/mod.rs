//! Brute-force reference implementations shared by the integration tests.
//! They work on plain `Vec<Vec<bool>>` grids and never call library metric code.
#![allow(dead_code)]

pub mod gradcheck;

use rand::Rng;
use xview_core::mask::BinaryMask;

pub type Grid = Vec<Vec<bool>>;

pub fn to_grid(m: &BinaryMask) -> Grid {
    (0..m.height())
        .map(|r| (0..m.width()).map(|c| m.get(r, c)).collect())
        .collect()
}

pub fn from_grid(g: &Grid) -> BinaryMask {
    BinaryMask::from_fn(g.len(), g[0].len(), |r, c| g[r][c])
}

/// A random mask: noise, a filled rectangle, an ellipse, or empty.
pub fn random_grid(rng: &mut impl Rng, h: usize, w: usize, allow_empty: bool) -> Grid {
    loop {
        let kind = rng.gen_range(0..if allow_empty { 4 } else { 3 });
        let g: Grid = match kind {
            0 => {
                let p = rng.gen_range(0.05..0.7);
                (0..h).map(|_| (0..w).map(|_| rng.gen_bool(p)).collect()).collect()
            }
            1 => {
                let (r0, c0) = (rng.gen_range(0..h), rng.gen_range(0..w));
                let (r1, c1) = (rng.gen_range(r0..h), rng.gen_range(c0..w));
                (0..h)
                    .map(|r| (0..w).map(|c| (r0..=r1).contains(&r) && (c0..=c1).contains(&c)).collect())
                    .collect()
            }
            2 => {
                let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
                let (ry, rx) = (rng.gen_range(0.5..h as f64), rng.gen_range(0.5..w as f64));
                (0..h)
                    .map(|r| {
                        (0..w)
                            .map(|c| {
                                let dy = (r as f64 - cy) / ry;
                                let dx = (c as f64 - cx) / rx;
                                dy * dy + dx * dx <= 1.0
                            })
                            .collect()
                    })
                    .collect()
            }
            _ => vec![vec![false; w]; h],
        };
        if allow_empty || g.iter().flatten().any(|&b| b) {
            return g;
        }
    }
}

fn count(g: &Grid) -> usize {
    g.iter().flatten().filter(|&&b| b).count()
}

pub fn oracle_iou(p: &Grid, g: &Grid) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for r in 0..g.len() {
        for c in 0..g[0].len() {
            if p[r][c] && g[r][c] {
                inter += 1;
            }
            if p[r][c] || g[r][c] {
                union += 1;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Integer pixel sums `(n, sum_row, sum_col)`.
fn sums(g: &Grid) -> (i64, i64, i64) {
    let mut s = (0, 0, 0);
    for (r, row) in g.iter().enumerate() {
        for (c, &b) in row.iter().enumerate() {
            if b {
                s.0 += 1;
                s.1 += r as i64;
                s.2 += c as i64;
            }
        }
    }
    s
}

pub fn oracle_le(p: &Grid, g: &Grid) -> f64 {
    let (h, w) = (g.len() as f64, g[0].len() as f64);
    let (np, prs, pcs) = sums(p);
    if np == 0 {
        return 1.0;
    }
    let (ng, grs, gcs) = sums(g);
    let dr = prs as f64 / np as f64 - grs as f64 / ng as f64;
    let dc = pcs as f64 / np as f64 - gcs as f64 / ng as f64;
    (dr * dr + dc * dc).sqrt() / (h * h + w * w).sqrt()
}

/// Nearest integer to `num / den` (den > 0), halves away from zero, by
/// searching for the integer k with |num - k*den| minimal.
fn nearest(num: i64, den: i64) -> i64 {
    let mut best = 0i64;
    let mut best_err = i64::MAX;
    let lo = num.div_euclid(den) - 1;
    for k in lo..=lo + 3 {
        let err = (2 * (num - k * den)).abs();
        let better = err < best_err || (err == best_err && k.abs() > best.abs());
        if better {
            best = k;
            best_err = err;
        }
    }
    best
}

pub fn shift_grid(p: &Grid, dr: i64, dc: i64) -> Grid {
    let (h, w) = (p.len() as i64, p[0].len() as i64);
    let mut out = vec![vec![false; w as usize]; h as usize];
    for r in 0..h {
        for c in 0..w {
            if p[r as usize][c as usize] {
                let (nr, nc) = (r + dr, c + dc);
                if (0..h).contains(&nr) && (0..w).contains(&nc) {
                    out[nr as usize][nc as usize] = true;
                }
            }
        }
    }
    out
}

pub fn oracle_ca(p: &Grid, g: &Grid) -> f64 {
    let (np, prs, pcs) = sums(p);
    if np == 0 {
        return 0.0;
    }
    let (ng, grs, gcs) = sums(g);
    let dr = nearest(grs * np - prs * ng, ng * np);
    let dc = nearest(gcs * np - pcs * ng, ng * np);
    oracle_iou(&shift_grid(p, dr, dc), g)
}

/// Balanced accuracy from an explicit confusion matrix; `None` for one class.
pub fn oracle_va(preds: &[bool], gts: &[bool]) -> Option<f64> {
    let mut m = [[0usize; 2]; 2]; // m[gt][pred]
    for (&p, &g) in preds.iter().zip(gts) {
        m[g as usize][p as usize] += 1;
    }
    let pos = m[1][0] + m[1][1];
    let neg = m[0][0] + m[0][1];
    if pos == 0 || neg == 0 {
        return None;
    }
    Some(0.5 * (m[1][1] as f64 / pos as f64 + m[0][0] as f64 / neg as f64))
}

/// Column-major run lengths starting with a (possibly empty) run of zeros.
pub fn oracle_rle(g: &Grid) -> Vec<u64> {
    let (h, w) = (g.len(), g[0].len());
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u64;
    for c in 0..w {
        for row in g.iter().take(h) {
            if row[c] == current {
                len += 1;
            } else {
                runs.push(len);
                current = row[c];
                len = 1;
            }
        }
    }
    runs.push(len);
    runs
}
