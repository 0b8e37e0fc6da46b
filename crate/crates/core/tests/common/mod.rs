//! Shared oracles for the integration tests.
#![allow(dead_code)]

use polymhe::{Matrix, QuadraticProgram};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random strictly convex QP with `n ≤ 6` variables: the first `m` entries
/// (possibly none) form a simplex block, the rest carry finite boxes.
pub fn random_box_simplex_qp(rng: &mut ChaCha8Rng) -> QuadraticProgram<f64> {
    let n = rng.random_range(1..=6usize);
    let m = if n >= 2 && rng.random_bool(0.6) { rng.random_range(2..=n) } else { 0 };
    let k = rng.random_range(1..=n + 2);
    let b = Matrix::from_fn(k, n, |_, _| rng.random_range(-1.0..1.0));
    let h = b.transpose().matmul(&b).add(&Matrix::identity(n).scale(0.05));
    let f: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut lower = vec![f64::NEG_INFINITY; n];
    let mut upper = vec![f64::INFINITY; n];
    for i in m..n {
        let lo = rng.random_range(-2.0..0.5);
        lower[i] = lo;
        upper[i] = lo + rng.random_range(0.2..2.5);
    }
    let mut qp = QuadraticProgram::new(h, f).with_bounds(lower, upper);
    if m > 0 {
        qp = qp.with_simplex_block(0..m);
    }
    qp
}

fn feasible_box(qp: &QuadraticProgram<f64>, i: usize) -> (f64, f64) {
    let in_simplex = qp.simplex_blocks.iter().any(|b| b.contains(&i));
    if in_simplex {
        (0.0, 1.0)
    } else {
        (qp.lower[i], qp.upper[i])
    }
}

/// Grid-and-refine minimizer for box + simplex QPs. A coarse lattice over
/// the feasible set supplies the start; compass search along coordinate
/// directions (box variables) and pairwise mass transfers (simplex block)
/// with step halving refines it. Independent of the crate's solvers.
pub fn grid_refine_oracle(qp: &QuadraticProgram<f64>) -> (Vec<f64>, f64) {
    let n = qp.dim();
    let block = qp.simplex_blocks.first().cloned().unwrap_or(0..0);
    let m = block.len();
    let res = if n <= 3 { 12 } else { 5 };

    // Coarse lattice: simplex compositions with denominator `res`, box grid.
    let mut simplex_pts: Vec<Vec<f64>> = Vec::new();
    fn compositions(left: usize, parts: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for i in 0..=left {
            cur.push(i);
            compositions(left - i, parts - 1, cur, out);
            cur.pop();
        }
    }
    if m > 0 {
        let mut raw = Vec::new();
        compositions(res, m, &mut Vec::new(), &mut raw);
        simplex_pts = raw
            .into_iter()
            .map(|c| c.into_iter().map(|v| v as f64 / res as f64).collect())
            .collect();
    } else {
        simplex_pts.push(Vec::new());
    }
    let box_idx: Vec<usize> = (0..n).filter(|i| !block.contains(i)).collect();
    let mut best_z = vec![0.0; n];
    let mut best = f64::INFINITY;
    let total_box = (res + 1).pow(box_idx.len() as u32);
    for sp in &simplex_pts {
        for code in 0..total_box {
            let mut z = vec![0.0; n];
            for (j, i) in block.clone().enumerate() {
                z[i] = sp[j];
            }
            let mut c = code;
            for &i in &box_idx {
                let t = (c % (res + 1)) as f64 / res as f64;
                c /= res + 1;
                z[i] = qp.lower[i] + t * (qp.upper[i] - qp.lower[i]);
            }
            let v = qp.objective(&z);
            if v < best {
                best = v;
                best_z = z;
            }
        }
    }

    // Compass refinement.
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for &i in &box_idx {
        let mut d = vec![0.0; n];
        d[i] = 1.0;
        dirs.push(d.clone());
        d[i] = -1.0;
        dirs.push(d);
    }
    for a in block.clone() {
        for b in block.clone() {
            if a != b {
                let mut d = vec![0.0; n];
                d[a] = 1.0;
                d[b] = -1.0;
                dirs.push(d);
            }
        }
    }
    let mut step: f64 = 0.5;
    let mut z = best_z;
    let mut fz = best;
    while step > 1e-13 {
        let mut improved = false;
        for d in &dirs {
            // Largest feasible move up to `step` along d.
            let mut t = step;
            for i in 0..n {
                if d[i] != 0.0 {
                    let (lo, hi) = feasible_box(qp, i);
                    let lim = if d[i] > 0.0 { (hi - z[i]) / d[i] } else { (lo - z[i]) / d[i] };
                    t = t.min(lim.max(0.0));
                }
            }
            if t <= 0.0 {
                continue;
            }
            let cand: Vec<f64> = z.iter().zip(d).map(|(a, b)| a + t * b).collect();
            let fc = qp.objective(&cand);
            if fc < fz {
                z = cand;
                fz = fc;
                improved = true;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (z, fz)
}

/// Independent KKT check for box + single-simplex QPs. Returns the largest
/// violation of stationarity/dual feasibility, normalized by `1 + ‖g‖∞`.
pub fn kkt_violation(qp: &QuadraticProgram<f64>, z: &[f64]) -> f64 {
    let n = qp.dim();
    let hz = qp.h.mul_vec(z);
    let g: Vec<f64> = (0..n).map(|i| hz[i] + qp.f[i]).collect();
    let scale = 1.0 + g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let act = 1e-7;
    let mut worst = 0.0f64;
    let block = qp.simplex_blocks.first().cloned().unwrap_or(0..0);
    if !block.is_empty() {
        let free: Vec<usize> = block.clone().filter(|&i| z[i] > act).collect();
        let mu = if free.is_empty() {
            block.clone().map(|i| g[i]).fold(f64::INFINITY, f64::min)
        } else {
            free.iter().map(|&i| g[i]).sum::<f64>() / free.len() as f64
        };
        for i in block.clone() {
            let r = g[i] - mu;
            if z[i] > act {
                worst = worst.max(r.abs());
            } else {
                worst = worst.max((-r).max(0.0));
            }
        }
        let sum: f64 = block.clone().map(|i| z[i]).sum();
        worst = worst.max((sum - 1.0).abs() * scale);
    }
    for i in (0..n).filter(|i| !block.contains(i)) {
        let at_lo = z[i] - qp.lower[i] <= act;
        let at_hi = qp.upper[i] - z[i] <= act;
        let v = if at_lo && at_hi {
            0.0
        } else if at_lo {
            (-g[i]).max(0.0)
        } else if at_hi {
            g[i].max(0.0)
        } else {
            g[i].abs()
        };
        worst = worst.max(v);
        worst = worst.max((qp.lower[i] - z[i]).max(0.0) * scale);
        worst = worst.max((z[i] - qp.upper[i]).max(0.0) * scale);
    }
    worst / scale
}
