//! Analytic GPU/NDP load-balance solver.
//!
//! For one MoE layer, `e_g` experts' worth of weights stream to the GPU over
//! PCIe while the remaining `e_n = topk - e_g` expert-units run
//! tensor-parallel on the DIMMs. The split is balanced when
//!
//! ```text
//! t_w*e_g + t_g*e_g' + stream  =  (N+1)*t_a + t_n*(topk - e_g)
//! ```
//!
//! where `stream = (S-1)*t_a*N` is the activation streaming cost of keeping
//! the GPU engaged across a prefill batch (zero for decode, S = 1), and
//! `e_g'` is the *unhidden* GPU compute fraction: weight transfer hides GPU
//! compute except for the final fractional shard, so
//!
//! * `e_g` an exact multiple of N (including 0): `e_g' = 1/N`
//! * `e_g` any other exact integer: `e_g' = 0`
//! * otherwise: `e_g' = frac(e_g)/N`
//!
//! The `frac()` term makes the residual piecewise affine with downward jumps
//! at integers, so the solver bisects each unit interval where the residual
//! crosses zero and otherwise evaluates the discontinuity points and clamped
//! boundaries, picking the smallest-|residual| candidate (ties toward smaller
//! `e_g`, i.e. less PCIe traffic).

use crate::cost::LatencyPrimitives;

/// Two floats closer than this count as the same integer in the `e_g'` rule.
pub const INTEGER_EPS: f64 = 1e-9;
/// Candidate offset from interval boundaries; matches the reference grid
/// used by the brute-force verification scan.
const GRID_EDGE: f64 = 1e-5;
/// Probe offset for sign evaluation just inside an interval (must exceed
/// `INTEGER_EPS` so the continuous branch of `e_g'` applies).
const INTERVAL_PROBE: f64 = 2e-9;
/// Bisection interval width at which iteration stops.
const BISECT_TOL: f64 = 1e-13;
/// |residual| below which a candidate counts as an exact root.
const ROOT_OK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceInputs {
    pub t_w: f64,
    pub t_g: f64,
    pub t_n: f64,
    pub t_a: f64,
    pub topk: usize,
    pub ndp_count: usize,
    /// Stage batch size: prompt length for prefill, 1 for decode.
    pub seq_len: usize,
}

impl BalanceInputs {
    pub fn from_primitives(
        p: &LatencyPrimitives,
        topk: usize,
        ndp_count: usize,
        seq_len: usize,
    ) -> Self {
        BalanceInputs {
            t_w: p.t_w,
            t_g: p.t_g,
            t_n: p.t_n,
            t_a: p.t_a,
            topk,
            ndp_count,
            seq_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clamp {
    /// Balanced split found inside (0, topk).
    Interior,
    /// GPU never profitable; everything stays on the DIMMs (e_g = 0).
    Low,
    /// GPU takes all topk expert-units (e_g = topk).
    High,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceSolution {
    pub e_g: f64,
    pub e_n: f64,
    pub e_g_prime: f64,
    pub lhs_time: f64,
    pub rhs_time: f64,
    /// Signed `lhs_time - rhs_time` at the returned `e_g`.
    pub residual: f64,
    pub clamp: Clamp,
}

/// Unhidden GPU compute fraction for a given split.
pub fn e_g_prime(e_g: f64, ndp_count: usize) -> f64 {
    let n = ndp_count as f64;
    let r = e_g.round();
    if (e_g - r).abs() < INTEGER_EPS {
        if (r as i64).rem_euclid(ndp_count as i64) == 0 {
            1.0 / n
        } else {
            0.0
        }
    } else {
        e_g.fract() / n
    }
}

fn stream_term(i: &BalanceInputs) -> f64 {
    (i.seq_len.saturating_sub(1)) as f64 * i.t_a * i.ndp_count as f64
}

/// GPU-side time of the balance equation at a given split.
pub fn lhs_time(i: &BalanceInputs, e_g: f64) -> f64 {
    i.t_w * e_g + i.t_g * e_g_prime(e_g, i.ndp_count) + stream_term(i)
}

/// NDP-side time of the balance equation at a given split.
pub fn rhs_time(i: &BalanceInputs, e_g: f64) -> f64 {
    (i.ndp_count as f64 + 1.0) * i.t_a + i.t_n * (i.topk as f64 - e_g)
}

/// Signed balance residual at a given split.
pub fn residual_at(i: &BalanceInputs, e_g: f64) -> f64 {
    lhs_time(i, e_g) - rhs_time(i, e_g)
}

fn bisect(i: &BalanceInputs, mut a: f64, mut b: f64, mut fa: f64) -> f64 {
    while b - a > BISECT_TOL {
        let m = 0.5 * (a + b);
        let fm = residual_at(i, m);
        if fm == 0.0 {
            return m;
        }
        if fa * fm < 0.0 {
            b = m;
        } else {
            a = m;
            fa = fm;
        }
    }
    0.5 * (a + b)
}

fn solve(i: &BalanceInputs) -> BalanceSolution {
    let topk = i.topk as f64;
    let mut candidates: Vec<f64> = Vec::with_capacity(6 * i.topk + 2);
    for k in 0..=i.topk {
        candidates.push(k as f64);
    }
    for k in 0..i.topk {
        let a = k as f64;
        let b = a + 1.0;
        candidates.push(a + GRID_EDGE);
        candidates.push(b - GRID_EDGE);
        let (pa, pb) = (a + INTERVAL_PROBE, b - INTERVAL_PROBE);
        candidates.push(pa);
        candidates.push(pb);
        let (fa, fb) = (residual_at(i, pa), residual_at(i, pb));
        if fa == 0.0 || fb == 0.0 {
            continue; // the probes themselves are already candidates
        }
        if fa * fb < 0.0 {
            candidates.push(bisect(i, pa, pb, fa));
        }
    }
    candidates.sort_by(|x, y| x.partial_cmp(y).unwrap());

    // Smallest |residual| wins; anything within the tie threshold keeps the
    // earlier (smaller e_g) candidate so float noise between two exact roots
    // cannot flip the choice toward more PCIe traffic.
    let tie = 1e-12 * (i.t_w + i.t_g + i.t_n + i.t_a);
    let mut best_e = candidates[0];
    let mut best_f = residual_at(i, best_e).abs();
    for &e in &candidates[1..] {
        let fe = residual_at(i, e).abs();
        if fe + tie < best_f {
            best_f = fe;
            best_e = e;
        }
    }

    let clamp = if best_f <= ROOT_OK {
        Clamp::Interior
    } else if best_e <= GRID_EDGE + INTEGER_EPS {
        Clamp::Low
    } else if best_e >= topk - GRID_EDGE - INTEGER_EPS {
        Clamp::High
    } else {
        Clamp::Interior
    };
    let e_g = match clamp {
        Clamp::Low => 0.0,
        Clamp::High => topk,
        Clamp::Interior => best_e,
    };
    let lhs = lhs_time(i, e_g);
    let rhs = rhs_time(i, e_g);
    BalanceSolution {
        e_g,
        e_n: topk - e_g,
        e_g_prime: e_g_prime(e_g, i.ndp_count),
        lhs_time: lhs,
        rhs_time: rhs,
        residual: lhs - rhs,
        clamp,
    }
}

/// Balanced split for a decode step (single token, no streaming term).
pub fn solve_decode(inputs: &BalanceInputs) -> BalanceSolution {
    solve(&BalanceInputs {
        seq_len: 1,
        ..*inputs
    })
}

/// Balanced split for prefill; with `seq_len = 1` this is exactly
/// [`solve_decode`].
pub fn solve_prefill(inputs: &BalanceInputs) -> BalanceSolution {
    solve(inputs)
}

/// Largest GPU-resident expert count that the NDP side still hides:
/// `E_max = (topk*t_n + (1+N)*t_a) / (t_g + t_n)`, clamped to [0, topk].
pub fn solve_e_max(i: &BalanceInputs) -> f64 {
    let n = i.ndp_count as f64;
    debug_assert!(i.t_g + i.t_n > 0.0, "t_g + t_n must be positive");
    let raw = (i.topk as f64 * i.t_n + (1.0 + n) * i.t_a) / (i.t_g + i.t_n);
    raw.clamp(0.0, i.topk as f64)
}
