//! Independent oracles for acceptance and property tests.
//!
//! Everything here recomputes from first principles and shares no code with
//! the implementation paths it checks: the transport objective and its
//! exhaustive grid-search minimizer are written against the objective
//! definition alone, and the box-overlap oracle counts pixels by membership
//! tests instead of rasterized masks.

use crate::geometry::BBox;

/// A small UOT instance stated explicitly, independent of
/// [`crate::transport::PixelDistribution`].
#[derive(Debug, Clone)]
pub struct UotProblem {
    pub ref_coords: Vec<[f64; 2]>,
    pub ref_weights: Vec<f64>,
    pub tgt_coords: Vec<[f64; 2]>,
    pub tgt_weights: Vec<f64>,
    pub epsilon: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl UotProblem {
    fn cost(&self, i: usize, j: usize) -> f64 {
        let [xi, yi] = self.ref_coords[i];
        let [xj, yj] = self.tgt_coords[j];
        (xi - xj).powi(2) + (yi - yj).powi(2)
    }
}

/// Generalized KL divergence term `p ln(p/q) - p + q`, with `0 ln 0 = 0`.
pub fn generalized_kl(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        q
    } else {
        p * (p / q).ln() - p + q
    }
}

/// The entropic-UOT objective of an arbitrary plan (row-major):
/// transport cost + eps*KL(T || a (x) b) + lambda1*KL(T1 || a)
/// + lambda2*KL(T'1 || b), all with the generalized KL.
pub fn uot_objective(p: &UotProblem, plan: &[f64]) -> f64 {
    let n = p.ref_coords.len();
    let m = p.tgt_coords.len();
    assert_eq!(plan.len(), n * m, "plan shape mismatch");
    let mut obj = 0.0;
    let mut row_sums = vec![0.0; n];
    let mut col_sums = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            let t = plan[i * m + j];
            obj += p.cost(i, j) * t;
            obj += p.epsilon * generalized_kl(t, p.ref_weights[i] * p.tgt_weights[j]);
            row_sums[i] += t;
            col_sums[j] += t;
        }
    }
    for (sum, weight) in row_sums.iter().zip(&p.ref_weights) {
        obj += p.lambda1 * generalized_kl(*sum, *weight);
    }
    for (sum, weight) in col_sums.iter().zip(&p.tgt_weights) {
        obj += p.lambda2 * generalized_kl(*sum, *weight);
    }
    obj
}

/// Exact minimum of [`uot_objective`] over the grid `{0, step, ..., 1}` per
/// plan entry, for problems whose plan is a single row or a single column.
///
/// Only one marginal couples the entries then, so the grid minimum is found
/// exactly by dynamic programming over entry sums instead of enumerating
/// every combination.
pub fn grid_search_minimum(p: &UotProblem, step: f64) -> f64 {
    let n = p.ref_coords.len();
    let m = p.tgt_coords.len();
    assert!(
        n == 1 || m == 1,
        "grid search supports single-row or single-column plans"
    );
    let grid_n = (1.0 / step).round() as usize;

    // Per-entry separable term and the coupled-marginal term.
    let entries = n.max(m);
    let phi = |entry: usize, t: f64| -> f64 {
        let (i, j) = if n == 1 { (0, entry) } else { (entry, 0) };
        let mut v =
            p.cost(i, j) * t + p.epsilon * generalized_kl(t, p.ref_weights[i] * p.tgt_weights[j]);
        if n == 1 {
            v += p.lambda2 * generalized_kl(t, p.tgt_weights[j]);
        } else {
            v += p.lambda1 * generalized_kl(t, p.ref_weights[i]);
        }
        v
    };
    let rho = |sum: f64| -> f64 {
        if n == 1 {
            p.lambda1 * generalized_kl(sum, p.ref_weights[0])
        } else {
            p.lambda2 * generalized_kl(sum, p.tgt_weights[0])
        }
    };

    let tabulate =
        |entry: usize| -> Vec<f64> { (0..=grid_n).map(|k| phi(entry, k as f64 * step)).collect() };
    let mut dp = tabulate(0);
    for entry in 1..entries {
        let table = tabulate(entry);
        let mut next = vec![f64::INFINITY; dp.len() + grid_n];
        for (s, &acc) in dp.iter().enumerate() {
            for (k, &v) in table.iter().enumerate() {
                let cand = acc + v;
                if cand < next[s + k] {
                    next[s + k] = cand;
                }
            }
        }
        dp = next;
    }
    dp.iter()
        .enumerate()
        .map(|(s, &acc)| acc + rho(s as f64 * step))
        .fold(f64::INFINITY, f64::min)
}

/// The fixed ten-problem battery the solver is oracle-checked against:
/// single-row and single-column plans with two or three entries, at the
/// production coefficients (eps = 0.05, lambda = 0.1).
pub fn standard_battery() -> Vec<UotProblem> {
    let mk = |rc: Vec<[f64; 2]>, rw: Vec<f64>, tc: Vec<[f64; 2]>, tw: Vec<f64>| UotProblem {
        ref_coords: rc,
        ref_weights: rw,
        tgt_coords: tc,
        tgt_weights: tw,
        epsilon: 0.05,
        lambda1: 0.1,
        lambda2: 0.1,
    };
    vec![
        mk(vec![[0.5, 0.5]], vec![1.0], vec![[0.5, 0.5]], vec![1.0]),
        mk(vec![[0.0, 0.0]], vec![1.0], vec![[1.0, 1.0]], vec![1.0]),
        mk(
            vec![[0.2, 0.2]],
            vec![1.0],
            vec![[0.2, 0.2], [0.8, 0.2]],
            vec![0.6, 0.4],
        ),
        mk(
            vec![[0.1, 0.5], [0.9, 0.5]],
            vec![0.3, 0.7],
            vec![[0.5, 0.5]],
            vec![1.0],
        ),
        mk(
            vec![[0.5, 0.1]],
            vec![1.0],
            vec![[0.1, 0.9], [0.5, 0.9], [0.9, 0.9]],
            vec![0.2, 0.5, 0.3],
        ),
        mk(
            vec![[0.0, 0.0], [0.5, 0.2], [1.0, 0.4]],
            vec![0.7, 0.2, 0.1],
            vec![[0.4, 0.1]],
            vec![1.0],
        ),
        mk(
            vec![[0.9, 0.9]],
            vec![1.0],
            vec![[0.85, 0.9], [0.1, 0.1]],
            vec![0.95, 0.05],
        ),
        mk(
            vec![[0.3, 0.3]],
            vec![1.0],
            vec![[0.28, 0.3], [0.32, 0.3], [0.3, 0.34]],
            vec![0.33, 0.33, 0.34],
        ),
        mk(
            vec![[0.0, 0.5], [1.0, 0.5]],
            vec![0.5, 0.5],
            vec![[0.0, 0.0]],
            vec![1.0],
        ),
        mk(
            vec![[0.5, 0.5]],
            vec![1.0],
            vec![[0.45, 0.5], [0.55, 0.5]],
            vec![0.5, 0.5],
        ),
    ]
}

/// Per-pixel membership counting over the union regions of two box lists:
/// `(intersection, union, area_a, area_b)`.
pub fn brute_force_union_counts(
    boxes_a: &[BBox],
    boxes_b: &[BBox],
    dims: (u32, u32),
) -> (u64, u64, u64, u64) {
    let (mut i, mut u, mut a, mut b) = (0u64, 0u64, 0u64, 0u64);
    for y in 0..dims.1 {
        for x in 0..dims.0 {
            let in_a = boxes_a.iter().any(|bb| bb.contains(x, y));
            let in_b = boxes_b.iter().any(|bb| bb.contains(x, y));
            i += (in_a && in_b) as u64;
            u += (in_a || in_b) as u64;
            a += in_a as u64;
            b += in_b as u64;
        }
    }
    (i, u, a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_terms() {
        assert_eq!(generalized_kl(0.0, 0.3), 0.3);
        assert!(generalized_kl(0.5, 0.5).abs() < 1e-15);
        assert!(generalized_kl(0.4, 0.2) > 0.0);
    }

    #[test]
    fn grid_search_finds_the_analytic_singleton_optimum() {
        // 1x1 at distance^2 = 0.25: optimum t* = exp(-C/(eps+l1+l2)).
        let p = UotProblem {
            ref_coords: vec![[0.0, 0.0]],
            ref_weights: vec![1.0],
            tgt_coords: vec![[0.5, 0.0]],
            tgt_weights: vec![1.0],
            epsilon: 0.05,
            lambda1: 0.1,
            lambda2: 0.1,
        };
        let t_star = (-0.25f64 / 0.25).exp();
        let f_star = uot_objective(&p, &[t_star]);
        let g = grid_search_minimum(&p, 1e-3);
        assert!(g >= f_star - 1e-12);
        assert!(g <= f_star + 1e-4, "grid {g} vs analytic {f_star}");
    }

    #[test]
    fn dp_matches_brute_force_on_a_coarse_grid() {
        let p = UotProblem {
            ref_coords: vec![[0.1, 0.2]],
            ref_weights: vec![1.0],
            tgt_coords: vec![[0.2, 0.2], [0.8, 0.5]],
            tgt_weights: vec![0.6, 0.4],
            epsilon: 0.05,
            lambda1: 0.1,
            lambda2: 0.1,
        };
        let step = 0.02f64;
        let grid_n = (1.0 / step).round() as usize;
        let mut brute = f64::INFINITY;
        for k1 in 0..=grid_n {
            for k2 in 0..=grid_n {
                let plan = [k1 as f64 * step, k2 as f64 * step];
                brute = brute.min(uot_objective(&p, &plan));
            }
        }
        let dp = grid_search_minimum(&p, step);
        assert!((dp - brute).abs() < 1e-9, "dp {dp} vs brute {brute}");
    }

    #[test]
    fn brute_force_counts_match_hand_values() {
        let a = [BBox::new(0, 0, 10, 10).unwrap()];
        let b = [BBox::new(5, 0, 15, 10).unwrap()];
        assert_eq!(
            brute_force_union_counts(&a, &b, (32, 32)),
            (50, 150, 100, 100)
        );
    }
}
