//! Entropic unbalanced optimal transport between pixel distributions.
//!
//! The solver minimizes
//!
//! ```text
//! sum_ij C_ij T_ij + eps*KL(T || a (x) b) + lambda1*KL(T1 || a) + lambda2*KL(T'1 || b)
//! ```
//!
//! over nonnegative plans `T`, where `C` is squared Euclidean distance
//! between pixel coordinates normalized to the unit square, `a`/`b` are the
//! intensity-weighted marginals and `KL` is the generalized Kullback-Leibler
//! divergence. Sinkhorn iterations run in the log domain: the scaling
//! updates `u <- (a/(Kv))^(l1/(l1+eps))`, `v <- (b/(K'u))^(l2/(l2+eps))`
//! against the marginal-weighted Gibbs kernel `K_ij = a_i b_j exp(-C_ij/eps)`
//! become additive updates on log-potentials, which keeps 3136-point kernels
//! at `eps = 0.05` far away from underflow.
//!
//! When both distributions come from full image grids the squared-distance
//! kernel factorizes over the two axes, so every kernel product is evaluated
//! as two small matrix products instead of one dense `N x M` pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Intensity floor applied before normalization so that black pixels keep a
/// representable mass and every KL term stays finite.
pub const INTENSITY_FLOOR: f64 = 1e-8;

/// Default fraction of transported mass a dense core must cover.
pub const DEFAULT_COVERAGE: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Grid {
    width: usize,
    height: usize,
}

impl Grid {
    fn scale(&self) -> f64 {
        self.width.max(self.height) as f64
    }

    fn coord(&self, index: usize) -> [f64; 2] {
        let s = self.scale();
        let x = (index % self.width) as f64;
        let y = (index / self.width) as f64;
        [(x + 0.5) / s, (y + 0.5) / s]
    }
}

/// Discrete distribution over 2-D points in the unit square.
///
/// Weights are clamped to [`INTENSITY_FLOOR`] and normalized to sum to one.
#[derive(Debug, Clone)]
pub struct PixelDistribution {
    coords: Vec<[f64; 2]>,
    weights: Vec<f64>,
    grid: Option<Grid>,
}

impl PixelDistribution {
    /// Build from explicit points. Coordinates must lie in `[0,1]^2`.
    pub fn new(coords: Vec<[f64; 2]>, weights: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::EmptyDistribution);
        }
        if coords.len() != weights.len() {
            return Err(Error::DistributionLengthMismatch {
                coords: coords.len(),
                weights: weights.len(),
            });
        }
        for c in &coords {
            if !(0.0..=1.0).contains(&c[0]) || !(0.0..=1.0).contains(&c[1]) {
                return Err(Error::InvalidParams(format!(
                    "coordinate ({}, {}) outside the unit square",
                    c[0], c[1]
                )));
            }
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParams(
                "weights must be finite and nonnegative".to_string(),
            ));
        }
        let clamped: Vec<f64> = weights.iter().map(|&w| w.max(INTENSITY_FLOOR)).collect();
        let sum: f64 = clamped.iter().sum();
        let weights = clamped.into_iter().map(|w| w / sum).collect();
        Ok(PixelDistribution {
            coords,
            weights,
            grid: None,
        })
    }

    /// Build from an image: one point per pixel at the pixel center scaled
    /// by `1/max(W,H)`, weighted by clamped, normalized intensity.
    pub fn from_image(img: &GrayImage) -> Self {
        let grid = Grid {
            width: img.width() as usize,
            height: img.height() as usize,
        };
        let n = grid.width * grid.height;
        let coords = (0..n).map(|i| grid.coord(i)).collect();
        let clamped: Vec<f64> = img
            .data()
            .iter()
            .map(|&v| (v as f64).max(INTENSITY_FLOOR))
            .collect();
        let sum: f64 = clamped.iter().sum();
        PixelDistribution {
            coords,
            weights: clamped.into_iter().map(|w| w / sum).collect(),
            grid: Some(grid),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Build the intensity-weighted pixel distribution of an image.
pub fn build_distribution(img: &GrayImage) -> PixelDistribution {
    PixelDistribution::from_image(img)
}

/// Solver parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UotParams {
    /// Entropic coefficient.
    pub epsilon: f64,
    /// Row-marginal relaxation coefficient.
    pub lambda1: f64,
    /// Column-marginal relaxation coefficient.
    pub lambda2: f64,
    /// Iteration cap.
    pub max_iters: u32,
    /// Convergence threshold on the max absolute change of log-potentials.
    pub tol: f64,
}

impl Default for UotParams {
    fn default() -> Self {
        UotParams {
            epsilon: 0.05,
            lambda1: 0.1,
            lambda2: 0.1,
            max_iters: 500,
            tol: 1e-6,
        }
    }
}

impl UotParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParams(format!("epsilon = {}", self.epsilon)));
        }
        if !(self.lambda1 > 0.0 && self.lambda1.is_finite())
            || !(self.lambda2 > 0.0 && self.lambda2.is_finite())
        {
            return Err(Error::InvalidParams(format!(
                "lambda1 = {}, lambda2 = {}",
                self.lambda1, self.lambda2
            )));
        }
        if self.max_iters < 1 {
            return Err(Error::InvalidParams("max_iters must be >= 1".to_string()));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::InvalidParams(format!("tol = {}", self.tol)));
        }
        Ok(())
    }
}

/// Kernel evaluation strategy: dense pairwise loops, or separable per-axis
/// factors when both sides are full grids.
enum CostEval {
    Generic {
        ref_coords: Vec<[f64; 2]>,
        tgt_coords: Vec<[f64; 2]>,
        inv_eps: f64,
    },
    Separable {
        ref_grid: Grid,
        tgt_grid: Grid,
        /// exp(-(x_i - x_j)^2 / eps), ref columns x target columns
        kx: Vec<f64>,
        /// exp(-(y_i - y_j)^2 / eps), ref rows x target rows
        ky: Vec<f64>,
        /// kx weighted by the squared x-distance
        kx_cost: Vec<f64>,
        /// ky weighted by the squared y-distance
        ky_cost: Vec<f64>,
    },
}

impl CostEval {
    fn new(mu_ref: &PixelDistribution, mu_tgt: &PixelDistribution, epsilon: f64) -> CostEval {
        if let (Some(gr), Some(gt)) = (mu_ref.grid, mu_tgt.grid) {
            let axis = |n_ref: usize, s_ref: f64, n_tgt: usize, s_tgt: f64| {
                let mut k = vec![0.0; n_ref * n_tgt];
                let mut kc = vec![0.0; n_ref * n_tgt];
                for i in 0..n_ref {
                    let ci = (i as f64 + 0.5) / s_ref;
                    for j in 0..n_tgt {
                        let d2 = (ci - (j as f64 + 0.5) / s_tgt).powi(2);
                        let v = (-d2 / epsilon).exp();
                        k[i * n_tgt + j] = v;
                        kc[i * n_tgt + j] = v * d2;
                    }
                }
                (k, kc)
            };
            let (kx, kx_cost) = axis(gr.width, gr.scale(), gt.width, gt.scale());
            let (ky, ky_cost) = axis(gr.height, gr.scale(), gt.height, gt.scale());
            CostEval::Separable {
                ref_grid: gr,
                tgt_grid: gt,
                kx,
                ky,
                kx_cost,
                ky_cost,
            }
        } else {
            CostEval::Generic {
                ref_coords: mu_ref.coords.clone(),
                tgt_coords: mu_tgt.coords.clone(),
                inv_eps: 1.0 / epsilon,
            }
        }
    }

    /// out[i] = sum_j w[j] * exp(-C_ij/eps), optionally cost-weighted.
    fn apply_to_ref(&self, w: &[f64], cost_weighted: bool, out: &mut [f64]) {
        match self {
            CostEval::Generic {
                ref_coords,
                tgt_coords,
                inv_eps,
            } => {
                for (i, o) in out.iter_mut().enumerate() {
                    let [xi, yi] = ref_coords[i];
                    let mut acc = 0.0;
                    for (j, &wj) in w.iter().enumerate() {
                        let [xj, yj] = tgt_coords[j];
                        let c = (xi - xj).powi(2) + (yi - yj).powi(2);
                        let k = (-c * inv_eps).exp();
                        acc += wj * if cost_weighted { k * c } else { k };
                    }
                    *o = acc;
                }
            }
            CostEval::Separable {
                ref_grid,
                tgt_grid,
                kx,
                ky,
                kx_cost,
                ky_cost,
            } => {
                if cost_weighted {
                    // K.C = Kx_cost (x) Ky + Kx (x) Ky_cost
                    let a = separable_to_ref(w, ref_grid, tgt_grid, kx_cost, ky);
                    let b = separable_to_ref(w, ref_grid, tgt_grid, kx, ky_cost);
                    for i in 0..out.len() {
                        out[i] = a[i] + b[i];
                    }
                } else {
                    out.copy_from_slice(&separable_to_ref(w, ref_grid, tgt_grid, kx, ky));
                }
            }
        }
    }

    /// out[j] = sum_i w[i] * exp(-C_ij/eps).
    fn apply_to_tgt(&self, w: &[f64], out: &mut [f64]) {
        match self {
            CostEval::Generic {
                ref_coords,
                tgt_coords,
                inv_eps,
            } => {
                for (j, o) in out.iter_mut().enumerate() {
                    let [xj, yj] = tgt_coords[j];
                    let mut acc = 0.0;
                    for (i, &wi) in w.iter().enumerate() {
                        let [xi, yi] = ref_coords[i];
                        let c = (xi - xj).powi(2) + (yi - yj).powi(2);
                        acc += wi * (-c * inv_eps).exp();
                    }
                    *o = acc;
                }
            }
            CostEval::Separable {
                ref_grid,
                tgt_grid,
                kx,
                ky,
                ..
            } => {
                out.copy_from_slice(&separable_to_tgt(w, ref_grid, tgt_grid, kx, ky));
            }
        }
    }
}

/// Squared Euclidean distance between a reference and a target point.
fn pair_cost(ref_coords: &[[f64; 2]], tgt_coords: &[[f64; 2]], i: usize, j: usize) -> f64 {
    let [xi, yi] = ref_coords[i];
    let [xj, yj] = tgt_coords[j];
    (xi - xj).powi(2) + (yi - yj).powi(2)
}

/// tmp = Ky * W (ref rows x tgt cols), out = tmp * Kx^T flattened row-major
/// over the ref grid, where W reshapes `w` over the target grid.
fn separable_to_ref(w: &[f64], gr: &Grid, gt: &Grid, kx: &[f64], ky: &[f64]) -> Vec<f64> {
    let (wr, hr, wt, ht) = (gr.width, gr.height, gt.width, gt.height);
    let mut tmp = vec![0.0; hr * wt];
    for iy in 0..hr {
        for jy in 0..ht {
            let k = ky[iy * ht + jy];
            let src = &w[jy * wt..(jy + 1) * wt];
            let dst = &mut tmp[iy * wt..(iy + 1) * wt];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += k * s;
            }
        }
    }
    let mut out = vec![0.0; hr * wr];
    for iy in 0..hr {
        let row = &tmp[iy * wt..(iy + 1) * wt];
        for ix in 0..wr {
            let kr = &kx[ix * wt..(ix + 1) * wt];
            let mut acc = 0.0;
            for jx in 0..wt {
                acc += row[jx] * kr[jx];
            }
            out[iy * wr + ix] = acc;
        }
    }
    out
}

/// Transposed analog of [`separable_to_ref`]: aggregate reference-side
/// weights onto the target grid.
fn separable_to_tgt(w: &[f64], gr: &Grid, gt: &Grid, kx: &[f64], ky: &[f64]) -> Vec<f64> {
    let (wr, hr, wt, ht) = (gr.width, gr.height, gt.width, gt.height);
    let mut tmp = vec![0.0; hr * wt];
    for iy in 0..hr {
        let src = &w[iy * wr..(iy + 1) * wr];
        let dst = &mut tmp[iy * wt..(iy + 1) * wt];
        for ix in 0..wr {
            let s = src[ix];
            if s == 0.0 {
                continue;
            }
            let kr = &kx[ix * wt..(ix + 1) * wt];
            for (d, &k) in dst.iter_mut().zip(kr) {
                *d += s * k;
            }
        }
    }
    let mut out = vec![0.0; ht * wt];
    for jy in 0..ht {
        let dst = &mut out[jy * wt..(jy + 1) * wt];
        for iy in 0..hr {
            let k = ky[iy * ht + jy];
            let src = &tmp[iy * wt..(iy + 1) * wt];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += k * s;
            }
        }
    }
    out
}

/// log-sum-exp of `g[j] - C_ij/eps` for every i, via a single global shift.
fn lse_apply(eval: &CostEval, g: &[f64], to_ref: bool, out: &mut [f64]) {
    let m = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = g.iter().map(|&x| (x - m).exp()).collect();
    if to_ref {
        eval.apply_to_ref(&w, false, out);
    } else {
        eval.apply_to_tgt(&w, out);
    }
    for o in out.iter_mut() {
        *o = o.ln() + m;
    }
}

/// Converged coupling with dual potentials; plan entries are recovered
/// lazily as `exp(log_a_i + log_u_i + log_b_j + log_v_j - C_ij/eps)`.
pub struct TransportPlan {
    n_ref: usize,
    n_tgt: usize,
    log_u: Vec<f64>,
    log_v: Vec<f64>,
    log_a: Vec<f64>,
    log_b: Vec<f64>,
    ref_coords: Vec<[f64; 2]>,
    tgt_coords: Vec<[f64; 2]>,
    params: UotParams,
    eval: CostEval,
    row_sums: Vec<f64>,
    col_sums: Vec<f64>,
    total_cost: f64,
    iterations_used: u32,
    converged: bool,
}

impl TransportPlan {
    pub fn n_ref(&self) -> usize {
        self.n_ref
    }

    pub fn n_tgt(&self) -> usize {
        self.n_tgt
    }

    pub fn log_u(&self) -> &[f64] {
        &self.log_u
    }

    pub fn log_v(&self) -> &[f64] {
        &self.log_v
    }

    pub fn params(&self) -> &UotParams {
        &self.params
    }

    /// Transport objective value `sum_ij C_ij T_ij` of the converged plan.
    pub fn total_cost(&self) -> f64 {
        self.total_cost
    }

    pub fn iterations_used(&self) -> u32 {
        self.iterations_used
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    /// Row marginals `T 1`.
    pub fn row_sums(&self) -> &[f64] {
        &self.row_sums
    }

    /// Column marginals `T' 1`.
    pub fn col_sums(&self) -> &[f64] {
        &self.col_sums
    }

    /// Single plan entry `T_ij`.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let c = pair_cost(&self.ref_coords, &self.tgt_coords, i, j);
        (self.log_a[i] + self.log_u[i] + self.log_b[j] + self.log_v[j] - c / self.params.epsilon)
            .exp()
    }

    /// Mass each target pixel receives from a set of reference pixels:
    /// `m_j = sum_{i in source} T_ij`.
    pub fn column_mass_from(&self, source: &[usize]) -> Result<Vec<f64>> {
        if source.is_empty() {
            return Err(Error::EmptyRegion);
        }
        for &i in source {
            if i >= self.n_ref {
                return Err(Error::SourceIndexOutOfRange {
                    index: i,
                    len: self.n_ref,
                });
            }
        }
        let m = source
            .iter()
            .map(|&i| self.log_a[i] + self.log_u[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut w = vec![0.0; self.n_ref];
        for &i in source {
            w[i] = (self.log_a[i] + self.log_u[i] - m).exp();
        }
        let mut conv = vec![0.0; self.n_tgt];
        self.eval.apply_to_tgt(&w, &mut conv);
        Ok((0..self.n_tgt)
            .map(|j| (self.log_b[j] + self.log_v[j] + conv[j].ln() + m).exp())
            .collect())
    }
}

/// One further Sinkhorn update from the plan's converged potentials.
/// Returns the would-be next `(log_u, log_v)`.
pub fn sinkhorn_update(plan: &TransportPlan) -> (Vec<f64>, Vec<f64>) {
    let fi1 = plan.params.lambda1 / (plan.params.lambda1 + plan.params.epsilon);
    let fi2 = plan.params.lambda2 / (plan.params.lambda2 + plan.params.epsilon);
    let g: Vec<f64> = plan
        .log_b
        .iter()
        .zip(&plan.log_v)
        .map(|(b, v)| b + v)
        .collect();
    let mut next_u = vec![0.0; plan.n_ref];
    lse_apply(&plan.eval, &g, true, &mut next_u);
    for u in next_u.iter_mut() {
        *u *= -fi1;
    }
    let g2: Vec<f64> = plan.log_a.iter().zip(&next_u).map(|(a, u)| a + u).collect();
    let mut next_v = vec![0.0; plan.n_tgt];
    lse_apply(&plan.eval, &g2, false, &mut next_v);
    for v in next_v.iter_mut() {
        *v *= -fi2;
    }
    (next_u, next_v)
}

/// Solve the entropic UOT problem between two distributions.
///
/// Iteration stops when the max absolute change of both log-potentials in
/// one sweep falls below `params.tol`, or at `params.max_iters`.
pub fn solve_uot(
    mu_ref: &PixelDistribution,
    mu_tgt: &PixelDistribution,
    params: &UotParams,
) -> Result<TransportPlan> {
    params.validate()?;
    let n = mu_ref.len();
    let m = mu_tgt.len();
    let eval = CostEval::new(mu_ref, mu_tgt, params.epsilon);
    let log_a: Vec<f64> = mu_ref.weights.iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = mu_tgt.weights.iter().map(|w| w.ln()).collect();
    let fi1 = params.lambda1 / (params.lambda1 + params.epsilon);
    let fi2 = params.lambda2 / (params.lambda2 + params.epsilon);

    // u^(0) = v^(0) = 1
    let mut log_u = vec![0.0; n];
    let mut log_v = vec![0.0; m];
    let mut next_u = vec![0.0; n];
    let mut next_v = vec![0.0; m];
    let mut g = vec![0.0; m.max(n)];
    let mut converged = false;
    let mut iterations_used = 0;

    for iter in 1..=params.max_iters {
        for j in 0..m {
            g[j] = log_b[j] + log_v[j];
        }
        lse_apply(&eval, &g[..m], true, &mut next_u);
        for u in next_u.iter_mut() {
            *u *= -fi1;
        }
        for i in 0..n {
            g[i] = log_a[i] + next_u[i];
        }
        lse_apply(&eval, &g[..n], false, &mut next_v);
        for v in next_v.iter_mut() {
            *v *= -fi2;
        }

        if next_u.iter().chain(next_v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinitePotential { iteration: iter });
        }

        let du = log_u
            .iter()
            .zip(&next_u)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let dv = log_v
            .iter()
            .zip(&next_v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut log_u, &mut next_u);
        std::mem::swap(&mut log_v, &mut next_v);
        iterations_used = iter;
        if du < params.tol && dv < params.tol {
            converged = true;
            break;
        }
    }

    // Final summary pass: marginals and transport cost of the plan.
    let alpha: Vec<f64> = log_a.iter().zip(&log_u).map(|(a, u)| a + u).collect();
    let beta: Vec<f64> = log_b.iter().zip(&log_v).map(|(b, v)| b + v).collect();
    let ma = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mb = beta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ea: Vec<f64> = alpha.iter().map(|&x| (x - ma).exp()).collect();
    let eb: Vec<f64> = beta.iter().map(|&x| (x - mb).exp()).collect();

    let mut conv_ref = vec![0.0; n];
    eval.apply_to_ref(&eb, false, &mut conv_ref);
    let row_sums: Vec<f64> = (0..n)
        .map(|i| (alpha[i] + conv_ref[i].ln() + mb).exp())
        .collect();

    let mut conv_tgt = vec![0.0; m];
    eval.apply_to_tgt(&ea, &mut conv_tgt);
    let col_sums: Vec<f64> = (0..m)
        .map(|j| (beta[j] + conv_tgt[j].ln() + ma).exp())
        .collect();

    let mut cost_ref = vec![0.0; n];
    eval.apply_to_ref(&eb, true, &mut cost_ref);
    let total_cost: f64 = (0..n)
        .map(|i| {
            if cost_ref[i] == 0.0 {
                0.0
            } else {
                (alpha[i] + cost_ref[i].ln() + mb).exp()
            }
        })
        .sum();

    Ok(TransportPlan {
        n_ref: n,
        n_tgt: m,
        log_u,
        log_v,
        log_a,
        log_b,
        ref_coords: mu_ref.coords.clone(),
        tgt_coords: mu_tgt.coords.clone(),
        params: *params,
        eval,
        row_sums,
        col_sums,
        total_cost,
        iterations_used,
        converged,
    })
}

/// Smallest set of target pixels, ranked by received mass, covering a
/// fraction of a concept's total transported mass.
#[derive(Debug, Clone)]
pub struct DenseCore {
    pub concept_id: String,
    /// Target pixel indices sorted by descending mass (ties by index).
    pub pixel_indices: Vec<usize>,
    /// Mass received by each selected pixel, aligned with `pixel_indices`.
    pub masses: Vec<f64>,
    /// Fraction of the total transported mass the selection covers.
    pub coverage: f64,
}

/// Apply the dense-core selection rule to a per-pixel mass vector: rank by
/// descending mass (ties by ascending index) and keep the smallest prefix
/// whose cumulative mass reaches `coverage` times the total.
pub fn dense_core_from_masses(masses: &[f64], coverage: f64) -> Result<DenseCore> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::InvalidParams(format!("coverage = {coverage}")));
    }
    if masses.iter().any(|m| !m.is_finite() || *m < 0.0) {
        return Err(Error::InvalidParams(
            "masses must be finite and nonnegative".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..masses.len()).collect();
    order.sort_by(|&i, &j| {
        masses[j]
            .partial_cmp(&masses[i])
            .expect("masses are finite")
            .then(i.cmp(&j))
    });
    // Total accumulated in ranked order so the full prefix sum reaches it
    // bit-exactly at coverage = 1.0.
    let total: f64 = order.iter().map(|&i| masses[i]).sum();
    if total <= 0.0 {
        return Err(Error::EmptyTransfer);
    }
    let target = coverage * total;
    let mut cum = 0.0;
    let mut cut = 0;
    for (rank, &i) in order.iter().enumerate() {
        cum += masses[i];
        if cum >= target {
            cut = rank + 1;
            break;
        }
    }
    let selected: Vec<usize> = order[..cut].to_vec();
    let selected_masses: Vec<f64> = selected.iter().map(|&i| masses[i]).collect();
    let covered: f64 = selected_masses.iter().sum();
    Ok(DenseCore {
        concept_id: String::new(),
        pixel_indices: selected,
        masses: selected_masses,
        coverage: covered / total,
    })
}

/// Transfer a reference pixel set through the plan and take its dense core.
pub fn transfer_region(
    plan: &TransportPlan,
    source_pixels: &[usize],
    coverage: f64,
) -> Result<DenseCore> {
    let masses = plan.column_mass_from(source_pixels)?;
    dense_core_from_masses(&masses, coverage)
}

/// Pick the candidate with the lowest total transport cost to the target,
/// solving at a reduced resolution. Ties break to the lowest index.
///
/// Returns the winning index and the full per-candidate cost list.
pub fn select_reference(
    candidates: &[GrayImage],
    target: &GrayImage,
    params: &UotParams,
    selection_resolution: (u32, u32),
) -> Result<(usize, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let (w, h) = selection_resolution;
    let tgt_small = target.resize_bilinear(w, h)?;
    let mu_tgt = build_distribution(&tgt_small);
    let mut costs = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let cand_small = cand.resize_bilinear(w, h)?;
        let mu_cand = build_distribution(&cand_small);
        let plan = solve_uot(&mu_cand, &mu_tgt, params)?;
        costs.push(plan.total_cost());
    }
    let mut best = 0;
    for (i, &c) in costs.iter().enumerate() {
        if c < costs[best] {
            best = i;
        }
    }
    Ok((best, costs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(lambda: f64, tol: f64, max_iters: u32) -> UotParams {
        UotParams {
            epsilon: 0.05,
            lambda1: lambda,
            lambda2: lambda,
            max_iters,
            tol,
        }
    }

    #[test]
    fn build_distribution_uniform_and_singleton() {
        let img = GrayImage::filled(2, 2, 100).unwrap();
        let d = build_distribution(&img);
        assert_eq!(d.len(), 4);
        for &w in d.weights() {
            assert!((w - 0.25).abs() < 1e-15);
        }

        let one = GrayImage::filled(1, 1, 9).unwrap();
        let d1 = build_distribution(&one);
        assert_eq!(d1.len(), 1);
        assert!((d1.weights()[0] - 1.0).abs() < 1e-15);
        assert_eq!(d1.coords()[0], [0.5, 0.5]);
    }

    #[test]
    fn build_distribution_hand_normalization() {
        let img = GrayImage::new(2, 1, vec![100, 255]).unwrap();
        let d = build_distribution(&img);
        assert!((d.weights()[0] - 100.0 / 355.0).abs() < 1e-15);
        assert!((d.weights()[1] - 255.0 / 355.0).abs() < 1e-15);
    }

    #[test]
    fn zero_intensity_gets_floor() {
        let img = GrayImage::new(2, 1, vec![0, 200]).unwrap();
        let d = build_distribution(&img);
        assert!(d.weights()[0] > 0.0);
        assert!((d.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singleton_zero_cost_problem() {
        let mu = PixelDistribution::new(vec![[0.5, 0.5]], vec![1.0]).unwrap();
        let plan = solve_uot(&mu, &mu, &params(0.1, 1e-9, 1000)).unwrap();
        assert!(plan.converged());
        assert!(plan.entry(0, 0) > 0.0);
        assert_eq!(plan.total_cost(), 0.0);
    }

    #[test]
    fn symmetric_two_point_problem() {
        let mu = PixelDistribution::new(vec![[0.0, 0.0], [1.0, 0.0]], vec![0.5, 0.5]).unwrap();
        let plan = solve_uot(&mu, &mu, &params(0.1, 1e-12, 20000)).unwrap();
        assert!(plan.converged());
        let t = [
            plan.entry(0, 0),
            plan.entry(0, 1),
            plan.entry(1, 0),
            plan.entry(1, 1),
        ];
        assert!((t[0] - t[3]).abs() < 1e-12);
        assert!((t[1] - t[2]).abs() < 1e-12);
        assert!(t[0] > t[1]);
        for v in t {
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn balanced_limit_matches_marginals() {
        // lambda -> inf recovers balanced Sinkhorn: marginals must match.
        let coords_a: Vec<[f64; 2]> = (0..8).map(|i| [0.1 + 0.05 * i as f64, 0.2]).collect();
        let coords_b: Vec<[f64; 2]> = (0..8).map(|i| [0.15 + 0.05 * i as f64, 0.6]).collect();
        let wa = vec![0.2, 0.1, 0.15, 0.05, 0.1, 0.2, 0.1, 0.1];
        let wb = vec![0.1, 0.2, 0.1, 0.1, 0.15, 0.05, 0.2, 0.1];
        let mu_a = PixelDistribution::new(coords_a, wa.clone()).unwrap();
        let mu_b = PixelDistribution::new(coords_b, wb.clone()).unwrap();
        let plan = solve_uot(&mu_a, &mu_b, &params(1e6, 1e-6, 50000)).unwrap();
        assert!(plan.converged());
        for i in 0..8 {
            let rel = (plan.row_sums()[i] - wa[i]).abs() / wa[i];
            assert!(rel < 1e-3, "row {i} rel err {rel}");
            let rel = (plan.col_sums()[i] - wb[i]).abs() / wb[i];
            assert!(rel < 1e-3, "col {i} rel err {rel}");
        }
    }

    #[test]
    fn transposition_symmetry() {
        let mu_a = PixelDistribution::new(
            vec![[0.1, 0.1], [0.6, 0.3], [0.3, 0.8]],
            vec![0.5, 0.3, 0.2],
        )
        .unwrap();
        let mu_b = PixelDistribution::new(vec![[0.2, 0.2], [0.7, 0.7]], vec![0.6, 0.4]).unwrap();
        let p = UotParams {
            epsilon: 0.05,
            lambda1: 0.1,
            lambda2: 0.3,
            max_iters: 100000,
            tol: 1e-13,
        };
        let swapped = UotParams {
            lambda1: p.lambda2,
            lambda2: p.lambda1,
            ..p
        };
        let fwd = solve_uot(&mu_a, &mu_b, &p).unwrap();
        let rev = solve_uot(&mu_b, &mu_a, &swapped).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!(
                    (fwd.entry(i, j) - rev.entry(j, i)).abs() < 1e-9,
                    "entry ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn fixed_point_after_convergence() {
        let mu_a = PixelDistribution::new(vec![[0.2, 0.4], [0.8, 0.4]], vec![0.7, 0.3]).unwrap();
        let mu_b = PixelDistribution::new(
            vec![[0.3, 0.5], [0.6, 0.2], [0.9, 0.9]],
            vec![0.4, 0.4, 0.2],
        )
        .unwrap();
        let p = params(0.1, 1e-8, 10000);
        let plan = solve_uot(&mu_a, &mu_b, &p).unwrap();
        assert!(plan.converged());
        let (nu, nv) = sinkhorn_update(&plan);
        for (a, b) in plan.log_u().iter().zip(&nu) {
            assert!((a - b).abs() < p.tol);
        }
        for (a, b) in plan.log_v().iter().zip(&nv) {
            assert!((a - b).abs() < p.tol);
        }
    }

    #[test]
    fn grid_and_generic_paths_agree() {
        // Same 3x2 problem once through the image fast path, once through
        // explicit points; potentials must agree to float noise.
        let img_a = GrayImage::new(3, 2, vec![10, 80, 30, 200, 5, 60]).unwrap();
        let img_b = GrayImage::new(3, 2, vec![90, 10, 40, 20, 150, 70]).unwrap();
        let ga = build_distribution(&img_a);
        let gb = build_distribution(&img_b);
        let pa = PixelDistribution::new(ga.coords().to_vec(), ga.weights().to_vec()).unwrap();
        let pb = PixelDistribution::new(gb.coords().to_vec(), gb.weights().to_vec()).unwrap();
        let p = params(0.1, 1e-10, 20000);
        let fast = solve_uot(&ga, &gb, &p).unwrap();
        let slow = solve_uot(&pa, &pb, &p).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert!((fast.entry(i, j) - slow.entry(i, j)).abs() < 1e-8);
            }
        }
        assert!((fast.total_cost() - slow.total_cost()).abs() < 1e-10);
    }

    #[test]
    fn dense_core_hand_example() {
        let core = dense_core_from_masses(&[0.5, 0.3, 0.2], 0.75).unwrap();
        assert_eq!(core.pixel_indices, vec![0, 1]);
        assert!((core.coverage - 0.8).abs() < 1e-12);
    }

    #[test]
    fn dense_core_singleton_and_full_coverage() {
        let core = dense_core_from_masses(&[0.4], 0.75).unwrap();
        assert_eq!(core.pixel_indices, vec![0]);
        assert!((core.coverage - 1.0).abs() < 1e-15);

        // coverage = 1.0 keeps exactly the pixels with positive mass
        let core = dense_core_from_masses(&[0.0, 0.2, 0.0, 0.5, 0.3], 1.0).unwrap();
        assert_eq!(core.pixel_indices, vec![3, 4, 1]);
    }

    #[test]
    fn dense_core_ties_break_by_index() {
        let core = dense_core_from_masses(&[0.25, 0.25, 0.25, 0.25], 0.5).unwrap();
        assert_eq!(core.pixel_indices, vec![0, 1]);
    }

    #[test]
    fn dense_core_zero_mass_errors() {
        assert!(matches!(
            dense_core_from_masses(&[0.0, 0.0], 0.75),
            Err(Error::EmptyTransfer)
        ));
    }

    #[test]
    fn select_reference_single_candidate() {
        let img = GrayImage::filled(8, 8, 50).unwrap();
        let (idx, costs) = select_reference(
            std::slice::from_ref(&img),
            &img,
            &UotParams::default(),
            (4, 4),
        )
        .unwrap();
        assert_eq!(idx, 0);
        assert_eq!(costs.len(), 1);
    }

    #[test]
    fn select_reference_prefers_exact_copy() {
        let mut tgt = GrayImage::filled(16, 16, 20).unwrap();
        for y in 2..8 {
            for x in 9..15 {
                tgt.set(x, y, 220);
            }
        }
        let inverted = GrayImage::new(
            16,
            16,
            tgt.data().iter().map(|&v| 255 - v).collect::<Vec<u8>>(),
        )
        .unwrap();
        let (idx, costs) = select_reference(
            &[inverted, tgt.clone()],
            &tgt,
            &UotParams::default(),
            (8, 8),
        )
        .unwrap();
        assert_eq!(idx, 1);
        assert!(costs[1] < costs[0]);
    }

    #[test]
    fn select_reference_sixteen_candidates_at_coarse_resolution() {
        // The production configuration: 16 candidates compared at 14x14.
        let mut candidates = Vec::new();
        for k in 0..16u32 {
            let mut img = GrayImage::filled(64, 64, 30).unwrap();
            for y in 0..24 {
                for x in 0..24 {
                    img.set(8 + (k % 4) * 10 + x, 8 + (k / 4) * 10 + y, 200);
                }
            }
            candidates.push(img);
        }
        let target = candidates[5].clone();
        let (idx, costs) =
            select_reference(&candidates, &target, &UotParams::default(), (14, 14)).unwrap();
        assert_eq!(costs.len(), 16);
        assert_eq!(idx, 5);
    }

    #[test]
    fn select_reference_consistent_with_costs() {
        let a = GrayImage::filled(8, 8, 10).unwrap();
        let mut b = GrayImage::filled(8, 8, 10).unwrap();
        b.set(1, 1, 255);
        let tgt = GrayImage::filled(8, 8, 90).unwrap();
        let (idx, costs) = select_reference(&[a, b], &tgt, &UotParams::default(), (4, 4)).unwrap();
        let min = costs
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.partial_cmp(y.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(idx, min);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn plan_entries_nonnegative(
            wa in prop::collection::vec(0.01f64..1.0, 2..5),
            wb in prop::collection::vec(0.01f64..1.0, 2..5),
        ) {
            let ca: Vec<[f64; 2]> = (0..wa.len()).map(|i| [i as f64 / 8.0, 0.25]).collect();
            let cb: Vec<[f64; 2]> = (0..wb.len()).map(|i| [i as f64 / 8.0, 0.75]).collect();
            let mu_a = PixelDistribution::new(ca, wa).unwrap();
            let mu_b = PixelDistribution::new(cb, wb).unwrap();
            let plan = solve_uot(&mu_a, &mu_b, &params(0.1, 1e-8, 5000)).unwrap();
            prop_assert!(plan.converged());
            prop_assert!(plan.total_cost() >= 0.0);
            prop_assert!(plan.iterations_used() <= 5000);
            for i in 0..plan.n_ref() {
                for j in 0..plan.n_tgt() {
                    prop_assert!(plan.entry(i, j) >= 0.0);
                }
            }
        }

        #[test]
        fn dense_core_coverage_invariant(
            masses in prop::collection::vec(0.0f64..1.0, 1..64),
            coverage in 0.05f64..1.0,
        ) {
            match dense_core_from_masses(&masses, coverage) {
                Ok(core) => {
                    let total: f64 = {
                        let mut order: Vec<usize> = (0..masses.len()).collect();
                        order.sort_by(|&i, &j| masses[j].partial_cmp(&masses[i]).unwrap().then(i.cmp(&j)));
                        order.iter().map(|&i| masses[i]).sum()
                    };
                    let covered: f64 = core.masses.iter().sum();
                    prop_assert!(covered >= coverage * total);
                    let minus_last: f64 = core.masses[..core.masses.len() - 1].iter().sum();
                    prop_assert!(minus_last < coverage * total);
                    prop_assert!(!core.pixel_indices.is_empty());
                }
                Err(Error::EmptyTransfer) => {
                    prop_assert!(masses.iter().sum::<f64>() <= 0.0);
                }
                Err(e) => return Err(TestCaseError::fail(format!("unexpected error {e}"))),
            }
        }
    }
}
