//! Accelerated HALS: exact block-coordinate descent on `||V - WH||_F`.
//!
//! Each column of `W` (row of `H`) is replaced by the nonnegative minimizer
//! of the objective with everything else fixed. The products `V H'`, `H H'`
//! (resp. `W'V`, `W'W`) are formed once per block and reused over several
//! inner passes, which is where the acceleration comes from.

use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{NmfError, Result};
use crate::instances::{frobenius, FactorPair};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum InnerRule {
    /// Fixed number of passes per block.
    Fixed(usize),
    /// `1 + alpha * rho` passes, `rho` the cost ratio of forming the block
    /// products to one pass.
    CostProportional { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalsConfig {
    pub max_outer_sweeps: usize,
    pub inner: InnerRule,
    /// Denominators below this reinitialize the column or row.
    pub zero_clip: f64,
    pub target_error: f64,
    /// Stop when the relative error improves by less than this per sweep.
    pub min_improvement: f64,
}

impl Default for HalsConfig {
    fn default() -> Self {
        Self {
            max_outer_sweeps: 2000,
            inner: InnerRule::Fixed(2),
            zero_clip: 1e-16,
            target_error: 1e-6,
            min_improvement: 1e-12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalsStats {
    pub sweeps: usize,
    pub initial_error: f64,
    pub final_error: f64,
    pub reinitialized: usize,
    pub seconds: f64,
}

fn relative(v: ArrayView2<'_, f64>, w: &Array2<f64>, h: &Array2<f64>, vnorm: f64) -> f64 {
    frobenius((&v - &w.dot(h)).view()) / vnorm
}

fn passes(rule: InnerRule, outer: usize, inner: usize, rank: usize) -> usize {
    match rule {
        InnerRule::Fixed(p) => p.max(1),
        InnerRule::CostProportional { alpha } => {
            let (m, n, r) = (outer as f64, inner as f64, rank as f64);
            let rho = 1.0 + (m * n + n * r) / (m * (r + 1.0));
            (1.0 + alpha * rho).floor().max(1.0) as usize
        }
    }
}

/// One exact update of column `k` of `w`, given `a = V H'` and `b = H H'`.
/// Returns false when the column had to be reinitialized. Rows of `H` are
/// updated by applying this to `H'` with `a = V' W`, `b = W' W`.
pub fn update_column(w: &mut Array2<f64>, a: &Array2<f64>, b: &Array2<f64>, k: usize, zero_clip: f64) -> bool {
    let bkk = b[[k, k]];
    if !(bkk > zero_clip) {
        w.column_mut(k).fill(1e-6);
        return false;
    }
    let wb = w.dot(&b.column(k));
    let mut col = w.column_mut(k);
    for f in 0..col.len() {
        col[f] = (col[f] + (a[[f, k]] - wb[f]) / bkk).max(0.0);
    }
    true
}

fn sweep_w(v: ArrayView2<'_, f64>, w: &mut Array2<f64>, h: &Array2<f64>, repeats: usize, zero_clip: f64) -> usize {
    let a = v.dot(&h.t());
    let b = h.dot(&h.t());
    let mut reinit = 0;
    for _ in 0..repeats {
        for k in 0..w.ncols() {
            if !update_column(w, &a, &b, k, zero_clip) {
                reinit += 1;
            }
        }
    }
    reinit
}

fn sweep_h(v: ArrayView2<'_, f64>, w: &Array2<f64>, h: &mut Array2<f64>, repeats: usize, zero_clip: f64) -> usize {
    // the row update of H is the column update of H' against V'
    let mut ht = h.t().to_owned();
    let reinit = sweep_w(v.t(), &mut ht, &w.t().to_owned(), repeats, zero_clip);
    h.assign(&ht.t());
    reinit
}

/// Refines `pair` towards `V`. The error never increases.
pub fn refine(v: ArrayView2<'_, f64>, pair: &FactorPair, config: &HalsConfig) -> Result<(FactorPair, HalsStats)> {
    if config.max_outer_sweeps == 0 {
        return Err(NmfError::InvalidInput("max_outer_sweeps must be at least 1".into()));
    }
    if pair.w.nrows() != v.nrows() || pair.h.ncols() != v.ncols() || pair.w.ncols() != pair.h.nrows() {
        return Err(NmfError::DimensionMismatch("factors do not match the matrix".into()));
    }
    let vnorm = frobenius(v);
    if !(vnorm > 0.0) {
        return Err(NmfError::InvalidInput("matrix is all zero".into()));
    }
    let start = Instant::now();
    let (fs, ns, ks) = (v.nrows(), v.ncols(), pair.rank());
    let mut w = pair.w.mapv(|x| x.max(0.0));
    let mut h = pair.h.mapv(|x| x.max(0.0));
    // balance scales so that neither factor dominates the updates
    for k in 0..ks {
        let wn = w.column(k).dot(&w.column(k)).sqrt();
        let hn = h.row(k).dot(&h.row(k)).sqrt();
        if wn > 0.0 && hn > 0.0 {
            let s = (hn / wn).sqrt();
            w.column_mut(k).mapv_inplace(|x| x * s);
            h.row_mut(k).mapv_inplace(|x| x / s);
        }
    }
    let initial_error = relative(v, &w, &h, vnorm);
    let mut err = initial_error;
    let mut best = (w.clone(), h.clone(), err);
    let mut reinitialized = 0;
    let mut sweeps = 0;
    let (pw, ph) = (passes(config.inner, fs, ns, ks), passes(config.inner, ns, fs, ks));
    while sweeps < config.max_outer_sweeps && err > config.target_error {
        reinitialized += sweep_w(v, &mut w, &h, pw, config.zero_clip);
        reinitialized += sweep_h(v, &w, &mut h, ph, config.zero_clip);
        sweeps += 1;
        let next = relative(v, &w, &h, vnorm);
        if next < best.2 {
            best = (w.clone(), h.clone(), next);
        }
        let improvement = err - next;
        err = next;
        if improvement.abs() < config.min_improvement {
            break;
        }
    }
    let (w, h, final_error) = best;
    Ok((
        FactorPair { w, h },
        HalsStats { sweeps, initial_error, final_error, reinitialized, seconds: start.elapsed().as_secs_f64() },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::gen_random_product_with_factors;
    use ndarray::Axis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn objective(v: &Array2<f64>, w: &Array2<f64>, h: &Array2<f64>) -> f64 {
        frobenius((v - &w.dot(h)).view())
    }

    #[test]
    fn exact_factorization_is_a_fixed_point() {
        let (v, pair) = gen_random_product_with_factors(5, 6, 3, 2).unwrap();
        let (out, stats) = refine(v.entries(), &pair, &HalsConfig::default()).unwrap();
        assert_eq!(stats.sweeps, 0);
        assert!((out.product() - pair.product()).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn every_single_update_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Array2::from_shape_fn((6, 5), |_| rng.random_range(0.0..1.0));
        let mut w = Array2::from_shape_fn((6, 3), |_| rng.random_range(0.0..1.0));
        let mut h = Array2::from_shape_fn((3, 5), |_| rng.random_range(0.0..1.0));
        let mut prev = objective(&v, &w, &h);
        for _ in 0..30 {
            let a = v.dot(&h.t());
            let b = h.dot(&h.t());
            for k in 0..3 {
                update_column(&mut w, &a, &b, k, 1e-16);
                let now = objective(&v, &w, &h);
                assert!(now <= prev + 1e-12, "{now} > {prev}");
                prev = now;
            }
            let mut ht = h.t().to_owned();
            let a = v.t().dot(&w);
            let b = w.t().dot(&w);
            for k in 0..3 {
                update_column(&mut ht, &a, &b, k, 1e-16);
                let now = objective(&v, &w, &ht.t().to_owned());
                assert!(now <= prev + 1e-12, "{now} > {prev}");
                prev = now;
            }
            h.assign(&ht.t());
            assert!(w.iter().chain(h.iter()).all(|&x| x >= 0.0));
        }
    }

    /// Minimizes `||R - x y'||` over `x >= 0` for fixed `y` by scanning the
    /// active set of every coordinate independently (the problem separates).
    fn projected_ls_column(r: &Array2<f64>, y: &ndarray::Array1<f64>) -> ndarray::Array1<f64> {
        let yy = y.dot(y);
        r.dot(y).mapv(|x| (x / yy).max(0.0))
    }

    #[test]
    fn column_update_matches_projected_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let v = Array2::from_shape_fn((3, 3), |_| rng.random_range(0.0..1.0));
            let mut w = Array2::from_shape_fn((3, 2), |_| rng.random_range(0.0..1.0));
            let h = Array2::from_shape_fn((2, 3), |_| rng.random_range(0.0..1.0));
            let k = rng.random_range(0..2);
            let other = 1 - k;
            // residual with column k removed
            let r = &v
                - &w.column(other).to_owned().insert_axis(Axis(1)).dot(&h.row(other).to_owned().insert_axis(Axis(0)));
            let oracle = projected_ls_column(&r, &h.row(k).to_owned());
            update_column(&mut w, &v.dot(&h.t()), &h.dot(&h.t()), k, 1e-16);
            for (a, b) in w.column(k).iter().zip(oracle.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
            // brute-force check that no nearby nonnegative column is better
            let best = objective(&v, &w, &h);
            for _ in 0..200 {
                let mut trial = w.clone();
                for f in 0..3 {
                    trial[[f, k]] = (trial[[f, k]] + rng.random_range(-0.05..0.05)).max(0.0);
                }
                assert!(objective(&v, &trial, &h) >= best - 1e-12);
            }
        }
    }

    #[test]
    fn rank_one_perturbation_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w0 = Array2::from_shape_fn((6, 1), |_| rng.random_range(0.5..1.5));
        let h0 = Array2::from_shape_fn((1, 7), |_| rng.random_range(0.5..1.5));
        let v = w0.dot(&h0);
        let w = w0.mapv(|x| x * (1.0 + rng.random_range(0.0..0.1)));
        let h = h0.mapv(|x| x * (1.0 + rng.random_range(0.0..0.1)));
        let cfg =
            HalsConfig { max_outer_sweeps: 50, target_error: 1e-12, min_improvement: 0.0, ..HalsConfig::default() };
        let (_, stats) = refine(v.view(), &FactorPair { w, h }, &cfg).unwrap();
        assert!(stats.final_error <= 1e-12, "{}", stats.final_error);
        assert!(stats.sweeps <= 50);
    }

    #[test]
    fn zero_column_is_reinitialized() {
        let v = Array2::from_elem((3, 3), 1.0);
        let w = Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let h = Array2::from_shape_vec((2, 3), vec![0.5, 0.5, 0.5, 0.0, 0.0, 0.0]).unwrap();
        let (out, stats) = refine(v.view(), &FactorPair { w, h }, &HalsConfig::default()).unwrap();
        assert!(stats.reinitialized > 0);
        assert!(stats.final_error <= 1e-6);
        assert!(out.w.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn cost_proportional_passes() {
        assert_eq!(passes(InnerRule::Fixed(2), 6, 6, 5), 2);
        assert!(passes(InnerRule::CostProportional { alpha: 0.5 }, 100, 100, 5) > 2);
    }
}
