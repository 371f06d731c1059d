//! Optimal rank-one nonnegative over-approximation and the perturbed
//! rank-one initializer.
//!
//! With `w` normalized to `sum w = 1` and `u_f = 1 / w_f`, the smallest
//! `sum h` with `w h' >= V` is `sum_n max_f u_f V_fn`. Relaxing
//! `sum 1/u_f <= 1` through `y_f >= 1/u_f`, i.e. `(u_f, y_f, sqrt 2)` in the
//! rotated quadratic cone, gives the convex program
//!
//! ```text
//! minimize  sum_n t_n
//! s.t.      sum_f y_f <= 1,  (u_f, y_f, sqrt 2) in Q_r,  t_n >= u_f V_fn
//! ```

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conic_program::{Cone, ProgramBuilder, SolveStatus};
use crate::error::{NmfError, Result};
use crate::instances::{FactorPair, NonnegMatrix};
use crate::ipm::{self, SolverConfig};

/// Upper bound on `u = 1/w` in normalized units; only active for zero rows.
const U_MAX: f64 = 1e8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rank1Solution {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub tvals: Vec<f64>,
    pub w: Vec<f64>,
    pub h: Vec<f64>,
    /// `sum_n t_n` in the units of `V`.
    pub objective: f64,
    /// Rows of `V` that are entirely zero; their `w_f` sits at the box limit.
    pub zero_rows: Vec<usize>,
}

impl Rank1Solution {
    /// `sum_n max_f u_f V_fn`, the objective with `y` and `t` eliminated.
    pub fn eliminated_objective(&self, v: &NonnegMatrix) -> f64 {
        (0..v.cols()).map(|n| (0..v.rows()).map(|f| self.u[f] * v.get(f, n)).fold(0.0, f64::max)).sum()
    }

    pub fn factors(&self) -> FactorPair {
        let w = Array2::from_shape_vec((self.w.len(), 1), self.w.clone()).expect("column shape");
        let h = Array2::from_shape_vec((1, self.h.len()), self.h.clone()).expect("row shape");
        FactorPair { w, h }
    }
}

/// Solves the rank-one over-approximation of `v` to optimality.
pub fn solve_rank1(v: &NonnegMatrix, config: &SolverConfig) -> Result<Rank1Solution> {
    let (fs, ns) = (v.rows(), v.cols());
    let vmax = v.max_entry();
    if !(vmax > 0.0) {
        return Err(NmfError::InvalidInput("matrix is all zero".into()));
    }
    let a = v.entries().mapv(|x| x / vmax);
    let (iu, iy, it) = (0, fs, 2 * fs);
    let nvars = 2 * fs + ns;
    let mut b = ProgramBuilder::new(nvars);
    let budget: Vec<(usize, f64)> = (0..fs).map(|f| (iy + f, 1.0)).collect();
    let row = b.row(&budget, 1.0);
    b.cone(Cone::Nonneg(row));
    for f in 0..fs {
        let r0 = b.row(&[(iu + f, -1.0)], 0.0);
        let r1 = b.row(&[(iy + f, -1.0)], 0.0);
        let r2 = b.row(&[], std::f64::consts::SQRT_2);
        b.cone(Cone::RotatedSoc([r0, r1, r2]));
        b.bound(iu + f, 0.0, U_MAX);
    }
    for n in 0..ns {
        for f in 0..fs {
            let row = b.row(&[(it + n, -1.0), (iu + f, a[[f, n]])], 0.0);
            b.cone(Cone::Nonneg(row));
        }
        b.objective(it + n, 1.0);
    }
    let program = b.build();

    let mut z0 = vec![0.0; nvars];
    for f in 0..fs {
        z0[iu + f] = 2.0 * fs as f64;
        z0[iy + f] = 0.9 / fs as f64;
    }
    for n in 0..ns {
        z0[it + n] = (0..fs).map(|f| z0[iu + f] * a[[f, n]]).fold(0.0, f64::max) + 1.0;
    }
    let sol = ipm::solve(&program, config, Some(&z0))?;
    if !matches!(sol.status, SolveStatus::Optimal | SolveStatus::NearOptimal) {
        return Err(NmfError::Solver(format!("rank-one program ended with {:?}", sol.status)));
    }
    let u = sol.z[iu..iu + fs].to_vec();
    let y = sol.z[iy..iy + fs].to_vec();
    let tvals: Vec<f64> = sol.z[it..it + ns].iter().map(|t| t * vmax).collect();
    let inv_sum: f64 = u.iter().map(|x| 1.0 / x).sum();
    let w: Vec<f64> = u.iter().map(|x| 1.0 / (x * inv_sum)).collect();
    let h: Vec<f64> = (0..ns).map(|n| (0..fs).map(|f| v.get(f, n) / w[f]).fold(0.0, f64::max)).collect();
    let zero_rows = (0..fs).filter(|&f| (0..ns).all(|n| v.get(f, n) == 0.0)).collect();
    Ok(Rank1Solution { u, y, objective: tvals.iter().sum(), tvals, w, h, zero_rows })
}

/// Rank-one solution replicated over `rank` components and perturbed.
///
/// In the latent variables `U = W^2`, `T = H^2` of the over-approximation,
/// `Z_1` carries `w` in every column of `W` and `h / rank` in every row of
/// `H` (so `W H` reproduces `w h'`). The start is
/// `Z_1 + d R ||Z_1|| / ||R||` with `R` uniform on `(0, 1)`.
pub fn perturbed_init(v: &NonnegMatrix, rank: usize, d: f64, seed: u64, config: &SolverConfig) -> Result<FactorPair> {
    if !(d > 0.0) {
        return Err(NmfError::InvalidInput(format!("perturbation size {d} must be positive")));
    }
    if rank == 0 {
        return Err(NmfError::InvalidInput("rank K must be at least 1".into()));
    }
    let r1 = solve_rank1(v, config)?;
    Ok(perturb(&r1, rank, d, seed))
}

pub fn perturb(r1: &Rank1Solution, rank: usize, d: f64, seed: u64) -> FactorPair {
    let (fs, ns) = (r1.w.len(), r1.h.len());
    let w = Array1::from(r1.w.clone());
    let h = Array1::from(r1.h.clone()) / rank as f64;
    let u1 = Array2::from_shape_fn((fs, rank), |(f, _)| w[f] * w[f]);
    let t1 = Array2::from_shape_fn((rank, ns), |(_, n)| h[n] * h[n]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ru = Array2::from_shape_fn((fs, rank), |_| 1.0 - rng.random::<f64>());
    let rt = Array2::from_shape_fn((rank, ns), |_| 1.0 - rng.random::<f64>());
    let norm = |a: &Array2<f64>, b: &Array2<f64>| (a.iter().chain(b.iter()).map(|x| x * x).sum::<f64>()).sqrt();
    let scale = d * norm(&u1, &t1) / norm(&ru, &rt);
    let wz = (&u1 + &(ru * scale)).mapv(f64::sqrt);
    let hz = (&t1 + &(rt * scale)).mapv(f64::sqrt);
    FactorPair { w: wz, h: hz }
}
