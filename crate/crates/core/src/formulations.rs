//! The two conic feasibility sets over the latent variables `Z = (U, T)`.
//!
//! * [`Formulation::ExpUnder`]: `W = exp(U)`, `H = exp(T)`, cones
//!   `(t_fkn, 1, U_fk + T_kn)` in the exponential cone and rows
//!   `sum_k t_fkn <= V_fn`, so `WH <= V`. Objective
//!   `Phi = -log sum exp(U_fk + T_kn)`.
//! * [`Formulation::SocOver`]: `W = sqrt(U)`, `H = sqrt(T)`, cones
//!   `(U_fk, T_kn / 2, t_fkn)` in the rotated quadratic cone and rows
//!   `sum_k t_fkn >= V_fn`, so `WH >= V`. Objective `Phi = sum sqrt(U T)`.
//!
//! Both objectives are concave and minimized. Entries in a
//! [`SparsityPattern`] are fixed at `W = 0` / `H = 0`; they carry no variable,
//! no gradient term and drop every auxiliary `t_fkn` they touch.

use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::conic_program::{membership, Cone, ConicProgram, ProgramBuilder};
use crate::error::{NmfError, Result};
use crate::instances::{FactorPair, NonnegMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Formulation {
    ExpUnder,
    SocOver,
}

impl Formulation {
    pub fn name(self) -> &'static str {
        match self {
            Formulation::ExpUnder => "exp",
            Formulation::SocOver => "soc",
        }
    }
}

impl std::str::FromStr for Formulation {
    type Err = NmfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp" => Ok(Formulation::ExpUnder),
            "soc" => Ok(Formulation::SocOver),
            _ => Err(NmfError::InvalidInput(format!("unknown formulation `{s}` (expected exp or soc)"))),
        }
    }
}

/// How entries are compared against the sparsification threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdUnits {
    /// Compare `W` and `H` entries.
    #[default]
    Factor,
    /// Compare `|U|` and `|T|` entries.
    Latent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormulationOptions {
    /// Box bound on factor entries; `U, T` live in `[-2 ln B, 2 ln B]`
    /// (exp) or `[0, B^2]` (soc).
    pub bound: f64,
    /// Additive shift of `V` for the exp form, required when `V` has zeros.
    pub eps_shift: Option<f64>,
    /// Build exp-form programs on `V` with zeros anyway (the result is infeasible).
    pub allow_zero_entries: bool,
}

impl Default for FormulationOptions {
    fn default() -> Self {
        Self { bound: 1e4, eps_shift: None, allow_zero_entries: false }
    }
}

impl FormulationOptions {
    fn latent_bounds(&self, form: Formulation) -> (f64, f64) {
        match form {
            Formulation::ExpUnder => (-2.0 * self.bound.ln(), 2.0 * self.bound.ln()),
            Formulation::SocOver => (0.0, self.bound * self.bound),
        }
    }

    /// The matrix the conic rows are written against.
    pub fn effective_target(&self, form: Formulation, v: &NonnegMatrix) -> Result<Array2<f64>> {
        let mut a = v.entries().to_owned();
        if form == Formulation::ExpUnder {
            if let Some(eps) = self.eps_shift {
                if !(eps > 0.0) {
                    return Err(NmfError::InvalidInput("eps shift must be positive".into()));
                }
                a.mapv_inplace(|x| x + eps);
            } else if v.has_zero_entry() && !self.allow_zero_entries {
                return Err(NmfError::Unsupported(format!(
                    "matrix `{}` has zero entries; the exp form needs an eps shift",
                    v.name()
                )));
            }
        }
        Ok(a)
    }
}

/// Factor entries fixed at zero.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityPattern {
    zeroed_u: Array2<bool>,
    zeroed_t: Array2<bool>,
}

impl SparsityPattern {
    pub fn empty(rows: usize, rank: usize, cols: usize) -> Self {
        Self { zeroed_u: Array2::from_elem((rows, rank), false), zeroed_t: Array2::from_elem((rank, cols), false) }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.zeroed_u.nrows(), self.zeroed_u.ncols(), self.zeroed_t.ncols())
    }

    pub fn is_empty(&self) -> bool {
        !self.zeroed_u.iter().chain(self.zeroed_t.iter()).any(|&z| z)
    }

    #[inline]
    pub fn has_u(&self, f: usize, k: usize) -> bool {
        self.zeroed_u[[f, k]]
    }

    #[inline]
    pub fn has_t(&self, k: usize, n: usize) -> bool {
        self.zeroed_t[[k, n]]
    }

    #[inline]
    pub fn drops(&self, f: usize, k: usize, n: usize) -> bool {
        self.zeroed_u[[f, k]] || self.zeroed_t[[k, n]]
    }

    pub fn insert_u(&mut self, f: usize, k: usize) -> bool {
        !std::mem::replace(&mut self.zeroed_u[[f, k]], true)
    }

    pub fn insert_t(&mut self, k: usize, n: usize) -> bool {
        !std::mem::replace(&mut self.zeroed_t[[k, n]], true)
    }

    pub fn zeroed_u(&self) -> Vec<(usize, usize)> {
        self.zeroed_u.indexed_iter().filter(|(_, &z)| z).map(|(i, _)| i).collect()
    }

    pub fn zeroed_t(&self) -> Vec<(usize, usize)> {
        self.zeroed_t.indexed_iter().filter(|(_, &z)| z).map(|(i, _)| i).collect()
    }

    pub fn dropped_t(&self) -> Vec<(usize, usize, usize)> {
        let (fs, ks, ns) = self.dims();
        let mut out = Vec::new();
        for f in 0..fs {
            for k in 0..ks {
                for n in 0..ns {
                    if self.drops(f, k, n) {
                        out.push((f, k, n));
                    }
                }
            }
        }
        out
    }

    /// Components whose whole `W` column or whole `H` row is zeroed.
    pub fn collapsed_components(&self) -> Vec<usize> {
        let (_, ks, _) = self.dims();
        (0..ks)
            .filter(|&k| self.zeroed_u.column(k).iter().all(|&z| z) || self.zeroed_t.row(k).iter().all(|&z| z))
            .collect()
    }

    pub fn is_subset_of(&self, other: &SparsityPattern) -> bool {
        self.zeroed_u.iter().zip(other.zeroed_u.iter()).all(|(&a, &b)| !a || b)
            && self.zeroed_t.iter().zip(other.zeroed_t.iter()).all(|(&a, &b)| !a || b)
    }
}

/// Variable indices of the surviving entries in a built program.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VarLayout {
    pub rows: usize,
    pub rank: usize,
    pub cols: usize,
    u: Vec<Option<usize>>,
    t: Vec<Option<usize>>,
    aux: Vec<Option<usize>>,
    pub nvars: usize,
}

impl VarLayout {
    pub fn new(pattern: &SparsityPattern) -> Self {
        let (fs, ks, ns) = pattern.dims();
        let mut next = 0;
        let mut take = |skip: bool| {
            if skip {
                None
            } else {
                next += 1;
                Some(next - 1)
            }
        };
        let mut u = Vec::with_capacity(fs * ks);
        for f in 0..fs {
            for k in 0..ks {
                u.push(take(pattern.has_u(f, k)));
            }
        }
        let mut t = Vec::with_capacity(ks * ns);
        for k in 0..ks {
            for n in 0..ns {
                t.push(take(pattern.has_t(k, n)));
            }
        }
        let mut aux = Vec::with_capacity(fs * ks * ns);
        for f in 0..fs {
            for k in 0..ks {
                for n in 0..ns {
                    aux.push(take(pattern.drops(f, k, n)));
                }
            }
        }
        Self { rows: fs, rank: ks, cols: ns, u, t, aux, nvars: next }
    }

    #[inline]
    pub fn u(&self, f: usize, k: usize) -> Option<usize> {
        self.u[f * self.rank + k]
    }

    #[inline]
    pub fn t(&self, k: usize, n: usize) -> Option<usize> {
        self.t[k * self.cols + n]
    }

    #[inline]
    pub fn aux(&self, f: usize, k: usize, n: usize) -> Option<usize> {
        self.aux[(f * self.rank + k) * self.cols + n]
    }

    pub fn aux_count(&self) -> usize {
        self.aux.iter().flatten().count()
    }
}

/// An iterate `Z = (U, T)` with the auxiliary tensor `t` (stored `f`-major,
/// then `k`, then `n`; dropped entries hold zero).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPoint {
    pub form: Formulation,
    pub u: Array2<f64>,
    pub t: Array2<f64>,
    pub aux: Vec<f64>,
}

impl LatentPoint {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.u.nrows(), self.u.ncols(), self.t.ncols())
    }

    #[inline]
    pub fn aux_at(&self, f: usize, k: usize, n: usize) -> f64 {
        let (_, ks, ns) = self.dims();
        self.aux[(f * ks + k) * ns + n]
    }

    pub fn pack(&self, layout: &VarLayout) -> Vec<f64> {
        let mut z = vec![0.0; layout.nvars];
        let (fs, ks, ns) = self.dims();
        for f in 0..fs {
            for k in 0..ks {
                if let Some(i) = layout.u(f, k) {
                    z[i] = self.u[[f, k]];
                }
                for n in 0..ns {
                    if let Some(i) = layout.aux(f, k, n) {
                        z[i] = self.aux_at(f, k, n);
                    }
                }
            }
        }
        for k in 0..ks {
            for n in 0..ns {
                if let Some(i) = layout.t(k, n) {
                    z[i] = self.t[[k, n]];
                }
            }
        }
        z
    }

    pub fn unpack(form: Formulation, z: &[f64], layout: &VarLayout) -> Self {
        let (fs, ks, ns) = (layout.rows, layout.rank, layout.cols);
        let mut u = Array2::zeros((fs, ks));
        let mut t = Array2::zeros((ks, ns));
        let mut aux = vec![0.0; fs * ks * ns];
        for f in 0..fs {
            for k in 0..ks {
                if let Some(i) = layout.u(f, k) {
                    u[[f, k]] = z[i];
                }
                for n in 0..ns {
                    if let Some(i) = layout.aux(f, k, n) {
                        aux[(f * ks + k) * ns + n] = z[i];
                    }
                }
            }
        }
        for k in 0..ks {
            for n in 0..ns {
                if let Some(i) = layout.t(k, n) {
                    t[[k, n]] = z[i];
                }
            }
        }
        Self { form, u, t, aux }
    }

    /// `(1 - tau) self + tau other`, all coordinates.
    pub fn combine(&self, other: &LatentPoint, tau: f64) -> LatentPoint {
        let mix = |a: f64, b: f64| if tau == 1.0 { b } else { (1.0 - tau) * a + tau * b };
        LatentPoint {
            form: self.form,
            u: ndarray::Zip::from(&self.u).and(&other.u).map_collect(|&a, &b| mix(a, b)),
            t: ndarray::Zip::from(&self.t).and(&other.t).map_collect(|&a, &b| mix(a, b)),
            aux: self.aux.iter().zip(&other.aux).map(|(&a, &b)| mix(a, b)).collect(),
        }
    }
}

/// Gradient of `Phi` with respect to `U` and `T`; pattern entries are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradient {
    pub u: Array2<f64>,
    pub t: Array2<f64>,
}

impl Gradient {
    pub fn objective(&self, layout: &VarLayout) -> Vec<f64> {
        let mut c = vec![0.0; layout.nvars];
        for ((f, k), &g) in self.u.indexed_iter() {
            if let Some(i) = layout.u(f, k) {
                c[i] = g;
            }
        }
        for ((k, n), &g) in self.t.indexed_iter() {
            if let Some(i) = layout.t(k, n) {
                c[i] = g;
            }
        }
        c
    }

    /// `<grad, Z>` over the `U, T` coordinates outside the pattern.
    pub fn dot(&self, z: &LatentPoint, pattern: &SparsityPattern) -> f64 {
        let su: f64 = self.u.indexed_iter().filter(|((f, k), _)| !pattern.has_u(*f, *k)).map(|(i, g)| g * z.u[i]).sum();
        let st: f64 = self.t.indexed_iter().filter(|((k, n), _)| !pattern.has_t(*k, *n)).map(|(i, g)| g * z.t[i]).sum();
        su + st
    }
}

fn check_rank(rank: usize) -> Result<()> {
    if rank == 0 {
        return Err(NmfError::InvalidInput("rank K must be at least 1".into()));
    }
    Ok(())
}

fn check_pattern(v: &NonnegMatrix, rank: usize, pattern: &SparsityPattern) -> Result<()> {
    if pattern.dims() != (v.rows(), rank, v.cols()) {
        return Err(NmfError::DimensionMismatch(format!(
            "pattern {:?} vs matrix {}x{} at rank {rank}",
            pattern.dims(),
            v.rows(),
            v.cols()
        )));
    }
    Ok(())
}

/// Conic program whose feasible set is the formulation's set `Q`, with the
/// objective set to `gradient` on `U, T` (zero when `None`).
pub fn build_program(
    v: &NonnegMatrix,
    rank: usize,
    form: Formulation,
    pattern: &SparsityPattern,
    gradient: Option<&Gradient>,
    options: &FormulationOptions,
) -> Result<(ConicProgram, VarLayout)> {
    check_rank(rank)?;
    check_pattern(v, rank, pattern)?;
    let target = options.effective_target(form, v)?;
    let layout = VarLayout::new(pattern);
    let (fs, ks, ns) = (v.rows(), rank, v.cols());
    let mut b = ProgramBuilder::new(layout.nvars);

    for f in 0..fs {
        for k in 0..ks {
            for n in 0..ns {
                let Some(a) = layout.aux(f, k, n) else { continue };
                let (iu, it) = (layout.u(f, k).unwrap(), layout.t(k, n).unwrap());
                let rows = match form {
                    Formulation::ExpUnder => {
                        [b.row(&[(a, -1.0)], 0.0), b.row(&[], 1.0), b.row(&[(iu, -1.0), (it, -1.0)], 0.0)]
                    }
                    Formulation::SocOver => {
                        [b.row(&[(iu, -1.0)], 0.0), b.row(&[(it, -0.5)], 0.0), b.row(&[(a, -1.0)], 0.0)]
                    }
                };
                b.cone(match form {
                    Formulation::ExpUnder => Cone::Exp(rows),
                    Formulation::SocOver => Cone::RotatedSoc(rows),
                });
            }
        }
    }

    let mut entries = Vec::with_capacity(ks);
    for f in 0..fs {
        for n in 0..ns {
            let vfn = target[[f, n]];
            entries.clear();
            let sign = match form {
                Formulation::ExpUnder => 1.0,
                Formulation::SocOver => -1.0,
            };
            entries.extend((0..ks).filter_map(|k| layout.aux(f, k, n)).map(|a| (a, sign)));
            if entries.is_empty() {
                if form == Formulation::SocOver && vfn > 0.0 {
                    return Err(NmfError::Unsupported(format!(
                        "pattern removes every term of entry ({f}, {n}) while V is positive there"
                    )));
                }
                continue;
            }
            let row = b.row(&entries, sign * vfn);
            b.cone(Cone::Nonneg(row));
        }
    }

    let (lo, hi) = options.latent_bounds(form);
    for i in (0..fs).flat_map(|f| (0..ks).map(move |k| (f, k))).filter_map(|(f, k)| layout.u(f, k)) {
        b.bound(i, lo, hi);
    }
    for i in (0..ks).flat_map(|k| (0..ns).map(move |n| (k, n))).filter_map(|(k, n)| layout.t(k, n)) {
        b.bound(i, lo, hi);
    }
    if form == Formulation::SocOver {
        let cap = target.iter().fold(0.0f64, |m, &x| m.max(x)) + 1.0;
        for a in layout.aux.iter().flatten() {
            b.bound(*a, 0.0, cap);
        }
    }
    if let Some(g) = gradient {
        for (i, c) in g.objective(&layout).into_iter().enumerate() {
            b.objective(i, c);
        }
    }
    Ok((b.build(), layout))
}

/// Concave objective `Phi(Z)` (minimization convention).
pub fn phi(z: &LatentPoint, pattern: &SparsityPattern) -> f64 {
    let (fs, ks, ns) = z.dims();
    match z.form {
        Formulation::ExpUnder => {
            let mut m = f64::NEG_INFINITY;
            for f in 0..fs {
                for k in 0..ks {
                    for n in 0..ns {
                        if !pattern.drops(f, k, n) {
                            m = m.max(z.u[[f, k]] + z.t[[k, n]]);
                        }
                    }
                }
            }
            if m == f64::NEG_INFINITY {
                return f64::INFINITY;
            }
            let mut s = 0.0;
            for f in 0..fs {
                for k in 0..ks {
                    for n in 0..ns {
                        if !pattern.drops(f, k, n) {
                            s += (z.u[[f, k]] + z.t[[k, n]] - m).exp();
                        }
                    }
                }
            }
            -(m + s.ln())
        }
        Formulation::SocOver => {
            let mut s = 0.0;
            for f in 0..fs {
                for k in 0..ks {
                    if pattern.has_u(f, k) {
                        continue;
                    }
                    let su = z.u[[f, k]].max(0.0).sqrt();
                    for n in 0..ns {
                        if !pattern.has_t(k, n) {
                            s += su * z.t[[k, n]].max(0.0).sqrt();
                        }
                    }
                }
            }
            s
        }
    }
}

pub fn grad_phi(z: &LatentPoint, pattern: &SparsityPattern) -> Result<Gradient> {
    let (fs, ks, ns) = z.dims();
    let mut gu = Array2::zeros((fs, ks));
    let mut gt = Array2::zeros((ks, ns));
    match z.form {
        Formulation::ExpUnder => {
            let lse = -phi(z, pattern);
            for f in 0..fs {
                for k in 0..ks {
                    for n in 0..ns {
                        if !pattern.drops(f, k, n) {
                            let p = (z.u[[f, k]] + z.t[[k, n]] - lse).exp();
                            gu[[f, k]] -= p;
                            gt[[k, n]] -= p;
                        }
                    }
                }
            }
        }
        Formulation::SocOver => {
            let su = z.u.mapv(|x| x.max(0.0).sqrt());
            let st = z.t.mapv(|x| x.max(0.0).sqrt());
            for f in 0..fs {
                for k in 0..ks {
                    if pattern.has_u(f, k) {
                        continue;
                    }
                    if !(su[[f, k]] > 0.0) {
                        return Err(NmfError::Singularity(format!("U[{f}, {k}] = {}", z.u[[f, k]])));
                    }
                    let partners: f64 = (0..ns).filter(|&n| !pattern.has_t(k, n)).map(|n| st[[k, n]]).sum();
                    gu[[f, k]] = partners / (2.0 * su[[f, k]]);
                }
            }
            for k in 0..ks {
                for n in 0..ns {
                    if pattern.has_t(k, n) {
                        continue;
                    }
                    if !(st[[k, n]] > 0.0) {
                        return Err(NmfError::Singularity(format!("T[{k}, {n}] = {}", z.t[[k, n]])));
                    }
                    let partners: f64 = (0..fs).filter(|&f| !pattern.has_u(f, k)).map(|f| su[[f, k]]).sum();
                    gt[[k, n]] = partners / (2.0 * st[[k, n]]);
                }
            }
        }
    }
    Ok(Gradient { u: gu, t: gt })
}

/// Certified lower bound on `Phi` over the feasible set of `target`.
pub fn phi_lower_bound(form: Formulation, target: &Array2<f64>) -> f64 {
    let total: f64 = target.sum();
    match form {
        Formulation::ExpUnder => -total.ln(),
        Formulation::SocOver => total,
    }
}

pub fn to_factors(z: &LatentPoint, pattern: &SparsityPattern) -> FactorPair {
    let map = |x: f64| match z.form {
        Formulation::ExpUnder => x.exp(),
        Formulation::SocOver => x.max(0.0).sqrt(),
    };
    let mut w = z.u.mapv(map);
    let mut h = z.t.mapv(map);
    for (f, k) in pattern.zeroed_u() {
        w[[f, k]] = 0.0;
    }
    for (k, n) in pattern.zeroed_t() {
        h[[k, n]] = 0.0;
    }
    FactorPair { w, h }
}

/// Strictly interior latent point built from positive factors.
///
/// `W` is first clipped into the box and then rescaled so the product sits
/// strictly inside the rows (`WH <= (1 - 2e-6) V` for exp,
/// `WH >= (1 + 2e-6) V` for soc); `t` takes the tight cone values moved
/// inward by a relative `1e-6`.
pub fn from_factors(
    pair: &FactorPair,
    v: &NonnegMatrix,
    form: Formulation,
    pattern: &SparsityPattern,
    options: &FormulationOptions,
) -> Result<LatentPoint> {
    let rank = pair.rank();
    check_rank(rank)?;
    check_pattern(v, rank, pattern)?;
    if pair.w.nrows() != v.rows() || pair.h.ncols() != v.cols() {
        return Err(NmfError::DimensionMismatch("factors do not match the matrix".into()));
    }
    let target = options.effective_target(form, v)?;
    let (fs, ks, ns) = (v.rows(), rank, v.cols());
    let bmax = options.bound * (1.0 - 1e-6);
    let bmin = match form {
        Formulation::ExpUnder => 1.0 / bmax,
        Formulation::SocOver => 0.0,
    };
    let mut w = pair.w.clone();
    let mut h = pair.h.clone();
    for ((f, k), x) in w.indexed_iter_mut() {
        if pattern.has_u(f, k) {
            *x = 0.0;
        } else if !(*x > 0.0) || !x.is_finite() {
            return Err(NmfError::InvalidInput(format!("W[{f}, {k}] = {x} is not positive")));
        } else {
            *x = x.clamp(bmin, bmax);
        }
    }
    for ((k, n), x) in h.indexed_iter_mut() {
        if pattern.has_t(k, n) {
            *x = 0.0;
        } else if !(*x > 0.0) || !x.is_finite() {
            return Err(NmfError::InvalidInput(format!("H[{k}, {n}] = {x} is not positive")));
        } else {
            *x = x.clamp(bmin, bmax);
        }
    }

    let product = w.dot(&h);
    match form {
        Formulation::ExpUnder => {
            let worst = product
                .iter()
                .zip(target.iter())
                .map(|(&p, &t)| {
                    if t > 0.0 {
                        p / t
                    } else if p > 0.0 {
                        f64::INFINITY
                    } else {
                        0.0
                    }
                })
                .fold(0.0f64, f64::max);
            let limit = 1.0 - 2e-6;
            if worst > limit {
                if !worst.is_finite() {
                    return Err(NmfError::Unsupported("a zero entry of V admits no positive product".into()));
                }
                w.mapv_inplace(|x| x * limit / worst);
            }
        }
        Formulation::SocOver => {
            let mut worst = f64::INFINITY;
            for (&p, &t) in product.iter().zip(target.iter()) {
                if t > 0.0 {
                    worst = worst.min(p / t);
                }
            }
            let limit = 1.0 + 2e-6;
            if worst < limit {
                if !(worst > 0.0) {
                    return Err(NmfError::Unsupported("pattern leaves a positive entry of V without support".into()));
                }
                w.mapv_inplace(|x| x * limit / worst);
            }
        }
    }

    let cap = (target.iter().fold(0.0f64, |m, &x| m.max(x)) + 1.0) * (1.0 - 1e-6);
    let mut aux = vec![0.0; fs * ks * ns];
    for f in 0..fs {
        for k in 0..ks {
            for n in 0..ns {
                if pattern.drops(f, k, n) {
                    continue;
                }
                let p = w[[f, k]] * h[[k, n]];
                aux[(f * ks + k) * ns + n] = match form {
                    Formulation::ExpUnder => p * (1.0 + 1e-6),
                    Formulation::SocOver => (p * (1.0 - 1e-6)).min(cap),
                };
            }
        }
    }
    let inv = |x: f64| match form {
        Formulation::ExpUnder => {
            if x > 0.0 {
                x.ln()
            } else {
                0.0
            }
        }
        Formulation::SocOver => x * x,
    };
    Ok(LatentPoint { form, u: w.mapv(inv), t: h.mapv(inv), aux })
}

/// Largest violation of the cone memberships and linear rows of `Q` at `z`.
pub fn feasibility_residual(
    z: &LatentPoint,
    v: &NonnegMatrix,
    pattern: &SparsityPattern,
    options: &FormulationOptions,
) -> Result<f64> {
    let target = options.effective_target(z.form, v)?;
    let (fs, ks, ns) = z.dims();
    let mut worst = 0.0f64;
    for f in 0..fs {
        for n in 0..ns {
            let mut sum = 0.0;
            for k in 0..ks {
                if pattern.drops(f, k, n) {
                    continue;
                }
                let a = z.aux_at(f, k, n);
                sum += a;
                let (cone, x) = match z.form {
                    Formulation::ExpUnder => (Cone::Exp([0, 1, 2]), [a, 1.0, z.u[[f, k]] + z.t[[k, n]]]),
                    Formulation::SocOver => (Cone::RotatedSoc([0, 1, 2]), [z.u[[f, k]], 0.5 * z.t[[k, n]], a]),
                };
                if !membership(&cone, &x, 0.0) {
                    worst = worst.max(cone.distance(&x));
                }
            }
            let row = match z.form {
                Formulation::ExpUnder => sum - target[[f, n]],
                Formulation::SocOver => target[[f, n]] - sum,
            };
            worst = worst.max(row);
        }
    }
    Ok(worst)
}

/// Result of one sparsification pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpiOutcome {
    pub pattern: SparsityPattern,
    pub point: LatentPoint,
    pub added_u: Vec<(usize, usize)>,
    pub added_t: Vec<(usize, usize)>,
    /// Components whose `W` column or `H` row became entirely zero.
    pub collapsed: Vec<usize>,
}

impl SpiOutcome {
    pub fn changed(&self) -> bool {
        !self.added_u.is_empty() || !self.added_t.is_empty()
    }
}

/// Adds every entry below `th` to the pattern and projects `z` onto it
/// (pattern entries and dropped `t` set to zero). The projected point can
/// leave the interior of the reduced set; see [`restore_interior`].
pub fn spi_apply(z: &LatentPoint, pattern: &SparsityPattern, th: f64, units: ThresholdUnits) -> Result<SpiOutcome> {
    if !(th > 0.0) {
        return Err(NmfError::InvalidInput("sparsification threshold must be positive".into()));
    }
    let small = |x: f64| match (units, z.form) {
        (ThresholdUnits::Latent, _) => x.abs() < th,
        (ThresholdUnits::Factor, Formulation::ExpUnder) => x.exp() < th,
        (ThresholdUnits::Factor, Formulation::SocOver) => x.max(0.0).sqrt() < th,
    };
    let mut next = pattern.clone();
    let mut added_u = Vec::new();
    let mut added_t = Vec::new();
    for ((f, k), &x) in z.u.indexed_iter() {
        if !pattern.has_u(f, k) && small(x) {
            next.insert_u(f, k);
            added_u.push((f, k));
        }
    }
    for ((k, n), &x) in z.t.indexed_iter() {
        if !pattern.has_t(k, n) && small(x) {
            next.insert_t(k, n);
            added_t.push((k, n));
        }
    }
    let mut point = z.clone();
    let (fs, ks, ns) = z.dims();
    for &(f, k) in &added_u {
        point.u[[f, k]] = 0.0;
    }
    for &(k, n) in &added_t {
        point.t[[k, n]] = 0.0;
    }
    for f in 0..fs {
        for k in 0..ks {
            for n in 0..ns {
                if next.drops(f, k, n) {
                    point.aux[(f * ks + k) * ns + n] = 0.0;
                }
            }
        }
    }
    let before = pattern.collapsed_components();
    let collapsed: Vec<usize> = next.collapsed_components().into_iter().filter(|k| !before.contains(k)).collect();
    if !collapsed.is_empty() {
        warn!("sparsification zeroed whole components {collapsed:?}");
    }
    Ok(SpiOutcome { pattern: next, point, added_u, added_t, collapsed })
}

/// Moves `z` back into the interior of the set defined by `pattern`.
pub fn restore_interior(
    z: &LatentPoint,
    v: &NonnegMatrix,
    pattern: &SparsityPattern,
    options: &FormulationOptions,
) -> Result<LatentPoint> {
    from_factors(&to_factors(z, pattern), v, z.form, pattern, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::builtin_matrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pair(f: usize, k: usize, n: usize, seed: u64) -> FactorPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Array2::from_shape_fn((f, k), |_| rng.random_range(0.05..1.0));
        let h = Array2::from_shape_fn((k, n), |_| rng.random_range(0.05..1.0));
        FactorPair { w, h }
    }

    fn positive_matrix(f: usize, n: usize, seed: u64) -> NonnegMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NonnegMatrix::new("pos", Array2::from_shape_fn((f, n), |_| rng.random_range(0.1..1.0))).unwrap()
    }

    #[test]
    fn counts_for_six_by_six_rank_five() {
        let v = builtin_matrix("hex_ainf").unwrap();
        let pattern = SparsityPattern::empty(6, 5, 6);
        let (p, layout) =
            build_program(&v, 5, Formulation::SocOver, &pattern, None, &FormulationOptions::default()).unwrap();
        let rsoc = p.cones.iter().filter(|c| matches!(c, Cone::RotatedSoc(_))).count();
        let rows = p.cones.iter().filter(|c| matches!(c, Cone::Nonneg(_))).count();
        assert_eq!((rsoc, rows), (180, 36));
        assert_eq!(layout.nvars, 30 + 30 + 180);
        assert!(p.validate().is_ok());
    }

    #[test]
    fn zeroing_one_u_entry_drops_a_slice() {
        let v = positive_matrix(4, 5, 1);
        let mut pattern = SparsityPattern::empty(4, 3, 5);
        let opts = FormulationOptions::default();
        let (full, _) = build_program(&v, 3, Formulation::SocOver, &pattern, None, &opts).unwrap();
        pattern.insert_u(2, 1);
        let (reduced, layout) = build_program(&v, 3, Formulation::SocOver, &pattern, None, &opts).unwrap();
        assert_eq!(full.cones.len() - reduced.cones.len(), 5);
        assert_eq!(layout.aux_count(), 4 * 3 * 5 - 5);
        assert_eq!(pattern.dropped_t().len(), 5);
    }

    #[test]
    fn rank_zero_and_exp_zero_entries_are_rejected() {
        let v = builtin_matrix("hex_ainf").unwrap();
        let opts = FormulationOptions::default();
        let p0 = SparsityPattern::empty(6, 0, 6);
        assert!(matches!(build_program(&v, 0, Formulation::SocOver, &p0, None, &opts), Err(NmfError::InvalidInput(_))));
        let p = SparsityPattern::empty(6, 5, 6);
        assert!(matches!(build_program(&v, 5, Formulation::ExpUnder, &p, None, &opts), Err(NmfError::Unsupported(_))));
        let shifted = FormulationOptions { eps_shift: Some(1e-8), ..opts };
        assert!(build_program(&v, 5, Formulation::ExpUnder, &p, None, &shifted).is_ok());
    }

    #[test]
    fn uniform_points() {
        let (f, k, n) = (3, 2, 4);
        let pattern = SparsityPattern::empty(f, k, n);
        let zero = LatentPoint {
            form: Formulation::ExpUnder,
            u: Array2::zeros((f, k)),
            t: Array2::zeros((k, n)),
            aux: vec![0.0; f * k * n],
        };
        assert!((phi(&zero, &pattern) + ((f * n * k) as f64).ln()).abs() < 1e-14);
        let g = grad_phi(&zero, &pattern).unwrap();
        assert!(g.u.iter().all(|&x| (x + 1.0 / (f * k) as f64).abs() < 1e-14));
        assert!(g.t.iter().all(|&x| (x + 1.0 / (n * k) as f64).abs() < 1e-14));

        let ones = LatentPoint {
            form: Formulation::SocOver,
            u: Array2::ones((f, k)),
            t: Array2::ones((k, n)),
            aux: vec![0.0; f * k * n],
        };
        assert!((phi(&ones, &pattern) - (f * n * k) as f64).abs() < 1e-12);
        let g = grad_phi(&ones, &pattern).unwrap();
        assert!(g.u.iter().all(|&x| (x - n as f64 / 2.0).abs() < 1e-14));
    }

    #[test]
    fn soc_gradient_at_zero_is_singular() {
        let pattern = SparsityPattern::empty(2, 1, 2);
        let z = LatentPoint {
            form: Formulation::SocOver,
            u: Array2::from_shape_vec((2, 1), vec![0.0, 1.0]).unwrap(),
            t: Array2::ones((1, 2)),
            aux: vec![0.0; 4],
        };
        assert!(matches!(grad_phi(&z, &pattern), Err(NmfError::Singularity(_))));
    }

    #[test]
    fn change_of_variables() {
        let pattern = SparsityPattern::empty(1, 1, 1);
        let z = LatentPoint {
            form: Formulation::SocOver,
            u: Array2::from_elem((1, 1), 4.0),
            t: Array2::from_elem((1, 1), 1.0),
            aux: vec![0.0],
        };
        assert_eq!(to_factors(&z, &pattern).w[[0, 0]], 2.0);
        let z = LatentPoint { form: Formulation::ExpUnder, u: Array2::zeros((1, 1)), ..z };
        assert_eq!(to_factors(&z, &pattern).w[[0, 0]], 1.0);
    }

    #[test]
    fn exact_product_is_inflated_for_soc() {
        let pair = random_pair(5, 3, 6, 9);
        let v_exact = NonnegMatrix::new("exact", pair.product()).unwrap();
        let pattern = SparsityPattern::empty(5, 3, 6);
        let opts = FormulationOptions::default();
        let z = from_factors(&pair, &v_exact, Formulation::SocOver, &pattern, &opts).unwrap();
        let back = to_factors(&z, &pattern);
        let ratio = back.w[[0, 0]] / pair.w[[0, 0]];
        assert!((ratio - (1.0 + 2e-6)).abs() < 1e-12);
        assert!(feasibility_residual(&z, &v_exact, &pattern, &opts).unwrap() <= 0.0);
    }

    #[test]
    fn spi_examples() {
        let pattern = SparsityPattern::empty(2, 2, 3);
        let mut z = LatentPoint {
            form: Formulation::SocOver,
            u: Array2::from_elem((2, 2), 0.25),
            t: Array2::from_elem((2, 3), 0.25),
            aux: vec![0.1; 12],
        };
        let out = spi_apply(&z, &pattern, 1e-3, ThresholdUnits::Factor).unwrap();
        assert!(!out.changed());
        // W entry 1e-5 means U = 1e-10
        z.u[[1, 0]] = 1e-10;
        let out = spi_apply(&z, &pattern, 1e-3, ThresholdUnits::Factor).unwrap();
        assert_eq!(out.added_u, vec![(1, 0)]);
        assert_eq!(out.pattern.dropped_t().len(), 3);
        assert_eq!(out.point.aux_at(1, 0, 2), 0.0);
        assert!(out.collapsed.is_empty());
        assert!(out.pattern.is_subset_of(&out.pattern) && pattern.is_subset_of(&out.pattern));
        // the latent comparison keeps U = 1e-10 as small too, but not W-sized 0.02
        z.u[[0, 1]] = 4e-4;
        let f = spi_apply(&z, &pattern, 1e-3, ThresholdUnits::Factor).unwrap();
        let l = spi_apply(&z, &pattern, 1e-3, ThresholdUnits::Latent).unwrap();
        assert!(!f.pattern.has_u(0, 1));
        assert!(l.pattern.has_u(0, 1));
    }

    #[test]
    fn collapse_is_reported() {
        let pattern = SparsityPattern::empty(2, 2, 2);
        let mut z = LatentPoint {
            form: Formulation::SocOver,
            u: Array2::from_elem((2, 2), 1.0),
            t: Array2::from_elem((2, 2), 1.0),
            aux: vec![1.0; 8],
        };
        z.u[[0, 1]] = 0.0;
        z.u[[1, 1]] = 0.0;
        let out = spi_apply(&z, &pattern, 1e-3, ThresholdUnits::Factor).unwrap();
        assert_eq!(out.collapsed, vec![1]);
    }

    fn latent_from_seed(form: Formulation, seed: u64) -> (LatentPoint, NonnegMatrix) {
        let v = positive_matrix(3, 4, seed ^ 0xabc);
        let pair = random_pair(3, 2, 4, seed);
        let pattern = SparsityPattern::empty(3, 2, 4);
        let z = from_factors(&pair, &v, form, &pattern, &FormulationOptions::default()).unwrap();
        (z, v)
    }

    /// Central-difference step; soc entries are positive and may be tiny.
    fn fd_step(form: Formulation, x: f64) -> f64 {
        match form {
            Formulation::ExpUnder => 1e-5 * x.abs().max(1e-3),
            Formulation::SocOver => 1e-5 * x.abs(),
        }
    }

    fn fd_check(z: &LatentPoint) {
        let pattern = SparsityPattern::empty(z.u.nrows(), z.u.ncols(), z.t.ncols());
        let g = grad_phi(z, &pattern).unwrap();
        let scale = g.u.iter().chain(g.t.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
        let check = |analytic: f64, plus: &LatentPoint, minus: &LatentPoint, step: f64| {
            let fd = (phi(plus, &pattern) - phi(minus, &pattern)) / (2.0 * step);
            assert!((analytic - fd).abs() <= 1e-6 * analytic.abs().max(fd.abs()) + 1e-8 * scale, "{analytic} vs {fd}");
        };
        for idx in z.u.indexed_iter().map(|(i, _)| i) {
            let step = fd_step(z.form, z.u[idx]);
            let (mut p, mut m) = (z.clone(), z.clone());
            p.u[idx] += step;
            m.u[idx] -= step;
            check(g.u[idx], &p, &m, step);
        }
        for idx in z.t.indexed_iter().map(|(i, _)| i) {
            let step = fd_step(z.form, z.t[idx]);
            let (mut p, mut m) = (z.clone(), z.clone());
            p.t[idx] += step;
            m.t[idx] -= step;
            check(g.t[idx], &p, &m, step);
        }
    }

    proptest! {
        #[test]
        fn gradients_match_finite_differences(seed in 0u64..10_000) {
            for form in [Formulation::ExpUnder, Formulation::SocOver] {
                fd_check(&latent_from_seed(form, seed).0);
            }
        }

        #[test]
        fn feasibility_transfers_to_factors(seed in 0u64..10_000) {
            for form in [Formulation::ExpUnder, Formulation::SocOver] {
                let (z, v) = latent_from_seed(form, seed);
                let pattern = SparsityPattern::empty(3, 2, 4);
                let opts = FormulationOptions::default();
                prop_assert!(feasibility_residual(&z, &v, &pattern, &opts).unwrap() <= 0.0);
                let product = to_factors(&z, &pattern).product();
                for (&p, &t) in product.iter().zip(v.entries().iter()) {
                    match form {
                        Formulation::ExpUnder => prop_assert!(p <= t + 1e-9),
                        Formulation::SocOver => prop_assert!(p >= t - 1e-9),
                    }
                }
                let lb = phi_lower_bound(form, &v.entries().to_owned());
                prop_assert!(phi(&z, &pattern) >= lb - 1e-12);
            }
        }

        #[test]
        fn phi_is_concave(seed in 0u64..10_000, lambda in 0.0f64..1.0) {
            for form in [Formulation::ExpUnder, Formulation::SocOver] {
                let (a, _) = latent_from_seed(form, seed);
                let (b, _) = latent_from_seed(form, seed + 77);
                let pattern = SparsityPattern::empty(3, 2, 4);
                let mid = b.combine(&a, lambda);
                let lhs = phi(&mid, &pattern);
                let rhs = lambda * phi(&a, &pattern) + (1.0 - lambda) * phi(&b, &pattern);
                prop_assert!(lhs >= rhs - 1e-9, "{lhs} < {rhs}");
            }
        }

        #[test]
        fn factor_round_trip(seed in 0u64..10_000) {
            let pair = random_pair(3, 2, 4, seed);
            let big = NonnegMatrix::new("big", Array2::from_elem((3, 4), 100.0)).unwrap();
            let tiny = NonnegMatrix::new("tiny", Array2::from_elem((3, 4), 1e-3)).unwrap();
            let pattern = SparsityPattern::empty(3, 2, 4);
            let opts = FormulationOptions::default();
            for (form, v) in [(Formulation::ExpUnder, &big), (Formulation::SocOver, &tiny)] {
                let z = from_factors(&pair, v, form, &pattern, &opts).unwrap();
                let back = to_factors(&z, &pattern);
                for (a, b) in back.w.iter().chain(back.h.iter()).zip(pair.w.iter().chain(pair.h.iter())) {
                    prop_assert!((a - b).abs() <= 1e-12 * b.abs());
                }
            }
        }
    }
}
