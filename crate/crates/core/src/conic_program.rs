//! Linear-objective conic programs in affine-slack form:
//!
//! ```text
//! minimize    c'z
//! subject to  s = h - G z,   s in K_1 x ... x K_m,   lower <= z <= upper
//! ```
//!
//! Each `K_i` is a 3-dimensional exponential or rotated second-order cone, a
//! nonnegative ray, or an interval. Every slack row belongs to exactly one cone.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

/// A cone block and the slack rows it constrains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Cone {
    /// closure of `{x1 >= x2 exp(x3 / x2), x2 > 0}`
    Exp([usize; 3]),
    /// `{2 x1 x2 >= x3^2, x1 >= 0, x2 >= 0}`
    RotatedSoc([usize; 3]),
    Nonneg(usize),
    /// `lower <= s <= upper`; either side may be infinite.
    Box {
        row: usize,
        lower: f64,
        upper: f64,
    },
}

impl Cone {
    pub fn rows(&self) -> &[usize] {
        match self {
            Cone::Exp(r) | Cone::RotatedSoc(r) => r,
            Cone::Nonneg(r) => std::slice::from_ref(r),
            Cone::Box { row, .. } => std::slice::from_ref(row),
        }
    }

    pub fn dim(&self) -> usize {
        self.rows().len()
    }

    /// True iff `x` lies within Euclidean distance `tol` of the set.
    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        membership(self, x, tol)
    }

    pub fn distance(&self, x: &[f64]) -> f64 {
        match self {
            Cone::Exp(_) => exp_cone_distance([x[0], x[1], x[2]]),
            Cone::RotatedSoc(_) => rsoc_distance([x[0], x[1], x[2]]),
            Cone::Nonneg(_) => (-x[0]).max(0.0),
            Cone::Box { lower, upper, .. } => (lower - x[0]).max(x[0] - upper).max(0.0),
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            Cone::Exp(_) => "exp",
            Cone::RotatedSoc(_) => "rsoc",
            Cone::Nonneg(_) => "nonneg",
            Cone::Box { .. } => "box",
        }
    }
}

/// Membership test with absolute distance tolerance.
pub fn membership(cone: &Cone, x: &[f64], tol: f64) -> bool {
    assert_eq!(x.len(), cone.dim(), "point dimension does not match the cone");
    if x.iter().any(|v| v.is_nan()) {
        return false;
    }
    let inside = match cone {
        Cone::Exp(_) => in_exp_cone([x[0], x[1], x[2]]),
        Cone::RotatedSoc(_) => x[0] >= 0.0 && x[1] >= 0.0 && 2.0 * x[0] * x[1] >= x[2] * x[2],
        Cone::Nonneg(_) => x[0] >= 0.0,
        Cone::Box { lower, upper, .. } => *lower <= x[0] && x[0] <= *upper,
    };
    inside || cone.distance(x) <= tol
}

fn in_exp_cone(x: [f64; 3]) -> bool {
    if x[1] > 0.0 {
        x[0] >= x[1] * (x[2] / x[1]).exp()
    } else {
        x[1] == 0.0 && x[0] >= 0.0 && x[2] <= 0.0
    }
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Distance to the rotated cone via the rotation onto the Lorentz cone.
pub fn rsoc_distance(x: [f64; 3]) -> f64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let t = s * (x[0] + x[1]);
    let y = [s * (x[0] - x[1]), x[2]];
    let r = y[0].hypot(y[1]);
    if r <= t {
        0.0
    } else if r <= -t {
        t.hypot(r)
    } else {
        let a = 0.5 * (t + r);
        let d = [t - a, y[0] - a * y[0] / r, y[1] - a * y[1] / r];
        norm3(d)
    }
}

/// Distance from `v` to the ray spanned by `d`.
fn ray_distance(v: [f64; 3], d: [f64; 3]) -> f64 {
    let dd = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    let s = ((v[0] * d[0] + v[1] * d[1] + v[2] * d[2]) / dd).max(0.0);
    norm3([v[0] - s * d[0], v[1] - s * d[1], v[2] - s * d[2]])
}

/// Distance to the exponential cone. The boundary is the family of rays
/// `{s (e^r, 1, r)}` plus the face `{x2 = 0, x1 >= 0, x3 <= 0}`; the ray
/// parameter is located by a grid scan and golden-section refinement.
pub fn exp_cone_distance(v: [f64; 3]) -> f64 {
    if in_exp_cone(v) {
        return 0.0;
    }
    let face = (v[1] * v[1] + v[0].min(0.0).powi(2) + v[2].max(0.0).powi(2)).sqrt();
    let ray = |r: f64| ray_distance(v, [r.exp(), 1.0, r]);
    let (lo, hi, steps) = (-40.0, 40.0, 800);
    let h = (hi - lo) / steps as f64;
    let mut best = (f64::INFINITY, lo);
    for i in 0..=steps {
        let r = lo + h * i as f64;
        let d = ray(r);
        if d < best.0 {
            best = (d, r);
        }
    }
    let (mut a, mut b) = (best.1 - h, best.1 + h);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut c, mut d) = (b - g * (b - a), a + g * (b - a));
    let (mut fc, mut fd) = (ray(c), ray(d));
    for _ in 0..100 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = ray(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = ray(d);
        }
    }
    face.min(best.0).min(fc).min(fd).min(norm3(v))
}

/// Compressed sparse rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseRows {
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl SparseRows {
    pub fn new(ncols: usize) -> Self {
        Self { ncols, row_ptr: vec![0], cols: Vec::new(), vals: Vec::new() }
    }

    pub fn nrows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn push_row(&mut self, entries: &[(usize, f64)]) -> usize {
        for &(c, v) in entries {
            if v != 0.0 {
                self.cols.push(c);
                self.vals.push(v);
            }
        }
        self.row_ptr.push(self.cols.len());
        self.nrows() - 1
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn row_dot(&self, i: usize, z: &[f64]) -> f64 {
        let (c, v) = self.row(i);
        c.iter().zip(v).map(|(&j, &a)| a * z[j]).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarBound {
    pub lower: f64,
    pub upper: f64,
}

impl VarBound {
    pub const FREE: VarBound = VarBound { lower: f64::NEG_INFINITY, upper: f64::INFINITY };

    pub fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConicProgram {
    pub nvars: usize,
    pub objective: Vec<f64>,
    pub g: SparseRows,
    pub h: Vec<f64>,
    pub cones: Vec<Cone>,
    pub bounds: Vec<VarBound>,
}

/// A validation failure.
#[derive(Clone, Debug, PartialEq)]
pub enum Diagnostic {
    ObjectiveLength { expected: usize, found: usize },
    OffsetLength { rows: usize, found: usize },
    BoundsLength { expected: usize, found: usize },
    ColumnOutOfRange { row: usize, col: usize },
    RowOutOfRange { cone: usize, row: usize },
    RowUncovered(usize),
    RowDuplicated(usize),
    EmptyInterval { what: String, lower: f64, upper: f64 },
    NonFinite(String),
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::ObjectiveLength { expected, found } => {
                write!(f, "objective has length {found}, expected nvars = {expected}")
            }
            Diagnostic::OffsetLength { rows, found } => {
                write!(f, "offset h has length {found} but G has {rows} rows")
            }
            Diagnostic::BoundsLength { expected, found } => {
                write!(f, "{found} variable bounds for {expected} variables")
            }
            Diagnostic::ColumnOutOfRange { row, col } => write!(f, "row {row} references column {col}"),
            Diagnostic::RowOutOfRange { cone, row } => write!(f, "cone {cone} references missing row {row}"),
            Diagnostic::RowUncovered(r) => write!(f, "slack row {r} belongs to no cone"),
            Diagnostic::RowDuplicated(r) => write!(f, "slack row {r} belongs to more than one cone"),
            Diagnostic::EmptyInterval { what, lower, upper } => {
                write!(f, "{what} has empty interval [{lower}, {upper}]")
            }
            Diagnostic::NonFinite(what) => write!(f, "non-finite value in {what}"),
        }
    }
}

impl ConicProgram {
    pub fn nrows(&self) -> usize {
        self.g.nrows()
    }

    /// Checks dimensions and that the cone blocks partition the slack rows.
    pub fn validate(&self) -> Result<(), Vec<Diagnostic>> {
        let mut out = Vec::new();
        let m = self.nrows();
        if self.objective.len() != self.nvars {
            out.push(Diagnostic::ObjectiveLength { expected: self.nvars, found: self.objective.len() });
        }
        if self.h.len() != m {
            out.push(Diagnostic::OffsetLength { rows: m, found: self.h.len() });
        }
        if self.bounds.len() != self.nvars {
            out.push(Diagnostic::BoundsLength { expected: self.nvars, found: self.bounds.len() });
        }
        if self.g.ncols != self.nvars {
            out.push(Diagnostic::ColumnOutOfRange { row: 0, col: self.g.ncols });
        }
        for i in 0..m {
            for &c in self.g.row(i).0 {
                if c >= self.nvars {
                    out.push(Diagnostic::ColumnOutOfRange { row: i, col: c });
                }
            }
        }
        if self.objective.iter().chain(&self.h).chain(&self.g.vals).any(|x| !x.is_finite()) {
            out.push(Diagnostic::NonFinite("objective, G or h".into()));
        }
        let mut cover = vec![0u32; m];
        for (ci, cone) in self.cones.iter().enumerate() {
            for &r in cone.rows() {
                if r >= m {
                    out.push(Diagnostic::RowOutOfRange { cone: ci, row: r });
                } else {
                    cover[r] += 1;
                }
            }
            if let Cone::Box { lower, upper, .. } = cone {
                if !(lower < upper) {
                    out.push(Diagnostic::EmptyInterval {
                        what: format!("box cone {ci}"),
                        lower: *lower,
                        upper: *upper,
                    });
                }
            }
        }
        for (r, &n) in cover.iter().enumerate() {
            match n {
                0 => out.push(Diagnostic::RowUncovered(r)),
                1 => {}
                _ => out.push(Diagnostic::RowDuplicated(r)),
            }
        }
        for (i, b) in self.bounds.iter().enumerate() {
            if !(b.lower < b.upper) {
                out.push(Diagnostic::EmptyInterval { what: format!("variable {i}"), lower: b.lower, upper: b.upper });
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }

    /// `s = h - G z`.
    pub fn slack(&self, z: &[f64]) -> Vec<f64> {
        (0..self.nrows()).map(|i| self.h[i] - self.g.row_dot(i, z)).collect()
    }

    pub fn objective_value(&self, z: &[f64]) -> f64 {
        self.objective.iter().zip(z).map(|(c, x)| c * x).sum()
    }

    /// Every cone and bound holds within `tol`.
    pub fn is_feasible(&self, z: &[f64], tol: f64) -> bool {
        let s = self.slack(z);
        let mut buf = [0.0; 3];
        self.cones.iter().all(|cone| {
            let rows = cone.rows();
            for (k, &r) in rows.iter().enumerate() {
                buf[k] = s[r];
            }
            cone.contains(&buf[..rows.len()], tol)
        }) && self.bounds.iter().zip(z).all(|(b, &x)| x >= b.lower - tol && x <= b.upper + tol)
    }

    /// Plain-text dump for cross-checking against external solvers.
    pub fn dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "nvars {}", self.nvars)?;
        writeln!(w, "nrows {}", self.nrows())?;
        writeln!(w, "objective")?;
        for (i, c) in self.objective.iter().enumerate() {
            if *c != 0.0 {
                writeln!(w, "{i} {c:e}")?;
            }
        }
        writeln!(w, "G")?;
        for i in 0..self.nrows() {
            let (cols, vals) = self.g.row(i);
            for (c, v) in cols.iter().zip(vals) {
                writeln!(w, "{i} {c} {v:e}")?;
            }
        }
        writeln!(w, "h")?;
        for (i, v) in self.h.iter().enumerate() {
            writeln!(w, "{i} {v:e}")?;
        }
        writeln!(w, "cones")?;
        for cone in &self.cones {
            write!(w, "{}", cone.tag())?;
            for r in cone.rows() {
                write!(w, " {r}")?;
            }
            if let Cone::Box { lower, upper, .. } = cone {
                write!(w, " {lower:e} {upper:e}")?;
            }
            writeln!(w)?;
        }
        writeln!(w, "bounds")?;
        for (i, b) in self.bounds.iter().enumerate() {
            if b.lower.is_finite() || b.upper.is_finite() {
                writeln!(w, "{i} {:e} {:e}", b.lower, b.upper)?;
            }
        }
        Ok(())
    }
}

/// Incremental construction of a [`ConicProgram`].
#[derive(Clone, Debug)]
pub struct ProgramBuilder {
    program: ConicProgram,
}

impl ProgramBuilder {
    pub fn new(nvars: usize) -> Self {
        Self {
            program: ConicProgram {
                nvars,
                objective: vec![0.0; nvars],
                g: SparseRows::new(nvars),
                h: Vec::new(),
                cones: Vec::new(),
                bounds: vec![VarBound::FREE; nvars],
            },
        }
    }

    /// Appends the slack row `s = h - sum(a_j z_j)` and returns its index.
    pub fn row(&mut self, entries: &[(usize, f64)], h: f64) -> usize {
        self.program.h.push(h);
        self.program.g.push_row(entries)
    }

    pub fn cone(&mut self, cone: Cone) -> &mut Self {
        self.program.cones.push(cone);
        self
    }

    pub fn bound(&mut self, var: usize, lower: f64, upper: f64) -> &mut Self {
        self.program.bounds[var] = VarBound::new(lower, upper);
        self
    }

    pub fn objective(&mut self, var: usize, c: f64) -> &mut Self {
        self.program.objective[var] = c;
        self
    }

    pub fn build(self) -> ConicProgram {
        self.program
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    /// The path broke down numerically after a centered iterate within a
    /// thousandfold of the optimality tolerance; that iterate is returned.
    NearOptimal,
    Infeasible,
    IterLimit,
    NumericFailure,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConicSolution {
    pub z: Vec<f64>,
    pub status: SolveStatus,
    pub objective: f64,
    /// `nu * mu / sum_i |c_i z_i|` at termination with `c` scaled to `max |c_i| = 1`;
    /// `nu` is the total barrier parameter.
    pub complementarity: f64,
    /// Largest cone/bound distance of the returned point.
    pub primal_residual: f64,
    pub mu: f64,
    pub outer_iterations: usize,
    pub newton_steps: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    #[test]
    fn exp_cone_examples() {
        let k = Cone::Exp([0, 1, 2]);
        assert!(k.contains(&[E, 1.0, 1.0], 1e-12));
        assert!(k.contains(&[1.0, 0.0, -1.0], 0.0));
        assert!(!k.contains(&[1.0, 0.0, 1.0], 1e-6));
        assert!(!k.contains(&[1.0, -1e-3, -1.0], 1e-6));
        assert!(k.contains(&[1.0, -1e-9, -1.0], 1e-6));
        assert!(!k.contains(&[2.0, 1.0, 1.0], 1e-3));
        // distance along the x3 axis to the boundary point (2, 1, ln 2)
        let d = exp_cone_distance([2.0, 1.0, 2f64.ln() + 1e-4]);
        assert!(d > 0.0 && d < 1e-4);
    }

    #[test]
    fn rsoc_examples() {
        let q = Cone::RotatedSoc([0, 1, 2]);
        assert!(q.contains(&[1.0, 0.5, 1.0], 1e-12));
        assert!(!q.contains(&[1.0, 0.5, 1.1], 1e-3));
        assert!(!q.contains(&[-1.0, -1.0, 0.0], 1e-3));
        assert!((rsoc_distance([-1.0, -1.0, 0.0]) - 2f64.sqrt()).abs() < 1e-14);
        assert_eq!(rsoc_distance([3.0, 2.0, 1.0]), 0.0);
    }

    #[test]
    fn rays_and_boxes() {
        assert!(Cone::Nonneg(0).contains(&[0.0], 0.0));
        assert!(!Cone::Nonneg(0).contains(&[-1e-3], 1e-4));
        let b = Cone::Box { row: 0, lower: 1.0, upper: f64::INFINITY };
        assert!(b.contains(&[5.0], 0.0));
        assert!(b.contains(&[0.9999], 1e-3));
        assert!(!b.contains(&[0.9], 1e-3));
    }

    fn two_cone_program() -> ProgramBuilder {
        let mut b = ProgramBuilder::new(2);
        for i in 0..6 {
            b.row(&[(i % 2, 1.0)], 1.0);
        }
        b
    }

    #[test]
    fn validate_partition() {
        let mut b = two_cone_program();
        b.cone(Cone::RotatedSoc([0, 1, 2])).cone(Cone::Exp([3, 4, 5]));
        assert_eq!(b.build().validate(), Ok(()));

        let mut b = two_cone_program();
        b.cone(Cone::RotatedSoc([0, 1, 2])).cone(Cone::Exp([2, 4, 5]));
        let diags = b.build().validate().unwrap_err();
        assert!(diags.contains(&Diagnostic::RowDuplicated(2)));
        assert!(diags.contains(&Diagnostic::RowUncovered(3)));
        assert!(diags.iter().any(|d| d.to_string().contains("row 2")));
    }

    #[test]
    fn validate_dimensions() {
        let mut b = two_cone_program();
        b.cone(Cone::RotatedSoc([0, 1, 2])).cone(Cone::Exp([3, 4, 5]));
        let mut p = b.build();
        p.objective.push(1.0);
        let diags = p.validate().unwrap_err();
        assert!(matches!(diags[0], Diagnostic::ObjectiveLength { expected: 2, found: 3 }));
    }

    #[test]
    fn dump_lists_everything() {
        let mut b = ProgramBuilder::new(1);
        let r = b.row(&[(0, -1.0)], 0.0);
        b.cone(Cone::Box { row: r, lower: 1.0, upper: 2.0 }).objective(0, 1.0).bound(0, 0.0, 5.0);
        let mut buf = Vec::new();
        b.build().dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("box 0 1e0 2e0"));
        assert!(text.contains("0 0 -1e0"));
        assert!(text.contains("bounds\n0 0e0 5e0"));
    }
}
