//! Logarithmic barriers of the three cone kinds, with closed-form derivatives.
//!
//! | kind | barrier | nu |
//! |------|---------|----|
//! | ray  | `-log x` | 1 |
//! | rotated SOC | `-log(2 x1 x2 - x3^2)` | 2 |
//! | exponential | `-log(x2 log(x1/x2) - x3) - log x1 - log x2` | 3 |

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BarrierKind {
    Ray,
    RotatedSoc,
    Exp,
}

impl BarrierKind {
    pub fn dim(self) -> usize {
        match self {
            BarrierKind::Ray => 1,
            _ => 3,
        }
    }

    pub fn nu(self) -> f64 {
        match self {
            BarrierKind::Ray => 1.0,
            BarrierKind::RotatedSoc => 2.0,
            BarrierKind::Exp => 3.0,
        }
    }

    /// An interior direction; adding a large multiple of it to any point
    /// lands in the interior.
    pub fn interior_direction(self) -> [f64; 3] {
        match self {
            BarrierKind::Ray => [1.0, 0.0, 0.0],
            BarrierKind::RotatedSoc => [1.0, 1.0, 0.0],
            BarrierKind::Exp => [1.0, 1.0, -1.0],
        }
    }

    pub fn in_domain(self, x: &[f64]) -> bool {
        match self {
            BarrierKind::Ray => x[0] > 0.0,
            BarrierKind::RotatedSoc => x[0] > 0.0 && x[1] > 0.0 && 2.0 * x[0] * x[1] - x[2] * x[2] > 0.0,
            BarrierKind::Exp => x[0] > 0.0 && x[1] > 0.0 && x[1] * (x[0] / x[1]).ln() - x[2] > 0.0,
        }
    }

    /// Barrier value, or `None` outside the open domain.
    pub fn value(self, x: &[f64]) -> Option<f64> {
        if !self.in_domain(x) {
            return None;
        }
        Some(match self {
            BarrierKind::Ray => -x[0].ln(),
            BarrierKind::RotatedSoc => -(2.0 * x[0] * x[1] - x[2] * x[2]).ln(),
            BarrierKind::Exp => {
                let psi = x[1] * (x[0] / x[1]).ln() - x[2];
                -psi.ln() - x[0].ln() - x[1].ln()
            }
        })
    }

    /// Writes the gradient into `g[..dim]` and the row-major Hessian into
    /// `hess[..dim*dim]`. `x` must be in the domain.
    pub fn derivatives(self, x: &[f64], g: &mut [f64], hess: &mut [f64]) {
        match self {
            BarrierKind::Ray => {
                let inv = 1.0 / x[0];
                g[0] = -inv;
                hess[0] = inv * inv;
            }
            BarrierKind::RotatedSoc => {
                let q = 2.0 * x[0] * x[1] - x[2] * x[2];
                let dq = [2.0 * x[1], 2.0 * x[0], -2.0 * x[2]];
                // d2q = [[0,2,0],[2,0,0],[0,0,-2]]
                let d2q = [0.0, 2.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, -2.0];
                let iq = 1.0 / q;
                for a in 0..3 {
                    g[a] = -dq[a] * iq;
                    for b in 0..3 {
                        hess[3 * a + b] = dq[a] * dq[b] * iq * iq - d2q[3 * a + b] * iq;
                    }
                }
            }
            BarrierKind::Exp => {
                let (x1, x2) = (x[0], x[1]);
                let lr = (x1 / x2).ln();
                let psi = x2 * lr - x[2];
                let dpsi = [x2 / x1, lr - 1.0, -1.0];
                let d2psi = [-x2 / (x1 * x1), 1.0 / x1, 0.0, 1.0 / x1, -1.0 / x2, 0.0, 0.0, 0.0, 0.0];
                let ip = 1.0 / psi;
                let own = [1.0 / x1, 1.0 / x2, 0.0];
                for a in 0..3 {
                    g[a] = -dpsi[a] * ip - own[a];
                    for b in 0..3 {
                        hess[3 * a + b] = dpsi[a] * dpsi[b] * ip * ip - d2psi[3 * a + b] * ip;
                    }
                    hess[3 * a + a] += own[a] * own[a];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, scale: f64) -> bool {
        (a - b).abs() <= 1e-5 * a.abs().max(b.abs()) + 1e-7 * scale
    }

    fn check_fd(kind: BarrierKind, x: [f64; 3]) {
        let d = kind.dim();
        let mut g = [0.0; 3];
        let mut hs = [0.0; 9];
        kind.derivatives(&x, &mut g, &mut hs);
        let gscale = g[..d].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let hscale = hs[..d * d].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for a in 0..d {
            let step = if a < 2 { 1e-6 * x[a] } else { 1e-6 * x[a].abs().max(1e-2) };
            let mut xp = x;
            let mut xm = x;
            xp[a] += step;
            xm[a] -= step;
            let fd = (kind.value(&xp).unwrap() - kind.value(&xm).unwrap()) / (2.0 * step);
            assert!(close(g[a], fd, gscale), "{kind:?} grad[{a}] {} vs {fd} at {x:?}", g[a]);
            let (mut gp, mut gm, mut scratch) = ([0.0; 3], [0.0; 3], [0.0; 9]);
            kind.derivatives(&xp, &mut gp, &mut scratch);
            kind.derivatives(&xm, &mut gm, &mut scratch);
            for b in 0..d {
                let fd2 = (gp[b] - gm[b]) / (2.0 * step);
                assert!(
                    close(hs[d * a + b], fd2, hscale),
                    "{kind:?} hess[{a}][{b}] {} vs {fd2} at {x:?}",
                    hs[d * a + b]
                );
            }
        }
    }

    proptest! {
        #[test]
        fn ray_derivatives(x in 0.01f64..100.0) {
            check_fd(BarrierKind::Ray, [x, 0.0, 0.0]);
        }

        #[test]
        fn rsoc_derivatives(x1 in 0.05f64..10.0, x2 in 0.05f64..10.0, frac in -0.9f64..0.9) {
            let x3 = frac * (2.0 * x1 * x2).sqrt();
            check_fd(BarrierKind::RotatedSoc, [x1, x2, x3]);
        }

        #[test]
        fn exp_derivatives(x2 in 0.1f64..5.0, x3 in -5.0f64..5.0, slack in 0.05f64..5.0) {
            let x1 = x2 * (x3 / x2).exp() * (1.0 + slack);
            check_fd(BarrierKind::Exp, [x1, x2, x3]);
        }
    }

    #[test]
    fn domains() {
        assert!(!BarrierKind::Ray.in_domain(&[0.0]));
        assert!(!BarrierKind::RotatedSoc.in_domain(&[1.0, 0.5, 1.0]));
        assert!(BarrierKind::RotatedSoc.in_domain(&[1.0, 0.5, 0.99]));
        assert!(!BarrierKind::Exp.in_domain(&[std::f64::consts::E, 1.0, 1.0]));
        assert!(BarrierKind::Exp.in_domain(&[3.0, 1.0, 1.0]));
        for kind in [BarrierKind::Ray, BarrierKind::RotatedSoc, BarrierKind::Exp] {
            assert!(kind.in_domain(&kind.interior_direction()));
        }
    }
}
