//! Sparse Cholesky factorization for the Newton systems.
//!
//! The symbolic phase computes a minimum-degree elimination order from the
//! variable cliques of the barrier blocks and the resulting fill pattern.
//! The numeric phase is a left-looking column factorization that works in
//! place on values assembled directly into the pattern of `L`.

use std::collections::BTreeSet;

#[derive(Clone, Debug)]
pub struct SparseCholesky {
    n: usize,
    /// `perm[new] = old`
    perm: Vec<usize>,
    iperm: Vec<usize>,
    col_ptr: Vec<usize>,
    /// Row indices (new numbering); the diagonal comes first in each column.
    row_idx: Vec<usize>,
    /// For row `j`, the columns `k < j` with `L[j, k] != 0`, ascending.
    rl_ptr: Vec<usize>,
    rl_idx: Vec<usize>,
    vals: Vec<f64>,
    assembled: Vec<f64>,
    work: Vec<f64>,
    next: Vec<usize>,
}

impl SparseCholesky {
    /// Symbolic analysis of a symmetric matrix whose off-diagonal pattern is
    /// the union of the given cliques (indices `< n`).
    pub fn analyze<'a>(n: usize, cliques: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for clique in cliques {
            for &a in clique {
                for &b in clique {
                    if a != b {
                        adj[a].insert(b);
                    }
                }
            }
        }

        let mut eliminated = vec![false; n];
        let mut perm = Vec::with_capacity(n);
        let mut patterns: Vec<Vec<usize>> = Vec::with_capacity(n);
        for _ in 0..n {
            let v = (0..n).filter(|&i| !eliminated[i]).min_by_key(|&i| (adj[i].len(), i)).expect("uneliminated node");
            let nbrs: Vec<usize> = adj[v].iter().copied().collect();
            for &u in &nbrs {
                adj[u].remove(&v);
                for &w in &nbrs {
                    if w != u {
                        adj[u].insert(w);
                    }
                }
            }
            adj[v].clear();
            eliminated[v] = true;
            perm.push(v);
            patterns.push(nbrs);
        }

        let mut iperm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        let mut row_lists: Vec<Vec<usize>> = vec![Vec::new(); n];
        col_ptr.push(0);
        for (j, pat) in patterns.iter().enumerate() {
            let mut rows: Vec<usize> = pat.iter().map(|&old| iperm[old]).collect();
            rows.sort_unstable();
            debug_assert!(rows.iter().all(|&r| r > j));
            row_idx.push(j);
            for &r in &rows {
                row_lists[r].push(j);
            }
            row_idx.extend(rows);
            col_ptr.push(row_idx.len());
        }
        let mut rl_ptr = vec![0];
        let mut rl_idx = Vec::new();
        for list in row_lists {
            rl_idx.extend(list);
            rl_ptr.push(rl_idx.len());
        }
        let nnz = row_idx.len();
        Self {
            n,
            perm,
            iperm,
            col_ptr,
            row_idx,
            rl_ptr,
            rl_idx,
            vals: vec![0.0; nnz],
            assembled: vec![0.0; nnz],
            work: vec![0.0; n],
            next: vec![0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// Storage slot of entry `(a, b)` (original numbering, either order).
    /// Panics when the entry is outside the pattern.
    pub fn slot(&self, a: usize, b: usize) -> usize {
        let (i, j) = {
            let (x, y) = (self.iperm[a], self.iperm[b]);
            if x >= y {
                (x, y)
            } else {
                (y, x)
            }
        };
        let col = &self.row_idx[self.col_ptr[j]..self.col_ptr[j + 1]];
        let pos = col.binary_search(&i).unwrap_or_else(|_| panic!("entry ({a}, {b}) is outside the symbolic pattern"));
        self.col_ptr[j] + pos
    }

    pub fn diag_slot(&self, a: usize) -> usize {
        self.col_ptr[self.iperm[a]]
    }

    pub fn clear(&mut self) {
        self.assembled.iter_mut().for_each(|v| *v = 0.0);
    }

    #[inline]
    pub fn add(&mut self, slot: usize, v: f64) {
        self.assembled[slot] += v;
    }

    pub fn assembled_diag(&self, a: usize) -> f64 {
        self.assembled[self.diag_slot(a)]
    }

    /// Factors `A + diag(shift)` where `shift[a] = reg * (1 + |A_aa|)`.
    /// Returns the failing column on a nonpositive pivot.
    pub fn factor(&mut self, reg: f64) -> Result<(), usize> {
        self.vals.copy_from_slice(&self.assembled);
        if reg > 0.0 {
            for j in 0..self.n {
                let d = &mut self.vals[self.col_ptr[j]];
                *d += reg * (1.0 + d.abs());
            }
        }
        let x = &mut self.work;
        for j in 0..self.n {
            let (c0, c1) = (self.col_ptr[j], self.col_ptr[j + 1]);
            for p in c0..c1 {
                x[self.row_idx[p]] = self.vals[p];
            }
            for &k in &self.rl_idx[self.rl_ptr[j]..self.rl_ptr[j + 1]] {
                let pjk = self.next[k];
                debug_assert_eq!(self.row_idx[pjk], j);
                let ljk = self.vals[pjk];
                for p in pjk..self.col_ptr[k + 1] {
                    x[self.row_idx[p]] -= self.vals[p] * ljk;
                }
                self.next[k] = pjk + 1;
            }
            let d = x[j];
            if !(d > 0.0) || !d.is_finite() {
                for p in c0..c1 {
                    x[self.row_idx[p]] = 0.0;
                }
                return Err(self.perm[j]);
            }
            let ljj = d.sqrt();
            self.vals[c0] = ljj;
            x[j] = 0.0;
            for p in c0 + 1..c1 {
                let r = self.row_idx[p];
                self.vals[p] = x[r] / ljj;
                x[r] = 0.0;
            }
            self.next[j] = c0 + 1;
        }
        Ok(())
    }

    /// Solves `A x = b` in place using the last successful factorization.
    pub fn solve(&mut self, b: &mut [f64]) {
        let y = &mut self.work;
        for (old, &v) in b.iter().enumerate() {
            y[self.iperm[old]] = v;
        }
        for j in 0..self.n {
            let (c0, c1) = (self.col_ptr[j], self.col_ptr[j + 1]);
            let yj = y[j] / self.vals[c0];
            y[j] = yj;
            for p in c0 + 1..c1 {
                y[self.row_idx[p]] -= self.vals[p] * yj;
            }
        }
        for j in (0..self.n).rev() {
            let (c0, c1) = (self.col_ptr[j], self.col_ptr[j + 1]);
            let mut acc = y[j];
            for p in c0 + 1..c1 {
                acc -= self.vals[p] * y[self.row_idx[p]];
            }
            y[j] = acc / self.vals[c0];
        }
        for (old, v) in b.iter_mut().enumerate() {
            *v = y[self.iperm[old]];
            y[self.iperm[old]] = 0.0;
        }
    }

    /// `y = A x` with the assembled (unregularized) matrix.
    pub fn mul_assembled(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..self.n {
            let oj = self.perm[j];
            let (c0, c1) = (self.col_ptr[j], self.col_ptr[j + 1]);
            y[oj] += self.assembled[c0] * x[oj];
            for p in c0 + 1..c1 {
                let oi = self.perm[self.row_idx[p]];
                let a = self.assembled[p];
                y[oi] += a * x[oj];
                y[oj] += a * x[oi];
            }
        }
    }
}
