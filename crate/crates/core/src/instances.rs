//! Input matrices, factor pairs, the builtin instance catalog and error metrics.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NmfError, Result};

/// Names accepted by [`builtin_matrix`].
pub const BUILTIN_NAMES: [&str; 10] =
    ["random", "Vinf1", "Vinf2", "Vinf3", "Vinf4", "hex_a2", "hex_a3", "hex_a4", "hex_ainf", "appB_example"];

/// A dense nonnegative `F x N` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonnegMatrix {
    name: String,
    entries: Array2<f64>,
    known_nonneg_rank: Option<usize>,
}

impl NonnegMatrix {
    /// Validates nonnegativity and finiteness; reports the first offending coordinate.
    pub fn new(name: impl Into<String>, entries: Array2<f64>) -> Result<Self> {
        let (rows, cols) = entries.dim();
        if rows == 0 || cols == 0 {
            return Err(NmfError::InvalidInput(format!("matrix must be at least 1x1, got {rows}x{cols}")));
        }
        for ((row, col), &value) in entries.indexed_iter() {
            if !value.is_finite() {
                return Err(NmfError::InvalidInput(format!("non-finite entry at row {row}, column {col}")));
            }
            if value < 0.0 {
                return Err(NmfError::NegativeEntry { row, col, value });
            }
        }
        Ok(Self { name: name.into(), entries, known_nonneg_rank: None })
    }

    pub fn from_rows(name: impl Into<String>, rows: &[&[f64]]) -> Result<Self> {
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(NmfError::Parse("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let entries = Array2::from_shape_vec((rows.len(), ncols), flat).map_err(|e| NmfError::Parse(e.to_string()))?;
        Self::new(name, entries)
    }

    pub fn with_known_rank(mut self, rank: usize) -> Self {
        self.known_nonneg_rank = Some(rank);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn known_nonneg_rank(&self) -> Option<usize> {
        self.known_nonneg_rank
    }

    pub fn entries(&self) -> ArrayView2<'_, f64> {
        self.entries.view()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[[row, col]]
    }

    pub fn max_entry(&self) -> f64 {
        self.entries.iter().copied().fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius(self.entries.view())
    }

    pub fn has_zero_entry(&self) -> bool {
        self.entries.iter().any(|&v| v == 0.0)
    }

    /// Returns `alpha * V` under the same name and rank metadata.
    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(NmfError::InvalidInput("scale must be positive".into()));
        }
        Ok(Self { name: self.name.clone(), entries: &self.entries * alpha, known_nonneg_rank: self.known_nonneg_rank })
    }
}

/// Nonnegative factors `W` (`F x K`) and `H` (`K x N`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorPair {
    pub w: Array2<f64>,
    pub h: Array2<f64>,
}

impl FactorPair {
    pub fn new(w: Array2<f64>, h: Array2<f64>) -> Result<Self> {
        if w.ncols() != h.nrows() {
            return Err(NmfError::DimensionMismatch(format!(
                "W has {} columns but H has {} rows",
                w.ncols(),
                h.nrows()
            )));
        }
        if w.ncols() == 0 {
            return Err(NmfError::InvalidInput("rank K must be positive".into()));
        }
        if w.iter().chain(h.iter()).any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(NmfError::InvalidInput("factors must be finite and nonnegative".into()));
        }
        Ok(Self { w, h })
    }

    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    pub fn product(&self) -> Array2<f64> {
        self.w.dot(&self.h)
    }
}

pub(crate) fn frobenius(a: ArrayView2<'_, f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||V - WH||_F / ||V||_F`.
pub fn relative_error(v: &NonnegMatrix, pair: &FactorPair) -> Result<f64> {
    if pair.w.nrows() != v.rows() || pair.h.ncols() != v.cols() {
        return Err(NmfError::DimensionMismatch(format!(
            "factors give {}x{} but V is {}x{}",
            pair.w.nrows(),
            pair.h.ncols(),
            v.rows(),
            v.cols()
        )));
    }
    let norm = v.frobenius_norm();
    if norm == 0.0 {
        return Err(NmfError::InvalidInput("V is identically zero".into()));
    }
    let residual = &v.entries - &pair.product();
    Ok(frobenius(residual.view()) / norm)
}

/// Random `F x K` and `K x N` factors with uniform `[0, 1)` entries and their product.
pub fn gen_random_product_with_factors(
    rows: usize,
    cols: usize,
    rank: usize,
    seed: u64,
) -> Result<(NonnegMatrix, FactorPair)> {
    if rank == 0 || rank > rows.min(cols) {
        return Err(NmfError::InvalidInput(format!("rank {rank} must lie in 1..={}", rows.min(cols))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Array2::from_shape_simple_fn((rows, rank), || rng.random::<f64>());
    let h = Array2::from_shape_simple_fn((rank, cols), || rng.random::<f64>());
    let pair = FactorPair::new(w, h)?;
    let v = NonnegMatrix::new(format!("random_{rows}x{cols}_k{rank}_s{seed}"), pair.product())?.with_known_rank(rank);
    Ok((v, pair))
}

pub fn gen_random_product(rows: usize, cols: usize, rank: usize, seed: u64) -> Result<NonnegMatrix> {
    gen_random_product_with_factors(rows, cols, rank, seed).map(|(v, _)| v)
}

const VINF1: [[f64; 5]; 5] = [
    [573705., 806520., 167622., 246500., 531659.],
    [397096., 39600., 299176., 63720., 274120.],
    [131646., 403260., 30269., 226915., 264510.],
    [9114., 85160., 311182., 827468., 851798.],
    [147857., 3200., 351037., 599025., 697755.],
];

const VINF2: [[f64; 5]; 5] = [
    [30893., 319912., 149770., 873., 111428.],
    [383490., 87990., 5580., 628440., 587250.],
    [560076., 1030324., 331070., 288045., 350647.],
    [203830., 305184., 277512., 264376., 205933.],
    [90911., 142936., 500784., 618842., 609633.],
];

const VINF3: [[f64; 5]; 5] = [
    [948201., 723609., 958755., 591858., 397953.],
    [222448., 218040., 30429., 348793., 15825.],
    [329588., 7189., 623001., 12012., 469185.],
    [467424., 160704., 115092., 835504., 343912.],
    [1114797., 932972., 975775., 997164., 636096.],
];

const VINF4: [[f64; 5]; 5] = [
    [88076., 294646., 658787., 902872., 244559.],
    [2216., 4216., 596705., 652698., 250465.],
    [279360., 180864., 769506., 1051380., 391634.],
    [553284., 826606., 765406., 293965., 883775.],
    [696039., 897917., 148301., 832169., 169525.],
];

const HEX_LIMIT: [[f64; 6]; 6] = [
    [0., 1., 2., 2., 1., 0.],
    [0., 0., 1., 2., 2., 1.],
    [1., 0., 0., 1., 2., 2.],
    [2., 1., 0., 0., 1., 2.],
    [2., 2., 1., 0., 0., 1.],
    [1., 2., 2., 1., 0., 0.],
];

fn from_array<const R: usize, const C: usize>(name: &str, data: &[[f64; C]; R]) -> NonnegMatrix {
    let entries = Array2::from_shape_fn((R, C), |(i, j)| data[i][j]);
    NonnegMatrix::new(name, entries).expect("builtin data is nonnegative")
}

/// Slack matrix of the nested hexagons with parameter `a = x > 1`.
pub fn hex_matrix(x: f64) -> Result<NonnegMatrix> {
    if !(x > 1.0) || !x.is_finite() {
        return Err(NmfError::InvalidInput(format!("hexagon parameter must exceed 1, got {x}")));
    }
    let (one, mid, far) = (1.0, x, 2.0 * x - 1.0);
    let pattern = [
        [one, mid, far, far, mid, one],
        [one, one, mid, far, far, mid],
        [mid, one, one, mid, far, far],
        [far, mid, one, one, mid, far],
        [far, far, mid, one, one, mid],
        [mid, far, far, mid, one, one],
    ];
    let entries = Array2::from_shape_fn((6, 6), |(i, j)| pattern[i][j] / x);
    NonnegMatrix::new(format!("hex_a{x}"), entries)
}

/// Looks up a matrix from the builtin catalog (see [`BUILTIN_NAMES`]).
pub fn builtin_matrix(name: &str) -> Result<NonnegMatrix> {
    let m = match name {
        "random" => gen_random_product(10, 10, 5, 0)?,
        "Vinf1" => from_array(name, &VINF1).with_known_rank(4),
        "Vinf2" => from_array(name, &VINF2).with_known_rank(4),
        "Vinf3" => from_array(name, &VINF3).with_known_rank(4),
        "Vinf4" => from_array(name, &VINF4).with_known_rank(4),
        "hex_a2" => hex_matrix(2.0)?.renamed(name).with_known_rank(3),
        "hex_a3" => hex_matrix(3.0)?.renamed(name).with_known_rank(4),
        "hex_a4" => hex_matrix(4.0)?.renamed(name).with_known_rank(5),
        "hex_ainf" | "appB_example" => from_array(name, &HEX_LIMIT).with_known_rank(5),
        _ => return Err(NmfError::UnknownBuiltin(name.to_string())),
    };
    Ok(m)
}

impl NonnegMatrix {
    fn renamed(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn exact_product_has_zero_error() {
        let (v, pair) = gen_random_product_with_factors(6, 7, 3, 11).unwrap();
        assert!(relative_error(&v, &pair).unwrap() < 1e-15);
    }

    #[test]
    fn identity_against_all_ones_rank_one() {
        let v = NonnegMatrix::from_rows("eye", &[&[1., 0.], &[0., 1.]]).unwrap();
        let pair = FactorPair::new(array![[1.], [1.]], array![[1., 1.]]).unwrap();
        assert!((relative_error(&v, &pair).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn relative_error_rejects_bad_inputs() {
        let v = NonnegMatrix::from_rows("z", &[&[0., 0.]]).unwrap();
        let pair = FactorPair::new(array![[1.]], array![[0., 0.]]).unwrap();
        assert!(matches!(relative_error(&v, &pair), Err(NmfError::InvalidInput(_))));
        let bad = FactorPair::new(array![[1.], [2.]], array![[0., 0.]]).unwrap();
        assert!(matches!(relative_error(&v, &bad), Err(NmfError::DimensionMismatch(_))));
    }

    #[test]
    fn random_product_setting() {
        let v = gen_random_product(10, 10, 5, 3).unwrap();
        assert_eq!((v.rows(), v.cols()), (10, 10));
        assert_eq!(v.known_nonneg_rank(), Some(5));
        assert!(v.entries().iter().all(|&x| x > 0.0 && x < 5.0));
        assert_eq!(v, gen_random_product(10, 10, 5, 3).unwrap());
        assert_ne!(v.entries(), gen_random_product(10, 10, 5, 4).unwrap().entries());
        assert!(gen_random_product(3, 4, 4, 0).is_err());
        assert!(gen_random_product(3, 4, 0, 0).is_err());
    }

    #[test]
    fn rank_one_product_is_rank_one() {
        let (v, _) = gen_random_product_with_factors(4, 5, 1, 9).unwrap();
        // every 2x2 minor vanishes
        for i in 0..4 {
            for j in 0..5 {
                let m = v.get(0, 0) * v.get(i, j) - v.get(0, j) * v.get(i, 0);
                assert!(m.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn builtin_entries_match_printed_data() {
        assert_eq!(builtin_matrix("Vinf1").unwrap().get(0, 0), 573705.0);
        assert_eq!(builtin_matrix("Vinf2").unwrap().get(2, 1), 1030324.0);
        assert_eq!(builtin_matrix("Vinf3").unwrap().get(4, 0), 1114797.0);
        assert_eq!(builtin_matrix("Vinf4").unwrap().get(2, 3), 1051380.0);
        let lim = builtin_matrix("hex_ainf").unwrap();
        let first: Vec<f64> = lim.entries().row(0).to_vec();
        assert_eq!(first, vec![0., 1., 2., 2., 1., 0.]);
        assert_eq!(lim.entries(), builtin_matrix("appB_example").unwrap().entries());
        assert_eq!(lim.known_nonneg_rank(), Some(5));
        let a2 = builtin_matrix("hex_a2").unwrap();
        assert_eq!(a2.get(0, 0), 0.5);
        assert_eq!(a2.get(0, 2), 1.5);
        assert_eq!(a2.known_nonneg_rank(), Some(3));
        assert_eq!(builtin_matrix("hex_a3").unwrap().known_nonneg_rank(), Some(4));
        assert_eq!(builtin_matrix("hex_a4").unwrap().known_nonneg_rank(), Some(5));
        for name in BUILTIN_NAMES {
            let m = builtin_matrix(name).unwrap();
            assert!(m.entries().iter().all(|&x| x >= 0.0), "{name}");
        }
        assert!(matches!(builtin_matrix("nope"), Err(NmfError::UnknownBuiltin(_))));
    }

    #[test]
    fn hexagon_limit_is_approached() {
        let big = hex_matrix(1e9).unwrap();
        let lim = builtin_matrix("hex_ainf").unwrap();
        for (a, b) in big.entries().iter().zip(lim.entries().iter()) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(hex_matrix(1.0).is_err());
    }

    #[test]
    fn negative_entry_names_coordinate() {
        let err = NonnegMatrix::from_rows("bad", &[&[1., 2.], &[3., -1.]]).unwrap_err();
        match err {
            NmfError::NegativeEntry { row, col, .. } => assert_eq!((row, col), (1, 1)),
            e => panic!("unexpected {e}"),
        }
    }
}
