use super::{CompiledLibrary, FieldSource, LibraryError};
use crate::points::PointSet;
use crate::sparse_reg::SparseCoeffs;
use nalgebra::DMatrix;

/// `phi` (`N x s`) and `udot` (`N x n`) on a set of collocation rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LibraryMatrix {
    pub phi: DMatrix<f64>,
    pub udot: DMatrix<f64>,
    /// Column norms divided out of `phi`; all ones until normalized.
    pub column_scales: Vec<f64>,
    pub symbols: Vec<String>,
}

impl LibraryMatrix {
    pub fn rows(&self) -> usize {
        self.phi.nrows()
    }

    pub fn select_rows(&self, idx: &[usize]) -> LibraryMatrix {
        LibraryMatrix {
            phi: self.phi.select_rows(idx),
            udot: self.udot.select_rows(idx),
            column_scales: self.column_scales.clone(),
            symbols: self.symbols.clone(),
        }
    }

    /// Divides columns by externally supplied norms (e.g. those of the
    /// training rows when normalizing a validation block).
    pub fn normalize_with(&self, scales: &[f64]) -> LibraryMatrix {
        let mut phi = self.phi.clone();
        for (j, mut col) in phi.column_iter_mut().enumerate() {
            col /= scales[j];
        }
        LibraryMatrix {
            phi,
            udot: self.udot.clone(),
            column_scales: scales.iter().zip(&self.column_scales).map(|(a, b)| a * b).collect(),
            symbols: self.symbols.clone(),
        }
    }
}

/// Evaluates `u_t` and every library term at one point.
pub fn evaluate_row(
    source: &dyn FieldSource,
    point: &[f64],
    lib: &CompiledLibrary,
) -> Result<(Vec<f64>, Vec<f64>), LibraryError> {
    let pts = PointSet::new(point.len(), point.to_vec());
    let values = source.derivatives(&pts, lib.requests())?;
    let mut udot = vec![0.0; lib.output_dim()];
    let mut phi = vec![0.0; lib.len()];
    lib.row(&values, point, &mut udot, &mut phi);
    if udot.iter().chain(&phi).any(|v| !v.is_finite()) {
        return Err(LibraryError::NonFiniteRow { coords: point.to_vec() });
    }
    Ok((udot, phi))
}

/// Stacks the rows of every `(field, points)` block in order. For a
/// root-branch network pass one block per branch so a single coefficient
/// matrix governs all datasets.
pub fn assemble(blocks: &[(&dyn FieldSource, &PointSet)], lib: &CompiledLibrary) -> Result<LibraryMatrix, LibraryError> {
    let total: usize = blocks.iter().map(|(_, p)| p.len()).sum();
    if total == 0 {
        return Err(LibraryError::Empty);
    }
    let (s, n, nr) = (lib.len(), lib.output_dim(), lib.requests().len());
    let mut phi = DMatrix::zeros(total, s);
    let mut udot = DMatrix::zeros(total, n);
    let mut row = 0;
    let mut u_row = vec![0.0; n];
    let mut p_row = vec![0.0; s];
    for (source, points) in blocks {
        if source.output_dim() != n || source.input_dim() != lib.spec().input_dim {
            return Err(LibraryError::Dimension(format!(
                "field maps {} -> {} but library expects {} -> {n}",
                source.input_dim(),
                source.output_dim(),
                lib.spec().input_dim
            )));
        }
        let table = source.derivatives(points, lib.requests())?;
        for (i, coords) in points.rows().enumerate() {
            lib.row(&table[i * nr..(i + 1) * nr], coords, &mut u_row, &mut p_row);
            if u_row.iter().chain(&p_row).any(|v| !v.is_finite()) {
                return Err(LibraryError::NonFiniteRow { coords: coords.to_vec() });
            }
            for (c, v) in u_row.iter().enumerate() {
                udot[(row, c)] = *v;
            }
            for (j, v) in p_row.iter().enumerate() {
                phi[(row, j)] = *v;
            }
            row += 1;
        }
    }
    Ok(LibraryMatrix {
        phi,
        udot,
        column_scales: vec![1.0; s],
        symbols: lib.spec().symbols(),
    })
}

/// Scales every column of `phi` to unit Euclidean norm.
pub fn normalize_columns(m: &LibraryMatrix) -> Result<LibraryMatrix, LibraryError> {
    let norms: Vec<f64> = m.phi.column_iter().map(|c| c.norm()).collect();
    if let Some(j) = norms.iter().position(|&v| v == 0.0 || !v.is_finite()) {
        return Err(LibraryError::DegenerateTerm {
            symbol: m.symbols.get(j).cloned().unwrap_or_else(|| format!("#{j}")),
        });
    }
    Ok(m.normalize_with(&norms))
}

/// 2-norm condition number; `f64::INFINITY` for numerically rank-deficient
/// input.
pub fn condition_number(phi: &DMatrix<f64>) -> f64 {
    let sv = phi.clone().singular_values();
    let hi = sv.max();
    let lo = sv.min();
    let tol = hi * f64::EPSILON * phi.nrows().max(phi.ncols()) as f64;
    if hi == 0.0 || lo <= tol {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Coefficients for unnormalized columns: `lambda_j / scale_j`.
pub fn rescale_coeffs(lambda: &SparseCoeffs, scales: &[f64]) -> SparseCoeffs {
    assert_eq!(lambda.len(), scales.len(), "coefficient and scale lengths differ");
    SparseCoeffs {
        values: lambda.values.iter().zip(scales).map(|(v, s)| v / s).collect(),
        support: lambda.support.clone(),
    }
}
