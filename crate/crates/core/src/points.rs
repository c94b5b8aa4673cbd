/// A set of input coordinates `(x[, y], t)`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    dim: usize,
    coords: Vec<f64>,
}

impl PointSet {
    pub fn new(dim: usize, coords: Vec<f64>) -> PointSet {
        assert!(dim > 0 && coords.len() % dim == 0, "coordinate buffer not a multiple of {dim}");
        PointSet { dim, coords }
    }

    pub fn empty(dim: usize) -> PointSet {
        PointSet::new(dim, Vec::new())
    }

    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, rows: &[R]) -> PointSet {
        let mut coords = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            assert_eq!(r.as_ref().len(), dim);
            coords.extend_from_slice(r.as_ref());
        }
        PointSet { dim, coords }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.dim);
        self.coords.extend_from_slice(row);
    }

    pub fn subset(&self, indices: &[usize]) -> PointSet {
        let mut out = PointSet::empty(self.dim);
        for &i in indices {
            out.push(self.row(i));
        }
        out
    }
}
