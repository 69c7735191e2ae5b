//! Time-averaged intensity rasters.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("field grids differ in shape: {a:?} vs {b:?}")]
    ShapeMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("mask length {mask} does not match grid size {cells}")]
    MaskMismatch { mask: usize, cells: usize },
    #[error("comparison mask selects no cells")]
    EmptyMask,
    #[error("reference field has no positive value")]
    ZeroReference,
}

/// Raster geometry without values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub dx_um: f64,
    pub x_left_um: f64,
    pub y_top_um: f64,
}

/// A row-major intensity raster. Row 0 is the top of the domain; `y`
/// decreases with increasing row index.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    pub nx: usize,
    pub ny: usize,
    pub dx_um: f64,
    /// x coordinate of column 0.
    pub x_left_um: f64,
    /// y coordinate of row 0.
    pub y_top_um: f64,
    /// First row searched for a focal spot (rows above are ignored).
    pub focus_search_row: usize,
    pub values: Vec<f64>,
}

impl FieldGrid {
    pub fn zeros(nx: usize, ny: usize, dx_um: f64, x_left_um: f64, y_top_um: f64) -> Self {
        Self {
            nx,
            ny,
            dx_um,
            x_left_um,
            y_top_um,
            focus_search_row: 0,
            values: vec![0.0; nx * ny],
        }
    }

    /// Builds a grid by evaluating `f(x, y)` at every cell centre.
    pub fn from_fn(
        nx: usize,
        ny: usize,
        dx_um: f64,
        x_left_um: f64,
        y_top_um: f64,
        mut f: impl FnMut(f64, f64) -> f64,
    ) -> Self {
        let mut g = Self::zeros(nx, ny, dx_um, x_left_um, y_top_um);
        for r in 0..ny {
            let y = g.y_at(r);
            for c in 0..nx {
                g.values[r * nx + c] = f(g.x_at(c), y);
            }
        }
        g
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            nx: self.nx,
            ny: self.ny,
            dx_um: self.dx_um,
            x_left_um: self.x_left_um,
            y_top_um: self.y_top_um,
        }
    }

    #[inline]
    pub fn x_at(&self, col: usize) -> f64 {
        self.x_left_um + col as f64 * self.dx_um
    }

    #[inline]
    pub fn y_at(&self, row: usize) -> f64 {
        self.y_top_um - row as f64 * self.dx_um
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.nx + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.nx..(row + 1) * self.nx]
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// RMS of `(a - b) / max(b)` over the cells where `mask` is true.
pub fn compare_fields(a: &FieldGrid, b: &FieldGrid, mask: &[bool]) -> Result<f64, FieldError> {
    if a.nx != b.nx || a.ny != b.ny {
        return Err(FieldError::ShapeMismatch {
            a: (a.nx, a.ny),
            b: (b.nx, b.ny),
        });
    }
    if mask.len() != a.values.len() {
        return Err(FieldError::MaskMismatch {
            mask: mask.len(),
            cells: a.values.len(),
        });
    }
    let reference = b
        .values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if reference == f64::NEG_INFINITY {
        return Err(FieldError::EmptyMask);
    }
    if !(reference > 0.0) {
        return Err(FieldError::ZeroReference);
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((va, vb), &m) in a.values.iter().zip(&b.values).zip(mask) {
        if m {
            let d = (va - vb) / reference;
            sum += d * d;
            n += 1;
        }
    }
    Ok((sum / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FieldGrid {
        FieldGrid::from_fn(9, 7, 0.1, -0.4, 0.3, |x, y| 1.0 + x * x + 0.5 * y)
    }

    #[test]
    fn identical_fields_compare_to_zero() {
        let f = sample();
        let mask = vec![true; f.values.len()];
        assert_eq!(compare_fields(&f, &f, &mask).unwrap(), 0.0);
    }

    #[test]
    fn doubled_field_gives_positive_error() {
        let f = sample();
        let mut g = f.clone();
        g.values.iter_mut().for_each(|v| *v *= 2.0);
        let mask: Vec<bool> = (0..f.values.len()).map(|i| i % 9 < 4).collect();
        let e = compare_fields(&g, &f, &mask).unwrap();
        assert!(e > 0.0 && e.is_finite());
        // only masked cells contribute
        let mut h = g.clone();
        for (i, v) in h.values.iter_mut().enumerate() {
            if i % 9 >= 4 {
                *v = 1e9;
            }
        }
        assert_eq!(compare_fields(&h, &f, &mask).unwrap(), e);
    }

    #[test]
    fn shape_and_mask_errors() {
        let f = sample();
        let g = FieldGrid::zeros(3, 3, 0.1, 0.0, 0.0);
        assert!(matches!(
            compare_fields(&f, &g, &[true; 9]),
            Err(FieldError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            compare_fields(&f, &f, &[true; 3]),
            Err(FieldError::MaskMismatch { .. })
        ));
        assert!(matches!(
            compare_fields(&f, &f, &vec![false; f.values.len()]),
            Err(FieldError::EmptyMask)
        ));
    }
}
