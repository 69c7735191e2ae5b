//! Locating the photonic nanojet and measuring its waist.

use super::FdtdError;
use crate::field::FieldGrid;

/// Minimum peak enhancement that counts as a focus.
pub const MIN_ENHANCEMENT: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocusMetrics {
    pub peak_x_um: f64,
    pub peak_y_um: f64,
    pub peak_col: usize,
    pub peak_row: usize,
    pub peak_enhancement: f64,
    pub waist_fwhm_nm: f64,
}

/// Finds the brightest cell at or below `field.focus_search_row` and the
/// full width at half maximum of the transverse cut through it.
pub fn extract_focus(field: &FieldGrid) -> Result<FocusMetrics, FdtdError> {
    if !field.is_finite() {
        return Err(FdtdError::NoFocus("field contains non-finite values".into()));
    }
    if field.focus_search_row >= field.ny || field.nx < 3 {
        return Err(FdtdError::NoFocus("no rows to search".into()));
    }
    let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
    for row in field.focus_search_row..field.ny {
        for (col, &v) in field.row(row).iter().enumerate() {
            if v > best.0 {
                best = (v, col, row);
            }
        }
    }
    let (peak, col, row) = best;
    if peak < MIN_ENHANCEMENT {
        return Err(FdtdError::NoFocus(format!(
            "peak enhancement {peak:.3} below {MIN_ENHANCEMENT}"
        )));
    }
    let cut = field.row(row);
    let half = 0.5 * peak;
    let left = half_crossing(cut, col, half, Side::Left)
        .ok_or_else(|| FdtdError::NoFocus("left half-maximum crossing not found".into()))?;
    let right = half_crossing(cut, col, half, Side::Right)
        .ok_or_else(|| FdtdError::NoFocus("right half-maximum crossing not found".into()))?;
    Ok(FocusMetrics {
        peak_x_um: field.x_at(col),
        peak_y_um: field.y_at(row),
        peak_col: col,
        peak_row: row,
        peak_enhancement: peak,
        waist_fwhm_nm: (right - left) * field.dx_um * 1e3,
    })
}

#[derive(Clone, Copy)]
enum Side {
    Left,
    Right,
}

/// Fractional index where `cut` falls through `level`, walking outwards from
/// `peak`. The crossing is refined with a parabola through the three samples
/// around it; a linear estimate is used when the parabola has no root in the
/// bracketing interval.
fn half_crossing(cut: &[f64], peak: usize, level: f64, side: Side) -> Option<f64> {
    let n = cut.len();
    // (inner, outer) sample indices bracketing the crossing
    let (inner, outer) = match side {
        Side::Right => {
            let k = (peak..n - 1).find(|&k| cut[k + 1] < level)?;
            (k, k + 1)
        }
        Side::Left => {
            let k = (1..=peak).rev().find(|&k| cut[k - 1] < level)?;
            (k, k - 1)
        }
    };
    let lo = inner.min(outer);
    let linear = {
        let (a, b) = (cut[lo], cut[lo + 1]);
        lo as f64 + (level - a) / (b - a)
    };
    // third sample on the far side of the outer point, else on the inner side
    let third = match side {
        Side::Right if outer + 1 < n => outer + 1,
        Side::Left if outer >= 1 => outer - 1,
        Side::Right => inner.checked_sub(1)?,
        Side::Left => inner + 1,
    };
    let mut idx = [inner, outer, third];
    idx.sort_unstable();
    let x0 = idx[0] as f64;
    let (y0, y1, y2) = (cut[idx[0]], cut[idx[1]], cut[idx[2]]);
    // p(t) = y0 + b t + c t (t - 1) with t = x - x0 on unit spacing
    let b = y1 - y0;
    let c = 0.5 * (y2 - 2.0 * y1 + y0);
    let (qa, qb, qc) = (c, b - c, y0 - level);
    let root = if qa.abs() < 1e-14 * (y0.abs() + y1.abs() + y2.abs()) {
        -qc / qb
    } else {
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            return Some(linear);
        }
        let s = disc.sqrt();
        let r1 = (-qb + s) / (2.0 * qa);
        let r2 = (-qb - s) / (2.0 * qa);
        let t_lo = lo as f64 - x0;
        let pick = [r1, r2]
            .into_iter()
            .filter(|t| *t >= t_lo - 1e-12 && *t <= t_lo + 1.0 + 1e-12)
            .min_by(|a, b| (a - (linear - x0)).abs().total_cmp(&(b - (linear - x0)).abs()));
        match pick {
            Some(t) => t,
            None => return Some(linear),
        }
    };
    let x = x0 + root;
    if x.is_finite() && x >= lo as f64 - 1e-12 && x <= lo as f64 + 1.0 + 1e-12 {
        Some(x)
    } else {
        Some(linear)
    }
}
