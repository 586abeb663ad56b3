//! Image-quality evaluation: the global-statistics SSIM used to score
//! reconstructions and vertical line-profile extraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ScalarField;

/// Stabilization constants for SSIM: C1 = (k1 L)^2, C2 = (k2 L)^2 with L the
/// dynamic range of the ground truth. `fallback_range` replaces L when the
/// truth is constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    pub fallback_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            k1: 0.01,
            k2: 0.03,
            fallback_range: 1.0,
        }
    }
}

/// Which pixels enter the SSIM statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SsimDomain {
    /// Pixels whose center lies inside the reconstruction disk.
    #[default]
    Disk,
    /// The full rectangular grid.
    Full,
}

/// Resolved constants of one SSIM evaluation, echoed into reports.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SsimConstants {
    pub l: f64,
    pub c1: f64,
    pub c2: f64,
}

/// Single-window SSIM with means, variances (population convention), and
/// covariance taken globally over the selected domain.
pub fn ssim_global(
    rec: &ScalarField,
    truth: &ScalarField,
    domain: SsimDomain,
    params: &SsimParams,
) -> Result<f64> {
    Ok(ssim_global_detailed(rec, truth, domain, params)?.0)
}

/// SSIM plus the constants it used.
pub fn ssim_global_detailed(
    rec: &ScalarField,
    truth: &ScalarField,
    domain: SsimDomain,
    params: &SsimParams,
) -> Result<(f64, SsimConstants)> {
    if rec.geometry != truth.geometry {
        return Err(Error::GeometryMismatch(
            "SSIM inputs live on different grids".into(),
        ));
    }
    let g = rec.geometry;
    let selected: Vec<usize> = (0..g.ny)
        .flat_map(|row| (0..g.nx).map(move |col| (row, col)))
        .filter(|&(row, col)| match domain {
            SsimDomain::Full => true,
            SsimDomain::Disk => g.in_disk(row, col),
        })
        .map(|(row, col)| g.idx(row, col))
        .collect();
    let n = selected.len() as f64;
    if selected.is_empty() {
        return Err(Error::InvalidData("SSIM domain selects no pixels".into()));
    }

    let mean = |f: &ScalarField| selected.iter().map(|&i| f.values[i]).sum::<f64>() / n;
    let m_t = mean(truth);
    let m_r = mean(rec);
    let mut var_t = 0.0;
    let mut var_r = 0.0;
    let mut cov = 0.0;
    let mut t_min = f64::INFINITY;
    let mut t_max = f64::NEG_INFINITY;
    for &i in &selected {
        let dt = truth.values[i] - m_t;
        let dr = rec.values[i] - m_r;
        var_t += dt * dt;
        var_r += dr * dr;
        cov += dt * dr;
        t_min = t_min.min(truth.values[i]);
        t_max = t_max.max(truth.values[i]);
    }
    var_t /= n;
    var_r /= n;
    cov /= n;

    let range = t_max - t_min;
    let l = if range > 0.0 {
        range
    } else {
        params.fallback_range
    };
    let c1 = (params.k1 * l) * (params.k1 * l);
    let c2 = (params.k2 * l) * (params.k2 * l);
    let value = ((2.0 * m_t * m_r + c1) * (2.0 * cov + c2))
        / ((m_t * m_t + m_r * m_r + c1) * (var_t + var_r + c2));
    Ok((value, SsimConstants { l, c1, c2 }))
}

/// Values of `u` along the vertical grid line nearest `column_x` (mm), listed
/// top to bottom as `(y_mm, value)` pairs.
pub fn line_profile(u: &ScalarField, column_x: f64) -> Result<Vec<(f64, f64)>> {
    let g = u.geometry;
    let fcol = (column_x - g.center.0) / g.h + (g.nx as f64 - 1.0) / 2.0;
    let col = fcol.round();
    if col < 0.0 || col >= g.nx as f64 {
        return Err(Error::InvalidParam(format!(
            "column x = {column_x} mm lies outside the grid"
        )));
    }
    let col = col as usize;
    Ok((0..g.ny)
        .map(|row| {
            let (_, y) = g.pixel_center(row, col);
            (y, u.at(row, col))
        })
        .collect())
}
