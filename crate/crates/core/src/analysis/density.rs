use crate::error::{Error, Result};

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// `1.06 · σ̂ · n^(-1/5)` with the sample standard deviation.
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Input("density estimation needs at least two values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if !(var > 0.0) {
        return Err(Error::DegenerateData(
            "values have zero variance; pass an explicit bandwidth".into(),
        ));
    }
    Ok(1.06 * var.sqrt() * n.powf(-0.2))
}

/// Gaussian kernel density of `values` at every point of `grid`.
pub fn kde(values: &[f64], grid: &[f64], bandwidth: Option<f64>) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::Input("density estimation needs at least two values".into()));
    }
    if values.iter().chain(grid).any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite value or grid point".into()));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::Input(format!("bandwidth {h} must be positive"))),
        None => silverman_bandwidth(values)?,
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let norm = sorted.len() as f64 * h * SQRT_2PI;
    Ok(grid
        .iter()
        .map(|&x| {
            sorted
                .iter()
                .map(|&v| (-0.5 * ((x - v) / h).powi(2)).exp())
                .sum::<f64>()
                / norm
        })
        .collect())
}

/// `points` evenly spaced values from `min − 4h` to `max + 4h`.
pub fn kde_grid(values: &[f64], bandwidth: f64, points: usize) -> Result<Vec<f64>> {
    if values.is_empty() || points < 2 {
        return Err(Error::Input("grid needs values and at least two points".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min) - 4.0 * bandwidth;
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 4.0 * bandwidth;
    let step = (hi - lo) / (points - 1) as f64;
    Ok((0..points).map(|i| lo + step * i as f64).collect())
}

/// Trapezoid rule.
pub fn trapezoid(grid: &[f64], ys: &[f64]) -> f64 {
    grid.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_variance_needs_bandwidth() {
        let v = [2.0, 2.0, 2.0];
        assert!(matches!(kde(&v, &[2.0], None), Err(Error::DegenerateData(_))));
        let d = kde(&v, &[1.0, 2.0, 3.0], Some(0.5)).unwrap();
        assert!(d[1] > d[0] && (d[0] - d[2]).abs() < 1e-15);
    }

    #[test]
    fn single_point_is_rejected() {
        assert!(matches!(kde(&[1.0], &[1.0], Some(1.0)), Err(Error::Input(_))));
    }

    #[test]
    fn integrates_to_one() {
        let v = [0.1, -0.4, 1.3, 2.2, 0.7, 0.0];
        let h = silverman_bandwidth(&v).unwrap();
        let g = kde_grid(&v, h, 2001).unwrap();
        let d = kde(&v, &g, None).unwrap();
        assert!((trapezoid(&g, &d) - 1.0).abs() < 0.01);
    }
}
