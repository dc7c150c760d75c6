//! Parameter points, domains, kernels and reference-point lookup.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in parameter space, e.g. `(μ1, μ2)` or `(Re, L_y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterPoint(pub Vec<f64>);

impl ParameterPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("parameter point needs at least one coordinate"));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("parameter coordinates must be finite"));
        }
        Ok(ParameterPoint(coords))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }
}

impl From<[f64; 2]> for ParameterPoint {
    fn from(c: [f64; 2]) -> Self {
        ParameterPoint(c.to_vec())
    }
}

/// Axis-aligned parameter box with per-coordinate distance scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Each coordinate difference is divided by its scale before the
    /// Euclidean norm is taken.
    pub scale: Vec<f64>,
}

impl ParameterDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() || lower.len() != scale.len() {
            return Err(Error::invalid("domain bounds and scales must share a dimension"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::invalid("domain lower bounds must be below upper bounds"));
        }
        if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("domain scales must be positive"));
        }
        Ok(ParameterDomain { lower, upper, scale })
    }

    /// Unit-scaled box.
    pub fn unscaled(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let scale = vec![1.0; lower.len()];
        Self::new(lower, upper, scale)
    }

    /// `[0.01, 10]²` with the plain Euclidean metric.
    pub fn elliptic_default() -> Self {
        Self::unscaled(vec![0.01, 0.01], vec![10.0, 10.0]).expect("valid")
    }

    /// `(Re, L_y) ∈ [500, 1700] × [0.75, 1.25]`, Re measured in units of 2000.
    pub fn cavity_default() -> Self {
        Self::new(vec![500.0, 0.75], vec![1700.0, 1.25], vec![2000.0, 1.0]).expect("valid")
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, p: &ParameterPoint) -> bool {
        p.dim() == self.dim()
            && p
                .coords()
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(c, (l, u))| *c >= *l && *c <= *u)
    }

    /// Maps a point of the unit cube onto the box.
    pub fn from_unit(&self, unit: &[f64]) -> ParameterPoint {
        ParameterPoint(
            unit.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .map(|(t, (l, u))| l + t * (u - l))
                .collect(),
        )
    }
}

/// Weighting function of parameter distance, always valued in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WeightingKernel {
    Gaussian { sigma: f64 },
    Compact { epsilon: f64 },
    Uniform,
}

impl WeightingKernel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            WeightingKernel::Gaussian { sigma } if !(sigma > 0.0) => {
                Err(Error::invalid("gaussian kernel width must be positive"))
            }
            WeightingKernel::Compact { epsilon } if !(epsilon > 0.0) => {
                Err(Error::invalid("compact kernel radius must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Kernel width used in reports (σ, ε, or +∞ for the uniform kernel).
    pub fn width(&self) -> f64 {
        match *self {
            WeightingKernel::Gaussian { sigma } => sigma,
            WeightingKernel::Compact { epsilon } => epsilon,
            WeightingKernel::Uniform => f64::INFINITY,
        }
    }
}

/// Cartesian grid of equispaced points; the last coordinate varies fastest.
///
/// An axis with one point contributes its midpoint.
pub fn uniform_grid(domain: &ParameterDomain, counts: &[usize]) -> Result<Vec<ParameterPoint>> {
    if counts.len() != domain.dim() {
        return Err(Error::invalid("one count per domain axis required"));
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::invalid("grid counts must be at least 1"));
    }
    let axes: Vec<Vec<f64>> = counts
        .iter()
        .enumerate()
        .map(|(d, &c)| {
            let (lo, hi) = (domain.lower[d], domain.upper[d]);
            if c == 1 {
                vec![0.5 * (lo + hi)]
            } else {
                (0..c)
                    .map(|i| {
                        if i == c - 1 {
                            hi
                        } else {
                            lo + (hi - lo) * i as f64 / (c - 1) as f64
                        }
                    })
                    .collect()
            }
        })
        .collect();
    let total: usize = counts.iter().product();
    let mut points = Vec::with_capacity(total);
    let mut idx = vec![0usize; counts.len()];
    for _ in 0..total {
        points.push(ParameterPoint(
            idx.iter().enumerate().map(|(d, &i)| axes[d][i]).collect(),
        ));
        for d in (0..counts.len()).rev() {
            idx[d] += 1;
            if idx[d] < counts[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(points)
}

/// Scaled Euclidean distance `sqrt(Σ ((a_i − b_i)/scale_i)²)`.
pub fn distance(a: &ParameterPoint, b: &ParameterPoint, domain: &ParameterDomain) -> Result<f64> {
    if a.dim() != b.dim() || a.dim() != domain.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {} in a {}-dimensional domain",
            a.dim(),
            b.dim(),
            domain.dim()
        )));
    }
    Ok(a.coords()
        .iter()
        .zip(b.coords())
        .zip(&domain.scale)
        .map(|((x, y), s)| ((x - y) / s).powi(2))
        .sum::<f64>()
        .sqrt())
}

pub fn weight(kernel: &WeightingKernel, dist: f64) -> Result<f64> {
    if !(dist >= 0.0) {
        return Err(Error::invalid("distance must be non-negative"));
    }
    Ok(match *kernel {
        WeightingKernel::Gaussian { sigma } => (-dist * dist / (2.0 * sigma * sigma)).exp(),
        // strict inequality at the radius
        WeightingKernel::Compact { epsilon } => {
            if dist < epsilon {
                1.0
            } else {
                0.0
            }
        }
        WeightingKernel::Uniform => 1.0,
    })
}

/// Kernel weights of every reference point relative to `refs[center]`.
pub fn weights_about(
    center: &ParameterPoint,
    refs: &[ParameterPoint],
    kernel: &WeightingKernel,
    domain: &ParameterDomain,
) -> Result<Vec<f64>> {
    refs.iter()
        .map(|p| weight(kernel, distance(center, p, domain)?))
        .collect()
}

/// Index of the nearest non-excluded reference point; ties go to the lowest
/// index.
pub fn nearest_reference(
    target: &ParameterPoint,
    refs: &[ParameterPoint],
    excluded: &HashSet<usize>,
    domain: &ParameterDomain,
) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in refs.iter().enumerate() {
        if excluded.contains(&i) {
            continue;
        }
        let d = distance(target, r, domain)?;
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i).ok_or(Error::NoValidSubdomain)
}

/// All reference indices sorted by distance to `target` (stable on ties).
pub fn references_by_distance(
    target: &ParameterPoint,
    refs: &[ParameterPoint],
    domain: &ParameterDomain,
) -> Result<Vec<usize>> {
    let d: Vec<f64> = refs
        .iter()
        .map(|r| distance(target, r, domain))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..refs.len()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn elliptic_training_grid() {
        let pts = uniform_grid(&ParameterDomain::elliptic_default(), &[11, 11]).unwrap();
        assert_eq!(pts.len(), 121);
        assert_eq!(pts[0].coords(), &[0.01, 0.01]);
        assert_eq!(pts[120].coords(), &[10.0, 10.0]);
        // last coordinate fastest
        assert!(close(pts[1].coords()[1], 0.01 + 0.999, 1e-12));
        assert_eq!(pts[1].coords()[0], 0.01);
    }

    #[test]
    fn single_point_grid_is_midpoint() {
        let d = ParameterDomain::unscaled(vec![0.0, 0.0], vec![2.0, 2.0]).unwrap();
        let pts = uniform_grid(&d, &[1, 1]).unwrap();
        assert_eq!(pts, vec![ParameterPoint(vec![1.0, 1.0])]);
    }

    #[test]
    fn cavity_training_grid() {
        let d = ParameterDomain::new(vec![600.0, 0.8], vec![1600.0, 1.2], vec![2000.0, 1.0]).unwrap();
        let pts = uniform_grid(&d, &[6, 5]).unwrap();
        assert_eq!(pts.len(), 30);
        assert!(close(pts[5].coords()[0], 800.0, 1e-9));
        assert!(close(pts[1].coords()[1], 0.9, 1e-12));
    }

    #[test]
    fn zero_count_rejected() {
        let d = ParameterDomain::elliptic_default();
        assert!(uniform_grid(&d, &[0, 3]).is_err());
        assert!(uniform_grid(&d, &[3]).is_err());
    }

    #[test]
    fn distances() {
        let e = ParameterDomain::elliptic_default();
        let a: ParameterPoint = [0.0, 3.0].into();
        let b: ParameterPoint = [4.0, 0.0].into();
        assert_eq!(distance(&a, &a, &e).unwrap(), 0.0);
        assert!(close(distance(&a, &b, &e).unwrap(), 5.0, 1e-15));
        let c = ParameterDomain::cavity_default();
        let p: ParameterPoint = [1600.0, 1.2].into();
        let q: ParameterPoint = [600.0, 0.8].into();
        assert!(close(distance(&p, &q, &c).unwrap(), (0.25f64 + 0.16).sqrt(), 1e-12));
        assert!(close(distance(&p, &q, &c).unwrap(), 0.6403, 1e-4));
        let short = ParameterPoint(vec![1.0]);
        assert!(matches!(distance(&short, &a, &e), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn kernel_values() {
        let kernels = [
            WeightingKernel::Gaussian { sigma: 1.0 },
            WeightingKernel::Compact { epsilon: 0.5 },
            WeightingKernel::Uniform,
        ];
        for k in &kernels {
            assert_eq!(weight(k, 0.0).unwrap(), 1.0);
        }
        let g = weight(&kernels[0], 2f64.sqrt()).unwrap();
        assert!(close(g, (-1.0f64).exp(), 1e-15));
        assert!(close(g, 0.367879, 1e-6));
        assert_eq!(weight(&kernels[1], 0.5).unwrap(), 0.0);
        assert_eq!(weight(&kernels[1], 0.4999).unwrap(), 1.0);
        assert!(weight(&kernels[2], -1.0).is_err());
    }

    #[test]
    fn nearest_reference_rules() {
        let dom = ParameterDomain::elliptic_default();
        let grid = uniform_grid(&dom, &[11, 11]).unwrap();
        let none = HashSet::new();
        assert_eq!(nearest_reference(&grid[3], &grid, &none, &dom).unwrap(), 3);

        // (4.5, 8.5): axis nodes are 0.01 + 0.999 i, so 4.006 (i=4) and
        // 8.002 (i=8) are the closest coordinates
        let idx = nearest_reference(&[4.5, 8.5].into(), &grid, &none, &dom).unwrap();
        assert_eq!(idx, 4 * 11 + 8);
        assert!(close(grid[idx].coords()[0], 4.006, 1e-12));
        assert!(close(grid[idx].coords()[1], 8.002, 1e-12));

        let refs: Vec<ParameterPoint> = vec![[0.0, 0.0].into(), [2.0, 0.0].into()];
        assert_eq!(nearest_reference(&[1.0, 0.0].into(), &refs, &none, &dom).unwrap(), 0);
        let ex: HashSet<usize> = [0].into_iter().collect();
        assert_eq!(nearest_reference(&[0.0, 0.0].into(), &refs, &ex, &dom).unwrap(), 1);
        let all: HashSet<usize> = [0, 1].into_iter().collect();
        assert!(matches!(
            nearest_reference(&[0.0, 0.0].into(), &refs, &all, &dom),
            Err(Error::NoValidSubdomain)
        ));
    }

    #[test]
    fn references_sorted_by_distance() {
        let dom = ParameterDomain::elliptic_default();
        let refs: Vec<ParameterPoint> = vec![[5.0, 5.0].into(), [1.0, 1.0].into(), [0.0, 0.0].into()];
        let order = references_by_distance(&[0.5, 0.4].into(), &refs, &dom).unwrap();
        assert_eq!(order, vec![2, 1, 0]);
    }
}
