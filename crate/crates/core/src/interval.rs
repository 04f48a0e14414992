//! High-density confidence intervals from a numerical density grid.
//!
//! The density of a predictive distribution is evaluated on a uniform grid.
//! Grid cells are ranked by density, the highest cells are taken until their
//! normalized mass reaches the confidence level, and maximal runs of selected
//! cells become sub-intervals. Multi-modal densities yield several disjoint
//! sub-intervals, one per covered mode.

use std::cmp::Ordering;

use thiserror::Error;

use crate::gmm::GaussianMixture;

/// Grids whose raw mass falls below this are flagged as clipping the tails.
pub const MASS_COMPLETE_MIN: f64 = 0.98;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntervalError {
    #[error("grid needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("grid range [{lo}, {hi}] is empty or not finite")]
    DegenerateRange { lo: f64, hi: f64 },
    #[error("grid step must be finite and positive, got {0}")]
    BadStep(f64),
    #[error("density at grid index {index} is {value}")]
    BadDensity { index: usize, value: f64 },
    #[error("density grid carries no mass")]
    NoMass,
    #[error("confidence level {0} outside (0, 1)")]
    BadLevel(f64),
    #[error("sub-interval {index} is malformed: [{lower}, {upper}]")]
    BadInterval { index: usize, lower: f64, upper: f64 },
    #[error("sub-intervals {0} and {1} overlap or are out of order")]
    Overlap(usize, usize),
}

/// Density values at `x0 + i·dx`, `i = 0..P`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    x0: f64,
    dx: f64,
    density: Vec<f64>,
}

impl DensityGrid {
    pub fn new(x0: f64, dx: f64, density: Vec<f64>) -> Result<Self, IntervalError> {
        if density.len() < 2 {
            return Err(IntervalError::TooFewPoints(density.len()));
        }
        if !(dx.is_finite() && dx > 0.0) {
            return Err(IntervalError::BadStep(dx));
        }
        if !x0.is_finite() {
            return Err(IntervalError::DegenerateRange { lo: x0, hi: x0 });
        }
        if let Some((index, &value)) = density
            .iter()
            .enumerate()
            .find(|(_, d)| !(d.is_finite() && **d >= 0.0))
        {
            return Err(IntervalError::BadDensity { index, value });
        }
        Ok(Self { x0, dx, density })
    }

    /// Evaluates the mixture density at `points` evenly spaced locations
    /// spanning `[lo, hi]`.
    pub fn from_mixture(
        m: &GaussianMixture,
        lo: f64,
        hi: f64,
        points: usize,
    ) -> Result<Self, IntervalError> {
        if points < 2 {
            return Err(IntervalError::TooFewPoints(points));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(IntervalError::DegenerateRange { lo, hi });
        }
        let dx = (hi - lo) / (points - 1) as f64;
        Self::new(lo, dx, m.density_grid(lo, dx, points))
    }

    pub fn len(&self) -> usize {
        self.density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.density.is_empty()
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x0 + i as f64 * self.dx
    }

    /// `Σ density·dx` over the grid.
    pub fn total_mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.dx
    }

    pub fn is_mass_complete(&self) -> bool {
        (MASS_COMPLETE_MIN..=2.0 - MASS_COMPLETE_MIN).contains(&self.total_mass())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }
}

/// Sub-intervals of one confidence level for one scalar prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSet {
    level: f64,
    intervals: Vec<Interval>,
}

impl IntervalSet {
    /// Intervals must be non-empty, each with `lower < upper`, sorted and
    /// pairwise disjoint.
    pub fn new(level: f64, intervals: Vec<Interval>) -> Result<Self, IntervalError> {
        if !(level > 0.0 && level < 1.0) {
            return Err(IntervalError::BadLevel(level));
        }
        if intervals.is_empty() {
            return Err(IntervalError::NoMass);
        }
        for (index, iv) in intervals.iter().enumerate() {
            if !(iv.lower.is_finite() && iv.upper.is_finite() && iv.lower < iv.upper) {
                return Err(IntervalError::BadInterval {
                    index,
                    lower: iv.lower,
                    upper: iv.upper,
                });
            }
        }
        for (i, pair) in intervals.windows(2).enumerate() {
            if pair[0].upper >= pair[1].lower {
                return Err(IntervalError::Overlap(i, i + 1));
            }
        }
        Ok(Self { level, intervals })
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Total width summed over sub-intervals.
    pub fn width(&self) -> f64 {
        self.intervals.iter().map(Interval::width).sum()
    }

    /// Whether `y` falls in any sub-interval (closed bounds).
    pub fn contains(&self, y: f64) -> bool {
        self.intervals.iter().any(|iv| iv.contains(y))
    }
}

pub fn interval_width(s: &IntervalSet) -> f64 {
    s.width()
}

pub fn contains(s: &IntervalSet, y: f64) -> bool {
    s.contains(y)
}

/// Cells of a grid ranked by descending density with their normalized
/// cumulative mass. Built once per grid and queried for any number of
/// confidence levels.
#[derive(Debug, Clone)]
pub struct HighDensityRanking<'g> {
    grid: &'g DensityGrid,
    order: Vec<usize>,
    cumulative: Vec<f64>,
    raw_mass: f64,
}

impl<'g> HighDensityRanking<'g> {
    pub fn new(grid: &'g DensityGrid) -> Result<Self, IntervalError> {
        let mut order: Vec<usize> = (0..grid.len()).collect();
        // stable: equal densities keep ascending grid index
        order.sort_by(|&a, &b| {
            grid.density[b]
                .partial_cmp(&grid.density[a])
                .unwrap_or(Ordering::Equal)
        });
        let mut cumulative = Vec::with_capacity(order.len());
        let mut acc = 0.0;
        for &i in &order {
            acc += grid.density[i] * grid.dx;
            cumulative.push(acc);
        }
        let raw_mass = acc;
        if !(raw_mass > 0.0) {
            return Err(IntervalError::NoMass);
        }
        for f in cumulative.iter_mut() {
            *f /= raw_mass;
        }
        Ok(Self {
            grid,
            order,
            cumulative,
            raw_mass,
        })
    }

    /// Unnormalized grid mass (`Σ density·dx`).
    pub fn raw_mass(&self) -> f64 {
        self.raw_mass
    }

    /// Number of top-ranked cells needed to reach level `c`: one past the
    /// first position whose normalized cumulative mass is `>= c`.
    pub fn cut(&self, c: f64) -> Result<usize, IntervalError> {
        if !(c > 0.0 && c < 1.0) {
            return Err(IntervalError::BadLevel(c));
        }
        let idx = self.cumulative.partition_point(|&f| f < c);
        Ok((idx + 1).min(self.order.len()))
    }

    /// Per-grid-index selection mask at level `c`.
    pub fn select(&self, c: f64) -> Result<Vec<bool>, IntervalError> {
        let n = self.cut(c)?;
        let mut selected = vec![false; self.grid.len()];
        for &i in &self.order[..n] {
            selected[i] = true;
        }
        Ok(selected)
    }

    /// Normalized mass of the cells selected at level `c`.
    pub fn selected_mass(&self, c: f64) -> Result<f64, IntervalError> {
        Ok(self.cumulative[self.cut(c)? - 1])
    }

    /// Largest normalized single-cell mass.
    pub fn max_cell_mass(&self) -> f64 {
        self.cumulative[0]
    }

    pub fn intervals(&self, c: f64) -> Result<IntervalSet, IntervalError> {
        let selected = self.select(c)?;
        let grid = self.grid;
        let mut out = Vec::new();
        let mut run_start = None;
        for i in 0..=selected.len() {
            let on = i < selected.len() && selected[i];
            match (on, run_start) {
                (true, None) => run_start = Some(i),
                (false, Some(start)) => {
                    let end = i - 1;
                    let (lower, upper) = if start == end {
                        // a lone cell has no extent on the grid; give it its own width
                        let x = grid.x(start);
                        (x - 0.5 * grid.dx, x + 0.5 * grid.dx)
                    } else {
                        (grid.x(start), grid.x(end))
                    };
                    out.push(Interval { lower, upper });
                    run_start = None;
                }
                _ => {}
            }
        }
        IntervalSet::new(c, out)
    }
}

/// High-density interval set at level `c`.
pub fn derive_intervals(g: &DensityGrid, c: f64) -> Result<IntervalSet, IntervalError> {
    if !(c > 0.0 && c < 1.0) {
        return Err(IntervalError::BadLevel(c));
    }
    let ranking = HighDensityRanking::new(g)?;
    if ranking.raw_mass() < MASS_COMPLETE_MIN {
        log::warn!(
            "density grid holds only {:.4} of the mass; tails are clipped",
            ranking.raw_mass()
        );
    }
    ranking.intervals(c)
}
