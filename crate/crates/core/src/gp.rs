//! Gaussian process prior and posterior over a discrete location domain.
//!
//! Observations live in a [`History`]: the visited locations (with the lower
//! Cholesky factor of `Γ = Σ + σ_n² I`, shared behind an `Arc` across
//! histories that differ only in measurements) and the measurement vector together with its
//! whitened residual `L⁻¹ (z − μ)`. Appending an observation extends the factor
//! by one row, so a posterior query costs one triangular solve.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GppError, Result};
use crate::harness::field::FieldGrid;

/// Largest accepted `(max diag L / min diag L)²`.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Relative diagonal jitter for noise-free field covariances.
pub const FIELD_JITTER: f64 = 1e-10;

/// Squared-exponential kernel and noise parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpHyperparams {
    pub prior_mean: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub length_scales: [f64; 2],
}

impl GpHyperparams {
    pub fn new(
        prior_mean: f64,
        signal_variance: f64,
        noise_variance: f64,
        length_scales: [f64; 2],
    ) -> Result<Self> {
        let hyper = Self {
            prior_mean,
            signal_variance,
            noise_variance,
            length_scales,
        };
        hyper.validate()?;
        Ok(hyper)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(GppError::InvalidHyperparams(msg.to_string()));
        if !self.prior_mean.is_finite() {
            return bad("prior mean must be finite");
        }
        if !(self.signal_variance >= 0.0 && self.signal_variance.is_finite()) {
            return bad("signal variance must be finite and >= 0");
        }
        if !(self.noise_variance > 0.0 && self.noise_variance.is_finite()) {
            return bad("noise variance must be finite and > 0");
        }
        if !self.length_scales.iter().all(|l| *l > 0.0 && l.is_finite()) {
            return bad("length scales must be finite and > 0");
        }
        Ok(())
    }

    /// `σ_y² exp{−½ (s−s')ᵀ M⁻² (s−s')}`.
    pub fn kernel(&self, a: &Location, b: &Location) -> f64 {
        let dx = (a.x - b.x) / self.length_scales[0];
        let dy = (a.y - b.y) / self.length_scales[1];
        self.signal_variance * (-0.5 * (dx * dx + dy * dy)).exp()
    }

    /// Prior variance of a noisy measurement, `σ_y² + σ_n²`.
    pub fn prior_measurement_variance(&self) -> f64 {
        self.signal_variance + self.noise_variance
    }
}

pub fn kernel_eval(s: &Location, s2: &Location, hyper: &GpHyperparams) -> f64 {
    hyper.kernel(s, s2)
}

/// A sampling location: physical coordinates plus its index in the domain
/// enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub x: f64,
    pub y: f64,
    pub index: usize,
}

impl Location {
    pub fn new(x: f64, y: f64, index: usize) -> Self {
        Self { x, y, index }
    }
}

/// Rectangular grid with row-major enumeration (`index = iy * width + ix`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
}

impl GridSpec {
    pub fn new(width: usize, height: usize, cell_size: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GppError::Field("grid must have at least one cell".into()));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(GppError::Field("cell size must be positive".into()));
        }
        Ok(Self {
            width,
            height,
            cell_size,
        })
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index_of(&self, ix: usize, iy: usize) -> usize {
        iy * self.width + ix
    }

    pub fn coords_of(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }

    pub fn location(&self, index: usize) -> Location {
        let (ix, iy) = self.coords_of(index);
        Location::new(ix as f64 * self.cell_size, iy as f64 * self.cell_size, index)
    }

    pub fn locations(&self) -> Vec<Location> {
        (0..self.len()).map(|i| self.location(i)).collect()
    }

    /// Cell `(⌊w/2⌋, ⌊h/2⌋)`.
    pub fn center(&self) -> Location {
        self.location(self.index_of(self.width / 2, self.height / 2))
    }

    /// 4-connected neighbours in index order (truncated at the border).
    pub fn neighbors4(&self, index: usize) -> Vec<usize> {
        let (ix, iy) = self.coords_of(index);
        let mut out = Vec::with_capacity(4);
        if iy > 0 {
            out.push(self.index_of(ix, iy - 1));
        }
        if ix > 0 {
            out.push(self.index_of(ix - 1, iy));
        }
        if ix + 1 < self.width {
            out.push(self.index_of(ix + 1, iy));
        }
        if iy + 1 < self.height {
            out.push(self.index_of(ix, iy + 1));
        }
        out
    }
}

/// Gaussian predictive distribution of a noisy measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub mean: f64,
    pub variance: f64,
}

impl Posterior {
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// How [`History::extend`] maintains the factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorMode {
    /// Rank-one row append.
    #[default]
    Incremental,
    /// Refactorize `Γ` from scratch on every append.
    Full,
}

/// Measurement-free part of a history: locations and the packed lower factor
/// of `Γ` (row `i` starts at `i(i+1)/2`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Design {
    locations: Vec<Location>,
    factor: Vec<f64>,
}

/// Measurement-free prediction at one location given a [`Design`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub location: Location,
    /// `L⁻¹ Σ_{hist,s}`; also the row appended to the factor when `s` is observed.
    pub whitened_cov: Vec<f64>,
    /// `σ²_{s|hist}` (noisy measurement variance).
    pub variance: f64,
}

impl Design {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Dense Cholesky of `Γ` over `locations`.
    pub fn factorize(locations: &[Location], hyper: &GpHyperparams) -> Result<Self> {
        let m = locations.len();
        let mut factor = vec![0.0; m * (m + 1) / 2];
        for i in 0..m {
            let ri = i * (i + 1) / 2;
            for j in 0..=i {
                let rj = j * (j + 1) / 2;
                let mut v = hyper.kernel(&locations[i], &locations[j]);
                if i == j {
                    v += hyper.noise_variance;
                }
                for k in 0..j {
                    v -= factor[ri + k] * factor[rj + k];
                }
                if i == j {
                    if v <= 0.0 {
                        return Err(GppError::Conditioning {
                            estimate: f64::INFINITY,
                            locations: locations.iter().map(|l| l.index).collect(),
                        });
                    }
                    factor[ri + i] = v.sqrt();
                } else {
                    factor[ri + j] = v / factor[rj + j];
                }
            }
        }
        let design = Self {
            locations: locations.to_vec(),
            factor,
        };
        design.check_condition()?;
        Ok(design)
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    fn row(&self, i: usize) -> &[f64] {
        let start = i * (i + 1) / 2;
        &self.factor[start..start + i + 1]
    }

    fn diag(&self, i: usize) -> f64 {
        self.factor[i * (i + 1) / 2 + i]
    }

    /// `(max diag / min diag)²` of the factor; 1 for an empty design.
    pub fn condition_estimate(&self) -> f64 {
        if self.is_empty() {
            return 1.0;
        }
        let (lo, hi) = (0..self.len())
            .map(|i| self.diag(i))
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d), hi.max(d)));
        (hi / lo).powi(2)
    }

    fn check_condition(&self) -> Result<()> {
        let estimate = self.condition_estimate();
        if !(estimate <= CONDITION_LIMIT) {
            return Err(GppError::Conditioning {
                estimate,
                locations: self.locations.iter().map(|l| l.index).collect(),
            });
        }
        Ok(())
    }

    /// Solves `L y = b` in place.
    fn forward_solve(&self, b: &mut [f64]) {
        for i in 0..b.len() {
            let row = self.row(i);
            let mut v = b[i];
            for k in 0..i {
                v -= row[k] * b[k];
            }
            b[i] = v / row[i];
        }
    }

    /// Solves `Lᵀ y = b` in place.
    fn backward_solve(&self, b: &mut [f64]) {
        let m = b.len();
        for i in (0..m).rev() {
            let v = b[i] / self.diag(i);
            b[i] = v;
            let row = self.row(i);
            for k in 0..i {
                b[k] -= row[k] * v;
            }
        }
    }

    pub fn predict(&self, s: &Location, hyper: &GpHyperparams) -> Prediction {
        let mut cov: Vec<f64> = self.locations.iter().map(|l| hyper.kernel(l, s)).collect();
        self.forward_solve(&mut cov);
        let explained: f64 = cov.iter().map(|c| c * c).sum();
        let variance = (hyper.kernel(s, s) + hyper.noise_variance - explained)
            .max(hyper.noise_variance);
        Prediction {
            location: *s,
            whitened_cov: cov,
            variance,
        }
    }

    /// `‖Σ_{s,hist} Γ⁻¹‖` for a prediction made from this design.
    pub fn alpha(&self, pred: &Prediction) -> f64 {
        let mut v = pred.whitened_cov.clone();
        self.backward_solve(&mut v);
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Appends the predicted location; the new factor row is
    /// `(L⁻¹ Σ_{hist,s}, σ_{s|hist})`.
    pub fn extend(&self, pred: &Prediction) -> Result<Self> {
        let mut factor = Vec::with_capacity(self.factor.len() + self.len() + 1);
        factor.extend_from_slice(&self.factor);
        factor.extend_from_slice(&pred.whitened_cov);
        factor.push(pred.variance.sqrt());
        let mut locations = self.locations.clone();
        locations.push(pred.location);
        let design = Self { locations, factor };
        design.check_condition()?;
        Ok(design)
    }

    /// `L Lᵀ` as a dense matrix.
    pub fn reconstruct_gamma(&self) -> DMatrix<f64> {
        let m = self.len();
        let l = DMatrix::from_fn(m, m, |i, j| if j <= i { self.row(i)[j] } else { 0.0 });
        &l * l.transpose()
    }
}

/// Observations `d_t = ⟨s_t, z_t⟩` plus cached factorization state.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    design: Arc<Design>,
    measurements: Vec<f64>,
    /// `L⁻¹ (z − μ)`.
    whitened: Vec<f64>,
    mode: FactorMode,
}

impl Default for History {
    fn default() -> Self {
        Self::empty()
    }
}

impl History {
    pub fn empty() -> Self {
        Self::with_mode(FactorMode::Incremental)
    }

    pub fn with_mode(mode: FactorMode) -> Self {
        Self {
            design: Arc::new(Design::empty()),
            measurements: Vec::new(),
            whitened: Vec::new(),
            mode,
        }
    }

    pub fn from_observations(
        locations: &[Location],
        measurements: &[f64],
        hyper: &GpHyperparams,
    ) -> Result<Self> {
        if locations.len() != measurements.len() {
            return Err(GppError::InvalidParam(format!(
                "{} locations but {} measurements",
                locations.len(),
                measurements.len()
            )));
        }
        let design = Arc::new(Design::factorize(locations, hyper)?);
        Self::from_design(design, measurements.to_vec(), hyper, FactorMode::Incremental)
    }

    fn from_design(
        design: Arc<Design>,
        measurements: Vec<f64>,
        hyper: &GpHyperparams,
        mode: FactorMode,
    ) -> Result<Self> {
        let mut whitened: Vec<f64> = measurements.iter().map(|z| z - hyper.prior_mean).collect();
        design.forward_solve(&mut whitened);
        if whitened.iter().any(|w| !w.is_finite()) {
            return Err(GppError::Numeric("non-finite whitened residual".into()));
        }
        Ok(Self {
            design,
            measurements,
            whitened,
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    pub fn locations(&self) -> &[Location] {
        self.design.locations()
    }

    pub fn measurements(&self) -> &[f64] {
        &self.measurements
    }

    pub fn design(&self) -> &Arc<Design> {
        &self.design
    }

    pub fn mode(&self) -> FactorMode {
        self.mode
    }

    pub fn last_location(&self) -> Option<&Location> {
        self.design.locations().last()
    }

    /// Same locations, different measurement vector.
    pub fn with_measurements(&self, measurements: &[f64], hyper: &GpHyperparams) -> Result<Self> {
        if measurements.len() != self.len() {
            return Err(GppError::InvalidParam("measurement vector length mismatch".into()));
        }
        Self::from_design(self.design.clone(), measurements.to_vec(), hyper, self.mode)
    }

    pub fn predict(&self, s: &Location, hyper: &GpHyperparams) -> Prediction {
        self.design.predict(s, hyper)
    }

    /// Posterior of a measurement at `pred.location`, for a prediction made
    /// from this history's design.
    pub fn posterior_from(&self, pred: &Prediction, hyper: &GpHyperparams) -> Posterior {
        let shift: f64 = pred
            .whitened_cov
            .iter()
            .zip(&self.whitened)
            .map(|(a, b)| a * b)
            .sum();
        Posterior {
            mean: hyper.prior_mean + shift,
            variance: pred.variance,
        }
    }

    pub fn posterior(&self, s: &Location, hyper: &GpHyperparams) -> Result<Posterior> {
        self.design.check_condition()?;
        let pred = self.predict(s, hyper);
        Ok(self.posterior_from(&pred, hyper))
    }

    pub fn alpha_norm(&self, s: &Location, hyper: &GpHyperparams) -> Result<f64> {
        self.design.check_condition()?;
        if self.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(s, hyper);
        Ok(self.design.alpha(&pred))
    }

    /// Appends `(s, z)`.
    pub fn extend(&self, s: &Location, z: f64, hyper: &GpHyperparams) -> Result<Self> {
        match self.mode {
            FactorMode::Incremental => {
                let pred = self.predict(s, hyper);
                let post = self.posterior_from(&pred, hyper);
                let design = Arc::new(self.design.extend(&pred)?);
                Ok(self.child(design, &post, z))
            }
            FactorMode::Full => {
                let mut locations = self.locations().to_vec();
                locations.push(*s);
                let mut measurements = self.measurements.clone();
                measurements.push(z);
                let design = Arc::new(Design::factorize(&locations, hyper)?);
                Self::from_design(design, measurements, hyper, self.mode)
            }
        }
    }

    /// Child history sharing an already extended design. `post` must be this
    /// history's posterior at the appended location; the new whitened entry is
    /// the standardized residual `(z − μ) / σ`.
    pub fn child(&self, design: Arc<Design>, post: &Posterior, z: f64) -> Self {
        debug_assert_eq!(design.len(), self.len() + 1);
        let mut measurements = Vec::with_capacity(self.len() + 1);
        measurements.extend_from_slice(&self.measurements);
        measurements.push(z);
        let mut whitened = Vec::with_capacity(self.len() + 1);
        whitened.extend_from_slice(&self.whitened);
        whitened.push((z - post.mean) / post.std_dev());
        Self {
            design,
            measurements,
            whitened,
            mode: self.mode,
        }
    }
}

pub fn posterior(history: &History, s: &Location, hyper: &GpHyperparams) -> Result<Posterior> {
    history.posterior(s, hyper)
}

pub fn extend_history(
    history: &History,
    s: &Location,
    z: f64,
    hyper: &GpHyperparams,
) -> Result<History> {
    history.extend(s, z, hyper)
}

pub fn alpha_norm(history: &History, s: &Location, hyper: &GpHyperparams) -> Result<f64> {
    history.alpha_norm(s, hyper)
}

/// Draws one noise-free realization of the latent field over every grid cell.
pub fn sample_field(
    grid: &GridSpec,
    hyper: &GpHyperparams,
    seed: u64,
    units: &str,
) -> Result<FieldGrid> {
    hyper.validate()?;
    let cells = grid.locations();
    let m = cells.len();
    if hyper.signal_variance == 0.0 {
        return FieldGrid::new(*grid, units, vec![hyper.prior_mean; m]);
    }
    let jitter = FIELD_JITTER * hyper.signal_variance;
    let cov = DMatrix::from_fn(m, m, |i, j| {
        hyper.kernel(&cells[i], &cells[j]) + if i == j { jitter } else { 0.0 }
    });
    let chol = cov.cholesky().ok_or_else(|| GppError::Conditioning {
        estimate: f64::INFINITY,
        locations: (0..m).collect(),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normals = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
    let draw = chol.l() * normals;
    let values = draw.iter().map(|v| v + hyper.prior_mean).collect();
    FieldGrid::new(*grid, units, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_hyper() -> GpHyperparams {
        GpHyperparams::new(0.0, 1.0, 0.01, [0.2236, 0.2236]).unwrap()
    }

    #[test]
    fn kernel_values() {
        let h = unit_hyper();
        let a = Location::new(0.0, 0.0, 0);
        let b = Location::new(0.05, 0.0, 1);
        assert_eq!(kernel_eval(&a, &a, &h), 1.0);
        assert_relative_eq!(kernel_eval(&a, &b, &h), 0.975_308_429_468_253_5, epsilon = 1e-12);
        assert_eq!(kernel_eval(&a, &b, &h), kernel_eval(&b, &a, &h));
        let far = Location::new(1e3, 0.0, 2);
        assert!(kernel_eval(&a, &far, &h) < 1e-12);
    }

    #[test]
    fn hyperparameter_validation() {
        assert!(GpHyperparams::new(0.0, 1.0, 0.0, [1.0, 1.0]).is_err());
        assert!(GpHyperparams::new(0.0, -1.0, 0.1, [1.0, 1.0]).is_err());
        assert!(GpHyperparams::new(0.0, 1.0, 0.1, [0.0, 1.0]).is_err());
        assert!(GpHyperparams::new(0.0, 0.0, 0.1, [1.0, 1.0]).is_ok());
    }

    #[test]
    fn prior_and_single_observation() {
        let h = unit_hyper();
        let s = Location::new(0.3, 0.1, 7);
        let empty = History::empty();
        let p = empty.posterior(&s, &h).unwrap();
        assert_eq!((p.mean, p.variance), (0.0, 1.01));
        assert_eq!(empty.alpha_norm(&s, &h).unwrap(), 0.0);

        let one = empty.extend(&s, 1.0, &h).unwrap();
        let p = one.posterior(&s, &h).unwrap();
        assert_relative_eq!(p.mean, 1.0 / 1.01, epsilon = 1e-14);
        assert_relative_eq!(p.variance, 1.01 - 1.0 / 1.01, epsilon = 1e-14);
        assert_relative_eq!(one.alpha_norm(&s, &h).unwrap(), 1.0 / 1.01, epsilon = 1e-14);
    }

    #[test]
    fn far_location_is_independent() {
        let h = unit_hyper();
        let hist = History::empty()
            .extend(&Location::new(0.0, 0.0, 0), 3.0, &h)
            .unwrap();
        let p = hist.posterior(&Location::new(50.0, 50.0, 1), &h).unwrap();
        assert!(p.mean.abs() < 1e-12);
        assert!((p.variance - 1.01).abs() < 1e-12);
    }

    #[test]
    fn conditioning_error_names_locations() {
        let h = GpHyperparams::new(0.0, 1.0, 1e-14, [1.0, 1.0]).unwrap();
        let s = Location::new(0.0, 0.0, 3);
        let hist = History::empty().extend(&s, 0.0, &h).unwrap();
        match hist.extend(&s, 0.0, &h) {
            Err(GppError::Conditioning { locations, .. }) => assert_eq!(locations, vec![3, 3]),
            other => panic!("expected conditioning error, got {other:?}"),
        }
    }

    #[test]
    fn grid_enumeration_and_neighbours() {
        let g = GridSpec::new(4, 3, 0.5).unwrap();
        assert_eq!(g.len(), 12);
        let loc = g.location(6);
        assert_eq!((loc.x, loc.y), (1.0, 0.5));
        assert_eq!(g.neighbors4(0), vec![1, 4]);
        assert_eq!(g.neighbors4(5), vec![1, 4, 6, 9]);
        assert_eq!(g.center().index, g.index_of(2, 1));
    }

    #[test]
    fn degenerate_field_is_constant_and_seeded_fields_repeat() {
        let g = GridSpec::new(5, 4, 0.05).unwrap();
        let flat = GpHyperparams::new(2.5, 0.0, 0.01, [0.2, 0.2]).unwrap();
        let f = sample_field(&g, &flat, 1, "km").unwrap();
        assert!(f.values().iter().all(|v| *v == 2.5));

        let h = unit_hyper();
        let a = sample_field(&g, &h, 42, "km").unwrap();
        let b = sample_field(&g, &h, 42, "km").unwrap();
        assert_eq!(a.values(), b.values());
        let c = sample_field(&g, &h, 43, "km").unwrap();
        assert_ne!(a.values(), c.values());
    }
}
