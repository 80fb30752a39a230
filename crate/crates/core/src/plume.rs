//! Dimensionless advection-diffusion plume and the Poisson hit channel.
//!
//! The mean hit rate at a grid position `x` for a source `θ = (x_s, y_s, φ)` is
//!
//! ```text
//! μ(θ, x) = φ Δt / ln(λ / r) · exp(-(y - y_s) V / 2D) · K0(max(|x - x_s|, r) / λ)
//! ```
//!
//! with the wind blowing towards negative `y` and `λ` the dispersion length.
//! Hit counts are Poisson with mean `μ`, capped at `h_max`; the tail mass above
//! the cap is folded into the top bin.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Physical and discretization constants of one environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvParams {
    pub nx: usize,
    pub ny: usize,
    /// Admissible source strengths, in index order.
    pub fluxes: Vec<f64>,
    /// Mean wind speed; the wind blows towards negative `y`.
    pub wind_speed: f64,
    pub diffusivity: f64,
    pub lifetime: f64,
    /// Sensor body radius in grid units.
    pub radius: f64,
    pub dt: f64,
    pub h_max: usize,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            nx: 11,
            ny: 11,
            fluxes: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            wind_speed: 2.0,
            diffusivity: 2.0,
            lifetime: 1e7,
            radius: 0.5,
            dt: 1.0,
            h_max: 3,
        }
    }
}

impl EnvParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.nx == 0 || self.ny == 0 {
            return fail(format!("grid must be non-empty, got {}x{}", self.nx, self.ny));
        }
        if self.fluxes.is_empty() {
            return fail("flux set is empty".into());
        }
        for (i, &phi) in self.fluxes.iter().enumerate() {
            if !(phi > 0.0 && phi.is_finite()) {
                return fail(format!("flux {i} = {phi} is not strictly positive"));
            }
            if self.fluxes[..i].contains(&phi) {
                return fail(format!("flux {phi} listed twice"));
            }
        }
        let positive = [
            ("diffusivity", self.diffusivity),
            ("lifetime", self.lifetime),
            ("radius", self.radius),
            ("dt", self.dt),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return fail(format!("{name} must be positive and finite, got {value}"));
            }
        }
        if !(self.wind_speed >= 0.0 && self.wind_speed.is_finite()) {
            return fail(format!("wind speed must be non-negative, got {}", self.wind_speed));
        }
        if self.h_max < 1 {
            return fail("h_max must be at least 1".into());
        }
        let lambda = dispersion_length(self);
        if lambda <= self.radius {
            return fail(format!(
                "dispersion length {lambda} does not exceed sensor radius {}",
                self.radius
            ));
        }
        Ok(())
    }

    pub fn n_phi(&self) -> usize {
        self.fluxes.len()
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn n_hypotheses(&self) -> usize {
        self.nx * self.ny * self.fluxes.len()
    }

    pub fn contains(&self, pos: GridPos) -> bool {
        pos.x < self.nx && pos.y < self.ny
    }

    /// Cell where every episode starts.
    pub fn center(&self) -> GridPos {
        GridPos::new(self.nx / 2, self.ny / 2)
    }

    pub fn cell_index(&self, pos: GridPos) -> usize {
        pos.y * self.nx + pos.x
    }

    /// Linear hypothesis index `(phi * ny + ys) * nx + xs`.
    pub fn hypothesis_index(&self, theta: SourceTerm) -> usize {
        (theta.phi_index * self.ny + theta.ys) * self.nx + theta.xs
    }

    pub fn hypothesis(&self, index: usize) -> SourceTerm {
        let xs = index % self.nx;
        let ys = (index / self.nx) % self.ny;
        let phi_index = index / (self.nx * self.ny);
        SourceTerm { xs, ys, phi_index }
    }

    pub fn flux_index(&self, phi: f64) -> Option<usize> {
        self.fluxes.iter().position(|&f| f == phi)
    }
}

/// Cell coordinates on the grid, unit spacing, distances measured between cell centers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridPos {
    pub x: usize,
    pub y: usize,
}

impl GridPos {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: GridPos) -> f64 {
        let dx = self.x as f64 - other.x as f64;
        let dy = self.y as f64 - other.y as f64;
        dx.hypot(dy)
    }
}

/// One source hypothesis: location cell plus an index into `EnvParams::fluxes`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceTerm {
    pub xs: usize,
    pub ys: usize,
    pub phi_index: usize,
}

impl SourceTerm {
    pub fn new(xs: usize, ys: usize, phi_index: usize) -> Self {
        Self { xs, ys, phi_index }
    }

    pub fn location(self) -> GridPos {
        GridPos::new(self.xs, self.ys)
    }

    pub fn phi(self, params: &EnvParams) -> f64 {
        params.fluxes[self.phi_index]
    }

    pub fn validate(self, params: &EnvParams) -> Result<()> {
        if self.xs >= params.nx || self.ys >= params.ny || self.phi_index >= params.n_phi() {
            return Err(Error::Config(format!(
                "source term {self:?} outside {}x{}x{} domain",
                params.nx,
                params.ny,
                params.n_phi()
            )));
        }
        Ok(())
    }
}

/// Modified Bessel function of the second kind, order zero.
///
/// Power series below `z = 2`; above it the integral `∫₀^∞ exp(-z cosh t) dt`
/// is evaluated with the trapezoid rule, which converges exponentially for
/// this integrand. Absolute error is below 1e-14 on `[1e-6, 700]`.
pub fn bessel_k0(z: f64) -> Result<f64> {
    if !(z > 0.0) {
        return Err(Error::Domain(format!("K0 requires z > 0, got {z}")));
    }
    if z.is_infinite() {
        return Ok(0.0);
    }
    if z <= 2.0 {
        Ok(k0_series(z))
    } else {
        Ok(k0_trapezoid(z))
    }
}

fn k0_series(z: f64) -> f64 {
    let q = 0.25 * z * z;
    let log_term = (0.5 * z).ln() + EULER_GAMMA;
    // I0 = Σ q^k / (k!)^2, and the harmonic-weighted companion sum.
    let mut term = 1.0;
    let mut i0 = 1.0;
    let mut harmonic_sum = 0.0;
    let mut harmonic = 0.0;
    for k in 1..60 {
        let kf = k as f64;
        term *= q / (kf * kf);
        harmonic += 1.0 / kf;
        i0 += term;
        harmonic_sum += harmonic * term;
        if term < 1e-18 * i0 {
            break;
        }
    }
    -log_term * i0 + harmonic_sum
}

fn k0_trapezoid(z: f64) -> f64 {
    let scale = (-z).exp();
    if scale == 0.0 {
        return 0.0;
    }
    let h = (0.5 / z.sqrt()).min(0.25);
    // exp(-z (cosh t - 1)), even in t, so the half line gets f(0)/2 + Σ f(kh).
    let mut sum = 0.5;
    let mut k = 1.0;
    loop {
        let t: f64 = k * h;
        let arg = z * (t.cosh() - 1.0);
        if arg > 60.0 {
            break;
        }
        sum += (-arg).exp();
        k += 1.0;
    }
    scale * h * sum
}

/// `λ = sqrt(Dτ / (1 + V²τ / 4D))`.
pub fn dispersion_length(params: &EnvParams) -> f64 {
    let d = params.diffusivity;
    let tau = params.lifetime;
    let v = params.wind_speed;
    (d * tau / (1.0 + v * v * tau / (4.0 * d))).sqrt()
}

/// Evaluates mean hit rates for a fixed set of parameters.
#[derive(Clone, Debug)]
pub struct PlumeModel {
    params: EnvParams,
    lambda: f64,
    prefactor: f64,
}

impl PlumeModel {
    pub fn new(params: EnvParams) -> Result<Self> {
        // Rejects λ <= r, where ln(λ/r) would be non-positive.
        params.validate()?;
        let lambda = dispersion_length(&params);
        let log_ratio = (lambda / params.radius).ln();
        let prefactor = params.dt / log_ratio;
        Ok(Self {
            params,
            lambda,
            prefactor,
        })
    }

    pub fn params(&self) -> &EnvParams {
        &self.params
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mean_hits(&self, theta: SourceTerm, pos: GridPos) -> f64 {
        let p = &self.params;
        let dist = pos.distance(theta.location()).max(p.radius);
        let dy = pos.y as f64 - theta.ys as f64;
        let advection = (-dy * p.wind_speed / (2.0 * p.diffusivity)).exp();
        // z = dist / λ > 0 always, so K0 cannot fail here.
        let k0 = bessel_k0(dist / self.lambda).unwrap_or(0.0);
        theta.phi(p) * self.prefactor * advection * k0
    }

    /// Unclamped mean field is what inference uses; this map clamps to `h_max`
    /// for display and export only.
    pub fn mean_hit_map(&self, theta: SourceTerm) -> HitField {
        let p = &self.params;
        let cap = p.h_max as f64;
        let mut values = Vec::with_capacity(p.n_cells());
        for y in 0..p.ny {
            for x in 0..p.nx {
                values.push(self.mean_hits(theta, GridPos::new(x, y)).min(cap));
            }
        }
        HitField {
            nx: p.nx,
            ny: p.ny,
            values,
        }
    }
}

/// Mean hit rate `μ(θ, x)`; fails when `λ ≤ r`.
pub fn mean_hits(theta: SourceTerm, pos: GridPos, params: &EnvParams) -> Result<f64> {
    Ok(PlumeModel::new(params.clone())?.mean_hits(theta, pos))
}

pub fn mean_hit_map(theta: SourceTerm, params: &EnvParams) -> Result<HitField> {
    Ok(PlumeModel::new(params.clone())?.mean_hit_map(theta))
}

/// Poisson probabilities over `0..=h_max`, with the tail above `h_max` lumped into the last bin.
pub fn hit_distribution(mu: f64, h_max: usize) -> Vec<f64> {
    let mut probs = Vec::with_capacity(h_max + 1);
    let mut term = (-mu).exp();
    let mut below = 0.0;
    for h in 0..h_max {
        probs.push(term);
        below += term;
        term *= mu / (h + 1) as f64;
    }
    probs.push((1.0 - below).max(0.0));
    probs
}

/// Draws a capped hit count by inverting the cumulative distribution.
pub fn sample_hits<R: Rng + ?Sized>(mu: f64, h_max: usize, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let probs = hit_distribution(mu, h_max);
    let mut cumulative = 0.0;
    for (h, p) in probs.iter().enumerate().take(h_max) {
        cumulative += p;
        if u < cumulative {
            return h;
        }
    }
    h_max
}

/// Mean hit rate on every cell, `values[y * nx + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HitField {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl HitField {
    pub fn get(&self, pos: GridPos) -> f64 {
        self.values[pos.y * self.nx + pos.x]
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x,y,mu")?;
        for y in 0..self.ny {
            for x in 0..self.nx {
                writeln!(out, "{x},{y},{}", self.values[y * self.nx + x])?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_params() -> EnvParams {
        EnvParams::default()
    }

    #[test]
    fn k0_reference_points() {
        assert!((bessel_k0(1.0).unwrap() - 0.421_024_438_240_708_3).abs() < 1e-12);
        assert!((bessel_k0(0.1).unwrap() - 2.427_069_024_702_016_6).abs() < 1e-12);
        // Both branches agree at the switch point.
        let below = k0_series(2.0);
        let above = k0_trapezoid(2.0);
        assert!((below - above).abs() < 1e-14, "{below} vs {above}");
    }

    #[test]
    fn k0_domain_and_decay() {
        assert!(bessel_k0(0.0).is_err());
        assert!(bessel_k0(-1.0).is_err());
        assert!(bessel_k0(f64::NAN).is_err());
        assert_eq!(bessel_k0(800.0).unwrap(), 0.0);
        assert_eq!(bessel_k0(f64::INFINITY).unwrap(), 0.0);
        let mut prev = f64::INFINITY;
        let mut z = 1e-3;
        while z < 760.0 {
            let k = bessel_k0(z).unwrap();
            assert!(k >= 0.0 && k <= prev, "not decreasing at {z}");
            prev = k;
            z *= 1.05;
        }
    }

    #[test]
    fn dispersion_length_examples() {
        let p = default_params();
        let expected = (2e7f64 / (1.0 + 5e6)).sqrt();
        assert!((dispersion_length(&p) - expected).abs() < 1e-15);
        assert!((dispersion_length(&p) - 2.0).abs() < 1e-6);
        let calm = EnvParams {
            wind_speed: 0.0,
            ..p
        };
        assert!((dispersion_length(&calm) - 2e7f64.sqrt()).abs() < 1e-9);
        assert!((dispersion_length(&calm) - 4472.136).abs() < 1e-3);
    }

    #[test]
    fn mean_hits_at_source_uses_radius_clamp() {
        let p = default_params();
        let model = PlumeModel::new(p.clone()).unwrap();
        let theta = SourceTerm::new(4, 6, 2);
        let lambda = model.lambda();
        let expected = 3.0 / (lambda / 0.5).ln() * bessel_k0(0.5 / lambda).unwrap();
        let got = model.mean_hits(theta, GridPos::new(4, 6));
        assert!((got - expected).abs() < 1e-14);
        assert!(got.is_finite());
    }

    #[test]
    fn mean_hits_linear_in_flux() {
        let p = default_params();
        let model = PlumeModel::new(p).unwrap();
        for (x, y) in [(0, 0), (3, 7), (5, 5), (10, 2)] {
            let pos = GridPos::new(x, y);
            let one = model.mean_hits(SourceTerm::new(5, 4, 0), pos);
            let two = model.mean_hits(SourceTerm::new(5, 4, 1), pos);
            assert!((two - 2.0 * one).abs() <= 1e-14 * two.abs());
        }
    }

    #[test]
    fn downwind_exceeds_upwind() {
        let model = PlumeModel::new(default_params()).unwrap();
        let theta = SourceTerm::new(5, 5, 0);
        for d in 1..=5 {
            let down = model.mean_hits(theta, GridPos::new(5, 5 - d));
            let up = model.mean_hits(theta, GridPos::new(5, 5 + d));
            assert!(down > up, "d = {d}: {down} <= {up}");
        }
    }

    #[test]
    fn radius_not_below_lambda() {
        let p = EnvParams {
            radius: 3.0,
            ..default_params()
        };
        assert!(PlumeModel::new(p.clone()).is_err());
        assert!(mean_hits(SourceTerm::new(0, 0, 0), GridPos::new(1, 1), &p).is_err());
    }

    #[test]
    fn hit_distribution_examples() {
        assert_eq!(hit_distribution(0.0, 3), vec![1.0, 0.0, 0.0, 0.0]);
        let p = hit_distribution(1.0, 3);
        let e = (-1.0f64).exp();
        let expected = [e, e, e / 2.0, 1.0 - 2.5 * e];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in p.iter().zip([0.367879, 0.367879, 0.183940, 0.080301]) {
            assert!((a - b).abs() < 5e-7);
        }
    }

    #[test]
    fn hit_distribution_normalized_on_grid() {
        for h_max in [1, 2, 3, 6] {
            for i in 0..=10_000 {
                let mu = i as f64 * 0.01;
                let p = hit_distribution(mu, h_max);
                assert_eq!(p.len(), h_max + 1);
                assert!(p.iter().all(|&v| v >= 0.0));
                let s: f64 = p.iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "mu={mu} sum={s}");
            }
        }
    }

    #[test]
    fn sampling_zero_mean_and_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..1000).all(|_| sample_hits(0.0, 3, &mut rng) == 0));
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..200).map(|_| sample_hits(1.3, 3, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    #[test]
    fn sampling_matches_distribution() {
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_hits(1.0, 3, &mut rng)] += 1;
        }
        for (h, p) in hit_distribution(1.0, 3).into_iter().enumerate() {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let dev = (counts[h] as f64 - n as f64 * p).abs();
            assert!(dev < 3.0 * sigma, "bin {h}: {} vs {}", counts[h], n as f64 * p);
        }
    }

    #[test]
    fn hit_map_shape_and_clamp() {
        let p = default_params();
        let theta = SourceTerm::new(9, 1, 1);
        let field = mean_hit_map(theta, &p).unwrap();
        assert_eq!(field.values.len(), 121);
        assert!(field.values.iter().all(|&v| (0.0..=3.0).contains(&v)));
        let mut csv = Vec::new();
        field.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("x,y,mu\n0,0,"));
        assert_eq!(text.lines().count(), 122);
    }

    #[test]
    fn hit_map_peaks_at_source() {
        let p = EnvParams {
            h_max: 100,
            ..default_params()
        };
        for theta in [SourceTerm::new(9, 1, 1), SourceTerm::new(0, 10, 4), SourceTerm::new(5, 5, 0)] {
            let field = mean_hit_map(theta, &p).unwrap();
            let (argmax, _) = field
                .values
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            assert_eq!(argmax, p.cell_index(theta.location()));
        }
    }

    #[test]
    fn hypothesis_index_roundtrip() {
        let p = default_params();
        for i in 0..p.n_hypotheses() {
            assert_eq!(p.hypothesis_index(p.hypothesis(i)), i);
        }
        assert_eq!(p.hypothesis_index(SourceTerm::new(1, 0, 0)), 1);
        assert_eq!(p.hypothesis_index(SourceTerm::new(0, 1, 0)), 11);
        assert_eq!(p.hypothesis_index(SourceTerm::new(0, 0, 1)), 121);
    }

    #[test]
    fn params_validation() {
        assert!(default_params().validate().is_ok());
        let bad = [
            EnvParams { nx: 0, ..default_params() },
            EnvParams { fluxes: vec![], ..default_params() },
            EnvParams { fluxes: vec![1.0, 1.0], ..default_params() },
            EnvParams { fluxes: vec![-1.0], ..default_params() },
            EnvParams { diffusivity: 0.0, ..default_params() },
            EnvParams { wind_speed: -1.0, ..default_params() },
            EnvParams { h_max: 0, ..default_params() },
            EnvParams { dt: 0.0, ..default_params() },
        ];
        for p in bad {
            assert!(p.validate().is_err(), "{p:?}");
        }
    }
}
