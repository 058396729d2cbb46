//! Sampled scalar fields, hard apertures, inner products and angular-spectrum
//! propagation.
//!
//! Arrays are indexed `[row, col]` with rows along `y` and columns along `x`.
//! Sample `i` sits at `(i - n/2) * pitch`, so the optical axis falls exactly on
//! sample `n/2`.

use std::f64::consts::PI;

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;

/// Fraction of power used to define the occupied beam diameter in the
/// propagation aliasing guard.
pub const OCCUPIED_POWER_FRACTION: f64 = 0.999;

/// Default number of samples per side.
pub const DEFAULT_SAMPLES: usize = 512;

/// Square sampling grid with its optical wavelength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Samples per side.
    pub n: usize,
    /// Physical side length in meters.
    pub extent: f64,
    /// Wavelength in meters.
    pub wavelength: f64,
}

impl GridSpec {
    pub fn new(n: usize, extent: f64, wavelength: f64) -> Result<Self> {
        let g = GridSpec {
            n,
            extent,
            wavelength,
        };
        g.validate()?;
        Ok(g)
    }

    /// Default grid for a scene whose largest beam has the given diameter:
    /// 512 samples spanning four beam diameters.
    pub fn default_for(max_beam_diameter: f64, wavelength: f64) -> Result<Self> {
        GridSpec::new(DEFAULT_SAMPLES, 4.0 * max_beam_diameter, wavelength)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 64 || !self.n.is_power_of_two() {
            return Err(Error::InvalidGrid(format!(
                "n = {} must be a power of two >= 64",
                self.n
            )));
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "extent = {} must be positive",
                self.extent
            )));
        }
        if !(self.wavelength > 0.0 && self.wavelength.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "wavelength = {} must be positive",
                self.wavelength
            )));
        }
        Ok(())
    }

    pub fn pitch(&self) -> f64 {
        self.extent / self.n as f64
    }

    pub fn pixel_area(&self) -> f64 {
        self.pitch() * self.pitch()
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    /// Physical coordinate of sample index `i` along either axis.
    pub fn coord(&self, i: usize) -> f64 {
        (i as f64 - (self.n / 2) as f64) * self.pitch()
    }

    pub fn coords(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.coord(i)).collect()
    }

    /// Spatial frequency (cycles/m) of FFT bin `k`.
    pub fn freq(&self, k: usize) -> f64 {
        fft::freq_index(k, self.n) as f64 / self.extent
    }

    pub(crate) fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!("{self:?} vs {other:?}")));
        }
        Ok(())
    }

    pub(crate) fn ensure_shape<T>(&self, data: &Array2<T>) -> Result<()> {
        if data.dim() != (self.n, self.n) {
            return Err(Error::GridMismatch(format!(
                "array of shape {:?} on a {}x{} grid",
                data.dim(),
                self.n,
                self.n
            )));
        }
        Ok(())
    }
}

/// Make a grid, rejecting non-power-of-two sizes and non-positive dimensions.
pub fn make_grid(n: usize, extent: f64, wavelength: f64) -> Result<GridSpec> {
    GridSpec::new(n, extent, wavelength)
}

/// Real-valued map (phase in radians, DM surfaces, Zernike samples) on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMap {
    pub grid: GridSpec,
    pub data: Array2<f64>,
}

impl RealMap {
    pub fn new(grid: GridSpec, data: Array2<f64>) -> Result<Self> {
        grid.ensure_shape(&data)?;
        Ok(RealMap { grid, data })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        RealMap {
            grid,
            data: Array2::zeros((grid.n, grid.n)),
        }
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn(f64, f64) -> f64) -> Self {
        let c = grid.coords();
        RealMap {
            grid,
            data: Array2::from_shape_fn((grid.n, grid.n), |(i, j)| f(c[j], c[i])),
        }
    }

    /// Piston-removed RMS over the samples where `mask` is true.
    pub fn rms_over(&self, mask: &Array2<bool>) -> f64 {
        let (mut s, mut s2, mut k) = (0.0, 0.0, 0usize);
        Zip::from(&self.data).and(mask).for_each(|&v, &m| {
            if m {
                s += v;
                s2 += v * v;
                k += 1;
            }
        });
        if k == 0 {
            return 0.0;
        }
        let mean = s / k as f64;
        (s2 / k as f64 - mean * mean).max(0.0).sqrt()
    }

    pub fn scaled(&self, a: f64) -> RealMap {
        RealMap {
            grid: self.grid,
            data: &self.data * a,
        }
    }

    pub fn add(&self, other: &RealMap) -> Result<RealMap> {
        self.grid.ensure_same(&other.grid)?;
        Ok(RealMap {
            grid: self.grid,
            data: &self.data + &other.data,
        })
    }
}

/// Shape of an aperture stop. Only hard-edged discs are modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApertureKind {
    #[default]
    HardDisc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aperture {
    /// Diameter in meters.
    pub diameter: f64,
    /// Center offset `(x, y)` in meters.
    #[serde(default)]
    pub center_offset: (f64, f64),
    #[serde(default)]
    pub kind: ApertureKind,
}

impl Aperture {
    pub fn new(diameter: f64, center_offset: (f64, f64)) -> Result<Self> {
        let a = Aperture {
            diameter,
            center_offset,
            kind: ApertureKind::HardDisc,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn centered(diameter: f64) -> Result<Self> {
        Aperture::new(diameter, (0.0, 0.0))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.diameter > 0.0 && self.diameter.is_finite()) {
            return Err(Error::param(format!(
                "aperture diameter {} must be positive",
                self.diameter
            )));
        }
        Ok(())
    }

    pub fn radius(&self) -> f64 {
        0.5 * self.diameter
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.center_offset.0;
        let dy = y - self.center_offset.1;
        dx * dx + dy * dy <= self.radius() * self.radius()
    }

    pub fn mask(&self, grid: &GridSpec) -> Array2<bool> {
        let c = grid.coords();
        Array2::from_shape_fn((grid.n, grid.n), |(i, j)| self.contains(c[j], c[i]))
    }

    pub fn pixel_count(&self, grid: &GridSpec) -> usize {
        self.mask(grid).iter().filter(|&&m| m).count()
    }

    /// True when the disc lies inside the grid window.
    pub fn fits(&self, grid: &GridSpec) -> bool {
        let half = 0.5 * grid.extent;
        let r = self.radius();
        self.center_offset.0.abs() + r <= half + 1e-12 && self.center_offset.1.abs() + r <= half + 1e-12
    }
}

/// Sampled complex field amplitude on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    pub grid: GridSpec,
    pub data: Array2<Complex64>,
}

impl ComplexField {
    pub fn new(grid: GridSpec, data: Array2<Complex64>) -> Result<Self> {
        grid.ensure_shape(&data)?;
        Ok(ComplexField { grid, data })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        ComplexField {
            grid,
            data: Array2::zeros((grid.n, grid.n)),
        }
    }

    /// Field sampled from `f(x, y)`.
    pub fn from_fn(grid: GridSpec, f: impl Fn(f64, f64) -> Complex64) -> Self {
        let c = grid.coords();
        ComplexField {
            grid,
            data: Array2::from_shape_fn((grid.n, grid.n), |(i, j)| f(c[j], c[i])),
        }
    }

    /// Gaussian `exp(-r²/w²)` centered at `center`, scaled to unit power.
    pub fn gaussian(grid: GridSpec, waist: f64, center: (f64, f64)) -> Self {
        let mut f = ComplexField::from_fn(grid, |x, y| {
            let r2 = (x - center.0).powi(2) + (y - center.1).powi(2);
            Complex64::new((-r2 / (waist * waist)).exp(), 0.0)
        });
        f.normalize();
        f
    }

    pub fn intensity(&self) -> Array2<f64> {
        self.data.mapv(|v| v.norm_sqr())
    }

    /// Scale to unit power. A zero field is left untouched.
    pub fn normalize(&mut self) {
        let p = power(self);
        if p > 0.0 {
            let s = 1.0 / p.sqrt();
            self.data.mapv_inplace(|v| v * s);
        }
    }

    pub fn scaled(&self, a: Complex64) -> ComplexField {
        ComplexField {
            grid: self.grid,
            data: self.data.mapv(|v| v * a),
        }
    }

    /// Multiply by `exp(i·phase)`.
    pub fn apply_phase(&mut self, phase: &RealMap) -> Result<()> {
        self.grid.ensure_same(&phase.grid)?;
        Zip::from(&mut self.data)
            .and(&phase.data)
            .for_each(|v, &p| *v *= Complex64::from_polar(1.0, p));
        Ok(())
    }

    pub fn with_phase(&self, phase: &RealMap) -> Result<ComplexField> {
        let mut f = self.clone();
        f.apply_phase(phase)?;
        Ok(f)
    }

    /// Accumulate `a * other` into this field.
    pub fn add_scaled(&mut self, a: Complex64, other: &ComplexField) -> Result<()> {
        self.grid.ensure_same(&other.grid)?;
        Zip::from(&mut self.data)
            .and(&other.data)
            .for_each(|v, &o| *v += a * o);
        Ok(())
    }

    /// Diameter of the centered disc that holds `fraction` of the power.
    pub fn occupied_diameter(&self, fraction: f64) -> f64 {
        let n = self.grid.n;
        let pitch = self.grid.pitch();
        let bins = n + 2;
        let mut hist = vec![0.0; bins];
        let c = self.grid.coords();
        let mut total = 0.0;
        for ((i, j), v) in self.data.indexed_iter() {
            let p = v.norm_sqr();
            if p == 0.0 {
                continue;
            }
            let r = c[j].hypot(c[i]) / pitch;
            hist[(r.ceil() as usize).min(bins - 1)] += p;
            total += p;
        }
        if total == 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for (k, h) in hist.iter().enumerate() {
            acc += h;
            if acc >= fraction * total {
                return 2.0 * k as f64 * pitch;
            }
        }
        2.0 * bins as f64 * pitch
    }

    /// Translate the field by `(dx, dy)` meters (circular, band-limited).
    pub fn translate(&self, dx: f64, dy: f64) -> ComplexField {
        if dx == 0.0 && dy == 0.0 {
            return self.clone();
        }
        let mut spec = self.data.clone();
        fft::fft2(&mut spec);
        let ext = self.grid.extent;
        fft::for_each_freq(&mut spec, |fy, fx, v| {
            let phase = -2.0 * PI * (fx as f64 * dx + fy as f64 * dy) / ext;
            *v *= Complex64::from_polar(1.0, phase);
        });
        fft::ifft2(&mut spec);
        ComplexField {
            grid: self.grid,
            data: spec,
        }
    }

    /// Fraunhofer pattern in the back focal plane of a lens of focal length
    /// `focal_length`. The returned grid has pitch `λ·f/extent`; power is
    /// conserved.
    pub fn far_field(&self, focal_length: f64) -> Result<ComplexField> {
        if !(focal_length > 0.0) {
            return Err(Error::param("focal length must be positive"));
        }
        let g = self.grid;
        let n = g.n;
        let lf = g.wavelength * focal_length;
        let out_grid = GridSpec::new(n, lf * n as f64 / g.extent, g.wavelength)?;
        // Pre-multiply by (-1)^(i+j) so the zero frequency lands on n/2.
        let mut buf = Array2::from_shape_fn((n, n), |(i, j)| {
            let s = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            self.data[[i, j]] * s
        });
        fft::fft2(&mut buf);
        let scale = g.pixel_area() / lf;
        for ((i, j), v) in buf.indexed_iter_mut() {
            let s = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            *v *= s * scale;
        }
        ComplexField::new(out_grid, buf)
    }
}

/// Total power: sum of |amplitude|² times pixel area.
pub fn power(f: &ComplexField) -> f64 {
    f.data.iter().map(|v| v.norm_sqr()).sum::<f64>() * f.grid.pixel_area()
}

/// Inner product ⟨a|b⟩ = Σ conj(a)·b·dA.
pub fn overlap(a: &ComplexField, b: &ComplexField) -> Result<Complex64> {
    a.grid.ensure_same(&b.grid)?;
    let mut acc = Complex64::new(0.0, 0.0);
    Zip::from(&a.data)
        .and(&b.data)
        .for_each(|x, y| acc += x.conj() * y);
    Ok(acc * a.grid.pixel_area())
}

/// Aliasing requirement for propagating `f` over `distance`: the window has
/// to hold the occupied beam plus the lateral reach of the grid bandwidth.
pub fn required_extent(f: &ComplexField, distance: f64) -> f64 {
    f.occupied_diameter(OCCUPIED_POWER_FRACTION)
        + f.grid.wavelength * distance / f.grid.pitch()
}

/// Angular-spectrum propagation with the exact transfer function.
///
/// The constant phase `exp(i·k·z)` is dropped. Evanescent components are
/// attenuated.
pub fn propagate(f: &ComplexField, distance: f64) -> Result<ComplexField> {
    if !(distance >= 0.0 && distance.is_finite()) {
        return Err(Error::param(format!(
            "propagation distance {distance} must be non-negative"
        )));
    }
    if distance == 0.0 {
        return Ok(f.clone());
    }
    let required = required_extent(f, distance);
    if required > f.grid.extent {
        return Err(Error::Aliasing {
            distance,
            extent: f.grid.extent,
            required,
        });
    }
    Ok(propagate_unchecked(f, distance, (0.0, 0.0)))
}

/// Propagation followed by a lateral translation, sharing one FFT pair.
pub(crate) fn propagate_unchecked(
    f: &ComplexField,
    distance: f64,
    shift: (f64, f64),
) -> ComplexField {
    let g = f.grid;
    let k = g.wavenumber();
    let mut spec = f.data.clone();
    fft::fft2(&mut spec);
    let two_pi = 2.0 * PI;
    fft::for_each_freq(&mut spec, |fy, fx, v| {
        let kx = two_pi * fx as f64 / g.extent;
        let ky = two_pi * fy as f64 / g.extent;
        let kt2 = kx * kx + ky * ky;
        let mut h = if kt2 <= k * k {
            let kz = (k * k - kt2).sqrt();
            // kz - k, written to avoid cancellation
            Complex64::from_polar(1.0, -distance * kt2 / (k + kz))
        } else {
            Complex64::new((-distance * (kt2 - k * k).sqrt()).exp(), 0.0)
        };
        if shift != (0.0, 0.0) {
            h *= Complex64::from_polar(1.0, -(kx * shift.0 + ky * shift.1));
        }
        *v *= h;
    });
    fft::ifft2(&mut spec);
    ComplexField {
        grid: g,
        data: spec,
    }
}

/// Zero every sample outside the aperture disc.
pub fn apply_aperture(f: &ComplexField, a: &Aperture) -> ComplexField {
    let c = f.grid.coords();
    let mut out = f.clone();
    for ((i, j), v) in out.data.indexed_iter_mut() {
        if !a.contains(c[j], c[i]) {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    out
}

/// Intensity-weighted first moment `(x, y)` in meters.
pub fn centroid(f: &ComplexField) -> Result<(f64, f64)> {
    let c = f.grid.coords();
    let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
    for ((i, j), v) in f.data.indexed_iter() {
        let p = v.norm_sqr();
        sx += p * c[j];
        sy += p * c[i];
        s += p;
    }
    if s == 0.0 {
        return Err(Error::ZeroPower("centroid of a zero-power field"));
    }
    Ok((sx / s, sy / s))
}

/// Fresnel number product `D_t·D_r / (4·λ·L)`.
pub fn fresnel_number_product(d_tx: f64, d_rx: f64, length: f64, wavelength: f64) -> Result<f64> {
    for (name, v) in [
        ("transmit diameter", d_tx),
        ("receive diameter", d_rx),
        ("link length", length),
        ("wavelength", wavelength),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::param(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(d_tx * d_rx / (4.0 * wavelength * length))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const HENE: f64 = 633e-9;

    #[test]
    fn make_grid_pitch_and_rejections() {
        let g = make_grid(256, 0.1, HENE).unwrap();
        assert_relative_eq!(g.pitch(), 3.90625e-4, epsilon = 1e-15);
        assert!(make_grid(64, 0.05, HENE).is_ok());
        assert!(matches!(make_grid(100, 0.1, HENE), Err(Error::InvalidGrid(_))));
        assert!(make_grid(32, 0.1, HENE).is_err());
        assert!(make_grid(128, 0.0, HENE).is_err());
        assert!(make_grid(128, 0.1, -1.0).is_err());
    }

    #[test]
    fn power_basics() {
        let g = make_grid(128, 0.02, HENE).unwrap();
        let f = ComplexField::gaussian(g, 2e-3, (0.0, 0.0));
        assert_relative_eq!(power(&f), 1.0, epsilon = 1e-12);
        assert_eq!(power(&ComplexField::zeros(g)), 0.0);
        let f2 = f.scaled(Complex64::new(2.0, 0.0));
        assert_relative_eq!(power(&f2), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn overlap_rejects_grid_mismatch() {
        let g1 = make_grid(64, 0.02, HENE).unwrap();
        let g2 = make_grid(64, 0.03, HENE).unwrap();
        let r = overlap(&ComplexField::zeros(g1), &ComplexField::zeros(g2));
        assert!(matches!(r, Err(Error::GridMismatch(_))));
    }

    #[test]
    fn self_overlap_of_normalized_field_is_one() {
        let g = make_grid(128, 0.02, HENE).unwrap();
        let f = ComplexField::gaussian(g, 2e-3, (1e-3, -5e-4));
        let o = overlap(&f, &f).unwrap();
        assert_relative_eq!(o.re, 1.0, epsilon = 1e-12);
        assert!(o.im.abs() < 1e-15);
    }

    #[test]
    fn displaced_gaussian_overlap_matches_analytic() {
        // Analytic: for u ∝ exp(-r²/w²), ⟨u(r)|u(r-Δ)⟩ = exp(-Δ²/(2w²)), so
        // |overlap|² = exp(-Δ²/w²).
        let w = 2e-3;
        let g = make_grid(256, 0.03, HENE).unwrap();
        let g4 = make_grid(1024, 0.03, HENE).unwrap();
        for delta in [0.5e-3f64, 1e-3, 2e-3] {
            let analytic = (-(delta * delta) / (w * w)).exp();
            let num = |grid| {
                let a = ComplexField::gaussian(grid, w, (0.0, 0.0));
                let b = ComplexField::gaussian(grid, w, (delta, 0.0));
                overlap(&a, &b).unwrap().norm_sqr()
            };
            let coarse = num(g);
            let fine = num(g4);
            assert!((coarse - analytic).abs() / analytic < 0.01, "{coarse} vs {analytic}");
            assert!((fine - coarse).abs() / analytic < 1e-6);
        }
    }

    #[test]
    fn propagate_zero_distance_is_identity() {
        let g = make_grid(128, 0.02, HENE).unwrap();
        let f = ComplexField::gaussian(g, 2e-3, (0.0, 0.0));
        assert_eq!(propagate(&f, 0.0).unwrap(), f);
        assert!(propagate(&f, -1.0).is_err());
    }

    #[test]
    fn gaussian_beam_radius_after_50m() {
        // w(z) = w0·sqrt(1 + (z/zR)²), zR = π·w0²/λ
        let w0 = 5e-3;
        let z = 50.0;
        let g = make_grid(512, 0.15, HENE).unwrap();
        let f = ComplexField::gaussian(g, w0, (0.0, 0.0));
        let out = propagate(&f, z).unwrap();
        let zr = PI * w0 * w0 / HENE;
        let expected = w0 * (1.0 + (z / zr).powi(2)).sqrt();
        // second moment: <x²> = w²/4 for a Gaussian intensity
        let c = g.coords();
        let (mut m2, mut s) = (0.0, 0.0);
        for ((_, j), v) in out.data.indexed_iter() {
            m2 += v.norm_sqr() * c[j] * c[j];
            s += v.norm_sqr();
        }
        let w = 2.0 * (m2 / s).sqrt();
        assert!((w - expected).abs() / expected < 0.01, "{w} vs {expected}");
        assert!((power(&out) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn propagate_reports_aliasing_with_required_extent() {
        let g = make_grid(128, 0.02, HENE).unwrap();
        let f = ComplexField::gaussian(g, 2e-3, (0.0, 0.0));
        match propagate(&f, 100.0) {
            Err(Error::Aliasing { required, extent, .. }) => {
                assert!(required > extent);
                assert_eq!(extent, 0.02);
            }
            other => panic!("expected aliasing error, got {other:?}"),
        }
    }

    #[test]
    fn propagation_composes() {
        let g = make_grid(256, 0.04, HENE).unwrap();
        let f = ComplexField::gaussian(g, 1.5e-3, (2e-3, 0.0))
            .with_phase(&RealMap::from_fn(g, |x, _| 300.0 * x))
            .unwrap();
        let a = propagate(&f, 3.0).unwrap();
        let b = propagate(&propagate(&f, 1.0).unwrap(), 2.0).unwrap();
        let num: f64 = (&a.data - &b.data).iter().map(|v| v.norm_sqr()).sum();
        let den: f64 = a.data.iter().map(|v| v.norm_sqr()).sum();
        assert!((num / den).sqrt() < 1e-6);
    }

    #[test]
    fn wide_aperture_passes_everything() {
        let g = make_grid(256, 0.05, HENE).unwrap();
        let f = ComplexField::gaussian(g, 2e-3, (0.0, 0.0));
        let out = apply_aperture(&f, &Aperture::centered(0.04).unwrap());
        assert!(power(&out) / power(&f) >= 0.999);
        let null = apply_aperture(&ComplexField::zeros(g), &Aperture::centered(0.01).unwrap());
        assert_eq!(power(&null), 0.0);
    }

    #[test]
    fn aperture_at_beam_diameter_passes_one_minus_e_minus_two() {
        // Encircled power of exp(-2r²/w²) inside r = w is 1 - e^-2.
        let w = 4e-3;
        let g = make_grid(512, 0.04, HENE).unwrap();
        let f = ComplexField::gaussian(g, w, (0.0, 0.0));
        let out = apply_aperture(&f, &Aperture::centered(2.0 * w).unwrap());
        let expected = 1.0 - (-2.0f64).exp();
        assert!((power(&out) - expected).abs() / expected < 0.01);
    }

    #[test]
    fn aperture_is_idempotent_and_rejects_bad_diameter() {
        let g = make_grid(128, 0.02, HENE).unwrap();
        let f = ComplexField::gaussian(g, 3e-3, (1e-3, 0.0));
        let a = Aperture::new(4e-3, (5e-4, -5e-4)).unwrap();
        let once = apply_aperture(&f, &a);
        assert_eq!(apply_aperture(&once, &a), once);
        assert!(Aperture::centered(0.0).is_err());
    }

    #[test]
    fn centroid_of_centered_and_shifted_gaussians() {
        let g = make_grid(256, 0.03, HENE).unwrap();
        let f = ComplexField::gaussian(g, 2e-3, (0.0, 0.0));
        let (x, y) = centroid(&f).unwrap();
        assert!(x.abs() < 0.5 * g.pitch() && y.abs() < 0.5 * g.pitch());
        let s = ComplexField::gaussian(g, 2e-3, (3.0 * g.pitch(), 0.0));
        let (x, _) = centroid(&s).unwrap();
        assert!((x - 3.0 * g.pitch()).abs() < 0.3 * g.pitch());
        assert!(matches!(centroid(&ComplexField::zeros(g)), Err(Error::ZeroPower(_))));
    }

    #[test]
    fn translate_moves_centroid() {
        let g = make_grid(128, 0.02, HENE).unwrap();
        let f = ComplexField::gaussian(g, 1.5e-3, (0.0, 0.0));
        let t = f.translate(1.23e-3, -0.4e-3);
        let (x, y) = centroid(&t).unwrap();
        assert_relative_eq!(x, 1.23e-3, epsilon = 1e-8);
        assert_relative_eq!(y, -0.4e-3, epsilon = 1e-8);
    }

    #[test]
    fn far_field_conserves_power() {
        let g = make_grid(128, 0.02, HENE).unwrap();
        let f = ComplexField::gaussian(g, 2e-3, (0.0, 0.0));
        let ff = f.far_field(0.5).unwrap();
        assert_relative_eq!(power(&ff), 1.0, epsilon = 1e-10);
        assert_relative_eq!(ff.grid.pitch(), HENE * 0.5 / 0.02, epsilon = 1e-15);
    }

    #[test]
    fn fresnel_number_product_values() {
        let nf = fresnel_number_product(0.0762, 0.0762, 340.0, HENE).unwrap();
        assert!((nf - 6.74).abs() < 0.01, "{nf}");
        let doubled = fresnel_number_product(0.1524, 0.0762, 340.0, HENE).unwrap();
        assert_relative_eq!(doubled, 2.0 * nf, epsilon = 1e-12);
        assert!(fresnel_number_product(0.0, 0.1, 1.0, HENE).is_err());
    }
}
