//! Kolmogorov turbulence: Cn²/r₀ conversion, FFT phase screens with
//! subharmonic augmentation, frozen-flow evolution, Greenwood frequency and
//! beam-wander r₀ estimation.
//!
//! Random draws come from `ChaCha8Rng::seed_from_u64(seed)` and
//! `rand_distr::StandardNormal`, so a seed pins every screen bit for bit.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;
use crate::field::{GridSpec, RealMap};

/// Kolmogorov phase PSD coefficient for spatial frequency in cycles/m.
const PSD_COEFF: f64 = 0.023;
/// Plane-wave Fried parameter coefficient.
const R0_COEFF: f64 = 0.423;
/// Single-axis Z-tilt variance coefficient.
const TILT_VARIANCE_COEFF: f64 = 0.182;
const GREENWOOD_COEFF: f64 = 0.427;
const DEFAULT_SUBHARMONIC_LEVELS: usize = 3;

fn default_subharmonics() -> usize {
    DEFAULT_SUBHARMONIC_LEVELS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurbulenceParams {
    /// Refractive-index structure constant, m^(-2/3).
    pub cn2: f64,
    /// Turbulent path length in meters.
    pub path_length: f64,
    pub wavelength: f64,
    /// Wind velocity `(vx, vy)` in m/s.
    pub wind_velocity: (f64, f64),
    pub n_screens: usize,
    /// von Kármán outer scale in meters; `None` is pure Kolmogorov.
    #[serde(default)]
    pub outer_scale: Option<f64>,
    #[serde(default = "default_subharmonics")]
    pub subharmonic_levels: usize,
}

impl TurbulenceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.cn2 >= 0.0 && self.cn2.is_finite()) {
            return Err(Error::param(format!("cn2 {} must be >= 0", self.cn2)));
        }
        if !(self.path_length > 0.0) {
            return Err(Error::param("turbulent path length must be positive"));
        }
        if !(self.wavelength > 0.0) {
            return Err(Error::param("wavelength must be positive"));
        }
        if self.n_screens < 1 {
            return Err(Error::param("at least one phase screen is required"));
        }
        if let Some(l0) = self.outer_scale {
            if !(l0 > 0.0) {
                return Err(Error::param("outer scale must be positive"));
            }
        }
        Ok(())
    }

    /// Path-integrated Fried parameter.
    pub fn r0(&self) -> Result<f64> {
        cn2_to_r0(self.cn2, self.path_length, self.wavelength)
    }

    /// Fried parameter of one of `n_screens` equal layers, `r0·n^(3/5)`.
    pub fn layer_r0(&self) -> Result<f64> {
        Ok(self.r0()? * (self.n_screens as f64).powf(0.6))
    }

    pub fn wind_speed(&self) -> f64 {
        self.wind_velocity.0.hypot(self.wind_velocity.1)
    }

    /// Set `cn2` so that the path r₀ equals `r0`.
    pub fn with_r0(mut self, r0: f64) -> Result<Self> {
        self.cn2 = r0_to_cn2(r0, self.path_length, self.wavelength)?;
        Ok(self)
    }
}

/// Plane-wave Fried parameter for a uniform path:
/// `r₀ = [0.423·k²·Cn²·L]^(-3/5)`.
pub fn cn2_to_r0(cn2: f64, path_length: f64, wavelength: f64) -> Result<f64> {
    if cn2 == 0.0 {
        return Err(Error::InfiniteR0);
    }
    if !(cn2 > 0.0) || !(path_length > 0.0) || !(wavelength > 0.0) {
        return Err(Error::param("cn2, path length and wavelength must be positive"));
    }
    let k = 2.0 * PI / wavelength;
    Ok((R0_COEFF * k * k * cn2 * path_length).powf(-0.6))
}

pub fn r0_to_cn2(r0: f64, path_length: f64, wavelength: f64) -> Result<f64> {
    if !(r0 > 0.0) || !(path_length > 0.0) || !(wavelength > 0.0) {
        return Err(Error::param("r0, path length and wavelength must be positive"));
    }
    let k = 2.0 * PI / wavelength;
    Ok(r0.powf(-5.0 / 3.0) / (R0_COEFF * k * k * path_length))
}

/// Single-layer Greenwood frequency `0.427·v/r₀` in Hz.
pub fn greenwood_frequency(wind_speed: f64, r0: f64) -> Result<f64> {
    if !(r0 > 0.0) {
        return Err(Error::param("r0 must be positive"));
    }
    Ok(GREENWOOD_COEFF * wind_speed.abs() / r0)
}

/// One thin turbulence layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseScreen {
    pub grid: GridSpec,
    /// Phase in radians, piston removed.
    pub phase: Array2<f64>,
    /// Fried parameter; infinite for a flat screen.
    pub r0: f64,
    pub wind: (f64, f64),
}

impl PhaseScreen {
    pub fn flat(grid: GridSpec, wind: (f64, f64)) -> Self {
        PhaseScreen {
            grid,
            phase: Array2::zeros((grid.n, grid.n)),
            r0: f64::INFINITY,
            wind,
        }
    }

    pub fn as_map(&self) -> RealMap {
        RealMap {
            grid: self.grid,
            data: self.phase.clone(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.phase.mean().unwrap_or(0.0)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.phase.iter().map(|v| (v - m).powi(2)).sum::<f64>() / self.phase.len() as f64
    }

    /// Write `<prefix>.bin` (row-major little-endian f64) and `<prefix>.json`.
    pub fn export(&self, prefix: &Path) -> Result<(PathBuf, PathBuf)> {
        let bin = prefix.with_extension("bin");
        let hdr = prefix.with_extension("json");
        let mut w = BufWriter::new(File::create(&bin).map_err(|e| Error::io(&bin, e))?);
        for v in self.phase.iter() {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&bin, e))?;
        }
        w.flush().map_err(|e| Error::io(&bin, e))?;
        let header = ScreenHeader {
            n: self.grid.n,
            extent: self.grid.extent,
            wavelength: self.grid.wavelength,
            r0: if self.r0.is_finite() { Some(self.r0) } else { None },
            wind: self.wind,
            dtype: "f64le".into(),
            order: "row-major".into(),
        };
        let text = serde_json::to_string_pretty(&header).map_err(|source| Error::Json {
            context: hdr.display().to_string(),
            source,
        })?;
        std::fs::write(&hdr, text).map_err(|e| Error::io(&hdr, e))?;
        Ok((bin, hdr))
    }

    pub fn import(prefix: &Path) -> Result<Self> {
        let bin = prefix.with_extension("bin");
        let hdr = prefix.with_extension("json");
        let text = std::fs::read_to_string(&hdr).map_err(|e| Error::io(&hdr, e))?;
        let header: ScreenHeader = serde_json::from_str(&text).map_err(|source| Error::Json {
            context: hdr.display().to_string(),
            source,
        })?;
        let grid = GridSpec::new(header.n, header.extent, header.wavelength)?;
        let mut bytes = Vec::new();
        BufReader::new(File::open(&bin).map_err(|e| Error::io(&bin, e))?)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(&bin, e))?;
        if bytes.len() != grid.n * grid.n * 8 {
            return Err(Error::GridMismatch(format!(
                "{} holds {} bytes, header implies {}",
                bin.display(),
                bytes.len(),
                grid.n * grid.n * 8
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let phase = Array2::from_shape_vec((grid.n, grid.n), values)
            .map_err(|e| Error::GridMismatch(e.to_string()))?;
        Ok(PhaseScreen {
            grid,
            phase,
            r0: header.r0.unwrap_or(f64::INFINITY),
            wind: header.wind,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScreenHeader {
    n: usize,
    extent: f64,
    wavelength: f64,
    r0: Option<f64>,
    wind: (f64, f64),
    dtype: String,
    order: String,
}

fn phase_psd(f2: f64, r0: f64, outer_scale: Option<f64>) -> f64 {
    let f0_2 = outer_scale.map_or(0.0, |l0| 1.0 / (l0 * l0));
    PSD_COEFF * r0.powf(-5.0 / 3.0) * (f2 + f0_2).powf(-11.0 / 6.0)
}

/// Mean PSD over the square cell of width `d` centred on `(fx, fy)`.
/// Point sampling underweights the cells next to the origin, where the
/// spectrum is steep, and biases the large-separation structure low.
fn cell_mean_psd(fx: f64, fy: f64, d: f64, r0: f64, outer_scale: Option<f64>) -> f64 {
    const M: usize = 16;
    let mut acc = 0.0;
    for i in 0..M {
        let y = fy + d * ((i as f64 + 0.5) / M as f64 - 0.5);
        for j in 0..M {
            let x = fx + d * ((j as f64 + 0.5) / M as f64 - 0.5);
            acc += phase_psd(x * x + y * y, r0, outer_scale);
        }
    }
    acc / (M * M) as f64
}

fn complex_normal(rng: &mut ChaCha8Rng) -> Complex64 {
    Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
}

/// Kolmogorov (or von Kármán) screen with Fried parameter `r0`.
pub fn synthesize_screen(
    r0: f64,
    wind: (f64, f64),
    outer_scale: Option<f64>,
    subharmonic_levels: usize,
    grid: &GridSpec,
    rng: &mut ChaCha8Rng,
) -> PhaseScreen {
    let n = grid.n;
    let df = 1.0 / grid.extent;

    let mut spec = Array2::<Complex64>::zeros((n, n));
    fft::for_each_freq(&mut spec, |fy, fx, v| {
        if fx == 0 && fy == 0 {
            return;
        }
        let f2 = ((fx * fx + fy * fy) as f64) * df * df;
        *v = complex_normal(rng) * (phase_psd(f2, r0, outer_scale).sqrt() * df);
    });
    fft::fft2(&mut spec);
    let mut phase = spec.mapv(|v| v.re);

    if subharmonic_levels > 0 {
        let x = grid.coords();
        let mut low = Array2::<f64>::zeros((n, n));
        for p in 1..=subharmonic_levels {
            let dfp = df / 3f64.powi(p as i32);
            for a in -1i32..=1 {
                for b in -1i32..=1 {
                    if a == 0 && b == 0 {
                        continue;
                    }
                    let (fx, fy) = (a as f64 * dfp, b as f64 * dfp);
                    let weight = cell_mean_psd(fx, fy, dfp, r0, outer_scale);
                    let c = complex_normal(rng) * (weight.sqrt() * dfp);
                    let ex: Vec<Complex64> = x
                        .iter()
                        .map(|&xv| Complex64::from_polar(1.0, 2.0 * PI * fx * xv))
                        .collect();
                    let ey: Vec<Complex64> = x
                        .iter()
                        .map(|&yv| c * Complex64::from_polar(1.0, 2.0 * PI * fy * yv))
                        .collect();
                    for (i, mut row) in low.outer_iter_mut().enumerate() {
                        for (j, v) in row.iter_mut().enumerate() {
                            *v += (ey[i] * ex[j]).re;
                        }
                    }
                }
            }
        }
        phase += &low;
    }

    let mean = phase.mean().unwrap_or(0.0);
    phase.mapv_inplace(|v| v - mean);
    PhaseScreen {
        grid: *grid,
        phase,
        r0,
        wind,
    }
}

/// Screen carrying the full path turbulence of `params`. `cn2 = 0` yields a
/// flat screen.
pub fn make_screen(params: &TurbulenceParams, grid: &GridSpec, seed: u64) -> Result<PhaseScreen> {
    params.validate()?;
    if params.cn2 == 0.0 {
        return Ok(PhaseScreen::flat(*grid, params.wind_velocity));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(synthesize_screen(
        params.r0()?,
        params.wind_velocity,
        params.outer_scale,
        params.subharmonic_levels,
        grid,
        &mut rng,
    ))
}

/// `n_screens` independent equal-strength layers whose combined r₀ matches
/// the path.
pub fn make_layers(params: &TurbulenceParams, grid: &GridSpec, seed: u64) -> Result<Vec<PhaseScreen>> {
    params.validate()?;
    if params.cn2 == 0.0 {
        return Ok(vec![PhaseScreen::flat(*grid, params.wind_velocity); params.n_screens]);
    }
    let r0 = params.layer_r0()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..params.n_screens)
        .map(|_| {
            synthesize_screen(
                r0,
                params.wind_velocity,
                params.outer_scale,
                params.subharmonic_levels,
                grid,
                &mut rng,
            )
        })
        .collect())
}

/// Frozen-flow translation by `wind·dt` via a spectral shift. The screen is
/// treated as periodic; Nyquist bins take the sign of the nearest whole-pixel
/// shift so the result stays real and the transform stays unitary.
pub fn evolve_screen(s: &PhaseScreen, dt: f64) -> Result<PhaseScreen> {
    if !(dt >= 0.0) {
        return Err(Error::param("time step must be non-negative"));
    }
    let pitch = s.grid.pitch();
    let sx = s.wind.0 * dt / pitch;
    let sy = s.wind.1 * dt / pitch;
    if sx == 0.0 && sy == 0.0 {
        return Ok(s.clone());
    }
    let n = s.grid.n as i64;
    let axis_factor = |k: i64, shift: f64| -> Complex64 {
        if k == -n / 2 {
            if (shift.round() as i64) % 2 == 0 {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::new(-1.0, 0.0)
            }
        } else {
            Complex64::from_polar(1.0, -2.0 * PI * k as f64 * shift / n as f64)
        }
    };
    let mut spec = s.phase.mapv(|v| Complex64::new(v, 0.0));
    fft::fft2(&mut spec);
    fft::for_each_freq(&mut spec, |fy, fx, v| {
        *v *= axis_factor(fx, sx) * axis_factor(fy, sy);
    });
    fft::ifft2(&mut spec);
    Ok(PhaseScreen {
        grid: s.grid,
        phase: spec.mapv(|v| v.re),
        r0: s.r0,
        wind: s.wind,
    })
}

/// Mean-square phase difference at integer lags along both axes, from
/// direct pairwise differences (no wrap-around).
pub fn structure_function(phase: &Array2<f64>, lags: &[usize]) -> Vec<f64> {
    let (rows, cols) = phase.dim();
    lags.iter()
        .map(|&lag| {
            let mut acc = 0.0;
            let mut count = 0usize;
            for i in 0..rows {
                for j in 0..cols.saturating_sub(lag) {
                    acc += (phase[[i, j + lag]] - phase[[i, j]]).powi(2);
                    count += 1;
                }
            }
            for i in 0..rows.saturating_sub(lag) {
                for j in 0..cols {
                    acc += (phase[[i + lag, j]] - phase[[i, j]]).powi(2);
                    count += 1;
                }
            }
            if count == 0 {
                0.0
            } else {
                acc / count as f64
            }
        })
        .collect()
}

/// Theoretical Kolmogorov structure function `6.88·(r/r₀)^(5/3)`.
pub fn kolmogorov_structure_function(r: f64, r0: f64) -> f64 {
    6.88 * (r / r0).powf(5.0 / 3.0)
}

/// Converts centroid displacement to angle of arrival: `angle = Δx / lever_arm`
/// (the focal length of the imaging lens, or the propagation distance to the
/// sensor in a pupil-tilt geometry).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalGeometry {
    pub lever_arm: f64,
}

pub const MIN_WANDER_SAMPLES: usize = 100;

/// Invert the single-axis tilt variance
/// `σ² = 0.182·(D/r₀)^(5/3)·(λ/D)²` for r₀.
pub fn estimate_r0_from_wander(
    centroid_series: &[(f64, f64)],
    beam_diameter: f64,
    wavelength: f64,
    geometry: FocalGeometry,
) -> Result<f64> {
    if centroid_series.len() < MIN_WANDER_SAMPLES {
        return Err(Error::param(format!(
            "need at least {MIN_WANDER_SAMPLES} centroid samples, got {}",
            centroid_series.len()
        )));
    }
    if !(beam_diameter > 0.0) || !(wavelength > 0.0) || !(geometry.lever_arm > 0.0) {
        return Err(Error::param("diameter, wavelength and lever arm must be positive"));
    }
    let n = centroid_series.len() as f64;
    // shifted by the first sample so a constant series gives exactly zero
    let var = |sel: fn(&(f64, f64)) -> f64| {
        let origin = sel(&centroid_series[0]);
        let m = centroid_series.iter().map(|p| sel(p) - origin).sum::<f64>() / n;
        centroid_series
            .iter()
            .map(|p| (sel(p) - origin - m).powi(2))
            .sum::<f64>()
            / (n - 1.0)
    };
    let var_xy = 0.5 * (var(|p| p.0) + var(|p| p.1));
    let angle_var = var_xy / geometry.lever_arm.powi(2);
    if !(angle_var > 0.0) {
        return Err(Error::NoWander);
    }
    let ratio = angle_var / (TILT_VARIANCE_COEFF * (wavelength / beam_diameter).powi(2));
    Ok(beam_diameter * ratio.powf(-0.6))
}
