//! Adaptive-optics chain: Shack-Hartmann sensing, modal reconstruction,
//! Gaussian-influence deformable mirror, quad-cell tip-tilt loop and the
//! discrete integrator with frame latency.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SVD};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{centroid, power, Aperture, ComplexField, GridSpec, RealMap};
use crate::zernike::{zernike_eval_on, ZernikeBasis, ZernikeCoeffs};

/// Subapertures below this fraction of the mean subaperture power are invalid.
pub const VALIDITY_THRESHOLD: f64 = 0.01;
/// Zernike order of the noise-free residual estimate recorded in telemetry.
pub const TELEMETRY_TERMS: usize = 36;
const RANK_TOLERANCE: f64 = 1e-6;
/// Singular values below this fraction of the largest are dropped in the DM fit.
const DM_SVD_CUTOFF: f64 = 1e-3;

fn default_validity() -> f64 {
    VALIDITY_THRESHOLD
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WfsConfig {
    pub n_lenslets: usize,
    /// Zernike terms reconstructed, piston included.
    pub n_terms: usize,
    pub frame_rate: f64,
    /// Slope noise in radians per subaperture at `reference_rate`.
    pub slope_noise_rms: f64,
    /// Frame rate at which `slope_noise_rms` holds; noise scales as
    /// `√(frame_rate / reference_rate)`.
    pub reference_rate: f64,
    /// Diameter of the sensed pupil, which the lenslet array spans.
    pub pupil_diameter: f64,
    #[serde(default = "default_validity")]
    pub validity_threshold: f64,
}

impl WfsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_lenslets < 4 {
            return Err(Error::param("WFS needs at least 4 lenslets per side"));
        }
        if self.n_terms < 2 {
            return Err(Error::param("WFS must reconstruct at least 2 terms"));
        }
        if !(self.frame_rate > 0.0) || !(self.reference_rate > 0.0) {
            return Err(Error::param("WFS frame rates must be positive"));
        }
        if !(self.slope_noise_rms >= 0.0) {
            return Err(Error::param("slope noise must be non-negative"));
        }
        if !(self.pupil_diameter > 0.0) {
            return Err(Error::param("WFS pupil diameter must be positive"));
        }
        if !(0.0..1.0).contains(&self.validity_threshold) {
            return Err(Error::param("validity threshold must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn effective_noise(&self) -> f64 {
        self.slope_noise_rms * (self.frame_rate / self.reference_rate).sqrt()
    }

    pub fn pupil(&self) -> Aperture {
        Aperture {
            diameter: self.pupil_diameter,
            center_offset: (0.0, 0.0),
            kind: Default::default(),
        }
    }
}

/// Slopes in radians of phase across one subaperture width, row-major over
/// the `n_lenslets × n_lenslets` array.
#[derive(Debug, Clone, PartialEq)]
pub struct WfsMeasurement {
    pub n_lenslets: usize,
    pub slopes_x: Vec<f64>,
    pub slopes_y: Vec<f64>,
    pub valid: Vec<bool>,
    pub subap_power: Vec<f64>,
}

impl WfsMeasurement {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Lenslet geometry on one grid plus the slope response of each Zernike term.
#[derive(Debug, Clone)]
pub struct ShackHartmann {
    pub cfg: WfsConfig,
    pub grid: GridSpec,
    n_sub: usize,
    /// `(subaperture, pixel, +x neighbour)`.
    xpairs: Vec<(usize, usize, usize)>,
    ypairs: Vec<(usize, usize, usize)>,
    /// `(subaperture, pixel)` for every pupil pixel.
    members: Vec<(usize, usize)>,
    /// Subapertures with pupil pixels and at least one pair on each axis.
    usable: Vec<bool>,
    /// Rows `[x slopes; y slopes]`, columns Noll 2..=n_terms.
    interaction: DMatrix<f64>,
    scale: f64,
}

impl ShackHartmann {
    pub fn new(cfg: &WfsConfig, grid: &GridSpec) -> Result<Self> {
        cfg.validate()?;
        let pupil = cfg.pupil();
        if !pupil.fits(grid) {
            return Err(Error::param("WFS pupil exceeds the grid"));
        }
        let nl = cfg.n_lenslets;
        let width = cfg.pupil_diameter / nl as f64;
        if width < 2.0 * grid.pitch() {
            return Err(Error::param(format!(
                "subaperture width {width:.3e} m is under two pixels"
            )));
        }
        let n = grid.n;
        let c = grid.coords();
        let half = 0.5 * cfg.pupil_diameter;
        let mut owner = vec![usize::MAX; n * n];
        let mut members = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (c[j], c[i]);
                if !pupil.contains(x, y) {
                    continue;
                }
                let b = (((x + half) / width).floor() as usize).min(nl - 1);
                let a = (((y + half) / width).floor() as usize).min(nl - 1);
                owner[i * n + j] = a * nl + b;
                members.push((a * nl + b, i * n + j));
            }
        }
        let mut xpairs = Vec::new();
        let mut ypairs = Vec::new();
        for &(s, k) in &members {
            if k % n + 1 < n && owner[k + 1] == s {
                xpairs.push((s, k, k + 1));
            }
            if k + n < n * n && owner[k + n] == s {
                ypairs.push((s, k, k + n));
            }
        }
        let n_sub = nl * nl;
        let mut has_x = vec![false; n_sub];
        let mut has_y = vec![false; n_sub];
        for &(s, _, _) in &xpairs {
            has_x[s] = true;
        }
        for &(s, _, _) in &ypairs {
            has_y[s] = true;
        }
        let usable: Vec<bool> = (0..n_sub).map(|s| has_x[s] && has_y[s]).collect();
        let usable_count = usable.iter().filter(|&&u| u).count();
        if cfg.n_terms > usable_count {
            return Err(Error::param(format!(
                "{} Zernike terms exceed the {usable_count} usable subapertures",
                cfg.n_terms
            )));
        }

        let scale = width / grid.pitch();
        let mut sh = ShackHartmann {
            cfg: *cfg,
            grid: *grid,
            n_sub,
            xpairs,
            ypairs,
            members,
            usable,
            interaction: DMatrix::zeros(0, 0),
            scale,
        };
        let mut inter = DMatrix::zeros(2 * n_sub, cfg.n_terms - 1);
        for t in 2..=cfg.n_terms {
            let z = zernike_eval_on(t, grid, &pupil)?;
            let flat = z.data.as_slice().expect("standard layout");
            let (sx, sy) = sh.phase_slopes(flat);
            for s in 0..n_sub {
                inter[(s, t - 2)] = sx[s];
                inter[(n_sub + s, t - 2)] = sy[s];
            }
        }
        sh.interaction = inter;
        Ok(sh)
    }

    pub fn usable_count(&self) -> usize {
        self.usable.iter().filter(|&&u| u).count()
    }

    fn average(&self, pairs: &[(usize, usize, usize)], f: impl Fn(usize, usize) -> (f64, f64)) -> Vec<f64> {
        let mut num = vec![0.0; self.n_sub];
        let mut den = vec![0.0; self.n_sub];
        for &(s, k1, k2) in pairs {
            let (v, w) = f(k1, k2);
            num[s] += w * v;
            den[s] += w;
        }
        num.iter()
            .zip(&den)
            .map(|(n, d)| if *d > 0.0 { n / d * self.scale } else { 0.0 })
            .collect()
    }

    /// Uniform-weight slopes of an unwrapped phase map.
    fn phase_slopes(&self, phase: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let f = |a: usize, b: usize| (phase[b] - phase[a], 1.0);
        (self.average(&self.xpairs, f), self.average(&self.ypairs, f))
    }

    /// Intensity-weighted slopes of `beacon` plus Gaussian noise.
    pub fn measure(&self, beacon: &ComplexField, seed: u64) -> Result<WfsMeasurement> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.measure_with(beacon, &mut rng)
    }

    pub fn measure_with(&self, beacon: &ComplexField, rng: &mut ChaCha8Rng) -> Result<WfsMeasurement> {
        self.grid.ensure_same(&beacon.grid)?;
        if !(power(beacon) > 0.0) {
            return Err(Error::ZeroPower("WFS beacon"));
        }
        let u = beacon.data.as_slice().expect("standard layout");
        let f = |a: usize, b: usize| {
            let z = u[a].conj() * u[b];
            (z.arg(), z.norm())
        };
        let mut slopes_x = self.average(&self.xpairs, f);
        let mut slopes_y = self.average(&self.ypairs, f);

        let mut subap_power = vec![0.0; self.n_sub];
        for &(s, k) in &self.members {
            subap_power[s] += u[k].norm_sqr();
        }
        let lit: Vec<f64> = (0..self.n_sub)
            .filter(|&s| self.usable[s])
            .map(|s| subap_power[s])
            .collect();
        let mean = lit.iter().sum::<f64>() / lit.len().max(1) as f64;
        let floor = self.cfg.validity_threshold * mean;
        let valid: Vec<bool> = (0..self.n_sub)
            .map(|s| self.usable[s] && subap_power[s] > floor && subap_power[s] > 0.0)
            .collect();
        if !valid.iter().any(|&v| v) {
            return Err(Error::NoValidSubapertures);
        }
        let sigma = self.cfg.effective_noise();
        for s in 0..self.n_sub {
            if valid[s] {
                if sigma > 0.0 {
                    slopes_x[s] += sigma * rng.sample::<f64, _>(StandardNormal);
                    slopes_y[s] += sigma * rng.sample::<f64, _>(StandardNormal);
                }
            } else {
                slopes_x[s] = 0.0;
                slopes_y[s] = 0.0;
            }
        }
        Ok(WfsMeasurement {
            n_lenslets: self.cfg.n_lenslets,
            slopes_x,
            slopes_y,
            valid,
            subap_power,
        })
    }

    /// Least-squares modal estimate over valid subapertures; piston is
    /// unobservable and returned as 0.
    pub fn reconstruct(&self, m: &WfsMeasurement, n_terms: usize) -> Result<ZernikeCoeffs> {
        if n_terms < 2 || n_terms > self.cfg.n_terms {
            return Err(Error::param(format!(
                "n_terms {n_terms} outside 2..={}",
                self.cfg.n_terms
            )));
        }
        if m.n_lenslets != self.cfg.n_lenslets {
            return Err(Error::GridMismatch("measurement from a different lenslet array".into()));
        }
        let rows: Vec<usize> = (0..self.n_sub).filter(|&s| m.valid[s]).collect();
        if rows.len() < n_terms {
            return Err(Error::RankDeficient(format!(
                "{} valid subapertures for {n_terms} terms",
                rows.len()
            )));
        }
        let k = n_terms - 1;
        let nr = rows.len();
        let a = DMatrix::from_fn(2 * nr, k, |r, t| {
            let s = rows[r % nr];
            if r < nr {
                self.interaction[(s, t)]
            } else {
                self.interaction[(self.n_sub + s, t)]
            }
        });
        let b = DVector::from_fn(2 * nr, |r, _| {
            let s = rows[r % nr];
            if r < nr {
                m.slopes_x[s]
            } else {
                m.slopes_y[s]
            }
        });
        let svd = SVD::new(a, true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin > RANK_TOLERANCE * smax) {
            return Err(Error::RankDeficient(format!(
                "slope system condition {:.3e}",
                smax / smin
            )));
        }
        let x = svd
            .solve(&b, 0.0)
            .map_err(|e| Error::RankDeficient(e.to_string()))?;
        let mut coeffs = vec![0.0; n_terms];
        coeffs[1..].copy_from_slice(x.as_slice());
        ZernikeCoeffs::from_vec(coeffs)
    }
}

pub fn wfs_measure(beacon: &ComplexField, cfg: &WfsConfig, seed: u64) -> Result<WfsMeasurement> {
    ShackHartmann::new(cfg, &beacon.grid)?.measure(beacon, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmConfig {
    /// Actuators per side; the four corners are absent.
    pub n_act: usize,
    /// Actuator spacing in meters.
    pub pitch: f64,
    /// Surface height at a neighbouring actuator for a unit poke.
    pub coupling: f64,
    /// Command limit in radians of phase.
    pub stroke_limit: f64,
}

impl DmConfig {
    /// Actuator grid whose outer rows sit on the pupil edge.
    pub fn spanning(n_act: usize, pupil_diameter: f64, coupling: f64, stroke_limit: f64) -> Result<Self> {
        let cfg = DmConfig {
            n_act,
            pitch: pupil_diameter / (n_act as f64 - 1.0),
            coupling,
            stroke_limit,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_act < 3 {
            return Err(Error::param("DM needs at least 3 actuators per side"));
        }
        if !(self.pitch > 0.0) {
            return Err(Error::param("DM pitch must be positive"));
        }
        if !(self.coupling > 0.0 && self.coupling < 1.0) {
            return Err(Error::param("DM coupling must lie in (0, 1)"));
        }
        if !(self.stroke_limit > 0.0) {
            return Err(Error::param("DM stroke limit must be positive"));
        }
        Ok(())
    }

    pub fn actuator_count(&self) -> usize {
        self.n_act * self.n_act - 4
    }

    /// Width of the actuator grid, corner to corner along an axis.
    pub fn footprint(&self) -> f64 {
        (self.n_act as f64 - 1.0) * self.pitch
    }

    /// Gaussian width giving `coupling` at one pitch.
    pub fn influence_sigma(&self) -> f64 {
        self.pitch / (2.0 * (1.0 / self.coupling).ln()).sqrt()
    }

    /// Actuator centres, row-major with corners skipped.
    pub fn positions(&self) -> Vec<(f64, f64)> {
        let n = self.n_act;
        let mid = (n as f64 - 1.0) / 2.0;
        let mut out = Vec::with_capacity(self.actuator_count());
        for a in 0..n {
            for b in 0..n {
                let corner = (a == 0 || a == n - 1) && (b == 0 || b == n - 1);
                if !corner {
                    out.push(((b as f64 - mid) * self.pitch, (a as f64 - mid) * self.pitch));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmState {
    /// Per-actuator phase amplitude in radians.
    pub commands: Vec<f64>,
    pub saturated: Vec<bool>,
}

impl DmState {
    pub fn zeros(cfg: &DmConfig) -> Self {
        DmState {
            commands: vec![0.0; cfg.actuator_count()],
            saturated: vec![false; cfg.actuator_count()],
        }
    }

    /// Clamp to `±stroke_limit`, flagging clipped actuators.
    pub fn clamped(commands: Vec<f64>, stroke_limit: f64) -> Self {
        let saturated = commands.iter().map(|c| c.abs() >= stroke_limit).collect();
        let commands = commands
            .into_iter()
            .map(|c| c.clamp(-stroke_limit, stroke_limit))
            .collect();
        DmState { commands, saturated }
    }

    pub fn saturated_count(&self) -> usize {
        self.saturated.iter().filter(|&&s| s).count()
    }
}

/// Superposition of Gaussian influence functions, truncated at 6σ.
pub fn dm_surface(state: &DmState, cfg: &DmConfig, grid: &GridSpec) -> Result<RealMap> {
    cfg.validate()?;
    if state.commands.len() != cfg.actuator_count() {
        return Err(Error::param(format!(
            "{} commands for {} actuators",
            state.commands.len(),
            cfg.actuator_count()
        )));
    }
    let sigma = cfg.influence_sigma();
    let reach = 6.0 * sigma;
    let n = grid.n;
    let c = grid.coords();
    let pitch = grid.pitch();
    let index = |v: f64| ((v / pitch) + (n / 2) as f64).floor();
    let mut out = RealMap::zeros(*grid);
    for (&(xa, ya), &cmd) in cfg.positions().iter().zip(&state.commands) {
        if cmd == 0.0 {
            continue;
        }
        let j0 = index(xa - reach).max(0.0) as usize;
        let j1 = (index(xa + reach) + 1.0).clamp(0.0, n as f64) as usize;
        let i0 = index(ya - reach).max(0.0) as usize;
        let i1 = (index(ya + reach) + 1.0).clamp(0.0, n as f64) as usize;
        let gx: Vec<f64> = (j0..j1)
            .map(|j| (-(c[j] - xa).powi(2) / (2.0 * sigma * sigma)).exp())
            .collect();
        for i in i0..i1 {
            let gy = cmd * (-(c[i] - ya).powi(2) / (2.0 * sigma * sigma)).exp();
            for (jj, j) in (j0..j1).enumerate() {
                out.data[[i, j]] += gy * gx[jj];
            }
        }
    }
    Ok(out)
}

/// Influence matrix over one pupil and its truncated pseudo-inverse.
#[derive(Debug, Clone)]
pub struct DeformableMirror {
    pub cfg: DmConfig,
    pub grid: GridSpec,
    pub pupil: Aperture,
    pixels: Vec<usize>,
    fit: DMatrix<f64>,
}

impl DeformableMirror {
    pub fn new(cfg: &DmConfig, grid: &GridSpec, pupil: &Aperture) -> Result<Self> {
        cfg.validate()?;
        pupil.validate()?;
        let reach = pupil.radius() + pupil.center_offset.0.abs().max(pupil.center_offset.1.abs());
        if 0.5 * cfg.footprint() + 1e-12 < reach {
            return Err(Error::param(format!(
                "pupil of diameter {} m extends beyond the {} m actuator footprint",
                pupil.diameter,
                cfg.footprint()
            )));
        }
        let mask = pupil.mask(grid);
        let pixels: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(k, &m)| m.then_some(k))
            .collect();
        if pixels.is_empty() {
            return Err(Error::DegeneratePupil("DM pupil holds no samples".into()));
        }
        let sigma = cfg.influence_sigma();
        let c = grid.coords();
        let n = grid.n;
        let pos = cfg.positions();
        let infl = DMatrix::from_fn(pixels.len(), pos.len(), |p, a| {
            let k = pixels[p];
            let (dx, dy) = (c[k % n] - pos[a].0, c[k / n] - pos[a].1);
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        });
        let svd = SVD::new(infl, true, true);
        let cutoff = DM_SVD_CUTOFF * svd.singular_values.max();
        let fit = svd
            .pseudo_inverse(cutoff)
            .map_err(|e| Error::RankDeficient(e.to_string()))?;
        Ok(DeformableMirror {
            cfg: *cfg,
            grid: *grid,
            pupil: *pupil,
            pixels,
            fit,
        })
    }

    /// Unclamped least-squares commands for `target` over the pupil.
    pub fn solve(&self, target: &RealMap) -> Result<Vec<f64>> {
        self.grid.ensure_same(&target.grid)?;
        let flat = target.data.as_slice().expect("standard layout");
        let v = DVector::from_iterator(self.pixels.len(), self.pixels.iter().map(|&k| flat[k]));
        Ok((&self.fit * v).iter().copied().collect())
    }

    pub fn fit(&self, target: &RealMap) -> Result<DmState> {
        Ok(DmState::clamped(self.solve(target)?, self.cfg.stroke_limit))
    }

    pub fn surface(&self, state: &DmState) -> Result<RealMap> {
        dm_surface(state, &self.cfg, &self.grid)
    }
}

pub fn dm_fit(target: &RealMap, cfg: &DmConfig, pupil: &Aperture) -> Result<DmState> {
    DeformableMirror::new(cfg, &target.grid, pupil)?.fit(target)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadCellConfig {
    /// 1/e² radius of the beam the detector is calibrated for.
    pub beam_radius: f64,
    /// Additive position noise in meters.
    #[serde(default)]
    pub noise_rms: f64,
}

/// Quadrant-difference position estimate. The normalized difference of a
/// Gaussian spot is `erf(√2·x/w)`; its small-signal inverse
/// `x ≈ Δ·√π·w/(2√2)` is used, which saturates at `0.627·w`.
pub fn quadcell_measure(beam: &ComplexField, cfg: &QuadCellConfig, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    quadcell_measure_with(beam, cfg, &mut rng)
}

pub fn quadcell_measure_with(
    beam: &ComplexField,
    cfg: &QuadCellConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    if !(cfg.beam_radius > 0.0) {
        return Err(Error::param("quad-cell beam radius must be positive"));
    }
    let c = beam.grid.coords();
    let side = |v: f64| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let (mut total, mut dx, mut dy) = (0.0, 0.0, 0.0);
    for ((i, j), v) in beam.data.indexed_iter() {
        let p = v.norm_sqr();
        total += p;
        dx += side(c[j]) * p;
        dy += side(c[i]) * p;
    }
    if !(total > 0.0) {
        return Err(Error::ZeroPower("quad-cell input"));
    }
    let k = PI.sqrt() * cfg.beam_radius / (2.0 * 2f64.sqrt());
    let mut est = (k * dx / total, k * dy / total);
    if cfg.noise_rms > 0.0 {
        est.0 += cfg.noise_rms * rng.sample::<f64, _>(StandardNormal);
        est.1 += cfg.noise_rms * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(est)
}

/// Integrator update `state ← state − gain·measured`.
pub fn tip_tilt_step(measured: (f64, f64), state: (f64, f64), gain: f64) -> (f64, f64) {
    (state.0 - gain * measured.0, state.1 - gain * measured.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    pub gain: f64,
    pub loop_rate: f64,
    pub latency_frames: usize,
    pub tip_tilt_gain: f64,
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0 && self.gain <= 1.0) {
            return Err(Error::param("loop gain must lie in (0, 1]"));
        }
        if !(self.tip_tilt_gain > 0.0 && self.tip_tilt_gain <= 1.0) {
            return Err(Error::param("tip-tilt gain must lie in (0, 1]"));
        }
        if !(self.loop_rate > 0.0) {
            return Err(Error::param("loop rate must be positive"));
        }
        if self.latency_frames < 1 {
            return Err(Error::param("latency must be at least one frame"));
        }
        Ok(())
    }
}

/// What the fast steering stage corrects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SteeringMode {
    /// No steering stage; the DM takes tip and tilt.
    None,
    /// Beam position from a quad-cell, corrected by translation.
    #[default]
    Position,
    /// Wavefront tip and tilt from the WFS, corrected by a phase ramp.
    Angle,
    /// Position and angle stages in series.
    Both,
}

impl SteeringMode {
    fn corrects_angle(self) -> bool {
        matches!(self, SteeringMode::Angle | SteeringMode::Both)
    }

    fn corrects_position(self) -> bool {
        matches!(self, SteeringMode::Position | SteeringMode::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AoConfig {
    pub wfs: WfsConfig,
    /// `None` runs the steering stage alone.
    pub dm: Option<DmConfig>,
    #[serde(rename = "loop")]
    pub control: LoopConfig,
    pub steering: SteeringMode,
    pub quadcell: QuadCellConfig,
}

impl AoConfig {
    pub fn validate(&self) -> Result<()> {
        self.wfs.validate()?;
        self.control.validate()?;
        if let Some(dm) = &self.dm {
            dm.validate()?;
        }
        if (self.control.loop_rate - self.wfs.frame_rate).abs() > 1e-9 * self.wfs.frame_rate {
            return Err(Error::param(format!(
                "loop rate {} Hz differs from WFS frame rate {} Hz",
                self.control.loop_rate, self.wfs.frame_rate
            )));
        }
        if self.steering.corrects_angle() && self.wfs.n_terms < 3 {
            return Err(Error::param("angle steering needs Z2 and Z3 in the reconstruction"));
        }
        if self.dm.is_none() && self.steering == SteeringMode::None {
            return Err(Error::param("AO configuration corrects nothing"));
        }
        Ok(())
    }

    /// Frames covering `duration` seconds at the loop rate.
    pub fn frames_for(&self, duration: f64) -> usize {
        (duration * self.control.loop_rate).round().max(0.0) as usize
    }

    fn dm_first_term(&self) -> usize {
        if self.steering.corrects_angle() {
            4
        } else {
            2
        }
    }
}

/// Correction applied to every field leaving the channel during one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub dm: Option<DmState>,
    /// DM phase in radians; `None` when flat.
    pub dm_phase: Option<RealMap>,
    /// Steering translation in meters.
    pub position: (f64, f64),
    /// Steering ramp as Z2/Z3 amplitudes over the sensing pupil.
    pub angle: (f64, f64),
    pub pupil_radius: f64,
}

impl Correction {
    pub fn identity(pupil_radius: f64) -> Self {
        Correction {
            dm: None,
            dm_phase: None,
            position: (0.0, 0.0),
            angle: (0.0, 0.0),
            pupil_radius,
        }
    }

    pub fn saturated_count(&self) -> usize {
        self.dm.as_ref().map_or(0, DmState::saturated_count)
    }

    pub fn apply(&self, f: &ComplexField) -> Result<ComplexField> {
        let mut out = if self.position != (0.0, 0.0) {
            f.translate(self.position.0, self.position.1)
        } else {
            f.clone()
        };
        if let Some(p) = &self.dm_phase {
            out.apply_phase(p)?;
        }
        if self.angle != (0.0, 0.0) {
            let c = out.grid.coords();
            let k = 2.0 / self.pupil_radius;
            for ((i, j), v) in out.data.indexed_iter_mut() {
                let ph = k * (self.angle.0 * c[j] + self.angle.1 * c[i]);
                *v *= Complex64::from_polar(1.0, ph);
            }
        }
        Ok(out)
    }
}

/// Noise-free modal fit of a field's phase from wrapped neighbour
/// differences over the pupil.
#[derive(Debug, Clone)]
pub struct PhaseGradientFit {
    pub grid: GridSpec,
    pairs: Vec<(usize, usize)>,
    design: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    n_terms: usize,
}

impl PhaseGradientFit {
    pub fn new(grid: &GridSpec, pupil: &Aperture, n_terms: usize) -> Result<Self> {
        if n_terms < 2 {
            return Err(Error::param("gradient fit needs at least 2 terms"));
        }
        let mask = pupil.mask(grid);
        let flat = mask.as_slice().expect("standard layout");
        let n = grid.n;
        let mut pairs = Vec::new();
        for k in 0..n * n {
            if !flat[k] {
                continue;
            }
            if k % n + 1 < n && flat[k + 1] {
                pairs.push((k, k + 1));
            }
            if k + n < n * n && flat[k + n] {
                pairs.push((k, k + n));
            }
        }
        let mut design = DMatrix::zeros(pairs.len(), n_terms - 1);
        for t in 2..=n_terms {
            let z = zernike_eval_on(t, grid, pupil)?;
            let zf = z.data.as_slice().expect("standard layout");
            for (r, &(a, b)) in pairs.iter().enumerate() {
                design[(r, t - 2)] = zf[b] - zf[a];
            }
        }
        let chol = Cholesky::new(design.tr_mul(&design))
            .ok_or_else(|| Error::RankDeficient("pupil too small for the gradient fit".into()))?;
        Ok(PhaseGradientFit {
            grid: *grid,
            pairs,
            design,
            chol,
            n_terms,
        })
    }

    pub fn fit(&self, f: &ComplexField) -> Result<ZernikeCoeffs> {
        self.grid.ensure_same(&f.grid)?;
        let u = f.data.as_slice().expect("standard layout");
        let d = DVector::from_iterator(
            self.pairs.len(),
            self.pairs.iter().map(|&(a, b)| (u[a].conj() * u[b]).arg()),
        );
        let x = self.chol.solve(&self.design.tr_mul(&d));
        let mut coeffs = vec![0.0; self.n_terms];
        coeffs[1..].copy_from_slice(x.as_slice());
        ZernikeCoeffs::from_vec(coeffs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub frame: usize,
    pub time_s: f64,
    pub residual_rms_rad: f64,
    pub centroid_x_m: f64,
    pub centroid_y_m: f64,
    pub saturated_actuators: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Telemetry {
    pub rows: Vec<TelemetryRow>,
    /// Residual Zernike coefficients of the corrected beacon, per frame.
    pub residual_coeffs: Vec<ZernikeCoeffs>,
}

impl Telemetry {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<TelemetryRow>> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        r.deserialize().map(|row| row.map_err(csv_err)).collect()
    }

    /// Mean residual over the frames from `from` on.
    pub fn mean_residual_from(&self, from: usize) -> f64 {
        let tail: Vec<f64> = self.rows.iter().skip(from).map(|r| r.residual_rms_rad).collect();
        if tail.is_empty() {
            0.0
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        }
    }

    pub fn max_saturation(&self) -> usize {
        self.rows.iter().map(|r| r.saturated_actuators).max().unwrap_or(0)
    }
}

/// Stateful single-conjugate AO loop. A correction computed from the
/// measurement at frame `k` is applied from frame `k + latency_frames`.
#[derive(Debug, Clone)]
pub struct AoController {
    pub cfg: AoConfig,
    sensor: ShackHartmann,
    mirror: Option<DeformableMirror>,
    modes: ZernikeBasis,
    telemetry_fit: PhaseGradientFit,
    commands: Vec<f64>,
    position: (f64, f64),
    angle: (f64, f64),
    pending: VecDeque<(usize, Correction)>,
    active: Correction,
    rng: ChaCha8Rng,
    frame: usize,
}

impl AoController {
    pub fn new(cfg: &AoConfig, grid: &GridSpec, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let pupil = cfg.wfs.pupil();
        let sensor = ShackHartmann::new(&cfg.wfs, grid)?;
        let mirror = cfg
            .dm
            .as_ref()
            .map(|dm| DeformableMirror::new(dm, grid, &pupil))
            .transpose()?;
        let modes = ZernikeBasis::new(grid, &pupil, cfg.wfs.n_terms)?;
        let telemetry_fit = PhaseGradientFit::new(grid, &pupil, TELEMETRY_TERMS)?;
        let commands = cfg.dm.map_or(Vec::new(), |dm| vec![0.0; dm.actuator_count()]);
        Ok(AoController {
            cfg: *cfg,
            sensor,
            mirror,
            modes,
            telemetry_fit,
            commands,
            position: (0.0, 0.0),
            angle: (0.0, 0.0),
            pending: VecDeque::new(),
            active: Correction::identity(pupil.radius()),
            rng: ChaCha8Rng::seed_from_u64(seed),
            frame: 0,
        })
    }

    /// Correction in force for the frame most recently stepped.
    pub fn active(&self) -> &Correction {
        &self.active
    }

    pub fn sensor(&self) -> &ShackHartmann {
        &self.sensor
    }

    /// Run one frame on the uncorrected beacon: apply the correction due
    /// this frame, record telemetry, measure and schedule the next command.
    pub fn step(&mut self, raw_beacon: &ComplexField) -> Result<(TelemetryRow, ZernikeCoeffs)> {
        let k = self.frame;
        while self.pending.front().is_some_and(|(due, _)| *due <= k) {
            self.active = self.pending.pop_front().expect("checked non-empty").1;
        }
        let corrected = self.active.apply(raw_beacon)?;
        let residual = self.telemetry_fit.fit(&corrected)?;
        let (cx, cy) = centroid(&corrected)?;
        let row = TelemetryRow {
            frame: k,
            time_s: k as f64 / self.cfg.control.loop_rate,
            residual_rms_rad: residual.rms(),
            centroid_x_m: cx,
            centroid_y_m: cy,
            saturated_actuators: self.active.saturated_count(),
        };

        let g = self.cfg.control.gain;
        let g_tt = self.cfg.control.tip_tilt_gain;
        if self.cfg.steering.corrects_position() {
            let measured = quadcell_measure_with(&corrected, &self.cfg.quadcell, &mut self.rng)?;
            self.position = tip_tilt_step(measured, self.position, g_tt);
        }
        let m = self.sensor.measure_with(&corrected, &mut self.rng)?;
        let est = self.sensor.reconstruct(&m, self.cfg.wfs.n_terms)?;
        if self.cfg.steering.corrects_angle() {
            self.angle = tip_tilt_step((est.get(2), est.get(3)), self.angle, g_tt);
        }
        let mut next = Correction {
            dm: None,
            dm_phase: None,
            position: self.position,
            angle: self.angle,
            pupil_radius: self.active.pupil_radius,
        };
        if let Some(mirror) = &self.mirror {
            let mut target = ZernikeCoeffs::zeros(est.n_terms());
            for j in self.cfg.dm_first_term()..=est.n_terms() {
                target.set(j, -est.get(j));
            }
            let target_map = self.modes.reconstruct(&target);
            let delta = mirror.solve(&target_map)?;
            let stroke = mirror.cfg.stroke_limit;
            let raw: Vec<f64> = self.commands.iter().zip(&delta).map(|(c, d)| c + g * d).collect();
            let state = DmState::clamped(raw, stroke);
            self.commands = state.commands.clone();
            next.dm_phase = Some(mirror.surface(&state)?);
            next.dm = Some(state);
        }
        self.pending.push_back((k + self.cfg.control.latency_frames, next));
        self.frame += 1;
        Ok((row, residual))
    }
}

/// Drive the loop for `frames` frames. `beacon(k)` yields the uncorrected
/// beacon at the sensor for frame `k`; `on_frame(k, correction)` receives
/// the correction in force during that frame.
pub fn run_closed_loop(
    cfg: &AoConfig,
    grid: &GridSpec,
    frames: usize,
    seed: u64,
    mut beacon: impl FnMut(usize) -> Result<ComplexField>,
    mut on_frame: impl FnMut(usize, &Correction) -> Result<()>,
) -> Result<Telemetry> {
    let mut ctrl = AoController::new(cfg, grid, seed)?;
    let mut tel = Telemetry::default();
    for k in 0..frames {
        let b = beacon(k)?;
        let (row, coeffs) = ctrl.step(&b)?;
        on_frame(k, ctrl.active())?;
        tel.rows.push(row);
        tel.residual_coeffs.push(coeffs);
    }
    Ok(tel)
}
