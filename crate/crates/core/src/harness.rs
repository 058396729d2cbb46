//! Scenario assembly, end-to-end Monte Carlo runs and report output.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Zip;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ao::{AoConfig, AoController, DmConfig, LoopConfig, QuadCellConfig, SteeringMode, TelemetryRow, WfsConfig};
use crate::error::{Error, Result};
use crate::field::{apply_aperture, power, propagate, Aperture, ComplexField, GridSpec};
use crate::modes::{build_space, oam_field, BasisKind, EncodingSpace, HybridSpace};
use crate::security::{
    amplitude_matrix, ang_crosstalk, fidelity, fidelity_threshold, oam_crosstalk, CrosstalkMatrix, FidelityStats,
};
use crate::turbulence::{evolve_screen, make_layers, PhaseScreen, TurbulenceParams};

pub const PRESETS: [&str; 2] = ["lab", "campus"];

const HENE: f64 = 633e-9;
const REL_TOL: f64 = 1e-9;

const NOTE: &str = "Simulated fidelities assume ideal optics and detectors; measured values also \
include modulator efficiency, alignment drift and detector effects, so only trends compare directly.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathElement {
    Propagate { distance: f64 },
    /// Apply turbulence layer `layer`.
    Screen { layer: usize },
    Aperture(Aperture),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    Spatial(EncodingSpace),
    Hybrid(HybridSpace),
}

impl Encoding {
    pub fn spatial(&self) -> &EncodingSpace {
        match self {
            Encoding::Spatial(s) => s,
            Encoding::Hybrid(h) => &h.spatial,
        }
    }

    pub fn pol_fidelity(&self) -> Option<f64> {
        match self {
            Encoding::Spatial(_) => None,
            Encoding::Hybrid(h) => Some(h.pol_fidelity),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Encoding::Spatial(s) => s.validate(),
            Encoding::Hybrid(h) => h.validate(),
        }
    }
}

/// Admissible ranges attached to a preset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioLimits {
    #[serde(default)]
    pub cn2: Option<(f64, f64)>,
    #[serde(default)]
    pub d_over_r0: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkScenario {
    pub name: String,
    pub grid: GridSpec,
    /// Waist of the Gaussian beacon launched with the signal.
    pub tx_waist: f64,
    pub path: Vec<PathElement>,
    /// Stated link length; the propagation distances must add up to it.
    pub link_length: f64,
    /// Diameter `D` used when quoting D/r₀.
    pub reference_diameter: f64,
    pub turbulence: TurbulenceParams,
    pub encoding: Encoding,
    pub ao: Option<AoConfig>,
    pub n_realizations: usize,
    pub frames_per_realization: usize,
    /// Frames run before crosstalk is recorded, so the loop can converge.
    #[serde(default)]
    pub warmup_frames: usize,
    pub frame_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub limits: ScenarioLimits,
    /// Fresnel number product of the real link, for reference only.
    #[serde(default)]
    pub nominal_fresnel_number: Option<f64>,
}

impl LinkScenario {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.tx_waist > 0.0) {
            return Err(Error::param("beacon waist must be positive"));
        }
        if !(self.reference_diameter > 0.0) {
            return Err(Error::param("reference diameter must be positive"));
        }
        let mut total = 0.0;
        let mut seen = vec![0usize; self.turbulence.n_screens];
        for el in &self.path {
            match el {
                PathElement::Propagate { distance } => {
                    if !(*distance >= 0.0) {
                        return Err(Error::param("propagation distances must be non-negative"));
                    }
                    total += distance;
                }
                PathElement::Screen { layer } => {
                    *seen.get_mut(*layer).ok_or_else(|| {
                        Error::param(format!("screen layer {layer} beyond {} layers", self.turbulence.n_screens))
                    })? += 1;
                }
                PathElement::Aperture(a) => a.validate()?,
            }
        }
        if (total - self.link_length).abs() > REL_TOL * self.link_length.max(1.0) {
            return Err(Error::param(format!(
                "path distances sum to {total} m, link length is {} m",
                self.link_length
            )));
        }
        if let Some(l) = seen.iter().position(|&c| c != 1) {
            return Err(Error::param(format!("layer {l} referenced {} times, expected once", seen[l])));
        }
        self.turbulence.validate()?;
        if (self.turbulence.wavelength - self.grid.wavelength).abs() > REL_TOL * self.grid.wavelength {
            return Err(Error::param("turbulence and grid wavelengths differ"));
        }
        self.encoding.validate()?;
        if !(self.frame_rate > 0.0) {
            return Err(Error::param("frame rate must be positive"));
        }
        if let Some(ao) = &self.ao {
            ao.validate()?;
            if (ao.control.loop_rate - self.frame_rate).abs() > REL_TOL * self.frame_rate {
                return Err(Error::param("AO loop rate must equal the scenario frame rate"));
            }
        }
        if self.n_realizations > 0 && self.frames_per_realization <= self.warmup_frames {
            return Err(Error::param("frames_per_realization must exceed warmup_frames"));
        }
        if self.turbulence.cn2 > 0.0 {
            if let Some((lo, hi)) = self.limits.cn2 {
                let c = self.turbulence.cn2;
                if c < lo * (1.0 - REL_TOL) || c > hi * (1.0 + REL_TOL) {
                    return Err(Error::param(format!("Cn² {c:e} outside [{lo:e}, {hi:e}]")));
                }
            }
            if let Some((lo, hi)) = self.limits.d_over_r0 {
                let x = self.d_over_r0()?;
                if x < lo * (1.0 - 1e-6) || x > hi * (1.0 + 1e-6) {
                    return Err(Error::param(format!("D/r0 {x} outside [{lo}, {hi}]")));
                }
            }
        }
        Ok(())
    }

    /// Path Fried parameter; `None` for a calm path.
    pub fn r0(&self) -> Result<Option<f64>> {
        if self.turbulence.cn2 == 0.0 {
            Ok(None)
        } else {
            self.turbulence.r0().map(Some)
        }
    }

    pub fn d_over_r0(&self) -> Result<f64> {
        Ok(self.r0()?.map_or(0.0, |r0| self.reference_diameter / r0))
    }

    /// Set Cn² so that `reference_diameter / r₀ = x`; zero gives a calm path.
    pub fn with_d_over_r0(&self, x: f64) -> Result<Self> {
        if !(x >= 0.0 && x.is_finite()) {
            return Err(Error::param(format!("D/r0 {x} must be finite and >= 0")));
        }
        let mut s = self.clone();
        s.turbulence = if x == 0.0 {
            TurbulenceParams { cn2: 0.0, ..s.turbulence }
        } else {
            s.turbulence.with_r0(self.reference_diameter / x)?
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_cn2(&self, cn2: f64) -> Result<Self> {
        let mut s = self.clone();
        s.turbulence.cn2 = cn2;
        s.validate()?;
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: LinkScenario = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "scenario".into(),
            source,
        })?;
        s.validate()?;
        Ok(s)
    }

    /// A preset name, or a path to a scenario JSON file.
    pub fn load(spec: &str) -> Result<Self> {
        if PRESETS.contains(&spec) {
            return preset(spec);
        }
        let path = Path::new(spec);
        if !path.exists() {
            return Err(Error::UnknownPreset(spec.to_string()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        LinkScenario::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}

/// Built-in scenarios. `lab` is a short bench link with a four-pass
/// turbulence cell and a 6×6 DM; `campus` is a 340 m link with five
/// distributed layers, a 7.62 cm collection aperture and a 12×12 DM.
pub fn preset(name: &str) -> Result<LinkScenario> {
    let s = match name {
        "lab" => lab_preset()?,
        "campus" => campus_preset()?,
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    s.validate()?;
    Ok(s)
}

fn lab_preset() -> Result<LinkScenario> {
    let grid = GridSpec::new(256, 0.04, HENE)?;
    let waist = 1.6e-3;
    let pupil = 9e-3;
    let frame_rate = 100.0;
    let reference_diameter = 2.0 * waist;
    let turbulence = TurbulenceParams {
        cn2: 0.0,
        path_length: 2.5,
        wavelength: HENE,
        wind_velocity: (0.05, 0.0),
        n_screens: 4,
        outer_scale: None,
        subharmonic_levels: 0,
    }
    .with_r0(reference_diameter / 0.884)?;
    let mut path = vec![PathElement::Propagate { distance: 1.5 }];
    path.extend((0..4).map(|layer| PathElement::Screen { layer }));
    path.push(PathElement::Propagate { distance: 1.0 });
    Ok(LinkScenario {
        name: "lab".into(),
        grid,
        tx_waist: 6e-3,
        path,
        link_length: 2.5,
        reference_diameter,
        turbulence,
        encoding: Encoding::Spatial(build_space(2, 1, waist, BasisKind::Oam)?),
        ao: Some(AoConfig {
            wfs: WfsConfig {
                n_lenslets: 23,
                n_terms: 15,
                frame_rate,
                slope_noise_rms: 0.02,
                reference_rate: frame_rate,
                pupil_diameter: pupil,
                validity_threshold: crate::ao::VALIDITY_THRESHOLD,
            },
            dm: Some(DmConfig::spanning(6, pupil, 0.15, 20.0)?),
            control: LoopConfig {
                gain: 0.3,
                loop_rate: frame_rate,
                latency_frames: 1,
                tip_tilt_gain: 0.3,
            },
            steering: SteeringMode::Position,
            quadcell: QuadCellConfig {
                beam_radius: 6e-3,
                noise_rms: 0.0,
            },
        }),
        n_realizations: 50,
        frames_per_realization: 30,
        warmup_frames: 20,
        frame_rate,
        seed: 1,
        limits: ScenarioLimits {
            cn2: None,
            d_over_r0: Some((0.11, 3.06)),
        },
        nominal_fresnel_number: None,
    })
}

fn campus_preset() -> Result<LinkScenario> {
    let grid = GridSpec::new(512, 0.32, HENE)?;
    let waist = 0.02;
    let collection = 0.0762;
    let frame_rate = 200.0;
    let layer_z = [34.0, 102.0, 170.0, 238.0, 306.0];
    let mut path = Vec::new();
    let mut z = 0.0;
    for (layer, &zl) in layer_z.iter().enumerate() {
        path.push(PathElement::Propagate { distance: zl - z });
        path.push(PathElement::Screen { layer });
        z = zl;
    }
    path.push(PathElement::Propagate { distance: 340.0 - z });
    path.push(PathElement::Aperture(Aperture::centered(collection)?));
    Ok(LinkScenario {
        name: "campus".into(),
        grid,
        tx_waist: waist,
        path,
        link_length: 340.0,
        reference_diameter: collection,
        turbulence: TurbulenceParams {
            cn2: 1.9e-14,
            path_length: 340.0,
            wavelength: HENE,
            wind_velocity: (1.0, 0.0),
            n_screens: 5,
            outer_scale: None,
            subharmonic_levels: 3,
        },
        encoding: Encoding::Spatial(build_space(3, 1, waist, BasisKind::Oam)?),
        ao: Some(AoConfig {
            wfs: WfsConfig {
                n_lenslets: 23,
                n_terms: 15,
                frame_rate,
                slope_noise_rms: 0.02,
                reference_rate: frame_rate,
                pupil_diameter: collection,
                validity_threshold: crate::ao::VALIDITY_THRESHOLD,
            },
            dm: Some(DmConfig::spanning(12, collection, 0.15, 20.0)?),
            control: LoopConfig {
                gain: 0.3,
                loop_rate: frame_rate,
                latency_frames: 1,
                tip_tilt_gain: 0.3,
            },
            steering: SteeringMode::Position,
            quadcell: QuadCellConfig {
                beam_radius: waist,
                noise_rms: 0.0,
            },
        }),
        n_realizations: 4,
        frames_per_realization: 12,
        warmup_frames: 8,
        frame_rate,
        seed: 1,
        limits: ScenarioLimits {
            cn2: Some((5.4e-15, 3.2e-14)),
            d_over_r0: None,
        },
        nominal_fresnel_number: Some(4.89),
    })
}

/// SplitMix64 finalizer, used to derive independent child seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn realization_seeds(s: &LinkScenario, r: usize) -> (u64, u64) {
    let base = mix_seed(s.seed, r as u64);
    (mix_seed(base, 0), mix_seed(base, 1))
}

fn apply_screen(f: &mut ComplexField, screen: &PhaseScreen) -> Result<()> {
    f.grid.ensure_same(&screen.grid)?;
    Zip::from(&mut f.data)
        .and(&screen.phase)
        .for_each(|v, &p| *v *= Complex64::from_polar(1.0, p));
    Ok(())
}

/// Send `input` down the scenario path. `layers` of `None` is the calm
/// channel.
pub fn transmit(s: &LinkScenario, input: &ComplexField, layers: Option<&[PhaseScreen]>) -> Result<ComplexField> {
    let mut f = input.clone();
    for el in &s.path {
        match el {
            PathElement::Propagate { distance } => {
                if *distance > 0.0 {
                    f = propagate(&f, *distance)?;
                }
            }
            PathElement::Screen { layer } => {
                if let Some(ls) = layers {
                    apply_screen(&mut f, &ls[*layer])?;
                }
            }
            PathElement::Aperture(a) => f = apply_aperture(&f, a),
        }
    }
    Ok(f)
}

fn probes(s: &LinkScenario) -> Result<Vec<ComplexField>> {
    let space = s.encoding.spatial();
    space
        .members()
        .iter()
        .map(|&l| oam_field(&space.mode(l), &s.grid))
        .collect()
}

fn layers_at(initial: &[PhaseScreen], t: f64) -> Result<Vec<PhaseScreen>> {
    if t == 0.0 {
        return Ok(initial.to_vec());
    }
    initial.iter().map(|l| evolve_screen(l, t)).collect()
}

/// Crosstalk recorded in one frame of one realization.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub realization: usize,
    pub frame: usize,
    pub oam: CrosstalkMatrix,
    /// `None` when the ANG basis is undefined (spacing > 1).
    pub ang: Option<CrosstalkMatrix>,
    /// Same frame without the AO correction, when AO is configured.
    pub uncorrected: Option<(CrosstalkMatrix, Option<CrosstalkMatrix>)>,
    /// Power reaching the receiver plane per prepared OAM state.
    pub efficiency: Vec<f64>,
}

/// Raw Monte Carlo output, ordered by realization then frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ensemble {
    pub snapshots: Vec<Snapshot>,
    pub telemetry: Vec<Vec<TelemetryRow>>,
}

impl Ensemble {
    pub fn oam_matrices(&self) -> Vec<CrosstalkMatrix> {
        self.snapshots.iter().map(|s| s.oam.clone()).collect()
    }

    pub fn uncorrected_oam_matrices(&self) -> Vec<CrosstalkMatrix> {
        self.snapshots
            .iter()
            .filter_map(|s| s.uncorrected.as_ref().map(|u| u.0.clone()))
            .collect()
    }
}

fn matrices(
    space: &EncodingSpace,
    outputs: &[ComplexField],
    detectors: &[ComplexField],
) -> Result<(CrosstalkMatrix, Option<CrosstalkMatrix>)> {
    let amps = amplitude_matrix(outputs, detectors)?;
    let oam = oam_crosstalk(space, &amps)?;
    let ang = if space.spacing == 1 {
        Some(ang_crosstalk(space, &amps)?)
    } else {
        None
    };
    Ok((oam, ang))
}

fn run_realization(
    s: &LinkScenario,
    r: usize,
    inputs: &[ComplexField],
    ideal: &[ComplexField],
) -> Result<(Vec<Snapshot>, Vec<TelemetryRow>)> {
    let (screen_seed, ao_seed) = realization_seeds(s, r);
    let space = s.encoding.spatial();
    let initial = make_layers(&s.turbulence, &s.grid, screen_seed)?;
    let mut ctrl = s.ao.as_ref().map(|c| AoController::new(c, &s.grid, ao_seed)).transpose()?;
    let beacon = ComplexField::gaussian(s.grid, s.tx_waist, (0.0, 0.0));
    let mut snaps = Vec::new();
    let mut rows = Vec::new();
    for k in 0..s.frames_per_realization {
        let mut frame = || -> Result<Option<Snapshot>> {
            let layers = layers_at(&initial, k as f64 / s.frame_rate)?;
            if let Some(c) = ctrl.as_mut() {
                let b = transmit(s, &beacon, Some(&layers))?;
                rows.push(c.step(&b)?.0);
            }
            if k < s.warmup_frames {
                return Ok(None);
            }
            let raw: Vec<ComplexField> = inputs
                .iter()
                .map(|f| transmit(s, f, Some(&layers)))
                .collect::<Result<_>>()?;
            let efficiency = raw.iter().zip(inputs).map(|(o, i)| power(o) / power(i)).collect();
            let (oam, ang, uncorrected) = match ctrl.as_ref() {
                Some(c) => {
                    let corrected: Vec<ComplexField> =
                        raw.iter().map(|f| c.active().apply(f)).collect::<Result<_>>()?;
                    let (oam, ang) = matrices(space, &corrected, ideal)?;
                    (oam, ang, Some(matrices(space, &raw, ideal)?))
                }
                None => {
                    let (oam, ang) = matrices(space, &raw, ideal)?;
                    (oam, ang, None)
                }
            };
            Ok(Some(Snapshot {
                realization: r,
                frame: k,
                oam,
                ang,
                uncorrected,
                efficiency,
            }))
        };
        let snap = frame().map_err(|e| Error::Frame {
            realization: r,
            frame: k,
            source: Box::new(e),
        })?;
        snaps.extend(snap);
    }
    Ok((snaps, rows))
}

/// Run every realization of `s` and keep the per-frame matrices.
/// Realizations run in parallel; results are gathered in index order.
pub fn simulate(s: &LinkScenario) -> Result<Ensemble> {
    s.validate()?;
    log::info!(
        "{}: {} realizations × {} frames, D/r0 = {:.3}",
        s.name,
        s.n_realizations,
        s.frames_per_realization,
        s.d_over_r0()?
    );
    let inputs = probes(s)?;
    let ideal: Vec<ComplexField> = inputs
        .iter()
        .map(|f| transmit(s, f, None))
        .collect::<Result<_>>()?;
    let parts: Vec<(Vec<Snapshot>, Vec<TelemetryRow>)> = (0..s.n_realizations)
        .into_par_iter()
        .map(|r| run_realization(s, r, &inputs, &ideal))
        .collect::<Result<_>>()?;
    let mut ens = Ensemble::default();
    for (snaps, rows) in parts {
        ens.snapshots.extend(snaps);
        if s.ao.is_some() {
            ens.telemetry.push(rows);
        }
    }
    Ok(ens)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub oam: FidelityStats,
    pub ang: Option<FidelityStats>,
    /// Average of the OAM- and ANG-basis fidelities per snapshot.
    pub mub: Option<FidelityStats>,
    /// Spatial fidelity times the polarization fidelity (hybrid encodings).
    pub joint: Option<FidelityStats>,
    pub crosstalk_oam: Option<CrosstalkMatrix>,
    pub crosstalk_ang: Option<CrosstalkMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeEfficiency {
    pub ell: i32,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: String,
    /// Which statistic decided it: `MUB`, `OAM` or `joint`.
    pub basis: String,
    pub dimension: usize,
    pub threshold: f64,
    pub mean_fidelity: f64,
    pub fraction_above_threshold: f64,
    pub secure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizationTelemetry {
    pub realization: usize,
    pub mean_residual_rms_rad: f64,
    pub max_saturated_actuators: usize,
    pub rows: Vec<TelemetryRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub generated_unix_s: u64,
    pub seed: u64,
    pub scenario: LinkScenario,
    pub d_over_r0: f64,
    pub r0_m: Option<f64>,
    pub dimension: usize,
    pub threshold: f64,
    /// `(realization, frame)` of each entry in the fidelity series.
    pub snapshots: Vec<(usize, usize)>,
    /// With AO when configured.
    pub results: ChannelStats,
    pub uncorrected: Option<ChannelStats>,
    pub efficiency: Vec<ModeEfficiency>,
    pub verdicts: Vec<Verdict>,
    pub telemetry: Vec<RealizationTelemetry>,
    pub note: String,
}

pub(crate) fn mean_std(v: &[f64]) -> (f64, f64) {
    let s = FidelityStats::from_series(v.to_vec(), 0.0);
    (s.mean, s.std)
}

fn channel_stats(
    s: &LinkScenario,
    oam: &[&CrosstalkMatrix],
    ang: &[Option<&CrosstalkMatrix>],
    at: &[(usize, usize)],
) -> Result<ChannelStats> {
    let d = s.encoding.spatial().dimension;
    let th = fidelity_threshold(d)?;
    let annotate = |i: usize, e: Error| Error::Frame {
        realization: at[i].0,
        frame: at[i].1,
        source: Box::new(e),
    };
    let f_oam: Vec<f64> = oam
        .iter()
        .enumerate()
        .map(|(i, m)| fidelity(m).map_err(|e| annotate(i, e)))
        .collect::<Result<_>>()?;
    let has_ang = s.encoding.spatial().spacing == 1;
    let f_ang: Option<Vec<f64>> = has_ang
        .then(|| {
            ang.iter()
                .enumerate()
                .map(|(i, m)| {
                    let m = m.ok_or_else(|| Error::param("missing ANG matrix"))?;
                    fidelity(m).map_err(|e| annotate(i, e))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .transpose()?;
    let f_mub: Option<Vec<f64>> = f_ang
        .as_ref()
        .map(|fa| f_oam.iter().zip(fa).map(|(a, b)| 0.5 * (a + b)).collect());
    let joint = s
        .encoding
        .pol_fidelity()
        .map(|pf| -> Result<FidelityStats> {
            let spatial = f_mub.as_ref().unwrap_or(&f_oam);
            Ok(FidelityStats::from_series(
                spatial.iter().map(|f| f * pf).collect(),
                fidelity_threshold(2 * d)?,
            ))
        })
        .transpose()?;
    let owned_oam: Vec<CrosstalkMatrix> = oam.iter().map(|m| (*m).clone()).collect();
    let owned_ang: Vec<CrosstalkMatrix> = ang.iter().filter_map(|m| m.cloned()).collect();
    Ok(ChannelStats {
        oam: FidelityStats::from_series(f_oam, th),
        ang: f_ang.map(|v| FidelityStats::from_series(v, th)),
        mub: f_mub.map(|v| FidelityStats::from_series(v, th)),
        joint,
        crosstalk_oam: CrosstalkMatrix::mean(&owned_oam).ok(),
        crosstalk_ang: CrosstalkMatrix::mean(&owned_ang).ok(),
    })
}

fn verdict(s: &LinkScenario, label: &str, st: &ChannelStats) -> Result<Verdict> {
    let d = s.encoding.spatial().dimension;
    let (basis, dimension, stats) = match (&st.joint, &st.mub) {
        (Some(j), _) => ("joint", 2 * d, j),
        (None, Some(m)) => ("MUB", d, m),
        (None, None) => ("OAM", d, &st.oam),
    };
    let threshold = fidelity_threshold(dimension)?;
    Ok(Verdict {
        label: label.into(),
        basis: basis.into(),
        dimension,
        threshold,
        mean_fidelity: stats.mean,
        fraction_above_threshold: stats.fraction_above_threshold,
        secure: !stats.series.is_empty() && stats.mean > threshold,
    })
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Aggregate an ensemble into a report.
pub fn summarize(s: &LinkScenario, ens: &Ensemble) -> Result<RunReport> {
    let space = s.encoding.spatial();
    let at: Vec<(usize, usize)> = ens.snapshots.iter().map(|p| (p.realization, p.frame)).collect();
    let oam: Vec<&CrosstalkMatrix> = ens.snapshots.iter().map(|p| &p.oam).collect();
    let ang: Vec<Option<&CrosstalkMatrix>> = ens.snapshots.iter().map(|p| p.ang.as_ref()).collect();
    let results = channel_stats(s, &oam, &ang, &at)?;
    let uncorrected = if s.ao.is_some() {
        let u: Vec<&(CrosstalkMatrix, Option<CrosstalkMatrix>)> =
            ens.snapshots.iter().filter_map(|p| p.uncorrected.as_ref()).collect();
        let uo: Vec<&CrosstalkMatrix> = u.iter().map(|x| &x.0).collect();
        let ua: Vec<Option<&CrosstalkMatrix>> = u.iter().map(|x| x.1.as_ref()).collect();
        Some(channel_stats(s, &uo, &ua, &at)?)
    } else {
        None
    };
    let efficiency = space
        .members()
        .iter()
        .enumerate()
        .map(|(i, &ell)| {
            let v: Vec<f64> = ens.snapshots.iter().map(|p| p.efficiency[i]).collect();
            let (mean, std) = mean_std(&v);
            ModeEfficiency { ell, mean, std }
        })
        .collect();
    let mut verdicts = Vec::new();
    if let Some(u) = &uncorrected {
        verdicts.push(verdict(s, "without-ao", u)?);
        verdicts.push(verdict(s, "with-ao", &results)?);
    } else {
        verdicts.push(verdict(s, "without-ao", &results)?);
    }
    let telemetry = ens
        .telemetry
        .iter()
        .enumerate()
        .map(|(r, rows)| {
            let tail: Vec<f64> = rows
                .iter()
                .skip(s.warmup_frames)
                .map(|x| x.residual_rms_rad)
                .collect();
            RealizationTelemetry {
                realization: r,
                mean_residual_rms_rad: mean_std(&tail).0,
                max_saturated_actuators: rows.iter().map(|x| x.saturated_actuators).max().unwrap_or(0),
                rows: rows.clone(),
            }
        })
        .collect();
    let dimension = space.dimension;
    Ok(RunReport {
        generated_unix_s: now_unix(),
        seed: s.seed,
        scenario: s.clone(),
        d_over_r0: s.d_over_r0()?,
        r0_m: s.r0()?,
        dimension,
        threshold: fidelity_threshold(dimension)?,
        snapshots: at,
        results,
        uncorrected,
        efficiency,
        verdicts,
        telemetry,
        note: NOTE.into(),
    })
}

pub fn run_scenario(s: &LinkScenario) -> Result<RunReport> {
    let ens = simulate(s)?;
    summarize(s, &ens)
}

/// Fraction of mode `ell`'s power reaching the receiver plane, over the
/// initial turbulence draw of each realization, with no correction.
pub fn mode_efficiency(s: &LinkScenario, ell: i32) -> Result<(f64, f64)> {
    s.validate()?;
    let space = s.encoding.spatial();
    let input = oam_field(&space.mode(ell), &s.grid)?;
    let p0 = power(&input);
    let calm = s.turbulence.cn2 == 0.0;
    let n = if calm { 1 } else { s.n_realizations };
    let v: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|r| -> Result<f64> {
            let out = if calm {
                transmit(s, &input, None)?
            } else {
                let layers = make_layers(&s.turbulence, &s.grid, realization_seeds(s, r).0)?;
                transmit(s, &input, Some(&layers))?
            };
            Ok(power(&out) / p0)
        })
        .collect::<Result<_>>()?;
    Ok(mean_std(&v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    DOverR0,
    Cn2,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d_over_r0" => Ok(SweepParam::DOverR0),
            "cn2" => Ok(SweepParam::Cn2),
            other => Err(Error::param(format!("unknown sweep parameter `{other}`"))),
        }
    }
}

pub fn sweep_scenarios(s: &LinkScenario, param: SweepParam, values: &[f64]) -> Result<Vec<LinkScenario>> {
    values
        .iter()
        .map(|&v| match param {
            SweepParam::DOverR0 => s.with_d_over_r0(v),
            SweepParam::Cn2 => s.with_cn2(v),
        })
        .collect()
}

/// One report per value, all sharing the scenario seed.
pub fn sweep(s: &LinkScenario, param: SweepParam, values: &[f64]) -> Result<Vec<RunReport>> {
    sweep_scenarios(s, param, values)?.iter().map(run_scenario).collect()
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn opt(v: Option<&FidelityStats>, i: usize) -> String {
    v.and_then(|s| s.series.get(i)).map_or(String::new(), |x| x.to_string())
}

/// Write `report.json`, `fidelity_series.csv`, `crosstalk_oam.csv`,
/// `crosstalk_ang.csv` (when defined) and `telemetry.csv` (with AO).
pub fn emit_report(r: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();

    let json_path = dir.join("report.json");
    let text = serde_json::to_string_pretty(r).map_err(|source| Error::Json {
        context: "report".into(),
        source,
    })?;
    fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
    written.push(json_path);

    let series_path = dir.join("fidelity_series.csv");
    let err = csv_err(&series_path);
    let mut w = csv::Writer::from_path(&series_path).map_err(&err)?;
    w.write_record([
        "realization",
        "frame",
        "oam",
        "ang",
        "mub",
        "joint",
        "uncorrected_oam",
        "uncorrected_ang",
        "uncorrected_mub",
    ])
    .map_err(&err)?;
    let u = r.uncorrected.as_ref();
    for (i, &(real, frame)) in r.snapshots.iter().enumerate() {
        w.write_record([
            real.to_string(),
            frame.to_string(),
            opt(Some(&r.results.oam), i),
            opt(r.results.ang.as_ref(), i),
            opt(r.results.mub.as_ref(), i),
            opt(r.results.joint.as_ref(), i),
            opt(u.map(|x| &x.oam), i),
            opt(u.and_then(|x| x.ang.as_ref()), i),
            opt(u.and_then(|x| x.mub.as_ref()), i),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(&series_path, e))?;
    written.push(series_path.clone());

    for (name, m) in [
        ("crosstalk_oam.csv", &r.results.crosstalk_oam),
        ("crosstalk_ang.csv", &r.results.crosstalk_ang),
    ] {
        if let Some(m) = m {
            let p = dir.join(name);
            m.write_csv(&p)?;
            written.push(p);
        }
    }

    if !r.telemetry.is_empty() {
        let p = dir.join("telemetry.csv");
        let err = csv_err(&p);
        let mut w = csv::Writer::from_path(&p).map_err(&err)?;
        w.write_record([
            "realization",
            "frame",
            "time_s",
            "residual_rms_rad",
            "centroid_x_m",
            "centroid_y_m",
            "saturated_actuators",
        ])
        .map_err(&err)?;
        for t in &r.telemetry {
            for row in &t.rows {
                w.write_record([
                    t.realization.to_string(),
                    row.frame.to_string(),
                    row.time_s.to_string(),
                    row.residual_rms_rad.to_string(),
                    row.centroid_x_m.to_string(),
                    row.centroid_y_m.to_string(),
                    row.saturated_actuators.to_string(),
                ])
                .map_err(&err)?;
            }
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
        written.push(p.clone());
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })
}

/// Read `(D/r0, F)` pairs from a CSV with `d_over_r0` and `fidelity`
/// columns.
pub fn read_fidelity_points(path: &Path) -> Result<Vec<(f64, f64)>> {
    #[derive(Deserialize)]
    struct Row {
        d_over_r0: f64,
        fidelity: f64,
    }
    let err = csv_err(path);
    let mut r = csv::Reader::from_path(path).map_err(&err)?;
    r.deserialize::<Row>()
        .map(|row| row.map(|x| (x.d_over_r0, x.fidelity)).map_err(&err))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_lab() -> LinkScenario {
        let mut s = preset("lab").unwrap();
        s.n_realizations = 2;
        s.frames_per_realization = 3;
        s.warmup_frames = 1;
        s
    }

    #[test]
    fn presets_validate() {
        let lab = preset("lab").unwrap();
        assert_eq!(lab.turbulence.n_screens, 4);
        assert_eq!(lab.ao.unwrap().dm.unwrap().n_act, 6);
        assert_eq!(lab.ao.unwrap().wfs.n_lenslets, 23);
        assert_eq!(lab.ao.unwrap().wfs.n_terms, 15);
        assert!((lab.d_over_r0().unwrap() - 0.884).abs() < 1e-9);
        let campus = preset("campus").unwrap();
        assert_eq!(campus.link_length, 340.0);
        assert_eq!(campus.turbulence.n_screens, 5);
        assert_eq!(campus.ao.unwrap().dm.unwrap().n_act, 12);
        assert_eq!(campus.limits.cn2, Some((5.4e-15, 3.2e-14)));
        assert_eq!(campus.nominal_fresnel_number, Some(4.89));
        let ap = campus.path.iter().find_map(|e| match e {
            PathElement::Aperture(a) => Some(a.diameter),
            _ => None,
        });
        assert_eq!(ap, Some(0.0762));
        assert!(matches!(preset("mars"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn lab_d_over_r0_range() {
        let lab = preset("lab").unwrap();
        for x in [0.11, 0.3, 0.884, 1.9, 3.06] {
            let s = lab.with_d_over_r0(x).unwrap();
            assert!((s.d_over_r0().unwrap() - x).abs() < 1e-9 * x);
        }
        assert!(lab.with_d_over_r0(3.5).is_err());
        assert!(lab.with_d_over_r0(0.05).is_err());
        assert_eq!(lab.with_d_over_r0(0.0).unwrap().turbulence.cn2, 0.0);
    }

    #[test]
    fn campus_cn2_bounds() {
        let c = preset("campus").unwrap();
        assert!(c.with_cn2(5.4e-15).is_ok());
        assert!(c.with_cn2(3.2e-14).is_ok());
        assert!(c.with_cn2(1e-13).is_err());
        assert!(c.with_cn2(1e-15).is_err());
    }

    #[test]
    fn path_checks() {
        let mut s = preset("lab").unwrap();
        s.link_length = 3.0;
        assert!(s.validate().is_err());
        let mut s = preset("lab").unwrap();
        s.path.push(PathElement::Screen { layer: 0 });
        assert!(s.validate().is_err());
        let mut s = preset("lab").unwrap();
        s.path.retain(|e| *e != PathElement::Screen { layer: 2 });
        assert!(s.validate().is_err());
    }

    #[test]
    fn scenario_json_round_trip_and_unknown_keys() {
        let s = preset("lab").unwrap();
        let back = LinkScenario::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
        let mut v: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
        v["colour"] = serde_json::json!("blue");
        assert!(LinkScenario::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn calm_lab_is_ideal() {
        let mut s = tiny_lab().with_d_over_r0(0.0).unwrap();
        s.ao = None;
        let r = run_scenario(&s).unwrap();
        let mub = r.results.mub.as_ref().unwrap();
        assert!(mub.mean >= 0.999, "{}", mub.mean);
        assert_eq!(mub.series.len(), 2 * 2);
        assert!(r.efficiency.iter().all(|e| e.mean > 0.999));
        assert!(r.verdicts[0].secure);
    }

    #[test]
    fn ao_run_reports_both_channels() {
        let s = tiny_lab();
        let r = run_scenario(&s).unwrap();
        assert!(r.uncorrected.is_some());
        assert_eq!(r.verdicts.len(), 2);
        assert_eq!(r.telemetry.len(), 2);
        assert_eq!(r.telemetry[0].rows.len(), 3);
        for st in [&r.results, r.uncorrected.as_ref().unwrap()] {
            let recomputed = st.oam.series.iter().filter(|&&f| f > st.oam.threshold).count() as f64
                / st.oam.series.len() as f64;
            assert_eq!(recomputed, st.oam.fraction_above_threshold);
        }
    }

    #[test]
    fn report_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_scenario(&tiny_lab()).unwrap();
        let files = emit_report(&r, dir.path()).unwrap();
        assert_eq!(files.len(), 5);
        assert_eq!(read_report(&dir.path().join("report.json")).unwrap(), r);
        let series = fs::read_to_string(dir.path().join("fidelity_series.csv")).unwrap();
        assert_eq!(series.lines().count(), 1 + r.snapshots.len());
    }

    #[test]
    fn empty_run_report() {
        let mut s = tiny_lab();
        s.n_realizations = 0;
        let r = run_scenario(&s).unwrap();
        assert!(r.results.oam.series.is_empty());
        let dir = tempfile::tempdir().unwrap();
        emit_report(&r, dir.path()).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(v["results"]["oam"]["series"].as_array().unwrap().len(), 0);
    }

    #[test]
    fn hybrid_encoding_reports_joint() {
        let mut s = tiny_lab();
        s.ao = None;
        s.encoding = Encoding::Hybrid(crate::modes::hybrid_space(*s.encoding.spatial(), 0.9823).unwrap());
        let r = run_scenario(&s).unwrap();
        let j = r.results.joint.as_ref().unwrap();
        let m = r.results.mub.as_ref().unwrap();
        assert!((j.mean - 0.9823 * m.mean).abs() < 1e-12);
        assert_eq!(r.verdicts[0].dimension, 10);
    }

    #[test]
    fn spacing_two_has_no_ang() {
        let mut s = tiny_lab();
        s.ao = None;
        s.encoding = Encoding::Spatial(build_space(2, 2, 1.6e-3, BasisKind::Oam).unwrap());
        let r = run_scenario(&s).unwrap();
        assert!(r.results.ang.is_none());
        assert_eq!(r.dimension, 3);
        assert_eq!(r.verdicts[0].basis, "OAM");
    }

    #[test]
    fn seeds_are_mixed() {
        assert_ne!(mix_seed(1, 0), mix_seed(1, 1));
        assert_ne!(mix_seed(1, 0), mix_seed(2, 0));
        assert_eq!(mix_seed(7, 3), mix_seed(7, 3));
    }
}
