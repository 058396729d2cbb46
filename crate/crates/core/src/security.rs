//! QKD-facing channel analysis: crosstalk matrices, fidelity statistics,
//! the d-dimensional key rate and its fidelity threshold, fidelity-model
//! fitting and encoding-strategy evaluation.

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{overlap, power, ComplexField, GridSpec};
use crate::modes::{ang_coefficients, ang_field, oam_field, BasisKind, EncodingSpace};

/// Rows whose detected power falls below this are flagged.
pub const ZERO_POWER: f64 = 1e-15;
/// Coefficient quoted with the fidelity-versus-turbulence model.
pub const REFERENCE_C: f64 = 3.404;

/// Conditional detection probabilities `p[i][j]` of outcome `j` given
/// prepared state `i`. Rows of `p` are renormalized; `raw` keeps the
/// unnormalized probabilities and `efficiency[i]` their row sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosstalkMatrix {
    pub basis_kind: BasisKind,
    /// OAM quantum numbers, or ANG indices `j`.
    pub labels: Vec<i32>,
    pub raw: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub efficiency: Vec<f64>,
    /// Prepared states that reached the detectors with no power.
    pub flagged: Vec<usize>,
}

impl CrosstalkMatrix {
    pub fn from_raw(basis_kind: BasisKind, labels: Vec<i32>, raw: Vec<Vec<f64>>) -> Result<Self> {
        let d = labels.len();
        if raw.len() != d || raw.iter().any(|r| r.len() != d) {
            return Err(Error::param(format!("crosstalk matrix must be {d}×{d}")));
        }
        if raw.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::param("crosstalk probabilities must be finite and non-negative"));
        }
        let efficiency: Vec<f64> = raw.iter().map(|r| r.iter().sum()).collect();
        let mut flagged = Vec::new();
        let p = raw
            .iter()
            .zip(&efficiency)
            .enumerate()
            .map(|(i, (row, &s))| {
                if s <= ZERO_POWER {
                    flagged.push(i);
                    vec![0.0; d]
                } else {
                    row.iter().map(|v| v / s).collect()
                }
            })
            .collect();
        Ok(CrosstalkMatrix {
            basis_kind,
            labels,
            raw,
            p,
            efficiency,
            flagged,
        })
    }

    pub fn identity(basis_kind: BasisKind, labels: Vec<i32>) -> Self {
        let d = labels.len();
        let raw = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        CrosstalkMatrix::from_raw(basis_kind, labels, raw).expect("identity is well formed")
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    /// Sub-matrix over `keep` (labels), renormalized from the raw values.
    pub fn select(&self, keep: &[i32]) -> Result<Self> {
        let idx: Vec<usize> = keep
            .iter()
            .map(|l| {
                self.labels
                    .iter()
                    .position(|x| x == l)
                    .ok_or_else(|| Error::IncompatibleStrategy(format!("label {l} not in ensemble")))
            })
            .collect::<Result<_>>()?;
        let raw = idx
            .iter()
            .map(|&i| idx.iter().map(|&j| self.raw[i][j]).collect())
            .collect();
        CrosstalkMatrix::from_raw(self.basis_kind, keep.to_vec(), raw)
    }

    /// Entrywise mean of an ensemble sharing labels and basis.
    pub fn mean(ensemble: &[CrosstalkMatrix]) -> Result<Self> {
        let first = ensemble
            .first()
            .ok_or_else(|| Error::param("cannot average an empty ensemble"))?;
        let d = first.dim();
        let mut raw = vec![vec![0.0; d]; d];
        for m in ensemble {
            if m.labels != first.labels || m.basis_kind != first.basis_kind {
                return Err(Error::param("ensemble members differ in basis or labels"));
            }
            for i in 0..d {
                for j in 0..d {
                    raw[i][j] += m.raw[i][j] / ensemble.len() as f64;
                }
            }
        }
        CrosstalkMatrix::from_raw(first.basis_kind, first.labels.clone(), raw)
    }

    /// Renormalized matrix as CSV: one row per prepared state.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let prefix = match self.basis_kind {
            BasisKind::Oam => "l",
            BasisKind::Ang => "j",
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["prepared".to_string()];
        header.extend(self.labels.iter().map(|l| format!("{prefix}={l}")));
        header.push("efficiency".into());
        w.write_record(&header).map_err(csv_err)?;
        for (i, row) in self.p.iter().enumerate() {
            let mut rec = vec![format!("{prefix}={}", self.labels[i])];
            rec.extend(row.iter().map(|v| v.to_string()));
            rec.push(self.efficiency[i].to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// `a[i][k] = ⟨detector_k | output_i⟩` with detectors normalized to unit
/// power.
pub fn amplitude_matrix(outputs: &[ComplexField], detectors: &[ComplexField]) -> Result<Vec<Vec<Complex64>>> {
    let dets: Vec<ComplexField> = detectors
        .iter()
        .map(|d| {
            let p = power(d);
            if p > 0.0 {
                Ok(d.scaled(Complex64::new(p.sqrt().recip(), 0.0)))
            } else {
                Err(Error::ZeroPower("detector mode"))
            }
        })
        .collect::<Result<_>>()?;
    outputs
        .iter()
        .map(|o| dets.iter().map(|d| overlap(d, o)).collect::<Result<Vec<_>>>())
        .collect()
}

/// OAM-basis matrix from OAM amplitudes.
pub fn oam_crosstalk(space: &EncodingSpace, amps: &[Vec<Complex64>]) -> Result<CrosstalkMatrix> {
    let raw = amps
        .iter()
        .map(|row| row.iter().map(|a| a.norm_sqr()).collect())
        .collect();
    CrosstalkMatrix::from_raw(BasisKind::Oam, space.members(), raw)
}

/// ANG-basis matrix from OAM amplitudes, using linearity of the channel:
/// `⟨j'|out_j⟩ = Σ_ℓ Σ_ℓ' conj(c_{j'ℓ'})·c_{jℓ}·a[ℓ][ℓ']`.
pub fn ang_crosstalk(space: &EncodingSpace, amps: &[Vec<Complex64>]) -> Result<CrosstalkMatrix> {
    let d = space.dimension;
    if amps.len() != d || amps.iter().any(|r| r.len() != d) {
        return Err(Error::param("amplitude matrix does not match the encoding space"));
    }
    let coeffs: Vec<Vec<Complex64>> = (0..d as i64)
        .map(|j| Ok(ang_coefficients(j, space)?.into_iter().map(|(_, c)| c).collect()))
        .collect::<Result<_>>()?;
    let raw = (0..d)
        .map(|j| {
            (0..d)
                .map(|jp| {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (l, cj) in coeffs[j].iter().enumerate() {
                        for (lp, cjp) in coeffs[jp].iter().enumerate() {
                            acc += cjp.conj() * cj * amps[l][lp];
                        }
                    }
                    acc.norm_sqr()
                })
                .collect()
        })
        .collect();
    CrosstalkMatrix::from_raw(BasisKind::Ang, (0..d as i32).collect(), raw)
}

/// Send each basis state of `space` through `channel` and project onto the
/// same basis.
pub fn crosstalk(
    space: &EncodingSpace,
    grid: &GridSpec,
    channel: impl Fn(&ComplexField) -> Result<ComplexField>,
) -> Result<CrosstalkMatrix> {
    let states: Vec<ComplexField> = match space.basis_kind {
        BasisKind::Oam => space
            .members()
            .iter()
            .map(|&l| oam_field(&space.mode(l), grid))
            .collect::<Result<_>>()?,
        BasisKind::Ang => (0..space.dimension)
            .map(|j| ang_field(j, space, grid))
            .collect::<Result<_>>()?,
    };
    let outputs: Vec<ComplexField> = states.iter().map(&channel).collect::<Result<_>>()?;
    let amps = amplitude_matrix(&outputs, &states)?;
    let raw = amps
        .iter()
        .map(|row| row.iter().map(|a| a.norm_sqr()).collect())
        .collect();
    let labels = match space.basis_kind {
        BasisKind::Oam => space.members(),
        BasisKind::Ang => (0..space.dimension as i32).collect(),
    };
    CrosstalkMatrix::from_raw(space.basis_kind, labels, raw)
}

/// Mean of the diagonal.
pub fn fidelity(m: &CrosstalkMatrix) -> Result<f64> {
    if !m.flagged.is_empty() {
        return Err(Error::FlaggedRows(m.flagged.clone()));
    }
    Ok((0..m.dim()).map(|i| m.p[i][i]).sum::<f64>() / m.dim() as f64)
}

pub fn qser(m: &CrosstalkMatrix) -> Result<f64> {
    Ok(1.0 - fidelity(m)?)
}

/// Equal-weight average of the OAM- and ANG-basis fidelities.
pub fn mub_fidelity(oam: &CrosstalkMatrix, ang: &CrosstalkMatrix) -> Result<f64> {
    Ok(0.5 * (fidelity(oam)? + fidelity(ang)?))
}

fn xlog2(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * q.log2()
    }
}

/// `h_d(e) = −e·log₂(e/(d−1)) − (1−e)·log₂(1−e)`.
pub fn dit_entropy(d: usize, e: f64) -> f64 {
    -xlog2(e, e / (d as f64 - 1.0)) - xlog2(1.0 - e, 1.0 - e)
}

/// Secret bits per sifted symbol, `log₂d − 2·h_d(e)`.
pub fn key_rate(d: usize, e: f64) -> Result<f64> {
    if d < 2 {
        return Err(Error::param("dimension must be >= 2"));
    }
    let max = (d as f64 - 1.0) / d as f64;
    if !(0.0..=max).contains(&e) {
        return Err(Error::param(format!("error rate {e} outside [0, {max}]")));
    }
    Ok((d as f64).log2() - 2.0 * dit_entropy(d, e))
}

/// Fidelity at which the key rate reaches zero.
pub fn fidelity_threshold(d: usize) -> Result<f64> {
    if d < 2 {
        return Err(Error::param("dimension must be >= 2"));
    }
    let (mut lo, mut hi) = (0.0, (d as f64 - 1.0) / d as f64);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if key_rate(d, mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(1.0 - 0.5 * (lo + hi))
}

/// Closed forms of the fidelity-versus-D/r₀ model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FidelityModel {
    /// `F = 1 − [1 + c·x²]^(−1/2)`, as printed.
    A,
    /// `F = [1 + c·x²]^(−1/2)`.
    B,
}

impl std::str::FromStr for FidelityModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(FidelityModel::A),
            "B" | "b" => Ok(FidelityModel::B),
            other => Err(Error::param(format!("unknown model variant `{other}`"))),
        }
    }
}

impl FidelityModel {
    pub fn eval(self, c: f64, x: f64) -> f64 {
        let s = (1.0 + c * x * x).powf(-0.5);
        match self {
            FidelityModel::A => 1.0 - s,
            FidelityModel::B => s,
        }
    }
}

const FIT_LOG_BOUNDS: (f64, f64) = (-9.210340371976182, 9.210340371976182); // ln 1e∓4

/// Least-squares `c` by golden-section search on `ln c`.
pub fn fit_fidelity_model(points: &[(f64, f64)], form: FidelityModel) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::param(format!("need at least 3 points, got {}", points.len())));
    }
    if points.iter().any(|(x, f)| !x.is_finite() || !f.is_finite() || *x < 0.0) {
        return Err(Error::param("fit points must be finite with D/r0 >= 0"));
    }
    let sse = |u: f64| -> f64 {
        let c = u.exp();
        points.iter().map(|&(x, f)| (form.eval(c, x) - f).powi(2)).sum()
    };
    let (mut a, mut b) = FIT_LOG_BOUNDS;
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c1 = b - phi * (b - a);
    let mut c2 = a + phi * (b - a);
    let (mut f1, mut f2) = (sse(c1), sse(c2));
    while b - a > 1e-10 {
        if f1 < f2 {
            b = c2;
            c2 = c1;
            f2 = f1;
            c1 = b - phi * (b - a);
            f1 = sse(c1);
        } else {
            a = c1;
            c1 = c2;
            f1 = f2;
            c2 = a + phi * (b - a);
            f2 = sse(c2);
        }
    }
    let u = 0.5 * (a + b);
    if u - FIT_LOG_BOUNDS.0 < 1e-3 || FIT_LOG_BOUNDS.1 - u < 1e-3 {
        return Err(Error::FitDiverged(format!(
            "optimum ran to the search bound (c = {:.3e})",
            u.exp()
        )));
    }
    Ok(u.exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityStats {
    pub mean: f64,
    /// Sample standard deviation; 0 for fewer than two samples.
    pub std: f64,
    pub series: Vec<f64>,
    pub threshold: f64,
    pub fraction_above_threshold: f64,
}

impl FidelityStats {
    pub fn from_series(series: Vec<f64>, threshold: f64) -> Self {
        let n = series.len();
        if n == 0 {
            return FidelityStats {
                mean: 0.0,
                std: 0.0,
                series,
                threshold,
                fraction_above_threshold: 0.0,
            };
        }
        let mean = series.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let above = series.iter().filter(|&&v| v > threshold).count();
        FidelityStats {
            mean,
            std,
            series,
            threshold,
            fraction_above_threshold: above as f64 / n as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Strategy {
    None,
    /// Keep only OAM values that are multiples of `k`.
    Spacing { k: i32 },
    /// Polarization ancilla doubling the dimension.
    Hybrid { pol_fidelity: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyOutcome {
    pub strategy: Strategy,
    pub dimension: usize,
    pub threshold: f64,
    pub stats: FidelityStats,
    /// Mean fidelity strictly above the threshold.
    pub secure: bool,
}

/// Recompute fidelity statistics for a strategy over an ensemble simulated
/// with shared turbulence draws.
pub fn evaluate_strategy(base: &[CrosstalkMatrix], strategy: Strategy) -> Result<StrategyOutcome> {
    let first = base
        .first()
        .ok_or_else(|| Error::IncompatibleStrategy("empty ensemble".into()))?;
    if base
        .iter()
        .any(|m| m.labels != first.labels || m.basis_kind != first.basis_kind)
    {
        return Err(Error::IncompatibleStrategy("ensemble members differ in basis or labels".into()));
    }
    let (dimension, series) = match strategy {
        Strategy::None => (
            first.dim(),
            base.iter().map(fidelity).collect::<Result<Vec<_>>>()?,
        ),
        Strategy::Spacing { k } => {
            if first.basis_kind != BasisKind::Oam {
                return Err(Error::IncompatibleStrategy("mode spacing applies to the OAM basis".into()));
            }
            let max_ell = first.labels.iter().map(|l| l.abs()).max().unwrap_or(0);
            if k < 1 || max_ell % k != 0 || max_ell / k < 1 {
                return Err(Error::IncompatibleStrategy(format!(
                    "spacing {k} does not divide the largest OAM value {max_ell}"
                )));
            }
            let keep: Vec<i32> = (-max_ell / k..=max_ell / k).map(|i| i * k).collect();
            let series = base
                .iter()
                .map(|m| fidelity(&m.select(&keep)?))
                .collect::<Result<Vec<_>>>()?;
            (keep.len(), series)
        }
        Strategy::Hybrid { pol_fidelity } => {
            if !(0.5..=1.0).contains(&pol_fidelity) {
                return Err(Error::IncompatibleStrategy(format!(
                    "polarization fidelity {pol_fidelity} outside [0.5, 1]"
                )));
            }
            let series = base
                .iter()
                .map(|m| Ok(fidelity(m)? * pol_fidelity))
                .collect::<Result<Vec<_>>>()?;
            (2 * first.dim(), series)
        }
    };
    let threshold = fidelity_threshold(dimension)?;
    let stats = FidelityStats::from_series(series, threshold);
    Ok(StrategyOutcome {
        strategy,
        dimension,
        threshold,
        secure: stats.mean > threshold,
        stats,
    })
}
