//! OAM (LG, p = 0) states, angular (ANG) mutually unbiased superpositions,
//! encoding spaces and the polarization-ancilla hybrid space.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ComplexField, GridSpec};

/// Minimum samples across the waist radius for a mode to be considered resolved.
pub const MIN_SAMPLES_PER_WAIST: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    pub ell: i32,
    /// Gaussian waist parameter in meters.
    pub waist: f64,
}

impl ModeSpec {
    pub fn new(ell: i32, waist: f64) -> Result<Self> {
        if !(waist > 0.0 && waist.is_finite()) {
            return Err(Error::param(format!("waist {waist} must be positive")));
        }
        Ok(ModeSpec { ell, waist })
    }

    /// Second-moment (D4σ) diameter, `2·w·sqrt(|ℓ| + 1)`.
    pub fn beam_diameter(&self) -> f64 {
        2.0 * self.waist * ((self.ell.unsigned_abs() + 1) as f64).sqrt()
    }

    /// Radius of peak intensity, `w·sqrt(|ℓ|/2)`.
    pub fn ring_radius(&self) -> f64 {
        self.waist * (self.ell.unsigned_abs() as f64 / 2.0).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BasisKind {
    #[serde(rename = "OAM")]
    Oam,
    #[serde(rename = "ANG")]
    Ang,
}

impl std::fmt::Display for BasisKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BasisKind::Oam => write!(f, "OAM"),
            BasisKind::Ang => write!(f, "ANG"),
        }
    }
}

/// Encoding space `{-L, -L+s, …, L}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingSpace {
    pub basis_kind: BasisKind,
    pub max_ell: i32,
    pub spacing: i32,
    pub dimension: usize,
    pub waist: f64,
}

impl EncodingSpace {
    pub fn validate(&self) -> Result<()> {
        let rebuilt = build_space(self.max_ell, self.spacing, self.waist, self.basis_kind)?;
        if rebuilt.dimension != self.dimension {
            return Err(Error::param(format!(
                "dimension {} inconsistent with L = {}, spacing = {} (expected {})",
                self.dimension, self.max_ell, self.spacing, rebuilt.dimension
            )));
        }
        Ok(())
    }

    pub fn members(&self) -> Vec<i32> {
        (0..self.dimension as i32)
            .map(|k| -self.max_ell + k * self.spacing)
            .collect()
    }

    pub fn mode(&self, ell: i32) -> ModeSpec {
        ModeSpec {
            ell,
            waist: self.waist,
        }
    }

    /// Largest D4σ diameter among the members.
    pub fn max_beam_diameter(&self) -> f64 {
        self.mode(self.max_ell).beam_diameter()
    }

    pub fn with_kind(&self, kind: BasisKind) -> Result<EncodingSpace> {
        build_space(self.max_ell, self.spacing, self.waist, kind)
    }
}

pub fn build_space(max_ell: i32, spacing: i32, waist: f64, kind: BasisKind) -> Result<EncodingSpace> {
    if max_ell < 1 {
        return Err(Error::param(format!("max_ell {max_ell} must be >= 1")));
    }
    if spacing < 1 {
        return Err(Error::param(format!("spacing {spacing} must be >= 1")));
    }
    if max_ell % spacing != 0 {
        return Err(Error::param(format!(
            "max_ell {max_ell} is not divisible by spacing {spacing}"
        )));
    }
    if kind == BasisKind::Ang && spacing != 1 {
        return Err(Error::param(
            "ANG mutually unbiased basis is only defined for spacing 1",
        ));
    }
    ModeSpec::new(0, waist)?;
    Ok(EncodingSpace {
        basis_kind: kind,
        max_ell,
        spacing,
        dimension: (2 * (max_ell / spacing) + 1) as usize,
        waist,
    })
}

/// Unit-power LG_{0,ℓ} field at its waist plane.
pub fn oam_field(spec: &ModeSpec, grid: &GridSpec) -> Result<ComplexField> {
    ModeSpec::new(spec.ell, spec.waist)?;
    let samples = spec.waist / grid.pitch();
    if samples < MIN_SAMPLES_PER_WAIST {
        return Err(Error::param(format!(
            "grid under-resolves the mode: {samples:.1} samples across the waist (need {MIN_SAMPLES_PER_WAIST})"
        )));
    }
    let w = spec.waist;
    let m = spec.ell.unsigned_abs() as i32;
    let ell = spec.ell as f64;
    let mut f = ComplexField::from_fn(*grid, |x, y| {
        let r2 = x * x + y * y;
        let radial = (2.0 * r2 / (w * w)).sqrt().powi(m) * (-r2 / (w * w)).exp();
        if radial == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        Complex64::from_polar(radial, ell * y.atan2(x))
    });
    f.normalize();
    Ok(f)
}

/// ANG superposition coefficients `(ℓ, c_ℓ)` for any integer `j`
/// (periodic with period `d`).
pub fn ang_coefficients(j: i64, space: &EncodingSpace) -> Result<Vec<(i32, Complex64)>> {
    if space.spacing != 1 {
        return Err(Error::param(
            "ANG mutually unbiased basis is only defined for spacing 1",
        ));
    }
    let d = space.dimension as f64;
    let period = (2 * space.max_ell + 1) as f64;
    let amp = 1.0 / d.sqrt();
    Ok(space
        .members()
        .into_iter()
        .map(|ell| {
            let phase = -2.0 * PI * (j as f64) * (ell as f64) / period;
            (ell, Complex64::from_polar(amp, phase))
        })
        .collect())
}

/// ANG state `|j⟩`, a normalized superposition of the space's OAM members.
pub fn ang_field(j: usize, space: &EncodingSpace, grid: &GridSpec) -> Result<ComplexField> {
    if j >= space.dimension {
        return Err(Error::param(format!(
            "ANG index {j} out of range for d = {}",
            space.dimension
        )));
    }
    let coeffs = ang_coefficients(j as i64, space)?;
    let mut out = ComplexField::zeros(*grid);
    for (ell, c) in coeffs {
        out.add_scaled(c, &oam_field(&space.mode(ell), grid)?)?;
    }
    out.normalize();
    Ok(out)
}

/// Encoding space augmented with a two-dimensional polarization ancilla.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridSpace {
    pub spatial: EncodingSpace,
    pub pol_dimension: usize,
    pub pol_fidelity: f64,
}

impl HybridSpace {
    pub fn joint_dimension(&self) -> usize {
        self.spatial.dimension * self.pol_dimension
    }

    /// Product model: the two degrees of freedom err independently.
    pub fn joint_fidelity(&self, spatial_fidelity: f64) -> f64 {
        spatial_fidelity * self.pol_fidelity
    }

    pub fn validate(&self) -> Result<()> {
        self.spatial.validate()?;
        if self.pol_dimension != 2 {
            return Err(Error::param("polarization ancilla dimension must be 2"));
        }
        check_pol_fidelity(self.pol_fidelity)
    }
}

fn check_pol_fidelity(p: f64) -> Result<()> {
    if !(0.5..=1.0).contains(&p) {
        return Err(Error::param(format!(
            "polarization fidelity {p} outside [0.5, 1]"
        )));
    }
    Ok(())
}

pub fn hybrid_space(spatial: EncodingSpace, pol_fidelity: f64) -> Result<HybridSpace> {
    check_pol_fidelity(pol_fidelity)?;
    Ok(HybridSpace {
        spatial,
        pol_dimension: 2,
        pol_fidelity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{make_grid, overlap, power};

    const HENE: f64 = 633e-9;
    const W: f64 = 1e-3;

    fn grid() -> GridSpec {
        // default grid for the d = 5 space
        let space = build_space(2, 1, W, BasisKind::Oam).unwrap();
        GridSpec::default_for(space.max_beam_diameter(), HENE).unwrap()
    }

    #[test]
    fn build_space_members() {
        let s = build_space(2, 1, W, BasisKind::Oam).unwrap();
        assert_eq!(s.members(), vec![-2, -1, 0, 1, 2]);
        assert_eq!(s.dimension, 5);
        let s = build_space(4, 2, W, BasisKind::Oam).unwrap();
        assert_eq!(s.members(), vec![-4, -2, 0, 2, 4]);
        assert_eq!(s.dimension, 5);
        let s = build_space(4, 4, W, BasisKind::Oam).unwrap();
        assert_eq!(s.members(), vec![-4, 0, 4]);
        assert_eq!(s.dimension, 3);
        assert!(build_space(3, 2, W, BasisKind::Oam).is_err());
        assert!(build_space(4, 2, W, BasisKind::Ang).is_err());
        assert!(build_space(0, 1, W, BasisKind::Oam).is_err());
    }

    #[test]
    fn gaussian_peaks_on_axis() {
        let g = grid();
        let f = oam_field(&ModeSpec::new(0, W).unwrap(), &g).unwrap();
        let c = g.n / 2;
        let peak = f.data.iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert_eq!(f.data[[c, c]].norm(), peak);
    }

    #[test]
    fn vortex_has_on_axis_null() {
        let g = grid();
        let f = oam_field(&ModeSpec::new(2, W).unwrap(), &g).unwrap();
        let c = g.n / 2;
        let peak = f.data.iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(f.data[[c, c]].norm() < 1e-8 * peak);
    }

    #[test]
    fn ring_radius_matches_lg_formula() {
        let g = make_grid(1024, 8e-3, HENE).unwrap();
        let spec = ModeSpec::new(3, W).unwrap();
        let f = oam_field(&spec, &g).unwrap();
        let c = g.n / 2;
        let (best, _) = (c..g.n)
            .map(|j| (g.coord(j), f.data[[c, j]].norm()))
            .fold((0.0, 0.0), |acc, (r, a)| if a > acc.1 { (r, a) } else { acc });
        let expected = W * 1.5f64.sqrt();
        assert!((best - expected).abs() / expected < 0.02, "{best} vs {expected}");
    }

    #[test]
    fn under_resolved_grid_is_rejected() {
        let g = make_grid(64, 0.1, HENE).unwrap();
        assert!(oam_field(&ModeSpec::new(1, W).unwrap(), &g).is_err());
    }

    #[test]
    fn ang_zero_has_flat_coefficients() {
        let s = build_space(2, 1, W, BasisKind::Ang).unwrap();
        for (_, c) in ang_coefficients(0, &s).unwrap() {
            assert!((c.re - 1.0 / 5f64.sqrt()).abs() < 1e-15);
            assert_eq!(c.im, 0.0);
        }
    }

    #[test]
    fn ang_coefficients_are_periodic_in_j() {
        let s = build_space(3, 1, W, BasisKind::Ang).unwrap();
        for j in -3i64..10 {
            let a = ang_coefficients(j, &s).unwrap();
            let b = ang_coefficients(j + s.dimension as i64, &s).unwrap();
            for ((_, x), (_, y)) in a.iter().zip(&b) {
                assert!((x - y).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn ang_index_out_of_range() {
        let s = build_space(2, 1, W, BasisKind::Ang).unwrap();
        assert!(ang_field(5, &s, &grid()).is_err());
    }

    #[test]
    fn ang_states_are_orthonormal() {
        // Σ_ℓ conj(c_jℓ)·c_j'ℓ is a geometric series in exp(-i2π(j'-j)/d),
        // vanishing unless j = j'.
        let s = build_space(2, 1, W, BasisKind::Ang).unwrap();
        let g = grid();
        let fields: Vec<_> = (0..5).map(|j| ang_field(j, &s, &g).unwrap()).collect();
        for (a, fa) in fields.iter().enumerate() {
            for (b, fb) in fields.iter().enumerate() {
                let o = overlap(fa, fb).unwrap();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((o.norm() - expect).abs() < 1e-6, "({a},{b}): {o}");
            }
        }
    }

    #[test]
    fn oam_members_orthonormal_on_default_grid() {
        let s = build_space(2, 1, W, BasisKind::Oam).unwrap();
        let g = grid();
        let fields: Vec<_> = s
            .members()
            .iter()
            .map(|&l| oam_field(&s.mode(l), &g).unwrap())
            .collect();
        for (a, fa) in fields.iter().enumerate() {
            assert!((power(fa) - 1.0).abs() < 1e-6);
            for fb in &fields[a + 1..] {
                assert!(overlap(fa, fb).unwrap().norm() < 1e-6);
            }
        }
    }

    #[test]
    fn hybrid_space_dimension_and_fidelity() {
        let s = build_space(2, 1, W, BasisKind::Oam).unwrap();
        let h = hybrid_space(s, 1.0).unwrap();
        assert_eq!(h.joint_dimension(), 10);
        assert_eq!(h.joint_fidelity(0.8), 0.8);
        let h = hybrid_space(s, 0.9823).unwrap();
        assert!((h.joint_fidelity(0.8) - 0.78584).abs() < 1e-12);
        assert!(hybrid_space(s, 0.4).is_err());
        assert!(hybrid_space(s, 1.01).is_err());
    }
}
