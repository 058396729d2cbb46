//! Noll-indexed Zernike polynomials on a sampled circular pupil.
//!
//! Modes are normalized so that the disc average of `Z_j²` is 1; `Z_1` is
//! piston, `Z_2`/`Z_3` tip and tilt. Even `j` carries `cos(mθ)`, odd `j`
//! carries `sin(mθ)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Aperture, GridSpec, RealMap};

/// Minimum pupil sampling for a fit, in pixels across the diameter.
pub const MIN_PUPIL_SAMPLES: f64 = 16.0;
/// Analysis order used by the wavefront sensor presets.
pub const DEFAULT_TERMS: usize = 15;

/// Coefficients in radians RMS, `coeffs[0]` holding Noll `j = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZernikeCoeffs {
    pub coeffs: Vec<f64>,
}

impl ZernikeCoeffs {
    pub fn zeros(n_terms: usize) -> Self {
        ZernikeCoeffs {
            coeffs: vec![0.0; n_terms],
        }
    }

    pub fn from_vec(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::param("Zernike coefficients must be finite"));
        }
        Ok(ZernikeCoeffs { coeffs })
    }

    pub fn n_terms(&self) -> usize {
        self.coeffs.len()
    }

    /// Coefficient for Noll index `j`; zero beyond the stored order.
    pub fn get(&self, j: usize) -> f64 {
        assert!(j >= 1, "Noll indices start at 1");
        self.coeffs.get(j - 1).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, j: usize, value: f64) {
        assert!(j >= 1, "Noll indices start at 1");
        if self.coeffs.len() < j {
            self.coeffs.resize(j, 0.0);
        }
        self.coeffs[j - 1] = value;
    }

    /// RMS phase implied by the coefficients, piston excluded.
    pub fn rms(&self) -> f64 {
        self.coeffs.iter().skip(1).map(|c| c * c).sum::<f64>().sqrt()
    }
}

/// Radial order `n` and signed azimuthal order `m` of Noll index `j`
/// (`m < 0` denotes the sine term).
pub fn noll_to_nm(j: usize) -> (u32, i32) {
    assert!(j >= 1, "Noll indices start at 1");
    let mut n = 0usize;
    let mut j1 = j - 1;
    while j1 > n {
        n += 1;
        j1 -= n;
    }
    let mag = (n % 2) + 2 * ((j1 + (n + 1) % 2) / 2);
    let m = if j % 2 == 0 { mag as i32 } else { -(mag as i32) };
    (n as u32, m)
}

fn factorial(k: u32) -> f64 {
    (1..=k).map(f64::from).product()
}

fn radial_coefficients(n: u32, m: u32) -> Vec<(f64, i32)> {
    (0..=(n - m) / 2)
        .map(|s| {
            let sign = if s % 2 == 0 { 1.0 } else { -1.0 };
            let c = sign * factorial(n - s)
                / (factorial(s) * factorial((n + m) / 2 - s) * factorial((n - m) / 2 - s));
            (c, (n - 2 * s) as i32)
        })
        .collect()
}

/// `Z_j(ρ, θ)` on the unit disc, no masking.
pub fn zernike_value(j: usize, rho: f64, theta: f64) -> f64 {
    let (n, m) = noll_to_nm(j);
    let mm = m.unsigned_abs();
    let r: f64 = radial_coefficients(n, mm)
        .iter()
        .map(|&(c, p)| c * rho.powi(p))
        .sum();
    if m == 0 {
        f64::from(n + 1).sqrt() * r
    } else {
        let ang = if m > 0 {
            (f64::from(mm) * theta).cos()
        } else {
            (f64::from(mm) * theta).sin()
        };
        (2.0 * f64::from(n + 1)).sqrt() * r * ang
    }
}

fn check_pupil(grid: &GridSpec, pupil: &Aperture) -> Result<()> {
    pupil.validate()?;
    if !pupil.fits(grid) {
        return Err(Error::param(format!(
            "pupil of diameter {} m does not fit in a {} m grid",
            pupil.diameter, grid.extent
        )));
    }
    Ok(())
}

/// `Z_j` sampled over `pupil`, zero outside.
pub fn zernike_eval_on(j: usize, grid: &GridSpec, pupil: &Aperture) -> Result<RealMap> {
    if j < 1 {
        return Err(Error::param("Noll index must be >= 1"));
    }
    check_pupil(grid, pupil)?;
    let r = pupil.radius();
    let (cx, cy) = pupil.center_offset;
    Ok(RealMap::from_fn(*grid, |x, y| {
        if pupil.contains(x, y) {
            let (dx, dy) = ((x - cx) / r, (y - cy) / r);
            zernike_value(j, dx.hypot(dy), dy.atan2(dx))
        } else {
            0.0
        }
    }))
}

/// `Z_j` over a centered pupil of the given diameter.
pub fn zernike_eval(j: usize, grid: &GridSpec, pupil_diameter: f64) -> Result<RealMap> {
    zernike_eval_on(j, grid, &Aperture::centered(pupil_diameter)?)
}

/// Sampled Zernike modes over one pupil plus the factored normal equations
/// for least-squares fitting. Immutable once built.
#[derive(Debug, Clone)]
pub struct ZernikeBasis {
    pub grid: GridSpec,
    pub pupil: Aperture,
    /// Flattened (row-major) indices of the pupil pixels.
    pub pixels: Vec<usize>,
    /// `pixels.len() × n_terms` mode samples.
    pub modes: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl ZernikeBasis {
    pub fn new(grid: &GridSpec, pupil: &Aperture, n_terms: usize) -> Result<Self> {
        if n_terms < 1 {
            return Err(Error::param("n_terms must be >= 1"));
        }
        check_pupil(grid, pupil)?;
        let across = pupil.diameter / grid.pitch();
        if across < MIN_PUPIL_SAMPLES {
            return Err(Error::DegeneratePupil(format!(
                "pupil spans {across:.1} px, need at least {MIN_PUPIL_SAMPLES}"
            )));
        }
        let mask = pupil.mask(grid);
        let pixels: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(k, &m)| m.then_some(k))
            .collect();
        if pixels.len() < n_terms {
            return Err(Error::DegeneratePupil(format!(
                "{} pupil samples for {n_terms} terms",
                pixels.len()
            )));
        }
        let c = grid.coords();
        let n = grid.n;
        let r = pupil.radius();
        let (cx, cy) = pupil.center_offset;
        let modes = DMatrix::from_fn(pixels.len(), n_terms, |p, t| {
            let k = pixels[p];
            let (dx, dy) = ((c[k % n] - cx) / r, (c[k / n] - cy) / r);
            zernike_value(t + 1, dx.hypot(dy), dy.atan2(dx))
        });
        let chol = Cholesky::new(modes.tr_mul(&modes)).ok_or_else(|| {
            Error::RankDeficient(format!("Zernike Gram matrix for {n_terms} terms is singular"))
        })?;
        Ok(ZernikeBasis {
            grid: *grid,
            pupil: *pupil,
            pixels,
            modes,
            chol,
        })
    }

    pub fn n_terms(&self) -> usize {
        self.modes.ncols()
    }

    fn samples(&self, map: &RealMap) -> Result<DVector<f64>> {
        self.grid.ensure_same(&map.grid)?;
        let flat = map
            .data
            .as_slice()
            .ok_or_else(|| Error::GridMismatch("map is not in standard layout".into()))?;
        Ok(DVector::from_iterator(
            self.pixels.len(),
            self.pixels.iter().map(|&k| flat[k]),
        ))
    }

    pub fn fit(&self, map: &RealMap) -> Result<ZernikeCoeffs> {
        let v = self.samples(map)?;
        let c = self.chol.solve(&self.modes.tr_mul(&v));
        ZernikeCoeffs::from_vec(c.iter().copied().collect())
    }

    /// `Σ c_j Z_j` inside the pupil, zero outside. Terms beyond the basis
    /// order are ignored.
    pub fn reconstruct(&self, c: &ZernikeCoeffs) -> RealMap {
        let k = c.n_terms().min(self.n_terms());
        let coeffs = DVector::from_iterator(
            self.n_terms(),
            (0..self.n_terms()).map(|t| if t < k { c.coeffs[t] } else { 0.0 }),
        );
        let values = &self.modes * coeffs;
        let mut out = RealMap::zeros(self.grid);
        let flat = out.data.as_slice_mut().expect("fresh array is standard layout");
        for (&p, v) in self.pixels.iter().zip(values.iter()) {
            flat[p] = *v;
        }
        out
    }

    /// Gram matrix scaled to the disc mean, identity for ideal sampling.
    pub fn gram(&self) -> DMatrix<f64> {
        self.modes.tr_mul(&self.modes) / self.pixels.len() as f64
    }
}

pub fn zernike_fit(phase: &RealMap, pupil: &Aperture, n_terms: usize) -> Result<ZernikeCoeffs> {
    ZernikeBasis::new(&phase.grid, pupil, n_terms)?.fit(phase)
}

pub fn zernike_reconstruct(c: &ZernikeCoeffs, grid: &GridSpec, pupil_diameter: f64) -> Result<RealMap> {
    let pupil = Aperture::centered(pupil_diameter)?;
    check_pupil(grid, &pupil)?;
    let mut out = RealMap::zeros(*grid);
    for (t, &v) in c.coeffs.iter().enumerate() {
        if v != 0.0 {
            let z = zernike_eval_on(t + 1, grid, &pupil)?;
            out.data.scaled_add(v, &z.data);
        }
    }
    Ok(out)
}

/// Subtract the fitted piston, tip and tilt inside the pupil.
pub fn remove_tip_tilt(phase: &RealMap, pupil: &Aperture) -> Result<RealMap> {
    let basis = ZernikeBasis::new(&phase.grid, pupil, 3)?;
    let fitted = basis.reconstruct(&basis.fit(phase)?);
    Ok(RealMap {
        grid: phase.grid,
        data: &phase.data - &fitted.data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::make_grid;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn grid() -> GridSpec {
        make_grid(256, 0.1, 633e-9).unwrap()
    }

    #[test]
    fn noll_table() {
        let expect = [
            (1, (0, 0)),
            (2, (1, 1)),
            (3, (1, -1)),
            (4, (2, 0)),
            (5, (2, -2)),
            (6, (2, 2)),
            (7, (3, -1)),
            (8, (3, 1)),
            (9, (3, -3)),
            (10, (3, 3)),
            (11, (4, 0)),
            (16, (5, 1)),
            (21, (5, -5)),
            (22, (6, 0)),
        ];
        for (j, nm) in expect {
            assert_eq!(noll_to_nm(j), nm, "j={j}");
        }
    }

    #[test]
    fn closed_form_values() {
        assert_relative_eq!(zernike_value(1, 0.3, 1.0), 1.0);
        assert_relative_eq!(zernike_value(2, 1.0, 0.0), 2.0, epsilon = 1e-12);
        assert_relative_eq!(zernike_value(3, 1.0, PI / 2.0), 2.0, epsilon = 1e-12);
        // defocus √3(2ρ²−1)
        assert_relative_eq!(zernike_value(4, 0.5, 0.0), 3f64.sqrt() * (-0.5), epsilon = 1e-12);
    }

    #[test]
    fn piston_and_edge_tilt_on_grid() {
        let g = grid();
        let z1 = zernike_eval(1, &g, 0.05).unwrap();
        let mask = Aperture::centered(0.05).unwrap().mask(&g);
        for (v, m) in z1.data.iter().zip(mask.iter()) {
            assert_eq!(*v, if *m { 1.0 } else { 0.0 });
        }
        assert!(zernike_eval(2, &g, 0.2).is_err());
    }

    #[test]
    fn quadrature_normalization() {
        // Gauss-Legendre in ρ² is exact for the polynomial part; uniform θ
        // is exact for the trigonometric part.
        let nodes = 24;
        let (x, w) = gauss_legendre(nodes);
        for j in 1..=21 {
            let mut acc = 0.0;
            let n_theta = 64;
            for (xi, wi) in x.iter().zip(&w) {
                let u = 0.5 * (xi + 1.0);
                let rho = u.sqrt();
                for t in 0..n_theta {
                    let th = 2.0 * PI * t as f64 / n_theta as f64;
                    acc += 0.5 * wi * zernike_value(j, rho, th).powi(2) / n_theta as f64;
                }
            }
            assert!((acc - 1.0).abs() < 1e-9, "j={j}: {acc}");
        }
    }

    fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        for i in 0..n {
            let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            loop {
                let (mut p1, mut p2) = (1.0, 0.0);
                for k in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    p1 = ((2 * k + 1) as f64 * z * p2 - k as f64 * p3) / (k + 1) as f64;
                }
                let pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
                let dz = p1 / pp;
                z -= dz;
                if dz.abs() < 1e-15 {
                    x[i] = z;
                    w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
                    break;
                }
            }
        }
        (x, w)
    }

    #[test]
    fn sampled_normalization_and_gram() {
        let g = make_grid(512, 0.1, 633e-9).unwrap();
        let basis = ZernikeBasis::new(&g, &Aperture::centered(0.09).unwrap(), 21).unwrap();
        let gram = basis.gram();
        for a in 0..21 {
            assert!((gram[(a, a)] - 1.0).abs() < 1e-3, "j={} {}", a + 1, gram[(a, a)]);
            for b in 0..21 {
                if a != b {
                    assert!(gram[(a, b)].abs() < 1e-2);
                }
            }
        }
    }

    #[test]
    fn fit_recovers_single_mode() {
        let g = grid();
        let pupil = Aperture::centered(0.06).unwrap();
        let z4 = zernike_eval_on(4, &g, &pupil).unwrap().scaled(0.7);
        let c = zernike_fit(&z4, &pupil, 15).unwrap();
        assert_eq!(c.n_terms(), 15);
        for j in 1..=15 {
            let want = if j == 4 { 0.7 } else { 0.0 };
            assert!((c.get(j) - want).abs() < 1e-3, "j={j}: {}", c.get(j));
        }
    }

    #[test]
    fn higher_mode_is_orthogonal_to_first_fifteen() {
        let g = grid();
        let pupil = Aperture::centered(0.06).unwrap();
        let z16 = zernike_eval_on(16, &g, &pupil).unwrap();
        let basis = ZernikeBasis::new(&g, &pupil, 15).unwrap();
        let fitted = basis.reconstruct(&basis.fit(&z16).unwrap());
        let resid = RealMap {
            grid: g,
            data: &z16.data - &fitted.data,
        };
        let mask = pupil.mask(&g);
        let ratio = resid.rms_over(&mask) / z16.rms_over(&mask);
        assert!((ratio - 1.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn fit_is_linear_and_ignores_outside() {
        let g = grid();
        let pupil = Aperture::centered(0.06).unwrap();
        let m1 = RealMap::from_fn(g, |x, y| (40.0 * x).sin() + 30.0 * x * y);
        let m2 = RealMap::from_fn(g, |x, y| (25.0 * y).cos() - 100.0 * x * x);
        let basis = ZernikeBasis::new(&g, &pupil, 21).unwrap();
        let (a, b) = (1.7, -0.4);
        let combo = m1.scaled(a).add(&m2.scaled(b)).unwrap();
        let c1 = basis.fit(&m1).unwrap();
        let c2 = basis.fit(&m2).unwrap();
        let c = basis.fit(&combo).unwrap();
        for t in 0..21 {
            assert!((c.coeffs[t] - (a * c1.coeffs[t] + b * c2.coeffs[t])).abs() < 1e-6);
        }
        let mask = pupil.mask(&g);
        let mut outside = m1.clone();
        for (v, m) in outside.data.iter_mut().zip(mask.iter()) {
            if !m {
                *v = 1e3;
            }
        }
        assert_eq!(basis.fit(&outside).unwrap(), c1);
    }

    #[test]
    fn reconstruct_roundtrip() {
        let g = grid();
        let zero = zernike_reconstruct(&ZernikeCoeffs::zeros(10), &g, 0.06).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));

        let mut c = ZernikeCoeffs::zeros(15);
        c.set(7, 0.3);
        let map = zernike_reconstruct(&c, &g, 0.06).unwrap();
        let back = zernike_fit(&map, &Aperture::centered(0.06).unwrap(), 15).unwrap();
        let err: f64 = (0..15).map(|t| (back.coeffs[t] - c.coeffs[t]).powi(2)).sum::<f64>().sqrt();
        assert!(err < 1e-6);

        // fit + residual recomposes the map inside the pupil
        let m = RealMap::from_fn(g, |x, y| (60.0 * x * y).sin());
        let pupil = Aperture::centered(0.06).unwrap();
        let basis = ZernikeBasis::new(&g, &pupil, 36).unwrap();
        let fitted = basis.reconstruct(&basis.fit(&m).unwrap());
        let resid = &m.data - &fitted.data;
        let mask = pupil.mask(&g);
        let rms = |d: &ndarray::Array2<f64>| RealMap { grid: g, data: d.clone() }.rms_over(&mask);
        assert!(rms(&resid) < rms(&m.data));
    }

    #[test]
    fn tip_tilt_removal() {
        let g = grid();
        let pupil = Aperture::centered(0.06).unwrap();
        let mask = pupil.mask(&g);
        let tilt = zernike_eval_on(2, &g, &pupil)
            .unwrap()
            .scaled(1.3)
            .add(&zernike_eval_on(3, &g, &pupil).unwrap().scaled(-0.4))
            .unwrap();
        let out = remove_tip_tilt(&tilt, &pupil).unwrap();
        assert!(out.rms_over(&mask) < 0.01 * tilt.rms_over(&mask));

        let astig = zernike_eval_on(5, &g, &pupil).unwrap();
        let out = remove_tip_tilt(&astig, &pupil).unwrap();
        let diff = (&out.data - &astig.data).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn degenerate_pupil_rejected() {
        let g = make_grid(64, 0.1, 633e-9).unwrap();
        assert!(matches!(
            ZernikeBasis::new(&g, &Aperture::centered(0.02).unwrap(), 3),
            Err(Error::DegeneratePupil(_))
        ));
    }
}
