//! End-to-end acceptance checks. Runs as a plain binary so every check
//! prints its verdict line whether it passes or not.

use std::time::{Duration, Instant};

use oamlink::ao::{run_closed_loop, AoConfig, DmConfig, LoopConfig, QuadCellConfig, SteeringMode, WfsConfig};
use oamlink::field::{make_grid, overlap, Aperture, ComplexField, GridSpec, RealMap};
use oamlink::harness::{emit_report, preset, run_scenario, simulate, Encoding, LinkScenario};
use oamlink::modes::{ang_field, build_space, hybrid_space, oam_field, BasisKind};
use oamlink::security::{evaluate_strategy, fidelity_threshold, CrosstalkMatrix, Strategy};
use oamlink::turbulence::{cn2_to_r0, kolmogorov_structure_function, make_screen, structure_function, TurbulenceParams};
use oamlink::zernike::zernike_eval_on;

const HENE: f64 = 633e-9;
const LAB_POINTS: [f64; 5] = [0.11, 0.3, 0.884, 1.9, 3.06];
const REALIZATIONS: usize = 50;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn thresholds() -> Outcome {
    let expected = [(5, 0.7901), (7, 0.7630), (3, 0.8405), (10, 0.7378)];
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (d, f) in expected {
        let t = fidelity_threshold(d).unwrap();
        worst = worst.max((t - f).abs());
        parts.push(format!("d={d}: {:.4}%", 100.0 * t));
    }
    check(worst <= 0.0005, format!("{} (max dev {:.3} pp)", parts.join(", "), 100.0 * worst))
}

fn mub_identity() -> Outcome {
    let space = build_space(2, 1, 1e-3, BasisKind::Oam).unwrap();
    let grid = GridSpec::default_for(space.max_beam_diameter(), HENE).unwrap();
    let mut worst: f64 = 0.0;
    for &ell in &space.members() {
        let o = oam_field(&space.mode(ell), &grid).unwrap();
        for j in 0..space.dimension {
            let a = ang_field(j, &space, &grid).unwrap();
            let p = overlap(&o, &a).unwrap().norm_sqr();
            worst = worst.max((p - 0.2).abs());
        }
    }
    check(worst <= 1e-6, format!("max |p - 1/5| = {worst:.2e} on a {}² grid", grid.n))
}

fn kolmogorov() -> Outcome {
    let r0 = 0.02;
    let grid = make_grid(512, 0.5, HENE).unwrap();
    let params = TurbulenceParams {
        cn2: 0.0,
        path_length: 1000.0,
        wavelength: HENE,
        wind_velocity: (0.0, 0.0),
        n_screens: 1,
        outer_scale: None,
        subharmonic_levels: 3,
    }
    .with_r0(r0)
    .unwrap();
    let lags: Vec<usize> = vec![2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64, 96, 128];
    let n = 200;
    let mut acc = vec![0.0; lags.len()];
    for i in 0..n {
        let s = make_screen(&params, &grid, i as u64).unwrap();
        for (a, v) in acc.iter_mut().zip(structure_function(&s.phase, &lags)) {
            *a += v / n as f64;
        }
    }
    let ratios: Vec<f64> = lags
        .iter()
        .zip(&acc)
        .map(|(&l, a)| a / kolmogorov_structure_function(l as f64 * grid.pitch(), r0))
        .collect();
    let worst = ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
    check(
        worst <= 0.10,
        format!(
            "{n} screens, D/D_kolmogorov in [{:.3}, {:.3}] for r in [2 px, extent/4]",
            ratios.iter().cloned().fold(f64::INFINITY, f64::min),
            ratios.iter().cloned().fold(0.0, f64::max)
        ),
    )
}

fn campus_d_over_r0() -> Outcome {
    let r0 = cn2_to_r0(1.9e-14, 340.0, HENE).unwrap();
    let x = 0.0762 / r0;
    check((2.10..=2.30).contains(&x), format!("r0 = {:.4} m, D/r0 = {x:.3}", r0))
}

fn no_ao(s: &LinkScenario) -> LinkScenario {
    let mut s = s.clone();
    s.ao = None;
    s.n_realizations = REALIZATIONS;
    s.frames_per_realization = 1;
    s.warmup_frames = 0;
    s
}

fn lab_sweep() -> Outcome {
    let base = preset("lab").unwrap();
    let means: Vec<f64> = LAB_POINTS
        .iter()
        .map(|&x| run_scenario(&no_ao(&base.with_d_over_r0(x).unwrap())).unwrap().results.oam.mean)
        .collect();
    let decreasing = means.windows(2).all(|w| w[1] < w[0]);
    let pass = decreasing && means[0] >= 0.85 && means[4] <= 0.5;
    let shown: Vec<String> = LAB_POINTS
        .iter()
        .zip(&means)
        .map(|(x, f)| format!("{x}: {f:.4}"))
        .collect();
    check(pass, format!("OAM F by D/r0 {{{}}}, {REALIZATIONS} realizations", shown.join(", ")))
}

fn ao_benefit() -> Outcome {
    let base = preset("lab").unwrap();
    let mut rows = Vec::new();
    for x in [0.884, 3.06] {
        let mut s = base.with_d_over_r0(x).unwrap();
        s.n_realizations = REALIZATIONS;
        let r = run_scenario(&s).unwrap();
        let off = r.uncorrected.as_ref().unwrap().oam.clone();
        rows.push((x, r.results.oam.mean, r.results.oam.std, off.mean, off.std));
    }
    let gain: Vec<f64> = rows.iter().map(|r| r.1 - r.3).collect();
    let (_, _, std_on, _, std_off) = rows[0];
    let pass = gain[0] >= 0.03 && std_on < std_off && gain[1] < gain[0];
    let shown: Vec<String> = rows
        .iter()
        .map(|(x, on, son, off, soff)| format!("{x}: on {on:.4}±{son:.4} off {off:.4}±{soff:.4}"))
        .collect();
    check(
        pass,
        format!(
            "{}; gain {:.1} pp vs {:.1} pp",
            shown.join("; "),
            100.0 * gain[0],
            100.0 * gain[1]
        ),
    )
}

fn spacing() -> Outcome {
    let mut s = no_ao(&preset("lab").unwrap().with_d_over_r0(1.9).unwrap());
    let waist = s.encoding.spatial().waist;
    s.encoding = Encoding::Spatial(build_space(4, 1, waist, BasisKind::Oam).unwrap());
    let ens = simulate(&s).unwrap();
    let base = ens.oam_matrices();
    let f: Vec<f64> = [1, 2, 4]
        .iter()
        .map(|&k| evaluate_strategy(&base, Strategy::Spacing { k }).unwrap().stats.mean)
        .collect();
    let pass = f[1] - f[0] >= 0.05 && f[2] > f[1];
    check(
        pass,
        format!(
            "D/r0 = 1.9, spacing 1/2/4 (d = 9/5/3): {:.4} / {:.4} / {:.4}",
            f[0], f[1], f[2]
        ),
    )
}

fn hybrid() -> Outcome {
    let space = build_space(2, 1, 1e-3, BasisKind::Oam).unwrap();
    let h = hybrid_space(space, 0.9823).unwrap();
    let joint = h.joint_fidelity(0.78);
    let t5 = fidelity_threshold(5).unwrap();
    let t10 = fidelity_threshold(h.joint_dimension()).unwrap();
    let m = CrosstalkMatrix::from_raw(
        BasisKind::Oam,
        space.members(),
        (0..5)
            .map(|i| (0..5).map(|j| if i == j { 0.78 } else { 0.055 }).collect())
            .collect(),
    )
    .unwrap();
    let none = evaluate_strategy(std::slice::from_ref(&m), Strategy::None).unwrap();
    let hyb = evaluate_strategy(&[m], Strategy::Hybrid { pol_fidelity: 0.9823 }).unwrap();
    let pass = !none.secure && hyb.secure && 0.78 < t5 && joint > t10 && (joint - hyb.stats.mean).abs() < 1e-12;
    check(
        pass,
        format!("d=5: 0.7800 vs {t5:.4} insecure; d=10: {joint:.4} vs {t10:.4} secure"),
    )
}

fn closed_loop() -> Outcome {
    let g = make_grid(256, 0.02, HENE).unwrap();
    let d = 0.016;
    let pupil = Aperture::centered(d).unwrap();
    let weights = [0.5, -0.4, 0.3, 0.35, -0.3, 0.25, 0.2, -0.3, 0.35];
    let norm = weights.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
    let mut phase = RealMap::zeros(g);
    for (k, a) in weights.iter().enumerate() {
        phase
            .data
            .scaled_add(a / norm, &zernike_eval_on(k + 2, &g, &pupil).unwrap().data);
    }
    let beacon = ComplexField::gaussian(g, 0.012, (0.0, 0.0)).with_phase(&phase).unwrap();
    let wfs = WfsConfig {
        n_lenslets: 23,
        n_terms: 15,
        frame_rate: 100.0,
        slope_noise_rms: 0.0,
        reference_rate: 100.0,
        pupil_diameter: d,
        validity_threshold: 0.01,
    };
    let control = LoopConfig {
        gain: 0.3,
        loop_rate: 100.0,
        latency_frames: 1,
        tip_tilt_gain: 0.3,
    };
    let quadcell = QuadCellConfig {
        beam_radius: 0.012,
        noise_rms: 0.0,
    };
    let run = |dm: Option<DmConfig>, steering| {
        let cfg = AoConfig {
            wfs,
            dm,
            control,
            steering,
            quadcell,
        };
        run_closed_loop(&cfg, &g, 200, 1, |_| Ok(beacon.clone()), |_, _| Ok(())).unwrap()
    };
    let full = run(Some(DmConfig::spanning(12, d, 0.15, 50.0).unwrap()), SteeringMode::None);
    let input = full.rows[0].residual_rms_rad;
    let ratio = full.rows.last().unwrap().residual_rms_rad / input;

    let tt = run(None, SteeringMode::Angle);
    let (first, last) = (&tt.residual_coeffs[0], tt.residual_coeffs.last().unwrap());
    let tilt = |c: &oamlink::zernike::ZernikeCoeffs| c.get(2).hypot(c.get(3));
    let removed = 1.0 - tilt(last) / tilt(first);
    let worst_high = (4..=10)
        .map(|j| (last.get(j) - first.get(j)).abs() / first.get(j).abs())
        .fold(0.0, f64::max);
    let pass = ratio <= 0.2 && removed >= 0.8 && worst_high <= 0.05;
    check(
        pass,
        format!(
            "12×12 DM residual {:.1}% of {input:.3} rad; tip-tilt loop removes {:.1}% of Z2/Z3, Z4..Z10 change ≤ {:.2}%",
            100.0 * ratio,
            100.0 * removed,
            100.0 * worst_high
        ),
    )
}

fn mode_diffraction() -> Outcome {
    let mut s = preset("campus").unwrap();
    s.turbulence.cn2 = 0.0;
    let eff: Vec<f64> = (0..=3)
        .map(|l| oamlink::harness::mode_efficiency(&s, l).unwrap().0)
        .collect();
    let decreasing = eff.windows(2).all(|w| w[1] < w[0]);
    let gap = eff[0] - eff[3];
    check(
        decreasing && gap >= 0.03,
        format!(
            "efficiency ℓ=0..3: {}; gap {:.2} pp",
            eff.iter().map(|e| format!("{:.4}", e)).collect::<Vec<_>>().join(", "),
            100.0 * gap
        ),
    )
}

fn strip_timestamp(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with("\"generated_unix_s\""))
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism() -> Outcome {
    let mut s = preset("lab").unwrap();
    s.n_realizations = 3;
    s.frames_per_realization = 6;
    s.warmup_frames = 3;
    s.seed = 2024;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let texts: Vec<String> = dirs
        .iter()
        .map(|d| {
            emit_report(&run_scenario(&s).unwrap(), d.path()).unwrap();
            std::fs::read_to_string(d.path().join("report.json")).unwrap()
        })
        .collect();
    let same = strip_timestamp(&texts[0]) == strip_timestamp(&texts[1]);
    let mut other = s.clone();
    other.seed = 2025;
    let differs = run_scenario(&other).unwrap().results.oam.series != run_scenario(&s).unwrap().results.oam.series;
    check(
        same && differs,
        format!(
            "lab preset, seed {}: report.json identical modulo timestamp ({} bytes); another seed differs: {differs}",
            s.seed,
            texts[0].len()
        ),
    )
}

fn main() {
    let checks: Vec<(&str, Duration, fn() -> Outcome)> = vec![
        ("security thresholds", Duration::from_secs(1), thresholds),
        ("MUB identity", Duration::from_secs(10), mub_identity),
        ("Kolmogorov statistics", Duration::from_secs(300), kolmogorov),
        ("Cn² to D/r0", Duration::from_secs(1), campus_d_over_r0),
        ("turbulence-fidelity trend", Duration::from_secs(1800), lab_sweep),
        ("AO benefit and regime", Duration::from_secs(2700), ao_benefit),
        ("mode spacing", Duration::from_secs(1800), spacing),
        ("hybrid ancilla flip", Duration::from_secs(1), hybrid),
        ("closed loop", Duration::from_secs(300), closed_loop),
        ("mode-dependent diffraction", Duration::from_secs(120), mode_diffraction),
        ("determinism", Duration::from_secs(300), determinism),
    ];
    let mut failed = 0;
    for (name, budget, f) in checks {
        let t = Instant::now();
        let out = f();
        let took = t.elapsed();
        let pass = out.pass && took <= budget;
        if !pass {
            failed += 1;
        }
        println!(
            "acceptance | {name}: {} | {} | {:.2?} (budget {:?})",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took,
            budget
        );
    }
    println!("acceptance | {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
