//! Square 2-D FFT helpers over `ndarray` buffers.
//!
//! Transforms are unnormalized in the forward direction; the inverse divides
//! by `n²`, so `ifft2(fft2(a)) == a`. Plans are cached per thread.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        cache
            .entry((n, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .clone()
    })
}

fn transform(data: &mut Array2<Complex64>, inverse: bool) {
    let (rows, cols) = data.dim();
    let row_plan = plan(cols, inverse);
    let slice = data
        .as_slice_mut()
        .expect("fft buffers are standard-layout");
    row_plan.process(slice);

    // columns: transpose into scratch, transform rows, transpose back
    let col_plan = plan(rows, inverse);
    let mut t = data.t().as_standard_layout().into_owned();
    col_plan.process(t.as_slice_mut().expect("standard layout"));
    data.assign(&t.t());
}

/// Forward 2-D FFT in place.
pub fn fft2(data: &mut Array2<Complex64>) {
    transform(data, false);
}

/// Inverse 2-D FFT in place, normalized by the sample count.
pub fn ifft2(data: &mut Array2<Complex64>) {
    transform(data, true);
    let scale = 1.0 / (data.len() as f64);
    data.mapv_inplace(|v| v * scale);
}

/// Signed frequency index of FFT bin `k` for a length-`n` transform.
pub fn freq_index(k: usize, n: usize) -> i64 {
    if k < n.div_ceil(2) {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Apply `f(row_freq_index, col_freq_index, value)` over a spectrum.
pub(crate) fn for_each_freq(
    spec: &mut Array2<Complex64>,
    mut f: impl FnMut(i64, i64, &mut Complex64),
) {
    let (rows, cols) = spec.dim();
    for (r, mut row) in spec.axis_iter_mut(Axis(0)).enumerate() {
        let fr = freq_index(r, rows);
        for (c, v) in row.iter_mut().enumerate() {
            f(fr, freq_index(c, cols), v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_recovers_input() {
        let n = 64;
        let a = Array2::from_shape_fn((n, n), |(i, j)| {
            Complex64::new((i as f64 * 0.3).sin(), (j as f64 * 0.7).cos())
        });
        let mut b = a.clone();
        fft2(&mut b);
        ifft2(&mut b);
        let err = (&a - &b).iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn single_tone_lands_in_one_bin() {
        let n = 32;
        let mut a = Array2::from_shape_fn((n, n), |(i, j)| {
            let phase = 2.0 * std::f64::consts::PI * (3.0 * j as f64 + 5.0 * i as f64) / n as f64;
            Complex64::from_polar(1.0, phase)
        });
        fft2(&mut a);
        assert!((a[[5, 3]].norm() - (n * n) as f64).abs() < 1e-9);
        assert!(a[[0, 0]].norm() < 1e-9);
    }

    #[test]
    fn freq_index_wraps() {
        assert_eq!(freq_index(0, 8), 0);
        assert_eq!(freq_index(3, 8), 3);
        assert_eq!(freq_index(4, 8), -4);
        assert_eq!(freq_index(7, 8), -1);
    }
}
