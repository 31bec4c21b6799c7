//! Property tests over randomly generated inputs.

use physgrid::autodiff::Tape;
use physgrid::data_io::{chronological_split, decode_grid, encode_grid, Axis, GridField, GridMeta, SplitRanges};
use physgrid::field_model::{decode_checkpoint, encode_checkpoint, init_fieldnet, layer_widths, param_count, FieldNet};
use physgrid::finite_difference::{fd_derivative, fd_time_of_prediction, GridAxis, Scheme, Stencil1d, StencilKind};
use physgrid::forecasting::{training_windows, window_count, windows_targeting};
use physgrid::metrics::{acc, rmse, Climatology};
use physgrid::pde_library::{default_library, fit_coefficients, EquationSystem, FitOptions, TermMatrix};
use physgrid::tensor::Tensor;
use physgrid::{ErrorClass, Scalar};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_field(nx: usize, ny: usize, nt: usize, h: usize, seed: u64) -> GridField<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let meta = GridMeta::new(Axis::new(-1.0, 0.25, nx), Axis::new(0.5, 0.5, ny), Axis::new(0.0, 0.1, nt));
    let names = (0..h).map(|v| format!("v{v}")).collect();
    let data = (0..nx * ny * nt * h).map(|_| rng.gen_range(-3.0..3.0)).collect();
    GridField::new(meta, names, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn grid_files_round_trip_bit_exact(nx in 1usize..6, ny in 1usize..6, nt in 1usize..5, h in 1usize..3, seed: u64) {
        let f = random_field(nx, ny, nt, h, seed);
        let bytes = encode_grid(&f);
        let back: GridField<f64> = decode_grid(&bytes).unwrap();
        prop_assert_eq!(&back, &f);
        prop_assert_eq!(encode_grid(&back), bytes);
    }

    #[test]
    fn truncated_grid_files_are_data_errors(seed: u64, cut in 0.0f64..1.0) {
        let bytes = encode_grid(&random_field(3, 2, 2, 1, seed));
        let at = ((bytes.len() as f64) * cut) as usize;
        let err = decode_grid::<f64>(&bytes[..at]).unwrap_err();
        prop_assert_eq!(err.class(), ErrorClass::Data);
    }

    #[test]
    fn checkpoints_round_trip_bit_exact(hidden in prop::collection::vec(1usize..9, 1..4), outputs in 1usize..3, seed: u64) {
        let widths = layer_widths(&hidden, outputs);
        let net: FieldNet<f64> = init_fieldnet(&widths, seed).unwrap();
        prop_assert_eq!(net.param_count(), param_count(&widths));
        let bytes = encode_checkpoint(&net);
        let back: FieldNet<f64> = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back, &net);
        let at = bytes.len() - 1 - (seed as usize % (bytes.len() - 1));
        prop_assert!(decode_checkpoint::<f64>(&bytes[..at]).is_err());
    }

    #[test]
    fn equation_json_round_trips_bit_exact(bits in prop::collection::vec(any::<u64>(), 1..64), lambda in 1e-12f64..1.0) {
        let names = vec!["u".to_string(), "v".to_string()];
        let mut sys = EquationSystem::unfitted(names.clone(), default_library(&names, &[]).unwrap(), true);
        sys.lambda = lambda;
        let mut k = 0;
        for eq in &mut sys.equations {
            for c in &mut eq.coefficients {
                let v = f64::from_bits(bits[k % bits.len()]);
                *c = if v.is_finite() { v } else { 1.0 / 3.0 };
                k += 1;
            }
            eq.residual_rms = f64::from_bits(bits[0] >> 2);
        }
        let back = EquationSystem::from_json(&sys.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, sys);
    }

    /// Reverse-mode gradient of `mean(tanh(X·W + b)²)` against central
    /// differences.
    #[test]
    fn tape_gradient_matches_finite_differences(rows in 1usize..5, inner in 1usize..4, cols in 1usize..4, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let x = Tensor::matrix(rows, inner, draw(rows * inner)).unwrap();
        let w0 = draw(inner * cols);
        let b0 = draw(cols);
        let loss = |w: &[f64], b: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(x.clone());
            let wv = tape.leaf(Tensor::matrix(inner, cols, w.to_vec()).unwrap());
            let bv = tape.leaf(Tensor::vector(b.to_vec()));
            let z = tape.matmul(xv, wv).unwrap();
            let z = tape.add_row(z, bv).unwrap();
            let z = tape.tanh(z).unwrap();
            let z = tape.square(z).unwrap();
            let out = tape.mean(z).unwrap();
            let g = tape.grad(out, &[wv, bv]).unwrap();
            (tape.value(out).item().unwrap(), g[0].data().to_vec(), g[1].data().to_vec())
        };
        let (_, gw, gb) = loss(&w0, &b0);
        let eps = 1e-6;
        for j in 0..w0.len() {
            let (mut p, mut m) = (w0.clone(), w0.clone());
            p[j] += eps;
            m[j] -= eps;
            let fd = (loss(&p, &b0).0 - loss(&m, &b0).0) / (2.0 * eps);
            prop_assert!((fd - gw[j]).abs() < 1e-7, "w[{}]: {} vs {}", j, fd, gw[j]);
        }
        for j in 0..b0.len() {
            let (mut p, mut m) = (b0.clone(), b0.clone());
            p[j] += eps;
            m[j] -= eps;
            let fd = (loss(&w0, &p).0 - loss(&w0, &m).0) / (2.0 * eps);
            prop_assert!((fd - gb[j]).abs() < 1e-7);
        }
    }

    /// Central stencils differentiate quadratics exactly away from the
    /// boundary.
    #[test]
    fn central_stencils_exact_on_quadratics(c0 in -2.0f64..2.0, c1 in -2.0f64..2.0, c2 in -2.0f64..2.0, step in 0.05f64..0.5) {
        let n = 9;
        let meta = GridMeta::new(Axis::new(0.3, step, n), Axis::new(0.0, 1.0, 1), Axis::new(0.0, 1.0, 1));
        let f = GridField::from_fn(meta, vec!["u".into()], |x, _y, _t| vec![c0 + c1 * x + c2 * x * x]).unwrap();
        let d1 = fd_derivative(&f, StencilKind::central(GridAxis::X, 1), 0).unwrap();
        let d2 = fd_derivative(&f, StencilKind::central(GridAxis::X, 2), 0).unwrap();
        for i in 1..n - 1 {
            let x = 0.3 + step * i as f64;
            prop_assert!(!d1.boundary[i]);
            prop_assert!((d1.field.data()[i] - (c1 + 2.0 * c2 * x)).abs() < 1e-9);
            prop_assert!((d2.field.data()[i] - 2.0 * c2).abs() < 1e-7);
        }
        prop_assert!(d1.boundary[0] && d1.boundary[n - 1]);
    }

    /// Every stencil annihilates constants and reproduces slopes.
    #[test]
    fn stencils_are_consistent(n in 3usize..12, step in 0.01f64..1.0, scheme in prop::sample::select(vec![Scheme::Forward, Scheme::Backward, Scheme::Central])) {
        let s = Stencil1d::new(scheme, 1, n, step).unwrap();
        for i in 0..n {
            prop_assert!(s.apply_at(i, |_| 4.0f64).abs() < 1e-9);
            prop_assert!((s.apply_at(i, |j| 3.0 * step * j as f64) - 3.0).abs() < 1e-9);
        }
    }

    /// Frames linear in time have the slope as their discrete derivative.
    #[test]
    fn time_derivative_of_linear_frames_is_slope(r in 1usize..6, flen in 1usize..8, dt in 0.01f64..1.0, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: Vec<f64> = (0..flen).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let slope: Vec<f64> = (0..flen).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let frame = |k: f64| -> Vec<f64> { base.iter().zip(&slope).map(|(b, s)| b + s * k * dt).collect() };
        let pred: Vec<f64> = (1..=r).flat_map(|k| frame(k as f64)).collect();
        let d = fd_time_of_prediction(&frame(0.0), &pred, flen, dt).unwrap();
        for (j, v) in d.iter().enumerate() {
            prop_assert!((v - slope[j % flen]).abs() < 1e-9);
        }
    }

    #[test]
    fn chronological_split_partitions_frames(nt in 10usize..400) {
        let r = SplitRanges::for_frames(nt).unwrap();
        let (a, b, c) = r.sizes();
        prop_assert_eq!(a + b + c, nt);
        prop_assert_eq!(r.train.start, 0);
        prop_assert_eq!(r.train.end, r.val.start);
        prop_assert_eq!(r.val.end, r.test.start);
        prop_assert_eq!(a, nt * 8 / 10);
        prop_assert!(b >= 1 && c >= 1);
    }

    #[test]
    fn forecast_windows_stay_in_range(nt in 4usize..120, s in 1usize..10, r in 1usize..9) {
        match window_count(nt, s, r) {
            Ok(q) => {
                prop_assert_eq!(q, nt - r - s - 1);
                let w = training_windows(nt, s, r).unwrap();
                prop_assert_eq!(w.len(), q);
                for i in w {
                    prop_assert!(i >= s && i + r < nt);
                }
            }
            Err(_) => prop_assert!(s + r + 2 > nt),
        }
        let lo = nt / 2;
        for i in windows_targeting(lo..nt, s, r) {
            prop_assert!(i >= s && i + r < nt && i + r >= lo);
        }
    }

    #[test]
    fn rmse_is_shift_magnitude_and_acc_is_bounded(seed: u64, shift in -2.0f64..2.0) {
        let truth = random_field(4, 3, 5, 2, seed);
        let shifted = truth.with_data(truth.data().iter().map(|v| v + shift).collect()).unwrap();
        for v in rmse(&shifted, &truth, None).unwrap() {
            prop_assert!((v - shift.abs()).abs() < 1e-12);
        }
        let other = random_field(4, 3, 5, 2, seed.wrapping_add(1));
        let clim = Climatology::from_training(&random_field(4, 3, 3, 2, seed.wrapping_add(2)));
        for a in acc(&other, &truth, &clim).unwrap() {
            prop_assert!(a.value.abs() <= 1.0 + 1e-12);
        }
        let ab = rmse(&other, &truth, None).unwrap();
        let ba = rmse(&truth, &other, None).unwrap();
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn ridge_fit_recovers_planted_coefficients(rows in 12usize..60, cols in 1usize..5, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xi: Vec<f64> = (0..cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target = (0..rows).map(|r| (0..cols).map(|c| data[r * cols + c] * xi[c]).sum()).collect();
        let m = TermMatrix::new(rows, cols, data, target).unwrap();
        let fit = fit_coefficients(&m, FitOptions { lambda: 0.0, threshold: None }).unwrap();
        for (a, b) in fit.coefficients.iter().zip(&xi) {
            prop_assert!((a - b).abs() < 1e-8, "{} vs {}", a, b);
        }
        prop_assert!(fit.residual_rms < 1e-9);
    }

    #[test]
    fn precision_cast_round_trips_through_f32(seed: u64) {
        let f = random_field(3, 3, 2, 1, seed).cast::<f32>();
        let back: GridField<f32> = decode_grid(&encode_grid(&f)).unwrap();
        prop_assert_eq!(&back, &f);
        for (a, b) in f.cast::<f64>().data().iter().zip(f.data()) {
            prop_assert_eq!(*a, b.f64());
        }
    }
}

#[test]
fn split_needs_ten_frames() {
    assert!(chronological_split(&random_field(2, 2, 9, 1, 0)).is_err());
    assert!(chronological_split(&random_field(2, 2, 10, 1, 0)).is_ok());
}
