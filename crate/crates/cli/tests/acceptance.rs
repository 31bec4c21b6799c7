//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Failures are reported but do not fail the process unless
//! `ACCEPTANCE_STRICT=1` is set.

use std::process::Command;
use std::time::Instant;

use physgrid::autodiff::Tape;
use physgrid::data_io::synthetic::{ForcingSpec, InitialCondition};
use physgrid::data_io::{bicubic_upsample, decode_grid, encode_grid, generate, CaseId, GridField, SyntheticCase};
use physgrid::field_model::{
    decode_checkpoint, derivative_bundle, encode_checkpoint, init_fieldnet, input_gradient, second_partial, AxisAffine, Coord, FieldNet,
    NetVars, NormalizationSpec, Partial, VarAffine,
};
use physgrid::finite_difference::{Scheme, Stencil1d};
use physgrid::forecasting::{
    finetune, pretrain, window_rmse, ForecastConfig, ForecastData, ForecastModel, ForecastOutcome,
};
use physgrid::metrics::rmse;
use physgrid::pde_library::EquationSystem;
use physgrid::tensor::Tensor;
use physgrid::training::{data_loss, downscale, q_columns, train, DataBatch, Resolution, TrainConfig, TrainData, TrainOutcome};
use physgrid::{Error, ErrorClass, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- 1

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-6)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

type Build = fn(&mut Tape<f64>, &[physgrid::autodiff::Var]) -> physgrid::autodiff::Var;

/// Worst relative gradient error of `Σ w ⊙ op(inputs)` over all inputs.
fn primitive_error(rng: &mut ChaCha8Rng, inputs: Vec<Tensor<f64>>, build: Build) -> f64 {
    let run = |xs: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> (f64, Vec<Tensor<f64>>, Vec<usize>) {
        let mut tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        let w = weights.cloned().unwrap_or_else(|| Tensor::full(&shape, 1.0));
        let wv = tape.constant(w);
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod).unwrap();
        let g = tape.grad(loss, &vars).unwrap();
        (tape.value(loss).item().unwrap(), g, shape)
    };
    let (_, _, shape) = run(&inputs, None);
    let w = rand_tensor(rng, &shape);
    let (_, grads, _) = run(&inputs, Some(&w));
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let mut fd = Vec::with_capacity(x.len());
        for j in 0..x.len() {
            let mut p = inputs.clone();
            let mut m = inputs.clone();
            p[k].data_mut()[j] += eps;
            m[k].data_mut()[j] -= eps;
            fd.push((run(&p, Some(&w)).0 - run(&m, Some(&w)).0) / (2.0 * eps));
        }
        worst = worst.max(rel_err(grads[k].data(), &fd));
    }
    worst
}

fn random_net(rng: &mut ChaCha8Rng, seed: u64) -> FieldNet<f64> {
    let depth = rng.gen_range(1..4);
    let mut widths = vec![3];
    for _ in 0..depth {
        widths.push(rng.gen_range(2..9));
    }
    let h = rng.gen_range(1..3);
    widths.push(h);
    let axis = |rng: &mut ChaCha8Rng| AxisAffine {
        offset: rng.gen_range(-1.0..1.0),
        scale: rng.gen_range(0.5..3.0),
    };
    let norm = NormalizationSpec {
        x: axis(rng),
        y: axis(rng),
        t: axis(rng),
        outputs: (0..h)
            .map(|v| VarAffine {
                name: format!("v{v}"),
                mean: rng.gen_range(-1.0..1.0),
                std: rng.gen_range(0.5..2.0),
            })
            .collect(),
        source_dims: [4, 4, 4],
    };
    init_fieldnet::<f64>(&widths, seed).unwrap().with_normalization(norm).unwrap()
}

fn criterion_1() -> Verdict {
    let prims: [(&str, Build, fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>); 15] = [
        ("add", |t, v| t.add(v[0], v[1]).unwrap(), |r| vec![rand_tensor(r, &[3, 2]), rand_tensor(r, &[3, 2])]),
        ("sub", |t, v| t.sub(v[0], v[1]).unwrap(), |r| vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[2, 3])]),
        ("mul", |t, v| t.mul(v[0], v[1]).unwrap(), |r| vec![rand_tensor(r, &[4]), rand_tensor(r, &[4])]),
        ("scale", |t, v| t.scale(v[0], -1.7).unwrap(), |r| vec![rand_tensor(r, &[2, 2])]),
        ("scale_shift", |t, v| t.scale_shift(v[0], 0.3, 2.0).unwrap(), |r| vec![rand_tensor(r, &[3])]),
        ("add_row", |t, v| t.add_row(v[0], v[1]).unwrap(), |r| vec![rand_tensor(r, &[3, 2]), rand_tensor(r, &[2])]),
        ("sum_rows", |t, v| t.sum_rows(v[0]).unwrap(), |r| vec![rand_tensor(r, &[4, 3])]),
        ("broadcast", |t, v| t.broadcast(v[0], &[2, 3]).unwrap(), |r| vec![rand_tensor(r, &[1])]),
        ("reshape", |t, v| t.reshape(v[0], &[3, 2]).unwrap(), |r| vec![rand_tensor(r, &[2, 3])]),
        ("matmul", |t, v| t.matmul(v[0], v[1]).unwrap(), |r| vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[4, 2])]),
        ("transpose", |t, v| t.transpose(v[0]).unwrap(), |r| vec![rand_tensor(r, &[2, 3])]),
        ("tanh", |t, v| t.tanh(v[0]).unwrap(), |r| vec![rand_tensor(r, &[5])]),
        ("square", |t, v| t.square(v[0]).unwrap(), |r| vec![rand_tensor(r, &[2, 2])]),
        ("sum", |t, v| t.sum(v[0]).unwrap(), |r| vec![rand_tensor(r, &[3, 3])]),
        ("mean", |t, v| t.mean(v[0]).unwrap(), |r| vec![rand_tensor(r, &[2, 4])]),
    ];
    let mut worst_prim = (0.0f64, "");
    let (mut worst_param, mut worst_input, mut worst_jet, mut worst_sym) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        for (name, build, inputs) in &prims {
            let xs = inputs(&mut rng);
            let e = primitive_error(&mut rng, xs, *build);
            if e > worst_prim.0 {
                worst_prim = (e, name);
            }
        }

        let mut net = random_net(&mut rng, trial);
        let h = net.output_width();
        let batch = 3;
        let coords: Vec<Coord> = (0..batch)
            .map(|_| Coord::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let target: Vec<f64> = (0..batch * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let input = Tensor::matrix(batch, 3, coords.iter().flat_map(|c| [c.x, c.y, c.t]).collect()).unwrap();
        let loss_of = |net: &FieldNet<f64>| -> f64 {
            let out = net.forward_normalized(&coords).unwrap();
            out.data().iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (batch * h) as f64
        };
        let mut tape = Tape::new();
        let vars = net.register(&mut tape, true).unwrap();
        let x = tape.constant(input.clone());
        let y = net.forward_on_tape(&mut tape, &vars, x).unwrap();
        let tv = tape.constant(Tensor::matrix(batch, h, target.clone()).unwrap());
        let d = tape.sub(y, tv).unwrap();
        let sq = tape.square(d).unwrap();
        let l = tape.mean(sq).unwrap();
        let g = NetVars::flatten(&tape.grad(l, &vars.all()).unwrap());
        let eps = 1e-6;
        let mut fd = Vec::with_capacity(g.len());
        for j in 0..net.param_count() {
            let p0 = net.params()[j];
            net.params_mut()[j] = p0 + eps;
            let lp = loss_of(&net);
            net.params_mut()[j] = p0 - eps;
            let lm = loss_of(&net);
            net.params_mut()[j] = p0;
            fd.push((lp - lm) / (2.0 * eps));
        }
        worst_param = worst_param.max(rel_err(&g, &fd));

        // Physical-coordinate derivatives against differences of predict().
        let norm = net.normalization().clone();
        let phys = |c: &Coord| norm.physical(*c);
        let at = |p: (f64, f64, f64)| net.predict(&[norm.coord(p.0, p.1, p.2)]).unwrap().data().to_vec();
        let c0 = coords[0];
        let p0 = phys(&c0);
        let shift = |p: (f64, f64, f64), a: usize, e: f64| match a {
            0 => (p.0 + e, p.1, p.2),
            1 => (p.0, p.1 + e, p.2),
            _ => (p.0, p.1, p.2 + e),
        };
        let ig = input_gradient(&net, c0).unwrap();
        let (mut got, mut want) = (Vec::new(), Vec::new());
        for a in 0..3 {
            let (up, dn) = (at(shift(p0, a, eps)), at(shift(p0, a, -eps)));
            for c in 0..h {
                got.push(ig[c][a]);
                want.push((up[c] - dn[c]) / (2.0 * eps));
            }
        }
        worst_input = worst_input.max(rel_err(&got, &want));

        let partials = [Partial::X, Partial::Y, Partial::T, Partial::XX, Partial::YY, Partial::TT, Partial::XY];
        let bundle = derivative_bundle(&net, &[c0], &partials).unwrap();
        let e2 = 1e-4;
        let base = at(p0);
        let (mut got, mut want) = (Vec::new(), Vec::new());
        for p in partials {
            for c in 0..h {
                got.push(bundle.get(c, p).unwrap()[0]);
                let fd = match p {
                    Partial::X | Partial::Y | Partial::T => {
                        let a = [Partial::X, Partial::Y, Partial::T].iter().position(|q| *q == p).unwrap();
                        (at(shift(p0, a, eps))[c] - at(shift(p0, a, -eps))[c]) / (2.0 * eps)
                    }
                    Partial::XX | Partial::YY | Partial::TT => {
                        let a = [Partial::XX, Partial::YY, Partial::TT].iter().position(|q| *q == p).unwrap();
                        (at(shift(p0, a, e2))[c] - 2.0 * base[c] + at(shift(p0, a, -e2))[c]) / (e2 * e2)
                    }
                    _ => {
                        let pp = at(shift(shift(p0, 0, e2), 1, e2))[c];
                        let pm = at(shift(shift(p0, 0, e2), 1, -e2))[c];
                        let mp = at(shift(shift(p0, 0, -e2), 1, e2))[c];
                        let mm = at(shift(shift(p0, 0, -e2), 1, -e2))[c];
                        (pp - pm - mp + mm) / (4.0 * e2 * e2)
                    }
                };
                want.push(fd);
            }
        }
        worst_jet = worst_jet.max(rel_err(&got, &want));

        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            let a = second_partial(&net, c0, i, j).unwrap();
            let b = second_partial(&net, c0, j, i).unwrap();
            for (u, v) in a.iter().zip(&b) {
                worst_sym = worst_sym.max((u - v).abs());
            }
        }
    }
    let pass = worst_prim.0 <= 1e-4 && worst_param <= 1e-4 && worst_input <= 1e-4 && worst_jet <= 1e-4 && worst_sym <= 1e-8;
    verdict(
        pass,
        format!(
            "100 trials: primitives max rel {:.1e} ({}), params {:.1e}, input grad {:.1e}, jets {:.1e} (tol 1e-4); mixed-partial asymmetry {:.1e} (tol 1e-8)",
            worst_prim.0, worst_prim.1, worst_param, worst_input, worst_jet, worst_sym
        ),
    )
}

// ---------------------------------------------------------------- 2

fn slope(hs: &[f64], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

fn criterion_2() -> Verdict {
    // Max error of d/dx and d²/dx² of sin(x + 0.4) on [0, 2], away from the ends.
    let order = |scheme: Scheme, deriv: u8| -> f64 {
        let (mut hs, mut errs) = (Vec::new(), Vec::new());
        for n in [17usize, 33, 65, 129, 257] {
            let h = 2.0 / (n - 1) as f64;
            let s = Stencil1d::new(scheme, deriv, n, h).unwrap();
            let f = |j: usize| (j as f64 * h + 0.4).sin();
            let exact = |x: f64| if deriv == 1 { (x + 0.4).cos() } else { -(x + 0.4).sin() };
            let mut worst = 0.0f64;
            for i in n / 4..3 * n / 4 {
                worst = worst.max((s.apply_at(i, f) - exact(i as f64 * h)).abs());
            }
            hs.push(h);
            errs.push(worst);
        }
        slope(&hs, &errs)
    };
    let c1 = order(Scheme::Central, 1);
    let c2 = order(Scheme::Central, 2);
    let fw = order(Scheme::Forward, 1);
    let bw = order(Scheme::Backward, 1);
    let ok = |v: f64, want: f64| (v - want).abs() <= 0.2;
    verdict(
        ok(c1, 2.0) && ok(c2, 2.0) && ok(fw, 1.0) && ok(bw, 1.0),
        format!("slopes: central d1 {c1:.3}, central d2 {c2:.3} (want 2.0±0.2); forward {fw:.3}, backward {bw:.3} (want 1.0±0.2)"),
    )
}

// ---------------------------------------------------------------- 3

fn recovery_config(epochs: usize, warmup: usize, decay: f64, refit: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        warmup_epochs: Some(warmup),
        alpha_ramp_epochs: 10,
        learning_rate: 3e-3,
        lr_decay: decay,
        batch_size: 256,
        collocation_batch: 64,
        refit_every: refit,
        hidden: vec![64; 4],
        q_hidden: vec![32; 3],
        threshold: Some(0.025),
        ..Default::default()
    }
}

fn coefficient_error(fit: &EquationSystem, truth: &EquationSystem) -> f64 {
    let (a, b) = (&fit.equations[0].coefficients, &truth.equations[0].coefficients);
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    num / b.iter().map(|y| y * y).sum::<f64>().sqrt()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

fn train_case(case: &SyntheticCase, cfg: &TrainConfig) -> (physgrid::data_io::Generated, TrainOutcome<f32>, TrainData<f32>) {
    let g = generate(case).unwrap();
    assert!(g.self_check.passed, "fixture failed its residual self-check");
    let data = TrainData::downscaling(&g.coarse.cast::<f32>(), None).unwrap();
    let out = train(&data, cfg).unwrap();
    (g, out, data)
}

fn criterion_3() -> Verdict {
    let cfg = recovery_config(50, 15, 0.95, 2);
    let mut lines = Vec::new();
    let mut pass = true;
    for (id, noise, tol) in [
        (CaseId::Advection2D, 0.0, 0.05),
        (CaseId::Advection2D, 0.01, 0.15),
        (CaseId::AdvectionDiffusion2D, 0.0, 0.05),
        (CaseId::AdvectionDiffusion2D, 0.01, 0.15),
    ] {
        let case = SyntheticCase::new(id, 32, 32, 100, 7).with_noise(noise);
        let (g, out, _) = train_case(&case, &cfg);
        let err = coefficient_error(&out.system, &g.truth);
        pass &= err <= tol;
        lines.push(format!("{} noise {}: Ξ err {:.2}% (≤ {}%)", id, noise, err * 100.0, tol * 100.0));
    }
    let case = SyntheticCase::new(CaseId::AdvectionDiffusion2D, 32, 32, 100, 7).with_forcing(ForcingSpec::random(2, 1.0, 2.0, 7).unwrap());
    let (g, out, _) = train_case(&case, &cfg);
    let h = g.forcing.as_ref().unwrap();
    let coords = out.surrogate.normalization().grid_coords(h.meta());
    let q: Vec<f64> = q_columns(out.q_net.as_ref().unwrap(), &coords).unwrap().remove(0).iter().map(|v| v.f64()).collect();
    let r = pearson(&q, h.data());
    pass &= r >= 0.9;
    lines.push(format!(
        "forced: Pearson(Q, H) {:.3} (≥ 0.9), Ξ err {:.1}% (informational)",
        r,
        coefficient_error(&out.system, &g.truth) * 100.0
    ));
    verdict(pass, lines.join("; "))
}

// ---------------------------------------------------------------- 4

struct Downscaled {
    generated: physgrid::data_io::Generated,
    outcome: TrainOutcome<f32>,
    data: TrainData<f32>,
}

fn downscaling_fixture() -> Downscaled {
    let mut case = SyntheticCase::new(CaseId::Advection2D, 16, 16, 100, 7);
    case.initial = InitialCondition::Random { max_mode: 6 };
    case.coefficients.b = 0.3;
    let cfg = recovery_config(200, 60, 0.985, 4);
    let (generated, outcome, data) = train_case(&case, &cfg);
    Downscaled { generated, outcome, data }
}

fn criterion_4(fx: &Downscaled) -> Verdict {
    let g = &fx.generated;
    let mut r = Vec::new();
    for (k, truth) in [(2usize, &g.fine2x), (4, &g.fine4x)] {
        let (sur, _) = downscale(&fx.outcome.surrogate, g.coarse.meta(), Resolution::Factor(k)).unwrap();
        let rs = rmse(&sur.cast::<f64>(), truth, None).unwrap()[0];
        let rb = rmse(&bicubic_upsample(&g.coarse, k).unwrap(), truth, None).unwrap()[0];
        r.push((rs, rb));
    }
    let ratio = r[0].0 / r[0].1;
    let spread = (r[1].0 - r[0].0).abs() / r[0].0.min(r[1].0);
    verdict(
        ratio <= 0.9 && spread <= 0.1,
        format!(
            "2x RMSE {:.4} vs bicubic {:.4} (ratio {:.3} ≤ 0.9); 4x RMSE {:.4} (bicubic {:.4}); 2x/4x spread {:.1}% (≤ 10%)",
            r[0].0,
            r[0].1,
            ratio,
            r[1].0,
            r[1].1,
            spread * 100.0
        ),
    )
}

// ---------------------------------------------------------------- 5, 6

struct ForecastRuns {
    outcomes: Vec<(usize, ForecastOutcome<f64>, ForecastOutcome<f64>)>,
    data: ForecastData<f64>,
    truth: GridField<f64>,
}

fn to_f64(net: &FieldNet<f32>) -> FieldNet<f64> {
    decode_checkpoint(&encode_checkpoint(net)).unwrap()
}

fn criterion_5(fx: &Downscaled) -> (Verdict, ForecastRuns) {
    let g = &fx.generated;
    let surrogate = to_f64(&fx.outcome.surrogate);
    let q = to_f64(fx.outcome.q_net.as_ref().unwrap());
    let (y, _) = downscale(&surrogate, g.coarse.meta(), Resolution::Factor(2)).unwrap();
    let data = ForecastData::chronological(y, None).unwrap();
    let mut outcomes = Vec::new();
    let mut gains = Vec::new();
    let mut truth_gains = Vec::new();
    let mut per_r = Vec::new();
    for r in [1usize, 4, 8] {
        let mut gr = Vec::new();
        for seed in 0..3u64 {
            let cfg = ForecastConfig { s: 9, r, seed, ..Default::default() };
            let pre = pretrain(&data, &cfg).unwrap();
            let ctl = finetune(pre.model.clone(), &data, &fx.outcome.system, Some(&q), &ForecastConfig { beta: 0.0, ..cfg.clone() }).unwrap();
            let phy = finetune(pre.model, &data, &fx.outcome.system, Some(&q), &cfg).unwrap();
            let (a, b) = (ctl.history[ctl.best_epoch - 1].val_rmse, phy.history[phy.best_epoch - 1].val_rmse);
            let gain = (a - b) / a * 100.0;
            let val = data.val_windows(9, r).unwrap();
            let ta = window_rmse(&ctl.model, &data.series, &g.fine2x, &val).unwrap();
            let tb = window_rmse(&phy.model, &data.series, &g.fine2x, &val).unwrap();
            truth_gains.push((ta - tb) / ta * 100.0);
            gr.push(gain);
            gains.push(gain);
            outcomes.push((r, ctl, phy));
        }
        per_r.push((r, gr.iter().sum::<f64>() / gr.len() as f64));
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    let truth_mean = truth_gains.iter().sum::<f64>() / truth_gains.len() as f64;
    let (g1, g8) = (per_r[0].1, per_r[2].1);
    let detail = format!(
        "mean val-RMSE gain {:.2}% (≥ 3%); per horizon {}; gain(r=8) {:.2}% vs gain(r=1) {:.2}% (need ≥); vs fine truth {:.2}%",
        mean,
        per_r.iter().map(|(r, g)| format!("r={r}: {g:.2}%")).collect::<Vec<_>>().join(", "),
        g8,
        g1,
        truth_mean
    );
    (
        verdict(mean >= 3.0 && g8 >= g1, detail),
        ForecastRuns {
            outcomes,
            data,
            truth: g.fine2x.clone(),
        },
    )
}

fn criterion_6(fx: &Downscaled, fr: &ForecastRuns) -> Verdict {
    let mut worst = 0.0f64;
    let h = &fx.outcome.history;
    for e in h {
        worst = worst.max((e.total - (e.data_loss + e.alpha_eff * e.phys_loss + e.reg_theta + e.reg_pi)).abs());
    }
    let top = h.iter().map(|e| e.alpha_eff).fold(f64::NEG_INFINITY, f64::max);
    let best_val = h.iter().filter(|e| e.alpha_eff == top).map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    let mut selection_ok = h[fx.outcome.best_epoch - 1].val_loss == best_val;
    let sur = &fx.outcome.surrogate;
    let recomputed = data_loss(sur, &DataBatch::from_field(&fx.data.validation, sur.normalization())).unwrap();
    selection_ok &= recomputed == best_val;

    let mut checked = 0;
    for (_, ctl, phy) in &fr.outcomes {
        for out in [ctl, phy] {
            for e in &out.history {
                worst = worst.max((e.total - (e.data_loss + e.beta * e.phys_loss)).abs());
            }
            let best = out.history.iter().map(|e| e.val_rmse).fold(f64::INFINITY, f64::min);
            selection_ok &= out.history[out.best_epoch - 1].val_rmse == best;
            let r = out.model.r();
            let val = fr.data.val_windows(out.model.s(), r).unwrap();
            selection_ok &= window_rmse(&out.model, &fr.data.series, &fr.data.series, &val).unwrap() == best;
            checked += 1;
        }
    }
    let _ = &fr.truth;
    verdict(
        worst <= 1e-12 && selection_ok,
        format!(
            "max |total − Σ components| {:.1e} (≤ 1e-12) over {} surrogate and {} forecaster epochs; best checkpoints re-evaluate to the history minimum: {}",
            worst,
            h.len(),
            fr.outcomes.iter().map(|(_, a, b)| a.history.len() + b.history.len()).sum::<usize>(),
            if selection_ok { format!("yes ({} runs)", checked + 1) } else { "no".into() }
        ),
    )
}

// ---------------------------------------------------------------- 7

fn pipeline_artifacts() -> Vec<(&'static str, Vec<u8>)> {
    let case = SyntheticCase::new(CaseId::AdvectionDiffusion2D, 12, 12, 40, 3).with_noise(0.01);
    let g = generate(&case).unwrap();
    let data = TrainData::downscaling(&g.coarse, None).unwrap();
    let cfg = TrainConfig {
        epochs: 6,
        warmup_epochs: Some(2),
        refit_every: 2,
        learning_rate: 3e-3,
        batch_size: 128,
        collocation_batch: 64,
        fit_points: 2000,
        hidden: vec![16, 16],
        q_hidden: vec![8, 8],
        seed: 11,
        ..Default::default()
    };
    let out = train(&data, &cfg).unwrap();
    let (y, _) = downscale(&out.surrogate, g.coarse.meta(), Resolution::Factor(2)).unwrap();
    let fd = ForecastData::chronological(y.clone(), None).unwrap();
    let fc = ForecastConfig {
        s: 3,
        r: 2,
        pretrain_epochs: 3,
        finetune_epochs: 2,
        seed: 5,
        ..Default::default()
    };
    let pre = pretrain(&fd, &fc).unwrap();
    let fine = finetune(pre.model, &fd, &out.system, out.q_net.as_ref(), &fc).unwrap();
    vec![
        ("coarse.pgwf", encode_grid(&g.coarse)),
        ("fine2x.pgwf", encode_grid(&g.fine2x)),
        ("f_theta.pgnet", encode_checkpoint(&out.surrogate)),
        ("q_pi.pgnet", encode_checkpoint(out.q_net.as_ref().unwrap())),
        ("eqns.json", out.system.to_json().unwrap().into_bytes()),
        ("y.pgwf", encode_grid(&y)),
        ("g_omega.pgnet", fine.model.encode()),
    ]
}

fn criterion_7() -> Verdict {
    let a = pipeline_artifacts();
    let b = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(pipeline_artifacts);
    let identical = a.iter().zip(&b).filter(|(x, y)| x.1 == y.1).count();
    let mut round_trip = true;
    let mut mismatched = Vec::new();
    let mut truncation = true;
    let mut cuts = 0;
    for (name, bytes) in &a {
        let again = match *name {
            n if n.ends_with(".pgwf") => encode_grid(&decode_grid::<f64>(bytes).unwrap()),
            "g_omega.pgnet" => ForecastModel::<f64>::decode(bytes).unwrap().encode(),
            n if n.ends_with(".pgnet") => encode_checkpoint(&decode_checkpoint::<f64>(bytes).unwrap()),
            _ => EquationSystem::from_json(std::str::from_utf8(bytes).unwrap()).unwrap().to_json().unwrap().into_bytes(),
        };
        if &again != bytes {
            round_trip = false;
            mismatched.push(*name);
        }
        if name.ends_with(".json") {
            continue;
        }
        for frac in [0.1, 0.5, 0.9, 0.999] {
            let cut = &bytes[..((bytes.len() as f64) * frac) as usize];
            let err = if name.ends_with(".pgwf") {
                decode_grid::<f64>(cut).err()
            } else if *name == "g_omega.pgnet" {
                ForecastModel::<f64>::decode(cut).err()
            } else {
                decode_checkpoint::<f64>(cut).err()
            };
            cuts += 1;
            truncation &= matches!(err, Some(ref e @ Error::Truncated { .. }) if e.class() == ErrorClass::Data);
        }
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        let err = if name.ends_with(".pgwf") { decode_grid::<f64>(&bad).err() } else { decode_checkpoint::<f64>(&bad).err() };
        truncation &= matches!(err, Some(Error::BadMagic { .. }));
    }
    verdict(
        identical == a.len() && round_trip && truncation,
        format!(
            "{identical}/{} artifacts bit-identical across runs (1 vs 3 worker threads); round-trips exact: {round_trip}{}; {cuts} truncations and {} bad magics rejected as data errors: {truncation}",
            a.len(),
            if mismatched.is_empty() { String::new() } else { format!(" (mismatch: {})", mismatched.join(", ")) },
            a.len() - 1
        ),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let case = SyntheticCase::new(CaseId::AdvectionDiffusion2D, 32, 32, 100, 7);
    let g = generate(&case).unwrap();
    let path = dir.path().join("coarse.pgwf");
    std::fs::write(&path, encode_grid(&g.coarse)).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_physgrid"))
        .args(["train", "--data", path.to_str().unwrap(), "--epochs", "1", "--out", dir.path().join("m").to_str().unwrap()])
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let stderr = String::from_utf8_lossy(&out.stderr);
    let total: Option<usize> = stdout
        .lines()
        .find(|l| l.starts_with("parameters:"))
        .and_then(|l| l.rsplit("total ").next())
        .and_then(|v| v.trim().parse().ok());
    let seconds: Option<f64> = stderr
        .lines()
        .find(|l| l.trim_start().starts_with("epoch"))
        .and_then(|l| l.rsplit('[').next())
        .and_then(|v| v.trim_end_matches(|c| c == ']' || c == 's').parse().ok());
    match (out.status.success(), total, seconds) {
        (true, Some(n), Some(s)) => verdict(
            n <= 200_000 && s <= 30.0,
            format!("CLI reports {n} parameters for the default surrogate + latent force (≤ 200000); one default epoch on 32×32×100 took {s:.1}s (≤ 30s)"),
        ),
        _ => verdict(false, format!("CLI run failed: {stderr}")),
    }
}

fn main() {
    let strict = std::env::var("ACCEPTANCE_STRICT").map_or(false, |v| v == "1");
    // Comma-separated criterion numbers; all when unset.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().map_or(true, |o| o.contains(&n));
    let mut results = Vec::new();
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut() -> Verdict| {
        if !wanted(n) {
            return;
        }
        let t = Instant::now();
        let v = f();
        let line = format!(
            "criterion {n} [{}] {name}: {} ({:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
        println!("{line}");
        results.push(v.pass);
    };
    run(1, "autodiff correctness", &mut criterion_1);
    run(2, "stencil order", &mut criterion_2);
    run(3, "coefficient recovery", &mut criterion_3);
    if wanted(4) || wanted(5) || wanted(6) {
        let t = Instant::now();
        let fx = downscaling_fixture();
        let train_secs = t.elapsed().as_secs_f64();
        run(4, "downscaling beats bicubic", &mut || {
            let mut v = criterion_4(&fx);
            v.detail.push_str(&format!("; training {train_secs:.0}s"));
            v
        });
        if wanted(5) || wanted(6) {
            let t = Instant::now();
            let (v5, fr) = criterion_5(&fx);
            let secs = t.elapsed().as_secs_f64();
            run(5, "physics-guided fine-tuning", &mut || Verdict {
                pass: v5.pass,
                detail: format!("{}; forecaster runs {secs:.0}s", v5.detail),
            });
            run(6, "loss bookkeeping", &mut || criterion_6(&fx, &fr));
        }
    }
    run(7, "determinism and format", &mut criterion_7);
    run(8, "footprint", &mut criterion_8);
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} of {} criteria pass", results.len() - failed, results.len());
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
