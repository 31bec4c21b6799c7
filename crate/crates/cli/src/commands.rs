use std::fs;
use std::path::{Path, PathBuf};

use physgrid::data_io::synthetic::{ForcingSpec, InitialCondition};
use physgrid::data_io::{bicubic_upsample, encode_grid, generate as generate_case, load_grid, Axis, CaseId, GridField, SplitRanges, SyntheticCase};
use physgrid::field_model::{encode_checkpoint, layer_widths, load_checkpoint, param_count, FieldNet};
use physgrid::forecasting::{
    finetune_with, fit_forecaster, forecast_history_csv, frozen_checksum, ForecastConfig, ForecastData, ForecastEpoch, ForecastModel,
    ForecastOutcome,
};
use physgrid::metrics::{improvement, render_table, Climatology, Improvement, MetricReport};
use physgrid::pde_library::EquationSystem;
use physgrid::training::{downscale as sample_surrogate, history_csv, train_with, EpochRecord, Resolution, TrainConfig, TrainData};
use physgrid::Scalar;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::manifest::{sha256_file, Recorder, RunManifest};
use crate::plot::{line_chart, Series};
use crate::{
    CaseArg, Cli, DefaultsArgs, DefaultsKind, DownscaleArgs, EvaluateArgs, ForecastArgs, Frames, GenerateArgs, Precision, ReplayArgs,
    TrainArgs,
};

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn load_field(path: &Path) -> CliResult<GridField<f64>> {
    load_grid(path).map_err(|e| match e {
        physgrid::Error::Io(io) => CliError::io(path, io),
        other => other.into(),
    })
}

fn load_net(path: &Path) -> CliResult<FieldNet<f64>> {
    load_checkpoint(path).map_err(|e| match e {
        physgrid::Error::Io(io) => CliError::io(path, io),
        other => other.into(),
    })
}

fn load_toml<C: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<C> {
    match path {
        Some(p) => Ok(toml::from_str(&read_text(p)?)?),
        None => Ok(C::default()),
    }
}

fn case_id(c: CaseArg) -> CaseId {
    match c {
        CaseArg::Advection2d => CaseId::Advection2D,
        CaseArg::AdvectionDiffusion2d => CaseId::AdvectionDiffusion2D,
        CaseArg::Wave2d => CaseId::Wave2D,
    }
}

pub fn generate(a: GenerateArgs, argv: &[String]) -> CliResult<()> {
    let mut rec = Recorder::new("generate", argv);
    let mut case = SyntheticCase::new(case_id(a.case), a.nx, a.ny.unwrap_or(a.nx), a.nt, a.seed).with_noise(a.noise);
    if let Some(m) = a.max_mode {
        case.initial = InitialCondition::Random { max_mode: m };
    }
    if a.forcing > 0 {
        case = case.with_forcing(ForcingSpec::random(a.forcing, a.forcing_amplitude, 2.0, a.seed)?);
    }
    rec.config(&case)?;
    rec.seed(a.seed);
    let g = generate_case(&case)?;
    rec.lap("generate");
    let sc = g.self_check;
    println!(
        "self-check: residual rms {:.3e}, bound {:.3e} -> {}",
        sc.residual_rms,
        sc.bound,
        if sc.passed { "ok" } else { "FAILED" }
    );
    if !sc.passed {
        return Err(CliError::Numerical(format!(
            "generator self-check failed (residual {:.3e} > bound {:.3e}); nothing written",
            sc.residual_rms, sc.bound
        )));
    }
    create_dir(&a.out)?;
    rec.output(a.out.join("coarse.pgwf"), &encode_grid(&g.coarse))?;
    rec.output(a.out.join("fine2x.pgwf"), &encode_grid(&g.fine2x))?;
    rec.output(a.out.join("fine4x.pgwf"), &encode_grid(&g.fine4x))?;
    if let Some(f) = &g.forcing {
        rec.output(a.out.join("forcing.pgwf"), &encode_grid(f))?;
    }
    rec.output(a.out.join("truth_system.json"), g.truth.to_json()?.as_bytes())?;
    rec.output(a.out.join("generator.json"), g.manifest_json()?.as_bytes())?;
    println!("truth: {}", g.truth);
    println!(
        "wrote {} ({}x{}x{} coarse) to {}",
        case.case,
        g.coarse.nx(),
        g.coarse.ny(),
        g.coarse.nt(),
        a.out.display()
    );
    rec.finish(&a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct ParamCounts {
    surrogate: usize,
    latent_force: usize,
    total: usize,
}

fn param_counts(cfg: &TrainConfig, outputs: usize) -> ParamCounts {
    let surrogate = param_count(&layer_widths(&cfg.hidden, outputs));
    let latent_force = if cfg.latent_force {
        param_count(&layer_widths(&cfg.q_hidden, outputs))
    } else {
        0
    };
    ParamCounts {
        surrogate,
        latent_force,
        total: surrogate + latent_force,
    }
}

fn loss_chart(history: &[EpochRecord]) -> String {
    let pick = |f: fn(&EpochRecord) -> f64| history.iter().map(|e| (e.epoch as f64, f(e))).collect();
    line_chart(
        "surrogate training",
        "epoch",
        "loss",
        &[
            Series::new("data", pick(|e| e.data_loss)),
            Series::new("physics", pick(|e| e.phys_loss)),
            Series::new("validation", pick(|e| e.val_loss)),
        ],
        true,
    )
}

pub fn train(a: TrainArgs, argv: &[String]) -> CliResult<()> {
    match a.precision {
        Precision::F64 => train_as::<f64>(a, argv),
        Precision::F32 => train_as::<f32>(a, argv),
    }
}

fn train_as<T: Scalar>(a: TrainArgs, argv: &[String]) -> CliResult<()> {
    let mut rec = Recorder::new("train", argv);
    let mut cfg: TrainConfig = load_toml(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let coarse = load_field(&a.data)?;
    rec.input(&a.data)?;
    let counts = param_counts(&cfg, coarse.nvars());
    println!("configuration:\n{}", cfg.describe());
    println!(
        "parameters: surrogate {}, latent force {}, total {}",
        counts.surrogate, counts.latent_force, counts.total
    );
    let validation = match &a.validation {
        Some(p) => {
            rec.input(p)?;
            Some(load_field(p)?.cast::<T>())
        }
        None => None,
    };
    let data = TrainData::downscaling(&coarse.cast::<T>(), validation.as_ref())?;
    rec.config(serde_json::json!({ "train": &cfg, "precision": format!("{:?}", a.precision), "parameters": counts }))?;
    rec.seed(cfg.seed);
    rec.lap("load");

    let outcome = train_with(&data, &cfg, |e| {
        eprintln!(
            "epoch {:>4}  data {:.3e}  phys {:.3e}  alpha {:.2}  val {:.3e}  [{:.1}s]",
            e.epoch, e.data_loss, e.phys_loss, e.alpha_eff, e.val_loss, e.seconds
        );
    })?;
    rec.lap("train");
    create_dir(&a.out)?;
    rec.output(a.out.join("f_theta.pgnet"), &encode_checkpoint(&outcome.surrogate))?;
    if let Some(q) = &outcome.q_net {
        rec.output(a.out.join("q_pi.pgnet"), &encode_checkpoint(q))?;
    }
    rec.output(a.out.join("eqns.json"), outcome.system.to_json()?.as_bytes())?;
    rec.output(a.out.join("history.csv"), history_csv(&outcome.history).as_bytes())?;
    rec.output(a.out.join("loss.svg"), loss_chart(&outcome.history).as_bytes())?;
    println!("best epoch {}", outcome.best_epoch);
    println!("learned: {}", outcome.system);
    rec.finish(&a.out)?;
    if let Some(why) = outcome.aborted {
        return Err(CliError::Numerical(format!("training aborted: {why}")));
    }
    Ok(())
}

fn frame_range(nt: usize, which: Frames) -> CliResult<std::ops::Range<usize>> {
    if which == Frames::All {
        return Ok(0..nt);
    }
    let r = SplitRanges::for_frames(nt)?;
    Ok(match which {
        Frames::Train => r.train,
        Frames::Val => r.val,
        _ => r.test,
    })
}

#[derive(Serialize)]
struct ReportFile<'a> {
    reports: Vec<&'a MetricReport>,
    improvement: Option<&'a Improvement>,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<String>,
}

fn write_report(rec: &mut Recorder, path: &Path, reports: &[&MetricReport], imp: Option<&Improvement>, note: Option<String>) -> CliResult<()> {
    let file = ReportFile {
        reports: reports.to_vec(),
        improvement: imp,
        note,
    };
    rec.output(path.to_path_buf(), serde_json::to_string_pretty(&file)?.as_bytes())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn downscale(a: DownscaleArgs, argv: &[String]) -> CliResult<()> {
    let mut rec = Recorder::new("downscale", argv);
    let net = load_net(&a.model)?;
    rec.input(&a.model)?;
    let factor = a.factor as usize;
    rec.config(serde_json::json!({ "factor": factor, "frames": format!("{:?}", a.frames) }))?;
    let source = net.normalization().source_meta()?;
    let (fine, extrapolated) = sample_surrogate(&net, &source, Resolution::Factor(factor))?;
    rec.lap("sample");
    if extrapolated {
        eprintln!("warning: some target points lie outside the training box");
    }
    let out_dir = parent_dir(&a.out);
    create_dir(&out_dir)?;
    rec.output(a.out.clone(), &encode_grid(&fine))?;
    println!("{}x{}x{} -> {}", fine.nx(), fine.ny(), fine.nt(), a.out.display());

    if let Some(tp) = &a.truth {
        let truth = load_field(tp)?;
        rec.input(tp)?;
        if !truth.same_layout(&fine) {
            return Err(CliError::Data(format!(
                "truth grid {}x{}x{} does not match the {factor}x output {}x{}x{}",
                truth.nx(),
                truth.ny(),
                truth.nt(),
                fine.nx(),
                fine.ny(),
                fine.nt()
            )));
        }
        let frames = frame_range(truth.nt(), a.frames)?;
        let clim = Climatology::from_training(&truth.frames(frame_range(truth.nt(), Frames::Train)?)?);
        let t = truth.frames(frames.clone())?;
        let ours = MetricReport::evaluate("surrogate", &fine.frames(frames.clone())?, &t, Some(&clim))?;
        let mut reports = vec![ours];
        let mut imp = None;
        if let Some(cp) = &a.coarse {
            let coarse = load_field(cp)?;
            rec.input(cp)?;
            let bic = bicubic_upsample(&coarse, factor)?;
            if !bic.same_layout(&truth) {
                return Err(CliError::Data("coarse field does not refine onto the truth grid".into()));
            }
            let base = MetricReport::evaluate("bicubic", &bic.frames(frames)?, &t, Some(&clim))?;
            imp = Some(improvement(&base, &reports[0])?);
            reports.insert(0, base);
        }
        let refs: Vec<&MetricReport> = reports.iter().collect();
        print!("{}", render_table(&refs, imp.as_ref()));
        let path = a.report.clone().unwrap_or_else(|| out_dir.join("downscale_report.json"));
        write_report(&mut rec, &path, &refs, imp.as_ref(), extrapolated.then(|| "extrapolated".to_string()))?;
    }
    rec.finish(&out_dir)?;
    Ok(())
}

/// Predictions for `windows`, stacked as blocks of `r` frames, with the
/// matching reference frames.
fn stacked<T: Scalar>(model: &ForecastModel<T>, data: &ForecastData<T>, windows: &[usize]) -> CliResult<(GridField<T>, GridField<T>)> {
    let r = model.r();
    let reference = data.truth.as_ref().unwrap_or(&data.series);
    let flen = data.series.frame_len();
    let mut pred = Vec::with_capacity(windows.len() * r * flen);
    let mut truth = Vec::with_capacity(pred.capacity());
    for &i in windows {
        pred.extend(model.predict_window(&data.series, i)?);
        truth.extend_from_slice(&reference.data()[(i + 1) * flen..(i + 1 + r) * flen]);
    }
    let mut meta = data.series.meta().clone();
    meta.t = Axis::new(0.0, 1.0, windows.len() * r);
    let names = data.series.names().to_vec();
    Ok((GridField::new(meta.clone(), names.clone(), pred)?, GridField::new(meta, names, truth)?))
}

fn forecast_chart(runs: &[(&str, &[ForecastEpoch])]) -> String {
    let series: Vec<Series> = runs
        .iter()
        .map(|(name, h)| Series::new(name, h.iter().map(|e| (e.epoch as f64, e.val_rmse)).collect()))
        .collect();
    line_chart("forecaster validation", "epoch", "RMSE", &series, true)
}

fn log_epoch(tag: &'static str) -> impl FnMut(&ForecastEpoch) {
    move |e| {
        eprintln!(
            "{tag} epoch {:>4}  data {:.3e}  phys {:.3e}  val rmse {:.4e}  [{:.1}s]",
            e.epoch, e.data_loss, e.phys_loss, e.val_rmse, e.seconds
        )
    }
}

pub fn forecast_train(a: ForecastArgs, argv: &[String]) -> CliResult<()> {
    let mut rec = Recorder::new("forecast-train", argv);
    let mut cfg: ForecastConfig = load_toml(a.config.as_deref())?;
    if let Some(s) = a.s {
        cfg.s = s;
    }
    if let Some(r) = a.r {
        cfg.r = r;
    }
    if let Some(b) = a.beta {
        cfg.beta = b;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.pretrain_epochs {
        cfg.pretrain_epochs = e;
    }
    if let Some(e) = a.finetune_epochs {
        cfg.finetune_epochs = e;
    }
    cfg.validate()?;
    if cfg.finetune_epochs == 0 {
        return Err(CliError::usage("finetune_epochs must be at least 1"));
    }
    let needs_physics = cfg.beta > 0.0 || a.paired;
    println!(
        "forecast: s = {}, r = {}, beta = {}, hidden = {:?}, lr = {}, pretrain {} + finetune {} epochs",
        cfg.s, cfg.r, cfg.beta, cfg.hidden, cfg.learning_rate, cfg.pretrain_epochs, cfg.finetune_epochs
    );

    let series = load_field(&a.data)?;
    rec.input(&a.data)?;
    let truth = match &a.truth {
        Some(p) => {
            rec.input(p)?;
            Some(load_field(p)?)
        }
        None => None,
    };
    let system = match &a.eqns {
        Some(p) => {
            rec.input(p)?;
            Some(EquationSystem::from_json(&read_text(p)?)?)
        }
        None if needs_physics => return Err(CliError::usage("--eqns is required when beta > 0 or --paired")),
        None => None,
    };
    let q_net = match &a.qnet {
        Some(p) => {
            rec.input(p)?;
            Some(load_net(p)?)
        }
        None => None,
    };
    let data = ForecastData::chronological(series, truth)?;
    rec.config(&cfg)?;
    rec.seed(cfg.seed);
    rec.lap("load");
    create_dir(&a.out)?;

    let pre = match &a.pretrained {
        Some(p) => {
            rec.input(p)?;
            let bytes = fs::read(p).map_err(|e| CliError::io(p, e))?;
            let model = ForecastModel::<f64>::decode(&bytes)?;
            if model.s() != cfg.s || model.r() != cfg.r {
                return Err(CliError::usage(format!(
                    "pretrained forecaster has s = {}, r = {}; requested s = {}, r = {}",
                    model.s(),
                    model.r(),
                    cfg.s,
                    cfg.r
                )));
            }
            ForecastOutcome {
                model,
                history: Vec::new(),
                best_epoch: 0,
                aborted: None,
            }
        }
        None => {
            if cfg.pretrain_epochs == 0 {
                return Err(CliError::usage("pretrain_epochs must be at least 1 without --pretrained"));
            }
            let train = data.series.frames(data.train.clone())?;
            let model = ForecastModel::new(&cfg, &train)?;
            println!("forecaster parameters: {}", model.param_count());
            let out = fit_forecaster(model, &data, None, 0.0, cfg.pretrain_epochs, &cfg, log_epoch("pretrain"))?;
            rec.output(a.out.join("g_pre.pgnet"), &out.model.encode())?;
            rec.output(a.out.join("pretrain_history.csv"), forecast_history_csv(&out.history).as_bytes())?;
            out
        }
    };
    rec.lap("pretrain");
    if let Some(why) = &pre.aborted {
        return Err(CliError::Numerical(format!("pre-training aborted: {why}")));
    }

    let stub;
    let sys_ref = match &system {
        Some(s) => s,
        None => {
            stub = EquationSystem::unfitted(data.series.names().to_vec(), Vec::new(), false);
            &stub
        }
    };
    let checksum = frozen_checksum(sys_ref, q_net.as_ref())?;
    let fine = finetune_with(pre.model.clone(), &data, sys_ref, q_net.as_ref(), &cfg, log_epoch("finetune"))?;
    rec.lap("finetune");
    let control = if a.paired {
        let c = ForecastConfig { beta: 0.0, ..cfg.clone() };
        let out = finetune_with(pre.model.clone(), &data, sys_ref, q_net.as_ref(), &c, log_epoch("control"))?;
        rec.lap("control");
        Some(out)
    } else {
        None
    };
    if frozen_checksum(sys_ref, q_net.as_ref())? != checksum {
        return Err(CliError::Numerical("frozen equations changed during fine-tuning".into()));
    }

    rec.output(a.out.join("g_omega.pgnet"), &fine.model.encode())?;
    rec.output(a.out.join("finetune_history.csv"), forecast_history_csv(&fine.history).as_bytes())?;
    let val = data.val_windows(cfg.s, cfg.r)?;
    let clim = Climatology::from_training(&data.series.frames(data.train.clone())?);
    let (pred, reference) = stacked(&fine.model, &data, &val)?;
    rec.output(a.out.join("val_pred.pgwf"), &encode_grid(&pred))?;
    rec.output(a.out.join("val_truth.pgwf"), &encode_grid(&reference))?;
    rec.output(a.out.join("clim.pgwf"), &encode_grid(&data.series.frames(data.train.clone())?))?;
    let label = if cfg.beta > 0.0 { "physics-guided" } else { "fine-tuned" };
    let plus = MetricReport::evaluate_forecast(label, &pred, &reference, cfg.r, Some(&clim))?;
    let mut reports = vec![plus];
    let mut imp = None;
    let mut curves: Vec<(&str, &[ForecastEpoch])> = vec![("pretrain", &pre.history), (label, &fine.history)];
    if let Some(c) = &control {
        rec.output(a.out.join("g_control.pgnet"), &c.model.encode())?;
        rec.output(a.out.join("control_history.csv"), forecast_history_csv(&c.history).as_bytes())?;
        let (cp, _) = stacked(&c.model, &data, &val)?;
        rec.output(a.out.join("control_pred.pgwf"), &encode_grid(&cp))?;
        let base = MetricReport::evaluate_forecast("control", &cp, &reference, cfg.r, Some(&clim))?;
        imp = Some(improvement(&base, &reports[0])?);
        reports.insert(0, base);
        curves.push(("control", &c.history));
    }
    rec.output(a.out.join("loss.svg"), forecast_chart(&curves).as_bytes())?;
    let refs: Vec<&MetricReport> = reports.iter().collect();
    print!("{}", render_table(&refs, imp.as_ref()));
    write_report(&mut rec, &a.out.join("report.json"), &refs, imp.as_ref(), None)?;
    rec.finish(&a.out)?;
    if let Some(why) = fine.aborted.or(control.and_then(|c| c.aborted)) {
        return Err(CliError::Numerical(format!("fine-tuning aborted: {why}")));
    }
    Ok(())
}

fn sweep_csv(ours: &MetricReport, base: Option<&MetricReport>) -> String {
    let mut s = String::from(if base.is_some() { "r,rmse,baseline_rmse,improv_pct\n" } else { "r,rmse\n" });
    let avg = |h: &physgrid::metrics::HorizonMetrics| h.variables.iter().map(|v| v.rmse).sum::<f64>() / h.variables.len().max(1) as f64;
    for (k, h) in ours.horizons.iter().enumerate() {
        let r = avg(h);
        match base.and_then(|b| b.horizons.get(k)) {
            Some(bh) => {
                let b = avg(bh);
                let pct = physgrid::metrics::rmse_improvement(b, r).map_or("".to_string(), |p| format!("{p}"));
                s.push_str(&format!("{},{r:e},{b:e},{pct}\n", h.step));
            }
            None => s.push_str(&format!("{},{r:e}\n", h.step)),
        }
    }
    s
}

pub fn evaluate(a: EvaluateArgs, argv: &[String]) -> CliResult<()> {
    let mut rec = Recorder::new("evaluate", argv);
    let pred = load_field(&a.pred)?;
    rec.input(&a.pred)?;
    let truth = load_field(&a.truth)?;
    rec.input(&a.truth)?;
    let clim = match &a.clim {
        Some(p) => {
            rec.input(p)?;
            Some(Climatology::from_training(&load_field(p)?))
        }
        None => None,
    };
    rec.config(serde_json::json!({ "horizon": a.horizon }))?;
    let eval = |label: &str, f: &GridField<f64>| -> CliResult<MetricReport> {
        Ok(match a.horizon {
            Some(h) => MetricReport::evaluate_forecast(label, f, &truth, h, clim.as_ref())?,
            None => MetricReport::evaluate(label, f, &truth, clim.as_ref())?,
        })
    };
    let ours = eval("model", &pred)?;
    let base = match &a.baseline {
        Some(p) => {
            rec.input(p)?;
            Some(eval("baseline", &load_field(p)?)?)
        }
        None => None,
    };
    let imp = match &base {
        Some(b) => Some(improvement(b, &ours)?),
        None => None,
    };
    let mut refs: Vec<&MetricReport> = base.iter().collect();
    refs.push(&ours);
    print!("{}", render_table(&refs, imp.as_ref()));
    let out_dir = a.report.as_deref().map(parent_dir);
    if let Some(p) = &a.report {
        create_dir(&parent_dir(p))?;
        write_report(&mut rec, p, &refs, imp.as_ref(), None)?;
    }
    if let Some(p) = &a.sweep_horizon {
        if a.horizon.is_none() {
            return Err(CliError::usage("--sweep-horizon needs --horizon"));
        }
        create_dir(&parent_dir(p))?;
        let csv = sweep_csv(&ours, base.as_ref());
        print!("{csv}");
        rec.output(p.clone(), csv.as_bytes())?;
        let curve = |r: &MetricReport| {
            r.horizons
                .iter()
                .map(|h| (h.step as f64, h.variables.iter().map(|v| v.rmse).sum::<f64>() / h.variables.len().max(1) as f64))
                .collect()
        };
        let mut series = vec![Series::new("model", curve(&ours))];
        if let Some(b) = &base {
            series.push(Series::new("baseline", curve(b)));
        }
        rec.output(p.with_extension("svg"), line_chart("RMSE by forecast step", "step", "RMSE", &series, false).as_bytes())?;
    }
    if let Some(d) = out_dir.or_else(|| a.sweep_horizon.as_deref().map(parent_dir)) {
        rec.finish(&d)?;
    }
    Ok(())
}

pub fn defaults(a: DefaultsArgs) -> CliResult<()> {
    let text = match a.kind {
        DefaultsKind::Train => toml::to_string(&TrainConfig::default()),
        DefaultsKind::Forecast => toml::to_string(&ForecastConfig::default()),
    }
    .map_err(|e| CliError::Data(format!("serializing defaults: {e}")))?;
    print!("{text}");
    Ok(())
}

pub fn replay(a: ReplayArgs) -> CliResult<()> {
    let old = RunManifest::load(&a.manifest)?;
    if old.command == "replay" {
        return Err(CliError::usage("cannot replay a replay"));
    }
    let mut args = vec!["physgrid".to_string()];
    args.extend(old.argv.iter().cloned());
    let cli = <Cli as clap::Parser>::try_parse_from(&args).map_err(|e| CliError::usage(e.to_string()))?;
    crate::run(cli, &old.argv)?;
    let mut mismatched = Vec::new();
    for f in &old.outputs {
        let now = sha256_file(Path::new(&f.path))?;
        if now.sha256 != f.sha256 {
            mismatched.push(f.path.clone());
        }
    }
    if mismatched.is_empty() {
        println!("replay: {} outputs identical", old.outputs.len());
        Ok(())
    } else {
        Err(CliError::Data(format!("replay produced different outputs: {}", mismatched.join(", "))))
    }
}

