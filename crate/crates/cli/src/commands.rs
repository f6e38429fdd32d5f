//! One function per subcommand. Each writes its artifacts through an [`OutputDir`].

use std::fs;
use std::io::BufReader;
use std::time::{SystemTime, UNIX_EPOCH};

use vmfcal::calibrate::{
    calibrate, calibrate_generic, calibrated_kappas, normalize_overlaps, read_weights_csv, to_vmf,
    write_weights_csv, ClassifierKind, GenericClassifierWeights,
};
use vmfcal::checkpoint;
use vmfcal::overlap::overlap_matrix;
use vmfcal::synth::{make_dataset, SynthDataset, META_FILE, TEST_FILE, TRAIN_FILE};
use vmfcal::trainer::{train_with, EpochMetrics, EvalMetrics};
use vmfcal::verify::run_all;
use vmfcal::VmfError;

use crate::config::{sha256_hex, Command, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::experiments::{
    ablate_loss, alpha_sweep, class_diagnostics, dataset_for, epoch_checkpoint_name,
    feature_map_json, require, surface_grid, Model, FEATURE_MAP_FILE,
};
use crate::output::{num, opt_num, OutputDir, Table};

pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const RUN_INFO_FILE: &str = "run_info.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CALIBRATED_CHECKPOINT_FILE: &str = "calibrated_checkpoint.json";
pub const CALIBRATED_WEIGHTS_FILE: &str = "calibrated_weights.csv";

fn unix_seconds() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Runs `cfg.command`, writing the config echo, the command's artifacts and a
/// separate file holding timestamps. Outputs are removed again on failure,
/// except that a failed verification keeps its report.
pub fn execute(cfg: &ExperimentConfig) -> Result<()> {
    let command = cfg
        .command
        .ok_or_else(|| CliError::config("no command given on the command line or in the config"))?;
    cfg.validate()?;
    let echo = cfg.echo()?;
    let started = unix_seconds();
    let mut out = OutputDir::create(&cfg.paths.out, cfg.output_format, sha256_hex(&echo))?;
    out.write(CONFIG_ECHO_FILE, &echo)?;
    log::info!("{} -> {} (config {})", command.name(), out.root().display(), out.hash());

    let result = match command {
        Command::GenData => gen_data(cfg, &mut out),
        Command::Train => train_cmd(cfg, &mut out),
        Command::Calibrate => calibrate_cmd(cfg, &mut out),
        Command::SweepAlpha => sweep_alpha(cfg, &mut out),
        Command::AblateLoss => ablate(cfg, &mut out),
        Command::Diagnose => diagnose(cfg, &mut out),
        Command::Verify => verify(cfg, &mut out),
    };
    if matches!(result, Ok(()) | Err(CliError::Verification(_))) {
        let info = format!(
            "command={}\nversion={}\nstarted_unix={started}\nfinished_unix={}\n",
            command.name(),
            env!("CARGO_PKG_VERSION"),
            unix_seconds()
        );
        out.write(RUN_INFO_FILE, &info)?;
        out.commit();
    }
    result
}

fn metric_cells(m: &EvalMetrics) -> Vec<String> {
    vec![
        num(m.overall),
        opt_num(m.many),
        opt_num(m.medium),
        opt_num(m.few),
        num(m.mean_per_class),
    ]
}

const METRIC_COLUMNS: [&str; 5] = ["all", "many", "medium", "few", "mean_per_class"];

fn group_note(ds: &SynthDataset) -> String {
    let t = ds.spec.group_thresholds;
    format!("groups: many >= {} train samples, few <= {}", t.many_min, t.few_max)
}

fn gen_data(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<()> {
    let ds = make_dataset(&cfg.data)?;
    for f in [TRAIN_FILE, TEST_FILE, META_FILE] {
        out.claim(f);
    }
    ds.save(out.root())?;
    let mut t = Table::new(["class", "count", "group", "kappa"]);
    t.notes.push(group_note(&ds));
    for (i, p) in ds.true_params.iter().enumerate() {
        t.push(vec![
            i.to_string(),
            ds.counts[i].to_string(),
            ds.groups[i].name().to_string(),
            num(p.kappa()),
        ]);
    }
    out.write_table("classes", &t)?;
    Ok(())
}

fn train_cmd(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<()> {
    let ds = dataset_for(cfg)?;
    let every = cfg.run.checkpoint_every;
    let root = out.root().to_path_buf();
    let mut written = Vec::new();
    let state = train_with(&ds, &cfg.train, |state, m| {
        if every > 0 && m.epoch % every == 0 {
            let name = epoch_checkpoint_name(m.epoch);
            let path = root.join(&name);
            written.push(name);
            fs::write(&path, checkpoint::to_string(&state.clf))
                .map_err(|source| VmfError::Io { path, source })?;
        }
        Ok(())
    });
    // Register intermediate checkpoints before propagating a training failure
    // so that they are cleaned up with the rest.
    for name in &written {
        out.claim(name);
    }
    let state = state?;
    out.write(CHECKPOINT_FILE, &checkpoint::to_string(&state.clf))?;
    if let Some(map) = &state.feature_map {
        out.write(FEATURE_MAP_FILE, &feature_map_json(map))?;
    }
    let mut t = Table::new(EpochMetrics::CSV_HEADER.split(','));
    t.notes.push(group_note(&ds));
    for m in &state.metrics {
        t.push(m.csv_row().split(',').map(str::to_string).collect());
    }
    out.write_table("metrics", &t)?;
    Ok(())
}

fn calibrate_cmd(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<()> {
    if let Some(path) = &cfg.paths.weights {
        return calibrate_weights(cfg, path, out);
    }
    let ckpt = require(&cfg.paths.checkpoint, "checkpoint", "checkpoint")?;
    let model = Model::load(&ckpt)?;
    let calibrated = calibrate(&model.clf, &cfg.calibration, None)?;
    out.write(CALIBRATED_CHECKPOINT_FILE, &checkpoint::to_string(&calibrated))?;
    if let Some(map) = &model.feature_map {
        out.write(FEATURE_MAP_FILE, &feature_map_json(map))?;
    }
    out.write_table("kappas", &kappa_table(&model.clf, &calibrated.kappas())?)?;
    Ok(())
}

fn kappa_table(clf: &vmfcal::vmf::VmfClassifier, calibrated: &[f64]) -> Result<Table> {
    let m = overlap_matrix(clf)?;
    let norm = normalize_overlaps(m.row_avg(), &clf.kappas())?;
    let mut t = Table::new(["class", "kappa", "row_overlap", "normalized_overlap", "calibrated_kappa"]);
    if norm.degenerate {
        t.notes.push("degenerate overlaps: calibration is the identity".into());
    }
    for (i, (class, &k)) in clf.classes().iter().zip(calibrated).enumerate() {
        t.push(vec![
            i.to_string(),
            num(class.kappa()),
            num(m.row_avg()[i]),
            num(norm.values[i]),
            num(k),
        ]);
    }
    Ok(t)
}

fn calibrate_weights(cfg: &ExperimentConfig, path: &std::path::Path, out: &mut OutputDir) -> Result<()> {
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let file = read_weights_csv(BufReader::new(f))?;
    let cal = &cfg.calibration;
    if file.kind != cal.source_kind {
        return Err(CliError::config(format!(
            "{} holds {} weights but calibration.source_kind is {}",
            path.display(),
            file.kind,
            cal.source_kind
        )));
    }
    for (name, from_file, configured) in [("tau", file.tau, cal.tau), ("gamma", file.gamma, cal.gamma)] {
        if let Some(v) = from_file {
            if v != configured {
                return Err(CliError::config(format!(
                    "{} was written with {name}={v} but calibration.{name} is {configured}",
                    path.display()
                )));
            }
        }
    }
    if file.kind == ClassifierKind::Vmf {
        return Err(CliError::config(
            "vmf classifiers are calibrated from a checkpoint, not a weight file",
        ));
    }
    let gw = GenericClassifierWeights::matrix(file.kind, file.weights)?;
    let source = to_vmf(&gw, cal)?;
    let calibrated = calibrate_generic(&gw, cal, None)?;
    let GenericClassifierWeights::Matrix { kind, weights } = &calibrated else {
        unreachable!("matrix weights calibrate to matrix weights");
    };
    let mut buf = Vec::new();
    write_weights_csv(&mut buf, *kind, weights, cal)
        .map_err(|e| CliError::io(out.root().join(CALIBRATED_WEIGHTS_FILE), e))?;
    out.write(
        CALIBRATED_WEIGHTS_FILE,
        &String::from_utf8(buf).expect("weights are ASCII"),
    )?;
    let kappas = calibrated_kappas(&source, cal.alpha)?;
    out.write_table("kappas", &kappa_table(&source, &kappas)?)?;
    Ok(())
}

fn sweep_alpha(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<()> {
    let ckpt = require(&cfg.paths.checkpoint, "checkpoint", "checkpoint")?;
    let model = Model::load(&ckpt)?;
    let ds = dataset_for(cfg)?;
    let rows = alpha_sweep(&model, &ds, &cfg.calibration, cfg.run.parallel)?;
    let mut t = Table::new(std::iter::once("alpha").chain(METRIC_COLUMNS));
    t.notes.push(group_note(&ds));
    for r in &rows {
        let mut cells = vec![num(r.alpha)];
        cells.extend(metric_cells(&r.metrics));
        t.push(cells);
    }
    out.write_table("sweep_alpha", &t)?;
    print!("{}", t.render(crate::config::OutputFormat::Text, out.hash()));
    Ok(())
}

fn ablate(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<()> {
    let ds = dataset_for(cfg)?;
    let rows = ablate_loss(&ds, &cfg.train, cfg.run.parallel)?;
    let mut t = Table::new(["variant", "lambda"].into_iter().chain(METRIC_COLUMNS));
    t.notes.push(group_note(&ds));
    for r in &rows {
        let mut cells = vec![r.variant.to_string(), num(r.loss.lambda)];
        cells.extend(metric_cells(&r.metrics));
        t.push(cells);
    }
    out.write_table("ablate_loss", &t)?;
    print!("{}", t.render(crate::config::OutputFormat::Text, out.hash()));
    Ok(())
}

fn diagnose(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<()> {
    let s = &cfg.surface;
    let mut t = Table::new(["kappa_i", "cos", "overlap", "d_overlap_d_kappa_i", "d_overlap_d_cos"]);
    t.notes.push(format!("d={} kappa_j={}", s.dim, num(s.kappa_j)));
    for c in surface_grid(s)? {
        t.push(vec![num(c.kappa_i), num(c.cos), num(c.overlap), num(c.d_kappa_i), num(c.d_cos)]);
    }
    out.write_table("surface", &t)?;

    let Some(ckpt) = &cfg.paths.checkpoint else {
        log::info!("no checkpoint given; per-class diagnostics skipped");
        return Ok(());
    };
    let model = Model::load(ckpt)?;
    let (counts, thresholds) = match &cfg.paths.dataset {
        Some(dir) => {
            let ds = SynthDataset::load(dir)?;
            (Some(ds.counts), ds.spec.group_thresholds)
        }
        None => {
            let c = cfg.data.counts()?;
            let matches = c.len() == model.clf.num_classes();
            if !matches {
                log::warn!("[data] does not match the checkpoint's class count; counts omitted");
            }
            (matches.then_some(c), cfg.data.group_thresholds)
        }
    };
    let (rows, matrix) = class_diagnostics(&model.clf, counts.as_deref(), &thresholds)?;
    let mut t = Table::new(["class", "count", "group", "kappa", "row_overlap"]);
    for r in &rows {
        t.push(vec![
            r.class.to_string(),
            r.count.map_or_else(String::new, |c| c.to_string()),
            r.group.map_or("", |g| g.name()).to_string(),
            num(r.kappa),
            num(r.row_overlap),
        ]);
    }
    out.write_table("classes", &t)?;

    let c = matrix.num_classes();
    let mut t = Table::new(std::iter::once("class".to_string()).chain((0..c).map(|j| format!("o_{j}"))));
    t.notes.push("row i, column j: overlap o(i -> j); the diagonal is unused".into());
    for i in 0..c {
        let mut cells = vec![i.to_string()];
        cells.extend(matrix.row(i).iter().map(|&v| num(v)));
        t.push(cells);
    }
    out.write_table("overlap_matrix", &t)?;
    Ok(())
}

fn verify(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<()> {
    let report = run_all(&cfg.verify)?;
    let mut t = Table::new(["check", "result", "detail"]);
    for c in &report.checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        t.push(vec![c.name.to_string(), status.to_string(), c.detail.clone()]);
    }
    out.write_table("verify", &t)?;
    print!("{}", t.render(crate::config::OutputFormat::Text, out.hash()));
    if report.all_passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        Err(CliError::Verification(failed.join(", ")))
    }
}
