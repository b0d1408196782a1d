use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use magskin_core::dataset::{
    fit_normalization, generate_dataset, load_csv, save_csv, split, SplitMode,
};
use magskin_core::eval::{error_map_export, evaluate, evaluate_baseline};
use magskin_core::model::{
    check_gradients, load_checkpoint, save_checkpoint, Architecture, GradCheckSettings,
};
use magskin_core::skin::ContactLabel;
use magskin_core::stream::{
    default_contact_threshold, run_stream, EstimateSink, FrameSource, FramedSink, Pacing,
    ReplaySource, SimulatedSource, StreamOptions, TextSink, Waypoint,
};
use magskin_core::train::{train_with, write_history};
use magskin_core::Error;

use crate::run_config::{RunConfig, SourceKind};

pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidConfig(_) | Error::InvalidContact(_) => 2,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn require(path: &Path, what: &str, hint: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure {
            code: 2,
            message: format!("{what} {} not found ({hint})", path.display()),
        })
    }
}

fn create_out_dir(cfg: &RunConfig) -> CmdResult {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Failure {
        code: 2,
        message: format!("cannot create {}: {e}", cfg.out_dir.display()),
    })
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Error::from(e).into())
}

/// Prepends the run stamp to a text artifact written by `write`.
fn stamp_file(cfg: &RunConfig, command: &str, path: &Path) -> CmdResult {
    let body = fs::read_to_string(path).map_err(Error::from)?;
    write_text(path, &format!("{}\n{body}", cfg.stamp(command)))
}

pub fn gen_data(cfg: &RunConfig) -> CmdResult {
    create_out_dir(cfg)?;
    let ds = generate_dataset(&cfg.skin, &cfg.trajectory, cfg.seed)?;
    let path = cfg.dataset_path();
    save_csv(&ds, &path)?;
    println!(
        "samples={} config_digest={} path={}",
        ds.len(),
        ds.config.digest(),
        path.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> CmdResult {
    let data_path = cfg.dataset_path();
    require(&data_path, "dataset", "run gen-data first")?;
    create_out_dir(cfg)?;
    let ds = load_csv(&data_path)?;
    let (train_all, mut test) = split(&ds, cfg.split_mode, cfg.test_fraction, cfg.seed)?;
    let (mut train, mut val) = split(
        &train_all,
        SplitMode::Random,
        cfg.val_fraction,
        cfg.seed.wrapping_add(1),
    )?;
    let stats = fit_normalization(&train)?;
    for d in [&mut train, &mut val, &mut test] {
        d.normalization = Some(stats.clone());
    }
    eprintln!(
        "train={} val={} test={}",
        train.len(),
        val.len(),
        test.len()
    );
    let start = Instant::now();
    let out = train_with(
        &train,
        &val,
        &Architecture::default(),
        cfg.seed,
        &cfg.train,
        |r| {
            eprintln!(
                "epoch {:>4}  loss {:>10.4}  val xy {:.3} mm  val z {:.3} mm  ({:.0} s)",
                r.epoch,
                r.train_loss,
                r.val_xy_mean_mm,
                r.val_z_mean_mm,
                start.elapsed().as_secs_f64()
            )
        },
    )?;
    save_checkpoint(&out.best_params, &out.stats, &cfg.checkpoint_path())?;
    let history = cfg.out_dir.join("history.csv");
    write_history(&out.history, &history)?;
    stamp_file(cfg, "train", &history)?;
    save_csv(&test, &cfg.test_path())?;
    let best = &out.history[out.best_epoch];
    println!(
        "best_epoch={} val_xy_mean_mm={:.4} val_z_mean_mm={:.4} checkpoint={}",
        out.best_epoch,
        best.val_xy_mean_mm,
        best.val_z_mean_mm,
        cfg.checkpoint_path().display()
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> CmdResult {
    let (ckpt, test_path) = (cfg.checkpoint_path(), cfg.test_path());
    require(&ckpt, "checkpoint", "run train first")?;
    require(&test_path, "test set", "run train first")?;
    create_out_dir(cfg)?;
    let (params, stats) = load_checkpoint(&ckpt)?;
    let test = load_csv(&test_path)?;
    let report = evaluate(&params, &stats, &test)?;
    let map = cfg.out_dir.join("error_map.csv");
    error_map_export(&report, &map)?;
    stamp_file(cfg, "eval", &map)?;
    write_text(
        &cfg.out_dir.join("report.txt"),
        &format!("{}\n{}", cfg.stamp("eval"), report.to_key_values()),
    )?;
    println!("{}", report.summary());
    print!("{}", report.to_key_values());
    Ok(())
}

pub fn baseline(cfg: &RunConfig) -> CmdResult {
    let test_path = cfg.test_path();
    require(&test_path, "test set", "run train first")?;
    create_out_dir(cfg)?;
    let report = evaluate_baseline(&load_csv(&test_path)?)?;
    write_text(
        &cfg.out_dir.join("baseline_report.txt"),
        &format!("{}\n{}", cfg.stamp("baseline"), report.to_key_values()),
    )?;
    println!("nearest-sensor baseline: {}", report.summary());
    print!("{}", report.to_key_values());
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig) -> CmdResult {
    let settings = GradCheckSettings {
        draws: cfg.gradcheck_draws,
        first_seed: cfg.seed,
        ..GradCheckSettings::default()
    };
    let arch = Architecture::tiny();
    let start = Instant::now();
    let r = check_gradients(&arch, &settings)?;
    println!(
        "draws={} rejected={} entries={} max_rel_error={:e} max_abs_error={:e} elapsed_s={:.2}",
        r.accepted,
        r.rejected,
        r.entries_checked,
        r.max_rel_error,
        r.max_abs_error,
        start.elapsed().as_secs_f64()
    );
    if r.passed() {
        println!("gradcheck passed");
        Ok(())
    } else {
        for f in r.failures.iter().take(20) {
            eprintln!("{f}");
        }
        Err(Failure {
            code: 1,
            message: format!("gradcheck failed on {} entries", r.failures.len()),
        })
    }
}

pub fn infer(cfg: &RunConfig) -> CmdResult {
    let ckpt = cfg.checkpoint_path();
    require(&ckpt, "checkpoint", "run train first")?;
    let (params, stats) = load_checkpoint(&ckpt)?;
    let rate = cfg.skin.sample_rate_hz;
    let (source, threshold): (Box<dyn FrameSource>, f64) = match cfg.stream.source {
        SourceKind::Replay => {
            let test_path = cfg.test_path();
            require(&test_path, "test set", "run train first")?;
            let ds = load_csv(&test_path)?;
            let t = default_contact_threshold(&ds.config);
            (
                Box::new(ReplaySource::new(&ds, rate, cfg.stream.loop_replay)?),
                t,
            )
        }
        SourceKind::Simulated => {
            let path = cfg
                .stream
                .path
                .chunks_exact(4)
                .map(|q| Waypoint {
                    contact: ContactLabel::new(q[0], q[1], q[2]),
                    frames: q[3] as usize,
                })
                .collect();
            let t = default_contact_threshold(&cfg.skin);
            (
                Box::new(SimulatedSource::new(cfg.skin.clone(), path, rate)?),
                t,
            )
        }
    };
    let opts = StreamOptions {
        duration: (cfg.stream.duration_s > 0.0)
            .then(|| Duration::from_secs_f64(cfg.stream.duration_s)),
        pacing: if cfg.stream.realtime {
            Pacing::RealTime
        } else {
            Pacing::Unpaced
        },
        contact_threshold_ut: cfg.stream.contact_threshold_ut.unwrap_or(threshold),
    };
    let sink_spec = cfg.stream.sink.as_str();
    let mut sink: Box<dyn EstimateSink> = if sink_spec == "stdout" {
        Box::new(TextSink(std::io::stdout().lock()))
    } else if let Some(addr) = sink_spec.strip_prefix("tcp:") {
        let conn = std::net::TcpStream::connect(addr).map_err(|e| Failure {
            code: 1,
            message: format!("cannot connect to {addr}: {e}"),
        })?;
        Box::new(FramedSink(conn))
    } else {
        create_out_dir(cfg)?;
        let path = cfg.out_dir.join(sink_spec);
        let file = fs::File::create(&path).map_err(Error::from)?;
        Box::new(TextSink(BufWriter::new(file)))
    };
    let summary = run_stream(source, &params, &stats, sink.as_mut(), &opts)?;
    drop(sink);
    let line = summary.to_line();
    if sink_spec == "stdout" {
        eprintln!("{line}");
    } else {
        println!("{line}");
    }
    std::io::stdout().flush().map_err(Error::from)?;
    Ok(())
}
