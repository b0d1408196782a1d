use std::path::{Path, PathBuf};

use magskin_core::config::{KvList, KvMap};
use magskin_core::dataset::{SplitMode, TrajectorySpec};
use magskin_core::skin::SkinConfig;
use magskin_core::train::TrainConfig;
use magskin_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Replay,
    Simulated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSettings {
    pub source: SourceKind,
    /// Stream time in seconds; 0 runs until the source is exhausted.
    pub duration_s: f64,
    pub loop_replay: bool,
    pub realtime: bool,
    /// `None` means five times the configured noise sigma.
    pub contact_threshold_ut: Option<f64>,
    /// Flat `x, y, z, frames` quadruples.
    pub path: Vec<f64>,
    /// `stdout`, `tcp:HOST:PORT`, or a file path.
    pub sink: String,
}

impl Default for StreamSettings {
    fn default() -> Self {
        Self {
            source: SourceKind::Replay,
            duration_s: 0.0,
            loop_replay: false,
            realtime: true,
            contact_threshold_ut: None,
            path: vec![70.0, 70.0, 3.0, 100.0],
            sink: "estimates.txt".into(),
        }
    }
}

/// Every setting a subcommand may read, loaded from one flat file plus
/// overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub skin: SkinConfig,
    pub trajectory: TrajectorySpec,
    pub train: TrainConfig,
    pub split_mode: SplitMode,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub stream: StreamSettings,
    pub gradcheck_draws: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("out"),
            dataset_path: None,
            checkpoint_path: None,
            test_path: None,
            skin: SkinConfig::default(),
            trajectory: TrajectorySpec::default(),
            train: TrainConfig::default(),
            split_mode: SplitMode::Random,
            test_fraction: 0.2,
            val_fraction: 0.1,
            stream: StreamSettings::default(),
            gradcheck_draws: 100,
        }
    }
}

fn split_mode_name(m: SplitMode) -> &'static str {
    match m {
        SplitMode::Random => "random",
        SplitMode::HeldOutLocations => "held-out-locations",
    }
}

impl RunConfig {
    /// Defaults, then the optional file, then `key=value` overrides, then
    /// the dedicated seed and output flags.
    pub fn load(
        file: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
        out: Option<&Path>,
    ) -> Result<Self> {
        let mut kv = match file {
            Some(path) => {
                if !path.is_file() {
                    return Err(Error::InvalidConfig(format!(
                        "config file {} not found",
                        path.display()
                    )));
                }
                KvMap::from_file(path)
                    .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
            }
            None => KvMap::default(),
        };
        for o in overrides {
            kv.set_override(o)?;
        }
        let mut cfg = RunConfig::default();
        kv.take_u64("seed", &mut cfg.seed)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.skin.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.skin.read_kv(&mut kv)?;
        cfg.trajectory.read_kv(&mut kv)?;
        cfg.train.read_kv(&mut kv)?;

        let mut s = String::new();
        let path_key = |kv: &mut KvMap, key: &str, slot: &mut Option<PathBuf>| -> Result<()> {
            let mut v = String::new();
            kv.take_string(key, &mut v)?;
            if !v.is_empty() {
                *slot = Some(PathBuf::from(v));
            }
            Ok(())
        };
        let mut out_dir = String::new();
        kv.take_string("out_dir", &mut out_dir)?;
        if !out_dir.is_empty() {
            cfg.out_dir = PathBuf::from(out_dir);
        }
        if let Some(o) = out {
            cfg.out_dir = o.to_path_buf();
        }
        path_key(&mut kv, "dataset_path", &mut cfg.dataset_path)?;
        path_key(&mut kv, "checkpoint_path", &mut cfg.checkpoint_path)?;
        path_key(&mut kv, "test_path", &mut cfg.test_path)?;
        kv.take_string("split_mode", &mut s)?;
        if !s.is_empty() {
            cfg.split_mode = s.parse()?;
        }
        kv.take_f64("test_fraction", &mut cfg.test_fraction)?;
        kv.take_f64("val_fraction", &mut cfg.val_fraction)?;
        let mut src = String::new();
        kv.take_string("stream_source", &mut src)?;
        cfg.stream.source = match src.as_str() {
            "" | "replay" => SourceKind::Replay,
            "simulated" => SourceKind::Simulated,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "stream_source must be replay or simulated, got `{other}`"
                )))
            }
        };
        kv.take_f64("stream_duration_s", &mut cfg.stream.duration_s)?;
        kv.take_bool("stream_loop", &mut cfg.stream.loop_replay)?;
        kv.take_bool("stream_realtime", &mut cfg.stream.realtime)?;
        let mut threshold = f64::NAN;
        kv.take_f64("contact_threshold_ut", &mut threshold)?;
        if !threshold.is_nan() {
            cfg.stream.contact_threshold_ut = Some(threshold);
        }
        kv.take_f64_list("stream_waypoints", &mut cfg.stream.path)?;
        kv.take_string("stream_sink", &mut cfg.stream.sink)?;
        kv.take_usize("gradcheck_draws", &mut cfg.gradcheck_draws)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.skin.validate()?;
        self.trajectory.validate(&self.skin)?;
        self.train.validate()?;
        for (name, f) in [
            ("test_fraction", self.test_fraction),
            ("val_fraction", self.val_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in (0, 1), got {f}"
                )));
            }
        }
        if self.stream.path.len() % 4 != 0 {
            return Err(Error::InvalidConfig(
                "stream_waypoints needs x, y, z, frames quadruples".into(),
            ));
        }
        if !(self.stream.duration_s >= 0.0) {
            return Err(Error::InvalidConfig(
                "stream_duration_s must be >= 0".into(),
            ));
        }
        Ok(())
    }

    fn in_out(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out_dir.join(name))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.in_out(&self.dataset_path, "dataset.csv")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.in_out(&self.checkpoint_path, "checkpoint.mskn")
    }

    pub fn test_path(&self) -> PathBuf {
        self.in_out(&self.test_path, "test.csv")
    }

    pub fn to_kv(&self) -> KvList {
        let mut kv = KvList::default();
        kv.int("seed", self.seed);
        kv.str("out_dir", &self.out_dir.to_string_lossy());
        kv.str("dataset_path", &self.dataset_path().to_string_lossy());
        kv.str("checkpoint_path", &self.checkpoint_path().to_string_lossy());
        kv.str("test_path", &self.test_path().to_string_lossy());
        let mut skin = self.skin.clone();
        skin.seed = self.seed;
        let mut skin_kv = KvList::default();
        skin.to_kv(&mut skin_kv);
        kv.0.extend(skin_kv.0.into_iter().filter(|(k, _)| k != "seed"));
        self.trajectory.to_kv(&mut kv);
        self.train.to_kv(&mut kv);
        kv.str("split_mode", split_mode_name(self.split_mode));
        kv.f64("test_fraction", self.test_fraction);
        kv.f64("val_fraction", self.val_fraction);
        kv.str(
            "stream_source",
            match self.stream.source {
                SourceKind::Replay => "replay",
                SourceKind::Simulated => "simulated",
            },
        );
        kv.f64("stream_duration_s", self.stream.duration_s);
        kv.bool("stream_loop", self.stream.loop_replay);
        kv.bool("stream_realtime", self.stream.realtime);
        if let Some(t) = self.stream.contact_threshold_ut {
            kv.f64("contact_threshold_ut", t);
        }
        kv.f64_list("stream_waypoints", &self.stream.path);
        kv.str("stream_sink", &self.stream.sink);
        kv.usize("gradcheck_draws", self.gradcheck_draws);
        kv
    }

    /// Digest of every setting except file locations, so identical runs
    /// into different directories stamp identical artifacts.
    pub fn digest(&self) -> String {
        let mut kv = self.to_kv();
        kv.0.retain(|(k, _)| !(k == "out_dir" || k == "stream_sink" || k.ends_with("_path")));
        kv.digest()
    }

    /// Header line for text artifacts.
    pub fn stamp(&self, command: &str) -> String {
        format!(
            "# magskin {command} seed={} config={}",
            self.seed,
            self.digest()
        )
    }
}
