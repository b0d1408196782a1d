//! Real-time inference: a producer paces sensor frames into a single-slot
//! mailbox (latest frame wins, overwritten frames are counted as dropped)
//! and the consumer turns each frame into a position estimate.

use std::io::Write;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{model_input, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::model::{forward, ModelParams};
use crate::skin::{
    deform, delta_frame, read_sensors, ContactLabel, SensorFrame, SkinConfig, CHANNELS,
};
use crate::tensor::Tensor;

/// Default frame rate of the sensor array.
pub const DEFAULT_RATE_HZ: f64 = 41.7;

pub trait FrameSource: Send {
    /// Next frame, or `None` once the source is exhausted.
    fn next_frame(&mut self) -> Result<Option<SensorFrame>>;
    /// Reading that `ΔB` is taken against.
    fn baseline(&self) -> &SensorFrame;
    fn rate_hz(&self) -> f64;
}

fn frame_time_ms(index: u64, rate_hz: f64) -> f64 {
    index as f64 * 1000.0 / rate_hz
}

/// A contact held for `frames` frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub contact: ContactLabel,
    pub frames: usize,
}

/// Live simulator following a scripted path of held contacts.
pub struct SimulatedSource {
    config: SkinConfig,
    path: Vec<Waypoint>,
    baseline: SensorFrame,
    rate_hz: f64,
    rng: ChaCha8Rng,
    waypoint: usize,
    held: usize,
    index: u64,
    /// Magnets for the current waypoint, computed once per waypoint.
    magnets: Option<Vec<crate::skin::MagnetState>>,
}

impl SimulatedSource {
    pub fn new(config: SkinConfig, path: Vec<Waypoint>, rate_hz: f64) -> Result<Self> {
        config.validate()?;
        check_rate(rate_hz)?;
        for w in &path {
            w.contact.validate(&config)?;
        }
        Ok(Self {
            baseline: config.baseline()?,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            path,
            rate_hz,
            waypoint: 0,
            held: 0,
            index: 0,
            magnets: None,
        })
    }
}

impl FrameSource for SimulatedSource {
    fn next_frame(&mut self) -> Result<Option<SensorFrame>> {
        while let Some(w) = self.path.get(self.waypoint) {
            if self.held < w.frames {
                break;
            }
            self.waypoint += 1;
            self.held = 0;
            self.magnets = None;
        }
        let Some(w) = self.path.get(self.waypoint) else {
            return Ok(None);
        };
        if self.magnets.is_none() {
            self.magnets = Some(deform(&self.config, &w.contact)?);
        }
        let mut frame = read_sensors(&self.config, self.magnets.as_ref().unwrap(), &mut self.rng)?;
        frame.t_ms = frame_time_ms(self.index, self.rate_hz);
        self.held += 1;
        self.index += 1;
        Ok(Some(frame))
    }

    fn baseline(&self) -> &SensorFrame {
        &self.baseline
    }

    fn rate_hz(&self) -> f64 {
        self.rate_hz
    }
}

/// Replays recorded `ΔB` vectors (baseline zero) in dataset order,
/// optionally looping.
pub struct ReplaySource {
    frames: Vec<[f64; CHANNELS]>,
    baseline: SensorFrame,
    rate_hz: f64,
    looped: bool,
    index: u64,
}

impl ReplaySource {
    pub fn new(ds: &Dataset, rate_hz: f64, looped: bool) -> Result<Self> {
        check_rate(rate_hz)?;
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            frames: ds.samples.iter().map(|s| s.delta_b).collect(),
            baseline: SensorFrame::zeros(),
            rate_hz,
            looped,
            index: 0,
        })
    }
}

impl FrameSource for ReplaySource {
    fn next_frame(&mut self) -> Result<Option<SensorFrame>> {
        let n = self.frames.len() as u64;
        if !self.looped && self.index >= n {
            return Ok(None);
        }
        let frame = SensorFrame {
            t_ms: frame_time_ms(self.index, self.rate_hz),
            b_ut: self.frames[(self.index % n) as usize],
        };
        self.index += 1;
        Ok(Some(frame))
    }

    fn baseline(&self) -> &SensorFrame {
        &self.baseline
    }

    fn rate_hz(&self) -> f64 {
        self.rate_hz
    }
}

fn check_rate(rate_hz: f64) -> Result<()> {
    if rate_hz > 0.0 && rate_hz.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "frame rate must be positive, got {rate_hz}"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    /// Position of the frame in the source sequence.
    pub seq: u64,
    pub t_ms: f64,
    pub x_mm: f64,
    pub y_mm: f64,
    pub z_mm: f64,
    /// False marks the position as unreliable (no contact detected).
    pub contact: bool,
    pub latency_ms: f64,
}

impl Estimate {
    /// `t_ms x y z flag latency`
    pub fn to_line(&self) -> String {
        format!(
            "{:.3} {} {} {} {} {:.4}",
            self.t_ms, self.x_mm, self.y_mm, self.z_mm, self.contact as u8, self.latency_ms
        )
    }
}

/// Strict threshold on the largest channel magnitude.
pub fn contact_detect(delta_b: &[f64; CHANNELS], threshold_ut: f64) -> bool {
    delta_b.iter().fold(0.0f64, |m, v| m.max(v.abs())) > threshold_ut
}

pub fn default_contact_threshold(config: &SkinConfig) -> f64 {
    5.0 * config.noise_sigma_ut
}

pub trait EstimateSink {
    fn emit(&mut self, estimate: &Estimate) -> Result<()>;
}

impl EstimateSink for Vec<Estimate> {
    fn emit(&mut self, estimate: &Estimate) -> Result<()> {
        self.push(*estimate);
        Ok(())
    }
}

/// One text line per estimate.
pub struct TextSink<W: Write>(pub W);

impl<W: Write> EstimateSink for TextSink<W> {
    fn emit(&mut self, e: &Estimate) -> Result<()> {
        writeln!(self.0, "{}", e.to_line())?;
        Ok(())
    }
}

/// Little-endian `u32` byte length followed by the text line (no newline).
pub struct FramedSink<W: Write>(pub W);

impl<W: Write> EstimateSink for FramedSink<W> {
    fn emit(&mut self, e: &Estimate) -> Result<()> {
        let line = e.to_line();
        self.0.write_all(&(line.len() as u32).to_le_bytes())?;
        self.0.write_all(line.as_bytes())?;
        self.0.flush()?;
        Ok(())
    }
}

/// Latency histogram with 10 µs buckets up to 1 s; memory is constant.
#[derive(Debug, Clone)]
pub struct LatencyHistogram {
    buckets: Vec<u64>,
    overflow: u64,
    count: u64,
    max_ms: f64,
}

const BUCKET_MS: f64 = 0.01;
const BUCKETS: usize = 100_000;

impl Default for LatencyHistogram {
    fn default() -> Self {
        Self {
            buckets: vec![0; BUCKETS],
            overflow: 0,
            count: 0,
            max_ms: 0.0,
        }
    }
}

impl LatencyHistogram {
    pub fn record(&mut self, ms: f64) {
        let b = (ms / BUCKET_MS).floor();
        if b < BUCKETS as f64 {
            self.buckets[b.max(0.0) as usize] += 1;
        } else {
            self.overflow += 1;
        }
        self.count += 1;
        self.max_ms = self.max_ms.max(ms);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Upper edge of the bucket holding the `q`-quantile; the maximum for
    /// samples beyond the last bucket.
    pub fn quantile(&self, q: f64) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let rank = ((q * self.count as f64).ceil() as u64).clamp(1, self.count);
        let mut seen = 0;
        for (i, &n) in self.buckets.iter().enumerate() {
            seen += n;
            if seen >= rank {
                return ((i + 1) as f64 * BUCKET_MS).min(self.max_ms.max(i as f64 * BUCKET_MS));
            }
        }
        self.max_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pacing {
    /// Producer thread emits at the source rate; late frames are dropped.
    RealTime,
    /// Single thread, every frame processed as fast as possible.
    Unpaced,
}

#[derive(Debug, Clone)]
pub struct StreamOptions {
    /// Stop after this much stream time; `None` runs until exhaustion.
    pub duration: Option<Duration>,
    pub pacing: Pacing,
    pub contact_threshold_ut: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSummary {
    pub produced: u64,
    pub processed: u64,
    pub dropped: u64,
    pub p50_latency_ms: f64,
    pub p99_latency_ms: f64,
    pub max_latency_ms: f64,
    pub wall_s: f64,
}

impl StreamSummary {
    pub fn to_line(&self) -> String {
        format!(
            "frames={} processed={} dropped={} p50_ms={:.3} p99_ms={:.3} max_ms={:.3} wall_s={:.2}",
            self.produced,
            self.processed,
            self.dropped,
            self.p50_latency_ms,
            self.p99_latency_ms,
            self.max_latency_ms,
            self.wall_s
        )
    }
}

struct Estimator<'a> {
    params: &'a ModelParams,
    stats: &'a NormStats,
    baseline: SensorFrame,
    threshold: f64,
    hist: LatencyHistogram,
}

impl Estimator<'_> {
    fn estimate(&mut self, seq: u64, frame: &SensorFrame) -> Result<Estimate> {
        let start = Instant::now();
        let delta = delta_frame(frame, &self.baseline);
        let [x, y, z] = forward(self.params, &model_input(&delta, self.stats))?;
        let contact = contact_detect(&delta, self.threshold);
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        self.hist.record(latency_ms);
        Ok(Estimate {
            seq,
            t_ms: frame.t_ms,
            x_mm: x,
            y_mm: y,
            z_mm: z,
            contact,
            latency_ms,
        })
    }
}

#[derive(Default)]
struct Slot {
    frame: Option<(u64, SensorFrame)>,
    done: bool,
    produced: u64,
    dropped: u64,
    error: Option<Error>,
}

/// Streams `source` through the model into `sink` and reports throughput
/// and compute-latency percentiles.
pub fn run_stream(
    mut source: Box<dyn FrameSource>,
    params: &ModelParams,
    stats: &NormStats,
    sink: &mut dyn EstimateSink,
    opts: &StreamOptions,
) -> Result<StreamSummary> {
    forward(params, &Tensor::zeros(&[4, 4, 3]))?;
    let mut est = Estimator {
        params,
        stats,
        baseline: *source.baseline(),
        threshold: opts.contact_threshold_ut,
        hist: LatencyHistogram::default(),
    };
    let rate = source.rate_hz();
    let frame_limit = opts
        .duration
        .map(|d| (d.as_secs_f64() * rate).ceil() as u64);
    let start = Instant::now();
    let (produced, dropped, processed) = match opts.pacing {
        Pacing::Unpaced => {
            let mut n = 0;
            while frame_limit.is_none_or(|l| n < l) {
                let Some(frame) = source.next_frame()? else {
                    break;
                };
                sink.emit(&est.estimate(n, &frame)?)?;
                n += 1;
            }
            (n, 0, n)
        }
        Pacing::RealTime => {
            let slot = Mutex::new(Slot::default());
            let ready = Condvar::new();
            let period = Duration::from_secs_f64(1.0 / rate);
            std::thread::scope(|scope| -> Result<(u64, u64, u64)> {
                scope.spawn(|| {
                    let mut k: u64 = 0;
                    loop {
                        if frame_limit.is_some_and(|l| k >= l) {
                            break;
                        }
                        let deadline = start + period.mul_f64(k as f64);
                        if let Some(wait) = deadline.checked_duration_since(Instant::now()) {
                            std::thread::sleep(wait);
                        }
                        let next = source.next_frame();
                        let mut s = slot.lock().unwrap();
                        if s.done {
                            // Consumer bailed out.
                            return;
                        }
                        match next {
                            Ok(Some(frame)) => {
                                if s.frame.replace((k, frame)).is_some() {
                                    s.dropped += 1;
                                }
                                s.produced += 1;
                            }
                            Ok(None) => break,
                            Err(e) => {
                                s.error = Some(e);
                                break;
                            }
                        }
                        drop(s);
                        ready.notify_one();
                        k += 1;
                    }
                    slot.lock().unwrap().done = true;
                    ready.notify_one();
                });

                let mut processed = 0;
                let result = loop {
                    let mut s = slot.lock().unwrap();
                    while s.frame.is_none() && !s.done {
                        s = ready.wait(s).unwrap();
                    }
                    let Some((seq, frame)) = s.frame.take() else {
                        break Ok(());
                    };
                    drop(s);
                    let r = est.estimate(seq, &frame).and_then(|e| sink.emit(&e));
                    if let Err(e) = r {
                        break Err(e);
                    }
                    processed += 1;
                };
                let mut s = slot.lock().unwrap();
                s.done = true;
                result?;
                if let Some(e) = s.error.take() {
                    return Err(e);
                }
                Ok((s.produced, s.dropped, processed))
            })?
        }
    };
    Ok(StreamSummary {
        produced,
        processed,
        dropped,
        p50_latency_ms: est.hist.quantile(0.5),
        p99_latency_ms: est.hist.quantile(0.99),
        max_latency_ms: est.hist.max_ms,
        wall_s: start.elapsed().as_secs_f64(),
    })
}
