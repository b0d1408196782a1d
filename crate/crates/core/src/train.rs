//! AdamW training loop with per-epoch validation and best-model retention.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{KvList, KvMap};
use crate::dataset::{model_input, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{backward_acc, Architecture, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 64,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            shuffle: true,
        }
    }
}

/// Default epoch budget.
pub const DEFAULT_EPOCHS: usize = 40;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.batch_size >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "invalid training settings {self:?}"
            )))
        }
    }

    pub fn to_kv(&self, kv: &mut KvList) {
        kv.f64("learning_rate", self.learning_rate);
        kv.f64("weight_decay", self.weight_decay);
        kv.f64("beta1", self.beta1);
        kv.f64("beta2", self.beta2);
        kv.f64("eps", self.eps);
        kv.usize("batch_size", self.batch_size);
        kv.usize("epochs", self.epochs);
        kv.int("train_seed", self.seed);
        kv.bool("shuffle", self.shuffle);
    }

    pub fn read_kv(&mut self, kv: &mut KvMap) -> Result<()> {
        kv.take_f64("learning_rate", &mut self.learning_rate)?;
        kv.take_f64("weight_decay", &mut self.weight_decay)?;
        kv.take_f64("beta1", &mut self.beta1)?;
        kv.take_f64("beta2", &mut self.beta2)?;
        kv.take_f64("eps", &mut self.eps)?;
        kv.take_usize("batch_size", &mut self.batch_size)?;
        kv.take_usize("epochs", &mut self.epochs)?;
        kv.take_u64("train_seed", &mut self.seed)?;
        kv.take_bool("shuffle", &mut self.shuffle)?;
        Ok(())
    }
}

/// Step count and moment estimates mirroring every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub t: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamWState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One AdamW update of a flat parameter slice at step `t` (1-based):
/// `θ ← θ·(1 − lr·λ) − lr·m̂/(√v̂ + ε)`.
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &TrainConfig,
) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] = theta[i] * decay - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

pub fn adamw_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamWState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.architecture() != grads.architecture()
        || params.architecture() != state.m.architecture()
    {
        return Err(Error::shape(
            "adamw_step",
            "parameter, gradient and state architectures differ",
        ));
    }
    if let Some((name, _)) = grads
        .named_tensors()
        .into_iter()
        .find(|(_, t)| !t.is_finite())
    {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    state.t += 1;
    let t = state.t;
    let ps = params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in ps.into_iter().zip(grads.tensors()).zip(ms).zip(vs) {
        adamw_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), t, cfg);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_xy_mean_mm: f64,
    pub val_z_mean_mm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_params: ModelParams,
    /// Parameters from the epoch with the lowest validation xy error.
    pub best_params: ModelParams,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stats: NormStats,
}

/// Writes `epoch,train_loss,val_xy_mean_mm,val_z_mean_mm`.
pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_xy_mean_mm,val_z_mean_mm\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?}",
            r.epoch, r.train_loss, r.val_xy_mean_mm, r.val_z_mean_mm
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Mean loss and mean gradient of a batch, summed in batch order.
pub fn batch_gradient(
    params: &ModelParams,
    batch: &[(Tensor, [f64; 3])],
    grads: &mut ModelParams,
) -> Result<f64> {
    grads.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
    let mut loss = 0.0;
    for (x, y) in batch {
        loss += backward_acc(params, x, y, grads)?;
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok(loss / n)
}

pub fn train(
    train_ds: &Dataset,
    val_ds: &Dataset,
    model_seed: u64,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(
        train_ds,
        val_ds,
        &Architecture::default(),
        model_seed,
        cfg,
        |_| {},
    )
}

/// Full training loop; `on_epoch` observes each history record as it is
/// produced.
pub fn train_with(
    train_ds: &Dataset,
    val_ds: &Dataset,
    arch: &Architecture,
    model_seed: u64,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::EmptySplit { side: "train" });
    }
    if val_ds.is_empty() {
        return Err(Error::EmptySplit { side: "validation" });
    }
    let stats = train_ds
        .normalization
        .clone()
        .ok_or_else(|| Error::NormalizationMismatch("training set is not normalized".into()))?;
    if val_ds.normalization.as_ref() != Some(&stats) {
        return Err(Error::NormalizationMismatch(
            "validation set must carry the training statistics".into(),
        ));
    }
    let data: Vec<(Tensor, [f64; 3])> = train_ds
        .samples
        .iter()
        .map(|s| (model_input(&s.delta_b, &stats), s.label.as_array()))
        .collect();

    let mut params = ModelParams::init(arch, model_seed)?;
    let mut state = AdamWState::new(&params);
    let mut grads = params.zeros_like();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(epoch as u64);
            order = (0..data.len()).collect();
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i].clone()));
            let diverged = |loss| Error::Divergence {
                epoch,
                batch: b,
                loss,
            };
            let loss = match batch_gradient(&params, &batch, &mut grads) {
                Ok(l) if l.is_finite() => l,
                Ok(l) => return Err(diverged(l)),
                Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            adamw_step(&mut params, &grads, &mut state, cfg).map_err(|e| match e {
                Error::NonFinite(_) => diverged(loss),
                e => e,
            })?;
            loss_sum += loss * chunk.len() as f64;
        }
        let val = match evaluate(&params, &stats, val_ds) {
            Err(Error::NonFinite(_)) => {
                return Err(Error::Divergence {
                    epoch,
                    batch: 0,
                    loss: f64::NAN,
                })
            }
            other => other?,
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / data.len() as f64,
            val_xy_mean_mm: val.xy_mean,
            val_z_mean_mm: val.z_mean,
        };
        on_epoch(&record);
        if best.as_ref().is_none_or(|(xy, _, _)| val.xy_mean < *xy) {
            best = Some((val.xy_mean, epoch, params.clone()));
        }
        history.push(record);
    }
    let (best_epoch, best_params) = match best {
        Some((_, e, p)) => (e, p),
        None => (0, params.clone()),
    };
    Ok(TrainOutcome {
        final_params: params,
        best_params,
        best_epoch,
        history,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{fit_normalization, Sample, TrajectorySpec};
    use crate::model::{forward, mse_loss};
    use crate::skin::{ContactLabel, SkinConfig, CHANNELS};
    use rand::{Rng, SeedableRng};

    fn scalar_cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn first_step_hand_value() {
        let (mut th, mut m, mut v) = ([0.0], [0.0], [0.0]);
        adamw_update(&mut th, &[1.0], &mut m, &mut v, 1, &scalar_cfg());
        assert!(
            (th[0] - -0.099_999_999_000_000_01).abs() < 1e-15,
            "{}",
            th[0]
        );
    }

    #[test]
    fn two_step_fixture() {
        // Independent 40-digit evaluation of the update, lr 0.1, λ 1e-4.
        let table = [
            (0.1, 0.001, -0.099_999_999_000_000_009_999_999_9),
            (0.19, 0.001_999, -0.199_998_998_000_010_019_999_899_8),
        ];
        let (mut th, mut m, mut v) = ([0.0], [0.0], [0.0]);
        for (t, &(m_want, v_want, th_want)) in (1..).zip(&table) {
            adamw_update(&mut th, &[1.0], &mut m, &mut v, t, &scalar_cfg());
            assert!((m[0] - m_want).abs() < 1e-12);
            assert!((v[0] - v_want).abs() < 1e-12);
            assert!(
                (th[0] - th_want).abs() < 1e-12,
                "step {t}: {} vs {th_want}",
                th[0]
            );
        }
    }

    #[test]
    fn zero_gradient_is_pure_geometric_decay() {
        let cfg = scalar_cfg();
        let ratio = 1.0 - cfg.learning_rate * cfg.weight_decay;
        let mut params = ModelParams::init(&Architecture::tiny(), 3).unwrap();
        let grads = params.zeros_like();
        let mut state = AdamWState::new(&params);
        let mut expect: Vec<Vec<f64>> =
            params.tensors().iter().map(|t| t.data().to_vec()).collect();
        for step in 1..=25 {
            adamw_step(&mut params, &grads, &mut state, &cfg).unwrap();
            assert_eq!(state.t, step);
            for (t, e) in params.tensors().iter().zip(&mut expect) {
                e.iter_mut().for_each(|x| *x *= ratio);
                assert_eq!(t.data(), &e[..]);
            }
        }
    }

    #[test]
    fn zero_decay_equals_adam() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut th: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut adam = th.clone();
        let (mut m, mut v) = (vec![0.0; 50], vec![0.0; 50]);
        let (mut am, mut av) = (vec![0.0; 50], vec![0.0; 50]);
        for t in 1..=10u64 {
            let g: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
            adamw_update(&mut th, &g, &mut m, &mut v, t, &cfg);
            for i in 0..50 {
                am[i] = 0.9 * am[i] + 0.1 * g[i];
                av[i] = 0.999 * av[i] + 0.001 * g[i] * g[i];
                let mh = am[i] / (1.0 - 0.9f64.powi(t as i32));
                let vh = av[i] / (1.0 - 0.999f64.powi(t as i32));
                adam[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for (a, b) in th.iter().zip(&adam) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut params = ModelParams::init(&Architecture::tiny(), 3).unwrap();
        let mut grads = params.zeros_like();
        grads.fc[0].bias.data_mut()[0] = f64::NAN;
        let mut state = AdamWState::new(&params);
        assert!(matches!(
            adamw_step(&mut params, &grads, &mut state, &TrainConfig::default()),
            Err(Error::NonFinite(_))
        ));
    }

    fn random_batch(n: usize, seed: u64, arch: &Architecture) -> Vec<(Tensor, [f64; 3])> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let data = (0..16 * arch.in_channels)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                let x = Tensor::new(vec![4, 4, arch.in_channels], data).unwrap();
                (
                    x,
                    [
                        rng.random_range(0.0..140.0),
                        rng.random_range(0.0..140.0),
                        rng.random_range(0.0..5.0),
                    ],
                )
            })
            .collect()
    }

    #[test]
    fn small_lr_loss_is_non_increasing() {
        let arch = Architecture::default();
        let batch = random_batch(8, 6, &arch);
        let cfg = TrainConfig {
            learning_rate: 1e-5,
            ..TrainConfig::default()
        };
        let mut params = ModelParams::init(&arch, 2).unwrap();
        let mut state = AdamWState::new(&params);
        let mut g = params.zeros_like();
        let mut prev = f64::INFINITY;
        for _ in 0..20 {
            let loss = batch_gradient(&params, &batch, &mut g).unwrap();
            assert!(loss <= prev + 1e-12, "{loss} > {prev}");
            prev = loss;
            adamw_step(&mut params, &g, &mut state, &cfg).unwrap();
        }
    }

    #[test]
    fn duplicate_batch_equals_single() {
        let arch = Architecture::tiny();
        let params = ModelParams::init(&arch, 9).unwrap();
        let one = random_batch(1, 3, &arch);
        let two = vec![one[0].clone(), one[0].clone()];
        let (mut g1, mut g2) = (params.zeros_like(), params.zeros_like());
        let l1 = batch_gradient(&params, &one, &mut g1).unwrap();
        let l2 = batch_gradient(&params, &two, &mut g2).unwrap();
        assert_eq!(l1, l2);
        // Both copies accumulate into one buffer, so summation order differs
        // from doubling and the result may move by an ulp.
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-13 * x.abs().max(1.0), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_sample_gradients() {
        let arch = Architecture::tiny();
        let params = ModelParams::init(&arch, 9).unwrap();
        let batch = random_batch(3, 8, &arch);
        let mut g = params.zeros_like();
        let loss = batch_gradient(&params, &batch, &mut g).unwrap();
        let mut want_loss = 0.0;
        let mut want: Vec<Vec<f64>> = g.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        for (x, y) in &batch {
            let (l, gi) = crate::model::loss_and_grads(&params, x, y).unwrap();
            want_loss += l / 3.0;
            for (w, t) in want.iter_mut().zip(gi.tensors()) {
                w.iter_mut().zip(t.data()).for_each(|(a, b)| *a += b / 3.0);
            }
        }
        assert!((loss - want_loss).abs() < 1e-9 * want_loss);
        for (w, t) in want.iter().zip(g.tensors()) {
            for (a, b) in w.iter().zip(t.data()) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ds = Dataset::empty(SkinConfig::default(), TrajectorySpec::default());
        for _ in 0..n {
            let mut delta_b = [0.0; CHANNELS];
            delta_b
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-50.0..50.0));
            ds.samples.push(Sample {
                delta_b,
                label: ContactLabel::new(
                    rng.random_range(0.0..140.0),
                    rng.random_range(0.0..140.0),
                    rng.random_range(1.0..5.0),
                ),
            });
        }
        ds.normalization = Some(fit_normalization(&ds).unwrap());
        ds
    }

    #[test]
    fn overfits_a_single_sample() {
        let mut ds = tiny_dataset(2, 1);
        ds.samples.truncate(1);
        ds.normalization = Some(NormStats::identity());
        let cfg = TrainConfig {
            epochs: 2000,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let out = train_with(&ds, &ds, &Architecture::default(), 1, &cfg, |_| {}).unwrap();
        let s = &ds.samples[0];
        let pred = forward(&out.final_params, &model_input(&s.delta_b, &out.stats)).unwrap();
        let loss = mse_loss(&pred, &s.label.as_array());
        assert!(loss < 1e-3, "final loss {loss}");
    }

    #[test]
    fn training_is_bit_reproducible() {
        let ds = tiny_dataset(20, 2);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 6,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = || {
            train_with(
                &ds,
                &ds,
                &Architecture {
                    in_channels: 3,
                    ..Architecture::tiny()
                },
                4,
                &cfg,
                |_| {},
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a.history.len(), 3);
        let best = a
            .history
            .iter()
            .map(|r| r.val_xy_mean_mm)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(a.history[a.best_epoch].val_xy_mean_mm, best);
    }

    #[test]
    fn divergence_names_epoch_and_batch() {
        let ds = tiny_dataset(10, 3);
        let cfg = TrainConfig {
            learning_rate: 1e300,
            epochs: 5,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let arch = Architecture {
            in_channels: 3,
            ..Architecture::tiny()
        };
        match train_with(&ds, &ds, &arch, 1, &cfg, |_| {}) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|o| o.history)),
        }
    }

    #[test]
    fn unnormalized_input_is_rejected() {
        let mut ds = tiny_dataset(4, 3);
        ds.normalization = None;
        assert!(matches!(
            train(&ds, &ds, 1, &TrainConfig::default()),
            Err(Error::NormalizationMismatch(_))
        ));
    }

    #[test]
    fn config_validation_and_kv() {
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            beta1: 1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        let cfg = TrainConfig {
            epochs: 7,
            shuffle: false,
            ..TrainConfig::default()
        };
        let mut kv = KvList::default();
        cfg.to_kv(&mut kv);
        let mut map = KvMap::parse(&kv.render()).unwrap();
        let mut back = TrainConfig::default();
        back.read_kv(&mut map).unwrap();
        map.finish().unwrap();
        assert_eq!(back, cfg);
        assert_eq!(TrainConfig::default().weight_decay, 1e-4);
    }
}
