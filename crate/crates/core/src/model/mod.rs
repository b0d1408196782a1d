//! The contact regressor: four 3x3 "same" convolutions over the 4x4x3 sensor
//! image, dual global average/max pooling, and a five-layer fully connected
//! head producing `(x, y, z)` in millimetres.
//!
//! Input layout is `[rows, cols, axis]` with the sensor grid row-major along
//! y and the field axis minor, so the 48-channel frame vector maps onto the
//! input tensor without any permutation.

mod checkpoint;
mod gradcheck;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::{check_gradients, GradCheckReport, GradCheckSettings};

use crate::error::{Error, Result};
use crate::tensor::{
    concat, concat_backward, conv2d, conv2d_backward_acc, fc, fc_backward_acc, gap, gap_backward,
    gmp, gmp_backward, init_bias, init_weight, relu, relu_backward, InputGrad, Tensor,
};

/// Total learnable parameters of [`Architecture::default`].
pub const DEFAULT_PARAM_COUNT: usize = 823_747;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    /// Output channels of each convolution.
    pub conv_channels: Vec<usize>,
    /// Widths of the fully connected chain, starting at the pooled feature
    /// size (twice the last conv width) and ending at the 3 outputs.
    pub fc_dims: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            in_channels: 3,
            conv_channels: vec![32, 64, 128, 256],
            fc_dims: vec![512, 512, 256, 128, 64, 3],
        }
    }
}

impl Architecture {
    /// Scaled-down network with the same layer structure, used for gradient
    /// checking: convs 2→4→4→4→4, head 8→4→3.
    pub fn tiny() -> Self {
        Self {
            in_channels: 2,
            conv_channels: vec![4, 4, 4, 4],
            fc_dims: vec![8, 4, 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let last_conv = self.conv_channels.last().copied().unwrap_or(0);
        let ok = self.in_channels > 0
            && !self.conv_channels.is_empty()
            && self.conv_channels.iter().all(|&c| c > 0)
            && self.fc_dims.len() >= 2
            && self.fc_dims.iter().all(|&d| d > 0)
            && self.fc_dims[0] == 2 * last_conv
            && *self.fc_dims.last().unwrap() == 3;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "inconsistent architecture {self:?}"
            )))
        }
    }

    /// `(name, shape)` of every parameter tensor in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for (i, &cout) in self.conv_channels.iter().enumerate() {
            out.push((format!("conv{}.weight", i + 1), vec![3, 3, cin, cout]));
            out.push((format!("conv{}.bias", i + 1), vec![cout]));
            cin = cout;
        }
        for (i, pair) in self.fc_dims.windows(2).enumerate() {
            out.push((format!("fc{}.weight", i + 1), vec![pair[0], pair[1]]));
            out.push((format!("fc{}.bias", i + 1), vec![pair[1]]));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// All learnable tensors of the network. Gradients and optimizer moments use
/// the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    pub conv: Vec<LayerParams>,
    pub fc: Vec<LayerParams>,
}

impl ModelParams {
    /// He-style uniform initialisation; layer `k` (canonical order, weights
    /// only) draws from stream `k` of `seed`.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut conv = Vec::new();
        let mut cin = arch.in_channels;
        for (k, &cout) in arch.conv_channels.iter().enumerate() {
            conv.push(LayerParams {
                weight: init_weight(&[3, 3, cin, cout], 9 * cin, seed, k as u64),
                bias: init_bias(cout),
            });
            cin = cout;
        }
        let fc = arch
            .fc_dims
            .windows(2)
            .enumerate()
            .map(|(k, p)| LayerParams {
                weight: init_weight(
                    &[p[0], p[1]],
                    p[0],
                    seed,
                    (arch.conv_channels.len() + k) as u64,
                ),
                bias: init_bias(p[1]),
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            conv,
            fc,
        })
    }

    pub fn zeros(arch: &Architecture) -> Result<Self> {
        let mut p = Self::init(arch, 0)?;
        p.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut p = self.clone();
        p.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        p
    }

    /// Builds parameters from tensors in canonical order, checking shapes.
    pub fn from_tensors(arch: &Architecture, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::LayerMismatch {
                    layer: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        let mut it = tensors.into_iter();
        let mut take = || LayerParams {
            weight: it.next().unwrap(),
            bias: it.next().unwrap(),
        };
        let conv = (0..arch.conv_channels.len()).map(|_| take()).collect();
        let fc = (1..arch.fc_dims.len()).map(|_| take()).collect();
        Ok(Self {
            arch: arch.clone(),
            conv,
            fc,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.conv
            .iter()
            .chain(&self.fc)
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.conv
            .iter_mut()
            .chain(self.fc.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.arch
            .param_shapes()
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.tensors())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub(crate) fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
}

/// Intermediate activations kept for the backward pass.
struct Trace {
    /// Input of each convolution (the network input, then post-ReLU maps).
    conv_inputs: Vec<Tensor>,
    /// Post-ReLU output of the last convolution.
    features: Tensor,
    /// Input of each FC layer (pooled vector, then post-ReLU activations).
    fc_inputs: Vec<Tensor>,
    output: Tensor,
}

fn check_finite(t: &Tensor, layer: impl FnOnce() -> String) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(layer()))
    }
}

fn forward_trace(params: &ModelParams, input: &Tensor) -> Result<Trace> {
    let (_, _, c) = input.dims3("model forward")?;
    if c != params.arch.in_channels {
        return Err(Error::shape(
            "model forward",
            format!(
                "input has {c} channels, model expects {}",
                params.arch.in_channels
            ),
        ));
    }
    let mut conv_inputs = Vec::with_capacity(params.conv.len());
    let mut x = input.clone();
    for (i, layer) in params.conv.iter().enumerate() {
        let z = conv2d(&x, &layer.weight, &layer.bias)?;
        check_finite(&z, || format!("conv{}", i + 1))?;
        conv_inputs.push(x);
        x = relu(&z);
    }
    let features = x;
    let pooled = concat(&gap(&features)?, &gmp(&features)?)?;
    let mut fc_inputs = Vec::with_capacity(params.fc.len());
    let mut h = pooled;
    let last = params.fc.len() - 1;
    for (i, layer) in params.fc.iter().enumerate() {
        let z = fc(&h, &layer.weight, &layer.bias)?;
        check_finite(&z, || format!("fc{}", i + 1))?;
        fc_inputs.push(h);
        h = if i == last { z } else { relu(&z) };
    }
    Ok(Trace {
        conv_inputs,
        features,
        fc_inputs,
        output: h,
    })
}

/// Predicted `(x, y, z)` in mm for one `[4, 4, C]` input.
pub fn forward(params: &ModelParams, input: &Tensor) -> Result<[f64; 3]> {
    let out = forward_trace(params, input)?.output;
    Ok([out.data()[0], out.data()[1], out.data()[2]])
}

/// Mean of squared per-coordinate errors.
pub fn mse_loss(pred: &[f64; 3], target: &[f64; 3]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / 3.0
}

/// Writes the gradient of the MSE loss for one sample into `grads`
/// (overwriting it) and returns the loss.
pub fn backward_into(
    params: &ModelParams,
    input: &Tensor,
    target: &[f64; 3],
    grads: &mut ModelParams,
) -> Result<f64> {
    grads.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
    backward_acc(params, input, target, grads)
}

/// Like [`backward_into`] but adds the gradient to `grads`.
pub(crate) fn backward_acc(
    params: &ModelParams,
    input: &Tensor,
    target: &[f64; 3],
    grads: &mut ModelParams,
) -> Result<f64> {
    if grads.arch != params.arch {
        return Err(Error::shape(
            "backward",
            "gradient buffer has a different architecture",
        ));
    }
    let trace = forward_trace(params, input)?;
    let out = trace.output.data();
    let pred = [out[0], out[1], out[2]];
    let loss = mse_loss(&pred, target);
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }

    let mut d = Tensor::vector(
        pred.iter()
            .zip(target)
            .map(|(p, t)| 2.0 * (p - t) / 3.0)
            .collect(),
    );
    for i in (0..params.fc.len()).rev() {
        let x = &trace.fc_inputs[i];
        let g = &mut grads.fc[i];
        let mut dx = Tensor::zeros_like(x);
        fc_backward_acc(
            x,
            &params.fc[i].weight,
            &d,
            g.weight.data_mut(),
            g.bias.data_mut(),
            dx.data_mut(),
        )?;
        // fc_inputs[i] for i > 0 is the post-ReLU output of layer i - 1; its
        // positivity mask equals the pre-activation mask.
        d = if i > 0 { relu_backward(x, &dx)? } else { dx };
    }

    let c = *params.arch.conv_channels.last().unwrap();
    let (d_avg, d_max) = concat_backward(c, &d)?;
    let mut da = gap_backward(trace.features.shape(), &d_avg)?;
    let dm = gmp_backward(&trace.features, &d_max)?;
    da.data_mut()
        .iter_mut()
        .zip(dm.data())
        .for_each(|(a, b)| *a += b);

    let mut d = relu_backward(&trace.features, &da)?;
    for i in (0..params.conv.len()).rev() {
        let x = &trace.conv_inputs[i];
        let g = &mut grads.conv[i];
        if i == 0 {
            conv2d_backward_acc(
                x,
                &params.conv[i].weight,
                &d,
                g.weight.data_mut(),
                g.bias.data_mut(),
                &mut [],
                InputGrad::Skip,
            )?;
        } else {
            let mut dx = Tensor::zeros_like(x);
            conv2d_backward_acc(
                x,
                &params.conv[i].weight,
                &d,
                g.weight.data_mut(),
                g.bias.data_mut(),
                dx.data_mut(),
                InputGrad::NonZeroOnly,
            )?;
            d = relu_backward(x, &dx)?;
        }
    }
    Ok(loss)
}

/// MSE loss and its exact gradient w.r.t. every parameter for one sample.
pub fn loss_and_grads(
    params: &ModelParams,
    input: &Tensor,
    target: &[f64; 3],
) -> Result<(f64, ModelParams)> {
    let mut grads = params.zeros_like();
    let loss = backward_into(params, input, target, &mut grads)?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{allclose, finite_diff_grad, DEFAULT_FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_architecture_audit() {
        let arch = Architecture::default();
        let p = ModelParams::init(&arch, 1).unwrap();
        let shapes: Vec<_> = p
            .named_tensors()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        let expected: Vec<(String, Vec<usize>)> = [
            ("conv1.weight", vec![3, 3, 3, 32]),
            ("conv1.bias", vec![32]),
            ("conv2.weight", vec![3, 3, 32, 64]),
            ("conv2.bias", vec![64]),
            ("conv3.weight", vec![3, 3, 64, 128]),
            ("conv3.bias", vec![128]),
            ("conv4.weight", vec![3, 3, 128, 256]),
            ("conv4.bias", vec![256]),
            ("fc1.weight", vec![512, 512]),
            ("fc1.bias", vec![512]),
            ("fc2.weight", vec![512, 256]),
            ("fc2.bias", vec![256]),
            ("fc3.weight", vec![256, 128]),
            ("fc3.bias", vec![128]),
            ("fc4.weight", vec![128, 64]),
            ("fc4.bias", vec![64]),
            ("fc5.weight", vec![64, 3]),
            ("fc5.bias", vec![3]),
        ]
        .into_iter()
        .map(|(n, s)| (n.to_string(), s))
        .collect();
        assert_eq!(shapes, expected);
        // 896 + 18_496 + 73_856 + 295_168 + 262_656 + 131_328 + 32_896 + 8_256 + 195
        assert_eq!(p.param_count(), DEFAULT_PARAM_COUNT);
        assert_eq!(arch.param_count(), DEFAULT_PARAM_COUNT);
    }

    #[test]
    fn zero_input_with_zero_biases_returns_output_bias() {
        let mut p = ModelParams::init(&Architecture::default(), 3).unwrap();
        p.fc[4].bias = Tensor::vector(vec![1.5, -2.0, 0.25]);
        let out = forward(&p, &Tensor::zeros(&[4, 4, 3])).unwrap();
        assert_eq!(out, [1.5, -2.0, 0.25]);
    }

    #[test]
    fn forward_is_deterministic() {
        let p = ModelParams::init(&Architecture::default(), 11).unwrap();
        let q = ModelParams::init(&Architecture::default(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(
            vec![4, 4, 3],
            (0..48).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let a = forward(&p, &x).unwrap();
        let b = forward(&q, &x).unwrap();
        assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let p = ModelParams::init(&Architecture::default(), 0).unwrap();
        assert!(forward(&p, &Tensor::zeros(&[4, 4, 2])).is_err());
        assert!(forward(&p, &Tensor::zeros(&[48])).is_err());
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_gradient() {
        let p = ModelParams::init(&Architecture::default(), 5).unwrap();
        let x = Tensor::filled(&[4, 4, 3], 0.3);
        let target = forward(&p, &x).unwrap();
        let (loss, g) = loss_and_grads(&p, &x, &target).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g
            .tensors()
            .iter()
            .all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn unit_error_on_one_axis_gives_one_third() {
        let mut p = ModelParams::zeros(&Architecture::tiny()).unwrap();
        p.fc[1].bias = Tensor::vector(vec![1.0, 0.0, 0.0]);
        let (loss, _) = loss_and_grads(&p, &Tensor::zeros(&[4, 4, 2]), &[0.0; 3]).unwrap();
        assert_eq!(loss, 1.0 / 3.0);
    }

    #[test]
    fn non_finite_weights_are_reported_with_layer() {
        let mut p = ModelParams::init(&Architecture::tiny(), 0).unwrap();
        p.conv[2].bias.data_mut()[0] = f64::NAN;
        let err = loss_and_grads(&p, &Tensor::filled(&[4, 4, 2], 1.0), &[0.0; 3]).unwrap_err();
        assert!(
            matches!(err, Error::NonFinite(ref l) if l == "conv3"),
            "{err}"
        );
    }

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let arch = Architecture::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let params = ModelParams::init(&arch, 4).unwrap();
        let x = Tensor::new(
            vec![4, 4, 2],
            (0..32).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let target = [0.3, -0.2, 0.5];
        let (_, grads) = loss_and_grads(&params, &x, &target).unwrap();
        let n = params.tensors().len();
        for k in 0..n {
            let numeric = finite_diff_grad(
                |t| {
                    let mut p = params.clone();
                    *p.tensors_mut()[k] = t.clone();
                    let pred = forward(&p, &x).unwrap();
                    mse_loss(&pred, &target)
                },
                params.tensors()[k],
                DEFAULT_FD_STEP,
            );
            for (a, b) in grads.tensors()[k].data().iter().zip(numeric.data()) {
                assert!(allclose(*a, *b, 1e-6, 1e-9), "tensor {k}: {a} vs {b}");
            }
        }
    }

    fn frobenius(t: &Tensor) -> f64 {
        t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn output_is_lipschitz_in_input() {
        let p = ModelParams::init(&Architecture::default(), 8).unwrap();
        // Upper bound: each conv is at most the sum of its nine per-tap
        // Frobenius norms, pooling contributes sqrt(1/16 + 1), FC layers their
        // Frobenius norms, ReLU 1.
        let mut lip = (1.0f64 / 16.0 + 1.0).sqrt();
        for l in &p.conv {
            let s = l.weight.shape();
            let tap = s[2] * s[3];
            lip *= l
                .weight
                .data()
                .chunks_exact(tap)
                .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
                .sum::<f64>();
        }
        for l in &p.fc {
            lip *= frobenius(&l.weight);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = 1e-6;
        for _ in 0..10 {
            let x: Vec<f64> = (0..48).map(|_| rng.random_range(-2.0..2.0)).collect();
            let dir: Vec<f64> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let y: Vec<f64> = x
                .iter()
                .zip(&dir)
                .map(|(a, d)| a + eps * d / norm)
                .collect();
            let a = forward(&p, &Tensor::new(vec![4, 4, 3], x).unwrap()).unwrap();
            let b = forward(&p, &Tensor::new(vec![4, 4, 3], y).unwrap()).unwrap();
            let delta = a
                .iter()
                .zip(&b)
                .map(|(u, v)| (u - v).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(
                delta.is_finite() && delta <= lip * eps,
                "{delta} > {}",
                lip * eps
            );
        }
    }
}
