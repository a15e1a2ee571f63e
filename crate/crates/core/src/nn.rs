//! Layers built on the tape: dense (linear) layers and batch normalization.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// A trainable value with its accumulated gradient and optimizer velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub velocity: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            velocity,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Copies the value onto `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Var {
        tape.leaf(self.value.clone(), trainable)
    }

    /// Adds the tape gradient of `var` (if any) into `self.grad`.
    pub fn accumulate(&mut self, grads: &crate::tape::Gradients, var: Var) -> Result<()> {
        if let Some(g) = grads.get(var) {
            self.grad.add_assign(g)?;
        }
        Ok(())
    }
}

/// Forward mode of a network pass.
///
/// `Train` normalizes by batch statistics; whether those statistics are then
/// folded into the running averages is the caller's decision (see
/// [`BatchNormLayer::track`]). `Eval` normalizes by the running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `y = x·w + b` with `w: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundDense {
    pub weight: Var,
    pub bias: Var,
}

impl Dense {
    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weight and bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let w = Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out)).expect("shape");
        let b = Tensor::vector(draw(fan_out));
        Self {
            weight: Param::new(w),
            bias: Param::new(b),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Param::new(Tensor::zeros(&[fan_in, fan_out])),
            bias: Param::new(Tensor::zeros(&[fan_out])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundDense {
        BoundDense {
            weight: self.weight.bind(tape, trainable),
            bias: self.bias.bind(tape, trainable),
        }
    }

    pub fn accumulate(&mut self, grads: &crate::tape::Gradients, bound: &BoundDense) -> Result<()> {
        self.weight.accumulate(grads, bound.weight)?;
        self.bias.accumulate(grads, bound.bias)
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    /// Plain matrix evaluation without a tape.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let b = self.bind(&mut tape, false);
        let y = linear_forward(&mut tape, xv, b.weight, b.bias)?;
        Ok(tape.value(y).clone())
    }
}

/// `x·w + b` for `x: [batch, in]`, `w: [in, out]`, `b: [out]`.
pub fn linear_forward(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let out = tape.value(w).shape().get(1).copied();
    if tape.value(b).numel() != out.unwrap_or(0) {
        return Err(Error::Shape {
            op: "linear bias",
            lhs: tape.value(w).shape().to_vec(),
            rhs: tape.value(b).shape().to_vec(),
        });
    }
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

/// Per-channel batch normalization with running statistics.
///
/// `running_mean` / `running_var` are the exponential averages of the batch
/// mean and (biased) batch variance of this layer's *input*.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBatchNorm {
    pub gamma: Var,
    pub beta: Var,
}

/// Output of a batch-norm pass. In batch-statistics modes `batch_mean` and
/// `batch_var` are differentiable `[1, channels]` values of the input.
#[derive(Debug, Clone, Copy)]
pub struct BnOutput {
    pub output: Var,
    pub batch_mean: Option<Var>,
    pub batch_var: Option<Var>,
}

impl BatchNormLayer {
    pub fn new(num_channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::ones(&[num_channels])),
            beta: Param::new(Tensor::zeros(&[num_channels])),
            running_mean: vec![0.0; num_channels],
            running_var: vec![1.0; num_channels],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn num_channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundBatchNorm {
        BoundBatchNorm {
            gamma: self.gamma.bind(tape, trainable),
            beta: self.beta.bind(tape, trainable),
        }
    }

    pub fn accumulate(
        &mut self,
        grads: &crate::tape::Gradients,
        bound: &BoundBatchNorm,
    ) -> Result<()> {
        self.gamma.accumulate(grads, bound.gamma)?;
        self.beta.accumulate(grads, bound.beta)
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    /// `running ← (1 − momentum)·running + momentum·batch` for mean and
    /// (biased) variance.
    pub fn track(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = self.momentum;
        for c in 0..self.num_channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * batch_mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * batch_var[c];
        }
    }
}

/// Normalizes `x: [batch, channels]`.
///
/// In [`Mode::Train`] the batch statistics are returned as differentiable
/// values; the layer's running statistics are never modified here.
pub fn batchnorm_forward(
    tape: &mut Tape,
    x: Var,
    layer: &BatchNormLayer,
    bound: &BoundBatchNorm,
    mode: Mode,
) -> Result<BnOutput> {
    let xt = tape.value(x);
    let channels = layer.num_channels();
    if xt.shape().len() != 2 || xt.cols() != channels {
        return Err(Error::Shape {
            op: "batchnorm",
            lhs: xt.shape().to_vec(),
            rhs: vec![channels],
        });
    }
    if mode == Mode::Eval {
        let rm = tape.constant(Tensor::vector(layer.running_mean.clone()));
        let inv_std: Vec<f64> = layer
            .running_var
            .iter()
            .map(|v| 1.0 / (v + layer.epsilon).sqrt())
            .collect();
        let inv = tape.constant(Tensor::vector(inv_std));
        let xc = tape.sub(x, rm)?;
        let xhat = tape.mul(xc, inv)?;
        let scaled = tape.mul(xhat, bound.gamma)?;
        let output = tape.add(scaled, bound.beta)?;
        return Ok(BnOutput {
            output,
            batch_mean: None,
            batch_var: None,
        });
    }

    if xt.rows() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "batch norm in train mode needs at least 2 samples, got {}",
            xt.rows()
        )));
    }
    let mean = tape.mean_rows(x)?;
    let xc = tape.sub(x, mean)?;
    let sq = tape.square(xc);
    let var = tape.mean_rows(sq)?;
    let var_eps = tape.add_scalar(var, layer.epsilon);
    let inv = tape.pow(var_eps, -0.5);
    let xhat = tape.mul(xc, inv)?;
    let scaled = tape.mul(xhat, bound.gamma)?;
    let output = tape.add(scaled, bound.beta)?;
    Ok(BnOutput {
        output,
        batch_mean: Some(mean),
        batch_var: Some(var),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Runs one pass and, in train mode, tracks the batch statistics.
    fn run_bn(x: Tensor, layer: &mut BatchNormLayer, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let b = layer.bind(&mut tape, false);
        let out = batchnorm_forward(&mut tape, xv, layer, &b, mode)?;
        if let (Some(m), Some(v)) = (out.batch_mean, out.batch_var) {
            let (m, v) = (tape.value(m).clone(), tape.value(v).clone());
            layer.track(m.data(), v.data());
        }
        Ok(tape.value(out.output).clone())
    }

    #[test]
    fn linear_identity_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
        let w = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = linear_forward(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn linear_identity_weight() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[1.0, 1.0]]));
        let w = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
        let b = tape.constant(Tensor::vector(vec![5.0, 5.0]));
        let y = linear_forward(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0, 6.0]);
    }

    #[test]
    fn linear_shape_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let err = linear_forward(&mut tape, x, w, b).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn normalized_input_passes_through() {
        // Per-channel mean 0, biased variance 1.
        let x = Tensor::from_rows(&[[1.0, -1.0], [-1.0, 1.0], [1.0, 1.0], [-1.0, -1.0]]);
        let mut layer = BatchNormLayer::new(2);
        let y = run_bn(x.clone(), &mut layer, Mode::Train).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let x = Tensor::from_rows(&[[3.0, 1.0], [-2.0, 7.0], [0.5, 0.0]]);
        let mut layer = BatchNormLayer::new(2);
        layer.gamma.value = Tensor::zeros(&[2]);
        layer.beta.value = Tensor::vector(vec![0.25, -4.0]);
        for mode in [Mode::Train, Mode::Eval] {
            let y = run_bn(x.clone(), &mut layer, mode).unwrap();
            for i in 0..3 {
                assert_eq!(y.row(i), &[0.25, -4.0]);
            }
        }
    }

    #[test]
    fn single_sample_train_batch_is_degenerate() {
        let mut layer = BatchNormLayer::new(2);
        let err = run_bn(Tensor::from_rows(&[[1.0, 2.0]]), &mut layer, Mode::Train);
        assert!(matches!(err, Err(Error::DegenerateBatch(_))));
        // Eval mode is fine with one sample.
        assert!(run_bn(Tensor::from_rows(&[[1.0, 2.0]]), &mut layer, Mode::Eval).is_ok());
    }

    #[test]
    fn forward_alone_leaves_running_stats() {
        let layer = BatchNormLayer::new(1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[5.0], [7.0]]));
        let b = layer.bind(&mut tape, false);
        batchnorm_forward(&mut tape, x, &layer, &b, Mode::Train).unwrap();
        assert_eq!(layer.running_mean, vec![0.0]);
        assert_eq!(layer.running_var, vec![1.0]);

        let mut layer = layer;
        run_bn(Tensor::from_rows(&[[5.0], [7.0]]), &mut layer, Mode::Train).unwrap();
        assert!((layer.running_mean[0] - 0.6).abs() < 1e-12);
        assert!((layer.running_var[0] - (0.9 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn running_mean_converges_to_population_mean() {
        let true_mean = [2.0, -1.5, 0.25];
        let sd = 0.5;
        let batch = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut layer = BatchNormLayer::new(3);
        for _ in 0..100 {
            let mut rows = Vec::new();
            for _ in 0..batch {
                let row: Vec<f64> = true_mean
                    .iter()
                    .map(|&m| Normal::new(m, sd).unwrap().sample(&mut rng))
                    .collect();
                rows.push(row);
            }
            run_bn(Tensor::from_rows(&rows), &mut layer, Mode::Train).unwrap();
        }
        // The EMA with momentum 0.1 averages roughly 2/0.1 - 1 = 19 batches.
        let eff_samples = (2.0 / BN_MOMENTUM - 1.0) * batch as f64;
        let se = sd / eff_samples.sqrt();
        for (rm, m) in layer.running_mean.iter().zip(true_mean) {
            assert!((rm - m).abs() < 3.0 * se, "{rm} vs {m}");
        }
    }

    #[test]
    fn train_mode_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..16)
            .map(|_| (0..4).map(|_| rng.random_range(-3.0..5.0)).collect())
            .collect();
        let mut layer = BatchNormLayer::new(4);
        let y = run_bn(Tensor::from_rows(&rows), &mut layer, Mode::Train).unwrap();
        for c in 0..4 {
            let col: Vec<f64> = (0..16).map(|i| y.get(i, c)).collect();
            let mean = col.iter().sum::<f64>() / 16.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
