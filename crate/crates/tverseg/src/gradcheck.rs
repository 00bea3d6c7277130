//! Central finite-difference verification of every analytic gradient.
//!
//! These checks only ever call forward paths, so they stay independent of
//! the backward implementations they judge. Relative error uses an absolute
//! floor so exactly-zero gradients compare cleanly.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{
    tversky_loss_backward, tversky_loss_forward, LabelPlanes, PredictionPlanes, TverskyParams,
};
use crate::nn::{
    conv3d_backward, conv3d_forward, maxpool3d_backward, maxpool3d_forward, relu_backward,
    relu_forward, softmax_backward, softmax_channels, transposed_conv3d_backward,
    transposed_conv3d_forward, ConvKernel, Padding,
};
use crate::tensor::Tensor;
use crate::unet::{NetConfig, Network};

pub const FD_STEP: f64 = 1e-6;

/// Central difference of a scalar function at x.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Relative error with an absolute floor of 1e-4 on the denominator, so
/// near-zero gradient pairs do not blow up on finite-difference noise.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-4)
}

/// Outcome of one finite-difference suite.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub worst: String,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn summary_line(&self) -> String {
        format!(
            "[{}] {}: {} comparisons, max rel err {:.3e} (tolerance {:.0e}){}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.checked,
            self.max_rel_error,
            self.tolerance,
            if self.passed() {
                String::new()
            } else {
                format!("; worst: {}", self.worst)
            }
        )
    }
}

struct ReportBuilder {
    name: String,
    checked: usize,
    max_rel_error: f64,
    tolerance: f64,
    worst: String,
}

impl ReportBuilder {
    fn new(name: &str, tolerance: f64) -> Self {
        ReportBuilder {
            name: name.into(),
            checked: 0,
            max_rel_error: 0.0,
            tolerance,
            worst: String::new(),
        }
    }

    fn record(&mut self, numeric: f64, analytic: f64, detail: impl Fn() -> String) {
        self.checked += 1;
        let err = rel_error(numeric, analytic);
        if err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = format!("{} (fd={numeric:.9e}, analytic={analytic:.9e})", detail());
        }
    }

    fn finish(self) -> GradCheckReport {
        GradCheckReport {
            name: self.name,
            checked: self.checked,
            max_rel_error: self.max_rel_error,
            tolerance: self.tolerance,
            worst: self.worst,
        }
    }
}

use crate::loss::PENALTY_PAIRS;

/// Checks the analytic Tversky-loss gradient against central differences on
/// `instances` random prediction/label instances of 2..=64 voxels, cycling
/// through all five penalty pairs. Every coordinate of both planes is
/// probed. Tolerance 1e-5.
pub fn check_loss_gradients(instances: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ReportBuilder::new("tversky loss gradient vs finite differences", 1e-5);
    for instance in 0..instances {
        let (alpha, beta) = PENALTY_PAIRS[instance % PENALTY_PAIRS.len()];
        let params = TverskyParams::new(alpha, beta)?;
        let n = rng.gen_range(2..=64);
        let p0: Vec<f64> = (0..n).map(|_| rng.gen_range(0.02..0.98)).collect();
        let p1: Vec<f64> = (0..n).map(|_| rng.gen_range(0.02..0.98)).collect();
        let mut g0: Vec<f64> = (0..n)
            .map(|_| (rng.gen::<f64>() < 0.3) as u8 as f64)
            .collect();
        if g0.iter().all(|&g| g == 0.0) {
            let fix = rng.gen_range(0..n);
            g0[fix] = 1.0;
        }
        let pred = PredictionPlanes::new(
            Tensor::new(vec![n], p0.clone())?,
            Tensor::new(vec![n], p1.clone())?,
        )?;
        let labels = LabelPlanes::from_mask(&Tensor::new(vec![n], g0)?)?;
        let (d_p0, d_p1) = tversky_loss_backward(&pred, &labels, &params)?;

        for i in 0..n {
            let fd0 = central_diff(
                |v| {
                    let mut p = p0.clone();
                    p[i] = v;
                    let probe = PredictionPlanes::new(
                        Tensor::new(vec![n], p).unwrap(),
                        pred.p1().clone(),
                    )
                    .unwrap();
                    tversky_loss_forward(&probe, &labels, &params).unwrap().loss
                },
                p0[i],
                FD_STEP,
            );
            report.record(fd0, d_p0.data()[i], || {
                format!("instance {instance} (a={alpha}, b={beta}), p0[{i}]")
            });
            let fd1 = central_diff(
                |v| {
                    let mut p = p1.clone();
                    p[i] = v;
                    let probe = PredictionPlanes::new(
                        pred.p0().clone(),
                        Tensor::new(vec![n], p).unwrap(),
                    )
                    .unwrap();
                    tversky_loss_forward(&probe, &labels, &params).unwrap().loss
                },
                p1[i],
                FD_STEP,
            );
            report.record(fd1, d_p1.data()[i], || {
                format!("instance {instance} (a={alpha}, b={beta}), p1[{i}]")
            });
        }
    }
    Ok(report.finish())
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn random_kernel(rng: &mut ChaCha8Rng, k: usize, c_in: usize, c_out: usize) -> ConvKernel {
    let weights = random_tensor(rng, vec![k, k, k, c_in, c_out]);
    let bias = (0..c_out).map(|_| rng.gen_range(-0.3..0.3)).collect();
    ConvKernel::new(weights, bias).expect("random kernel is valid")
}

/// Checks each layer primitive's backward pass against central differences
/// of the scalar `<forward(x), G>` for a fixed random cotangent G at the
/// layer-invariant tolerance 1e-5; the 3x3x3 same-padding convolution is
/// held to 1e-6.
pub fn check_layer_primitives(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    // conv3d, same padding
    {
        let input = random_tensor(&mut rng, vec![4, 4, 4, 2]);
        let kernel = random_kernel(&mut rng, 3, 2, 2);
        let gout_shape = conv3d_forward(&input, &kernel, Padding::Same, 1)?
            .shape()
            .to_vec();
        let cotangent = random_tensor(&mut rng, gout_shape);
        let (d_in, d_k) = conv3d_backward(&input, &kernel, &cotangent, Padding::Same, 1)?;
        let mut report = ReportBuilder::new("conv3d (same padding) backward", 1e-6);
        for i in 0..input.len() {
            let fd = central_diff(
                |v| {
                    let mut x = input.clone();
                    x.data_mut()[i] = v;
                    conv3d_forward(&x, &kernel, Padding::Same, 1)
                        .unwrap()
                        .dot(&cotangent)
                        .unwrap()
                },
                input.data()[i],
                FD_STEP,
            );
            report.record(fd, d_in.data()[i], || format!("input[{i}]"));
        }
        for i in 0..kernel.weights.len() {
            let fd = central_diff(
                |v| {
                    let mut k2 = kernel.clone();
                    k2.weights.data_mut()[i] = v;
                    conv3d_forward(&input, &k2, Padding::Same, 1)
                        .unwrap()
                        .dot(&cotangent)
                        .unwrap()
                },
                kernel.weights.data()[i],
                FD_STEP,
            );
            report.record(fd, d_k.d_weights.data()[i], || format!("weight[{i}]"));
        }
        for i in 0..kernel.bias.len() {
            let fd = central_diff(
                |v| {
                    let mut k2 = kernel.clone();
                    k2.bias[i] = v;
                    conv3d_forward(&input, &k2, Padding::Same, 1)
                        .unwrap()
                        .dot(&cotangent)
                        .unwrap()
                },
                kernel.bias[i],
                FD_STEP,
            );
            report.record(fd, d_k.d_bias[i], || format!("bias[{i}]"));
        }
        reports.push(report.finish());
    }

    // conv3d, stride 2 without padding
    {
        let input = random_tensor(&mut rng, vec![6, 6, 6, 2]);
        let kernel = random_kernel(&mut rng, 2, 2, 3);
        let out = conv3d_forward(&input, &kernel, Padding::None, 2)?;
        let cotangent = random_tensor(&mut rng, out.shape().to_vec());
        let (d_in, _) = conv3d_backward(&input, &kernel, &cotangent, Padding::None, 2)?;
        let mut report = ReportBuilder::new("conv3d (stride 2) backward", 1e-5);
        for i in 0..input.len() {
            let fd = central_diff(
                |v| {
                    let mut x = input.clone();
                    x.data_mut()[i] = v;
                    conv3d_forward(&x, &kernel, Padding::None, 2)
                        .unwrap()
                        .dot(&cotangent)
                        .unwrap()
                },
                input.data()[i],
                FD_STEP,
            );
            report.record(fd, d_in.data()[i], || format!("input[{i}]"));
        }
        reports.push(report.finish());
    }

    // transposed conv
    {
        let input = random_tensor(&mut rng, vec![3, 3, 3, 2]);
        let kernel = random_kernel(&mut rng, 2, 2, 2);
        let out = transposed_conv3d_forward(&input, &kernel)?;
        let cotangent = random_tensor(&mut rng, out.shape().to_vec());
        let (d_in, d_k) = transposed_conv3d_backward(&input, &kernel, &cotangent)?;
        let mut report = ReportBuilder::new("transposed_conv3d backward", 1e-5);
        for i in 0..input.len() {
            let fd = central_diff(
                |v| {
                    let mut x = input.clone();
                    x.data_mut()[i] = v;
                    transposed_conv3d_forward(&x, &kernel)
                        .unwrap()
                        .dot(&cotangent)
                        .unwrap()
                },
                input.data()[i],
                FD_STEP,
            );
            report.record(fd, d_in.data()[i], || format!("input[{i}]"));
        }
        for i in 0..kernel.weights.len() {
            let fd = central_diff(
                |v| {
                    let mut k2 = kernel.clone();
                    k2.weights.data_mut()[i] = v;
                    transposed_conv3d_forward(&input, &k2)
                        .unwrap()
                        .dot(&cotangent)
                        .unwrap()
                },
                kernel.weights.data()[i],
                FD_STEP,
            );
            report.record(fd, d_k.d_weights.data()[i], || format!("weight[{i}]"));
        }
        reports.push(report.finish());
    }

    // max pooling (random input has no ties, so the argmax is stable under
    // the probe step)
    {
        let input = random_tensor(&mut rng, vec![4, 4, 4, 2]);
        let (out, argmax) = maxpool3d_forward(&input)?;
        let cotangent = random_tensor(&mut rng, out.shape().to_vec());
        let d_in = maxpool3d_backward(&argmax, &cotangent)?;
        let mut report = ReportBuilder::new("maxpool3d backward", 1e-5);
        for i in 0..input.len() {
            let fd = central_diff(
                |v| {
                    let mut x = input.clone();
                    x.data_mut()[i] = v;
                    let (o, _) = maxpool3d_forward(&x).unwrap();
                    o.dot(&cotangent).unwrap()
                },
                input.data()[i],
                FD_STEP,
            );
            report.record(fd, d_in.data()[i], || format!("input[{i}]"));
        }
        reports.push(report.finish());
    }

    // relu, probed away from the kink
    {
        let input = Tensor::from_fn(vec![4, 4, 4, 2], |_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        });
        let cotangent = random_tensor(&mut rng, input.shape().to_vec());
        let d_in = relu_backward(&input, &cotangent)?;
        let mut report = ReportBuilder::new("relu backward", 1e-5);
        for i in 0..input.len() {
            let fd = central_diff(
                |v| {
                    let mut x = input.clone();
                    x.data_mut()[i] = v;
                    relu_forward(&x).dot(&cotangent).unwrap()
                },
                input.data()[i],
                FD_STEP,
            );
            report.record(fd, d_in.data()[i], || format!("input[{i}]"));
        }
        reports.push(report.finish());
    }

    // softmax
    {
        let logits = random_tensor(&mut rng, vec![3, 3, 3, 2]);
        let p = softmax_channels(&logits)?;
        let cotangent = random_tensor(&mut rng, p.shape().to_vec());
        let d_z = softmax_backward(&p, &cotangent)?;
        let mut report = ReportBuilder::new("softmax backward", 1e-5);
        for i in 0..logits.len() {
            let fd = central_diff(
                |v| {
                    let mut x = logits.clone();
                    x.data_mut()[i] = v;
                    softmax_channels(&x).unwrap().dot(&cotangent).unwrap()
                },
                logits.data()[i],
                FD_STEP,
            );
            report.record(fd, d_z.data()[i], || format!("logit[{i}]"));
        }
        reports.push(report.finish());
    }

    Ok(reports)
}

/// The configuration used by the whole-network check: an 8^3 volume,
/// one pooling level, 2 base features.
pub fn gradcheck_net_config(seed: u64) -> NetConfig {
    NetConfig {
        input_shape: [8, 8, 8],
        in_channels: 2,
        levels: 1,
        base_features: 2,
        out_classes: 2,
        use_bias: true,
        seed,
    }
}

/// End-to-end check: every network parameter's analytic gradient of
/// `tversky_loss(forward(input))` against central differences. Tolerance 1e-4.
pub fn check_whole_net(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = gradcheck_net_config(seed);
    let net = Network::new(&config)?;
    let input = random_tensor(&mut rng, vec![8, 8, 8, 2]);
    let mut mask: Vec<f64> = (0..512)
        .map(|_| (rng.gen::<f64>() < 0.05) as u8 as f64)
        .collect();
    let fix = rng.gen_range(0..512);
    mask[fix] = 1.0;
    let labels = LabelPlanes::from_mask(&Tensor::new(vec![8, 8, 8], mask)?)?;
    let params = TverskyParams::new(0.3, 0.7)?;

    let (planes, cache) = net.forward(&input)?;
    let (d_p0, d_p1) = tversky_loss_backward(&planes, &labels, &params)?;
    let grads = net.backward(&cache, &d_p0, &d_p1)?;

    // flatten analytic grads in the same order as NetParams::get_param
    let mut analytic = Vec::with_capacity(net.params.param_count());
    for kg in &grads {
        analytic.extend_from_slice(kg.d_weights.data());
        analytic.extend_from_slice(&kg.d_bias);
    }

    let loss_of = |p: &crate::unet::NetParams| -> f64 {
        let probe = Network::from_parts(&config, p.clone()).expect("probe params fit the plan");
        let (planes, _) = probe.forward(&input).expect("probe forward");
        tversky_loss_forward(&planes, &labels, &params)
            .expect("probe loss")
            .loss
    };

    let mut report = ReportBuilder::new("whole-network gradient vs finite differences", 1e-4);
    let n = net.params.param_count();
    let mut probe_params = net.params.clone();
    for i in 0..n {
        let original = probe_params.get_param(i);
        probe_params.set_param(i, original + FD_STEP);
        let up = loss_of(&probe_params);
        probe_params.set_param(i, original - FD_STEP);
        let down = loss_of(&probe_params);
        probe_params.set_param(i, original);
        let fd = (up - down) / (2.0 * FD_STEP);
        report.record(fd, analytic[i], || format!("param[{i}]"));
    }
    Ok(report.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_recovers_known_derivative() {
        let fd = central_diff(|x| x * x * x, 2.0, 1e-6);
        assert!(rel_error(fd, 12.0) < 1e-8);
    }

    #[test]
    fn rel_error_floors_near_zero_pairs() {
        assert!(rel_error(1e-12, 0.0) < 1e-7);
        assert!(rel_error(1.0, 2.0) > 0.3);
    }

    #[test]
    fn layer_primitive_suites_pass() {
        for report in check_layer_primitives(123).unwrap() {
            assert!(report.passed(), "{}", report.summary_line());
        }
    }

    #[test]
    fn loss_gradient_suite_passes_quickly() {
        let report = check_loss_gradients(20, 5).unwrap();
        assert!(report.passed(), "{}", report.summary_line());
    }

    #[test]
    fn whole_net_suite_passes() {
        let report = check_whole_net(99).unwrap();
        assert!(report.passed(), "{}", report.summary_line());
    }
}
