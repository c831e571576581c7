//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward rules it checks. Everything runs in `f64`
//! with step `h = 1e-5`, which keeps truncation and rounding error far
//! below the pass tolerances.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tape::{backward, Mode, Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub checks: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

/// Relative error with an absolute floor so near-zero gradients compare
/// absolutely.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Check one differentiable scalar function of several tensor inputs.
///
/// `build` must assemble the function on the given tape from leaf variables
/// matching `inputs` and return a scalar output.
pub fn check_gradients(
    name: &str,
    inputs: &[Tensor<f64>],
    tolerance: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<CheckReport> {
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new().with_validation(false);
        let vars: Vec<Var> = tensors.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::Invalid(format!("{name}: check output must be scalar")));
        }
        Ok(tape.value(out).data()[0])
    };

    // Analytic gradients.
    let mut tape = Tape::new().with_validation(false);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Invalid(format!("{name}: check output must be scalar")));
    }
    let grads = backward(&tape, out)?;

    let mut max_err = 0.0f64;
    let mut checks = 0usize;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[ii])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for j in 0..input.numel() {
            let mut plus = input.to_vec();
            plus[j] += FD_STEP;
            work[ii] = Tensor::new(input.shape().to_vec(), plus)?;
            let fp = eval(&work)?;
            let mut minus = input.to_vec();
            minus[j] -= FD_STEP;
            work[ii] = Tensor::new(input.shape().to_vec(), minus)?;
            let fm = eval(&work)?;
            work[ii] = input.clone();
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let err = rel_err(analytic[j], numeric);
            if err > max_err {
                max_err = err;
            }
            checks += 1;
        }
    }
    Ok(CheckReport {
        name: String::from(name),
        checks,
        max_rel_err: max_err,
        tolerance,
    })
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    Tensor::new(shape, data).expect("random tensor")
}

/// Random strictly positive tensor (gamma factors, running variances).
fn rand_pos_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| 0.2 + rng.random::<f64>()).collect();
    Tensor::new(shape, data).expect("random tensor")
}

/// Finite-difference suite over every differentiable primitive, on several
/// random shapes and seeds per op.
pub fn primitive_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let tol = PRIMITIVE_TOLERANCE;

    for round in 0..3u64 {
        let r = &mut rng;

        // Elementwise binary ops.
        let shape = vec![2, 3 + round as usize];
        let coeffs = rand_tensor(r, shape.clone());
        for (name, which) in [("add", 0u8), ("sub", 1), ("mul", 2)] {
            let c = coeffs.clone();
            reports.push(check_gradients(
                &format!("{name}/round{round}"),
                &[rand_tensor(r, shape.clone()), rand_tensor(r, shape.clone())],
                tol,
                move |tape, v| {
                    let y = match which {
                        0 => tape.add(v[0], v[1])?,
                        1 => tape.sub(v[0], v[1])?,
                        _ => tape.mul(v[0], v[1])?,
                    };
                    tape.weighted_sum(y, &c)
                },
            )?);
        }

        // Activations.
        let shape = vec![3, 4];
        let coeffs = rand_tensor(r, shape.clone());
        for (name, which) in [("relu", 0u8), ("leaky_relu", 1), ("elu", 2), ("sigmoid", 3)] {
            let c = coeffs.clone();
            reports.push(check_gradients(
                &format!("{name}/round{round}"),
                &[rand_tensor(r, shape.clone())],
                tol,
                move |tape, v| {
                    let y = match which {
                        0 => tape.relu(v[0])?,
                        1 => tape.leaky_relu(v[0], 0.2)?,
                        2 => tape.elu(v[0], 1.0)?,
                        _ => tape.sigmoid(v[0])?,
                    };
                    tape.weighted_sum(y, &c)
                },
            )?);
        }

        // Convolution: gradient w.r.t. input and kernel.
        let (n, ci, co, t, k) = (2, 2, 3, 8 + round as usize * 2, 5);
        let c = rand_tensor(r, vec![n, co, t]);
        reports.push(check_gradients(
            &format!("conv1d/round{round}"),
            &[rand_tensor(r, vec![n, ci, t]), rand_tensor(r, vec![co, ci, k])],
            tol,
            move |tape, v| {
                let y = tape.conv1d(v[0], v[1])?;
                tape.weighted_sum(y, &c)
            },
        )?);

        // Bias broadcast along the filter axis.
        let c = rand_tensor(r, vec![2, 3, 4]);
        reports.push(check_gradients(
            &format!("add_bias/round{round}"),
            &[rand_tensor(r, vec![2, 3, 4]), rand_tensor(r, vec![3])],
            tol,
            move |tape, v| {
                let y = tape.add_bias(v[0], v[1], 1)?;
                tape.weighted_sum(y, &c)
            },
        )?);

        // Average pooling.
        let c = rand_tensor(r, vec![2, 3]);
        reports.push(check_gradients(
            &format!("avg_pool2/round{round}"),
            &[rand_tensor(r, vec![2, 6])],
            tol,
            move |tape, v| {
                let y = tape.avg_pool2(v[0])?;
                tape.weighted_sum(y, &c)
            },
        )?);

        // Dense / matmul.
        let c = rand_tensor(r, vec![4, 3]);
        reports.push(check_gradients(
            &format!("dense/round{round}"),
            &[
                rand_tensor(r, vec![4, 5]),
                rand_tensor(r, vec![5, 3]),
                rand_tensor(r, vec![3]),
            ],
            tol,
            move |tape, v| {
                let y = tape.dense(v[0], v[1], v[2])?;
                tape.weighted_sum(y, &c)
            },
        )?);

        // Batched matmul.
        let c = rand_tensor(r, vec![2, 3, 4]);
        reports.push(check_gradients(
            &format!("bmm/round{round}"),
            &[rand_tensor(r, vec![2, 3, 5]), rand_tensor(r, vec![2, 5, 4])],
            tol,
            move |tape, v| {
                let y = tape.bmm(v[0], v[1])?;
                tape.weighted_sum(y, &c)
            },
        )?);

        // Train-mode batch norm w.r.t. x, gamma, beta.
        let (bn_n, bn_c, bn_t) = (3, 2, 4);
        let c = rand_tensor(r, vec![bn_n, bn_c, bn_t]);
        reports.push(check_gradients(
            &format!("batch_norm_train/round{round}"),
            &[
                rand_tensor(r, vec![bn_n, bn_c, bn_t]),
                rand_pos_tensor(r, vec![bn_c]),
                rand_tensor(r, vec![bn_c]),
            ],
            tol,
            move |tape, v| {
                let (y, _) = tape.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                tape.weighted_sum(y, &c)
            },
        )?);

        // Eval-mode batch norm with fixed running stats.
        let rm = rand_tensor(r, vec![bn_c]);
        let rv = rand_pos_tensor(r, vec![bn_c]);
        let c = rand_tensor(r, vec![bn_n, bn_c, bn_t]);
        reports.push(check_gradients(
            &format!("batch_norm_eval/round{round}"),
            &[
                rand_tensor(r, vec![bn_n, bn_c, bn_t]),
                rand_pos_tensor(r, vec![bn_c]),
                rand_tensor(r, vec![bn_c]),
            ],
            tol,
            move |tape, v| {
                let y = tape.batch_norm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5)?;
                tape.weighted_sum(y, &c)
            },
        )?);

        // Dropout with a fixed mask (same rng seed on every evaluation).
        let c = rand_tensor(r, vec![4, 4]);
        let mask_seed = seed ^ (round + 101);
        reports.push(check_gradients(
            &format!("dropout/round{round}"),
            &[rand_tensor(r, vec![4, 4])],
            tol,
            move |tape, v| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
                let y = tape.dropout(v[0], 0.2, &mut mask_rng)?;
                tape.weighted_sum(y, &c)
            },
        )?);

        // Attention pieces: outer sum into masked row softmax.
        let nn = 4;
        let mask = {
            let mut m = vec![0.0f64; nn * nn];
            for i in 0..nn {
                m[i * nn + i] = 1.0;
                m[i * nn + (i + 1) % nn] = 1.0;
                m[i * nn + (i + 3) % nn] = 1.0;
            }
            Tensor::new(vec![nn, nn], m).unwrap()
        };
        let c = rand_tensor(r, vec![2, nn, nn]);
        reports.push(check_gradients(
            &format!("outer_sum+masked_softmax/round{round}"),
            &[rand_tensor(r, vec![2, nn]), rand_tensor(r, vec![2, nn])],
            tol,
            move |tape, v| {
                let e = tape.outer_sum(v[0], v[1])?;
                let e = tape.leaky_relu(e, 0.2)?;
                let a = tape.masked_row_softmax(e, &mask)?;
                tape.weighted_sum(a, &c)
            },
        )?);

        // Reductions and reshape.
        let c = rand_tensor(r, vec![3, 2]);
        reports.push(check_gradients(
            &format!("mean_last/round{round}"),
            &[rand_tensor(r, vec![3, 2, 5])],
            tol,
            move |tape, v| {
                let y = tape.mean_last(v[0])?;
                tape.weighted_sum(y, &c)
            },
        )?);
        reports.push(check_gradients(
            &format!("sum_all/round{round}"),
            &[rand_tensor(r, vec![2, 3])],
            tol,
            |tape, v| tape.sum_all(v[0]),
        )?);

        // Focal loss w.r.t. probabilities.
        let nb = 6;
        let probs: Vec<f64> = (0..nb).map(|_| 0.05 + 0.9 * r.random::<f64>()).collect();
        let labels: Vec<f64> = (0..nb).map(|_| f64::from(r.random::<bool>())).collect();
        reports.push(check_gradients(
            &format!("focal_bce/round{round}"),
            &[Tensor::new(vec![nb], probs)?],
            tol,
            move |tape, v| tape.focal_bce(v[0], &labels, 2.0, 0.4),
        )?);
    }

    // A GAT layer end to end: gradients w.r.t. H, W, and a.
    for round in 0..2u64 {
        let r = &mut rng;
        let (n, f, fp) = (4, 5, 3);
        let mask = {
            let mut m = vec![0.0f64; n * n];
            for i in 0..n {
                m[i * n + i] = 1.0;
                m[i * n + (i + 1) % n] = 1.0;
                m[i * n + (i + n - 1) % n] = 1.0;
            }
            Tensor::new(vec![n, n], m).unwrap()
        };
        let c = rand_tensor(r, vec![1, n, fp]);
        reports.push(check_gradients(
            &format!("gat_layer/round{round}"),
            &[
                rand_tensor(r, vec![1, n, f]),
                rand_tensor(r, vec![f, fp]),
                rand_tensor(r, vec![2 * fp]),
            ],
            tol,
            move |tape, v| {
                let layer = crate::gat::GatLayerVars { w: v[1], a: v[2] };
                let (y, _) = crate::gat::gat_layer_forward(tape, v[0], layer, &mask, 0.2)?;
                tape.weighted_sum(y, &c)
            },
        )?);
    }

    Ok(reports)
}

/// Spot-check the full model: analytic gradient of the focal loss on a
/// two-epoch batch versus finite differences, at `samples` randomly chosen
/// scalar parameters.
pub fn model_spot_check(seed: u64, samples: usize) -> Result<CheckReport> {
    let config = ModelConfig {
        seed,
        ..ModelConfig::default()
    };
    let model = Model::<f64>::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_A5A5);
    let batch = rand_tensor(&mut rng, vec![2, model.config.channels, model.config.samples]);
    let labels = [1.0f64, 0.0];
    let dropout_seed = seed ^ 0x5A5A;

    let loss_of = |m: &Model<f64>| -> Result<f64> {
        let mut tape = Tape::new().with_validation(false);
        let x = tape.input(batch.clone());
        let mut drop_rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let fwd = m.forward(&mut tape, x, Mode::Train, Some(&mut drop_rng))?;
        let loss = tape.focal_bce(fwd.prob, &labels, 2.0, 0.4)?;
        Ok(tape.value(loss).data()[0])
    };

    // One analytic backward pass.
    let mut tape = Tape::new().with_validation(false);
    let x = tape.input(batch.clone());
    let mut drop_rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let fwd = model.forward(&mut tape, x, Mode::Train, Some(&mut drop_rng))?;
    let loss = tape.focal_bce(fwd.prob, &labels, 2.0, 0.4)?;
    let grads = backward(&tape, loss)?;

    // Sample scalar coordinates across all trainable parameters.
    let names: Vec<String> = model
        .params
        .iter()
        .filter(|(_, e)| e.kind.trainable())
        .map(|(n, _)| String::from(n))
        .collect();
    let mut max_err = 0.0f64;
    let mut checks = 0usize;
    for _ in 0..samples {
        let name = &names[rng.random_range(0..names.len())];
        let numel = model.params.value(name)?.numel();
        let idx = rng.random_range(0..numel);
        let var = fwd
            .bindings
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Invalid(format!("parameter {name} not bound")))?;
        let analytic = grads.get(var).map(|g| g.data()[idx]).unwrap_or(0.0);

        let mut m = model.clone();
        m.params.perturb(name, idx, FD_STEP)?;
        let fp = loss_of(&m)?;
        let mut m = model.clone();
        m.params.perturb(name, idx, -FD_STEP)?;
        let fm = loss_of(&m)?;
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let err = rel_err(analytic, numeric);
        if err > max_err {
            max_err = err;
        }
        checks += 1;
    }
    Ok(CheckReport {
        name: String::from("model/end_to_end"),
        checks,
        max_rel_err: max_err,
        tolerance: MODEL_TOLERANCE,
    })
}
