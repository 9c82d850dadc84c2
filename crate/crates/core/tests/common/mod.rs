//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use perso_core::data::{Dataset, Sample, SampleId};
use perso_core::grouping::{IndividualSignature, LatentVector};
use perso_core::nn::{loss, LayerSpec, Mode, Network, Tensor};

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error, far below the gradient scale of
/// the random projections used as loss.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Distinct values at least 0.006 apart and at least 0.003 away from zero, so
/// a finite-difference step never crosses a ReLU kink or a max-pool tie.
/// Small tensors are spread over roughly unit range so that batch statistics
/// vary on a scale much larger than the step.
pub fn separated_values(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let spacing = (1.0 / n as f64).max(0.01);
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(rng);
    slots
        .into_iter()
        .map(|k| (k as f64 - n as f64 / 2.0 + 0.5) * spacing + rng.gen_range(-0.2..0.2) * spacing)
        .collect()
}

#[derive(Debug, Clone)]
pub struct GradCase {
    pub kind: &'static str,
    pub input_shape: Vec<usize>,
    pub batch: usize,
    pub specs: Vec<LayerSpec>,
}

/// Largest relative error between back-propagated and central-difference
/// gradients of `L = sum(r * f(x))` over the input and every parameter.
pub fn grad_check(case: &GradCase, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut net = Network::<f64>::new(case.input_shape.clone(), case.specs.clone(), seed).expect("valid case");
    // Randomize every parameter so biases, gammas and betas are not trivial.
    for layer in net.layers_mut() {
        for p in &mut layer.params {
            for v in &mut p.value {
                *v += r.gen_range(-0.5..0.5);
            }
        }
    }
    net.set_mode(Mode::Train);
    let mut shape = vec![case.batch];
    shape.extend(&case.input_shape);
    let n_in: usize = shape.iter().product();
    let x = Tensor::new(shape.clone(), separated_values(n_in, &mut r));
    let dropout_seed = r.gen();
    net.reseed(dropout_seed);
    let y = net.forward(&x).expect("forward");
    let proj: Vec<f64> = (0..y.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
    net.zero_grad();
    let dx = net.backward_to_input(&Tensor::new(y.shape().to_vec(), proj.clone()));

    let objective = |net: &mut Network<f64>, x: &Tensor<f64>| -> f64 {
        net.reseed(dropout_seed);
        let y = net.forward(x).expect("forward");
        y.data().iter().zip(&proj).map(|(a, b)| a * b).sum()
    };
    let mut worst: f64 = 0.0;
    for i in 0..n_in {
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (objective(&mut net, &plus) - objective(&mut net, &minus)) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(dx.data()[i], numeric));
    }
    let analytic: Vec<Vec<f64>> = net.params().map(|p| p.grad.clone()).collect();
    let locations: Vec<(usize, usize, usize)> = net
        .layers()
        .iter()
        .enumerate()
        .flat_map(|(l, layer)| {
            layer.params.iter().enumerate().flat_map(move |(p, param)| (0..param.value.len()).map(move |e| (l, p, e)))
        })
        .collect();
    for (l, p, e) in &locations {
        let original = net.layers()[*l].params[*p].value[*e];
        net.layers_mut()[*l].params[*p].value[*e] = original + FD_STEP;
        let up = objective(&mut net, &x);
        net.layers_mut()[*l].params[*p].value[*e] = original - FD_STEP;
        let down = objective(&mut net, &x);
        net.layers_mut()[*l].params[*p].value[*e] = original;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let index = net.layers()[..*l].iter().map(|la| la.params.len()).sum::<usize>() + p;
        worst = worst.max(relative_error(analytic[index][*e], numeric));
    }
    worst
}

/// Ten random shapes for every layer type.
pub fn layer_cases(seed: u64) -> Vec<GradCase> {
    let mut r = rng(seed);
    let mut cases = Vec::new();
    for _ in 0..10 {
        let batch = r.gen_range(1..=3);
        let (c, h, w) = (r.gen_range(1..=3), r.gen_range(3..=8), r.gen_range(3..=8));
        let kernel = [1, 3, 5][r.gen_range(0..3)];
        let stride = r.gen_range(1..=2);
        let cout = r.gen_range(1..=4);
        cases.push(GradCase {
            kind: "conv",
            input_shape: vec![c, h.max(kernel), w.max(kernel)],
            batch,
            specs: vec![LayerSpec::Conv {
                kernel,
                stride,
                in_channels: c,
                out_channels: cout,
                with_bias: r.gen(),
            }],
        });
        let window = r.gen_range(1..=3);
        cases.push(GradCase {
            kind: "max_pool",
            input_shape: vec![c, h.max(window), w.max(window)],
            batch,
            specs: vec![LayerSpec::MaxPool { window, stride: r.gen_range(1..=window) }],
        });
        let (din, dout) = (r.gen_range(1..=20), r.gen_range(1..=12));
        cases.push(GradCase { kind: "dense", input_shape: vec![din], batch, specs: vec![LayerSpec::Dense { in_dim: din, out_dim: dout }] });
        cases.push(GradCase {
            kind: "dropout",
            input_shape: vec![c, h, w],
            batch,
            specs: vec![LayerSpec::Dropout { p: r.gen_range(0.0..0.6) }],
        });
        cases.push(GradCase { kind: "relu", input_shape: vec![c, h, w], batch, specs: vec![LayerSpec::ReLU] });
        let bn_shape = if r.gen() { vec![c, h, w] } else { vec![r.gen_range(1..=6)] };
        cases.push(GradCase {
            kind: "batch_norm",
            input_shape: bn_shape.clone(),
            batch: batch + 1,
            specs: vec![LayerSpec::BatchNorm { channels: bn_shape[0] }],
        });
        cases.push(GradCase { kind: "flatten", input_shape: vec![c, h, w], batch, specs: vec![LayerSpec::Flatten] });
        cases.push(GradCase {
            kind: "reshape",
            input_shape: vec![c * h * w],
            batch,
            specs: vec![LayerSpec::Reshape { dims: vec![c, h, w] }],
        });
        cases.push(GradCase {
            kind: "nn_upsample",
            input_shape: vec![c, h, w],
            batch,
            specs: vec![LayerSpec::NNUpsample { factor: r.gen_range(1..=3) }],
        });
        cases.push(GradCase {
            kind: "softmax",
            input_shape: vec![r.gen_range(2..=10)],
            batch,
            specs: vec![LayerSpec::SoftmaxClassifier],
        });
    }
    cases
}

/// Largest relative error of the cross-entropy and L2 loss gradients against
/// central differences of the loss values.
pub fn loss_grad_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, d) = (r.gen_range(1..=4), r.gen_range(2..=8));
    let logits: Vec<f64> = (0..b * d).map(|_| r.gen_range(-2.0..2.0)).collect();
    let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..d)).collect();
    let softmax = |z: &[f64]| -> Tensor<f64> {
        let mut p = Vec::with_capacity(z.len());
        for row in z.chunks(d) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            p.extend(e.iter().map(|v| v / s));
        }
        Tensor::new(vec![b, d], p)
    };
    let grad = loss::ce_logit_grad(&softmax(&logits), &labels);
    let mut worst: f64 = 0.0;
    for i in 0..logits.len() {
        let mut up = logits.clone();
        up[i] += FD_STEP;
        let mut down = logits.clone();
        down[i] -= FD_STEP;
        let numeric =
            (loss::loss_ce(&softmax(&up), &labels) - loss::loss_ce(&softmax(&down), &labels)) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(grad.data()[i], numeric));
    }
    let x: Vec<f64> = (0..b * d).map(|_| r.gen_range(0.0..1.0)).collect();
    let x_hat: Vec<f64> = (0..b * d).map(|_| r.gen_range(0.0..1.0)).collect();
    let target = Tensor::new(vec![b, d], x);
    let grad = loss::l2_grad(&Tensor::new(vec![b, d], x_hat.clone()), &target);
    for i in 0..x_hat.len() {
        let mut up = x_hat.clone();
        up[i] += FD_STEP;
        let mut down = x_hat.clone();
        down[i] -= FD_STEP;
        let numeric = (loss::loss_l2(&Tensor::new(vec![b, d], up), &target)
            - loss::loss_l2(&Tensor::new(vec![b, d], down), &target))
            / (2.0 * FD_STEP);
        worst = worst.max(relative_error(grad.data()[i], numeric));
    }
    worst
}

fn squared(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2)).sum()
}

/// Round-robin nearest-unused selection by exhaustive scanning.
pub fn sg_oracle(individual: &[LatentVector], global: &[LatentVector], n: usize) -> Option<Vec<usize>> {
    if n > global.len() || individual.is_empty() {
        return None;
    }
    let mut used = vec![false; global.len()];
    let mut out = Vec::new();
    for turn in 0..n {
        let z = &individual[turn % individual.len()];
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in global.iter().enumerate() {
            if used[j] {
                continue;
            }
            let d = squared(z, g);
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        let (_, j) = best.expect("enough unused samples");
        used[j] = true;
        out.push(j);
    }
    Some(out)
}

/// The `k` closest pool members, found by repeatedly taking the minimum.
pub fn ig_oracle(target: &IndividualSignature, pool: &[IndividualSignature], k: usize) -> Option<Vec<u32>> {
    if k > pool.len() {
        return None;
    }
    let dist = |s: &IndividualSignature| -> f64 {
        target.values.iter().zip(&s.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let mut left: Vec<&IndividualSignature> = pool.iter().collect();
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best = 0;
        for i in 1..left.len() {
            let (di, db) = (dist(left[i]), dist(left[best]));
            if di < db || (di == db && left[i].individual < left[best].individual) {
                best = i;
            }
        }
        out.push(left.remove(best).individual);
    }
    Some(out)
}

/// Latent vectors whose coordinates are small integers when `coarse` is set,
/// producing many exact distance ties.
pub fn random_latents(count: usize, dim: usize, coarse: bool, r: &mut ChaCha8Rng) -> Vec<LatentVector> {
    (0..count)
        .map(|_| {
            (0..dim)
                .map(|_| if coarse { r.gen_range(-2i32..=2) as f32 } else { r.gen_range(-1.0f32..1.0) })
                .collect()
        })
        .collect()
}

pub fn random_signature(id: u32, classes: usize, dim: usize, coarse: bool, r: &mut ChaCha8Rng) -> IndividualSignature {
    IndividualSignature {
        individual: id,
        values: (0..classes * dim)
            .map(|_| if coarse { f64::from(r.gen_range(-1i32..=1)) } else { r.gen_range(-1.0..1.0) })
            .collect(),
        present: vec![true; classes],
    }
}

/// One-sided sign-flip p-value by explicit recursion over all sign patterns.
pub fn sign_flip_oracle(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed: f64 = d.iter().sum();
    let tol = 1e-9 * d.iter().map(|x| x.abs()).sum::<f64>();
    fn walk(d: &[f64], acc: f64, observed: f64, tol: f64) -> u64 {
        match d.split_first() {
            None => u64::from(acc >= observed - tol),
            Some((x, rest)) => walk(rest, acc + x, observed, tol) + walk(rest, acc - x, observed, tol),
        }
    }
    walk(&d, 0.0, observed, tol) as f64 / 2f64.powi(d.len() as i32)
}

/// A dataset with `per_individual` samples for each id in `ids`, labels
/// cycling through the classes and pixels derived from the label so the
/// classes are learnable.
pub fn toy_dataset(ids: &[u32], per_individual: usize, n_classes: usize, size: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let mut samples = Vec::new();
    for &id in ids {
        for seq in 0..per_individual {
            let label = (seq + id as usize) % n_classes;
            let pixels = (0..size * size)
                .map(|p| {
                    let on = (p * (label + 1)) % (n_classes + 1) == 0;
                    let base = if on { 200 } else { 30 };
                    (base + r.gen_range(0..40)) as u8
                })
                .collect();
            samples.push(Sample { id: SampleId::new(id, seq as u32), label: label as u16, pixels });
        }
    }
    Dataset::from_samples(n_classes, size, size, samples).expect("valid toy data")
}
