//! Independent reference implementations shared by the integration tests
//! and the acceptance harness.
#![allow(dead_code)]

use n2v2::data::ImageTensor;
use n2v2::masking::{mask_patch, BlindSpotBatch, ReplacementKind, ReplacementStrategy};
use n2v2::model::{max_blur_pool, max_pool, ModelConfig, Tensor, UNet};
use n2v2::rng::rng_from_seed;
use n2v2::train::{masked_mse, masked_mse_with_grad};
use rand::Rng;

/// Non-center cells of the `wh x ww` window around `coord`, shifted to stay
/// inside the patch, enumerated explicitly in row-major order.
pub fn window_cells(patch: &ImageTensor, coord: (usize, usize), wh: usize, ww: usize) -> Vec<f32> {
    let (h, w) = patch.shape();
    let start = |c: usize, n: usize, k: usize| -> usize {
        let lo = c as i64 - (k / 2) as i64;
        lo.clamp(0, (n - k) as i64) as usize
    };
    let (r0, c0) = (start(coord.0, h, wh), start(coord.1, w, ww));
    let mut cells = Vec::new();
    for r in r0..r0 + wh {
        for c in c0..c0 + ww {
            if (r, c) != coord {
                cells.push(patch.get(r, c));
            }
        }
    }
    assert_eq!(cells.len(), wh * ww - 1);
    cells
}

pub fn brute_mean(cells: &[f32]) -> f64 {
    let mut sum = 0.0f64;
    for &v in cells {
        sum += v as f64;
    }
    sum / cells.len() as f64
}

pub fn brute_median(cells: &[f32]) -> f64 {
    let mut v: Vec<f64> = cells.iter().map(|&x| x as f64).collect();
    // insertion sort: deliberately unrelated to the library's sort
    for i in 1..v.len() {
        let mut j = i;
        while j > 0 && v[j - 1] > v[j] {
            v.swap(j - 1, j);
            j -= 1;
        }
    }
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn ulp_distance(a: f32, b: f32) -> u32 {
    if a == b {
        return 0;
    }
    let key = |x: f32| {
        let i = x.to_bits() as i32;
        if i < 0 {
            i32::MIN - i
        } else {
            i
        }
    };
    (key(a) as i64 - key(b) as i64).unsigned_abs() as u32
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let p = 2 * (n - 1);
    let mut m = i.rem_euclid(p.max(1));
    if m >= n {
        m = p - m;
    }
    m as usize
}

/// Max-blur pooling computed literally in three steps on full-resolution
/// arrays: 2x2 stride-1 max, 3x3 binomial blur, keep even positions.
pub fn brute_max_blur_pool(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |r: isize, c: isize| img[reflect(r, h) * w + reflect(c, w)];
    let mut maxed = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            maxed[r as usize * w + c as usize] = at(r, c)
                .max(at(r, c + 1))
                .max(at(r + 1, c))
                .max(at(r + 1, c + 1));
        }
    }
    let taps = [1.0, 2.0, 1.0];
    let mut blurred = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut acc = 0.0;
            for (i, ky) in taps.iter().enumerate() {
                for (j, kx) in taps.iter().enumerate() {
                    let v =
                        maxed[reflect(r + i as isize - 1, h) * w + reflect(c + j as isize - 1, w)];
                    acc += ky * kx * v;
                }
            }
            blurred[r as usize * w + c as usize] = acc / 16.0;
        }
    }
    let mut out = Vec::with_capacity(h * w / 4);
    for r in (0..h).step_by(2) {
        for c in (0..w).step_by(2) {
            out.push(blurred[r * w + c]);
        }
    }
    out
}

/// How much a one-pixel input shift changes the pooled output, relative to
/// the output spread: mean |P(x) - P(shift(x))| / std(P(x)), averaged over a
/// horizontal and a vertical shift. Both views are `(n-2) x (n-2)` crops so
/// the pooled sides stay even.
pub fn shift_sensitivity(x: &ImageTensor, blur: bool) -> f64 {
    let n = x.height() - 2;
    let pool = |img: ImageTensor| -> Vec<f32> {
        let t = Tensor::from_images(&[img]).unwrap();
        let (out, _) = if blur {
            max_blur_pool(&t, false)
        } else {
            max_pool(&t, false)
        };
        out.data
    };
    let base = pool(x.crop(0, 0, n, n).unwrap());
    let mean = base.iter().map(|&v| v as f64).sum::<f64>() / base.len() as f64;
    let std =
        (base.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / base.len() as f64).sqrt();
    let mut total = 0.0;
    for shifted in [x.crop(0, 1, n, n).unwrap(), x.crop(1, 0, n, n).unwrap()] {
        let other = pool(shifted);
        let d: f64 = base
            .iter()
            .zip(&other)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum();
        total += d / base.len() as f64 / std;
    }
    total / 2.0
}

/// A random masked batch for a toy network: `(inputs, blind spots)`.
pub fn toy_batch(seed: u64, items: usize, side: usize) -> (Tensor, Vec<BlindSpotBatch>) {
    let mut rng = rng_from_seed(seed);
    let strategy = ReplacementStrategy::with_window(ReplacementKind::Uwocp, 3, 3).unwrap();
    let mut inputs = Vec::new();
    let mut spots = Vec::new();
    for _ in 0..items {
        let img = ImageTensor::from_fn(side, side, |_, _| rng.random_range(-1.0f32..1.0));
        let (masked, s) = mask_patch(&img, 0.1, &strategy, &mut rng).unwrap();
        inputs.push(masked);
        spots.push(s);
    }
    (Tensor::from_images(&inputs).unwrap(), spots)
}

fn loss_of(net: &UNet, x: &Tensor, spots: &[BlindSpotBatch]) -> f64 {
    masked_mse(&net.forward(x).unwrap(), spots).unwrap()
}

pub const FD_EPS: f32 = 1e-4;

/// Slope jump between the one-sided differences above which the loss is
/// treated as non-differentiable (a ReLU or max switching inside the step).
pub const KINK_THRESHOLD: f64 = 5e-3;

/// Norm-relative error between the backpropagated gradient of the masked
/// loss and central finite differences over every parameter of a freshly
/// seeded network. `None` when some parameter sits within one step of a
/// kink, where central differences do not estimate the derivative.
pub fn gradient_check(config: ModelConfig, seed: u64) -> Option<f64> {
    let mut net = UNet::new(config, seed).unwrap();
    // non-zero biases so every code path carries signal
    let mut rng = rng_from_seed(seed ^ 0x5eed);
    for p in net.params_mut() {
        if p.name.ends_with(".bias") {
            p.data
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
    }
    let (x, spots) = toy_batch(seed, 2, 8);
    let (pred, tape) = net.forward_train(&x).unwrap();
    let (_, grad) = masked_mse_with_grad(&pred, &spots).unwrap();
    let mut analytic = net.zero_grads();
    net.backward(tape, grad, &mut analytic);

    let eps = FD_EPS;
    let base = loss_of(&net, &x, &spots);
    let (mut diff, mut norm_a, mut norm_n) = (0.0f64, 0.0f64, 0.0f64);
    for pi in 0..net.params().len() {
        for j in 0..net.params()[pi].data.len() {
            let orig = net.params()[pi].data[j];
            net.params_mut()[pi].data[j] = orig + eps;
            let up = loss_of(&net, &x, &spots);
            net.params_mut()[pi].data[j] = orig - eps;
            let down = loss_of(&net, &x, &spots);
            net.params_mut()[pi].data[j] = orig;
            let step = eps as f64;
            if ((up - base) / step - (base - down) / step).abs() > KINK_THRESHOLD {
                return None;
            }
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[pi][j] as f64;
            diff += (a - numeric).powi(2);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
    }
    Some(diff.sqrt() / norm_a.sqrt().max(norm_n.sqrt()).max(1e-12))
}

/// Runs [`gradient_check`] on successive seeds until `cases` smooth cases
/// are collected. Returns their errors and the number of skipped seeds.
pub fn gradient_check_cases(configs: &[ModelConfig], cases: usize) -> (Vec<f64>, usize) {
    let mut errors = Vec::new();
    let mut skipped = 0;
    let mut seed = 0u64;
    while errors.len() < cases {
        assert!(skipped < 10 * cases, "too many non-differentiable cases");
        let cfg = configs[seed as usize % configs.len()];
        match gradient_check(cfg, seed) {
            Some(e) => errors.push(e),
            None => skipped += 1,
        }
        seed += 1;
    }
    (errors, skipped)
}

/// Largest change of the masked loss caused by perturbing predictions at
/// unmasked coordinates (should be exactly zero).
pub fn locality_violation(seed: u64) -> f64 {
    let (x, spots) = toy_batch(seed, 3, 16);
    let mut rng = rng_from_seed(seed);
    let mut pred = x.clone();
    pred.data
        .iter_mut()
        .for_each(|v| *v += rng.random_range(-0.5f32..0.5));
    let base = masked_mse(&pred, &spots).unwrap();
    let mut worst = 0.0f64;
    let (_, n, h, w) = pred.dims();
    for _ in 0..50 {
        let item = rng.random_range(0..n);
        let (r, c) = (rng.random_range(0..h), rng.random_range(0..w));
        if spots[item].coords.contains(&(r, c)) {
            continue;
        }
        let mut p = pred.clone();
        p.data[(item * h + r) * w + c] += rng.random_range(-100.0f32..100.0);
        worst = worst.max((masked_mse(&p, &spots).unwrap() - base).abs());
    }
    worst
}
