//! Test-side oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tclab_core::dataio::PacketSeries;
use tclab_core::nn::{Conv2d, Layer, Linear, Tensor};

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na.max(nb);
    if den == 0.0 {
        0.0
    } else {
        diff / den
    }
}

/// Central differences of a scalar function over every coordinate of `x`.
pub fn numeric_grad(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = v[i];
            v[i] = orig + eps;
            let up = f(&v);
            v[i] = orig - eps;
            let down = f(&v);
            v[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

pub fn conv(in_c: usize, out_c: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Layer<f64> {
    let mut c = Conv2d::<f64>::new(in_c, out_c, k, stride);
    c.weight = random_tensor(c.weight.shape(), rng);
    c.bias = random_tensor(c.bias.shape(), rng);
    Layer::Conv2d(c)
}

pub fn linear(i: usize, o: usize, rng: &mut impl Rng) -> Layer<f64> {
    let mut l = Linear::<f64>::new(i, o);
    l.weight = random_tensor(l.weight.shape(), rng);
    l.bias = random_tensor(l.bias.shape(), rng);
    Layer::Linear(l)
}

/// Checks one layer on one input with the probe loss `sum(y * r)`.
/// Dropout masks are replayed from a cloned generator. Returns the worst
/// relative error over the input, weight and bias gradients.
pub fn check_layer(layer: &Layer<f64>, x: &Tensor<f64>, seed: u64) -> f64 {
    let mask_rng = ChaCha8Rng::seed_from_u64(seed);
    let run = |l: &Layer<f64>, x: Tensor<f64>| {
        let mut r = mask_rng.clone();
        l.forward(x, Some(&mut r), true).unwrap()
    };
    let (y, cache) = run(layer, x.clone());
    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let probe = random_tensor(y.shape(), &mut probe_rng);
    let loss = |y: &Tensor<f64>| y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>();
    let (gx, pg) = layer.backward(&cache.unwrap(), probe.clone()).unwrap();

    let eps = 1e-6;
    let shape = x.shape().to_vec();
    let num_x = numeric_grad(x.data(), eps, |v| {
        loss(&run(layer, Tensor::new(shape.clone(), v.to_vec()).unwrap()).0)
    });
    let mut worst = rel_err(gx.data(), &num_x);

    if let (Some((gw, gb)), Some((w, b))) = (pg, layer.params()) {
        let with = |w: &Tensor<f64>, b: &Tensor<f64>| {
            let mut l = layer.clone();
            let (lw, lb) = l.params_mut().unwrap();
            *lw = w.clone();
            *lb = b.clone();
            loss(&run(&l, x.clone()).0)
        };
        let num_w = numeric_grad(w.data(), eps, |v| {
            with(&Tensor::new(w.shape().to_vec(), v.to_vec()).unwrap(), b)
        });
        let num_b = numeric_grad(b.data(), eps, |v| {
            with(w, &Tensor::new(b.shape().to_vec(), v.to_vec()).unwrap())
        });
        worst = worst.max(rel_err(gw.data(), &num_w)).max(rel_err(gb.data(), &num_b));
    }
    worst
}

/// (name, layer, input shape) for instance `i` of every layer kind.
pub fn layer_instances(i: usize, rng: &mut impl Rng) -> Vec<(&'static str, Layer<f64>, Vec<usize>)> {
    let b = 1 + i % 3;
    let c = 1 + i % 2;
    vec![
        (
            "conv2d",
            conv(c, 2 + i % 3, 3, 1, rng),
            vec![b, c, 6 + i % 3, 6 + i % 3],
        ),
        ("conv2d_strided", conv(c, 2, 4, 2 + i % 2, rng), vec![b, c, 9, 9]),
        ("linear", linear(3 + i % 5, 2 + i % 4, rng), vec![b, 3 + i % 5]),
        ("relu", Layer::Relu, vec![b, 7]),
        ("maxpool2", Layer::MaxPool2, vec![b, c, 4 + i % 3, 4 + i % 2]),
        ("dropout2d", Layer::Dropout2d(0.25), vec![b, 3, 3, 3]),
        ("dropout", Layer::Dropout(0.5), vec![b, 8]),
        ("flatten", Layer::Flatten, vec![b, c, 3, 2]),
    ]
}

/// Student t CDF by Simpson integration of the density, inverted by bisection.
pub fn oracle_t_quantile(p: f64, df: f64) -> f64 {
    let dens = |x: f64| (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
    let integral = |a: f64, b: f64| {
        let n = 20_000;
        let h = (b - a) / n as f64;
        let mut s = dens(a) + dens(b);
        for i in 1..n {
            s += dens(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    // Far tail of the unnormalized density integrated analytically.
    let big = 2000.0;
    let tail = |x: f64| df.powf((df + 1.0) / 2.0) * x.powf(-df) / df;
    let half = integral(0.0, big) + tail(big);
    let cdf = |x: f64| 0.5 + integral(0.0, x) / (2.0 * half);
    let (mut lo, mut hi) = (0.0, 50.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Random series on a dyadic time grid (multiples of 1/1024 s) so that bin
/// indices computed in floating point are exact.
pub fn dyadic_series(rng: &mut impl Rng, max_len: usize, horizon: f64) -> PacketSeries {
    let n = rng.gen_range(0..=max_len);
    let ticks = (horizon * 1024.0) as u64;
    let mut ts: Vec<f64> = (0..n).map(|_| rng.gen_range(0..=ticks) as f64 / 1024.0).collect();
    ts.sort_by(f64::total_cmp);
    if let Some(first) = ts.first().copied() {
        ts.iter_mut().for_each(|t| *t -= first);
    }
    let sizes = (0..n).map(|_| rng.gen_range(1..=1500)).collect();
    PacketSeries::from_parts(ts, sizes, None).unwrap()
}

/// Naive per-packet binning: integer bin search on the time axis and integer
/// arithmetic on the size axis.
pub fn oracle_flowpic(series: &PacketSeries, res: usize, window: f64) -> Vec<u32> {
    let mut out = vec![0u32; res * res];
    for (&t, &s) in series.timestamps().iter().zip(series.sizes()) {
        if t < 0.0 || t >= window {
            continue;
        }
        let col = (0..res).rev().find(|&c| c as f64 * window <= t * res as f64).unwrap();
        let row = ((s as usize * res) / 1500).min(res - 1);
        out[row * res + col] += 1;
    }
    out
}
