//! Gradients and forward values checked against closed forms and plain-loop
//! reimplementations written here, independent of the library's kernels.

use pvp_core::data::{generate, Family, GenerateSpec};
use pvp_core::vit::{forward, init_backbone, predict};
use pvp_core::{Graph, Tensor, ViTConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
    .with_requires_grad(true)
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!(
            (x - y).abs() <= tol * (1.0 + y.abs()),
            "index {i}: {x} vs {y}"
        );
    }
}

#[test]
fn softmax_gradient_matches_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[3, 5], &mut rng);
    let w = random(&[3, 5], &mut rng).with_requires_grad(false);
    let mut g = Graph::new();
    let xv = g.param(&x);
    let wv = g.constant(&w);
    let s = g.softmax(xv);
    let p = g.mul(s, wv).unwrap();
    let loss = g.sum(p);
    let grads = g.backward(loss).unwrap();
    // d/dx_j sum_i w_i s_i = s_j (w_j - sum_i w_i s_i)
    let mut expected = Vec::new();
    for (row, wr) in x.data().chunks(5).zip(w.data().chunks(5)) {
        let s = softmax_row(row);
        let dot: f64 = s.iter().zip(wr).map(|(a, b)| a * b).sum();
        expected.extend(s.iter().zip(wr).map(|(sj, wj)| sj * (wj - dot)));
    }
    close(grads.get(xv).unwrap(), &expected, 1e-12);
}

#[test]
fn cross_entropy_value_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = random(&[4, 3], &mut rng);
    let labels = [0, 2, 1, 2];
    let mut g = Graph::new();
    let lv = g.param(&logits);
    let loss = g.cross_entropy(lv, &labels).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut want_loss = 0.0;
    let mut want_grad = Vec::new();
    for (row, &y) in logits.data().chunks(3).zip(&labels) {
        let p = softmax_row(row);
        want_loss -= p[y].ln() / 4.0;
        want_grad.extend(
            p.iter()
                .enumerate()
                .map(|(c, pc)| (pc - if c == y { 1.0 } else { 0.0 }) / 4.0),
        );
    }
    assert!((g.value(loss)[0] - want_loss).abs() < 1e-12);
    close(grads.get(lv).unwrap(), &want_grad, 1e-12);
}

#[test]
fn matmul_gradients_are_transposed_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (m, k, n) = (3, 4, 2);
    let a = random(&[m, k], &mut rng);
    let b = random(&[k, n], &mut rng);
    let w = random(&[m, n], &mut rng).with_requires_grad(false);
    let mut g = Graph::new();
    let (av, bv, wv) = (g.param(&a), g.param(&b), g.constant(&w));
    let c = g.matmul(av, bv).unwrap();
    let p = g.mul(c, wv).unwrap();
    let loss = g.sum(p);
    let grads = g.backward(loss).unwrap();
    let (ad, bd, wd) = (a.data(), b.data(), w.data());
    // dA = W B^T, dB = A^T W
    let da: Vec<f64> = (0..m * k)
        .map(|idx| {
            let (i, p) = (idx / k, idx % k);
            (0..n).map(|j| wd[i * n + j] * bd[p * n + j]).sum()
        })
        .collect();
    let db: Vec<f64> = (0..k * n)
        .map(|idx| {
            let (p, j) = (idx / n, idx % n);
            (0..m).map(|i| ad[i * k + p] * wd[i * n + j]).sum()
        })
        .collect();
    close(grads.get(av).unwrap(), &da, 1e-12);
    close(grads.get(bv).unwrap(), &db, 1e-12);
}

#[test]
fn gelu_derivative_matches_closed_form() {
    let xs: Vec<f64> = (-20..=20).map(|i| i as f64 * 0.2).collect();
    let x = Tensor::new(vec![xs.len()], xs.clone())
        .unwrap()
        .with_requires_grad(true);
    let mut g = Graph::new();
    let xv = g.param(&x);
    let y = g.gelu(xv);
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    let pdf = |x: f64| (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let cdf = |x: f64| 0.5 * (1.0 + erf_simpson(x / std::f64::consts::SQRT_2));
    let want: Vec<f64> = xs.iter().map(|&x| cdf(x) + x * pdf(x)).collect();
    close(grads.get(xv).unwrap(), &want, 1e-9);
    let values: Vec<f64> = xs.iter().map(|&x| x * cdf(x)).collect();
    close(g.value(y), &values, 1e-9);
}

/// erf by Simpson quadrature, independent of the library kernel.
fn erf_simpson(x: f64) -> f64 {
    let n = 20_000;
    let h = x / n as f64;
    let f = |t: f64| (-t * t).exp();
    // Simpson's rule on [0, x]
    let mut s = f(0.0) + f(x);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0 * 2.0 / std::f64::consts::PI.sqrt()
}

#[test]
fn layernorm_forward_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 3, 6], &mut rng);
    let gamma = random(&[6], &mut rng);
    let beta = random(&[6], &mut rng);
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.param(&x), g.param(&gamma), g.param(&beta));
    let y = g.layernorm(xv, gv, bv, 1e-6).unwrap();
    let mut want = Vec::new();
    for row in x.data().chunks(6) {
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        for (i, v) in row.iter().enumerate() {
            want.push((v - mean) / (var + 1e-6).sqrt() * gamma.data()[i] + beta.data()[i]);
        }
    }
    close(g.value(y), &want, 1e-12);
}

#[test]
fn attention_forward_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (b, t, d, heads) = (2, 3, 4, 2);
    let q = random(&[b, t, d], &mut rng);
    let k = random(&[b, t, d], &mut rng);
    let v = random(&[b, t, d], &mut rng);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.param(&q), g.param(&k), g.param(&v));
    let out = g.attention(qv, kv, vv, heads).unwrap();
    let dh = d / heads;
    let at = |x: &Tensor, bi: usize, ti: usize, c: usize| x.data()[(bi * t + ti) * d + c];
    let mut want = vec![0.0; b * t * d];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| {
                        (0..dh)
                            .map(|c| at(&q, bi, i, h * dh + c) * at(&k, bi, j, h * dh + c))
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let p = softmax_row(&scores);
                for c in 0..dh {
                    want[(bi * t + i) * d + h * dh + c] =
                        (0..t).map(|j| p[j] * at(&v, bi, j, h * dh + c)).sum();
                }
            }
        }
    }
    close(g.value(out), &want, 1e-12);
}

fn tiny_vit() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        max_seq_len: 32,
    }
}

fn plain_loss(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, &y)| -softmax_row(row)[y].ln())
        .sum::<f64>()
        / labels.len() as f64
}

#[test]
fn vit_backbone_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut vit = init_backbone(&tiny_vit(), 6).unwrap();
    // Larger weights than the 0.02 init so every path carries signal.
    for (_, t) in vit.named_tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    let images = random(&[2, 1, 8, 8], &mut rng).with_requires_grad(false);
    let labels = [1, 2];
    let mut g = Graph::new();
    let out = forward(&mut g, &vit, None, &images).unwrap();
    let loss = g.cross_entropy(out.logits, &labels).unwrap();
    let grads = g.backward(loss).unwrap();
    let bound: Vec<(String, pvp_core::Var)> = out.bindings.backbone;
    let h = 1e-5;
    let mut checked = 0;
    for (name, var) in &bound {
        let analytic = grads.get(*var).unwrap().to_vec();
        let len = analytic.len();
        for probe in [0, len / 2, len - 1] {
            let eval = |delta: f64| {
                let mut p = vit.clone();
                let t = p
                    .named_tensors_mut()
                    .into_iter()
                    .find(|(n, _)| n == name)
                    .unwrap()
                    .1;
                t.data_mut()[probe] += delta;
                plain_loss(&predict(&p, None, &images).unwrap().0, &labels)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[probe];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            assert!(
                rel < 1e-4,
                "{name}[{probe}]: analytic {a} numeric {numeric}"
            );
            checked += 1;
        }
    }
    assert!(checked >= 3 * 20, "only {checked} probes");
}

#[test]
fn linear_probe_separates_low_noise_classes() {
    let spec = |seed| GenerateSpec {
        family: Family::Parts,
        seed,
        classes: vec![0, 5, 10, 15],
        samples_per_class: 40,
        image_size: 16,
        channels: 1,
        noise_std: 0.05,
    };
    let train = generate(&spec(1)).unwrap();
    let test = generate(&spec(2)).unwrap();
    let dim = 256;
    let mut w = vec![0.0; dim * 4];
    let mut b = [0.0; 4];
    let rows = |ds: &pvp_core::Dataset| -> Vec<Vec<f64>> {
        ds.images.data().chunks(dim).map(|r| r.to_vec()).collect()
    };
    let (xtr, xte) = (rows(&train), rows(&test));
    let logits = |w: &[f64], b: &[f64; 4], x: &[f64]| -> Vec<f64> {
        (0..4)
            .map(|c| b[c] + (0..dim).map(|i| x[i] * w[i * 4 + c]).sum::<f64>())
            .collect()
    };
    // Full-batch gradient descent on softmax regression.
    for _ in 0..200 {
        let mut gw = vec![0.0; dim * 4];
        let mut gb = [0.0; 4];
        for (x, &y) in xtr.iter().zip(&train.labels) {
            let p = softmax_row(&logits(&w, &b, x));
            for c in 0..4 {
                let e = p[c] - if c == y { 1.0 } else { 0.0 };
                gb[c] += e;
                for i in 0..dim {
                    gw[i * 4 + c] += e * x[i];
                }
            }
        }
        let n = xtr.len() as f64;
        w.iter_mut().zip(&gw).for_each(|(w, g)| *w -= 0.05 * g / n);
        b.iter_mut().zip(&gb).for_each(|(b, g)| *b -= 0.05 * g / n);
    }
    let correct = xte
        .iter()
        .zip(&test.labels)
        .filter(|(x, &y)| {
            let l = logits(&w, &b, x);
            (0..4).max_by(|&i, &j| l[i].total_cmp(&l[j])).unwrap() == y
        })
        .count();
    let acc = correct as f64 / xte.len() as f64;
    assert!(acc > 0.9, "probe accuracy {acc}");
}
