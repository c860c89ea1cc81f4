//! Finite-difference gradient checks shared by the gradient tests and the
//! acceptance run.
#![allow(dead_code)]

use mcl_core::geometry::LabelingPattern;
use mcl_core::kernel::{
    affine_backward, affine_forward, batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward,
    global_avg_pool, global_avg_pool_backward, maxpool_backward, maxpool_forward, relu, relu_backward, BnMode,
};
use mcl_core::loss::batch_loss_and_grad;
use mcl_core::network::{build_network, NetworkParams, INPUT_SIZE};
use mcl_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step for single layers; exact for the linear ones and
/// O(h^2) for batch norm and the loss.
pub const LAYER_STEP: f64 = 1e-4;
/// Step for the full network, small enough to rarely cross a ReLU kink or a
/// max-pool switch.
pub const NETWORK_STEP: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, floor)`. The floor is `1e-6` times the largest
/// analytic entry, so coordinates whose true gradient is exactly zero (a conv
/// bias in front of batch norm) are judged against the gradient's scale
/// rather than against round-off.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-6 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn central<F: FnMut(&[f64]) -> f64>(f: F, x: &[f64], coords: &[usize]) -> Vec<f64> {
    central_with(f, x, coords, LAYER_STEP)
}

fn central_with<F: FnMut(&[f64]) -> f64>(f: F, x: &[f64], coords: &[usize], h: f64) -> Vec<f64> {
    sided(f, x, coords, h)
        .iter()
        .map(|(p, m)| (p - m) / (2.0 * h))
        .collect()
}

/// `(f(x + h e_i), f(x - h e_i))` for each coordinate `i`.
fn sided<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], coords: &[usize], h: f64) -> Vec<(f64, f64)> {
    let mut t = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let o = t[i];
            t[i] = o + h;
            let p = f(&t);
            t[i] = o - h;
            let m = f(&t);
            t[i] = o;
            (p, m)
        })
        .collect()
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn randn(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with(t: &Tensor<f64>, data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(t.dims(), data.to_vec()).unwrap()
}

fn pick(a: &Tensor<f64>, coords: &[usize]) -> Vec<f64> {
    coords.iter().map(|&i| a.data()[i]).collect()
}

/// Worst relative error of each layer's backward pass against central
/// differences of `sum(r * layer(x))` for a random `r`.
pub fn layer_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![];

    for (name, stride, pad) in [("conv 3x3 s1 p1", 1, 1), ("conv 3x3 s2 p0", 2, 0)] {
        let x = randn(&mut rng, &[2, 7, 6, 3]);
        let w = randn(&mut rng, &[3, 3, 3, 4]);
        let b = randn(&mut rng, &[4]);
        let y = conv2d_forward(&x, &w, &b, stride, pad).unwrap();
        let r = randn(&mut rng, y.dims());
        let (gx, gw, gb) = conv2d_backward(&r, &x, &w, stride, pad).unwrap();
        let fx = |v: &[f64]| dot(&r, &conv2d_forward(&with(&x, v), &w, &b, stride, pad).unwrap());
        let fw = |v: &[f64]| dot(&r, &conv2d_forward(&x, &with(&w, v), &b, stride, pad).unwrap());
        let fb = |v: &[f64]| dot(&r, &conv2d_forward(&x, &w, &with(&b, v), stride, pad).unwrap());
        let e = max_rel_error(gx.data(), &central(fx, x.data(), &all(x.len())))
            .max(max_rel_error(gw.data(), &central(fw, w.data(), &all(w.len()))))
            .max(max_rel_error(gb.data(), &central(fb, b.data(), &all(b.len()))));
        out.push((name, e));
    }

    {
        let c = 3;
        let x = randn(&mut rng, &[2, 4, 3, c]);
        let gamma: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let bn = |x: &Tensor<f64>, g: &[f64], b: &[f64]| {
            let (mut rm, mut rv, mut bm, mut bv) = (vec![0.0; c], vec![1.0; c], vec![0.0; c], vec![0.0; c]);
            batchnorm_forward(x, g, b, &mut rm, &mut rv, &mut bm, &mut bv, BnMode::Train).unwrap()
        };
        let (y, cache) = bn(&x, &gamma, &beta);
        let r = randn(&mut rng, y.dims());
        let (gx, gg, gb) = batchnorm_backward(&r, &cache, &gamma).unwrap();
        let fx = |v: &[f64]| dot(&r, &bn(&with(&x, v), &gamma, &beta).0);
        let fg = |v: &[f64]| dot(&r, &bn(&x, v, &beta).0);
        let fb = |v: &[f64]| dot(&r, &bn(&x, &gamma, v).0);
        let e = max_rel_error(gx.data(), &central(fx, x.data(), &all(x.len())))
            .max(max_rel_error(&gg, &central(fg, &gamma, &all(c))))
            .max(max_rel_error(&gb, &central(fb, &beta, &all(c))));
        out.push(("batch norm (train)", e));
    }

    {
        // Keep inputs away from the kink so the difference quotient is exact.
        let mut x = randn(&mut rng, &[2, 5, 5, 3]);
        x.data_mut().iter_mut().for_each(|v| {
            if v.abs() < 1e-3 {
                *v += 0.01
            }
        });
        let r = randn(&mut rng, x.dims());
        let g = relu_backward(&r, &relu(&x)).unwrap();
        let f = |v: &[f64]| dot(&r, &relu(&with(&x, v)));
        out.push(("relu", max_rel_error(g.data(), &central(f, x.data(), &all(x.len())))));
    }

    {
        // Odd extents exercise the ceil-mode border windows. Distinct values
        // 0.01 apart keep every window's winner fixed under the step.
        let n = 2 * 5 * 7 * 3;
        let mut vals: Vec<f64> = (0..n).map(|k| k as f64 * 0.01 - 1.0).collect();
        rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), &mut rng);
        let x = Tensor::from_vec(&[2, 5, 7, 3], vals).unwrap();
        let (y, idx) = maxpool_forward(&x).unwrap();
        let r = randn(&mut rng, y.dims());
        let g = maxpool_backward(&r, &idx).unwrap();
        let f = |v: &[f64]| dot(&r, &maxpool_forward(&with(&x, v)).unwrap().0);
        out.push((
            "max pool 2x2 ceil",
            max_rel_error(g.data(), &central(f, x.data(), &all(x.len()))),
        ));
    }

    {
        let x = randn(&mut rng, &[2, 3, 4, 5]);
        let y = global_avg_pool(&x).unwrap();
        let r = randn(&mut rng, y.dims());
        let g = global_avg_pool_backward(&r, x.dims()).unwrap();
        let f = |v: &[f64]| dot(&r, &global_avg_pool(&with(&x, v)).unwrap());
        out.push((
            "global average pool",
            max_rel_error(g.data(), &central(f, x.data(), &all(x.len()))),
        ));
    }

    {
        let feats = randn(&mut rng, &[3, 6]);
        let w = randn(&mut rng, &[7, 4]);
        let y = affine_forward(&w, &feats).unwrap();
        let r = randn(&mut rng, y.dims());
        let (gw, gf) = affine_backward(&r, &feats, &w, true).unwrap();
        let fw = |v: &[f64]| dot(&r, &affine_forward(&with(&w, v), &feats).unwrap());
        let ff = |v: &[f64]| dot(&r, &affine_forward(&w, &with(&feats, v)).unwrap());
        let e = max_rel_error(gw.data(), &central(fw, w.data(), &all(w.len()))).max(max_rel_error(
            gf.unwrap().data(),
            &central(ff, feats.data(), &all(feats.len())),
        ));
        out.push(("prediction layer", e));
    }

    {
        let n = 5;
        let pred = randn(&mut rng, &[2, 2 * n]);
        let gt: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..2 * n).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let gt_refs: Vec<&[f64]> = gt.iter().map(|g| g.as_slice()).collect();
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..3.0)).collect();
        let d = [0.3, 0.4];
        let (_, g) = batch_loss_and_grad(&pred, &gt_refs, &u, &d).unwrap();
        let f = |v: &[f64]| batch_loss_and_grad(&with(&pred, v), &gt_refs, &u, &d).unwrap().0;
        out.push((
            "weighted loss",
            max_rel_error(g.data(), &central(f, pred.data(), &all(pred.len()))),
        ));
    }
    out
}

/// Loss of a float64 network on a fixed batch, in training mode.
fn network_loss(params: &mut NetworkParams<f64>, images: &Tensor<f64>, gt: &[&[f64]], u: &[f64], d: &[f64]) -> f64 {
    let (feats, _) = params.forward_train(images).unwrap();
    let pred = affine_forward(&params.heads()[0].value, &feats).unwrap();
    batch_loss_and_grad(&pred, gt, u, d).unwrap().0
}

/// Outcome of [`network_error`].
pub struct NetworkCheck {
    /// Relative error beyond round-off.
    pub worst: f64,
    pub worst_block: String,
    /// Relative error with no round-off allowance, for the record.
    pub worst_raw: f64,
    pub checked: usize,
    /// Coordinates left out because a ReLU or max-pool kink lies within the
    /// step.
    pub skipped: usize,
}

/// Worst relative error of the full-network gradient (every conv, batch
/// norm and the head) at `per_block` random coordinates of each block.
pub fn network_error(seed: u64, per_block: usize) -> NetworkCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pattern = LabelingPattern::Five;
    let mut params: NetworkParams<f64> = build_network(pattern, seed).1.cast();
    let batch = 2;
    let px = INPUT_SIZE * INPUT_SIZE;
    let images = Tensor::from_vec(
        &[batch, INPUT_SIZE, INPUT_SIZE, 1],
        (0..batch * px).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let n = pattern.landmarks();
    let gt: Vec<Vec<f64>> = (0..batch)
        .map(|_| (0..2 * n).map(|_| rng.gen_range(0.0..50.0)).collect())
        .collect();
    let gt_refs: Vec<&[f64]> = gt.iter().map(|g| g.as_slice()).collect();
    let u: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
    let d = [17.0, 19.0];

    let (feats, cache) = params.forward_train(&images).unwrap();
    let pred = affine_forward(&params.heads()[0].value, &feats).unwrap();
    let (_, g) = batch_loss_and_grad(&pred, &gt_refs, &u, &d).unwrap();
    let (gw, gf) = affine_backward(&g, &feats, &params.heads()[0].value, true).unwrap();
    params.backward(cache, &gf.unwrap()).unwrap();
    params.head_mut(0).unwrap().grad = gw;

    let h = NETWORK_STEP;
    let loss = network_loss(&mut params.clone(), &images, &gt_refs, &u, &d);
    // Round-off of a difference quotient of the loss.
    let noise = 4.0 * f64::EPSILON * loss.abs() / h;
    let names: Vec<String> = params.blocks().map(|b| b.name.clone()).collect();
    let mut out = NetworkCheck {
        worst: 0.0,
        worst_block: String::new(),
        worst_raw: 0.0,
        checked: 0,
        skipped: 0,
    };
    for name in &names {
        let block = params.blocks().find(|b| &b.name == name).unwrap();
        let len = block.value.len();
        let coords: Vec<usize> = (0..per_block.min(len)).map(|_| rng.gen_range(0..len)).collect();
        let analytic = pick(&block.grad, &coords);
        let x0 = block.value.data().to_vec();
        let f = |v: &[f64]| {
            let b = params.blocks_mut().find(|b| &b.name == name).unwrap();
            b.value.data_mut().copy_from_slice(v);
            network_loss(&mut params.clone(), &images, &gt_refs, &u, &d)
        };
        let pm = sided(f, &x0, &coords, h);
        params
            .blocks_mut()
            .find(|b| &b.name == name)
            .unwrap()
            .value
            .data_mut()
            .copy_from_slice(&x0);
        // Only the part of a discrepancy that exceeds round-off counts, judged
        // against the block's own gradient scale. Convolution biases feeding
        // a train-mode batch norm have an exactly zero gradient.
        let floor = (1e-6 * block_scale(&params, name)).max(1e-12);
        for (&a, &(p, m)) in analytic.iter().zip(&pm) {
            let numeric = (p - m) / (2.0 * h);
            // A kink inside the step shows up as a second difference far
            // larger than smooth curvature allows.
            let bend = (p - 2.0 * loss + m).abs() / (2.0 * h);
            if bend > 1e-5 * numeric.abs() + noise {
                out.skipped += 1;
                if std::env::var_os("GRADCHECK_VERBOSE").is_some() {
                    eprintln!("{name}: skipped, kink within the step (bend {bend:e}, numeric {numeric:e})");
                }
                continue;
            }
            let big = a.abs().max(numeric.abs()).max(floor);
            let err = ((a - numeric).abs() - noise).max(0.0) / big;
            out.worst_raw = out.worst_raw.max((a - numeric).abs() / big);
            if std::env::var_os("GRADCHECK_VERBOSE").is_some() {
                eprintln!("{name}: {err:e} analytic {a:e} numeric {numeric:e}");
            }
            if err >= out.worst {
                out.worst = err;
                out.worst_block = name.clone();
            }
            out.checked += 1;
        }
    }
    out
}

fn block_scale(params: &NetworkParams<f64>, name: &str) -> f64 {
    params
        .blocks()
        .find(|b| b.name == name)
        .unwrap()
        .grad
        .data()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
}
