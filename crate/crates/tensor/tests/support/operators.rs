//! Finite-difference probes for every differentiable operator. Each case
//! builds its inputs from a seed and returns the check report.

#![allow(dead_code)]

use irfusion_tensor::gradcheck::{self, project, random, Report, Tolerance};
use irfusion_tensor::{ReduceKind, Tensor, Var, MAXPOOL_PAD};

pub type Case = fn(u64) -> Report;

pub const CASES: &[(&str, Case)] = &[
    ("binary", elementwise_binary),
    ("unary", elementwise_unary),
    ("relu/clamp", relu_clamp),
    ("matmul", matmul_and_transpose),
    ("conv2d", conv2d),
    ("maxpool2d", maxpool2d),
    ("softmax", softmax),
    ("reduce", reductions),
    ("resize", resize_bilinear),
    ("concat/split", concat_split_reshape),
    ("normalize", normalize_and_affine),
];

/// Values bounded away from zero so relu/clamp kinks are not straddled.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mag = random(shape, 0.1, 1.0, seed);
    let sign = random(shape, -1.0, 1.0, seed + 7);
    Tensor::from_fn(shape, |i| mag.data()[i].copysign(sign.data()[i]))
}

pub fn elementwise_binary(seed: u64) -> Report {
    let a = random(&[3, 4], -2.0, 2.0, seed);
    let b = random(&[3, 4], 0.5, 2.0, seed + 100);
    let s = random(&[], 0.5, 1.5, seed + 200);
    gradcheck::check(&[a, b, s], Tolerance::default(), |_, v| {
        let x = v[0].add(v[1])?.mul(v[0])?;
        let y = x.sub(v[1])?.div(v[1])?;
        let z = y.mul(v[2])?.add(v[2])?.div(v[2])?;
        let w = v[2].sub(z)?;
        project(w, seed)
    })
    .unwrap()
}

pub fn elementwise_unary(seed: u64) -> Report {
    let a = random(&[2, 5], 0.1, 2.0, seed);
    gradcheck::check(&[a], Tolerance::default(), |_, v| {
        let x = v[0].ln().exp().sigmoid().scale(1.7).add_scalar(-0.3).neg();
        project(x, seed)
    })
    .unwrap()
}

pub fn relu_clamp(seed: u64) -> Report {
    let b = away_from_zero(&[6], seed);
    gradcheck::check(&[b], Tolerance::default(), |_, v| {
        let x = v[0].relu().add(v[0].clamp(-0.55, 0.55))?;
        project(x, seed)
    })
    .unwrap()
}

pub fn matmul_and_transpose(seed: u64) -> Report {
    let a = random(&[3, 4], -1.0, 1.0, seed);
    let b = random(&[4, 2], -1.0, 1.0, seed + 50);
    gradcheck::check(&[a, b], Tolerance::default(), |_, v| {
        let c = v[0].matmul(v[1])?;
        let d = c.t()?.matmul(v[0])?;
        project(d, seed)
    })
    .unwrap()
}

pub fn conv2d(seed: u64) -> Report {
    let configs = [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)];
    let (k, stride, pad) = configs[seed as usize % configs.len()];
    let x = random(&[2, 5, 6], -1.0, 1.0, seed);
    let w = random(&[3, 2, k, k], -1.0, 1.0, seed + 10);
    let b = random(&[3], -1.0, 1.0, seed + 20);
    gradcheck::check(&[x, w, b], Tolerance::default(), |_, v| {
        let y = v[0].conv2d(v[1], Some(v[2]), stride, pad)?;
        project(y, seed)
    })
    .unwrap()
}

pub fn maxpool2d(seed: u64) -> Report {
    // Values at least 0.02 apart so no finite-difference probe crosses a
    // window's argmax.
    let keys = random(&[50], 0.0, 1.0, seed);
    let mut order: Vec<usize> = (0..50).collect();
    order.sort_by(|&a, &b| keys.data()[a].total_cmp(&keys.data()[b]));
    let mut vals = vec![0.0; 50];
    for (rank, &i) in order.iter().enumerate() {
        vals[i] = rank as f64 * 0.02 - 0.5;
    }
    let x = Tensor::new(&[2, 5, 5], vals).unwrap();
    gradcheck::check(&[x], Tolerance::default(), |_, v| {
        let y = v[0].maxpool2d(3, 1 + (seed as usize % 2), 1, MAXPOOL_PAD)?;
        project(y, seed)
    })
    .unwrap()
}

pub fn softmax(seed: u64) -> Report {
    let x = random(&[3, 4, 2], -2.0, 2.0, seed);
    let axis = seed as usize % 3;
    gradcheck::check(&[x], Tolerance::default(), |_, v| project(v[0].softmax(axis)?, seed)).unwrap()
}

pub fn reductions(seed: u64) -> Report {
    let x = random(&[3, 2, 4], -1.0, 1.0, seed);
    gradcheck::check(&[x], Tolerance::default(), |_, v| {
        let a = v[0].reduce(ReduceKind::Sum, &[1])?;
        let b = v[0].reduce(ReduceKind::Mean, &[0, 2])?;
        let total = project(a, seed)?.add(project(b, seed + 1)?)?;
        total.add(v[0].mean())
    })
    .unwrap()
}

pub fn resize_bilinear(seed: u64) -> Report {
    let sizes = [(4, 4), (2, 3), (7, 5), (3, 3)];
    let (oh, ow) = sizes[seed as usize % sizes.len()];
    let x = random(&[2, 3, 3], -1.0, 1.0, seed);
    gradcheck::check(&[x], Tolerance::default(), |_, v| project(v[0].resize_bilinear(oh, ow)?, seed)).unwrap()
}

pub fn concat_split_reshape(seed: u64) -> Report {
    let a = random(&[2, 3], -1.0, 1.0, seed);
    let b = random(&[4, 3], -1.0, 1.0, seed + 1);
    gradcheck::check(&[a, b], Tolerance::default(), |_, v| {
        let c = Var::concat(&[v[0], v[1]])?;
        let parts = c.split(3)?;
        let d = parts[2].mul(parts[0])?.add(parts[1])?;
        project(d.reshape(&[6])?, seed)
    })
    .unwrap()
}

pub fn normalize_and_affine(seed: u64) -> Report {
    let x = random(&[3, 4, 5], -2.0, 2.0, seed);
    let g = random(&[3], 0.5, 1.5, seed + 1);
    let b = random(&[3], -0.5, 0.5, seed + 2);
    let axis = seed as usize % 3;
    gradcheck::check(&[x, g, b], Tolerance::default(), |_, v| {
        let y = v[0].normalize(axis, 1e-5)?.channel_affine(v[1], v[2])?;
        project(y, seed)
    })
    .unwrap()
}
