//! Seeded finite-difference probes for fusion attention and the losses.

#![allow(dead_code)]

use irfusion_core::fusion::{efficient_cross_attention, fuse, FusionBlockParams};
use irfusion_core::loss::{ce_loss, composite_loss, dice_loss, soft_skeleton, topology_loss, LossWeights};
use irfusion_tensor::gradcheck::{self, project, random, Report, Tolerance};
use irfusion_tensor::{ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The pooling losses are piecewise smooth, so they use a smaller step and
/// a looser bound near the kinks.
pub const KINKED: Tolerance = Tolerance {
    step: 1e-6,
    rel: 1e-3,
    tiny: 1e-6,
    abs: 1e-3,
};

pub fn attention(seed: u64) -> Report {
    let (c_k, c_v, n) = if seed % 2 == 0 { (4, 4, 2) } else { (8, 4, 4) };
    let inputs = [
        random(&[c_k, 3, 2], -2.0, 2.0, seed),
        random(&[c_k, 3, 2], -2.0, 2.0, seed + 50),
        random(&[c_v, 3, 2], -2.0, 2.0, seed + 100),
    ];
    gradcheck::check(&inputs, Tolerance::default(), |_, v| {
        project(efficient_cross_attention(v[0], v[1], v[2], n).unwrap(), seed)
    })
    .unwrap()
}

/// Both feature maps and all eight projection weights of one block.
pub fn fusion_block(seed: u64) -> Report {
    let (c, c_k, c_v, n) = (4, 4, 4, 2);
    let mut store = ParamStore::<f64>::new();
    let p = FusionBlockParams::register(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), "f", c, c_k, c_v, n).unwrap();
    let mut inputs = vec![random(&[c, 2, 3], -1.5, 1.5, seed), random(&[c, 2, 3], -1.5, 1.5, seed + 1)];
    inputs.extend(store.iter().map(|p| p.value.clone()));
    assert_eq!(inputs.len(), 10);
    gradcheck::check(&inputs, Tolerance::default(), |tape, v| {
        // Swap every projection for its probe variable.
        let b = store.bind_frozen(tape);
        let mut w = p.bind(&b);
        [w.q_i, w.k_i, w.v_i, w.q_r, w.k_r, w.v_r, w.proj_i, w.proj_r] = [v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9]];
        let out = fuse(v[0], v[1], &w, n).unwrap();
        project(out.x_i, seed)?.add(project(out.x_r, seed + 1)?)
    })
    .unwrap()
}

fn label(seed: u64) -> Tensor<f64> {
    Tensor::from_fn(&[1, 8, 8], |i| if (i / 8 + 2 * (i % 8) + seed as usize) % 5 < 2 { 1.0 } else { 0.0 })
}

fn probabilities(seed: u64) -> Tensor<f64> {
    random(&[1, 8, 8], 0.05, 0.95, seed)
}

pub fn skeleton(seed: u64) -> Report {
    gradcheck::check(&[probabilities(seed)], KINKED, |_, v| project(soft_skeleton(v[0], 3).unwrap(), seed)).unwrap()
}

/// Cross-entropy, Dice, topology and the composite loss for one seed.
pub fn losses(seed: u64) -> Vec<(&'static str, Report)> {
    let l = label(seed);
    let pred = probabilities(seed);
    let aux = probabilities(seed + 500);
    let one = |tol: Tolerance, inputs: &[Tensor<f64>], which: u8| {
        gradcheck::check(inputs, tol, |tape, v| {
            let y = tape.constant(l.clone());
            Ok(match which {
                0 => ce_loss(y, v[0]).unwrap(),
                1 => dice_loss(y, v[0], 1e-6).unwrap(),
                2 => topology_loss(y, v[0], 10, 1e-6).unwrap(),
                _ => composite_loss(y, v[0], v[1], &LossWeights::default()).unwrap().total,
            })
        })
        .unwrap()
    };
    vec![
        ("ce", one(Tolerance::default(), &[pred.clone()], 0)),
        ("dice", one(Tolerance::default(), &[pred.clone()], 1)),
        ("topology", one(KINKED, &[pred.clone()], 2)),
        ("composite", one(KINKED, &[pred, aux], 3)),
    ]
}

/// Dense per-segment oracle: builds the full `HW×HW` map
/// `A[p][p'] = Σ_j softmax_p(K)[j][p] · softmax_j(Q)[j][p']` of each segment
/// and applies it to V, all with plain loops.
pub fn dense_oracle(q: &[f64], k: &[f64], v: &[f64], c_k: usize, c_v: usize, hw: usize, n: usize) -> Vec<f64> {
    let (dk, dv) = (c_k / n, c_v / n);
    let mut out = vec![0.0; c_v * hw];
    for s in 0..n {
        let mut ks = vec![0.0; dk * hw];
        for j in 0..dk {
            let row = &k[(s * dk + j) * hw..(s * dk + j + 1) * hw];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            for p in 0..hw {
                ks[j * hw + p] = (row[p] - m).exp() / z;
            }
        }
        let mut qs = vec![0.0; dk * hw];
        for p in 0..hw {
            let col: Vec<f64> = (0..dk).map(|j| q[(s * dk + j) * hw + p]).collect();
            let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = col.iter().map(|x| (x - m).exp()).sum();
            for j in 0..dk {
                qs[j * hw + p] = (col[j] - m).exp() / z;
            }
        }
        let mut map = vec![0.0; hw * hw];
        for p in 0..hw {
            for pp in 0..hw {
                map[p * hw + pp] = (0..dk).map(|j| ks[j * hw + p] * qs[j * hw + pp]).sum();
            }
        }
        for c in 0..dv {
            for pp in 0..hw {
                out[(s * dv + c) * hw + pp] = (0..hw).map(|p| v[(s * dv + c) * hw + p] * map[p * hw + pp]).sum();
            }
        }
    }
    out
}

/// Efficient attention against [`dense_oracle`] over H, W ∈ {1, 3, 8},
/// C_k, C_v ∈ {4, 8} and n ∈ {1, 2, 4}. Returns the case count and the
/// largest absolute difference.
pub fn oracle_grid() -> (usize, f64) {
    let (mut cases, mut worst) = (0, 0.0f64);
    for h in [1, 3, 8] {
        for w in [1, 3, 8] {
            for c_k in [4, 8] {
                for c_v in [4, 8] {
                    for n in [1, 2, 4] {
                        let seed = (h * 1000 + w * 100 + c_k * 10 + c_v + n) as u64;
                        let q = random(&[c_k, h, w], -3.0, 3.0, seed);
                        let k = random(&[c_k, h, w], -3.0, 3.0, seed + 1);
                        let v = random(&[c_v, h, w], -2.0, 2.0, seed + 2);
                        let tape = Tape::<f64>::new();
                        let out = efficient_cross_attention(
                            tape.constant(q.clone()),
                            tape.constant(k.clone()),
                            tape.constant(v.clone()),
                            n,
                        )
                        .unwrap()
                        .value();
                        let want = dense_oracle(q.data(), k.data(), v.data(), c_k, c_v, h * w, n);
                        for (a, b) in out.data().iter().zip(&want) {
                            worst = worst.max((a - b).abs());
                        }
                        cases += 1;
                    }
                }
            }
        }
    }
    (cases, worst)
}
