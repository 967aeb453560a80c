//! Finite-difference check of the whole network on a small configuration.

#![allow(dead_code)]

use irfusion_core::model::{Ihbs, ModelConfig};
use irfusion_tensor::gradcheck::{project, random};
use irfusion_tensor::{Binding, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small(seed: u64) -> ModelConfig {
    ModelConfig {
        stage_channels: [4, 4, 8],
        decoder_width: 4,
        seed,
        ..ModelConfig::default()
    }
}

fn objective<'t>(model: &Ihbs, b: &Binding<'t, f64>, rgb: Var<'t, f64>, th: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let out = model.forward(b, rgb, th).unwrap();
    project(out.main, seed).unwrap().add(project(out.aux, seed + 1).unwrap()).unwrap()
}

type Probe = (ParamStore<f64>, Tensor<f64>, Tensor<f64>);

/// Element `index` of parameter `which`, with the two inputs numbered after
/// the parameters.
fn read(p: &Probe, which: usize, index: usize) -> f64 {
    let n = p.0.len();
    match which {
        w if w < n => p.0.iter().nth(w).unwrap().value.data()[index],
        w if w == n => p.1.data()[index],
        _ => p.2.data()[index],
    }
}

fn write(p: &mut Probe, which: usize, index: usize, v: f64) {
    let n = p.0.len();
    let data = match which {
        w if w < n => p.0.iter_mut().nth(w).unwrap().value.data_mut(),
        w if w == n => p.1.data_mut(),
        _ => p.2.data_mut(),
    };
    data[index] = v;
}

pub struct Outcome {
    pub checked: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

/// Central five-point differences on a sample of every parameter tensor
/// and of both inputs, compared with the tape gradients.
pub fn check_network(seed: u64, per_tensor: usize) -> Outcome {
    const STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];
    const REL: f64 = 1e-4;
    const TINY: f64 = 1e-6;
    let (model, store) = Ihbs::new::<f64>(small(seed)).unwrap();
    let rgb = random(&[3, 16, 16], -1.0, 1.0, seed + 10);
    let th = random(&[1, 16, 16], -1.0, 1.0, seed + 11);

    let tape = Tape::new();
    let b = store.bind(&tape);
    let (rv, tv) = (tape.leaf(rgb.clone(), true), tape.leaf(th.clone(), true));
    objective(&model, &b, rv, tv, seed).backward().unwrap();
    let mut analytic: Vec<Vec<f64>> = b.grads().into_iter().map(|g| g.expect("every parameter is reached")).collect();
    analytic.push(rv.grad().unwrap().into_data());
    analytic.push(tv.grad().unwrap().into_data());

    let eval = |store: &ParamStore<f64>, rgb: &Tensor<f64>, th: &Tensor<f64>| {
        let tape = Tape::new();
        let b = store.bind_frozen(&tape);
        objective(&model, &b, tape.constant(rgb.clone()), tape.constant(th.clone()), seed).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Outcome {
        checked: 0,
        worst: 0.0,
        failures: Vec::new(),
    };
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).chain(["rgb".into(), "thermal".into()]).collect();
    let mut probe: Probe = (store.clone(), rgb, th);
    for (which, grads) in analytic.iter().enumerate() {
        let picks: Vec<usize> = if grads.len() <= per_tensor {
            (0..grads.len()).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..grads.len())).collect()
        };
        for index in picks {
            let orig = read(&probe, which, index);
            let a = grads[index];
            out.checked += 1;
            // A stencil that straddles a ReLU kink gives a one-off mismatch, so
            // retry with smaller steps, then with one-sided stencils (the side
            // away from the kink sees the true derivative).
            let mut best = (f64::INFINITY, 0.0);
            let stencils = STEPS.iter().map(|&h| (h, 0)).chain(STEPS.iter().flat_map(|&h| [(h, 1), (h, -1)]));
            for (step, side) in stencils {
                let mut at = |d: f64| {
                    write(&mut probe, which, index, orig + d);
                    eval(&probe.0, &probe.1, &probe.2)
                };
                let numeric = if side == 0 {
                    (-at(2.0 * step) + 8.0 * at(step) - 8.0 * at(-step) + at(-2.0 * step)) / (12.0 * step)
                } else {
                    let h = side as f64 * step;
                    (-3.0 * at(0.0) + 4.0 * at(h) - at(2.0 * h)) / (2.0 * h)
                };
                let scale = a.abs().max(numeric.abs());
                let err = if scale < TINY { 0.0 } else { (a - numeric).abs() / scale };
                let err = if scale < TINY && (a - numeric).abs() >= 1e-9 { f64::INFINITY } else { err };
                if err < best.0 {
                    best = (err, numeric);
                }
                if best.0 < REL {
                    break;
                }
            }
            write(&mut probe, which, index, orig);
            let (err, numeric) = best;
            let ok = err < REL;
            if ok {
                out.worst = out.worst.max(err);
            }
            if !ok {
                out.failures.push(format!("{}[{index}]: analytic {a:e}, numeric {numeric:e}", names[which]));
            }
        }
    }
    out
}
