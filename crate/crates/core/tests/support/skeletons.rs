//! Skeleton oracles: exact reproduction of one-pixel lines, and agreement
//! with Zhang-Suen thinning on five-pixel ribbons.

#![allow(dead_code)]

use irfusion_core::loss::soft_skeleton;
use irfusion_tensor::{Tape, Tensor};

pub fn binary(h: usize, w: usize, on: impl Fn(usize, usize) -> bool) -> Tensor<f64> {
    Tensor::from_fn(&[1, h, w], |i| if on(i / w, i % w) { 1.0 } else { 0.0 })
}

pub fn skeleton(x: &Tensor<f64>, iterations: usize) -> Tensor<f64> {
    let tape = Tape::new();
    soft_skeleton(tape.constant(x.clone()), iterations).unwrap().value()
}

/// Zhang-Suen thinning of a binary image.
pub fn zhang_suen(img: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut cur = img.to_vec();
    let at = |g: &[bool], y: isize, x: isize| -> u8 {
        (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && g[y as usize * w + x as usize]) as u8
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if at(&cur, y, x) == 0 {
                        continue;
                    }
                    // P2..P9 clockwise from north.
                    let p = [
                        at(&cur, y - 1, x),
                        at(&cur, y - 1, x + 1),
                        at(&cur, y, x + 1),
                        at(&cur, y + 1, x + 1),
                        at(&cur, y + 1, x),
                        at(&cur, y + 1, x - 1),
                        at(&cur, y, x - 1),
                        at(&cur, y - 1, x - 1),
                    ];
                    let b: u8 = p.iter().sum();
                    let a = (0..8).filter(|&i| p[i] == 0 && p[(i + 1) % 8] == 1).count();
                    let (c1, c2) = if pass == 0 {
                        (p[0] * p[2] * p[4], p[2] * p[4] * p[6])
                    } else {
                        (p[0] * p[2] * p[6], p[0] * p[4] * p[6])
                    };
                    if (2..=6).contains(&b) && a == 1 && c1 == 0 && c2 == 0 {
                        remove.push(y as usize * w + x as usize);
                    }
                }
            }
            changed |= !remove.is_empty();
            for i in remove {
                cur[i] = false;
            }
        }
        if !changed {
            return cur;
        }
    }
}

/// Digital line through the image centre at `angle`, `width` pixels wide,
/// running from border to border.
pub fn ribbon(size: usize, angle: f64, width: f64) -> Tensor<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let (s, co) = angle.sin_cos();
    binary(size, size, |y, x| {
        ((x as f64 - c) * s - (y as f64 - c) * co).abs() <= width / 2.0
    })
}

/// Lines at 20 orientations (one pixel per step along the dominant axis)
/// and a cross. Returns the number of shapes checked.
pub fn one_pixel_lines() -> Result<usize, String> {
    let mut shapes = 0;
    for k in 0..20 {
        let angle = k as f64 * std::f64::consts::PI / 20.0;
        let line = ribbon(25, angle, angle.sin().abs().max(angle.cos().abs()) * 0.999);
        if line.data().iter().filter(|&&v| v == 1.0).count() < 25 {
            return Err(format!("angle {angle}: line is not connected across the image"));
        }
        for iterations in [1, 3, 10] {
            if skeleton(&line, iterations) != line {
                return Err(format!("angle {angle:.3}, iterations {iterations}: skeleton differs from the line"));
            }
        }
        shapes += 1;
    }
    let cross = binary(9, 9, |y, x| y == 4 || x == 2);
    if skeleton(&cross, 5) != cross {
        return Err("cross: skeleton differs".into());
    }
    Ok(shapes + 1)
}

/// Five-pixel ribbons at 20 orientations: every skeleton pixel away from
/// the image border lies within one pixel (Chebyshev) of the thinning
/// result, for 3, 5 and 10 iterations. Returns the number of ribbons.
pub fn ribbons() -> Result<usize, String> {
    const SIZE: usize = 40;
    const MARGIN: usize = 4;
    for k in 0..20 {
        let angle = 0.05 + k as f64 * std::f64::consts::PI / 20.0;
        let img = ribbon(SIZE, angle, 5.0);
        let mask: Vec<bool> = img.data().iter().map(|&v| v == 1.0).collect();
        let axis = zhang_suen(&mask, SIZE, SIZE);
        for iterations in [3, 5, 10] {
            let skel = skeleton(&img, iterations);
            let mut interior = 0;
            for y in MARGIN..SIZE - MARGIN {
                for x in MARGIN..SIZE - MARGIN {
                    if skel.data()[y * SIZE + x] <= 0.0 {
                        continue;
                    }
                    interior += 1;
                    let near = (y - 1..=y + 1).any(|yy| (x - 1..=x + 1).any(|xx| axis[yy * SIZE + xx]));
                    if !near {
                        return Err(format!("angle {angle:.3}, iterations {iterations}: ({y}, {x}) is off the medial axis"));
                    }
                }
            }
            if interior == 0 {
                return Err(format!("angle {angle:.3}: empty skeleton"));
            }
        }
    }
    Ok(20)
}
