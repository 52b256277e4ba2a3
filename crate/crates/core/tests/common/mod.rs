//! Central finite-difference oracle for the autodiff engine and the losses,
//! evaluated at 64-bit precision.

#![allow(dead_code)]

use memreg::losses::{
    adv_d_loss, adv_g_loss, memory_reg, seg_ce, stage1_total, stage2_total, ClassBalanceWeights, LossWeights,
    MrGradient, Stage1Parts, Stage2Parts,
};
use memreg::rng::seeded;
use memreg::{no_grad, Conv2dSpec, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

type T = Tensor<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    seeded(seed, 0xFD)
}

pub fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> T {
    let n: usize = shape.iter().product();
    T::parameter((0..n).map(|_| r.random_range(lo..hi)).collect(), shape).unwrap()
}

/// Values bounded away from zero so kinks stay outside the probe step.
pub fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> T {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = r.random_range(0.05..2.0);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    T::parameter(v, shape).unwrap()
}

pub fn constant(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> T {
    uniform(r, shape, lo, hi).detach()
}

/// Contracts a tensor of any shape to a scalar with fixed random weights.
pub fn project(t: &T, seed: u64) -> T {
    let mut r = rng(seed ^ 0xABCD);
    let w = constant(&mut r, t.shape(), -1.0, 1.0);
    t.mul(&w).unwrap().sum()
}

/// Relative error `|g - g_fd| / max(|g|, |g_fd|)` (Euclidean norms over all
/// parameters) between backward and central differences of `f`.
pub fn fd_error(params: &[T], f: impl Fn(&[T]) -> T) -> f64 {
    for p in params {
        p.clear_grad();
    }
    let loss = f(params);
    loss.backward().unwrap();
    let (mut diff, mut na, mut nf) = (0.0f64, 0.0f64, 0.0f64);
    for p in params {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        for i in 0..p.numel() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + STEP;
            let up = no_grad(|| f(params).item());
            p.data_mut()[i] = orig - STEP;
            let down = no_grad(|| f(params).item());
            p.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            diff += (analytic[i] - numeric).powi(2);
            na += analytic[i].powi(2);
            nf += numeric.powi(2);
        }
    }
    diff.sqrt() / na.sqrt().max(nf.sqrt()).max(1e-12)
}

pub struct Case {
    pub name: &'static str,
    pub run: fn(u64) -> f64,
}

fn softmax_probs(r: &mut ChaCha8Rng, shape: &[usize]) -> T {
    uniform(r, shape, -2.0, 2.0).softmax(1).unwrap().detach().requires_grad_(true)
}

fn labels(r: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<u8> {
    (0..n).map(|_| r.random_range(0..c as u8)).collect()
}

pub fn primitive_cases() -> Vec<Case> {
    vec![
        Case {
            name: "add",
            run: |s| {
                let mut r = rng(s);
                let p = [uniform(&mut r, &[3, 4], -1.0, 1.0), uniform(&mut r, &[3, 4], -1.0, 1.0)];
                fd_error(&p, |p| project(&p[0].add(&p[1]).unwrap(), s))
            },
        },
        Case {
            name: "sub",
            run: |s| {
                let mut r = rng(s);
                let p = [uniform(&mut r, &[5], -1.0, 1.0), uniform(&mut r, &[5], -1.0, 1.0)];
                fd_error(&p, |p| project(&p[0].sub(&p[1]).unwrap(), s))
            },
        },
        Case {
            name: "mul",
            run: |s| {
                let mut r = rng(s);
                let p = [uniform(&mut r, &[2, 3], -1.0, 1.0), uniform(&mut r, &[2, 3], -1.0, 1.0)];
                fd_error(&p, |p| project(&p[0].mul(&p[1]).unwrap(), s))
            },
        },
        Case {
            name: "scale",
            run: |s| {
                let mut r = rng(s);
                let c = r.random_range(-3.0..3.0);
                let p = [uniform(&mut r, &[6], -1.0, 1.0)];
                fd_error(&p, |p| project(&p[0].scale(c), s))
            },
        },
        Case {
            name: "add_scalar",
            run: |s| {
                let mut r = rng(s);
                let c = r.random_range(-3.0..3.0);
                let p = [uniform(&mut r, &[6], -1.0, 1.0)];
                fd_error(&p, |p| project(&p[0].add_scalar(c), s))
            },
        },
        Case {
            name: "matmul",
            run: |s| {
                let mut r = rng(s);
                let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
                let p = [uniform(&mut r, &[m, k], -1.0, 1.0), uniform(&mut r, &[k, n], -1.0, 1.0)];
                fd_error(&p, |p| project(&p[0].matmul(&p[1]).unwrap(), s))
            },
        },
        Case {
            name: "conv2d",
            run: |s| {
                let mut r = rng(s);
                let (cin, cout) = (r.random_range(1..4), r.random_range(1..4));
                let k = [1, 3][r.random_range(0..2)];
                let spec = Conv2dSpec::new(r.random_range(1..3), r.random_range(0..2));
                let h = r.random_range(k.max(3)..7);
                let p = [
                    uniform(&mut r, &[2, cin, h, h + 1], -1.0, 1.0),
                    uniform(&mut r, &[cout, cin, k, k], -1.0, 1.0),
                    uniform(&mut r, &[cout], -1.0, 1.0),
                ];
                fd_error(&p, |p| project(&p[0].conv2d(&p[1], Some(&p[2]), spec).unwrap(), s))
            },
        },
        Case {
            name: "relu",
            run: |s| {
                let mut r = rng(s);
                let p = [away_from_zero(&mut r, &[10])];
                fd_error(&p, |p| project(&p[0].relu(), s))
            },
        },
        Case {
            name: "leaky_relu",
            run: |s| {
                let mut r = rng(s);
                let p = [away_from_zero(&mut r, &[10])];
                fd_error(&p, |p| project(&p[0].leaky_relu(0.2), s))
            },
        },
        Case {
            name: "sigmoid",
            run: |s| {
                let mut r = rng(s);
                let p = [uniform(&mut r, &[8], -6.0, 6.0)];
                fd_error(&p, |p| project(&p[0].sigmoid(), s))
            },
        },
        Case {
            name: "dropout",
            run: |s| {
                let mut r = rng(s);
                let p = [uniform(&mut r, &[4, 5], -1.0, 1.0)];
                // Same stream each evaluation, hence the same mask.
                fd_error(&p, |p| {
                    let mut m = rng(s ^ 0xD0);
                    project(&p[0].dropout(0.3, true, &mut m).unwrap(), s)
                })
            },
        },
        Case {
            name: "softmax",
            run: |s| {
                let mut r = rng(s);
                let p = [uniform(&mut r, &[2, 4, 3], -2.0, 2.0)];
                let axis = r.random_range(0..3);
                fd_error(&p, |p| project(&p[0].softmax(axis).unwrap(), s))
            },
        },
        Case {
            name: "log_softmax",
            run: |s| {
                let mut r = rng(s);
                let p = [uniform(&mut r, &[3, 5], -3.0, 3.0)];
                let axis = r.random_range(0..2);
                fd_error(&p, |p| project(&p[0].log_softmax(axis).unwrap(), s))
            },
        },
        Case {
            name: "log",
            run: |s| {
                let mut r = rng(s);
                let p = [uniform(&mut r, &[7], 0.1, 3.0)];
                fd_error(&p, |p| project(&p[0].log(), s))
            },
        },
        Case {
            name: "clamp",
            run: |s| {
                let mut r = rng(s);
                let p = [away_from_zero(&mut r, &[12])];
                fd_error(&p, |p| project(&p[0].clamp(-0.02, 0.02).add(&p[0].clamp(-1e9, 1e9)).unwrap(), s))
            },
        },
        Case {
            name: "sum",
            run: |s| {
                let mut r = rng(s);
                let p = [uniform(&mut r, &[3, 3], -1.0, 1.0)];
                fd_error(&p, |p| p[0].mul(&p[0]).unwrap().sum())
            },
        },
        Case {
            name: "mean",
            run: |s| {
                let mut r = rng(s);
                let p = [uniform(&mut r, &[4, 2], -1.0, 1.0)];
                fd_error(&p, |p| p[0].mul(&p[0]).unwrap().mean())
            },
        },
        Case {
            name: "upsample_nearest",
            run: |s| {
                let mut r = rng(s);
                let f = r.random_range(1..4);
                let p = [uniform(&mut r, &[1, 2, 2, 3], -1.0, 1.0)];
                fd_error(&p, |p| project(&p[0].upsample_nearest(f).unwrap(), s))
            },
        },
        Case {
            name: "concat",
            run: |s| {
                let mut r = rng(s);
                let axis = r.random_range(0..2);
                let shape_b = if axis == 0 { [1, 3] } else { [2, 2] };
                let p = [uniform(&mut r, &[2, 3], -1.0, 1.0), uniform(&mut r, &shape_b, -1.0, 1.0)];
                let p = if axis == 0 { p } else { [uniform(&mut r, &[2, 3], -1.0, 1.0), p[1].clone()] };
                fd_error(&p, |p| project(&T::concat(&[&p[0], &p[1]], axis).unwrap(), s))
            },
        },
        Case {
            name: "reshape",
            run: |s| {
                let mut r = rng(s);
                let p = [uniform(&mut r, &[2, 6], -1.0, 1.0)];
                fd_error(&p, |p| project(&p[0].reshape(&[3, 4]).unwrap().sigmoid(), s))
            },
        },
        Case {
            name: "composed_graph",
            run: |s| {
                let mut r = rng(s);
                let p = [
                    uniform(&mut r, &[1, 2, 6, 6], -1.0, 1.0),
                    uniform(&mut r, &[3, 2, 3, 3], -0.5, 0.5),
                    uniform(&mut r, &[2, 3, 1, 1], -0.5, 0.5),
                ];
                fd_error(&p, |p| {
                    let h = p[0].conv2d(&p[1], None, Conv2dSpec::new(2, 1)).unwrap().sigmoid();
                    let logits = h.conv2d(&p[2], None, Conv2dSpec::default()).unwrap();
                    let probs = logits.softmax(1).unwrap().upsample_nearest(2).unwrap();
                    project(&probs.clamp(1e-7, 1.0).log(), s)
                })
            },
        },
    ]
}

pub fn loss_cases() -> Vec<Case> {
    vec![
        Case {
            name: "seg_ce",
            run: |s| {
                let mut r = rng(s);
                let c = r.random_range(2..6);
                let p = [uniform(&mut r, &[2, c, 3, 3], 0.05, 0.95)];
                let y = labels(&mut r, 18, c);
                fd_error(&p, |p| seg_ce(&p[0], &y, None).unwrap())
            },
        },
        Case {
            name: "seg_ce_weighted",
            run: |s| {
                let mut r = rng(s);
                let c = 4;
                let w = ClassBalanceWeights::new((0..c).map(|_| r.random_range(0.5..5.0)).collect()).unwrap();
                let p = [uniform(&mut r, &[1, c, 4, 2], -1.0, 1.0)];
                let y = labels(&mut r, 8, c);
                fd_error(&p, |p| seg_ce(&p[0].softmax(1).unwrap(), &y, Some(&w)).unwrap())
            },
        },
        Case {
            name: "adv_d_loss",
            run: |s| {
                let mut r = rng(s);
                let p = [
                    uniform(&mut r, &[2, 1, 3, 3], 0.05, 0.95),
                    uniform(&mut r, &[2, 1, 2, 2], 0.05, 0.95),
                    uniform(&mut r, &[2, 1, 3, 3], 0.05, 0.95),
                    uniform(&mut r, &[2, 1, 2, 2], 0.05, 0.95),
                ];
                fd_error(&p, |p| adv_d_loss(&p[..2], &p[2..]).unwrap())
            },
        },
        Case {
            name: "adv_g_loss",
            run: |s| {
                let mut r = rng(s);
                let p = [uniform(&mut r, &[1, 1, 4, 4], -3.0, 3.0), uniform(&mut r, &[1, 1, 2, 2], -3.0, 3.0)];
                fd_error(&p, |p| adv_g_loss(&[p[0].sigmoid(), p[1].sigmoid()]).unwrap())
            },
        },
        Case {
            name: "memory_reg_both",
            run: |s| {
                let mut r = rng(s);
                let c = r.random_range(2..5);
                let p = [softmax_probs(&mut r, &[2, c, 2, 3]), softmax_probs(&mut r, &[2, c, 2, 3])];
                fd_error(&p, |p| memory_reg(&p[0], &p[1], MrGradient::Both).unwrap())
            },
        },
        Case {
            name: "memory_reg_detached",
            run: |s| {
                // Each direction's teacher is frozen at its current value, so the
                // oracle differentiates a loss with the teachers held constant.
                let mut r = rng(s);
                let c = r.random_range(2..5);
                let p = [softmax_probs(&mut r, &[1, c, 3, 3]), softmax_probs(&mut r, &[1, c, 3, 3])];
                let (a0, q0) = (p[0].detach(), p[1].detach());
                let n = 9.0;
                let frozen = |p: &[T]| {
                    let x = a0.mul(&p[1].clamp(1e-7, 1.0).log()).unwrap().sum();
                    let y = q0.mul(&p[0].clamp(1e-7, 1.0).log()).unwrap().sum();
                    x.add(&y).unwrap().scale(-1.0 / n)
                };
                for t in &p {
                    t.clear_grad();
                }
                memory_reg(&p[0], &p[1], MrGradient::Detached).unwrap().backward().unwrap();
                let analytic: Vec<Vec<f64>> = p.iter().map(|t| t.grad().unwrap()).collect();
                let oracle = fd_error(&p, frozen);
                let via_oracle: Vec<Vec<f64>> = p.iter().map(|t| t.grad().unwrap()).collect();
                let gap: f64 = analytic
                    .iter()
                    .flatten()
                    .zip(via_oracle.iter().flatten())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                oracle.max(gap)
            },
        },
        Case {
            name: "memory_reg_composed",
            run: |s| {
                let mut r = rng(s);
                let p = [uniform(&mut r, &[1, 3, 2, 2], -2.0, 2.0), uniform(&mut r, &[1, 3, 2, 2], -2.0, 2.0)];
                fd_error(&p, |p| {
                    memory_reg(&p[0].softmax(1).unwrap(), &p[1].softmax(1).unwrap(), MrGradient::Both).unwrap()
                })
            },
        },
        Case {
            name: "stage1_total",
            run: |s| {
                let mut r = rng(s);
                let w = LossWeights {
                    aux_seg: 0.5,
                    adv_primary: r.random_range(0.0..1.0),
                    adv_aux: r.random_range(0.0..1.0),
                    lambda_mr: r.random_range(0.0..1.0),
                };
                let p = [uniform(&mut r, &[5], 0.1, 3.0)];
                fd_error(&p, |p| {
                    let part = |i: usize| p[0].mul(&onehot(5, i)).unwrap().sum().mul(&p[0].mul(&onehot(5, i)).unwrap().sum()).unwrap();
                    let parts = Stage1Parts {
                        seg_primary: part(0),
                        seg_aux: part(1),
                        adv_primary: part(2),
                        adv_aux: part(3),
                        mr: part(4),
                    };
                    stage1_total(&w, &parts).unwrap()
                })
            },
        },
        Case {
            name: "stage2_total",
            run: |s| {
                let mut r = rng(s);
                let w = LossWeights {
                    lambda_mr: r.random_range(0.0..1.0),
                    ..LossWeights::default()
                };
                let p = [uniform(&mut r, &[3], 0.1, 3.0)];
                fd_error(&p, |p| {
                    let part = |i: usize| p[0].mul(&onehot(3, i)).unwrap().sum().log();
                    let parts = Stage2Parts {
                        pseg_primary: part(0),
                        pseg_aux: part(1),
                        mr: part(2),
                    };
                    stage2_total(&w, &parts).unwrap()
                })
            },
        },
    ]
}

fn onehot(n: usize, i: usize) -> T {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    T::from_vec(v, &[n]).unwrap()
}

/// Worst relative error of a case over the standard instance count.
pub fn worst_error(case: &Case) -> f64 {
    (0..INSTANCES).map(|i| (case.run)(1000 + i)).fold(0.0, f64::max)
}
