//! Finite-difference validation of backward rules.
//!
//! Central differences are the oracle: for a scalar loss built from a single
//! parameter tensor, the backprop gradient must agree coordinate-wise with
//! `(f(x+h) - f(x-h)) / 2h`. Suites below cover every op family, including
//! composites (attention, MLP, normalized contrastive logits), with randomized
//! instances so a broken rule cannot hide behind one lucky input.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Result, Tensor};

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Worst-coordinate comparison between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= tol
    }
}

/// Relative error with a unit floor so near-zero gradients compare absolutely.
pub fn compare_grads(analytic: &[f64], numeric: &[f64]) -> GradReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
        if !rel.is_finite() || rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    GradReport {
        max_rel_err,
        worst_index,
        analytic: analytic.to_vec(),
        numeric: numeric.to_vec(),
    }
}

/// Central finite differences of `loss` at `x0`.
pub fn finite_diff(loss: &dyn Fn(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; x0.len()];
    for i in 0..x0.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = loss(&x);
        x[i] = orig - h;
        let down = loss(&x);
        x[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Check one loss builder at one point. The builder is re-run for every
/// perturbed input, so the graph is rebuilt from scratch each evaluation.
pub fn check_loss(
    build: &dyn Fn(&Tensor) -> Result<Tensor>,
    x0: &[f64],
    shape: &[usize],
    h: f64,
) -> Result<GradReport> {
    let param = Tensor::param(x0.to_vec(), shape)?;
    let loss = build(&param)?;
    loss.backward()?;
    let analytic = param.grad().unwrap_or_else(|| vec![0.0; param.len()]);

    let shape_owned = shape.to_vec();
    let eval = |x: &[f64]| -> f64 {
        let p = Tensor::param(x.to_vec(), &shape_owned).expect("shape fixed");
        build(&p).expect("builder valid for perturbed input").value()
    };
    let numeric = finite_diff(&eval, x0, h);
    Ok(compare_grads(&analytic, &numeric))
}

type LossBuilder = Box<dyn Fn(&Tensor) -> Result<Tensor>>;

/// One randomized check: a starting point and the loss to differentiate.
pub struct Instance {
    pub x0: Vec<f64>,
    pub shape: Vec<usize>,
    pub loss: LossBuilder,
}

/// A named family of randomized instances.
pub struct Suite {
    pub name: &'static str,
    gen: Box<dyn Fn(&mut ChaCha8Rng) -> Instance>,
}

impl Suite {
    pub fn instance(&self, rng: &mut ChaCha8Rng) -> Instance {
        (self.gen)(rng)
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Samples with a margin away from zero, for kinked ops (relu, l1).
fn randn_margin(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<f64> {
    randn(rng, n)
        .into_iter()
        .map(|v| if v.abs() < margin { v + margin.copysign(if v >= 0.0 { 1.0 } else { -1.0 }) } else { v })
        .collect()
}

fn const_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(randn(rng, n), shape).expect("consistent by construction")
}

fn sum_sq(t: &Tensor) -> Tensor {
    t.mul(t).expect("same tensor").sum()
}

/// The standard battery: one suite per op family plus composites.
pub fn standard_suites() -> Vec<Suite> {
    let mut suites: Vec<Suite> = Vec::new();

    suites.push(Suite {
        name: "elementwise_chain",
        gen: Box::new(|rng| {
            let c = const_t(rng, &[6]);
            Instance {
                x0: randn(rng, 6),
                shape: vec![6],
                loss: Box::new(move |x| {
                    let y = x.mul(x)?.add(&x.scale(2.0))?.sub(&c)?;
                    Ok(sum_sq(&y))
                }),
            }
        }),
    });

    suites.push(Suite {
        name: "scalar_ops",
        gen: Box::new(|rng| Instance {
            x0: randn(rng, 5),
            shape: vec![5],
            loss: Box::new(|x| Ok(sum_sq(&x.scale(-1.7).add_scalar(0.3).neg()))),
        }),
    });

    suites.push(Suite {
        name: "matmul",
        gen: Box::new(|rng| {
            let w = const_t(rng, &[4, 5]);
            Instance {
                x0: randn(rng, 12),
                shape: vec![3, 4],
                loss: Box::new(move |x| Ok(sum_sq(&x.matmul(&w)?))),
            }
        }),
    });

    suites.push(Suite {
        name: "matmul_t",
        gen: Box::new(|rng| {
            let w = const_t(rng, &[5, 4]);
            Instance {
                x0: randn(rng, 12),
                shape: vec![3, 4],
                loss: Box::new(move |x| Ok(sum_sq(&x.matmul_t(&w)?))),
            }
        }),
    });

    suites.push(Suite {
        name: "matmul_both_sides",
        gen: Box::new(|rng| Instance {
            x0: randn(rng, 9),
            shape: vec![3, 3],
            loss: Box::new(|x| Ok(sum_sq(&x.matmul(x)?))),
        }),
    });

    suites.push(Suite {
        name: "transpose_reshape",
        gen: Box::new(|rng| {
            let c = const_t(rng, &[2, 6]);
            Instance {
                x0: randn(rng, 12),
                shape: vec![3, 4],
                loss: Box::new(move |x| {
                    let y = x.transpose()?.reshape(&[2, 6])?.mul(&c)?;
                    Ok(sum_sq(&y))
                }),
            }
        }),
    });

    suites.push(Suite {
        name: "concat_gather_narrow",
        gen: Box::new(|rng| {
            let order: Vec<usize> = (0..6).map(|_| rng.gen_range(0..6)).collect();
            Instance {
                x0: randn(rng, 12),
                shape: vec![3, 4],
                loss: Box::new(move |x| {
                    let cat = Tensor::concat_rows(&[x.clone(), x.clone()])?;
                    let picked = cat.gather_rows(&order)?;
                    let sliced = picked.narrow_rows(1, 4)?;
                    Ok(sum_sq(&sliced))
                }),
            }
        }),
    });

    suites.push(Suite {
        name: "concat_cols",
        gen: Box::new(|rng| {
            let c = const_t(rng, &[3, 2]);
            Instance {
                x0: randn(rng, 9),
                shape: vec![3, 3],
                loss: Box::new(move |x| {
                    let cat = Tensor::concat_cols(&[c.clone(), x.clone(), x.clone()])?;
                    Ok(sum_sq(&cat))
                }),
            }
        }),
    });

    suites.push(Suite {
        name: "narrow_cols",
        gen: Box::new(|rng| {
            let start = rng.gen_range(0..3);
            let c = const_t(rng, &[3, 2]);
            Instance {
                x0: randn(rng, 12),
                shape: vec![3, 4],
                loss: Box::new(move |x| {
                    let y = x.narrow_cols(start, 2)?.mul(&c)?;
                    Ok(sum_sq(&y))
                }),
            }
        }),
    });

    suites.push(Suite {
        name: "reductions",
        gen: Box::new(|rng| {
            let v = const_t(rng, &[3]);
            Instance {
                x0: randn(rng, 12),
                shape: vec![4, 3],
                loss: Box::new(move |x| {
                    let pooled = x.mean_rows()?.mul(&v)?.sum();
                    let total = x.sum().scale(0.25).add(&x.mean().scale(1.5))?;
                    pooled.add(&sum_sq(&total))
                }),
            }
        }),
    });

    suites.push(Suite {
        name: "rowwise_dot",
        gen: Box::new(|rng| {
            let c = const_t(rng, &[4, 3]);
            Instance {
                x0: randn(rng, 12),
                shape: vec![4, 3],
                loss: Box::new(move |x| {
                    let self_dot = x.rowwise_dot(x)?.sum();
                    let cross = x.rowwise_dot(&c)?;
                    sum_sq(&cross).add(&self_dot)
                }),
            }
        }),
    });

    suites.push(Suite {
        name: "relu",
        gen: Box::new(|rng| Instance {
            x0: randn_margin(rng, 8, 0.05),
            shape: vec![8],
            loss: Box::new(|x| Ok(sum_sq(&x.relu()))),
        }),
    });

    suites.push(Suite {
        name: "gelu",
        gen: Box::new(|rng| {
            let c = const_t(rng, &[8]);
            Instance {
                x0: randn(rng, 8),
                shape: vec![8],
                loss: Box::new(move |x| x.gelu().mul(&c).map(|y| y.sum())),
            }
        }),
    });

    suites.push(Suite {
        name: "softmax",
        gen: Box::new(|rng| {
            let c = const_t(rng, &[3, 5]);
            Instance {
                x0: randn(rng, 15),
                shape: vec![3, 5],
                loss: Box::new(move |x| x.softmax_rows()?.mul(&c).map(|y| y.sum())),
            }
        }),
    });

    suites.push(Suite {
        name: "logsumexp",
        gen: Box::new(|rng| {
            let v = const_t(rng, &[3]);
            Instance {
                x0: randn(rng, 15),
                shape: vec![3, 5],
                loss: Box::new(move |x| x.logsumexp_rows()?.mul(&v).map(|y| y.sum())),
            }
        }),
    });

    suites.push(Suite {
        name: "layer_norm_input",
        gen: Box::new(|rng| {
            let gamma = const_t(rng, &[5]);
            let beta = const_t(rng, &[5]);
            Instance {
                x0: randn(rng, 15),
                shape: vec![3, 5],
                loss: Box::new(move |x| Ok(sum_sq(&x.layer_norm(&gamma, &beta, 1e-5)?))),
            }
        }),
    });

    suites.push(Suite {
        name: "layer_norm_gamma",
        gen: Box::new(|rng| {
            let x = const_t(rng, &[3, 5]);
            let beta = const_t(rng, &[5]);
            Instance {
                x0: randn(rng, 5),
                shape: vec![5],
                loss: Box::new(move |gamma| Ok(sum_sq(&x.layer_norm(gamma, &beta, 1e-5)?))),
            }
        }),
    });

    suites.push(Suite {
        name: "layer_norm_beta",
        gen: Box::new(|rng| {
            let x = const_t(rng, &[3, 5]);
            let gamma = const_t(rng, &[5]);
            Instance {
                x0: randn(rng, 5),
                shape: vec![5],
                loss: Box::new(move |beta| Ok(sum_sq(&x.layer_norm(&gamma, beta, 1e-5)?))),
            }
        }),
    });

    suites.push(Suite {
        name: "l2_normalize",
        gen: Box::new(|rng| {
            let c = const_t(rng, &[3, 4]);
            // keep row norms comfortably away from the eps clamp
            let x0: Vec<f64> = randn(rng, 12).into_iter().map(|v| v + 0.5_f64.copysign(v)).collect();
            Instance {
                x0,
                shape: vec![3, 4],
                loss: Box::new(move |x| x.l2_normalize_rows(1e-12)?.mul(&c).map(|y| y.sum())),
            }
        }),
    });

    suites.push(Suite {
        name: "add_row_input",
        gen: Box::new(|rng| {
            let bias = const_t(rng, &[3]);
            Instance {
                x0: randn(rng, 12),
                shape: vec![4, 3],
                loss: Box::new(move |x| Ok(sum_sq(&x.add_row(&bias)?))),
            }
        }),
    });

    suites.push(Suite {
        name: "add_row_bias",
        gen: Box::new(|rng| {
            let x = const_t(rng, &[4, 3]);
            Instance {
                x0: randn(rng, 3),
                shape: vec![3],
                loss: Box::new(move |bias| Ok(sum_sq(&x.add_row(bias)?))),
            }
        }),
    });

    suites.push(Suite {
        name: "l1_loss",
        gen: Box::new(|rng| {
            let target = const_t(rng, &[8]);
            // keep |x - target| away from the kink
            let x0: Vec<f64> = target
                .to_vec()
                .iter()
                .map(|&t| t + 0.3_f64.copysign(randn(rng, 1)[0]) + 0.2 * randn(rng, 1)[0].clamp(-0.4, 0.4))
                .collect();
            Instance {
                x0,
                shape: vec![8],
                loss: Box::new(move |x| x.l1_loss(&target)),
            }
        }),
    });

    suites.push(Suite {
        name: "kl_div_onehot",
        gen: Box::new(|rng| {
            let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..7)).collect();
            Instance {
                x0: randn(rng, 28),
                shape: vec![4, 7],
                loss: Box::new(move |x| x.kl_div_onehot(&targets)),
            }
        }),
    });

    suites.push(Suite {
        name: "attention_composite",
        gen: Box::new(|rng| {
            let wq = const_t(rng, &[6, 4]);
            let wk = const_t(rng, &[6, 4]);
            let wv = const_t(rng, &[6, 4]);
            Instance {
                x0: randn(rng, 24),
                shape: vec![4, 6],
                loss: Box::new(move |x| {
                    let q = x.matmul(&wq)?;
                    let k = x.matmul(&wk)?;
                    let v = x.matmul(&wv)?;
                    let scores = q.matmul_t(&k)?.scale(1.0 / 2.0);
                    let attn = scores.softmax_rows()?;
                    Ok(sum_sq(&attn.matmul(&v)?))
                }),
            }
        }),
    });

    suites.push(Suite {
        name: "mlp_layernorm_composite",
        gen: Box::new(|rng| {
            let gamma = const_t(rng, &[5]);
            let beta = const_t(rng, &[5]);
            let w1 = const_t(rng, &[5, 8]);
            let b1 = const_t(rng, &[8]);
            let w2 = const_t(rng, &[8, 5]);
            let b2 = const_t(rng, &[5]);
            Instance {
                x0: randn(rng, 15),
                shape: vec![3, 5],
                loss: Box::new(move |x| {
                    let h = x
                        .layer_norm(&gamma, &beta, 1e-5)?
                        .matmul(&w1)?
                        .add_row(&b1)?
                        .gelu()
                        .matmul(&w2)?
                        .add_row(&b2)?;
                    Ok(sum_sq(&h.add(x)?))
                }),
            }
        }),
    });

    suites.push(Suite {
        name: "contrastive_composite",
        gen: Box::new(|rng| {
            let w = const_t(rng, &[6, 4]);
            let keys = const_t(rng, &[5, 4]).l2_normalize_rows(1e-12).expect("2-D").detach();
            let targets: Vec<usize> = (0..3).map(|_| rng.gen_range(0..5)).collect();
            Instance {
                x0: randn(rng, 18),
                shape: vec![3, 6],
                loss: Box::new(move |x| {
                    let q = x.matmul(&w)?.l2_normalize_rows(1e-12)?;
                    let logits = q.matmul_t(&keys)?.scale(5.0);
                    logits.kl_div_onehot(&targets)
                }),
            }
        }),
    });

    suites
}

/// Run every standard suite with `instances` random draws each.
pub fn run_standard_suites(instances: usize, h: f64, seed: u64) -> Result<Vec<SuiteReport>> {
    let mut reports = Vec::new();
    for (si, suite) in standard_suites().iter().enumerate() {
        let mut worst: f64 = 0.0;
        for inst_idx in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (si as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (inst_idx as u64) << 32,
            );
            let inst = suite.instance(&mut rng);
            let report = check_loss(&inst.loss, &inst.x0, &inst.shape, h)?;
            worst = worst.max(report.max_rel_err);
        }
        reports.push(SuiteReport {
            name: suite.name,
            instances,
            max_rel_err: worst,
        });
    }
    Ok(reports)
}
