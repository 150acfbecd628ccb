//! Central finite-difference oracle for tape gradients.
//!
//! [`grad_check`] rebuilds the forward pass from scratch for every perturbed
//! entry, so it is independent of the backward implementation it verifies.
//! Failures are reported, never raised: callers decide what a red entry means.

use crate::error::Result;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Below this magnitude on both sides, absolute error replaces relative error.
pub const SMALL_GRAD: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: String,
    /// Worst error over the parameter's entries (relative, or absolute when
    /// both gradients are below [`SMALL_GRAD`]).
    pub max_err: f64,
    /// True when the worst entry was judged on the absolute branch.
    pub absolute_branch: bool,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_err).fold(0.0, f64::max)
    }
}

/// Compares tape gradients of `f` against central finite differences,
/// entry by entry, for every named parameter.
///
/// `f` receives a fresh tape plus one leaf per parameter (same order as
/// `params`) and must return a scalar root. It is invoked once for the
/// backward pass and twice per parameter entry for the differences, so it
/// must be a pure function of the leaf values.
pub fn grad_check<F>(f: F, params: &[(String, Tensor)], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&mut tape, &leaves)?;
        tape.value(root).scalar_value()
    };

    // Analytic gradients from one backward pass.
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &leaves)?;
    let gm = tape.backward(root)?;

    let base: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut entries = Vec::with_capacity(params.len());
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let zero = Tensor::zeros(tensor.shape());
        let analytic = gm.get(leaves[pi]).unwrap_or(&zero);
        let mut max_err = -1.0;
        let mut absolute_branch = false;
        for ei in 0..tensor.numel() {
            let mut plus = base.clone();
            plus[pi].data_mut()[ei] += h;
            let mut minus = base.clone();
            minus[pi].data_mut()[ei] -= h;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let ad = analytic.data()[ei];
            let (err, absolute) = if ad.abs() < SMALL_GRAD && fd.abs() < SMALL_GRAD {
                ((ad - fd).abs(), true)
            } else {
                ((ad - fd).abs() / ad.abs().max(fd.abs()), false)
            };
            if err > max_err {
                max_err = err;
                absolute_branch = absolute;
            }
        }
        let max_err = max_err.max(0.0);
        entries.push(GradCheckEntry {
            param: name.clone(),
            max_err,
            absolute_branch,
            passed: max_err < tol,
        });
    }
    Ok(GradCheckReport { entries })
}

// ---------------------------------------------------------------------------
// The full oracle suite: every primitive op plus every composite loss, each
// over many random seeded instances.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SuiteCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_err: f64,
    pub tol: f64,
    pub passed: bool,
}

type BoxedLoss = Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>;
type Instance = (Vec<(String, Tensor)>, BoxedLoss);

fn run_check<F>(
    name: &'static str,
    instances: usize,
    h: f64,
    tol: f64,
    base_seed: u64,
    make: F,
) -> Result<SuiteCheck>
where
    F: Fn(u64) -> Result<Instance>,
{
    let mut max_err = 0.0f64;
    let mut passed = true;
    for i in 0..instances {
        let (params, f) = make(base_seed ^ (i as u64).wrapping_mul(0x9E37_79B9))?;
        let report = grad_check(|tape, leaves| f(tape, leaves), &params, h, tol)?;
        max_err = max_err.max(report.max_err());
        passed &= report.passed();
    }
    Ok(SuiteCheck {
        name,
        instances,
        max_err,
        tol,
        passed,
    })
}

fn rand_tensor(rng: &mut crate::rng::Rng, shape: &[usize]) -> Tensor {
    let data = (0..shape.iter().product()).map(|_| rng.normal()).collect();
    Tensor::raw(shape.to_vec(), data)
}

fn rand_positive(rng: &mut crate::rng::Rng, shape: &[usize]) -> Tensor {
    let data = (0..shape.iter().product())
        .map(|_| rng.uniform(0.5, 2.0))
        .collect();
    Tensor::raw(shape.to_vec(), data)
}

/// `sum(x ⊙ w)` with a fixed random weighting, so reductions have
/// non-degenerate gradients.
fn weighted_sum(tape: &mut Tape, x: NodeId, weights: &Tensor) -> Result<NodeId> {
    let w = tape.leaf(weights.clone());
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}

/// Runs the whole gradient oracle: one check per primitive op and per
/// composite objective, each over `instances` random seeded instances.
pub fn full_suite(instances: usize, h: f64, tol: f64, base_seed: u64) -> Result<Vec<SuiteCheck>> {
    use crate::adr::{build_step3_graph, TwinMasks};
    use crate::ganssl::{build_critic_graph, build_generator_graph, GanConfig, GanCriticMasks};
    use crate::losses::{cross_entropy, entropy_per_sample, sensitivity, EntropyTermVariant};
    use crate::nn::{sample_masks, Binding, DropoutMask, Model, MlpSpec};
    use crate::rng::Rng;

    let mut checks = Vec::new();

    checks.push(run_check("matmul", instances, h, tol, base_seed, |seed| {
        let mut rng = Rng::new(seed);
        let (m, k) = (2 + rng.index(3), 2 + rng.index(3));
        let n = 2 + rng.index(3);
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        let w = rand_tensor(&mut rng, &[m, n]);
        Ok((
            vec![("a".into(), a), ("b".into(), b)],
            Box::new(move |tape, leaves| {
                let prod = tape.matmul(leaves[0], leaves[1])?;
                weighted_sum(tape, prod, &w)
            }),
        ))
    })?);

    checks.push(run_check("add", instances, h, tol, base_seed, |seed| {
        let mut rng = Rng::new(seed);
        let (m, n) = (2 + rng.index(3), 2 + rng.index(3));
        let a = rand_tensor(&mut rng, &[m, n]);
        let b = rand_tensor(&mut rng, &[m, n]);
        let w = rand_tensor(&mut rng, &[m, n]);
        Ok((
            vec![("a".into(), a), ("b".into(), b)],
            Box::new(move |tape, leaves| {
                let s = tape.add(leaves[0], leaves[1])?;
                weighted_sum(tape, s, &w)
            }),
        ))
    })?);

    checks.push(run_check("add_bias", instances, h, tol, base_seed, |seed| {
        let mut rng = Rng::new(seed);
        let (m, n) = (2 + rng.index(3), 2 + rng.index(3));
        let a = rand_tensor(&mut rng, &[m, n]);
        let bias = rand_tensor(&mut rng, &[n]);
        let w = rand_tensor(&mut rng, &[m, n]);
        Ok((
            vec![("a".into(), a), ("bias".into(), bias)],
            Box::new(move |tape, leaves| {
                let s = tape.add_bias(leaves[0], leaves[1])?;
                weighted_sum(tape, s, &w)
            }),
        ))
    })?);

    checks.push(run_check("sub", instances, h, tol, base_seed, |seed| {
        let mut rng = Rng::new(seed);
        let (m, n) = (2 + rng.index(3), 2 + rng.index(3));
        let a = rand_tensor(&mut rng, &[m, n]);
        let b = rand_tensor(&mut rng, &[m, n]);
        let w = rand_tensor(&mut rng, &[m, n]);
        Ok((
            vec![("a".into(), a), ("b".into(), b)],
            Box::new(move |tape, leaves| {
                let s = tape.sub(leaves[0], leaves[1])?;
                weighted_sum(tape, s, &w)
            }),
        ))
    })?);

    checks.push(run_check("mul", instances, h, tol, base_seed, |seed| {
        let mut rng = Rng::new(seed);
        let (m, n) = (2 + rng.index(3), 2 + rng.index(3));
        let a = rand_tensor(&mut rng, &[m, n]);
        let b = rand_tensor(&mut rng, &[m, n]);
        let w = rand_tensor(&mut rng, &[m, n]);
        Ok((
            vec![("a".into(), a), ("b".into(), b)],
            Box::new(move |tape, leaves| {
                let s = tape.mul(leaves[0], leaves[1])?;
                weighted_sum(tape, s, &w)
            }),
        ))
    })?);

    checks.push(run_check("scalar_mul", instances, h, tol, base_seed, |seed| {
        let mut rng = Rng::new(seed);
        let (m, n) = (2 + rng.index(3), 2 + rng.index(3));
        let a = rand_tensor(&mut rng, &[m, n]);
        let factor = rng.uniform(-2.0, 2.0);
        let w = rand_tensor(&mut rng, &[m, n]);
        Ok((
            vec![("a".into(), a)],
            Box::new(move |tape, leaves| {
                let s = tape.scalar_mul(leaves[0], factor);
                weighted_sum(tape, s, &w)
            }),
        ))
    })?);

    checks.push(run_check("relu", instances, h, tol, base_seed, |seed| {
        let mut rng = Rng::new(seed);
        let (m, n) = (2 + rng.index(3), 2 + rng.index(3));
        let a = rand_tensor(&mut rng, &[m, n]);
        let w = rand_tensor(&mut rng, &[m, n]);
        Ok((
            vec![("a".into(), a)],
            Box::new(move |tape, leaves| {
                let s = tape.relu(leaves[0]);
                weighted_sum(tape, s, &w)
            }),
        ))
    })?);

    checks.push(run_check("softmax", instances, h, tol, base_seed, |seed| {
        let mut rng = Rng::new(seed);
        let (m, k) = (2 + rng.index(3), 2 + rng.index(3));
        let logits = rand_tensor(&mut rng, &[m, k]);
        let w = rand_tensor(&mut rng, &[m, k]);
        Ok((
            vec![("logits".into(), logits)],
            Box::new(move |tape, leaves| {
                let s = tape.softmax(leaves[0])?;
                weighted_sum(tape, s, &w)
            }),
        ))
    })?);

    checks.push(run_check("log", instances, h, tol, base_seed, |seed| {
        let mut rng = Rng::new(seed);
        let (m, n) = (2 + rng.index(3), 2 + rng.index(3));
        let a = rand_positive(&mut rng, &[m, n]);
        let w = rand_tensor(&mut rng, &[m, n]);
        Ok((
            vec![("a".into(), a)],
            Box::new(move |tape, leaves| {
                let s = tape.log(leaves[0]);
                weighted_sum(tape, s, &w)
            }),
        ))
    })?);

    checks.push(run_check("exp", instances, h, tol, base_seed, |seed| {
        let mut rng = Rng::new(seed);
        let (m, n) = (2 + rng.index(3), 2 + rng.index(3));
        let a = rand_tensor(&mut rng, &[m, n]);
        let w = rand_tensor(&mut rng, &[m, n]);
        Ok((
            vec![("a".into(), a)],
            Box::new(move |tape, leaves| {
                let s = tape.exp(leaves[0]);
                weighted_sum(tape, s, &w)
            }),
        ))
    })?);

    checks.push(run_check("square", instances, h, tol, base_seed, |seed| {
        let mut rng = Rng::new(seed);
        let (m, n) = (2 + rng.index(3), 2 + rng.index(3));
        let a = rand_tensor(&mut rng, &[m, n]);
        let w = rand_tensor(&mut rng, &[m, n]);
        Ok((
            vec![("a".into(), a)],
            Box::new(move |tape, leaves| {
                let s = tape.square(leaves[0]);
                weighted_sum(tape, s, &w)
            }),
        ))
    })?);

    checks.push(run_check("sum", instances, h, tol, base_seed, |seed| {
        let mut rng = Rng::new(seed);
        let (m, n) = (2 + rng.index(3), 2 + rng.index(3));
        let a = rand_tensor(&mut rng, &[m, n]);
        Ok((
            vec![("a".into(), a)],
            Box::new(move |tape, leaves| Ok(tape.sum(leaves[0]))),
        ))
    })?);

    checks.push(run_check("mean", instances, h, tol, base_seed, |seed| {
        let mut rng = Rng::new(seed);
        let (m, n) = (2 + rng.index(3), 2 + rng.index(3));
        let a = rand_tensor(&mut rng, &[m, n]);
        Ok((
            vec![("a".into(), a)],
            Box::new(move |tape, leaves| Ok(tape.mean(leaves[0]))),
        ))
    })?);

    checks.push(run_check("dropout", instances, h, tol, base_seed, |seed| {
        let mut rng = Rng::new(seed);
        let (m, n) = (2 + rng.index(3), 2 + rng.index(3));
        let a = rand_tensor(&mut rng, &[m, n]);
        let mask = DropoutMask::sample(&mut rng, m, n, 0.7);
        let w = rand_tensor(&mut rng, &[m, n]);
        Ok((
            vec![("a".into(), a)],
            Box::new(move |tape, leaves| {
                let s = tape.dropout(leaves[0], &mask, 0.3)?;
                weighted_sum(tape, s, &w)
            }),
        ))
    })?);

    checks.push(run_check(
        "batchnorm_train",
        instances,
        h,
        tol,
        base_seed,
        |seed| {
            let mut rng = Rng::new(seed);
            let (n, d) = (3 + rng.index(3), 2 + rng.index(3));
            let x = rand_tensor(&mut rng, &[n, d]);
            let gamma = rand_positive(&mut rng, &[d]);
            let beta = rand_tensor(&mut rng, &[d]);
            let w = rand_tensor(&mut rng, &[n, d]);
            Ok((
                vec![
                    ("x".into(), x),
                    ("gamma".into(), gamma),
                    ("beta".into(), beta),
                ],
                Box::new(move |tape, leaves| {
                    let d = tape.value(leaves[1]).numel();
                    let mut rm = Tensor::zeros(&[d]);
                    let mut rv = Tensor::ones(&[d]);
                    let s = tape.batchnorm(
                        leaves[0], leaves[1], leaves[2], &mut rm, &mut rv, 0.1, 1e-5, true,
                    )?;
                    weighted_sum(tape, s, &w)
                }),
            ))
        },
    )?);

    checks.push(run_check(
        "batchnorm_eval",
        instances,
        h,
        tol,
        base_seed,
        |seed| {
            let mut rng = Rng::new(seed);
            let (n, d) = (3 + rng.index(3), 2 + rng.index(3));
            let x = rand_tensor(&mut rng, &[n, d]);
            let gamma = rand_positive(&mut rng, &[d]);
            let beta = rand_tensor(&mut rng, &[d]);
            let rm = rand_tensor(&mut rng, &[d]);
            let rv = rand_positive(&mut rng, &[d]);
            let w = rand_tensor(&mut rng, &[n, d]);
            Ok((
                vec![
                    ("x".into(), x),
                    ("gamma".into(), gamma),
                    ("beta".into(), beta),
                ],
                Box::new(move |tape, leaves| {
                    let mut rm = rm.clone();
                    let mut rv = rv.clone();
                    let s = tape.batchnorm(
                        leaves[0], leaves[1], leaves[2], &mut rm, &mut rv, 0.1, 1e-5, false,
                    )?;
                    weighted_sum(tape, s, &w)
                }),
            ))
        },
    )?);

    checks.push(run_check(
        "eq1_sensitivity",
        instances,
        h,
        tol,
        base_seed,
        |seed| {
            let mut rng = Rng::new(seed);
            let (n, k) = (2 + rng.index(3), 2 + rng.index(3));
            let la = rand_tensor(&mut rng, &[n, k]);
            let lb = rand_tensor(&mut rng, &[n, k]);
            Ok((
                vec![("logits_a".into(), la), ("logits_b".into(), lb)],
                Box::new(move |tape, leaves| {
                    let pa = tape.softmax(leaves[0])?;
                    let pb = tape.softmax(leaves[1])?;
                    sensitivity(tape, pa, pb)
                }),
            ))
        },
    )?);

    checks.push(run_check(
        "eq2_cross_entropy",
        instances,
        h,
        tol,
        base_seed,
        |seed| {
            let mut rng = Rng::new(seed);
            let (n, k) = (2 + rng.index(3), 2 + rng.index(3));
            let logits = rand_tensor(&mut rng, &[n, k]);
            let labels: Vec<usize> = (0..n).map(|_| rng.index(k)).collect();
            Ok((
                vec![("logits".into(), logits)],
                Box::new(move |tape, leaves| {
                    let p = tape.softmax(leaves[0])?;
                    cross_entropy(tape, p, &labels)
                }),
            ))
        },
    )?);

    checks.push(run_check(
        "entropy_per_sample",
        instances,
        h,
        tol,
        base_seed,
        |seed| {
            let mut rng = Rng::new(seed);
            let (n, k) = (2 + rng.index(3), 2 + rng.index(3));
            let logits = rand_tensor(&mut rng, &[n, k]);
            Ok((
                vec![("logits".into(), logits)],
                Box::new(move |tape, leaves| {
                    let p = tape.softmax(leaves[0])?;
                    entropy_per_sample(tape, p)
                }),
            ))
        },
    )?);

    // Composite objectives over the same graph builders the training steps
    // use, with full MLPs behind them. Freshly initialized nets have
    // zero biases and betas, which can chain relu-dead rows into inputs
    // sitting exactly on the relu kink where central differences see half
    // slopes; jittering every parameter moves the probe to a generic point.
    let jitter = |model: &mut Model, rng: &mut Rng| {
        let names: Vec<String> = model.params.names().map(String::from).collect();
        for name in names {
            let jittered = {
                let t = model.params.get(&name).unwrap();
                let data = t.data().iter().map(|v| v + rng.uniform(-0.2, 0.2)).collect();
                Tensor::raw(t.shape().to_vec(), data)
            };
            model.params.set(&name, jittered).expect("same shape");
        }
    };
    let model_params = |model: &Model, prefix: &str| -> Vec<(String, Tensor)> {
        model
            .params
            .iter()
            .map(|(name, t)| (format!("{prefix}.{name}"), t.clone()))
            .collect()
    };
    let binding_for = |model: &Model, leaves: &[NodeId], offset: usize| -> Binding {
        Binding::from_pairs(
            model
                .params
                .names()
                .enumerate()
                .map(|(i, name)| (name.to_string(), leaves[offset + i])),
        )
    };

    checks.push(run_check(
        "eq5_step3_objective",
        instances,
        h,
        tol,
        base_seed,
        |seed| {
            let mut rng = Rng::new(seed);
            let mut g = Model::init(MlpSpec::feature_stack(&[2, 4, 3])?, &mut rng);
            let mut c = Model::init(MlpSpec::classifier_stack(&[3, 4, 2], true)?, &mut rng);
            jitter(&mut g, &mut rng);
            jitter(&mut c, &mut rng);
            let batch = 3;
            let x_t = rand_tensor(&mut rng, &[batch, 2]);
            let twins = TwinMasks::sample(&mut rng, &c.spec, 0.5, batch);
            let mut params = model_params(&g, "g");
            params.extend(model_params(&c, "c"));
            let g_count = g.params.len();
            Ok((
                params,
                Box::new(move |tape, leaves| {
                    let mut g = g.clone();
                    let mut c = c.clone();
                    let gb = binding_for(&g, leaves, 0);
                    let cb = binding_for(&c, leaves, g_count);
                    let (root, _) = build_step3_graph(
                        tape,
                        &mut g,
                        &mut c,
                        &gb,
                        &cb,
                        &x_t,
                        &twins,
                        0.5,
                        EntropyTermVariant::Marginal,
                    )?;
                    Ok(root)
                }),
            ))
        },
    )?);

    checks.push(run_check(
        "eq6_critic_objective",
        instances,
        h,
        tol,
        base_seed,
        |seed| {
            let mut rng = Rng::new(seed);
            let cfg = GanConfig {
                dropout_rate: 0.4,
                critic_hidden: vec![4],
                n_classes: 3,
                feature_layer: 0,
                ..GanConfig::default()
            };
            let mut critic = Model::init(cfg.critic_spec()?, &mut rng);
            jitter(&mut critic, &mut rng);
            let batch = 3;
            let x_l = rand_tensor(&mut rng, &[batch, 2]);
            let labels: Vec<usize> = (0..batch).map(|_| rng.index(3)).collect();
            let x_u = rand_tensor(&mut rng, &[batch, 2]);
            let x_g = rand_tensor(&mut rng, &[batch, 2]);
            let masks = GanCriticMasks {
                labeled: sample_masks(&mut rng, &critic.spec, 0.4, batch),
                unlabeled: Some(TwinMasks::sample(&mut rng, &critic.spec, 0.4, batch)),
                fake: Some(TwinMasks::sample(&mut rng, &critic.spec, 0.4, batch)),
            };
            let params = model_params(&critic, "critic");
            Ok((
                params,
                Box::new(move |tape, leaves| {
                    let mut critic = critic.clone();
                    let cb = binding_for(&critic, leaves, 0);
                    let (root, _) = build_critic_graph(
                        tape, &mut critic, &cb, &x_l, &labels, &x_u, &x_g, &masks, &cfg,
                    )?;
                    Ok(root)
                }),
            ))
        },
    )?);

    checks.push(run_check(
        "eq9_generator_objective",
        instances,
        h,
        tol,
        base_seed,
        |seed| {
            let mut rng = Rng::new(seed);
            let cfg = GanConfig {
                dropout_rate: 0.4,
                z_dim: 4,
                generator_hidden: vec![5],
                critic_hidden: vec![4],
                n_classes: 3,
                feature_layer: 0,
                ..GanConfig::default()
            };
            let mut generator = Model::init(cfg.generator_spec()?, &mut rng);
            let mut critic = Model::init(cfg.critic_spec()?, &mut rng);
            jitter(&mut generator, &mut rng);
            jitter(&mut critic, &mut rng);
            let batch = 3;
            let z = rand_tensor(&mut rng, &[batch, 4]);
            let x_u = rand_tensor(&mut rng, &[batch, 2]);
            let twins = TwinMasks::sample(&mut rng, &critic.spec, 0.4, batch);
            let mut params = model_params(&generator, "gen");
            params.extend(model_params(&critic, "critic"));
            let gen_count = generator.params.len();
            Ok((
                params,
                Box::new(move |tape, leaves| {
                    let mut generator = generator.clone();
                    let mut critic = critic.clone();
                    let gb = binding_for(&generator, leaves, 0);
                    let cb = binding_for(&critic, leaves, gen_count);
                    let (root, _) = build_generator_graph(
                        tape,
                        &mut generator,
                        &mut critic,
                        &gb,
                        &cb,
                        &z,
                        &x_u,
                        Some(&twins),
                        &cfg,
                    )?;
                    Ok(root)
                }),
            ))
        },
    )?);

    Ok(checks)
}
