// SPDX-License-Identifier: MIT OR Apache-2.0

//! Randomized fixtures shared by the integration and acceptance tests.

#![allow(dead_code)]

use edgeprune::autograd::{gradcheck, GradCheckOptions, Tape, Tensor, Var};
use edgeprune::model::{Activation, DisentangledTransformer, ModelConfig};
use edgeprune::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Loss = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// A scalar function of some inputs, with the inputs to check it at.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: Loss,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // Box-Muller keeps values off exact zeros and kinks.
            let (u, v): (f64, f64) = (rng.random_range(1e-9..1.0), rng.random());
            (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `Σ w ⊙ y` for a fixed random `w`, so every output entry matters.
fn project(t: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = t.constant(w.clone());
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=4)
}

/// One case per tape primitive with random shapes and values.
pub fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let (m, k, n, b) = (dim(rng), dim(rng), dim(rng), dim(rng));
    let mut cases = Vec::new();
    let mut unary = |name: &'static str,
                     x: Tensor<f64>,
                     out: Vec<usize>,
                     op: fn(&mut Tape<f64>, Var) -> Result<Var>,
                     rng: &mut ChaCha8Rng| {
        let w = normal(rng, &out);
        cases.push(Case {
            name,
            inputs: vec![x],
            f: Box::new(move |t, v| {
                let y = op(t, v[0])?;
                project(t, y, &w)
            }),
        });
    };
    unary("gelu", normal(rng, &[m, n]), vec![m, n], |t, x| Ok(t.gelu(x)), rng);
    unary("relu", normal(rng, &[m, n]), vec![m, n], |t, x| Ok(t.relu(x)), rng);
    unary(
        "sigmoid",
        normal(rng, &[m, n]),
        vec![m, n],
        |t, x| Ok(t.sigmoid(x)),
        rng,
    );
    unary("exp", normal(rng, &[m, n]), vec![m, n], |t, x| Ok(t.exp(x)), rng);
    unary(
        "log",
        uniform(rng, &[m, n], 0.2, 3.0),
        vec![m, n],
        |t, x| Ok(t.log(x)),
        rng,
    );
    unary(
        "clamp01",
        uniform(rng, &[m, n], -0.5, 1.5),
        vec![m, n],
        |t, x| Ok(t.clamp01(x)),
        rng,
    );
    unary(
        "affine",
        normal(rng, &[m, n]),
        vec![m, n],
        |t, x| Ok(t.affine(x, 1.7, -0.3)),
        rng,
    );
    unary(
        "scale",
        normal(rng, &[m, n]),
        vec![m, n],
        |t, x| Ok(t.scale(x, -2.5)),
        rng,
    );
    unary("softmax", normal(rng, &[m, n]), vec![m, n], |t, x| t.softmax(x), rng);
    unary(
        "log_softmax",
        normal(rng, &[m, n]),
        vec![m, n],
        |t, x| t.log_softmax(x),
        rng,
    );
    unary(
        "layer_norm",
        normal(rng, &[m, n + 1]),
        vec![m, n + 1],
        |t, x| t.layer_norm(x, 1e-5),
        rng,
    );
    unary(
        "transpose_last2",
        normal(rng, &[b, m, n]),
        vec![b, n, m],
        |t, x| t.transpose_last2(x),
        rng,
    );
    unary("sum", normal(rng, &[m, n]), vec![], |t, x| Ok(t.sum(x)), rng);
    unary("mean", normal(rng, &[m, n]), vec![], |t, x| Ok(t.mean(x)), rng);
    let w = normal(rng, &[m * n]);
    cases.push(Case {
        name: "reshape",
        inputs: vec![normal(rng, &[m, n])],
        f: Box::new(move |t, v| {
            let y = t.reshape(v[0], &[m * n])?;
            project(t, y, &w)
        }),
    });

    let mut binary = |name: &'static str,
                      a: Tensor<f64>,
                      c: Tensor<f64>,
                      out: Vec<usize>,
                      op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>,
                      rng: &mut ChaCha8Rng| {
        let w = normal(rng, &out);
        cases.push(Case {
            name,
            inputs: vec![a, c],
            f: Box::new(move |t, v| {
                let y = op(t, v[0], v[1])?;
                project(t, y, &w)
            }),
        });
    };
    binary(
        "add",
        normal(rng, &[m, n]),
        normal(rng, &[m, n]),
        vec![m, n],
        |t, a, c| t.add(a, c),
        rng,
    );
    binary(
        "sub",
        normal(rng, &[m, n]),
        normal(rng, &[m, n]),
        vec![m, n],
        |t, a, c| t.sub(a, c),
        rng,
    );
    binary(
        "mul",
        normal(rng, &[m, n]),
        normal(rng, &[m, n]),
        vec![m, n],
        |t, a, c| t.mul(a, c),
        rng,
    );
    binary(
        "add_broadcast",
        normal(rng, &[b, m, n]),
        normal(rng, &[n]),
        vec![b, m, n],
        |t, a, c| t.add(a, c),
        rng,
    );
    binary(
        "mul_broadcast",
        normal(rng, &[b, m, n]),
        normal(rng, &[m, n]),
        vec![b, m, n],
        |t, a, c| t.mul(a, c),
        rng,
    );
    binary(
        "matmul",
        normal(rng, &[m, k]),
        normal(rng, &[k, n]),
        vec![m, n],
        |t, a, c| t.matmul(a, c),
        rng,
    );
    binary(
        "batch_matmul",
        normal(rng, &[b, m, k]),
        normal(rng, &[b, k, n]),
        vec![b, m, n],
        |t, a, c| t.batch_matmul(a, c),
        rng,
    );
    binary(
        "concat",
        normal(rng, &[m, n]),
        normal(rng, &[m, k]),
        vec![m, n + k],
        |t, a, c| t.concat(&[a, c], 1),
        rng,
    );

    // Index-driven ops.
    let rows: Vec<usize> = (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..m)).collect();
    let w = normal(rng, &[rows.len(), n]);
    let r2 = rows.clone();
    cases.push(Case {
        name: "gather_rows",
        inputs: vec![normal(rng, &[m, n])],
        f: Box::new(move |t, v| {
            let y = t.gather_rows(v[0], &r2)?;
            project(t, y, &w)
        }),
    });
    let w = normal(rng, &[rows.len(), n]);
    cases.push(Case {
        name: "embedding",
        inputs: vec![normal(rng, &[m, n])],
        f: Box::new(move |t, v| {
            let y = t.embedding(v[0], &rows)?;
            let y = t.reshape(y, &[rows.len(), n])?;
            project(t, y, &w)
        }),
    });
    let total = n + 2;
    let start = rng.random_range(0..total);
    let end = rng.random_range(start + 1..=total);
    let w = normal(rng, &[m, end - start]);
    cases.push(Case {
        name: "slice",
        inputs: vec![normal(rng, &[m, total])],
        f: Box::new(move |t, v| {
            let y = t.slice(v[0], 1, start, end)?;
            project(t, y, &w)
        }),
    });
    cases
}

/// A random small configuration with every architectural switch drawn.
pub fn random_config(rng: &mut ChaCha8Rng, max_layers: usize) -> ModelConfig {
    let n_heads = rng.random_range(1..=3);
    let d_head = rng.random_range(2..=5);
    ModelConfig {
        n_layers: rng.random_range(1..=max_layers),
        n_heads,
        d_model: n_heads * d_head,
        d_head,
        d_mlp: rng.random_range(2..=12),
        vocab_size: rng.random_range(4..=12),
        max_seq: rng.random_range(2..=7),
        layer_norm: rng.random_bool(0.7),
        activation: if rng.random_bool(0.5) {
            Activation::Gelu
        } else {
            Activation::Relu
        },
        causal: rng.random_bool(0.7),
    }
}

pub fn random_tokens(rng: &mut ChaCha8Rng, cfg: &ModelConfig, batch: usize) -> Vec<Vec<u32>> {
    let s = rng.random_range(1..=cfg.max_seq);
    (0..batch)
        .map(|_| (0..s).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect())
        .collect()
}

/// Mean next-token cross-entropy of a 2-layer model, checked over a random
/// subset of every parameter tensor. Returns the worst relative error.
pub fn transformer_loss_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = random_config(&mut rng, 2);
    cfg.n_layers = 2;
    cfg.max_seq = cfg.max_seq.max(3);
    let model = DisentangledTransformer::random(cfg.clone(), rng.random()).unwrap();
    let tokens = random_tokens(&mut rng, &cfg, 2);
    let targets: Vec<usize> = tokens
        .iter()
        .flatten()
        .map(|_| rng.random_range(0..cfg.vocab_size))
        .collect();
    let params: Vec<Tensor<f64>> = model.tensors().iter().map(|(_, t)| t.cast::<f64>()).collect();
    let (b, s, v) = (tokens.len(), tokens[0].len(), cfg.vocab_size);
    let mut onehot = vec![0.0; b * s * v];
    for (r, &y) in targets.iter().enumerate() {
        onehot[r * v + y] = 1.0;
    }
    let onehot = Tensor::new(vec![b * s, v], onehot).unwrap();
    let f = move |t: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let logits = model.forward_with(t, vars, &tokens)?;
        let flat = t.reshape(logits, &[b * s, v])?;
        let lp = t.log_softmax(flat)?;
        let y = t.constant(onehot.clone());
        let picked = t.mul(lp, y)?;
        let total = t.sum(picked);
        Ok(t.scale(total, -1.0 / (b * s) as f64))
    };
    let opts = GradCheckOptions {
        eps: 1e-5,
        max_entries: Some(3),
        seed,
        ..GradCheckOptions::default()
    };
    gradcheck(&params, f, &opts).unwrap().max_rel_err
}

/// Worst relative error over one randomized trial of every primitive.
pub fn primitive_trial(seed: u64) -> (f64, &'static str) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0, "");
    for case in primitive_cases(&mut rng) {
        let r = gradcheck(&case.inputs, &case.f, &GradCheckOptions::default()).unwrap();
        if r.max_rel_err > worst.0 {
            worst = (r.max_rel_err, case.name);
        }
    }
    worst
}

/// Max |logit difference| between the all-ones disentangled pass and the
/// standard pass for one random configuration and input.
pub fn equivalence_gap(seed: u64) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = random_config(&mut rng, 3);
    let model = DisentangledTransformer::random(cfg.clone(), rng.random()).unwrap();
    let batch = rng.random_range(1..=3);
    let clean = random_tokens(&mut rng, &cfg, batch);
    let corrupted: Vec<Vec<u32>> = clean
        .iter()
        .map(|t| t.iter().map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect())
        .collect();
    let cache = model.forward(&corrupted).unwrap().1;
    let ones = vec![1.0; model.graph().n_edges()];
    let (dis, _) = model.forward_disentangled(&clean, &cache, &ones).unwrap();
    let std = model.logits(&clean).unwrap();
    dis.data()
        .iter()
        .zip(std.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max)
}
