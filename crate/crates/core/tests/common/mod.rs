#![allow(dead_code)]

use chanlab::channel::{synthesize_channel, ScenarioConfig};
use chanlab::mae::{mcm_loss, mcm_loss_gradients, ModelConfig, ModelState};
use chanlab::nn::{Graph, Var};
use chanlab::rng::Stream;
use chanlab::Result;

pub const REL_TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

type Build = fn(&mut Graph, &[Var], &mut Stream) -> Result<Var>;

/// One differentiable op: input shapes drawn per case and a builder.
pub struct OpCase {
    pub name: &'static str,
    shapes: fn(&mut Stream) -> Vec<(usize, usize)>,
    build: Build,
}

fn dim(rng: &mut Stream, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            shapes: |r| {
                let (n, k, m) = (dim(r, 1, 5), dim(r, 1, 5), dim(r, 1, 5));
                vec![(n, k), (k, m)]
            },
            build: |g, v, _| g.matmul(v[0], v[1]),
        },
        OpCase {
            name: "add_bias",
            shapes: |r| {
                let (n, m) = (dim(r, 1, 5), dim(r, 1, 5));
                vec![(n, m), (1, m)]
            },
            build: |g, v, _| g.add_bias(v[0], v[1]),
        },
        OpCase {
            name: "add",
            shapes: |r| {
                let s = (dim(r, 1, 5), dim(r, 1, 5));
                vec![s, s]
            },
            build: |g, v, _| g.add(v[0], v[1]),
        },
        OpCase {
            name: "mul",
            shapes: |r| {
                let s = (dim(r, 1, 5), dim(r, 1, 5));
                vec![s, s]
            },
            build: |g, v, _| g.mul(v[0], v[1]),
        },
        OpCase {
            name: "scale",
            shapes: |r| vec![(dim(r, 1, 5), dim(r, 1, 5))],
            build: |g, v, r| Ok(g.scale(v[0], r.uniform_range(-2.0, 2.0))),
        },
        OpCase {
            name: "gelu",
            shapes: |r| vec![(dim(r, 1, 5), dim(r, 1, 5))],
            build: |g, v, _| Ok(g.gelu(v[0])),
        },
        OpCase {
            name: "softmax",
            shapes: |r| vec![(dim(r, 1, 4), dim(r, 2, 6))],
            build: |g, v, _| Ok(g.softmax(v[0])),
        },
        OpCase {
            name: "layer_norm",
            shapes: |r| {
                let (n, m) = (dim(r, 1, 4), dim(r, 2, 6));
                vec![(n, m), (1, m), (1, m)]
            },
            build: |g, v, _| g.layer_norm(v[0], v[1], v[2]),
        },
        OpCase {
            name: "attention",
            // batch 2, sequence 3, two heads of width 2
            shapes: |_| vec![(6, 4), (6, 4), (6, 4)],
            build: |g, v, _| g.attention(v[0], v[1], v[2], 2, 3),
        },
        OpCase {
            name: "gather_rows",
            shapes: |r| vec![(dim(r, 2, 5), dim(r, 1, 4))],
            build: |g, v, r| {
                let n = g.dims(v[0]).0;
                // repeated rows exercise gradient accumulation
                let idx: Vec<usize> = (0..n + 2).map(|_| r.below(n)).collect();
                g.gather_rows(v[0], &idx)
            },
        },
        OpCase {
            name: "concat_rows",
            shapes: |r| {
                let m = dim(r, 1, 4);
                vec![(dim(r, 1, 4), m), (dim(r, 1, 4), m)]
            },
            build: |g, v, _| g.concat_rows(v[0], v[1]),
        },
        OpCase {
            name: "masked_mse",
            shapes: |r| {
                let s = (dim(r, 1, 4), dim(r, 1, 4));
                vec![s, s]
            },
            build: |g, v, r| {
                let (n, m) = g.dims(v[0]);
                let mut w: Vec<f64> = (0..n * m).map(|_| (r.below(2)) as f64).collect();
                w[0] = 1.0;
                g.masked_mse(v[0], v[1], &w)
            },
        },
        OpCase {
            name: "mse",
            shapes: |r| {
                let s = (dim(r, 1, 4), dim(r, 1, 4));
                vec![s, s]
            },
            build: |g, v, _| g.mse(v[0], v[1]),
        },
        OpCase {
            name: "sum",
            shapes: |r| vec![(dim(r, 1, 5), dim(r, 1, 5))],
            build: |g, v, _| Ok(g.sum(v[0])),
        },
        OpCase {
            name: "mean",
            shapes: |r| vec![(dim(r, 1, 5), dim(r, 1, 5))],
            build: |g, v, _| Ok(g.mean(v[0])),
        },
    ]
}

/// Scalar probe `sum(op(inputs) * r)` with a fixed random `r`.
fn probe(case: &OpCase, inputs: &[Vec<f64>], shapes: &[(usize, usize)], seed: u64, grads: bool) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(shapes)
        .map(|(x, &(r, c))| g.leaf(r, c, x.clone(), true))
        .collect::<Result<_>>()?;
    let mut rng = Stream::new(seed);
    let out = (case.build)(&mut g, &vars, &mut rng)?;
    let (r, c) = g.dims(out);
    let w: Vec<f64> = (0..r * c).map(|_| rng.normal()).collect();
    let w = g.constant(r, c, w)?;
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod);
    let value = g.scalar(loss);
    if !grads {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let gs = vars.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default()).collect();
    Ok((value, gs))
}

/// Norm-wise relative error between analytic and central-difference
/// gradients, maximized over inputs.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Worst relative error of `case` over one random draw.
pub fn check_op_case(case: &OpCase, seed: u64) -> Result<f64> {
    let mut rng = Stream::derived(seed, 0);
    let shapes = (case.shapes)(&mut rng);
    let inputs: Vec<Vec<f64>> = shapes.iter().map(|&(r, c)| (0..r * c).map(|_| rng.normal()).collect()).collect();
    let build_seed = rng.next_u64();
    let (_, analytic) = probe(case, &inputs, &shapes, build_seed, true)?;
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        if a.len() != inputs[i].len() {
            return Ok(f64::INFINITY);
        }
        let mut numeric = vec![0.0; a.len()];
        for j in 0..a.len() {
            let mut plus = inputs.clone();
            plus[i][j] += STEP;
            let mut minus = inputs.clone();
            minus[i][j] -= STEP;
            let fp = probe(case, &plus, &shapes, build_seed, false)?.0;
            let fm = probe(case, &minus, &shapes, build_seed, false)?.0;
            numeric[j] = (fp - fm) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(a, &numeric));
    }
    Ok(worst)
}

/// Smallest config exercising every model path: two encoder and decoder
/// blocks, multi-head attention, masking.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        grid_rows: 4,
        grid_cols: 6,
        patch_rows: 2,
        patch_cols: 2,
        embed_dim: 8,
        n_heads: 2,
        encoder_depth: 2,
        decoder_embed_dim: 4,
        decoder_heads: 2,
        decoder_depth: 2,
        mlp_ratio: 2,
        mask_ratio: 0.5,
        target_params: 0,
    }
}

/// Finite-difference check of the full MCM loss gradient over a sample of
/// coordinates from every parameter tensor. Returns the worst relative error.
pub fn full_model_gradient_error(seed: u64) -> Result<f64> {
    let cfg = tiny_model_config();
    let model = ModelState::init(&cfg, seed)?;
    let scenario = ScenarioConfig {
        n_antennas: cfg.grid_rows,
        n_subcarriers: cfg.grid_cols,
        n_clusters: 3,
        ..ScenarioConfig::default()
    };
    let h = synthesize_channel(&scenario, seed)?;
    let mask_seed = seed ^ 0x5eed;
    let (_, grads) = mcm_loss_gradients(&model, &h, mask_seed)?;
    let mut rng = Stream::new(seed);
    let mut worst: f64 = 0.0;
    for (gi, group) in model.groups.iter().enumerate() {
        for (ti, tensor) in group.tensors.iter().enumerate() {
            let picks: Vec<usize> = (0..tensor.len().min(4)).map(|_| rng.below(tensor.len())).collect();
            let analytic: Vec<f64> = picks.iter().map(|&j| grads[gi][ti][j]).collect();
            let mut numeric = Vec::with_capacity(picks.len());
            for &j in &picks {
                let eval = |delta: f64| -> Result<f64> {
                    let mut m = model.clone();
                    m.groups[gi].tensors[ti].data_mut()[j] += delta;
                    mcm_loss(&m, &h, mask_seed)
                };
                numeric.push((eval(STEP)? - eval(-STEP)?) / (2.0 * STEP));
            }
            worst = worst.max(relative_error(&analytic, &numeric));
        }
    }
    Ok(worst)
}
