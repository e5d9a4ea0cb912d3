//! Finite-difference checks of every differentiable op and both loss terms
//! against independent 64-bit reference implementations.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, Tensor, Var};
use crate::diffusion::{diffusion_loss, DenoiserNet, DiffusionBatch, NetVars, TIME_DIM};
use crate::error::Result;
use crate::rng::{derive_seed, stream, Rng};

/// Worst norm-wise relative error seen for one op over all trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckStats {
    pub op: String,
    pub trials: usize,
    pub worst_rel_err: f64,
}

type Reference = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;
type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<(Vec<usize>, Vec<f32>)>,
    /// Inputs whose gradient is checked; the others are constants.
    checked: Vec<usize>,
    /// Coordinates checked per input (`None` = all).
    coords: Vec<Option<Vec<usize>>>,
    build: Builder,
    reference: Reference,
}

fn randn(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Standard normals pushed at least `gap` away from zero.
fn randn_away(rng: &mut Rng, n: usize, gap: f32) -> Vec<f32> {
    randn(rng, n)
        .into_iter()
        .map(|x| if x.abs() < gap { gap.copysign(x) + x } else { x })
        .collect()
}

fn dims(rng: &mut Rng) -> (usize, usize) {
    (rng.random_range(1..=6), rng.random_range(1..=8))
}

fn silu64(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn cosine64(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / ((na + kernels::COSINE_EPS) * (nb + kernels::COSINE_EPS))
}

fn matmul64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

fn unary(shape: Vec<usize>, x: Vec<f32>, build: Builder, reference: Reference) -> Case {
    Case {
        inputs: vec![(shape, x)],
        checked: vec![0],
        coords: vec![None],
        build,
        reference,
    }
}

fn binary(a: (Vec<usize>, Vec<f32>), b: (Vec<usize>, Vec<f32>), build: Builder, reference: Reference) -> Case {
    Case {
        inputs: vec![a, b],
        checked: vec![0, 1],
        coords: vec![None, None],
        build,
        reference,
    }
}

pub const OP_NAMES: [&str; 17] = [
    "matmul",
    "add",
    "add_broadcast",
    "mul",
    "concat_rows",
    "concat_cols",
    "silu",
    "relu",
    "sum",
    "mean",
    "mean_groups",
    "mse",
    "cosine_similarity",
    "abs",
    "scale",
    "index_rows",
    "reg_loss",
];

fn make_case(op: &str, rng: &mut Rng) -> Case {
    let (m, n) = dims(rng);
    match op {
        "matmul" => {
            let k = rng.random_range(1..=6);
            binary(
                (vec![m, k], randn(rng, m * k)),
                (vec![k, n], randn(rng, k * n)),
                Box::new(|g, v| g.matmul(v[0], v[1])),
                Box::new(move |x| matmul64(&x[0], &x[1], m, k, n)),
            )
        }
        "add" => binary(
            (vec![m, n], randn(rng, m * n)),
            (vec![m, n], randn(rng, m * n)),
            Box::new(|g, v| g.add(v[0], v[1])),
            Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect()),
        ),
        "add_broadcast" => binary(
            (vec![m, n], randn(rng, m * n)),
            (vec![n], randn(rng, n)),
            Box::new(|g, v| g.add(v[0], v[1])),
            Box::new(move |x| (0..m * n).map(|i| x[0][i] + x[1][i % n]).collect()),
        ),
        "mul" => binary(
            (vec![m, n], randn(rng, m * n)),
            (vec![m, n], randn(rng, m * n)),
            Box::new(|g, v| g.mul(v[0], v[1])),
            Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect()),
        ),
        "concat_rows" => {
            let m2 = rng.random_range(1..=4);
            binary(
                (vec![m, n], randn(rng, m * n)),
                (vec![m2, n], randn(rng, m2 * n)),
                Box::new(|g, v| g.concat(&[v[0], v[1]], 0)),
                Box::new(|x| x[0].iter().chain(&x[1]).copied().collect()),
            )
        }
        "concat_cols" => {
            let n2 = rng.random_range(1..=4);
            binary(
                (vec![m, n], randn(rng, m * n)),
                (vec![m, n2], randn(rng, m * n2)),
                Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
                Box::new(move |x| {
                    (0..m)
                        .flat_map(|r| {
                            x[0][r * n..(r + 1) * n]
                                .iter()
                                .chain(&x[1][r * n2..(r + 1) * n2])
                                .copied()
                                .collect::<Vec<_>>()
                        })
                        .collect()
                }),
            )
        }
        "silu" => unary(
            vec![m, n],
            randn(rng, m * n),
            Box::new(|g, v| g.silu(v[0])),
            Box::new(|x| x[0].iter().map(|&a| silu64(a)).collect()),
        ),
        "relu" => unary(
            vec![m, n],
            randn_away(rng, m * n, 0.05),
            Box::new(|g, v| g.relu(v[0])),
            Box::new(|x| x[0].iter().map(|&a| a.max(0.0)).collect()),
        ),
        "abs" => unary(
            vec![m, n],
            randn_away(rng, m * n, 0.05),
            Box::new(|g, v| g.abs(v[0])),
            Box::new(|x| x[0].iter().map(|a| a.abs()).collect()),
        ),
        "sum" => unary(
            vec![m, n],
            randn(rng, m * n),
            Box::new(|g, v| g.sum(v[0])),
            Box::new(|x| vec![x[0].iter().sum()]),
        ),
        "mean" => unary(
            vec![m, n],
            randn(rng, m * n),
            Box::new(|g, v| g.mean(v[0])),
            Box::new(|x| vec![x[0].iter().sum::<f64>() / x[0].len() as f64]),
        ),
        "scale" => {
            let c: f32 = rng.random_range(-3.0..3.0);
            unary(
                vec![m, n],
                randn(rng, m * n),
                Box::new(move |g, v| g.scale(v[0], c)),
                Box::new(move |x| x[0].iter().map(|a| a * c as f64).collect()),
            )
        }
        "mean_groups" => {
            let rows = rng.random_range(2..=8);
            let mut groups = Vec::new();
            let mut start = 0;
            while start < rows {
                let len = rng.random_range(1..=rows - start);
                groups.push((start, len));
                start += len;
            }
            let g2 = groups.clone();
            unary(
                vec![rows, n],
                randn(rng, rows * n),
                Box::new(move |g, v| g.mean_groups(v[0], groups.clone())),
                Box::new(move |x| {
                    g2.iter()
                        .flat_map(|&(s, l)| {
                            (0..n)
                                .map(|c| (s..s + l).map(|r| x[0][r * n + c]).sum::<f64>() / l as f64)
                                .collect::<Vec<_>>()
                        })
                        .collect()
                }),
            )
        }
        "mse" => binary(
            (vec![m, n], randn(rng, m * n)),
            (vec![m, n], randn(rng, m * n)),
            Box::new(|g, v| g.mse(v[0], v[1])),
            Box::new(|x| {
                let s: f64 = x[0].iter().zip(&x[1]).map(|(a, b)| (a - b).powi(2)).sum();
                vec![s / x[0].len() as f64]
            }),
        ),
        "cosine_similarity" => {
            let d = rng.random_range(2..=16);
            binary(
                (vec![d], randn(rng, d)),
                (vec![d], randn(rng, d)),
                Box::new(|g, v| g.cosine_similarity(v[0], v[1])),
                Box::new(|x| vec![cosine64(&x[0], &x[1])]),
            )
        }
        "index_rows" => {
            let ids: Vec<usize> = (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..m)).collect();
            let ids2 = ids.clone();
            unary(
                vec![m, n],
                randn(rng, m * n),
                Box::new(move |g, v| g.index_rows(v[0], ids.clone())),
                Box::new(move |x| ids2.iter().flat_map(|&i| x[0][i * n..(i + 1) * n].to_vec()).collect()),
            )
        }
        "reg_loss" => reg_loss_case(rng),
        other => panic!("no gradient case for {other}"),
    }
}

/// `mean_k |r_k − cos(v, v_m_k)|` with each `r_k` kept away from the kink.
fn reg_loss_case(rng: &mut Rng) -> Case {
    let d = rng.random_range(2..=16);
    let k = rng.random_range(1..=3);
    let v = randn(rng, d);
    let vms: Vec<Vec<f32>> = (0..k).map(|_| randn(rng, d)).collect();
    let refs: Vec<f32> = vms
        .iter()
        .map(|m| {
            let c = kernels::cosine(&v, m);
            let off: f32 = rng.random_range(0.05..0.5);
            if rng.random::<bool>() { c + off } else { c - off }
        })
        .collect();
    let (vms2, refs2) = (vms.clone(), refs.clone());
    Case {
        inputs: vec![(vec![d], v)],
        checked: vec![0],
        coords: vec![None],
        build: Box::new(move |g, vars| {
            let mut terms = Vec::new();
            for (m, &r) in vms.iter().zip(&refs) {
                let vm = g.constant(vec![m.len()], m.clone())?;
                let c = g.cosine_similarity(vars[0], vm)?;
                let neg = g.constant(vec![1], vec![-r])?;
                let diff = g.add(c, neg)?;
                terms.push(g.abs(diff)?);
            }
            let stacked = g.concat(&terms, 0)?;
            g.mean(stacked)
        }),
        reference: Box::new(move |x| {
            let total: f64 = vms2
                .iter()
                .zip(&refs2)
                .map(|(m, &r)| {
                    let m64: Vec<f64> = m.iter().map(|&a| a as f64).collect();
                    (r as f64 - cosine64(&x[0], &m64)).abs()
                })
                .sum();
            vec![total / vms2.len() as f64]
        }),
    }
}

/// Denoiser MSE loss on a 2-image batch: gradient w.r.t. the conditioning
/// vectors and a random subset of first- and last-layer parameters.
fn diffusion_loss_case(rng: &mut Rng, net: &DenoiserNet) -> Case {
    let b = 2;
    let px = crate::datagen::PIXELS;
    let emb = crate::textenc::EMBED_DIM;
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(0..200)).collect();
    let z_t = randn(rng, b * px);
    let eps = randn(rng, b * px);
    let v = randn(rng, b * emb);
    let tensors: Vec<Tensor> = net.tensors().into_iter().cloned().collect();
    let mut inputs = vec![(vec![b, emb], v)];
    inputs.extend(tensors.iter().map(|t| (t.shape().to_vec(), t.data().to_vec())));
    let mut coords = vec![None];
    for (i, t) in tensors.iter().enumerate() {
        let pick = matches!(i, 0 | 1 | 4 | 5);
        coords.push(pick.then(|| (0..6).map(|_| rng.random_range(0..t.numel())).collect()));
    }
    let temb: Vec<f32> = ts
        .iter()
        .flat_map(|&t| {
            let mut e = vec![0f32; TIME_DIM];
            kernels::sinusoid(t as f32, TIME_DIM, &mut e);
            e
        })
        .collect();
    let batch = DiffusionBatch {
        z_y: vec![0.0; b * px],
        t: ts,
        eps: eps.clone(),
        z_t: z_t.clone(),
    };
    let net = net.clone();
    Case {
        inputs,
        checked: vec![0, 1, 2, 5, 6],
        coords,
        build: Box::new(move |g, vars| {
            let nv = NetVars::from_vars([vars[1], vars[2], vars[3], vars[4], vars[5], vars[6]]);
            diffusion_loss(g, &net, &nv, &batch, vars[0])
        }),
        reference: Box::new(move |x| {
            let in_dim = px + TIME_DIM + emb;
            let mut h: Vec<f64> = Vec::with_capacity(b * in_dim);
            for r in 0..b {
                h.extend(z_t[r * px..(r + 1) * px].iter().map(|&a| a as f64));
                h.extend(temb[r * TIME_DIM..(r + 1) * TIME_DIM].iter().map(|&a| a as f64));
                h.extend_from_slice(&x[0][r * emb..(r + 1) * emb]);
            }
            let widths = [in_dim, 256, 256, px];
            for l in 0..3 {
                let (k, n) = (widths[l], widths[l + 1]);
                let mut y = matmul64(&h, &x[1 + 2 * l], b, k, n);
                for (i, yv) in y.iter_mut().enumerate() {
                    *yv += x[2 + 2 * l][i % n];
                    if l < 2 {
                        *yv = silu64(*yv);
                    }
                }
                h = y;
            }
            let s: f64 = h.iter().zip(&eps).map(|(a, &e)| (a - e as f64).powi(2)).sum();
            vec![s / h.len() as f64]
        }),
    }
}

/// Norm-wise relative error between the tape gradient and central differences
/// of the reference, for the weighted sum `Σ r ⊙ op(x)`.
fn check_case(case: &Case, rng: &mut Rng) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .enumerate()
        .map(|(i, (shape, data))| {
            let t = Tensor::new(shape.clone(), data.clone())?.with_requires_grad(case.checked.contains(&i));
            Ok(g.leaf(&t))
        })
        .collect::<Result<_>>()?;
    let y = (case.build)(&mut g, &vars)?;
    let out_shape = g.shape(y).to_vec();
    let weights = randn(rng, out_shape.iter().product());
    let wv = g.constant(out_shape, weights.clone())?;
    let prod = g.mul(y, wv)?;
    let root = g.sum(prod)?;
    g.backward(root)?;

    let base: Vec<Vec<f64>> = case
        .inputs
        .iter()
        .map(|(_, d)| d.iter().map(|&a| a as f64).collect())
        .collect();
    let objective = |x: &[Vec<f64>]| -> f64 {
        (case.reference)(x)
            .iter()
            .zip(&weights)
            .map(|(a, &w)| a * w as f64)
            .sum()
    };
    let (mut num, mut den) = (0f64, 0f64);
    for &i in &case.checked {
        let analytic = g.grad(vars[i]).map_or_else(|| vec![0.0; base[i].len()], <[f32]>::to_vec);
        let coords: Vec<usize> = match &case.coords[i] {
            Some(c) => c.clone(),
            None => (0..base[i].len()).collect(),
        };
        for c in coords {
            let h = 1e-6 * base[i][c].abs().max(1.0);
            let mut x = base.clone();
            x[i][c] += h;
            let plus = objective(&x);
            x[i][c] -= 2.0 * h;
            let minus = objective(&x);
            let fd = (plus - minus) / (2.0 * h);
            num += (analytic[c] as f64 - fd).powi(2);
            den += fd.powi(2).max((analytic[c] as f64).powi(2));
        }
    }
    Ok(if den == 0.0 { num.sqrt() } else { (num / den).sqrt() })
}

/// Runs `trials` random instances of every op plus the diffusion loss.
pub fn gradient_check_suite(trials: usize, seed: u64) -> Result<Vec<GradCheckStats>> {
    let mut stats = Vec::new();
    for op in OP_NAMES {
        let mut rng = stream(derive_seed(seed, op));
        let mut worst = 0f64;
        for _ in 0..trials {
            let case = make_case(op, &mut rng);
            worst = worst.max(check_case(&case, &mut rng)?);
        }
        stats.push(GradCheckStats {
            op: op.to_string(),
            trials,
            worst_rel_err: worst,
        });
    }
    let mut rng = stream(derive_seed(seed, "diffusion_loss"));
    let mut worst = 0f64;
    for i in 0..trials {
        let net = DenoiserNet::init(derive_seed(seed, &format!("gradcheck-net-{i}")));
        let case = diffusion_loss_case(&mut rng, &net);
        worst = worst.max(check_case(&case, &mut rng)?);
    }
    stats.push(GradCheckStats {
        op: "diffusion_loss".into(),
        trials,
        worst_rel_err: worst,
    });
    Ok(stats)
}
