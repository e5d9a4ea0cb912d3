//! Dense kernels shared by the recording graph and the no-grad inference paths.
//!
//! Storage is `f32`; every reduction accumulates in `f64` in a fixed order so
//! that results are bit-reproducible and identical between the two paths.

/// Added to each vector norm inside [`cosine`].
pub const COSINE_EPS: f64 = 1e-12;

/// `a [m,k] · b [k,n] -> [m,n]`.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let b64: Vec<f64> = b.iter().map(|&x| x as f64).collect();
    let mut out = vec![0f32; m * n];
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        let row = &a[i * k..(i + 1) * k];
        for (p, &ap) in row.iter().enumerate() {
            let ap = ap as f64;
            let brow = &b64[p * n..(p + 1) * n];
            for (acc_j, &b_pj) in acc.iter_mut().zip(brow) {
                *acc_j += ap * b_pj;
            }
        }
        for (o, &s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = s as f32;
        }
    }
    out
}

/// `d [m,n] · bᵀ` where `b` is `[k,n]`, giving `[m,k]`.
pub fn matmul_a_bt(d: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    // Transpose b once so the inner loop is a contiguous axpy.
    let mut bt = vec![0f64; n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j] as f64;
        }
    }
    let mut out = vec![0f32; m * k];
    let mut acc = vec![0f64; k];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for j in 0..n {
            let dij = d[i * n + j] as f64;
            let col = &bt[j * k..(j + 1) * k];
            for (acc_p, &b_pj) in acc.iter_mut().zip(col) {
                *acc_p += dij * b_pj;
            }
        }
        for (o, &s) in out[i * k..(i + 1) * k].iter_mut().zip(&acc) {
            *o = s as f32;
        }
    }
    out
}

/// `aᵀ · d` where `a` is `[m,k]` and `d` is `[m,n]`, giving `[k,n]`.
pub fn matmul_at_b(a: &[f32], d: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0f64; k * n];
    let mut drow = vec![0f64; n];
    for i in 0..m {
        for (x, &y) in drow.iter_mut().zip(&d[i * n..(i + 1) * n]) {
            *x = y as f64;
        }
        for p in 0..k {
            let a_ip = a[i * k + p] as f64;
            let out_row = &mut acc[p * n..(p + 1) * n];
            for (o, &dj) in out_row.iter_mut().zip(&drow) {
                *o += a_ip * dj;
            }
        }
    }
    acc.into_iter().map(|x| x as f32).collect()
}

/// Adds `bias [n]` to every row of `x [m,n]` in place.
pub fn add_rows(x: &mut [f32], bias: &[f32]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    (1.0 / (1.0 + (-(x as f64)).exp())) as f32
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

pub fn sum(x: &[f32]) -> f64 {
    x.iter().fold(0f64, |acc, &v| acc + v as f64)
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0f64, |acc, (&x, &y)| acc + x as f64 * y as f64)
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity with [`COSINE_EPS`] added to each norm.
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let (d, na, nb) = (dot(a, b), norm(a), norm(b));
    (d / ((na + COSINE_EPS) * (nb + COSINE_EPS))) as f32
}

pub fn mse(a: &[f32], b: &[f32]) -> f32 {
    let s = a.iter().zip(b).fold(0f64, |acc, (&x, &y)| {
        let d = x as f64 - y as f64;
        acc + d * d
    });
    (s / a.len() as f64) as f32
}

/// Sinusoidal embedding of a scalar timestep into `dim` features
/// (`dim / 2` sines followed by `dim / 2` cosines).
pub fn sinusoid(t: f32, dim: usize, out: &mut [f32]) {
    let half = dim / 2;
    let t = t as f64;
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin() as f32;
        out[half + i] = (t * freq).cos() as f32;
    }
}

pub fn all_finite(x: &[f32]) -> bool {
    x.iter().all(|v| v.is_finite())
}
