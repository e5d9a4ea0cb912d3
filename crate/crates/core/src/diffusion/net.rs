use crate::autodiff::{kernels, Graph, Tensor, Var};
use crate::datagen::PIXELS;
use crate::error::{Error, Result};
use crate::nn::{silu_in_place, Linear};
use crate::rng::{derive_seed, stream};
use crate::textenc::EMBED_DIM;

pub const TIME_DIM: usize = 32;
pub const HIDDEN: usize = 256;
pub const INPUT_DIM: usize = PIXELS + TIME_DIM + EMBED_DIM;

/// ε-prediction MLP: `[z_t | time embedding | v] → 256 → 256 → 256`, SiLU between layers.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNet {
    layers: [Linear; 3],
}

/// Graph handles for one binding of the denoiser parameters.
#[derive(Clone, Copy, Debug)]
pub struct NetVars {
    layers: [(Var, Var); 3],
}

impl NetVars {
    /// Handles in `[w0, b0, w1, b1, w2, b2]` order.
    pub fn from_vars(v: [Var; 6]) -> Self {
        Self {
            layers: [(v[0], v[1]), (v[2], v[3]), (v[4], v[5])],
        }
    }

    pub fn vars(&self) -> [Var; 6] {
        let [a, b, c] = self.layers;
        [a.0, a.1, b.0, b.1, c.0, c.1]
    }
}

impl DenoiserNet {
    pub fn init(seed: u64) -> Self {
        let mut rng = stream(derive_seed(seed, "denoiser-init"));
        Self {
            layers: [
                Linear::init(INPUT_DIM, HIDDEN, &mut rng),
                Linear::init(HIDDEN, HIDDEN, &mut rng),
                Linear::init(HIDDEN, PIXELS, &mut rng),
            ],
        }
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        let expected: [&[usize]; 6] = [
            &[INPUT_DIM, HIDDEN],
            &[HIDDEN],
            &[HIDDEN, HIDDEN],
            &[HIDDEN],
            &[HIDDEN, PIXELS],
            &[PIXELS],
        ];
        if tensors.len() != 6 {
            return Err(Error::MalformedCheckpoint(format!(
                "denoiser needs 6 tensors, got {}",
                tensors.len()
            )));
        }
        for (t, want) in tensors.iter().zip(expected) {
            if t.shape() != want {
                return Err(Error::MalformedCheckpoint(format!(
                    "denoiser tensor shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter().map(|t| t.with_requires_grad(true));
        let mut next = || Linear {
            weight: it.next().expect("checked"),
            bias: it.next().expect("checked"),
        };
        Ok(Self {
            layers: [next(), next(), next()],
        })
    }

    pub fn zero_output_layer(&mut self) {
        let out = &mut self.layers[2];
        out.weight.data_mut().fill(0.0);
        out.bias.data_mut().fill(0.0);
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.layers.iter_mut().for_each(|l| l.set_trainable(on));
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn bind(&self, g: &mut Graph) -> NetVars {
        NetVars {
            layers: [
                self.layers[0].bind(g),
                self.layers[1].bind(g),
                self.layers[2].bind(g),
            ],
        }
    }

    /// Records ε̂ for a batch: `z_t` is `[B, 256]`, `v` is `[B, 32]`.
    pub fn forward(&self, g: &mut Graph, vars: &NetVars, z_t: Var, t: &[usize], v: Var) -> Result<Var> {
        let batch = t.len();
        let zs = g.shape(z_t).to_vec();
        let vs = g.shape(v).to_vec();
        if zs != [batch, PIXELS] || vs != [batch, EMBED_DIM] {
            return Err(Error::Shape {
                op: "predict_noise",
                detail: format!("z_t {zs:?}, v {vs:?} for {batch} timesteps"),
            });
        }
        let tv = g.constant(vec![batch], t.iter().map(|&x| x as f32).collect())?;
        let temb = g.sinusoid_embed(tv, TIME_DIM)?;
        let x = g.concat(&[z_t, temb, v], 1)?;
        let h = Linear::forward(g, x, vars.layers[0])?;
        let h = g.silu(h)?;
        let h = Linear::forward(g, h, vars.layers[1])?;
        let h = g.silu(h)?;
        Linear::forward(g, h, vars.layers[2])
    }

    /// No-grad ε̂ for a batch, bit-identical to [`DenoiserNet::forward`].
    pub fn predict(&self, z_t: &[f32], t: &[usize], v: &[f32]) -> Result<Vec<f32>> {
        let batch = t.len();
        if z_t.len() != batch * PIXELS || v.len() != batch * EMBED_DIM {
            return Err(Error::Shape {
                op: "predict_noise",
                detail: format!("{} z_t values, {} v values for {batch} timesteps", z_t.len(), v.len()),
            });
        }
        let mut x = Vec::with_capacity(batch * INPUT_DIM);
        let mut temb = [0f32; TIME_DIM];
        for b in 0..batch {
            x.extend_from_slice(&z_t[b * PIXELS..(b + 1) * PIXELS]);
            kernels::sinusoid(t[b] as f32, TIME_DIM, &mut temb);
            x.extend_from_slice(&temb);
            x.extend_from_slice(&v[b * EMBED_DIM..(b + 1) * EMBED_DIM]);
        }
        let mut h = self.layers[0].apply(&x, batch);
        silu_in_place(&mut h);
        let mut h = self.layers[1].apply(&h, batch);
        silu_in_place(&mut h);
        let out = self.layers[2].apply(&h, batch);
        if !kernels::all_finite(&out) {
            return Err(Error::NonFinite { op: "predict_noise" });
        }
        Ok(out)
    }
}

/// ε̂ for a single noised image.
pub fn predict_noise(net: &DenoiserNet, z_t: &[f32], t: usize, v: &[f32]) -> Result<Vec<f32>> {
    net.predict(z_t, &[t], v)
}
