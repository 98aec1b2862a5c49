//! Small convolutional generator and discriminator with feature taps.
//!
//! Generator: dense projection to `32 x 4 x 4`, then upsample + 3x3 conv
//! stages halving channels (floor 8) until the image size, then a 3x3
//! output conv and `tanh`. The last stage output is the feature tap used by
//! the distance regularizer.
//!
//! Discriminator: stride-2 3x3 conv stages doubling channels from 8 down to
//! `4 x 4`, then one dense unit and a clamped sigmoid. Every conv stage is
//! tapped; ids start at 1.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

const LEAK: f64 = 0.2;
const BASE: usize = 4;
const GEN_BASE_CHANNELS: usize = 32;
const MIN_CHANNELS: usize = 8;
const DISC_BASE_CHANNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub latent_dim: usize,
    pub image_size: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            image_size: 16,
        }
    }
}

impl NetConfig {
    fn stages(&self) -> Result<usize> {
        let s = self.image_size;
        if s < 2 * BASE || !s.is_power_of_two() {
            return Err(Error::Invalid(format!(
                "image size must be a power of two >= 8, got {s}"
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::Invalid("latent dimension must be positive".into()));
        }
        Ok((s / BASE).trailing_zeros() as usize)
    }

    fn gen_channels(&self, stage: usize) -> usize {
        (GEN_BASE_CHANNELS >> (stage + 1)).max(MIN_CHANNELS)
    }

    fn disc_channels(&self, stage: usize) -> usize {
        DISC_BASE_CHANNELS << stage
    }

    /// `(channels, height, width)` of every discriminator tap, by layer id.
    pub fn disc_tap_shapes(&self) -> Result<Vec<(usize, [usize; 3])>> {
        let stages = self.stages()?;
        Ok((0..stages)
            .map(|i| {
                let side = self.image_size >> (i + 1);
                (i + 1, [self.disc_channels(i), side, side])
            })
            .collect())
    }

    /// Default selection: the last two conv layers.
    pub fn default_taps(&self) -> Result<Vec<usize>> {
        let n = self.stages()?;
        Ok((n.saturating_sub(1).max(1)..=n).collect())
    }
}

/// Named trainable tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.entries
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Binds every tensor as a leaf, tracked iff `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| if trainable { g.leaf(t) } else { g.constant(t) })
            .collect()
    }

    pub fn accumulate(&mut self, grads: &Gradients, vars: &[Var]) -> Result<()> {
        for ((_, t), &v) in self.entries.iter_mut().zip(vars) {
            grads.accumulate(v, t)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    /// Replaces values with same-named, same-shaped tensors from `other`.
    pub fn load_values(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        if other.len() != self.entries.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "expected {} parameter tensors, found {}",
                self.entries.len(),
                other.len()
            )));
        }
        for ((name, t), (oname, o)) in self.entries.iter_mut().zip(other) {
            if name != oname || t.shape() != o.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "parameter {name} {:?} does not match {oname} {:?}",
                    t.shape(),
                    o.shape()
                )));
            }
            t.data_mut().copy_from_slice(o.data());
        }
        Ok(())
    }
}

fn he_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data)
        .expect("finite init")
        .tracked()
}

fn bias(n: usize) -> Tensor {
    Tensor::zeros(&[n]).tracked()
}

#[derive(Debug, Clone)]
pub struct GenOutput {
    /// `[n, 1, s, s]` in `[-1, 1]`.
    pub images: Var,
    /// Last intermediate feature map, `[n, c, s, s]`.
    pub features: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    config: NetConfig,
    pub params: ParamSet,
}

impl Generator {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        let stages = config.stages()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.latent_dim;
        let fc_out = GEN_BASE_CHANNELS * BASE * BASE;
        let mut entries = vec![
            ("gen.fc.w".to_string(), he_tensor(&mut rng, &[d, fc_out], d)),
            ("gen.fc.b".to_string(), bias(fc_out)),
        ];
        let mut cin = GEN_BASE_CHANNELS;
        for i in 0..stages {
            let cout = config.gen_channels(i);
            entries.push((
                format!("gen.conv{}.w", i + 1),
                he_tensor(&mut rng, &[cout, cin, 3, 3], cin * 9),
            ));
            entries.push((format!("gen.conv{}.b", i + 1), bias(cout)));
            cin = cout;
        }
        entries.push((
            "gen.out.w".to_string(),
            he_tensor(&mut rng, &[1, cin, 3, 3], cin * 9),
        ));
        entries.push(("gen.out.b".to_string(), bias(1)));
        Ok(Self {
            config,
            params: ParamSet::new(entries),
        })
    }

    pub fn config(&self) -> NetConfig {
        self.config
    }

    pub fn forward(&self, g: &mut Graph, params: &[Var], z: Var) -> Result<GenOutput> {
        let d = self.config.latent_dim;
        let zs = g.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != d {
            return Err(Error::Shape {
                op: "generator_forward",
                left: zs,
                right: vec![0, d],
            });
        }
        if params.len() != self.params.len() {
            return Err(Error::Invalid("generator parameter count mismatch".into()));
        }
        let n = zs[0];
        let h = g.matmul(z, params[0])?;
        let h = g.add_bias(h, params[1])?;
        let h = g.leaky_relu(h, LEAK)?;
        let mut h = g.reshape(h, &[n, GEN_BASE_CHANNELS, BASE, BASE])?;
        let stages = (params.len() - 4) / 2;
        for i in 0..stages {
            let up = g.upsample2x(h)?;
            let c = g.conv2d(up, params[2 + 2 * i], 1, 1)?;
            let c = g.add_bias(c, params[3 + 2 * i])?;
            h = g.leaky_relu(c, LEAK)?;
        }
        let features = h;
        let o = g.conv2d(h, params[params.len() - 2], 1, 1)?;
        let o = g.add_bias(o, params[params.len() - 1])?;
        let images = g.tanh(o)?;
        Ok(GenOutput { images, features })
    }

    /// Generates images for a batch of latents without tracking gradients.
    pub fn generate(&self, latents: &[Vec<f64>]) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let z = latent_batch(&mut g, latents, self.config.latent_dim)?;
        let out = self.forward(&mut g, &vars, z)?;
        Ok((g.to_tensor(out.images), g.to_tensor(out.features)))
    }
}

/// Stacks latent vectors into an untracked `[n, d]` node.
pub fn latent_batch(g: &mut Graph, latents: &[Vec<f64>], d: usize) -> Result<Var> {
    if latents.is_empty() {
        return Err(Error::Invalid("empty latent batch".into()));
    }
    let mut data = Vec::with_capacity(latents.len() * d);
    for z in latents {
        if z.len() != d {
            return Err(Error::Shape {
                op: "generator_forward",
                left: vec![latents.len(), z.len()],
                right: vec![latents.len(), d],
            });
        }
        data.extend_from_slice(z);
    }
    g.input(vec![latents.len(), d], data)
}

#[derive(Debug, Clone)]
pub struct DiscOutput {
    /// Clamped probabilities, `[n]`.
    pub probs: Var,
    /// Every conv stage output `[n, c, h, w]` with its layer id.
    pub taps: Vec<(usize, Var)>,
    /// Flattened input of the dense head, `[n, features]`.
    pub penultimate: Var,
}

impl DiscOutput {
    pub fn tap(&self, id: usize) -> Option<Var> {
        self.taps.iter().find(|(l, _)| *l == id).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    config: NetConfig,
    pub params: ParamSet,
}

impl Discriminator {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        let stages = config.stages()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        let mut cin = 1;
        for i in 0..stages {
            let cout = config.disc_channels(i);
            entries.push((
                format!("disc.conv{}.w", i + 1),
                he_tensor(&mut rng, &[cout, cin, 3, 3], cin * 9),
            ));
            entries.push((format!("disc.conv{}.b", i + 1), bias(cout)));
            cin = cout;
        }
        let flat = cin * BASE * BASE;
        entries.push((
            "disc.fc.w".to_string(),
            he_tensor(&mut rng, &[flat, 1], flat),
        ));
        entries.push(("disc.fc.b".to_string(), bias(1)));
        Ok(Self {
            config,
            params: ParamSet::new(entries),
        })
    }

    pub fn config(&self) -> NetConfig {
        self.config
    }

    pub fn forward(&self, g: &mut Graph, params: &[Var], images: Var) -> Result<DiscOutput> {
        let s = self.config.image_size;
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::Shape {
                op: "discriminator_forward",
                left: shape,
                right: vec![0, 1, s, s],
            });
        }
        if params.len() != self.params.len() {
            return Err(Error::Invalid(
                "discriminator parameter count mismatch".into(),
            ));
        }
        let n = shape[0];
        let stages = (params.len() - 2) / 2;
        let mut h = images;
        let mut taps = Vec::with_capacity(stages);
        for i in 0..stages {
            let c = g.conv2d(h, params[2 * i], 2, 1)?;
            let c = g.add_bias(c, params[2 * i + 1])?;
            h = g.leaky_relu(c, LEAK)?;
            taps.push((i + 1, h));
        }
        let flat_len = g.shape(h)[1..].iter().product::<usize>();
        let penultimate = g.reshape(h, &[n, flat_len])?;
        let logit = g.matmul(penultimate, params[2 * stages])?;
        let logit = g.add_bias(logit, params[2 * stages + 1])?;
        let logit = g.reshape(logit, &[n])?;
        let p = g.sigmoid(logit)?;
        let probs = g.clamp_prob(p)?;
        Ok(DiscOutput {
            probs,
            taps,
            penultimate,
        })
    }

    /// Untracked evaluation: probabilities, taps as tensors, penultimate features.
    pub fn evaluate(&self, images: &Tensor) -> Result<(Vec<f64>, Vec<(usize, Tensor)>, Tensor)> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(images);
        let out = self.forward(&mut g, &vars, x)?;
        let taps = out
            .taps
            .iter()
            .map(|(id, v)| (*id, g.to_tensor(*v)))
            .collect();
        Ok((
            g.value(out.probs).to_vec(),
            taps,
            g.to_tensor(out.penultimate),
        ))
    }
}
