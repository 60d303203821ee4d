use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{ConditionStack, Modalities, PATCH_RADIUS};

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::{chw, Real, Tensor};

pub const GENERATOR: usize = 0;
pub const DISCRIMINATOR: usize = 1;
pub const LOG_VAR_LIMIT: f64 = 10.0;

/// Which b-value shell a model imputes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shell {
    B0,
    Weighted,
}

impl Shell {
    pub fn tag(self) -> &'static str {
        match self {
            Shell::B0 => "b0",
            Shell::Weighted => "weighted",
        }
    }
}

impl fmt::Display for Shell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Shell {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "b0" => Ok(Shell::B0),
            "weighted" | "dwi" => Ok(Shell::Weighted),
            other => Err(Error::Config(format!("unknown shell '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelHyper {
    pub z_dim: usize,
    pub x_plus_channels: usize,
    pub modalities: Modalities,
    /// Output widths of the stride-2 encoder blocks.
    pub encoder_channels: Vec<usize>,
    pub base_channels: usize,
    pub depth: usize,
    pub disc_channels: Vec<usize>,
    /// Tile z over the decoder input; otherwise z joins only at the U-Net bottleneck.
    pub broadcast: bool,
    pub lambda_rec: f64,
    pub lambda_kl: f64,
    pub lambda_gan: f64,
    pub leaky_slope: f64,
}

impl Default for ModelHyper {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelHyper {
    pub fn desk() -> Self {
        Self {
            z_dim: 32,
            x_plus_channels: 2 * PATCH_RADIUS + 1,
            modalities: Modalities::default(),
            encoder_channels: vec![32, 64, 128, 256],
            base_channels: 32,
            depth: 4,
            disc_channels: vec![32, 64, 128],
            broadcast: true,
            lambda_rec: 100.0,
            lambda_kl: 1.0,
            lambda_gan: 1.0,
            leaky_slope: 0.2,
        }
    }

    pub fn large() -> Self {
        Self {
            z_dim: 64,
            encoder_channels: vec![64, 128, 256, 512],
            base_channels: 64,
            disc_channels: vec![64, 128, 256],
            ..Self::desk()
        }
    }

    /// Small enough to train on a single CPU core in minutes.
    pub fn compact() -> Self {
        Self {
            z_dim: 8,
            encoder_channels: vec![8, 16, 32],
            base_channels: 8,
            depth: 2,
            disc_channels: vec![8, 16, 32],
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "large" => Ok(Self::large()),
            "compact" => Ok(Self::compact()),
            other => Err(Error::Config(format!("unknown model preset '{other}'"))),
        }
    }

    pub fn condition_channels(&self) -> usize {
        self.modalities.channels()
    }

    /// Channels of the stack fed to the decoder.
    pub fn decoder_in_channels(&self) -> usize {
        let z = if self.broadcast { self.z_dim } else { 0 };
        z + self.x_plus_channels + self.condition_channels() + 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.z_dim == 0 || self.base_channels == 0 || self.depth == 0 {
            return bad("z_dim, base_channels and depth must be positive");
        }
        if self.encoder_channels.is_empty() || self.disc_channels.is_empty() {
            return bad("encoder and discriminator need at least one block");
        }
        if self.encoder_channels.iter().chain(&self.disc_channels).any(|&c| c == 0) {
            return bad("zero-width layer");
        }
        if self.x_plus_channels == 0 {
            return bad("x_plus_channels must be positive");
        }
        for (name, v) in
            [("lambda_rec", self.lambda_rec), ("lambda_kl", self.lambda_kl), ("lambda_gan", self.lambda_gan)]
        {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Graph handles of one encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct LatentCode {
    pub mu: Var,
    pub log_var: Var,
    pub z: Var,
    /// log-variance entries that hit the clamp.
    pub clamped: usize,
}

/// Encoder, decoder and discriminator weights for one shell.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationModel<T = f32> {
    pub hyper: ModelHyper,
    pub shell: Shell,
    /// Encoder and decoder parameters.
    pub generator: ParamStore<T>,
    pub discriminator: ParamStore<T>,
}

fn conv_params<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) {
    store.add_he(format!("{name}.w"), &[cout, cin, k, k], cin * k * k, 1.0, rng);
    store.add_zeros(format!("{name}.b"), &[cout]);
}

impl<T: Real> ImputationModel<T> {
    pub fn new(hyper: ModelHyper, shell: Shell, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = ParamStore::new();
        let mut cin = hyper.x_plus_channels + hyper.condition_channels();
        for (l, &c) in hyper.encoder_channels.iter().enumerate() {
            conv_params(&mut gen, &format!("enc{l}"), cin, c, 3, &mut rng);
            cin = c;
        }
        for head in ["mu", "log_var"] {
            gen.add_he(format!("enc.{head}.w"), &[hyper.z_dim, cin], cin, 0.1, &mut rng);
            gen.add_zeros(format!("enc.{head}.b"), &[hyper.z_dim]);
        }
        let width = |l: usize| hyper.base_channels << l;
        let mut cin = hyper.decoder_in_channels();
        for l in 0..hyper.depth {
            conv_params(&mut gen, &format!("down{l}"), cin, width(l), 3, &mut rng);
            cin = width(l);
        }
        let bottom_in = cin + if hyper.broadcast { 0 } else { hyper.z_dim };
        conv_params(&mut gen, "bottom", bottom_in, width(hyper.depth), 3, &mut rng);
        let mut cin = width(hyper.depth);
        for l in (0..hyper.depth).rev() {
            conv_params(&mut gen, &format!("up{l}"), cin + width(l), width(l), 3, &mut rng);
            cin = width(l);
        }
        conv_params(&mut gen, "out", cin, 1, 1, &mut rng);

        let mut disc = ParamStore::new();
        let mut cin = 1 + hyper.condition_channels();
        for (l, &c) in hyper.disc_channels.iter().enumerate() {
            conv_params(&mut disc, &format!("disc{l}"), cin, c, 3, &mut rng);
            cin = c;
        }
        conv_params(&mut disc, "disc.out", cin, 1, 3, &mut rng);
        Ok(Self { hyper, shell, generator: gen, discriminator: disc })
    }

    pub fn param_count(&self) -> usize {
        self.generator.count() + self.discriminator.count()
    }

    pub fn is_finite(&self) -> bool {
        self.generator.is_finite() && self.discriminator.is_finite()
    }

    pub fn cast<U: Real>(&self) -> ImputationModel<U> {
        ImputationModel {
            hyper: self.hyper.clone(),
            shell: self.shell,
            generator: self.generator.cast(),
            discriminator: self.discriminator.cast(),
        }
    }

    fn gp(&self, g: &mut Graph<T>, name: &str) -> Var {
        let idx = self.generator.find(name).unwrap_or_else(|| panic!("missing generator parameter {name}"));
        g.param(GENERATOR, &self.generator, idx)
    }

    fn dp(&self, g: &mut Graph<T>, name: &str) -> Var {
        let idx = self.discriminator.find(name).unwrap_or_else(|| panic!("missing discriminator parameter {name}"));
        g.param(DISCRIMINATOR, &self.discriminator, idx)
    }

    fn block(&self, g: &mut Graph<T>, x: Var, w: Var, b: Var, stride: usize, norm: bool) -> Var {
        let y = g.conv2d(x, w, b, stride, 1);
        let y = if norm { g.instance_norm(y) } else { y };
        g.leaky_relu(y, self.hyper.leaky_slope)
    }

    fn check_channels(&self, g: &Graph<T>, v: Var, want: usize, what: &str) -> Result<()> {
        let (c, _, _) = chw(&g.value(v).shape);
        if c != want {
            return Err(Error::Shape(format!("{what} has {c} channels, model expects {want}")));
        }
        Ok(())
    }

    /// Posterior `q(z | x+, C)`. `eps = None` means ε = 0 (posterior mean).
    pub fn encode(&self, g: &mut Graph<T>, x_plus: Var, conditions: Var, eps: Option<Vec<T>>) -> Result<LatentCode> {
        self.check_channels(g, x_plus, self.hyper.x_plus_channels, "x_plus")?;
        self.check_channels(g, conditions, self.hyper.condition_channels(), "conditions")?;
        let mut x = g.concat(&[x_plus, conditions]);
        for l in 0..self.hyper.encoder_channels.len() {
            let (w, b) = (self.gp(g, &format!("enc{l}.w")), self.gp(g, &format!("enc{l}.b")));
            let (_, h, wd) = chw(&g.value(x).shape);
            if h < 2 || wd < 2 {
                return Err(Error::Shape(format!(
                    "input too small for {} encoder blocks",
                    self.hyper.encoder_channels.len()
                )));
            }
            x = self.block(g, x, w, b, 2, true);
            if !g.value(x).is_finite() {
                return Err(Error::Numerical(format!("non-finite activation in encoder layer {l}")));
            }
        }
        let pooled = g.global_avg_pool(x);
        let (w, b) = (self.gp(g, "enc.mu.w"), self.gp(g, "enc.mu.b"));
        let mu = g.linear(pooled, w, b);
        let (w, b) = (self.gp(g, "enc.log_var.w"), self.gp(g, "enc.log_var.b"));
        let raw = g.linear(pooled, w, b);
        let clamped = g.value(raw).data.iter().filter(|v| v.f64().abs() > LOG_VAR_LIMIT).count();
        let log_var = g.clamp(raw, -LOG_VAR_LIMIT, LOG_VAR_LIMIT);
        for (layer, v) in [("mu head", mu), ("log_var head", log_var)] {
            if !g.value(v).is_finite() {
                return Err(Error::Numerical(format!("non-finite activation in encoder {layer}")));
            }
        }
        let eps = eps.unwrap_or_else(|| vec![T::zero(); self.hyper.z_dim]);
        if eps.len() != self.hyper.z_dim {
            return Err(Error::Shape(format!("eps has {} entries, z_dim is {}", eps.len(), self.hyper.z_dim)));
        }
        let z = g.reparameterize(mu, log_var, eps);
        Ok(LatentCode { mu, log_var, z, clamped })
    }

    /// Tile z over the plane and append x+, conditions and two coordinate ramps.
    pub fn broadcast_and_concat(&self, g: &mut Graph<T>, z: Var, x_plus: Var, conditions: Var) -> Var {
        let (_, h, w) = chw(&g.value(x_plus).shape);
        let coords = g.constant(coordinate_channels(h, w));
        if self.hyper.broadcast {
            let tiled = g.tile(z, h, w);
            g.concat(&[tiled, x_plus, conditions, coords])
        } else {
            g.concat(&[x_plus, conditions, coords])
        }
    }

    /// U-Net decoder with a sigmoid output slice. `z` is used only when broadcasting is off.
    pub fn decode(&self, g: &mut Graph<T>, stack: Var, z: Var) -> Result<Var> {
        let (c, h, w) = chw(&g.value(stack).shape);
        let f = 1usize << self.hyper.depth;
        if h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!("{h}x{w} plane is not divisible by 2^{}", self.hyper.depth)));
        }
        if c != self.hyper.decoder_in_channels() {
            return Err(Error::Shape(format!(
                "decoder stack has {c} channels, expected {}",
                self.hyper.decoder_in_channels()
            )));
        }
        let mut x = stack;
        let mut skips = Vec::with_capacity(self.hyper.depth);
        for l in 0..self.hyper.depth {
            let (wt, b) = (self.gp(g, &format!("down{l}.w")), self.gp(g, &format!("down{l}.b")));
            x = self.block(g, x, wt, b, 1, true);
            skips.push(x);
            x = g.avg_pool2(x);
        }
        if !self.hyper.broadcast {
            let (_, bh, bw) = chw(&g.value(x).shape);
            let tiled = g.tile(z, bh, bw);
            x = g.concat(&[x, tiled]);
        }
        let (wt, b) = (self.gp(g, "bottom.w"), self.gp(g, "bottom.b"));
        x = self.block(g, x, wt, b, 1, true);
        for l in (0..self.hyper.depth).rev() {
            let up = g.upsample2(x);
            let cat = g.concat(&[up, skips[l]]);
            let (wt, b) = (self.gp(g, &format!("up{l}.w")), self.gp(g, &format!("up{l}.b")));
            x = self.block(g, cat, wt, b, 1, true);
        }
        let (wt, b) = (self.gp(g, "out.w"), self.gp(g, "out.b"));
        let logits = g.conv2d(x, wt, b, 1, 0);
        Ok(g.sigmoid(logits))
    }

    /// Patch logits for a full slice conditioned on C.
    pub fn discriminate(&self, g: &mut Graph<T>, slice: Var, conditions: Var) -> Var {
        let mut x = g.concat(&[slice, conditions]);
        for l in 0..self.hyper.disc_channels.len() {
            let (w, b) = (self.dp(g, &format!("disc{l}.w")), self.dp(g, &format!("disc{l}.b")));
            x = self.block(g, x, w, b, 2, l > 0);
        }
        let (w, b) = (self.dp(g, "disc.out.w"), self.dp(g, "disc.out.b"));
        g.conv2d(x, w, b, 1, 1)
    }

    /// Encode, broadcast and decode in one go.
    pub fn generate(
        &self,
        g: &mut Graph<T>,
        x_plus: Var,
        conditions: Var,
        eps: Option<Vec<T>>,
    ) -> Result<(LatentCode, Var)> {
        let code = self.encode(g, x_plus, conditions, eps)?;
        let stack = self.broadcast_and_concat(g, code.z, x_plus, conditions);
        let out = self.decode(g, stack, code.z)?;
        Ok((code, out))
    }

    /// Deterministic (ε = 0) imputation of one sagittal plane, row-major `H x W`.
    pub fn infer(&self, stack: &ConditionStack) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let (xp, cond) = stack_inputs(&mut g, stack);
        let (_, out) = self.generate(&mut g, xp, cond, None)?;
        Ok(g.value(out).to_f32())
    }
}

/// Row and column ramps in [-1, 1], shape `[2, h, w]`.
pub fn coordinate_channels<T: Real>(h: usize, w: usize) -> Tensor<T> {
    let ramp = |i: usize, n: usize| if n <= 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (n - 1) as f64 };
    let mut data = Vec::with_capacity(2 * h * w);
    for r in 0..h {
        data.extend((0..w).map(|_| T::c(ramp(r, h))));
    }
    for _ in 0..h {
        data.extend((0..w).map(|c| T::c(ramp(c, w))));
    }
    Tensor::new(vec![2, h, w], data)
}

/// Constant graph inputs for the x+ and condition parts of a stack.
pub fn stack_inputs<T: Real>(g: &mut Graph<T>, s: &ConditionStack) -> (Var, Var) {
    let xp = g.constant(Tensor::from_f32(&[s.x_plus_channels, s.h, s.w], &s.x_plus));
    let cond = g.constant(Tensor::from_f32(&[s.condition_channels, s.h, s.w], &s.conditions));
    (xp, cond)
}
