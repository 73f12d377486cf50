//! Style-based generator with separate identity and appearance mapping
//! networks, its discriminator, and the adversarial + contrastive training
//! step.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::appearance::ImageGrid;
use crate::autograd::{Conv2dSpec, Graph, Var};
use crate::contrastive::{contrastive_loss_graph, ContrastiveConfig, EmbeddingModel, LossParts};
use crate::error::{ensure, Error, Result};
use crate::latent::{make_training_batch, BatchPlan, DisentangledLatent, LatentDims, PairingConfig};
use crate::nn::{check_finite, Adam, Archive, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

const LRELU_SLOPE: f64 = 0.2;
const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanTrainConfig {
    pub batch_size: usize,
    pub pairing: PairingConfig,
    pub g_lr: f64,
    pub d_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// R1 weight; 0 disables the penalty.
    pub r1_gamma: f64,
    /// Steps between lazy R1 updates.
    pub r1_interval: u64,
    /// Decay of the generator weight average used for sampling; 0 samples
    /// from the live weights.
    pub ema_beta: f64,
    pub steps: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            pairing: PairingConfig::default(),
            g_lr: 0.002,
            d_lr: 0.002,
            beta1: 0.0,
            beta2: 0.99,
            r1_gamma: 1.0,
            r1_interval: 16,
            ema_beta: 0.995,
            steps: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub latent: LatentDims,
    /// Width of each half of the style vector.
    pub style_dim: usize,
    pub mapping_depth: usize,
    pub mapping_lr_mult: f64,
    /// Synthesis channels per level, from 4×4 up to `resolution`.
    pub channels: Vec<usize>,
    /// Discriminator channels per level, same indexing as `channels`.
    pub disc_channels: Vec<usize>,
    pub train: GanTrainConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            latent: LatentDims::default(),
            style_dim: 256,
            mapping_depth: 8,
            mapping_lr_mult: 0.01,
            channels: vec![64, 64, 64, 32, 16],
            disc_channels: vec![64, 64, 64, 32, 16],
            train: GanTrainConfig::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn num_levels(&self) -> usize {
        self.resolution.trailing_zeros() as usize - 1
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.resolution >= 16 && self.resolution.is_power_of_two(),
            Config,
            "resolution must be a power of two >= 16, got {}",
            self.resolution
        );
        ensure!(self.mapping_depth >= 1, Config, "mapping_depth must be >= 1");
        ensure!(self.style_dim >= 1, Config, "style_dim must be >= 1");
        ensure!(self.mapping_lr_mult > 0.0, Config, "mapping_lr_mult must be positive");
        self.latent.validate()?;
        let levels = self.num_levels();
        ensure!(
            self.channels.len() == levels && self.disc_channels.len() == levels,
            Config,
            "resolution {} needs {levels} channel entries per network, got {} and {}",
            self.resolution,
            self.channels.len(),
            self.disc_channels.len()
        );
        ensure!(
            self.channels.iter().chain(&self.disc_channels).all(|&c| c > 0),
            Config,
            "channel counts must be positive"
        );
        let t = &self.train;
        ensure!(t.batch_size >= 2, Config, "batch_size must be >= 2");
        ensure!(
            t.pairing.slots_needed() <= t.batch_size,
            Config,
            "pairing needs {} slots, batch_size is {}",
            t.pairing.slots_needed(),
            t.batch_size
        );
        ensure!(t.g_lr > 0.0 && t.d_lr > 0.0, Config, "learning rates must be positive");
        ensure!((0.0..1.0).contains(&t.beta1) && (0.0..1.0).contains(&t.beta2), Config, "Adam betas must be in [0, 1)");
        ensure!(t.r1_gamma >= 0.0, Config, "r1_gamma must be >= 0");
        ensure!(t.r1_interval >= 1, Config, "r1_interval must be >= 1");
        ensure!((0.0..1.0).contains(&t.ema_beta), Config, "ema_beta must be in [0, 1)");
        Ok(())
    }
}

/// A generator as seen by dataset synthesis and evaluation.
pub trait ImageGenerator {
    fn resolution(&self) -> usize;
    fn latent_dims(&self) -> LatentDims;
    /// One image per latent; noise is drawn from `noise_seed`.
    fn generate(&self, latents: &[DisentangledLatent], noise_seed: u64) -> Result<Vec<ImageGrid>>;
}

#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
    scale: f64,
    bias_mult: f64,
}

impl Dense {
    fn new<R: Rng>(p: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize, lr_mult: f64, bias_init: f64) -> Self {
        let w = p.add_normal(rng, format!("{name}.w"), &[fan_in, fan_out], 1.0 / lr_mult);
        let b = p.add(format!("{name}.b"), Tensor::full(&[fan_out], bias_init / lr_mult));
        Self { w, b, scale: lr_mult / (fan_in as f64).sqrt(), bias_mult: lr_mult }
    }

    fn forward(&self, g: &Graph, b: &Bound, x: Var) -> Var {
        let w = g.mul_scalar(b[self.w], self.scale);
        let bias = if self.bias_mult == 1.0 { b[self.b] } else { g.mul_scalar(b[self.b], self.bias_mult) };
        g.add_channel_bias(g.matmul(x, w), bias)
    }
}

#[derive(Clone, Debug)]
struct StyledConv {
    affine: Dense,
    weight: ParamId,
    bias: ParamId,
    noise_strength: Option<ParamId>,
    kernel: usize,
    scale: f64,
    up: bool,
    demod: bool,
}

impl StyledConv {
    fn forward(&self, g: &Graph, b: &Bound, x: Var, w: Var, noise: Option<&Tensor>) -> Var {
        let s = self.affine.forward(g, b, w);
        let wt = g.mul_scalar(b[self.weight], self.scale);
        let mut y = g.conv2d(g.mul_channel(x, s), wt, Conv2dSpec::same(self.kernel));
        if self.up {
            y = g.upsample2x(y);
        }
        if self.demod {
            let shape = g.shape(wt);
            let (cout, cin) = (shape[0], shape[1]);
            let w2 = g.transpose(g.sum_last(g.reshape(g.square(wt), &[cout, cin, self.kernel * self.kernel])));
            let d = g.rsqrt(g.matmul(g.square(s), w2), 1e-8);
            y = g.mul_channel(y, d);
        }
        if let (Some(strength), Some(noise)) = (self.noise_strength, noise) {
            let n = g.constant(noise.clone());
            y = g.add_across_channels(y, g.mul_by_scalar_var(n, b[strength]));
        }
        y = g.add_channel_bias(y, b[self.bias]);
        if self.demod {
            y = g.leaky_relu(y, LRELU_SLOPE, LRELU_GAIN);
        }
        y
    }
}

/// Mapping networks plus synthesis network.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    params: ParamStore,
    map_id: Vec<Dense>,
    map_app: Vec<Dense>,
    const_input: ParamId,
    convs: Vec<StyledConv>,
    to_rgb: Vec<StyledConv>,
}

fn mapping<R: Rng>(p: &mut ParamStore, rng: &mut R, tag: &str, in_dim: usize, cfg: &GeneratorConfig) -> Vec<Dense> {
    (0..cfg.mapping_depth)
        .map(|l| {
            let fan_in = if l == 0 { in_dim } else { cfg.style_dim };
            Dense::new(p, rng, &format!("{tag}.{l}"), fan_in, cfg.style_dim, cfg.mapping_lr_mult, 0.0)
        })
        .collect()
}

impl Generator {
    pub fn new<R: Rng>(cfg: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamStore::new();
        let map_id = mapping(&mut p, rng, "map_id", cfg.latent.id, cfg);
        let map_app = mapping(&mut p, rng, "map_app", cfg.latent.app, cfg);
        let wdim = 2 * cfg.style_dim;
        let c0 = cfg.channels[0];
        let const_input = p.add_normal(rng, "const", &[c0, 4, 4], 1.0);
        let mut convs = Vec::new();
        let mut to_rgb = Vec::new();
        let styled = |p: &mut ParamStore, rng: &mut R, name: String, cin: usize, cout: usize, k: usize, up: bool, demod: bool| {
            let affine = Dense::new(p, rng, &format!("{name}.affine"), wdim, cin, 1.0, 1.0);
            let weight = p.add_normal(rng, format!("{name}.weight"), &[cout, cin, k, k], 1.0);
            let bias = p.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
            let noise_strength = demod.then(|| p.add(format!("{name}.noise"), Tensor::scalar(0.0)));
            StyledConv { affine, weight, bias, noise_strength, kernel: k, scale: 1.0 / ((cin * k * k) as f64).sqrt(), up, demod }
        };
        for (level, &c) in cfg.channels.iter().enumerate() {
            let side = 4usize << level;
            if level == 0 {
                convs.push(styled(&mut p, rng, format!("b{side}.conv"), c0, c, 3, false, true));
            } else {
                let prev = cfg.channels[level - 1];
                convs.push(styled(&mut p, rng, format!("b{side}.conv0"), prev, c, 3, true, true));
                convs.push(styled(&mut p, rng, format!("b{side}.conv1"), c, c, 3, false, true));
            }
            to_rgb.push(styled(&mut p, rng, format!("b{side}.rgb"), c, 1, 1, false, false));
        }
        Ok(Self { cfg: cfg.clone(), params: p, map_id, map_app, const_input, convs, to_rgb })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn style_dim(&self) -> usize {
        2 * self.cfg.style_dim
    }

    fn run_mapping(&self, g: &Graph, b: &Bound, layers: &[Dense], z: Var) -> Var {
        let dim = g.shape(z)[1] as f64;
        let mut x = g.mul_scalar(g.l2_normalize_rows(z), dim.sqrt());
        for layer in layers {
            x = g.leaky_relu(layer.forward(g, b, x), LRELU_SLOPE, LRELU_GAIN);
        }
        x
    }

    /// Records both mapping networks; returns `(w_id, w_app, [w_id, w_app])`.
    pub fn style_graph(&self, g: &Graph, b: &Bound, z_id: Var, z_app: Var) -> (Var, Var, Var) {
        let w_id = self.run_mapping(g, b, &self.map_id, z_id);
        let w_app = self.run_mapping(g, b, &self.map_app, z_app);
        (w_id, w_app, g.concat_cols(w_id, w_app))
    }

    /// Shapes of the per-layer noise inputs for a batch.
    pub fn noise_shapes(&self, batch: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for level in 0..self.cfg.channels.len() {
            let side = 4usize << level;
            let per_level = if level == 0 { 1 } else { 2 };
            for _ in 0..per_level {
                out.push(vec![batch, 1, side, side]);
            }
        }
        out
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> Vec<Tensor> {
        self.noise_shapes(batch)
            .iter()
            .map(|s| Tensor::from_fn(s, |_| rng.sample::<f64, _>(StandardNormal)))
            .collect()
    }

    /// Synthesis from style vectors `w: [B, 2·style_dim]` to `[B, 1, R, R]` in `[0, 1]`.
    pub fn synthesis_graph(&self, g: &Graph, b: &Bound, w: Var, noise: &[Tensor]) -> Var {
        let batch = g.shape(w)[0];
        let mut x = g.broadcast_batch(b[self.const_input], batch);
        let mut rgb: Option<Var> = None;
        let mut conv = self.convs.iter();
        let mut noise = noise.iter();
        for level in 0..self.cfg.channels.len() {
            let per_level = if level == 0 { 1 } else { 2 };
            for _ in 0..per_level {
                x = conv.next().expect("conv layer").forward(g, b, x, w, noise.next());
            }
            let y = self.to_rgb[level].forward(g, b, x, w, None);
            rgb = Some(match rgb {
                None => y,
                Some(prev) => g.add(g.upsample2x(prev), y),
            });
        }
        g.sigmoid(rgb.expect("at least one level"))
    }

    fn latent_tensors(&self, latents: &[DisentangledLatent]) -> Result<(Tensor, Tensor)> {
        let dims = self.cfg.latent;
        let mut zi = Vec::with_capacity(latents.len() * dims.id);
        let mut za = Vec::with_capacity(latents.len() * dims.app);
        for (k, l) in latents.iter().enumerate() {
            ensure!(l.dims() == dims, Usage, "latent {k} has dims {:?}, generator expects {dims:?}", l.dims());
            zi.extend_from_slice(l.z_id());
            za.extend_from_slice(l.z_app());
        }
        Ok((Tensor::new(&[latents.len(), dims.id], zi), Tensor::new(&[latents.len(), dims.app], za)))
    }

    /// Full forward pass; returns the style vectors and the images.
    pub fn forward(&self, g: &Graph, b: &Bound, latents: &[DisentangledLatent], noise: &[Tensor]) -> Result<(Var, Var)> {
        let (zi, za) = self.latent_tensors(latents)?;
        let (_, _, w) = self.style_graph(g, b, g.constant(zi), g.constant(za));
        Ok((w, self.synthesis_graph(g, b, w, noise)))
    }

    /// Style vector `[w_id, w_app]` of one latent.
    pub fn map_latents(&self, z: &DisentangledLatent) -> Result<Vec<f64>> {
        let g = Graph::new();
        let b = self.params.bind(&g, false);
        let (zi, za) = self.latent_tensors(std::slice::from_ref(z))?;
        let (_, _, w) = self.style_graph(&g, &b, g.constant(zi), g.constant(za));
        let out = g.value(w).data().to_vec();
        Ok(out)
    }

    /// One image from a style vector.
    pub fn synthesize(&self, style: &[f64], noise_seed: u64) -> Result<ImageGrid> {
        ensure!(
            style.len() == self.style_dim(),
            Usage,
            "style vector of length {}, generator expects {}",
            style.len(),
            self.style_dim()
        );
        let g = Graph::new();
        let b = self.params.bind(&g, false);
        let w = g.constant(Tensor::new(&[1, style.len()], style.to_vec()));
        let noise = self.sample_noise(&mut ChaCha8Rng::seed_from_u64(noise_seed), 1);
        let img = self.synthesis_graph(&g, &b, w, &noise);
        let r = self.cfg.resolution;
        ImageGrid::new(r, r, g.value(img).data().to_vec())
    }
}

const GENERATE_CHUNK: usize = 32;

impl ImageGenerator for Generator {
    fn resolution(&self) -> usize {
        self.cfg.resolution
    }

    fn latent_dims(&self) -> LatentDims {
        self.cfg.latent
    }

    fn generate(&self, latents: &[DisentangledLatent], noise_seed: u64) -> Result<Vec<ImageGrid>> {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let r = self.cfg.resolution;
        let mut out = Vec::with_capacity(latents.len());
        for chunk in latents.chunks(GENERATE_CHUNK) {
            let g = Graph::new();
            let b = self.params.bind(&g, false);
            let noise = self.sample_noise(&mut rng, chunk.len());
            let (_, img) = self.forward(&g, &b, chunk, &noise)?;
            let v = g.value(img);
            for i in 0..chunk.len() {
                out.push(ImageGrid::new(r, r, v.row(i).to_vec())?);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
struct PlainConv {
    w: ParamId,
    b: ParamId,
    kernel: usize,
    scale: f64,
}

impl PlainConv {
    fn new<R: Rng>(p: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let w = p.add_normal(rng, format!("{name}.w"), &[cout, cin, k, k], 1.0);
        let b = p.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, kernel: k, scale: 1.0 / ((cin * k * k) as f64).sqrt() }
    }

    fn forward(&self, g: &Graph, b: &Bound, x: Var) -> Var {
        let w = g.mul_scalar(b[self.w], self.scale);
        let y = g.add_channel_bias(g.conv2d(x, w, Conv2dSpec::same(self.kernel)), b[self.b]);
        g.leaky_relu(y, LRELU_SLOPE, LRELU_GAIN)
    }
}

/// Convolutional critic built only from piecewise-linear pieces.
#[derive(Clone, Debug)]
pub struct Discriminator {
    params: ParamStore,
    resolution: usize,
    from_rgb: PlainConv,
    blocks: Vec<(PlainConv, PlainConv)>,
    final_conv: PlainConv,
    fc: Dense,
    out: Dense,
}

impl Discriminator {
    pub fn new<R: Rng>(cfg: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.disc_channels;
        let top = ch.len() - 1;
        let mut p = ParamStore::new();
        let from_rgb = PlainConv::new(&mut p, rng, "from_rgb", 1, ch[top], 1);
        let mut blocks = Vec::new();
        for level in (1..=top).rev() {
            let side = 4usize << level;
            let a = PlainConv::new(&mut p, rng, &format!("b{side}.conv0"), ch[level], ch[level], 3);
            let c = PlainConv::new(&mut p, rng, &format!("b{side}.conv1"), ch[level], ch[level - 1], 3);
            blocks.push((a, c));
        }
        let final_conv = PlainConv::new(&mut p, rng, "b4.conv", ch[0], ch[0], 3);
        let fc = Dense::new(&mut p, rng, "b4.fc", ch[0] * 16, ch[0], 1.0, 0.0);
        let out = Dense::new(&mut p, rng, "out", ch[0], 1, 1.0, 0.0);
        Ok(Self { params: p, resolution: cfg.resolution, from_rgb, blocks, final_conv, fc, out })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// `images: [B, 1, R, R]` in `[0, 1]` → logits `[B, 1]`.
    pub fn forward(&self, g: &Graph, b: &Bound, images: Var) -> Var {
        let n = g.shape(images)[0];
        let x = g.add_scalar(g.mul_scalar(images, 2.0), -1.0);
        let mut x = self.from_rgb.forward(g, b, x);
        for (c0, c1) in &self.blocks {
            x = g.avg_pool2(c1.forward(g, b, c0.forward(g, b, x)));
        }
        x = self.final_conv.forward(g, b, x);
        let c = g.shape(x)[1];
        let x = g.reshape(x, &[n, c * 16]);
        let x = g.leaky_relu(self.fc.forward(g, b, x), LRELU_SLOPE, LRELU_GAIN);
        self.out.forward(g, b, x)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }
}

/// Per-step losses; `total` is the generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub adversarial: f64,
    pub id_part: f64,
    pub app_part: f64,
    pub total: f64,
    pub disc_loss: f64,
    /// Last computed R1 penalty, `None` on steps without one.
    pub r1_penalty: Option<f64>,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,adv_loss,id_part,app_part,total";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.adversarial, self.id_part, self.app_part, self.total)
    }
}

/// Everything needed to resume training bit-exactly.
#[derive(Clone, Debug)]
pub struct GanState {
    pub generator: Generator,
    /// Weight average used for sampling.
    pub generator_ema: Generator,
    pub discriminator: Discriminator,
    g_opt: Adam,
    d_opt: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

fn fault(step: u64, component: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::TrainingFault { step, component: component.to_string(), value })
    }
}

fn stack(images: &[ImageGrid], side: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * side * side);
    for (k, im) in images.iter().enumerate() {
        ensure!(im.dims() == (side, side), Usage, "real image {k} is {:?}, expected {side}x{side}", im.dims());
        data.extend_from_slice(im.pixels());
    }
    Ok(Tensor::new(&[images.len(), 1, side, side], data))
}

impl GanState {
    pub fn new(cfg: &GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = Generator::new(cfg, &mut rng)?;
        let discriminator = Discriminator::new(cfg, &mut rng)?;
        let t = &cfg.train;
        let g_opt = Adam::new(generator.params(), t.g_lr, t.beta1, t.beta2);
        let d_opt = Adam::new(discriminator.params(), t.d_lr, t.beta1, t.beta2);
        Ok(Self { generator_ema: generator.clone(), generator, discriminator, g_opt, d_opt, step: 0, rng })
    }

    pub fn config(&self) -> &GeneratorConfig {
        self.generator.config()
    }

    /// Draws a training batch plan from the state's random source.
    pub fn sample_plan(&mut self) -> Result<BatchPlan> {
        let t = &self.generator.cfg.train;
        make_training_batch(&mut self.rng, t.batch_size, t.pairing, self.generator.cfg.latent)
    }

    /// Uniformly samples `n` real images with replacement.
    pub fn sample_real<'a>(&mut self, pool: &'a [ImageGrid], n: usize) -> Result<Vec<ImageGrid>> {
        ensure!(!pool.is_empty(), Usage, "empty real image pool");
        Ok((0..n).map(|_| pool[self.rng.gen_range(0..pool.len())].clone()).collect())
    }

    fn disc_step(&mut self, real: &Tensor, plan: &BatchPlan) -> Result<f64> {
        let step = self.step;
        let noise = self.generator.sample_noise(&mut self.rng, plan.len());
        let g = Graph::new();
        let gb = self.generator.params.bind(&g, false);
        let db = self.discriminator.params.bind(&g, true);
        let (_, fake) = self.generator.forward(&g, &gb, plan.latents(), &noise)?;
        let fake = g.constant((*g.value(fake)).clone());
        let real_v = g.constant(real.clone());
        let l_fake = g.mean(g.softplus(self.discriminator.forward(&g, &db, fake)));
        let real_logits = self.discriminator.forward(&g, &db, real_v);
        let l_real = g.mean(g.softplus(g.mul_scalar(real_logits, -1.0)));
        let loss = g.add(l_fake, l_real);
        let value = fault(step, "discriminator loss", g.value(loss).item())?;
        let grads = self.discriminator.params.collect_grads(&g.backward(loss), &db);
        check_finite(&grads, &self.discriminator.params, step)?;
        self.d_opt.step(&mut self.discriminator.params, &grads, &[]);
        Ok(value)
    }

    /// Lazy R1 update; returns the penalty before the update.
    fn r1_step(&mut self, real: &Tensor) -> Result<f64> {
        let t = self.generator.cfg.train.clone();
        let (penalty, grad) = r1_penalty_and_grad(&self.discriminator, real, t.r1_gamma)?;
        fault(self.step, "R1 penalty", penalty)?;
        let scaled: Vec<Tensor> = grad
            .into_iter()
            .map(|mut g| {
                g.scale_assign(t.r1_interval as f64);
                g
            })
            .collect();
        check_finite(&scaled, &self.discriminator.params, self.step)?;
        self.d_opt.step(&mut self.discriminator.params, &scaled, &[]);
        Ok(penalty)
    }

    fn gen_step(&mut self, plan: &BatchPlan, ccfg: &ContrastiveConfig, model: &dyn EmbeddingModel) -> Result<(f64, LossParts)> {
        let step = self.step;
        let noise = self.generator.sample_noise(&mut self.rng, plan.len());
        let g = Graph::new();
        let gb = self.generator.params.bind(&g, true);
        let db = self.discriminator.params.bind(&g, false);
        let (_, fake) = self.generator.forward(&g, &gb, plan.latents(), &noise)?;
        let logits = self.discriminator.forward(&g, &db, fake);
        let adv = g.mean(g.softplus(g.mul_scalar(logits, -1.0)));
        let lc = contrastive_loss_graph(&g, fake, plan, ccfg, model)?;
        let loss = g.add(adv, lc.total);
        let parts = lc.values(&g);
        let adv_v = fault(step, "adversarial loss", g.value(adv).item())?;
        fault(step, "id_part", parts.id_part)?;
        fault(step, "app_part", parts.app_part)?;
        fault(step, "generator total", g.value(loss).item())?;
        let grads = self.generator.params.collect_grads(&g.backward(loss), &gb);
        check_finite(&grads, &self.generator.params, step)?;
        self.g_opt.step(&mut self.generator.params, &grads, &[]);
        Ok((adv_v, parts))
    }

    fn update_ema(&mut self) {
        let beta = self.generator.cfg.train.ema_beta;
        for (e, p) in self.generator_ema.params.values_mut().iter_mut().zip(self.generator.params.values()) {
            for (ev, pv) in e.data_mut().iter_mut().zip(p.data()) {
                *ev = beta * *ev + (1.0 - beta) * pv;
            }
        }
    }

    /// One alternating update: discriminator on real vs generated, lazy R1,
    /// then the generator on adversarial plus contrastive loss.
    pub fn train_step(
        &mut self,
        plan: &BatchPlan,
        real_batch: &[ImageGrid],
        ccfg: &ContrastiveConfig,
        model: &dyn EmbeddingModel,
    ) -> Result<LossReport> {
        ccfg.validate()?;
        ensure!(!real_batch.is_empty(), Usage, "empty real batch");
        let res = self.generator.cfg.resolution;
        let real = stack(real_batch, res)?;
        let disc_loss = self.disc_step(&real, plan)?;
        let t = self.generator.cfg.train.clone();
        let r1_penalty = if t.r1_gamma > 0.0 && self.step % t.r1_interval == 0 {
            Some(self.r1_step(&real)?)
        } else {
            None
        };
        let (adversarial, parts) = self.gen_step(plan, ccfg, model)?;
        self.update_ema();
        let report = LossReport {
            step: self.step,
            adversarial,
            id_part: parts.id_part,
            app_part: parts.app_part,
            total: adversarial + parts.total,
            disc_loss,
            r1_penalty,
        };
        self.step += 1;
        Ok(report)
    }

    /// Generator used for sampling: the weight average when enabled.
    pub fn sampler(&self) -> &Generator {
        if self.generator.cfg.train.ema_beta > 0.0 {
            &self.generator_ema
        } else {
            &self.generator
        }
    }

    pub fn to_archive(&self) -> Archive {
        let rng = &self.rng;
        let meta = serde_json::json!({
            "kind": "gan",
            "config": self.generator.cfg,
            "step": self.step,
            "rng": {
                "seed": rng.get_seed().iter().map(|b| format!("{b:02x}")).collect::<String>(),
                "stream": rng.get_stream().to_string(),
                "word_pos": rng.get_word_pos().to_string(),
            },
            "g_opt": self.g_opt,
            "d_opt": self.d_opt,
        });
        let mut a = Archive::new(meta);
        a.extend(self.generator.params.to_named("g."));
        a.extend(self.generator_ema.params.to_named("g_ema."));
        a.extend(self.discriminator.params.to_named("d."));
        a.extend(self.g_opt.to_named("g_opt."));
        a.extend(self.d_opt.to_named("d_opt."));
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let meta = &a.meta;
        let bad = |d: &str| Error::format("GAN checkpoint", d);
        if meta.get("kind").and_then(|k| k.as_str()) != Some("gan") {
            return Err(bad("not a GAN checkpoint"));
        }
        let cfg: GeneratorConfig =
            serde_json::from_value(meta["config"].clone()).map_err(|e| Error::format("GAN checkpoint config", e))?;
        let mut state = Self::new(&cfg, 0)?;
        state.generator.params.load_named(a, "g.")?;
        state.generator_ema.params.load_named(a, "g_ema.")?;
        state.discriminator.params.load_named(a, "d.")?;
        let hyper = |key: &str| -> Result<Adam> {
            serde_json::from_value(meta[key].clone()).map_err(|e| Error::format("GAN checkpoint optimizer", e))
        };
        let (g_hyper, d_hyper) = (hyper("g_opt")?, hyper("d_opt")?);
        for (opt, h, prefix) in [(&mut state.g_opt, g_hyper, "g_opt."), (&mut state.d_opt, d_hyper, "d_opt.")] {
            opt.lr = h.lr;
            opt.beta1 = h.beta1;
            opt.beta2 = h.beta2;
            opt.eps = h.eps;
            opt.t = h.t;
            opt.load_named(a, prefix)?;
        }
        state.step = meta["step"].as_u64().ok_or_else(|| bad("missing step"))?;
        let r = &meta["rng"];
        let seed_hex = r["seed"].as_str().ok_or_else(|| bad("missing rng seed"))?;
        ensure!(seed_hex.len() == 64, Usage, "rng seed must be 64 hex digits");
        let mut seed = [0u8; 32];
        for (i, s) in seed.iter_mut().enumerate() {
            *s = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| bad("rng seed is not hex"))?;
        }
        let parse = |key: &str| -> Result<u128> {
            r[key].as_str().and_then(|s| s.parse().ok()).ok_or_else(|| bad(&format!("missing rng {key}")))
        };
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(parse("stream")? as u64);
        rng.set_word_pos(parse("word_pos")?);
        state.rng = rng;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// R1 penalty `γ/(2N) Σ_n ‖∇_x D(x_n)‖²` on real images and its gradient
/// with respect to the discriminator parameters.
///
/// The parameter gradient needs a mixed second derivative. With the input
/// gradient `v = ∇_x ΣD(x)` held fixed it equals the directional derivative
/// of `∇_θ ΣD` along `v`, taken here by a central difference. The critic is
/// piecewise linear in its input, so the difference is exact unless the step
/// crosses an activation kink.
pub fn r1_penalty_and_grad(disc: &Discriminator, real: &Tensor, gamma: f64) -> Result<(f64, Vec<Tensor>)> {
    let n = real.dim(0) as f64;
    let grad_at = |x: &Tensor| -> (Tensor, Vec<Tensor>) {
        let g = Graph::new();
        let b = disc.params.bind(&g, true);
        let xv = g.leaf(x.clone());
        let out = g.sum(disc.forward(&g, &b, xv));
        let grads = g.backward(out);
        (grads.get_or_zeros(xv, x.shape()), disc.params.collect_grads(&grads, &b))
    };
    let (v, _) = grad_at(real);
    let sq = v.sum_sq();
    let penalty = gamma / (2.0 * n) * sq;
    let rms = (sq / v.len() as f64).sqrt();
    if rms == 0.0 {
        let zeros = disc.params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        return Ok((penalty, zeros));
    }
    let eps = 1e-6 / rms;
    let shifted = |sign: f64| real.zip_map(&v, |x, d| x + sign * eps * d);
    let (_, plus) = grad_at(&shifted(1.0));
    let (_, minus) = grad_at(&shifted(-1.0));
    let k = gamma / n / (2.0 * eps);
    let grads = plus.into_iter().zip(minus).map(|(p, m)| p.zip_map(&m, |a, b| k * (a - b))).collect();
    Ok((penalty, grads))
}

/// Tiles generated images: row `r` shares appearance latent `r`, column `c`
/// shares identity latent `c`.
pub fn sample_grid<G: ImageGenerator + ?Sized>(gen: &G, n_id: usize, n_app: usize, seed: u64) -> Result<ImageGrid> {
    ensure!(n_id >= 1 && n_app >= 1, Usage, "grid needs at least one row and column");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = gen.latent_dims();
    let ids: Vec<Vec<f64>> = (0..n_id).map(|_| crate::latent::sample_vector(&mut rng, dims.id)).collect();
    let apps: Vec<Vec<f64>> = (0..n_app).map(|_| crate::latent::sample_vector(&mut rng, dims.app)).collect();
    let mut latents = Vec::with_capacity(n_id * n_app);
    for a in &apps {
        for i in &ids {
            latents.push(DisentangledLatent::new(i.clone(), a.clone())?);
        }
    }
    let images = gen.generate(&latents, seed)?;
    let r = gen.resolution();
    Ok(ImageGrid::from_fn(n_app * r, n_id * r, |y, x| images[(y / r) * n_id + x / r].get(y % r, x % r)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appearance::AppearanceFilterConfig;
    use crate::contrastive::{HingeConfig, ProjectionEmbedder};
    use crate::latent::sample_latent;

    pub(crate) fn tiny_config() -> GeneratorConfig {
        GeneratorConfig {
            resolution: 16,
            latent: LatentDims::new(6, 5),
            style_dim: 8,
            mapping_depth: 2,
            channels: vec![4, 4, 3],
            disc_channels: vec![4, 3, 3],
            train: GanTrainConfig {
                batch_size: 4,
                pairing: PairingConfig { num_same_id_pairs: 1, num_same_app_pairs: 1 },
                r1_interval: 2,
                ..GanTrainConfig::default()
            },
            ..GeneratorConfig::default()
        }
    }

    fn ccfg(w_app: f64) -> ContrastiveConfig {
        ContrastiveConfig {
            w_app,
            filter: AppearanceFilterConfig::for_resolution(16),
            ..ContrastiveConfig::for_resolution(16)
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.resolution = 24;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny_config();
        c.resolution = 8;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.mapping_depth = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.channels.pop();
        assert!(c.validate().is_err());
        assert!(GeneratorConfig::default().validate().is_ok());
    }

    #[test]
    fn style_halves_follow_their_latents() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gen = Generator::new(&tiny_config(), &mut rng).unwrap();
        let a = sample_latent(&mut rng, gen.latent_dims()).unwrap();
        let b = a.with_app(vec![0.3; 5]).unwrap();
        let c = a.with_id(vec![-0.2; 6]).unwrap();
        let (wa, wb, wc) = (gen.map_latents(&a).unwrap(), gen.map_latents(&b).unwrap(), gen.map_latents(&c).unwrap());
        assert_eq!(wa.len(), 16);
        assert_eq!(wa[..8], wb[..8]);
        assert_ne!(wa[8..], wb[8..]);
        assert_eq!(wa[8..], wc[8..]);
        assert_ne!(wa[..8], wc[..8]);
        let wrong = DisentangledLatent::new(vec![0.0; 2], vec![0.0; 5]).unwrap();
        assert!(matches!(gen.map_latents(&wrong), Err(Error::Usage(_))));
    }

    #[test]
    fn synthesis_is_deterministic_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gen = Generator::new(&tiny_config(), &mut rng).unwrap();
        let z = sample_latent(&mut rng, gen.latent_dims()).unwrap();
        let s = gen.map_latents(&z).unwrap();
        let a = gen.synthesize(&s, 9).unwrap();
        let b = gen.synthesize(&s, 9).unwrap();
        assert_eq!(a.dims(), (16, 16));
        assert_eq!(a, b);
        assert!(gen.synthesize(&s[..3], 9).is_err());
    }

    #[test]
    fn batched_generation_matches_single_synthesis_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gen = Generator::new(&tiny_config(), &mut rng).unwrap();
        let zs: Vec<_> = (0..5).map(|_| sample_latent(&mut rng, gen.latent_dims()).unwrap()).collect();
        let a = gen.generate(&zs, 4).unwrap();
        let b = gen.generate(&zs, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(ImageGrid::in_unit_range));
    }

    #[test]
    fn mapping_paths_are_not_cross_wired() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gen = Generator::new(&tiny_config(), &mut rng).unwrap();
        let g = Graph::new();
        let b = gen.params().bind(&g, true);
        let zi = g.constant(Tensor::from_fn(&[3, 6], |i| (i as f64 * 0.37).sin()));
        let za = g.constant(Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.91).cos()));
        let (w_id, w_app, _) = gen.style_graph(&g, &b, zi, za);
        let grads = gen.params().collect_grads(&g.backward(g.sum(g.square(w_app))), &b);
        for (name, gr) in gen.params().names().iter().zip(&grads) {
            if name.starts_with("map_id") {
                assert!(gr.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        let grads = gen.params().collect_grads(&g.backward(g.sum(g.square(w_id))), &b);
        for (name, gr) in gen.params().names().iter().zip(&grads) {
            if name.starts_with("map_app") {
                assert!(gr.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn appearance_loss_on_constant_synthesis_leaves_mapping_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gen = Generator::new(&tiny_config(), &mut rng).unwrap();
        let model = ProjectionEmbedder::random(&mut rng, (16, 16), 4);
        let plan = make_training_batch(&mut rng, 4, tiny_config().train.pairing, gen.latent_dims()).unwrap();
        let g = Graph::new();
        let b = gen.params().bind(&g, true);
        let (zi, za) = gen.latent_tensors(plan.latents()).unwrap();
        let (_, _, w) = gen.style_graph(&g, &b, g.constant(zi), g.constant(za));
        // constant-image synthesis: the style reaches the images only with weight zero
        let base = g.constant(Tensor::from_fn(&[4, 1, 16, 16], |i| ((i * 7919) % 101) as f64 / 101.0));
        let zero = g.mul_scalar(g.sum(w), 0.0);
        let images = g.add(base, g.mul_by_scalar_var(g.constant(Tensor::full(&[4, 1, 16, 16], 1.0)), zero));
        let lc = contrastive_loss_graph(&g, images, &plan, &ccfg(20.0), &model).unwrap();
        let grads = gen.params().collect_grads(&g.backward(lc.app_part), &b);
        for (name, gr) in gen.params().names().iter().zip(&grads) {
            if name.starts_with("map_") {
                assert!(gr.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn same_id_slots_share_identity_style() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gen = Generator::new(&tiny_config(), &mut rng).unwrap();
        let plan = make_training_batch(&mut rng, 4, tiny_config().train.pairing, gen.latent_dims()).unwrap();
        let g = Graph::new();
        let b = gen.params().bind(&g, false);
        let noise = gen.sample_noise(&mut rng, 4);
        let (w, _) = gen.forward(&g, &b, plan.latents(), &noise).unwrap();
        let wv = g.value(w);
        assert_eq!(wv.row(0)[..8], wv.row(1)[..8]);
        assert_eq!(wv.row(2)[8..], wv.row(3)[8..]);
    }

    #[test]
    fn zero_contrastive_terms_leave_pure_adversarial_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = tiny_config();
        let gen = Generator::new(&cfg, &mut rng).unwrap();
        let disc = Discriminator::new(&cfg, &mut rng).unwrap();
        let model = ProjectionEmbedder::random(&mut rng, (16, 16), 4);
        let noise = gen.sample_noise(&mut rng, 4);
        let plan = make_training_batch(&mut rng, 4, PairingConfig { num_same_id_pairs: 0, num_same_app_pairs: 1 }, gen.latent_dims()).unwrap();
        // no same-ID pairs and a vanishing τ-: every ID term sits in its zero region
        let mut zero = ccfg(0.0);
        zero.id = HingeConfig { tau_plus: 0.0, tau_minus: f64::MIN_POSITIVE, c_plus: 1.0, c_minus: 1.0 };
        let grads_of = |with_lc: bool| {
            let g = Graph::new();
            let gb = gen.params().bind(&g, true);
            let db = disc.params().bind(&g, false);
            let (_, fake) = gen.forward(&g, &gb, plan.latents(), &noise).unwrap();
            let adv = g.mean(g.softplus(g.mul_scalar(disc.forward(&g, &db, fake), -1.0)));
            let loss = if with_lc {
                let lc = contrastive_loss_graph(&g, fake, &plan, &zero, &model).unwrap();
                assert_eq!(lc.values(&g).total, 0.0);
                g.add(adv, lc.total)
            } else {
                adv
            };
            gen.params().collect_grads(&g.backward(loss), &gb)
        };
        assert_eq!(grads_of(true), grads_of(false));
    }

    #[test]
    fn r1_gradient_matches_penalty_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = tiny_config();
        let mut disc = Discriminator::new(&cfg, &mut rng).unwrap();
        let real = Tensor::from_fn(&[2, 1, 16, 16], |_| rng.gen());
        let gamma = 3.0;
        let (_, grads) = r1_penalty_and_grad(&disc, &real, gamma).unwrap();
        let penalty = |d: &Discriminator| r1_penalty_and_grad(d, &real, gamma).unwrap().0;
        let h = 1e-6;
        let mut checked = 0;
        for k in 0..disc.params().len() {
            let len = disc.params().values()[k].len();
            for i in (0..len).step_by((len / 3).max(1)) {
                let orig = disc.params().values()[k].data()[i];
                disc.params_mut().values_mut()[k].data_mut()[i] = orig + h;
                let up = penalty(&disc);
                disc.params_mut().values_mut()[k].data_mut()[i] = orig - h;
                let down = penalty(&disc);
                disc.params_mut().values_mut()[k].data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads[k].data()[i];
                assert!(
                    (an - fd).abs() <= 1e-4 * an.abs().max(fd.abs()).max(1e-6),
                    "{} [{i}]: {an} vs {fd}",
                    disc.params().names()[k]
                );
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn train_step_bookkeeping_and_checkpoint_round_trip() {
        let cfg = tiny_config();
        let mut state = GanState::new(&cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = ProjectionEmbedder::random(&mut rng, (16, 16), 4);
        let pool: Vec<ImageGrid> = (0..6).map(|_| ImageGrid::from_fn(16, 16, |_, _| rng.gen())).collect();
        let c = ccfg(2.0);
        for _ in 0..3 {
            let plan = state.sample_plan().unwrap();
            let real = state.sample_real(&pool, 4).unwrap();
            let r = state.train_step(&plan, &real, &c, &model).unwrap();
            assert_eq!(r.total, r.adversarial + (r.id_part + c.w_app * r.app_part));
        }
        let bytes = state.to_archive().to_bytes();
        let mut restored = GanState::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(restored.step, 3);
        let probes: Vec<_> = (0..3).map(|_| sample_latent(&mut rng, cfg.latent).unwrap()).collect();
        assert_eq!(state.sampler().generate(&probes, 5).unwrap(), restored.sampler().generate(&probes, 5).unwrap());
        // continued training stays in lockstep
        let (pa, pb) = (state.sample_plan().unwrap(), restored.sample_plan().unwrap());
        assert_eq!(pa, pb);
        let ra = state.sample_real(&pool, 4).unwrap();
        let rb = restored.sample_real(&pool, 4).unwrap();
        let a = state.train_step(&pa, &ra, &c, &model).unwrap();
        let b = restored.train_step(&pb, &rb, &c, &model).unwrap();
        assert_eq!(a, b);
        assert_eq!(state.generator.params(), restored.generator.params());
    }

    #[test]
    fn sample_grid_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let gen = Generator::new(&tiny_config(), &mut rng).unwrap();
        let grid = sample_grid(&gen, 3, 2, 1).unwrap();
        assert_eq!(grid.dims(), (32, 48));
    }
}
