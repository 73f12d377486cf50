//! Recognition backbones, large-margin cosine training, and embedding
//! extraction.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::appearance::{bilinear_sample, ImageGrid};
use crate::autograd::{Conv2dSpec, Graph, Var};
use crate::contrastive::{images_to_tensor, EmbeddingModel};
use crate::error::{ensure, Error, Result};
use crate::nn::{check_finite, Adam, Archive, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneFamily {
    ResnetLike,
    MobilenetLike,
    EfficientnetLike,
}

impl BackboneFamily {
    pub const ALL: [BackboneFamily; 3] = [Self::ResnetLike, Self::MobilenetLike, Self::EfficientnetLike];

    pub fn variants(self) -> &'static [&'static str] {
        match self {
            Self::ResnetLike => &["18", "34", "50", "101", "toy"],
            Self::MobilenetLike => &["050", "100", "toy"],
            Self::EfficientnetLike => &["b0", "toy"],
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Self::ResnetLike => "resnet",
            Self::MobilenetLike => "mobilenet",
            Self::EfficientnetLike => "efficientnet",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub family: BackboneFamily,
    pub variant: String,
    pub remove_first_subsample: bool,
    pub embedding_dim: usize,
}

impl BackboneSpec {
    pub fn new(family: BackboneFamily, variant: &str, remove_first_subsample: bool) -> Self {
        Self { family, variant: variant.to_string(), remove_first_subsample, embedding_dim: 512 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.family.variants().contains(&self.variant.as_str()),
            Config,
            "unknown {} variant '{}' (known: {})",
            self.family.prefix(),
            self.variant,
            self.family.variants().join(", ")
        );
        ensure!(self.embedding_dim > 0, Config, "embedding_dim must be positive");
        Ok(())
    }
}

/// Parses names like `resnet18`, `mobilenet050`, `efficientnet-toy`.
impl FromStr for BackboneSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        for family in BackboneFamily::ALL {
            if let Some(rest) = s.strip_prefix(family.prefix()) {
                let variant = rest.trim_start_matches(['-', '_']);
                let spec = Self::new(family, variant, true);
                spec.validate()?;
                return Ok(spec);
            }
        }
        Err(Error::Config(format!("unknown backbone '{s}'")))
    }
}

impl fmt::Display for BackboneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.family.prefix(), self.variant)
    }
}

/// One layer or block of a backbone description.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Block {
    Conv { out: usize, kernel: usize, stride: usize },
    MaxPool { kernel: usize, stride: usize },
    Basic { out: usize, stride: usize },
    Bottleneck { width: usize, out: usize, stride: usize },
    InvertedResidual { expansion: usize, out: usize, kernel: usize, stride: usize },
}

impl Block {
    pub fn stride(&self) -> usize {
        match *self {
            Block::Conv { stride, .. }
            | Block::MaxPool { stride, .. }
            | Block::Basic { stride, .. }
            | Block::Bottleneck { stride, .. }
            | Block::InvertedResidual { stride, .. } => stride,
        }
    }

    fn out_side(&self, side: usize) -> usize {
        // every block pads so that the output side is ceil(side / stride)
        side.div_ceil(self.stride())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescription {
    pub stages: Vec<Stage>,
}

impl ArchDescription {
    pub fn total_stride(&self) -> usize {
        self.blocks().map(Block::stride).product()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }

    /// Spatial side after each stage for a square input.
    pub fn feature_sides(&self, input: usize) -> Vec<(String, usize)> {
        let mut side = input;
        self.stages
            .iter()
            .map(|s| {
                for b in &s.blocks {
                    side = b.out_side(side);
                }
                (s.name.clone(), side)
            })
            .collect()
    }

    pub fn out_channels(&self) -> usize {
        let mut c = 1;
        for b in self.blocks() {
            c = match *b {
                Block::Conv { out, .. } | Block::Basic { out, .. } | Block::Bottleneck { out, .. } => out,
                Block::InvertedResidual { out, .. } => out,
                Block::MaxPool { .. } => c,
            };
        }
        c
    }
}

fn stage(name: &str, blocks: Vec<Block>) -> Stage {
    Stage { name: name.to_string(), blocks }
}

fn resnet(stem: usize, kernel: usize, widths: [usize; 4], depths: [usize; 4], bottleneck: bool) -> ArchDescription {
    let mut stages = vec![stage(
        "stem",
        vec![Block::Conv { out: stem, kernel, stride: 2 }, Block::MaxPool { kernel: 3, stride: 2 }],
    )];
    for (i, (&w, &n)) in widths.iter().zip(&depths).enumerate() {
        let blocks = (0..n)
            .map(|k| {
                let stride = if k == 0 && i > 0 { 2 } else { 1 };
                if bottleneck {
                    Block::Bottleneck { width: w, out: 4 * w, stride }
                } else {
                    Block::Basic { out: w, stride }
                }
            })
            .collect();
        stages.push(stage(&format!("layer{}", i + 1), blocks));
    }
    ArchDescription { stages }
}

fn make_divisible(v: f64) -> usize {
    let r = ((v + 4.0) as usize / 8 * 8).max(8);
    if (r as f64) < 0.9 * v {
        r + 8
    } else {
        r
    }
}

/// `(expansion, channels, repeats, stride, kernel)` rows after a stride-2 stem.
fn inverted(stem: usize, rows: &[(usize, usize, usize, usize, usize)], head: Option<usize>) -> ArchDescription {
    let mut stages = vec![stage("stem", vec![Block::Conv { out: stem, kernel: 3, stride: 2 }])];
    for (i, &(t, c, n, s, k)) in rows.iter().enumerate() {
        let blocks = (0..n)
            .map(|j| Block::InvertedResidual { expansion: t, out: c, kernel: k, stride: if j == 0 { s } else { 1 } })
            .collect();
        stages.push(stage(&format!("stage{}", i + 1), blocks));
    }
    if let Some(h) = head {
        stages.push(stage("head", vec![Block::Conv { out: h, kernel: 1, stride: 1 }]));
    }
    ArchDescription { stages }
}

fn mobilenet_v2(width: f64) -> ArchDescription {
    let table = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)];
    let rows: Vec<_> = table.iter().map(|&(t, c, n, s)| (t, make_divisible(c as f64 * width), n, s, 3)).collect();
    inverted(make_divisible(32.0 * width), &rows, Some(1280))
}

/// Unmodified reference description of a family/variant.
pub fn reference_arch(family: BackboneFamily, variant: &str) -> Result<ArchDescription> {
    Ok(match (family, variant) {
        (BackboneFamily::ResnetLike, "18") => resnet(64, 7, [64, 128, 256, 512], [2, 2, 2, 2], false),
        (BackboneFamily::ResnetLike, "34") => resnet(64, 7, [64, 128, 256, 512], [3, 4, 6, 3], false),
        (BackboneFamily::ResnetLike, "50") => resnet(64, 7, [64, 128, 256, 512], [3, 4, 6, 3], true),
        (BackboneFamily::ResnetLike, "101") => resnet(64, 7, [64, 128, 256, 512], [3, 4, 23, 3], true),
        (BackboneFamily::ResnetLike, "toy") => resnet(8, 5, [8, 16, 24, 32], [1, 1, 1, 1], false),
        (BackboneFamily::MobilenetLike, "050") => mobilenet_v2(0.5),
        (BackboneFamily::MobilenetLike, "100") => mobilenet_v2(1.0),
        (BackboneFamily::MobilenetLike, "toy") => {
            inverted(8, &[(1, 8, 1, 1, 3), (4, 12, 1, 2, 3), (4, 16, 1, 2, 3), (4, 24, 1, 2, 3), (4, 32, 1, 2, 3)], None)
        }
        (BackboneFamily::EfficientnetLike, "b0") => inverted(
            32,
            &[(1, 16, 1, 1, 3), (6, 24, 2, 2, 3), (6, 40, 2, 2, 5), (6, 80, 3, 2, 3), (6, 112, 3, 1, 5), (6, 192, 4, 2, 5), (6, 320, 1, 1, 3)],
            Some(1280),
        ),
        (BackboneFamily::EfficientnetLike, "toy") => {
            inverted(8, &[(1, 8, 1, 1, 3), (4, 12, 1, 2, 3), (4, 16, 1, 2, 5), (4, 24, 1, 2, 3), (4, 32, 1, 2, 5)], None)
        }
        _ => return Err(Error::Config(format!("unknown {} variant '{variant}'", family.prefix()))),
    })
}

/// Reference description with the first sub-sampling layer removed when
/// the spec asks for it: the stem max-pool for residual networks, the stem
/// stride otherwise.
pub fn adapt_first_stage(spec: &BackboneSpec) -> Result<ArchDescription> {
    spec.validate()?;
    let mut arch = reference_arch(spec.family, &spec.variant)?;
    if spec.remove_first_subsample {
        let stem = &mut arch.stages[0].blocks;
        match spec.family {
            BackboneFamily::ResnetLike => stem.retain(|b| !matches!(b, Block::MaxPool { .. })),
            BackboneFamily::MobilenetLike | BackboneFamily::EfficientnetLike => {
                if let Some(Block::Conv { stride, .. }) = stem.first_mut() {
                    *stride = 1;
                }
            }
        }
    }
    Ok(arch)
}

#[derive(Clone, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    spec: Conv2dSpec,
    depthwise: bool,
}

impl ConvLayer {
    fn new<R: Rng>(p: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize, k: usize, stride: usize, zero: bool) -> Self {
        let scale = if zero { 0.0 } else { (2.0 / (cin * k * k) as f64).sqrt() };
        let w = p.add_normal(rng, format!("{name}.w"), &[cout, cin, k, k], scale);
        let b = p.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, spec: Conv2dSpec::new(stride, k / 2), depthwise: false }
    }

    fn depthwise<R: Rng>(p: &mut ParamStore, rng: &mut R, name: &str, c: usize, k: usize, stride: usize) -> Self {
        let w = p.add_normal(rng, format!("{name}.w"), &[c, 1, k, k], (2.0 / (k * k) as f64).sqrt());
        let b = p.add(format!("{name}.b"), Tensor::zeros(&[c]));
        Self { w, b, spec: Conv2dSpec::new(stride, k / 2), depthwise: true }
    }

    fn forward(&self, g: &Graph, b: &Bound, x: Var) -> Var {
        let y = if self.depthwise { g.depthwise_conv2d(x, b[self.w], self.spec) } else { g.conv2d(x, b[self.w], self.spec) };
        g.add_channel_bias(y, b[self.b])
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Conv(ConvLayer),
    MaxPool { kernel: usize, stride: usize },
    Residual { branch: Vec<ConvLayer>, shortcut: Option<ConvLayer>, identity: bool, out_relu: bool },
}

impl Layer {
    fn forward(&self, g: &Graph, b: &Bound, x: Var) -> Var {
        match self {
            Layer::Conv(c) => g.relu(c.forward(g, b, x)),
            Layer::MaxPool { kernel, stride } => g.max_pool(x, *kernel, *stride, kernel / 2),
            Layer::Residual { branch, shortcut, identity, out_relu } => {
                let mut y = x;
                for (i, c) in branch.iter().enumerate() {
                    y = c.forward(g, b, y);
                    if i + 1 < branch.len() {
                        y = g.relu(y);
                    }
                }
                if let Some(s) = shortcut {
                    y = g.add(y, s.forward(g, b, x));
                } else if *identity {
                    y = g.add(y, x);
                }
                if *out_relu {
                    g.relu(y)
                } else {
                    y
                }
            }
        }
    }
}

fn build_layers<R: Rng>(arch: &ArchDescription, p: &mut ParamStore, rng: &mut R) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut cin = 1;
    for (bi, block) in arch.blocks().enumerate() {
        let name = format!("block{bi}");
        match *block {
            Block::Conv { out, kernel, stride } => {
                layers.push(Layer::Conv(ConvLayer::new(p, rng, &name, cin, out, kernel, stride, false)));
                cin = out;
            }
            Block::MaxPool { kernel, stride } => layers.push(Layer::MaxPool { kernel, stride }),
            Block::Basic { out, stride } => {
                let branch = vec![
                    ConvLayer::new(p, rng, &format!("{name}.conv1"), cin, out, 3, stride, false),
                    ConvLayer::new(p, rng, &format!("{name}.conv2"), out, out, 3, 1, true),
                ];
                let shortcut =
                    (stride != 1 || cin != out).then(|| ConvLayer::new(p, rng, &format!("{name}.down"), cin, out, 1, stride, false));
                layers.push(Layer::Residual { branch, shortcut, identity: true, out_relu: true });
                cin = out;
            }
            Block::Bottleneck { width, out, stride } => {
                let branch = vec![
                    ConvLayer::new(p, rng, &format!("{name}.conv1"), cin, width, 1, 1, false),
                    ConvLayer::new(p, rng, &format!("{name}.conv2"), width, width, 3, stride, false),
                    ConvLayer::new(p, rng, &format!("{name}.conv3"), width, out, 1, 1, true),
                ];
                let shortcut =
                    (stride != 1 || cin != out).then(|| ConvLayer::new(p, rng, &format!("{name}.down"), cin, out, 1, stride, false));
                layers.push(Layer::Residual { branch, shortcut, identity: true, out_relu: true });
                cin = out;
            }
            Block::InvertedResidual { expansion, out, kernel, stride } => {
                let hidden = cin * expansion;
                let identity = stride == 1 && cin == out;
                let mut branch = Vec::new();
                if expansion != 1 {
                    branch.push(ConvLayer::new(p, rng, &format!("{name}.expand"), cin, hidden, 1, 1, false));
                }
                branch.push(ConvLayer::depthwise(p, rng, &format!("{name}.dw"), hidden, kernel, stride));
                branch.push(ConvLayer::new(p, rng, &format!("{name}.project"), hidden, out, 1, 1, identity));
                layers.push(Layer::Residual { branch, shortcut: None, identity, out_relu: false });
                cin = out;
            }
        }
    }
    layers
}

/// A backbone with a pooled, projected, L2-normalized embedding head.
#[derive(Clone, Debug)]
pub struct Recognizer {
    spec: BackboneSpec,
    arch: ArchDescription,
    input_dims: (usize, usize),
    params: ParamStore,
    layers: Vec<Layer>,
    proj: (ParamId, ParamId),
}

impl Recognizer {
    pub fn new<R: Rng>(spec: &BackboneSpec, input_side: usize, rng: &mut R) -> Result<Self> {
        let arch = adapt_first_stage(spec)?;
        ensure!(input_side >= 1, Config, "input side must be positive");
        let mut params = ParamStore::new();
        let layers = build_layers(&arch, &mut params, rng);
        let c = arch.out_channels();
        let pw = params.add_normal(rng, "proj.w", &[c, spec.embedding_dim], (1.0 / c as f64).sqrt());
        let pb = params.add("proj.b", Tensor::zeros(&[spec.embedding_dim]));
        Ok(Self { spec: spec.clone(), arch, input_dims: (input_side, input_side), params, layers, proj: (pw, pb) })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn arch(&self) -> &ArchDescription {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Unnormalized embeddings `[N, D]` of `images: [N, 1, H, W]`.
    pub fn forward(&self, g: &Graph, b: &Bound, images: Var) -> Var {
        let mut x = g.add_scalar(g.mul_scalar(images, 2.0), -1.0);
        for layer in &self.layers {
            x = layer.forward(g, b, x);
        }
        let pooled = g.global_avg_pool(x);
        g.add_channel_bias(g.matmul(pooled, b[self.proj.0]), b[self.proj.1])
    }

    pub fn to_archive(&self, extra: serde_json::Value) -> Archive {
        let meta = serde_json::json!({
            "kind": "recognizer",
            "spec": self.spec,
            "input_side": self.input_dims.0,
            "extra": extra,
        });
        let mut a = Archive::new(meta);
        a.extend(self.params.to_named("net."));
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let bad = |d: &str| Error::format("recognizer checkpoint", d);
        if a.meta.get("kind").and_then(|k| k.as_str()) != Some("recognizer") {
            return Err(bad("not a recognizer checkpoint"));
        }
        let spec: BackboneSpec =
            serde_json::from_value(a.meta["spec"].clone()).map_err(|e| Error::format("recognizer spec", e))?;
        let side = a.meta["input_side"].as_u64().ok_or_else(|| bad("missing input_side"))? as usize;
        let mut r = Self::new(&spec, side, &mut ChaCha8Rng::seed_from_u64(0))?;
        r.params.load_named(a, "net.")?;
        Ok(r)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.to_archive(extra).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

impl EmbeddingModel for Recognizer {
    fn embed_graph(&self, g: &Graph, images: Var) -> Var {
        let b = self.params.bind(g, false);
        self.forward(g, &b, images)
    }

    fn input_dims(&self) -> (usize, usize) {
        self.input_dims
    }
}

/// Unit-norm embedding of one image.
pub fn extract_embedding(model: &Recognizer, image: &ImageGrid) -> Result<Vec<f64>> {
    ensure!(
        image.dims() == model.input_dims,
        Usage,
        "image is {:?}, recognizer expects {:?}",
        image.dims(),
        model.input_dims
    );
    Ok(model.embed(std::slice::from_ref(image))?.remove(0))
}

/// Cosine logits `s·(cos θ_c − m·[c = y])` of normalized embeddings against
/// normalized class weights `[K, D]`.
pub fn cosface_logits(g: &Graph, emb: Var, weights: Var, labels: &[usize], margin: f64, scale: f64) -> Var {
    let cos = g.matmul_bt(g.l2_normalize_rows(emb), g.l2_normalize_rows(weights));
    let shape = g.shape(cos);
    let k = shape[1];
    let mut m = Tensor::zeros(&shape);
    for (i, &y) in labels.iter().enumerate() {
        m.data_mut()[i * k + y] = -margin;
    }
    g.mul_scalar(g.add(cos, g.constant(m)), scale)
}

/// Mean large-margin cosine loss over unit-norm embeddings and class weights.
pub fn margin_cosine_loss(embeddings: &[Vec<f64>], labels: &[usize], weights: &[Vec<f64>], margin: f64, scale: f64) -> Result<f64> {
    ensure!(!embeddings.is_empty(), Usage, "no embeddings");
    ensure!(embeddings.len() == labels.len(), Usage, "{} embeddings for {} labels", embeddings.len(), labels.len());
    ensure!(!weights.is_empty(), Usage, "no class weights");
    let d = weights[0].len();
    for (what, rows) in [("embedding", embeddings), ("class weight", weights)] {
        for (i, r) in rows.iter().enumerate() {
            ensure!(r.len() == d, Usage, "{what} {i} has dimension {}, expected {d}", r.len());
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            ensure!((norm - 1.0).abs() <= 1e-6, Usage, "{what} {i} is not unit-normalized (norm {norm})");
        }
    }
    ensure!(labels.iter().all(|&y| y < weights.len()), Usage, "label out of range");
    let mut total = 0.0;
    for (e, &y) in embeddings.iter().zip(labels) {
        let logits: Vec<f64> = weights
            .iter()
            .enumerate()
            .map(|(c, w)| {
                let cos: f64 = e.iter().zip(w).map(|(a, b)| a * b).sum();
                scale * (cos - if c == y { margin } else { 0.0 })
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[y];
    }
    Ok(total / embeddings.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffineRanges {
    pub max_rotation_deg: f64,
    /// Fraction of the image side.
    pub max_translation: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Value for pixels sampled from outside the source.
    pub fill: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self { max_rotation_deg: 15.0, max_translation: 0.1, min_scale: 0.9, max_scale: 1.1, fill: 1.0 }
    }
}

impl AffineRanges {
    pub fn identity() -> Self {
        Self { max_rotation_deg: 0.0, max_translation: 0.0, min_scale: 1.0, max_scale: 1.0, fill: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.max_rotation_deg >= 0.0 && self.max_translation >= 0.0, Config, "affine ranges must be nonnegative");
        ensure!(
            self.min_scale > 0.0 && self.min_scale <= self.max_scale,
            Config,
            "scale range must satisfy 0 < min <= max, got {}..{}",
            self.min_scale,
            self.max_scale
        );
        Ok(())
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Rotates by `angle` radians about the center, scales by `scale`, then
/// shifts by `(ty, tx)` pixels; bilinear resampling.
pub fn affine_transform(image: &ImageGrid, angle: f64, scale: f64, shift: (f64, f64), fill: f64) -> ImageGrid {
    let (h, w) = image.dims();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    ImageGrid::from_fn(h, w, |y, x| {
        let dy = (y as f64 - cy - shift.0) / scale;
        let dx = (x as f64 - cx - shift.1) / scale;
        let sy = snap(cos * dy - sin * dx + cy);
        let sx = snap(sin * dy + cos * dx + cx);
        bilinear_sample(image, sy, sx, fill)
    })
}

/// Random rotation, translation, and scale within `ranges`.
pub fn random_affine<R: Rng + ?Sized>(image: &ImageGrid, ranges: &AffineRanges, rng: &mut R) -> ImageGrid {
    let mut sym = |max: f64| (rng.gen::<f64>() * 2.0 - 1.0) * max;
    let angle = sym(ranges.max_rotation_deg).to_radians();
    let ty = sym(ranges.max_translation) * image.height() as f64;
    let tx = sym(ranges.max_translation) * image.width() as f64;
    let u: f64 = rng.gen();
    let scale = ranges.min_scale + u * (ranges.max_scale - ranges.min_scale);
    affine_transform(image, angle, scale, (ty, tx), ranges.fill)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecognizerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub margin: f64,
    pub scale: f64,
    /// `None` disables augmentation.
    pub augment: Option<AffineRanges>,
}

impl Default for RecognizerTrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 32, lr: 1e-3, margin: 0.35, scale: 64.0, augment: Some(AffineRanges::default()) }
    }
}

impl RecognizerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, Config, "epochs must be >= 1");
        ensure!(self.batch_size >= 1, Config, "batch_size must be >= 1");
        ensure!(self.lr > 0.0, Config, "lr must be positive");
        ensure!(self.margin >= 0.0 && self.scale > 0.0, Config, "margin must be >= 0 and scale > 0");
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Nearest-class-weight identification accuracy on the training batches.
    pub accuracy: f64,
}

/// Recognizer plus the class weights learned alongside it.
#[derive(Clone, Debug)]
pub struct TrainedRecognizer {
    pub model: Recognizer,
    pub class_weights: Tensor,
    pub log: Vec<EpochLog>,
}

/// Trains on `(image, class)` samples with the large-margin cosine loss.
pub fn train_recognizer(
    samples: &[(ImageGrid, usize)],
    spec: &BackboneSpec,
    cfg: &RecognizerTrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainedRecognizer> {
    cfg.validate()?;
    spec.validate()?;
    ensure!(!samples.is_empty(), Config, "no training samples");
    let side = samples[0].0.height();
    ensure!(
        samples.iter().all(|(im, _)| im.dims() == (side, side)),
        Config,
        "training images must all be {side}x{side}"
    );
    let num_classes = samples.iter().map(|&(_, y)| y).max().unwrap() + 1;
    let mut counts = vec![0usize; num_classes];
    for &(_, y) in samples {
        counts[y] += 1;
    }
    ensure!(num_classes >= 2, Config, "need at least 2 identities, got {num_classes}");
    ensure!(
        counts.iter().all(|&c| c >= 2),
        Config,
        "every identity needs at least 2 impressions (labels must be dense 0..{num_classes})"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Recognizer::new(spec, side, &mut rng)?;
    let mut head = ParamStore::new();
    let wid = head.add_normal(&mut rng, "class_weights", &[num_classes, spec.embedding_dim], 1.0);
    let mut opt = Adam::new(&model.params, cfg.lr, 0.9, 0.999);
    let mut head_opt = Adam::new(&head, cfg.lr, 0.9, 0.999);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let images: Vec<ImageGrid> = batch
                .iter()
                .map(|&i| match &cfg.augment {
                    Some(r) => random_affine(&samples[i].0, r, &mut rng),
                    None => samples[i].0.clone(),
                })
                .collect();
            let labels: Vec<usize> = batch.iter().map(|&i| samples[i].1).collect();
            let g = Graph::new();
            let b = model.params.bind(&g, true);
            let hb = head.bind(&g, true);
            let x = g.constant(images_to_tensor(&images, (side, side))?);
            let emb = model.forward(&g, &b, x);
            let logits = cosface_logits(&g, emb, hb[wid], &labels, cfg.margin, cfg.scale);
            let loss = g.cross_entropy(logits, &labels);
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::TrainingFault { step, component: "recognizer loss".into(), value: lv });
            }
            let lg = g.value(logits);
            for (i, &y) in labels.iter().enumerate() {
                // argmax of the margin-free cosine
                let row: Vec<f64> =
                    lg.row(i).iter().enumerate().map(|(c, &v)| v / cfg.scale + if c == y { cfg.margin } else { 0.0 }).collect();
                let best = (0..num_classes).max_by(|&a, &c| row[a].total_cmp(&row[c])).unwrap();
                correct += usize::from(best == y);
            }
            loss_sum += lv * batch.len() as f64;
            let grads = g.backward(loss);
            let gm = model.params.collect_grads(&grads, &b);
            let gh = head.collect_grads(&grads, &hb);
            check_finite(&gm, &model.params, step)?;
            opt.step(&mut model.params, &gm, &[]);
            head_opt.step(&mut head, &gh, &[]);
            step += 1;
        }
        let entry = EpochLog { epoch, loss: loss_sum / samples.len() as f64, accuracy: correct as f64 / samples.len() as f64 };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainedRecognizer { model, class_weights: head.get(wid).clone(), log })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub identity_label: String,
    pub impression_index: usize,
    pub vector: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingSidecar {
    count: usize,
    dim: usize,
    dtype: String,
    byte_order: String,
    records: Vec<(String, usize)>,
}

/// Writes `embeddings.bin` (row-major little-endian `f64`, one row per record)
/// and `embeddings.json` (labels, impression indices, dims) into `dir`.
pub fn export_embeddings(records: &[EmbeddingRecord], dir: &Path) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.vector.len());
    ensure!(records.iter().all(|r| r.vector.len() == dim), Usage, "embeddings have differing dimensions");
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bin = Vec::with_capacity(records.len() * dim * 8);
    for r in records {
        for v in &r.vector {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin_path = dir.join("embeddings.bin");
    fs::write(&bin_path, bin).map_err(|e| Error::io(&bin_path, e))?;
    let side = EmbeddingSidecar {
        count: records.len(),
        dim,
        dtype: "f64".into(),
        byte_order: "little".into(),
        records: records.iter().map(|r| (r.identity_label.clone(), r.impression_index)).collect(),
    };
    let json_path = dir.join("embeddings.json");
    let text = serde_json::to_string_pretty(&side).expect("sidecar serializes");
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}

pub fn import_embeddings(dir: &Path) -> Result<Vec<EmbeddingRecord>> {
    let json_path = dir.join("embeddings.json");
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let side: EmbeddingSidecar = serde_json::from_str(&text).map_err(|e| Error::format("embeddings sidecar", e))?;
    let bin_path = dir.join("embeddings.bin");
    let bin = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    ensure!(
        bin.len() == side.count * side.dim * 8 && side.records.len() == side.count,
        Usage,
        "embeddings.bin holds {} bytes, sidecar describes {}x{}",
        bin.len(),
        side.count,
        side.dim
    );
    let values: Vec<f64> = bin.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(side
        .records
        .into_iter()
        .enumerate()
        .map(|(i, (identity_label, impression_index))| EmbeddingRecord {
            identity_label,
            impression_index,
            vector: values[i * side.dim..(i + 1) * side.dim].to_vec(),
        })
        .collect())
}
