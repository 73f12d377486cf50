//! Contrastive identity and appearance losses over paired batches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::appearance::{AppearanceFilter, AppearanceFilterConfig, ImageGrid};
use crate::autograd::{Graph, Var};
use crate::error::{ensure, Result};
use crate::latent::{BatchPlan, Relation};
use crate::tensor::Tensor;

/// Thresholds and normalizers of one hinge family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HingeConfig {
    /// Same-key pairs are penalized above this distance.
    pub tau_plus: f64,
    /// Different-key pairs are penalized below this distance.
    pub tau_minus: f64,
    pub c_plus: f64,
    pub c_minus: f64,
}

impl HingeConfig {
    pub fn validate(&self, name: &str) -> Result<()> {
        ensure!(
            self.tau_plus >= 0.0 && self.tau_minus >= 0.0,
            Config,
            "{name}: thresholds must be nonnegative ({} / {})",
            self.tau_plus,
            self.tau_minus
        );
        ensure!(
            self.tau_plus < self.tau_minus,
            Config,
            "{name}: tau_plus ({}) must be below tau_minus ({})",
            self.tau_plus,
            self.tau_minus
        );
        ensure!(
            self.c_plus > 0.0 && self.c_minus > 0.0,
            Config,
            "{name}: normalizers must be positive ({} / {})",
            self.c_plus,
            self.c_minus
        );
        Ok(())
    }

    pub fn term(&self, d: f64, same_key: bool) -> f64 {
        contrastive_term(d, same_key, self.tau_plus, self.tau_minus, self.c_plus, self.c_minus)
    }

    fn slope(&self, d: f64, same_key: bool) -> f64 {
        if same_key {
            if d > self.tau_plus {
                1.0 / self.c_plus
            } else {
                0.0
            }
        } else if d < self.tau_minus {
            -1.0 / self.c_minus
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub id: HingeConfig,
    pub app: HingeConfig,
    pub w_app: f64,
    pub filter: AppearanceFilterConfig,
}

impl ContrastiveConfig {
    pub fn for_resolution(side: usize) -> Self {
        Self {
            id: HingeConfig { tau_plus: 0.1, tau_minus: 0.5, c_plus: 1.0, c_minus: 1.0 },
            app: HingeConfig { tau_plus: 0.001, tau_minus: 0.02, c_plus: 1.0, c_minus: 1.0 },
            w_app: 1.0,
            filter: AppearanceFilterConfig::for_resolution(side),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.id.validate("id hinge")?;
        self.app.validate("appearance hinge")?;
        ensure!(self.w_app >= 0.0 && self.w_app.is_finite(), Config, "w_app must be >= 0, got {}", self.w_app);
        self.filter.validate()
    }
}

/// A frozen image-to-embedding network.
///
/// Implementations record their forward pass on the caller's graph with
/// parameters as constants, so gradients reach the input images but never
/// the model itself.
pub trait EmbeddingModel {
    /// `images: [N, 1, H, W]` → `[N, D]` (not necessarily normalized).
    fn embed_graph(&self, g: &Graph, images: Var) -> Var;

    /// Expected `(height, width)` of input images.
    fn input_dims(&self) -> (usize, usize);

    /// Unit-normalized embeddings of a list of images.
    fn embed(&self, images: &[ImageGrid]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let g = Graph::new();
        let x = g.constant(images_to_tensor(images, self.input_dims())?);
        let e = g.l2_normalize_rows(self.embed_graph(&g, x));
        let ev = g.value(e);
        Ok((0..images.len()).map(|i| ev.row(i).to_vec()).collect())
    }
}

/// Stacks equally sized images into `[N, 1, H, W]`.
pub fn images_to_tensor(images: &[ImageGrid], dims: (usize, usize)) -> Result<Tensor> {
    let (h, w) = dims;
    let mut data = Vec::with_capacity(images.len() * h * w);
    for (i, img) in images.iter().enumerate() {
        ensure!(img.dims() == dims, Usage, "image {i} is {:?}, model expects {dims:?}", img.dims());
        data.extend_from_slice(img.pixels());
    }
    Ok(Tensor::new(&[images.len(), 1, h, w], data))
}

/// Fixed linear projection of raw pixels.
#[derive(Clone, Debug)]
pub struct ProjectionEmbedder {
    dims: (usize, usize),
    weights: Tensor,
}

impl ProjectionEmbedder {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, dims: (usize, usize), embedding_dim: usize) -> Self {
        let p = dims.0 * dims.1;
        let scale = 1.0 / (p as f64).sqrt();
        let weights = Tensor::from_fn(&[p, embedding_dim], |_| (rng.gen::<f64>() * 2.0 - 1.0) * scale);
        Self { dims, weights }
    }
}

impl EmbeddingModel for ProjectionEmbedder {
    fn embed_graph(&self, g: &Graph, images: Var) -> Var {
        let n = g.shape(images)[0];
        let flat = g.reshape(images, &[n, self.dims.0 * self.dims.1]);
        let w = g.constant(self.weights.clone());
        g.matmul(flat, w)
    }

    fn input_dims(&self) -> (usize, usize) {
        self.dims
    }
}

/// Cosine distance `1 - cos(a, b)`, in `[0, 2]`.
pub fn id_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure!(a.len() == b.len(), Usage, "embedding lengths differ: {} vs {}", a.len(), b.len());
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    ensure!(na > 0.0 && nb > 0.0, Usage, "zero-norm embedding");
    let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Ok((1.0 - cos.clamp(-1.0, 1.0)).clamp(0.0, 2.0))
}

/// One hinge term: `max(d - τ+, 0) / C+` for a shared key, otherwise
/// `max(τ- - d, 0) / C-`.
pub fn contrastive_term(d: f64, same_key: bool, tau_plus: f64, tau_minus: f64, c_plus: f64, c_minus: f64) -> f64 {
    if same_key {
        (d - tau_plus).max(0.0) / c_plus
    } else {
        (tau_minus - d).max(0.0) / c_minus
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub id_part: f64,
    pub app_part: f64,
}

/// Graph handles of the loss components.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub id_part: Var,
    pub app_part: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossParts {
        LossParts {
            total: g.value(self.total).item(),
            id_part: g.value(self.id_part).item(),
            app_part: g.value(self.app_part).item(),
        }
    }
}

/// Per-pair distances of a batch, for diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTerm {
    pub i: usize,
    pub j: usize,
    pub relation: Relation,
    pub d_id: f64,
    pub d_app: f64,
    pub l_id: f64,
    pub l_app: f64,
}

/// Sum of hinge terms over the strict upper triangle of `d: [N, N]`.
fn pair_hinge_sum(g: &Graph, d: Var, same: Vec<bool>, hinge: HingeConfig) -> Var {
    let dv = g.value(d);
    let n = dv.dim(0);
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += hinge.term(dv.data()[i * n + j], same[i * n + j]);
        }
    }
    g.custom_op(Tensor::scalar(total), &[d], move |grad, _| {
        let k = grad.item();
        let mut out = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in (i + 1)..n {
                out.data_mut()[i * n + j] = k * hinge.slope(dv.data()[i * n + j], same[i * n + j]);
            }
        }
        vec![Some(out)]
    })
}

/// Pairwise distance matrices `(d_id, d_app)` for `images: [N, 1, H, W]`.
pub fn distance_matrices(
    g: &Graph,
    images: Var,
    filter: &AppearanceFilter,
    model: &dyn EmbeddingModel,
) -> (Var, Var) {
    let emb = g.l2_normalize_rows(model.embed_graph(g, images));
    let cos = g.matmul_bt(emb, emb);
    let d_id = g.add_scalar(g.mul_scalar(cos, -1.0), 1.0);
    let d_app = g.pairwise_mse(filter.apply_graph(g, images));
    (d_id, d_app)
}

/// Records the batch contrastive loss on `g` for generated `images: [N, 1, H, W]`.
pub fn contrastive_loss_graph(
    g: &Graph,
    images: Var,
    plan: &BatchPlan,
    cfg: &ContrastiveConfig,
    model: &dyn EmbeddingModel,
) -> Result<LossVars> {
    ensure!(
        g.shape(images).first() == Some(&plan.len()),
        Usage,
        "{:?} images for a batch plan of {} latents",
        g.shape(images),
        plan.len()
    );
    loss_with_relations(g, images, &plan.relation_matrix(), cfg, model)
}

fn check_images(g: &Graph, images: Var, n: usize, model: &dyn EmbeddingModel) -> Result<(usize, usize)> {
    let shape = g.shape(images);
    ensure!(shape.len() == 4 && shape[1] == 1, Usage, "expected [N, 1, H, W] images, got {shape:?}");
    ensure!(shape[0] == n, Usage, "{} images for {n} relation rows", shape[0]);
    ensure!(
        (shape[2], shape[3]) == model.input_dims(),
        Usage,
        "images are {}x{}, embedding model expects {:?}",
        shape[2],
        shape[3],
        model.input_dims()
    );
    Ok((shape[2], shape[3]))
}

pub(crate) fn loss_with_relations(
    g: &Graph,
    images: Var,
    rel: &[Vec<Relation>],
    cfg: &ContrastiveConfig,
    model: &dyn EmbeddingModel,
) -> Result<LossVars> {
    cfg.validate()?;
    let n = rel.len();
    let (h, w) = check_images(g, images, n, model)?;
    let filter = AppearanceFilter::new(h, w, &cfg.filter)?;
    let (d_id, d_app) = distance_matrices(g, images, &filter, model);
    let mask = |want: Relation| -> Vec<bool> { (0..n * n).map(|k| rel[k / n][k % n] == want).collect() };
    let id_part = pair_hinge_sum(g, d_id, mask(Relation::SameId), cfg.id);
    let app_part = pair_hinge_sum(g, d_app, mask(Relation::SameApp), cfg.app);
    let total = g.add(id_part, g.mul_scalar(app_part, cfg.w_app));
    Ok(LossVars { total, id_part, app_part })
}

/// Batch contrastive loss of already generated images.
pub fn batch_contrastive_loss(
    images: &[ImageGrid],
    plan: &BatchPlan,
    cfg: &ContrastiveConfig,
    model: &dyn EmbeddingModel,
) -> Result<LossParts> {
    ensure!(images.len() == plan.len(), Usage, "{} images for a batch plan of {} latents", images.len(), plan.len());
    let g = Graph::new();
    let x = g.constant(images_to_tensor(images, model.input_dims())?);
    Ok(contrastive_loss_graph(&g, x, plan, cfg, model)?.values(&g))
}

/// Loss plus the gradient of `total` with respect to every pixel.
pub fn batch_contrastive_loss_with_grad(
    images: &[ImageGrid],
    plan: &BatchPlan,
    cfg: &ContrastiveConfig,
    model: &dyn EmbeddingModel,
) -> Result<(LossParts, Vec<ImageGrid>)> {
    ensure!(images.len() == plan.len(), Usage, "{} images for a batch plan of {} latents", images.len(), plan.len());
    let dims = model.input_dims();
    let g = Graph::new();
    let x = g.leaf(images_to_tensor(images, dims)?);
    let loss = contrastive_loss_graph(&g, x, plan, cfg, model)?;
    let grads = g.backward(loss.total);
    let gx = grads.get_or_zeros(x, &g.shape(x));
    let per_image = (0..images.len())
        .map(|i| ImageGrid::new(dims.0, dims.1, gx.row(i).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((loss.values(&g), per_image))
}

/// Distances and hinge terms for every unordered pair of the batch.
pub fn pair_breakdown(
    images: &[ImageGrid],
    plan: &BatchPlan,
    cfg: &ContrastiveConfig,
    model: &dyn EmbeddingModel,
) -> Result<Vec<PairTerm>> {
    ensure!(images.len() == plan.len(), Usage, "{} images for a batch plan of {} latents", images.len(), plan.len());
    pair_terms(images, &plan.relation_matrix(), cfg, model)
}

pub(crate) fn pair_terms(
    images: &[ImageGrid],
    rel: &[Vec<Relation>],
    cfg: &ContrastiveConfig,
    model: &dyn EmbeddingModel,
) -> Result<Vec<PairTerm>> {
    cfg.validate()?;
    let dims = model.input_dims();
    let g = Graph::new();
    let x = g.constant(images_to_tensor(images, dims)?);
    let n = rel.len();
    check_images(&g, x, n, model)?;
    let filter = AppearanceFilter::new(dims.0, dims.1, &cfg.filter)?;
    let (d_id, d_app) = distance_matrices(&g, x, &filter, model);
    let (d_id, d_app) = (g.value(d_id), g.value(d_app));
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let relation = rel[i][j];
            let (di, da) = (d_id.data()[i * n + j], d_app.data()[i * n + j]);
            out.push(PairTerm {
                i,
                j,
                relation,
                d_id: di,
                d_app: da,
                l_id: cfg.id.term(di, relation == Relation::SameId),
                l_app: cfg.app.term(da, relation == Relation::SameApp),
            });
        }
    }
    Ok(out)
}
