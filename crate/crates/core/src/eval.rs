//! Evaluation statistics: verification scores and TAR@FAR, intra-class
//! identity/appearance distances, appearance-control precision, histograms,
//! and the on-disk report bundle.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::appearance::{appearance_distance, AppearanceFilterConfig, ImageGrid};
use crate::contrastive::{id_distance, EmbeddingModel};
use crate::dataset::{load_resized, DatasetManifest};
use crate::error::{ensure, Error, Result};
use crate::generator::ImageGenerator;
use crate::latent::{sample_vector, DisentangledLatent};
use crate::par;
use crate::recognition::EmbeddingRecord;

/// Similarity scores, higher meaning more alike.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.genuine.iter().chain(&self.impostor).all(|s| s.is_finite()),
            Usage,
            "scores must be finite"
        );
        Ok(())
    }

    /// `kind,score` rows, genuine first.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,score\n");
        for v in &self.genuine {
            s.push_str(&format!("genuine,{v}\n"));
        }
        for v in &self.impostor {
            s.push_str(&format!("impostor,{v}\n"));
        }
        s
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(1.0 - id_distance(a, b)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerificationProtocol {
    /// Above this many cross-identity pairs, impostors are sampled.
    pub max_impostor_pairs: usize,
    pub seed: u64,
}

impl Default for VerificationProtocol {
    fn default() -> Self {
        Self { max_impostor_pairs: 1_000_000, seed: 0 }
    }
}

/// Genuine scores over every same-identity pair, impostor scores over every
/// cross-identity pair (or a seeded sample of them past the cap).
pub fn verification_scores(records: &[EmbeddingRecord], protocol: &VerificationProtocol) -> Result<ScoreSet> {
    let labels: Vec<&str> = records.iter().map(|r| r.identity_label.as_str()).collect();
    let vectors: Vec<&[f64]> = records.iter().map(|r| r.vector.as_slice()).collect();
    scores_for_labels(&vectors, &labels, protocol)
}

fn scores_for_labels(vectors: &[&[f64]], labels: &[&str], protocol: &VerificationProtocol) -> Result<ScoreSet> {
    let n = vectors.len();
    let distinct: std::collections::BTreeSet<&str> = labels.iter().copied().collect();
    ensure!(distinct.len() >= 2, Protocol, "impostor scores need at least 2 identities, got {}", distinct.len());
    ensure!(protocol.max_impostor_pairs >= 1, Config, "max_impostor_pairs must be >= 1");

    let mut genuine_pairs = Vec::new();
    let mut impostor_count = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] == labels[j] {
                genuine_pairs.push((i, j));
            } else {
                impostor_count += 1;
            }
        }
    }
    let impostor_pairs: Vec<(usize, usize)> = if impostor_count <= protocol.max_impostor_pairs {
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| labels[i] != labels[j]).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
        let mut v = Vec::with_capacity(protocol.max_impostor_pairs);
        while v.len() < protocol.max_impostor_pairs {
            let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if labels[i] != labels[j] {
                v.push((i.min(j), i.max(j)));
            }
        }
        v
    };
    let score = |&(i, j): &(usize, usize)| cosine_similarity(vectors[i], vectors[j]);
    let genuine = par::map_slice(&genuine_pairs, score).into_iter().collect::<Result<Vec<_>>>()?;
    let impostor = par::map_slice(&impostor_pairs, score).into_iter().collect::<Result<Vec<_>>>()?;
    Ok(ScoreSet { genuine, impostor })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far_target: f64,
    pub tar: f64,
    pub threshold: f64,
    /// Fraction of impostor scores at or above the threshold.
    pub achieved_far: f64,
}

/// Smallest threshold `t` whose false-accept rate (impostors `>= t`) is at
/// most `far_target`, and the genuine fraction `>= t`.
///
/// Thresholds range over the observed scores and the next float above each,
/// so the returned `t` is the least real number meeting the bound that is not
/// below every observed score.
pub fn tar_at_far(scores: &ScoreSet, far_target: f64) -> Result<TarAtFar> {
    ensure!(!scores.impostor.is_empty(), Usage, "no impostor scores");
    ensure!(!scores.genuine.is_empty(), Usage, "no genuine scores");
    ensure!((0.0..=1.0).contains(&far_target), Usage, "far_target must lie in [0, 1], got {far_target}");
    scores.validate()?;
    let mut imp = scores.impostor.clone();
    imp.sort_by(f64::total_cmp);
    let n = imp.len() as f64;
    let far_at = |t: f64| (imp.len() - imp.partition_point(|&s| s < t)) as f64 / n;
    let mut cands: Vec<f64> = imp.iter().chain(&scores.genuine).flat_map(|&s| [s, s.next_up()]).collect();
    cands.sort_by(f64::total_cmp);
    let threshold = cands
        .into_iter()
        .find(|&t| far_at(t) <= far_target)
        .expect("the float above the largest impostor admits no impostor");
    let tar = scores.genuine.iter().filter(|&&g| g >= threshold).count() as f64 / scores.genuine.len() as f64;
    Ok(TarAtFar { far_target, tar, threshold, achieved_far: far_at(threshold) })
}

/// TAR@FAR of the same embeddings after randomly permuting their identity
/// labels: what a recognizer with no identity signal would score.
pub fn shuffled_label_baseline(
    records: &[EmbeddingRecord],
    protocol: &VerificationProtocol,
    far_target: f64,
    seed: u64,
) -> Result<TarAtFar> {
    let mut labels: Vec<&str> = records.iter().map(|r| r.identity_label.as_str()).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let vectors: Vec<&[f64]> = records.iter().map(|r| r.vector.as_slice()).collect();
    tar_at_far(&scores_for_labels(&vectors, &labels, protocol)?, far_target)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatSummary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl StatSummary {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        ensure!(!values.is_empty(), Usage, "cannot summarize an empty sample");
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self { mean, std: var.sqrt(), n: values.len() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntraClassStats {
    pub id_dist: StatSummary,
    pub app_dist: StatSummary,
}

const EMBED_CHUNK: usize = 64;

fn embed_all<M: EmbeddingModel + ?Sized>(model: &M, images: &[ImageGrid]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EMBED_CHUNK) {
        out.extend(model.embed(chunk)?);
    }
    Ok(out)
}

fn distinct_vector<R: Rng + ?Sized>(rng: &mut R, avoid: &[f64]) -> Vec<f64> {
    loop {
        let v = sample_vector(rng, avoid.len());
        if v != avoid {
            return v;
        }
    }
}

/// Summaries over `(a[i], b[i])` image pairs.
fn pair_stats<M: EmbeddingModel + ?Sized>(
    a: &[ImageGrid],
    b: &[ImageGrid],
    model: &M,
    fcfg: &AppearanceFilterConfig,
) -> Result<IntraClassStats> {
    let ea = embed_all(model, a)?;
    let eb = embed_all(model, b)?;
    let id = ea.iter().zip(&eb).map(|(x, y)| id_distance(x, y)).collect::<Result<Vec<_>>>()?;
    let idx: Vec<usize> = (0..a.len()).collect();
    let app = par::map_slice(&idx, |&i| appearance_distance(&a[i], &b[i], fcfg)).into_iter().collect::<Result<Vec<_>>>()?;
    Ok(IntraClassStats { id_dist: StatSummary::from_values(&id)?, app_dist: StatSummary::from_values(&app)? })
}

/// Generates one image pair per synthetic identity (shared ID latent,
/// different appearance latents) and summarizes the embedding cosine
/// distance and appearance distance within each pair.
pub fn intra_class_stats<G, M>(
    gen: &G,
    model: &M,
    fcfg: &AppearanceFilterConfig,
    n_identities: usize,
    seed: u64,
) -> Result<IntraClassStats>
where
    G: ImageGenerator + ?Sized,
    M: EmbeddingModel + ?Sized,
{
    ensure!(n_identities >= 1, Config, "n_identities must be >= 1");
    let dims = gen.latent_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = Vec::with_capacity(n_identities);
    let mut second = Vec::with_capacity(n_identities);
    for _ in 0..n_identities {
        let z_id = sample_vector(&mut rng, dims.id);
        let a1 = sample_vector(&mut rng, dims.app);
        let a2 = distinct_vector(&mut rng, &a1);
        first.push(DisentangledLatent::new(z_id.clone(), a1)?);
        second.push(DisentangledLatent::new(z_id, a2)?);
    }
    let (ia, ib) = (gen.generate(&first, rng.gen())?, gen.generate(&second, rng.gen())?);
    pair_stats(&ia, &ib, model, fcfg)
}

/// Appearance distance between images sharing an appearance latent but not
/// an ID latent; lower means tighter appearance control.
pub fn appearance_control_precision<G: ImageGenerator + ?Sized>(
    gen: &G,
    fcfg: &AppearanceFilterConfig,
    n_pairs: usize,
    seed: u64,
) -> Result<StatSummary> {
    ensure!(n_pairs >= 1, Config, "n_pairs must be >= 1");
    let dims = gen.latent_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = Vec::with_capacity(n_pairs);
    let mut second = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let z_app = sample_vector(&mut rng, dims.app);
        let i1 = sample_vector(&mut rng, dims.id);
        let i2 = distinct_vector(&mut rng, &i1);
        first.push(DisentangledLatent::new(i1, z_app.clone())?);
        second.push(DisentangledLatent::new(i2, z_app)?);
    }
    let (ia, ib) = (gen.generate(&first, rng.gen())?, gen.generate(&second, rng.gen())?);
    let idx: Vec<usize> = (0..n_pairs).collect();
    let d = par::map_slice(&idx, |&i| appearance_distance(&ia[i], &ib[i], fcfg)).into_iter().collect::<Result<Vec<_>>>()?;
    StatSummary::from_values(&d)
}

/// The intra-class statistics on real data: one seeded pair of distinct
/// impressions per identity. Identities with a single impression are skipped.
pub fn real_data_reference_stats<M: EmbeddingModel + ?Sized>(
    manifest: &DatasetManifest,
    model: &M,
    fcfg: &AppearanceFilterConfig,
    seed: u64,
) -> Result<IntraClassStats> {
    let (side, _) = model.input_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (label, recs) in manifest.identities() {
        if recs.len() < 2 {
            log::warn!("identity {label} has a single impression; skipped");
            continue;
        }
        let picks: Vec<_> = recs.choose_multiple(&mut rng, 2).collect();
        a.push(load_resized(&picks[0].path, side)?);
        b.push(load_resized(&picks[1].path, side)?);
    }
    ensure!(!a.is_empty(), Protocol, "no identity has two impressions");
    pair_stats(&a, &b, model, fcfg)
}

/// Normalized genuine and impostor histograms over shared bin edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

pub fn score_histogram(scores: &ScoreSet, bins: usize) -> Result<Histogram> {
    ensure!(bins >= 1, Config, "bins must be >= 1");
    scores.validate()?;
    let all = || scores.genuine.iter().chain(&scores.impostor).copied();
    ensure!(all().next().is_some(), Usage, "no scores to histogram");
    let (mut lo, mut hi) = all().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let fill = |values: &[f64]| {
        let mut h = vec![0.0; bins];
        for &v in values {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            h[b] += 1.0;
        }
        if !values.is_empty() {
            let n = values.len() as f64;
            h.iter_mut().for_each(|c| *c /= n);
        }
        h
    };
    Ok(Histogram { genuine: fill(&scores.genuine), impostor: fill(&scores.impostor), edges })
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_low,bin_high,genuine,impostor\n");
        for i in 0..self.genuine.len() {
            s.push_str(&format!("{},{},{},{}\n", self.edges[i], self.edges[i + 1], self.genuine[i], self.impostor[i]));
        }
        s
    }

    /// Bar plot: genuine in blue, impostor in red, overlap in purple.
    pub fn to_image(&self, width: u32, height: u32) -> image::RgbImage {
        let mut img = image::RgbImage::from_pixel(width, height, image::Rgb([255, 255, 255]));
        let bins = self.genuine.len();
        let peak = self.genuine.iter().chain(&self.impostor).fold(0.0f64, |a, &b| a.max(b)).max(f64::MIN_POSITIVE);
        for x in 0..width {
            let b = ((x as usize * bins) / width as usize).min(bins - 1);
            let gh = (self.genuine[b] / peak * (height - 1) as f64).round() as u32;
            let ih = (self.impostor[b] / peak * (height - 1) as f64).round() as u32;
            for y in 0..height {
                let level = height - 1 - y;
                let (g, i) = (level < gh, level < ih);
                let px = match (g, i) {
                    (true, true) => [140, 60, 170],
                    (true, false) => [50, 90, 220],
                    (false, true) => [220, 70, 60],
                    _ => continue,
                };
                img.put_pixel(x, y, image::Rgb(px));
            }
        }
        img
    }
}

/// Scalar results of a run. Every field is always present (null when not
/// computed) so the schema is the same at any scale.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema_version: u32,
    pub run_tag: String,
    pub seed: u64,
    pub verification: Option<VerificationReport>,
    pub intra_class: Option<IntraClassStats>,
    pub control_precision: Option<StatSummary>,
    pub real_reference: Option<IntraClassStats>,
    /// Free-form scalars keyed by name (training losses, dataset sizes).
    pub extra: BTreeMap<String, f64>,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationReport {
    pub num_genuine: usize,
    pub num_impostor: usize,
    pub tar_at_far: Vec<TarAtFar>,
    /// Same operating points with shuffled identity labels.
    pub shuffled_baseline: Vec<TarAtFar>,
}

impl Report {
    pub fn new(run_tag: &str, seed: u64) -> Self {
        Self { schema_version: REPORT_SCHEMA_VERSION, run_tag: run_tag.into(), seed, ..Default::default() }
    }

    /// Fills in any section present in `other`.
    pub fn merge(&mut self, other: Report) {
        self.verification = other.verification.or(self.verification.take());
        self.intra_class = other.intra_class.or(self.intra_class);
        self.control_precision = other.control_precision.or(self.control_precision);
        self.real_reference = other.real_reference.or(self.real_reference);
        self.extra.extend(other.extra);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("report.json", e))
    }
}

/// Runs the verification protocol and fills a [`VerificationReport`].
pub fn evaluate_verification(
    records: &[EmbeddingRecord],
    protocol: &VerificationProtocol,
    far_targets: &[f64],
) -> Result<(VerificationReport, ScoreSet)> {
    let scores = verification_scores(records, protocol)?;
    let tar = far_targets.iter().map(|&f| tar_at_far(&scores, f)).collect::<Result<Vec<_>>>()?;
    let base = far_targets
        .iter()
        .map(|&f| shuffled_label_baseline(records, protocol, f, protocol.seed ^ 0x5eed))
        .collect::<Result<Vec<_>>>()?;
    let rep = VerificationReport {
        num_genuine: scores.genuine.len(),
        num_impostor: scores.impostor.len(),
        tar_at_far: tar,
        shuffled_baseline: base,
    };
    Ok((rep, scores))
}

/// Writes `report.json` and, when scores are given, `scores.csv`,
/// `hist_verification.csv` and `hist_verification.png` into `dir`.
pub fn write_report_bundle(dir: &Path, report: &Report, scores: Option<&ScoreSet>, bins: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    if let Some(s) = scores {
        write("scores.csv", s.to_csv().as_bytes())?;
        let h = score_histogram(s, bins)?;
        write("hist_verification.csv", h.to_csv().as_bytes())?;
        let p = dir.join("hist_verification.png");
        h.to_image(400, 200).save(&p).map_err(|e| Error::Image { path: p.clone(), source: e })?;
    }
    write("report.json", report.to_json().as_bytes())
}
