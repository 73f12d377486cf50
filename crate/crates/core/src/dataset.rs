//! Identity-labeled datasets: manifests, real-data ingestion with
//! person-disjoint splits, a procedural ridge-texture toy corpus, and
//! synthetic dataset generation from a trained generator.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::appearance::ImageGrid;
use crate::error::{ensure, Error, Result};
use crate::generator::ImageGenerator;
use crate::latent::{sample_latent, sample_vector, DisentangledLatent, LatentDims};
use crate::par;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const INDEX_FILE: &str = "index.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One image of one identity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub identity_label: String,
    pub person_label: String,
    /// 1-based.
    pub impression_index: usize,
    pub path: PathBuf,
    pub split: Split,
    /// Tag of the dataset this record came from; used to undo merges.
    pub source: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// Builds a manifest, checking its structural invariants.
    pub fn new(mut records: Vec<ManifestRecord>) -> Result<Self> {
        records.sort_by(|a, b| {
            (&a.identity_label, a.impression_index).cmp(&(&b.identity_label, b.impression_index))
        });
        let m = Self { records };
        m.validate()?;
        Ok(m)
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records grouped by identity, in label order.
    pub fn identities(&self) -> BTreeMap<&str, Vec<&ManifestRecord>> {
        let mut map: BTreeMap<&str, Vec<&ManifestRecord>> = BTreeMap::new();
        for r in &self.records {
            map.entry(r.identity_label.as_str()).or_default().push(r);
        }
        map
    }

    pub fn num_identities(&self) -> usize {
        self.identities().len()
    }

    pub fn persons(&self, split: Split) -> BTreeSet<&str> {
        self.records.iter().filter(|r| r.split == split).map(|r| r.person_label.as_str()).collect()
    }

    /// Person-disjoint splits, one person and split per identity, unique
    /// impression indices.
    pub fn validate(&self) -> Result<()> {
        let mut owner: BTreeMap<&str, (&str, Split)> = BTreeMap::new();
        let mut seen = HashSet::new();
        for r in &self.records {
            ensure!(r.impression_index >= 1, Integrity, "{}: impression indices start at 1", r.identity_label);
            ensure!(
                seen.insert((r.identity_label.as_str(), r.impression_index)),
                Integrity,
                "{}: duplicate impression {}",
                r.identity_label,
                r.impression_index
            );
            let entry = owner.entry(&r.identity_label).or_insert((&r.person_label, r.split));
            ensure!(
                entry.0 == r.person_label,
                Integrity,
                "identity {} is attributed to persons {} and {}",
                r.identity_label,
                entry.0,
                r.person_label
            );
            ensure!(entry.1 == r.split, Integrity, "identity {} spans both train and test", r.identity_label);
        }
        let train = self.persons(Split::Train);
        if let Some(p) = self.persons(Split::Test).intersection(&train).next() {
            return Err(Error::Integrity(format!("person {p} appears in both train and test")));
        }
        Ok(())
    }

    /// Every referenced file exists and decodes to `side`x`side`.
    pub fn check_files(&self, side: usize) -> Result<()> {
        for r in &self.records {
            let img = ImageGrid::load_png(&r.path)?;
            ensure!(
                img.dims() == (side, side),
                Integrity,
                "{} is {:?}, expected {side}x{side}",
                r.path.display(),
                img.dims()
            );
        }
        Ok(())
    }

    pub fn filter_split(&self, split: Split) -> DatasetManifest {
        Self { records: self.records.iter().filter(|r| r.split == split).cloned().collect() }
    }

    /// Undoes [`merge_datasets`].
    pub fn split_by_source(&self) -> BTreeMap<String, DatasetManifest> {
        let mut map: BTreeMap<String, DatasetManifest> = BTreeMap::new();
        for r in &self.records {
            map.entry(r.source.clone()).or_default().records.push(r.clone());
        }
        map
    }

    /// Loads every image (resized to `side` if needed) with dense class ids
    /// assigned in identity-label order. Returns the samples and the label of
    /// each class id.
    pub fn load_labeled(&self, side: usize) -> Result<(Vec<(ImageGrid, usize)>, Vec<String>)> {
        let ids = self.identities();
        let labels: Vec<String> = ids.keys().map(|s| s.to_string()).collect();
        let class: BTreeMap<&str, usize> = ids.keys().enumerate().map(|(i, &k)| (k, i)).collect();
        let images = par::map_slice(&self.records, |r| load_resized(&r.path, side));
        let mut out = Vec::with_capacity(self.records.len());
        for (r, img) in self.records.iter().zip(images) {
            out.push((img?, class[r.identity_label.as_str()]));
        }
        Ok((out, labels))
    }

    /// Writes JSON lines with paths relative to the manifest's directory
    /// where possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut text = String::new();
        for r in &self.records {
            let mut rec = r.clone();
            if let Ok(rel) = r.path.strip_prefix(base) {
                rec.path = rel.to_path_buf();
            }
            text.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            text.push('\n');
        }
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new(""));
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut r: ManifestRecord =
                serde_json::from_str(line).map_err(|e| Error::format(format!("manifest line {}", n + 1), e))?;
            if r.path.is_relative() {
                r.path = base.join(&r.path);
            }
            records.push(r);
        }
        Self::new(records)
    }
}

pub fn load_resized(path: &Path, side: usize) -> Result<ImageGrid> {
    let img = ImageGrid::load_png(path)?;
    Ok(if img.dims() == (side, side) { img } else { img.resize(side, side) })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Fraction of persons assigned to the training split.
    pub train_fraction: f64,
    pub seed: u64,
    pub source_tag: String,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_fraction: 0.8, seed: 0, source_tag: "real".into() }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexRecord {
    identity_label: String,
    person_label: String,
    impression_index: usize,
    path: PathBuf,
    #[serde(default)]
    split: Option<Split>,
}

/// Person label of an identity folder named `{person}_{finger}`.
pub fn person_of_folder(name: &str) -> &str {
    name.rsplit_once('_').map_or(name, |(p, _)| p)
}

/// Reads a real dataset and assigns a seeded person-disjoint split.
///
/// `root` either holds an `index.jsonl` (records with identity, person,
/// impression index, path and an optional fixed split) or one folder per
/// identity named `{person}_{finger}` containing PNG impressions.
pub fn ingest_real_dataset(root: &Path, cfg: &SplitConfig) -> Result<DatasetManifest> {
    ensure!(
        (0.0..=1.0).contains(&cfg.train_fraction),
        Config,
        "train_fraction must lie in [0, 1], got {}",
        cfg.train_fraction
    );
    ensure!(root.is_dir(), Usage, "dataset root {} is not a directory", root.display());
    let index = root.join(INDEX_FILE);
    let mut raw: Vec<IndexRecord> = Vec::new();
    if index.is_file() {
        let text = fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut r: IndexRecord =
                serde_json::from_str(line).map_err(|e| Error::format(format!("index line {}", n + 1), e))?;
            if r.path.is_relative() {
                r.path = root.join(&r.path);
            }
            raw.push(r);
        }
    } else {
        for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
            let label = dir.file_name().unwrap().to_string_lossy().into_owned();
            let pngs: Vec<PathBuf> = sorted_entries(&dir)?
                .into_iter()
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            ensure!(!pngs.is_empty(), Integrity, "identity folder {} holds no images", dir.display());
            let person = person_of_folder(&label).to_string();
            for (k, path) in pngs.into_iter().enumerate() {
                raw.push(IndexRecord {
                    identity_label: label.clone(),
                    person_label: person.clone(),
                    impression_index: k + 1,
                    path,
                    split: None,
                });
            }
        }
    }

    let mut persons: Vec<&str> = raw.iter().map(|r| r.person_label.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    persons.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_train = (cfg.train_fraction * persons.len() as f64).round() as usize;
    let train: HashSet<&str> = persons[..n_train].iter().copied().collect();
    let records = raw
        .iter()
        .map(|r| ManifestRecord {
            identity_label: r.identity_label.clone(),
            person_label: r.person_label.clone(),
            impression_index: r.impression_index,
            path: r.path.clone(),
            split: r.split.unwrap_or(if train.contains(r.person_label.as_str()) { Split::Train } else { Split::Test }),
            source: cfg.source_tag.clone(),
        })
        .collect();
    DatasetManifest::new(records)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

// ---------------------------------------------------------------------------
// Procedural ridge textures

/// Identity of a toy finger: a ridge phase field with a smooth warp and an
/// optional point singularity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeIdentity {
    pub orientation: f64,
    /// Ridge period in pixels.
    pub period: f64,
    /// `(amplitude, frequency, direction, phase)` per warp term.
    pub warps: Vec<(f64, f64, f64, f64)>,
    pub core: (f64, f64),
    pub charge: f64,
}

impl RidgeIdentity {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let tau = std::f64::consts::TAU;
        let warps = (0..2)
            .map(|_| (rng.gen_range(1.0..4.0), rng.gen_range(0.5..1.5), rng.gen_range(0.0..tau), rng.gen_range(0.0..tau)))
            .collect();
        Self {
            orientation: rng.gen_range(0.0..std::f64::consts::PI),
            period: rng.gen_range(4.5..6.5),
            warps,
            core: (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)),
            charge: [-1.0, 0.0, 1.0][rng.gen_range(0..3)],
        }
    }

    fn phase(&self, u: f64, v: f64, side: f64) -> f64 {
        let tau = std::f64::consts::TAU;
        let (s, c) = self.orientation.sin_cos();
        let mut p = tau * side / self.period * (u * c + v * s);
        for &(a, f, dir, ph) in &self.warps {
            let (ds, dc) = dir.sin_cos();
            p += a * (tau * f * (u * dc + v * ds) + ph).sin();
        }
        p + self.charge * (v - self.core.1).atan2(u - self.core.0)
    }
}

/// Capture conditions of one impression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeAppearance {
    pub background: f64,
    pub ink: f64,
    /// Shifts the ridge/valley balance; positive means thicker ridges.
    pub thickness: f64,
    /// Direction and strength of a linear pressure falloff.
    pub pressure: (f64, f64),
    pub noise_std: f64,
    /// Placement offset in image-side units.
    pub offset: (f64, f64),
}

impl RidgeAppearance {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            background: rng.gen_range(0.75..1.0),
            ink: rng.gen_range(0.0..0.35),
            thickness: rng.gen_range(-0.5..0.5),
            pressure: (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..0.6)),
            noise_std: 0.02,
            offset: (rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04)),
        }
    }
}

pub fn render_ridges<R: Rng + ?Sized>(id: &RidgeIdentity, app: &RidgeAppearance, side: usize, rng: &mut R) -> ImageGrid {
    let noise = Normal::new(0.0, app.noise_std.max(0.0)).expect("finite std");
    let n = side as f64;
    let (ps, pc) = app.pressure.0.sin_cos();
    ImageGrid::from_fn(side, side, |y, x| {
        let u = (x as f64 + 0.5) / n - 0.5;
        let v = (y as f64 + 0.5) / n - 0.5;
        let ridge = 1.0 / (1.0 + (-4.0 * (id.phase(u + app.offset.0, v + app.offset.1, n).cos() + app.thickness)).exp());
        let mask = (1.0 - app.pressure.1 * (0.5 + u * pc + v * ps)).clamp(0.0, 1.0);
        let value = app.background - (app.background - app.ink) * mask * ridge + noise.sample(rng);
        value.clamp(0.0, 1.0)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDatasetConfig {
    pub persons: usize,
    pub fingers_per_person: usize,
    pub impressions: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        Self { persons: 20, fingers_per_person: 5, impressions: 6, resolution: 32, seed: 0 }
    }
}

/// Writes a ridge-texture corpus laid out as `{person}_{finger}/impression_{k}.png`.
pub fn make_toy_dataset(root: &Path, cfg: &ToyDatasetConfig) -> Result<()> {
    ensure!(
        cfg.persons >= 1 && cfg.fingers_per_person >= 1 && cfg.impressions >= 1 && cfg.resolution >= 4,
        Config,
        "toy dataset needs >= 1 person, finger and impression, and resolution >= 4"
    );
    let n_ids = cfg.persons * cfg.fingers_per_person;
    let results = par::map_range(n_ids, |i| -> Result<()> {
        let mut rng = derived_rng(cfg.seed, i as u64);
        let id = RidgeIdentity::sample(&mut rng);
        let dir = root.join(format!("p{:03}_f{}", i / cfg.fingers_per_person, i % cfg.fingers_per_person));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for k in 1..=cfg.impressions {
            let app = RidgeAppearance::sample(&mut rng);
            render_ridges(&id, &app, cfg.resolution, &mut rng).save_png(&dir.join(format!("impression_{k}.png")))?;
        }
        Ok(())
    });
    results.into_iter().collect()
}

fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ---------------------------------------------------------------------------
// Synthetic datasets

pub const DEFAULT_IMPRESSIONS: usize = 11;

/// One ID latent paired with K appearance latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticIdentitySpec {
    pub z_id: Vec<f64>,
    pub z_app_list: Vec<Vec<f64>>,
    /// Seeds the generator's per-layer noise.
    pub seed: u64,
}

impl SyntheticIdentitySpec {
    pub fn sample(dims: LatentDims, k: usize, seed: u64) -> Result<Self> {
        ensure!(k >= 1, Config, "an identity needs at least one impression");
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z_id = sample_vector(&mut rng, dims.id);
        let z_app_list = (0..k).map(|_| sample_vector(&mut rng, dims.app)).collect();
        Ok(Self { z_id, z_app_list, seed })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.z_app_list.is_empty(), Config, "an identity needs at least one impression");
        for (i, a) in self.z_app_list.iter().enumerate() {
            ensure!(
                !self.z_app_list[..i].contains(a),
                Config,
                "appearance latent {} duplicates an earlier one",
                i + 1
            );
        }
        Ok(())
    }

    pub fn latents(&self) -> Result<Vec<DisentangledLatent>> {
        self.z_app_list.iter().map(|a| DisentangledLatent::new(self.z_id.clone(), a.clone())).collect()
    }
}

/// The K impressions of one synthetic identity, in impression order.
pub fn generate_synthetic_identity<G: ImageGenerator + ?Sized>(
    gen: &G,
    spec: &SyntheticIdentitySpec,
) -> Result<Vec<ImageGrid>> {
    spec.validate()?;
    let latents = spec.latents()?;
    ensure!(
        latents[0].dims() == gen.latent_dims(),
        Usage,
        "latent dims {:?} do not match the generator's {:?}",
        latents[0].dims(),
        gen.latent_dims()
    );
    gen.generate(&latents, spec.seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDatasetConfig {
    pub num_identities: usize,
    pub impressions_per_id: usize,
    pub seed: u64,
    pub source_tag: String,
}

impl Default for GenDatasetConfig {
    fn default() -> Self {
        Self { num_identities: 100, impressions_per_id: DEFAULT_IMPRESSIONS, seed: 0, source_tag: "syn".into() }
    }
}

impl GenDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.impressions_per_id >= 1, Config, "impressions_per_id must be >= 1");
        validate_tag(&self.source_tag)
    }
}

fn validate_tag(tag: &str) -> Result<()> {
    ensure!(
        !tag.is_empty() && tag.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '.'),
        Config,
        "source tag {tag:?} must be non-empty ASCII alphanumerics, '-' or '.'"
    );
    Ok(())
}

pub fn identity_label(tag: &str, index: usize) -> String {
    format!("{tag}_{index:06}")
}

/// Spec of identity `index` in a dataset generated with `seed`.
pub fn identity_spec(dims: LatentDims, k: usize, seed: u64, index: usize) -> Result<SyntheticIdentitySpec> {
    let mut rng = derived_rng(seed, index as u64);
    let mut spec = SyntheticIdentitySpec::sample(dims, k, rng.gen())?;
    while spec.validate().is_err() {
        spec = SyntheticIdentitySpec::sample(dims, k, rng.gen())?;
    }
    Ok(spec)
}

/// Generates `num_identities` identities into `root/{tag}_{index}/impression_{k}.png`
/// and writes `root/manifest.jsonl`.
///
/// Identity folders are written under a temporary name and renamed once
/// complete, so an existing folder is a finished identity and is skipped on
/// rerun.
pub fn generate_dataset<G: ImageGenerator + Sync + ?Sized>(
    gen: &G,
    cfg: &GenDatasetConfig,
    root: &Path,
    mut progress: impl FnMut(usize, usize),
) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let k = cfg.impressions_per_id;
    let mut records = Vec::with_capacity(cfg.num_identities * k);
    const CHUNK: usize = 16;
    let mut done = 0;
    for start in (0..cfg.num_identities).step_by(CHUNK) {
        let end = (start + CHUNK).min(cfg.num_identities);
        let results = par::map_range(end - start, |j| write_identity(gen, cfg, root, start + j));
        for (j, r) in results.into_iter().enumerate() {
            r.map_err(|e| match e {
                Error::Io { path, source } => Error::Io {
                    path: path.join(format!("<identity {}>", start + j)),
                    source,
                },
                other => other,
            })?;
        }
        done = end;
        progress(done, cfg.num_identities);
    }
    debug_assert_eq!(done, cfg.num_identities);
    for i in 0..cfg.num_identities {
        let label = identity_label(&cfg.source_tag, i);
        for kk in 1..=k {
            records.push(ManifestRecord {
                identity_label: label.clone(),
                person_label: label.clone(),
                impression_index: kk,
                path: root.join(&label).join(format!("impression_{kk}.png")),
                split: Split::Train,
                source: cfg.source_tag.clone(),
            });
        }
    }
    let manifest = DatasetManifest::new(records)?;
    manifest.save(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn write_identity<G: ImageGenerator + ?Sized>(gen: &G, cfg: &GenDatasetConfig, root: &Path, index: usize) -> Result<()> {
    let label = identity_label(&cfg.source_tag, index);
    let dir = root.join(&label);
    if dir.is_dir() {
        return Ok(());
    }
    let spec = identity_spec(gen.latent_dims(), cfg.impressions_per_id, cfg.seed, index)?;
    let images = generate_synthetic_identity(gen, &spec)?;
    write_identity_dir(root, &label, &images)
}

fn write_identity_dir(root: &Path, label: &str, images: &[ImageGrid]) -> Result<()> {
    let tmp = root.join(format!(".{label}.partial"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    for (k, img) in images.iter().enumerate() {
        img.save_png(&tmp.join(format!("impression_{}.png", k + 1)))?;
    }
    let dir = root.join(label);
    fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))
}

/// Unconditional baseline: every image becomes its own identity with `k`
/// identical impressions.
pub fn duplicate_baseline(images: &[ImageGrid], k: usize, source_tag: &str, root: &Path) -> Result<DatasetManifest> {
    ensure!(k >= 1, Config, "k must be >= 1");
    validate_tag(source_tag)?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut records = Vec::with_capacity(images.len() * k);
    for (i, img) in images.iter().enumerate() {
        let label = identity_label(source_tag, i);
        write_identity_dir(root, &label, &vec![img.clone(); k])?;
        for kk in 1..=k {
            records.push(ManifestRecord {
                identity_label: label.clone(),
                person_label: label.clone(),
                impression_index: kk,
                path: root.join(&label).join(format!("impression_{kk}.png")),
                split: Split::Train,
                source: source_tag.to_string(),
            });
        }
    }
    let manifest = DatasetManifest::new(records)?;
    manifest.save(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Unions manifests whose identity namespaces are disjoint.
pub fn merge_datasets(manifests: &[&DatasetManifest]) -> Result<DatasetManifest> {
    let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
    let mut records = Vec::new();
    for (m, manifest) in manifests.iter().enumerate() {
        for label in manifest.identities().keys() {
            if let Some(prev) = owner.insert(label, m) {
                return Err(Error::Integrity(format!(
                    "identity {label} appears in both manifest {prev} and manifest {m}"
                )));
            }
        }
        records.extend(manifest.records.iter().cloned());
    }
    DatasetManifest::new(records)
}

/// Convenience for unconditional sampling: `n` images from independent full
/// latents.
pub fn sample_unconditional<G: ImageGenerator + ?Sized>(gen: &G, n: usize, seed: u64) -> Result<Vec<ImageGrid>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latents = (0..n).map(|_| sample_latent(&mut rng, gen.latent_dims())).collect::<Result<Vec<_>>>()?;
    gen.generate(&latents, rng.gen())
}
