//! Disentangled latent space and paired training batches.
//!
//! A latent is the concatenation `[z_id, z_app]`. Training batches contain
//! same-ID pairs (shared `z_id`, fresh `z_app`) and same-appearance pairs
//! (shared `z_app`, fresh `z_id`); every other slot is an independent draw.
//! A slot belongs to at most one pair.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentDims {
    pub id: usize,
    pub app: usize,
}

impl Default for LatentDims {
    fn default() -> Self {
        Self { id: 256, app: 256 }
    }
}

impl LatentDims {
    pub fn new(id: usize, app: usize) -> Self {
        Self { id, app }
    }

    pub fn total(&self) -> usize {
        self.id + self.app
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.id > 0 && self.app > 0, Config, "latent dimensions must be positive, got {self:?}");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentangledLatent {
    z_id: Vec<f64>,
    z_app: Vec<f64>,
}

impl DisentangledLatent {
    pub fn new(z_id: Vec<f64>, z_app: Vec<f64>) -> Result<Self> {
        ensure!(!z_id.is_empty() && !z_app.is_empty(), Config, "latent sub-vectors must be non-empty");
        ensure!(
            z_id.iter().chain(&z_app).all(|v| v.is_finite()),
            Usage,
            "latent contains non-finite entries"
        );
        Ok(Self { z_id, z_app })
    }

    pub fn z_id(&self) -> &[f64] {
        &self.z_id
    }

    pub fn z_app(&self) -> &[f64] {
        &self.z_app
    }

    pub fn dims(&self) -> LatentDims {
        LatentDims::new(self.z_id.len(), self.z_app.len())
    }

    /// `[z_id, z_app]`.
    pub fn concat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.z_id.len() + self.z_app.len());
        v.extend_from_slice(&self.z_id);
        v.extend_from_slice(&self.z_app);
        v
    }

    pub fn with_app(&self, z_app: Vec<f64>) -> Result<Self> {
        Self::new(self.z_id.clone(), z_app)
    }

    pub fn with_id(&self, z_id: Vec<f64>) -> Result<Self> {
        Self::new(z_id, self.z_app.clone())
    }
}

/// Draws `len` standard-normal coordinates.
pub fn sample_vector<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Standard-normal prior over both sub-spaces.
pub fn sample_latent<R: Rng + ?Sized>(rng: &mut R, dims: LatentDims) -> Result<DisentangledLatent> {
    dims.validate()?;
    let z_id = sample_vector(rng, dims.id);
    let z_app = sample_vector(rng, dims.app);
    Ok(DisentangledLatent { z_id, z_app })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    SameId,
    SameApp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairRelation {
    pub index_a: usize,
    pub index_b: usize,
    pub kind: PairKind,
}

/// Relation between two batch slots as seen by the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    SameId,
    SameApp,
    Independent,
}

impl From<PairKind> for Relation {
    fn from(k: PairKind) -> Self {
        match k {
            PairKind::SameId => Relation::SameId,
            PairKind::SameApp => Relation::SameApp,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingConfig {
    pub num_same_id_pairs: usize,
    pub num_same_app_pairs: usize,
}

impl Default for PairingConfig {
    fn default() -> Self {
        Self { num_same_id_pairs: 4, num_same_app_pairs: 4 }
    }
}

impl PairingConfig {
    pub fn slots_needed(&self) -> usize {
        2 * (self.num_same_id_pairs + self.num_same_app_pairs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    latents: Vec<DisentangledLatent>,
    relations: Vec<PairRelation>,
}

/// Builds a batch with the requested pair counts.
///
/// Same-ID pairs occupy slots `(0,1), (2,3), ...`, same-appearance pairs
/// follow, and the remaining slots hold independent latents.
pub fn make_training_batch<R: Rng + ?Sized>(
    rng: &mut R,
    batch_size: usize,
    pairing: PairingConfig,
    dims: LatentDims,
) -> Result<BatchPlan> {
    dims.validate()?;
    ensure!(batch_size > 0, Config, "batch size must be positive");
    ensure!(
        pairing.slots_needed() <= batch_size,
        Config,
        "{} same-ID and {} same-appearance pairs need {} slots, batch has {batch_size}",
        pairing.num_same_id_pairs,
        pairing.num_same_app_pairs,
        pairing.slots_needed()
    );
    let mut latents = Vec::with_capacity(batch_size);
    let mut relations = Vec::with_capacity(pairing.num_same_id_pairs + pairing.num_same_app_pairs);
    for _ in 0..pairing.num_same_id_pairs {
        let first = sample_latent(rng, dims)?;
        let second = first.with_app(sample_vector(rng, dims.app))?;
        let a = latents.len();
        latents.push(first);
        latents.push(second);
        relations.push(PairRelation { index_a: a, index_b: a + 1, kind: PairKind::SameId });
    }
    for _ in 0..pairing.num_same_app_pairs {
        let first = sample_latent(rng, dims)?;
        let second = first.with_id(sample_vector(rng, dims.id))?;
        let a = latents.len();
        latents.push(first);
        latents.push(second);
        relations.push(PairRelation { index_a: a, index_b: a + 1, kind: PairKind::SameApp });
    }
    while latents.len() < batch_size {
        latents.push(sample_latent(rng, dims)?);
    }
    Ok(BatchPlan { latents, relations })
}

impl BatchPlan {
    /// Builds a plan from explicit parts and checks it against the latents.
    pub fn from_parts(latents: Vec<DisentangledLatent>, mut relations: Vec<PairRelation>) -> Result<Self> {
        relations.sort_by_key(|r| (r.index_a.min(r.index_b), r.index_a.max(r.index_b)));
        let plan = Self { latents, relations };
        plan.validate()?;
        Ok(plan)
    }

    pub fn latents(&self) -> &[DisentangledLatent] {
        &self.latents
    }

    pub fn relations(&self) -> &[PairRelation] {
        &self.relations
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn count(&self, kind: PairKind) -> usize {
        self.relations.iter().filter(|r| r.kind == kind).count()
    }

    /// Declared relation between slots `i` and `j`; symmetric.
    pub fn relation_of(&self, i: usize, j: usize) -> Result<Relation> {
        let n = self.latents.len();
        ensure!(i < n && j < n, Usage, "indices ({i}, {j}) out of range for batch of {n}");
        ensure!(i != j, Usage, "a slot has no relation with itself (index {i})");
        Ok(self
            .relations
            .iter()
            .find(|r| (r.index_a == i && r.index_b == j) || (r.index_a == j && r.index_b == i))
            .map_or(Relation::Independent, |r| r.kind.into()))
    }

    /// Dense `N × N` relation table (diagonal reported as `Independent`).
    pub fn relation_matrix(&self) -> Vec<Vec<Relation>> {
        let n = self.latents.len();
        let mut m = vec![vec![Relation::Independent; n]; n];
        for r in &self.relations {
            m[r.index_a][r.index_b] = r.kind.into();
            m[r.index_b][r.index_a] = r.kind.into();
        }
        m
    }

    /// Pairs whose sub-vectors are element-wise equal, found by scanning.
    pub fn recover_relations(&self) -> Vec<PairRelation> {
        let mut out = Vec::new();
        for i in 0..self.latents.len() {
            for j in (i + 1)..self.latents.len() {
                let (a, b) = (&self.latents[i], &self.latents[j]);
                let same_id = a.z_id == b.z_id;
                let same_app = a.z_app == b.z_app;
                let kind = match (same_id, same_app) {
                    (true, false) => Some(PairKind::SameId),
                    (false, true) => Some(PairKind::SameApp),
                    _ => None,
                };
                if let Some(kind) = kind {
                    out.push(PairRelation { index_a: i, index_b: j, kind });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.latents.len();
        let mut used = vec![false; n];
        for r in &self.relations {
            ensure!(r.index_a != r.index_b, Integrity, "relation {r:?} pairs a slot with itself");
            ensure!(r.index_a < n && r.index_b < n, Integrity, "relation {r:?} out of range for {n} slots");
            for idx in [r.index_a, r.index_b] {
                ensure!(!used[idx], Integrity, "slot {idx} participates in more than one relation");
                used[idx] = true;
            }
            let (a, b) = (&self.latents[r.index_a], &self.latents[r.index_b]);
            let ok = match r.kind {
                PairKind::SameId => a.z_id == b.z_id && a.z_app != b.z_app,
                PairKind::SameApp => a.z_app == b.z_app && a.z_id != b.z_id,
            };
            ensure!(ok, Integrity, "relation {r:?} does not match latent contents");
        }
        let mut declared: Vec<_> = self
            .relations
            .iter()
            .map(|r| (r.index_a.min(r.index_b), r.index_a.max(r.index_b), r.kind))
            .collect();
        declared.sort_by_key(|&(a, b, _)| (a, b));
        let recovered: Vec<_> = self.recover_relations().iter().map(|r| (r.index_a, r.index_b, r.kind)).collect();
        ensure!(declared == recovered, Integrity, "undeclared equal sub-vectors present in batch");
        Ok(())
    }

    pub fn to_record(&self) -> BatchPlanRecord {
        let dims = self.latents.first().map(|l| l.dims()).unwrap_or_default();
        BatchPlanRecord {
            dims: [dims.id, dims.app],
            latents: self.latents.iter().map(|l| l.concat()).collect(),
            relations: self.relations.iter().map(|r| (r.index_a, r.index_b, r.kind)).collect(),
        }
    }

    pub fn from_record(rec: &BatchPlanRecord) -> Result<Self> {
        let [id, app] = rec.dims;
        let latents = rec
            .latents
            .iter()
            .map(|v| {
                ensure!(v.len() == id + app, Usage, "latent of length {} for dims {:?}", v.len(), rec.dims);
                DisentangledLatent::new(v[..id].to_vec(), v[id..].to_vec())
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::format("batch plan", e))?;
        let relations =
            rec.relations.iter().map(|&(index_a, index_b, kind)| PairRelation { index_a, index_b, kind }).collect();
        Self::from_parts(latents, relations)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_record()).expect("batch plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: BatchPlanRecord = serde_json::from_str(s).map_err(|e| Error::format("batch plan JSON", e))?;
        Self::from_record(&rec)
    }
}

/// JSON form of a [`BatchPlan`]: latents as flat `[z_id, z_app]` lists and
/// relations as `(index_a, index_b, kind)` triples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPlanRecord {
    pub dims: [usize; 2],
    pub latents: Vec<Vec<f64>>,
    pub relations: Vec<(usize, usize, PairKind)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn latent_length_and_determinism() {
        let dims = LatentDims::default();
        let a = sample_latent(&mut ChaCha8Rng::seed_from_u64(7), dims).unwrap();
        let b = sample_latent(&mut ChaCha8Rng::seed_from_u64(7), dims).unwrap();
        assert_eq!(a.concat().len(), 512);
        assert_eq!(a, b);
        assert_eq!(&a.concat()[..256], a.z_id());
        assert_eq!(&a.concat()[256..], a.z_app());
    }

    #[test]
    fn zero_dims_rejected() {
        let r = sample_latent(&mut ChaCha8Rng::seed_from_u64(0), LatentDims::new(0, 3));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn prior_moments() {
        // direct statistics over 10,000 draws, coordinate by coordinate
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = LatentDims::new(8, 8);
        let samples: Vec<Vec<f64>> = (0..10_000).map(|_| sample_latent(&mut rng, dims).unwrap().concat()).collect();
        for c in 0..16 {
            let n = samples.len() as f64;
            let mean = samples.iter().map(|s| s[c]).sum::<f64>() / n;
            let var = samples.iter().map(|s| (s[c] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!(mean.abs() < 0.05, "coordinate {c}: mean {mean}");
            assert!((var - 1.0).abs() < 0.1, "coordinate {c}: variance {var}");
        }
    }

    #[test]
    fn batch_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = LatentDims::new(4, 4);
        let full = make_training_batch(&mut rng, 8, PairingConfig { num_same_id_pairs: 2, num_same_app_pairs: 2 }, dims)
            .unwrap();
        assert_eq!(full.len(), 8);
        assert_eq!(full.relations().len(), 4);

        let free = make_training_batch(&mut rng, 8, PairingConfig { num_same_id_pairs: 0, num_same_app_pairs: 0 }, dims)
            .unwrap();
        assert_eq!(free.len(), 8);
        assert!(free.relations().is_empty());

        let bad = make_training_batch(&mut rng, 6, PairingConfig { num_same_id_pairs: 2, num_same_app_pairs: 2 }, dims);
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn relation_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = make_training_batch(&mut rng, 6, PairingConfig { num_same_id_pairs: 1, num_same_app_pairs: 1 }, LatentDims::new(3, 3))
            .unwrap();
        assert_eq!(plan.relation_of(0, 1).unwrap(), Relation::SameId);
        assert_eq!(plan.relation_of(1, 0).unwrap(), Relation::SameId);
        assert_eq!(plan.relation_of(3, 2).unwrap(), Relation::SameApp);
        assert_eq!(plan.relation_of(0, 4).unwrap(), Relation::Independent);
        assert!(matches!(plan.relation_of(2, 2), Err(Error::Usage(_))));
        assert!(matches!(plan.relation_of(0, 6), Err(Error::Usage(_))));
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = make_training_batch(&mut rng, 7, PairingConfig::default_for(7), LatentDims::new(2, 3)).unwrap();
        let back = BatchPlan::from_json(&plan.to_json()).unwrap();
        assert_eq!(plan, back);
    }

    #[test]
    fn inconsistent_relations_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = LatentDims::new(2, 2);
        let a = sample_latent(&mut rng, dims).unwrap();
        let b = sample_latent(&mut rng, dims).unwrap();
        let r = BatchPlan::from_parts(vec![a, b], vec![PairRelation { index_a: 0, index_b: 1, kind: PairKind::SameId }]);
        assert!(matches!(r, Err(Error::Integrity(_))));
    }

    impl PairingConfig {
        fn default_for(n: usize) -> Self {
            Self { num_same_id_pairs: n / 4, num_same_app_pairs: n / 4 }
        }
    }
}
