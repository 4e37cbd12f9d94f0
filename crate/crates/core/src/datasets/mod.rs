//! Training-set construction over propagated labelings, ambiguous-label
//! jitter, synthetic corpora with dense truth, and a block-matching flow
//! estimator.

mod flow_estimate;
mod jitter;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::imagery::{DatasetManifest, ImageryError, ManifestEntry, Ratings, Tier};

pub use flow_estimate::{estimate_flow, estimate_flow_with};
pub use jitter::{jitter_labels, region_perimeters, JitterConfig};
pub use synth::{render_sequence, synth_corpus, SynthConfig, SynthCorpus, SynthSequence};

/// Number of sets every partition scheme produces.
pub const NUM_SETS: usize = 5;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("sequence {seq} is missing offsets {missing:?}")]
    MissingOffsets { seq: String, missing: Vec<u32> },
    #[error("{count} item(s) have no rating, first: {first}")]
    Unrated { count: usize, first: String },
    #[error("rating {rating} of {id} outside 1..=9")]
    RatingOutOfRange { id: String, rating: u8 },
    #[error("duplicate item {0}")]
    Duplicate(String),
    #[error("accumulation depth {k} outside 2..={available}")]
    BadDepth { k: usize, available: usize },
    #[error("image {0} has {1} jitter variants, need {2}")]
    MissingJitter(String, usize, usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid synthetic config: {0}")]
    InvalidSynthConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Imagery(#[from] ImageryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One propagated labeling.
#[derive(Debug, Clone, PartialEq)]
pub struct PgtItem {
    pub seq: String,
    pub offset: u32,
    pub image: PathBuf,
    pub labels: PathBuf,
    pub rating: Option<u8>,
}

impl PgtItem {
    pub fn id(&self) -> String {
        format!("{}/{}", self.seq, self.offset)
    }

    fn to_entry(&self) -> ManifestEntry {
        ManifestEntry {
            image: self.image.clone(),
            labels: self.labels.clone(),
            tier: Tier::Pgt,
            seq: self.seq.clone(),
            offset: self.offset,
            rating: self.rating,
            trust: None,
        }
    }
}

/// All propagated labelings of a corpus, keyed by `(seq, offset)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PgtIndex {
    items: Vec<PgtItem>,
}

impl PgtIndex {
    pub fn new(items: Vec<PgtItem>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for it in &items {
            if it.offset == 0 {
                return Err(DatasetError::InvalidArgument(format!(
                    "{} has offset 0; propagated items start at 1",
                    it.id()
                )));
            }
            if let Some(r) = it.rating {
                if !(1..=9).contains(&r) {
                    return Err(DatasetError::RatingOutOfRange { id: it.id(), rating: r });
                }
            }
            if !seen.insert((it.seq.clone(), it.offset)) {
                return Err(DatasetError::Duplicate(it.id()));
            }
        }
        Ok(Self { items })
    }

    /// Collects the `pgt` rows of a manifest.
    pub fn from_manifest(m: &DatasetManifest) -> Result<Self, DatasetError> {
        Self::new(
            m.entries
                .iter()
                .filter(|e| e.tier == Tier::Pgt)
                .map(|e| PgtItem {
                    seq: e.seq.clone(),
                    offset: e.offset,
                    image: e.image.clone(),
                    labels: e.labels.clone(),
                    rating: e.rating,
                })
                .collect(),
        )
    }

    pub fn to_manifest(&self) -> DatasetManifest {
        DatasetManifest {
            entries: self.items.iter().map(PgtItem::to_entry).collect(),
        }
    }

    pub fn items(&self) -> &[PgtItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// A named list of training samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub name: String,
    samples: Vec<ManifestEntry>,
}

impl TrainSet {
    pub fn new(name: impl Into<String>, samples: Vec<ManifestEntry>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert((s.image.clone(), s.labels.clone())) {
                return Err(DatasetError::Duplicate(format!(
                    "({}, {})",
                    s.image.display(),
                    s.labels.display()
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            samples,
        })
    }

    pub fn from_manifest(name: impl Into<String>, m: &DatasetManifest) -> Result<Self, DatasetError> {
        Self::new(name, m.entries.clone())
    }

    pub fn samples(&self) -> &[ManifestEntry] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(gt, pgt)` sample counts.
    pub fn tier_counts(&self) -> (usize, usize) {
        let gt = self.samples.iter().filter(|s| s.tier == Tier::Gt).count();
        (gt, self.samples.len() - gt)
    }

    /// Manifest rows; GT rows carry trust 1, PGT rows leave it to the trainer.
    pub fn to_manifest(&self) -> Result<DatasetManifest, DatasetError> {
        let entries = self
            .samples
            .iter()
            .map(|s| ManifestEntry {
                trust: match s.tier {
                    Tier::Gt => Some(1.0),
                    Tier::Pgt => s.trust,
                },
                ..s.clone()
            })
            .collect();
        Ok(DatasetManifest::new(entries)?)
    }

    fn from_items(name: String, items: &[&PgtItem]) -> Self {
        Self {
            name,
            samples: items.iter().map(|i| i.to_entry()).collect(),
        }
    }
}

/// Splits into `NUM_SETS` consecutive blocks whose sizes differ by at most one.
fn split_blocks(items: &[&PgtItem], prefix: &str) -> Vec<TrainSet> {
    let n = items.len();
    let (base, extra) = (n / NUM_SETS, n % NUM_SETS);
    let mut start = 0;
    (0..NUM_SETS)
        .map(|k| {
            let len = base + usize::from(k < extra);
            let set = TrainSet::from_items(format!("{prefix}{}", k + 1), &items[start..start + len]);
            start += len;
            set
        })
        .collect()
}

/// `PGT_Sk` = all items at frame offset `k`.
pub fn sequential_sets(index: &PgtIndex) -> Result<Vec<TrainSet>, DatasetError> {
    let mut by_seq: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
    for it in index.items() {
        by_seq.entry(it.seq.as_str()).or_default().insert(it.offset);
    }
    for (seq, offs) in &by_seq {
        let missing: Vec<u32> = (1..=NUM_SETS as u32).filter(|o| !offs.contains(o)).collect();
        if !missing.is_empty() {
            return Err(DatasetError::MissingOffsets {
                seq: (*seq).to_string(),
                missing,
            });
        }
    }
    Ok((1..=NUM_SETS as u32)
        .map(|k| {
            let items: Vec<&PgtItem> = index.items().iter().filter(|i| i.offset == k).collect();
            TrainSet::from_items(format!("PGT_S{k}"), &items)
        })
        .collect())
}

/// `PGT_R1..R5`: items sorted by rating (best first), ties by
/// `(seq, offset)` ascending, then cut into equal consecutive blocks.
pub fn rated_sets(index: &PgtIndex, ratings: &Ratings) -> Result<Vec<TrainSet>, DatasetError> {
    let mut rated = Vec::with_capacity(index.len());
    let mut unrated = Vec::new();
    for it in index.items() {
        match ratings.get(&it.seq, it.offset).or(it.rating) {
            Some(r) if (1..=9).contains(&r) => rated.push((r, it)),
            Some(r) => return Err(DatasetError::RatingOutOfRange { id: it.id(), rating: r }),
            None => unrated.push(it.id()),
        }
    }
    if !unrated.is_empty() {
        return Err(DatasetError::Unrated {
            count: unrated.len(),
            first: unrated[0].clone(),
        });
    }
    rated.sort_by(|(ra, a), (rb, b)| {
        rb.cmp(ra)
            .then_with(|| a.seq.cmp(&b.seq))
            .then_with(|| a.offset.cmp(&b.offset))
    });
    let items: Vec<&PgtItem> = rated
        .into_iter()
        .map(|(_, it)| it)
        .collect();
    let mut sets = split_blocks(&items, "PGT_R");
    // carry the ratings used for sorting into the set rows
    for set in &mut sets {
        for s in &mut set.samples {
            s.rating = ratings.get(&s.seq, s.offset).or(s.rating);
        }
    }
    Ok(sets)
}

/// `PGT_RND1..5`: a seeded uniform shuffle cut into consecutive blocks.
pub fn random_sets(index: &PgtIndex, seed: u64) -> Vec<TrainSet> {
    let mut items: Vec<&PgtItem> = index.items().iter().collect();
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    split_blocks(&items, "PGT_RND")
}

/// GT followed by one PGT set.
pub fn with_gt(gt: &TrainSet, set: &TrainSet) -> Result<TrainSet, DatasetError> {
    let samples = gt.samples.iter().chain(&set.samples).cloned().collect();
    TrainSet::new(format!("GT+{}", set.name), samples)
}

/// GT followed by the first `k` PGT sets, in order.
pub fn accumulate(gt: &TrainSet, pgt_sets: &[TrainSet], k: usize) -> Result<TrainSet, DatasetError> {
    if k < 2 || k > pgt_sets.len() {
        return Err(DatasetError::BadDepth {
            k,
            available: pgt_sets.len(),
        });
    }
    let samples = gt
        .samples
        .iter()
        .chain(pgt_sets[..k].iter().flat_map(|s| s.samples.iter()))
        .cloned()
        .collect();
    TrainSet::new(format!("GT+PGT(1-{k})"), samples)
}

/// Builds `AGT_1`, `AGT_1-2`, `AGT_1-3` from GT and three jittered label
/// files per GT sample (`jitters[i]` belongs to `gt.samples()[i]`).
pub fn build_agt_sets(
    gt: &TrainSet,
    jitters: &[Vec<PathBuf>],
) -> Result<[TrainSet; 3], DatasetError> {
    if jitters.len() != gt.len() {
        return Err(DatasetError::InvalidArgument(format!(
            "{} jitter lists for {} GT samples",
            jitters.len(),
            gt.len()
        )));
    }
    for (s, j) in gt.samples.iter().zip(jitters) {
        if j.len() < 3 {
            return Err(DatasetError::MissingJitter(s.seq.clone(), j.len(), 3));
        }
    }
    let build = |k: usize| {
        let mut samples = gt.samples.clone();
        for (s, j) in gt.samples.iter().zip(jitters) {
            for (v, path) in j.iter().take(k).enumerate() {
                samples.push(ManifestEntry {
                    image: s.image.clone(),
                    labels: path.clone(),
                    tier: Tier::Pgt,
                    seq: format!("{}-j{}", s.seq, v + 1),
                    offset: 0,
                    rating: None,
                    trust: None,
                });
            }
        }
        let name = if k == 1 { "AGT_1".to_string() } else { format!("AGT_1-{k}") };
        TrainSet::new(name, samples)
    };
    Ok([build(1)?, build(2)?, build(3)?])
}
