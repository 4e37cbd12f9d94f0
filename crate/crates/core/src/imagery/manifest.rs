//! Line-oriented CSV manifests and rating tables.
//!
//! Manifest header: `image,labels,tier,seq,offset,rating`, optionally
//! followed by a `trust` column. Ratings header: `id,rating` with
//! `id = <seq>/<offset>`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{io_err, ImageryError};

const HEADER: [&str; 6] = ["image", "labels", "tier", "seq", "offset", "rating"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tier {
    Gt,
    Pgt,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Gt => "gt",
            Tier::Pgt => "pgt",
        })
    }
}

impl FromStr for Tier {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gt" => Ok(Tier::Gt),
            "pgt" => Ok(Tier::Pgt),
            other => Err(format!("unknown tier {other:?} (expected gt or pgt)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub labels: PathBuf,
    pub tier: Tier,
    pub seq: String,
    pub offset: u32,
    pub rating: Option<u8>,
    pub trust: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, ImageryError> {
        let m = Self { entries };
        m.validate(Path::new("<memory>"), 0)?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(gt, pgt)` entry counts.
    pub fn tier_counts(&self) -> (usize, usize) {
        let gt = self.entries.iter().filter(|e| e.tier == Tier::Gt).count();
        (gt, self.entries.len() - gt)
    }

    fn validate(&self, origin: &Path, first_line: usize) -> Result<(), ImageryError> {
        let mut seen = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            let bad = |message: String| ImageryError::Manifest {
                path: origin.to_path_buf(),
                line: first_line + i,
                message,
            };
            if let Some(r) = e.rating {
                if !(1..=10).contains(&r) {
                    return Err(bad(format!("rating {r} outside 1..=10")));
                }
            }
            if e.tier == Tier::Gt {
                if e.offset != 0 {
                    return Err(bad(format!("gt entry with offset {}", e.offset)));
                }
                if e.rating.is_some_and(|r| r != 10) {
                    return Err(bad("gt entries must be rated 10".into()));
                }
            }
            if let Some(t) = e.trust {
                if !(0.0..=1.0).contains(&t) {
                    return Err(bad(format!("trust {t} outside [0, 1]")));
                }
            }
            if !seen.insert((e.seq.as_str(), e.offset, e.tier)) {
                return Err(bad(format!(
                    "duplicate key (seq={}, offset={}, tier={})",
                    e.seq, e.offset, e.tier
                )));
            }
        }
        Ok(())
    }
}

/// Parses manifest text without touching the filesystem.
pub fn parse_manifest(text: &str, origin: &Path) -> Result<DatasetManifest, ImageryError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    let has_trust = match cols.as_slice() {
        c if c == HEADER => false,
        c if c.len() == 7 && c[..6] == HEADER && c[6] == "trust" => true,
        _ => {
            return Err(ImageryError::Manifest {
                path: origin.to_path_buf(),
                line: 1,
                message: format!("unexpected header {:?}", cols.join(",")),
            })
        }
    };
    let mut entries = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let bad = |message: String| ImageryError::Manifest {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let tier: Tier = rec[2].parse().map_err(bad)?;
        let offset: u32 = rec[4]
            .parse()
            .map_err(|_| bad(format!("bad offset {:?}", &rec[4])))?;
        let rating = match &rec[5] {
            "" => None,
            s => Some(
                s.parse::<u8>()
                    .map_err(|_| bad(format!("bad rating {s:?}")))?,
            ),
        };
        let trust = match has_trust.then(|| &rec[6]) {
            None | Some("") => None,
            Some(s) => Some(
                s.parse::<f64>()
                    .map_err(|_| bad(format!("bad trust {s:?}")))?,
            ),
        };
        if rec[0].is_empty() || rec[1].is_empty() || rec[3].is_empty() {
            return Err(bad("empty image, labels or seq field".into()));
        }
        entries.push(ManifestEntry {
            image: PathBuf::from(&rec[0]),
            labels: PathBuf::from(&rec[1]),
            tier,
            seq: rec[3].to_string(),
            offset,
            rating,
            trust,
        });
    }
    let m = DatasetManifest { entries };
    m.validate(origin, 2)?;
    Ok(m)
}

/// Loads a manifest and resolves its paths relative to the manifest's
/// directory. Every unresolvable path is reported.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ImageryError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut m = parse_manifest(&text, path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut missing = Vec::new();
    for (i, e) in m.entries.iter_mut().enumerate() {
        for p in [&mut e.image, &mut e.labels] {
            let joined = base.join(&*p);
            match joined.canonicalize() {
                Ok(abs) => *p = abs,
                Err(_) => missing.push(format!("line {}: {}", i + 2, joined.display())),
            }
        }
    }
    if !missing.is_empty() {
        let shown: Vec<_> = missing.iter().take(5).cloned().collect();
        return Err(ImageryError::Manifest {
            path: path.to_path_buf(),
            line: 0,
            message: format!(
                "{} unresolvable path(s): {}{}",
                missing.len(),
                shown.join("; "),
                if missing.len() > 5 { "; ..." } else { "" }
            ),
        });
    }
    Ok(m)
}

pub fn write_manifest(
    path: &Path,
    manifest: &DatasetManifest,
    with_trust: bool,
) -> Result<(), ImageryError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = HEADER.to_vec();
    if with_trust {
        header.push("trust");
    }
    w.write_record(&header)?;
    for e in &manifest.entries {
        let mut rec = vec![
            e.image.display().to_string(),
            e.labels.display().to_string(),
            e.tier.to_string(),
            e.seq.clone(),
            e.offset.to_string(),
            e.rating.map(|r| r.to_string()).unwrap_or_default(),
        ];
        if with_trust {
            rec.push(e.trust.map(|t| t.to_string()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Visual quality ratings keyed by `(seq, offset)`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Ratings {
    pub by_item: BTreeMap<(String, u32), u8>,
}

impl Ratings {
    pub fn get(&self, seq: &str, offset: u32) -> Option<u8> {
        self.by_item.get(&(seq.to_string(), offset)).copied()
    }
}

pub fn parse_ratings(text: &str, origin: &Path) -> Result<Ratings, ImageryError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "rating"] {
        return Err(ImageryError::Manifest {
            path: origin.to_path_buf(),
            line: 1,
            message: "expected header id,rating".into(),
        });
    }
    let mut by_item = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |message: String| ImageryError::Manifest {
            path: origin.to_path_buf(),
            line: i + 2,
            message,
        };
        let (seq, off) = rec[0]
            .rsplit_once('/')
            .ok_or_else(|| bad(format!("id {:?} is not <seq>/<offset>", &rec[0])))?;
        let off: u32 = off.parse().map_err(|_| bad(format!("bad offset in {:?}", &rec[0])))?;
        let rating: u8 = rec[1]
            .parse()
            .map_err(|_| bad(format!("bad rating {:?}", &rec[1])))?;
        if !(1..=10).contains(&rating) {
            return Err(bad(format!("rating {rating} outside 1..=10")));
        }
        if by_item.insert((seq.to_string(), off), rating).is_some() {
            return Err(bad(format!("duplicate id {:?}", &rec[0])));
        }
    }
    Ok(Ratings { by_item })
}

pub fn load_ratings(path: &Path) -> Result<Ratings, ImageryError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_ratings(&text, path)
}

pub fn write_ratings(path: &Path, ratings: &Ratings) -> Result<(), ImageryError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "rating"])?;
    for ((seq, off), r) in &ratings.by_item {
        w.write_record([format!("{seq}/{off}"), r.to_string()])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}
