//! Dataset manifest handling: CSV ingestion, statistics, deterministic splits,
//! and a synthetic desk-scale dataset generator.
//!
//! A manifest is a CSV with header `id,boneage,male` next to a directory of
//! PNG radiographs named `<id>.png`. Bone ages are integer months in
//! `[1, 288]`; `male` is `True` or `False`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Valid bone age range in months, inclusive.
pub const AGE_RANGE: (u32, u32) = (1, 288);

/// Default histogram bin width in months.
pub const DEFAULT_BIN_WIDTH: u32 = 12;

pub type DataResult<T> = Result<T, DataError>;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed row at line {line}: {msg}")]
    MalformedRow { line: u64, msg: String },
    #[error("missing image for record `{id}`: {path}")]
    MissingImage { id: String, path: PathBuf },
    #[error("duplicate id `{0}` in manifest")]
    DuplicateId(String),
    #[error("manifest header is missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("requested split sizes {requested} exceed manifest size {available}")]
    InsufficientSamples { requested: usize, available: usize },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error reading {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("image encode error at {path}: {source}")]
    ImageEncode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

/// One radiograph record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: PathBuf,
    /// Bone age in months.
    pub bone_age: u32,
    pub male: bool,
}

/// An ordered collection of records plus provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    /// Where the manifest came from: `"<csv>+<image dir>"` or `"synthetic:<seed>"`.
    pub source: String,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Look up records by id, preserving the requested order.
    pub fn select(&self, ids: &[String]) -> Vec<SampleRecord> {
        let by_id: BTreeMap<&str, &SampleRecord> = self
            .records
            .iter()
            .map(|r| (r.id.as_str(), r))
            .collect();
        ids.iter()
            .filter_map(|id| by_id.get(id.as_str()).map(|r| (*r).clone()))
            .collect()
    }
}

/// Histograms keyed by bin lower edge (months).
pub type AgeHistogram = BTreeMap<u32, usize>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenderHistograms {
    pub male: AgeHistogram,
    pub female: AgeHistogram,
}

/// Counts and age histograms for a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub male_count: usize,
    pub female_count: usize,
    pub bin_width: u32,
    pub age_histogram: AgeHistogram,
    pub per_gender_histograms: GenderHistograms,
    pub min_age: Option<u32>,
    pub max_age: Option<u32>,
    pub mean_age: Option<f64>,
    /// Lower edge of the most populated bin; smallest edge wins ties.
    pub modal_bin: Option<u32>,
}

impl DatasetStats {
    /// JSON shape consumed by downstream tooling:
    /// `{total, male_count, female_count, min, max, mean, histogram:[{bin,count}], ...}`.
    pub fn to_json(&self) -> serde_json::Value {
        let histogram: Vec<serde_json::Value> = self
            .age_histogram
            .iter()
            .map(|(bin, count)| serde_json::json!({ "bin": bin, "count": count }))
            .collect();
        let gender_hist = |h: &AgeHistogram| -> Vec<serde_json::Value> {
            h.iter()
                .map(|(bin, count)| serde_json::json!({ "bin": bin, "count": count }))
                .collect()
        };
        serde_json::json!({
            "total": self.total,
            "male_count": self.male_count,
            "female_count": self.female_count,
            "min": self.min_age,
            "max": self.max_age,
            "mean": self.mean_age,
            "histogram": histogram,
            "bin_width": self.bin_width,
            "modal_bin": self.modal_bin,
            "per_gender_histograms": {
                "male": gender_hist(&self.per_gender_histograms.male),
                "female": gender_hist(&self.per_gender_histograms.female),
            },
        })
    }
}

/// Requested split sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSpec {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// A deterministic train/val/test assignment. The three id lists are pairwise
/// disjoint and sized exactly as requested.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub spec: SplitSpec,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl SplitAssignment {
    pub fn save_json(&self, path: &Path) -> DataResult<()> {
        let data = serde_json::to_vec_pretty(self).expect("split serialization");
        fs::write(path, data).map_err(|e| DataError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load_json(path: &Path) -> DataResult<Self> {
        let raw = fs::read(path).map_err(|e| DataError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_slice(&raw).map_err(|e| DataError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })
    }
}

fn parse_male(raw: &str) -> Option<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

/// Load and validate a manifest CSV.
///
/// Each row becomes one [`SampleRecord`] with its image at
/// `<image_dir>/<id>.png`. In strict mode every referenced image must exist.
pub fn load_manifest(csv_path: &Path, image_dir: &Path, strict: bool) -> DataResult<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(csv_path)
        .map_err(|e| DataError::Csv {
            path: csv_path.to_path_buf(),
            source: e,
        })?;

    let headers = reader
        .headers()
        .map_err(|e| DataError::Csv {
            path: csv_path.to_path_buf(),
            source: e,
        })?
        .clone();
    let col = |name: &'static str| -> DataResult<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or(DataError::MissingColumn(name))
    };
    let id_col = col("id")?;
    let age_col = col("boneage")?;
    let male_col = col("male")?;

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| DataError::Csv {
            path: csv_path.to_path_buf(),
            source: e,
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let field = |idx: usize| -> DataResult<&str> {
            row.get(idx).ok_or_else(|| DataError::MalformedRow {
                line,
                msg: "short row".into(),
            })
        };

        let id = field(id_col)?.to_string();
        if id.is_empty() {
            return Err(DataError::MalformedRow {
                line,
                msg: "empty id".into(),
            });
        }
        let age_raw = field(age_col)?;
        let bone_age: u32 = age_raw.parse().map_err(|_| DataError::MalformedRow {
            line,
            msg: format!("unparseable boneage `{age_raw}`"),
        })?;
        if bone_age < AGE_RANGE.0 || bone_age > AGE_RANGE.1 {
            return Err(DataError::MalformedRow {
                line,
                msg: format!(
                    "boneage {bone_age} outside [{}, {}] months",
                    AGE_RANGE.0, AGE_RANGE.1
                ),
            });
        }
        let male_raw = field(male_col)?;
        let male = parse_male(male_raw).ok_or_else(|| DataError::MalformedRow {
            line,
            msg: format!("unparseable male flag `{male_raw}`"),
        })?;

        if !seen.insert(id.clone()) {
            return Err(DataError::DuplicateId(id));
        }
        let image_path = image_dir.join(format!("{id}.png"));
        if strict && !image_path.is_file() {
            return Err(DataError::MissingImage { id, path: image_path });
        }
        records.push(SampleRecord {
            id,
            image_path,
            bone_age,
            male,
        });
    }

    Ok(DatasetManifest {
        records,
        source: format!("{}+{}", csv_path.display(), image_dir.display()),
    })
}

/// Compute counts and histograms for a manifest.
///
/// Bins are keyed by lower edge: an age lands in `floor(age / bin_width) * bin_width`.
/// Deterministic for a given manifest; an empty manifest yields all-zero stats.
pub fn compute_stats(manifest: &DatasetManifest, bin_width: u32) -> DatasetStats {
    assert!(bin_width >= 1, "bin_width must be at least 1 month");

    let mut age_histogram = AgeHistogram::new();
    let mut per_gender = GenderHistograms::default();
    let mut male_count = 0usize;
    let mut min_age = None;
    let mut max_age = None;
    let mut age_sum = 0u64;

    for r in &manifest.records {
        let bin = (r.bone_age / bin_width) * bin_width;
        *age_histogram.entry(bin).or_insert(0) += 1;
        if r.male {
            male_count += 1;
            *per_gender.male.entry(bin).or_insert(0) += 1;
        } else {
            *per_gender.female.entry(bin).or_insert(0) += 1;
        }
        min_age = Some(min_age.map_or(r.bone_age, |m: u32| m.min(r.bone_age)));
        max_age = Some(max_age.map_or(r.bone_age, |m: u32| m.max(r.bone_age)));
        age_sum += u64::from(r.bone_age);
    }

    let total = manifest.records.len();
    let modal_bin = age_histogram
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(bin, _)| *bin);

    DatasetStats {
        total,
        male_count,
        female_count: total - male_count,
        bin_width,
        age_histogram,
        per_gender_histograms: per_gender,
        min_age,
        max_age,
        mean_age: (total > 0).then(|| age_sum as f64 / total as f64),
        modal_bin,
    }
}

/// Draw disjoint train/val/test id sets uniformly without replacement,
/// fully determined by `seed`.
pub fn make_splits(
    manifest: &DatasetManifest,
    spec: SplitSpec,
    seed: u64,
) -> DataResult<SplitAssignment> {
    let available = manifest.records.len();
    let requested = spec.total();
    if requested > available {
        return Err(DataError::InsufficientSamples { requested, available });
    }

    let mut indices: Vec<usize> = (0..available).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates; ChaCha keeps the draw stable across platforms and releases.
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }

    let id_at = |i: usize| manifest.records[i].id.clone();
    let train_ids: Vec<String> = indices[..spec.train].iter().copied().map(id_at).collect();
    let val_ids: Vec<String> = indices[spec.train..spec.train + spec.val]
        .iter()
        .copied()
        .map(id_at)
        .collect();
    let test_ids: Vec<String> = indices[spec.train + spec.val..requested]
        .iter()
        .copied()
        .map(id_at)
        .collect();

    Ok(SplitAssignment {
        seed,
        spec,
        train_ids,
        val_ids,
        test_ids,
    })
}

/// Side length of generated synthetic images.
pub const SYNTH_IMAGE_SIZE: u32 = 32;

/// Mean brightness for a synthetic sample of the given age: an affine ramp
/// from 20 at 1 month to 220 at 288 months.
pub fn synthetic_brightness(age: u32) -> f64 {
    20.0 + 200.0 * (age as f64 - 1.0) / 287.0
}

/// Generate a desk-scale synthetic dataset: `n` grayscale PNGs whose mean
/// brightness is an affine function of a bone age drawn uniformly from
/// `[1, 288]` months, plus a `manifest.csv` that reloads via [`load_manifest`].
pub fn build_synthetic_dataset(out_dir: &Path, n: usize, seed: u64) -> DataResult<DatasetManifest> {
    assert!(n >= 1, "synthetic dataset needs at least one sample");
    fs::create_dir_all(out_dir).map_err(|e| DataError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    let csv_path = out_dir.join("manifest.csv");
    let mut csv_out = String::from("id,boneage,male\n");

    for k in 0..n {
        let age: u32 = rng.random_range(AGE_RANGE.0..=AGE_RANGE.1);
        let male: bool = rng.random();
        let base = synthetic_brightness(age);

        let side = SYNTH_IMAGE_SIZE;
        let mut img = image::GrayImage::new(side, side);
        for pixel in img.pixels_mut() {
            // Zero-mean texture noise keeps the brightness/age correlation intact.
            let noise: f64 = rng.random_range(-10.0..10.0);
            pixel.0 = [(base + noise).clamp(0.0, 255.0).round() as u8];
        }

        let id = format!("synth_{k:05}");
        let image_path = out_dir.join(format!("{id}.png"));
        img.save(&image_path).map_err(|e| DataError::ImageEncode {
            path: image_path.clone(),
            source: e,
        })?;

        csv_out.push_str(&format!(
            "{id},{age},{}\n",
            if male { "True" } else { "False" }
        ));
        records.push(SampleRecord {
            id,
            image_path,
            bone_age: age,
            male,
        });
    }

    let mut f = fs::File::create(&csv_path).map_err(|e| DataError::Io {
        path: csv_path.clone(),
        source: e,
    })?;
    f.write_all(csv_out.as_bytes()).map_err(|e| DataError::Io {
        path: csv_path.clone(),
        source: e,
    })?;

    Ok(DatasetManifest {
        records,
        source: format!("synthetic:{seed}"),
    })
}
