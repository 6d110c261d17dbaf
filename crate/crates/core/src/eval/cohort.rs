//! Seeded synthetic cohorts: `<subject>/<session>/<series>` trees with
//! sidecar headers and planted heterogeneity.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifact::Scope;
use crate::digest::Digest;
use crate::inspect::SIDECAR_SUFFIX;

/// Sessions per subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SessionCount {
    Fixed(usize),
    /// Uniform in `min..=max`.
    Range {
        min: usize,
        max: usize,
    },
    /// Exactly `total` sessions spread as evenly as possible; the subjects
    /// receiving the remainder are drawn from the seed.
    Total {
        total: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub subjects: usize,
    pub sessions: SessionCount,
    /// Modality -> weight. CT and MR are understood.
    pub modalities: BTreeMap<String, f64>,
    pub manufacturers: Vec<String>,
    pub slice_thickness_mm: (f64, f64),
    pub voxel_spacing_mm: (f64, f64),
    /// Chance a CT session holds a second reconstruction kernel.
    pub duplicate_kernel_probability: f64,
    /// Chance every sidecar of a session is damaged beyond recovery.
    pub corrupt_sidecar_probability: f64,
    /// Chance a CT session arrives only as a zipped series.
    pub archive_probability: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            subjects: 8,
            sessions: SessionCount::Range { min: 1, max: 3 },
            modalities: BTreeMap::from([("CT".to_owned(), 1.0)]),
            manufacturers: vec!["Siemens".into(), "GE".into(), "Philips".into()],
            slice_thickness_mm: (0.5, 2.5),
            voxel_spacing_mm: (0.5, 1.0),
            duplicate_kernel_probability: 0.0,
            corrupt_sidecar_probability: 0.0,
            archive_probability: 0.0,
            seed: 0,
        }
    }
}

impl CohortSpec {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.message().to_owned())
    }
}

/// What the generator planted in one session.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionTruth {
    #[serde(serialize_with = "crate::eval::scope_str")]
    pub scope: Scope,
    pub modality: String,
    pub kernels: Vec<String>,
    pub archived: bool,
    pub corrupt: bool,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeneratedCohort {
    pub root: PathBuf,
    pub sessions: Vec<SessionTruth>,
}

impl GeneratedCohort {
    pub fn scopes_where(&self, f: impl Fn(&SessionTruth) -> bool) -> Vec<Scope> {
        self.sessions.iter().filter(|s| f(s)).map(|s| s.scope.clone()).collect()
    }

    pub fn subjects(&self) -> usize {
        let mut s: Vec<&str> = self.sessions.iter().map(|t| t.scope.subject.as_str()).collect();
        s.dedup();
        s.len()
    }
}

fn session_counts(spec: &CohortSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = spec.subjects;
    match &spec.sessions {
        SessionCount::Fixed(k) => vec![*k; n],
        SessionCount::Range { min, max } => {
            let (lo, hi) = (*min.min(max), *max.max(min));
            (0..n).map(|_| rng.random_range(lo..=hi)).collect()
        }
        SessionCount::Total { total } => {
            if n == 0 {
                return Vec::new();
            }
            let mut counts = vec![total / n; n];
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            for &i in order.iter().take(total % n) {
                counts[i] += 1;
            }
            counts
        }
    }
}

fn pick_weighted<'a>(weights: &'a BTreeMap<String, f64>, rng: &mut ChaCha8Rng) -> &'a str {
    let total: f64 = weights.values().filter(|w| **w > 0.0).sum();
    if total <= 0.0 {
        return "CT";
    }
    let mut x = rng.random::<f64>() * total;
    for (k, w) in weights.iter().filter(|(_, w)| **w > 0.0) {
        if x < *w {
            return k;
        }
        x -= w;
    }
    weights.keys().next_back().map(String::as_str).unwrap_or("CT")
}

fn quantize(x: f64, step: f64) -> f64 {
    ((x / step).round() * step * 1000.0).round() / 1000.0
}

fn uniform(range: (f64, f64), rng: &mut ChaCha8Rng) -> f64 {
    let (lo, hi) = (range.0.min(range.1), range.0.max(range.1));
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)
}

/// Writes the cohort under `root` (which must not already hold files
/// the generator would overwrite differently). Pure in `(spec, seed)`.
pub fn generate_cohort(spec: &CohortSpec, root: &Path) -> io::Result<GeneratedCohort> {
    fs::create_dir_all(root)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let counts = session_counts(spec, &mut rng);
    let width = spec.subjects.max(1).to_string().len().max(3);
    let mut sessions = Vec::new();
    for (s, &k) in counts.iter().enumerate() {
        let subject = format!("sub-{:0width$}", s + 1);
        for j in 0..k {
            let session = format!("ses-{}", j + 1);
            let dir = root.join(&subject).join(&session);
            let modality = pick_weighted(&spec.modalities, &mut rng).to_owned();
            let manufacturer = if spec.manufacturers.is_empty() {
                "Unknown".to_owned()
            } else {
                spec.manufacturers[rng.random_range(0..spec.manufacturers.len())].clone()
            };
            let thickness = quantize(uniform(spec.slice_thickness_mm, &mut rng), 0.25);
            let spacing = quantize(uniform(spec.voxel_spacing_mm, &mut rng), 0.01);
            let corrupt = rng.random::<f64>() < spec.corrupt_sidecar_probability;
            let (mut kernels, mut archived) = (Vec::new(), false);
            let mut series: Vec<(String, serde_json::Value)> = Vec::new();
            if modality == "CT" {
                kernels.push("B30f".to_owned());
                if rng.random::<f64>() < spec.duplicate_kernel_probability {
                    kernels.push("B70f".to_owned());
                }
                archived = rng.random::<f64>() < spec.archive_probability;
                for kernel in &kernels {
                    let name = if archived { format!("ct_{kernel}.zip") } else { format!("ct_{kernel}.dcm") };
                    series.push((
                        name,
                        json!({
                            "modality": "CT",
                            "manufacturer": manufacturer,
                            "kernel": kernel,
                            "body_part": "CHEST",
                            "slice_thickness_mm": thickness,
                            "voxel_spacing_mm": spacing,
                            "series_description": format!("chest {kernel}"),
                        }),
                    ));
                }
            } else {
                series.push((
                    format!("{}_t1w.dcm", modality.to_lowercase()),
                    json!({
                        "modality": modality,
                        "manufacturer": manufacturer,
                        "body_part": "HEAD",
                        "slice_thickness_mm": thickness,
                        "voxel_spacing_mm": spacing,
                        "series_description": "t1w",
                    }),
                ));
            }
            let mut files = Vec::new();
            for (name, header) in &series {
                let mut payload = vec![0u8; 48];
                rng.fill_bytes(&mut payload);
                payload.extend_from_slice(format!("{subject}/{session}/{name}").as_bytes());
                write_file(&dir.join(name), &payload)?;
                let sidecar = if corrupt {
                    let digest = Digest::of(&payload);
                    format!("{{\x00{}", &digest.as_str()[..8]).into_bytes()
                } else {
                    serde_json::to_vec(header).map_err(io::Error::other)?
                };
                write_file(&dir.join(format!("{name}{SIDECAR_SUFFIX}")), &sidecar)?;
                files.push(format!("{subject}/{session}/{name}"));
            }
            sessions.push(SessionTruth { scope: Scope::session(subject.clone(), session), modality, kernels, archived, corrupt, files });
        }
    }
    Ok(GeneratedCohort { root: root.to_owned(), sessions })
}

/// Digest over every relative path and file content under `root`.
pub fn tree_hash(root: &Path) -> io::Result<String> {
    let mut parts: Vec<(String, Digest)> = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(io::Error::other)?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(root).unwrap_or(entry.path()).to_string_lossy().replace('\\', "/");
            parts.push((rel, Digest::of_file(entry.path())?));
        }
    }
    Ok(Digest::of_parts(parts.iter().flat_map(|(p, d)| [p.clone(), d.as_str().to_owned()])).as_str().to_owned())
}
