//! Built-in rule catalog, goals and the planted-header query fixture.

use std::fs;
use std::io;
use std::path::Path;

use serde_json::json;

use crate::catalog::{parse_rule, Catalog, CatalogError, RULE_SUFFIX};
use crate::inspect::SIDECAR_SUFFIX;

const IMAGE_EMITS: &str = r#"emits = ["modality", "manufacturer", "kernel", "slice_thickness_mm"]"#;

/// `(rule id, file text)` for the eight standard rules.
pub fn standard_rule_texts() -> Vec<(&'static str, String)> {
    let r = |id: &'static str, body: &str| (id, body.trim_start().to_owned());
    vec![
        r(
            "unpack_archive",
            &format!(
                r#"
action = "unzip -o {{input.archive}} -d {{output.series}}"
[rule]
id = "unpack_archive"
version = "1"
description = "Expand a zipped DICOM series"
keywords = ["unpack", "unzip", "extract archive"]
{IMAGE_EMITS}
[[input]]
name = "archive"
type = "archive"
[[output]]
name = "series"
type = "dicom_series"
"#
            ),
        ),
        r(
            "dcm2nii",
            &format!(
                r#"
action = "dcm2niix -o {{output.image}} {{input.series}}"
[rule]
id = "dcm2nii"
version = "1"
description = "Convert a DICOM series to NIfTI"
keywords = ["convert", "nifti", "conversion"]
{IMAGE_EMITS}
[[input]]
name = "series"
type = "dicom_series"
where = 'modality = "CT" OR modality = "MR"'
[[output]]
name = "image"
type = "nifti_image"
"#
            ),
        ),
        r(
            "curate",
            &format!(
                r#"
action = "curate {{input.image}} {{output.curated}}"
[rule]
id = "curate"
version = "1"
description = "Reorient and rename to the curated layout"
keywords = ["curate", "curation", "curated"]
{IMAGE_EMITS}
[[input]]
name = "image"
type = "nifti_image"
[[output]]
name = "curated"
type = "curated_nifti"
"#
            ),
        ),
        r(
            "qa",
            r#"
action = "qa {input.image} > {output.report}"
[rule]
id = "qa"
version = "1"
description = "Image quality report"
keywords = ["qa", "quality"]
emits = ["snr"]
[[input]]
name = "image"
type = "curated_nifti"
[[output]]
name = "report"
type = "qa_report"
"#,
        ),
        r(
            "lung_seg",
            r#"
action = "lungseg {input.image} --qa {input.qa} --model {param.model} -o {output.mask}"
[rule]
id = "lung_seg"
version = "1"
description = "Whole-lung segmentation on chest CT"
keywords = ["lung", "segment", "segmentation"]
emits = ["modality", "volume_ml"]
[[input]]
name = "image"
type = "curated_nifti"
where = 'modality = "CT"'
[[input]]
name = "qa"
type = "qa_report"
[[output]]
name = "mask"
type = "seg_mask"
[output.attributes]
model = "{param.model}"
[params.model]
type = "text"
values = ["unet", "nnunet"]
default = "unet"
"#,
        ),
        r(
            "lobe_seg",
            r#"
action = "lobeseg {input.image} {input.mask} -o {output.lobes}"
[rule]
id = "lobe_seg"
version = "1"
description = "Split a lung mask into lobes"
keywords = ["lobe", "lobes"]
emits = ["modality"]
[[input]]
name = "mask"
type = "seg_mask"
[[input]]
name = "image"
type = "curated_nifti"
where = 'modality = "CT"'
[[output]]
name = "lobes"
type = "lobe_mask"
"#,
        ),
        r(
            "brain_extract",
            r#"
action = "bet {input.image} {output.mask}"
[rule]
id = "brain_extract"
version = "1"
description = "Skull stripping on MR"
keywords = ["brain", "skull"]
emits = ["modality"]
[[input]]
name = "image"
type = "curated_nifti"
where = 'modality = "MR"'
[[output]]
name = "mask"
type = "brain_mask"
"#,
        ),
        r(
            "register",
            r#"
action = "register {input.image} {input.mask} -o {output.warped}"
[rule]
id = "register"
version = "1"
description = "Register a brain image to template space"
keywords = ["register", "registration", "template"]
emits = ["modality"]
[[input]]
name = "image"
type = "curated_nifti"
where = 'modality = "MR"'
[[input]]
name = "mask"
type = "brain_mask"
[[output]]
name = "warped"
type = "registration"
"#,
        ),
    ]
}

pub fn standard_catalog() -> Catalog {
    let rules =
        standard_rule_texts().into_iter().map(|(id, text)| parse_rule(&text, id).unwrap_or_else(|e| panic!("built-in rule {id}: {e}")));
    Catalog::from_rules(rules).unwrap_or_else(|e| panic!("built-in catalog: {e}"))
}

/// Writes the standard rules as `<id>.rule.toml` files.
pub fn write_standard_catalog(dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    for (id, text) in standard_rule_texts() {
        fs::write(dir.join(format!("{id}{RULE_SUFFIX}")), text)?;
    }
    Ok(())
}

/// A built-in goal: the request text a user would type and the rules an
/// expert would select for it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StandardGoal {
    pub name: &'static str,
    pub target_type: &'static str,
    pub request: &'static str,
    pub expert_rules: &'static [&'static str],
    /// Sessions the goal applies to; `None` means every session.
    pub modality: Option<&'static str>,
}

pub const STANDARD_GOALS: [StandardGoal; 3] = [
    StandardGoal {
        name: "convert_curate",
        target_type: "curated_nifti",
        request: "Convert the scans to NIfTI and curate them.",
        expert_rules: &["unpack_archive", "dcm2nii", "curate"],
        modality: None,
    },
    StandardGoal {
        name: "lobe_segmentation",
        target_type: "lobe_mask",
        request: "Run lung lobe segmentation on the chest CT sessions.",
        expert_rules: &["unpack_archive", "dcm2nii", "curate", "qa", "lung_seg", "lobe_seg"],
        modality: Some("CT"),
    },
    StandardGoal {
        name: "brain_registration",
        target_type: "registration",
        request: "Skull-strip the brain MR images and register them to the template.",
        expert_rules: &["dcm2nii", "curate", "brain_extract", "register"],
        modality: Some("MR"),
    },
];

pub fn standard_goal(name: &str) -> Option<&'static StandardGoal> {
    STANDARD_GOALS.iter().find(|g| g.name == name || g.target_type == name)
}

/// Loads the standard catalog or a directory of rule files.
pub fn catalog_or_standard(dir: Option<&Path>) -> Result<Catalog, CatalogError> {
    match dir {
        Some(d) => crate::catalog::load_catalog(d),
        None => Ok(standard_catalog()),
    }
}

/// One planted image in the header fixture. `None` means the sidecar
/// omits the field.
#[derive(Clone, Debug, PartialEq)]
pub struct HeaderRow {
    pub path: String,
    pub modality: &'static str,
    pub manufacturer: Option<&'static str>,
    pub slice_thickness_mm: Option<f64>,
    pub voxel_spacing_mm: f64,
    pub kernel: Option<&'static str>,
    pub body_part: &'static str,
}

const THICK: [f64; 5] = [1.25, 1.5, 2.0, 2.5, 3.0];
const THIN: [f64; 5] = [0.5, 0.625, 0.75, 1.0, 1.0];

/// Planted quotas: Siemens thicker than 1 mm 23, Siemens at most 1 mm 9,
/// Siemens without thickness 3, GE 12/6, Philips 7 thick, Toshiba 4 thin,
/// and 2 thick images without a manufacturer.
pub fn header_rows() -> Vec<HeaderRow> {
    let groups: [(Option<&'static str>, Option<bool>, usize); 8] = [
        (Some("Siemens"), Some(true), 23),
        (Some("Siemens"), Some(false), 9),
        (Some("Siemens"), None, 3),
        (Some("GE"), Some(true), 12),
        (Some("GE"), Some(false), 6),
        (Some("Philips"), Some(true), 7),
        (Some("Toshiba"), Some(false), 4),
        (None, Some(true), 2),
    ];
    let mut rows = Vec::new();
    for (manufacturer, thick, n) in groups {
        for k in 0..n {
            let i = rows.len();
            let slice_thickness_mm = thick.map(|t| if t { THICK[k % THICK.len()] } else { THIN[k % THIN.len()] });
            let mr = i % 5 == 4;
            let kernels = ["B30f", "B70f", "STANDARD"];
            rows.push(HeaderRow {
                path: format!("sub-{:03}/ses-{}/image_{:02}.nii.gz", i / 2 + 1, i % 2 + 1, i),
                modality: if mr { "MR" } else { "CT" },
                manufacturer,
                slice_thickness_mm,
                voxel_spacing_mm: [0.5, 0.7, 0.8, 1.0][i % 4],
                kernel: (!mr).then(|| kernels[i % 3]),
                body_part: if mr { "HEAD" } else { "CHEST" },
            });
        }
    }
    rows
}

/// Writes the header fixture: one NIfTI per row with a JSON sidecar.
pub fn write_header_fixture(root: &Path) -> io::Result<Vec<HeaderRow>> {
    let rows = header_rows();
    for r in &rows {
        let p = root.join(&r.path);
        if let Some(d) = p.parent() {
            fs::create_dir_all(d)?;
        }
        fs::write(&p, format!("nifti {}\n", r.path))?;
        let mut h = json!({
            "modality": r.modality,
            "voxel_spacing_mm": r.voxel_spacing_mm,
            "body_part": r.body_part,
        });
        if let Some(m) = r.manufacturer {
            h["manufacturer"] = json!(m);
        }
        if let Some(t) = r.slice_thickness_mm {
            h["slice_thickness_mm"] = json!(t);
        }
        if let Some(k) = r.kernel {
            h["kernel"] = json!(k);
        }
        fs::write(root.join(format!("{}{SIDECAR_SUFFIX}", r.path)), serde_json::to_vec(&h)?)?;
    }
    Ok(rows)
}

/// A header-only filter and the row-level oracle for it. The oracle says
/// whether the row is counted, with missing fields never satisfying a
/// comparison, negated or not.
pub struct HeaderQuery {
    pub dsl: &'static str,
    pub oracle: fn(&HeaderRow) -> bool,
}

fn thick(r: &HeaderRow, f: impl Fn(f64) -> bool) -> bool {
    r.slice_thickness_mm.is_some_and(f)
}

fn maker(r: &HeaderRow, f: impl Fn(&str) -> bool) -> bool {
    r.manufacturer.is_some_and(f)
}

/// The twenty header-only filter queries.
pub fn header_queries() -> Vec<HeaderQuery> {
    vec![
        HeaderQuery {
            dsl: r#"COUNT nifti_image WHERE manufacturer = "Siemens" AND slice_thickness_mm > 1.0"#,
            oracle: |r| maker(r, |m| m == "Siemens") && thick(r, |t| t > 1.0),
        },
        HeaderQuery { dsl: r#"COUNT nifti_image WHERE manufacturer = "Siemens""#, oracle: |r| r.manufacturer == Some("Siemens") },
        HeaderQuery { dsl: r#"COUNT nifti_image WHERE manufacturer = "GE""#, oracle: |r| r.manufacturer == Some("GE") },
        HeaderQuery { dsl: "COUNT nifti_image WHERE slice_thickness_mm <= 1.0", oracle: |r| thick(r, |t| t <= 1.0) },
        HeaderQuery { dsl: "COUNT nifti_image WHERE slice_thickness_mm > 2.0", oracle: |r| thick(r, |t| t > 2.0) },
        HeaderQuery { dsl: r#"COUNT nifti_image WHERE modality = "MR""#, oracle: |r| r.modality == "MR" },
        HeaderQuery { dsl: r#"COUNT nifti_image WHERE modality = "CT""#, oracle: |r| r.modality == "CT" },
        HeaderQuery {
            dsl: r#"COUNT nifti_image WHERE modality = "CT" AND voxel_spacing_mm < 0.75"#,
            oracle: |r| r.modality == "CT" && r.voxel_spacing_mm < 0.75,
        },
        HeaderQuery { dsl: "COUNT nifti_image WHERE voxel_spacing_mm >= 0.8", oracle: |r| r.voxel_spacing_mm >= 0.8 },
        HeaderQuery { dsl: r#"COUNT nifti_image WHERE kernel = "B70f""#, oracle: |r| r.kernel == Some("B70f") },
        HeaderQuery { dsl: "COUNT nifti_image WHERE MISSING manufacturer", oracle: |r| r.manufacturer.is_none() },
        HeaderQuery { dsl: "COUNT nifti_image WHERE MISSING slice_thickness_mm", oracle: |r| r.slice_thickness_mm.is_none() },
        HeaderQuery { dsl: r#"COUNT nifti_image WHERE NOT manufacturer = "Siemens""#, oracle: |r| maker(r, |m| m != "Siemens") },
        HeaderQuery {
            dsl: r#"COUNT nifti_image WHERE manufacturer = "Philips" OR manufacturer = "Toshiba""#,
            oracle: |r| maker(r, |m| m == "Philips" || m == "Toshiba"),
        },
        HeaderQuery { dsl: r#"COUNT nifti_image WHERE body_part = "HEAD""#, oracle: |r| r.body_part == "HEAD" },
        HeaderQuery {
            dsl: r#"COUNT nifti_image WHERE body_part = "CHEST" AND slice_thickness_mm = 1.0"#,
            oracle: |r| r.body_part == "CHEST" && thick(r, |t| t == 1.0),
        },
        HeaderQuery {
            dsl: r#"COUNT nifti_image WHERE manufacturer = "GE" AND NOT slice_thickness_mm > 1.0"#,
            oracle: |r| r.manufacturer == Some("GE") && thick(r, |t| t <= 1.0),
        },
        HeaderQuery { dsl: r#"COUNT nifti_image WHERE manufacturer CONTAINS "e""#, oracle: |r| maker(r, |m| m.contains('e')) },
        HeaderQuery { dsl: "COUNT nifti_image WHERE EXISTS kernel", oracle: |r| r.kernel.is_some() },
        HeaderQuery {
            dsl: r#"COUNT nifti_image WHERE (manufacturer = "Siemens" OR manufacturer = "GE") AND modality = "MR" AND slice_thickness_mm >= 1.5"#,
            oracle: |r| maker(r, |m| m == "Siemens" || m == "GE") && r.modality == "MR" && thick(r, |t| t >= 1.5),
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_catalog_parses() {
        let c = standard_catalog();
        assert_eq!(c.len(), 8);
        for g in STANDARD_GOALS {
            assert!(!c.producers_of(g.target_type).is_empty(), "{}", g.name);
            for r in g.expert_rules {
                assert!(c.get(r).is_some(), "{r}");
            }
        }
    }

    #[test]
    fn written_catalog_round_trips() {
        let d = tempfile::tempdir().unwrap();
        write_standard_catalog(d.path()).unwrap();
        let loaded = crate::catalog::load_catalog(d.path()).unwrap();
        assert_eq!(loaded.fingerprint(), standard_catalog().fingerprint());
    }

    #[test]
    fn quotas_hold() {
        let rows = header_rows();
        assert_eq!(rows.len(), 66);
        let siemens_thick =
            rows.iter().filter(|r| r.manufacturer == Some("Siemens") && r.slice_thickness_mm.is_some_and(|t| t > 1.0)).count();
        assert_eq!(siemens_thick, 23);
        assert_eq!(header_queries().len(), 20);
    }
}
