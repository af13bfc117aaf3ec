//! Skeleton formats and the merged joint catalog.
//!
//! Every format contributes its own joints; nothing is merged across formats.
//! The catalog reorders the union into a left block, a mirrored right block
//! and a center block so that chirality-sharing weight matrices can be laid
//! out as contiguous sections.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AcaeError, Result};
use crate::geometry::SideBlocks;

/// Loss weight given to head and face joints when head weighting is on.
pub const HEAD_WEIGHT: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    Center,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    pub side: Side,
    pub is_head: bool,
}

/// One annotation convention, e.g. the 17 joints of a COCO-style skeleton.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonFormat {
    pub name: String,
    pub joints: Vec<JointSpec>,
}

/// Name of the mirrored counterpart under the `left_`/`right_` convention.
pub fn mirrored_name(name: &str) -> Option<String> {
    if let Some(rest) = name.strip_prefix("left_") {
        Some(format!("right_{rest}"))
    } else {
        name.strip_prefix("right_").map(|rest| format!("left_{rest}"))
    }
}

impl SkeletonFormat {
    pub fn new(name: impl Into<String>, joints: Vec<JointSpec>) -> Self {
        Self {
            name: name.into(),
            joints,
        }
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks name uniqueness and left/right pairing.
    ///
    /// Returns, for each left joint in format order, the local index of its
    /// right counterpart.
    pub fn validate(&self) -> Result<Vec<(usize, usize)>> {
        let mut seen = HashSet::new();
        for j in &self.joints {
            if !seen.insert(j.name.as_str()) {
                return Err(AcaeError::DuplicateJoint {
                    format: self.name.clone(),
                    joint: j.name.clone(),
                });
            }
        }
        let find = |name: &str, side: Side| {
            self.joints
                .iter()
                .position(|j| j.name == name && j.side == side)
        };
        let asym = |joint: &JointSpec| AcaeError::AsymmetricFormat {
            format: self.name.clone(),
            joint: joint.name.clone(),
        };
        let mut pairs = Vec::new();
        for (i, j) in self.joints.iter().enumerate() {
            match j.side {
                Side::Left => {
                    let partner = mirrored_name(&j.name)
                        .and_then(|m| find(&m, Side::Right))
                        .ok_or_else(|| asym(j))?;
                    pairs.push((i, partner));
                }
                Side::Right => {
                    mirrored_name(&j.name)
                        .and_then(|m| find(&m, Side::Left))
                        .ok_or_else(|| asym(j))?;
                }
                Side::Center => {}
            }
        }
        Ok(pairs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogJoint {
    pub format: usize,
    pub name: String,
    pub side: Side,
    pub is_head: bool,
}

/// Union of all formats' joints in left/right/center block order.
#[derive(Debug, Clone, PartialEq)]
pub struct JointCatalog {
    formats: Vec<SkeletonFormat>,
    joints: Vec<CatalogJoint>,
    sides: SideBlocks,
    /// `ordering[format][local]` is the catalog index of that joint.
    ordering: Vec<Vec<usize>>,
    loss_weights: Vec<f64>,
}

pub fn build_catalog(formats: &[SkeletonFormat]) -> Result<JointCatalog> {
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut center = Vec::new();
    for (f, fmt) in formats.iter().enumerate() {
        let pairs = fmt.validate()?;
        for (l, r) in pairs {
            left.push((f, l));
            right.push((f, r));
        }
        center.extend(
            fmt.joints
                .iter()
                .enumerate()
                .filter(|(_, j)| j.side == Side::Center)
                .map(|(i, _)| (f, i)),
        );
    }
    let sides = SideBlocks {
        left: left.len(),
        right: right.len(),
        center: center.len(),
    };
    let mut ordering: Vec<Vec<usize>> = formats.iter().map(|f| vec![0; f.len()]).collect();
    let mut joints = Vec::with_capacity(sides.total());
    for (idx, &(f, i)) in left.iter().chain(&right).chain(&center).enumerate() {
        ordering[f][i] = idx;
        let spec = &formats[f].joints[i];
        joints.push(CatalogJoint {
            format: f,
            name: spec.name.clone(),
            side: spec.side,
            is_head: spec.is_head,
        });
    }
    let loss_weights = joints
        .iter()
        .map(|j| if j.is_head { HEAD_WEIGHT } else { 1.0 })
        .collect();
    Ok(JointCatalog {
        formats: formats.to_vec(),
        joints,
        sides,
        ordering,
        loss_weights,
    })
}

impl JointCatalog {
    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn formats(&self) -> &[SkeletonFormat] {
        &self.formats
    }

    pub fn joints(&self) -> &[CatalogJoint] {
        &self.joints
    }

    pub fn sides(&self) -> SideBlocks {
        self.sides
    }

    pub fn ordering(&self) -> &[Vec<usize>] {
        &self.ordering
    }

    /// Catalog indices belonging to format `f`, in the format's own order.
    pub fn format_indices(&self, f: usize) -> &[usize] {
        &self.ordering[f]
    }

    pub fn format_index(&self, name: &str) -> Result<usize> {
        self.formats
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| AcaeError::UnknownFormat(name.to_string()))
    }

    /// Default per-joint loss weights: [`HEAD_WEIGHT`] on head joints, 1 elsewhere.
    pub fn loss_weights(&self) -> &[f64] {
        &self.loss_weights
    }

    /// Loss weights with head weighting switched on or off.
    pub fn weights(&self, head_weighting: bool) -> Vec<f64> {
        if head_weighting {
            self.loss_weights.clone()
        } else {
            vec![1.0; self.len()]
        }
    }

    pub fn left_fraction(&self) -> f64 {
        self.sides.left as f64 / self.len() as f64
    }

    /// First center joint named `pelvis`, else the first center joint.
    pub fn default_root(&self) -> usize {
        let start = self.sides.left + self.sides.right;
        self.joints
            .iter()
            .position(|j| j.side == Side::Center && j.name == "pelvis")
            .unwrap_or(start.min(self.len().saturating_sub(1)))
    }

    /// Stable fingerprint of the joint layout (hex SHA-256).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for j in &self.joints {
            let side = match j.side {
                Side::Left => "L",
                Side::Right => "R",
                Side::Center => "C",
            };
            h.update(format!(
                "{}\t{}\t{}\t{}\n",
                self.formats[j.format].name, j.name, side, j.is_head as u8
            ));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Latent counts per side for chirality-shared weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentPartition {
    pub left: usize,
    pub right: usize,
    pub center: usize,
}

impl LatentPartition {
    pub fn total(&self) -> usize {
        self.left + self.right + self.center
    }

    pub fn blocks(&self) -> SideBlocks {
        SideBlocks {
            left: self.left,
            right: self.right,
            center: self.center,
        }
    }
}

/// Split `latents` in the same left/right/center proportions as the catalog.
pub fn latent_partition(catalog: &JointCatalog, latents: usize) -> Result<LatentPartition> {
    partition_by_fraction(catalog.left_fraction(), latents)
}

pub fn partition_by_fraction(left_fraction: f64, latents: usize) -> Result<LatentPartition> {
    let left = (latents as f64 * left_fraction).round() as usize;
    let center = latents as isize - 2 * left as isize;
    if latents < 3 || left < 1 || center < 1 {
        return Err(AcaeError::TooFewLatents {
            latents,
            left,
            center: center.max(0) as usize,
        });
    }
    Ok(LatentPartition {
        left,
        right: left,
        center: center as usize,
    })
}

pub fn load_formats(path: &Path) -> Result<Vec<SkeletonFormat>> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.is_array() {
        Ok(serde_json::from_value(value)?)
    } else {
        Ok(vec![serde_json::from_value(value)?])
    }
}

fn spec(name: &str, side: Side, is_head: bool) -> JointSpec {
    JointSpec {
        name: name.to_string(),
        side,
        is_head,
    }
}

/// Builds a format from `name` entries; `left_`/`right_` prefixes set the
/// side, a trailing `*` marks a head joint.
fn named_format(name: &str, joints: &[&str]) -> SkeletonFormat {
    let joints = joints
        .iter()
        .map(|j| {
            let (n, head) = match j.strip_suffix('*') {
                Some(n) => (n, true),
                None => (*j, false),
            };
            let side = if n.starts_with("left_") {
                Side::Left
            } else if n.starts_with("right_") {
                Side::Right
            } else {
                Side::Center
            };
            spec(n, side, head)
        })
        .collect();
    SkeletonFormat::new(name, joints)
}

/// Format with `count` anonymous joints, about a quarter of them central.
fn generic_format(name: &str, count: usize) -> SkeletonFormat {
    let mut center = (count as f64 * 0.25).round().max(1.0) as usize;
    if (count - center) % 2 == 1 {
        center += 1;
    }
    let pairs = (count - center) / 2;
    let head_centers = center.div_ceil(3);
    let mut joints = Vec::with_capacity(count);
    for i in 0..pairs {
        let head = i + 1 == pairs && pairs > 2;
        joints.push(spec(&format!("left_{name}_{i:02}"), Side::Left, head));
        joints.push(spec(&format!("right_{name}_{i:02}"), Side::Right, head));
    }
    for i in 0..center {
        joints.push(spec(
            &format!("{name}_center_{i:02}"),
            Side::Center,
            i < head_centers,
        ));
    }
    SkeletonFormat::new(name, joints)
}

pub fn h36m() -> SkeletonFormat {
    named_format(
        "h36m",
        &[
            "pelvis", "right_hip", "right_knee", "right_ankle", "left_hip", "left_knee",
            "left_ankle", "spine", "thorax", "neck*", "head_top*", "left_shoulder",
            "left_elbow", "left_wrist", "right_shoulder", "right_elbow", "right_wrist",
        ],
    )
}

pub fn coco() -> SkeletonFormat {
    named_format(
        "coco",
        &[
            "nose*", "left_eye*", "right_eye*", "left_ear*", "right_ear*", "left_shoulder",
            "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
            "left_hip", "right_hip", "left_knee", "right_knee", "left_ankle", "right_ankle",
        ],
    )
}

pub fn smpl() -> SkeletonFormat {
    named_format(
        "smpl",
        &[
            "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
            "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck",
            "left_collar", "right_collar", "head*", "left_shoulder", "right_shoulder",
            "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hand", "right_hand",
        ],
    )
}

pub fn smplx_body() -> SkeletonFormat {
    named_format(
        "smplx_body",
        &[
            "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
            "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck",
            "left_collar", "right_collar", "head*", "left_shoulder", "right_shoulder",
            "left_elbow", "right_elbow", "left_wrist", "right_wrist",
        ],
    )
}

pub fn lsp() -> SkeletonFormat {
    named_format(
        "lsp",
        &[
            "right_ankle", "right_knee", "right_hip", "left_hip", "left_knee", "left_ankle",
            "right_wrist", "right_elbow", "right_shoulder", "left_shoulder", "left_elbow",
            "left_wrist", "neck", "head_top*",
        ],
    )
}

pub fn mpii() -> SkeletonFormat {
    named_format(
        "mpii",
        &[
            "right_ankle", "right_knee", "right_hip", "left_hip", "left_knee", "left_ankle",
            "pelvis", "thorax", "upper_neck*", "head_top*", "right_wrist", "right_elbow",
            "right_shoulder", "left_shoulder", "left_elbow", "left_wrist",
        ],
    )
}

/// Distinct skeleton conventions of a 28-dataset training mix with their
/// joint counts; 10 joints that cannot be attributed to a single listed
/// convention are grouped in `extra`.
const LARGE_MIX: &[(&str, usize)] = &[
    ("3dhp", 28),
    ("panoptic_coco", 19),
    ("smplx", 42),
    ("aspset", 17),
    ("lsp14", 14),
    ("ikea", 17),
    ("h36m25", 25),
    ("totalcapture", 21),
    ("movi", 87),
    ("mhad", 43),
    ("umpm", 15),
    ("gpa", 34),
    ("human4d", 32),
    ("mads", 15),
    ("smpl24", 24),
    ("3dpeople", 29),
    ("jta", 22),
    ("ghum", 35),
    ("sailvos", 26),
    ("extra", 10),
];

/// Named format collections.
///
/// * single formats: `h36m`, `coco`, `smpl`, `smplx_body`, `lsp`, `mpii`
/// * `demo2`: h36m + coco (34 joints)
/// * `demo60`: smpl + smplx_body + lsp (60 joints)
/// * `large555`: 20 conventions totalling 555 joints
///
/// A comma-separated list concatenates collections.
pub fn preset(name: &str) -> Result<Vec<SkeletonFormat>> {
    if name.contains(',') {
        let mut out = Vec::new();
        for part in name.split(',') {
            out.extend(preset(part.trim())?);
        }
        return Ok(out);
    }
    Ok(match name {
        "h36m" => vec![h36m()],
        "coco" => vec![coco()],
        "smpl" => vec![smpl()],
        "smplx_body" => vec![smplx_body()],
        "lsp" => vec![lsp()],
        "mpii" => vec![mpii()],
        "demo2" => vec![h36m(), coco()],
        "demo60" => vec![smpl(), smplx_body(), lsp()],
        "large555" => LARGE_MIX
            .iter()
            .map(|(n, c)| generic_format(n, *c))
            .collect(),
        other => return Err(AcaeError::UnknownFormat(other.to_string())),
    })
}
