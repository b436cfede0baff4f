//! On-disk formats: raw volumes with JSON sidecars, pose files, run
//! configuration and sequence manifests.
//!
//! A volume is a pair of files: `<stem>.json` describing the grid and a
//! raw little-endian payload (`u8` or `f32`, x-fastest). Validity masks
//! ride along as a second `u8` payload referenced from the sidecar.
//! All headers are schema-checked (unknown keys rejected) before any
//! payload is read.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se3::{exp_map, Pose, PoseSet};
use crate::sim::SimProtocol;
use crate::solver::SolverConfig;
use crate::volume::{CountVolume, Volume3};

/// Pose-file convention string; files with a different convention are
/// rejected at load.
pub const POSE_CONVENTION: &str = "world-to-frame, left-increment, mm";

/// Payload element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    F32,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
        }
    }
}

/// JSON sidecar of a volume payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub dtype: Dtype,
    /// Always "little"; stated explicitly so readers can refuse rather
    /// than misread.
    pub byte_order: String,
    /// Payload filename, relative to the header.
    pub data: String,
    /// Optional u8 validity-mask payload, relative to the header.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write a volume as `<stem>.json` + `<stem>.raw` (+ `<stem>.mask.raw`)
/// into `dir`; returns the header path.
pub fn write_volume(dir: &Path, stem: &str, vol: &Volume3, dtype: Dtype) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let data_name = format!("{stem}.raw");
    let mask_name = vol.mask().map(|_| format!("{stem}.mask.raw"));
    let header = VolumeHeader {
        dims: vol.dims(),
        spacing_mm: vol.spacing(),
        origin_mm: vol.origin(),
        dtype,
        byte_order: "little".to_string(),
        data: data_name.clone(),
        mask: mask_name.clone(),
    };
    let header_path = dir.join(format!("{stem}.json"));
    write_file(
        &header_path,
        serde_json::to_string_pretty(&header)
            .expect("header serializes")
            .as_bytes(),
    )?;
    let payload: Vec<u8> = match dtype {
        Dtype::F32 => vol
            .data()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        Dtype::U8 => vol
            .data()
            .iter()
            .map(|&v| v.round().clamp(0.0, 255.0) as u8)
            .collect(),
    };
    write_file(&dir.join(&data_name), &payload)?;
    if let (Some(mask), Some(name)) = (vol.mask(), &mask_name) {
        write_file(&dir.join(name), mask)?;
    }
    Ok(header_path)
}

/// Read a volume from its header path; the payload (and mask, if named)
/// are resolved relative to the header.
pub fn read_volume(header_path: &Path) -> Result<Volume3> {
    let text = read_to_string(header_path)?;
    let header: VolumeHeader = serde_json::from_str(&text)
        .map_err(|e| Error::schema(header_path.display().to_string(), e.to_string()))?;
    if header.byte_order != "little" {
        return Err(Error::schema(
            header_path.display().to_string(),
            format!("unsupported byte order {:?}", header.byte_order),
        ));
    }
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    let dir = header_path.parent().unwrap_or(Path::new("."));
    let data_path = dir.join(&header.data);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(data_path.display().to_string(), e))?;
    if bytes.len() != n * header.dtype.size() {
        return Err(Error::schema(
            data_path.display().to_string(),
            format!(
                "payload is {} bytes, expected {}",
                bytes.len(),
                n * header.dtype.size()
            ),
        ));
    }
    let data: Vec<f32> = match header.dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::U8 => bytes.iter().map(|&b| b as f32).collect(),
    };
    let mut vol = Volume3::new(header.dims, header.spacing_mm, header.origin_mm, data)?;
    if let Some(mask_name) = &header.mask {
        let mask_path = dir.join(mask_name);
        let mask =
            fs::read(&mask_path).map_err(|e| Error::io(mask_path.display().to_string(), e))?;
        if mask.len() != n {
            return Err(Error::schema(
                mask_path.display().to_string(),
                format!("mask is {} bytes, expected {}", mask.len(), n),
            ));
        }
        vol = vol.with_mask(mask)?;
    }
    Ok(vol)
}

/// Write observation counts as an `f32` volume (counts are small exact
/// integers, so the round-trip is lossless).
pub fn write_counts(dir: &Path, stem: &str, counts: &CountVolume) -> Result<PathBuf> {
    let vol = Volume3::new(
        counts.dims,
        counts.spacing,
        counts.origin,
        counts.counts.iter().map(|&c| c as f32).collect(),
    )?;
    write_volume(dir, stem, &vol, Dtype::F32)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseEntry {
    frame_id: usize,
    xi: [f64; 6],
    /// Row-major 4x4 realization; checked against exp(xi) on load.
    t: [f64; 16],
    #[serde(default)]
    anchored: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseFileBody {
    convention: String,
    poses: Vec<PoseEntry>,
}

/// Write a pose set with its convention string.
pub fn write_poses(path: &Path, set: &PoseSet) -> Result<()> {
    let body = PoseFileBody {
        convention: POSE_CONVENTION.to_string(),
        poses: set
            .poses
            .iter()
            .zip(&set.anchored)
            .enumerate()
            .map(|(i, (p, &anchored))| {
                let m = p.matrix();
                let mut t = [0f64; 16];
                for r in 0..4 {
                    for c in 0..4 {
                        t[4 * r + c] = m[(r, c)];
                    }
                }
                let xi = p.xi();
                PoseEntry {
                    frame_id: i,
                    xi: [xi[0], xi[1], xi[2], xi[3], xi[4], xi[5]],
                    t,
                    anchored,
                }
            })
            .collect(),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    write_file(
        path,
        serde_json::to_string_pretty(&body)
            .expect("poses serialize")
            .as_bytes(),
    )
}

/// Read a pose set, validating the convention string and the consistency
/// of each matrix with its coordinates. When no entry is anchored, frame
/// 0 is anchored by default.
pub fn read_poses(path: &Path) -> Result<PoseSet> {
    let text = read_to_string(path)?;
    let body: PoseFileBody = serde_json::from_str(&text)
        .map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?;
    if body.convention != POSE_CONVENTION {
        return Err(Error::schema(
            path.display().to_string(),
            format!(
                "pose convention {:?} does not match {:?}",
                body.convention, POSE_CONVENTION
            ),
        ));
    }
    let mut poses = Vec::with_capacity(body.poses.len());
    let mut anchored = Vec::with_capacity(body.poses.len());
    for (i, e) in body.poses.iter().enumerate() {
        if e.frame_id != i {
            return Err(Error::schema(
                path.display().to_string(),
                format!("pose entries out of order at {i}"),
            ));
        }
        let xi = nalgebra::Vector6::from_column_slice(&e.xi);
        let expected = exp_map(xi);
        let mut m = nalgebra::Matrix4::zeros();
        for r in 0..4 {
            for c in 0..4 {
                m[(r, c)] = e.t[4 * r + c];
            }
        }
        if (expected - m).norm() > 1e-9 {
            return Err(Error::schema(
                path.display().to_string(),
                format!("pose {i}: matrix does not match exp(xi)"),
            ));
        }
        poses.push(Pose::from_matrix(&m));
        anchored.push(e.anchored);
    }
    if !anchored.iter().any(|&a| a) {
        if let Some(first) = anchored.first_mut() {
            *first = true;
        }
    }
    Ok(PoseSet { poses, anchored })
}

/// Phantom source description inside a run config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub kind: crate::sim::PhantomKind,
    pub dims: [usize; 3],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            kind: crate::sim::PhantomKind::SmoothBlobs,
            dims: [96, 96, 96],
        }
    }
}

/// Run configuration: solver settings, simulation protocol and seed.
/// Unknown keys anywhere are rejected before any computation starts.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 means all hardware threads.
    pub threads: usize,
    pub solver: SolverConfig,
    pub protocol: SimProtocol,
    pub phantom: PhantomSpec,
}

impl RunConfig {
    /// Parse TOML or JSON depending on the file extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let is_json = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("json"))
            .unwrap_or(false);
        let cfg: RunConfig = if is_json {
            serde_json::from_str(&text)
                .map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?
        } else {
            toml::from_str(&text)
                .map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?
        };
        cfg.solver.validate()?;
        cfg.protocol.validate()?;
        Ok(cfg)
    }
}

/// Manifest of a generated sequence directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub n_frames: usize,
    /// Volume header filenames, in frame order, relative to the manifest.
    pub frames: Vec<String>,
    /// Ground-truth pose filename, relative to the manifest.
    pub truth_poses: String,
    pub protocol: SimProtocol,
    pub source_id: String,
    pub retries: u32,
}

impl Manifest {
    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        write_file(
            &Self::path_in(dir),
            serde_json::to_string_pretty(self)
                .expect("manifest serializes")
                .as_bytes(),
        )
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = Self::path_in(dir);
        let text = read_to_string(&path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::schema(path.display().to_string(), e.to_string()))
    }

    /// Load every frame volume listed by the manifest.
    pub fn load_frames(&self, dir: &Path) -> Result<Vec<Volume3>> {
        self.frames.iter().map(|f| read_volume(&dir.join(f))).collect()
    }
}

/// Write a whole generated sequence: frames, truth poses, manifest.
pub fn write_sequence(dir: &Path, seq: &crate::sim::GroundTruthSequence) -> Result<()> {
    let mut frame_names = Vec::with_capacity(seq.frames.len());
    for (i, frame) in seq.frames.iter().enumerate() {
        let stem = format!("frame_{i:03}");
        write_volume(dir, &stem, frame, Dtype::F32)?;
        frame_names.push(format!("{stem}.json"));
    }
    write_poses(&dir.join("truth_poses.json"), &seq.true_poses)?;
    Manifest {
        n_frames: seq.frames.len(),
        frames: frame_names,
        truth_poses: "truth_poses.json".to_string(),
        protocol: seq.protocol.clone(),
        source_id: seq.source_id.clone(),
        retries: seq.retries,
    }
    .write(dir)
}
