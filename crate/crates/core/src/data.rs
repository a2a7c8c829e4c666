//! Task registry, synthetic CT-like cases, preprocessing and file formats.
//!
//! Synthetic cases are drawn from ChaCha8 seeded with the case seed, using
//! the task id as the stream number, so every `(task, seed, shape)` triple
//! maps to the same volume on every platform.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use transdod_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// One partially labeled segmentation task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TaskDescriptor {
    pub id: usize,
    pub name: &'static str,
    pub organ_labeled: bool,
    pub tumor_labeled: bool,
}

/// The seven benchmark tasks and which structures each one annotates.
pub const TASKS: [TaskDescriptor; 7] = [
    TaskDescriptor {
        id: 0,
        name: "liver",
        organ_labeled: true,
        tumor_labeled: true,
    },
    TaskDescriptor {
        id: 1,
        name: "kidney",
        organ_labeled: true,
        tumor_labeled: true,
    },
    TaskDescriptor {
        id: 2,
        name: "hepatic_vessel",
        organ_labeled: true,
        tumor_labeled: true,
    },
    TaskDescriptor {
        id: 3,
        name: "pancreas",
        organ_labeled: true,
        tumor_labeled: true,
    },
    TaskDescriptor {
        id: 4,
        name: "colon",
        organ_labeled: false,
        tumor_labeled: true,
    },
    TaskDescriptor {
        id: 5,
        name: "lung",
        organ_labeled: false,
        tumor_labeled: true,
    },
    TaskDescriptor {
        id: 6,
        name: "spleen",
        organ_labeled: true,
        tumor_labeled: false,
    },
];

pub fn task(id: usize) -> Result<TaskDescriptor> {
    TASKS.get(id).copied().ok_or(Error::Task {
        task: id,
        tasks: TASKS.len(),
    })
}

pub const BACKGROUND_MEAN: f64 = -0.6;
pub const ORGAN_MEAN: f64 = 0.3;
pub const TUMOR_MEAN: f64 = -0.2;
pub const NOISE_STD: f64 = 0.05;
/// Intensity window half-width in Hounsfield units.
pub const HU_WINDOW: f64 = 325.0;
/// Smallest generated extent along any axis.
pub const MIN_EXTENT: usize = 16;

/// A labeled volume: intensities `[1, D, W, H]` in `[-1, 1]`, labels in
/// `{0, 1, 2}` (background, organ, tumor).
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeCase {
    pub image: Tensor<f32>,
    pub labels: Vec<u8>,
    pub task_id: usize,
    pub seed: u64,
}

impl VolumeCase {
    pub fn dims(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[1], s[2], s[3]]
    }
}

/// Clamps to the `[-325, 325]` HU window and scales to `[-1, 1]`.
pub fn preprocess_ct<T: Scalar>(hu: &Tensor<T>) -> Tensor<T> {
    let w = T::of(HU_WINDOW);
    Tensor::new(
        hu.shape().to_vec(),
        hu.data().iter().map(|&v| v.max(-w).min(w) / w).collect(),
    )
    .expect("same shape")
}

fn in_ellipsoid(p: [f64; 3], center: [f64; 3], semi: [f64; 3]) -> bool {
    (0..3).map(|a| ((p[a] - center[a]) / semi[a]).powi(2)).sum::<f64>() <= 1.0
}

/// Voxels whose integer coordinates fall inside the ellipsoid, row-major.
pub fn ellipsoid_mask(dims: [usize; 3], center: [f64; 3], semi: [f64; 3]) -> Vec<bool> {
    let mut out = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                out.push(in_ellipsoid([z as f64, y as f64, x as f64], center, semi));
            }
        }
    }
    out
}

/// Geometry drawn for one synthetic case.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseGeometry {
    pub organ_center: [f64; 3],
    pub organ_semi_axes: [f64; 3],
    /// `(center, radius)` of each tumor sphere.
    pub tumors: Vec<([f64; 3], f64)>,
}

fn draw_geometry(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> CaseGeometry {
    let n = dims.map(|v| v as f64);
    let organ_center = n.map(|v| v * rng.random_range(0.35..0.65));
    let organ_semi_axes = n.map(|v| v * rng.random_range(0.22..0.32));
    let a_min = organ_semi_axes.iter().copied().fold(f64::INFINITY, f64::min);
    let count = rng.random_range(0..=2usize);
    let tumors = (0..count)
        .map(|_| {
            let radius = a_min * rng.random_range(0.5..0.7);
            let mut dir = [0.0; 3].map(|_: f64| rng.sample::<f64, _>(StandardNormal));
            let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            dir.iter_mut().for_each(|v| *v /= len);
            // Normalized distance keeps the whole sphere inside the organ.
            let reach = rng.random_range(0.0..1.0) * 0.9 * (1.0 - radius / a_min);
            let center = [0, 1, 2].map(|a| organ_center[a] + reach * dir[a] * organ_semi_axes[a]);
            (center, radius)
        })
        .collect();
    CaseGeometry {
        organ_center,
        organ_semi_axes,
        tumors,
    }
}

/// Draws one case. Label values are restricted to what `task` annotates:
/// tumor-only tasks drop the organ label, organ-only tasks fold tumors into
/// the organ.
pub fn generate_case(task: &TaskDescriptor, seed: u64, dims: [usize; 3]) -> Result<VolumeCase> {
    if dims.iter().any(|&n| n < MIN_EXTENT) {
        return Err(Error::config(format!(
            "case shape {dims:?} must be at least {MIN_EXTENT} per axis"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task.id as u64);
    let geo = draw_geometry(&mut rng, dims);
    let n = dims[0] * dims[1] * dims[2];
    let mut hu = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f64, y as f64, x as f64];
                let organ = in_ellipsoid(p, geo.organ_center, geo.organ_semi_axes);
                let tumor = organ
                    && geo
                        .tumors
                        .iter()
                        .any(|(c, r)| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= r * r);
                let (mean, label) = match (organ, tumor) {
                    (_, true) => (TUMOR_MEAN, 2u8),
                    (true, false) => (ORGAN_MEAN, 1),
                    _ => (BACKGROUND_MEAN, 0),
                };
                let noise: f64 = rng.sample(StandardNormal);
                hu.push(((mean + NOISE_STD * noise) * HU_WINDOW) as f32);
                labels.push(match (label, task.organ_labeled, task.tumor_labeled) {
                    (1, false, _) => 0,
                    (2, false, _) => 2,
                    (2, true, false) => 1,
                    (l, _, _) => l,
                });
            }
        }
    }
    let image = preprocess_ct(&Tensor::new([1, dims[0], dims[1], dims[2]], hu)?);
    Ok(VolumeCase {
        image,
        labels,
        task_id: task.id,
        seed,
    })
}

/// Organ geometry of a generated case, for inspection and tests.
pub fn case_geometry(task: &TaskDescriptor, seed: u64, dims: [usize; 3]) -> CaseGeometry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task.id as u64);
    draw_geometry(&mut rng, dims)
}

pub const VOLUME_MAGIC: &[u8; 8] = b"MOTSVOL1";
pub const VOLUME_HEADER_BYTES: usize = 32;

/// Serializes a case: magic, `u32` D/W/H, `u32` task, `u64` seed, `f32`
/// intensities, `u8` labels, all little-endian.
pub fn encode_volume(case: &VolumeCase) -> Vec<u8> {
    let dims = case.dims();
    let n = dims.iter().product::<usize>();
    let mut out = Vec::with_capacity(VOLUME_HEADER_BYTES + 5 * n);
    out.extend_from_slice(VOLUME_MAGIC);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(case.task_id as u32).to_le_bytes());
    out.extend_from_slice(&case.seed.to_le_bytes());
    for v in case.image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&case.labels);
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<VolumeCase> {
    if bytes.len() < VOLUME_HEADER_BYTES {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    if &bytes[..8] != VOLUME_MAGIC {
        return Err(Error::format(0, "bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let dims = [u32_at(8), u32_at(12), u32_at(16)];
    let task_id = u32_at(20);
    let seed = u64::from_le_bytes(bytes[24..32].try_into().expect("8 bytes"));
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::format(8, format!("invalid dimensions {dims:?}")))?;
    let payload = n
        .checked_mul(5)
        .and_then(|p| p.checked_add(VOLUME_HEADER_BYTES))
        .ok_or_else(|| Error::format(8, format!("dimensions {dims:?} overflow")))?;
    if bytes.len() != payload {
        return Err(Error::format(
            bytes.len().min(payload) as u64,
            format!("expected {payload} bytes, found {}", bytes.len()),
        ));
    }
    let image_end = VOLUME_HEADER_BYTES + 4 * n;
    let image: Vec<f32> = bytes[VOLUME_HEADER_BYTES..image_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let labels = bytes[image_end..].to_vec();
    if let Some(i) = labels.iter().position(|&l| l > 2) {
        return Err(Error::format(
            (image_end + i) as u64,
            format!("label {} out of range", labels[i]),
        ));
    }
    Ok(VolumeCase {
        image: Tensor::new([1, dims[0], dims[1], dims[2]], image)?,
        labels,
        task_id,
        seed,
    })
}

pub fn write_volume(case: &VolumeCase, path: &Path) -> Result<()> {
    fs::write(path, encode_volume(case)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<VolumeCase> {
    decode_volume(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: String,
    pub task_id: usize,
    pub split: Split,
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(entries)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Absolute location of a manifest entry.
pub fn resolve_entry(manifest: &Path, entry: &ManifestEntry) -> PathBuf {
    let p = Path::new(&entry.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Loads every case of a manifest, checking that header and manifest agree.
pub fn load_cases(manifest: &Path) -> Result<Vec<(ManifestEntry, VolumeCase)>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|e| {
            let case = read_volume(&resolve_entry(manifest, &e))?;
            if case.task_id != e.task_id {
                return Err(Error::config(format!(
                    "{}: header task {} but manifest says {}",
                    e.path, case.task_id, e.task_id
                )));
            }
            Ok((e, case))
        })
        .collect()
}
