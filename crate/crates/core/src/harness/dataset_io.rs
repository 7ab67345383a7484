//! On-disk demonstrations: a top-level index plus one directory per
//! trajectory holding a JSON manifest and flat little-endian `f64` arrays.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::TrajectoryRecord;
use crate::error::{Error, Result};
use crate::sim::{Image, RobotState};
use crate::tactile::{MarkerGrid, StrainMap, TactileFrame, MARKER_COLS, MARKER_ROWS};

pub const DATASET_VERSION: u32 = 1;
const INDEX: &str = "index.json";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Index {
    version: u32,
    trajectories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub expert_noise_std: f64,
    pub length: usize,
    pub cover_attenuation: f64,
    pub arrays: BTreeMap<String, ArraySpec>,
}

fn spec(name: &str, shape: Vec<usize>) -> (String, ArraySpec) {
    (name.to_string(), ArraySpec { file: format!("{name}.bin"), dtype: "f64le".into(), shape })
}

fn write_f64(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(f64::to_le_bytes).collect();
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn write_trajectory(dir: &Path, rec: &TrajectoryRecord) -> Result<()> {
    rec.validate()?;
    if rec.is_empty() {
        return Err(Error::dataset(dir, "refusing to write an empty trajectory"));
    }
    std::fs::create_dir_all(dir)?;
    let t = rec.len();
    let c = rec.num_cameras();
    let [ch, h, w] = rec.images[0].first().map(|i| i.shape()).unwrap_or([0, 0, 0]);
    let (th, tw) = (rec.tactile[0].height(), rec.tactile[0].width());
    let arrays: BTreeMap<String, ArraySpec> = [
        spec("images", vec![t, c, ch, h, w]),
        spec("markers", vec![t, MARKER_ROWS * MARKER_COLS, 2]),
        spec("depth", vec![t, th, tw]),
        spec("strain", vec![t, 3, th, tw]),
        spec("states", vec![t, 4]),
        spec("goals", vec![t, 4]),
    ]
    .into_iter()
    .collect();
    let manifest = Manifest {
        version: DATASET_VERSION,
        seed: rec.seed,
        expert_noise_std: rec.expert_noise_std,
        length: t,
        cover_attenuation: rec.tactile[0].strain.cover_attenuation,
        arrays,
    };
    for (ti, imgs) in rec.images.iter().enumerate() {
        if imgs.iter().any(|i| i.shape() != [ch, h, w]) {
            return Err(Error::dataset(dir, format!("image shape changes at step {ti}")));
        }
    }
    write_f64(&dir.join("images.bin"), rec.images.iter().flatten().flat_map(|i| i.data.iter().copied()))?;
    write_f64(
        &dir.join("markers.bin"),
        rec.tactile.iter().flat_map(|f| f.markers.displacements().iter().flat_map(|d| d.iter().copied())),
    )?;
    write_f64(&dir.join("depth.bin"), rec.tactile.iter().flat_map(|f| f.depth.iter().copied()))?;
    write_f64(&dir.join("strain.bin"), rec.tactile.iter().flat_map(|f| f.strain.strain.iter().copied()))?;
    write_f64(&dir.join("states.bin"), rec.states.iter().flat_map(|s| s.to_array()))?;
    write_f64(&dir.join("goals.bin"), rec.goals.iter().flatten().copied())?;
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn read_array(dir: &Path, manifest: &Manifest, name: &str) -> Result<Vec<f64>> {
    let spec = manifest
        .arrays
        .get(name)
        .ok_or_else(|| Error::dataset(dir, format!("manifest lists no `{name}` array")))?;
    if spec.dtype != "f64le" {
        return Err(Error::dataset(dir, format!("`{name}` has unsupported dtype {}", spec.dtype)));
    }
    if spec.shape.first() != Some(&manifest.length) {
        return Err(Error::dataset(
            dir,
            format!("`{name}` leading dimension {:?} disagrees with length {}", spec.shape.first(), manifest.length),
        ));
    }
    let bytes = std::fs::read(dir.join(&spec.file))?;
    let want = spec.shape.iter().product::<usize>() * 8;
    if bytes.len() != want {
        return Err(Error::dataset(
            dir,
            format!("`{name}` holds {} bytes but shape {:?} needs {want}", bytes.len(), spec.shape),
        ));
    }
    Ok(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk"))).collect())
}

fn dims(dir: &Path, manifest: &Manifest, name: &str, rank: usize) -> Result<Vec<usize>> {
    let shape = &manifest.arrays[name].shape;
    if shape.len() != rank {
        return Err(Error::dataset(dir, format!("`{name}` has rank {} instead of {rank}", shape.len())));
    }
    Ok(shape.clone())
}

pub fn read_trajectory(dir: &Path) -> Result<TrajectoryRecord> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::dataset(dir, format!("cannot read manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::dataset(dir, format!("bad manifest: {e}")))?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::dataset(dir, format!("unsupported dataset version {}", manifest.version)));
    }
    let t = manifest.length;
    let images = read_array(dir, &manifest, "images")?;
    let markers = read_array(dir, &manifest, "markers")?;
    let depth = read_array(dir, &manifest, "depth")?;
    let strain = read_array(dir, &manifest, "strain")?;
    let states = read_array(dir, &manifest, "states")?;
    let goals = read_array(dir, &manifest, "goals")?;

    let id = dims(dir, &manifest, "images", 5)?;
    let (c, ch, h, w) = (id[1], id[2], id[3], id[4]);
    let md = dims(dir, &manifest, "markers", 3)?;
    if md[1..] != [MARKER_ROWS * MARKER_COLS, 2] {
        return Err(Error::dataset(dir, format!("`markers` shape {md:?} is not [T, {}, 2]", MARKER_ROWS * MARKER_COLS)));
    }
    let dd = dims(dir, &manifest, "depth", 3)?;
    let (th, tw) = (dd[1], dd[2]);
    if dims(dir, &manifest, "strain", 4)?[1..] != [3, th, tw] {
        return Err(Error::dataset(dir, "`strain` shape disagrees with `depth`"));
    }
    for name in ["states", "goals"] {
        if dims(dir, &manifest, name, 2)?[1] != 4 {
            return Err(Error::dataset(dir, format!("`{name}` rows must have 4 entries")));
        }
    }

    let img_len = ch * h * w;
    let plane = th * tw;
    let mut rec = TrajectoryRecord {
        seed: manifest.seed,
        expert_noise_std: manifest.expert_noise_std,
        images: Vec::with_capacity(t),
        tactile: Vec::with_capacity(t),
        states: Vec::with_capacity(t),
        goals: Vec::with_capacity(t),
    };
    for ti in 0..t {
        rec.images.push(
            (0..c)
                .map(|ci| {
                    let o = (ti * c + ci) * img_len;
                    Image { channels: ch, height: h, width: w, data: images[o..o + img_len].to_vec() }
                })
                .collect(),
        );
        let m = &markers[ti * 2 * MARKER_ROWS * MARKER_COLS..(ti + 1) * 2 * MARKER_ROWS * MARKER_COLS];
        let grid = MarkerGrid::new(m.chunks_exact(2).map(|d| [d[0], d[1]]).collect())?;
        rec.tactile.push(TactileFrame {
            markers: grid,
            depth: depth[ti * plane..(ti + 1) * plane].to_vec(),
            strain: StrainMap {
                height: th,
                width: tw,
                strain: strain[ti * 3 * plane..(ti + 1) * 3 * plane].to_vec(),
                cover_attenuation: manifest.cover_attenuation,
            },
        });
        let s = &states[ti * 4..ti * 4 + 4];
        rec.states.push(RobotState::from_array([s[0], s[1], s[2], s[3]]));
        let g = &goals[ti * 4..ti * 4 + 4];
        rec.goals.push([g[0], g[1], g[2], g[3]]);
    }
    Ok(rec)
}

fn traj_name(i: usize) -> String {
    format!("traj_{i:04}")
}

pub fn write_dataset(dir: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let names: Vec<String> = (0..records.len()).map(traj_name).collect();
    for (name, rec) in names.iter().zip(records) {
        write_trajectory(&dir.join(name), rec)?;
    }
    let index = Index { version: DATASET_VERSION, trajectories: names };
    std::fs::write(dir.join(INDEX), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<TrajectoryRecord>> {
    let path: PathBuf = dir.join(INDEX);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::dataset(&path, format!("cannot read index: {e}")))?;
    let index: Index = serde_json::from_str(&text).map_err(|e| Error::dataset(&path, format!("bad index: {e}")))?;
    if index.version != DATASET_VERSION {
        return Err(Error::dataset(&path, format!("unsupported dataset version {}", index.version)));
    }
    index.trajectories.iter().map(|n| read_trajectory(&dir.join(n))).collect()
}
