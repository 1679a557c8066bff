use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::kitti::load_kitti_bin;
use super::synthetic::{gen_synthetic_pair, SceneRecipe};
use super::FramePair;
use crate::error::{Error, Result};
use crate::geometry::ply::{read_ply_cloud, write_ply};
use crate::geometry::{FlowField, Point, PointCloud, Pose};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Paths are relative to the manifest's directory. Clouds ending in `.bin`
/// are read as velodyne scans, anything else as PLY.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub p: PathBuf,
    pub q: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub pairs: Vec<ManifestEntry>,
}

/// Ground-truth sidecar of one pair.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_flow: Option<Vec<Point>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_pose: Option<Pose>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamic: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occluded: Option<Vec<bool>>,
}

/// A synthetic dataset: `count` scenes from `scene` with seeds
/// `scene.seed + i`, each with an object count drawn cyclically from
/// `objects[0]..=objects[1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecipe {
    pub scene: SceneRecipe,
    pub count: usize,
    #[serde(default)]
    pub objects: Option<[usize; 2]>,
}

impl DatasetRecipe {
    pub fn scene(&self, i: usize) -> Result<SceneRecipe> {
        let mut r = self.scene.clone();
        r.seed = self.scene.seed.wrapping_add(i as u64);
        if let Some([lo, hi]) = self.objects {
            if lo > hi {
                return Err(Error::Config(format!("object range {lo}..={hi} is empty")));
            }
            r.n_objects = lo + i % (hi - lo + 1);
        }
        Ok(r)
    }

    pub fn generate(&self) -> Result<Vec<FramePair>> {
        if self.count == 0 {
            return Err(Error::Config("dataset recipe asks for zero scenes".into()));
        }
        (0..self.count).map(|i| gen_synthetic_pair(&self.scene(i)?)).collect()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::json(path, e))
}

/// Writes each pair as two PLY clouds plus a JSON sidecar, and a manifest.
pub fn save_dataset(dir: &Path, pairs: &[FramePair]) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for (i, pair) in pairs.iter().enumerate() {
        pair.validate()?;
        let entry = ManifestEntry {
            p: format!("{i:05}_p.ply").into(),
            q: format!("{i:05}_q.ply").into(),
            meta: Some(format!("{i:05}.json").into()),
        };
        write_ply(&dir.join(&entry.p), pair.p.points(), None)?;
        write_ply(&dir.join(&entry.q), pair.q.points(), None)?;
        let meta = PairMeta {
            gt_flow: pair.gt_flow.as_ref().map(|f| f.vectors().to_vec()),
            gt_pose: pair.gt_pose,
            dynamic: pair.dynamic.clone(),
            occluded: pair.occluded.clone(),
        };
        write_json(&dir.join(entry.meta.as_ref().expect("set above")), &meta)?;
        manifest.pairs.push(entry);
    }
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Reads a velodyne `.bin` file or, for any other extension, a PLY file.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    if path.extension().is_some_and(|e| e == "bin") {
        PointCloud::new(load_kitti_bin(path)?)
    } else {
        read_ply_cloud(path)
    }
}

/// Loads every pair listed in `dir/manifest.json`.
pub fn load_dataset(dir: &Path) -> Result<Vec<FramePair>> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    let mut out = Vec::with_capacity(manifest.pairs.len());
    for entry in &manifest.pairs {
        let mut pair = FramePair::unlabeled(read_cloud(&dir.join(&entry.p))?, read_cloud(&dir.join(&entry.q))?);
        if let Some(m) = &entry.meta {
            let path = dir.join(m);
            let meta: PairMeta = read_json(&path)?;
            pair.gt_flow = meta.gt_flow.map(FlowField::new).transpose()?;
            pair.gt_pose = meta.gt_pose;
            pair.dynamic = meta.dynamic;
            pair.occluded = meta.occluded;
            pair.validate()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        }
        out.push(pair);
    }
    Ok(out)
}
