//! Synthetic dataset directories described by a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::substream;
use super::synth::{EndmemberLib, Scene, SceneParams};
use super::{load_cube, save_cube, HsiCube};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const LIBRARY_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeEntry {
    /// Relative to the manifest directory.
    pub file: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub params: SceneParams,
    pub cubes: Vec<CubeEntry>,
}

impl DatasetManifest {
    /// First `train` cubes go to training, the next `val` to validation, the rest to test.
    pub fn plan(seed: u64, params: SceneParams, train: usize, val: usize, test: usize) -> Self {
        let cubes = (0..train + val + test)
            .map(|i| CubeEntry {
                file: format!("cube_{i:04}.hsic"),
                split: if i < train {
                    Split::Train
                } else if i < train + val {
                    Split::Val
                } else {
                    Split::Test
                },
            })
            .collect();
        Self { seed, params, cubes }
    }

    pub fn count(&self, split: Split) -> usize {
        self.cubes.iter().filter(|c| c.split == split).count()
    }

    /// Cube `index` of this manifest. All cubes share one endmember library.
    pub fn synthesize(&self, index: usize) -> Result<Scene> {
        let lib = self.library()?;
        Scene::generate(&lib, &self.params, &mut substream(self.seed, index as u64))
    }

    pub fn library(&self) -> Result<EndmemberLib> {
        EndmemberLib::generate(
            self.params.endmembers,
            self.params.bands,
            &mut substream(self.seed, LIBRARY_STREAM),
        )
    }

    /// Write every cube plus the manifest into `dir`, which is created if needed.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let lib = self.library()?;
        for (i, entry) in self.cubes.iter().enumerate() {
            let scene = Scene::generate(&lib, &self.params, &mut substream(self.seed, i as u64))?;
            save_cube(&scene.cube, &dir.join(&entry.file))?;
        }
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
        fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = m.cubes.iter().find(|c| !seen.insert(c.file.as_str())) {
            return Err(Error::Data(format!("manifest lists {} twice", dup.file)));
        }
        Ok(m)
    }
}

/// A manifest together with its cubes loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    cubes: Vec<HsiCube>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let cubes = manifest
            .cubes
            .iter()
            .map(|c| load_cube(&dir.join(&c.file)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dir: dir.to_path_buf(), manifest, cubes })
    }

    /// Build in memory without touching disk.
    pub fn in_memory(manifest: DatasetManifest) -> Result<Self> {
        let lib = manifest.library()?;
        let cubes = (0..manifest.cubes.len())
            .map(|i| {
                Scene::generate(&lib, &manifest.params, &mut substream(manifest.seed, i as u64))
                    .map(|s| s.cube)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dir: PathBuf::new(), manifest, cubes })
    }

    pub fn split(&self, split: Split) -> Vec<(&str, &HsiCube)> {
        self.manifest
            .cubes
            .iter()
            .zip(&self.cubes)
            .filter(|(e, _)| e.split == split)
            .map(|(e, c)| (e.file.as_str(), c))
            .collect()
    }
}
