//! Phantom datasets on disk: tensor files per item plus a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{generate_phantom, inject_anomaly, Phantom};
use crate::seed::derive_seed;
use crate::tensor_io::{load_image, load_mask, save_image, save_mask};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    ValHealthy,
    ValUnhealthy,
    TestHealthy,
    TestUnhealthy,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Train,
        Split::ValHealthy,
        Split::ValUnhealthy,
        Split::TestHealthy,
        Split::TestUnhealthy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValHealthy => "val-healthy",
            Split::ValUnhealthy => "val-unhealthy",
            Split::TestHealthy => "test-healthy",
            Split::TestUnhealthy => "test-unhealthy",
        }
    }

    pub fn is_unhealthy(self) -> bool {
        matches!(self, Split::ValUnhealthy | Split::TestUnhealthy)
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

/// Dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub n_train: usize,
    /// Items in each of the two validation splits.
    pub n_val: usize,
    /// Items in each of the two test splits.
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_train: 40,
            n_val: 8,
            n_test: 16,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::ValHealthy | Split::ValUnhealthy => self.n_val,
            Split::TestHealthy | Split::TestUnhealthy => self.n_test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub image: String,
    pub brain_mask: String,
    pub anomaly_mask: String,
    pub seed: u64,
    pub anomaly_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: DataConfig,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "unsupported manifest version {}",
                m.version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Deterministically generates one item of a split.
pub fn generate_item(cfg: &DataConfig, split: Split, index: usize) -> Result<(Phantom, u64)> {
    let seed = derive_seed(cfg.seed, (split.stream() << 32) | index as u64);
    let healthy = generate_phantom(seed, (cfg.height, cfg.width))?;
    if split.is_unhealthy() {
        let (sick, _) = inject_anomaly(&healthy, derive_seed(seed, 0xA40))?;
        Ok((sick, seed))
    } else {
        Ok((healthy, seed))
    }
}

/// Writes every split under `out_dir` and returns the manifest (also saved as `manifest.json`).
pub fn build_manifest(out_dir: impl AsRef<Path>, cfg: &DataConfig) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let mut entries = Vec::new();
    for split in Split::ALL {
        let n = cfg.count(split);
        if n == 0 {
            continue;
        }
        let dir = out_dir.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..n {
            let (ph, seed) = generate_item(cfg, split, i)?;
            let id = format!("{}-{i:04}", split.name());
            let rel = |kind: &str| format!("{}/{i:04}_{kind}.maed", split.name());
            let entry = ManifestEntry {
                id,
                split,
                image: rel("image"),
                brain_mask: rel("brain"),
                anomaly_mask: rel("anomaly"),
                seed,
                anomaly_pixels: ph.anomaly_mask.iter().filter(|&&v| v).count(),
            };
            save_image(out_dir.join(&entry.image), &ph.image)?;
            save_mask(out_dir.join(&entry.brain_mask), &ph.brain_mask)?;
            save_mask(out_dir.join(&entry.anomaly_mask), &ph.anomaly_mask)?;
            entries.push(entry);
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        config: cfg.clone(),
        entries,
    };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Loads the phantom referenced by `entry`, resolving paths against `root`.
pub fn load_entry(root: impl AsRef<Path>, entry: &ManifestEntry) -> Result<Phantom> {
    let root = root.as_ref();
    Ok(Phantom {
        image: load_image(root.join(&entry.image))?,
        brain_mask: load_mask(root.join(&entry.brain_mask))?,
        anomaly_mask: load_mask(root.join(&entry.anomaly_mask))?,
    })
}

/// Directory containing a manifest file.
pub fn manifest_root(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}
