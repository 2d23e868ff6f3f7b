//! On-disk layout of a trained bundle: one weight file per stream and a
//! manifest tying them together.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{load_weights, save_weights};
use crate::datagen::write_atomic;
use crate::error::{Error, Result};
use crate::losses::Hyperparams;

use super::{AblationLevel, Net, StreamBundle};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;
pub const BUNDLE_MANIFEST: &str = "bundle.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub stream: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub variant: AblationLevel,
    pub num_classes: usize,
    pub u_threshold: f64,
    pub log_base: f64,
    pub hyperparams: Hyperparams,
    pub referable_map: Vec<bool>,
    /// Set when no hard-case stream was trained.
    pub sc_only: bool,
    pub weights: Vec<WeightEntry>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn streams(bundle: &StreamBundle) -> Vec<(&'static str, &Net)> {
    let mut v = vec![("us", &bundle.us), ("sc", &bundle.sc)];
    if let Some(hc) = &bundle.hc {
        v.push(("hc", hc));
    }
    v
}

impl StreamBundle {
    /// Writes `<stream>_net.json` for each stream, then the manifest.
    pub fn save(&self, dir: &Path) -> Result<BundleManifest> {
        self.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut weights = Vec::new();
        for (name, net) in streams(self) {
            let file = format!("{name}_net.json");
            let path = dir.join(&file);
            save_weights(&path, &net.backbone, &net.params)?;
            weights.push(WeightEntry {
                stream: name.to_string(),
                file,
                sha256: sha256_file(&path)?,
            });
        }
        let manifest = BundleManifest {
            format_version: BUNDLE_FORMAT_VERSION,
            variant: self.variant,
            num_classes: self.num_classes,
            u_threshold: self.u_threshold,
            log_base: self.log_base,
            hyperparams: self.hyperparams,
            referable_map: self.referable.clone(),
            sc_only: self.hc.is_none(),
            weights,
        };
        let json = serde_json::to_string_pretty(&manifest)? + "\n";
        write_atomic(&dir.join(BUNDLE_MANIFEST), json.as_bytes())?;
        Ok(manifest)
    }

    /// Loads a bundle and verifies every weight file against its recorded hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(BUNDLE_MANIFEST);
        if !mpath.exists() {
            return Err(Error::MissingArtifact(mpath));
        }
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: BundleManifest = serde_json::from_str(&text)?;
        if m.format_version != BUNDLE_FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported bundle format version {}",
                m.format_version
            )));
        }
        let get = |stream: &str| -> Result<Option<Net>> {
            let Some(entry) = m.weights.iter().find(|w| w.stream == stream) else {
                return Ok(None);
            };
            let path = dir.join(&entry.file);
            let (backbone, params) = load_weights(&path)?;
            if sha256_file(&path)? != entry.sha256 {
                return Err(Error::Integrity {
                    sample_id: entry.file.clone(),
                    msg: "weight file hash does not match the bundle manifest".into(),
                });
            }
            Ok(Some(Net { backbone, params }))
        };
        let missing = |s: &str| Error::MissingArtifact(dir.join(format!("{s}_net.json")));
        let us = get("us")?.ok_or_else(|| missing("us"))?;
        let sc = get("sc")?.ok_or_else(|| missing("sc"))?;
        let hc = get("hc")?;
        if hc.is_none() && !m.sc_only {
            return Err(missing("hc"));
        }
        let bundle = StreamBundle {
            num_classes: m.num_classes,
            u_threshold: m.u_threshold,
            log_base: m.log_base,
            hyperparams: m.hyperparams,
            referable: m.referable_map,
            variant: m.variant,
            us,
            sc,
            hc,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::constant_bundle;
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = constant_bundle(0.4, &[0.7, 0.2, 0.1], &[0.3, 0.3, 0.4]);
        let m = b.save(dir.path()).unwrap();
        assert_eq!(m.weights.len(), 3);
        assert!(!m.sc_only);
        let back = StreamBundle::load(dir.path()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn missing_weight_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        constant_bundle(0.4, &[0.7, 0.3], &[0.3, 0.7]).save(dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("hc_net.json")).unwrap();
        assert!(matches!(StreamBundle::load(dir.path()), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn tampered_weight_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        constant_bundle(0.4, &[0.7, 0.3], &[0.3, 0.7]).save(dir.path()).unwrap();
        let p = dir.path().join("sc_net.json");
        let text = std::fs::read_to_string(&p)
            .unwrap()
            .replace("\"rng_seed\": 0", "\"rng_seed\": 1");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(StreamBundle::load(dir.path()), Err(Error::Integrity { .. })));
    }

    #[test]
    fn sc_only_bundle_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = constant_bundle(0.4, &[0.7, 0.3], &[0.3, 0.7]);
        b.hc = None;
        assert!(b.save(dir.path()).unwrap().sc_only);
        assert!(StreamBundle::load(dir.path()).unwrap().is_sc_only());
    }
}
